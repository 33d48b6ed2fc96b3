//! Subcommand implementations. Every command resolves its inputs up front,
//! runs pure library calls, and writes outputs atomically, so a killed
//! process never leaves a half-written file behind. Reports carry the
//! resolved configuration and the crate version, never timestamps: the same
//! invocation produces the same bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use bsa::attn::{full_attention, sparse_attention};
use bsa::blocks::{pool_blocks, BlockSpec, Dims3};
use bsa::kvsparse::{
    build_q2k, build_q2k_for_keep_fraction, pooled_scores, Q2KMap, SelectionMode, DEFAULT_TAU,
};
use bsa::latents::{gen_bundle, read_bundle, read_output, write_bundle, write_output, Dist};
use bsa::metrics::{flop_report, FlopReport};
use bsa::qsparse::{select_queries, select_queries_with, Similarity};
use bsa::schedule::{knobs_for_sparsity, AnnealSchedule};
use bsa::{Error, Result};

use crate::{BenchArgs, CompareArgs, GenArgs, RunArgs, SchedArgs};

const FULL_FILE: &str = "full.bsao";
const SPARSE_FILE: &str = "sparse.bsao";
const Q2K_FILE: &str = "q2k.json";
const FLOPS_FILE: &str = "flops.json";
const REPORT_FILE: &str = "report.json";

fn parse_shape(s: &str) -> Result<(u32, u32, u32, u32)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!("shape {s:?} is not of the form TxHxWxd")));
    }
    let mut v = [0u32; 4];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| Error::Config(format!("shape component {part:?} is not an integer")))?;
    }
    Ok((v[0], v[1], v[2], v[3]))
}

fn parse_metric(s: &str) -> Result<Similarity> {
    match s {
        "cosine" => Ok(Similarity::Cosine),
        "dot" => Ok(Similarity::Dot),
        other => Err(Error::Config(format!(
            "unknown metric {other:?} (expected cosine | dot)"
        ))),
    }
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_text_atomic(path, &text)
}

pub fn gen(a: GenArgs) -> Result<u8> {
    let (t, h, w, d) = parse_shape(&a.shape)?;
    let dist = Dist::from_str(&a.dist)?;
    let bundle = gen_bundle(a.seed, t, h, w, d, dist)?;
    write_bundle(&a.out, &bundle)?;
    let bytes = fs::metadata(&a.out)?.len();
    println!(
        "wrote {} L={} d={} bytes={}",
        a.out.display(),
        bundle.tokens(),
        bundle.dim(),
        bytes
    );
    Ok(0)
}

/// Optional JSON config for `run`. Explicit flags override these values.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFileConfig {
    block: Option<String>,
    window: Option<String>,
    r: Option<f64>,
    sparsity: Option<f64>,
    k: Option<usize>,
    mode: Option<String>,
    tau: Option<f64>,
    metric: Option<String>,
}

/// The configuration a run actually executed with, embedded in report.json.
#[derive(Debug, Serialize)]
struct ResolvedConfig {
    bundle: String,
    shape: String,
    block: String,
    window: Option<String>,
    r: f64,
    sparsity_target: Option<f64>,
    kv_keep_target: Option<f64>,
    k: usize,
    mode: String,
    tau: f64,
    metric: String,
}

#[derive(Debug, Serialize)]
struct RunOutputs {
    full: String,
    sparse: String,
    q2k: String,
    flops: String,
}

#[derive(Debug, Serialize)]
struct RunReport {
    version: String,
    config: ResolvedConfig,
    pair_sparsity: f64,
    s_q: f64,
    s_kv: f64,
    flop_ratio: f64,
    retained_queries: usize,
    zero_norm_rows: usize,
    mean_keep_fraction: f64,
    blocks: usize,
    outputs: RunOutputs,
}

pub fn run(a: RunArgs) -> Result<u8> {
    let file: RunFileConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?,
        None => RunFileConfig::default(),
    };
    let block_s = a.block.or(file.block).unwrap_or_else(|| "4x4x4".into());
    let window_s = a.window.or(file.window).unwrap_or_else(|| "2x2x2".into());
    let r_flag = a.r.or(file.r).unwrap_or(0.5);
    let sparsity = a.sparsity.or(file.sparsity);
    let k_flag = a.k.or(file.k);
    let mode_s = a.mode.or(file.mode).unwrap_or_else(|| "unified_prob".into());
    let tau = a.tau.or(file.tau).unwrap_or(DEFAULT_TAU);
    let metric_s = a.metric.or(file.metric).unwrap_or_else(|| "cosine".into());

    let bundle = read_bundle(&a.bundle)?;
    let grid = Dims3::new(bundle.t as usize, bundle.h as usize, bundle.w as usize);
    let cuboid = Dims3::from_str(&block_s)?;
    let window = if window_s == "none" {
        None
    } else {
        Some(Dims3::from_str(&window_s)?)
    };
    let mut spec = BlockSpec::new(grid, cuboid)?;
    if let Some(wdims) = window {
        spec = spec.with_window(wdims)?;
    }
    let mode = SelectionMode::from_str(&mode_s)?;
    let metric = parse_metric(&metric_s)?;
    let d = bundle.dim();
    let n = spec.num_blocks();

    // A sparsity target fixes both knobs; otherwise r and k apply directly.
    let (r, kv_keep_target) = match sparsity {
        Some(s) => {
            let (r, keep) = knobs_for_sparsity(s, r_flag)?;
            (r, Some(keep))
        }
        None => (r_flag, None),
    };

    let qsel = select_queries_with(&bundle.q, d, &spec, r, window.is_some(), metric)?;
    let q_c = pool_blocks(&bundle.q, d, &spec)?;
    let k_c = pool_blocks(&bundle.k, d, &spec)?;
    let scores = pooled_scores(&q_c, &k_c, d, d)?;

    let (q2k, k_used) = match (kv_keep_target, k_flag) {
        (Some(keep), _) if keep >= 1.0 => (Q2KMap::select_all(n, n, mode), n),
        (Some(keep), _) => build_q2k_for_keep_fraction(&scores, keep, mode, tau)?,
        (None, Some(k)) => (build_q2k(&scores, k, mode, tau)?, k),
        (None, None) => (build_q2k(&scores, n, mode, tau)?, n),
    };

    let full = full_attention(&bundle)?;
    let sparse = sparse_attention(&bundle, &spec, &qsel, &q2k)?;
    let flops = flop_report(d, &spec, &qsel, &q2k)?;

    fs::create_dir_all(&a.out_dir)?;
    write_output(&a.out_dir.join(FULL_FILE), full.l as u32, full.d as u32, &full.o)?;
    write_output(
        &a.out_dir.join(SPARSE_FILE),
        sparse.l as u32,
        sparse.d as u32,
        &sparse.o,
    )?;
    write_json_atomic(&a.out_dir.join(Q2K_FILE), &q2k)?;
    write_json_atomic(&a.out_dir.join(FLOPS_FILE), &flops)?;

    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").into(),
        config: ResolvedConfig {
            bundle: a.bundle.display().to_string(),
            shape: format!("{}x{}x{}x{}", bundle.t, bundle.h, bundle.w, bundle.d),
            block: block_s,
            window: window.is_some().then(|| window_s.clone()),
            r,
            sparsity_target: sparsity,
            kv_keep_target,
            k: k_used,
            mode: mode.to_string(),
            tau,
            metric: metric_s,
        },
        pair_sparsity: flops.pair_sparsity,
        s_q: flops.s_q,
        s_kv: flops.s_kv,
        flop_ratio: flops.flop_ratio,
        retained_queries: qsel.num_retained(),
        zero_norm_rows: qsel.zero_norm_rows,
        mean_keep_fraction: q2k.mean_keep_fraction(),
        blocks: n,
        outputs: RunOutputs {
            full: FULL_FILE.into(),
            sparse: SPARSE_FILE.into(),
            q2k: Q2K_FILE.into(),
            flops: FLOPS_FILE.into(),
        },
    };
    write_json_atomic(&a.out_dir.join(REPORT_FILE), &report)?;

    println!(
        "L={} blocks={} retained_queries={} pair_sparsity={} flop_ratio={}",
        full.l,
        n,
        qsel.num_retained(),
        flops.pair_sparsity,
        flops.flop_ratio
    );
    println!("outputs in {}", a.out_dir.display());
    Ok(0)
}

pub fn compare(a: CompareArgs) -> Result<u8> {
    let (la, da, xa) = read_output(&a.a)?;
    let (lb, db, xb) = read_output(&a.b)?;
    if la != lb || da != db {
        return Err(Error::InvalidShape(format!(
            "shape mismatch: {} is {la}x{da}, {} is {lb}x{db}",
            a.a.display(),
            a.b.display()
        )));
    }
    let mut max_abs = 0.0f64;
    let mut sum_abs = 0.0f64;
    let mut sum_sq = 0.0f64;
    for (&x, &y) in xa.iter().zip(&xb) {
        let diff = (x as f64 - y as f64).abs();
        max_abs = max_abs.max(diff);
        sum_abs += diff;
        sum_sq += diff * diff;
    }
    let count = xa.len() as f64;
    println!(
        "max_abs={max_abs} mean_abs={} rmse={}",
        sum_abs / count,
        (sum_sq / count).sqrt()
    );
    if max_abs > a.tol {
        println!("FAIL: max_abs {max_abs} exceeds tol {}", a.tol);
        Ok(1)
    } else {
        println!("OK: within tol {}", a.tol);
        Ok(0)
    }
}

pub fn bench(a: BenchArgs) -> Result<u8> {
    let mut targets = Vec::new();
    for part in a.sparsities.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let s: f64 = part
            .parse()
            .map_err(|_| Error::Config(format!("sparsity {part:?} is not a number")))?;
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Config(format!("sparsity target {s} outside [0,1)")));
        }
        targets.push(s);
    }
    if targets.is_empty() {
        return Err(Error::Config("no sparsity targets given".into()));
    }
    targets.sort_by(f64::total_cmp);
    targets.dedup();

    let bundle = read_bundle(&a.bundle)?;
    let grid = Dims3::new(bundle.t as usize, bundle.h as usize, bundle.w as usize);
    let cuboid = Dims3::from_str(a.block.as_deref().unwrap_or("4x4x4"))?;
    let spec = BlockSpec::new(grid, cuboid)?;
    let r_fixed = a.r.unwrap_or(0.5);
    let d = bundle.dim();
    let n = spec.num_blocks();

    let q_c = pool_blocks(&bundle.q, d, &spec)?;
    let k_c = pool_blocks(&bundle.k, d, &spec)?;
    let scores = pooled_scores(&q_c, &k_c, d, d)?;

    let mut csv = format!("s_target,{},ratio_ref\n", FlopReport::csv_header());
    for &s in &targets {
        let (r, keep) = knobs_for_sparsity(s, r_fixed)?;
        let qsel = select_queries(&bundle.q, d, &spec, r, false)?;
        // KV tuning runs in two_stage mode, whose keep fraction moves
        // monotonically with k; the executor cost model only needs the map.
        let q2k = if keep >= 1.0 {
            Q2KMap::select_all(n, n, SelectionMode::TwoStage)
        } else {
            build_q2k_for_keep_fraction(&scores, keep, SelectionMode::TwoStage, DEFAULT_TAU)?.0
        };
        let rep = flop_report(d, &spec, &qsel, &q2k)?;
        let ratio_ref = 1.0 / (1.0 - s);
        csv.push_str(&format!("{s},{},{ratio_ref}\n", rep.csv_row()));
    }

    print!("{csv}");
    if let Some(out) = &a.out {
        write_text_atomic(out, &csv)?;
    }
    Ok(0)
}

pub fn sched(a: SchedArgs) -> Result<u8> {
    let sched = AnnealSchedule::default();
    let horizon = a.horizon.unwrap_or(9000);
    if horizon == 0 {
        return Err(Error::Config("horizon must be positive".into()));
    }
    let mut csv = String::from("step,sparsity,r,kv_fraction,kv_anneal\n");
    for step in 0..=a.steps {
        let s = sched.sparsity_at_step(step);
        let (r, kv) = knobs_for_sparsity(s, sched.r_fixed)?;
        let glide = sched.kv_fraction_at_step(step, horizon);
        csv.push_str(&format!("{step},{s},{r},{kv},{glide}\n"));
    }
    print!("{csv}");
    if let Some(out) = &a.out {
        write_text_atomic(out, &csv)?;
    }
    Ok(0)
}
