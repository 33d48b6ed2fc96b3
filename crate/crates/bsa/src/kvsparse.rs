//! KV-side sparsification: pooled block scores, the statistical dynamic
//! threshold, minimal cumulative-mass index sets, and the q2k mapping.
//!
//! The threshold is p = mean + std * U(1 - k/n) with U the standard normal
//! quantile and std the population deviation. Two readings of where that
//! formula lives are kept:
//!
//! * `unified_prob` (default): the row is softmaxed first, the threshold is
//!   computed on the probabilities and consumed directly as the cumulative
//!   mass target. One parameter, self-consistent, but note that growing k
//!   lowers p and therefore shrinks the selected set.
//! * `two_stage`: the threshold filters raw scores into candidates, then the
//!   minimal index set is taken over the candidates' softmax with a fixed
//!   mass target tau.

use serde::{Deserialize, Serialize};

use crate::attn::softmax_row;
use crate::error::{Error, Result};

/// Stage-2 cumulative mass target for `two_stage` selection.
pub const DEFAULT_TAU: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    UnifiedProb,
    TwoStage,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified_prob" => Ok(SelectionMode::UnifiedProb),
            "two_stage" => Ok(SelectionMode::TwoStage),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected unified_prob | two_stage)"
            ))),
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionMode::UnifiedProb => "unified_prob",
            SelectionMode::TwoStage => "two_stage",
        })
    }
}

/// Pooled query-block x key-block score matrix, row-major N_q x N.
#[derive(Clone, Debug)]
pub struct BlockScores {
    pub n_q: usize,
    pub n: usize,
    pub s: Vec<f64>,
}

impl BlockScores {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.s[i * self.n..(i + 1) * self.n]
    }
}

/// S[i][j] = (Q_c[i] . K_c[j]) / sqrt(d_k) over pooled representatives.
pub fn pooled_scores(q_c: &[f64], k_c: &[f64], d: usize, d_k: usize) -> Result<BlockScores> {
    if d == 0 || d_k == 0 {
        return Err(Error::InvalidShape("zero head dimension".into()));
    }
    if q_c.len() % d != 0 || k_c.len() % d != 0 {
        return Err(Error::InvalidShape(format!(
            "representative matrices ({} and {} values) not multiples of d={d}",
            q_c.len(),
            k_c.len()
        )));
    }
    let n_q = q_c.len() / d;
    let n = k_c.len() / d;
    let scale = (d_k as f64).sqrt();
    let rows = crate::par::map_indexed(n_q, |i| {
        let qi = &q_c[i * d..(i + 1) * d];
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let kj = &k_c[j * d..(j + 1) * d];
            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            row.push(dot / scale);
        }
        row
    });
    Ok(BlockScores { n_q, n, s: rows.concat() })
}

/// Inverse standard normal CDF, Acklam's rational approximation.
/// Absolute error stays below 1e-8 for arguments away from the extreme
/// tails (|z| < 6), which covers every clamped use here.
pub fn normal_quantile(u: f64) -> Result<f64> {
    if !(u.is_finite() && u > 0.0 && u < 1.0) {
        return Err(Error::Config(format!("quantile argument {u} outside (0,1)")));
    }

    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let z = if u < P_LOW {
        let q = (-2.0 * u.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if u <= 1.0 - P_LOW {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - u).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    Ok(z)
}

/// p = mean(row) + std(row) * U(1 - k/n), population std, quantile argument
/// clamped to [1/(2n), 1 - 1/(2n)].
pub fn dynamic_threshold(row: &[f64], k: usize) -> Result<f64> {
    let n = row.len();
    if n == 0 {
        return Err(Error::InvalidShape("empty score row".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("k={k} outside [1, {n}]")));
    }
    let nf = n as f64;
    let mean = row.iter().sum::<f64>() / nf;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / nf;
    let std = var.sqrt();
    let lo = 1.0 / (2.0 * nf);
    let arg = (1.0 - k as f64 / nf).clamp(lo, 1.0 - lo);
    Ok(mean + std * normal_quantile(arg)?)
}

/// Minimal index set: sort probabilities descending (ties to the lower id),
/// take the shortest prefix with cumulative mass >= p, return ascending ids.
/// Never empty; a zero-probability tail is never entered.
pub fn select_min_index_set(probs: &[f64], p: f64) -> Result<Vec<usize>> {
    if probs.is_empty() {
        return Err(Error::InvalidShape("empty probability row".into()));
    }
    if p <= 0.0 || p > 1.0 {
        return Err(Error::Config(format!("mass target {p} outside (0,1]")));
    }
    if probs.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Config("probabilities must be finite and >= 0".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = Vec::new();
    let mut cum = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        out.push(i);
        cum += probs[i];
        if cum >= p {
            break;
        }
        if let Some(&next) = order.get(pos + 1) {
            if probs[next] == 0.0 {
                break; // remaining mass is zero; p is unreachable
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Per-query-block selected KV blocks, ready for the gathered executor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Q2KMap {
    pub q2k_num: Vec<usize>,
    pub q2k_index: Vec<Vec<usize>>,
    /// Threshold p actually consumed per row (mass target, or the raw-score
    /// cut in two_stage).
    pub thresholds: Vec<f64>,
    pub mode: SelectionMode,
    pub k: usize,
    pub n: usize,
}

impl Q2KMap {
    /// Every query block attends every KV block.
    pub fn select_all(n_q: usize, n: usize, mode: SelectionMode) -> Self {
        Self {
            q2k_num: vec![n; n_q],
            q2k_index: (0..n_q).map(|_| (0..n).collect()).collect(),
            thresholds: vec![1.0; n_q],
            mode,
            k: n,
            n,
        }
    }

    pub fn mean_keep_fraction(&self) -> f64 {
        let total: usize = self.q2k_num.iter().sum();
        total as f64 / (self.q2k_num.len() as f64 * self.n as f64)
    }
}

pub fn build_q2k(scores: &BlockScores, k: usize, mode: SelectionMode, tau: f64) -> Result<Q2KMap> {
    let n = scores.n;
    if k == 0 || k > n {
        return Err(Error::Config(format!("k={k} outside [1, {n}]")));
    }
    if mode == SelectionMode::TwoStage && !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("mass target tau={tau} outside (0,1]")));
    }

    let rows: Vec<Result<(Vec<usize>, f64)>> = crate::par::map_indexed(scores.n_q, |i| {
        let row = scores.row(i);
        match mode {
            SelectionMode::UnifiedProb => {
                let probs = softmax_row(row)?;
                let p = dynamic_threshold(&probs, k)?;
                let p = p.clamp(f64::MIN_POSITIVE, 1.0);
                Ok((select_min_index_set(&probs, p)?, p))
            }
            SelectionMode::TwoStage => {
                let p = dynamic_threshold(row, k)?;
                // k = n disables the candidate filter entirely
                let mut cand: Vec<usize> = if k == n {
                    (0..n).collect()
                } else {
                    (0..n).filter(|&j| row[j] >= p).collect()
                };
                if cand.is_empty() {
                    // threshold above the max; fall back to the argmax
                    let best = (0..n)
                        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                        .unwrap();
                    cand.push(best);
                }
                let cand_scores: Vec<f64> = cand.iter().map(|&j| row[j]).collect();
                let probs = softmax_row(&cand_scores)?;
                let local = select_min_index_set(&probs, tau)?;
                Ok((local.into_iter().map(|li| cand[li]).collect(), p))
            }
        }
    });

    let mut q2k_index = Vec::with_capacity(scores.n_q);
    let mut thresholds = Vec::with_capacity(scores.n_q);
    for row in rows {
        let (idx, p) = row?;
        thresholds.push(p);
        q2k_index.push(idx);
    }
    Ok(Q2KMap {
        q2k_num: q2k_index.iter().map(|v| v.len()).collect(),
        q2k_index,
        thresholds,
        mode,
        k,
        n,
    })
}

/// Tunes k so the measured mean keep fraction lands as close as possible to
/// `target`. Keep fraction is monotone in k for two_stage selection (larger
/// k admits more candidates); integer bisection plus a small neighborhood
/// scan absorbs any local flatness. Returns the map and the chosen k.
pub fn build_q2k_for_keep_fraction(
    scores: &BlockScores,
    target: f64,
    mode: SelectionMode,
    tau: f64,
) -> Result<(Q2KMap, usize)> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Config(format!("keep fraction {target} outside (0,1]")));
    }
    let n = scores.n;
    let keep_of = |k: usize| -> Result<f64> {
        Ok(build_q2k(scores, k, mode, tau)?.mean_keep_fraction())
    };
    let (mut lo, mut hi) = (1usize, n);
    if keep_of(lo)? >= target {
        hi = lo;
    } else if keep_of(hi)? <= target {
        lo = hi;
    } else {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if keep_of(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let mut best = (f64::INFINITY, lo);
    for k in lo.saturating_sub(2).max(1)..=(hi + 2).min(n) {
        let diff = (keep_of(k)? - target).abs();
        if diff < best.0 {
            best = (diff, k);
        }
    }
    Ok((build_q2k(scores, best.1, mode, tau)?, best.1))
}
