//! Query-side sparsification.
//!
//! Within each block (or window), tokens are ranked by dissimilarity to the
//! unit's center token, 1 - cos(q_center, q_i), in descending order, and the
//! top ceil(r * count) survive. Ranking descending keeps the most
//! distinctive tokens; the center itself scores 0 and is pruned at low r.
//! Pruned positions are later refilled from a donor: the retained token in
//! the same unit most similar to the pruned one.

use crate::blocks::{block_token_indices, window_token_offsets, BlockSpec, Dims3};
use crate::error::{Error, Result};

/// `to_sparse` entry for pruned tokens.
pub const PRUNED: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Clone, Debug)]
pub struct QuerySelection {
    pub r: f64,
    /// Ascending global token indices of kept queries.
    pub retained: Vec<usize>,
    /// Global index -> position in `retained`, or PRUNED. Length L.
    pub to_sparse: Vec<usize>,
    /// (pruned global index, retained donor global index), ascending by the
    /// pruned index. The donor always lies in the same unit.
    pub donors: Vec<(usize, usize)>,
    /// Rows whose norm was exactly zero (cosine defined as 0 for them).
    pub zero_norm_rows: usize,
}

impl QuerySelection {
    pub fn num_retained(&self) -> usize {
        self.retained.len()
    }

    pub fn tokens(&self) -> usize {
        self.to_sparse.len()
    }
}

/// Local row-major offset of the floor-midpoint token.
pub fn center_offset(dims: Dims3) -> usize {
    (dims.t / 2) * dims.h * dims.w + (dims.h / 2) * dims.w + dims.w / 2
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity with two fixed edge rules: bitwise-equal rows score
/// exactly 1, and any zero-norm operand scores 0.
fn cosine(a: &[f32], b: &[f32]) -> f64 {
    if a == b {
        return if a.iter().all(|&x| x == 0.0) { 0.0 } else { 1.0 };
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// 1 - cos(center, q_i) per row of `qblk`. A row bitwise-equal to the center
/// scores exactly 0; a zero-norm row scores 1.
pub fn dissimilarity_scores(qblk: &[f32], d: usize, center: &[f32]) -> Vec<f64> {
    assert!(d > 0 && center.len() == d && qblk.len() % d == 0);
    qblk.chunks_exact(d).map(|row| 1.0 - cosine(center, row)).collect()
}

/// ceil(r * m), snapped to the nearest integer when the f64 product lands
/// within 1e-9 of one (0.1 * 80 evaluates to 8.000000000000002).
fn retained_count(r: f64, m: usize) -> usize {
    let prod = r * m as f64;
    let near = prod.round();
    let k = if (prod - near).abs() < 1e-9 { near } else { prod.ceil() };
    (k as usize).clamp(1, m)
}

pub fn select_queries(
    q: &[f32],
    d: usize,
    spec: &BlockSpec,
    r: f64,
    use_window: bool,
) -> Result<QuerySelection> {
    select_queries_with(q, d, spec, r, use_window, Similarity::Cosine)
}

pub fn select_queries_with(
    q: &[f32],
    d: usize,
    spec: &BlockSpec,
    r: f64,
    use_window: bool,
    metric: Similarity,
) -> Result<QuerySelection> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::Config(format!("retention ratio r={r} outside (0,1]")));
    }
    let l = spec.tokens();
    if d == 0 || q.len() != l * d {
        return Err(Error::InvalidShape(format!(
            "Q has {} values, expected {l}x{d}",
            q.len()
        )));
    }

    // Units are windows when requested, whole blocks otherwise. Offsets into
    // a block's ascending token list, so unit token ids stay ascending.
    let (unit_offsets, unit_dims) = if use_window {
        (window_token_offsets(spec)?, spec.window().unwrap())
    } else {
        (
            vec![(0..spec.tokens_per_block()).collect::<Vec<usize>>()],
            spec.cuboid(),
        )
    };
    let center = center_offset(unit_dims);

    struct BlockResult {
        retained: Vec<usize>,
        donors: Vec<(usize, usize)>,
        zero_norms: usize,
    }

    let per_block = crate::par::map_indexed(spec.num_blocks(), |b| {
        let tokens = block_token_indices(spec, b).expect("block id in range");
        let mut res = BlockResult {
            retained: Vec::new(),
            donors: Vec::new(),
            zero_norms: 0,
        };
        for offsets in &unit_offsets {
            let unit: Vec<usize> = offsets.iter().map(|&o| tokens[o]).collect();
            let center_row = &q[unit[center] * d..unit[center] * d + d];
            let mut scored: Vec<(f64, usize)> = unit
                .iter()
                .map(|&g| {
                    let row = &q[g * d..g * d + d];
                    if row.iter().all(|&x| x == 0.0) {
                        res.zero_norms += 1;
                    }
                    (1.0 - cosine(center_row, row), g)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let keep = retained_count(r, unit.len());
            let (kept, pruned) = scored.split_at(keep);
            for &(_, g) in kept {
                res.retained.push(g);
            }
            for &(_, p) in pruned {
                let prow = &q[p * d..p * d + d];
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for &(_, g) in kept {
                    let grow = &q[g * d..g * d + d];
                    let sim = match metric {
                        Similarity::Cosine => cosine(prow, grow),
                        Similarity::Dot => dot(prow, grow),
                    };
                    if sim > best.0 || (sim == best.0 && g < best.1) {
                        best = (sim, g);
                    }
                }
                res.donors.push((p, best.1));
            }
        }
        res
    });

    let mut retained = Vec::with_capacity(l);
    let mut donors = Vec::new();
    let mut zero_norm_rows = 0;
    for blk in per_block {
        retained.extend(blk.retained);
        donors.extend(blk.donors);
        zero_norm_rows += blk.zero_norms;
    }
    retained.sort_unstable();
    donors.sort_unstable();

    let mut to_sparse = vec![PRUNED; l];
    for (pos, &g) in retained.iter().enumerate() {
        to_sparse[g] = pos;
    }
    Ok(QuerySelection {
        r,
        retained,
        to_sparse,
        donors,
        zero_norm_rows,
    })
}

/// Scatters sparse rows back to length L; pruned positions copy their
/// donor's computed row.
pub fn restore_outputs(o_s: &[f32], d: usize, sel: &QuerySelection) -> Result<Vec<f32>> {
    if d == 0 || o_s.len() != sel.retained.len() * d {
        return Err(Error::InvalidShape(format!(
            "sparse output has {} values, expected {}x{d}",
            o_s.len(),
            sel.retained.len()
        )));
    }
    let l = sel.to_sparse.len();
    let mut out = vec![0.0f32; l * d];
    for (pos, &g) in sel.retained.iter().enumerate() {
        out[g * d..g * d + d].copy_from_slice(&o_s[pos * d..pos * d + d]);
    }
    for &(p, donor) in &sel.donors {
        let pos = sel.to_sparse[donor];
        debug_assert_ne!(pos, PRUNED, "donor {donor} not retained");
        out[p * d..p * d + d].copy_from_slice(&o_s[pos * d..pos * d + d]);
    }
    Ok(out)
}
