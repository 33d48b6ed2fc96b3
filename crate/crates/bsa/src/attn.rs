//! The dense reference path and the block-gathered sparse executor.
//!
//! Both paths funnel every output row through the same `attend_row` kernel,
//! and the sparse side gathers KV tokens in ascending global order. With
//! r = 1 and select-all KV the two paths therefore execute identical
//! floating-point sequences and agree bit for bit, which is what the
//! degenerate-equivalence suite leans on.
//!
//! Attention is bidirectional: there is no mask anywhere (M = 0).

use crate::blocks::{block_token_indices, BlockSpec};
use crate::error::{Error, Result};
use crate::kvsparse::Q2KMap;
use crate::latents::LatentBundle;
use crate::qsparse::{restore_outputs, QuerySelection, PRUNED};

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// L x d, row-major.
    pub o: Vec<f32>,
    pub l: usize,
    pub d: usize,
    /// Gathered KV token count per query block (a single entry holding L for
    /// the dense path).
    pub gathered_counts: Vec<usize>,
    /// Softmax shift (row max score) per computed row, in row order.
    pub row_max_shifts: Vec<f64>,
}

/// Numerically stabilized softmax: subtracts the row max, sums in order.
pub fn softmax_row(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidShape("empty softmax row".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let denom: f64 = out.iter().sum();
    for x in &mut out {
        *x /= denom;
    }
    Ok(out)
}

/// One output row over m gathered tokens. All accumulation in f64; the
/// result is rounded to f32 once. Returns the softmax shift used.
fn attend_row(q_row: &[f32], ks: &[f32], vs: &[f32], d: usize, sqrt_d: f64, out: &mut [f32]) -> f64 {
    let m = ks.len() / d;
    let mut weights = Vec::with_capacity(m);
    let mut max = f64::NEG_INFINITY;
    for j in 0..m {
        let krow = &ks[j * d..(j + 1) * d];
        let dot: f64 = q_row.iter().zip(krow).map(|(&a, &b)| a as f64 * b as f64).sum();
        let s = dot / sqrt_d;
        if s > max {
            max = s;
        }
        weights.push(s);
    }
    let mut denom = 0.0;
    for s in &mut weights {
        *s = (*s - max).exp();
        denom += *s;
    }
    let mut acc = vec![0.0f64; d];
    for j in 0..m {
        let p = weights[j] / denom;
        let vrow = &vs[j * d..(j + 1) * d];
        for (a, &v) in acc.iter_mut().zip(vrow) {
            *a += p * v as f64;
        }
    }
    for (o, &a) in out.iter_mut().zip(acc.iter()) {
        *o = a as f32;
    }
    max
}

fn check_bundle(b: &LatentBundle) -> Result<(usize, usize)> {
    let l = b.tokens();
    let d = b.dim();
    if l == 0 || d == 0 {
        return Err(Error::InvalidShape("empty bundle".into()));
    }
    for (name, m) in [("Q", &b.q), ("K", &b.k), ("V", &b.v)] {
        if m.len() != l * d {
            return Err(Error::InvalidShape(format!(
                "{name} has {} values, expected {l}x{d}",
                m.len()
            )));
        }
        if let Some(i) = m.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidShape(format!("non-finite value in {name} at {i}")));
        }
    }
    Ok((l, d))
}

/// O = softmax(QK^T / sqrt(d)) V over all token pairs, no mask.
pub fn full_attention(bundle: &LatentBundle) -> Result<AttentionOutput> {
    let (l, d) = check_bundle(bundle)?;
    let sqrt_d = (d as f64).sqrt();
    let rows = crate::par::map_indexed(l, |i| {
        let mut row = vec![0.0f32; d];
        let shift = attend_row(&bundle.q[i * d..(i + 1) * d], &bundle.k, &bundle.v, d, sqrt_d, &mut row);
        (row, shift)
    });
    let mut o = Vec::with_capacity(l * d);
    let mut shifts = Vec::with_capacity(l);
    for (row, shift) in rows {
        o.extend_from_slice(&row);
        shifts.push(shift);
    }
    Ok(AttentionOutput {
        o,
        l,
        d,
        gathered_counts: vec![l],
        row_max_shifts: shifts,
    })
}

fn check_selections(
    l: usize,
    spec: &BlockSpec,
    qsel: &QuerySelection,
    q2k: &Q2KMap,
) -> Result<()> {
    let n = spec.num_blocks();
    if spec.tokens() != l {
        return Err(Error::SelectionMismatch(format!(
            "spec covers {} tokens, bundle has {l}",
            spec.tokens()
        )));
    }
    if qsel.to_sparse.len() != l {
        return Err(Error::SelectionMismatch(format!(
            "query selection built for {} tokens, bundle has {l}",
            qsel.to_sparse.len()
        )));
    }
    if q2k.n != n || q2k.q2k_index.len() != n {
        return Err(Error::SelectionMismatch(format!(
            "q2k built for {} x {} blocks, spec has {n}",
            q2k.q2k_index.len(),
            q2k.n
        )));
    }
    for (i, idx) in q2k.q2k_index.iter().enumerate() {
        if idx.is_empty() || q2k.q2k_num[i] != idx.len() {
            return Err(Error::SelectionMismatch(format!(
                "row {i}: q2k_num {} vs {} indices",
                q2k.q2k_num[i],
                idx.len()
            )));
        }
        if idx.iter().any(|&j| j >= n) {
            return Err(Error::SelectionMismatch(format!(
                "row {i} references a block outside [0, {n})"
            )));
        }
    }
    Ok(())
}

/// Eq-5 executor: per query block, gather the retained query rows and the
/// token rows of the selected KV blocks (ascending global order), attend,
/// scatter to retained positions, then restore pruned rows from donors.
pub fn sparse_attention(
    bundle: &LatentBundle,
    spec: &BlockSpec,
    qsel: &QuerySelection,
    q2k: &Q2KMap,
) -> Result<AttentionOutput> {
    let (l, d) = check_bundle(bundle)?;
    check_selections(l, spec, qsel, q2k)?;
    let n = spec.num_blocks();
    let sqrt_d = (d as f64).sqrt();

    struct BlockOut {
        rows: Vec<(usize, Vec<f32>, f64)>, // (sparse row position, row, shift)
        gathered: usize,
    }

    let per_block: Vec<Result<BlockOut>> = crate::par::map_indexed(n, |bi| {
        let queries: Vec<usize> = block_token_indices(spec, bi)?
            .into_iter()
            .filter(|&g| qsel.to_sparse[g] != PRUNED)
            .collect();

        let mut token_ids = Vec::with_capacity(q2k.q2k_num[bi] * spec.tokens_per_block());
        for &kb in &q2k.q2k_index[bi] {
            token_ids.extend(block_token_indices(spec, kb)?);
        }
        token_ids.sort_unstable(); // blocks interleave; gather order is global-ascending

        let mut ks = Vec::with_capacity(token_ids.len() * d);
        let mut vs = Vec::with_capacity(token_ids.len() * d);
        for &t in &token_ids {
            ks.extend_from_slice(&bundle.k[t * d..(t + 1) * d]);
            vs.extend_from_slice(&bundle.v[t * d..(t + 1) * d]);
        }

        let mut rows = Vec::with_capacity(queries.len());
        for &g in &queries {
            let mut row = vec![0.0f32; d];
            let shift = attend_row(&bundle.q[g * d..(g + 1) * d], &ks, &vs, d, sqrt_d, &mut row);
            rows.push((qsel.to_sparse[g], row, shift));
        }
        Ok(BlockOut {
            rows,
            gathered: token_ids.len(),
        })
    });

    let l_q = qsel.retained.len();
    let mut o_sparse = vec![0.0f32; l_q * d];
    let mut shifts = vec![0.0f64; l_q];
    let mut gathered_counts = Vec::with_capacity(n);
    for blk in per_block {
        let blk = blk?;
        gathered_counts.push(blk.gathered);
        for (pos, row, shift) in blk.rows {
            o_sparse[pos * d..(pos + 1) * d].copy_from_slice(&row);
            shifts[pos] = shift;
        }
    }

    let o = restore_outputs(&o_sparse, d, qsel)?;
    Ok(AttentionOutput {
        o,
        l,
        d,
        gathered_counts,
        row_max_shifts: shifts,
    })
}
