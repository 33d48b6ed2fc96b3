//! 3D <-> 1D token indexing, cuboid block partitioning, pooled block
//! representatives, and window subdivision.
//!
//! Token order everywhere is the flattening n = t*H*W + h*W + w. Blocks are
//! enumerated t-major (then h, then w) so downstream index maps are
//! reproducible.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn count(&self) -> usize {
        self.t * self.h * self.w
    }
}

impl std::str::FromStr for Dims3 {
    type Err = Error;

    /// Parses "AxBxC", e.g. "4x4x4".
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split('x').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("expected AxBxC, got {s:?}")));
        }
        let mut v = [0usize; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad extent {p:?} in {s:?}")))?;
            if *slot == 0 {
                return Err(Error::Config(format!("zero extent in {s:?}")));
            }
        }
        Ok(Dims3::new(v[0], v[1], v[2]))
    }
}

pub fn flatten_index(grid: Dims3, t: usize, h: usize, w: usize) -> Result<usize> {
    if t >= grid.t || h >= grid.h || w >= grid.w {
        return Err(Error::Index(format!(
            "({t},{h},{w}) outside grid {}x{}x{}",
            grid.t, grid.h, grid.w
        )));
    }
    Ok(t * grid.h * grid.w + h * grid.w + w)
}

pub fn unflatten_index(grid: Dims3, n: usize) -> Result<(usize, usize, usize)> {
    if n >= grid.count() {
        return Err(Error::Index(format!(
            "token {n} outside grid of {} tokens",
            grid.count()
        )));
    }
    let hw = grid.h * grid.w;
    Ok((n / hw, (n % hw) / grid.w, n % grid.w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    grid: Dims3,
    cuboid: Dims3,
    counts: Dims3,
    window: Option<Dims3>,
}

impl BlockSpec {
    pub fn new(grid: Dims3, cuboid: Dims3) -> Result<Self> {
        for (axis, g, c) in [
            ("T", grid.t, cuboid.t),
            ("H", grid.h, cuboid.h),
            ("W", grid.w, cuboid.w),
        ] {
            if c == 0 || g == 0 {
                return Err(Error::InvalidShape(format!("zero extent on axis {axis}")));
            }
            if g % c != 0 {
                return Err(Error::InvalidShape(format!(
                    "axis {axis}: grid extent {g} not divisible by block extent {c}"
                )));
            }
        }
        Ok(Self {
            grid,
            cuboid,
            counts: Dims3::new(grid.t / cuboid.t, grid.h / cuboid.h, grid.w / cuboid.w),
            window: None,
        })
    }

    pub fn with_window(mut self, window: Dims3) -> Result<Self> {
        for (axis, c, w) in [
            ("T", self.cuboid.t, window.t),
            ("H", self.cuboid.h, window.h),
            ("W", self.cuboid.w, window.w),
        ] {
            if w == 0 || c % w != 0 {
                return Err(Error::InvalidShape(format!(
                    "axis {axis}: block extent {c} not divisible by window extent {w}"
                )));
            }
        }
        self.window = Some(window);
        Ok(self)
    }

    pub fn grid(&self) -> Dims3 {
        self.grid
    }

    pub fn cuboid(&self) -> Dims3 {
        self.cuboid
    }

    pub fn counts(&self) -> Dims3 {
        self.counts
    }

    pub fn window(&self) -> Option<Dims3> {
        self.window
    }

    /// L, total tokens.
    pub fn tokens(&self) -> usize {
        self.grid.count()
    }

    /// B, tokens per block.
    pub fn tokens_per_block(&self) -> usize {
        self.cuboid.count()
    }

    /// N, number of blocks.
    pub fn num_blocks(&self) -> usize {
        self.counts.count()
    }
}

/// Ascending flattened token indices of block `b`.
pub fn block_token_indices(spec: &BlockSpec, b: usize) -> Result<Vec<usize>> {
    let n = spec.num_blocks();
    if b >= n {
        return Err(Error::Index(format!("block {b} outside {n} blocks")));
    }
    let Dims3 { h: nh, w: nw, .. } = spec.counts;
    let bt = b / (nh * nw);
    let bh = (b / nw) % nh;
    let bw = b % nw;
    let c = spec.cuboid;
    let g = spec.grid;
    let mut out = Vec::with_capacity(spec.tokens_per_block());
    for lt in 0..c.t {
        for lh in 0..c.h {
            for lw in 0..c.w {
                let t = bt * c.t + lt;
                let h = bh * c.h + lh;
                let w = bw * c.w + lw;
                out.push(t * g.h * g.w + h * g.w + w);
            }
        }
    }
    Ok(out)
}

/// Per-block arithmetic means of `x` (L rows of `d` values), accumulated in
/// f64 in ascending token order. Returns N rows of `d` values.
pub fn pool_blocks(x: &[f32], d: usize, spec: &BlockSpec) -> Result<Vec<f64>> {
    let l = spec.tokens();
    if d == 0 || x.len() != l * d {
        return Err(Error::InvalidShape(format!(
            "matrix has {} values, expected {l}x{d}",
            x.len()
        )));
    }
    let n = spec.num_blocks();
    let b = spec.tokens_per_block();
    let rows = crate::par::map_indexed(n, |bi| {
        let tokens = block_token_indices(spec, bi).expect("block id in range");
        let mut acc = vec![0.0f64; d];
        for &tok in &tokens {
            let row = &x[tok * d..(tok + 1) * d];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        let inv = 1.0 / b as f64;
        for a in &mut acc {
            *a *= inv;
        }
        acc
    });
    Ok(rows.concat())
}

/// Partitions the B local offsets of one cuboid into windows. Windows are
/// enumerated t-major; each window's offsets are ascending. Same layout for
/// every block.
pub fn window_token_offsets(spec: &BlockSpec) -> Result<Vec<Vec<usize>>> {
    let win = spec
        .window
        .ok_or_else(|| Error::Config("window not set on this BlockSpec".into()))?;
    let c = spec.cuboid;
    let per = Dims3::new(c.t / win.t, c.h / win.h, c.w / win.w);
    let mut out = Vec::with_capacity(per.count());
    for wt in 0..per.t {
        for wh in 0..per.h {
            for ww in 0..per.w {
                let mut offs = Vec::with_capacity(win.count());
                for lt in 0..win.t {
                    for lh in 0..win.h {
                        for lw in 0..win.w {
                            let t = wt * win.t + lt;
                            let h = wh * win.h + lh;
                            let w = ww * win.w + lw;
                            offs.push(t * c.h * c.w + h * c.w + w);
                        }
                    }
                }
                out.push(offs);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(t: usize, h: usize, w: usize) -> Dims3 {
        Dims3::new(t, h, w)
    }

    #[test]
    fn flatten_examples() {
        let g = dims(2, 4, 5);
        assert_eq!(flatten_index(g, 0, 0, 0).unwrap(), 0);
        assert_eq!(flatten_index(g, 1, 2, 3).unwrap(), 33);
        assert!(matches!(
            flatten_index(g, 2, 0, 0),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn flatten_unflatten_identity() {
        let g = dims(16, 16, 16); // L = 4096
        for n in 0..g.count() {
            let (t, h, w) = unflatten_index(g, n).unwrap();
            assert_eq!(flatten_index(g, t, h, w).unwrap(), n);
        }
    }

    #[test]
    fn single_block_covers_everything() {
        let spec = BlockSpec::new(dims(2, 3, 4), dims(2, 3, 4)).unwrap();
        assert_eq!(spec.num_blocks(), 1);
        let toks = block_token_indices(&spec, 0).unwrap();
        assert_eq!(toks, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn block_indices_hand_case() {
        let spec = BlockSpec::new(dims(2, 2, 2), dims(1, 2, 2)).unwrap();
        assert_eq!(block_token_indices(&spec, 0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(block_token_indices(&spec, 1).unwrap(), vec![4, 5, 6, 7]);
    }

    #[test]
    fn blocks_partition_tokens() {
        let spec = BlockSpec::new(dims(4, 6, 8), dims(2, 3, 4)).unwrap();
        let mut seen = vec![false; spec.tokens()];
        for b in 0..spec.num_blocks() {
            let toks = block_token_indices(&spec, b).unwrap();
            assert_eq!(toks.len(), spec.tokens_per_block());
            assert!(toks.windows(2).all(|p| p[0] < p[1]), "ascending");
            for tok in toks {
                assert!(!seen[tok], "token {tok} in two blocks");
                seen[tok] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn divisibility_rejected_with_axis() {
        let err = BlockSpec::new(dims(5, 4, 4), dims(2, 2, 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis T"), "got {msg}");
    }

    #[test]
    fn pool_constant_and_hand_case() {
        let spec = BlockSpec::new(dims(2, 2, 2), dims(2, 2, 2)).unwrap();
        let x = vec![0.5f32; 8 * 3];
        let pooled = pool_blocks(&x, 3, &spec).unwrap();
        assert_eq!(pooled.len(), 3);
        for p in pooled {
            assert_eq!(p, 0.5);
        }

        let spec = BlockSpec::new(dims(1, 1, 2), dims(1, 1, 2)).unwrap();
        let x = vec![1.0f32, 0.0, 3.0, 2.0];
        assert_eq!(pool_blocks(&x, 2, &spec).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn pool_is_linear() {
        let spec = BlockSpec::new(dims(2, 2, 2), dims(1, 2, 2)).unwrap();
        let x: Vec<f32> = (0..8 * 4).map(|i| (i as f32).sin()).collect();
        let x2: Vec<f32> = x.iter().map(|&v| v * 2.0).collect();
        let p = pool_blocks(&x, 4, &spec).unwrap();
        let p2 = pool_blocks(&x2, 4, &spec).unwrap();
        for (a, b) in p.iter().zip(&p2) {
            assert!((a * 2.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_rejects_bad_shape() {
        let spec = BlockSpec::new(dims(1, 1, 2), dims(1, 1, 2)).unwrap();
        assert!(matches!(
            pool_blocks(&[1.0, 2.0, 3.0], 2, &spec),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn windows_partition_block() {
        let spec = BlockSpec::new(dims(4, 4, 4), dims(4, 4, 4))
            .unwrap()
            .with_window(dims(2, 2, 2))
            .unwrap();
        let wins = window_token_offsets(&spec).unwrap();
        assert_eq!(wins.len(), 8);
        let mut seen = vec![false; 64];
        for win in &wins {
            assert_eq!(win.len(), 8);
            assert!(win.windows(2).all(|p| p[0] < p[1]));
            for &off in win {
                assert!(!seen[off]);
                seen[off] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn degenerate_window_is_whole_block() {
        let spec = BlockSpec::new(dims(2, 2, 2), dims(2, 2, 2))
            .unwrap()
            .with_window(dims(2, 2, 2))
            .unwrap();
        let wins = window_token_offsets(&spec).unwrap();
        assert_eq!(wins, vec![(0..8).collect::<Vec<_>>()]);
    }

    #[test]
    fn window_unset_is_config_error() {
        let spec = BlockSpec::new(dims(2, 2, 2), dims(2, 2, 2)).unwrap();
        assert!(matches!(
            window_token_offsets(&spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_window_rejected() {
        let spec = BlockSpec::new(dims(4, 4, 4), dims(4, 4, 4)).unwrap();
        assert!(spec.with_window(dims(3, 2, 2)).is_err());
    }
}
