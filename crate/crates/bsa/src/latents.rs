//! Seeded Q/K/V generation and the `.bsal` / `.bsao` binary formats.
//!
//! Everything here is bit-reproducible: the RNG is splitmix64 (published
//! constants, trivially portable), uniforms take the top 24 bits of each
//! draw so the resulting binary32 values are exact on every platform, and
//! files round-trip without loss.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"BSAL";
pub const OUTPUT_MAGIC: &[u8; 4] = b"BSAO";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0,1) with a 24-bit mantissa, so the f32 value is exact.
    pub fn next_uniform(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / 16_777_216.0
    }
}

/// Box-Muller over consecutive uniform pairs. One stream spans the whole
/// bundle (Q, then K, then V), carrying the spare value across boundaries.
struct GaussianStream {
    rng: SplitMix64,
    spare: Option<f64>,
}

impl GaussianStream {
    fn next(&mut self) -> f32 {
        if let Some(z) = self.spare.take() {
            return z as f32;
        }
        let u1 = self.rng.next_uniform() as f64;
        let u2 = self.rng.next_uniform() as f64;
        // ln(1 - u1): u1 < 1 exactly, so the argument is never zero
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let a = std::f64::consts::TAU * u2;
        self.spare = Some(r * a.sin());
        (r * a.cos()) as f32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dist {
    Uniform,
    Gaussian,
}

impl std::str::FromStr for Dist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Dist::Uniform),
            "gaussian" => Ok(Dist::Gaussian),
            other => Err(Error::Config(format!(
                "unknown distribution {other:?} (expected uniform | gaussian)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle {
    pub t: u32,
    pub h: u32,
    pub w: u32,
    pub d: u32,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

impl LatentBundle {
    /// L = T*H*W.
    pub fn tokens(&self) -> usize {
        self.t as usize * self.h as usize * self.w as usize
    }

    pub fn dim(&self) -> usize {
        self.d as usize
    }
}

fn checked_elems(t: u32, h: u32, w: u32, d: u32) -> Result<usize> {
    let l = (t as u64)
        .checked_mul(h as u64)
        .and_then(|x| x.checked_mul(w as u64))
        .ok_or_else(|| Error::InvalidShape(format!("token count overflow for {t}x{h}x{w}")))?;
    let elems = l
        .checked_mul(d as u64)
        .ok_or_else(|| Error::InvalidShape(format!("element count overflow for L={l}, d={d}")))?;
    usize::try_from(elems)
        .map_err(|_| Error::InvalidShape(format!("{elems} elements exceed addressable memory")))
}

pub fn gen_bundle(seed: u64, t: u32, h: u32, w: u32, d: u32, dist: Dist) -> Result<LatentBundle> {
    if t == 0 || h == 0 || w == 0 || d == 0 {
        return Err(Error::InvalidShape(format!(
            "extents must be >= 1, got {t}x{h}x{w}x{d}"
        )));
    }
    let elems = checked_elems(t, h, w, d)?;

    let mut fill = {
        let rng = SplitMix64::new(seed);
        match dist {
            Dist::Uniform => {
                let mut rng = rng;
                Box::new(move || rng.next_uniform()) as Box<dyn FnMut() -> f32>
            }
            Dist::Gaussian => {
                let mut g = GaussianStream { rng, spare: None };
                Box::new(move || g.next())
            }
        }
    };
    let mut matrix = |n: usize| (0..n).map(|_| fill()).collect::<Vec<f32>>();
    let q = matrix(elems);
    let k = matrix(elems);
    let v = matrix(elems);
    Ok(LatentBundle { t, h, w, d, q, k, v })
}

/// Writes through a sibling temp file and renames, so a crash never leaves a
/// half-written artifact at `path`.
fn atomic_write(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut out = BufWriter::new(File::create(&tmp)?);
    write(&mut out)?;
    out.flush()?;
    drop(out);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_f32s(out: &mut impl Write, xs: &[f32]) -> Result<()> {
    for x in xs {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(inp: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    inp.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated payload while reading {what}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_u32(inp: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    inp.read_exact(&mut b)
        .map_err(|_| Error::Format(format!("truncated header while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

fn check_header(inp: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    inp.read_exact(&mut m)
        .map_err(|_| Error::Format("file shorter than magic".into()))?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut v = [0u8; 1];
    inp.read_exact(&mut v)
        .map_err(|_| Error::Format("file shorter than version byte".into()))?;
    if v[0] != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {}, expected {FORMAT_VERSION}",
            v[0]
        )));
    }
    Ok(())
}

/// `.bsal`: "BSAL", version 1, T/H/W/d as u32 LE, then Q, K, V as f32 LE.
pub fn write_bundle(path: &Path, b: &LatentBundle) -> Result<()> {
    let elems = checked_elems(b.t, b.h, b.w, b.d)?;
    for (name, m) in [("Q", &b.q), ("K", &b.k), ("V", &b.v)] {
        if m.len() != elems {
            return Err(Error::InvalidShape(format!(
                "{name} has {} values, shape {}x{}x{}x{} needs {elems}",
                m.len(),
                b.t,
                b.h,
                b.w,
                b.d
            )));
        }
    }
    atomic_write(path, |out| {
        out.write_all(BUNDLE_MAGIC)?;
        out.write_all(&[FORMAT_VERSION])?;
        for x in [b.t, b.h, b.w, b.d] {
            out.write_all(&x.to_le_bytes())?;
        }
        write_f32s(out, &b.q)?;
        write_f32s(out, &b.k)?;
        write_f32s(out, &b.v)
    })
}

pub fn read_bundle(path: &Path) -> Result<LatentBundle> {
    let mut inp = BufReader::new(File::open(path)?);
    check_header(&mut inp, BUNDLE_MAGIC)?;
    let t = read_u32(&mut inp, "T")?;
    let h = read_u32(&mut inp, "H")?;
    let w = read_u32(&mut inp, "W")?;
    let d = read_u32(&mut inp, "d")?;
    if t == 0 || h == 0 || w == 0 || d == 0 {
        return Err(Error::InvalidShape(format!(
            "header declares zero extent: {t}x{h}x{w}x{d}"
        )));
    }
    let elems = checked_elems(t, h, w, d)?;
    let q = read_f32s(&mut inp, elems, "Q")?;
    let k = read_f32s(&mut inp, elems, "K")?;
    let v = read_f32s(&mut inp, elems, "V")?;
    let mut extra = [0u8; 1];
    if inp.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after V payload".into()));
    }
    Ok(LatentBundle { t, h, w, d, q, k, v })
}

/// `.bsao`: "BSAO", version 1, L and d as u32 LE, one f32 LE array.
pub fn write_output(path: &Path, l: u32, d: u32, o: &[f32]) -> Result<()> {
    if o.len() != l as usize * d as usize {
        return Err(Error::InvalidShape(format!(
            "output has {} values, header {l}x{d} needs {}",
            o.len(),
            l as usize * d as usize
        )));
    }
    atomic_write(path, |out| {
        out.write_all(OUTPUT_MAGIC)?;
        out.write_all(&[FORMAT_VERSION])?;
        out.write_all(&l.to_le_bytes())?;
        out.write_all(&d.to_le_bytes())?;
        write_f32s(out, o)
    })
}

pub fn read_output(path: &Path) -> Result<(u32, u32, Vec<f32>)> {
    let mut inp = BufReader::new(File::open(path)?);
    check_header(&mut inp, OUTPUT_MAGIC)?;
    let l = read_u32(&mut inp, "L")?;
    let d = read_u32(&mut inp, "d")?;
    let elems = (l as u64)
        .checked_mul(d as u64)
        .and_then(|x| usize::try_from(x).ok())
        .ok_or_else(|| Error::InvalidShape(format!("element count overflow for {l}x{d}")))?;
    let o = read_f32s(&mut inp, elems, "O")?;
    let mut extra = [0u8; 1];
    if inp.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after O payload".into()));
    }
    Ok((l, d, o))
}
