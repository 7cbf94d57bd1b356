//! Dense optical flow behind a pluggable estimator interface.
//!
//! Convention: for `F = estimate(a, b)`, pixel `p` of `a` shows the same
//! scene point as position `p + F(p)` of `b`. Fields live on `a`'s grid.

mod adapter;
mod classical;
mod oracle;

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

pub use adapter::ExternalAdapter;
pub use classical::ClassicalPyramidal;
pub use oracle::AnalyticOracle;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::Affine2;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::Dimensions(format!(
                "{height}x{width} flow needs {} values per component",
                height * width
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self {
            height,
            width,
            u,
            v,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, du: f32, dv: f32) -> Self {
        Self {
            height,
            width,
            u: vec![du; height * width],
            v: vec![dv; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Result<Self> {
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(y, x);
                u.push(a);
                v.push(b);
            }
        }
        Self::new(height, width, u, v)
    }

    /// Flow induced by a global map from `a`'s pixels to `b`'s pixels.
    pub fn from_affine(height: usize, width: usize, map: &Affine2) -> Self {
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (qx, qy) = map.apply(x as f64, y as f64);
                u.push((qx - x as f64) as f32);
                v.push((qy - y as f64) as f32);
            }
        }
        Self {
            height,
            width,
            u,
            v,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn max_abs(&self) -> f32 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Endpoint errors against `other` for pixels in the centered window
    /// covering `fraction` of each side.
    pub fn endpoint_errors(&self, other: &FlowField, fraction: f32) -> Vec<f32> {
        let (h, w) = (self.height, self.width);
        let my = ((1.0 - fraction) / 2.0 * h as f32).floor() as usize;
        let mx = ((1.0 - fraction) / 2.0 * w as f32).floor() as usize;
        let mut out = Vec::new();
        for y in my..h - my {
            for x in mx..w - mx {
                let (a, b) = self.at(y, x);
                let (c, d) = other.at(y, x);
                out.push(((a - c).powi(2) + (b - d).powi(2)).sqrt());
            }
        }
        out
    }

    pub fn scaled(&self, s: f32) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            u: self.u.iter().map(|x| x * s).collect(),
            v: self.v.iter().map(|x| x * s).collect(),
        }
    }
}

/// How a frame that was never seen by an estimator came to be. Pose-aware
/// estimators use this to keep track of synthesized frames; image-based
/// estimators ignore it.
#[derive(Clone, Copy, Debug)]
pub enum Provenance<'a> {
    /// Synthesized halfway between the two frames.
    Midpoint(&'a Frame, &'a Frame),
    /// Spatially aligned with the given frame.
    AlignedWith(&'a Frame),
    /// `derived(p) = of(map(p))`.
    Resampled { of: &'a Frame, map: Affine2 },
}

pub trait FlowEstimator: Send + Sync {
    fn name(&self) -> &str;

    /// Raw estimate; prefer [`estimate_flow`], which validates shapes.
    fn estimate(&self, a: &Frame, b: &Frame) -> Result<FlowField>;

    fn register_derived(&self, _derived: &Frame, _provenance: Provenance<'_>) {}
}

/// Uses `primary` where it can answer and `secondary` otherwise, for
/// example the oracle for synthetic clips and classical flow for real ones.
#[derive(Debug, Default)]
pub struct Fallback<A, B> {
    pub primary: A,
    pub secondary: B,
}

impl<A: FlowEstimator, B: FlowEstimator> FlowEstimator for Fallback<A, B> {
    fn name(&self) -> &str {
        self.primary.name()
    }

    fn estimate(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        self.primary.estimate(a, b).or_else(|_| self.secondary.estimate(a, b))
    }

    fn register_derived(&self, derived: &Frame, provenance: Provenance<'_>) {
        self.primary.register_derived(derived, provenance);
        self.secondary.register_derived(derived, provenance);
    }
}

pub fn estimate_flow(estimator: &dyn FlowEstimator, a: &Frame, b: &Frame) -> Result<FlowField> {
    a.ensure_same_shape(b, "estimate_flow")?;
    let flow = estimator.estimate(a, b)?;
    if flow.height() != a.height() || flow.width() != a.width() {
        return Err(Error::Estimator {
            estimator: estimator.name().to_string(),
            message: format!(
                "returned a {}x{} field for a {}x{} frame",
                flow.height(),
                flow.width(),
                a.height(),
                a.width()
            ),
        });
    }
    if !flow.is_finite() {
        return Err(Error::NonFinite(format!("{} flow", estimator.name())));
    }
    Ok(flow)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    Oracle,
    Classical,
    Adapter,
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "classical" => Ok(Self::Classical),
            "adapter" => Ok(Self::Adapter),
            other => Err(Error::InvalidArgument(format!(
                "unknown estimator `{other}` (expected oracle, classical or adapter)"
            ))),
        }
    }
}

const DUMP_MAGIC: &[u8; 4] = b"DFLO";

/// Debug dump: 12-byte header (`DFLO`, height and width as little-endian
/// u32) followed by interleaved `(u, v)` pairs as little-endian f32,
/// row-major.
pub fn write_flow(flow: &FlowField, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(DUMP_MAGIC)?;
    out.write_u32::<LittleEndian>(flow.height as u32)?;
    out.write_u32::<LittleEndian>(flow.width as u32)?;
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.write_f32::<LittleEndian>(*u)?;
        out.write_f32::<LittleEndian>(*v)?;
    }
    Ok(())
}

pub fn read_flow(mut input: impl Read) -> Result<FlowField> {
    let bad = |m: &str| Error::InvalidArgument(format!("flow dump: {m}"));
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != DUMP_MAGIC {
        return Err(bad("bad magic"));
    }
    let height = input.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let width = input.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let n = height
        .checked_mul(width)
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| bad("implausible size"))?;
    let mut u = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        u.push(input.read_f32::<LittleEndian>().map_err(|_| bad("truncated data"))?);
        v.push(input.read_f32::<LittleEndian>().map_err(|_| bad("truncated data"))?);
    }
    FlowField::new(height, width, u, v)
}

pub fn save_flow(flow: &FlowField, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_flow(flow, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_flow(path: &Path) -> Result<FlowField> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_flow(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trip_and_header_size() {
        let f = FlowField::from_fn(3, 4, |y, x| (x as f32 - 1.5, y as f32 * 0.25)).unwrap();
        let mut buf = Vec::new();
        write_flow(&f, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 3 * 4 * 8);
        assert_eq!(read_flow(&buf[..]).unwrap(), f);
        assert!(read_flow(&buf[..20]).is_err());
        buf[0] = b'X';
        assert!(read_flow(&buf[..]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(FlowField::new(1, 2, vec![0.0, f32::NAN], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn estimator_kind_parses() {
        assert_eq!("oracle".parse::<EstimatorKind>().unwrap(), EstimatorKind::Oracle);
        assert!("pwc".parse::<EstimatorKind>().is_err());
    }
}
