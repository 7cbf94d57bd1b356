//! Camera trajectories as per-frame `(tx, ty, theta)` signals.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Affine2;
use crate::io::write_atomic;

/// Accumulated camera path. Sample `i` describes the rigid motion carrying
/// frame-0 content to its position in frame `i`: a rotation by `theta`
/// about the frame center followed by a shift of the center by `(tx, ty)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectorySignal {
    pub tx: Vec<f64>,
    pub ty: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    frame: usize,
    tx: f64,
    ty: f64,
    theta: f64,
}

impl TrajectorySignal {
    pub fn zeros(n: usize) -> Self {
        Self {
            tx: vec![0.0; n],
            ty: vec![0.0; n],
            theta: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.tx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx.is_empty()
    }

    /// Reads each path transform `M_i` (frame-0 coordinates to frame-`i`
    /// coordinates) as `(M_i(c) - c, angle(M_i))`.
    pub fn from_transforms(transforms: &[Affine2], center: (f64, f64)) -> Self {
        let mut out = Self::default();
        for m in transforms {
            let (x, y) = m.apply(center.0, center.1);
            out.tx.push(x - center.0);
            out.ty.push(y - center.1);
            out.theta.push(m.angle());
        }
        out
    }

    /// Rigid transforms reproducing every sample.
    pub fn to_transforms(&self, center: (f64, f64)) -> Vec<Affine2> {
        (0..self.len())
            .map(|i| Affine2::rigid_about(center, self.theta[i], self.tx[i], self.ty[i]))
            .collect()
    }

    pub fn signals(&self) -> [&[f64]; 3] {
        [&self.tx, &self.ty, &self.theta]
    }

    pub fn map_signals(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            tx: f(&self.tx),
            ty: f(&self.ty),
            theta: f(&self.theta),
        }
    }

    /// Largest per-frame distance between translations.
    pub fn max_translation_error(&self, other: &TrajectorySignal) -> f64 {
        (0..self.len().min(other.len()))
            .map(|i| (self.tx[i] - other.tx[i]).hypot(self.ty[i] - other.ty[i]))
            .fold(0.0, f64::max)
    }

    pub fn max_angle_error(&self, other: &TrajectorySignal) -> f64 {
        (0..self.len().min(other.len()))
            .map(|i| (self.theta[i] - other.theta[i]).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        let mut csv = csv::Writer::from_writer(&mut w);
        for i in 0..self.len() {
            csv.serialize(Row {
                frame: i,
                tx: self.tx[i],
                ty: self.ty[i],
                theta: self.theta[i],
            })?;
        }
        csv.flush()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.write_csv(w))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut out = Self::default();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| csv_error(path, e))?;
            if row.frame != i {
                return Err(Error::Config(format!(
                    "{}: expected frame {i}, found {}",
                    path.display(),
                    row.frame
                )));
            }
            out.tx.push(row.tx);
            out.ty.push(row.ty);
            out.theta.push(row.theta);
        }
        Ok(out)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Config(format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_round_trip() {
        let t = TrajectorySignal {
            tx: vec![0.0, 1.5, -3.25],
            ty: vec![0.0, 0.5, 2.0],
            theta: vec![0.0, 0.01, -0.03],
        };
        let c = (159.5, 89.5);
        let back = TrajectorySignal::from_transforms(&t.to_transforms(c), c);
        assert!(back.max_translation_error(&t) < 1e-9);
        assert!(back.max_angle_error(&t) < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.csv");
        let t = TrajectorySignal {
            tx: vec![0.0, 0.1 + 0.2, -1e-17],
            ty: vec![0.0, std::f64::consts::PI, 4.0],
            theta: vec![0.0, 1e-3, -2.5e-5],
        };
        t.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("frame,tx,ty,theta\n"));
        assert_eq!(TrajectorySignal::load_csv(&path).unwrap(), t);
    }
}
