use std::collections::HashMap;
use std::sync::RwLock;

use super::{FlowEstimator, FlowField, Provenance};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::Affine2;

#[derive(Clone, Copy, Debug, PartialEq)]
struct ScenePose {
    scene: u64,
    pose: Affine2,
}

/// Exact flow for frames rendered from a known planar scene.
///
/// Every frame is registered with the scene it was rendered from and its
/// pose `A`, meaning `frame(p) = scene(A p)`. Frames are identified by
/// content fingerprint, so derived frames (midpoints, crops, flips) have to
/// be announced through [`FlowEstimator::register_derived`].
#[derive(Debug, Default)]
pub struct AnalyticOracle {
    poses: RwLock<HashMap<u64, ScenePose>>,
}

impl AnalyticOracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, frame: &Frame, scene: u64, pose: Affine2) {
        self.insert(frame.fingerprint(), ScenePose { scene, pose });
    }

    pub fn register_all(&self, frames: &[Frame], scene: u64, poses: &[Affine2]) -> Result<()> {
        if frames.len() != poses.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frames but {} poses",
                frames.len(),
                poses.len()
            )));
        }
        for (f, p) in frames.iter().zip(poses) {
            self.register(f, scene, *p);
        }
        Ok(())
    }

    pub fn pose_of(&self, frame: &Frame) -> Option<(u64, Affine2)> {
        self.lookup(frame.fingerprint()).map(|p| (p.scene, p.pose))
    }

    pub fn len(&self) -> usize {
        self.poses.read().expect("oracle lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, key: u64, value: ScenePose) {
        let mut map = self.poses.write().expect("oracle lock poisoned");
        if let Some(old) = map.insert(key, value) {
            if old.scene != value.scene || old.pose.max_abs_diff(&value.pose) > 1e-6 {
                log::debug!("oracle: frame {key:016x} re-registered with a different pose");
            }
        }
    }

    fn lookup(&self, key: u64) -> Option<ScenePose> {
        self.poses.read().expect("oracle lock poisoned").get(&key).copied()
    }

    fn require(&self, frame: &Frame, which: &str) -> Result<ScenePose> {
        self.lookup(frame.fingerprint()).ok_or_else(|| Error::Estimator {
            estimator: self.name().into(),
            message: format!("{which} frame was never registered with the oracle"),
        })
    }
}

impl FlowEstimator for AnalyticOracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn estimate(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        let pa = self.require(a, "first")?;
        let pb = self.require(b, "second")?;
        if pa.scene != pb.scene {
            return Err(Error::Estimator {
                estimator: self.name().into(),
                message: "frames come from different scenes".into(),
            });
        }
        let inv_b = pb.pose.inverse().ok_or_else(|| Error::Estimator {
            estimator: self.name().into(),
            message: "second frame has a singular pose".into(),
        })?;
        Ok(FlowField::from_affine(a.height(), a.width(), &(inv_b * pa.pose)))
    }

    fn register_derived(&self, derived: &Frame, provenance: Provenance<'_>) {
        let entry = match provenance {
            Provenance::Midpoint(x, y) => match (self.lookup(x.fingerprint()), self.lookup(y.fingerprint())) {
                (Some(px), Some(py)) if px.scene == py.scene => Some(ScenePose {
                    scene: px.scene,
                    pose: Affine2::mean(&[px.pose, py.pose]),
                }),
                _ => None,
            },
            Provenance::AlignedWith(x) => self.lookup(x.fingerprint()),
            Provenance::Resampled { of, map } => self.lookup(of.fingerprint()).map(|p| ScenePose {
                scene: p.scene,
                pose: p.pose * map,
            }),
        };
        match entry {
            Some(e) => self.insert(derived.fingerprint(), e),
            None => log::debug!("oracle: derived frame has unregistered sources"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::estimate_flow;

    fn frame(seed: f32) -> Frame {
        Frame::from_fn(16, 16, 1, |y, x, _| ((x as f32 * seed + y as f32).sin() + 1.0) / 2.0).unwrap()
    }

    #[test]
    fn translation_flow_is_exact() {
        let o = AnalyticOracle::new();
        let (a, b) = (frame(0.3), frame(0.7));
        o.register(&a, 1, Affine2::translation(10.0, 0.0));
        o.register(&b, 1, Affine2::translation(5.0, 2.0));
        let f = estimate_flow(&o, &a, &b).unwrap();
        // a(p) = S(p + 10, y) and b(q) = S(q + 5, q_y + 2): q = p + (5, -2).
        assert_eq!(f.at(3, 4), (5.0, -2.0));
        let same = estimate_flow(&o, &a, &a).unwrap();
        assert_eq!(same.max_abs(), 0.0);
    }

    #[test]
    fn unregistered_and_cross_scene_fail() {
        let o = AnalyticOracle::new();
        let (a, b) = (frame(0.3), frame(0.7));
        o.register(&a, 1, Affine2::IDENTITY);
        assert!(estimate_flow(&o, &a, &b).is_err());
        o.register(&b, 2, Affine2::IDENTITY);
        assert!(estimate_flow(&o, &a, &b).is_err());
    }

    #[test]
    fn midpoint_registration_averages_poses() {
        let o = AnalyticOracle::new();
        let (a, b, m) = (frame(0.3), frame(0.7), frame(1.1));
        o.register(&a, 1, Affine2::translation(0.0, 0.0));
        o.register(&b, 1, Affine2::translation(8.0, -2.0));
        o.register_derived(&m, Provenance::Midpoint(&a, &b));
        let (_, pose) = o.pose_of(&m).unwrap();
        assert!(pose.max_abs_diff(&Affine2::translation(4.0, -1.0)) < 1e-12);
    }
}
