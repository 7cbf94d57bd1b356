//! Backward warping along (scaled) flow fields.

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, FlowEstimator, FlowField};
use crate::frame::{Frame, Mask};

/// `out(p) = src(p + scale * F(p))`, bilinear. Samples outside the source
/// are zero and flagged false in the mask.
pub fn backward_warp(src: &Frame, flow: &FlowField, scale: f32) -> Result<(Frame, Mask)> {
    if !(0.0..=1.0).contains(&scale) {
        return Err(Error::InvalidArgument(format!("warp scale {scale} outside [0, 1]")));
    }
    if flow.height() != src.height() || flow.width() != src.width() {
        return Err(Error::Dimensions(format!(
            "flow is {}x{}, frame is {}x{}",
            flow.height(),
            flow.width(),
            src.height(),
            src.width()
        )));
    }
    if !flow.is_finite() {
        return Err(Error::NonFinite("warp flow".into()));
    }
    let (h, w, c) = src.shape();
    let mut data = vec![0.0f32; h * w * c];
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(y, x);
            let i = y * w + x;
            let ok = src.sample_bilinear(x as f32 + scale * u, y as f32 + scale * v, &mut data[i * c..(i + 1) * c]);
            mask.push(ok);
        }
    }
    Ok((Frame::from_raw(h, w, c, data), Mask::new(h, w, mask)?))
}

/// Content moved by `(tx, ty)`: `out(p) = frame(p - t)`, zero-filled.
pub fn translate(frame: &Frame, tx: f32, ty: f32) -> (Frame, Mask) {
    let flow = FlowField::constant(frame.height(), frame.width(), -tx, -ty);
    backward_warp(frame, &flow, 1.0).expect("constant finite flow on matching grid")
}

#[derive(Clone, Debug)]
pub struct HalfwayPair {
    /// The previous frame moved halfway toward the next one.
    pub minus: Frame,
    /// The next frame moved halfway toward the previous one.
    pub plus: Frame,
    pub mask_minus: Mask,
    pub mask_plus: Mask,
}

/// Warps each frame halfway toward the other. To move `A` toward `B`, the
/// flow `B -> A` is estimated on `B`'s grid and `A` is sampled at
/// `p + 0.5 F(p)`, so both results land on the midpoint grid.
pub fn halfway_pair(estimator: &dyn FlowEstimator, prev: &Frame, next: &Frame) -> Result<HalfwayPair> {
    prev.ensure_same_shape(next, "halfway_pair")?;
    let toward_prev = estimate_flow(estimator, prev, next)?;
    let toward_next = estimate_flow(estimator, next, prev)?;
    let (plus, mask_plus) = backward_warp(next, &toward_prev, 0.5)?;
    let (minus, mask_minus) = backward_warp(prev, &toward_next, 0.5)?;
    Ok(HalfwayPair {
        minus,
        plus,
        mask_minus,
        mask_plus,
    })
}

/// Per-pixel average over the inputs whose mask is set; zero where none is.
pub fn masked_average(frames: &[(&Frame, &Mask)]) -> Result<Frame> {
    let Some((first, _)) = frames.first() else {
        return Err(Error::InvalidArgument("nothing to average".into()));
    };
    let (h, w, c) = first.shape();
    let mut data = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut n = 0u32;
            for (f, m) in frames {
                if m.get(y, x) {
                    n += 1;
                    for k in 0..c {
                        data[i * c + k] += f.data()[i * c + k];
                    }
                }
            }
            if n > 1 {
                for k in 0..c {
                    data[i * c + k] /= n as f32;
                }
            }
        }
    }
    Ok(Frame::from_raw(h, w, c, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::AnalyticOracle;
    use crate::geometry::Affine2;

    fn wave(h: usize, w: usize, shift: f32) -> Frame {
        Frame::from_fn(h, w, 3, |y, x, c| {
            let xf = x as f32 - shift;
            0.5 + 0.2 * (xf * 0.31 + c as f32).sin() + 0.2 * (y as f32 * 0.23).cos()
        })
        .unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let f = wave(16, 20, 0.0);
        for scale in [0.0, 0.5, 1.0] {
            let (out, mask) = backward_warp(&f, &FlowField::zeros(16, 20), scale).unwrap();
            assert_eq!(out, f);
            assert!(mask.all());
        }
    }

    #[test]
    fn scale_zero_ignores_flow() {
        let f = wave(16, 16, 0.0);
        let (out, mask) = backward_warp(&f, &FlowField::constant(16, 16, 37.0, -4.0), 0.0).unwrap();
        assert_eq!(out, f);
        assert!(mask.all());
    }

    #[test]
    fn constant_flow_half_scale_shifts_five_columns() {
        let f = wave(16, 32, 0.0);
        let (out, mask) = backward_warp(&f, &FlowField::constant(16, 32, 10.0, 0.0), 0.5).unwrap();
        for y in 0..16 {
            for x in 0..32 {
                let valid = x + 5 <= 31;
                assert_eq!(mask.get(y, x), valid, "({y},{x})");
                for c in 0..3 {
                    let expected = if valid { f.get(y, x + 5, c) } else { 0.0 };
                    assert_eq!(out.get(y, x, c), expected);
                }
            }
        }
    }

    #[test]
    fn full_warp_reconstructs_shifted_pair() {
        let a = wave(16, 40, 0.0);
        // b holds a's content sampled 10 px to the left: b(q) = a(q - 10).
        let b = Frame::from_fn(16, 40, 3, |y, x, c| if x >= 10 { a.get(y, x - 10, c) } else { 0.0 }).unwrap();
        let (rec, mask) = backward_warp(&b, &FlowField::constant(16, 40, 10.0, 0.0), 1.0).unwrap();
        for y in 0..16 {
            for x in 0..40 {
                assert_eq!(mask.get(y, x), x < 30);
                if x < 30 {
                    for c in 0..3 {
                        assert_eq!(rec.get(y, x, c), a.get(y, x, c));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let f = wave(16, 16, 0.0);
        assert!(backward_warp(&f, &FlowField::zeros(16, 16), 1.5).is_err());
        assert!(backward_warp(&f, &FlowField::zeros(16, 17), 0.5).is_err());
    }

    fn oracle_pair(shift: (f64, f64)) -> (AnalyticOracle, Frame, Frame, Frame) {
        let (h, w) = (24, 48);
        let scene = |x: f64, y: f64, c: usize| {
            (0.5 + 0.2 * (x * 0.21 + c as f64).sin() + 0.2 * (y * 0.17).cos()) as f32
        };
        let render = |tx: f64, ty: f64| Frame::from_fn(h, w, 3, |y, x, c| scene(x as f64 - tx, y as f64 - ty, c)).unwrap();
        let prev = render(0.0, 0.0);
        let next = render(shift.0, shift.1);
        let mid = render(shift.0 / 2.0, shift.1 / 2.0);
        let o = AnalyticOracle::new();
        // Content shifted by +t means the pose maps p to p - t in scene space.
        o.register(&prev, 0, Affine2::IDENTITY);
        o.register(&next, 0, Affine2::translation(-shift.0, -shift.1));
        (o, prev, next, mid)
    }

    #[test]
    fn halfway_pair_lands_on_the_midpoint() {
        for shift in [(8.0, 0.0), (0.0, 6.0)] {
            let (o, prev, next, mid) = oracle_pair(shift);
            let pair = halfway_pair(&o, &prev, &next).unwrap();
            let both = pair.mask_minus.and(&pair.mask_plus);
            for y in 0..prev.height() {
                for x in 0..prev.width() {
                    if !both.get(y, x) {
                        continue;
                    }
                    for c in 0..3 {
                        assert!((pair.minus.get(y, x, c) - mid.get(y, x, c)).abs() <= 1.0 / 255.0);
                        assert!((pair.plus.get(y, x, c) - mid.get(y, x, c)).abs() <= 1.0 / 255.0);
                    }
                }
            }
        }
    }

    #[test]
    fn halfway_pair_of_identical_frames_is_identity() {
        let (o, prev, _, _) = oracle_pair((0.0, 0.0));
        let pair = halfway_pair(&o, &prev, &prev).unwrap();
        assert_eq!(pair.minus, prev);
        assert_eq!(pair.plus, prev);
    }

    #[test]
    fn masked_average_uses_valid_inputs_only() {
        let a = Frame::from_fn(16, 16, 1, |_, _, _| 0.2).unwrap();
        let b = Frame::from_fn(16, 16, 1, |_, _, _| 0.6).unwrap();
        let ma = Mask::new(16, 16, (0..256).map(|i| i % 3 != 0).collect()).unwrap();
        let mb = Mask::new(16, 16, (0..256).map(|i| i % 2 == 0).collect()).unwrap();
        let avg = masked_average(&[(&a, &ma), (&b, &mb)]).unwrap();
        for i in 0..256 {
            let expected = match (i % 3 != 0, i % 2 == 0) {
                (true, true) => 0.4,
                (true, false) => 0.2,
                (false, true) => 0.6,
                (false, false) => 0.0,
            };
            assert!((avg.data()[i] - expected).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn mask_flags_exactly_out_of_bounds_samples(du in -30.0f32..30.0, dv in -30.0f32..30.0, scale in 0.0f32..=1.0) {
            let f = wave(16, 24, 0.0);
            let (_, mask) = backward_warp(&f, &FlowField::constant(16, 24, du, dv), scale).unwrap();
            for y in 0..16 {
                for x in 0..24 {
                    let sx = x as f32 + scale * du;
                    let sy = y as f32 + scale * dv;
                    let inside = sx >= -1e-4 && sy >= -1e-4 && sx <= 23.0 + 1e-4 && sy <= 15.0 + 1e-4;
                    proptest::prop_assert_eq!(mask.get(y, x), inside);
                }
            }
        }
    }
}
