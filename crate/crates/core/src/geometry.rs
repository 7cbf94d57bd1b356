//! Planar affine transforms in pixel coordinates.

use std::ops::Mul;

/// `p -> [a b tx; c d ty] * [x y 1]^T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Default for Affine2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn new(a: f64, b: f64, tx: f64, c: f64, d: f64, ty: f64) -> Self {
        Self {
            m: [[a, b, tx], [c, d, ty]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(1.0, 0.0, tx, 0.0, 1.0, ty)
    }

    /// Rotation by `theta` radians followed by isotropic `scale`, both about
    /// `center`, then a shift by `(tx, ty)`.
    pub fn similarity_about(center: (f64, f64), theta: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let (a, b, cc, d) = (scale * c, -scale * s, scale * s, scale * c);
        let (cx, cy) = center;
        Self::new(
            a,
            b,
            cx - a * cx - b * cy + tx,
            cc,
            d,
            cy - cc * cx - d * cy + ty,
        )
    }

    pub fn rigid_about(center: (f64, f64), theta: f64, tx: f64, ty: f64) -> Self {
        Self::similarity_about(center, theta, 1.0, tx, ty)
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.det();
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Some(Affine2::new(
            ia,
            ib,
            -(ia * tx + ib * ty),
            ic,
            id,
            -(ic * tx + id * ty),
        ))
    }

    /// Elementwise mean of the matrices. For frames rendered as
    /// `frame(p) = source(A p)`, halfway-warping two views toward each other
    /// lands exactly on the mean of their poses.
    pub fn mean(items: &[Affine2]) -> Affine2 {
        let mut out = [[0.0; 3]; 2];
        for a in items {
            for (r, row) in out.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += a.m[r][c];
                }
            }
        }
        let n = items.len().max(1) as f64;
        out.iter_mut().flatten().for_each(|v| *v /= n);
        Affine2 { m: out }
    }

    /// Rotation angle of the linear part, radians.
    pub fn angle(&self) -> f64 {
        (self.m[1][0] - self.m[0][1]).atan2(self.m[0][0] + self.m[1][1])
    }

    pub fn max_abs_diff(&self, other: &Affine2) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `(self * rhs)(p) = self(rhs(p))`.
impl Mul for Affine2 {
    type Output = Affine2;

    fn mul(self, rhs: Affine2) -> Affine2 {
        let a = &self.m;
        let b = &rhs.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            m[r][2] += a[r][2];
        }
        Affine2 { m }
    }
}

/// Frame center in pixel coordinates (`(W-1)/2`, `(H-1)/2`).
pub fn frame_center(height: usize, width: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_and_invert() {
        let a = Affine2::similarity_about((10.0, 5.0), 0.3, 1.2, 2.0, -1.0);
        let b = Affine2::translation(3.0, 4.0);
        let ab = a * b;
        let (x, y) = ab.apply(1.5, 2.5);
        let (bx, by) = b.apply(1.5, 2.5);
        let (ex, ey) = a.apply(bx, by);
        assert!((x - ex).abs() < 1e-12 && (y - ey).abs() < 1e-12);
        let id = a * a.inverse().unwrap();
        assert!(id.max_abs_diff(&Affine2::IDENTITY) < 1e-12);
    }

    #[test]
    fn similarity_fixes_center() {
        let a = Affine2::similarity_about((7.0, 3.0), 1.0, 0.5, 0.0, 0.0);
        let (x, y) = a.apply(7.0, 3.0);
        assert!((x - 7.0).abs() < 1e-12 && (y - 3.0).abs() < 1e-12);
        assert!((a.angle() - 1.0).abs() < 1e-12);
    }
}
