use super::Scalar;
use crate::error::{Error, Result};
use crate::frame::{Frame, Mask};

/// Single image, channel-major (`c`, then `y`, then `x`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, k: usize) -> &[T] {
        &self.data[k * self.plane()..(k + 1) * self.plane()]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        (self.c, self.h, self.w) == (other.c, other.h, other.w)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Self {
        debug_assert!(self.same_shape(other));
        Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks tensors along the channel axis.
    pub fn concat(parts: &[&Tensor<T>]) -> Self {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut c = 0;
        for p in parts {
            assert_eq!((p.h, p.w), (h, w), "concat spatial mismatch");
            data.extend_from_slice(&p.data);
            c += p.c;
        }
        Self { c, h, w, data }
    }

    /// Inverse of [`Tensor::concat`] for the given channel counts.
    pub fn split(&self, channels: &[usize]) -> Vec<Tensor<T>> {
        assert_eq!(channels.iter().sum::<usize>(), self.c, "split channel count");
        let mut out = Vec::with_capacity(channels.len());
        let mut start = 0;
        for &c in channels {
            let n = c * self.plane();
            out.push(Tensor::from_vec(c, self.h, self.w, self.data[start..start + n].to_vec()));
            start += n;
        }
        out
    }

    pub fn upsample_nearest2(&self) -> Self {
        let (h2, w2) = (self.h * 2, self.w * 2);
        let mut data = Vec::with_capacity(self.c * h2 * w2);
        for k in 0..self.c {
            let ch = self.channel(k);
            for y in 0..h2 {
                let row = &ch[(y / 2) * self.w..(y / 2 + 1) * self.w];
                for x in 0..w2 {
                    data.push(row[x / 2]);
                }
            }
        }
        Self::from_vec(self.c, h2, w2, data)
    }

    /// Gradient of [`Tensor::upsample_nearest2`]: sums each 2x2 block.
    pub fn upsample_nearest2_backward(grad: &Tensor<T>) -> Self {
        let (h, w) = (grad.h / 2, grad.w / 2);
        let mut out = Tensor::zeros(grad.c, h, w);
        for k in 0..grad.c {
            for y in 0..grad.h {
                for x in 0..grad.w {
                    let i = k * h * w + (y / 2) * w + x / 2;
                    out.data[i] = out.data[i] + grad.data[k * grad.plane() + y * grad.w + x];
                }
            }
        }
        out
    }

    pub fn from_frame(frame: &Frame) -> Self {
        let (h, w, c) = frame.shape();
        let mut data = vec![T::zero(); c * h * w];
        for (i, px) in frame.data().chunks_exact(c).enumerate() {
            for (k, &v) in px.iter().enumerate() {
                data[k * h * w + i] = T::of(v);
            }
        }
        Self::from_vec(c, h, w, data)
    }

    pub fn from_mask(mask: &Mask) -> Self {
        let data = mask
            .data()
            .iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect();
        Self::from_vec(1, mask.height(), mask.width(), data)
    }

    pub fn to_frame(&self) -> Result<Frame> {
        let (c, h, w) = (self.c, self.h, self.w);
        let mut data = vec![0.0f32; c * h * w];
        for k in 0..c {
            for (i, &v) in self.channel(k).iter().enumerate() {
                data[i * c + k] = v.as_f32();
            }
        }
        Frame::new(h, w, c, data).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite("network activations".into()),
            other => other,
        })
    }

    /// Reflect-pads to `(h + top + bottom, w + left + right)`.
    pub fn reflect_pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let (h2, w2) = (self.h + top + bottom, self.w + left + right);
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            if n == 1 {
                return 0;
            }
            loop {
                if i < 0 {
                    i = -i;
                } else if i >= n {
                    i = 2 * (n - 1) - i;
                } else {
                    return i as usize;
                }
            }
        };
        let mut data = Vec::with_capacity(self.c * h2 * w2);
        for k in 0..self.c {
            let ch = self.channel(k);
            for y in 0..h2 {
                let sy = reflect(y as isize - top as isize, self.h);
                for x in 0..w2 {
                    let sx = reflect(x as isize - left as isize, self.w);
                    data.push(ch[sy * self.w + sx]);
                }
            }
        }
        Self::from_vec(self.c, h2, w2, data)
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(self.c * h * w);
        for k in 0..self.c {
            let ch = self.channel(k);
            for y in top..top + h {
                data.extend_from_slice(&ch[y * self.w + left..y * self.w + left + w]);
            }
        }
        Self::from_vec(self.c, h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip_and_layout() {
        let f = Frame::from_fn(16, 17, 3, |y, x, c| (y * 100 + x * 3 + c) as f32 / 2000.0).unwrap();
        let t = Tensor::<f32>::from_frame(&f);
        assert_eq!(t.data[2 * 16 * 17 + 5 * 17 + 4], f.get(5, 4, 2));
        assert_eq!(t.to_frame().unwrap(), f);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_vec(2, 3, 4, (0..24).map(|i| i as f64 * 0.1).collect());
        let g = Tensor::<f64>::from_vec(2, 6, 8, (0..96).map(|i| (i as f64).cos()).collect());
        let up = x.upsample_nearest2();
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = Tensor::upsample_nearest2_backward(&g);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let x = Tensor::<f32>::from_vec(1, 5, 6, (0..30).map(|i| i as f32).collect());
        let p = x.reflect_pad(1, 2, 0, 2);
        assert_eq!((p.h, p.w), (8, 8));
        assert_eq!(p.data[0], x.data[6]);
        assert_eq!(p.crop(1, 0, 5, 6), x);
    }
}
