//! Dense coarse-to-fine Lucas-Kanade flow.
//!
//! Each pyramid level runs a few Gauss-Newton updates of a per-pixel
//! translation, with the normal equations accumulated under a Gaussian
//! window. The Hessian is taken from the first image only, so it is built
//! once per level. A 3x3 median pass after every level removes isolated
//! outliers before the field is upsampled.

use super::{FlowEstimator, FlowField};
use crate::error::Result;
use crate::frame::Frame;

#[derive(Clone, Debug)]
pub struct ClassicalPyramidal {
    /// Upper bound on pyramid levels; the coarsest level keeps both sides
    /// at or above `min_level_side`.
    pub max_levels: usize,
    pub min_level_side: usize,
    pub iterations: usize,
    /// Standard deviation of the Gaussian aggregation window, in pixels.
    pub window_sigma: f32,
    /// Tikhonov term added to the structure tensor diagonal.
    pub regularization: f32,
}

impl Default for ClassicalPyramidal {
    fn default() -> Self {
        Self {
            max_levels: 6,
            min_level_side: 12,
            iterations: 6,
            window_sigma: 2.5,
            regularization: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    d: Vec<f32>,
}

impl Plane {
    fn new(h: usize, w: usize, d: Vec<f32>) -> Self {
        debug_assert_eq!(d.len(), h * w);
        Self { h, w, d }
    }

    #[inline]
    fn at(&self, y: usize, x: usize) -> f32 {
        self.d[y * self.w + x]
    }

    /// Bilinear sample with clamp-to-edge; reports whether the point was
    /// inside the image.
    #[inline]
    fn sample(&self, x: f32, y: f32) -> (f32, bool) {
        let max_x = (self.w - 1) as f32;
        let max_y = (self.h - 1) as f32;
        let inside = x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = (x as usize).min(self.w - 1);
        let y0 = (y as usize).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let a = self.at(y0, x0);
        let b = self.at(y0, x1);
        let c = self.at(y1, x0);
        let d = self.at(y1, x1);
        let top = a + (b - a) * fx;
        let bot = c + (d - c) * fx;
        (top + (bot - top) * fy, inside)
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution with clamp-to-edge borders.
fn blur(p: &Plane, kernel: &[f32]) -> Plane {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (p.h, p.w);
    let mut tmp = vec![0.0f32; h * w];
    let mut padded = vec![0.0f32; w + 2 * r as usize];
    for y in 0..h {
        let row = &p.d[y * w..(y + 1) * w];
        for (i, v) in padded.iter_mut().enumerate() {
            *v = row[(i as isize - r).clamp(0, w as isize - 1) as usize];
        }
        let dst = &mut tmp[y * w..(y + 1) * w];
        for (k, kv) in kernel.iter().enumerate() {
            for (d, s) in dst.iter_mut().zip(&padded[k..k + w]) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0f32; h * w];
    for (k, kv) in kernel.iter().enumerate() {
        for y in 0..h {
            let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
            let src = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    Plane::new(h, w, out)
}

fn downsample(p: &Plane) -> Plane {
    let smooth = blur(p, &gaussian_kernel(1.0));
    let h = p.h.div_ceil(2);
    let w = p.w.div_ceil(2);
    let mut d = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            d.push(smooth.at((2 * y).min(p.h - 1), (2 * x).min(p.w - 1)));
        }
    }
    Plane::new(h, w, d)
}

/// Resamples a coarse flow component onto a finer grid, rescaling the
/// displacement by `factor`.
fn upsample_component(c: &Plane, h: usize, w: usize, factor_x: f32, factor_y: f32, scale: f32) -> Plane {
    let mut d = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (v, _) = c.sample(x as f32 / factor_x, y as f32 / factor_y);
            d.push(v * scale);
        }
    }
    Plane::new(h, w, d)
}

fn gradients(p: &Plane) -> (Plane, Plane) {
    let (h, w) = (p.h, p.w);
    let mut gx = vec![0.0f32; h * w];
    let mut gy = vec![0.0f32; h * w];
    for y in 0..h {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(h - 1);
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            gx[y * w + x] = (p.at(y, xp) - p.at(y, xm)) / (xp - xm).max(1) as f32;
            gy[y * w + x] = (p.at(yp, x) - p.at(ym, x)) / (yp - ym).max(1) as f32;
        }
    }
    (Plane::new(h, w, gx), Plane::new(h, w, gy))
}

fn median3(p: &Plane) -> Plane {
    let (h, w) = (p.h, p.w);
    let mut out = Vec::with_capacity(h * w);
    let mut buf = [0.0f32; 9];
    for y in 0..h {
        for x in 0..w {
            let mut n = 0;
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    buf[n] = p.at(yy, xx);
                    n += 1;
                }
            }
            let (_, median, _) = buf[..n].select_nth_unstable_by(n / 2, |a, b| a.total_cmp(b));
            out.push(*median);
        }
    }
    Plane::new(h, w, out)
}

impl ClassicalPyramidal {
    fn pyramid(&self, base: Plane) -> Vec<Plane> {
        let mut levels = vec![base];
        while levels.len() < self.max_levels {
            let last = levels.last().unwrap();
            if last.h / 2 < self.min_level_side || last.w / 2 < self.min_level_side {
                break;
            }
            let next = downsample(last);
            levels.push(next);
        }
        levels
    }

    fn refine_level(&self, a: &Plane, b: &Plane, u: &mut Plane, v: &mut Plane) {
        let kernel = gaussian_kernel(self.window_sigma);
        let (ax, ay) = gradients(a);
        let n = a.h * a.w;
        let prod = |f: &dyn Fn(usize) -> f32| Plane::new(a.h, a.w, (0..n).map(f).collect());
        let sxx = blur(&prod(&|i| ax.d[i] * ax.d[i]), &kernel);
        let sxy = blur(&prod(&|i| ax.d[i] * ay.d[i]), &kernel);
        let syy = blur(&prod(&|i| ay.d[i] * ay.d[i]), &kernel);
        let lambda = self.regularization;

        let mut it = vec![0.0f32; n];
        for _ in 0..self.iterations {
            for y in 0..a.h {
                for x in 0..a.w {
                    let i = y * a.w + x;
                    let (bw, inside) = b.sample(x as f32 + u.d[i], y as f32 + v.d[i]);
                    it[i] = if inside { bw - a.d[i] } else { 0.0 };
                }
            }
            let bx = blur(&prod(&|i| ax.d[i] * it[i]), &kernel);
            let by = blur(&prod(&|i| ay.d[i] * it[i]), &kernel);
            for i in 0..n {
                let m11 = sxx.d[i] + lambda;
                let m12 = sxy.d[i];
                let m22 = syy.d[i] + lambda;
                let det = m11 * m22 - m12 * m12;
                if det <= 1e-12 {
                    continue;
                }
                let du = -(m22 * bx.d[i] - m12 * by.d[i]) / det;
                let dv = -(m11 * by.d[i] - m12 * bx.d[i]) / det;
                // Cap single updates; large jumps come from aliasing.
                u.d[i] += du.clamp(-2.0, 2.0);
                v.d[i] += dv.clamp(-2.0, 2.0);
            }
        }
        *u = median3(u);
        *v = median3(v);
    }
}

impl FlowEstimator for ClassicalPyramidal {
    fn name(&self) -> &str {
        "classical"
    }

    fn estimate(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        let (h, w) = (a.height(), a.width());
        let pa = self.pyramid(Plane::new(h, w, a.to_gray()));
        let pb = self.pyramid(Plane::new(h, w, b.to_gray()));
        let top = pa.len() - 1;
        let mut u = Plane::new(pa[top].h, pa[top].w, vec![0.0; pa[top].h * pa[top].w]);
        let mut v = u.clone();
        for level in (0..=top).rev() {
            let (la, lb) = (&pa[level], &pb[level]);
            if u.h != la.h || u.w != la.w {
                let fx = la.w as f32 / u.w as f32;
                let fy = la.h as f32 / u.h as f32;
                u = upsample_component(&u, la.h, la.w, fx, fy, fx);
                v = upsample_component(&v, la.h, la.w, fx, fy, fy);
            }
            self.refine_level(la, lb, &mut u, &mut v);
        }
        let limit = ((h * h + w * w) as f32).sqrt();
        let clamp = |d: Vec<f32>| d.into_iter().map(|x| x.clamp(-limit, limit)).collect();
        FlowField::new(h, w, clamp(u.d), clamp(v.d))
    }
}
