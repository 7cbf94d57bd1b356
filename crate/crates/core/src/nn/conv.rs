//! Convolutions (im2col + GEMM) and gated convolutions, with their
//! backward passes.

use rand::Rng;

use super::{join, Params, Scalar, Tensor};

/// Upper bound on im2col buffer elements; larger images are processed in
/// horizontal stripes.
const TILE_ELEMS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out][in][ky][kx]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            weight: vec![T::zero(); out_ch * in_ch * kernel * kernel],
            bias: vec![T::zero(); out_ch],
        }
    }

    /// He-uniform weights for a leaky ramp with the given negative slope,
    /// zero biases.
    pub fn init(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, slope: f64, rng: &mut impl Rng) -> Self {
        let mut conv = Self::zeros(in_ch, out_ch, kernel, stride);
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        for w in conv.weight.iter_mut() {
            *w = T::lit(rng.random_range(-bound..bound));
        }
        conv
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        conv_forward(x, &[self]).pop().unwrap()
    }
}

impl<T: Scalar> Params<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T], Vec<usize>)) {
        f(
            join(prefix, "weight"),
            &self.weight,
            vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
        );
        f(join(prefix, "bias"), &self.bias, vec![self.out_ch]);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T], Vec<usize>)) {
        let shape = vec![self.out_ch, self.in_ch, self.kernel, self.kernel];
        f(join(prefix, "weight"), &mut self.weight, shape);
        f(join(prefix, "bias"), &mut self.bias, vec![self.out_ch]);
    }
}

/// Output columns `lo..hi` whose input column `ox * s + off` lies inside
/// `0..w`.
fn valid_columns(w: usize, out_w: usize, s: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 { ((-off) as usize).div_ceil(s).min(out_w) } else { 0 };
    let last = w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last as usize / s + 1).min(out_w) };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &Tensor<T>, conv: &Conv2d<T>, out_w: usize, r0: usize, r1: usize, cols: &mut Vec<T>) {
    let (k, s, p) = (conv.kernel, conv.stride, conv.pad as isize);
    let n = (r1 - r0) * out_w;
    // Every entry is overwritten below.
    cols.resize(conv.patch_len() * n, T::zero());
    let mut row = 0;
    for ci in 0..x.c {
        let ch = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let off = kx as isize - p;
                let (lo, hi) = valid_columns(x.w, out_w, s, off);
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in r0..r1 {
                    let d = &mut dst[(oy - r0) * out_w..(oy - r0 + 1) * out_w];
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= x.h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &ch[iy as usize * x.w..(iy as usize + 1) * x.w];
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    if s == 1 {
                        let a = (lo as isize + off) as usize;
                        d[lo..hi].copy_from_slice(&src[a..a + hi - lo]);
                    } else {
                        for (ox, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src[(((ox + lo) * s) as isize + off) as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], conv: &Conv2d<T>, dx: &mut Tensor<T>, out_w: usize, r0: usize, r1: usize) {
    let (k, s, p) = (conv.kernel, conv.stride, conv.pad as isize);
    let n = (r1 - r0) * out_w;
    let (h, w) = (dx.h, dx.w);
    let mut row = 0;
    for ci in 0..dx.c {
        for ky in 0..k {
            for kx in 0..k {
                let off = kx as isize - p;
                let (lo, hi) = valid_columns(w, out_w, s, off);
                let src = &cols[row * n..(row + 1) * n];
                for oy in r0..r1 {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    let sr = &src[(oy - r0) * out_w + lo..(oy - r0) * out_w + hi];
                    for (j, &g) in sr.iter().enumerate() {
                        let ix = (((j + lo) * s) as isize + off) as usize;
                        let d = &mut dx.data[base + ix];
                        *d = *d + g;
                    }
                }
                row += 1;
            }
        }
    }
}

fn rows_per_tile(patch: usize, out_h: usize, out_w: usize) -> usize {
    (TILE_ELEMS / (patch * out_w).max(1)).clamp(1, out_h)
}

/// Weights of all banks stacked row-wise, so one GEMM serves every bank.
fn stacked_weights<'a, T: Scalar>(banks: &[&'a Conv2d<T>]) -> std::borrow::Cow<'a, [T]> {
    if banks.len() == 1 {
        return std::borrow::Cow::Borrowed(&banks[0].weight);
    }
    std::borrow::Cow::Owned(banks.iter().flat_map(|b| b.weight.iter().copied()).collect())
}

/// Stacked bias-free outputs of several convolutions with identical
/// geometry, from one im2col buffer and a single GEMM.
fn stacked_forward<T: Scalar>(x: &Tensor<T>, banks: &[&Conv2d<T>]) -> (Vec<T>, usize, usize) {
    let geo = banks[0];
    assert_eq!(x.c, geo.in_ch, "conv input channels");
    debug_assert!(banks.iter().all(|b| b.in_ch == geo.in_ch && b.kernel == geo.kernel && b.stride == geo.stride));
    let (oh, ow) = geo.out_size(x.h, x.w);
    let plane = oh * ow;
    let kk = geo.patch_len();
    let m: usize = banks.iter().map(|b| b.out_ch).sum();
    let weight = stacked_weights(banks);
    let mut out = vec![T::zero(); m * plane];
    if geo.is_pointwise() {
        T::gemm_strided(
            m, kk, plane, &weight, kk as isize, 1, &x.data, plane as isize, 1,
            T::zero(), &mut out, plane as isize, 1,
        );
    } else {
        let step = rows_per_tile(kk, oh, ow);
        let mut cols = Vec::new();
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + step).min(oh);
            let n = (r1 - r0) * ow;
            im2col(x, geo, ow, r0, r1, &mut cols);
            T::gemm_strided(
                m, kk, n, &weight, kk as isize, 1, &cols, n as isize, 1,
                T::zero(), &mut out[r0 * ow..], plane as isize, 1,
            );
            r0 = r1;
        }
    }
    (out, oh, ow)
}

/// Runs several convolutions with identical geometry over one input,
/// sharing the im2col buffer and a single GEMM.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, banks: &[&Conv2d<T>]) -> Vec<Tensor<T>> {
    let (out, oh, ow) = stacked_forward(x, banks);
    let plane = oh * ow;
    let mut outs = Vec::with_capacity(banks.len());
    let mut offset = 0;
    for bank in banks {
        let len = bank.out_ch * plane;
        let mut data = out[offset..offset + len].to_vec();
        for (o, &b) in bank.bias.iter().enumerate() {
            data[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = *v + b);
        }
        outs.push(Tensor::from_vec(bank.out_ch, oh, ow, data));
        offset += len;
    }
    outs
}

/// Returns the input gradient and, when `grads` is given, accumulates the
/// parameter gradients of each bank into it.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    banks: &[&Conv2d<T>],
    dys: &[&Tensor<T>],
    mut grads: Option<&mut [&mut Conv2d<T>]>,
) -> Tensor<T> {
    let geo = banks[0];
    let (oh, ow) = geo.out_size(x.h, x.w);
    let plane = oh * ow;
    let kk = geo.patch_len();
    let m: usize = banks.iter().map(|b| b.out_ch).sum();
    let mut dx = Tensor::zeros(x.c, x.h, x.w);

    if let Some(grads) = grads.as_deref_mut() {
        for ((bank, dy), grad) in banks.iter().zip(dys).zip(grads.iter_mut()) {
            for o in 0..bank.out_ch {
                let s: T = dy.data[o * plane..(o + 1) * plane].iter().copied().sum();
                grad.bias[o] = grad.bias[o] + s;
            }
        }
    }

    let weight = stacked_weights(banks);
    let dy: std::borrow::Cow<'_, [T]> = if dys.len() == 1 {
        std::borrow::Cow::Borrowed(&dys[0].data)
    } else {
        std::borrow::Cow::Owned(dys.iter().flat_map(|d| d.data.iter().copied()).collect())
    };
    let mut dw = grads.as_ref().map(|_| vec![T::zero(); m * kk]);

    if geo.is_pointwise() {
        if let Some(dw) = dw.as_mut() {
            // dW = dY X^T
            T::gemm_strided(
                m, plane, kk, &dy, plane as isize, 1, &x.data, 1, plane as isize,
                T::zero(), dw, kk as isize, 1,
            );
        }
        // dX = W^T dY
        T::gemm_strided(
            kk, m, plane, &weight, 1, kk as isize, &dy, plane as isize, 1,
            T::zero(), &mut dx.data, plane as isize, 1,
        );
    } else {
        let step = rows_per_tile(kk, oh, ow);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        let mut r0 = 0;
        while r0 < oh {
            let r1 = (r0 + step).min(oh);
            let n = (r1 - r0) * ow;
            let dy_tile = &dy[r0 * ow..];
            if let Some(dw) = dw.as_mut() {
                im2col(x, geo, ow, r0, r1, &mut cols);
                T::gemm_strided(
                    m, n, kk, dy_tile, plane as isize, 1, &cols, 1, n as isize,
                    T::one(), dw, kk as isize, 1,
                );
            }
            dcols.clear();
            dcols.resize(kk * n, T::zero());
            T::gemm_strided(
                kk, m, n, &weight, 1, kk as isize, dy_tile, plane as isize, 1,
                T::zero(), &mut dcols, n as isize, 1,
            );
            col2im_add(&dcols, geo, &mut dx, ow, r0, r1);
            r0 = r1;
        }
    }
    if let (Some(grads), Some(dw)) = (grads, dw) {
        let mut offset = 0;
        for (bank, grad) in banks.iter().zip(grads.iter_mut()) {
            let len = bank.out_ch * kk;
            for (g, d) in grad.weight.iter_mut().zip(&dw[offset..offset + len]) {
                *g = *g + *d;
            }
            offset += len;
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu(s) => {
                if v >= T::zero() {
                    v
                } else {
                    v * T::lit(s)
                }
            }
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation input.
    #[inline]
    pub fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if v >= T::zero() {
                    T::one()
                } else {
                    T::lit(s)
                }
            }
            Activation::Tanh => {
                let t = v.tanh();
                T::one() - t * t
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `activation(conv_feature(x)) * sigmoid(conv_gate(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedConv<T> {
    pub feature: Conv2d<T>,
    pub gate: Conv2d<T>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct GatedCache<T> {
    input: Tensor<T>,
    feature: Tensor<T>,
    gate: Tensor<T>,
}

impl<T: Scalar> GatedConv<T> {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let slope = match activation {
            Activation::LeakyRelu(s) => s,
            Activation::Relu => 0.0,
            _ => 1.0,
        };
        Self {
            feature: Conv2d::init(in_ch, out_ch, kernel, stride, slope, rng),
            gate: Conv2d::init(in_ch, out_ch, kernel, stride, 1.0, rng),
            activation,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.feature.out_ch
    }

    fn combine(&self, f: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        let act = self.activation;
        f.zip_map(g, |a, b| act.apply(a) * sigmoid(b))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (mut out, oh, ow) = stacked_forward(x, &[&self.feature, &self.gate]);
        let plane = oh * ow;
        let act = self.activation;
        let (f, g) = out.split_at_mut(self.feature.out_ch * plane);
        for o in 0..self.feature.out_ch {
            let (bf, bg) = (self.feature.bias[o], self.gate.bias[o]);
            let rows = f[o * plane..(o + 1) * plane].iter_mut().zip(&g[o * plane..(o + 1) * plane]);
            for (a, &b) in rows {
                *a = act.apply(*a + bf) * sigmoid(b + bg);
            }
        }
        out.truncate(self.feature.out_ch * plane);
        Tensor::from_vec(self.feature.out_ch, oh, ow, out)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, GatedCache<T>) {
        let mut o = conv_forward(x, &[&self.feature, &self.gate]);
        let gate = o.pop().unwrap();
        let feature = o.pop().unwrap();
        let y = self.combine(&feature, &gate);
        (
            y,
            GatedCache {
                input: x.clone(),
                feature,
                gate,
            },
        )
    }

    pub fn backward(&self, cache: &GatedCache<T>, dy: &Tensor<T>, grad: &mut GatedConv<T>) -> Tensor<T> {
        let act = self.activation;
        let n = dy.data.len();
        let mut df = Tensor::zeros(dy.c, dy.h, dy.w);
        let mut dg = Tensor::zeros(dy.c, dy.h, dy.w);
        for i in 0..n {
            let f = cache.feature.data[i];
            let s = sigmoid(cache.gate.data[i]);
            let d = dy.data[i];
            df.data[i] = d * s * act.derivative(f);
            dg.data[i] = d * act.apply(f) * s * (T::one() - s);
        }
        let GatedConv { feature, gate, .. } = grad;
        conv_backward(
            &cache.input,
            &[&self.feature, &self.gate],
            &[&df, &dg],
            Some(&mut [feature, gate]),
        )
    }
}

impl<T: Scalar> Params<T> for GatedConv<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T], Vec<usize>)) {
        self.feature.visit(&join(prefix, "feature"), f);
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T], Vec<usize>)) {
        self.feature.visit_mut(&join(prefix, "feature"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive(x: &Tensor<f64>, c: &Conv2d<f64>) -> Tensor<f64> {
        let (oh, ow) = c.out_size(x.h, x.w);
        let mut out = Tensor::zeros(c.out_ch, oh, ow);
        for o in 0..c.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = c.bias[o];
                    for ci in 0..c.in_ch {
                        for ky in 0..c.kernel {
                            for kx in 0..c.kernel {
                                let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wi = ((o * c.in_ch + ci) * c.kernel + ky) * c.kernel + kx;
                                acc += c.weight[wi] * x.data[ci * x.h * x.w + iy as usize * x.w + ix as usize];
                            }
                        }
                    }
                    out.data[o * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, h, w) in [(3, 1, 7, 9), (3, 2, 8, 10), (3, 2, 7, 7), (1, 1, 5, 6)] {
            let mut conv = Conv2d::<f64>::init(3, 4, k, s, 0.2, &mut rng);
            conv.bias.iter_mut().enumerate().for_each(|(i, b)| *b = i as f64 * 0.1);
            let x = random_tensor(3, h, w, &mut rng);
            let got = conv.forward(&x);
            let want = naive(&x, &conv);
            assert_eq!((got.h, got.w), (want.h, want.w));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x) - b, dy> = <x, dx> and = <w, dW> for a linear layer.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let conv = Conv2d::<f64>::init(2, 3, k, s, 0.2, &mut rng);
            let x = random_tensor(2, 8, 6, &mut rng);
            let y = conv.forward(&x);
            let dy = random_tensor(y.c, y.h, y.w, &mut rng);
            let mut grad = Conv2d::<f64>::zeros(2, 3, k, s);
            let dx = conv_backward(&x, &[&conv], &[&dy], Some(&mut [&mut grad]));
            let plane = y.h * y.w;
            let lhs: f64 = (0..y.data.len())
                .map(|i| (y.data[i] - conv.bias[i / plane]) * dy.data[i])
                .sum();
            let via_x: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
            let via_w: f64 = conv.weight.iter().zip(&grad.weight).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9, "{lhs} vs {via_x}");
            assert!((lhs - via_w).abs() < 1e-9, "{lhs} vs {via_w}");
            let bias_sum: f64 = dy.data.iter().sum();
            assert!((grad.bias.iter().sum::<f64>() - bias_sum).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_gate_reduces_to_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = GatedConv::<f64>::init(3, 4, 3, 1, Activation::Identity, &mut rng);
        g.gate.weight.iter_mut().for_each(|w| *w = 0.0);
        g.gate.bias.iter_mut().for_each(|b| *b = 20.0);
        let x = random_tensor(3, 6, 6, &mut rng);
        let plain = g.feature.forward(&x);
        let gated = g.forward(&x);
        let gate = sigmoid(20.0f64);
        assert!((1.0 - gate) < 1e-8);
        for (a, b) in gated.data.iter().zip(&plain.data) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
    }

    #[test]
    fn tiled_and_untiled_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let conv = Conv2d::<f32>::init(64, 8, 3, 1, 0.2, &mut rng);
        // 64 * 9 * 80 columns per row forces several stripes.
        let x = Tensor::from_vec(64, 70, 80, (0..64 * 70 * 80).map(|i| ((i % 97) as f32 / 97.0) - 0.5).collect());
        let y = conv.forward(&x);
        let x64 = Tensor::from_vec(64, 70, 80, x.data.iter().map(|&v| v as f64).collect());
        let conv64 = Conv2d {
            weight: conv.weight.iter().map(|&v| v as f64).collect(),
            bias: conv.bias.iter().map(|&v| v as f64).collect(),
            in_ch: 64,
            out_ch: 8,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let want = naive(&x64, &conv64);
        for (a, b) in y.data.iter().zip(&want.data) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }
}
