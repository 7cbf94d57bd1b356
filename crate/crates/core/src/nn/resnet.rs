use rand::Rng;

use super::{join, Activation, GatedCache, GatedConv, Params, Scalar, Tensor};

pub const RESIDUAL_BLOCKS: usize = 5;

const TRUNK_CHUNK: usize = 2048;

/// Residual block `x + second(first(x))` built from 1x1 gated convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub first: GatedConv<T>,
    pub second: GatedConv<T>,
}

/// Refinement network taking `f_int` and the original frame warped onto it.
/// The output layer predicts a correction that is added to the first
/// `out_ch` input channels (`f_int`).
#[derive(Clone, Debug, PartialEq)]
pub struct ResNetRefine<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub width: usize,
    pub head: GatedConv<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub tail: GatedConv<T>,
}

#[derive(Clone, Debug)]
pub struct ResNetCache<T> {
    head: GatedCache<T>,
    blocks: Vec<(GatedCache<T>, GatedCache<T>)>,
    tail: GatedCache<T>,
}

impl<T: Scalar> ResNetRefine<T> {
    pub fn new(in_ch: usize, out_ch: usize, width: usize, rng: &mut impl Rng) -> Self {
        assert!(out_ch <= in_ch, "the skip needs out_ch <= in_ch");
        let leaky = Activation::LeakyRelu(0.2);
        let head = GatedConv::init(in_ch, width, 3, 1, leaky, rng);
        let blocks = (0..RESIDUAL_BLOCKS)
            .map(|_| ResidualBlock {
                first: GatedConv::init(width, width, 1, 1, leaky, rng),
                second: GatedConv::init(width, width, 1, 1, Activation::Identity, rng),
            })
            .collect();
        let tail = GatedConv::init(width, out_ch, 3, 1, Activation::Tanh, rng);
        Self {
            in_ch,
            out_ch,
            width,
            head,
            blocks,
            tail,
        }
    }

    /// Features after the residual blocks, before the output layer.
    pub fn trunk(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.in_ch, "resnet input channels");
        let mut h = self.head.forward(x);
        // The blocks are pointwise, so they run over cache-sized pixel runs.
        let plane = h.plane();
        let mut start = 0;
        while start < plane {
            let len = TRUNK_CHUNK.min(plane - start);
            let mut data = Vec::with_capacity(h.c * len);
            for c in 0..h.c {
                data.extend_from_slice(&h.channel(c)[start..start + len]);
            }
            let mut part = Tensor::from_vec(h.c, 1, len, data);
            for b in &self.blocks {
                let r = b.second.forward(&b.first.forward(&part));
                part.add_assign(&r);
            }
            for c in 0..h.c {
                h.data[c * plane + start..c * plane + start + len].copy_from_slice(part.channel(c));
            }
            start += len;
        }
        h
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.tail.forward(&self.trunk(x));
        self.add_skip(x, &mut y);
        y
    }

    fn add_skip(&self, x: &Tensor<T>, y: &mut Tensor<T>) {
        let n = self.out_ch * x.plane();
        for (o, &i) in y.data.iter_mut().zip(&x.data[..n]) {
            *o = *o + i;
        }
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, ResNetCache<T>) {
        assert_eq!(x.c, self.in_ch, "resnet input channels");
        let (mut h, head) = self.head.forward_cached(x);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (a, c1) = b.first.forward_cached(&h);
            let (r, c2) = b.second.forward_cached(&a);
            h.add_assign(&r);
            blocks.push((c1, c2));
        }
        let (mut y, tail) = self.tail.forward_cached(&h);
        self.add_skip(x, &mut y);
        (y, ResNetCache { head, blocks, tail })
    }

    pub fn backward(&self, cache: &ResNetCache<T>, dy: &Tensor<T>, grad: &mut ResNetRefine<T>) -> Tensor<T> {
        let mut dh = self.tail.backward(&cache.tail, dy, &mut grad.tail);
        for ((b, (c1, c2)), g) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            let da = b.second.backward(c2, &dh, &mut g.second);
            let dr = b.first.backward(c1, &da, &mut g.first);
            dh.add_assign(&dr);
        }
        let mut dx = self.head.backward(&cache.head, &dh, &mut grad.head);
        let n = self.out_ch * dx.plane();
        for (d, &g) in dx.data[..n].iter_mut().zip(&dy.data) {
            *d = *d + g;
        }
        dx
    }
}

impl<T: Scalar> Params<T> for ResNetRefine<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T], Vec<usize>)) {
        self.head.visit(&join(prefix, "head"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.first.visit(&join(&p, "0"), f);
            b.second.visit(&join(&p, "1"), f);
        }
        self.tail.visit(&join(prefix, "tail"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T], Vec<usize>)) {
        self.head.visit_mut(&join(prefix, "head"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            b.first.visit_mut(&join(&p, "0"), f);
            b.second.visit_mut(&join(&p, "1"), f);
        }
        self.tail.visit_mut(&join(prefix, "tail"), f);
    }
}
