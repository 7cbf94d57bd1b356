use rand::Rng;

use super::{join, Activation, GatedCache, GatedConv, Params, Scalar, Tensor};

const LEAKY: Activation = Activation::LeakyRelu(0.2);

/// Three-level gated U-Net fusing the two halfway-warped neighbors.
///
/// Levels run at full, half and quarter resolution. Each encoder level's
/// output is concatenated into the decoder level of the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetFusion<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub width: usize,
    pub enc1: Vec<GatedConv<T>>,
    pub enc2: Vec<GatedConv<T>>,
    pub enc3: Vec<GatedConv<T>>,
    pub mid: Vec<GatedConv<T>>,
    pub dec3: Vec<GatedConv<T>>,
    pub up2: GatedConv<T>,
    pub dec2: Vec<GatedConv<T>>,
    pub up1: GatedConv<T>,
    pub dec1: Vec<GatedConv<T>>,
    pub out: GatedConv<T>,
}

/// Activations kept from a forward pass for [`UNetFusion::backward`].
#[derive(Clone, Debug)]
pub struct UNetCache<T> {
    enc1: Vec<GatedCache<T>>,
    enc2: Vec<GatedCache<T>>,
    enc3: Vec<GatedCache<T>>,
    mid: Vec<GatedCache<T>>,
    dec3: Vec<GatedCache<T>>,
    up2: GatedCache<T>,
    dec2: Vec<GatedCache<T>>,
    up1: GatedCache<T>,
    dec1: Vec<GatedCache<T>>,
    out: GatedCache<T>,
}

fn pair<T: Scalar>(in_ch: usize, width: usize, first_stride: usize, rng: &mut impl Rng) -> Vec<GatedConv<T>> {
    vec![
        GatedConv::init(in_ch, width, 3, first_stride, LEAKY, rng),
        GatedConv::init(width, width, 3, 1, LEAKY, rng),
    ]
}

fn run<T: Scalar>(layers: &[GatedConv<T>], x: &Tensor<T>, caches: Option<&mut Vec<GatedCache<T>>>) -> Tensor<T> {
    match caches {
        None => layers.iter().fold(x.clone(), |h, l| l.forward(&h)),
        Some(caches) => {
            let mut h = x.clone();
            for l in layers {
                let (y, c) = l.forward_cached(&h);
                caches.push(c);
                h = y;
            }
            h
        }
    }
}

fn run_back<T: Scalar>(
    layers: &[GatedConv<T>],
    caches: &[GatedCache<T>],
    dy: Tensor<T>,
    grads: &mut [GatedConv<T>],
) -> Tensor<T> {
    let mut d = dy;
    for ((l, c), g) in layers.iter().zip(caches).zip(grads.iter_mut()).rev() {
        d = l.backward(c, &d, g);
    }
    d
}

impl<T: Scalar> UNetFusion<T> {
    pub fn new(in_ch: usize, out_ch: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_ch,
            out_ch,
            width,
            enc1: pair(in_ch, width, 1, rng),
            enc2: pair(width, width, 2, rng),
            enc3: pair(width, width, 2, rng),
            mid: pair(width, width, 1, rng),
            dec3: pair(2 * width, width, 1, rng),
            up2: GatedConv::init(width, width, 3, 1, LEAKY, rng),
            dec2: pair(2 * width, width, 1, rng),
            up1: GatedConv::init(width, width, 3, 1, LEAKY, rng),
            dec1: pair(2 * width, width, 1, rng),
            out: GatedConv::init(width, out_ch, 3, 1, Activation::Tanh, rng),
        }
    }

    fn check(&self, x: &Tensor<T>) {
        assert_eq!(x.c, self.in_ch, "unet input channels");
        assert!(x.h % 4 == 0 && x.w % 4 == 0, "unet input must be a multiple of 4");
    }

    /// Raw network output in (-1, 1); callers clamp.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.check(x);
        let s1 = run(&self.enc1, x, None);
        let s2 = run(&self.enc2, &s1, None);
        let s3 = run(&self.enc3, &s2, None);
        let m = run(&self.mid, &s3, None);
        let d3 = run(&self.dec3, &Tensor::concat(&[&m, &s3]), None);
        let u2 = self.up2.forward(&d3.upsample_nearest2());
        let d2 = run(&self.dec2, &Tensor::concat(&[&u2, &s2]), None);
        let u1 = self.up1.forward(&d2.upsample_nearest2());
        let d1 = run(&self.dec1, &Tensor::concat(&[&u1, &s1]), None);
        self.out.forward(&d1)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, UNetCache<T>) {
        self.check(x);
        let (mut enc1, mut enc2, mut enc3, mut mid) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut dec3, mut dec2, mut dec1) = (Vec::new(), Vec::new(), Vec::new());
        let s1 = run(&self.enc1, x, Some(&mut enc1));
        let s2 = run(&self.enc2, &s1, Some(&mut enc2));
        let s3 = run(&self.enc3, &s2, Some(&mut enc3));
        let m = run(&self.mid, &s3, Some(&mut mid));
        let d3 = run(&self.dec3, &Tensor::concat(&[&m, &s3]), Some(&mut dec3));
        let (u2, up2) = self.up2.forward_cached(&d3.upsample_nearest2());
        let d2 = run(&self.dec2, &Tensor::concat(&[&u2, &s2]), Some(&mut dec2));
        let (u1, up1) = self.up1.forward_cached(&d2.upsample_nearest2());
        let d1 = run(&self.dec1, &Tensor::concat(&[&u1, &s1]), Some(&mut dec1));
        let (y, out) = self.out.forward_cached(&d1);
        let cache = UNetCache {
            enc1,
            enc2,
            enc3,
            mid,
            dec3,
            up2,
            dec2,
            up1,
            dec1,
            out,
        };
        (y, cache)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient.
    pub fn backward(&self, cache: &UNetCache<T>, dy: &Tensor<T>, grad: &mut UNetFusion<T>) -> Tensor<T> {
        let w = self.width;
        let d_d1 = self.out.backward(&cache.out, dy, &mut grad.out);
        let d_cat1 = run_back(&self.dec1, &cache.dec1, d_d1, &mut grad.dec1);
        let [d_u1, mut d_s1]: [Tensor<T>; 2] = d_cat1.split(&[w, w]).try_into().unwrap();
        let d_up1 = self.up1.backward(&cache.up1, &d_u1, &mut grad.up1);
        let d_d2 = Tensor::upsample_nearest2_backward(&d_up1);
        let d_cat2 = run_back(&self.dec2, &cache.dec2, d_d2, &mut grad.dec2);
        let [d_u2, mut d_s2]: [Tensor<T>; 2] = d_cat2.split(&[w, w]).try_into().unwrap();
        let d_up2 = self.up2.backward(&cache.up2, &d_u2, &mut grad.up2);
        let d_d3 = Tensor::upsample_nearest2_backward(&d_up2);
        let d_cat3 = run_back(&self.dec3, &cache.dec3, d_d3, &mut grad.dec3);
        let [d_m, mut d_s3]: [Tensor<T>; 2] = d_cat3.split(&[w, w]).try_into().unwrap();
        d_s3.add_assign(&run_back(&self.mid, &cache.mid, d_m, &mut grad.mid));
        d_s2.add_assign(&run_back(&self.enc3, &cache.enc3, d_s3, &mut grad.enc3));
        d_s1.add_assign(&run_back(&self.enc2, &cache.enc2, d_s2, &mut grad.enc2));
        run_back(&self.enc1, &cache.enc1, d_s1, &mut grad.enc1)
    }
}

fn visit_list<'a, T: Scalar>(
    layers: &'a [GatedConv<T>],
    prefix: &str,
    f: &mut dyn FnMut(String, &'a [T], Vec<usize>),
) {
    for (i, l) in layers.iter().enumerate() {
        l.visit(&join(prefix, &i.to_string()), f);
    }
}

fn visit_list_mut<T: Scalar>(
    layers: &mut [GatedConv<T>],
    prefix: &str,
    f: &mut dyn FnMut(String, &mut [T], Vec<usize>),
) {
    for (i, l) in layers.iter_mut().enumerate() {
        l.visit_mut(&join(prefix, &i.to_string()), f);
    }
}

impl<T: Scalar> Params<T> for UNetFusion<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T], Vec<usize>)) {
        visit_list(&self.enc1, &join(prefix, "enc1"), f);
        visit_list(&self.enc2, &join(prefix, "enc2"), f);
        visit_list(&self.enc3, &join(prefix, "enc3"), f);
        visit_list(&self.mid, &join(prefix, "mid"), f);
        visit_list(&self.dec3, &join(prefix, "dec3"), f);
        self.up2.visit(&join(prefix, "up2"), f);
        visit_list(&self.dec2, &join(prefix, "dec2"), f);
        self.up1.visit(&join(prefix, "up1"), f);
        visit_list(&self.dec1, &join(prefix, "dec1"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T], Vec<usize>)) {
        visit_list_mut(&mut self.enc1, &join(prefix, "enc1"), f);
        visit_list_mut(&mut self.enc2, &join(prefix, "enc2"), f);
        visit_list_mut(&mut self.enc3, &join(prefix, "enc3"), f);
        visit_list_mut(&mut self.mid, &join(prefix, "mid"), f);
        visit_list_mut(&mut self.dec3, &join(prefix, "dec3"), f);
        self.up2.visit_mut(&join(prefix, "up2"), f);
        visit_list_mut(&mut self.dec2, &join(prefix, "dec2"), f);
        self.up1.visit_mut(&join(prefix, "up1"), f);
        visit_list_mut(&mut self.dec1, &join(prefix, "dec1"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}
