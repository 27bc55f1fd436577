//! Spatiotemporal-factorized segmentation at desk scale: a per-frame
//! spatial encoder with one skip connection, a pixel-wise temporal mixer
//! over channel-stacked frames, and a shared per-frame sigmoid head.
//! Everything runs in 64-bit floats with hand-written forward/backward
//! passes so gradients can be checked against finite differences.

pub mod boundary;
pub mod sampler;
pub mod train;

use std::path::Path;

use crate::error::{Error, Result};

/// Clamp bound for BCE probabilities.
pub const BCE_EPS: f64 = 1e-7;
/// Label value excluded from the loss.
pub const LABEL_IGNORE: f64 = 255.0;

/// Dense row-major float tensor, up to 4 dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch {
                expected: format!("{expect} values for shape {shape:?}"),
                found: format!("{}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data, new dims; product must match.
    pub fn reshape(mut self, shape: &[usize]) -> Tensor {
        debug_assert_eq!(self.data.len(), shape.iter().product::<usize>());
        self.shape = shape.to_vec();
        self
    }

    fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{what} shaped {shape:?}"),
                found: format!("{:?}", self.shape),
            });
        }
        Ok(())
    }
}

fn relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero the gradient wherever the post-activation is zero.
fn relu_mask(post: &Tensor, grad: &mut Tensor) {
    for (g, y) in grad.data.iter_mut().zip(&post.data) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// A single 2-D convolution layer over (C, H, W) tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (out_ch, in_ch, kh, kw)
    pub weight: Tensor,
    /// (out_ch)
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize) -> Conv2d {
        Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, k, k]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.weight.shape[0],
            self.weight.shape[1],
            self.weight.shape[2],
            self.weight.shape[3],
        )
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.dims();
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (out_ch, in_ch, kh, kw) = self.dims();
        if x.shape.len() != 3 || x.shape[0] != in_ch {
            return Err(Error::ShapeMismatch {
                expected: format!("({in_ch}, h, w) input"),
                found: format!("{:?}", x.shape),
            });
        }
        let (h, w) = (x.shape[1], x.shape[2]);
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Tensor::zeros(&[out_ch, oh, ow]);
        let pad = self.padding as isize;
        for o in 0..out_ch {
            let bias = self.bias.data[o];
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias;
                    for c in 0..in_ch {
                        for p in 0..kh {
                            let y = (i * self.stride + p) as isize - pad;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = (c * h + y as usize) * w;
                            let wrow = ((o * in_ch + c) * kh + p) * kw;
                            for q in 0..kw {
                                let xx = (j * self.stride + q) as isize - pad;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += self.weight.data[wrow + q] * x.data[xrow + xx as usize];
                            }
                        }
                    }
                    out.data[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        Ok(out)
    }

    /// Gradients wrt input, weight, and bias given the forward input and
    /// the gradient at the output.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (out_ch, in_ch, kh, kw) = self.dims();
        let (h, w) = (x.shape[1], x.shape[2]);
        let (oh, ow) = self.out_hw(h, w);
        debug_assert_eq!(grad_out.shape, vec![out_ch, oh, ow]);
        let mut gx = Tensor::zeros(&[in_ch, h, w]);
        let mut gw = Tensor::zeros(&[out_ch, in_ch, kh, kw]);
        let mut gb = Tensor::zeros(&[out_ch]);
        let pad = self.padding as isize;
        for o in 0..out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let g = grad_out.data[(o * oh + i) * ow + j];
                    if g == 0.0 {
                        continue;
                    }
                    gb.data[o] += g;
                    for c in 0..in_ch {
                        for p in 0..kh {
                            let y = (i * self.stride + p) as isize - pad;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let xrow = (c * h + y as usize) * w;
                            let wrow = ((o * in_ch + c) * kh + p) * kw;
                            for q in 0..kw {
                                let xx = (j * self.stride + q) as isize - pad;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                gw.data[wrow + q] += g * x.data[xrow + xx as usize];
                                gx.data[xrow + xx as usize] += g * self.weight.data[wrow + q];
                            }
                        }
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

/// Nearest-neighbor x2 upsampling of a (C, H, W) tensor.
fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x.data[(ci * h + i) * w + j];
                for di in 0..2 {
                    for dj in 0..2 {
                        out.data[(ci * 2 * h + 2 * i + di) * 2 * w + 2 * j + dj] = v;
                    }
                }
            }
        }
    }
    out
}

fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (c, h2, w2) = (grad_out.shape[0], grad_out.shape[1], grad_out.shape[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        acc += grad_out.data[(ci * h2 + 2 * i + di) * w2 + 2 * j + dj];
                    }
                }
                gx.data[(ci * h + i) * w + j] = acc;
            }
        }
    }
    gx
}

/// Channel concatenation of two (C, H, W) tensors; channels are the
/// outermost dim, so this is a plain append.
fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!(a.shape[1..], b.shape[1..]);
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        shape: vec![a.shape[0] + b.shape[0], a.shape[1], a.shape[2]],
        data,
    }
}

/// Architecture hyperparameters. Spatial dims are runtime properties of
/// the input (any even H, W); they do not enter the parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Frames per sequence.
    pub t: usize,
    /// Input channels (bands).
    pub c_in: usize,
    /// Spatial feature channels per frame.
    pub f: usize,
    /// Temporal mixer width.
    pub m: usize,
    /// Mixed channels per frame feeding the head.
    pub g: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            t: 10,
            c_in: 4,
            f: 8,
            m: 16,
            g: 8,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.c_in == 0 || self.f == 0 || self.m == 0 || self.g == 0 {
            return Err(Error::Config {
                reason: format!("model config dims must be positive: {self:?}"),
            });
        }
        Ok(())
    }
}

/// Parameter group names in declaration order; gradients, SGD updates and
/// the serialized artifact all follow this order.
pub const GROUP_NAMES: [&str; 16] = [
    "conv1.weight",
    "conv1.bias",
    "down.weight",
    "down.bias",
    "up.weight",
    "up.bias",
    "fuse.weight",
    "fuse.bias",
    "mix1.weight",
    "mix1.bias",
    "mid.weight",
    "mid.bias",
    "mix2.weight",
    "mix2.bias",
    "head.weight",
    "head.bias",
];

/// Gradients for every parameter group, aligned with [`GROUP_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

/// One training example.
#[derive(Debug, Clone)]
pub struct Sample {
    /// (T, C_in, H, W), normalized reflectance.
    pub frames: Tensor,
    /// (T, H, W), values 0, 1, or [`LABEL_IGNORE`].
    pub labels: Tensor,
    /// Row-major (T, H, W); false pixels are excluded from the loss.
    pub valid: Vec<bool>,
}

/// The factorized segmentation network. The spatial stage runs per frame
/// with shared weights; the temporal stage mixes all frames pixel-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedNet {
    pub config: NetConfig,
    /// 3x3, C_in -> 8.
    pub conv1: Conv2d,
    /// 3x3 stride 2, 8 -> 16.
    pub down: Conv2d,
    /// 3x3 after nearest x2, 16 -> 8.
    pub up: Conv2d,
    /// 3x3 over the skip concat, (8+8) -> F.
    pub fuse: Conv2d,
    /// 1x1, T*F -> M.
    pub mix1: Conv2d,
    /// 3x3, M -> M.
    pub mid: Conv2d,
    /// 1x1, M -> T*G.
    pub mix2: Conv2d,
    /// 1x1, G -> 1, shared across frames.
    pub head: Conv2d,
}

struct SpatialCache {
    x: Tensor,
    a: Tensor,
    d: Tensor,
    up_in: Tensor,
    u: Tensor,
    cat: Tensor,
    f: Tensor,
}

/// Intermediates needed by the backward pass.
pub struct ForwardCache {
    spatial: Vec<SpatialCache>,
    stacked: Tensor,
    m1: Tensor,
    md: Tensor,
    m2: Tensor,
    probs: Tensor,
}

impl FactorizedNet {
    /// All parameters zero; forward outputs exactly 0.5 everywhere.
    pub fn new(config: NetConfig) -> Result<FactorizedNet> {
        config.validate()?;
        Ok(FactorizedNet {
            config,
            conv1: Conv2d::new(config.c_in, 8, 3, 1, 1),
            down: Conv2d::new(8, 16, 3, 2, 1),
            up: Conv2d::new(16, 8, 3, 1, 1),
            fuse: Conv2d::new(16, config.f, 3, 1, 1),
            mix1: Conv2d::new(config.t * config.f, config.m, 1, 1, 0),
            mid: Conv2d::new(config.m, config.m, 3, 1, 1),
            mix2: Conv2d::new(config.m, config.t * config.g, 1, 1, 0),
            head: Conv2d::new(config.g, 1, 1, 1, 0),
        })
    }

    /// Deterministic initialization: weights uniform in +-sqrt(6/fan_in)
    /// (variance-preserving under ReLU), biases zero, groups filled in
    /// declaration order from a single stream.
    pub fn init_seeded(config: NetConfig, seed: u64) -> Result<FactorizedNet> {
        use rand::{Rng, SeedableRng};
        let mut net = Self::new(config)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for (name, tensor) in net.param_groups_mut() {
            if name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = tensor.shape[1..].iter().product();
            let s = (6.0 / fan_in as f64).sqrt();
            for v in &mut tensor.data {
                *v = rng.gen_range(-s..s);
            }
        }
        Ok(net)
    }

    pub fn param_groups(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            (GROUP_NAMES[0], &self.conv1.weight),
            (GROUP_NAMES[1], &self.conv1.bias),
            (GROUP_NAMES[2], &self.down.weight),
            (GROUP_NAMES[3], &self.down.bias),
            (GROUP_NAMES[4], &self.up.weight),
            (GROUP_NAMES[5], &self.up.bias),
            (GROUP_NAMES[6], &self.fuse.weight),
            (GROUP_NAMES[7], &self.fuse.bias),
            (GROUP_NAMES[8], &self.mix1.weight),
            (GROUP_NAMES[9], &self.mix1.bias),
            (GROUP_NAMES[10], &self.mid.weight),
            (GROUP_NAMES[11], &self.mid.bias),
            (GROUP_NAMES[12], &self.mix2.weight),
            (GROUP_NAMES[13], &self.mix2.bias),
            (GROUP_NAMES[14], &self.head.weight),
            (GROUP_NAMES[15], &self.head.bias),
        ]
    }

    pub fn param_groups_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            (GROUP_NAMES[0], &mut self.conv1.weight),
            (GROUP_NAMES[1], &mut self.conv1.bias),
            (GROUP_NAMES[2], &mut self.down.weight),
            (GROUP_NAMES[3], &mut self.down.bias),
            (GROUP_NAMES[4], &mut self.up.weight),
            (GROUP_NAMES[5], &mut self.up.bias),
            (GROUP_NAMES[6], &mut self.fuse.weight),
            (GROUP_NAMES[7], &mut self.fuse.bias),
            (GROUP_NAMES[8], &mut self.mix1.weight),
            (GROUP_NAMES[9], &mut self.mix1.bias),
            (GROUP_NAMES[10], &mut self.mid.weight),
            (GROUP_NAMES[11], &mut self.mid.bias),
            (GROUP_NAMES[12], &mut self.mix2.weight),
            (GROUP_NAMES[13], &mut self.mix2.bias),
            (GROUP_NAMES[14], &mut self.head.weight),
            (GROUP_NAMES[15], &mut self.head.bias),
        ]
    }

    fn check_frames(&self, frames: &Tensor) -> Result<(usize, usize)> {
        let c = self.config;
        if frames.shape.len() != 4 || frames.shape[0] != c.t || frames.shape[1] != c.c_in {
            return Err(Error::ShapeMismatch {
                expected: format!("frames ({}, {}, h, w)", c.t, c.c_in),
                found: format!("{:?}", frames.shape),
            });
        }
        let (h, w) = (frames.shape[2], frames.shape[3]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::OddDims {
                height: h,
                width: w,
            });
        }
        Ok((h, w))
    }

    fn spatial_one(&self, x: Tensor) -> Result<SpatialCache> {
        let mut a = self.conv1.forward(&x)?;
        relu_inplace(&mut a);
        let mut d = self.down.forward(&a)?;
        relu_inplace(&mut d);
        let up_in = upsample2(&d);
        let mut u = self.up.forward(&up_in)?;
        relu_inplace(&mut u);
        let cat = concat_channels(&a, &u);
        let mut f = self.fuse.forward(&cat)?;
        relu_inplace(&mut f);
        Ok(SpatialCache {
            x,
            a,
            d,
            up_in,
            u,
            cat,
            f,
        })
    }

    fn frame_slice(frames: &Tensor, t: usize) -> Tensor {
        let per = frames.len() / frames.shape[0];
        Tensor {
            shape: frames.shape[1..].to_vec(),
            data: frames.data[t * per..(t + 1) * per].to_vec(),
        }
    }

    /// Per-frame spatial features (T, F, H, W); frame t depends only on
    /// input frame t.
    pub fn forward_spatial(&self, frames: &Tensor) -> Result<Tensor> {
        let caches = self.forward_spatial_cached(frames)?;
        Ok(Self::collect_features(&caches, self.config.f))
    }

    fn forward_spatial_cached(&self, frames: &Tensor) -> Result<Vec<SpatialCache>> {
        self.check_frames(frames)?;
        (0..self.config.t)
            .map(|t| self.spatial_one(Self::frame_slice(frames, t)))
            .collect()
    }

    fn collect_features(caches: &[SpatialCache], f: usize) -> Tensor {
        let (h, w) = (caches[0].f.shape[1], caches[0].f.shape[2]);
        let mut data = Vec::with_capacity(caches.len() * f * h * w);
        for cache in caches {
            data.extend_from_slice(&cache.f.data);
        }
        Tensor {
            shape: vec![caches.len(), f, h, w],
            data,
        }
    }

    /// Pixel-wise temporal mixing: frames stacked along channels, passed
    /// through mix1 -> mid -> mix2, reshaped back per frame.
    pub fn forward_temporal(&self, features: &Tensor) -> Result<Tensor> {
        let (_, _, m2) = self.forward_temporal_cached(features)?;
        let c = self.config;
        let (h, w) = (features.shape[2], features.shape[3]);
        Ok(m2.reshape(&[c.t, c.g, h, w]))
    }

    fn forward_temporal_cached(&self, features: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let c = self.config;
        if features.shape.len() != 4 || features.shape[0] != c.t || features.shape[1] != c.f {
            return Err(Error::ShapeMismatch {
                expected: format!("features ({}, {}, h, w)", c.t, c.f),
                found: format!("{:?}", features.shape),
            });
        }
        let (h, w) = (features.shape[2], features.shape[3]);
        let stacked = features.clone().reshape(&[c.t * c.f, h, w]);
        let mut m1 = self.mix1.forward(&stacked)?;
        relu_inplace(&mut m1);
        let mut md = self.mid.forward(&m1)?;
        relu_inplace(&mut md);
        let m2 = self.mix2.forward(&md)?;
        Ok((m1, md, m2))
    }

    /// Full forward pass to per-frame, per-pixel probabilities (T, H, W),
    /// keeping the intermediates the backward pass needs.
    pub fn forward_cached(&self, frames: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let c = self.config;
        let spatial = self.forward_spatial_cached(frames)?;
        let features = Self::collect_features(&spatial, c.f);
        let (h, w) = (features.shape[2], features.shape[3]);
        let stacked = features.reshape(&[c.t * c.f, h, w]);
        let mut m1 = self.mix1.forward(&stacked)?;
        relu_inplace(&mut m1);
        let mut md = self.mid.forward(&m1)?;
        relu_inplace(&mut md);
        let m2 = self.mix2.forward(&md)?;

        let mut probs = Tensor::zeros(&[c.t, h, w]);
        for t in 0..c.t {
            let frame = Tensor {
                shape: vec![c.g, h, w],
                data: m2.data[t * c.g * h * w..(t + 1) * c.g * h * w].to_vec(),
            };
            let logits = self.head.forward(&frame)?;
            for (i, &l) in logits.data.iter().enumerate() {
                probs.data[t * h * w + i] = 1.0 / (1.0 + (-l).exp());
            }
        }
        let cache = ForwardCache {
            spatial,
            stacked,
            m1,
            md,
            m2,
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(frames)?.0)
    }

    /// Loss and analytic gradients of `bce_loss . forward` wrt every
    /// parameter group.
    pub fn backward(&self, sample: &Sample) -> Result<(f64, Gradients)> {
        let c = self.config;
        let (h, w) = self.check_frames(&sample.frames)?;
        sample.labels.expect_shape(&[c.t, h, w], "labels")?;
        if sample.valid.len() != c.t * h * w {
            return Err(Error::ShapeMismatch {
                expected: format!("{} validity flags", c.t * h * w),
                found: format!("{}", sample.valid.len()),
            });
        }
        let (probs, cache) = self.forward_cached(&sample.frames)?;
        let (loss, dprobs) = bce_loss(&probs, &sample.labels, &sample.valid)?;

        let mut grads: Vec<Tensor> = self
            .param_groups()
            .iter()
            .map(|(_, p)| Tensor::zeros(&p.shape))
            .collect();

        // Head, per frame; chain through the sigmoid first.
        let mut dm2 = Tensor::zeros(&[c.t * c.g, h, w]);
        for t in 0..c.t {
            let mut dlogit = Tensor::zeros(&[1, h, w]);
            for i in 0..h * w {
                let p = cache.probs.data[t * h * w + i];
                dlogit.data[i] = dprobs.data[t * h * w + i] * p * (1.0 - p);
            }
            let frame = Tensor {
                shape: vec![c.g, h, w],
                data: cache.m2.data[t * c.g * h * w..(t + 1) * c.g * h * w].to_vec(),
            };
            let (dframe, gw, gb) = self.head.backward(&frame, &dlogit);
            add_into(&mut grads[14], &gw);
            add_into(&mut grads[15], &gb);
            dm2.data[t * c.g * h * w..(t + 1) * c.g * h * w].copy_from_slice(&dframe.data);
        }

        // Temporal mixer (mix2 has no activation).
        let (dmd_post, gw, gb) = self.mix2.backward(&cache.md, &dm2);
        grads[12] = gw;
        grads[13] = gb;
        let mut dmd = dmd_post;
        relu_mask(&cache.md, &mut dmd);
        let (dm1_post, gw, gb) = self.mid.backward(&cache.m1, &dmd);
        grads[10] = gw;
        grads[11] = gb;
        let mut dm1 = dm1_post;
        relu_mask(&cache.m1, &mut dm1);
        let (dstacked, gw, gb) = self.mix1.backward(&cache.stacked, &dm1);
        grads[8] = gw;
        grads[9] = gb;

        // Spatial stage, per frame with shared weights: accumulate.
        let fhw = c.f * h * w;
        for (t, sp) in cache.spatial.iter().enumerate() {
            let mut df = Tensor {
                shape: vec![c.f, h, w],
                data: dstacked.data[t * fhw..(t + 1) * fhw].to_vec(),
            };
            relu_mask(&sp.f, &mut df);
            let (dcat, gw, gb) = self.fuse.backward(&sp.cat, &df);
            add_into(&mut grads[6], &gw);
            add_into(&mut grads[7], &gb);

            let half = 8 * h * w;
            let da_skip = &dcat.data[..half];
            let mut du = Tensor {
                shape: vec![8, h, w],
                data: dcat.data[half..].to_vec(),
            };
            relu_mask(&sp.u, &mut du);
            let (dup_in, gw, gb) = self.up.backward(&sp.up_in, &du);
            add_into(&mut grads[4], &gw);
            add_into(&mut grads[5], &gb);

            let mut dd = upsample2_backward(&dup_in);
            relu_mask(&sp.d, &mut dd);
            let (da_down, gw, gb) = self.down.backward(&sp.a, &dd);
            add_into(&mut grads[2], &gw);
            add_into(&mut grads[3], &gb);

            let mut da = da_down;
            for (v, s) in da.data.iter_mut().zip(da_skip) {
                *v += s;
            }
            relu_mask(&sp.a, &mut da);
            let (_, gw, gb) = self.conv1.backward(&sp.x, &da);
            add_into(&mut grads[0], &gw);
            add_into(&mut grads[1], &gb);
        }
        Ok((loss, Gradients(grads)))
    }

    /// Plain SGD: w <- w - lr * g, exactly. Rejects non-finite gradients
    /// before touching any parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        let groups = self.param_groups_mut();
        if grads.0.len() != groups.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient groups", groups.len()),
                found: format!("{}", grads.0.len()),
            });
        }
        for ((name, param), g) in groups.iter().zip(&grads.0) {
            if g.shape != param.shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} gradient shaped {:?}", param.shape),
                    found: format!("{:?}", g.shape),
                });
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    group: name.to_string(),
                });
            }
        }
        for ((_, param), g) in self.param_groups_mut().into_iter().zip(&grads.0) {
            for (w, gv) in param.data.iter_mut().zip(&g.data) {
                *w -= lr * gv;
            }
        }
        Ok(())
    }

    /// Serialize: `SMCM1`, five u32 LE config integers (T, C_in, F, M, G),
    /// then every parameter group in declaration order as f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [c.t, c.c_in, c.f, c.m, c.g] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (_, tensor) in self.param_groups() {
            for v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FactorizedNet> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadModelHeader);
        }
        let mut off = MAGIC.len();
        let mut ints = [0usize; 5];
        for slot in &mut ints {
            let end = off + 4;
            let raw = bytes.get(off..end).ok_or(Error::BadModelArtifact {
                reason: "truncated config".to_string(),
            })?;
            *slot = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
            off = end;
        }
        let config = NetConfig {
            t: ints[0],
            c_in: ints[1],
            f: ints[2],
            m: ints[3],
            g: ints[4],
        };
        config.validate().map_err(|e| Error::BadModelArtifact {
            reason: e.to_string(),
        })?;
        let mut net = Self::new(config)?;
        for (name, tensor) in net.param_groups_mut() {
            for v in &mut tensor.data {
                let end = off + 8;
                let raw = bytes.get(off..end).ok_or_else(|| Error::BadModelArtifact {
                    reason: format!("truncated in group {name}"),
                })?;
                *v = f64::from_le_bytes(raw.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::BadModelArtifact {
                        reason: format!("non-finite value in group {name}"),
                    });
                }
                off = end;
            }
        }
        if off != bytes.len() {
            return Err(Error::BadModelArtifact {
                reason: format!("{} trailing bytes", bytes.len() - off),
            });
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FactorizedNet> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const MAGIC: &[u8] = b"SMCM1";

fn add_into(acc: &mut Tensor, delta: &Tensor) {
    debug_assert_eq!(acc.shape, delta.shape);
    for (a, d) in acc.data.iter_mut().zip(&delta.data) {
        *a += d;
    }
}

/// Masked mean binary cross-entropy over counted pixels (valid and not
/// ignore), probabilities clamped to [1e-7, 1 - 1e-7]. Returns the loss
/// and its gradient wrt the probabilities.
pub fn bce_loss(probs: &Tensor, labels: &Tensor, valid: &[bool]) -> Result<(f64, Tensor)> {
    if probs.shape != labels.shape || probs.len() != valid.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("labels and validity matching probs {:?}", probs.shape),
            found: format!("{:?} / {}", labels.shape, valid.len()),
        });
    }
    let mut counted = 0usize;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(&probs.shape);
    for i in 0..probs.len() {
        let y = labels.data[i];
        if !valid[i] || y == LABEL_IGNORE {
            continue;
        }
        counted += 1;
        let raw = probs.data[i];
        let p = raw.clamp(BCE_EPS, 1.0 - BCE_EPS);
        sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        // Outside the clamp the loss is locally constant in p.
        if raw >= BCE_EPS && raw <= 1.0 - BCE_EPS {
            grad.data[i] = (p - y) / (p * (1.0 - p));
        }
    }
    if counted == 0 {
        return Err(Error::NoCountedPixels);
    }
    let n = counted as f64;
    for g in &mut grad.data {
        *g /= n;
    }
    Ok((sum / n, grad))
}

/// Central finite-difference check of [`FactorizedNet::backward`]: for
/// each parameter group, `|ga - gfd| / max(1e-12, |ga| + |gfd|)` over the
/// whole group vector. Returns (group name, relative error) pairs.
pub fn gradient_check(
    net: &FactorizedNet,
    sample: &Sample,
    step: f64,
) -> Result<Vec<(String, f64)>> {
    let (_, grads) = net.backward(sample)?;
    let mut work = net.clone();
    let mut report = Vec::with_capacity(GROUP_NAMES.len());
    for (gi, name) in GROUP_NAMES.iter().enumerate() {
        let analytic = &grads.0[gi];
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut f_sq = 0.0;
        for e in 0..analytic.len() {
            // Restore from the saved value so rounding in += / -= cannot
            // drift the parameter across elements.
            let orig = work.param_groups_mut()[gi].1.data[e];
            work.param_groups_mut()[gi].1.data[e] = orig + step;
            let up = loss_of(&work, sample)?;
            work.param_groups_mut()[gi].1.data[e] = orig - step;
            let down = loss_of(&work, sample)?;
            work.param_groups_mut()[gi].1.data[e] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic.data[e];
            diff_sq += (a - fd) * (a - fd);
            a_sq += a * a;
            f_sq += fd * fd;
        }
        let rel = diff_sq.sqrt() / (a_sq.sqrt() + f_sq.sqrt()).max(1e-12);
        report.push((name.to_string(), rel));
    }
    Ok(report)
}

fn loss_of(net: &FactorizedNet, sample: &Sample) -> Result<f64> {
    let probs = net.forward(&sample.frames)?;
    Ok(bce_loss(&probs, &sample.labels, &sample.valid)?.0)
}
