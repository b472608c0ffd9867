//! Conditional noise predictor `eps(z_t, t, mask, text)`.
//!
//! A compact U-Net with one resolution level:
//!
//! ```text
//! z ─conv─┐
//!         + ─ res(w) ─┬─ pool ─ conv(w→2w) ─ res(2w) ─ up ─┐
//! m ─conv─┘ (zero)    └───────────── skip ─────────────────┴ concat ─ conv(3w→w) ─ res(w) ─ silu ─ head (zero)
//! ```
//!
//! The conditioning embedding `MLP(sinusoid(t)) + text_table[token]` passes
//! through SiLU and is projected into a per-channel bias inside every residual
//! block. Null conditions are ordinary inputs (null mask channel, null token
//! row), so there is no branching on nullity. Pooling is skipped for odd
//! spatial sizes, which lets the same network run on 1×1 vector data.

use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionPair;
use crate::dataset::sha256_hex;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, Geom, Real};
use crate::rng::{normal_f64, stream};

/// Samples per parallel work item. Fixed so that results do not depend on
/// the number of worker threads.
pub const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Cell classes `K`; the mask input has `K + 1` channels.
    pub num_classes: usize,
    /// Descriptor vocabulary `V`; the text table has `V + 1` rows.
    pub vocab: usize,
    pub base_width: usize,
    pub time_embed_dim: usize,
    /// Largest accepted step `T`.
    pub num_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            in_channels: 3,
            num_classes: 4,
            vocab: 6,
            base_width: 32,
            time_embed_dim: 64,
            num_steps: 100,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("vocab", self.vocab),
            ("base_width", self.base_width),
            ("time_embed_dim", self.time_embed_dim),
            ("num_steps", self.num_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("denoiser {name} must be positive")));
            }
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument("time_embed_dim must be even".into()));
        }
        if self.num_classes >= u8::MAX as usize {
            return Err(Error::InvalidArgument("too many mask classes".into()));
        }
        Ok(())
    }

    pub fn mask_channels(&self) -> usize {
        self.num_classes + 1
    }

    /// Whether the 2× down/up pair is active.
    pub fn pooled(&self) -> bool {
        self.height % 2 == 0 && self.width % 2 == 0
    }

    fn pixels(&self) -> usize {
        self.height * self.width * self.in_channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: Range<usize>,
    b: Range<usize>,
    cin: usize,
    cout: usize,
}

#[derive(Clone, Debug)]
struct Lin {
    w: Range<usize>,
    b: Range<usize>,
    din: usize,
    dout: usize,
}

#[derive(Clone, Debug)]
struct Res {
    conv1: Conv,
    emb: Lin,
    conv2: Conv,
}

#[derive(Clone, Debug)]
struct Net {
    fc1: Lin,
    fc2: Lin,
    text: Range<usize>,
    conv_z: Conv,
    conv_mask: Conv,
    res1: Res,
    down: Conv,
    res2: Res,
    up: Conv,
    res3: Res,
    head: Conv,
}

/// How a tensor is initialised.
#[derive(Clone, Copy, PartialEq)]
enum Init {
    He(usize),
    Normal(f64),
    Zero,
}

#[derive(Default)]
struct Builder {
    specs: Vec<TensorSpec>,
    inits: Vec<Init>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: &str, shape: Vec<usize>, init: Init) -> Range<usize> {
        let spec = TensorSpec {
            name: name.to_string(),
            shape,
            offset: self.total,
        };
        self.total += spec.len();
        let r = spec.range();
        self.specs.push(spec);
        self.inits.push(init);
        r
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, zero: bool) -> Conv {
        let init = if zero { Init::Zero } else { Init::He(cin * 9) };
        Conv {
            w: self.push(&format!("{name}.weight"), vec![cout, cin, 3, 3], init),
            b: self.push(&format!("{name}.bias"), vec![cout], Init::Zero),
            cin,
            cout,
        }
    }

    fn lin(&mut self, name: &str, din: usize, dout: usize) -> Lin {
        Lin {
            w: self.push(&format!("{name}.weight"), vec![dout, din], Init::He(din)),
            b: self.push(&format!("{name}.bias"), vec![dout], Init::Zero),
            din,
            dout,
        }
    }

    fn res(&mut self, name: &str, c: usize, e: usize) -> Res {
        Res {
            conv1: self.conv(&format!("{name}.conv1"), c, c, false),
            emb: self.lin(&format!("{name}.emb"), e, c),
            conv2: self.conv(&format!("{name}.conv2"), c, c, false),
        }
    }
}

fn build(cfg: &DenoiserConfig) -> (Net, Vec<TensorSpec>, Vec<Init>, usize) {
    let (w, e) = (cfg.base_width, cfg.time_embed_dim);
    let mut b = Builder::default();
    let fc1 = b.lin("time.fc1", e, e);
    let fc2 = b.lin("time.fc2", e, e);
    let text = b.push("text.table", vec![cfg.vocab + 1, e], Init::Normal(1.0));
    let conv_z = b.conv("in.z", cfg.in_channels, w, false);
    let conv_mask = b.conv("in.mask", cfg.mask_channels(), w, true);
    let res1 = b.res("enc.res", w, e);
    let down = b.conv("down", w, 2 * w, false);
    let res2 = b.res("mid.res", 2 * w, e);
    let up = b.conv("up", 3 * w, w, false);
    let res3 = b.res("dec.res", w, e);
    let head = b.conv("head", w, cfg.in_channels, true);
    let net = Net {
        fc1,
        fc2,
        text,
        conv_z,
        conv_mask,
        res1,
        down,
        res2,
        up,
        res3,
        head,
    };
    (net, b.specs, b.inits, b.total)
}

/// Network weights in one flat buffer with a named layout.
#[derive(Clone, Debug)]
pub struct DenoiserParams<T: Real = f32> {
    config: DenoiserConfig,
    specs: Vec<TensorSpec>,
    net: Net,
    values: Vec<T>,
}

impl<T: Real> PartialEq for DenoiserParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values
    }
}

/// He-normal hidden weights, zero biases, zero mask projection and head.
pub fn init_params<T: Real>(config: &DenoiserConfig, seed: u64) -> Result<DenoiserParams<T>> {
    config.validate()?;
    let (net, specs, inits, total) = build(config);
    let mut values = vec![T::zero(); total];
    for (i, (spec, init)) in specs.iter().zip(&inits).enumerate() {
        let std = match *init {
            Init::Zero => continue,
            Init::He(fan_in) => (2.0 / fan_in as f64).sqrt(),
            Init::Normal(s) => s,
        };
        let mut rng = stream(seed, i as u64);
        for v in &mut values[spec.range()] {
            *v = T::of(std * normal_f64(&mut rng));
        }
    }
    Ok(DenoiserParams {
        config: config.clone(),
        specs,
        net,
        values,
    })
}

impl<T: Real> DenoiserParams<T> {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Zero gradient buffer with the same layout.
    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.values.len()]
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            config: self.config.clone(),
            specs: self.specs.clone(),
            net: self.net.clone(),
            values: self.values.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    fn check_inputs(&self, z: &Image, t: usize, c: &ConditionPair) -> Result<()> {
        let cfg = &self.config;
        let expect = (cfg.height, cfg.width, cfg.in_channels);
        if z.shape() != expect {
            return Err(Error::ShapeMismatch {
                expected: format!("{expect:?}"),
                got: format!("{:?}", z.shape()),
            });
        }
        if t == 0 || t > cfg.num_steps {
            return Err(Error::StepOutOfRange {
                t,
                max: cfg.num_steps,
            });
        }
        if c.mask.shape() != (cfg.height, cfg.width) || c.mask.num_classes() != cfg.num_classes {
            return Err(Error::ShapeMismatch {
                expected: format!("mask {}x{} over {} classes", cfg.height, cfg.width, cfg.num_classes),
                got: format!(
                    "mask {:?} over {} classes",
                    c.mask.shape(),
                    c.mask.num_classes()
                ),
            });
        }
        if c.text.vocab() as usize != cfg.vocab {
            return Err(Error::InvalidArgument(format!(
                "text vocabulary {} does not match the model's {}",
                c.text.vocab(),
                cfg.vocab
            )));
        }
        Ok(())
    }

    /// Noise prediction for a single input.
    pub fn forward(&self, z: &Image, t: usize, c: &ConditionPair) -> Result<Image> {
        Ok(self.forward_batch(&[(z, t, c)])?.pop().expect("one output"))
    }

    /// Noise predictions for a batch; evaluated in fixed chunks in parallel.
    pub fn forward_batch(&self, inputs: &[(&Image, usize, &ConditionPair)]) -> Result<Vec<Image>> {
        for (z, t, c) in inputs {
            self.check_inputs(z, *t, c)?;
        }
        let outs: Vec<Vec<Image>> = inputs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let x = self.pack(chunk.iter().map(|(z, t, c)| (*z, *t, *c)));
                let (_, out) = self.run(&x);
                self.unpack(&out, chunk.len())
            })
            .collect();
        Ok(outs.into_iter().flatten().collect())
    }

    fn pack<'a>(&self, items: impl Iterator<Item = (&'a Image, usize, &'a ConditionPair)>) -> Packed<T> {
        let cfg = &self.config;
        let items: Vec<_> = items.collect();
        let n = items.len();
        let hw = cfg.height * cfg.width;
        let (c, mc) = (cfg.in_channels, cfg.mask_channels());
        let mut z = vec![T::zero(); c * n * hw];
        let mut m = vec![T::zero(); mc * n * hw];
        let mut steps = Vec::with_capacity(n);
        let mut tokens = Vec::with_capacity(n);
        for (i, (img, t, cond)) in items.into_iter().enumerate() {
            let d = img.data();
            for p in 0..hw {
                for ch in 0..c {
                    z[(ch * n + i) * hw + p] = T::of(d[p * c + ch] as f64);
                }
            }
            for (p, &l) in cond.mask.labels().iter().enumerate() {
                m[(l as usize * n + i) * hw + p] = T::one();
            }
            steps.push(t);
            tokens.push(cond.text.token() as usize);
        }
        Packed {
            n,
            z,
            m,
            steps,
            tokens,
        }
    }

    fn unpack(&self, out: &[T], n: usize) -> Vec<Image> {
        let cfg = &self.config;
        let hw = cfg.height * cfg.width;
        let c = cfg.in_channels;
        (0..n)
            .map(|i| {
                let mut data = vec![0f32; hw * c];
                for p in 0..hw {
                    for ch in 0..c {
                        data[p * c + ch] = out[(ch * n + i) * hw + p].f64() as f32;
                    }
                }
                Image::from_vec(cfg.height, cfg.width, c, data).expect("shape")
            })
            .collect()
    }

    fn p(&self, r: &Range<usize>) -> &[T] {
        &self.values[r.clone()]
    }

    fn conv(&self, l: &Conv, x: &[T], g: Geom) -> Vec<T> {
        nn::conv3x3(x, l.cin, g, self.p(&l.w), self.p(&l.b), l.cout)
    }

    fn lin(&self, l: &Lin, x: &[T], n: usize) -> Vec<T> {
        nn::linear(x, n, l.din, self.p(&l.w), self.p(&l.b), l.dout)
    }

    fn res_forward(&self, r: &Res, x: Vec<T>, g: Geom, semb: &[T]) -> (ResTape<T>, Vec<T>) {
        let c = r.conv1.cout;
        let sx = nn::silu(&x);
        let mut h1 = self.conv(&r.conv1, &sx, g);
        let e = self.lin(&r.emb, semb, g.n);
        nn::add_channel_bias(&mut h1, c, g, &e);
        let sh = nn::silu(&h1);
        let mut out = self.conv(&r.conv2, &sh, g);
        nn::add_assign(&mut out, &x);
        (ResTape { x, sx, h1, sh }, out)
    }

    /// Full forward pass, keeping every intermediate needed by backward.
    fn run(&self, x: &Packed<T>) -> (Tape<T>, Vec<T>) {
        let cfg = &self.config;
        let net = &self.net;
        let n = x.n;
        let e = cfg.time_embed_dim;
        let g = Geom {
            n,
            h: cfg.height,
            w: cfg.width,
        };
        let pooled = cfg.pooled();
        let g2 = if pooled { g.half() } else { g };

        let sin = nn::sinusoidal::<T>(&x.steps, e);
        let a1 = self.lin(&net.fc1, &sin, n);
        let a1s = nn::silu(&a1);
        let mut emb = self.lin(&net.fc2, &a1s, n);
        nn::add_assign(&mut emb, &nn::embedding(self.p(&net.text), e, &x.tokens));
        let semb = nn::silu(&emb);

        let mut x0 = self.conv(&net.conv_z, &x.z, g);
        nn::add_assign(&mut x0, &self.conv(&net.conv_mask, &x.m, g));
        let (t1, r1) = self.res_forward(&net.res1, x0, g, &semb);
        let pool_in = if pooled {
            nn::avg_pool2(&r1, net.res1.conv1.cout, g)
        } else {
            r1.clone()
        };
        let d = self.conv(&net.down, &pool_in, g2);
        let (t2, r2) = self.res_forward(&net.res2, d, g2, &semb);
        let u = if pooled {
            nn::upsample2(&r2, net.res2.conv1.cout, g)
        } else {
            r2
        };
        let cat = nn::concat_channels(&u, &r1);
        let uc = self.conv(&net.up, &cat, g);
        let (t3, r3) = self.res_forward(&net.res3, uc, g, &semb);
        let s3 = nn::silu(&r3);
        let out = self.conv(&net.head, &s3, g);
        let tape = Tape {
            g,
            g2,
            pooled,
            sin,
            a1,
            a1s,
            emb,
            semb,
            r1: t1,
            pool_in,
            r2: t2,
            cat,
            r3: t3,
            r3_out: r3,
            s3,
        };
        (tape, out)
    }

    fn conv_back(&self, l: &Conv, x: &[T], g: Geom, dy: &[T], grad: &mut [T], want_dx: bool) -> Option<Vec<T>> {
        let (gw, gb) = two_ranges(grad, &l.w, &l.b);
        nn::conv3x3_backward(x, l.cin, g, self.p(&l.w), l.cout, dy, gw, gb, want_dx)
    }

    fn lin_back(&self, l: &Lin, x: &[T], n: usize, dy: &[T], grad: &mut [T]) -> Vec<T> {
        let (gw, gb) = two_ranges(grad, &l.w, &l.b);
        nn::linear_backward(x, n, l.din, self.p(&l.w), l.dout, dy, gw, gb, true).expect("dx requested")
    }

    /// Returns the input gradient; accumulates `dsemb`.
    fn res_back(&self, r: &Res, tape: &ResTape<T>, g: Geom, semb: &[T], dout: &[T], dsemb: &mut [T], grad: &mut [T]) -> Vec<T> {
        let c = r.conv1.cout;
        let dsh = self.conv_back(&r.conv2, &tape.sh, g, dout, grad, true).expect("dx");
        let dh1 = nn::silu_backward(&tape.h1, &dsh);
        let de = nn::add_channel_bias_backward(&dh1, c, g);
        nn::add_assign(dsemb, &self.lin_back(&r.emb, semb, g.n, &de, grad));
        let dsx = self.conv_back(&r.conv1, &tape.sx, g, &dh1, grad, true).expect("dx");
        let mut dx = nn::silu_backward(&tape.x, &dsx);
        nn::add_assign(&mut dx, dout);
        dx
    }

    /// Reverse pass from `dout` (gradient w.r.t. the network output);
    /// accumulates into `grad`.
    fn backward(&self, x: &Packed<T>, tape: &Tape<T>, dout: &[T], grad: &mut [T]) {
        let cfg = &self.config;
        let net = &self.net;
        let (g, g2) = (tape.g, tape.g2);
        let e = cfg.time_embed_dim;
        let w = cfg.base_width;
        let mut dsemb = vec![T::zero(); g.n * e];

        let ds3 = self.conv_back(&net.head, &tape.s3, g, dout, grad, true).expect("dx");
        let dr3 = nn::silu_backward(&tape.r3_out, &ds3);
        let duc = self.res_back(&net.res3, &tape.r3, g, &tape.semb, &dr3, &mut dsemb, grad);
        let dcat = self.conv_back(&net.up, &tape.cat, g, &duc, grad, true).expect("dx");
        let (du, mut dr1) = nn::split_channels(&dcat, 2 * w * g.plane());
        let dr2 = if tape.pooled {
            nn::upsample2_backward(&du, 2 * w, g)
        } else {
            du
        };
        let dd = self.res_back(&net.res2, &tape.r2, g2, &tape.semb, &dr2, &mut dsemb, grad);
        let dpool = self.conv_back(&net.down, &tape.pool_in, g2, &dd, grad, true).expect("dx");
        if tape.pooled {
            nn::add_assign(&mut dr1, &nn::avg_pool2_backward(&dpool, w, g));
        } else {
            nn::add_assign(&mut dr1, &dpool);
        }
        let dx0 = self.res_back(&net.res1, &tape.r1, g, &tape.semb, &dr1, &mut dsemb, grad);
        self.conv_back(&net.conv_z, &x.z, g, &dx0, grad, false);
        self.conv_back(&net.conv_mask, &x.m, g, &dx0, grad, false);

        let demb = nn::silu_backward(&tape.emb, &dsemb);
        nn::embedding_backward(&demb, e, &x.tokens, &mut grad[net.text.clone()]);
        let da1s = self.lin_back(&net.fc2, &tape.a1s, g.n, &demb, grad);
        let da1 = nn::silu_backward(&tape.a1, &da1s);
        let (gw, gb) = two_ranges(grad, &net.fc1.w, &net.fc1.b);
        nn::linear_backward(&tape.sin, g.n, e, self.p(&net.fc1.w), e, &da1, gw, gb, false);
    }

    /// Mean squared error over batch and elements, and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[TrainingExample]) -> Result<(f64, Vec<T>)> {
        let (per, grad) = self.example_losses_and_grad(batch)?;
        Ok((per.iter().sum::<f64>() / per.len() as f64, grad))
    }

    /// Per-example mean squared errors and the gradient of their mean.
    pub fn example_losses_and_grad(&self, batch: &[TrainingExample]) -> Result<(Vec<f64>, Vec<T>)> {
        self.check_batch(batch)?;
        let scale = T::of(2.0 / (batch.len() * self.config.pixels()) as f64);
        let partial: Vec<(Vec<f64>, Vec<T>)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let x = self.pack(chunk.iter().map(|ex| (&ex.z_t, ex.t, &ex.cond)));
                let (tape, out) = self.run(&x);
                let (sq, dout) = self.residuals(chunk, &out, scale);
                let mut grad = self.zeros_like();
                self.backward(&x, &tape, &dout, &mut grad);
                (sq, grad)
            })
            .collect();
        let mut per = Vec::with_capacity(batch.len());
        let mut grad = self.zeros_like();
        for (sq, g) in partial {
            per.extend(sq);
            nn::add_assign(&mut grad, &g);
        }
        self.check_losses(&per)?;
        Ok((per, grad))
    }

    /// Per-example mean squared errors without the backward pass.
    pub fn example_losses(&self, batch: &[TrainingExample]) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let per: Vec<f64> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let x = self.pack(chunk.iter().map(|ex| (&ex.z_t, ex.t, &ex.cond)));
                let (_, out) = self.run(&x);
                self.residuals(chunk, &out, T::zero()).0
            })
            .collect::<Vec<_>>()
            .concat();
        self.check_losses(&per)?;
        Ok(per)
    }

    fn check_batch(&self, batch: &[TrainingExample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        for ex in batch {
            self.check_inputs(&ex.z_t, ex.t, &ex.cond)?;
            ex.z_t.ensure_same_shape(&ex.eps)?;
        }
        Ok(())
    }

    fn check_losses(&self, per: &[f64]) -> Result<()> {
        match per.iter().position(|l| !l.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                what: "training loss",
                index,
            }),
            None => Ok(()),
        }
    }

    /// Per-example mean squared residuals and `scale * residual`.
    fn residuals(&self, chunk: &[TrainingExample], out: &[T], scale: T) -> (Vec<f64>, Vec<T>) {
        let target = self.pack_images(chunk.iter().map(|ex| &ex.eps), chunk.len());
        let hw = self.config.height * self.config.width;
        let mut sq = vec![0f64; chunk.len()];
        let mut dout = vec![T::zero(); out.len()];
        for (k, (&o, &y)) in out.iter().zip(&target).enumerate() {
            let r = o - y;
            sq[(k / hw) % chunk.len()] += r.f64() * r.f64();
            dout[k] = r * scale;
        }
        let d = self.config.pixels() as f64;
        (sq.into_iter().map(|v| v / d).collect(), dout)
    }

    fn pack_images<'a>(&self, imgs: impl Iterator<Item = &'a Image>, n: usize) -> Vec<T> {
        let hw = self.config.height * self.config.width;
        let c = self.config.in_channels;
        let mut out = vec![T::zero(); c * n * hw];
        for (i, img) in imgs.enumerate() {
            for (p, px) in img.data().chunks_exact(c).enumerate() {
                for (ch, &v) in px.iter().enumerate() {
                    out[(ch * n + i) * hw + p] = T::of(v as f64);
                }
            }
        }
        out
    }
}

fn two_ranges<'a, T>(buf: &'a mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

struct Packed<T> {
    n: usize,
    z: Vec<T>,
    m: Vec<T>,
    steps: Vec<usize>,
    tokens: Vec<usize>,
}

struct ResTape<T> {
    x: Vec<T>,
    sx: Vec<T>,
    h1: Vec<T>,
    sh: Vec<T>,
}

struct Tape<T> {
    g: Geom,
    g2: Geom,
    pooled: bool,
    sin: Vec<T>,
    a1: Vec<T>,
    a1s: Vec<T>,
    emb: Vec<T>,
    semb: Vec<T>,
    r1: ResTape<T>,
    pool_in: Vec<T>,
    r2: ResTape<T>,
    cat: Vec<T>,
    r3: ResTape<T>,
    r3_out: Vec<T>,
    s3: Vec<T>,
}

/// One regression example: the network sees `(z_t, t, cond)` and is trained
/// to output `eps`.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub z_t: Image,
    pub t: usize,
    pub cond: ConditionPair,
    pub eps: Image,
}

const MAGIC: &[u8; 8] = b"DDCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: DenoiserConfig,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<ManifestEntry>,
    /// SHA-256 of the whole parameter blob.
    pub checksum: String,
    /// Free-form provenance (experiment config, data checksums).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams<f32>,
    pub step: u64,
    pub seed: u64,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    /// `magic | u64 LE header length | JSON header | f32 LE blob`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let blob: Vec<u8> = self.params.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let tensors = self
            .params
            .specs
            .iter()
            .map(|s| ManifestEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
                sha256: sha256_hex(&blob[s.offset * 4..(s.offset + s.len()) * 4]),
            })
            .collect();
        let header = CheckpointHeader {
            format: "dualdiff-checkpoint/1".into(),
            config: self.params.config.clone(),
            step: self.step,
            seed: self.seed,
            tensors,
            checksum: sha256_hex(&blob),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointHeader)> {
        let bad = |m: String| Error::Validation(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let blob = &bytes[16 + hlen..];
        let mut params = init_params::<f32>(&header.config, 0)?;
        if blob.len() != params.values.len() * 4 {
            return Err(bad(format!(
                "blob has {} bytes, expected {}",
                blob.len(),
                params.values.len() * 4
            )));
        }
        if sha256_hex(blob) != header.checksum {
            return Err(bad("parameter blob checksum mismatch".into()));
        }
        if header.tensors.len() != params.specs.len() {
            return Err(bad("manifest does not match the configured architecture".into()));
        }
        for (entry, spec) in header.tensors.iter().zip(&params.specs) {
            if entry.name != spec.name || entry.shape != spec.shape {
                return Err(bad(format!("unexpected tensor {}", entry.name)));
            }
            let r = &blob[spec.offset * 4..(spec.offset + spec.len()) * 4];
            if sha256_hex(r) != entry.sha256 {
                return Err(bad(format!("tensor {} checksum mismatch", entry.name)));
            }
        }
        for (v, b) in params.values.iter_mut().zip(blob.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
        Ok((
            Self {
                params,
                step: header.step,
                seed: header.seed,
                extra: header.extra.clone(),
            },
            header,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::file(path, e.to_string()))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::file(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
        Self::from_bytes(&bytes)
            .map(|(c, _)| c)
            .map_err(|e| Error::file(path, e.to_string()))
    }

    /// SHA-256 of the serialised checkpoint.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Largest relative error between the analytic gradient and central
/// differences over `coords` coordinates, cycling through every tensor.
pub fn max_gradient_error(
    params: &mut DenoiserParams<f64>,
    batch: &[TrainingExample],
    coords: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    let (_, grad) = params.loss_and_grad(batch)?;
    let mut r = stream(seed, 7);
    let specs = params.tensors().to_vec();
    let mut worst = 0f64;
    for k in 0..coords {
        let spec = &specs[k % specs.len()];
        let i = spec.offset + r.random_range(0..spec.len());
        let orig = params.values()[i];
        let h = 1e-5;
        params.values_mut()[i] = orig + h;
        let lp = params.loss_and_grad(batch)?.0;
        params.values_mut()[i] = orig - h;
        let lm = params.loss_and_grad(batch)?.0;
        params.values_mut()[i] = orig;
        let num = (lp - lm) / (2.0 * h);
        let rel = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{MaskCondition, TextCondition};
    use crate::rng::{normal_vec, stream};
    use rand::Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            height: 8,
            width: 8,
            in_channels: 3,
            num_classes: 3,
            vocab: 4,
            base_width: 4,
            time_embed_dim: 8,
            num_steps: 50,
        }
    }

    fn random_image(cfg: &DenoiserConfig, seed: u64) -> Image {
        let mut r = stream(seed, 0);
        Image::from_vec(cfg.height, cfg.width, cfg.in_channels, normal_vec(&mut r, cfg.pixels())).unwrap()
    }

    fn random_cond(cfg: &DenoiserConfig, seed: u64, null_mask: bool, null_text: bool) -> ConditionPair {
        let mut r = stream(seed, 1);
        let mask = if null_mask {
            MaskCondition::null(cfg.height, cfg.width, cfg.num_classes)
        } else {
            let labels = (0..cfg.height * cfg.width)
                .map(|_| r.random_range(0..cfg.num_classes as u8))
                .collect();
            MaskCondition::new(cfg.height, cfg.width, cfg.num_classes, labels).unwrap()
        };
        let text = if null_text {
            TextCondition::null(cfg.vocab as u32)
        } else {
            TextCondition::new(r.random_range(0..cfg.vocab as u32), cfg.vocab as u32).unwrap()
        };
        ConditionPair::new(mask, text)
    }

    fn randomized<T: Real>(cfg: &DenoiserConfig, seed: u64) -> DenoiserParams<T> {
        let mut p = init_params::<T>(cfg, seed).unwrap();
        let mut r = stream(seed, 99);
        for v in p.values_mut() {
            *v = *v + T::of(0.2 * normal_f64(&mut r));
        }
        p
    }

    fn batch(cfg: &DenoiserConfig, n: usize, seed: u64) -> Vec<TrainingExample> {
        (0..n as u64)
            .map(|i| TrainingExample {
                z_t: random_image(cfg, seed * 1000 + i),
                t: 1 + (i as usize * 7) % cfg.num_steps,
                cond: random_cond(cfg, seed * 1000 + i, i % 3 == 0, i % 2 == 0),
                eps: random_image(cfg, seed * 1000 + i + 500),
            })
            .collect()
    }

    #[test]
    fn init_is_zero_output_and_deterministic() {
        let cfg = tiny();
        let a = init_params::<f32>(&cfg, 5).unwrap();
        let b = init_params::<f32>(&cfg, 5).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), init_params::<f32>(&cfg, 6).unwrap().values());
        assert!(a.tensor("head.weight").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.tensor("in.mask.weight").unwrap().iter().all(|&v| v == 0.0));
        let out = a
            .forward(&random_image(&cfg, 1), 3, &random_cond(&cfg, 1, false, false))
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_branch_is_inert_at_init() {
        let cfg = tiny();
        let mut p = init_params::<f64>(&cfg, 5).unwrap();
        // Give the head weights so the pre-head activations become visible.
        let head = p.specs.iter().find(|s| s.name == "head.weight").unwrap().range();
        let mut r = stream(1, 2);
        for v in &mut p.values_mut()[head] {
            *v = normal_f64(&mut r);
        }
        let z = random_image(&cfg, 3);
        let a = p.forward(&z, 4, &random_cond(&cfg, 4, false, true)).unwrap();
        let b = p.forward(&z, 4, &random_cond(&cfg, 5, false, true)).unwrap();
        let c = p.forward(&z, 4, &random_cond(&cfg, 5, true, true)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn table_rows_and_param_count_stable() {
        let cfg = tiny();
        let p = init_params::<f32>(&cfg, 0).unwrap();
        let spec = p.tensors().iter().find(|s| s.name == "text.table").unwrap();
        assert_eq!(spec.shape, vec![cfg.vocab + 1, cfg.time_embed_dim]);
        assert_eq!(p.num_params(), init_params::<f32>(&cfg, 9).unwrap().num_params());
        assert_eq!(p.num_params(), p.tensors().iter().map(|s| s.len()).sum::<usize>());
    }

    #[test]
    fn forward_is_pure_and_batch_consistent() {
        let cfg = tiny();
        let p = randomized::<f32>(&cfg, 3);
        let items = batch(&cfg, 11, 2);
        let inputs: Vec<_> = items.iter().map(|e| (&e.z_t, e.t, &e.cond)).collect();
        let all = p.forward_batch(&inputs).unwrap();
        assert_eq!(all, p.forward_batch(&inputs).unwrap());
        for (e, out) in items.iter().zip(&all) {
            let single = p.forward(&e.z_t, e.t, &e.cond).unwrap();
            for (a, b) in single.data().iter().zip(out.data()) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny();
        let p = init_params::<f32>(&cfg, 0).unwrap();
        let z = random_image(&cfg, 0);
        let c = random_cond(&cfg, 0, false, false);
        assert!(matches!(p.forward(&z, 0, &c), Err(Error::StepOutOfRange { .. })));
        assert!(p.forward(&z, cfg.num_steps + 1, &c).is_err());
        assert!(p.forward(&Image::zeros(4, 4, 3), 1, &c).is_err());
        let wrong_vocab = ConditionPair::new(c.mask.clone(), TextCondition::null(9));
        assert!(p.forward(&z, 1, &wrong_vocab).is_err());
        assert!(p.loss_and_grad(&[]).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let cfg = tiny();
        let p = randomized::<f64>(&cfg, 4);
        let mut items = batch(&cfg, 3, 5);
        for e in &mut items {
            e.eps = p.forward(&e.z_t, e.t, &e.cond).unwrap();
        }
        let (loss, grad) = p.loss_and_grad(&items).unwrap();
        // eps is stored in 32 bits, so the residual is at rounding level.
        assert!(loss < 1e-12, "{loss}");
        let head = p.specs.iter().find(|s| s.name == "head.weight").unwrap().range();
        assert!(grad[head].iter().all(|g| g.abs() < 1e-6));
    }

    #[test]
    fn duplicated_batch_keeps_loss_and_grad() {
        let cfg = tiny();
        let p = randomized::<f64>(&cfg, 6);
        let items = batch(&cfg, 5, 7);
        let doubled: Vec<_> = items.iter().chain(&items).cloned().collect();
        let (l1, g1) = p.loss_and_grad(&items).unwrap();
        let (l2, g2) = p.loss_and_grad(&doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12 * l1.max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn odd_sizes_skip_pooling() {
        let cfg = DenoiserConfig {
            height: 1,
            width: 1,
            in_channels: 2,
            num_classes: 2,
            vocab: 2,
            base_width: 4,
            time_embed_dim: 4,
            num_steps: 10,
        };
        assert!(!cfg.pooled());
        let p = randomized::<f64>(&cfg, 1);
        let items = batch(&cfg, 4, 1);
        let (loss, grad) = p.loss_and_grad(&items).unwrap();
        assert!(loss > 0.0 && grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let mut p = randomized::<f64>(&cfg, 11);
        let items = batch(&cfg, 3, 12);
        let worst = max_gradient_error(&mut p, &items, 100, 13).unwrap();
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
