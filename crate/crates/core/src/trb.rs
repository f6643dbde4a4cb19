//! Waveform autoencoder built from patching and Transformer Resampling Blocks.
//!
//! Encoding: `channels × samples` → non-overlapping patches of
//! `patch_size` samples → linear embedding → TRB downsampling by `factor`
//! → projection to the latent width → soft normalization. Decoding mirrors
//! it. A TRB interleaves learnable query embeddings with its input, runs a
//! transformer stack over the mixed sequence and keeps only the queries.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{AttnShape, Graph, RopeTable, RowRef, Var};
use crate::latent::{LatentSequence, DEFAULT_SAMPLE_RATE};
use crate::optim::Adam;
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

/// Zero-pads `signal` (`channels × samples`) to whole patches and returns
/// `n_patches × (channels·patch_size)`, channel-major inside each patch.
pub fn patch<T: Scalar>(signal: &Tensor<T>, patch_size: usize) -> Tensor<T> {
    let (c, n) = signal.shape();
    let p = n.div_ceil(patch_size).max(1);
    Tensor::from_fn(p, c * patch_size, |i, j| {
        let (ch, s) = (j / patch_size, i * patch_size + j % patch_size);
        if s < n {
            signal.get(ch, s)
        } else {
            T::zero()
        }
    })
}

/// Inverse of [`patch`], truncated to `samples`.
pub fn unpatch<T: Scalar>(patches: &Tensor<T>, channels: usize, patch_size: usize, samples: usize) -> Tensor<T> {
    Tensor::from_fn(channels, samples, |ch, s| patches.get(s / patch_size, ch * patch_size + s % patch_size))
}

/// Interleaved length and query positions for `len` inputs downsampled by `k`
/// (`len` already padded to a multiple of `k`).
pub fn down_layout(len: usize, k: usize) -> (usize, Vec<usize>) {
    let segs = len / k;
    (len + segs, (0..segs).map(|s| s * (k + 1) + k).collect())
}

/// Interleaved length and query positions for `len` inputs upsampled by `k`.
pub fn up_layout(len: usize, k: usize) -> (usize, Vec<usize>) {
    (len * (k + 1), (0..len).flat_map(|i| (1..=k).map(move |j| i * (k + 1) + j)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CodecConfig {
    pub audio_channels: usize,
    pub patch_size: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub factor: usize,
    pub latent_dim: usize,
    pub ffn_mult: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub softnorm_momentum: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            audio_channels: 2,
            patch_size: 256,
            d: 64,
            layers: 2,
            heads: 4,
            factor: 16,
            latent_dim: 8,
            ffn_mult: 2,
            rope_base: 1e4,
            norm_eps: 1e-5,
            softnorm_momentum: 0.01,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.patch_size == 0 {
            bail!(InvalidArgument, "resampling factor and patch size must be positive");
        }
        if self.heads == 0 || self.d % self.heads != 0 || (self.d / self.heads) % 2 != 0 {
            bail!(InvalidArgument, "width {} must split into {} even-sized heads", self.d, self.heads);
        }
        if self.audio_channels == 0 || self.latent_dim == 0 {
            bail!(InvalidArgument, "channel counts must be positive");
        }
        Ok(())
    }

    /// Samples per latent frame.
    pub fn hop(&self) -> usize {
        self.patch_size * self.factor
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    norm1: ParamId,
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    norm2: ParamId,
    a: ParamId,
    gate: ParamId,
    out: ParamId,
}

/// Pre-norm transformer layers with rotary attention and a SwiGLU MLP.
#[derive(Clone, Debug)]
pub struct StackIds {
    layers: Vec<LayerIds>,
    heads: usize,
    d: usize,
}

impl StackIds {
    pub fn build(set: &mut ParamSet<f64>, prefix: &str, d: usize, layers: usize, heads: usize, ffn_mult: usize, rng: &mut Rng) -> Self {
        let mut lin = |set: &mut ParamSet<f64>, name: &str, i: usize, o: usize, gain: f64| set.insert(name, rng::normal_tensor(rng, i, o, gain / libm::sqrt(i as f64)));
        let f = ffn_mult * d;
        let out_gain = 1.0 / libm::sqrt(2.0 * layers.max(1) as f64);
        let layers = (0..layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.{l}.{s}");
                LayerIds {
                    norm1: set.insert(&n("norm1"), Tensor::full(1, d, 1.0)),
                    q: lin(set, &n("attn.q"), d, d, 1.0),
                    k: lin(set, &n("attn.k"), d, d, 1.0),
                    v: lin(set, &n("attn.v"), d, d, 1.0),
                    o: lin(set, &n("attn.o"), d, d, out_gain),
                    norm2: set.insert(&n("norm2"), Tensor::full(1, d, 1.0)),
                    a: lin(set, &n("ffn.a"), d, f, 1.0),
                    gate: lin(set, &n("ffn.g"), d, f, 1.0),
                    out: lin(set, &n("ffn.o"), f, d, out_gain),
                }
            })
            .collect();
        Self { layers, heads, d }
    }

    /// Runs the stack over `batch` sequences of `len` rows each.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var, batch: usize, len: usize, rope_base: f64, eps: f64) -> Var {
        if self.layers.is_empty() {
            return x;
        }
        let hd = self.d / self.heads;
        let positions: Vec<usize> = (0..batch * len).map(|r| r % len).collect();
        let rope = Rc::new(RopeTable::new(&positions, self.heads, hd, hd, rope_base));
        let shape = AttnShape { batch, heads: self.heads, q_len: len, k_len: len, head_dim: hd, v_dim: hd };
        let eps = T::of(eps);
        let mut h = x;
        for l in &self.layers {
            let n = g.rms_norm(h, p.var(l.norm1), self.d, eps);
            let q = g.matmul(n, p.var(l.q));
            let k = g.matmul(n, p.var(l.k));
            let v = g.matmul(n, p.var(l.v));
            let q = g.rope(q, rope.clone());
            let k = g.rope(k, rope.clone());
            let a = g.attention(q, k, v, shape, None);
            let a = g.matmul(a, p.var(l.o));
            h = g.add(h, a);
            let n = g.rms_norm(h, p.var(l.norm2), self.d, eps);
            let u = g.matmul(n, p.var(l.a));
            let gt = g.matmul(n, p.var(l.gate));
            let gt = g.silu(gt);
            let u = g.mul(u, gt);
            let u = g.matmul(u, p.var(l.out));
            h = g.add(h, u);
        }
        h
    }
}

/// Downsampling TRB: one query appended after every `k` inputs; only the
/// query positions are kept. `len` must be a multiple of `k`.
#[allow(clippy::too_many_arguments)]
pub fn trb_downsample<T: Scalar>(g: &mut Graph<'_, T>, stack: &StackIds, p: &Bound, x: Var, query: Var, batch: usize, len: usize, k: usize, rope_base: f64, eps: f64) -> Result<Var> {
    if k == 0 || len % k != 0 {
        bail!(InvalidArgument, "length {len} is not a positive multiple of factor {k}");
    }
    let (il, qpos) = down_layout(len, k);
    let idx: Vec<RowRef> = (0..batch)
        .flat_map(|b| (0..len / k).flat_map(move |s| (0..k).map(move |i| RowRef::new(0, b * len + s * k + i)).chain(core::iter::once(RowRef::new(1, 0)))))
        .collect();
    let mixed = g.gather(&[x, query], Rc::new(idx));
    let h = stack.forward(g, p, mixed, batch, il, rope_base, eps);
    let keep: Vec<RowRef> = (0..batch).flat_map(|b| qpos.iter().map(move |&q| RowRef::new(0, b * il + q))).collect();
    Ok(g.gather(&[h], Rc::new(keep)))
}

/// Upsampling TRB: `k` queries (rows of `queries`) after every input.
#[allow(clippy::too_many_arguments)]
pub fn trb_upsample<T: Scalar>(g: &mut Graph<'_, T>, stack: &StackIds, p: &Bound, x: Var, queries: Var, batch: usize, len: usize, k: usize, rope_base: f64, eps: f64) -> Result<Var> {
    if k == 0 {
        bail!(InvalidArgument, "upsampling factor must be positive");
    }
    let (il, qpos) = up_layout(len, k);
    let idx: Vec<RowRef> = (0..batch)
        .flat_map(|b| (0..len).flat_map(move |i| core::iter::once(RowRef::new(0, b * len + i)).chain((0..k).map(|j| RowRef::new(1, j)))))
        .collect();
    let mixed = g.gather(&[x, queries], Rc::new(idx));
    let h = stack.forward(g, p, mixed, batch, il, rope_base, eps);
    let keep: Vec<RowRef> = (0..batch).flat_map(|b| qpos.iter().map(move |&q| RowRef::new(0, b * il + q))).collect();
    Ok(g.gather(&[h], Rc::new(keep)))
}

/// Per-channel `y = (x·a + b)/σ_run` with a running standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftNorm {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub running_std: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub training: bool,
}

impl SoftNorm {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self { a: vec![1.0; channels], b: vec![0.0; channels], running_std: vec![1.0; channels], momentum, eps: 1e-5, training: false }
    }

    fn sigma(&self, c: usize) -> f64 {
        self.running_std[c].max(self.eps)
    }

    /// Updates the running std from `x` (rows = frames) when training, then normalizes.
    pub fn forward(&mut self, x: &Tensor<f64>) -> Tensor<f64> {
        let (n, cs) = x.shape();
        if self.training && n > 0 {
            for c in 0..cs {
                let vals: Vec<f64> = (0..n).map(|r| x.get(r, c) * self.a[c] + self.b[c]).collect();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let s2 = self.running_std[c] * self.running_std[c];
                self.running_std[c] = libm::sqrt((1.0 - self.momentum) * s2 + self.momentum * var);
            }
        }
        self.apply(x)
    }

    /// Normalization with the state frozen.
    pub fn apply(&self, x: &Tensor<f64>) -> Tensor<f64> {
        Tensor::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) * self.a[c] + self.b[c]) / self.sigma(c))
    }

    pub fn inverse(&self, y: &Tensor<f64>) -> Tensor<f64> {
        Tensor::from_fn(y.rows(), y.cols(), |r, c| (y.get(r, c) * self.sigma(c) - self.b[c]) / self.a[c])
    }
}

#[derive(Clone, Debug)]
struct CodecIds {
    enc_in_w: ParamId,
    enc_in_b: ParamId,
    down_query: ParamId,
    enc_stack: StackIds,
    enc_out_w: ParamId,
    enc_out_b: ParamId,
    dec_in_w: ParamId,
    dec_in_b: ParamId,
    up_queries: ParamId,
    dec_stack: StackIds,
    dec_out_w: ParamId,
    dec_out_b: ParamId,
}

/// Deterministic encoder/decoder pair with a soft-normalized bottleneck.
#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamSet<f32>,
    pub norm: SoftNorm,
    ids: CodecIds,
}

fn codec_layout(cfg: &CodecConfig, rng: &mut Rng) -> (ParamSet<f64>, CodecIds) {
    let mut set = ParamSet::new();
    let pd = cfg.audio_channels * cfg.patch_size;
    let d = cfg.d;
    let lin = |set: &mut ParamSet<f64>, rng: &mut Rng, name: &str, i: usize, o: usize| {
        (set.insert(&format!("{name}.w"), rng::normal_tensor(rng, i, o, 1.0 / libm::sqrt(i as f64))), set.insert(&format!("{name}.b"), Tensor::zeros(1, o)))
    };
    let (enc_in_w, enc_in_b) = lin(&mut set, rng, "codec.enc.in", pd, d);
    let down_query = set.insert("codec.enc.query", rng::normal_tensor(rng, 1, d, 1.0));
    let enc_stack = StackIds::build(&mut set, "codec.enc.layers", d, cfg.layers, cfg.heads, cfg.ffn_mult, rng);
    let (enc_out_w, enc_out_b) = lin(&mut set, rng, "codec.enc.out", d, cfg.latent_dim);
    let (dec_in_w, dec_in_b) = lin(&mut set, rng, "codec.dec.in", cfg.latent_dim, d);
    let up_queries = set.insert("codec.dec.queries", rng::normal_tensor(rng, cfg.factor, d, 1.0));
    let dec_stack = StackIds::build(&mut set, "codec.dec.layers", d, cfg.layers, cfg.heads, cfg.ffn_mult, rng);
    let (dec_out_w, dec_out_b) = lin(&mut set, rng, "codec.dec.out", d, pd);
    (set, CodecIds { enc_in_w, enc_in_b, down_query, enc_stack, enc_out_w, enc_out_b, dec_in_w, dec_in_b, up_queries, dec_stack, dec_out_w, dec_out_b })
}

impl Codec {
    pub fn new(config: CodecConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (set, ids) = codec_layout(&config, rng);
        Ok(Self { config, params: set.cast(), norm: SoftNorm::new(config.latent_dim, config.softnorm_momentum), ids })
    }

    /// Adopts stored weights and normalization state.
    pub fn from_parts(config: CodecConfig, params: &ParamSet<f32>, norm: SoftNorm) -> Result<Self> {
        let mut me = Self::new(config, &mut rng::seeded(0))?;
        for (name, t) in me.params.clone().iter() {
            let Some(src) = params.by_name(name) else { bail!(MissingParam, "{name}") };
            if src.shape() != t.shape() {
                bail!(Shape, "{name}: stored {:?}, expected {:?}", src.shape(), t.shape());
            }
            me.params.assign(name, src.clone())?;
        }
        if norm.a.len() != config.latent_dim || norm.b.len() != config.latent_dim || norm.running_std.len() != config.latent_dim {
            bail!(Shape, "soft-normalization state does not match latent width {}", config.latent_dim);
        }
        me.norm = norm;
        Ok(me)
    }

    /// Patches per signal, padded to a multiple of the TRB factor.
    fn patches_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.config.patch_size).max(1).div_ceil(self.config.factor) * self.config.factor
    }

    fn patched(&self, signals: &[Tensor<f32>]) -> Result<(Tensor<f32>, usize)> {
        let Some(first) = signals.first() else { bail!(Empty, "no signals") };
        let n = first.cols();
        if signals.iter().any(|s| s.shape() != (self.config.audio_channels, n)) {
            bail!(Shape, "signals must all be {} × {n}", self.config.audio_channels);
        }
        let p = self.patches_for(n);
        let pd = self.config.audio_channels * self.config.patch_size;
        let mut out = Tensor::zeros(signals.len() * p, pd);
        for (b, s) in signals.iter().enumerate() {
            let pt = patch(s, self.config.patch_size);
            out.data_mut()[b * p * pd..(b * p + pt.rows()) * pd].copy_from_slice(pt.data());
        }
        Ok((out, p))
    }

    fn encode_graph(&self, g: &mut Graph<'_, f32>, p: &Bound, x: Var, batch: usize, patches: usize) -> Result<Var> {
        let ids = &self.ids;
        let cfg = &self.config;
        let h = g.matmul(x, p.var(ids.enc_in_w));
        let h = g.add_row(h, p.var(ids.enc_in_b));
        let h = trb_downsample(g, &ids.enc_stack, p, h, p.var(ids.down_query), batch, patches, cfg.factor, cfg.rope_base, cfg.norm_eps)?;
        let h = g.matmul(h, p.var(ids.enc_out_w));
        Ok(g.add_row(h, p.var(ids.enc_out_b)))
    }

    fn decode_graph(&self, g: &mut Graph<'_, f32>, p: &Bound, z: Var, batch: usize, frames: usize) -> Result<Var> {
        let ids = &self.ids;
        let cfg = &self.config;
        let h = g.matmul(z, p.var(ids.dec_in_w));
        let h = g.add_row(h, p.var(ids.dec_in_b));
        let h = trb_upsample(g, &ids.dec_stack, p, h, p.var(ids.up_queries), batch, frames, cfg.factor, cfg.rope_base, cfg.norm_eps)?;
        let h = g.matmul(h, p.var(ids.dec_out_w));
        Ok(g.add_row(h, p.var(ids.dec_out_b)))
    }

    /// `channels × samples` → normalized latent of `ceil(samples / hop)` frames.
    pub fn encode(&self, signal: &Tensor<f32>) -> Result<LatentSequence> {
        let (x, p) = self.patched(core::slice::from_ref(signal))?;
        let mut g = Graph::new();
        let pb = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let z = self.encode_graph(&mut g, &pb, xv, 1, p)?;
        let z = self.norm.apply(&g.value(z).cast());
        let mut s = LatentSequence::new(z.cast())?;
        s.frame_rate_hz = DEFAULT_SAMPLE_RATE as f64 / self.config.hop() as f64;
        Ok(s)
    }

    /// Latent → `channels × (frames·hop)` signal.
    pub fn decode(&self, latent: &LatentSequence) -> Result<Tensor<f32>> {
        if latent.channels() != self.config.latent_dim {
            bail!(Shape, "latent has {} channels, codec expects {}", latent.channels(), self.config.latent_dim);
        }
        let z = self.norm.inverse(&latent.frames().cast()).cast();
        let frames = latent.len();
        let mut g = Graph::new();
        let pb = self.params.bind(&mut g, false);
        let zv = g.constant(z);
        let y = self.decode_graph(&mut g, &pb, zv, 1, frames)?;
        Ok(unpatch(g.value(y), self.config.audio_channels, self.config.patch_size, frames * self.config.hop()))
    }

    /// One reconstruction step (plain MSE) on equal-length signals; the
    /// running std is updated from the batch's pre-normalization latents.
    pub fn train_step(&mut self, opt: &mut Adam<f32>, signals: &[Tensor<f32>]) -> Result<f64> {
        let (x, p) = self.patched(signals)?;
        let b = signals.len();
        let frames = p / self.config.factor;
        let ld = self.config.latent_dim;
        let (loss, grads, pre) = {
            let mut g = Graph::new();
            let pb = self.params.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let z = self.encode_graph(&mut g, &pb, xv, b, p)?;
            let pre = g.value(z).clone();
            let scale = g.constant(Tensor::from_fn(1, ld, |_, c| (self.norm.a[c] / self.norm.sigma(c)) as f32));
            let shift = g.constant(Tensor::from_fn(1, ld, |_, c| (self.norm.b[c] / self.norm.sigma(c)) as f32));
            let zn = g.mul_row(z, scale);
            let zn = g.add_row(zn, shift);
            // decoder sees the de-normalized latent, so the bottleneck is transparent
            let inv = g.constant(Tensor::from_fn(1, ld, |_, c| (self.norm.sigma(c) / self.norm.a[c]) as f32));
            let unshift = g.constant(Tensor::from_fn(1, ld, |_, c| (-self.norm.b[c] / self.norm.a[c]) as f32));
            let zd = g.mul_row(zn, inv);
            let zd = g.add_row(zd, unshift);
            let y = self.decode_graph(&mut g, &pb, zd, b, frames)?;
            let xt = g.constant(x);
            let d = g.sub(y, xt);
            let sq = g.square(d);
            let l = g.mean_all(sq);
            let lv = g.value(l).get(0, 0) as f64;
            let mut gr = g.backward(l);
            (lv, pb.grads(&self.params, &mut gr), pre)
        };
        if !loss.is_finite() {
            bail!(NonFinite, "reconstruction loss is not finite");
        }
        opt.update(&mut self.params, &grads);
        let was = self.norm.training;
        self.norm.training = true;
        self.norm.forward(&pre.cast());
        self.norm.training = was;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    #[test]
    fn patch_examples() {
        let s = Tensor::<f32>::from_fn(2, 512, |c, j| (c * 1000 + j) as f32);
        let p = patch(&s, 256);
        assert_eq!(p.shape(), (2, 512));
        assert_eq!(p.get(1, 256), 1256.0);
        assert_eq!(unpatch(&p, 2, 256, 512), s);
        let long = Tensor::<f32>::zeros(2, 44100);
        assert_eq!(patch(&long, 256).rows(), 173);
        assert_eq!(173 * 256, 44288);
    }

    #[test]
    fn layouts() {
        let (il, q) = down_layout(8, 2);
        assert_eq!((il, q.len()), (12, 4));
        assert_eq!(q, vec![2, 5, 8, 11]);
        assert_eq!(down_layout(5, 1).1.len(), 5);
        let (il, q) = up_layout(4, 2);
        assert_eq!((il, q.len()), (12, 8));
        assert_eq!(up_layout(7, 1).1.len(), 7);
        for l in [4usize, 16, 32] {
            for k in [1usize, 2, 4] {
                assert_eq!(up_layout(down_layout(l, k).1.len(), k).1.len(), l);
            }
        }
    }

    #[test]
    fn identity_stack_returns_queries() {
        let empty = StackIds { layers: vec![], heads: 1, d: 4 };
        let x = Tensor::<f64>::from_fn(8, 4, |i, j| (i * 4 + j) as f64);
        let q = Tensor::<f64>::from_vec(1, 4, vec![9.0, 8.0, 7.0, 6.0]);
        let set = ParamSet::<f64>::new();
        let mut g = Graph::new();
        let p = set.bind(&mut g, false);
        let (xv, qv) = (g.constant(x.clone()), g.constant(q.clone()));
        let d = trb_downsample(&mut g, &empty, &p, xv, qv, 1, 8, 2, 1e4, 1e-5).unwrap();
        assert_eq!(g.shape(d), (4, 4));
        assert!((0..4).all(|r| g.value(d).row(r) == q.row(0)));
        let qs = Tensor::<f64>::from_fn(2, 4, |i, j| -((i * 4 + j) as f64));
        let qsv = g.constant(qs.clone());
        let u = trb_upsample(&mut g, &empty, &p, d, qsv, 1, 4, 2, 1e4, 1e-5).unwrap();
        assert_eq!(g.shape(u), (8, 4));
        assert_eq!(g.value(u).row(3), qs.row(1));
        assert!(trb_downsample(&mut g, &empty, &p, xv, qv, 1, 8, 3, 1e4, 1e-5).is_err());
        assert!(trb_upsample(&mut g, &empty, &p, xv, qv, 1, 8, 0, 1e4, 1e-5).is_err());
    }

    #[test]
    fn soft_norm_inverse_and_tracking() {
        let mut n = SoftNorm::new(2, 0.01);
        n.a = vec![1.5, -0.7];
        n.b = vec![0.2, 1.0];
        n.running_std = vec![2.0, 0.5];
        let mut r = rng::seeded(1);
        let x: Tensor<f64> = rng::normal_tensor(&mut r, 10, 2, 1.0);
        let back = n.inverse(&n.apply(&x));
        assert!(back.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(n.apply(&x), n.apply(&x));
        let mut t = SoftNorm::new(1, 0.01);
        t.training = true;
        for _ in 0..2000 {
            let batch: Tensor<f64> = rng::normal_tensor(&mut r, 64, 1, 3.0);
            t.forward(&batch);
        }
        assert!((t.running_std[0] - 3.0).abs() < 0.15, "{}", t.running_std[0]);
        let mut z = SoftNorm::new(1, 0.5);
        z.running_std = vec![0.0];
        assert!(z.apply(&Tensor::scalar(1.0)).get(0, 0).is_finite());
    }

    #[test]
    fn composite_ratio_and_determinism() {
        let cfg = CodecConfig { d: 16, layers: 1, heads: 2, latent_dim: 4, ..Default::default() };
        assert_eq!(cfg.hop(), 4096);
        let codec = Codec::new(cfg, &mut rng::seeded(2)).unwrap();
        let sig: Tensor<f32> = rng::normal_tensor(&mut rng::seeded(3), 2, 3 * 4096, 0.3);
        let z = codec.encode(&sig).unwrap();
        assert_eq!((z.len(), z.channels()), (3, 4));
        assert_eq!(z, codec.encode(&sig).unwrap());
        let y = codec.decode(&z).unwrap();
        assert_eq!(y.shape(), (2, 3 * 4096));
        let short: Tensor<f32> = rng::normal_tensor(&mut rng::seeded(3), 2, 5000, 0.3);
        assert_eq!(codec.encode(&short).unwrap().len(), 2);
    }

    #[test]
    fn toy_reconstruction_improves() {
        let cfg = CodecConfig { audio_channels: 1, patch_size: 8, d: 16, layers: 1, heads: 2, factor: 4, latent_dim: 8, ..Default::default() };
        let mut codec = Codec::new(cfg, &mut rng::seeded(4)).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 3e-3, ..Default::default() }, &codec.params);
        let mut r = rng::seeded(5);
        let mut batch = || {
            (0..8)
                .map(|_| {
                    let f = 0.05 + 0.2 * rng::uniform(&mut r);
                    let ph = 6.28 * rng::uniform(&mut r);
                    Tensor::from_fn(1, 64, |_, j| (f * j as f64 + ph).sin() as f32)
                })
                .collect::<Vec<_>>()
        };
        let first: f64 = (0..5).map(|_| codec.train_step(&mut opt, &batch()).unwrap()).sum::<f64>() / 5.0;
        for _ in 0..300 {
            codec.train_step(&mut opt, &batch()).unwrap();
        }
        let last: f64 = (0..5).map(|_| codec.train_step(&mut opt, &batch()).unwrap()).sum::<f64>() / 5.0;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
