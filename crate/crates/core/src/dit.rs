//! The diffusion transformer.
//!
//! ```text
//! x_t ─ 1×1 conv (residual) ─ proj d ─ [memory ‖ frames] ─ blocks ─ drop memory ─ RMSNorm ─ proj C ─ 1×1 conv (residual)
//! ```
//!
//! Each block: AdaLN-modulated self-attention (QK-RMSNorm, partial RoPE,
//! optional differential attention, gated), unmasked cross-attention over
//! `[text tokens ‖ duration]`, a local-additive inpainting MLP on frame
//! positions, and an AdaLN-modulated gated SwiGLU FFN. The timestep and
//! duration go through one shared AdaLN head; every block adds its own six
//! bias vectors.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{AttnShape, Graph, RopeTable, RowRef, Var};
use crate::latent::{LatentSequence, PaddedBatch};
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    /// Latent width `C`.
    pub latent_channels: usize,
    /// Embedding width `d`.
    pub d: usize,
    /// Block count `D`.
    pub depth: usize,
    /// Head count `H`.
    pub heads: usize,
    pub memory_count: usize,
    pub rope_rotate_dims: usize,
    pub differential_attention: bool,
    pub fourier_dim: usize,
    pub text_ctx_len: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    /// Longest sequence (frames) the model accepts.
    pub max_frames: usize,
    /// Durations are divided by this before Fourier encoding.
    pub max_seconds: f64,
    pub ffn_mult: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            d: 256,
            depth: 4,
            heads: 4,
            memory_count: 64,
            rope_rotate_dims: 32,
            differential_attention: true,
            fourier_dim: 256,
            text_ctx_len: 16,
            text_dim: 32,
            vocab_size: 64,
            max_frames: 1357,
            max_seconds: 120.0,
            ffn_mult: 4,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.d == 0 || self.depth == 0 || self.heads == 0 {
            bail!(InvalidArgument, "latent_channels, d, depth and heads must be positive");
        }
        if self.d % self.heads != 0 {
            bail!(InvalidArgument, "d={} is not divisible by heads={}", self.d, self.heads);
        }
        if self.rope_rotate_dims % 2 != 0 || self.rope_rotate_dims > self.head_dim() {
            bail!(InvalidArgument, "rope_rotate_dims={} must be even and ≤ head dim {}", self.rope_rotate_dims, self.head_dim());
        }
        if self.fourier_dim < 2 || self.fourier_dim % 2 != 0 {
            bail!(InvalidArgument, "fourier_dim must be even and ≥ 2");
        }
        if self.text_dim == 0 || self.vocab_size == 0 || self.ffn_mult == 0 {
            bail!(InvalidArgument, "text_dim, vocab_size and ffn_mult must be positive");
        }
        if self.max_frames == 0 || !(self.max_seconds > 0.0) {
            bail!(InvalidArgument, "max_frames and max_seconds must be positive");
        }
        Ok(())
    }
}

/// Keep/generate mask plus the reference it refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintSpec {
    /// `true` = keep the reference frame.
    pub keep: Vec<bool>,
    pub reference: LatentSequence,
}

impl InpaintSpec {
    pub fn new(keep: Vec<bool>, reference: LatentSequence) -> Result<Self> {
        if keep.len() != reference.len() {
            bail!(Shape, "inpaint mask has {} frames, reference has {}", keep.len(), reference.len());
        }
        Ok(Self { keep, reference })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// `[m ‖ m⊙reference]`, `L × (C+1)`.
    pub fn conditioning(&self) -> Tensor<f32> {
        let c = self.reference.channels();
        Tensor::from_fn(self.len(), c + 1, |j, k| {
            let m = if self.keep[j] { 1.0 } else { 0.0 };
            if k == 0 {
                m
            } else {
                m * self.reference.get(k - 1, j)
            }
        })
    }
}

/// Per-item conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub t: f64,
    pub duration_seconds: f64,
    pub text_tokens: Vec<u32>,
    pub inpaint: Option<InpaintSpec>,
    pub cfg_drop: bool,
}

impl ConditioningBundle {
    pub fn new(t: f64, duration_seconds: f64, text_tokens: Vec<u32>) -> Self {
        Self { t, duration_seconds, text_tokens, inpaint: None, cfg_drop: false }
    }

    pub fn with_t(&self, t: f64) -> Self {
        Self { t, ..self.clone() }
    }
}

/// Fourier features `[cos(f_i x), sin(f_i x)]` with `f_i` log-spaced over `[1, 10⁴]`.
pub fn fourier_features<T: Scalar>(values: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let freq = |i: usize| {
        if half <= 1 {
            1.0
        } else {
            libm::pow(10.0, 4.0 * i as f64 / (half - 1) as f64)
        }
    };
    Tensor::from_fn(values.len(), dim, |r, c| {
        let (i, sin) = if c < half { (c, false) } else { (c - half, true) };
        let a = freq(i) * values[r];
        T::of(if sin { libm::sin(a) } else { libm::cos(a) })
    })
}

#[derive(Clone, Debug)]
struct BlockIds {
    norm1: ParamId,
    q: ParamId,
    k: ParamId,
    v: ParamId,
    q2: Option<ParamId>,
    k2: Option<ParamId>,
    q_norm: ParamId,
    k_norm: ParamId,
    o: ParamId,
    adaln_bias: ParamId,
    norm2: ParamId,
    xq: ParamId,
    xk: ParamId,
    xv: ParamId,
    xo: ParamId,
    inp_w1: ParamId,
    inp_b1: ParamId,
    inp_w2: ParamId,
    inp_b2: ParamId,
    norm3: ParamId,
    ffn_a: ParamId,
    ffn_g: ParamId,
    ffn_o: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    text_embed: ParamId,
    text_pad: ParamId,
    text_proj_w: ParamId,
    text_proj_b: ParamId,
    in_conv_w: ParamId,
    in_conv_b: ParamId,
    in_proj_w: ParamId,
    in_proj_b: ParamId,
    memory: Option<ParamId>,
    t_w1: ParamId,
    t_b1: ParamId,
    t_w2: ParamId,
    t_b2: ParamId,
    dur_w1: ParamId,
    dur_b1: ParamId,
    dur_w2: ParamId,
    dur_b2: ParamId,
    adaln_w: ParamId,
    adaln_b: ParamId,
    blocks: Vec<BlockIds>,
    final_norm: ParamId,
    out_proj_w: ParamId,
    out_proj_b: ParamId,
    out_conv_w: ParamId,
    out_conv_b: ParamId,
}

/// Model weights and the layout needed to run them.
#[derive(Clone, Debug)]
pub struct Dit<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    ids: Ids,
}

struct Init<'a> {
    set: ParamSet<f64>,
    rng: Option<&'a mut Rng>,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let t = match self.rng.as_deref_mut() {
            Some(r) => rng::normal_tensor(r, rows, cols, std),
            None => Tensor::zeros(rows, cols),
        };
        self.set.insert(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> ParamId {
        self.normal(name, fan_in, fan_out, gain / libm::sqrt(fan_in as f64))
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.set.insert(name, Tensor::zeros(rows, cols))
    }

    fn ones(&mut self, name: &str, cols: usize) -> ParamId {
        self.set.insert(name, Tensor::full(1, cols, 1.0))
    }

    /// Copy of `src` plus relative noise.
    fn perturbed(&mut self, name: &str, src: ParamId, rel: f64) -> ParamId {
        let base = self.set.get(src).clone();
        let t = match self.rng.as_deref_mut() {
            Some(r) => {
                let s = libm::sqrt(base.sum_sq() / base.len().max(1) as f64) * rel;
                let mut t = base;
                t.data_mut().iter_mut().for_each(|x| *x += rng::normal(r) * s);
                t
            }
            None => base,
        };
        self.set.insert(name, t)
    }
}

fn build_layout(cfg: &ModelConfig, rng: Option<&mut Rng>) -> (ParamSet<f64>, Ids) {
    let (c, d, f) = (cfg.latent_channels, cfg.d, cfg.fourier_dim);
    let hd = cfg.head_dim();
    let branch_gain = 1.0 / libm::sqrt(2.0 * cfg.depth as f64);
    let mut p = Init { set: ParamSet::new(), rng };
    let text_embed = p.normal("text.embed", cfg.vocab_size, cfg.text_dim, 1.0);
    let text_pad = p.normal("text.pad", 1, cfg.text_dim, 1.0);
    let text_proj_w = p.linear("text.proj.w", cfg.text_dim, d, 1.0);
    let text_proj_b = p.zeros("text.proj.b", 1, d);
    let in_conv_w = p.linear("in.conv.w", c, c, 0.1);
    let in_conv_b = p.zeros("in.conv.b", 1, c);
    let in_proj_w = p.linear("in.proj.w", c, d, 1.0);
    let in_proj_b = p.zeros("in.proj.b", 1, d);
    let memory = (cfg.memory_count > 0).then(|| p.normal("memory", cfg.memory_count, d, 1.0));
    let t_w1 = p.linear("adaln.t.w1", f, d, 1.0);
    let t_b1 = p.zeros("adaln.t.b1", 1, d);
    let t_w2 = p.linear("adaln.t.w2", d, d, 1.0);
    let t_b2 = p.zeros("adaln.t.b2", 1, d);
    let dur_w1 = p.linear("adaln.dur.w1", f, d, 1.0);
    let dur_b1 = p.zeros("adaln.dur.b1", 1, d);
    let dur_w2 = p.linear("adaln.dur.w2", d, d, 1.0);
    let dur_b2 = p.zeros("adaln.dur.b2", 1, d);
    let adaln_w = p.zeros("adaln.head.w", d, 6 * d);
    let adaln_b = p.zeros("adaln.head.b", 1, 6 * d);
    let mut blocks = Vec::with_capacity(cfg.depth);
    for k in 0..cfg.depth {
        let n = |s: &str| format!("blocks.{k}.{s}");
        let q = p.linear(&n("attn.q"), d, d, 1.0);
        let kk = p.linear(&n("attn.k"), d, d, 1.0);
        let (q2, k2) = if cfg.differential_attention {
            (Some(p.perturbed(&n("attn.q2"), q, 0.1)), Some(p.perturbed(&n("attn.k2"), kk, 0.1)))
        } else {
            (None, None)
        };
        blocks.push(BlockIds {
            norm1: p.ones(&n("norm1"), d),
            q,
            k: kk,
            v: p.linear(&n("attn.v"), d, d, 1.0),
            q2,
            k2,
            q_norm: p.ones(&n("attn.q_norm"), hd),
            k_norm: p.ones(&n("attn.k_norm"), hd),
            o: p.linear(&n("attn.o"), d, d, branch_gain),
            adaln_bias: p.zeros(&n("adaln_bias"), 1, 6 * d),
            norm2: p.ones(&n("norm2"), d),
            xq: p.linear(&n("cross.q"), d, d, 1.0),
            xk: p.linear(&n("cross.k"), d, d, 1.0),
            xv: p.linear(&n("cross.v"), d, d, 1.0),
            xo: p.linear(&n("cross.o"), d, d, branch_gain),
            inp_w1: p.linear(&n("inpaint.w1"), c + 1, d, 1.0),
            inp_b1: p.zeros(&n("inpaint.b1"), 1, d),
            inp_w2: p.zeros(&n("inpaint.w2"), d, d),
            inp_b2: p.zeros(&n("inpaint.b2"), 1, d),
            norm3: p.ones(&n("norm3"), d),
            ffn_a: p.linear(&n("ffn.a"), d, cfg.ffn_mult * d, 1.0),
            ffn_g: p.linear(&n("ffn.g"), d, cfg.ffn_mult * d, 1.0),
            ffn_o: p.linear(&n("ffn.o"), cfg.ffn_mult * d, d, branch_gain),
        });
    }
    let ids = Ids {
        text_embed,
        text_pad,
        text_proj_w,
        text_proj_b,
        in_conv_w,
        in_conv_b,
        in_proj_w,
        in_proj_b,
        memory,
        t_w1,
        t_b1,
        t_w2,
        t_b2,
        dur_w1,
        dur_b1,
        dur_w2,
        dur_b2,
        adaln_w,
        adaln_b,
        blocks,
        final_norm: p.ones("final_norm", d),
        out_proj_w: p.linear("out.proj.w", d, c, 1.0),
        out_proj_b: p.zeros("out.proj.b", 1, c),
        out_conv_w: p.linear("out.conv.w", c, c, 0.1),
        out_conv_b: p.zeros("out.conv.b", 1, c),
    };
    (p.set, ids)
}

/// Row expansion `item b → rows b·len .. (b+1)·len`.
fn expand_index(batch: usize, len: usize) -> Rc<Vec<RowRef>> {
    Rc::new((0..batch * len).map(|r| RowRef::new(0, r / len)).collect())
}

/// Graph outputs of one forward pass.
pub struct DitOutput {
    /// `(B·L_max) × C` velocity, or `(B·L_max) × d` features when tapped.
    pub out: Var,
}

impl<T: Scalar> Dit<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (set, ids) = build_layout(&config, Some(rng));
        Ok(Self { config, params: set.cast(), ids })
    }

    /// Adopts existing weights; every expected tensor must be present with the right shape.
    pub fn from_params(config: ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (template, ids) = build_layout(&config, None);
        let mut set = template.cast::<T>();
        for (name, t) in template.iter() {
            let Some(src) = params.by_name(name) else { bail!(MissingParam, "{name}") };
            if src.shape() != t.shape() {
                bail!(Shape, "{name}: checkpoint {:?}, config expects {:?}", src.shape(), t.shape());
            }
            set.assign(name, src.clone())?;
        }
        Ok(Self { config, params: set, ids })
    }

    pub fn cast<U: Scalar>(&self) -> Dit<U> {
        Dit { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn check_inputs(&self, g: &Graph<'_, T>, x: Var, valid_len: &[usize], max_len: usize, cond: &[ConditioningBundle]) -> Result<()> {
        let b = valid_len.len();
        let c = self.config.latent_channels;
        if b == 0 {
            bail!(Empty, "empty batch");
        }
        if cond.len() != b {
            bail!(Shape, "{} conditioning bundles for {} items", cond.len(), b);
        }
        if g.shape(x) != (b * max_len, c) {
            bail!(Shape, "input is {:?}, expected ({}, {})", g.shape(x), b * max_len, c);
        }
        if max_len > self.config.max_frames {
            bail!(InvalidArgument, "sequence length {max_len} exceeds model maximum {}", self.config.max_frames);
        }
        for (i, (&v, cb)) in valid_len.iter().zip(cond).enumerate() {
            if v == 0 || v > max_len {
                bail!(InvalidArgument, "item {i} has valid length {v} (max {max_len})");
            }
            if let Some(ip) = &cb.inpaint {
                if ip.len() != v {
                    bail!(Shape, "item {i}: inpaint spec covers {} frames, sequence has {v}", ip.len());
                }
                if ip.reference.channels() != c {
                    bail!(Shape, "item {i}: inpaint reference has {} channels", ip.reference.channels());
                }
            }
            if let Some(&tok) = cb.text_tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                bail!(InvalidArgument, "token id {tok} outside vocabulary of {}", self.config.vocab_size);
            }
        }
        Ok(())
    }

    fn mlp2(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var, w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId) -> Var {
        let h = g.matmul(x, p.var(w1));
        let h = g.add_row(h, p.var(b1));
        let h = g.silu(h);
        let h = g.matmul(h, p.var(w2));
        g.add_row(h, p.var(b2))
    }

    /// `x + x·W + b` over rows.
    fn conv1x1(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var, w: ParamId, b: ParamId) -> Var {
        let h = g.matmul(x, p.var(w));
        let h = g.add_row(h, p.var(b));
        g.add(x, h)
    }

    /// Shared AdaLN output `B × 6d` and the duration embedding `B × d`.
    fn conditioning_embeddings(&self, g: &mut Graph<'_, T>, p: &Bound, cond: &[ConditioningBundle]) -> (Var, Var) {
        let id = &self.ids;
        let f = self.config.fourier_dim;
        let ts: Vec<f64> = cond.iter().map(|c| c.t).collect();
        let ds: Vec<f64> = cond.iter().map(|c| (c.duration_seconds / self.config.max_seconds).clamp(0.0, 1.0)).collect();
        let tf = g.constant(fourier_features(&ts, f));
        let df = g.constant(fourier_features(&ds, f));
        let te = self.mlp2(g, p, tf, id.t_w1, id.t_b1, id.t_w2, id.t_b2);
        let de = self.mlp2(g, p, df, id.dur_w1, id.dur_b1, id.dur_w2, id.dur_b2);
        let s = g.add(te, de);
        let s = g.silu(s);
        let h = g.matmul(s, p.var(id.adaln_w));
        (g.add_row(h, p.var(id.adaln_b)), de)
    }

    /// Cross-attention context `(B·(T+1)) × d`; dropped items get all-zero rows.
    fn context(&self, g: &mut Graph<'_, T>, p: &Bound, cond: &[ConditioningBundle], dur: Var) -> Var {
        let tl = self.config.text_ctx_len;
        let b = cond.len();
        let mut idx = Vec::with_capacity(b * tl);
        for c in cond {
            for j in 0..tl {
                idx.push(match c.text_tokens.get(j) {
                    Some(&tok) => RowRef::new(0, tok as usize),
                    None => RowRef::new(1, 0),
                });
            }
        }
        let ids = &self.ids;
        let tokens = g.gather(&[p.var(ids.text_embed), p.var(ids.text_pad)], Rc::new(idx));
        let tokens = g.matmul(tokens, p.var(ids.text_proj_w));
        let tokens = g.add_row(tokens, p.var(ids.text_proj_b));
        let mut idx = Vec::with_capacity(b * (tl + 1));
        for (i, c) in cond.iter().enumerate() {
            for j in 0..tl {
                idx.push(if c.cfg_drop { RowRef::ZERO } else { RowRef::new(0, i * tl + j) });
            }
            idx.push(if c.cfg_drop { RowRef::ZERO } else { RowRef::new(1, i) });
        }
        g.gather(&[tokens, dur], Rc::new(idx))
    }

    /// `(B·L_max) × (C+1)` inpainting conditioning; zero for items without a spec and for padding.
    pub fn inpaint_tensor(&self, valid_len: &[usize], max_len: usize, cond: &[ConditioningBundle]) -> Tensor<T> {
        let c = self.config.latent_channels;
        let mut t = Tensor::zeros(valid_len.len() * max_len, c + 1);
        for (b, cb) in cond.iter().enumerate() {
            if let Some(ip) = &cb.inpaint {
                let m = ip.conditioning();
                for j in 0..valid_len[b] {
                    for (dst, &src) in t.row_mut(b * max_len + j).iter_mut().zip(m.row(j)) {
                        *dst = T::of(src as f64);
                    }
                }
            }
        }
        t
    }

    /// Runs the first `blocks` transformer blocks; returns the internal
    /// `(B·(M+L_max)) × d` sequence.
    #[allow(clippy::too_many_arguments)]
    fn trunk(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var, valid_len: &[usize], max_len: usize, cond: &[ConditioningBundle], blocks: usize) -> Var {
        let cfg = &self.config;
        let ids = &self.ids;
        let (bsz, d, m) = (valid_len.len(), cfg.d, cfg.memory_count);
        let li = m + max_len;
        let eps = T::of(cfg.norm_eps);
        let hd = cfg.head_dim();

        let h = self.conv1x1(g, p, x, ids.in_conv_w, ids.in_conv_b);
        let h = g.matmul(h, p.var(ids.in_proj_w));
        let frames = g.add_row(h, p.var(ids.in_proj_b));
        let mut idx = Vec::with_capacity(bsz * li);
        for b in 0..bsz {
            for i in 0..li {
                idx.push(if i < m { RowRef::new(0, i) } else { RowRef::new(1, b * max_len + i - m) });
            }
        }
        let mut h = match ids.memory {
            Some(mem) => g.gather(&[p.var(mem), frames], Rc::new(idx)),
            None => frames,
        };

        let (shared, dur) = self.conditioning_embeddings(g, p, cond);
        let ctx = self.context(g, p, cond, dur);
        let cond_in = g.constant(self.inpaint_tensor(valid_len, max_len, cond));
        let mut pad_idx = Vec::with_capacity(bsz * li);
        for b in 0..bsz {
            for i in 0..li {
                pad_idx.push(if i < m { RowRef::ZERO } else { RowRef::new(0, b * max_len + i - m) });
            }
        }
        let pad_idx = Rc::new(pad_idx);
        let expand = expand_index(bsz, li);
        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..li).collect();
        let rope = Rc::new(RopeTable::new(&positions, cfg.heads, hd, cfg.rope_rotate_dims, cfg.rope_base));
        let mut key_valid = Vec::with_capacity(bsz * li);
        for &v in valid_len {
            key_valid.extend((0..li).map(|i| i < m + v));
        }
        let self_shape = AttnShape { batch: bsz, heads: cfg.heads, q_len: li, k_len: li, head_dim: hd, v_dim: hd };
        let cross_shape = AttnShape { batch: bsz, heads: cfg.heads, q_len: li, k_len: cfg.text_ctx_len + 1, head_dim: hd, v_dim: hd };

        for blk in ids.blocks.iter().take(blocks) {
            let mods = g.add_row(shared, p.var(blk.adaln_bias));
            let mods = g.gather(&[mods], expand.clone());
            let sig = |g: &mut Graph<'_, T>, i: usize| g.slice_cols(mods, i * d, d);
            let (gs, bs, ggs, gf, bf, ggf) = (sig(g, 0), sig(g, 1), sig(g, 2), sig(g, 3), sig(g, 4), sig(g, 5));

            // self-attention
            let n = g.rms_norm(h, p.var(blk.norm1), d, eps);
            let scale = g.add_scalar(gs, T::one());
            let a = g.mul(n, scale);
            let a = g.add(a, bs);
            let v = g.matmul(a, p.var(blk.v));
            let qk = |g: &mut Graph<'_, T>, wq: ParamId, wk: ParamId| {
                let q = g.matmul(a, p.var(wq));
                let q = g.rms_norm(q, p.var(blk.q_norm), hd, eps);
                let q = g.rope(q, rope.clone());
                let k = g.matmul(a, p.var(wk));
                let k = g.rms_norm(k, p.var(blk.k_norm), hd, eps);
                let k = g.rope(k, rope.clone());
                (q, k)
            };
            let (q, k) = qk(g, blk.q, blk.k);
            let mut att = g.attention(q, k, v, self_shape, Some(&key_valid));
            if let (Some(q2), Some(k2)) = (blk.q2, blk.k2) {
                let (q2, k2) = qk(g, q2, k2);
                let att2 = g.attention(q2, k2, v, self_shape, Some(&key_valid));
                att = g.sub(att, att2);
            }
            let o = g.matmul(att, p.var(blk.o));
            let gs_mul = gate(g, ggs);
            let o = g.mul(o, gs_mul);
            h = g.add(h, o);

            // cross-attention
            let n = g.rms_norm(h, p.var(blk.norm2), d, eps);
            let q = g.matmul(n, p.var(blk.xq));
            let k = g.matmul(ctx, p.var(blk.xk));
            let v = g.matmul(ctx, p.var(blk.xv));
            let xa = g.attention(q, k, v, cross_shape, None);
            let xo = g.matmul(xa, p.var(blk.xo));
            h = g.add(h, xo);

            // local-additive inpainting conditioning, zero on memory rows
            let add = self.mlp2(g, p, cond_in, blk.inp_w1, blk.inp_b1, blk.inp_w2, blk.inp_b2);
            let add = g.gather(&[add], pad_idx.clone());
            h = g.add(h, add);

            // SwiGLU FFN
            let n = g.rms_norm(h, p.var(blk.norm3), d, eps);
            let scale = g.add_scalar(gf, T::one());
            let a = g.mul(n, scale);
            let a = g.add(a, bf);
            let lin = g.matmul(a, p.var(blk.ffn_a));
            let gt = g.matmul(a, p.var(blk.ffn_g));
            let gt = g.silu(gt);
            let f = g.mul(lin, gt);
            let f = g.matmul(f, p.var(blk.ffn_o));
            let gf_mul = gate(g, ggf);
            let f = g.mul(f, gf_mul);
            h = g.add(h, f);
        }
        h
    }

    fn drop_memory(&self, g: &mut Graph<'_, T>, h: Var, bsz: usize, max_len: usize) -> Var {
        let m = self.config.memory_count;
        if m == 0 {
            return h;
        }
        let li = m + max_len;
        let idx: Vec<RowRef> = (0..bsz).flat_map(|b| (0..max_len).map(move |j| RowRef::new(0, b * li + m + j))).collect();
        g.gather(&[h], Rc::new(idx))
    }

    /// Velocity prediction `(B·L_max) × C` for the padded input `x`.
    pub fn forward(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var, valid_len: &[usize], max_len: usize, cond: &[ConditioningBundle]) -> Result<Var> {
        self.check_inputs(g, x, valid_len, max_len, cond)?;
        let ids = &self.ids;
        let h = self.trunk(g, p, x, valid_len, max_len, cond, self.config.depth);
        let h = self.drop_memory(g, h, valid_len.len(), max_len);
        let h = g.rms_norm(h, p.var(ids.final_norm), self.config.d, T::of(self.config.norm_eps));
        let h = g.matmul(h, p.var(ids.out_proj_w));
        let h = g.add_row(h, p.var(ids.out_proj_b));
        Ok(self.conv1x1(g, p, h, ids.out_conv_w, ids.out_conv_b))
    }

    /// Frame features `(B·L_max) × d` after block `tap` (0-based).
    #[allow(clippy::too_many_arguments)]
    pub fn features(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var, valid_len: &[usize], max_len: usize, cond: &[ConditioningBundle], tap: usize) -> Result<Var> {
        if tap >= self.config.depth {
            bail!(InvalidArgument, "tap layer {tap} must be below depth {}", self.config.depth);
        }
        self.check_inputs(g, x, valid_len, max_len, cond)?;
        let h = self.trunk(g, p, x, valid_len, max_len, cond, tap + 1);
        Ok(self.drop_memory(g, h, valid_len.len(), max_len))
    }

    /// Gradient-free velocity prediction.
    pub fn predict(&self, x: &Tensor<T>, valid_len: &[usize], max_len: usize, cond: &[ConditioningBundle]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let v = self.forward(&mut g, &p, xv, valid_len, max_len, cond)?;
        Ok(g.value(v).clone())
    }

    /// [`Dit::predict`] on a [`PaddedBatch`].
    pub fn predict_batch(&self, batch: &PaddedBatch, cond: &[ConditioningBundle]) -> Result<Tensor<T>> {
        self.predict(&batch.data.cast(), &batch.valid_len, batch.max_len, cond)
    }

    /// Names of all parameters, grouped by their first path component.
    pub fn parameter_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| String::from(n)).collect()
    }
}

/// `σ(1 − g)`.
fn gate<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Var {
    let neg = g.scale(x, -T::one());
    let shifted = g.add_scalar(neg, T::one());
    g.sigmoid(shifted)
}

/// Reference RMSNorm of one vector, `x / sqrt(mean(x²)+eps) ⊙ γ`.
pub fn rmsnorm(x: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    let r = 1.0 / libm::sqrt(ms + eps);
    x.iter().zip(gamma).map(|(v, g)| v * r * g).collect()
}

/// SwiGLU on one row: `((x·W_a) ⊙ SiLU(x·W_g))·W_o`.
pub fn swiglu_ffn<T: Scalar>(x: &Tensor<T>, wa: &Tensor<T>, wg: &Tensor<T>, wo: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let (x, wa, wg, wo) = (g.leaf(x, false), g.leaf(wa, false), g.leaf(wg, false), g.leaf(wo, false));
    let a = g.matmul(x, wa);
    let gt = g.matmul(x, wg);
    let gt = g.silu(gt);
    let h = g.mul(a, gt);
    let out = g.matmul(h, wo);
    g.value(out).clone()
}

/// Standalone masked (optionally differential) attention for inspection and
/// tests. Shapes follow [`Graph::attention`].
#[allow(clippy::too_many_arguments)]
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    second: Option<(&Tensor<T>, &Tensor<T>)>,
    shape: AttnShape,
    key_valid: Option<&[bool]>,
) -> Tensor<T> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.leaf(q, false), g.leaf(k, false), g.leaf(v, false));
    let mut out = g.attention(qv, kv, vv, shape, key_valid);
    if let Some((q2, k2)) = second {
        let (q2, k2) = (g.leaf(q2, false), g.leaf(k2, false));
        let o2 = g.attention(q2, k2, vv, shape, key_valid);
        out = g.sub(out, o2);
    }
    g.value(out).clone()
}

/// Per-block modulation for given shared output and bias sets:
/// `(scale, shift, gate multiplier)` for attention then FFN, each `1 × d`.
pub fn adaln_modulation(shared: &[f64], bias: &[f64], d: usize) -> [(Vec<f64>, Vec<f64>, Vec<f64>); 2] {
    let sig = |i: usize| -> Vec<f64> { (0..d).map(|j| shared[i * d + j] + bias[i * d + j]).collect() };
    let pack = |a: usize| {
        let scale = sig(a).iter().map(|g| 1.0 + g).collect();
        let shift = sig(a + 1);
        let gate = sig(a + 2).iter().map(|g| crate::schedules::sigmoid(1.0 - g)).collect();
        (scale, shift, gate)
    };
    [pack(0), pack(3)]
}
