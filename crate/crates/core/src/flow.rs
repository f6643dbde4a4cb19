//! Flow-matching pre-training.
//!
//! `x_t = (1−t)·x_0 + t·ε`, target velocity `v = ε − x_0`. Per item the
//! timestep is drawn from the truncated logit-normal and shifted by a
//! length-dependent μ, the noise is paired to the data by minibatch optimal
//! transport, an inpainting mask is drawn and the text/duration context is
//! dropped with probability `cfg_dropout`. The loss averages generated and
//! kept frames separately.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::dit::{ConditioningBundle, Dit, InpaintSpec};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::latent::{self, build_batch, Example, LatentSequence, PaddedBatch};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::rng::{self, Rng};
use crate::schedules::{self, ScheduleSpec};
use crate::tensor::{Scalar, Tensor};

/// Which branch [`sample_inpaint_mask`] took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Nothing kept: unconditional generation.
    Full,
    /// Random generated segments inside kept context.
    Segments,
    /// Kept prefix, generated suffix.
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MaskProbs {
    pub full: f64,
    pub segments: f64,
    pub max_segments: usize,
}

impl Default for MaskProbs {
    fn default() -> Self {
        Self { full: 0.8, segments: 0.1, max_segments: 10 }
    }
}

/// Draws a keep mask of length `len` (`true` = keep).
pub fn sample_inpaint_mask(rng: &mut Rng, len: usize) -> (MaskKind, Vec<bool>) {
    sample_inpaint_mask_with(rng, len, &MaskProbs::default())
}

pub fn sample_inpaint_mask_with(rng: &mut Rng, len: usize, probs: &MaskProbs) -> (MaskKind, Vec<bool>) {
    let u = rng::uniform(rng);
    if u < probs.full || len < 2 {
        return (MaskKind::Full, vec![false; len]);
    }
    if u < probs.full + probs.segments {
        return (MaskKind::Segments, segment_mask(rng, len, probs.max_segments.max(1)));
    }
    let prefix = rng::int_in(rng, 1, len - 1);
    (MaskKind::Causal, (0..len).map(|j| j < prefix).collect())
}

/// `k ∈ [1, max_k]` disjoint generated segments separated by kept frames.
///
/// The sequence is split into `2k+1` alternating pieces
/// `keep, gen, keep, …, gen, keep`; generated pieces and the inner kept
/// pieces have at least one frame, the outer kept pieces may be empty.
/// Boundaries are a uniform random composition of the remaining frames.
fn segment_mask(rng: &mut Rng, len: usize, max_k: usize) -> Vec<bool> {
    let k = rng::int_in(rng, 1, max_k).min(len.div_ceil(2));
    let free = len - (2 * k - 1);
    // stars and bars: 2k distinct cut positions among free + 2k slots
    let slots = free + 2 * k;
    let mut pool: Vec<usize> = (0..slots).collect();
    for i in 0..2 * k {
        let j = rng::int_in(rng, i, slots - 1);
        pool.swap(i, j);
    }
    let mut cuts: Vec<usize> = pool[..2 * k].to_vec();
    cuts.sort_unstable();
    let mut extra = Vec::with_capacity(2 * k + 1);
    let mut prev = 0usize;
    for (i, &c) in cuts.iter().enumerate() {
        extra.push(c - prev - if i == 0 { 0 } else { 1 });
        prev = c;
    }
    extra.push(slots - 1 - prev);
    let mut mask = Vec::with_capacity(len);
    for (piece, &e) in extra.iter().enumerate() {
        let keep = piece % 2 == 0;
        let inner = piece > 0 && piece < 2 * k;
        let base = if keep && !inner { 0 } else { 1 };
        mask.extend(core::iter::repeat_n(keep, base + e));
    }
    debug_assert_eq!(mask.len(), len);
    mask
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SinkhornParams {
    /// ε_reg = reg_scale · median(C).
    pub reg_scale: f64,
    pub max_iter: usize,
    /// Largest allowed L1 row-marginal violation at convergence.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self { reg_scale: 0.05, max_iter: 100, tol: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    /// `perm[i]` is the noise index paired with data item `i`.
    pub perm: Vec<usize>,
    pub converged: bool,
    /// True when identity pairing was returned (non-convergence or no gain).
    pub fallback: bool,
}

/// `C_ij = Σ_{r < valid_i} ‖x0_i[r] − ε_j[r]‖²`.
pub fn ot_cost_matrix(x0: &PaddedBatch, eps: &Tensor<f32>) -> Vec<f64> {
    let (b, l) = (x0.batch_size(), x0.max_len);
    let mut c = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let mut s = 0.0f64;
            for r in 0..x0.valid_len[i] {
                for (a, e) in x0.data.row(i * l + r).iter().zip(eps.row(j * l + r)) {
                    let d = (*a - *e) as f64;
                    s += d * d;
                }
            }
            c[i * b + j] = s;
        }
    }
    c
}

pub fn permutation_cost(cost: &[f64], perm: &[usize]) -> f64 {
    let b = perm.len();
    perm.iter().enumerate().map(|(i, &j)| cost[i * b + j]).sum()
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(xs.map(|x| libm::exp(x - m)).sum::<f64>())
}

/// Log-domain entropic OT with uniform marginals; returns the transport
/// plan (row-major `B × B`) and whether the marginals converged.
pub fn sinkhorn_plan(cost: &[f64], b: usize, params: &SinkhornParams) -> (Vec<f64>, bool) {
    let mut sorted = cost.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.is_empty() { 0.0 } else { sorted[sorted.len() / 2] };
    let reg = (params.reg_scale * median).max(1e-12);
    let log_a = -libm::log(b as f64);
    let mut f = vec![0.0; b];
    let mut g = vec![0.0; b];
    let mut converged = false;
    for _ in 0..params.max_iter {
        for i in 0..b {
            f[i] = reg * log_a - reg * logsumexp((0..b).map(|j| (g[j] - cost[i * b + j]) / reg));
        }
        for j in 0..b {
            g[j] = reg * log_a - reg * logsumexp((0..b).map(|i| (f[i] - cost[i * b + j]) / reg));
        }
        // columns are exact after the g update; check rows
        let err: f64 = (0..b)
            .map(|i| {
                let row: f64 = (0..b).map(|j| libm::exp((f[i] + g[j] - cost[i * b + j]) / reg)).sum();
                libm::fabs(row - 1.0 / b as f64)
            })
            .sum();
        if err.is_finite() && err < params.tol {
            converged = true;
            break;
        }
    }
    let plan = (0..b * b).map(|k| libm::exp((f[k / b] + g[k % b] - cost[k]) / reg)).collect();
    (plan, converged)
}

/// Greedy extraction: rows in order of decreasing peak mass take their
/// best free column, falling through to the next best on collision.
pub fn greedy_permutation(plan: &[f64], b: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..b).collect();
    let peak = |i: usize| (0..b).map(|j| plan[i * b + j]).fold(f64::NEG_INFINITY, f64::max);
    rows.sort_by(|&x, &y| peak(y).total_cmp(&peak(x)));
    let mut taken = vec![false; b];
    let mut perm = vec![0; b];
    for i in rows {
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&x, &y| plan[i * b + y].total_cmp(&plan[i * b + x]));
        let j = order.into_iter().find(|&j| !taken[j]).unwrap_or(0);
        taken[j] = true;
        perm[i] = j;
    }
    perm
}

/// Pairwise-swap descent on the assignment until no swap lowers the cost.
pub fn two_opt(cost: &[f64], perm: &mut [usize]) {
    let b = perm.len();
    loop {
        let mut improved = false;
        for i in 0..b {
            for k in i + 1..b {
                let (a, c) = (perm[i], perm[k]);
                let delta = cost[i * b + c] + cost[k * b + a] - cost[i * b + a] - cost[k * b + c];
                if delta < -1e-12 {
                    perm.swap(i, k);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Minibatch OT pairing of data and noise.
pub fn ot_couple(x0: &PaddedBatch, eps: &Tensor<f32>, params: &SinkhornParams) -> Coupling {
    let b = x0.batch_size();
    let identity: Vec<usize> = (0..b).collect();
    if b <= 1 {
        return Coupling { perm: identity, converged: true, fallback: false };
    }
    let cost = ot_cost_matrix(x0, eps);
    let (plan, converged) = sinkhorn_plan(&cost, b, params);
    if !converged || plan.iter().any(|p| !p.is_finite()) {
        return Coupling { perm: identity, converged: false, fallback: true };
    }
    let mut perm = greedy_permutation(&plan, b);
    two_opt(&cost, &mut perm);
    if permutation_cost(&cost, &perm) > permutation_cost(&cost, &identity) {
        return Coupling { perm: identity, converged, fallback: true };
    }
    Coupling { perm, converged, fallback: false }
}

/// Everything needed for one flow-matching loss evaluation.
#[derive(Clone, Debug)]
pub struct FlowBatchPlan {
    pub x0: PaddedBatch,
    /// Frames before silence padding.
    pub content_len: Vec<usize>,
    /// Noise already permuted by `coupling`, same layout as `x0.data`.
    pub eps: Tensor<f32>,
    pub coupling: Coupling,
    /// Unshifted draws.
    pub t_raw: Vec<f64>,
    /// Shifted timesteps used for noising.
    pub t: Vec<f64>,
    pub mu: Vec<f64>,
    pub masks: Vec<Vec<bool>>,
    pub mask_kinds: Vec<MaskKind>,
    pub cfg_drop: Vec<bool>,
    pub cond: Vec<ConditioningBundle>,
}

impl FlowBatchPlan {
    /// `x_t` with zeroed padding.
    pub fn noised(&self) -> Tensor<f32> {
        let l = self.x0.max_len;
        let mut x = Tensor::zeros(self.x0.data.rows(), self.x0.channels());
        for (b, &t) in self.t.iter().enumerate() {
            let t = t as f32;
            for j in 0..self.x0.valid_len[b] {
                let r = b * l + j;
                for ((o, &a), &e) in x.row_mut(r).iter_mut().zip(self.x0.data.row(r)).zip(self.eps.row(r)) {
                    *o = (1.0 - t) * a + t * e;
                }
            }
        }
        x
    }

    /// `ε − x_0` with zeroed padding.
    pub fn target(&self) -> Tensor<f32> {
        let mut v = self.eps.zip_map(&self.x0.data, |e, a| e - a);
        let l = self.x0.max_len;
        for (b, &n) in self.x0.valid_len.iter().enumerate() {
            for j in n..l {
                v.row_mut(b * l + j).iter_mut().for_each(|x| *x = 0.0);
            }
        }
        v
    }

    /// Flattened `B × L_max` keep mask.
    pub fn keep_flat(&self) -> Vec<bool> {
        let l = self.x0.max_len;
        let mut k = vec![false; self.x0.batch_size() * l];
        for (b, m) in self.masks.iter().enumerate() {
            k[b * l..b * l + m.len()].copy_from_slice(m);
        }
        k
    }
}

/// Knobs for batch construction shared by every training stage.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct BatchConfig {
    pub batch_size: usize,
    /// Mean of the exponential silence-padding draw (seconds).
    pub silence_mean_seconds: f64,
    pub cfg_dropout: f64,
    pub masks: MaskProbs,
    pub use_ot: bool,
    pub sinkhorn: SinkhornParams,
    /// Shortest trainable length (frames) for the μ interpolation.
    pub len_min: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            silence_mean_seconds: 4.0,
            cfg_dropout: 0.1,
            masks: MaskProbs::default(),
            use_ot: true,
            sinkhorn: SinkhornParams::default(),
            len_min: 16,
        }
    }
}

/// Draws `batch_size` examples, applies silence augmentation (capped at
/// `max_frames`) and returns them with their pre-augmentation lengths.
pub fn sample_examples<'a>(data: &'a [Example], rng: &mut Rng, n: usize) -> Vec<&'a Example> {
    (0..n).map(|_| &data[rng::int_in(rng, 0, data.len() - 1)]).collect()
}

pub fn augment(ex: &Example, rng: &mut Rng, mean_seconds: f64, silence: &[f32], max_frames: usize) -> Result<LatentSequence> {
    let mut s = latent::silence_augment(&ex.latent, rng, mean_seconds, silence)?;
    if s.len() > max_frames {
        s = latent::trim(&s, max_frames.max(ex.latent.len().min(max_frames)))?;
    }
    Ok(s)
}

/// Assembles a complete loss plan from examples.
#[allow(clippy::too_many_arguments)]
pub fn plan_flow_batch(
    examples: &[&Example],
    rng: &mut Rng,
    cfg: &BatchConfig,
    spec: &ScheduleSpec,
    silence: &[f32],
    max_frames: usize,
) -> Result<FlowBatchPlan> {
    if examples.is_empty() {
        bail!(Empty, "no examples to batch");
    }
    let mut seqs = Vec::with_capacity(examples.len());
    let mut durations = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.latent.len() > max_frames {
            bail!(InvalidArgument, "example of {} frames exceeds model maximum {max_frames}", ex.latent.len());
        }
        durations.push(ex.latent.len() as f64 / ex.latent.frame_rate_hz);
        seqs.push(augment(ex, rng, cfg.silence_mean_seconds, silence, max_frames)?);
    }
    let x0 = build_batch(&seqs)?;
    let (b, l, c) = (x0.batch_size(), x0.max_len, x0.channels());
    let mut t_raw = Vec::with_capacity(b);
    let mut t = Vec::with_capacity(b);
    let mut mu = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    let mut kinds = Vec::with_capacity(b);
    let mut cfg_drop = Vec::with_capacity(b);
    for s in &seqs {
        let tr = schedules::sample_timestep_train(rng, spec);
        let m = schedules::mu_for_length(s.len(), cfg.len_min, max_frames, spec);
        t_raw.push(tr);
        mu.push(m);
        t.push(schedules::shift_timestep(tr, m));
        let (kind, mask) = sample_inpaint_mask_with(rng, s.len(), &cfg.masks);
        kinds.push(kind);
        masks.push(mask);
        cfg_drop.push(rng::uniform(rng) < cfg.cfg_dropout);
    }
    let raw_eps: Tensor<f32> = rng::normal_tensor(rng, b * l, c, 1.0);
    let coupling = if cfg.use_ot {
        ot_couple(&x0, &raw_eps, &cfg.sinkhorn)
    } else {
        Coupling { perm: (0..b).collect(), converged: true, fallback: false }
    };
    let mut eps = Tensor::zeros(b * l, c);
    for (i, &j) in coupling.perm.iter().enumerate() {
        eps.data_mut()[i * l * c..(i + 1) * l * c].copy_from_slice(&raw_eps.data()[j * l * c..(j + 1) * l * c]);
    }
    let cond = (0..b)
        .map(|i| {
            let inpaint = (kinds[i] != MaskKind::Full).then(|| InpaintSpec { keep: masks[i].clone(), reference: seqs[i].clone() });
            ConditioningBundle { t: t[i], duration_seconds: durations[i], text_tokens: examples[i].tokens.clone(), inpaint, cfg_drop: cfg_drop[i] }
        })
        .collect();
    let content_len = examples.iter().map(|e| e.latent.len()).collect();
    Ok(FlowBatchPlan { x0, content_len, eps, coupling, t_raw, t, mu, masks, mask_kinds: kinds, cfg_drop, cond })
}

/// Two-term masked loss:
/// `(1/N_gen)·Σ_{m=0}‖v̂−v‖² + (1/N_ctx)·Σ_{m=1}‖v̂−v‖²` over valid frames,
/// where `N_*` count frames. Returns the loss node and the two terms'
/// element weights' frame counts `(N_gen, N_ctx)`.
pub fn flow_matching_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    v_hat: Var,
    target: &Tensor<T>,
    keep: &[bool],
    valid_len: &[usize],
    max_len: usize,
) -> (Var, usize, usize) {
    let c = target.cols();
    let mut n_gen = 0usize;
    let mut n_ctx = 0usize;
    for (b, &v) in valid_len.iter().enumerate() {
        for j in 0..v {
            if keep[b * max_len + j] {
                n_ctx += 1;
            } else {
                n_gen += 1;
            }
        }
    }
    let wg = if n_gen > 0 { T::one() / T::of(n_gen as f64) } else { T::zero() };
    let wc = if n_ctx > 0 { T::one() / T::of(n_ctx as f64) } else { T::zero() };
    let mut w = vec![T::zero(); valid_len.len() * max_len * c];
    for (b, &v) in valid_len.iter().enumerate() {
        for j in 0..v {
            let r = b * max_len + j;
            let wt = if keep[r] { wc } else { wg };
            w[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = wt);
        }
    }
    let tv = g.constant(target.clone());
    let d = g.sub(v_hat, tv);
    let sq = g.square(d);
    (g.weighted_sum(sq, Rc::new(w)), n_gen, n_ctx)
}

/// Same loss split into its two terms, evaluated directly.
pub fn flow_loss_terms<T: Scalar>(v_hat: &Tensor<T>, target: &Tensor<T>, keep: &[bool], valid_len: &[usize], max_len: usize) -> (f64, f64) {
    let (mut sg, mut sc, mut ng, mut nc) = (0.0, 0.0, 0usize, 0usize);
    for (b, &v) in valid_len.iter().enumerate() {
        for j in 0..v {
            let r = b * max_len + j;
            let e: f64 = v_hat.row(r).iter().zip(target.row(r)).map(|(a, t)| (*a - *t).f64().powi(2)).sum();
            if keep[r] {
                sc += e;
                nc += 1;
            } else {
                sg += e;
                ng += 1;
            }
        }
    }
    (if ng > 0 { sg / ng as f64 } else { 0.0 }, if nc > 0 { sc / nc as f64 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EmaConfig {
    pub beta: f64,
    pub warmup_exponent: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { beta: 0.9995, warmup_exponent: 0.75 }
    }
}

/// Exponential moving average of model weights with power-law warmup.
#[derive(Clone, Debug)]
pub struct EmaState<T> {
    pub shadow: ParamSet<T>,
    pub config: EmaConfig,
    pub step: u64,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(params: &ParamSet<T>, config: EmaConfig) -> Self {
        Self { shadow: params.clone(), config, step: 0 }
    }

    pub fn beta_at(&self, step: u64) -> f64 {
        let warm = 1.0 - libm::pow(1.0 + step as f64, -self.config.warmup_exponent);
        warm.min(self.config.beta)
    }

    pub fn update(&mut self, params: &ParamSet<T>) {
        let b = self.beta_at(self.step);
        let (bt, ob) = (T::of(b), T::of(1.0 - b));
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            for (x, &y) in s.data_mut().iter_mut().zip(p.data()) {
                *x = bt * *x + ob * y;
            }
        }
        self.step += 1;
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowMetrics {
    pub step: u64,
    pub loss: f64,
    pub loss_gen: f64,
    pub loss_ctx: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub mean_t: f64,
    pub ot_fallback: bool,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FlowConfig {
    pub batch: BatchConfig,
    pub adam: AdamConfig,
    pub ema: EmaConfig,
}

/// Mutable state of the pre-training stage.
pub struct FlowTrainer {
    pub model: Dit<f32>,
    pub ema: EmaState<f32>,
    pub opt: Adam<f32>,
    pub config: FlowConfig,
    pub spec: ScheduleSpec,
    pub silence: Vec<f32>,
}

impl FlowTrainer {
    pub fn new(model: Dit<f32>, config: FlowConfig, spec: ScheduleSpec, silence: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        if silence.len() != model.config.latent_channels {
            bail!(Shape, "silence latent width {} does not match {} channels", silence.len(), model.config.latent_channels);
        }
        let ema = EmaState::new(&model.params, config.ema);
        let opt = Adam::new(config.adam, &model.params);
        Ok(Self { model, ema, opt, config, spec, silence })
    }

    pub fn plan(&self, data: &[Example], rng: &mut Rng) -> Result<FlowBatchPlan> {
        if data.is_empty() {
            bail!(Empty, "empty dataset");
        }
        let ex = sample_examples(data, rng, self.config.batch.batch_size);
        plan_flow_batch(&ex, rng, &self.config.batch, &self.spec, &self.silence, self.model.config.max_frames)
    }

    /// Loss and gradients for a plan, without updating anything.
    pub fn loss_and_grads(&self, plan: &FlowBatchPlan) -> Result<(f64, f64, f64, Vec<Tensor<f32>>)> {
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, true);
        let x = g.constant(plan.noised());
        let v = self.model.forward(&mut g, &p, x, &plan.x0.valid_len, plan.x0.max_len, &plan.cond)?;
        let target = plan.target();
        let keep = plan.keep_flat();
        let (loss, _, _) = flow_matching_loss(&mut g, v, &target, &keep, &plan.x0.valid_len, plan.x0.max_len);
        let (lg, lc) = flow_loss_terms(g.value(v), &target, &keep, &plan.x0.valid_len, plan.x0.max_len);
        let lv = g.value(loss).get(0, 0) as f64;
        let mut grads = g.backward(loss);
        Ok((lv, lg, lc, p.grads(&self.model.params, &mut grads)))
    }

    pub fn train_step(&mut self, data: &[Example], rng: &mut Rng) -> Result<FlowMetrics> {
        let plan = self.plan(data, rng)?;
        self.step_on(&plan)
    }

    pub fn step_on(&mut self, plan: &FlowBatchPlan) -> Result<FlowMetrics> {
        let (loss, lg, lc, grads) = self.loss_and_grads(plan)?;
        let mut m = FlowMetrics {
            step: self.opt.step,
            loss,
            loss_gen: lg,
            loss_ctx: lc,
            lr: self.opt.config.lr_at(self.opt.step),
            mean_t: plan.t.iter().sum::<f64>() / plan.t.len() as f64,
            ot_fallback: plan.coupling.fallback,
            ..Default::default()
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            m.skipped = true;
            return Ok(m);
        }
        m.grad_norm = self.opt.update(&mut self.model.params, &grads);
        self.ema.update(&self.model.params);
        Ok(m)
    }

    /// Model carrying the EMA weights.
    pub fn ema_model(&self) -> Dit<f32> {
        let mut m = self.model.clone();
        m.params.copy_from(&self.ema.shadow).expect("EMA mirrors the model layout");
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ModelConfig;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..n {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn batch_of(rows: &[&[f32]], c: usize) -> PaddedBatch {
        let items: Vec<_> = rows.iter().map(|r| LatentSequence::new(Tensor::from_vec(r.len() / c, c, r.to_vec())).unwrap()).collect();
        build_batch(&items).unwrap()
    }

    #[test]
    fn mask_branches() {
        let mut r = rng::seeded(1);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let len = rng::int_in(&mut r, 2, 40);
            let (kind, m) = sample_inpaint_mask(&mut r, len);
            assert_eq!(m.len(), len);
            match kind {
                MaskKind::Full => {
                    counts[0] += 1;
                    assert!(m.iter().all(|&k| !k));
                }
                MaskKind::Segments => {
                    counts[1] += 1;
                    assert!(m.iter().any(|&k| !k));
                    // number of generated runs in 1..=10
                    let runs = m.windows(2).filter(|w| w[0] && !w[1]).count() + usize::from(!m[0]);
                    assert!((1..=10).contains(&runs), "{runs}");
                }
                MaskKind::Causal => {
                    counts[2] += 1;
                    assert!(m.windows(2).all(|w| w[0] >= w[1]));
                    assert!(m[0] && !m[len - 1]);
                }
            }
        }
        let f = |i: usize| counts[i] as f64 / n as f64;
        assert!((f(0) - 0.8).abs() < 0.01 && (f(1) - 0.1).abs() < 0.01 && (f(2) - 0.1).abs() < 0.01);
    }

    #[test]
    fn segment_counts_cover_range() {
        let mut r = rng::seeded(2);
        let mut seen = [false; 11];
        for _ in 0..5000 {
            let m = segment_mask(&mut r, 30, 10);
            let runs = m.windows(2).filter(|w| w[0] && !w[1]).count() + usize::from(!m[0]);
            seen[runs] = true;
        }
        assert!(seen[1..].iter().all(|&s| s));
        for len in 2..6 {
            for _ in 0..200 {
                assert_eq!(segment_mask(&mut r, len, 10).len(), len);
            }
        }
    }

    #[test]
    fn ot_examples() {
        let x0 = batch_of(&[&[0.0, 0.0], &[10.0, 10.0]], 2);
        let eps = Tensor::from_vec(2, 2, vec![9.0, 9.0, 1.0, 1.0]);
        let cost = ot_cost_matrix(&x0, &eps);
        assert_eq!(permutation_cost(&cost, &[0, 1]), 324.0);
        assert_eq!(permutation_cost(&cost, &[1, 0]), 4.0);
        let c = ot_couple(&x0, &eps, &SinkhornParams::default());
        assert_eq!(c.perm, vec![1, 0]);
        let single = batch_of(&[&[1.0, 2.0]], 2);
        assert_eq!(ot_couple(&single, &Tensor::zeros(1, 2), &SinkhornParams::default()).perm, vec![0]);
    }

    #[test]
    fn ot_never_worse_than_identity() {
        let mut r = rng::seeded(3);
        for _ in 0..100 {
            let b = rng::int_in(&mut r, 2, 8);
            let lens: Vec<usize> = (0..b).map(|_| rng::int_in(&mut r, 1, 6)).collect();
            let items: Vec<_> = lens.iter().map(|&l| LatentSequence::new(rng::normal_tensor(&mut r, l, 3, 1.0)).unwrap()).collect();
            let x0 = build_batch(&items).unwrap();
            let eps = rng::normal_tensor(&mut r, b * x0.max_len, 3, 1.0);
            let c = ot_couple(&x0, &eps, &SinkhornParams::default());
            let cost = ot_cost_matrix(&x0, &eps);
            let mut seen = c.perm.clone();
            seen.sort_unstable();
            assert_eq!(seen, (0..b).collect::<Vec<_>>());
            assert!(permutation_cost(&cost, &c.perm) <= permutation_cost(&cost, &(0..b).collect::<Vec<_>>()));
        }
    }

    #[test]
    fn ot_matches_brute_force_mostly() {
        let mut r = rng::seeded(4);
        let mut hits = 0;
        for trial in 0..200 {
            let b = 2 + trial % 5;
            let items: Vec<_> = (0..b).map(|_| LatentSequence::new(rng::normal_tensor(&mut r, 4, 3, 1.0)).unwrap()).collect();
            let x0 = build_batch(&items).unwrap();
            let eps = rng::normal_tensor(&mut r, b * 4, 3, 1.0);
            let cost = ot_cost_matrix(&x0, &eps);
            let best = permutations(b).iter().map(|p| permutation_cost(&cost, p)).fold(f64::INFINITY, f64::min);
            let cp = ot_couple(&x0, &eps, &SinkhornParams::default());
            let got = permutation_cost(&cost, &cp.perm);
            if (got - best).abs() <= 1e-9 * best.max(1.0) {
                hits += 1;
            }
        }
        assert!(hits >= 190, "{hits}/200");
    }

    #[test]
    fn nonconvergence_falls_back() {
        let x0 = batch_of(&[&[0.0], &[10.0]], 1);
        let eps = Tensor::from_vec(2, 1, vec![9.0, 1.0]);
        let c = ot_couple(&x0, &eps, &SinkhornParams { reg_scale: 0.05, max_iter: 0, tol: 1e-6 });
        assert!(c.fallback && !c.converged);
        assert_eq!(c.perm, vec![0, 1]);
    }

    #[test]
    fn loss_hand_case() {
        // one item, L=3, C=1; keep frame 1
        let v_hat = Tensor::<f64>::from_vec(3, 1, vec![1.0, 2.0, -1.0]);
        let v = Tensor::<f64>::from_vec(3, 1, vec![0.5, 0.0, 1.0]);
        let keep = [false, true, false];
        let mut g = Graph::new();
        let vh = g.constant(v_hat.clone());
        let (l, ng, nc) = flow_matching_loss(&mut g, vh, &v, &keep, &[3], 3);
        assert_eq!((ng, nc), (2, 1));
        let expect = (0.25 + 4.0) / 2.0 + 4.0 / 1.0;
        assert!((g.value(l).get(0, 0) - expect).abs() < 1e-12);
        // exact prediction gives zero
        let mut g = Graph::new();
        let vv = g.constant(v.clone());
        let (l, _, _) = flow_matching_loss(&mut g, vv, &v, &keep, &[3], 3);
        assert_eq!(g.value(l).get(0, 0), 0.0);
        // full mask is plain masked MSE over frames
        let mut g = Graph::new();
        let vh = g.constant(v_hat.clone());
        let (l, _, nc) = flow_matching_loss(&mut g, vh, &v, &[false; 3], &[3], 3);
        assert_eq!(nc, 0);
        assert!((g.value(l).get(0, 0) - (0.25 + 4.0 + 4.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn loss_terms_are_separated_and_padding_free() {
        let mut r = rng::seeded(5);
        let v_hat: Tensor<f64> = rng::normal_tensor(&mut r, 8, 2, 1.0);
        let v: Tensor<f64> = rng::normal_tensor(&mut r, 8, 2, 1.0);
        let keep = [true, false, true, false, false, true, false, false];
        let (g0, c0) = flow_loss_terms(&v_hat, &v, &keep, &[3, 4], 4);
        let mut v2 = v.clone();
        v2.set(0, 0, 100.0); // kept frame
        let (g1, c1) = flow_loss_terms(&v_hat, &v2, &keep, &[3, 4], 4);
        assert_eq!(g0, g1);
        assert_ne!(c0, c1);
        v2.set(3, 1, -50.0); // padding of item 0
        assert_eq!(flow_loss_terms(&v_hat, &v2, &keep, &[3, 4], 4).0, g1);
        // gradient at the padded row is exactly zero
        let mut g = Graph::new();
        let vh = g.variable(v_hat.clone());
        let (l, _, _) = flow_matching_loss(&mut g, vh, &v, &keep, &[3, 4], 4);
        let grads = g.backward(l);
        assert!(grads.get(vh).unwrap().row(3).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ema_examples() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.insert("w", Tensor::row_vector(vec![1.0, 2.0]));
        let mut ema = EmaState::new(&ps, EmaConfig::default());
        assert_eq!(ema.beta_at(0), 0.0);
        assert_eq!(ema.beta_at(u64::MAX / 2), 0.9995);
        ps.get_mut(id).data_mut()[0] = 5.0;
        ema.update(&ps);
        assert_eq!(ema.shadow.get(id), ps.get(id));
        for _ in 0..20_000 {
            ema.update(&ps);
        }
        assert!((ema.shadow.get(id).get(0, 0) - 5.0).abs() < 1e-9);
    }

    fn toy_data(r: &mut Rng, n: usize, c: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let l = rng::int_in(r, 4, 9);
                let tok = (i % 4) as u32;
                let lat = Tensor::from_fn(l, c, |j, ch| ((tok as f32 + 1.0) * (0.5 + j as f32 * 0.3 + ch as f32)).sin());
                Example { tokens: vec![tok], latent: LatentSequence::new(lat).unwrap() }
            })
            .collect()
    }

    fn toy_trainer(seed: u64) -> FlowTrainer {
        let cfg = ModelConfig {
            latent_channels: 3,
            d: 16,
            depth: 2,
            heads: 2,
            memory_count: 2,
            rope_rotate_dims: 4,
            fourier_dim: 16,
            text_ctx_len: 2,
            text_dim: 8,
            vocab_size: 4,
            max_frames: 24,
            max_seconds: 2.0,
            ..Default::default()
        };
        let mut r = rng::seeded(seed);
        let model = Dit::new(cfg, &mut r).unwrap();
        let fc = FlowConfig {
            batch: BatchConfig { batch_size: 8, silence_mean_seconds: 0.2, len_min: 4, ..Default::default() },
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            ..Default::default()
        };
        FlowTrainer::new(model, fc, ScheduleSpec::default(), vec![0.0; 3]).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_replays() {
        let mut r = rng::seeded(6);
        let data = toy_data(&mut r, 32, 3);
        let run = |steps: usize| {
            let mut tr = toy_trainer(7);
            let mut rr = rng::seeded(8);
            (0..steps).map(|_| tr.train_step(&data, &mut rr).unwrap().loss).collect::<Vec<_>>()
        };
        let trace = run(500);
        let head: f64 = trace[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = trace[450..].iter().sum::<f64>() / 50.0;
        assert!(tail < 0.7 * head, "{head} -> {tail}");
        assert_eq!(run(20), trace[..20].to_vec());
    }

    #[test]
    fn plan_invariants() {
        let mut r = rng::seeded(9);
        let data = toy_data(&mut r, 16, 3);
        let tr = toy_trainer(1);
        let mut drops = 0usize;
        let mut total = 0usize;
        for _ in 0..1250 {
            let p = tr.plan(&data, &mut r).unwrap();
            for i in 0..p.t.len() {
                assert!(p.t[i] >= p.t_raw[i]);
                assert!(p.mu[i] >= 0.5);
            }
            let mut perm = p.coupling.perm.clone();
            perm.sort_unstable();
            assert_eq!(perm, (0..p.t.len()).collect::<Vec<_>>());
            drops += p.cfg_drop.iter().filter(|&&d| d).count();
            total += p.cfg_drop.len();
        }
        assert!(total >= 10_000);
        let f = drops as f64 / total as f64;
        assert!((f - 0.1).abs() < 0.01, "{f}");
    }
}
