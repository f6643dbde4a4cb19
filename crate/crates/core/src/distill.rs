//! Distillation warmup: a frozen teacher integrates the guided ODE, and a
//! one-step student regresses `x_t − t·v_θ(x_t, t)` onto the teacher's endpoint.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::dit::{ConditioningBundle, Dit, InpaintSpec};
use crate::error::{bail, Result};
use crate::flow::{sample_examples, sample_inpaint_mask_with, EmaConfig, EmaState, MaskKind, MaskProbs};
use crate::graph::{Graph, Var};
use crate::latent::Example;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::sampler::{self, SampleRequest};
use crate::tensor::{Scalar, Tensor};

/// Teacher rollouts for one batch.
#[derive(Clone, Debug)]
pub struct TrajectoryCache {
    /// `(x_t, t)` in order of decreasing `t`; the last state is the endpoint at `t = 0`.
    pub states: Vec<(Tensor<f32>, f64)>,
    pub endpoint: Tensor<f32>,
    pub requests: Vec<SampleRequest>,
    pub valid_len: Vec<usize>,
    pub max_len: usize,
    /// Student iterations served since the rollout.
    pub age: usize,
}

impl TrajectoryCache {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// Conditioning of item `b` at time `t`.
    pub fn bundle(&self, b: usize, t: f64) -> ConditioningBundle {
        let r = &self.requests[b];
        ConditioningBundle { t, duration_seconds: r.duration_seconds, text_tokens: r.tokens.clone(), inpaint: r.inpaint.clone(), cfg_drop: false }
    }

    /// Draws one state index per item uniformly and assembles the student input.
    pub fn sample(&self, rng: &mut Rng) -> Result<(Tensor<f32>, Vec<f64>)> {
        if self.states.is_empty() {
            bail!(Empty, "trajectory cache is empty");
        }
        let b = self.requests.len();
        let (rows, c) = (self.max_len, self.endpoint.cols());
        let mut x = Tensor::zeros(b * rows, c);
        let mut t = Vec::with_capacity(b);
        for i in 0..b {
            let (s, ts) = &self.states[rng::int_in(rng, 0, self.states.len() - 1)];
            x.data_mut()[i * rows * c..(i + 1) * rows * c].copy_from_slice(&s.data()[i * rows * c..(i + 1) * rows * c]);
            t.push(*ts);
        }
        Ok((x, t))
    }
}

/// Teacher rollout from `eps` along an unshifted logSNR-uniform grid with guidance.
pub fn teacher_trajectory(teacher: &Dit<f32>, reqs: &[SampleRequest], eps: Tensor<f32>, steps: usize, cfg: f64, lambda_range: (f64, f64)) -> Result<TrajectoryCache> {
    if steps == 0 {
        bail!(InvalidArgument, "teacher needs at least one solver step");
    }
    let grid = sampler::ode_grid(steps, lambda_range.0, lambda_range.1);
    let mut states = Vec::with_capacity(steps + 1);
    let endpoint = sampler::euler_trajectory(teacher, reqs, eps, &grid, cfg, |i, x| states.push((x.clone(), grid[i])))?;
    let valid_len = reqs.iter().map(|r| r.len).collect::<Vec<_>>();
    let max_len = valid_len.iter().copied().max().unwrap_or(1);
    Ok(TrajectoryCache { states, endpoint, requests: reqs.to_vec(), valid_len, max_len, age: 0 })
}

/// `Σ_valid ‖(x_t − t·v) − x̂0‖² / N_valid` where `N_valid` counts frames.
pub fn distill_loss<T: Scalar>(g: &mut Graph<'_, T>, x_t: &Tensor<T>, v: Var, t: &[f64], endpoint: &Tensor<T>, valid_len: &[usize], max_len: usize) -> Var {
    let c = x_t.cols();
    let tt = Tensor::from_fn(x_t.rows(), c, |r, _| T::of(t[r / max_len]));
    let tv = g.constant(tt);
    let tvel = g.mul(tv, v);
    let xv = g.constant(x_t.clone());
    let pred = g.sub(xv, tvel);
    let ev = g.constant(endpoint.clone());
    let d = g.sub(pred, ev);
    let sq = g.square(d);
    let n: usize = valid_len.iter().sum();
    let w = T::one() / T::of(n.max(1) as f64);
    let mut weights = vec![T::zero(); x_t.len()];
    for (b, &l) in valid_len.iter().enumerate() {
        weights[b * max_len * c..(b * max_len + l) * c].iter_mut().for_each(|x| *x = w);
    }
    g.weighted_sum(sq, Rc::new(weights))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DistillConfig {
    pub batch_size: usize,
    pub refresh_every: usize,
    pub cfg_scale: f64,
    pub solver_steps: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub masks: MaskProbs,
    pub adam: AdamConfig,
    pub ema: EmaConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            refresh_every: 4,
            cfg_scale: 5.0,
            solver_steps: 15,
            lambda_lo: sampler::ODE_LAMBDA_RANGE.0,
            lambda_hi: sampler::ODE_LAMBDA_RANGE.1,
            masks: MaskProbs::default(),
            adam: AdamConfig::default(),
            ema: EmaConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub refreshed: bool,
    pub skipped: bool,
}

/// Requests for a batch of prompts drawn from the data, with random inpainting masks.
pub fn requests_from_data(data: &[Example], rng: &mut Rng, n: usize, masks: &MaskProbs, max_frames: usize) -> Result<Vec<SampleRequest>> {
    if data.is_empty() {
        bail!(Empty, "empty dataset");
    }
    sample_examples(data, rng, n)
        .into_iter()
        .map(|ex| {
            let len = ex.latent.len().min(max_frames);
            let (kind, keep) = sample_inpaint_mask_with(rng, len, masks);
            let inpaint = if kind == MaskKind::Full {
                None
            } else {
                Some(InpaintSpec::new(keep, crate::latent::trim(&ex.latent, len)?)?)
            };
            Ok(SampleRequest { tokens: ex.tokens.clone(), duration_seconds: len as f64 / ex.latent.frame_rate_hz, len, len_eff: len, inpaint })
        })
        .collect()
}

pub struct DistillTrainer {
    pub student: Dit<f32>,
    pub teacher: Dit<f32>,
    pub ema: EmaState<f32>,
    pub opt: Adam<f32>,
    pub config: DistillConfig,
    pub cache: Option<TrajectoryCache>,
    pub step: u64,
}

impl DistillTrainer {
    /// Student starts as a copy of the teacher.
    pub fn new(teacher: Dit<f32>, config: DistillConfig) -> Result<Self> {
        if config.refresh_every == 0 || config.solver_steps == 0 || config.batch_size == 0 {
            bail!(InvalidArgument, "refresh cadence, solver steps and batch size must be positive");
        }
        let student = teacher.clone();
        let ema = EmaState::new(&student.params, config.ema);
        let opt = Adam::new(config.adam, &student.params);
        Ok(Self { student, teacher, ema, opt, config, cache: None, step: 0 })
    }

    pub fn rollout(&self, data: &[Example], rng: &mut Rng) -> Result<TrajectoryCache> {
        let reqs = requests_from_data(data, rng, self.config.batch_size, &self.config.masks, self.teacher.config.max_frames)?;
        let max_len = reqs.iter().map(|r| r.len).max().unwrap_or(1);
        let eps = rng::normal_tensor(rng, reqs.len() * max_len, self.teacher.config.latent_channels, 1.0);
        teacher_trajectory(&self.teacher, &reqs, eps, self.config.solver_steps, self.config.cfg_scale, (self.config.lambda_lo, self.config.lambda_hi))
    }

    pub fn loss_and_grads(&self, cache: &TrajectoryCache, x: &Tensor<f32>, t: &[f64]) -> Result<(f64, Vec<Tensor<f32>>)> {
        let mut g = Graph::new();
        let p = self.student.bind(&mut g, true);
        let cond: Vec<ConditioningBundle> = t.iter().enumerate().map(|(b, &tb)| cache.bundle(b, tb)).collect();
        let xv = g.constant(x.clone());
        let v = self.student.forward(&mut g, &p, xv, &cache.valid_len, cache.max_len, &cond)?;
        let loss = distill_loss(&mut g, x, v, t, &cache.endpoint, &cache.valid_len, cache.max_len);
        let lv = g.value(loss).get(0, 0) as f64;
        let mut grads = g.backward(loss);
        Ok((lv, p.grads(&self.student.params, &mut grads)))
    }

    pub fn train_step(&mut self, data: &[Example], rng: &mut Rng) -> Result<DistillMetrics> {
        let mut m = DistillMetrics { step: self.step, ..Default::default() };
        if self.cache.as_ref().is_none_or(|c| c.age >= self.config.refresh_every) {
            self.cache = Some(self.rollout(data, rng)?);
            m.refreshed = true;
        }
        let cache = self.cache.as_ref().expect("cache filled above");
        let (x, t) = cache.sample(rng)?;
        let (loss, grads) = self.loss_and_grads(cache, &x, &t)?;
        m.loss = loss;
        if let Some(c) = self.cache.as_mut() {
            c.age += 1;
        }
        self.step += 1;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            m.skipped = true;
            return Ok(m);
        }
        m.grad_norm = self.opt.update(&mut self.student.params, &grads);
        self.ema.update(&self.student.params);
        Ok(m)
    }

    pub fn ema_student(&self) -> Dit<f32> {
        let mut m = self.student.clone();
        m.params.copy_from(&self.ema.shadow).expect("EMA mirrors the model layout");
        m
    }
}

/// Mean one-step endpoint error of `student` over every cached state with `t > 0`.
pub fn endpoint_mse(student: &Dit<f32>, cache: &TrajectoryCache) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (x, t) in &cache.states {
        if *t <= 0.0 {
            continue;
        }
        let tb = vec![*t; cache.requests.len()];
        let cond: Vec<ConditioningBundle> = (0..cache.requests.len()).map(|b| cache.bundle(b, *t)).collect();
        let mut g = Graph::new();
        let p = student.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let v = student.forward(&mut g, &p, xv, &cache.valid_len, cache.max_len, &cond)?;
        let l = distill_loss(&mut g, x, v, &tb, &cache.endpoint, &cache.valid_len, cache.max_len);
        total += g.value(l).get(0, 0) as f64;
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}
