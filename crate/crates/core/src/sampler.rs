//! Inference: ping-pong sampling, inpainting and a guided Euler baseline.

use alloc::vec;
use alloc::vec::Vec;

use crate::dit::{ConditioningBundle, Dit, InpaintSpec};
use crate::error::{bail, Result};
use crate::latent::{self, LatentSequence, DEFAULT_DOWNSAMPLE_RATIO, DEFAULT_SAMPLE_RATE};
use crate::rng::{self, Rng};
use crate::schedules::{self, ScheduleSpec};
use crate::tensor::{Scalar, Tensor};

/// Anything that predicts a velocity for a padded batch.
pub trait VelocityModel {
    fn velocity(&self, x: &Tensor<f32>, valid_len: &[usize], max_len: usize, cond: &[ConditioningBundle]) -> Result<Tensor<f32>>;
    fn max_frames(&self) -> usize;
    fn max_seconds(&self) -> f64;
    fn channels(&self) -> usize;
}

impl VelocityModel for Dit<f32> {
    fn velocity(&self, x: &Tensor<f32>, valid_len: &[usize], max_len: usize, cond: &[ConditioningBundle]) -> Result<Tensor<f32>> {
        self.predict(x, valid_len, max_len, cond)
    }

    fn max_frames(&self) -> usize {
        self.config.max_frames
    }

    fn max_seconds(&self) -> f64 {
        self.config.max_seconds
    }

    fn channels(&self) -> usize {
        self.config.latent_channels
    }
}

/// `x̂0 = x_t − t·v`, with one `t` per item of a padded batch.
pub fn one_step_x0<T: Scalar>(x_t: &Tensor<T>, v: &Tensor<T>, t: &[f64], max_len: usize) -> Tensor<T> {
    let mut out = x_t.clone();
    for (r, (o, vv)) in out.data_mut().chunks_mut(x_t.cols()).zip(v.data().chunks(v.cols())).enumerate() {
        let tb = T::of(t[r / max_len]);
        for (a, &b) in o.iter_mut().zip(vv) {
            *a = *a - tb * b;
        }
    }
    out
}

/// `(1−t)·x + t·ε` with one `t` per item.
pub fn renoise<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>, t: &[f64], max_len: usize) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.cols();
    for (r, (o, e)) in out.data_mut().chunks_mut(c).zip(eps.data().chunks(c)).enumerate() {
        let tb = T::of(t[r / max_len]);
        for (a, &b) in o.iter_mut().zip(e) {
            *a = (T::one() - tb) * *a + tb * b;
        }
    }
    out
}

/// Guided velocity `v_u + s·(v_c − v_u)`.
pub fn cfg_velocity<T: Scalar>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, scale: f64) -> Tensor<T> {
    let s = T::of(scale);
    v_cond.zip_map(v_uncond, |c, u| u + s * (c - u))
}

/// One generation job.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub tokens: Vec<u32>,
    /// Conditioning duration in seconds.
    pub duration_seconds: f64,
    /// Frames generated (including any silence tail).
    pub len: usize,
    /// Frames returned.
    pub len_eff: usize,
    pub inpaint: Option<InpaintSpec>,
}

impl SampleRequest {
    /// Text-to-latent request of `d` seconds with a `d_silence` tail that is trimmed away.
    pub fn text(model: &impl VelocityModel, tokens: Vec<u32>, d: f64, d_silence: f64) -> Result<Self> {
        if d > model.max_seconds() {
            bail!(InvalidArgument, "requested {d} s exceeds model maximum of {} s", model.max_seconds());
        }
        let gl = latent::allocate_generation_length(d, d_silence, DEFAULT_SAMPLE_RATE, DEFAULT_DOWNSAMPLE_RATIO)?;
        if gl.len > model.max_frames() {
            bail!(InvalidArgument, "{} frames requested, model maximum is {}", gl.len, model.max_frames());
        }
        Ok(Self { tokens, duration_seconds: d, len: gl.len, len_eff: gl.len_eff, inpaint: None })
    }

    /// Inpainting over a reference; the output has the reference's length.
    pub fn inpaint(model: &impl VelocityModel, tokens: Vec<u32>, reference: LatentSequence, keep: Vec<bool>) -> Result<Self> {
        let spec = InpaintSpec::new(keep, reference)?;
        let len = spec.len();
        if len > model.max_frames() {
            bail!(InvalidArgument, "reference of {len} frames exceeds model maximum {}", model.max_frames());
        }
        if spec.reference.channels() != model.channels() {
            bail!(Shape, "reference has {} channels, model expects {}", spec.reference.channels(), model.channels());
        }
        let d = len as f64 / spec.reference.frame_rate_hz;
        Ok(Self { tokens, duration_seconds: d, len, len_eff: len, inpaint: Some(spec) })
    }

    fn bundle(&self, t: f64) -> ConditioningBundle {
        ConditioningBundle { t, duration_seconds: self.duration_seconds, text_tokens: self.tokens.clone(), inpaint: self.inpaint.clone(), cfg_drop: false }
    }
}

fn layout(reqs: &[SampleRequest]) -> Result<(Vec<usize>, usize)> {
    if reqs.is_empty() {
        bail!(Empty, "no sample requests");
    }
    let lens: Vec<usize> = reqs.iter().map(|r| r.len).collect();
    Ok((lens.clone(), lens.into_iter().max().unwrap_or(1)))
}

/// Zero padded rows in place.
fn zero_padding(x: &mut Tensor<f32>, valid: &[usize], max_len: usize) {
    for (b, &v) in valid.iter().enumerate() {
        for j in v..max_len {
            x.row_mut(b * max_len + j).iter_mut().for_each(|a| *a = 0.0);
        }
    }
}

/// Replace kept frames with the reference.
fn overwrite_kept(x: &mut Tensor<f32>, reqs: &[SampleRequest], max_len: usize) {
    for (b, r) in reqs.iter().enumerate() {
        if let Some(ip) = &r.inpaint {
            for (j, &k) in ip.keep.iter().enumerate() {
                if k {
                    x.row_mut(b * max_len + j).copy_from_slice(ip.reference.frame(j));
                }
            }
        }
    }
}

fn unpack(x: &Tensor<f32>, reqs: &[SampleRequest], max_len: usize, frame_rate: f64) -> Result<Vec<LatentSequence>> {
    reqs.iter()
        .enumerate()
        .map(|(b, r)| {
            let rows = x.slice_rows(b * max_len, r.len_eff);
            let mut s = LatentSequence::new(rows)?;
            s.frame_rate_hz = r.inpaint.as_ref().map_or(frame_rate, |ip| ip.reference.frame_rate_hz);
            Ok(s)
        })
        .collect()
}

/// Batched ping-pong sampling over `grid` (descending `t`): start from pure
/// noise, denoise with one step to `x̂0`, renoise at the next grid point,
/// and return the last `x̂0` without renoising.
pub fn ping_pong_batch(model: &impl VelocityModel, reqs: &[SampleRequest], grid: &[f64], rng: &mut Rng) -> Result<Vec<LatentSequence>> {
    let (valid, max_len) = layout(reqs)?;
    let steps = grid.len().saturating_sub(1).max(1);
    let c = model.channels();
    let rows = reqs.len() * max_len;
    let mut x: Tensor<f32> = rng::normal_tensor(rng, rows, c, 1.0);
    zero_padding(&mut x, &valid, max_len);
    let mut x0 = x.clone();
    for i in 0..steps {
        let t = grid[i];
        let cond: Vec<ConditioningBundle> = reqs.iter().map(|r| r.bundle(t)).collect();
        let v = model.velocity(&x, &valid, max_len, &cond)?;
        x0 = one_step_x0(&x, &v, &vec![t; reqs.len()], max_len);
        overwrite_kept(&mut x0, reqs, max_len);
        zero_padding(&mut x0, &valid, max_len);
        if i + 1 < steps {
            let eps: Tensor<f32> = rng::normal_tensor(rng, rows, c, 1.0);
            x = renoise(&x0, &eps, &vec![grid[i + 1]; reqs.len()], max_len);
            zero_padding(&mut x, &valid, max_len);
        }
    }
    unpack(&x0, reqs, max_len, latent::DEFAULT_FRAME_RATE_HZ)
}

/// Ping-pong text-to-latent generation with the inference schedule.
pub fn ping_pong_sample(model: &impl VelocityModel, tokens: Vec<u32>, d: f64, d_silence: f64, spec: &ScheduleSpec, seed: u64) -> Result<LatentSequence> {
    let req = SampleRequest::text(model, tokens, d, d_silence)?;
    let grid = schedules::inference_schedule(spec);
    Ok(ping_pong_batch(model, &[req], &grid, &mut rng::seeded(seed))?.remove(0))
}

/// Inpainting with the inference schedule; kept frames equal the reference exactly.
pub fn inpaint_sample(model: &impl VelocityModel, reference: &LatentSequence, keep: &[bool], tokens: Vec<u32>, spec: &ScheduleSpec, seed: u64) -> Result<LatentSequence> {
    let req = SampleRequest::inpaint(model, tokens, reference.clone(), keep.to_vec())?;
    let grid = schedules::inference_schedule(spec);
    Ok(ping_pong_batch(model, &[req], &grid, &mut rng::seeded(seed))?.remove(0))
}

/// ODE grid from `t = 1` to `t = 0`: `steps−1` interior points uniform in
/// logSNR over `[λ_lo, λ_hi]`.
pub fn ode_grid(steps: usize, lambda_lo: f64, lambda_hi: f64) -> Vec<f64> {
    let n = steps.max(1);
    let mut g = Vec::with_capacity(n + 1);
    g.push(1.0);
    let interior = n - 1;
    for i in 0..interior {
        let lambda = if interior == 1 { 0.5 * (lambda_lo + lambda_hi) } else { lambda_lo + i as f64 * (lambda_hi - lambda_lo) / (interior - 1) as f64 };
        g.push(schedules::t_from_logsnr(lambda));
    }
    g.push(0.0);
    g
}

/// Default interior range of [`ode_grid`].
pub const ODE_LAMBDA_RANGE: (f64, f64) = (-6.2, 6.2);

/// Guided velocity for a batch: conditional and unconditional halves in one pass.
pub fn guided_velocity(
    model: &impl VelocityModel,
    x: &Tensor<f32>,
    valid: &[usize],
    max_len: usize,
    cond: &[ConditioningBundle],
    scale: f64,
) -> Result<Tensor<f32>> {
    if scale == 1.0 {
        return model.velocity(x, valid, max_len, cond);
    }
    let b = cond.len();
    let c = x.cols();
    let mut xx = Tensor::zeros(2 * b * max_len, c);
    xx.data_mut()[..x.len()].copy_from_slice(x.data());
    xx.data_mut()[x.len()..].copy_from_slice(x.data());
    let mut vv = valid.to_vec();
    vv.extend_from_slice(valid);
    let mut cc = cond.to_vec();
    cc.extend(cond.iter().map(|k| ConditioningBundle { cfg_drop: true, ..k.clone() }));
    let v = model.velocity(&xx, &vv, max_len, &cc)?;
    let vc = v.slice_rows(0, b * max_len);
    let vu = v.slice_rows(b * max_len, b * max_len);
    Ok(cfg_velocity(&vc, &vu, scale))
}

/// Euler integration of the guided ODE along `grid`, starting at `x` for `t = grid[0]`.
/// Calls `visit(i, x_i)` for every state including the endpoint.
pub fn euler_trajectory(
    model: &impl VelocityModel,
    reqs: &[SampleRequest],
    x: Tensor<f32>,
    grid: &[f64],
    cfg_scale: f64,
    mut visit: impl FnMut(usize, &Tensor<f32>),
) -> Result<Tensor<f32>> {
    let (valid, max_len) = layout(reqs)?;
    let mut x = x;
    zero_padding(&mut x, &valid, max_len);
    visit(0, &x);
    for i in 0..grid.len().saturating_sub(1) {
        let cond: Vec<ConditioningBundle> = reqs.iter().map(|r| r.bundle(grid[i])).collect();
        let v = guided_velocity(model, &x, &valid, max_len, &cond, cfg_scale)?;
        let dt = (grid[i + 1] - grid[i]) as f32;
        for (a, &b) in x.data_mut().iter_mut().zip(v.data()) {
            *a += dt * b;
        }
        overwrite_kept_at(&mut x, reqs, max_len, grid[i + 1]);
        zero_padding(&mut x, &valid, max_len);
        visit(i + 1, &x);
    }
    Ok(x)
}

/// Kept frames follow the reference's own noising path; at `t = 0` they equal it.
fn overwrite_kept_at(x: &mut Tensor<f32>, reqs: &[SampleRequest], max_len: usize, t: f64) {
    if t == 0.0 {
        overwrite_kept(x, reqs, max_len);
    }
}

/// Multi-step guided Euler sampling from pure noise (the base-model baseline).
pub fn euler_cfg_batch(model: &impl VelocityModel, reqs: &[SampleRequest], steps: usize, cfg_scale: f64, rng: &mut Rng) -> Result<Vec<LatentSequence>> {
    let (_, max_len) = layout(reqs)?;
    let grid = ode_grid(steps, ODE_LAMBDA_RANGE.0, ODE_LAMBDA_RANGE.1);
    let x: Tensor<f32> = rng::normal_tensor(rng, reqs.len() * max_len, model.channels(), 1.0);
    let out = euler_trajectory(model, reqs, x, &grid, cfg_scale, |_, _| {})?;
    unpack(&out, reqs, max_len, latent::DEFAULT_FRAME_RATE_HZ)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::ModelConfig;

    /// Exact velocity field of a one-point dataset: `v = (x_t − x₀)/t`.
    struct PointModel {
        x0: Vec<f32>,
        max_frames: usize,
    }

    impl VelocityModel for PointModel {
        fn velocity(&self, x: &Tensor<f32>, _: &[usize], max_len: usize, cond: &[ConditioningBundle]) -> Result<Tensor<f32>> {
            let c = x.cols();
            Ok(Tensor::from_fn(x.rows(), c, |r, k| {
                let t = cond[r / max_len].t as f32;
                (x.get(r, k) - self.x0[k]) / t
            }))
        }
        fn max_frames(&self) -> usize {
            self.max_frames
        }
        fn max_seconds(&self) -> f64 {
            self.max_frames as f64 / latent::DEFAULT_FRAME_RATE_HZ
        }
        fn channels(&self) -> usize {
            self.x0.len()
        }
    }

    fn point() -> PointModel {
        PointModel { x0: vec![0.5, -1.25, 2.0], max_frames: 64 }
    }

    #[test]
    fn scalar_examples() {
        let x = Tensor::<f64>::scalar(2.0);
        let v = Tensor::<f64>::scalar(1.0);
        assert_eq!(one_step_x0(&x, &v, &[0.5], 1).get(0, 0), 1.5);
        assert_eq!(one_step_x0(&x, &v, &[0.0], 1).get(0, 0), 2.0);
        let c = Tensor::<f64>::scalar(1.0);
        let u = Tensor::<f64>::scalar(0.0);
        assert_eq!(cfg_velocity(&c, &u, 1.0).get(0, 0), 1.0);
        assert_eq!(cfg_velocity(&c, &u, 0.0).get(0, 0), 0.0);
        assert_eq!(cfg_velocity(&c, &u, 5.0).get(0, 0), 5.0);
    }

    #[test]
    fn perfect_model_recovers_point() {
        let m = point();
        for steps in [1, 2, 8] {
            let spec = ScheduleSpec { steps, ..Default::default() };
            let out = ping_pong_sample(&m, vec![], 2.0, 0.0, &spec, 3).unwrap();
            for j in 0..out.len() {
                for (a, b) in out.frame(j).iter().zip(&m.x0) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
        let out = euler_cfg_batch(&m, &[SampleRequest::text(&m, vec![], 1.0, 0.0).unwrap()], 10, 1.0, &mut rng::seeded(1)).unwrap();
        assert!((out[0].frame(0)[2] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn lengths_and_rejection() {
        let m = point();
        let spec = ScheduleSpec::default();
        let out = ping_pong_sample(&m, vec![], 1.0, 0.5, &spec, 1).unwrap();
        let gl = latent::allocate_generation_length(1.0, 0.5, DEFAULT_SAMPLE_RATE, DEFAULT_DOWNSAMPLE_RATIO).unwrap();
        assert_eq!(out.len(), gl.len_eff);
        assert!(ping_pong_sample(&m, vec![], 100.0, 0.0, &spec, 1).is_err());
    }

    fn tiny() -> Dit<f32> {
        let cfg = ModelConfig {
            latent_channels: 3,
            d: 16,
            depth: 2,
            heads: 2,
            memory_count: 2,
            rope_rotate_dims: 4,
            fourier_dim: 16,
            text_ctx_len: 3,
            text_dim: 8,
            vocab_size: 13,
            max_frames: 32,
            max_seconds: 3.0,
            ..Default::default()
        };
        Dit::new(cfg, &mut rng::seeded(4)).unwrap()
    }

    #[test]
    fn deterministic_and_single_step() {
        let m = tiny();
        let spec = ScheduleSpec::default();
        let a = ping_pong_sample(&m, vec![1, 9], 2.0, 0.0, &spec, 7).unwrap();
        let b = ping_pong_sample(&m, vec![1, 9], 2.0, 0.0, &spec, 7).unwrap();
        assert_eq!(a, b);
        // one step from t0 equals a manual denoise of the same noise
        let one = ScheduleSpec { steps: 1, ..spec };
        let got = ping_pong_sample(&m, vec![1], 1.0, 0.0, &one, 9).unwrap();
        let len = got.len();
        let eps: Tensor<f32> = rng::normal_tensor(&mut rng::seeded(9), len, 3, 1.0);
        let t0 = schedules::inference_schedule(&one)[0];
        let v = m.predict(&eps, &[len], len, &[ConditioningBundle::new(t0, 1.0, vec![1])]).unwrap();
        assert_eq!(got.frames(), &one_step_x0(&eps, &v, &[t0], len));
    }

    #[test]
    fn inpaint_contract() {
        let m = tiny();
        let spec = ScheduleSpec::default();
        let reference = LatentSequence::new(rng::normal_tensor(&mut rng::seeded(2), 12, 3, 1.0)).unwrap();
        let all = inpaint_sample(&m, &reference, &[true; 12], vec![2], &spec, 1).unwrap();
        assert_eq!(all.frames(), reference.frames());
        let causal: Vec<bool> = (0..12).map(|j| j < 5).collect();
        let out = inpaint_sample(&m, &reference, &causal, vec![2], &spec, 1).unwrap();
        for j in 0..5 {
            assert_eq!(out.frame(j), reference.frame(j));
        }
        assert_ne!(out.frame(8), reference.frame(8));
        assert!(inpaint_sample(&m, &reference, &[true; 3], vec![2], &spec, 1).is_err());
    }

    #[test]
    fn batched_matches_single_for_equal_lengths() {
        // padding-free batches: same noise stream layout gives the same draws
        let m = tiny();
        let grid = schedules::inference_schedule(&ScheduleSpec::default());
        let r = SampleRequest::text(&m, vec![3], 1.0, 0.0).unwrap();
        let a = ping_pong_batch(&m, &[r.clone()], &grid, &mut rng::seeded(5)).unwrap();
        let b = ping_pong_batch(&m, &[r.clone()], &grid, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), r.len_eff);
    }

    #[test]
    fn ode_grid_shape() {
        assert_eq!(ode_grid(1, -6.2, 6.2), vec![1.0, 0.0]);
        let g = ode_grid(15, -6.2, 6.2);
        assert_eq!(g.len(), 16);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert!((g[1] - schedules::t_from_logsnr(-6.2)).abs() < 1e-15);
        assert!((g[14] - schedules::t_from_logsnr(6.2)).abs() < 1e-15);
    }
}
