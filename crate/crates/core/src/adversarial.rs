//! Adversarial post-training of a one-step generator.
//!
//! The generator maps `x_t` to `x̂0 = x_t − t·v_θ`. Real and generated
//! samples are renoised to a shared fresh level `t_D` with shared noise and
//! scored per frame by a discriminator: the DiT trunk up to a tap layer
//! followed by a kernel-3 convolutional head. The discriminator minimises a
//! relativistic loss plus a prompt-contrastive loss; the generator minimises
//! the relativistic loss plus a squared geodesic distance between oracle
//! text and latent embeddings.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use crate::dit::{ConditioningBundle, Dit};
use crate::error::{bail, Result};
use crate::flow::{plan_flow_batch, sample_examples, BatchConfig, EmaConfig, EmaState, FlowBatchPlan};
use crate::graph::{Graph, RowRef, Var};
use crate::latent::Example;
use crate::optim::{Adam, AdamConfig};
use crate::oracle::OracleEmbedder;
use crate::params::{Bound, ParamId, ParamSet};
use crate::rng::{self, Rng};
use crate::schedules::{self, ScheduleSpec};
use crate::tensor::{Scalar, Tensor};

/// `x_t − t·v` with one `t` per item; `x_t` is returned unchanged at `t = 0`.
pub fn one_step_x0<T: Scalar>(x_t: &Tensor<T>, v: &Tensor<T>, t: &[f64], max_len: usize) -> Tensor<T> {
    crate::sampler::one_step_x0(x_t, v, t, max_len)
}

/// `((1−t_D)·x0 + t_D·ε′, (1−t_D)·x̂0 + t_D·ε′)` with one `t_D` per item.
pub fn renoise_pair<T: Scalar>(x0: &Tensor<T>, x_hat: &Tensor<T>, t_d: &[f64], eps: &Tensor<T>, max_len: usize) -> (Tensor<T>, Tensor<T>) {
    (crate::sampler::renoise(x0, eps, t_d, max_len), crate::sampler::renoise(x_hat, eps, t_d, max_len))
}

/// Per-frame weights `1/(B·valid_b)` on valid rows, 0 on padding.
pub fn frame_weights<T: Scalar>(valid_len: &[usize], max_len: usize) -> Rc<Vec<T>> {
    let b = valid_len.len() as f64;
    let mut w = vec![T::zero(); valid_len.len() * max_len];
    for (i, &v) in valid_len.iter().enumerate() {
        let x = T::of(1.0 / (b * v.max(1) as f64));
        w[i * max_len..i * max_len + v].iter_mut().for_each(|a| *a = x);
    }
    Rc::new(w)
}

/// `(L_G, L_D) = (mean softplus(D_r − D_f), mean softplus(D_f − D_r))`, means
/// over valid frames then over the batch.
pub fn relativistic_losses<T: Scalar>(g: &mut Graph<'_, T>, real: Var, fake: Var, valid_len: &[usize], max_len: usize) -> (Var, Var) {
    let w = frame_weights::<T>(valid_len, max_len);
    let d = g.sub(real, fake);
    let sg = g.softplus(d);
    let nd = g.scale(d, -T::one());
    let sd = g.softplus(nd);
    (g.weighted_sum(sg, w.clone()), g.weighted_sum(sd, w))
}

/// `mean softplus(−(D(x|c) − D(x|c_shifted)))`.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<'_, T>, correct: Var, shifted: Var, valid_len: &[usize], max_len: usize) -> Var {
    relativistic_losses(g, correct, shifted, valid_len, max_len).1
}

/// Mean of `2·asin²(‖ê_t − ê_a‖/2)` after normalizing both rows.
pub fn geodesic_clap_loss<T: Scalar>(g: &mut Graph<'_, T>, e_text: Var, e_audio: Var) -> Var {
    let a = g.l2_normalize_rows(e_text);
    let b = g.l2_normalize_rows(e_audio);
    let d = g.geodesic(a, b);
    g.mean_all(d)
}

/// Offset `k ∈ {1, …, B−1}` for the cyclic prompt shift; `None` when `B < 2`.
pub fn draw_shift(rng: &mut Rng, batch: usize) -> Option<usize> {
    (batch >= 2).then(|| rng::int_in(rng, 1, batch - 1))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DiscConfig {
    /// Block whose output feeds the head; `None` means `ceil(0.58·depth) − 1`.
    pub tap_layer: Option<usize>,
    pub hidden: usize,
    pub groups: usize,
    pub res_blocks: usize,
    pub slope: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { tap_layer: None, hidden: 32, groups: 8, res_blocks: 4, slope: 0.2 }
    }
}

impl DiscConfig {
    pub fn tap(&self, depth: usize) -> usize {
        self.tap_layer.unwrap_or_else(|| (libm::ceil(0.58 * depth as f64) as usize).clamp(1, depth) - 1)
    }
}

#[derive(Clone, Debug)]
struct HeadIds {
    in_w: ParamId,
    in_b: ParamId,
    blocks: Vec<[ParamId; 8]>,
    out1_w: ParamId,
    out1_b: ParamId,
    out2_w: ParamId,
    out2_b: ParamId,
}

/// DiT trunk plus convolutional scoring head.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub backbone: Dit<T>,
    pub head: ParamSet<T>,
    pub config: DiscConfig,
    ids: HeadIds,
}

fn head_layout(d: usize, cfg: &DiscConfig, mut rng: Option<&mut Rng>) -> (ParamSet<f64>, HeadIds) {
    let mut set = ParamSet::new();
    let h = cfg.hidden;
    let mut conv = |set: &mut ParamSet<f64>, name: &str, cin: usize, cout: usize, gain: f64| {
        let std = gain / libm::sqrt(3.0 * cin as f64);
        let w = match rng.as_deref_mut() {
            Some(r) => rng::normal_tensor(r, 3 * cin, cout, std),
            None => Tensor::zeros(3 * cin, cout),
        };
        (set.insert(&format!("{name}.w"), w), set.insert(&format!("{name}.b"), Tensor::zeros(1, cout)))
    };
    let (in_w, in_b) = conv(&mut set, "head.in", d, h, 1.0);
    let mut blocks = Vec::new();
    for k in 0..cfg.res_blocks {
        let (c1w, c1b) = conv(&mut set, &format!("head.blocks.{k}.conv1"), h, h, 1.0);
        let g1 = set.insert(&format!("head.blocks.{k}.gn1.gamma"), Tensor::full(1, h, 1.0));
        let b1 = set.insert(&format!("head.blocks.{k}.gn1.beta"), Tensor::zeros(1, h));
        let (c2w, c2b) = conv(&mut set, &format!("head.blocks.{k}.conv2"), h, h, 0.5);
        let g2 = set.insert(&format!("head.blocks.{k}.gn2.gamma"), Tensor::full(1, h, 1.0));
        let b2 = set.insert(&format!("head.blocks.{k}.gn2.beta"), Tensor::zeros(1, h));
        blocks.push([c1w, c1b, g1, b1, c2w, c2b, g2, b2]);
    }
    let (out1_w, out1_b) = conv(&mut set, "head.out1", h, h, 1.0);
    let (out2_w, out2_b) = conv(&mut set, "head.out2", h, 1, 0.1);
    (set, HeadIds { in_w, in_b, blocks, out1_w, out1_b, out2_w, out2_b })
}

impl<T: Scalar> Discriminator<T> {
    /// Trunk copied from `backbone`, freshly initialized head.
    pub fn new(backbone: Dit<T>, config: DiscConfig, rng: &mut Rng) -> Result<Self> {
        Self::check(&backbone, &config)?;
        let (set, ids) = head_layout(backbone.config.d, &config, Some(rng));
        Ok(Self { backbone, head: set.cast(), config, ids })
    }

    /// Adopts stored head weights.
    pub fn from_parts(backbone: Dit<T>, config: DiscConfig, head: &ParamSet<T>) -> Result<Self> {
        Self::check(&backbone, &config)?;
        let (template, ids) = head_layout(backbone.config.d, &config, None);
        let mut set = template.cast::<T>();
        for (name, t) in template.iter() {
            let Some(src) = head.by_name(name) else { bail!(MissingParam, "{name}") };
            if src.shape() != t.shape() {
                bail!(Shape, "{name}: stored {:?}, expected {:?}", src.shape(), t.shape());
            }
            set.assign(name, src.clone())?;
        }
        Ok(Self { backbone, head: set, config, ids })
    }

    fn check(backbone: &Dit<T>, config: &DiscConfig) -> Result<()> {
        let tap = config.tap(backbone.config.depth);
        if tap >= backbone.config.depth {
            bail!(InvalidArgument, "tap layer {tap} must be below depth {}", backbone.config.depth);
        }
        if config.hidden == 0 || config.groups == 0 || config.hidden % config.groups != 0 {
            bail!(InvalidArgument, "head width {} must be a positive multiple of {} groups", config.hidden, config.groups);
        }
        Ok(())
    }

    pub fn tap(&self) -> usize {
        self.config.tap(self.backbone.config.depth)
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>, trainable: bool) -> (Bound, Bound) {
        (self.backbone.bind(g, trainable), self.head.bind(g, trainable))
    }

    /// Per-frame scores `(B·L_max) × 1`; padded rows are exactly zero.
    #[allow(clippy::too_many_arguments)]
    pub fn scores(&self, g: &mut Graph<'_, T>, pb: &Bound, ph: &Bound, x: Var, valid_len: &[usize], max_len: usize, cond: &[ConditioningBundle]) -> Result<Var> {
        let h = self.backbone.features(g, pb, x, valid_len, max_len, cond, self.tap())?;
        let mask: Rc<Vec<RowRef>> = Rc::new(
            (0..valid_len.len() * max_len)
                .map(|r| if r % max_len < valid_len[r / max_len] { RowRef::new(0, r) } else { RowRef::ZERO })
                .collect(),
        );
        let valid = Rc::new(valid_len.to_vec());
        let slope = T::of(self.config.slope);
        let eps = T::of(1e-5);
        let ids = &self.ids;
        let conv = |g: &mut Graph<'_, T>, x: Var, w: ParamId, b: ParamId| {
            let x = g.gather(&[x], mask.clone());
            let cols = g.im2col3(x, max_len);
            let y = g.matmul(cols, ph.var(w));
            let y = g.add_row(y, ph.var(b));
            g.gather(&[y], mask.clone())
        };
        let mut h = conv(g, h, ids.in_w, ids.in_b);
        for blk in &ids.blocks {
            let y = conv(g, h, blk[0], blk[1]);
            let y = g.group_norm(y, ph.var(blk[2]), ph.var(blk[3]), self.config.groups, max_len, valid.clone(), eps);
            let y = g.leaky_relu(y, slope);
            let y = conv(g, y, blk[4], blk[5]);
            let y = g.group_norm(y, ph.var(blk[6]), ph.var(blk[7]), self.config.groups, max_len, valid.clone(), eps);
            let y = g.leaky_relu(y, slope);
            h = g.add(h, y);
        }
        let h = conv(g, h, ids.out1_w, ids.out1_b);
        let h = g.leaky_relu(h, slope);
        Ok(conv(g, h, ids.out2_w, ids.out2_b))
    }

    /// Gradient-free scores.
    pub fn score_values(&self, x: &Tensor<T>, valid_len: &[usize], max_len: usize, cond: &[ConditioningBundle]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (pb, ph) = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let s = self.scores(&mut g, &pb, &ph, xv, valid_len, max_len, cond)?;
        Ok(g.value(s).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PostTrainConfig {
    pub batch: BatchConfig,
    pub clap_weight: f64,
    pub gen_adam: AdamConfig,
    pub disc_adam: AdamConfig,
    pub ema: EmaConfig,
    pub disc: DiscConfig,
}

impl Default for PostTrainConfig {
    fn default() -> Self {
        Self {
            batch: BatchConfig { cfg_dropout: 0.0, use_ot: false, ..BatchConfig::default() },
            clap_weight: 1.0,
            gen_adam: AdamConfig { lr: 1e-4, ..AdamConfig::default() },
            disc_adam: AdamConfig { lr: 1e-4, ..AdamConfig::default() },
            ema: EmaConfig::default(),
            disc: DiscConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PostTrainMetrics {
    pub step: u64,
    pub loss_r_g: f64,
    pub loss_clap_g: f64,
    pub loss_r_d: f64,
    pub loss_c_d: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
    pub t: Vec<f64>,
    pub t_d: Vec<f64>,
    pub skipped: bool,
}

/// Generator, discriminator and their optimizers.
pub struct PostTrainer {
    pub gen: Dit<f32>,
    pub disc: Discriminator<f32>,
    pub ema: EmaState<f32>,
    pub gen_opt: Adam<f32>,
    pub disc_opt_trunk: Adam<f32>,
    pub disc_opt_head: Adam<f32>,
    pub config: PostTrainConfig,
    pub spec: ScheduleSpec,
    pub silence: Vec<f32>,
    pub embedder: OracleEmbedder,
    pub step: u64,
}

/// Everything drawn for one post-training step.
#[derive(Clone, Debug)]
pub struct AdvBatch {
    pub plan: FlowBatchPlan,
    pub t_d: Vec<f64>,
    pub eps_d: Tensor<f32>,
    pub shift: Option<usize>,
}

fn gather_rows<T: Scalar>(g: &mut Graph<'_, T>, x: Var, start: usize, n: usize) -> Var {
    g.gather(&[x], Rc::new((start..start + n).map(|r| RowRef::new(0, r)).collect()))
}

fn rows_const<T: Scalar>(t: &[f64], rows: usize, cols: usize, max_len: usize, f: impl Fn(f64) -> f64) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |r, _| T::of(f(t[r / max_len])))
}

impl PostTrainer {
    pub fn new(gen: Dit<f32>, disc: Discriminator<f32>, config: PostTrainConfig, spec: ScheduleSpec, silence: Vec<f32>, embedder: OracleEmbedder) -> Result<Self> {
        spec.validate()?;
        if embedder.channels != gen.config.latent_channels {
            bail!(Shape, "embedder expects {} channels, generator has {}", embedder.channels, gen.config.latent_channels);
        }
        if silence.len() != gen.config.latent_channels {
            bail!(Shape, "silence latent width {} does not match the generator", silence.len());
        }
        if disc.backbone.config != gen.config {
            bail!(InvalidArgument, "discriminator trunk and generator configurations differ");
        }
        let ema = EmaState::new(&gen.params, config.ema);
        let gen_opt = Adam::new(config.gen_adam, &gen.params);
        let disc_opt_trunk = Adam::new(config.disc_adam, &disc.backbone.params);
        let disc_opt_head = Adam::new(config.disc_adam, &disc.head);
        Ok(Self { gen, disc, ema, gen_opt, disc_opt_trunk, disc_opt_head, config, spec, silence, embedder, step: 0 })
    }

    pub fn draw(&self, data: &[Example], rng: &mut Rng) -> Result<AdvBatch> {
        if data.is_empty() {
            bail!(Empty, "empty dataset");
        }
        let ex = sample_examples(data, rng, self.config.batch.batch_size);
        let plan = plan_flow_batch(&ex, rng, &self.config.batch, &self.spec, &self.silence, self.gen.config.max_frames)?;
        let t_d = (0..plan.t.len()).map(|_| schedules::sample_timestep_disc(rng)).collect();
        let eps_d = rng::normal_tensor(rng, plan.x0.data.rows(), plan.x0.channels(), 1.0);
        let shift = draw_shift(rng, plan.t.len());
        Ok(AdvBatch { plan, t_d, eps_d, shift })
    }

    pub fn train_step(&mut self, data: &[Example], rng: &mut Rng) -> Result<PostTrainMetrics> {
        let batch = self.draw(data, rng)?;
        self.step_on(&batch)
    }

    /// One discriminator update followed by one generator update.
    pub fn step_on(&mut self, batch: &AdvBatch) -> Result<PostTrainMetrics> {
        let plan = &batch.plan;
        let (b, l, c) = (plan.x0.batch_size(), plan.x0.max_len, plan.x0.channels());
        let valid = &plan.x0.valid_len;
        let rows = b * l;
        let x_t = plan.noised();
        let keep = plan.keep_flat();
        let x0 = &plan.x0.data;
        let mut m = PostTrainMetrics { step: self.step, t: plan.t.clone(), t_d: batch.t_d.clone(), ..Default::default() };
        let disc_cond: Vec<ConditioningBundle> = plan.cond.iter().zip(&batch.t_d).map(|(k, &td)| k.with_t(td)).collect();
        // kept frames come from the reference, generated frames from the one-step estimate
        let gen_mask = Tensor::from_fn(rows, c, |r, _| if keep[r] || r % l >= valid[r / l] { 0.0f32 } else { 1.0 });
        let kept_ref = Tensor::from_fn(rows, c, |r, k| if keep[r] { x0.get(r, k) } else { 0.0 });

        let (gen, disc, gen_opt) = (&self.gen, &mut self.disc, &mut self.gen_opt);
        let mut g = Graph::new();
        let pg = gen.bind(&mut g, true);
        let xv = g.constant(x_t.clone());
        let v = gen.forward(&mut g, &pg, xv, valid, l, &plan.cond)?;
        let tr = g.constant(rows_const(&plan.t, rows, c, l, |t| t));
        let tv = g.mul(tr, v);
        let pred = g.sub(xv, tv);
        let gm = g.constant(gen_mask);
        let pred = g.mul(pred, gm);
        let kr = g.constant(kept_ref);
        let x_hat = g.add(pred, kr);
        let x_hat_val = g.value(x_hat).clone();

        // discriminator update on [real | fake | real with shifted prompts]
        let (x_real, x_fake) = renoise_pair(x0, &x_hat_val, &batch.t_d, &batch.eps_d, l);
        {
            let nb = if batch.shift.is_some() { 3 } else { 2 };
            let mut xx = Tensor::zeros(nb * rows, c);
            xx.data_mut()[..rows * c].copy_from_slice(x_real.data());
            xx.data_mut()[rows * c..2 * rows * c].copy_from_slice(x_fake.data());
            let mut vv = valid.clone();
            vv.extend_from_slice(valid);
            let mut cc = disc_cond.clone();
            cc.extend(disc_cond.iter().cloned());
            if let Some(k) = batch.shift {
                xx.data_mut()[2 * rows * c..].copy_from_slice(x_real.data());
                vv.extend_from_slice(valid);
                cc.extend((0..b).map(|i| ConditioningBundle { text_tokens: disc_cond[(i + k) % b].text_tokens.clone(), ..disc_cond[i].clone() }));
            }
            let mut gd = Graph::new();
            let (pb, ph) = disc.bind(&mut gd, true);
            let xd = gd.constant(xx);
            let s = disc.scores(&mut gd, &pb, &ph, xd, &vv, l, &cc)?;
            let sr = gather_rows(&mut gd, s, 0, rows);
            let sf = gather_rows(&mut gd, s, rows, rows);
            let (_, lrd) = relativistic_losses(&mut gd, sr, sf, valid, l);
            let total = match batch.shift {
                Some(_) => {
                    let ss = gather_rows(&mut gd, s, 2 * rows, rows);
                    let lc = contrastive_loss(&mut gd, sr, ss, valid, l);
                    m.loss_c_d = gd.value(lc).get(0, 0) as f64;
                    gd.add(lrd, lc)
                }
                None => lrd,
            };
            m.loss_r_d = gd.value(lrd).get(0, 0) as f64;
            let mut grads = gd.backward(total);
            let gt = pb.grads(&disc.backbone.params, &mut grads);
            let gh = ph.grads(&disc.head, &mut grads);
            let finite = gd.value(total).get(0, 0).is_finite() && gt.iter().chain(&gh).all(|t| t.all_finite());
            drop(gd);
            if !finite {
                m.skipped = true;
                return Ok(m);
            }
            let mut all = gt.clone();
            all.extend(gh.iter().cloned());
            m.grad_norm_d = crate::params::grad_norm(&all);
            self.disc_opt_trunk.update(&mut disc.backbone.params, &gt);
            self.disc_opt_head.update(&mut disc.head, &gh);
        }

        // generator update through the refreshed, frozen discriminator
        let (pb, ph) = disc.bind(&mut g, false);
        let one_minus = g.constant(rows_const(&batch.t_d, rows, c, l, |t| 1.0 - t));
        let noise = g.constant(Tensor::from_fn(rows, c, |r, k| batch.eps_d.get(r, k) * batch.t_d[r / l] as f32));
        let scaled = g.mul(x_hat, one_minus);
        let fake = g.add(scaled, noise);
        let real = g.constant(x_real);
        let both = g.gather(&[real, fake], Rc::new((0..2 * rows).map(|r| RowRef::new(r / rows, r % rows)).collect()));
        let mut vv = valid.clone();
        vv.extend_from_slice(valid);
        let mut cc = disc_cond.clone();
        cc.extend(disc_cond.iter().cloned());
        let s = disc.scores(&mut g, &pb, &ph, both, &vv, l, &cc)?;
        let sr = gather_rows(&mut g, s, 0, rows);
        let sf = gather_rows(&mut g, s, rows, rows);
        let (lrg, _) = relativistic_losses(&mut g, sr, sf, valid, l);
        let e_audio = self.embedder.embed_graph(&mut g, x_hat, &plan.content_len, l);
        let texts: Vec<Vec<u32>> = plan.cond.iter().map(|k| k.text_tokens.clone()).collect();
        let e_text = g.constant(self.embedder.embed_texts(&texts).cast());
        let lclap = geodesic_clap_loss(&mut g, e_text, e_audio);
        let wc = g.scale(lclap, self.config.clap_weight as f32);
        let total = g.add(lrg, wc);
        m.loss_r_g = g.value(lrg).get(0, 0) as f64;
        m.loss_clap_g = g.value(lclap).get(0, 0) as f64;
        let mut grads = g.backward(total);
        let gg = pg.grads(&gen.params, &mut grads);
        let finite = g.value(total).get(0, 0).is_finite() && gg.iter().all(|t| t.all_finite());
        drop(g);
        self.step += 1;
        if !finite {
            m.skipped = true;
            return Ok(m);
        }
        m.grad_norm_g = gen_opt.update(&mut self.gen.params, &gg);
        self.ema.update(&self.gen.params);
        Ok(m)
    }

    pub fn ema_generator(&self) -> Dit<f32> {
        let mut m = self.gen.clone();
        m.params.copy_from(&self.ema.shadow).expect("EMA mirrors the model layout");
        m
    }
}
