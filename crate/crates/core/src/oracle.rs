//! Synthetic prompt grammar and a training-free text/latent embedder.
//!
//! Every prompt names a tone class (which channels carry energy), a rate
//! class (temporal oscillation frequency) and an envelope class (decaying or
//! rising). The latent embedder measures exactly those properties with fixed
//! spectral statistics; the text embedder maps tokens to the statistics of a
//! noise-free rendering of the same prompt. Both land on the unit sphere, so
//! cosine similarity acts as an alignment score and the squared geodesic
//! distance as a differentiable alignment loss.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{bail, Result};
use crate::graph::{Graph, RowRef, Var};
use crate::latent::{build_batch, LatentSequence};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

/// Token layout: tones first, then rates, then envelopes.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Grammar {
    pub tones: usize,
    /// Angular frequency per rate class, radians per frame.
    pub rates: Vec<f64>,
    pub envelopes: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    /// Width of the tone bump across channels, in channels.
    pub tone_width: f64,
    pub envelope_decay: f64,
}

impl Default for Grammar {
    fn default() -> Self {
        Self {
            tones: 8,
            rates: vec![0.35, 0.9, 1.8],
            envelopes: 2,
            amplitude: 3.0,
            noise_std: 0.05,
            tone_width: 0.6,
            envelope_decay: 2.5,
        }
    }
}

/// A fully specified prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Prompt {
    pub tone: usize,
    pub rate: usize,
    pub envelope: usize,
}

impl Grammar {
    pub fn vocab_size(&self) -> usize {
        self.tones + self.rates.len() + self.envelopes
    }

    pub fn num_prompts(&self) -> usize {
        self.tones * self.rates.len() * self.envelopes
    }

    pub fn validate(&self) -> Result<()> {
        if self.tones == 0 || self.rates.is_empty() || self.envelopes == 0 {
            bail!(InvalidArgument, "grammar needs at least one class of each kind");
        }
        if self.envelopes > 2 {
            bail!(InvalidArgument, "only decaying and rising envelopes exist");
        }
        Ok(())
    }

    pub fn prompt(&self, index: usize) -> Prompt {
        let e = index % self.envelopes;
        let r = (index / self.envelopes) % self.rates.len();
        let k = index / (self.envelopes * self.rates.len());
        Prompt { tone: k % self.tones, rate: r, envelope: e }
    }

    pub fn tokens(&self, p: Prompt) -> Vec<u32> {
        vec![p.tone as u32, (self.tones + p.rate) as u32, (self.tones + self.rates.len() + p.envelope) as u32]
    }

    /// Reads whichever components are present; later tokens win.
    pub fn parse(&self, tokens: &[u32]) -> (Option<usize>, Option<usize>, Option<usize>) {
        let (mut t, mut r, mut e) = (None, None, None);
        let nr = self.rates.len();
        for &tok in tokens {
            let tok = tok as usize;
            if tok < self.tones {
                t = Some(tok);
            } else if tok < self.tones + nr {
                r = Some(tok - self.tones);
            } else if tok < self.tones + nr + self.envelopes {
                e = Some(tok - self.tones - nr);
            }
        }
        (t, r, e)
    }

    /// Unit-norm channel profile of a tone class.
    pub fn tone_profile(&self, tone: usize, channels: usize) -> Vec<f64> {
        let centre = if self.tones > 1 { tone as f64 * (channels as f64 - 1.0) / (self.tones as f64 - 1.0) } else { 0.0 };
        let w = self.tone_width.max(1e-3);
        let p: Vec<f64> = (0..channels).map(|c| libm::exp(-0.5 * ((c as f64 - centre) / w).powi(2))).collect();
        let n = libm::sqrt(p.iter().map(|x| x * x).sum::<f64>());
        p.into_iter().map(|x| x / n).collect()
    }

    pub fn envelope(&self, env: usize, u: f64) -> f64 {
        let s = if env == 0 { u } else { 1.0 - u };
        libm::exp(-self.envelope_decay * s)
    }

    /// Noise-free pattern for a prompt: `A·env(j/L)·p_k[c]·cos(ω_r·j + φ)`.
    pub fn render_clean(&self, p: Prompt, len: usize, channels: usize, phase: f64) -> Tensor<f32> {
        let prof = self.tone_profile(p.tone, channels);
        let w = self.rates[p.rate];
        Tensor::from_fn(len, channels, |j, c| {
            let u = j as f64 / len.max(1) as f64;
            (self.amplitude * self.envelope(p.envelope, u) * prof[c] * libm::cos(w * j as f64 + phase)) as f32
        })
    }

    /// Random phase plus Gaussian noise.
    pub fn render(&self, p: Prompt, len: usize, channels: usize, rng: &mut Rng) -> Result<LatentSequence> {
        let phase = 2.0 * PI * rng::uniform(rng);
        let mut x = self.render_clean(p, len, channels, phase);
        let s = self.noise_std as f32;
        for v in x.data_mut() {
            *v += s * rng::normal(rng) as f32;
        }
        LatentSequence::new(x)
    }
}

/// Number of fixed statistics besides the per-channel shares.
const EXTRA: usize = 8;
/// Length of the canonical rendering used on the text side.
const CANON_LEN: usize = 64;

/// Fixed, deterministic text and latent encoders into a shared sphere.
#[derive(Clone, Debug)]
pub struct OracleEmbedder {
    pub grammar: Grammar,
    pub channels: usize,
    centre: Vec<f64>,
    weights: Vec<f64>,
    /// Raw statistics of each canonical prompt rendering.
    canon: Vec<Vec<f64>>,
}

impl OracleEmbedder {
    pub fn new(grammar: Grammar, channels: usize) -> Result<Self> {
        grammar.validate()?;
        if channels == 0 {
            bail!(InvalidArgument, "embedder needs at least one channel");
        }
        let mut me = Self { grammar, channels, centre: vec![0.0; channels + EXTRA], weights: vec![1.0; channels + EXTRA], canon: Vec::new() };
        let mut w = vec![1.0; channels + EXTRA];
        // level, roughness, DC carry less prompt information
        w[channels + 5] = 0.5;
        w[channels + 6] = 0.25;
        w[channels + 7] = 0.5;
        let n = me.grammar.num_prompts();
        let seqs: Vec<LatentSequence> = (0..n)
            .map(|i| LatentSequence::new(me.grammar.render_clean(me.grammar.prompt(i), CANON_LEN, channels, 0.0)))
            .collect::<Result<_>>()?;
        let raw = me.raw_statistics(&seqs)?;
        let canon: Vec<Vec<f64>> = (0..n).map(|i| raw.row(i).to_vec()).collect();
        let mut centre = vec![0.0; channels + EXTRA];
        for v in &canon {
            for (c, x) in centre.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        me.centre = centre;
        me.weights = w;
        me.canon = canon;
        Ok(me)
    }

    pub fn dim(&self) -> usize {
        self.channels + EXTRA
    }

    /// Unnormalized statistics, one row per sequence.
    pub fn raw_statistics(&self, seqs: &[LatentSequence]) -> Result<Tensor<f64>> {
        let b = build_batch(seqs)?;
        let x: Tensor<f64> = b.data.cast();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let v = self.statistics_graph(&mut g, xv, &b.valid_len, b.max_len);
        Ok(g.value(v).clone())
    }

    /// Per-channel energy shares, three rate powers, two envelope shares,
    /// RMS level, roughness and DC over the valid frames of each item.
    pub fn statistics_graph<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, valid_len: &[usize], max_len: usize) -> Var {
        let c = self.channels;
        let b = valid_len.len();
        let n_rows = b * max_len;
        assert_eq!(g.shape(x), (n_rows, c), "embedder input shape");
        let sel = |f: &dyn Fn(usize, usize) -> f64| {
            Tensor::from_fn(b, n_rows, |i, r| {
                let (bi, j) = (r / max_len, r % max_len);
                if bi == i && j < valid_len[i] {
                    T::of(f(j, valid_len[i]))
                } else {
                    T::zero()
                }
            })
        };
        let sum_m = g.constant(sel(&|_, _| 1.0));
        let xx = g.square(x);
        let e = g.matmul(sum_m, xx);
        let et = g.row_sum(e);
        let floor = g.constant(Tensor::from_fn(b, 1, |i, _| T::of(1e-6 * (valid_len[i] * c) as f64)));
        let et = g.add(et, floor);
        let ones_c = g.constant(Tensor::full(1, c, T::one()));
        let et_c = g.matmul(et, ones_c);
        let tone = g.div(e, et_c);

        let mut powers = Vec::new();
        for &w in &self.grammar.rates {
            let cm = g.constant(sel(&|j, _| libm::cos(w * j as f64)));
            let sm = g.constant(sel(&|j, _| libm::sin(w * j as f64)));
            let cr = g.matmul(cm, x);
            let sr = g.matmul(sm, x);
            let c2 = g.square(cr);
            let s2 = g.square(sr);
            let p = g.add(c2, s2);
            powers.push(g.row_sum(p));
        }
        let nr = powers.len();
        let p = g.concat_cols(&powers);
        let half_n = g.constant(Tensor::from_fn(b, 1, |i, _| T::of(0.5 * valid_len[i] as f64)));
        let den = g.mul(et, half_n);
        let ones_r = g.constant(Tensor::full(1, nr, T::one()));
        let den_r = g.matmul(den, ones_r);
        let rate = g.div(p, den_r);

        let first = g.constant(sel(&|j, n| if 3 * j < n { 1.0 } else { 0.0 }));
        let last = g.constant(sel(&|j, n| if 3 * j >= 2 * n { 1.0 } else { 0.0 }));
        let ef = g.matmul(first, xx);
        let ef = g.row_sum(ef);
        let el = g.matmul(last, xx);
        let el = g.row_sum(el);
        let env = g.concat_cols(&[ef, el]);
        let ones_2 = g.constant(Tensor::full(1, 2, T::one()));
        let et_2 = g.matmul(et, ones_2);
        let env = g.div(env, et_2);

        let nc = g.constant(Tensor::from_fn(b, 1, |i, _| T::of((valid_len[i] * c) as f64)));
        let ms = g.div(et, nc);
        let level = g.sqrt(ms);

        let next: Vec<RowRef> = (0..n_rows)
            .map(|r| if r % max_len + 1 < valid_len[r / max_len] { RowRef::new(0, r + 1) } else { RowRef::ZERO })
            .collect();
        let here: Vec<RowRef> = (0..n_rows)
            .map(|r| if r % max_len + 1 < valid_len[r / max_len] { RowRef::new(0, r) } else { RowRef::ZERO })
            .collect();
        let xn = g.gather(&[x], Rc::new(next));
        let xh = g.gather(&[x], Rc::new(here));
        let d = g.sub(xn, xh);
        let d2 = g.square(d);
        let rough = g.matmul(sum_m, d2);
        let rough = g.row_sum(rough);
        let rough = g.div(rough, et);

        let sx = g.matmul(sum_m, x);
        let sx = g.row_sum(sx);
        let dc = g.div(sx, nc);
        g.concat_cols(&[tone, rate, env, level, rough, dc])
    }

    /// Unit-norm latent embeddings, one row per batch item; differentiable.
    pub fn embed_graph<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, valid_len: &[usize], max_len: usize) -> Var {
        let s = self.statistics_graph(g, x, valid_len, max_len);
        let neg = g.constant(Tensor::from_fn(1, self.dim(), |_, j| T::of(-self.centre[j])));
        let w = g.constant(Tensor::from_fn(1, self.dim(), |_, j| T::of(self.weights[j])));
        let s = g.add_row(s, neg);
        let s = g.mul_row(s, w);
        g.l2_normalize_rows(s)
    }

    fn finish(&self, raw: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = raw.iter().zip(&self.centre).zip(&self.weights).map(|((x, c), w)| (x - c) * w).collect();
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
        v.into_iter().map(|x| x / n).collect()
    }

    pub fn embed_latents(&self, seqs: &[LatentSequence]) -> Result<Vec<Vec<f64>>> {
        let raw = self.raw_statistics(seqs)?;
        Ok((0..seqs.len()).map(|i| self.finish(raw.row(i))).collect())
    }

    pub fn embed_latent(&self, seq: &LatentSequence) -> Result<Vec<f64>> {
        Ok(self.embed_latents(core::slice::from_ref(seq))?.remove(0))
    }

    /// Text embedding: canonical statistics of every prompt consistent with
    /// the tokens, averaged, then centred and normalized.
    pub fn embed_text(&self, tokens: &[u32]) -> Vec<f64> {
        let (t, r, e) = self.grammar.parse(tokens);
        let mut acc = vec![0.0; self.dim()];
        let mut n = 0usize;
        for (i, raw) in self.canon.iter().enumerate() {
            let p = self.grammar.prompt(i);
            if t.is_some_and(|t| t != p.tone) || r.is_some_and(|r| r != p.rate) || e.is_some_and(|e| e != p.envelope) {
                continue;
            }
            for (a, x) in acc.iter_mut().zip(raw) {
                *a += x;
            }
            n += 1;
        }
        for a in &mut acc {
            *a /= n.max(1) as f64;
        }
        self.finish(&acc)
    }

    pub fn embed_texts(&self, prompts: &[Vec<u32>]) -> Tensor<f64> {
        let rows: Vec<f64> = prompts.iter().flat_map(|p| self.embed_text(p)).collect();
        Tensor::from_vec(prompts.len(), self.dim(), rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::alignment_score;

    fn emb() -> OracleEmbedder {
        OracleEmbedder::new(Grammar::default(), 8).unwrap()
    }

    #[test]
    fn dims_and_norms() {
        let o = emb();
        assert_eq!(o.dim(), 16);
        assert_eq!(o.grammar.vocab_size(), 13);
        assert_eq!(o.grammar.num_prompts(), 48);
        let mut r = rng::seeded(1);
        let s = o.grammar.render(o.grammar.prompt(5), 30, 8, &mut r).unwrap();
        let e = o.embed_latent(&s).unwrap();
        assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let t = o.embed_text(&o.grammar.tokens(o.grammar.prompt(5)));
        assert!((t.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prompt_round_trip() {
        let g = Grammar::default();
        for i in 0..g.num_prompts() {
            let p = g.prompt(i);
            let (t, r, e) = g.parse(&g.tokens(p));
            assert_eq!((t, r, e), (Some(p.tone), Some(p.rate), Some(p.envelope)));
        }
        let all: std::collections::HashSet<_> = (0..48).map(|i| g.prompt(i)).collect();
        assert_eq!(all.len(), 48);
    }

    #[test]
    fn matched_beats_mismatched() {
        let o = emb();
        let mut r = rng::seeded(2);
        let (mut m, mut mm) = (0.0, 0.0);
        let n = 1000;
        let mut correct = 0;
        for _ in 0..n {
            let i = rng::int_in(&mut r, 0, 47);
            let j = (i + rng::int_in(&mut r, 1, 47)) % 48;
            let len = rng::int_in(&mut r, 16, 64);
            let s = o.grammar.render(o.grammar.prompt(i), len, 8, &mut r).unwrap();
            let e = o.embed_latent(&s).unwrap();
            let a = alignment_score(&o.embed_text(&o.grammar.tokens(o.grammar.prompt(i))), &e);
            let b = alignment_score(&o.embed_text(&o.grammar.tokens(o.grammar.prompt(j))), &e);
            m += a;
            mm += b;
            // retrieval among all prompts
            let best = (0..48)
                .max_by(|&x, &y| {
                    let sx = alignment_score(&o.embed_text(&o.grammar.tokens(o.grammar.prompt(x))), &e);
                    let sy = alignment_score(&o.embed_text(&o.grammar.tokens(o.grammar.prompt(y))), &e);
                    sx.total_cmp(&sy)
                })
                .unwrap();
            correct += usize::from(best == i);
        }
        assert!(m / n as f64 > mm / n as f64 + 0.3, "{} vs {}", m / n as f64, mm / n as f64);
        assert!(correct > 900, "{correct}");
    }

    #[test]
    fn graph_embedding_matches_and_padding_is_ignored() {
        let o = emb();
        let mut r = rng::seeded(3);
        let a = o.grammar.render(o.grammar.prompt(7), 20, 8, &mut r).unwrap();
        let b = o.grammar.render(o.grammar.prompt(30), 33, 8, &mut r).unwrap();
        let both = o.embed_latents(&[a.clone(), b]).unwrap();
        let alone = o.embed_latent(&a).unwrap();
        for (x, y) in both[0].iter().zip(&alone) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let o = OracleEmbedder::new(Grammar::default(), 3).unwrap();
        let mut r = rng::seeded(4);
        let x: Tensor<f64> = rng::normal_tensor(&mut r, 2 * 5, 3, 1.0);
        let valid = [5usize, 3];
        let target: Tensor<f64> = {
            let t = rng::normal_tensor::<f64>(&mut r, 2, o.dim(), 1.0);
            let mut t = t;
            for i in 0..2 {
                let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                t.row_mut(i).iter_mut().for_each(|v| *v /= n);
            }
            t
        };
        let loss = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let e = o.embed_graph(&mut g, xv, &valid, 5);
            let t = g.constant(target.clone());
            let d = g.geodesic(e, t);
            let l = g.mean_all(d);
            let v = g.value(l).get(0, 0);
            let grads = g.backward(l);
            (v, grads.get(xv).unwrap().clone())
        };
        let (_, grad) = loss(&x);
        let h = 1e-5;
        for i in 0..x.len() {
            let (row, col) = (i / 3, i % 3);
            let mut xp = x.clone();
            xp.set(row, col, x.get(row, col) + h);
            let mut xm = x.clone();
            xm.set(row, col, x.get(row, col) - h);
            let fd = (loss(&xp).0 - loss(&xm).0) / (2.0 * h);
            let an = grad.get(row, col);
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "{i}: {fd} vs {an}");
        }
        // padded rows of the second item receive nothing
        assert!(grad.row(8).iter().chain(grad.row(9)).all(|&v| v == 0.0));
    }

    #[test]
    fn partial_prompts_average() {
        let o = emb();
        let t = o.embed_text(&[3]);
        let full: f64 = (0..6)
            .map(|k| {
                let p = Prompt { tone: 3, rate: k / 2, envelope: k % 2 };
                alignment_score(&t, &o.embed_text(&o.grammar.tokens(p)))
            })
            .sum::<f64>()
            / 6.0;
        assert!(full > 0.3);
        assert_eq!(o.embed_text(&[]).len(), 16);
    }
}
