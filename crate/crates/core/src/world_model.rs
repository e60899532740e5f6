//! Recurrent state-space world model over categorical latents.

use ape_tensor::nn::{ConvTranspose2d, LayerNorm, Linear};
use ape_tensor::{Bound, Optimizer, ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, Readout};
use crate::error::{invalid, Error, Result};
use crate::nets::{symlog, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldModelConfig {
    /// Width of the deterministic recurrent state `h`.
    pub deter: usize,
    pub hidden: usize,
    pub groups: usize,
    pub classes: usize,
    /// Uniform mixing weight applied to every latent distribution.
    pub unimix: f64,
    pub head_units: usize,
    pub head_layers: usize,
    /// Channels of the decoder's transposed-convolution stack, coarsest first.
    pub decoder_channels: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub free_bits: f64,
    pub lr: f64,
    pub eps: f64,
    pub clip: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            deter: 256,
            hidden: 256,
            groups: 8,
            classes: 8,
            unimix: 0.01,
            head_units: 512,
            head_layers: 2,
            decoder_channels: vec![64, 32, 16],
            beta1: 0.5,
            beta2: 0.1,
            free_bits: 1.0,
            lr: 1e-4,
            eps: 1e-8,
            clip: 1000.0,
        }
    }
}

impl WorldModelConfig {
    pub fn stoch(&self) -> usize {
        self.groups * self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.stoch() + self.deter
    }
}

/// Recurrent state: `h` is `[batch, deter]`, `z` the flattened one-hot
/// latent `[batch, groups * classes]`.
#[derive(Clone, Copy, Debug)]
pub struct Latent<'t, T: Real> {
    pub h: Var<'t, T>,
    pub z: Var<'t, T>,
}

#[derive(Clone, Copy, Debug)]
pub struct ObserveStep<'t, T: Real> {
    pub state: Latent<'t, T>,
    /// Posterior and prior distributions, `[batch, groups, classes]`.
    pub post: Var<'t, T>,
    pub prior: Var<'t, T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub encoder: Encoder,
    pub action_count: usize,
    pub obs_size: usize,
    img_in: Linear,
    img_norm: LayerNorm,
    gru: Linear,
    gru_norm: LayerNorm,
    pub prior_net: Mlp,
    pub post_net: Mlp,
    pub reward_head: Mlp,
    pub cont_head: Mlp,
    dec_in: Linear,
    dec: Vec<ConvTranspose2d>,
}

impl WorldModel {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &WorldModelConfig,
        encoder: &EncoderConfig,
        action_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, encoder, rng)?;
        let obs_size = encoder.config.input_size;
        let layers = config.decoder_channels.len();
        if layers == 0 || obs_size % (1 << layers) != 0 {
            return Err(invalid(format!(
                "observation size {obs_size} not divisible by 2^{layers} decoder stages"
            )));
        }
        if config.groups == 0 || config.classes < 2 || action_count == 0 {
            return Err(invalid("latent groups, classes and actions must be positive"));
        }
        let c = config;
        let embed = encoder.feature_dim(Readout::Flat);
        let feat = c.feature_dim();
        let img_in = Linear::new(store, "wm.img_in", c.stoch() + action_count, c.hidden, rng);
        let img_norm = LayerNorm::new(store, "wm.img_in.norm", c.hidden);
        let gru = Linear::new(store, "wm.gru", c.hidden + c.deter, 3 * c.deter, rng);
        let gru_norm = LayerNorm::new(store, "wm.gru.norm", 3 * c.deter);
        let prior_net = Mlp::new(store, "wm.prior", c.deter, c.hidden, 1, c.stoch(), rng);
        let post_net = Mlp::new(store, "wm.post", c.deter + embed, c.hidden, 1, c.stoch(), rng);
        let reward_head = Mlp::new(store, "wm.reward", feat, c.head_units, c.head_layers, 1, rng);
        let cont_head = Mlp::new(store, "wm.cont", feat, c.head_units, c.head_layers, 1, rng);
        reward_head.scale_output(store, 0.0);
        let start = obs_size >> layers;
        let dec_in = Linear::new(store, "wm.dec_in", feat, c.decoder_channels[0] * start * start, rng);
        let mut chans = c.decoder_channels.clone();
        chans.push(3);
        let dec = chans
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvTranspose2d::new(store, &format!("wm.dec.{i}"), w[0], w[1], 4, 2, 1, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            encoder,
            action_count,
            obs_size,
            img_in,
            img_norm,
            gru,
            gru_norm,
            prior_net,
            post_net,
            reward_head,
            cont_head,
            dec_in,
            dec,
        })
    }

    pub fn initial<'t, T: Real>(&self, tape: &'t Tape<T>, batch: usize) -> Latent<'t, T> {
        Latent {
            h: tape.constant(Tensor::zeros(&[batch, self.config.deter])),
            z: tape.constant(Tensor::zeros(&[batch, self.config.stoch()])),
        }
    }

    /// Mixed categorical distributions `[batch, groups, classes]` from logits.
    pub fn dist<'t, T: Real>(&self, logits: Var<'t, T>) -> Result<Var<'t, T>> {
        let (g, c, u) = (self.config.groups, self.config.classes, self.config.unimix);
        let b = logits.shape()[0];
        let probs = logits.reshape(&[b, g, c])?.softmax(2)?;
        Ok(if u > 0.0 {
            probs.scale(1.0 - u).add_scalar(u / c as f64)
        } else {
            probs
        })
    }

    /// One-hot straight-through sample (or the probabilities themselves when
    /// `rng` is `None`), flattened to `[batch, groups * classes]`.
    pub fn sample<'t, T: Real>(&self, probs: Var<'t, T>, rng: Option<&mut dyn RngCore>) -> Result<Var<'t, T>> {
        let b = probs.shape()[0];
        let z = match rng {
            Some(r) => probs.categorical_st(r)?,
            None => probs,
        };
        Ok(z.reshape(&[b, self.config.stoch()])?)
    }

    fn recurrent<'t, T: Real>(&self, p: &Bound<'t, T>, prev: Latent<'t, T>, action: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.config.deter;
        let x = self.img_in.forward(p, Var::concat(&[prev.z, action], 1)?)?;
        let x = self.img_norm.forward(p, x)?.silu();
        let parts = self.gru.forward(p, Var::concat(&[x, prev.h], 1)?)?;
        let parts = self.gru_norm.forward(p, parts)?;
        let reset = parts.slice(1, 0, d)?.sigmoid();
        let cand = reset.mul(parts.slice(1, d, d)?)?.tanh();
        let update = parts.slice(1, 2 * d, d)?.add_scalar(-1.0).sigmoid();
        Ok(prev.h.add(update.mul(cand.sub(prev.h)?)?)?)
    }

    /// Advances `h` with `(z_prev, a_prev)`, then forms the prior from `h`
    /// and the posterior from `(h, embed)`; `z` is drawn from the posterior.
    pub fn observe_step<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        prev: Latent<'t, T>,
        action: Var<'t, T>,
        embed: Var<'t, T>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ObserveStep<'t, T>> {
        let h = self.recurrent(p, prev, action)?;
        let prior = self.dist(self.prior_net.forward(p, h)?)?;
        let post = self.dist(self.post_net.forward(p, Var::concat(&[h, embed], 1)?)?)?;
        let z = self.sample(post, rng)?;
        Ok(ObserveStep {
            state: Latent { h, z },
            post,
            prior,
        })
    }

    /// Prior-only transition used for imagination.
    pub fn imagine_step<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        prev: Latent<'t, T>,
        action: Var<'t, T>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Latent<'t, T>, Var<'t, T>)> {
        let h = self.recurrent(p, prev, action)?;
        let prior = self.dist(self.prior_net.forward(p, h)?)?;
        let z = self.sample(prior, rng)?;
        Ok((Latent { h, z }, prior))
    }

    pub fn feature<'t, T: Real>(&self, s: Latent<'t, T>) -> Result<Var<'t, T>> {
        Ok(Var::concat(&[s.z, s.h], 1)?)
    }

    /// Predicted symlog reward, `[batch]`.
    pub fn reward<'t, T: Real>(&self, p: &Bound<'t, T>, feat: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = feat.shape()[0];
        Ok(self.reward_head.forward(p, feat)?.reshape(&[b])?)
    }

    /// Continue logit, `[batch]`.
    pub fn cont_logit<'t, T: Real>(&self, p: &Bound<'t, T>, feat: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = feat.shape()[0];
        Ok(self.cont_head.forward(p, feat)?.reshape(&[b])?)
    }

    /// Mean image `[batch, 3, size, size]`.
    pub fn decode<'t, T: Real>(&self, p: &Bound<'t, T>, feat: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = feat.shape()[0];
        let start = self.obs_size >> self.dec.len();
        let mut x = self
            .dec_in
            .forward(p, feat)?
            .reshape(&[b, self.config.decoder_channels[0], start, start])?;
        for layer in &self.dec {
            x = layer.forward(p, x.silu())?;
        }
        Ok(x)
    }

    /// Flattened trunk features; `input` enters at stage `from_stage`
    /// (0 for raw observations).
    pub fn embed<'t, T: Real>(&self, p: &Bound<'t, T>, input: Var<'t, T>, from_stage: usize) -> Result<Var<'t, T>> {
        let map = self
            .encoder
            .stages_forward(p, input, from_stage..self.encoder.stages.len())?;
        self.encoder.readout(map, Readout::Flat)
    }
}

/// Categorical KL summed over groups and classes: `[batch, groups, classes]`
/// pairs to `[batch]`.
pub fn categorical_kl<'t, T: Real>(p: Var<'t, T>, q: Var<'t, T>) -> Result<Var<'t, T>> {
    let terms = p.mul(p.ln().sub(q.ln())?)?;
    Ok(terms.sum_axis(2)?.sum_axis(1)?)
}

/// `beta1 * max(fb, KL[sg(post) || prior]) + beta2 * max(fb, KL[post || sg(prior)])`,
/// averaged over the batch.
pub fn kl_balanced<'t, T: Real>(post: Var<'t, T>, prior: Var<'t, T>, beta1: f64, beta2: f64, free_bits: f64) -> Result<Var<'t, T>> {
    if post.shape() != prior.shape() {
        return Err(invalid(format!("posterior {:?} vs prior {:?}", post.shape(), prior.shape())));
    }
    let dyn_term = categorical_kl(post.stop_gradient(), prior)?.clamp_min(free_bits).mean();
    let rep_term = categorical_kl(post, prior.stop_gradient())?.clamp_min(free_bits).mean();
    Ok(dyn_term.scale(beta1).add(rep_term.scale(beta2))?)
}

/// Time-major training window: row `t * batch + b` holds step `t` of
/// sequence `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch<T> {
    pub length: usize,
    pub batch: usize,
    /// Encoder input (raw frames, or cached maps when `from_stage > 0`).
    pub enc_input: Tensor<T>,
    pub from_stage: usize,
    /// Reconstruction targets `[length * batch, 3, size, size]`.
    pub obs: Tensor<T>,
    /// One-hot previous action `[length * batch, actions]`; zero at episode start.
    pub actions: Tensor<T>,
    pub rewards: Tensor<T>,
    pub conts: Tensor<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rew: f64,
    pub con: f64,
    pub rec: f64,
    pub obs: f64,
    pub total: f64,
}

pub struct ModelOutput<'t, T: Real> {
    pub total: Var<'t, T>,
    pub parts: LossParts,
    /// Posterior states at every `(t, b)`, detached, for imagination starts.
    pub h: Tensor<T>,
    pub z: Tensor<T>,
}

fn rows<T: Real>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let width = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Ok(Tensor::new(&shape, t.data()[start * width..(start + len) * width].to_vec())?)
}

fn check_finite(v: f64, component: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { component })
    }
}

impl WorldModel {
    /// Reward, continue, reconstruction and balanced-KL losses, each averaged
    /// over every `(t, b)` position, and their sum.
    pub fn loss<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        batch: &SeqBatch<T>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ModelOutput<'t, T>> {
        let tape = p.vars().first().map(|v| v.tape()).ok_or_else(|| invalid("empty parameter set"))?;
        let (len, b) = (batch.length, batch.batch);
        let n = len * b;
        if batch.obs.shape()[0] != n || batch.actions.shape() != [n, self.action_count] {
            return Err(invalid(format!(
                "batch shapes inconsistent with {len}x{b}: obs {:?}, actions {:?}",
                batch.obs.shape(),
                batch.actions.shape()
            )));
        }
        let embed = self.embed(p, tape.constant(batch.enc_input.clone()), batch.from_stage)?;
        let mut state = self.initial(tape, b);
        let (mut posts, mut priors, mut hs, mut zs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for t in 0..len {
            let action = tape.constant(rows(&batch.actions, t * b, b)?);
            let e = embed.slice(0, t * b, b)?;
            let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            let step = self.observe_step(p, state, action, e, r)?;
            posts.push(step.post);
            priors.push(step.prior);
            hs.push(step.state.h);
            zs.push(step.state.z);
            state = step.state;
        }
        let h = Var::concat(&hs, 0)?;
        let z = Var::concat(&zs, 0)?;
        let feat = self.feature(Latent { h, z })?;

        let rew_target = tape.constant(batch.rewards.map(|r| T::of(symlog(r.as_f64()))));
        let rew = self.reward(p, feat)?.sub(rew_target)?.square().mean().scale(0.5);
        let logit = self.cont_logit(p, feat)?;
        let cont = tape.constant(batch.conts.clone());
        let con = logit.softplus().sub(logit.mul(cont)?)?.mean();
        let recon = self.decode(p, feat)?;
        let rec = recon
            .sub(tape.constant(batch.obs.clone()))?
            .square()
            .sum()
            .scale(0.5 / n as f64);
        let c = &self.config;
        let obs = kl_balanced(Var::concat(&posts, 0)?, Var::concat(&priors, 0)?, c.beta1, c.beta2, c.free_bits)?;
        let total = rew.add(con)?.add(rec)?.add(obs)?;
        let parts = LossParts {
            rew: check_finite(rew.item(), "reward")?,
            con: check_finite(con.item(), "continue")?,
            rec: check_finite(rec.item(), "reconstruction")?,
            obs: check_finite(obs.item(), "kl")?,
            total: check_finite(total.item(), "model")?,
        };
        Ok(ModelOutput {
            total,
            parts,
            h: (*h.value()).clone(),
            z: (*z.value()).clone(),
        })
    }

    /// One optimizer step on the model loss. Parameters for which
    /// `trainable` is false (e.g. a frozen encoder prefix) are left untouched.
    pub fn train_step<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        opt: &mut Optimizer<T>,
        batch: &SeqBatch<T>,
        trainable: impl Fn(usize) -> bool,
        rng: &mut dyn RngCore,
    ) -> Result<(LossParts, Tensor<T>, Tensor<T>)> {
        let tape = Tape::new();
        let p = store.bind(&tape, trainable);
        let out = self.loss(&p, batch, Some(rng))?;
        let grads = tape.backward(out.total)?;
        let grads = p.grads(&grads);
        drop(p);
        opt.step(store, grads)?;
        Ok((out.parts, out.h, out.z))
    }
}
