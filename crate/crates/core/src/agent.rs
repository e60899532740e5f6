//! Actor-critic trained on imagined world-model rollouts.

use ape_tensor::{Optimizer, OptimizerConfig, ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nets::{symexp, Mlp};
use crate::world_model::{Latent, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Entropy bonus weight.
    pub eta: f64,
    /// Decay of the critic's EMA copy.
    pub critic_ema: f64,
    /// Decay of the return-range EMA.
    pub return_ema: f64,
    pub horizon: usize,
    pub units: usize,
    pub layers: usize,
    pub lr: f64,
    pub eps: f64,
    pub clip: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.997,
            lambda: 0.95,
            eta: 3e-4,
            critic_ema: 0.98,
            return_ema: 0.99,
            horizon: 15,
            units: 512,
            layers: 2,
            lr: 3e-5,
            eps: 1e-5,
            clip: 100.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("critic_ema", self.critic_ema),
            ("return_ema", self.return_ema),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.horizon == 0 {
            return Err(invalid("imagination horizon must be at least 1"));
        }
        Ok(())
    }

    pub fn optimizer<T: Real>(&self, params: usize) -> Optimizer<T> {
        Optimizer::new(OptimizerConfig::adam(self.lr, self.eps, Some(self.clip)), params)
    }
}

/// Policy and value networks. Each lives in its own parameter store; the
/// critic's EMA copy is a clone of the critic store.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub config: AgentConfig,
    pub actor: Mlp,
    pub critic: Mlp,
    pub action_count: usize,
}

pub struct AgentStores<T> {
    pub actor: ParamStore<T>,
    pub critic: ParamStore<T>,
    pub critic_ema: ParamStore<T>,
}

impl Agent {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: &AgentConfig,
        feature_dim: usize,
        action_count: usize,
        rng: &mut R,
    ) -> Result<(Self, AgentStores<T>)> {
        config.validate()?;
        let mut actor_store = ParamStore::new();
        let mut critic_store = ParamStore::new();
        let (u, l) = (config.units, config.layers);
        let actor = Mlp::new(&mut actor_store, "actor", feature_dim, u, l, action_count, rng);
        let critic = Mlp::new(&mut critic_store, "critic", feature_dim, u, l, 1, rng);
        critic.scale_output(&mut critic_store, 0.0);
        let agent = Self {
            config: config.clone(),
            actor,
            critic,
            action_count,
        };
        let stores = AgentStores {
            critic_ema: critic_store.clone(),
            actor: actor_store,
            critic: critic_store,
        };
        Ok((agent, stores))
    }

    pub fn logits<'t, T: Real>(&self, p: &ape_tensor::Bound<'t, T>, feat: Var<'t, T>) -> Result<Var<'t, T>> {
        self.actor.forward(p, feat)
    }

    pub fn value<'t, T: Real>(&self, p: &ape_tensor::Bound<'t, T>, feat: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = feat.shape()[0];
        Ok(self.critic.forward(p, feat)?.reshape(&[b])?)
    }
}

/// Samples one action per row of a probability matrix `[batch, actions]`.
pub fn sample_actions<T: Real, R: Rng + ?Sized>(probs: &Tensor<T>, rng: &mut R) -> Vec<usize> {
    let a = probs.shape()[1];
    probs
        .data()
        .chunks(a)
        .map(|row| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in row.iter().enumerate() {
                acc += p.as_f64();
                if u < acc {
                    return i;
                }
            }
            a - 1
        })
        .collect()
}

pub fn argmax_actions<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let a = logits.shape()[1];
    logits
        .data()
        .chunks(a)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn one_hot<T: Real>(actions: &[usize], count: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[actions.len(), count]);
    for (i, &a) in actions.iter().enumerate() {
        t.data_mut()[i * count + a] = T::one();
    }
    t
}

/// Concatenates `[b, a]` blocks along rows.
pub fn stack_rows<T: Real>(blocks: &[Tensor<T>]) -> Result<Tensor<T>> {
    let width = blocks.first().map_or(0, |b| b.shape()[1]);
    let rows: usize = blocks.iter().map(|b| b.shape()[0]).sum();
    Ok(Tensor::stack(blocks)?.reshape(&[rows, width])?)
}

/// An imagined rollout of `horizon` steps from `batch` start states.
pub struct Imagined<'t, T: Real> {
    /// Detached features of states `s_0..s_T`, each `[batch, feature]`.
    pub feats: Vec<Var<'t, T>>,
    /// Policy logits at `s_0..s_{T-1}`.
    pub logits: Vec<Var<'t, T>>,
    /// One-hot actions taken at `s_0..s_{T-1}`.
    pub actions: Vec<Tensor<T>>,
    /// `rewards[t][b]` and `conts[t][b]` are predicted for the transition out of `s_t`.
    pub rewards: Vec<Vec<f64>>,
    pub conts: Vec<Vec<f64>>,
}

impl Agent {
    /// Rolls the world model's prior forward under the actor. States are
    /// detached before they reach the actor, so agent losses never reach
    /// the world model.
    pub fn imagine<'t, T: Real>(
        &self,
        wm: &WorldModel,
        wm_params: &ape_tensor::Bound<'t, T>,
        actor_params: &ape_tensor::Bound<'t, T>,
        start: Latent<'t, T>,
        horizon: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Imagined<'t, T>> {
        if horizon == 0 {
            return Err(invalid("imagination horizon must be at least 1"));
        }
        let tape = start.h.tape();
        let mut state = Latent {
            h: start.h.stop_gradient(),
            z: start.z.stop_gradient(),
        };
        let mut out = Imagined {
            feats: vec![wm.feature(state)?.stop_gradient()],
            logits: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            conts: Vec::new(),
        };
        for _ in 0..horizon {
            let feat = *out.feats.last().expect("non-empty");
            let logits = self.logits(actor_params, feat)?;
            let probs = logits.softmax(1)?.value();
            let action = one_hot::<T>(&sample_actions(&probs, rng), self.action_count);
            let (next, _) = wm.imagine_step(wm_params, state, tape.constant(action.clone()), Some(rng))?;
            state = Latent {
                h: next.h.stop_gradient(),
                z: next.z.stop_gradient(),
            };
            let feat = wm.feature(state)?.stop_gradient();
            let r = wm.reward(wm_params, feat)?.value();
            let c = wm.cont_logit(wm_params, feat)?.sigmoid().value();
            out.rewards.push(r.data().iter().map(|v| symexp(v.as_f64())).collect());
            out.conts.push(c.data().iter().map(|v| v.as_f64()).collect());
            out.logits.push(logits);
            out.actions.push(action);
            out.feats.push(feat);
        }
        Ok(out)
    }
}

/// λ-returns for one sequence: `values` has one more entry than `rewards`
/// and the result has the same length as `values`, ending in `G_T = V_T`.
pub fn lambda_return(rewards: &[f64], conts: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    let t = rewards.len();
    if conts.len() != t || values.len() != t + 1 {
        return Err(invalid(format!(
            "λ-return needs T rewards/continues and T+1 values, got {}/{}/{}",
            t,
            conts.len(),
            values.len()
        )));
    }
    let mut g = vec![0.0; t + 1];
    g[t] = values[t];
    for i in (0..t).rev() {
        g[i] = rewards[i] + gamma * conts[i] * ((1.0 - lambda) * values[i + 1] + lambda * g[i + 1]);
    }
    Ok(g)
}

/// Percentile by linear interpolation between order statistics of `sorted`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `Per(G, 95) - Per(G, 5)` over a flattened batch.
pub fn return_range(returns: &[f64]) -> Result<f64> {
    if returns.is_empty() {
        return Err(invalid("return batch is empty"));
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile(&sorted, 95.0) - percentile(&sorted, 5.0))
}

/// Exponential moving average of the return range; the first batch seeds it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnScale {
    pub decay: f64,
    pub value: Option<f64>,
}

impl ReturnScale {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    pub fn update(&mut self, returns: &[f64]) -> Result<f64> {
        let raw = return_range(returns)?;
        let s = match self.value {
            None => raw,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * raw,
        };
        self.value = Some(s);
        Ok(s)
    }

    /// Advantage divisor `max(1, S)`.
    pub fn divisor(&self) -> f64 {
        self.value.unwrap_or(0.0).max(1.0)
    }
}

/// Mean over rows of `-sg(adv / max(1, S)) ln π(a) - η H(π)` for logits
/// `[n, actions]`, one-hot `actions` and advantages `[n]`.
pub fn actor_loss<'t, T: Real>(
    logits: Var<'t, T>,
    actions: Var<'t, T>,
    advantages: Var<'t, T>,
    scale: f64,
    eta: f64,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let logp = logits.log_softmax(1)?;
    let taken = logp.mul(actions.stop_gradient())?.sum_axis(1)?;
    let entropy = logits.softmax(1)?.mul(logp)?.sum_axis(1)?.neg().mean();
    let weight = advantages.stop_gradient().scale(1.0 / scale.max(1.0));
    let reinforce = weight.mul(taken)?.mean().neg();
    Ok((reinforce.sub(entropy.scale(eta))?, entropy))
}

/// Mean of `(V - sg(G))^2 + (V - sg(V_ema))^2`.
pub fn critic_loss<'t, T: Real>(values: Var<'t, T>, returns: Var<'t, T>, ema: Var<'t, T>) -> Result<Var<'t, T>> {
    let a = values.sub(returns.stop_gradient())?.square();
    let b = values.sub(ema.stop_gradient())?.square();
    Ok(a.add(b)?.mean())
}

/// `ema <- sigma * ema + (1 - sigma) * src`, parameter by parameter.
pub fn ema_update<T: Real>(ema: &mut ParamStore<T>, src: &ParamStore<T>, sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(invalid(format!("EMA decay {sigma} outside [0, 1]")));
    }
    if ema.len() != src.len() {
        return Err(invalid("EMA and source stores differ in size"));
    }
    for i in 0..src.len() {
        if ema.value(i).shape() != src.value(i).shape() {
            return Err(invalid(format!("shape mismatch for `{}`", src.name(i))));
        }
        let s = src.value(i).data().to_vec();
        for (e, v) in ema.value_mut(i).data_mut().iter_mut().zip(s) {
            *e = T::of(sigma * e.as_f64() + (1.0 - sigma) * v.as_f64());
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AgentMetrics {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub scale: f64,
    pub mean_return: f64,
}

pub struct AgentOptimizers<T> {
    pub actor: Optimizer<T>,
    pub critic: Optimizer<T>,
}

impl<T: Real> AgentOptimizers<T> {
    pub fn new(config: &AgentConfig, stores: &AgentStores<T>) -> Self {
        Self {
            actor: config.optimizer(stores.actor.len()),
            critic: config.optimizer(stores.critic.len()),
        }
    }
}

impl Agent {
    /// Imagines from the given start states (`h` `[n, deter]`, `z`
    /// `[n, stoch]`) and takes one actor and one critic step.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step<T: Real>(
        &self,
        wm: &WorldModel,
        wm_store: &ParamStore<T>,
        stores: &mut AgentStores<T>,
        opts: &mut AgentOptimizers<T>,
        scale: &mut ReturnScale,
        start_h: &Tensor<T>,
        start_z: &Tensor<T>,
        rng: &mut dyn RngCore,
    ) -> Result<AgentMetrics> {
        let c = &self.config;
        let tape = Tape::new();
        let wp = wm_store.bind_frozen(&tape);
        let ap = stores.actor.bind_all(&tape);
        let cp = stores.critic.bind_all(&tape);
        let ep = stores.critic_ema.bind_frozen(&tape);
        let start = Latent {
            h: tape.constant(start_h.clone()),
            z: tape.constant(start_z.clone()),
        };
        let n = start_h.shape()[0];
        let traj = self.imagine(wm, &wp, &ap, start, c.horizon, rng)?;
        let horizon = c.horizon;

        let values: Vec<Var<T>> = traj
            .feats
            .iter()
            .map(|f| self.value(&cp, *f))
            .collect::<Result<_>>()?;
        let mut returns = vec![0.0; horizon * n];
        let mut advantages = vec![0.0; horizon * n];
        for b in 0..n {
            let r: Vec<f64> = traj.rewards.iter().map(|row| row[b]).collect();
            let k: Vec<f64> = traj.conts.iter().map(|row| row[b]).collect();
            let v: Vec<f64> = values.iter().map(|x| x.value().data()[b].as_f64()).collect();
            let g = lambda_return(&r, &k, &v, c.gamma, c.lambda)?;
            for t in 0..horizon {
                returns[t * n + b] = g[t];
                advantages[t * n + b] = g[t] - v[t];
            }
        }
        let s = scale.update(&returns)?;
        let as_var = |v: &[f64]| -> Result<Var<T>> {
            Ok(tape.constant(Tensor::new(&[v.len()], v.iter().map(|x| T::of(*x)).collect())?))
        };
        let logits = Var::concat(&traj.logits, 0)?;
        let actions = tape.constant(stack_rows(&traj.actions)?);
        let (a_loss, entropy) = actor_loss(logits, actions, as_var(&advantages)?, scale.divisor(), c.eta)?;

        let feats = Var::concat(&traj.feats[..horizon], 0)?;
        let v = self.value(&cp, feats)?;
        let v_ema = self.value(&ep, feats)?;
        let c_loss = critic_loss(v, as_var(&returns)?, v_ema)?;

        let metrics = AgentMetrics {
            actor_loss: a_loss.item(),
            critic_loss: c_loss.item(),
            entropy: entropy.item(),
            scale: s,
            mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
        };
        for (v, component) in [(metrics.actor_loss, "actor"), (metrics.critic_loss, "critic")] {
            if !v.is_finite() {
                return Err(Error::NonFinite { component });
            }
        }
        let grads = tape.backward(a_loss.add(c_loss)?)?;
        let actor_grads = ap.grads(&grads);
        let critic_grads = cp.grads(&grads);
        drop((ap, cp, wp, ep));
        opts.actor.step(&mut stores.actor, actor_grads)?;
        opts.critic.step(&mut stores.critic, critic_grads)?;
        ema_update(&mut stores.critic_ema, &stores.critic, c.critic_ema)?;
        Ok(metrics)
    }

    /// Policy action for one feature row, sampled or greedy.
    pub fn act<T: Real>(&self, actor: &ParamStore<T>, feat: &Tensor<T>, rng: Option<&mut dyn RngCore>) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let p = actor.bind_frozen(&tape);
        let logits = self.logits(&p, tape.constant(feat.clone()))?;
        Ok(match rng {
            Some(r) => sample_actions(&logits.softmax(1)?.value(), r),
            None => argmax_actions(&logits.value()),
        })
    }
}
