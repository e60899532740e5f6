//! Policy-learning loop: environment interaction, replay, world-model and
//! actor-critic updates, periodic greedy evaluation.

use ape_tensor::{Optimizer, OptimizerConfig, ParamStore, Tape, Tensor};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::agent::{one_hot, Agent, AgentConfig, AgentOptimizers, AgentStores, ReturnScale};
use crate::checkpoint::{ByteReader, ByteWriter, Checkpoint, Section};
use crate::encoder::{EncoderConfig, FreezeSplit};
use crate::env::{ActionRepeat, PixelChase, ACTION_COUNT, FRAME};
use crate::error::{invalid, Error, Result};
use crate::replay::{Replay, StepRecord, TrainRatio};
use crate::rng::{load_state, save_state, stream, tag, Stream};
use crate::world_model::{Latent, LossParts, SeqBatch, WorldModel, WorldModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    /// Budget in raw environment frames.
    pub env_steps: usize,
    pub action_repeat: usize,
    pub episode_steps: usize,
    pub batch: usize,
    pub length: usize,
    /// Replayed steps per policy step.
    pub train_ratio: f64,
    pub capacity: usize,
    /// Raw frames of uniformly random actions before learning starts.
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            env_steps: 20_000,
            action_repeat: 2,
            episode_steps: 100,
            batch: 16,
            length: 32,
            train_ratio: 32.0,
            capacity: 100_000,
            warmup_steps: 1_000,
            eval_every: 1_000,
            eval_episodes: 10,
        }
    }
}

/// Mean training losses over the updates since the previous row.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainMeans {
    pub model: LossParts,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub scale: f64,
    pub updates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlRow {
    pub env_steps: usize,
    /// Mean return of the greedy evaluation episodes.
    pub episode_return: f64,
    pub train: Option<TrainMeans>,
}

/// Posterior state carried while acting.
#[derive(Clone, Debug, PartialEq)]
struct ActState {
    h: Tensor<f32>,
    z: Tensor<f32>,
    prev_action: Option<usize>,
}

pub struct RlTrainer {
    pub config: RlConfig,
    pub seed: u64,
    pub wm: WorldModel,
    pub wm_store: ParamStore<f32>,
    pub wm_opt: Optimizer<f32>,
    pub split: FreezeSplit,
    pub agent: Agent,
    pub agent_stores: AgentStores<f32>,
    pub agent_opts: AgentOptimizers<f32>,
    pub scale: ReturnScale,
    pub replay: Replay,
    ratio: TrainRatio,
    env: ActionRepeat,
    episode: Vec<StepRecord>,
    act_state: ActState,
    pub env_steps: usize,
    episode_index: u64,
    rows_emitted: usize,
    act_rng: Stream,
    train_rng: Stream,
    accum: TrainMeans,
}

fn episode_seed(seed: u64, kind: u64, index: u64) -> u64 {
    stream(seed, &[kind, index]).next_u64()
}

fn frame_tensor(frames: &[&[u8]]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(frames.len() * 3 * FRAME * FRAME);
    for f in frames {
        data.extend(f.iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Tensor::new(&[frames.len(), 3, FRAME, FRAME], data)?)
}

impl RlTrainer {
    /// Fresh trainer. `pretrained`, when given, supplies the encoder trunk;
    /// the first `freeze_stages` stages are never updated.
    pub fn new(
        config: &RlConfig,
        wm_config: &WorldModelConfig,
        encoder: &EncoderConfig,
        agent_config: &AgentConfig,
        freeze_stages: usize,
        pretrained: Option<&Checkpoint>,
        seed: u64,
    ) -> Result<Self> {
        if config.action_repeat == 0 || config.episode_steps == 0 || config.eval_every == 0 {
            return Err(invalid("action_repeat, episode_steps and eval_every must be positive"));
        }
        if encoder.input_size != FRAME {
            return Err(invalid(format!(
                "encoder input {0}x{0} does not match {FRAME}x{FRAME} frames",
                encoder.input_size
            )));
        }
        let mut init = stream(seed, &[tag::INIT]);
        let mut wm_store = ParamStore::new();
        let wm = WorldModel::new(&mut wm_store, wm_config, encoder, ACTION_COUNT, &mut init)?;
        if let Some(ck) = pretrained {
            wm.encoder.load_pretrained(ck, &mut wm_store)?;
        }
        let split = wm.encoder.freeze_split(freeze_stages)?;
        let wm_opt = Optimizer::new(
            OptimizerConfig::adam(wm_config.lr, wm_config.eps, Some(wm_config.clip)),
            wm_store.len(),
        );
        let (agent, agent_stores) = Agent::new(agent_config, wm_config.feature_dim(), ACTION_COUNT, &mut init)?;
        let agent_opts = AgentOptimizers::new(agent_config, &agent_stores);
        let decisions = config.episode_steps.div_ceil(config.action_repeat) + 1;
        if config.length > decisions {
            return Err(invalid(format!(
                "window length {} exceeds the {decisions} records of an episode",
                config.length
            )));
        }
        let ratio = TrainRatio::new(config.train_ratio, config.batch, config.length)?;
        let mut trainer = Self {
            config: config.clone(),
            seed,
            scale: ReturnScale::new(agent_config.return_ema),
            replay: Replay::new(config.capacity),
            ratio,
            env: ActionRepeat::new(PixelChase::reset_with_length(0, config.episode_steps).0, config.action_repeat)?,
            episode: Vec::new(),
            act_state: ActState {
                h: Tensor::zeros(&[1, wm_config.deter]),
                z: Tensor::zeros(&[1, wm_config.stoch()]),
                prev_action: None,
            },
            env_steps: 0,
            episode_index: 0,
            rows_emitted: 0,
            act_rng: stream(seed, &[tag::ACT]),
            train_rng: stream(seed, &[tag::TRAIN]),
            accum: TrainMeans::default(),
            wm,
            wm_store,
            wm_opt,
            split,
            agent,
            agent_stores,
            agent_opts,
        };
        trainer.begin_episode()?;
        Ok(trainer)
    }

    fn freeze_stages(&self) -> usize {
        self.split.frozen.len() / 2
    }

    fn begin_episode(&mut self) -> Result<()> {
        let s = episode_seed(self.seed, tag::ENV, self.episode_index);
        let (env, obs) = PixelChase::reset_with_length(s, self.config.episode_steps);
        self.env = ActionRepeat::new(env, self.config.action_repeat)?;
        let cached = self.prefix(&obs)?;
        self.episode = vec![StepRecord {
            obs,
            action: None,
            reward: 0.0,
            cont: 1.0,
            cached,
        }];
        self.act_state.h = Tensor::zeros(self.act_state.h.shape());
        self.act_state.z = Tensor::zeros(self.act_state.z.shape());
        self.act_state.prev_action = None;
        Ok(())
    }

    /// Output of the frozen stages for one frame, if any are frozen.
    fn prefix(&self, obs: &[u8]) -> Result<Option<Vec<f32>>> {
        let k = self.freeze_stages();
        if k == 0 {
            return Ok(None);
        }
        let tape = Tape::new();
        let p = self.wm_store.bind_frozen(&tape);
        let x = tape.constant(frame_tensor(&[obs])?);
        let map = self.wm.encoder.stages_forward(&p, x, 0..k)?;
        Ok(Some(map.value().data().to_vec()))
    }

    fn enc_input(&self, records: &[&StepRecord]) -> Result<Tensor<f32>> {
        let k = self.freeze_stages();
        if k == 0 {
            return frame_tensor(&records.iter().map(|r| r.obs.as_slice()).collect::<Vec<_>>());
        }
        let c = self.wm.encoder.config.channels[k - 1];
        let mut size = self.wm.encoder.config.input_size;
        for s in &self.wm.encoder.config.strides[..k] {
            size = size.div_ceil(*s);
        }
        let mut data = Vec::with_capacity(records.len() * c * size * size);
        for r in records {
            let cached = r.cached.as_ref().ok_or_else(|| Error::Replay("record lacks cached features".into()))?;
            data.extend_from_slice(cached);
        }
        Ok(Tensor::new(&[records.len(), c, size, size], data)?)
    }

    /// Posterior update on `record` from `state`, then an action: greedy
    /// when `rng` is `None`.
    fn policy(
        &self,
        state: &ActState,
        record: &StepRecord,
        rng: &mut dyn RngCore,
        greedy: bool,
    ) -> Result<(usize, ActState)> {
        let tape = Tape::new();
        let wp = self.wm_store.bind_frozen(&tape);
        let input = tape.constant(self.enc_input(&[record])?);
        let embed = self.wm.embed(&wp, input, self.freeze_stages())?;
        let action = tape.constant(match state.prev_action {
            Some(a) => one_hot(&[a], ACTION_COUNT),
            None => Tensor::zeros(&[1, ACTION_COUNT]),
        });
        let prev = Latent {
            h: tape.constant(state.h.clone()),
            z: tape.constant(state.z.clone()),
        };
        let step = self.wm.observe_step(&wp, prev, action, embed, Some(rng))?;
        let feat = self.wm.feature(step.state)?.value();
        let a = if greedy {
            self.agent.act(&self.agent_stores.actor, &feat, None)?[0]
        } else {
            self.agent.act(&self.agent_stores.actor, &feat, Some(rng))?[0]
        };
        let next = ActState {
            h: (*step.state.h.value()).clone(),
            z: (*step.state.z.value()).clone(),
            prev_action: Some(a),
        };
        Ok((a, next))
    }

    /// Mean undiscounted return of greedy episodes on a fixed seed set.
    pub fn evaluate(&self) -> Result<f64> {
        if self.config.eval_episodes == 0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for e in 0..self.config.eval_episodes as u64 {
            let (env, obs) = PixelChase::reset_with_length(episode_seed(self.seed, tag::EVAL, e), self.config.episode_steps);
            let mut env = ActionRepeat::new(env, self.config.action_repeat)?;
            let mut rng = stream(self.seed, &[tag::EVAL, e, 1]);
            let mut state = ActState {
                h: Tensor::zeros(self.act_state.h.shape()),
                z: Tensor::zeros(self.act_state.z.shape()),
                prev_action: None,
            };
            let mut record = StepRecord {
                cached: self.prefix(&obs)?,
                obs,
                action: None,
                reward: 0.0,
                cont: 1.0,
            };
            loop {
                let (a, next) = self.policy(&state, &record, &mut rng, true)?;
                state = next;
                let (t, _) = env.step(a)?;
                total += t.reward;
                if t.done {
                    break;
                }
                record = StepRecord {
                    cached: self.prefix(&t.obs)?,
                    obs: t.obs,
                    action: Some(a),
                    reward: t.reward,
                    cont: 1.0,
                };
            }
        }
        Ok(total / self.config.eval_episodes as f64)
    }

    fn batch_from_replay(&mut self) -> Result<SeqBatch<f32>> {
        let (b, l) = (self.config.batch, self.config.length);
        let windows = self.replay.sample(b, l, &mut self.train_rng)?;
        let mut records = Vec::with_capacity(b * l);
        for t in 0..l {
            for &(e, s) in &windows {
                records.push(&self.replay.window(e, s, l)[t]);
            }
        }
        let actions: Vec<Tensor<f32>> = records
            .iter()
            .map(|r| match r.action {
                Some(a) => one_hot(&[a], ACTION_COUNT),
                None => Tensor::zeros(&[1, ACTION_COUNT]),
            })
            .collect();
        let n = records.len();
        Ok(SeqBatch {
            length: l,
            batch: b,
            enc_input: self.enc_input(&records)?,
            from_stage: self.freeze_stages(),
            obs: frame_tensor(&records.iter().map(|r| r.obs.as_slice()).collect::<Vec<_>>())?,
            actions: crate::agent::stack_rows(&actions)?,
            rewards: Tensor::new(&[n], records.iter().map(|r| r.reward as f32).collect())?,
            conts: Tensor::new(&[n], records.iter().map(|r| r.cont as f32).collect())?,
        })
    }

    /// One world-model step followed by one actor-critic step.
    pub fn update(&mut self) -> Result<()> {
        let batch = self.batch_from_replay()?;
        let split = &self.split;
        let (parts, h, z) = self.wm.train_step(
            &mut self.wm_store,
            &mut self.wm_opt,
            &batch,
            |i| !split.is_frozen(i),
            &mut self.train_rng,
        )?;
        let m = self.agent.train_step(
            &self.wm,
            &self.wm_store,
            &mut self.agent_stores,
            &mut self.agent_opts,
            &mut self.scale,
            &h,
            &z,
            &mut self.train_rng,
        )?;
        let a = &mut self.accum;
        a.model.rew += parts.rew;
        a.model.con += parts.con;
        a.model.rec += parts.rec;
        a.model.obs += parts.obs;
        a.model.total += parts.total;
        a.actor_loss += m.actor_loss;
        a.critic_loss += m.critic_loss;
        a.entropy += m.entropy;
        a.scale = m.scale;
        a.updates += 1;
        Ok(())
    }

    fn take_means(&mut self) -> Option<TrainMeans> {
        let a = std::mem::take(&mut self.accum);
        if a.updates == 0 {
            return None;
        }
        let n = a.updates as f64;
        Some(TrainMeans {
            model: LossParts {
                rew: a.model.rew / n,
                con: a.model.con / n,
                rec: a.model.rec / n,
                obs: a.model.obs / n,
                total: a.model.total / n,
            },
            actor_loss: a.actor_loss / n,
            critic_loss: a.critic_loss / n,
            entropy: a.entropy / n,
            scale: a.scale,
            updates: a.updates,
        })
    }

    fn emit_row(&mut self, rows: &mut impl FnMut(&RlRow) -> Result<()>) -> Result<()> {
        let row = RlRow {
            env_steps: self.env_steps,
            episode_return: self.evaluate()?,
            train: self.take_means(),
        };
        self.rows_emitted += 1;
        rows(&row)
    }

    /// Advances until `until` raw frames have been taken (capped by the
    /// configured budget), reporting a row at step 0 and after every
    /// `eval_every` frames.
    pub fn run(&mut self, until: usize, mut rows: impl FnMut(&RlRow) -> Result<()>) -> Result<()> {
        let until = until.min(self.config.env_steps);
        if self.rows_emitted == 0 {
            self.emit_row(&mut rows)?;
        }
        while self.env_steps < until {
            let record = self.episode.last().expect("episode has a first record");
            let mut rng = self.act_rng.clone();
            let (learned, next) = self.policy(&self.act_state, record, &mut rng, false)?;
            self.act_rng = rng;
            let action = if self.env_steps < self.config.warmup_steps {
                self.act_rng.random_range(0..ACTION_COUNT)
            } else {
                learned
            };
            self.act_state = ActState {
                prev_action: Some(action),
                ..next
            };
            let (t, raw) = self.env.step(action)?;
            self.env_steps += raw;
            let cached = self.prefix(&t.obs)?;
            self.episode.push(StepRecord {
                obs: t.obs,
                action: Some(action),
                reward: t.reward,
                cont: if t.done { 0.0 } else { 1.0 },
                cached,
            });
            if t.done {
                let finished = std::mem::take(&mut self.episode);
                self.replay.add(finished)?;
                self.episode_index += 1;
                self.begin_episode()?;
            }
            if self.env_steps >= self.config.warmup_steps && !self.replay.episodes().is_empty() {
                for _ in 0..self.ratio.owed(1) {
                    self.update()?;
                }
            }
            if self.env_steps / self.config.eval_every >= self.rows_emitted {
                self.emit_row(&mut rows)?;
            }
        }
        Ok(())
    }
}

fn put_records(w: &mut ByteWriter, records: &[StepRecord]) {
    w.u64(records.len() as u64);
    for r in records {
        w.bytes(&r.obs)
            .u64(r.action.map_or(u64::MAX, |a| a as u64))
            .f64(r.reward)
            .f64(r.cont);
    }
}

impl RlTrainer {
    fn read_records(&self, r: &mut ByteReader) -> Result<Vec<StepRecord>> {
        let n = r.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let obs = r.bytes()?.to_vec();
            let action = match r.u64()? {
                u64::MAX => None,
                a if (a as usize) < ACTION_COUNT => Some(a as usize),
                a => return Err(Error::Checkpoint(format!("stored action {a} out of range"))),
            };
            let (reward, cont) = (r.f64()?, r.f64()?);
            out.push(StepRecord {
                cached: self.prefix(&obs)?,
                obs,
                action,
                reward,
                cont,
            });
        }
        Ok(out)
    }

    /// Everything needed to continue the run bit for bit.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.put(self.wm.encoder.to_section(&self.wm_store));
        ck.put(Section::from_store("world_model", &self.wm_store));
        ck.put(Section::from_store("actor", &self.agent_stores.actor));
        ck.put(Section::from_store("critic", &self.agent_stores.critic));
        ck.put(Section::from_store("critic_ema", &self.agent_stores.critic_ema));
        let mut opt = Section::new("optimizer");
        opt.push_optimizer("world_model", &self.wm_opt.state);
        opt.push_optimizer("actor", &self.agent_opts.actor.state);
        opt.push_optimizer("critic", &self.agent_opts.critic.state);
        ck.put(opt);
        let mut rng = Section::new("rng");
        rng.push_bytes("act", save_state(&self.act_rng));
        rng.push_bytes("train", save_state(&self.train_rng));
        ck.put(rng);

        let mut t = Section::new("trainer");
        t.push_tensor("act_h", self.act_state.h.clone());
        t.push_tensor("act_z", self.act_state.z.clone());
        let mut w = ByteWriter::default();
        w.u64(self.seed)
            .u64(self.freeze_stages() as u64)
            .u64(self.env_steps as u64)
            .u64(self.episode_index)
            .u64(self.rows_emitted as u64)
            .f64(self.ratio.carry)
            .f64(self.scale.value.unwrap_or(f64::NAN))
            .u64(self.act_state.prev_action.map_or(u64::MAX, |a| a as u64));
        let e = &self.env.env;
        w.u64(e.agent.0 as u64)
            .u64(e.agent.1 as u64)
            .u64(e.goal_index as u64)
            .u64(e.step_index as u64);
        let a = &self.accum;
        for v in [
            a.model.rew,
            a.model.con,
            a.model.rec,
            a.model.obs,
            a.model.total,
            a.actor_loss,
            a.critic_loss,
            a.entropy,
            a.scale,
        ] {
            w.f64(v);
        }
        w.u64(a.updates as u64);
        put_records(&mut w, &self.episode);
        w.u64(self.replay.episodes().len() as u64);
        for ep in self.replay.episodes() {
            put_records(&mut w, ep);
        }
        t.push_bytes("state", w.0);
        ck.put(t);
        ck
    }

    /// Freeze count a checkpoint from [`RlTrainer::to_checkpoint`] was trained with.
    pub fn stored_freeze_stages(ck: &Checkpoint) -> Result<usize> {
        let mut r = ByteReader::new(ck.section("trainer")?.bytes("state")?);
        r.u64()?;
        Ok(r.u64()? as usize)
    }

    /// Rebuilds a trainer saved by [`RlTrainer::to_checkpoint`]; the
    /// configurations must match the ones the run was started with.
    pub fn resume(
        config: &RlConfig,
        wm_config: &WorldModelConfig,
        encoder: &EncoderConfig,
        agent_config: &AgentConfig,
        freeze_stages: usize,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let t = ck.section("trainer")?;
        let mut r = ByteReader::new(t.bytes("state")?);
        let seed = r.u64()?;
        let mut tr = Self::new(config, wm_config, encoder, agent_config, freeze_stages, None, seed)?;
        if r.u64()? as usize != freeze_stages {
            return Err(Error::Checkpoint("checkpoint was trained with a different freeze count".into()));
        }
        ck.section("world_model")?.load_into(&mut tr.wm_store)?;
        ck.section("actor")?.load_into(&mut tr.agent_stores.actor)?;
        ck.section("critic")?.load_into(&mut tr.agent_stores.critic)?;
        ck.section("critic_ema")?.load_into(&mut tr.agent_stores.critic_ema)?;
        let opt = ck.section("optimizer")?;
        tr.wm_opt.state = opt.read_optimizer("world_model")?;
        tr.agent_opts.actor.state = opt.read_optimizer("actor")?;
        tr.agent_opts.critic.state = opt.read_optimizer("critic")?;
        let rng = ck.section("rng")?;
        let bad_rng = || Error::Checkpoint("corrupt RNG state".into());
        tr.act_rng = load_state(rng.bytes("act")?).ok_or_else(bad_rng)?;
        tr.train_rng = load_state(rng.bytes("train")?).ok_or_else(bad_rng)?;

        tr.env_steps = r.u64()? as usize;
        tr.episode_index = r.u64()?;
        tr.rows_emitted = r.u64()? as usize;
        tr.ratio.carry = r.f64()?;
        let s = r.f64()?;
        tr.scale.value = (!s.is_nan()).then_some(s);
        let prev = r.u64()?;
        tr.act_state = ActState {
            h: t.tensor("act_h")?.clone(),
            z: t.tensor("act_z")?.clone(),
            prev_action: (prev != u64::MAX).then_some(prev as usize),
        };
        let (env, _) = PixelChase::reset_with_length(episode_seed(seed, tag::ENV, tr.episode_index), config.episode_steps);
        let mut env = env;
        env.agent = (r.u64()? as usize, r.u64()? as usize);
        env.goal_index = r.u64()? as usize;
        env.step_index = r.u64()? as usize;
        if env.goal_index >= env.goals.len() || env.agent.0 >= crate::env::GRID || env.agent.1 >= crate::env::GRID {
            return Err(Error::Checkpoint("environment state out of range".into()));
        }
        tr.env = ActionRepeat::new(env, config.action_repeat)?;
        let mut v = [0.0; 9];
        for x in &mut v {
            *x = r.f64()?;
        }
        tr.accum = TrainMeans {
            model: LossParts {
                rew: v[0],
                con: v[1],
                rec: v[2],
                obs: v[3],
                total: v[4],
            },
            actor_loss: v[5],
            critic_loss: v[6],
            entropy: v[7],
            scale: v[8],
            updates: r.u64()? as usize,
        };
        tr.episode = tr.read_records(&mut r)?;
        let episodes = r.u64()?;
        for _ in 0..episodes {
            let ep = tr.read_records(&mut r)?;
            tr.replay.add(ep)?;
        }
        r.finish()?;
        Ok(tr)
    }
}
