//! Momentum-contrastive pretraining driven by the adaptive scheduler.

use ape_tensor::nn::{LayerNorm, Linear};
use ape_tensor::{Optimizer, OptimizerConfig, ParamStore, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section};
use crate::encoder::{images_to_tensor, Encoder, EncoderConfig, Readout};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, tag};
use crate::scheduler::{assign_items, partition_batch, SchedulerState};
use crate::vision::{make_views, CompositionSpec, Image, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MocoConfig {
    pub batch_size: usize,
    pub queue_size: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    /// Layer normalisation between the projection layers.
    pub proj_norm: bool,
    pub temperature: f64,
    /// Key-encoder momentum `m`.
    pub momentum: f64,
    pub lr: f64,
    /// Heavy-ball momentum of the SGD optimizer.
    pub sgd_momentum: f64,
    pub weight_decay: f64,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            queue_size: 4096,
            proj_hidden: 256,
            proj_dim: 64,
            proj_norm: true,
            temperature: 0.2,
            momentum: 0.99,
            lr: 3e-2,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Row-wise division by the Euclidean norm.
pub fn l2_normalize<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let norm = x
        .square()
        .sum_axis(1)?
        .reshape(&[s[0], 1])?
        .add_scalar(1e-12)
        .sqrt();
    Ok(x.div(norm)?)
}

/// Logits `[q.k+, q.k-_1, ..., q.k-_K] / tau` for each query row.
/// `queue_t` is the transposed queue `[d, K]`.
pub fn contrastive_logits<'t, T: Real>(q: Var<'t, T>, k: Var<'t, T>, queue_t: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be > 0, got {tau}")));
    }
    let b = q.shape()[0];
    let pos = q.mul(k)?.sum_axis(1)?.reshape(&[b, 1])?;
    let neg = q.matmul(queue_t)?;
    Ok(Var::concat(&[pos, neg], 1)?.scale(1.0 / tau))
}

/// Mean InfoNCE over the batch. Gradients flow into `q` and `k`; the queue
/// is a constant.
pub fn info_nce<'t, T: Real>(q: Var<'t, T>, k: Var<'t, T>, queue: &Tensor<T>, tau: f64) -> Result<Var<'t, T>> {
    let queue_t = q.tape().constant(transpose(queue));
    let logits = contrastive_logits(q, k, queue_t, tau)?;
    Ok(logits.log_softmax(1)?.slice(1, 0, 1)?.mean().neg())
}

fn transpose<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).unwrap()
}

/// Number of rows whose positive logit (column 0) strictly beats every
/// negative. Ties count as failures.
pub fn count_correct<T: Real>(logits: &Tensor<T>) -> usize {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .filter(|row| row[1..].iter().all(|&neg| row[0] > neg))
        .count()
}

/// Fraction of queries ranking their positive strictly first.
pub fn pretext_accuracy<T: Real>(q: &Tensor<T>, k: &Tensor<T>, queue: &Tensor<T>, tau: f64) -> Result<f64> {
    let tape = Tape::new();
    let logits = contrastive_logits(
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(transpose(queue)),
        tau,
    )?;
    Ok(count_correct(&logits.value()) as f64 / q.shape()[0] as f64)
}

/// `sum_i losses_i * p_i`.
pub fn weighted_epoch_loss(losses: &[f64], p: &[f64]) -> Result<f64> {
    if losses.len() != p.len() {
        return Err(invalid(format!("{} losses for {} probabilities", losses.len(), p.len())));
    }
    Ok(losses.iter().zip(p).map(|(l, w)| l * w).sum())
}

/// `key <- m * key + (1 - m) * query`, parameter by parameter.
pub fn momentum_update<T: Real>(key: &mut ParamStore<T>, query: &ParamStore<T>, m: f64) -> Result<()> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(invalid(format!("key momentum must lie in (0, 1], got {m}")));
    }
    if key.len() != query.len() {
        return Err(invalid("key and query encoders differ in structure"));
    }
    let (m, rest) = (T::of(m), T::of(1.0 - m));
    for i in 0..key.len() {
        let q = query.value(i);
        let k = key.value_mut(i);
        if k.shape() != q.shape() {
            return Err(invalid(format!("shape mismatch for `{}`", query.name(i))));
        }
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = m * *kv + rest * qv;
        }
    }
    Ok(())
}

/// Ring buffer of unit-norm negative keys.
#[derive(Clone, Debug, PartialEq)]
pub struct Queue {
    pub keys: Tensor<f32>,
    pub ptr: usize,
}

impl Queue {
    /// Pseudorandom unit rows.
    pub fn new<R: Rng + ?Sized>(size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(invalid("queue size and key dimension must be positive"));
        }
        let mut data: Vec<f32> = (0..size * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(dim) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            keys: Tensor::new(&[size, dim], data)?,
            ptr: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.keys.shape()[1]
    }

    /// Overwrites rows starting at the pointer, wrapping around.
    pub fn enqueue(&mut self, new_keys: &Tensor<f32>) -> Result<()> {
        let (k, d) = (self.len(), self.dim());
        let s = new_keys.shape();
        if s.len() != 2 || s[1] != d || s[0] > k {
            return Err(invalid(format!("cannot enqueue {s:?} into queue [{k}, {d}]")));
        }
        for row in new_keys.data().chunks(d) {
            self.keys.data_mut()[self.ptr * d..(self.ptr + 1) * d].copy_from_slice(row);
            self.ptr = (self.ptr + 1) % k;
        }
        Ok(())
    }
}

/// Query network: trunk, pooled readout, two-layer projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct MocoModel {
    pub encoder: Encoder,
    pub proj1: Linear,
    pub norm: Option<LayerNorm>,
    pub proj2: Linear,
}

impl MocoModel {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        enc: &EncoderConfig,
        cfg: &MocoConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, enc, rng)?;
        let width = encoder.feature_dim(Readout::Pooled);
        let proj1 = Linear::new(store, "proj.0", width, cfg.proj_hidden, rng);
        let norm = cfg.proj_norm.then(|| LayerNorm::new(store, "proj.norm", cfg.proj_hidden));
        let proj2 = Linear::new(store, "proj.1", cfg.proj_hidden, cfg.proj_dim, rng);
        Ok(Self {
            encoder,
            proj1,
            norm,
            proj2,
        })
    }

    /// Unit-norm embedding of an image batch.
    pub fn embed<'t, T: Real>(&self, p: &ape_tensor::Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let f = self.encoder.encode(p, x, Readout::Pooled)?;
        let mut h = self.proj1.forward(p, f)?;
        if let Some(norm) = &self.norm {
            h = norm.forward(p, h)?;
        }
        let h = h.relu();
        l2_normalize(self.proj2.forward(p, h)?)
    }

    pub fn head_params(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = [self.proj1, self.proj2]
            .iter()
            .flat_map(|l| [l.weight.0, l.bias.0])
            .collect();
        if let Some(n) = &self.norm {
            ids.extend([n.gain.0, n.shift.0]);
        }
        ids
    }
}

/// Everything that evolves during pretraining.
#[derive(Clone, Debug)]
pub struct PretrainState {
    pub model: MocoModel,
    pub query: ParamStore<f32>,
    pub key: ParamStore<f32>,
    pub queue: Queue,
    pub optimizer: Optimizer<f32>,
}

impl PretrainState {
    pub fn new(enc: &EncoderConfig, cfg: &MocoConfig, seed: u64) -> Result<Self> {
        let mut query = ParamStore::new();
        let model = MocoModel::new(&mut query, enc, cfg, &mut stream(seed, &[tag::INIT]))?;
        let queue = Queue::new(cfg.queue_size, cfg.proj_dim, &mut stream(seed, &[tag::QUEUE]))?;
        let optimizer = Optimizer::new(OptimizerConfig::sgd(cfg.lr, cfg.sgd_momentum, cfg.weight_decay), query.len());
        Ok(Self {
            model,
            key: query.clone(),
            query,
            queue,
            optimizer,
        })
    }

    /// Query trunk, projection head, key network, queue and optimizer.
    pub fn write_sections(&self, ck: &mut Checkpoint) {
        ck.put(self.model.encoder.to_section(&self.query));
        let mut head = Section::new("projection");
        for id in self.model.head_params() {
            head.push_tensor(self.query.name(id), self.query.value(id).clone());
        }
        ck.put(head);
        ck.put(Section::from_store("key_encoder", &self.key));
        let mut queue = Section::new("queue");
        queue.push_tensor("keys", self.queue.keys.clone());
        queue.push_bytes("ptr", (self.queue.ptr as u64).to_le_bytes().to_vec());
        ck.put(queue);
        let mut opt = Section::new("optimizer");
        opt.push_optimizer("pretrain", &self.optimizer.state);
        ck.put(opt);
    }

    /// Inverse of [`PretrainState::write_sections`] for the same configs.
    pub fn restore(enc: &EncoderConfig, cfg: &MocoConfig, ck: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(enc, cfg, 0)?;
        state.model.encoder.load_pretrained(ck, &mut state.query)?;
        let head = ck.section("projection")?;
        for id in state.model.head_params() {
            let t = head.tensor(state.query.name(id))?;
            if t.shape() != state.query.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "projection `{}` has shape {:?}, model expects {:?}",
                    state.query.name(id),
                    t.shape(),
                    state.query.value(id).shape()
                )));
            }
            state.query.set(id, t.clone())?;
        }
        ck.section("key_encoder")?.load_into(&mut state.key)?;
        let queue = ck.section("queue")?;
        let keys = queue.tensor("keys")?;
        if keys.shape() != state.queue.keys.shape() {
            return Err(Error::Checkpoint(format!(
                "queue {:?} does not match configured {:?}",
                keys.shape(),
                state.queue.keys.shape()
            )));
        }
        let ptr = queue.bytes("ptr")?;
        let ptr = u64::from_le_bytes(ptr.try_into().map_err(|_| Error::Checkpoint("bad queue pointer".into()))?) as usize;
        if ptr >= keys.shape()[0] {
            return Err(Error::Checkpoint("queue pointer out of range".into()));
        }
        state.queue = Queue { keys: keys.clone(), ptr };
        state.optimizer.state = ck.section("optimizer")?.read_optimizer("pretrain")?;
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretextMetrics {
    /// Mean InfoNCE per composition over the epoch.
    pub loss: Vec<f64>,
    pub acc: Vec<f64>,
    pub counts: Vec<usize>,
    /// Probability-weighted loss across compositions.
    pub l_z: f64,
}

/// One pass over `data`. Each batch is split into per-composition
/// sub-batches by the scheduler's probabilities, losses are combined with
/// the same probabilities, then the query encoder steps, the key encoder
/// follows by momentum and the batch's keys enter the queue.
pub fn pretrain_epoch(
    state: &mut PretrainState,
    data: &[Sample],
    sched: &SchedulerState,
    comps: &[CompositionSpec],
    cfg: &MocoConfig,
    seed: u64,
    epoch: u64,
) -> Result<PretextMetrics> {
    let n = comps.len();
    if n != sched.n() {
        return Err(invalid(format!("{n} compositions but scheduler tracks {}", sched.n())));
    }
    if cfg.batch_size < n {
        return Err(invalid(format!("batch {} smaller than {n} compositions", cfg.batch_size)));
    }
    if cfg.batch_size > state.queue.len() {
        return Err(invalid("batch larger than the negative queue"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream(seed, &[tag::SHUFFLE, epoch]));
    let mut loss_sum = vec![0.0; n];
    let mut loss_weight = vec![0usize; n];
    let mut correct = vec![0usize; n];
    let mut counts = vec![0usize; n];
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < n {
            break;
        }
        let sizes = partition_batch(chunk.len(), &sched.p)?;
        let labels = assign_items(&sizes, &mut stream(seed, &[tag::PARTITION, epoch, b as u64]));
        let mut items: Vec<(usize, usize)> = chunk.iter().copied().zip(labels).collect();
        items.sort_by_key(|&(_, c)| c);
        let mut views_q = Vec::with_capacity(items.len());
        let mut views_k = Vec::with_capacity(items.len());
        for &(idx, c) in &items {
            let mut rng = stream(seed, &[tag::AUGMENT, epoch, idx as u64]);
            let (q, k) = make_views(&data[idx].image, &comps[c], &mut rng)?;
            views_q.push(q);
            views_k.push(k);
        }
        let stats = train_step(state, &views_q, &views_k, &sizes, &sched.p, cfg)?;
        for c in 0..n {
            loss_sum[c] += stats.loss[c] * sizes[c] as f64;
            loss_weight[c] += sizes[c];
            correct[c] += stats.correct[c];
            counts[c] += sizes[c];
        }
    }
    let loss: Vec<f64> = (0..n)
        .map(|c| if loss_weight[c] > 0 { loss_sum[c] / loss_weight[c] as f64 } else { 0.0 })
        .collect();
    let acc: Vec<f64> = (0..n)
        .map(|c| if counts[c] > 0 { correct[c] as f64 / counts[c] as f64 } else { 0.0 })
        .collect();
    let l_z = weighted_epoch_loss(&loss, &sched.p)?;
    Ok(PretextMetrics { loss, acc, counts, l_z })
}

struct StepStats {
    loss: Vec<f64>,
    correct: Vec<usize>,
}

/// Views are grouped by composition in the order given by `sizes`.
fn train_step(
    state: &mut PretrainState,
    views_q: &[Image],
    views_k: &[Image],
    sizes: &[usize],
    p: &[f64],
    cfg: &MocoConfig,
) -> Result<StepStats> {
    let keys = {
        let tape = Tape::new();
        let bound = state.key.bind_frozen(&tape);
        let x = tape.constant(images_to_tensor(&views_k.iter().collect::<Vec<_>>())?);
        state.model.embed(&bound, x)?.value()
    };
    let tape = Tape::new();
    let bound = state.query.bind_all(&tape);
    let x = tape.constant(images_to_tensor(&views_q.iter().collect::<Vec<_>>())?);
    let q = state.model.embed(&bound, x)?;
    let k = tape.constant_arc(keys.clone());
    let queue_t = tape.constant(transpose(&state.queue.keys));
    let mut total: Option<Var<'_, f32>> = None;
    let mut loss = Vec::with_capacity(sizes.len());
    let mut correct = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for (c, &size) in sizes.iter().enumerate() {
        let logits = contrastive_logits(q.slice(0, start, size)?, k.slice(0, start, size)?, queue_t, cfg.temperature)?;
        let l = logits.log_softmax(1)?.slice(1, 0, 1)?.mean().neg();
        let value = l.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { component: "info_nce" });
        }
        loss.push(value);
        correct.push(count_correct(&logits.value()));
        let weighted = l.scale(p[c]);
        total = Some(match total {
            Some(t) => t.add(weighted)?,
            None => weighted,
        });
        start += size;
    }
    let grads = tape.backward(total.expect("at least one composition"))?;
    let grads = bound.grads(&grads);
    drop(bound);
    state.optimizer.step(&mut state.query, grads)?;
    momentum_update(&mut state.key, &state.query, cfg.momentum)?;
    state.queue.enqueue(&keys)?;
    Ok(StepStats { loss, correct })
}
