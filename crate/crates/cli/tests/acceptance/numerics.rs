//! Criteria that need no training run: gradients, scheduler, InfoNCE,
//! λ-returns, the free-bits gate, stop-gradient partition and PCA.

use ape_cli::pca::pca_project;
use ape_core::agent::{actor_loss, critic_loss, lambda_return};
use ape_core::encoder::EncoderConfig;
use ape_core::moco::{info_nce, l2_normalize};
use ape_core::rng::stream;
use ape_core::scheduler::feedback_probs;
use ape_core::world_model::{categorical_kl, kl_balanced, SeqBatch, WorldModel, WorldModelConfig};
use ape_tensor::gradcheck::check;
use ape_tensor::{Bound, ParamStore, Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use super::Verdict;

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut dyn RngCore) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Pushes every coordinate of `y` into a scalar through fixed random weights.
fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = y.tape().constant(random(&y.shape(), -1.0, 1.0, &mut stream(seed, &[99])));
    Ok(y.mul(w)?.sum())
}

/// Moves values off a kink at `at` by at least `gap`.
fn avoid(mut t: Tensor<f64>, at: f64, gap: f64) -> Tensor<f64> {
    for v in t.data_mut() {
        if (*v - at).abs() < gap {
            let side = if *v < at { -1.0 } else { 1.0 };
            *v = at + 2.0 * gap * side;
        }
    }
    t
}

fn lift<T>(r: ape_core::Result<T>) -> Result<T> {
    r.map_err(|e| ape_tensor::TensorError::InvalidArgument(e.to_string()))
}

type Loss = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

struct Case {
    name: &'static str,
    build: Box<dyn Fn(u64, &mut dyn RngCore) -> (Vec<Tensor<f64>>, Box<Loss>)>,
}

fn case<B>(name: &'static str, build: B) -> Case
where
    B: Fn(u64, &mut dyn RngCore) -> (Vec<Tensor<f64>>, Box<Loss>) + 'static,
{
    Case {
        name,
        build: Box::new(build),
    }
}

fn dim(rng: &mut dyn RngCore, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn unary(name: &'static str, lo: f64, hi: f64, kink: Option<f64>, f: fn(Var<'_, f64>) -> Var<'_, f64>) -> Case {
    case(name, move |seed, rng| {
        let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
        let mut x = random(&shape, lo, hi, rng);
        if let Some(k) = kink {
            x = avoid(x, k, 0.05);
        }
        (vec![x], Box::new(move |_, v| project(f(v[0]), seed)))
    })
}

fn binary(name: &'static str, f: for<'t> fn(Var<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>) -> Case {
    case(name, move |seed, rng| {
        let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
        let x = random(&[a, b, c], 0.5, 2.0, rng);
        // broadcasting operand on odd seeds
        let y = if seed % 2 == 1 { random(&[b, 1], 0.5, 2.0, rng) } else { random(&[a, b, c], 0.5, 2.0, rng) };
        (vec![x, y], Box::new(move |_, v| project(f(v[0], v[1])?, seed)))
    })
}

fn op_cases() -> Vec<Case> {
    vec![
        binary("add", |a, b| a.add(b)),
        binary("sub", |a, b| a.sub(b)),
        binary("mul", |a, b| a.mul(b)),
        binary("div", |a, b| a.div(b)),
        unary("exp", -2.0, 2.0, None, |x| x.exp()),
        unary("ln", 0.2, 3.0, None, |x| x.ln()),
        unary("sqrt", 0.2, 3.0, None, |x| x.sqrt()),
        unary("tanh", -2.0, 2.0, None, |x| x.tanh()),
        unary("sigmoid", -4.0, 4.0, None, |x| x.sigmoid()),
        unary("softplus", -4.0, 4.0, None, |x| x.softplus()),
        unary("relu", -2.0, 2.0, Some(0.0), |x| x.relu()),
        unary("silu", -3.0, 3.0, None, |x| x.silu()),
        unary("neg", -3.0, 3.0, None, |x| x.neg()),
        unary("square", -3.0, 3.0, None, |x| x.square()),
        unary("add_scalar", -3.0, 3.0, None, |x| x.add_scalar(0.7)),
        unary("scale", -3.0, 3.0, None, |x| x.scale(-1.3)),
        unary("clamp_min", -1.0, 3.0, Some(1.0), |x| x.clamp_min(1.0)),
        unary("sum", -2.0, 2.0, None, |x| x.exp().sum()),
        unary("stop_gradient", -2.0, 2.0, None, |x| x.stop_gradient().mul(x.exp()).unwrap()),
        unary("mean", -2.0, 2.0, None, |x| x.exp().mean()),
        case("matmul", |seed, rng| {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let inputs = vec![random(&[m, k], -1.0, 1.0, rng), random(&[k, n], -1.0, 1.0, rng)];
            (inputs, Box::new(move |_, v| project(v[0].matmul(v[1])?, seed)))
        }),
        case("transpose", |seed, rng| {
            let x = random(&[dim(rng, 1, 4), dim(rng, 1, 4)], -1.0, 1.0, rng);
            (vec![x], Box::new(move |_, v| project(v[0].transpose()?, seed)))
        }),
        case("dense", |seed, rng| {
            let (b, i, o) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 5));
            let inputs = vec![random(&[b, i], -1.0, 1.0, rng), random(&[i, o], -1.0, 1.0, rng), random(&[o], -1.0, 1.0, rng)];
            (inputs, Box::new(move |_, v| project(v[0].dense(v[1], Some(v[2]))?, seed)))
        }),
        case("conv2d", |seed, rng| {
            let (b, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = dim(rng, 1, 3);
            let (s, p) = (dim(rng, 1, 2), dim(rng, 0, 1));
            let (hgt, wid) = (dim(rng, k, 6), dim(rng, k, 6));
            let inputs = vec![
                random(&[b, ci, hgt, wid], -1.0, 1.0, rng),
                random(&[co, ci, k, k], -1.0, 1.0, rng),
                random(&[co], -1.0, 1.0, rng),
            ];
            (inputs, Box::new(move |_, v| project(v[0].conv2d(v[1], Some(v[2]), (s, s), (p, p))?, seed)))
        }),
        case("conv_transpose2d", |seed, rng| {
            let (b, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let (k, s) = (dim(rng, 2, 4), dim(rng, 1, 2));
            let p = dim(rng, 0, (k - 1) / 2);
            let inputs = vec![
                random(&[b, ci, dim(rng, 1, 4), dim(rng, 1, 4)], -1.0, 1.0, rng),
                random(&[ci, co, k, k], -1.0, 1.0, rng),
                random(&[co], -1.0, 1.0, rng),
            ];
            (inputs, Box::new(move |_, v| project(v[0].conv_transpose2d(v[1], Some(v[2]), (s, s), (p, p))?, seed)))
        }),
        case("softmax", |seed, rng| {
            let x = random(&[dim(rng, 1, 3), dim(rng, 2, 5)], -2.0, 2.0, rng);
            let axis = (seed % 2) as usize;
            (vec![x], Box::new(move |_, v| project(v[0].softmax(axis)?, seed)))
        }),
        case("log_softmax", |seed, rng| {
            let x = random(&[dim(rng, 1, 3), dim(rng, 2, 5)], -2.0, 2.0, rng);
            let axis = (seed % 2) as usize;
            (vec![x], Box::new(move |_, v| project(v[0].log_softmax(axis)?, seed)))
        }),
        case("layer_norm", |seed, rng| {
            let (b, d) = (dim(rng, 1, 4), dim(rng, 2, 6));
            let inputs = vec![random(&[b, d], -2.0, 2.0, rng), random(&[d], 0.5, 1.5, rng), random(&[d], -0.5, 0.5, rng)];
            (inputs, Box::new(move |_, v| project(v[0].layer_norm(Some(v[1]), Some(v[2]), 1e-5)?, seed)))
        }),
        case("reshape", |seed, rng| {
            let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let x = random(&[a, b], -1.0, 1.0, rng);
            (vec![x], Box::new(move |_, v| project(v[0].reshape(&[b, a])?, seed)))
        }),
        case("concat", |seed, rng| {
            let a = dim(rng, 1, 3);
            let inputs = vec![random(&[a, dim(rng, 1, 3)], -1.0, 1.0, rng), random(&[a, dim(rng, 1, 3)], -1.0, 1.0, rng)];
            (inputs, Box::new(move |_, v| project(Var::concat(&[v[0], v[1]], 1)?, seed)))
        }),
        case("slice", |seed, rng| {
            let (a, b) = (dim(rng, 1, 3), dim(rng, 2, 6));
            let start = dim(rng, 0, b - 1);
            let len = dim(rng, 1, b - start);
            let x = random(&[a, b], -1.0, 1.0, rng);
            (vec![x], Box::new(move |_, v| project(v[0].slice(1, start, len)?, seed)))
        }),
        case("sum_axis", |seed, rng| {
            let x = random(&[dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)], -1.0, 1.0, rng);
            let axis = (seed % 3) as usize;
            (vec![x], Box::new(move |_, v| project(v[0].sum_axis(axis)?, seed)))
        }),
        case("mean_axis", |seed, rng| {
            let x = random(&[dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)], -1.0, 1.0, rng);
            let axis = (seed % 3) as usize;
            (vec![x], Box::new(move |_, v| project(v[0].mean_axis(axis)?, seed)))
        }),
    ]
}

fn tiny_world_model(free_bits: f64, seed: u64) -> (WorldModel, ParamStore<f64>) {
    let wc = WorldModelConfig {
        deter: 5,
        hidden: 4,
        groups: 2,
        classes: 3,
        head_units: 4,
        head_layers: 1,
        decoder_channels: vec![2],
        free_bits,
        ..WorldModelConfig::default()
    };
    let ec = EncoderConfig {
        channels: vec![2, 2],
        strides: vec![2, 1],
        kernel: 3,
        input_size: 4,
    };
    let mut store = ParamStore::new();
    let wm = WorldModel::new(&mut store, &wc, &ec, 3, &mut stream(seed, &[1])).unwrap();
    // push every parameter away from zero so no head starts degenerate
    let mut rng = stream(seed, &[2]);
    for i in 0..store.len() {
        let shape = store.value(i).shape().to_vec();
        let noise = random(&shape, -0.3, 0.3, &mut rng);
        store.value_mut(i).axpy(1.0, &noise);
    }
    (wm, store)
}

fn seq_batch(wm: &WorldModel, len: usize, b: usize, rng: &mut dyn RngCore) -> SeqBatch<f64> {
    let n = len * b;
    let s = wm.obs_size;
    let obs = random(&[n, 3, s, s], 0.0, 1.0, rng);
    let mut actions = Tensor::zeros(&[n, wm.action_count]);
    for i in b..n {
        let a = rng.random_range(0..wm.action_count);
        actions.data_mut()[i * wm.action_count + a] = 1.0;
    }
    SeqBatch {
        length: len,
        batch: b,
        enc_input: obs.clone(),
        from_stage: 0,
        obs,
        actions,
        rewards: random(&[n], -2.0, 2.0, rng),
        conts: Tensor::new(&[n], (0..n).map(|_| f64::from(rng.random_bool(0.8) as u8)).collect()).unwrap(),
    }
}

/// Normalised distributions `[b, groups, classes]` from random logits.
fn dists(b: usize, g: usize, c: usize, spread: f64, rng: &mut dyn RngCore) -> Tensor<f64> {
    let logits = random(&[b, g, c], -spread, spread, rng);
    let mut out = logits.clone();
    for (src, dst) in logits.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        let z: f64 = src.iter().map(|v| v.exp()).sum();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s.exp() / z;
        }
    }
    out
}

fn kl_values(p: &Tensor<f64>, q: &Tensor<f64>) -> Vec<f64> {
    let tape = Tape::new();
    let kl = categorical_kl(tape.constant(p.clone()), tape.constant(q.clone())).unwrap();
    kl.value().data().to_vec()
}

fn composite_cases() -> Vec<Case> {
    vec![
        case("InfoNCE", |_, rng| {
            let (b, d, k) = (dim(rng, 1, 4), dim(rng, 2, 6), dim(rng, 1, 8));
            let queue = random(&[k, d], -1.0, 1.0, rng);
            let tau = rng.random_range(0.1..1.0);
            let inputs = vec![random(&[b, d], -1.0, 1.0, rng), random(&[b, d], -1.0, 1.0, rng)];
            let loss: Box<Loss> = Box::new(move |t, v| {
                let queue = lift(l2_normalize(t.constant(queue.clone())))?.value().as_ref().clone();
                lift(info_nce(lift(l2_normalize(v[0]))?, lift(l2_normalize(v[1]))?, &queue, tau))
            });
            (inputs, loss)
        }),
        case("balanced KL", |_, rng| {
            let (b, g, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 4));
            // logits rather than probabilities as inputs keeps perturbed
            // distributions normalised; resample away from the free-bits kink
            let (post, prior) = loop {
                let post = random(&[b, g, c], -3.0, 3.0, rng);
                let prior = random(&[b, g, c], -3.0, 3.0, rng);
                let tape = Tape::new();
                let kl = categorical_kl(
                    tape.constant(post.clone()).softmax(2).unwrap(),
                    tape.constant(prior.clone()).softmax(2).unwrap(),
                )
                .unwrap();
                if kl.value().data().iter().all(|k| (k - 1.0).abs() > 0.01) {
                    break (post, prior);
                }
            };
            let loss: Box<Loss> = Box::new(|_, v| lift(kl_balanced(v[0].softmax(2)?, v[1].softmax(2)?, 0.5, 0.1, 1.0)));
            (vec![post, prior], loss)
        }),
        case("world-model total", |seed, rng| {
            let free_bits = if seed % 2 == 0 { 1.0 } else { 0.0 };
            let (wm, store) = tiny_world_model(free_bits, seed);
            let batch = seq_batch(&wm, dim(rng, 1, 3), dim(rng, 1, 2), rng);
            let inputs = store.iter().map(|(_, t)| t.clone()).collect();
            let loss: Box<Loss> = Box::new(move |_, v| {
                let p = Bound::from_vars(v.to_vec());
                Ok(lift(wm.loss(&p, &batch, None))?.total)
            });
            (inputs, loss)
        }),
        case("actor", |_, rng| {
            let (n, a) = (dim(rng, 1, 6), dim(rng, 2, 5));
            let mut actions = Tensor::zeros(&[n, a]);
            for i in 0..n {
                actions.data_mut()[i * a + rng.random_range(0..a)] = 1.0;
            }
            let adv = random(&[n], -3.0, 3.0, rng);
            let (scale, eta) = (rng.random_range(0.5..4.0), rng.random_range(0.0..0.1));
            let loss: Box<Loss> = Box::new(move |t, v| {
                Ok(lift(actor_loss(v[0], t.constant(actions.clone()), t.constant(adv.clone()), scale, eta))?.0)
            });
            (vec![random(&[n, a], -2.0, 2.0, rng)], loss)
        }),
        case("critic", |_, rng| {
            let n = dim(rng, 1, 8);
            let (g, ema) = (random(&[n], -3.0, 3.0, rng), random(&[n], -3.0, 3.0, rng));
            let loss: Box<Loss> = Box::new(move |t, v| lift(critic_loss(v[0], t.constant(g.clone()), t.constant(ema.clone()))));
            (vec![random(&[n], -3.0, 3.0, rng)], loss)
        }),
    ]
}

pub fn gradient_suite() -> Verdict {
    let mut worst = (0.0, "");
    let mut failures = Vec::new();
    let mut checked = 0;
    for c in op_cases().into_iter().chain(composite_cases()) {
        for seed in 0..INSTANCES {
            let mut rng = stream(seed, &[c.name.len() as u64, 17]);
            let (inputs, f) = (c.build)(seed, &mut rng);
            let report = match check(&inputs, H, |t, v| f(t, v)) {
                Ok(r) => r,
                Err(e) => {
                    failures.push(format!("{} #{seed}: {e}", c.name));
                    continue;
                }
            };
            checked += 1;
            if report.max_rel_error > worst.0 {
                worst = (report.max_rel_error, c.name);
            }
            if report.max_rel_error >= GRAD_TOL {
                failures.push(format!("{} #{seed}: rel err {:.2e} at {:?}", c.name, report.max_rel_error, report.worst));
            }
        }
    }
    // a one-hot sample is piecewise constant, so the straight-through
    // estimator is checked by its defining rule instead: upstream passes as is
    for seed in 0..INSTANCES {
        let mut rng = stream(seed, &[53]);
        let tape = Tape::new();
        let shape = [dim(&mut rng, 1, 4), dim(&mut rng, 2, 5)];
        let x = tape.leaf(random(&shape, 0.1, 1.0, &mut rng), true);
        let w = random(&shape, -1.0, 1.0, &mut rng);
        let y = x.categorical_st(&mut rng).unwrap().mul(tape.constant(w.clone())).unwrap();
        if tape.backward(y.sum()).unwrap().wrt(x).data() != w.data() {
            failures.push(format!("straight-through #{seed}"));
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "{checked} checks, worst rel err {:.2e} ({}){}",
            worst.0,
            worst.1,
            failures.first().map(|f| format!("; first failure {f}")).unwrap_or_default()
        ),
    )
}

pub fn scheduler_suite() -> Verdict {
    let mut failures = Vec::new();
    for &n in &[2usize, 3, 5, 7] {
        let mut rng = stream(n as u64, &[23]);
        for i in 0..1000 {
            let acc: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let alpha = rng.random_range(0.01..5.0);
            let p = feedback_probs(&acc, alpha);
            if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                failures.push(format!("N={n} #{i}: sum {}", p.iter().sum::<f64>()));
            }
            for a in 0..n {
                for b in 0..n {
                    if acc[a] < acc[b] && p[a] <= p[b] {
                        failures.push(format!("N={n} #{i}: order not reversed"));
                    }
                }
            }
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<f64> = perm.iter().map(|&j| acc[j]).collect();
            let pp = feedback_probs(&permuted, alpha);
            if perm.iter().zip(&pp).any(|(&j, q)| (p[j] - q).abs() > 1e-12) {
                failures.push(format!("N={n} #{i}: not permutation equivariant"));
            }
            let c = rng.random::<f64>();
            if feedback_probs(&vec![c; n], alpha).iter().any(|q| (q - 1.0 / n as f64).abs() > 1e-12) {
                failures.push(format!("N={n} #{i}: uniform accuracies not a fixed point"));
            }
            let hardest = (0..n).min_by(|&a, &b| acc[a].total_cmp(&acc[b])).unwrap();
            let easiest = (0..n).max_by(|&a, &b| acc[a].total_cmp(&acc[b])).unwrap();
            let sharper = feedback_probs(&acc, alpha * rng.random_range(1.1..3.0));
            if sharper[hardest] < p[hardest] || sharper[easiest] > p[easiest] {
                failures.push(format!("N={n} #{i}: larger alpha did not sharpen"));
            }
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!("4000 vectors, {} violations{}", failures.len(), failures.first().map(|f| format!(": {f}")).unwrap_or_default()),
    )
}

fn nce(q: &[f64], k: &[f64], queue: &[Vec<f64>], tau: f64) -> f64 {
    let tape = Tape::<f64>::new();
    let d = q.len();
    let qv = tape.constant(Tensor::from_f64(&[1, d], q).unwrap());
    let kv = tape.constant(Tensor::from_f64(&[1, d], k).unwrap());
    let flat: Vec<f64> = queue.iter().flatten().copied().collect();
    info_nce(qv, kv, &Tensor::from_f64(&[queue.len(), d], &flat).unwrap(), tau)
        .unwrap()
        .item()
}

fn basis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

pub fn infonce_closed_forms() -> Verdict {
    let e1 = basis(9, 0);
    let tied = nce(&e1, &e1, &[e1.clone()], 0.2);
    let orthogonal: Vec<Vec<f64>> = (1..9).map(|i| basis(9, i)).collect();
    let sharp = nce(&e1, &e1, &orthogonal, 0.2);
    let flat = nce(&e1, &e1, &orthogonal, 1e3);
    let sharp_ref = (1.0 + 8.0 * (-5.0f64).exp()).ln();
    let ok = (tied - 2f64.ln()).abs() < 1e-6
        && (sharp - sharp_ref).abs() < 1e-6
        && (sharp - 0.0525010).abs() < 1e-6
        && (flat - 9f64.ln()).abs() < 1e-3;
    Verdict::new(ok, format!("ln2 case {tied:.7}, 8 negatives {sharp:.7} (closed form {sharp_ref:.7}), τ=1e3 {flat:.5}"))
}

/// `G_t^λ` as the λ-weighted mixture of every n-step return, each expanded
/// as an explicit sum.
fn lambda_oracle(r: &[f64], c: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let t_len = r.len();
    let n_step = |t: usize, n: usize| {
        let mut total = 0.0;
        let mut disc = 1.0;
        for k in 0..n {
            total += disc * r[t + k];
            disc *= gamma * c[t + k];
        }
        total + disc * v[t + n]
    };
    let mut out: Vec<f64> = (0..t_len)
        .map(|t| {
            let horizon = t_len - t;
            let mixed: f64 = (1..horizon).map(|n| (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(t, n)).sum();
            mixed + lambda.powi(horizon as i32 - 1) * n_step(t, horizon)
        })
        .collect();
    out.push(v[t_len]);
    out
}

pub fn lambda_return_oracle() -> Verdict {
    let mut rng = stream(4, &[31]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=10);
        let r: Vec<f64> = (0..t).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..t).map(|_| f64::from(rng.random_bool(0.7) as u8)).collect();
        let v: Vec<f64> = (0..=t).map(|_| rng.random_range(-5.0..5.0)).collect();
        let gamma = rng.random_range(0.5..1.0);
        let lambda = rng.random_range(0.0..1.0);
        let g = lambda_return(&r, &c, &v, gamma, lambda).unwrap();
        let o = lambda_oracle(&r, &c, &v, gamma, lambda);
        worst = g.iter().zip(&o).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    let hand = lambda_return(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0, 10.0], 0.9, 0.95).unwrap();
    let hand_ok = hand.iter().zip([9.55, 10.0, 10.0]).all(|(a, b)| (a - b).abs() < 1e-9);
    Verdict::new(worst < 1e-9 && hand_ok, format!("1000 sequences, max |Δ| {worst:.1e}, worked example {hand:?}"))
}

fn kl_grads(post: &Tensor<f64>, prior: &Tensor<f64>) -> (f64, Tensor<f64>, Tensor<f64>) {
    let tape = Tape::new();
    let (a, b) = (tape.leaf(post.clone(), true), tape.leaf(prior.clone(), true));
    let l = kl_balanced(a, b, 0.5, 0.1, 1.0).unwrap();
    let g = tape.backward(l).unwrap();
    (l.item(), g.wrt(a), g.wrt(b))
}

pub fn free_bits_gate() -> Verdict {
    let mut rng = stream(5, &[37]);
    let (mut below, mut above, mut bad) = (0, 0, Vec::new());
    while below < 200 || above < 200 {
        let spread = rng.random_range(0.2..4.0);
        let post = dists(1, rng.random_range(1..4), rng.random_range(2..6), spread, &mut rng);
        let prior = dists(1, post.shape()[1], post.shape()[2], spread, &mut rng);
        let kl = kl_values(&post, &prior)[0];
        let (_, gp, gq) = kl_grads(&post, &prior);
        let zero = gp.data().iter().chain(gq.data()).all(|&x| x == 0.0);
        if kl < 1.0 && below < 200 {
            below += 1;
            if !zero {
                bad.push(format!("KL {kl:.3} leaked gradient"));
            }
        } else if kl > 1.0 && above < 200 {
            above += 1;
            if zero {
                bad.push(format!("KL {kl:.3} produced no gradient"));
            }
        }
    }
    let post = Tensor::from_f64(&[1, 1, 2], &[0.999, 0.001]).unwrap();
    let prior = Tensor::from_f64(&[1, 1, 2], &[0.001, 0.999]).unwrap();
    let kl = kl_values(&post, &prior)[0];
    let (l_obs, ..) = kl_grads(&post, &prior);
    let example_ok = (kl - 6.8929).abs() < 1e-4 && (l_obs - 0.6 * kl).abs() < 1e-12 && (l_obs - 4.1358).abs() < 1e-4;
    Verdict::new(
        bad.is_empty() && example_ok,
        format!("200 pairs below / 200 above the floor, {} violations; example KL {kl:.5}, L_obs {l_obs:.5}", bad.len()),
    )
}

pub fn stop_gradient_partition() -> Verdict {
    let (wm, store) = tiny_world_model(0.0, 3);
    // single-step windows: over longer windows later priors also depend on
    // earlier posterior samples through the recurrent state
    let batch = seq_batch(&wm, 1, 6, &mut stream(3, &[41]));
    let group = |prefix: &str| -> Vec<usize> { (0..store.len()).filter(|&i| store.name(i).starts_with(prefix)).collect() };
    let (post_params, prior_params) = (group("wm.post."), group("wm.prior."));
    let grads = |beta1: f64, beta2: f64| {
        let tape = Tape::new();
        let p = store.bind_all(&tape);
        let embed = wm.embed(&p, tape.constant(batch.enc_input.clone()), 0).unwrap();
        let mut state = wm.initial(&tape, batch.batch);
        let (mut posts, mut priors) = (Vec::new(), Vec::new());
        for t in 0..batch.length {
            let action = tape.constant(Tensor::new(&[batch.batch, 3], batch.actions.data()[t * batch.batch * 3..(t + 1) * batch.batch * 3].to_vec()).unwrap());
            let step = wm.observe_step(&p, state, action, embed.slice(0, t * batch.batch, batch.batch).unwrap(), None).unwrap();
            posts.push(step.post);
            priors.push(step.prior);
            state = step.state;
        }
        let l = kl_balanced(Var::concat(&posts, 0).unwrap(), Var::concat(&priors, 0).unwrap(), beta1, beta2, 0.0).unwrap();
        p.grads(&tape.backward(l).unwrap())
    };
    let norm = |g: &[Option<Tensor<f64>>], ids: &[usize]| -> f64 {
        ids.iter()
            .filter_map(|&i| g[i].as_ref())
            .map(|t| t.data().iter().map(|x| x.abs()).sum::<f64>())
            .sum()
    };
    let term1 = grads(1.0, 0.0);
    let term2 = grads(0.0, 1.0);
    let (t1_post, t1_prior) = (norm(&term1, &post_params), norm(&term1, &prior_params));
    let (t2_post, t2_prior) = (norm(&term2, &post_params), norm(&term2, &prior_params));
    let ok = t1_post == 0.0 && t2_prior == 0.0 && t1_prior > 0.0 && t2_post > 0.0;
    Verdict::new(
        ok,
        format!("term 1: |∇post| {t1_post:e}, |∇prior| {t1_prior:.3e}; term 2: |∇post| {t2_post:.3e}, |∇prior| {t2_prior:e}"),
    )
}

pub fn pca_oracle() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut rng = stream(11, &[43]);
    for _ in 0..20 {
        let scales: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..3.0)).collect();
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let proj = pca_project(&rows, 5).unwrap();
        let m = nalgebra::DMatrix::from_fn(50, 5, |i, j| rows[i][j]);
        let centred = &m - nalgebra::DMatrix::from_fn(50, 5, |_, j| m.column(j).mean());
        let cov = centred.transpose() * &centred / 49.0;
        let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        worst = proj.variances.iter().zip(&eig).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Verdict::new(worst < 1e-6, format!("20 random 50×5 matrices, max variance error {worst:.1e}"))
}
