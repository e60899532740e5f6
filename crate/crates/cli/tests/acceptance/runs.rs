//! Criteria that train: determinism and resume, pretraining efficacy,
//! scheduler behaviour and the RL ordering.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ape_cli::config::Schedule;
use ape_cli::metrics::Table;
use ape_cli::{cmd_pretrain, cmd_train_rl, EncoderSource, RunConfig};

use super::Verdict;

pub const SEEDS: [u64; 3] = [0, 1, 2];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    matches!((std::fs::read(a), std::fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

fn small_pretrain(epochs: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.data.samples_per_class = 12;
    cfg.moco.batch_size = 16;
    cfg.moco.queue_size = 64;
    cfg.encoder.channels = vec![4, 8, 8, 8];
    cfg.pretrain.epochs = epochs;
    cfg.pretrain.probe_every = 1;
    cfg.probe.epochs = 2;
    cfg
}

fn small_rl(env_steps: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.encoder.channels = vec![4, 8, 8, 8];
    cfg.world_model.deter = 16;
    cfg.world_model.hidden = 16;
    cfg.world_model.head_units = 16;
    cfg.world_model.decoder_channels = vec![4, 4, 4];
    cfg.agent.units = 16;
    cfg.rl.env_steps = env_steps;
    cfg.rl.warmup_steps = 100;
    cfg.rl.batch = 4;
    cfg.rl.length = 8;
    cfg.rl.train_ratio = 16.0;
    cfg.rl.eval_every = 100;
    cfg.rl.eval_episodes = 2;
    cfg.rl.episode_steps = 50;
    cfg
}

pub fn determinism_and_resume(dir: &Path) -> Verdict {
    let run = || -> ape_cli::Result<Vec<(&'static str, bool)>> {
        let full = small_pretrain(3);
        let a = cmd_pretrain(&full, &dir.join("pre_a"), None, None)?;
        let b = cmd_pretrain(&full, &dir.join("pre_b"), None, None)?;
        let cut = cmd_pretrain(&small_pretrain(2), &dir.join("pre_c"), None, None)?;
        let resumed = cmd_pretrain(&full, &dir.join("pre_c"), None, Some(&cut.checkpoint))?;

        let rl = |steps, sub: &str, resume: Option<&Path>| {
            cmd_train_rl(&small_rl(steps), &EncoderSource::RandomFrozen, None, &dir.join(sub), None, resume)
        };
        let x = rl(600, "rl_a", None)?;
        let y = rl(600, "rl_b", None)?;
        let part = rl(300, "rl_c", None)?;
        let rest = rl(600, "rl_c", Some(&part.checkpoint))?;
        Ok(vec![
            ("pretrain metrics repeat", same_bytes(&a.metrics, &b.metrics)),
            ("pretrain checkpoint repeats", same_bytes(&a.checkpoint, &b.checkpoint)),
            ("pretrain resume metrics", same_bytes(&a.metrics, &resumed.metrics)),
            ("pretrain resume checkpoint", same_bytes(&a.checkpoint, &resumed.checkpoint)),
            ("rl metrics repeat", same_bytes(&x.metrics, &y.metrics)),
            ("rl checkpoint repeats", same_bytes(&x.checkpoint, &y.checkpoint)),
            ("rl resume metrics", same_bytes(&x.metrics, &rest.metrics)),
            ("rl resume checkpoint", same_bytes(&x.checkpoint, &rest.checkpoint)),
        ])
    };
    match run() {
        Ok(checks) => {
            let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
            let detail = if failed.is_empty() {
                format!("{} byte-equality checks over pretrain and RL runs", checks.len())
            } else {
                format!("mismatch: {}", failed.join(", "))
            };
            Verdict::new(failed.is_empty(), detail)
        }
        Err(e) => Verdict::new(false, format!("run failed: {e}")),
    }
}

pub struct PretrainRun {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub random_probe: f64,
    pub final_probe: f64,
}

pub struct PretrainResults {
    pub adaptive: Vec<PretrainRun>,
    pub fixed: Vec<PretrainRun>,
    pub seconds: f64,
}

fn pretrain_arm(dir: &Path, schedule: Schedule) -> ape_cli::Result<Vec<PretrainRun>> {
    SEEDS
        .iter()
        .map(|&seed| {
            let mut cfg = RunConfig::desk();
            cfg.seed = seed;
            cfg.pretrain.schedule = schedule;
            let out = dir.join(format!("{}_{seed}", if schedule == Schedule::Adaptive { "adaptive" } else { "fixed" }));
            let report = cmd_pretrain(&cfg, &out, None, None)?;
            Ok(PretrainRun {
                seed,
                checkpoint: report.checkpoint,
                metrics: report.metrics,
                random_probe: report.initial_probe.unwrap_or(f64::NAN),
                final_probe: report.final_probe.unwrap_or(f64::NAN),
            })
        })
        .collect()
}

pub fn run_pretraining(dir: &Path) -> ape_cli::Result<PretrainResults> {
    let start = Instant::now();
    let adaptive = pretrain_arm(dir, Schedule::Adaptive)?;
    let fixed = pretrain_arm(dir, Schedule::Fixed)?;
    Ok(PretrainResults {
        adaptive,
        fixed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn pretraining_efficacy(r: &PretrainResults) -> Verdict {
    let probes = |runs: &[PretrainRun], f: fn(&PretrainRun) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let adaptive = probes(&r.adaptive, |p| p.final_probe);
    let random = probes(&r.adaptive, |p| p.random_probe);
    let fixed = probes(&r.fixed, |p| p.final_probe);
    let (a, rnd, f) = (mean(&adaptive), mean(&random), mean(&fixed));
    let ok = a >= rnd + 0.10 && a >= f && r.seconds < 1800.0;
    Verdict::new(
        ok,
        format!(
            "probe top-1: adaptive {a:.3} {adaptive:.3?}, random {rnd:.3} {random:.3?}, fixed {f:.3} {fixed:.3?}; {:.0}s",
            r.seconds
        ),
    )
}

pub fn scheduler_behaviour(r: &PretrainResults) -> Verdict {
    let (mut hits, mut ties, mut total) = (0, 0, 0);
    for run in &r.adaptive {
        let table = match Table::read(&run.metrics) {
            Ok(t) => t,
            Err(e) => return Verdict::new(false, format!("{}: {e}", run.metrics.display())),
        };
        let n = table.columns.iter().filter(|c| c.starts_with("acc_")).count();
        let cols = |prefix: &str| -> Vec<Vec<Option<f64>>> {
            (1..=n).map(|i| table.column(&format!("{prefix}_{i}")).unwrap_or_default()).collect()
        };
        let (acc, p) = (cols("acc"), cols("p"));
        // row e holds epoch e's accuracies and the p it was sampled with, so
        // the p chosen in response sits in row e + 1
        for e in 1..table.rows.len().saturating_sub(1) {
            let a: Option<Vec<f64>> = acc.iter().map(|c| c[e]).collect();
            let next: Option<Vec<f64>> = p.iter().map(|c| c[e + 1]).collect();
            let (Some(a), Some(next)) = (a, next) else { continue };
            total += 1;
            let lowest = a.iter().copied().fold(f64::INFINITY, f64::min);
            if a.iter().filter(|&&x| x == lowest).count() > 1 {
                ties += 1;
                continue;
            }
            let hardest = a.iter().position(|&x| x == lowest).unwrap();
            if next.iter().enumerate().all(|(i, &q)| i == hardest || q < next[hardest]) {
                hits += 1;
            }
        }
    }
    let scored = total - ties;
    let ok = scored > 0 && hits as f64 >= 0.95 * scored as f64;
    Verdict::new(ok, format!("{hits}/{scored} epochs put the highest p on the lowest-accuracy composition ({ties} ties excluded)"))
}

struct RlArm {
    returns: Vec<f64>,
    finite: bool,
    decreasing: bool,
    quintiles: (f64, f64),
}

fn rl_arm(cfg: &RunConfig, source: EncoderSource, out: &Path) -> ape_cli::Result<RlArm> {
    let report = cmd_train_rl(cfg, &source, Some(cfg.freeze_stages), out, None, None)?;
    let table = Table::read(&report.metrics)?;
    let returns: Vec<f64> = table.column("episode_return").unwrap_or_default().into_iter().flatten().collect();
    let losses: Vec<Vec<f64>> = ["model_loss", "actor_loss", "critic_loss"]
        .iter()
        .map(|c| table.column(c).unwrap_or_default().into_iter().flatten().collect())
        .collect();
    let finite = losses.iter().flatten().chain(&returns).all(|v| v.is_finite());
    let model = &losses[0];
    let q = model.len() / 5;
    let quintiles = if q == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (mean(&model[..q]), mean(&model[model.len() - q..]))
    };
    Ok(RlArm {
        returns,
        finite,
        decreasing: quintiles.1 < quintiles.0,
        quintiles,
    })
}

/// Mean evaluation return over every evaluation of the run (the area under
/// the learning curve), averaged over seeds.
pub fn rl_ordering(dir: &Path, pretrained: &PretrainResults) -> Verdict {
    let start = Instant::now();
    let run = || -> ape_cli::Result<(Vec<RlArm>, Vec<RlArm>)> {
        let (mut ape, mut random) = (Vec::new(), Vec::new());
        for p in &pretrained.adaptive {
            let mut cfg = RunConfig::desk();
            cfg.seed = p.seed;
            ape.push(rl_arm(&cfg, EncoderSource::Checkpoint(p.checkpoint.clone()), &dir.join(format!("rl_ape_{}", p.seed)))?);
            random.push(rl_arm(&cfg, EncoderSource::RandomFrozen, &dir.join(format!("rl_random_{}", p.seed)))?);
        }
        Ok((ape, random))
    };
    let (ape, random) = match run() {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("run failed: {e}")),
    };
    let seconds = start.elapsed().as_secs_f64();
    let score = |arms: &[RlArm]| mean(&arms.iter().map(|a| mean(&a.returns)).collect::<Vec<_>>());
    let (s_ape, s_random) = (score(&ape), score(&random));
    let healthy = ape.iter().chain(&random).all(|a| a.finite && a.decreasing);
    let quintiles: Vec<String> = ape
        .iter()
        .chain(&random)
        .map(|a| format!("{:.3}->{:.3}", a.quintiles.0, a.quintiles.1))
        .collect();
    Verdict::new(
        s_ape >= s_random && healthy && seconds < 3600.0,
        format!(
            "mean eval return: pretrained-frozen {s_ape:.3}, random-frozen {s_random:.3}; model_loss quintiles {}; {seconds:.0}s",
            quintiles.join(" ")
        ),
    )
}
