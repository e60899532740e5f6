//! The `ape` subcommands as library functions.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ape_core::checkpoint::{Checkpoint, Section};
use ape_core::encoder::{Encoder, Readout};
use ape_core::moco::{pretrain_epoch, PretrainState};
use ape_core::probe::{extract_features, linear_probe};
use ape_core::rl::{RlRow, RlTrainer};
use ape_core::rng::{stream, tag};
use ape_core::scheduler::{init_scheduler, AccuracyReport, SchedulerState};
use ape_core::vision::{gen_shapeworld, Dataset};
use ape_tensor::ParamStore;
use serde_json::Value;

use crate::config::{RunConfig, Schedule};
use crate::error::{CliError, Result};
use crate::metrics::{pretrain_columns, rl_columns, MetricsWriter, Table};
use crate::pca::pca_project;
use crate::plot::{check_schema, line_chart, scatter_chart, series};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ape";
pub const RL_CHECKPOINT: &str = "rl.ape";

/// Where the world model's encoder trunk comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderSource {
    Checkpoint(PathBuf),
    RandomFrozen,
    RandomTrainable,
}

impl FromStr for EncoderSource {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "random-frozen" => Self::RandomFrozen,
            "random-trainable" => Self::RandomTrainable,
            path => Self::Checkpoint(PathBuf::from(path)),
        })
    }
}

impl fmt::Display for EncoderSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Checkpoint(p) => write!(f, "{}", p.display()),
            Self::RandomFrozen => f.write_str("random-frozen"),
            Self::RandomTrainable => f.write_str("random-trainable"),
        }
    }
}

fn meta_section(kind: &str, cfg: &RunConfig, progress: u64) -> Section {
    let mut s = Section::new("meta");
    s.push_bytes("kind", kind.as_bytes().to_vec());
    s.push_bytes("config", cfg.to_json().into_bytes());
    s.push_bytes("progress", progress.to_le_bytes().to_vec());
    s
}

/// The kind, configuration and progress counter stored by a command.
pub fn read_meta(ck: &Checkpoint) -> Result<(String, RunConfig, u64)> {
    let meta = ck.section("meta")?;
    let kind = String::from_utf8_lossy(meta.bytes("kind")?).into_owned();
    let text = String::from_utf8_lossy(meta.bytes("config")?).into_owned();
    let cfg = RunConfig::resolve(Some(&text), &[])?;
    let progress = meta.bytes("progress")?;
    let progress = u64::from_le_bytes(
        progress
            .try_into()
            .map_err(|_| CliError::Mismatch("bad progress counter".into()))?,
    );
    Ok((kind, cfg, progress))
}

/// First key path at which two JSON documents differ.
fn first_difference(a: &Value, b: &Value, prefix: &str) -> Option<String> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, v) in x {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match y.get(k) {
                    Some(w) => {
                        if let Some(d) = first_difference(v, w, &path) {
                            return Some(d);
                        }
                    }
                    None => return Some(path),
                }
            }
            y.keys().find(|k| !x.contains_key(*k)).map(|k| format!("{prefix}.{k}"))
        }
        _ => (a != b).then(|| prefix.to_string()),
    }
}

/// Errors unless `cfg` equals `stored` apart from the keys in `free`
/// (run budgets may be extended on resume).
fn ensure_same_config(stored: &RunConfig, cfg: &RunConfig, free: &[&[&str]]) -> Result<()> {
    let mut a = serde_json::to_value(stored).expect("config serialises");
    let mut b = serde_json::to_value(cfg).expect("config serialises");
    for path in free {
        for v in [&mut a, &mut b] {
            let mut slot = &mut *v;
            for key in *path {
                slot = slot.get_mut(*key).expect("known key");
            }
            *slot = Value::Null;
        }
    }
    match first_difference(&a, &b, "") {
        Some(key) => Err(CliError::Mismatch(format!(
            "checkpoint was written with a different `{key}`"
        ))),
        None => Ok(()),
    }
}

/// Linear-probe top-1 accuracy of the trunk in `store` on `ds`.
pub fn probe_accuracy(
    encoder: &Encoder,
    store: &ParamStore<f32>,
    ds: &Dataset,
    cfg: &RunConfig,
) -> Result<f64> {
    let tx = extract_features(encoder, store, &ds.train, Readout::Pooled)?;
    let vx = extract_features(encoder, store, &ds.val, Readout::Pooled)?;
    let ty: Vec<usize> = ds.train.iter().map(|s| s.label).collect();
    let vy: Vec<usize> = ds.val.iter().map(|s| s.label).collect();
    Ok(linear_probe(&tx, &ty, &vx, &vy, ds.class_count, &cfg.probe, cfg.seed)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Probe accuracy of the randomly initialised trunk (row 0).
    pub initial_probe: Option<f64>,
    pub final_probe: Option<f64>,
}

/// Adaptive (or fixed-composition) contrastive pretraining. Writes one
/// metrics row per epoch plus row 0 for the initialisation, and a
/// checkpoint after every epoch. With `resume`, continues the run stored
/// there and drops metrics rows written after it.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path, metrics: Option<&Path>, resume: Option<&Path>) -> Result<PretrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let metrics = metrics.map_or_else(|| out.join("pretrain.csv"), Path::to_path_buf);
    let checkpoint = out.join(PRETRAIN_CHECKPOINT);
    let ds = gen_shapeworld(&cfg.data)?;
    let comps = cfg.pretrain.compositions()?;
    let columns = pretrain_columns(comps.len());
    let probe = |state: &PretrainState| probe_accuracy(&state.model.encoder, &state.query, &ds, cfg);

    let mut initial_probe = None;
    let (mut state, mut sched, start, mut writer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (kind, stored, epoch) = read_meta(&ck)?;
            if kind != "pretrain" {
                return Err(CliError::Mismatch(format!("{} holds a `{kind}` run", path.display())));
            }
            ensure_same_config(&stored, cfg, &[&["pretrain", "epochs"]])?;
            let state = PretrainState::restore(&cfg.encoder, &cfg.moco, &ck)?;
            let sched = SchedulerState::from_section(ck.section("scheduler")?)?;
            let writer = MetricsWriter::resume(&metrics, &columns, epoch as usize + 1)?;
            (state, sched, epoch, writer)
        }
        None => {
            let state = PretrainState::new(&cfg.encoder, &cfg.moco, cfg.seed)?;
            let sched = init_scheduler(comps.len(), cfg.pretrain.alpha)?;
            let mut writer = MetricsWriter::create(&metrics, &columns)?;
            let acc = probe(&state)?;
            initial_probe = Some(acc);
            let mut row = vec![Some(0.0)];
            row.extend(sched.p.iter().map(|&p| Some(p)));
            row.extend(vec![None; comps.len() + 1]);
            row.push(Some(acc));
            writer.row(&row)?;
            save_pretrain(&state, &sched, cfg, 0, &checkpoint)?;
            (state, sched, 0, writer)
        }
    };

    let mut final_probe = (cfg.pretrain.epochs == start).then_some(initial_probe).flatten();
    for epoch in start..cfg.pretrain.epochs {
        let m = pretrain_epoch(&mut state, &ds.train, &sched, &comps, &cfg.moco, cfg.seed, epoch)?;
        let done = epoch + 1;
        let last = done == cfg.pretrain.epochs;
        let every = cfg.pretrain.probe_every;
        let acc = if last || (every > 0 && done % every == 0) { Some(probe(&state)?) } else { None };
        let mut row = vec![Some(done as f64)];
        row.extend(sched.p.iter().map(|&p| Some(p)));
        row.extend(m.acc.iter().map(|&a| Some(a)));
        row.push(Some(m.l_z));
        row.push(acc);
        writer.row(&row)?;
        if cfg.pretrain.schedule == Schedule::Adaptive {
            sched.update_probs(&AccuracyReport {
                acc: m.acc,
                counts: m.counts,
            })?;
        }
        save_pretrain(&state, &sched, cfg, done, &checkpoint)?;
        if last {
            final_probe = acc;
        }
    }
    Ok(PretrainReport {
        checkpoint,
        metrics,
        initial_probe,
        final_probe,
    })
}

fn save_pretrain(state: &PretrainState, sched: &SchedulerState, cfg: &RunConfig, epoch: u64, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::default();
    ck.put(meta_section("pretrain", cfg, epoch));
    state.write_sections(&mut ck);
    ck.put(sched.to_section());
    Ok(ck.save(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlReport {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub rows: Vec<RlRow>,
}

fn rl_cells(row: &RlRow) -> Vec<Option<f64>> {
    let mut cells = vec![Some(row.env_steps as f64), Some(row.episode_return)];
    match &row.train {
        Some(t) => cells.extend(
            [
                t.model.total,
                t.model.rew,
                t.model.con,
                t.model.rec,
                t.model.obs,
                t.actor_loss,
                t.critic_loss,
                t.entropy,
                t.scale,
            ]
            .map(Some),
        ),
        None => cells.extend([None; 9]),
    }
    cells
}

fn resolve_freeze(source: &EncoderSource, freeze: Option<usize>, cfg: &RunConfig) -> Result<usize> {
    match (source, freeze) {
        (EncoderSource::RandomTrainable, Some(k)) if k > 0 => Err(CliError::Config(format!(
            "--encoder random-trainable cannot freeze {k} stages"
        ))),
        (EncoderSource::RandomTrainable, _) => Ok(0),
        (_, Some(k)) => Ok(k),
        (_, None) => Ok(cfg.freeze_stages),
    }
}

/// Policy learning on PixelChase. The encoder trunk is loaded from a
/// pretraining (or policy) checkpoint or left at its random initialisation.
pub fn cmd_train_rl(
    cfg: &RunConfig,
    source: &EncoderSource,
    freeze: Option<usize>,
    out: &Path,
    metrics: Option<&Path>,
    resume: Option<&Path>,
) -> Result<RlReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let metrics = metrics.map_or_else(|| out.join("rl.csv"), Path::to_path_buf);
    let checkpoint = out.join(RL_CHECKPOINT);
    let freeze = resolve_freeze(source, freeze, cfg)?;

    let (mut trainer, mut writer, mut written) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (kind, stored, rows) = read_meta(&ck)?;
            if kind != "rl" {
                return Err(CliError::Mismatch(format!("{} holds a `{kind}` run", path.display())));
            }
            ensure_same_config(&stored, cfg, &[&["rl", "env_steps"]])?;
            let trainer = RlTrainer::resume(&cfg.rl, &cfg.world_model, &cfg.encoder, &cfg.agent, freeze, &ck)?;
            let writer = MetricsWriter::resume(&metrics, &rl_columns(), rows as usize)?;
            (trainer, writer, rows)
        }
        None => {
            let pretrained = match source {
                EncoderSource::Checkpoint(path) => {
                    let ck = Checkpoint::load(path)?;
                    if let Ok((_, stored, _)) = read_meta(&ck) {
                        if stored.encoder != cfg.encoder {
                            return Err(CliError::Mismatch(format!(
                                "{} has encoder {:?}, config asks for {:?}",
                                path.display(),
                                stored.encoder,
                                cfg.encoder
                            )));
                        }
                    }
                    Some(ck)
                }
                _ => None,
            };
            let trainer = RlTrainer::new(
                &cfg.rl,
                &cfg.world_model,
                &cfg.encoder,
                &cfg.agent,
                freeze,
                pretrained.as_ref(),
                cfg.seed,
            )?;
            (trainer, MetricsWriter::create(&metrics, &rl_columns())?, 0)
        }
    };

    let mut rows = Vec::new();
    trainer.run(usize::MAX, |row| {
        writer
            .row(&rl_cells(row))
            .map_err(|e| ape_core::Error::InvalidArgument(e.to_string()))?;
        rows.push(*row);
        Ok(())
    })?;
    written += rows.len() as u64;
    let mut ck = trainer.to_checkpoint();
    ck.put(meta_section("rl", cfg, written));
    ck.save(&checkpoint)?;
    Ok(RlReport {
        checkpoint,
        metrics,
        rows,
    })
}

/// Mean greedy return of the policy stored in an `rl` checkpoint.
pub fn cmd_eval(ckpt: &Path, episodes: Option<usize>) -> Result<f64> {
    let ck = Checkpoint::load(ckpt)?;
    let (kind, mut cfg, _) = read_meta(&ck)?;
    if kind != "rl" {
        return Err(CliError::Mismatch(format!("{} holds a `{kind}` run, not a policy", ckpt.display())));
    }
    let freeze = RlTrainer::stored_freeze_stages(&ck)?;
    if let Some(n) = episodes {
        cfg.rl.eval_episodes = n;
    }
    let trainer = RlTrainer::resume(&cfg.rl, &cfg.world_model, &cfg.encoder, &cfg.agent, freeze, &ck)?;
    Ok(trainer.evaluate()?)
}

/// Probes the encoder trunk of any checkpoint. `data` is a directory in the
/// exported dataset format; without it the configured ShapeWorld is used.
/// The accuracy is appended to `metrics` when given, and a PCA scatter of
/// the validation features is written to `pca` when given.
pub fn cmd_probe(ckpt: &Path, data: Option<&Path>, cfg: &RunConfig, metrics: Option<&Path>, pca: Option<&Path>) -> Result<f64> {
    let ck = Checkpoint::load(ckpt)?;
    let encoder_cfg = match read_meta(&ck) {
        Ok((_, stored, _)) => stored.encoder,
        Err(_) => cfg.encoder.clone(),
    };
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, &encoder_cfg, &mut stream(cfg.seed, &[tag::INIT]))?;
    encoder.load_pretrained(&ck, &mut store)?;
    let ds = match data {
        Some(dir) => Dataset::import(dir)?,
        None => gen_shapeworld(&cfg.data)?,
    };
    let acc = probe_accuracy(&encoder, &store, &ds, cfg)?;
    if let Some(path) = metrics {
        let columns = vec!["seed".to_string(), "probe_acc".to_string()];
        let mut writer = if path.exists() {
            let keep = Table::read(path)?.rows.len();
            MetricsWriter::resume(path, &columns, keep)?
        } else {
            MetricsWriter::create(path, &columns)?
        };
        writer.row(&[Some(cfg.seed as f64), Some(acc)])?;
    }
    if let Some(path) = pca {
        let feats = extract_features(&encoder, &store, &ds.val, Readout::Pooled)?;
        let d = feats.shape()[1];
        let rows: Vec<Vec<f64>> = feats.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let proj = pca_project(&rows, 2)?;
        let points: Vec<(f64, f64)> = proj.coords.iter().map(|c| (c[0], c[1])).collect();
        let labels: Vec<usize> = ds.val.iter().map(|s| s.label).collect();
        std::fs::write(path, scatter_chart(&points, &labels, "validation features"))?;
    }
    Ok(acc)
}

/// One SVG per column under `out`, overlaying every metrics file.
/// `columns` defaults to every column but the first (the x axis).
pub fn cmd_plot(files: &[PathBuf], out: &Path, columns: &[String]) -> Result<Vec<PathBuf>> {
    let tables = files
        .iter()
        .map(|f| Ok((f.display().to_string(), Table::read(f)?)))
        .collect::<Result<Vec<_>>>()?;
    check_schema(&tables)?;
    let schema = &tables[0].1.columns;
    let wanted: Vec<String> = if columns.is_empty() { schema[1..].to_vec() } else { columns.to_vec() };
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for col in &wanted {
        let runs = tables.iter().map(|(_, t)| series(t, col)).collect::<Result<Vec<_>>>()?;
        let path = out.join(format!("{col}.svg"));
        std::fs::write(&path, line_chart(&runs, &schema[0], col))?;
        written.push(path);
    }
    Ok(written)
}
