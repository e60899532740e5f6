//! Closed-loop sampling probabilities over augmentation compositions.
//!
//! After each epoch the probability of composition `i` becomes
//! `softmax(alpha * (1 - acc))_i`, so compositions the pretext task finds
//! hard are sampled more often next epoch.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ByteReader, ByteWriter, Section};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub p: Vec<f64>,
    pub alpha: f64,
    pub epoch: u64,
    pub last_acc: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub acc: Vec<f64>,
    pub counts: Vec<usize>,
}

/// 1 for small composition sets, 0.8 for larger ones.
pub fn default_alpha(n: usize) -> f64 {
    if n <= 4 {
        1.0
    } else {
        0.8
    }
}

pub fn init_scheduler(n: usize, alpha: Option<f64>) -> Result<SchedulerState> {
    if n < 2 {
        return Err(invalid(format!("scheduler needs at least 2 compositions, got {n}")));
    }
    let alpha = alpha.unwrap_or_else(|| default_alpha(n));
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    Ok(SchedulerState {
        p: vec![1.0 / n as f64; n],
        alpha,
        epoch: 0,
        last_acc: None,
    })
}

/// Max-stabilised softmax of `alpha * (1 - acc)`.
pub fn feedback_probs(acc: &[f64], alpha: f64) -> Vec<f64> {
    let logits: Vec<f64> = acc.iter().map(|a| alpha * (1.0 - a)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

impl SchedulerState {
    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn update_probs(&mut self, report: &AccuracyReport) -> Result<()> {
        if report.acc.len() != self.n() {
            return Err(invalid(format!(
                "accuracy report has {} entries for {} compositions",
                report.acc.len(),
                self.n()
            )));
        }
        if let Some(a) = report.acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(invalid(format!("accuracy {a} outside [0, 1]")));
        }
        self.p = feedback_probs(&report.acc, self.alpha);
        self.epoch += 1;
        self.last_acc = Some(report.acc.clone());
        Ok(())
    }

    pub fn to_section(&self) -> Section {
        let mut w = ByteWriter::default();
        w.u64(self.n() as u64).f64(self.alpha).u64(self.epoch);
        for &p in &self.p {
            w.f64(p);
        }
        match &self.last_acc {
            Some(acc) => {
                w.u64(1);
                for &a in acc {
                    w.f64(a);
                }
            }
            None => {
                w.u64(0);
            }
        }
        let mut s = Section::new("scheduler");
        s.push_bytes("state", w.0);
        s
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let mut r = ByteReader::new(section.bytes("state")?);
        let n = r.u64()? as usize;
        let alpha = r.f64()?;
        let epoch = r.u64()?;
        let p = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let last_acc = match r.u64()? {
            0 => None,
            _ => Some((0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?),
        };
        r.finish()?;
        Ok(Self { p, alpha, epoch, last_acc })
    }
}

/// Largest-remainder apportionment of `batch_size` by `p` (ties to the lower
/// index), then lifted so every composition gets at least one item. Each lift
/// is paid for by the currently largest share.
pub fn partition_batch(batch_size: usize, p: &[f64]) -> Result<Vec<usize>> {
    let n = p.len();
    if n == 0 || batch_size < n {
        return Err(invalid(format!(
            "batch of {batch_size} cannot give each of {n} compositions a sample"
        )));
    }
    let quotas: Vec<f64> = p.iter().map(|pi| pi * batch_size as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - sizes[a] as f64;
        let rb = quotas[b] - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(batch_size.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let donor = (0..n).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap();
        sizes[donor] -= 1;
        sizes[empty] = 1;
    }
    Ok(sizes)
}

/// Composition index for each batch slot, obtained by shuffling the
/// sub-batch labels.
pub fn assign_items<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &s)| std::iter::repeat_n(i, s))
        .collect();
    labels.shuffle(rng);
    labels
}
