//! Per-batch scoring, run summaries, and the closed-form memory comparison.
//!
//! Rates whose denominator is empty are `None` and serialize as `null`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::gmm_value_count;
use crate::ood::{ClassDecision, PseudoLabel};

/// Harmonic mean of known and unknown accuracy; zero when both are zero.
pub fn h_score(acc_known: f64, acc_unknown: f64) -> f64 {
    let s = acc_known + acc_unknown;
    if s == 0.0 {
        0.0
    } else {
        2.0 * acc_known * acc_unknown / s
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One row of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub batch: usize,
    pub acc_known: Option<f64>,
    pub acc_unknown: Option<f64>,
    pub h_score: Option<f64>,
    pub adapt_ratio: f64,
    pub pl_precision_known: Option<f64>,
    pub tau_k: f64,
    pub tau_u: f64,
    pub loss_c: f64,
    pub loss_kld: f64,
    pub counts: BatchCounts,
}

/// Raw tallies behind the rates of a [`RunRecord`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCounts {
    pub samples: usize,
    pub known: usize,
    pub known_correct: usize,
    pub unknown: usize,
    pub unknown_correct: usize,
    pub adapted: usize,
    pub pl_known: usize,
    pub pl_known_correct: usize,
}

impl BatchCounts {
    fn add(&mut self, o: &BatchCounts) {
        self.samples += o.samples;
        self.known += o.known;
        self.known_correct += o.known_correct;
        self.unknown += o.unknown;
        self.unknown_correct += o.unknown_correct;
        self.adapted += o.adapted;
        self.pl_known += o.pl_known;
        self.pl_known_correct += o.pl_known_correct;
    }

    pub fn acc_known(&self) -> Option<f64> {
        ratio(self.known_correct, self.known)
    }

    pub fn acc_unknown(&self) -> Option<f64> {
        ratio(self.unknown_correct, self.unknown)
    }

    /// H-score; `None` unless both known and unknown samples are present.
    pub fn h_score(&self) -> Option<f64> {
        Some(h_score(self.acc_known()?, self.acc_unknown()?))
    }

    /// Plain accuracy over every sample, unknowns included.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.known_correct + self.unknown_correct, self.samples)
    }

    pub fn adapt_ratio(&self) -> Option<f64> {
        ratio(self.adapted, self.samples)
    }

    pub fn pl_precision_known(&self) -> Option<f64> {
        ratio(self.pl_known_correct, self.pl_known)
    }
}

/// Tallies one batch. Threshold and loss fields are left at zero for the caller.
pub fn score_batch(
    batch_index: usize,
    truth: &[ClassDecision],
    predictions: &[ClassDecision],
    pseudo_labels: &[PseudoLabel],
) -> Result<RunRecord> {
    if truth.len() != predictions.len() {
        return Err(Error::LengthMismatch { left: truth.len(), right: predictions.len() });
    }
    if truth.len() != pseudo_labels.len() {
        return Err(Error::LengthMismatch { left: truth.len(), right: pseudo_labels.len() });
    }
    let mut c = BatchCounts { samples: truth.len(), ..Default::default() };
    for ((&t, &p), &pl) in truth.iter().zip(predictions).zip(pseudo_labels) {
        match t {
            ClassDecision::Known(_) => {
                c.known += 1;
                c.known_correct += usize::from(p == t);
            }
            ClassDecision::Unknown => {
                c.unknown += 1;
                c.unknown_correct += usize::from(p == t);
            }
        }
        match pl {
            PseudoLabel::Discarded => {}
            PseudoLabel::Unknown => c.adapted += 1,
            PseudoLabel::Known(k) => {
                c.adapted += 1;
                c.pl_known += 1;
                c.pl_known_correct += usize::from(t == ClassDecision::Known(k));
            }
        }
    }
    Ok(RunRecord {
        batch: batch_index,
        acc_known: c.acc_known(),
        acc_unknown: c.acc_unknown(),
        h_score: c.h_score(),
        adapt_ratio: c.adapt_ratio().unwrap_or(0.0),
        pl_precision_known: c.pl_precision_known(),
        tau_k: 0.0,
        tau_u: 0.0,
        loss_c: 0.0,
        loss_kld: 0.0,
        counts: c,
    })
}

/// Sample-weighted aggregate over a window of batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub n_batches: usize,
    pub acc_known: Option<f64>,
    pub acc_unknown: Option<f64>,
    pub h_score: Option<f64>,
    pub accuracy: Option<f64>,
    pub adapt_ratio: Option<f64>,
    pub pl_precision_known: Option<f64>,
    pub mean_loss_c: Option<f64>,
    pub mean_loss_kld: Option<f64>,
    pub counts: BatchCounts,
}

pub fn summarize_window<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> WindowSummary {
    let mut counts = BatchCounts::default();
    let (mut n, mut lc, mut lk) = (0usize, 0.0, 0.0);
    for r in records {
        counts.add(&r.counts);
        lc += r.loss_c;
        lk += r.loss_kld;
        n += 1;
    }
    WindowSummary {
        n_batches: n,
        acc_known: counts.acc_known(),
        acc_unknown: counts.acc_unknown(),
        h_score: counts.h_score(),
        accuracy: counts.accuracy(),
        adapt_ratio: counts.adapt_ratio(),
        pl_precision_known: counts.pl_precision_known(),
        mean_loss_c: (n > 0).then(|| lc / n as f64),
        mean_loss_kld: (n > 0).then(|| lk / n as f64),
        counts,
    }
}

pub const CSV_HEADER: &str = "batch,acc_known,acc_unknown,h_score,adapt_ratio,pl_precision_known,tau_k,tau_u,loss_c,loss_kld";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.batch,
            opt(self.acc_known),
            opt(self.acc_unknown),
            opt(self.h_score),
            self.adapt_ratio,
            opt(self.pl_precision_known),
            self.tau_k,
            self.tau_u,
            self.loss_c,
            self.loss_kld
        )
    }
}

pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn records_to_jsonl(records: &[RunRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<RunRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Inputs of the memory comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModelInputs {
    pub fd: usize,
    pub fd_r: usize,
    pub n_classes: usize,
    pub queue_len: usize,
    pub teacher_params: usize,
}

impl MemoryModelInputs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fd", self.fd),
            ("fd_r", self.fd_r),
            ("n_classes", self.n_classes),
            ("queue_len", self.queue_len),
            ("teacher_params", self.teacher_params),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Stored-value counts of the mixture, a feature queue, and a teacher copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub n_classes: usize,
    pub n_gmm: usize,
    pub n_queue: usize,
    pub n_teacher: usize,
    pub ratio_queue: f64,
    pub ratio_teacher: f64,
}

pub fn memory_report(m: &MemoryModelInputs) -> Result<MemoryReport> {
    m.validate()?;
    let n_gmm = gmm_value_count(m.fd_r, m.n_classes);
    let n_queue = m.queue_len * (m.fd + m.n_classes);
    Ok(MemoryReport {
        n_classes: m.n_classes,
        n_gmm,
        n_queue,
        n_teacher: m.teacher_params,
        ratio_queue: n_gmm as f64 / n_queue as f64,
        ratio_teacher: n_gmm as f64 / m.teacher_params as f64,
    })
}

pub const MEMORY_CSV_HEADER: &str = "n_classes,n_gmm,n_queue,n_teacher,ratio_queue,ratio_teacher";

pub fn memory_table_csv(rows: &[MemoryReport]) -> String {
    let mut out = String::from(MEMORY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.n_classes, r.n_gmm, r.n_queue, r.n_teacher, r.ratio_queue, r.ratio_teacher);
    }
    out
}
