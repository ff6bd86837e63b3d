//! Accuracy reports, step-count sweeps and trajectory dumps.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureDataset, FeatureRecord};
use crate::estimator::TargetEstimator;
use crate::sampler::{infer_class, write_row, SamplerConfig, Trajectory};
use crate::taxonomy::TaxonomyCodebook;
use crate::{Error, Result};

/// Panel times of the trajectory figure.
pub const DEFAULT_PANEL_TIMES: [f64; 4] = [0.75, 0.5, 0.25, 0.03];

/// Step counts of the step-count table.
pub const DEFAULT_SWEEP_STEPS: [usize; 5] = [1, 2, 4, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub count: usize,
    pub accuracy: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// `None` for a class that was never predicted.
    pub precision: Vec<Option<f64>>,
    /// `None` for a class with no samples.
    pub recall: Vec<Option<f64>>,
    pub wall_ms: u64,
}

impl EvalReport {
    pub fn from_predictions(
        labels: &[String],
        truth: &[usize],
        predicted: &[usize],
        wall_ms: u64,
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let b = labels.len();
        let mut confusion = vec![vec![0usize; b]; b];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= b || p >= b {
                return Err(Error::invalid(format!(
                    "class index out of range: truth {t}, predicted {p}"
                )));
            }
            confusion[t][p] += 1;
        }
        let count = truth.len();
        let correct: usize = (0..b).map(|i| confusion[i][i]).sum();
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let precision = (0..b)
            .map(|j| ratio(confusion[j][j], (0..b).map(|i| confusion[i][j]).sum()))
            .collect();
        let recall = (0..b)
            .map(|i| ratio(confusion[i][i], confusion[i].iter().sum()))
            .collect();
        Ok(Self {
            labels: labels.to_vec(),
            count,
            accuracy: if count == 0 {
                0.0
            } else {
                correct as f64 / count as f64
            },
            confusion,
            precision,
            recall,
            wall_ms,
        })
    }

    pub fn correct(&self) -> usize {
        (0..self.labels.len()).map(|i| self.confusion[i][i]).sum()
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "samples {}  accuracy {:.4}  ({} correct)  wall {} ms\n",
            self.count,
            self.accuracy,
            self.correct(),
            self.wall_ms
        );
        let width = self
            .labels
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(5);
        let _ = writeln!(s, "{:width$}  precision  recall  confusion row", "class");
        for (i, label) in self.labels.iter().enumerate() {
            let row: Vec<String> = self.confusion[i].iter().map(usize::to_string).collect();
            let _ = writeln!(
                s,
                "{label:width$}  {:>9}  {:>6}  {}",
                fmt(self.precision[i]),
                fmt(self.recall[i]),
                row.join(" ")
            );
        }
        s
    }

    /// Confusion matrix as CSV with a header row of predicted labels.
    pub fn confusion_csv(&self) -> String {
        let mut s = format!("truth,{}\n", self.labels.join(","));
        for (label, row) in self.labels.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{label},{}", cells.join(","));
        }
        s
    }
}

fn check_dims<E: TargetEstimator + ?Sized>(
    split: &FeatureDataset,
    model: &E,
    codebook: &TaxonomyCodebook,
) -> Result<()> {
    if split.dim() != model.dim() || codebook.dim() != model.dim() {
        return Err(Error::invalid(format!(
            "dims disagree: dataset {}, codebook {}, model {}",
            split.dim(),
            codebook.dim(),
            model.dim()
        )));
    }
    if split.taxonomy().labels() != codebook.labels() {
        return Err(Error::invalid("dataset taxonomy differs from the codebook"));
    }
    Ok(())
}

/// Predicted class of every record, in record order.
pub fn predict<E: TargetEstimator + ?Sized>(
    split: &FeatureDataset,
    model: &E,
    codebook: &TaxonomyCodebook,
    sampler: &SamplerConfig,
) -> Result<Vec<usize>> {
    check_dims(split, model, codebook)?;
    let sampler = SamplerConfig {
        record_trajectory: false,
        ..*sampler
    };
    split
        .records()
        .par_iter()
        .map(|r| {
            infer_class(
                r.terminal_f64().view(),
                r.condition_f64().view(),
                model,
                codebook,
                &sampler,
            )
            .map(|inf| inf.predicted)
        })
        .collect()
}

pub fn evaluate<E: TargetEstimator + ?Sized>(
    split: &FeatureDataset,
    model: &E,
    codebook: &TaxonomyCodebook,
    sampler: &SamplerConfig,
) -> Result<EvalReport> {
    let truth = split
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.label
                .map(|l| l as usize)
                .ok_or_else(|| Error::invalid(format!("record {i} is unlabeled")))
        })
        .collect::<Result<Vec<_>>>()?;
    let started = Instant::now();
    let predicted = predict(split, model, codebook, sampler)?;
    EvalReport::from_predictions(
        codebook.labels(),
        &truth,
        &predicted,
        started.elapsed().as_millis() as u64,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub num_steps: usize,
    pub accuracy: f64,
}

/// One [`evaluate`] per step count, everything else shared.
pub fn sweep_steps<E: TargetEstimator + ?Sized>(
    split: &FeatureDataset,
    model: &E,
    codebook: &TaxonomyCodebook,
    sampler: &SamplerConfig,
    steps: &[usize],
) -> Result<Vec<SweepRow>> {
    if steps.is_empty() || steps.contains(&0) {
        return Err(Error::invalid(format!(
            "step counts must be >= 1, got {steps:?}"
        )));
    }
    steps
        .iter()
        .map(|&n| {
            let cfg = SamplerConfig {
                num_steps: n,
                ..*sampler
            };
            evaluate(split, model, codebook, &cfg).map(|r| SweepRow {
                num_steps: n,
                accuracy: r.accuracy,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("num_steps,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6}", r.num_steps, r.accuracy);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub requested: f64,
    /// Index into the trajectory of the entry nearest `requested`.
    pub index: usize,
    /// Cosine similarity of the panel state to the true codeword.
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryDump {
    pub trajectory: Trajectory,
    pub panels: Vec<Panel>,
    /// Codeword of the record's label, if it has one.
    pub x0: Option<Array1<f64>>,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

impl TrajectoryDump {
    /// True when the panel cosines increase strictly in panel order.
    pub fn cosine_increasing(&self) -> Option<bool> {
        let c: Option<Vec<f64>> = self.panels.iter().map(|p| p.cosine).collect();
        c.map(|c| c.windows(2).all(|w| w[1] > w[0]))
    }

    /// Writes `trajectory.csv` (every step) and `panels.csv` (panel rows,
    /// then an `x0` row when the label is known) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let full = dir.join("trajectory.csv");
        let f = File::create(&full).map_err(|e| Error::io(&full, e))?;
        self.trajectory
            .write_delimited(BufWriter::new(f))
            .map_err(|e| Error::io(&full, e))?;

        let path = dir.join("panels.csv");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(&path, e);
        for p in &self.panels {
            let (t, state) = &self.trajectory.entries[p.index];
            write_row(&mut w, *t, state.view()).map_err(io)?;
        }
        if let Some(x0) = &self.x0 {
            write!(w, "x0").map_err(io)?;
            for v in x0 {
                write!(w, ",{}", crate::sampler::format_sig9(*v)).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Samples one record with the trajectory recorded and extracts the panel
/// rows nearest `panel_times`.
pub fn dump_trajectory<E: TargetEstimator + ?Sized>(
    record: &FeatureRecord,
    model: &E,
    codebook: &TaxonomyCodebook,
    sampler: &SamplerConfig,
    panel_times: &[f64],
) -> Result<TrajectoryDump> {
    let s = &sampler.schedule;
    for &t in panel_times {
        if !(t >= s.t_eps && t <= s.t_max) {
            return Err(Error::invalid(format!(
                "panel time {t} outside [{}, {}]",
                s.t_eps, s.t_max
            )));
        }
    }
    let sampler = SamplerConfig {
        record_trajectory: true,
        ..*sampler
    };
    let inf = infer_class(
        record.terminal_f64().view(),
        record.condition_f64().view(),
        model,
        codebook,
        &sampler,
    )?;
    let trajectory = inf.trajectory.expect("recording was requested");
    let x0 = record
        .label
        .map(|l| codebook.codeword(l as usize).to_owned());
    let panels = panel_times
        .iter()
        .map(|&t| {
            let index = trajectory.nearest(t).expect("trajectory is never empty");
            let cosine = x0
                .as_ref()
                .map(|x0| cosine(trajectory.entries[index].1.view(), x0.view()));
            Panel {
                requested: t,
                index,
                cosine,
            }
        })
        .collect();
    Ok(TrajectoryDump {
        trajectory,
        panels,
        x0,
        predicted: inf.predicted,
        scores: inf.scores,
    })
}
