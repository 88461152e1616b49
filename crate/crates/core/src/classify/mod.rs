//! Subject identification: a time-ordered train/test split, three
//! classifiers written from scratch, and accuracy evaluation.

mod lstm;
mod rf;
mod svm;

pub use lstm::{gradient_check, train_lstm, GradientCheck, LstmGradients, LstmModel, LstmParams, LstmWeights};
pub use rf::{train_rf, DecisionTree, RandomForestModel, RfParams, TreeNode};
pub use svm::{train_svm, LinearSvmModel, SvmParams};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FrameRecord;

pub type Label = u32;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub subject: Label,
    pub sequence: u32,
    pub frame: u32,
}

/// Labelled frames. Sequence ids are global: a sequence belongs to exactly
/// one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidDataset("no samples".into()));
        };
        let dim = first.features.len();
        if dim == 0 {
            return Err(Error::InvalidDataset("empty feature vectors".into()));
        }
        let mut keys = BTreeSet::new();
        let mut owner: BTreeMap<u32, Label> = BTreeMap::new();
        for s in &samples {
            if s.features.len() != dim {
                return Err(Error::InvalidDataset(format!(
                    "sample (sequence {}, frame {}) has {} features, expected {dim}",
                    s.sequence,
                    s.frame,
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "sample (sequence {}, frame {}) has non-finite features",
                    s.sequence, s.frame
                )));
            }
            if !keys.insert((s.sequence, s.frame)) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate (sequence {}, frame {})",
                    s.sequence, s.frame
                )));
            }
            if *owner.entry(s.sequence).or_insert(s.subject) != s.subject {
                return Err(Error::InvalidDataset(format!(
                    "sequence {} spans more than one subject",
                    s.sequence
                )));
            }
        }
        Ok(LabeledDataset { samples })
    }

    pub fn from_records(records: Vec<FrameRecord>) -> Result<Self> {
        LabeledDataset::new(
            records
                .into_iter()
                .map(|r| Sample {
                    features: r.values,
                    subject: r.subject,
                    sequence: r.sequence,
                    frame: r.frame,
                })
                .collect(),
        )
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].features.len()
    }

    /// Distinct subject labels, ascending.
    pub fn classes(&self) -> Vec<Label> {
        let set: BTreeSet<Label> = self.samples.iter().map(|s| s.subject).collect();
        set.into_iter().collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        LabeledDataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    /// Runs of `len` frames adjacent in time within a sequence, as sample
    /// indices in time order. Windows are listed by sequence, then start frame.
    pub fn windows(&self, len: usize) -> Vec<Vec<usize>> {
        let mut by_seq: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            by_seq.entry(s.sequence).or_default().push(i);
        }
        let mut out = Vec::new();
        for idx in by_seq.values_mut() {
            idx.sort_by_key(|&i| self.samples[i].frame);
            if len > 0 {
                out.extend(idx.windows(len).map(|w| w.to_vec()));
            }
        }
        out
    }
}

/// Index sets into a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_fraction: f64,
}

/// Per sequence, the first `ceil(fraction * len)` frames train and the rest
/// test.
pub fn split_by_time(data: &LabeledDataset, train_fraction: f64) -> Result<SplitPlan> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "train fraction {train_fraction} is not in (0, 1)"
        )));
    }
    let mut by_seq: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples().iter().enumerate() {
        by_seq.entry(s.sequence).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for idx in by_seq.values_mut() {
        idx.sort_by_key(|&i| data.samples()[i].frame);
        // The small offset keeps exact products such as 0.8 * 10 at 8.
        let cut = ((train_fraction * idx.len() as f64 - 1e-9).ceil() as usize).clamp(1, idx.len());
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let subjects = |set: &[usize]| -> BTreeSet<Label> { set.iter().map(|&i| data.samples()[i].subject).collect() };
    let (tr, te) = (subjects(&train), subjects(&test));
    for s in data.classes() {
        if !tr.contains(&s) || !te.contains(&s) {
            return Err(Error::SplitInfeasible(format!(
                "subject {s} is missing from the {} side",
                if tr.contains(&s) { "test" } else { "train" }
            )));
        }
    }
    Ok(SplitPlan {
        train,
        test,
        train_fraction,
    })
}

/// Per-feature centring and scaling fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant features keep scale 1 and are only centred.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            mean.iter_mut().zip(*r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut scale = vec![0.0; d];
        for r in &rows {
            for ((s, v), m) in scale.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for (j, s) in scale.iter_mut().enumerate() {
            let constant = rows.iter().all(|r| r[j] == rows[0][j]);
            *s = if constant { 1.0 } else { (*s / n).sqrt() };
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Anything that maps a window of consecutive frames to a subject.
pub trait Classifier: Sync {
    fn name(&self) -> &'static str;

    /// Frames per prediction window.
    fn lookback(&self) -> usize {
        1
    }

    fn predict_window(&self, window: &[&[f64]]) -> Result<Label>;
}

/// Index of the largest score; ties go to the earliest entry.
pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// `(correct, total)` per subject.
    pub per_subject: BTreeMap<Label, (usize, usize)>,
}

/// Accuracy on the test side of `plan`. A classifier with lookback `L` is
/// scored on every run of `L` consecutive test-side frames, labelled by the
/// subject.
pub fn evaluate(model: &dyn Classifier, data: &LabeledDataset, plan: &SplitPlan) -> Result<AccuracyReport> {
    if plan.test.is_empty() {
        return Err(Error::SplitInfeasible("empty test side".into()));
    }
    let test = data.subset(&plan.test)?;
    let windows = test.windows(model.lookback());
    if windows.is_empty() {
        return Err(Error::SplitInfeasible(format!(
            "no test window of {} consecutive frames",
            model.lookback()
        )));
    }
    let predictions: Vec<(Label, Label)> = {
        use rayon::prelude::*;
        windows
            .par_iter()
            .map(|w| {
                let frames: Vec<&[f64]> = w.iter().map(|&i| test.samples()[i].features.as_slice()).collect();
                let truth = test.samples()[*w.last().unwrap()].subject;
                model.predict_window(&frames).map(|p| (truth, p))
            })
            .collect::<Result<_>>()?
    };
    let mut per_subject: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (truth, p) in &predictions {
        let e = per_subject.entry(*truth).or_default();
        e.1 += 1;
        if truth == p {
            e.0 += 1;
            correct += 1;
        }
    }
    Ok(AccuracyReport {
        correct,
        total: predictions.len(),
        accuracy: correct as f64 / predictions.len() as f64,
        per_subject,
    })
}

pub(crate) fn check_training_set(data: &LabeledDataset) -> Result<Vec<Label>> {
    let classes = data.classes();
    if classes.len() < 2 {
        return Err(Error::InvalidDataset(format!(
            "training needs at least 2 subjects, found {}",
            classes.len()
        )));
    }
    Ok(classes)
}
