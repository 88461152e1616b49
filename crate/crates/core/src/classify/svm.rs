//! One-vs-rest linear SVM trained by stochastic subgradient descent on the
//! regularised hinge loss (Pegasos).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, check_training_set, Classifier, Label, LabeledDataset, Standardizer};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{streams, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    /// Regularisation strength; the step at iteration `t` is `1 / (c * t)`.
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1e-3,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvmModel {
    pub classes: Vec<Label>,
    pub standardizer: Standardizer,
    /// One weight vector per class, over standardised features.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// Pegasos on `(x, +-1)` with the bias learned as the weight of a constant
/// feature, so it is regularised too. `w = scale * v` keeps the shrink step
/// O(1). The returned weights average the iterates of the second half of
/// training, which damps the large late steps of the last iterate.
fn pegasos(x: &[Vec<f64>], sign: &[f64], order: &[Vec<usize>], c: f64) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let mut v = vec![0.0; d];
    let mut vb = 0.0;
    let mut scale = 1.0;
    let mut t = 0usize;
    let total: usize = order.iter().map(|e| e.len()).sum();
    let mut avg = vec![0.0; d];
    let mut avg_b = 0.0;
    let mut averaged = 0usize;
    for epoch in order {
        for &i in epoch {
            t += 1;
            let eta = 1.0 / (c * t as f64);
            let margin = sign[i] * scale * (dot(&v, &x[i]) + vb);
            let shrink = 1.0 - eta * c;
            if shrink <= 0.0 {
                v.iter_mut().for_each(|a| *a = 0.0);
                vb = 0.0;
                scale = 1.0;
            } else {
                scale *= shrink;
            }
            if margin < 1.0 {
                let step = eta * sign[i] / scale;
                v.iter_mut().zip(&x[i]).for_each(|(a, b)| *a += step * b);
                vb += step;
            }
            if scale < 1e-100 {
                v.iter_mut().for_each(|a| *a *= scale);
                vb *= scale;
                scale = 1.0;
            }
            if 2 * t > total {
                avg.iter_mut().zip(&v).for_each(|(a, b)| *a += scale * b);
                avg_b += scale * vb;
                averaged += 1;
            }
        }
    }
    let n = averaged as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    (avg, avg_b / n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn train_svm(data: &LabeledDataset, params: &SvmParams) -> Result<LinearSvmModel> {
    if !(params.c > 0.0 && params.c.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!("SVM c = {} must be positive", params.c)));
    }
    if params.epochs < 1 {
        return Err(Error::InvalidHyperparameter("SVM needs at least one epoch".into()));
    }
    let classes = check_training_set(data)?;
    let standardizer = Standardizer::fit(data.samples().iter().map(|s| s.features.as_slice()));
    let x: Vec<Vec<f64>> = data.samples().iter().map(|s| standardizer.apply(&s.features)).collect();
    let mut rng = Stream::new(params.seed, streams::SVM);
    let order: Vec<Vec<usize>> = (0..params.epochs)
        .map(|_| {
            let mut o: Vec<usize> = (0..x.len()).collect();
            rng.shuffle(&mut o);
            o
        })
        .collect();
    let fitted: Vec<(Vec<f64>, f64)> = classes
        .par_iter()
        .map(|&c| {
            let sign: Vec<f64> = data
                .samples()
                .iter()
                .map(|s| if s.subject == c { 1.0 } else { -1.0 })
                .collect();
            pegasos(&x, &sign, &order, params.c)
        })
        .collect();
    let (weights, biases) = fitted.into_iter().unzip();
    Ok(LinearSvmModel {
        classes,
        standardizer,
        weights,
        biases,
    })
}

const MAGIC: &[u8; 4] = b"LSVM";
const VERSION: u32 = 1;

impl LinearSvmModel {
    pub fn decision_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.standardizer.mean.len() {
            return Err(Error::InvalidInput(format!(
                "feature vector has {} values, model expects {}",
                x.len(),
                self.standardizer.mean.len()
            )));
        }
        let z = self.standardizer.apply(x);
        Ok(self.weights.iter().zip(&self.biases).map(|(w, b)| dot(w, &z) + b).collect())
    }

    /// Largest decision value; ties go to the smaller label.
    pub fn predict(&self, x: &[f64]) -> Result<Label> {
        Ok(self.classes[argmax(&self.decision_values(x)?)])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.len(self.standardizer.mean.len());
        w.len(self.classes.len());
        for c in &self.classes {
            w.u32(*c);
        }
        w.f64s(&self.standardizer.mean);
        w.f64s(&self.standardizer.scale);
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            w.f64s(wt);
            w.f64(*b);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "linear SVM")?;
        let d = r.len()?;
        let nc = r.len()?;
        if (d as u128 + 1) * (nc as u128 + 2) * 8 > bytes.len() as u128 {
            return Err(Error::ModelFormat("linear SVM: truncated payload".into()));
        }
        let classes = (0..nc).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mean = r.f64s(d)?;
        let scale = r.f64s(d)?;
        let mut weights = Vec::with_capacity(nc);
        let mut biases = Vec::with_capacity(nc);
        for _ in 0..nc {
            weights.push(r.f64s(d)?);
            biases.push(r.f64()?);
        }
        r.finish()?;
        if scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::ModelFormat("linear SVM: non-positive scale".into()));
        }
        Ok(LinearSvmModel {
            classes,
            standardizer: Standardizer { mean, scale },
            weights,
            biases,
        })
    }
}

impl Classifier for LinearSvmModel {
    fn name(&self) -> &'static str {
        "SVM"
    }

    fn predict_window(&self, window: &[&[f64]]) -> Result<Label> {
        match window {
            [x] => self.predict(x),
            _ => Err(Error::WindowShape {
                expected: 1,
                got: window.len(),
            }),
        }
    }
}
