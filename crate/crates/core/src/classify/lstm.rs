//! Single-layer LSTM over a short window of consecutive frames, followed by
//! inverted dropout and a softmax layer, trained with RMSprop.
//!
//! Gate rows are stacked in the order input, forget, cell, output. Training
//! works on mini-batches held as matrix columns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{argmax, check_training_set, Classifier, Label, LabeledDataset, Standardizer};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{streams, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Fraction of hidden units dropped during training.
    pub dropout: f64,
    pub lookback: usize,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub seed: u64,
}

impl Default for LstmParams {
    fn default() -> Self {
        LstmParams {
            hidden: 64,
            epochs: 100,
            batch: 32,
            learning_rate: 1e-4,
            dropout: 0.5,
            lookback: 2,
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
            seed: 0,
        }
    }
}

/// All trainable tensors; also used for their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights {
    /// `4H x D` input weights.
    pub w: DMatrix<f64>,
    /// `4H x H` recurrent weights.
    pub u: DMatrix<f64>,
    pub b: DVector<f64>,
    /// `C x H` output layer.
    pub wy: DMatrix<f64>,
    pub by: DVector<f64>,
}

pub type LstmGradients = LstmWeights;

impl LstmWeights {
    pub fn zeros(input: usize, hidden: usize, classes: usize) -> Self {
        LstmWeights {
            w: DMatrix::zeros(4 * hidden, input),
            u: DMatrix::zeros(4 * hidden, hidden),
            b: DVector::zeros(4 * hidden),
            wy: DMatrix::zeros(classes, hidden),
            by: DVector::zeros(classes),
        }
    }

    /// Xavier-uniform matrices, zero biases except a forget-gate bias of 1.
    pub fn xavier(input: usize, hidden: usize, classes: usize, rng: &mut Stream) -> Self {
        let mut fill = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| rng.uniform_in(-limit, limit)).collect::<Vec<_>>())
        };
        let w = fill(4 * hidden, input, input, hidden);
        let u = fill(4 * hidden, hidden, hidden, hidden);
        let wy = fill(classes, hidden, hidden, classes);
        let mut b = DVector::zeros(4 * hidden);
        b.rows_mut(hidden, hidden).fill(1.0);
        LstmWeights {
            w,
            u,
            b,
            wy,
            by: DVector::zeros(classes),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    /// Tensors with their names, in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("W", self.w.as_slice()),
            ("U", self.u.as_slice()),
            ("b", self.b.as_slice()),
            ("Wy", self.wy.as_slice()),
            ("by", self.by.as_slice()),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w.as_mut_slice(),
            self.u.as_mut_slice(),
            self.b.as_mut_slice(),
            self.wy.as_mut_slice(),
            self.by.as_mut_slice(),
        ]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Step {
    x: DMatrix<f64>,
    h_prev: DMatrix<f64>,
    c_prev: DMatrix<f64>,
    i: DMatrix<f64>,
    f: DMatrix<f64>,
    g: DMatrix<f64>,
    o: DMatrix<f64>,
    tanh_c: DMatrix<f64>,
}

struct Forward {
    steps: Vec<Step>,
    dropped: DMatrix<f64>,
    probs: DMatrix<f64>,
}

/// Runs the window batch `xs[t]` (each `D x B`) through the network.
/// `mask` multiplies the final hidden state.
fn forward(p: &LstmWeights, xs: &[DMatrix<f64>], mask: Option<&DMatrix<f64>>) -> Forward {
    let hdim = p.hidden();
    let batch = xs[0].ncols();
    let mut h = DMatrix::zeros(hdim, batch);
    let mut c = DMatrix::zeros(hdim, batch);
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let mut z = &p.w * x + &p.u * &h;
        for mut col in z.column_iter_mut() {
            col += &p.b;
        }
        let i = z.rows(0, hdim).map(sigmoid);
        let f = z.rows(hdim, hdim).map(sigmoid);
        let g = z.rows(2 * hdim, hdim).map(f64::tanh);
        let o = z.rows(3 * hdim, hdim).map(sigmoid);
        let c_new = f.component_mul(&c) + i.component_mul(&g);
        let tanh_c = c_new.map(f64::tanh);
        let h_new = o.component_mul(&tanh_c);
        steps.push(Step {
            x: x.clone(),
            h_prev: std::mem::replace(&mut h, h_new),
            c_prev: std::mem::replace(&mut c, c_new),
            i,
            f,
            g,
            o,
            tanh_c,
        });
    }
    let dropped = match mask {
        Some(m) => h.component_mul(m),
        None => h,
    };
    let mut logits = &p.wy * &dropped;
    for mut col in logits.column_iter_mut() {
        col += &p.by;
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        col /= sum;
    }
    Forward {
        steps,
        dropped,
        probs: logits,
    }
}

fn mean_cross_entropy(probs: &DMatrix<f64>, targets: &[usize]) -> f64 {
    let s: f64 = targets.iter().enumerate().map(|(b, &y)| -probs[(y, b)].ln()).sum();
    s / targets.len() as f64
}

/// Gradient of the mean cross-entropy of the batch.
fn backward(p: &LstmWeights, fw: &Forward, targets: &[usize], mask: Option<&DMatrix<f64>>) -> LstmGradients {
    let hdim = p.hidden();
    let batch = targets.len() as f64;
    let mut dlogits = fw.probs.clone();
    for (b, &y) in targets.iter().enumerate() {
        dlogits[(y, b)] -= 1.0;
    }
    dlogits /= batch;
    let mut grad = LstmWeights::zeros(p.w.ncols(), hdim, p.wy.nrows());
    grad.wy = &dlogits * fw.dropped.transpose();
    grad.by = dlogits.column_sum();
    let mut dh = p.wy.transpose() * &dlogits;
    if let Some(m) = mask {
        dh.component_mul_assign(m);
    }
    let mut dc = DMatrix::zeros(hdim, targets.len());
    let mut dz = DMatrix::zeros(4 * hdim, targets.len());
    for s in fw.steps.iter().rev() {
        let d_o = dh.component_mul(&s.tanh_c);
        dc += dh.component_mul(&s.o).component_mul(&s.tanh_c.map(|t| 1.0 - t * t));
        let di = dc.component_mul(&s.g);
        let dg = dc.component_mul(&s.i);
        let df = dc.component_mul(&s.c_prev);
        dz.rows_mut(0, hdim).copy_from(&di.component_mul(&s.i.map(|v| v * (1.0 - v))));
        dz.rows_mut(hdim, hdim).copy_from(&df.component_mul(&s.f.map(|v| v * (1.0 - v))));
        dz.rows_mut(2 * hdim, hdim).copy_from(&dg.component_mul(&s.g.map(|v| 1.0 - v * v)));
        dz.rows_mut(3 * hdim, hdim).copy_from(&d_o.component_mul(&s.o.map(|v| v * (1.0 - v))));
        grad.w += &dz * s.x.transpose();
        grad.u += &dz * s.h_prev.transpose();
        grad.b += dz.column_sum();
        dh = p.u.transpose() * &dz;
        dc = dc.component_mul(&s.f);
    }
    grad
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmModel {
    pub classes: Vec<Label>,
    pub standardizer: Standardizer,
    pub lookback: usize,
    pub dropout: f64,
    pub weights: LstmWeights,
}

impl LstmModel {
    pub fn hidden(&self) -> usize {
        self.weights.hidden()
    }

    fn batch_inputs(&self, windows: &[Vec<&[f64]>]) -> Vec<DMatrix<f64>> {
        let d = self.weights.w.ncols();
        (0..self.lookback)
            .map(|t| {
                let mut x = DMatrix::zeros(d, windows.len());
                for (b, w) in windows.iter().enumerate() {
                    x.column_mut(b).copy_from_slice(&self.standardizer.apply(w[t]));
                }
                x
            })
            .collect()
    }

    fn check_window(&self, window: &[&[f64]]) -> Result<()> {
        if window.len() != self.lookback {
            return Err(Error::WindowShape {
                expected: self.lookback,
                got: window.len(),
            });
        }
        let d = self.weights.w.ncols();
        if let Some(x) = window.iter().find(|x| x.len() != d) {
            return Err(Error::InvalidInput(format!(
                "feature vector has {} values, model expects {d}",
                x.len()
            )));
        }
        Ok(())
    }

    /// Class probabilities at inference (no dropout).
    pub fn probabilities(&self, window: &[&[f64]]) -> Result<Vec<f64>> {
        self.check_window(window)?;
        let fw = forward(&self.weights, &self.batch_inputs(&[window.to_vec()]), None);
        Ok(fw.probs.column(0).iter().copied().collect())
    }

    pub fn predict(&self, window: &[&[f64]]) -> Result<Label> {
        Ok(self.classes[argmax(&self.probabilities(window)?)])
    }

    /// Mean cross-entropy without dropout; `targets` are class slots.
    pub fn loss(&self, windows: &[Vec<&[f64]>], targets: &[usize]) -> f64 {
        let fw = forward(&self.weights, &self.batch_inputs(windows), None);
        mean_cross_entropy(&fw.probs, targets)
    }

    /// Analytic gradient of [`LstmModel::loss`].
    pub fn gradients(&self, windows: &[Vec<&[f64]>], targets: &[usize]) -> LstmGradients {
        let xs = self.batch_inputs(windows);
        let fw = forward(&self.weights, &xs, None);
        backward(&self.weights, &fw, targets, None)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.len(self.weights.w.ncols());
        w.len(self.hidden());
        w.len(self.classes.len());
        w.len(self.lookback);
        w.f64(self.dropout);
        for c in &self.classes {
            w.u32(*c);
        }
        w.f64s(&self.standardizer.mean);
        w.f64s(&self.standardizer.scale);
        for (_, t) in self.weights.tensors() {
            w.f64s(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, MAGIC, VERSION, "LSTM")?;
        let d = r.len()?;
        let h = r.len()?;
        let nc = r.len()?;
        let lookback = r.len()?;
        let dropout = r.f64()?;
        let params = 4 * h as u128 * (d as u128 + h as u128 + 1) + nc as u128 * (h as u128 + 1) + 2 * d as u128;
        if params * 8 > bytes.len() as u128 || lookback == 0 {
            return Err(Error::ModelFormat("LSTM: header inconsistent with payload".into()));
        }
        let classes = (0..nc).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mean = r.f64s(d)?;
        let scale = r.f64s(d)?;
        let mut weights = LstmWeights::zeros(d, h, nc);
        for t in weights.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&r.f64s(n)?);
        }
        r.finish()?;
        Ok(LstmModel {
            classes,
            standardizer: Standardizer { mean, scale },
            lookback,
            dropout,
            weights,
        })
    }
}

const MAGIC: &[u8; 4] = b"LSTM";
const VERSION: u32 = 1;

impl Classifier for LstmModel {
    fn name(&self) -> &'static str {
        "LSTM"
    }

    fn lookback(&self) -> usize {
        self.lookback
    }

    fn predict_window(&self, window: &[&[f64]]) -> Result<Label> {
        self.predict(window)
    }
}

fn validate(params: &LstmParams) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidHyperparameter(m));
    if params.hidden == 0 || params.epochs == 0 || params.batch == 0 || params.lookback == 0 {
        return bad("LSTM hidden size, epochs, batch and lookback must be positive".into());
    }
    if !(params.learning_rate > 0.0 && params.learning_rate.is_finite()) {
        return bad(format!("learning rate {} must be positive", params.learning_rate));
    }
    if !(0.0..1.0).contains(&params.dropout) {
        return bad(format!("dropout {} is not in [0, 1)", params.dropout));
    }
    if !(0.0..1.0).contains(&params.rms_decay) || !(params.rms_epsilon > 0.0) {
        return bad("RMSprop decay must be in [0, 1) and epsilon positive".into());
    }
    Ok(())
}

/// Trains on every window of `lookback` consecutive frames of `data`,
/// labelled by the subject.
pub fn train_lstm(data: &LabeledDataset, params: &LstmParams) -> Result<LstmModel> {
    validate(params)?;
    let classes = check_training_set(data)?;
    let all = data.windows(params.lookback);
    if all.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no run of {} consecutive frames to train on",
            params.lookback
        )));
    }
    let standardizer = Standardizer::fit(data.samples().iter().map(|s| s.features.as_slice()));
    let mut rng = Stream::new(params.seed, streams::LSTM);
    let weights = LstmWeights::xavier(data.dim(), params.hidden, classes.len(), &mut rng);
    let mut model = LstmModel {
        classes,
        standardizer,
        lookback: params.lookback,
        dropout: params.dropout,
        weights,
    };
    let targets: Vec<usize> = all
        .iter()
        .map(|w| model.classes.binary_search(&data.samples()[*w.last().unwrap()].subject).unwrap())
        .collect();
    let frames: Vec<Vec<&[f64]>> = all
        .iter()
        .map(|w| w.iter().map(|&i| data.samples()[i].features.as_slice()).collect())
        .collect();
    let keep = 1.0 - params.dropout;
    let mut cache = LstmWeights::zeros(data.dim(), params.hidden, model.classes.len());
    let mut order: Vec<usize> = (0..all.len()).collect();
    for _ in 0..params.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(params.batch) {
            let windows: Vec<Vec<&[f64]>> = chunk.iter().map(|&i| frames[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let mask = DMatrix::from_fn(params.hidden, chunk.len(), |_, _| {
                if rng.uniform() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let xs = model.batch_inputs(&windows);
            let fw = forward(&model.weights, &xs, Some(&mask));
            let grad = backward(&model.weights, &fw, &ys, Some(&mask));
            let grads = grad.tensors();
            for ((theta, acc), (_, g)) in model.weights.tensors_mut().into_iter().zip(cache.tensors_mut()).zip(grads) {
                for ((t, a), g) in theta.iter_mut().zip(acc.iter_mut()).zip(g) {
                    *a = params.rms_decay * *a + (1.0 - params.rms_decay) * g * g;
                    *t -= params.learning_rate * g / (a.sqrt() + params.rms_epsilon);
                }
            }
        }
    }
    Ok(model)
}

/// Finite-difference comparison of [`LstmModel::gradients`].
#[derive(Clone, Debug)]
pub struct GradientCheck {
    /// Largest relative error per tensor, in [`LstmWeights::tensors`] order.
    pub per_tensor: Vec<(&'static str, f64)>,
    pub max_relative_error: f64,
}

/// Compares every analytic partial derivative with a central difference of
/// step `h`. Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor
/// keeps near-zero partials from dominating.
pub fn gradient_check(
    model: &LstmModel,
    windows: &[Vec<&[f64]>],
    targets: &[usize],
    h: f64,
    floor: f64,
) -> GradientCheck {
    let analytic = model.gradients(windows, targets);
    let mut probe = model.clone();
    let mut per_tensor = Vec::new();
    for (k, (name, a)) in analytic.tensors().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..a.len() {
            let orig = probe.weights.tensors_mut()[k][j];
            probe.weights.tensors_mut()[k][j] = orig + h;
            let up = probe.loss(windows, targets);
            probe.weights.tensors_mut()[k][j] = orig - h;
            let down = probe.loss(windows, targets);
            probe.weights.tensors_mut()[k][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a[j] - numeric).abs() / a[j].abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        per_tensor.push((name, worst));
    }
    let max_relative_error = per_tensor.iter().map(|p| p.1).fold(0.0, f64::max);
    GradientCheck {
        per_tensor,
        max_relative_error,
    }
}
