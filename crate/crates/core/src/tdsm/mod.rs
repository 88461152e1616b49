//! Temporal deformable shape model: a point-distribution model over aligned
//! landmark sets, `S = mean + V w`, with every weight held inside
//! `[-2 sqrt(lambda_i), 2 sqrt(lambda_i)]`.

mod fit;
mod io;
mod mesh;
mod table;

pub use fit::{
    fit, fit_instance, fit_sequence, refine_instance, FitOptions, FitResult, InstanceFit, MeshFrame,
    PreAlignment, Refinement, TemporalOptions,
};
pub use io::{load_model, model_to_json, save_model, MODEL_FORMAT_VERSION};
pub use mesh::PointCloudMesh;
pub use table::{build_instance_table, Instance, InstanceTable, Sampling, SamplingSpec, TableOptions};

use crate::error::{Error, Result};
use crate::numerics::pca;
use crate::shape::{generalized_procrustes, GpaOptions, GpaResult, LandmarkSet};

/// Trained shape model. Modes are stored as unit columns of length `3N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    mean_shape: Vec<f64>,
    modes: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    num_landmarks: usize,
}

impl ShapeModel {
    pub fn new(mean_shape: Vec<f64>, modes: Vec<Vec<f64>>, eigenvalues: Vec<f64>) -> Result<Self> {
        let dim = mean_shape.len();
        if dim == 0 || !dim.is_multiple_of(3) {
            return Err(Error::InvalidInput(format!(
                "mean shape length {dim} is not a positive multiple of 3"
            )));
        }
        if modes.len() != eigenvalues.len() {
            return Err(Error::InvalidInput(format!(
                "{} modes but {} eigenvalues",
                modes.len(),
                eigenvalues.len()
            )));
        }
        if let Some(bad) = modes.iter().position(|m| m.len() != dim) {
            return Err(Error::InvalidInput(format!("mode {bad} has wrong length")));
        }
        if eigenvalues.iter().any(|l| !(l.is_finite() && *l > 0.0))
            || eigenvalues.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::InvalidInput(
                "eigenvalues must be positive and non-increasing".into(),
            ));
        }
        if mean_shape.iter().chain(modes.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("model contains non-finite values".into()));
        }
        for (i, a) in modes.iter().enumerate() {
            for (j, b) in modes.iter().enumerate().skip(i) {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > 1e-8 {
                    return Err(Error::InvalidInput(format!(
                        "modes {i} and {j} are not orthonormal (dot {d})"
                    )));
                }
            }
        }
        Ok(ShapeModel {
            num_landmarks: dim / 3,
            mean_shape,
            modes,
            eigenvalues,
        })
    }

    pub fn mean_shape(&self) -> &[f64] {
        &self.mean_shape
    }

    pub fn mean_landmarks(&self) -> LandmarkSet {
        LandmarkSet::from_flat(&self.mean_shape).expect("validated mean shape")
    }

    pub fn modes(&self) -> &[Vec<f64>] {
        &self.modes
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_landmarks
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// `2 sqrt(lambda_i)`.
    pub fn bound(&self, mode: usize) -> f64 {
        2.0 * self.eigenvalues[mode].sqrt()
    }

    /// Weights of the orthogonal projection of `shape` onto the modes.
    pub fn project(&self, shape: &LandmarkSet) -> Result<WeightVector> {
        if shape.len() != self.num_landmarks {
            return Err(Error::CorrespondenceMismatch {
                left: self.num_landmarks,
                right: shape.len(),
            });
        }
        let flat = shape.to_flat();
        Ok(WeightVector(
            self.modes
                .iter()
                .map(|m| {
                    m.iter()
                        .zip(&flat)
                        .zip(&self.mean_shape)
                        .map(|((v, x), s)| v * (x - s))
                        .sum()
                })
                .collect(),
        ))
    }

    fn combine(&self, weights: &[f64]) -> LandmarkSet {
        let mut flat = self.mean_shape.clone();
        for (w, mode) in weights.iter().zip(&self.modes) {
            if *w != 0.0 {
                flat.iter_mut().zip(mode).for_each(|(x, v)| *x += w * v);
            }
        }
        LandmarkSet::from_flat(&flat).expect("finite model yields finite shape")
    }
}

/// Mode weights `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn zeros(k: usize) -> Self {
        WeightVector(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn check_len(&self, model: &ShapeModel) -> Result<()> {
        if self.len() != model.num_modes() {
            return Err(Error::WeightLength {
                expected: model.num_modes(),
                got: self.len(),
            });
        }
        Ok(())
    }

    /// First weight outside its `+-2 sqrt(lambda)` bound, if any.
    pub fn check_bounds(&self, model: &ShapeModel) -> Result<()> {
        self.check_len(model)?;
        for (index, &value) in self.0.iter().enumerate() {
            let bound = model.bound(index);
            if !(value >= -bound && value <= bound) {
                return Err(Error::WeightOutOfBounds {
                    index,
                    value,
                    bound,
                });
            }
        }
        Ok(())
    }

    pub fn in_bounds(&self, model: &ShapeModel) -> bool {
        self.check_bounds(model).is_ok()
    }

    pub fn clamped(&self, model: &ShapeModel) -> WeightVector {
        WeightVector(
            self.0
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let b = model.bound(i);
                    w.clamp(-b, b)
                })
                .collect(),
        )
    }

    /// Euclidean distance in units of each mode's standard deviation.
    pub fn normalized_distance(&self, other: &WeightVector, model: &ShapeModel) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .zip(model.eigenvalues())
            .map(|((a, b), l)| (a - b) * (a - b) / l)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthesisMode {
    /// Reject weights outside the bounds.
    Strict,
    /// Project each weight onto its bound interval first.
    Clamp,
}

/// `mean + V w` as a landmark set.
pub fn synthesize(model: &ShapeModel, w: &WeightVector, mode: SynthesisMode) -> Result<LandmarkSet> {
    w.check_len(model)?;
    match mode {
        SynthesisMode::Strict => {
            w.check_bounds(model)?;
            Ok(model.combine(&w.0))
        }
        SynthesisMode::Clamp => Ok(model.combine(&w.clamped(model).0)),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    /// Fraction of total variance the retained modes must explain.
    pub variance_retained: f64,
    pub gpa: GpaOptions,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            variance_retained: 0.95,
            gpa: GpaOptions::default(),
        }
    }
}

/// A trained model together with what went into choosing it.
#[derive(Clone, Debug)]
pub struct Training {
    pub model: ShapeModel,
    /// All eigenvalues judged non-zero, descending.
    pub spectrum: Vec<f64>,
    /// Sum of retained over sum of all non-zero eigenvalues (1 when none).
    pub retained_fraction: f64,
    pub gpa: GpaResult,
    /// Training shapes after alignment, flattened, in model units.
    pub aligned: Vec<Vec<f64>>,
}

pub fn train(training_set: &[LandmarkSet], opts: TrainOptions) -> Result<ShapeModel> {
    Ok(train_detailed(training_set, opts)?.model)
}

/// Aligns the training shapes, rescales them to the average input size so
/// the model keeps the data's units, and keeps the smallest number of
/// principal modes reaching `variance_retained`.
pub fn train_detailed(training_set: &[LandmarkSet], opts: TrainOptions) -> Result<Training> {
    if !(opts.variance_retained > 0.0 && opts.variance_retained <= 1.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "variance_retained must be in (0, 1], got {}",
            opts.variance_retained
        )));
    }
    let gpa = generalized_procrustes(training_set, opts.gpa)?;
    let unit = if opts.gpa.allow_scale {
        training_set.iter().map(LandmarkSet::centroid_size).sum::<f64>()
            / training_set.len() as f64
    } else {
        1.0
    };
    let aligned: Vec<Vec<f64>> = gpa
        .aligned
        .iter()
        .map(|s| s.to_flat().into_iter().map(|v| v * unit).collect())
        .collect();
    let decomposition = pca(&aligned)?;

    let dim = decomposition.mean.len();
    let energy = decomposition.mean.iter().map(|v| v * v).sum::<f64>() / dim as f64;
    let top = decomposition.eigen.values.first().copied().unwrap_or(0.0);
    let floor = (1e-10 * top).max(1e-20 * energy.max(f64::MIN_POSITIVE));
    let nonzero: Vec<usize> = decomposition
        .eigen
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > floor)
        .map(|(i, _)| i)
        .collect();
    let spectrum: Vec<f64> = nonzero.iter().map(|&i| decomposition.eigen.values[i]).collect();
    let total: f64 = spectrum.iter().sum();

    let mut k = 0;
    let mut cumulative = 0.0;
    if total > 0.0 {
        while k < spectrum.len() && cumulative / total < opts.variance_retained {
            cumulative += spectrum[k];
            k += 1;
        }
    }
    let retained_fraction = if total > 0.0 { cumulative / total } else { 1.0 };

    let modes = nonzero[..k]
        .iter()
        .map(|&i| decomposition.eigen.vectors[i].clone())
        .collect();
    let model = ShapeModel::new(decomposition.mean, modes, spectrum[..k].to_vec())?;
    Ok(Training {
        model,
        spectrum,
        retained_fraction,
        gpa,
        aligned,
    })
}
