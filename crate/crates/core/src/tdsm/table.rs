use serde::{Deserialize, Serialize};

use super::{synthesize, ShapeModel, SynthesisMode, WeightVector};
use crate::error::{Error, Result};
use crate::shape::LandmarkSet;

/// How per-mode grids are combined into weight vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Cartesian product when it stays under `cartesian_limit`, else axial.
    Auto,
    /// Every combination of per-mode grid values.
    Cartesian,
    /// One mode at a time with the others at zero, plus the zero vector.
    Axial,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TableOptions {
    pub samples_per_mode: usize,
    /// Grid spans `+-bound_fraction * 2 sqrt(lambda_i)`.
    pub bound_fraction: f64,
    pub sampling: Sampling,
    pub cartesian_limit: usize,
    pub cap: usize,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions {
            samples_per_mode: 5,
            bound_fraction: 1.0,
            sampling: Sampling::Auto,
            cartesian_limit: 10_000,
            cap: 100_000,
        }
    }
}

/// The sampling actually used to build a table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub samples_per_mode: usize,
    pub bound_fraction: f64,
    /// `Cartesian` or `Axial`, never `Auto`.
    pub strategy: Sampling,
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub weights: WeightVector,
    pub shape: LandmarkSet,
}

/// Precomputed model instances for fitting.
#[derive(Clone, Debug)]
pub struct InstanceTable {
    instances: Vec<Instance>,
    spec: SamplingSpec,
}

impl InstanceTable {
    /// Table over explicit weight vectors, each checked against the bounds.
    pub fn from_weights(model: &ShapeModel, weights: Vec<WeightVector>, spec: SamplingSpec) -> Result<Self> {
        let instances = weights
            .into_iter()
            .map(|w| {
                let shape = synthesize(model, &w, SynthesisMode::Strict)?;
                Ok(Instance { weights: w, shape })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InstanceTable { instances, spec })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn spec(&self) -> SamplingSpec {
        self.spec
    }
}

/// Uniform grid of `n` values over `[-half_width, half_width]`; the middle
/// value is exactly zero for odd `n`.
fn grid(n: usize, half_width: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|j| half_width * (2.0 * j as f64 / (n - 1) as f64 - 1.0))
        .collect()
}

fn cartesian_size(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, _| acc.saturating_mul(n as u128))
}

pub fn build_instance_table(model: &ShapeModel, opts: &TableOptions) -> Result<InstanceTable> {
    let n = opts.samples_per_mode;
    if n == 0 {
        return Err(Error::InvalidHyperparameter("samples_per_mode must be at least 1".into()));
    }
    if !(opts.bound_fraction > 0.0 && opts.bound_fraction <= 1.0) {
        return Err(Error::InvalidHyperparameter(format!(
            "bound_fraction must be in (0, 1], got {}",
            opts.bound_fraction
        )));
    }
    let k = model.num_modes();
    let full = cartesian_size(n, k);
    let strategy = match opts.sampling {
        Sampling::Auto if full <= opts.cartesian_limit as u128 => Sampling::Cartesian,
        Sampling::Auto => Sampling::Axial,
        s => s,
    };
    let axes: Vec<Vec<f64>> = (0..k)
        .map(|i| grid(n, opts.bound_fraction * model.bound(i)))
        .collect();

    let weights: Vec<WeightVector> = match strategy {
        Sampling::Cartesian => {
            if full > opts.cap as u128 {
                return Err(Error::TableTooLarge {
                    requested: full,
                    cap: opts.cap,
                });
            }
            let mut out = Vec::with_capacity(full as usize);
            let mut digits = vec![0usize; k];
            'odometer: loop {
                out.push(WeightVector(
                    digits.iter().enumerate().map(|(i, &d)| axes[i][d]).collect(),
                ));
                // The last mode varies fastest.
                for pos in (0..k).rev() {
                    digits[pos] += 1;
                    if digits[pos] < n {
                        continue 'odometer;
                    }
                    digits[pos] = 0;
                }
                break;
            }
            out
        }
        Sampling::Axial | Sampling::Auto => {
            let requested = (k * n) as u128 + 1;
            let mut out = vec![WeightVector::zeros(k)];
            for (mode, values) in axes.iter().enumerate() {
                for &v in values {
                    if v == 0.0 {
                        continue;
                    }
                    let mut w = WeightVector::zeros(k);
                    w.0[mode] = v;
                    out.push(w);
                }
            }
            if out.len() > opts.cap {
                return Err(Error::TableTooLarge {
                    requested,
                    cap: opts.cap,
                });
            }
            out
        }
    };

    InstanceTable::from_weights(
        model,
        weights,
        SamplingSpec {
            samples_per_mode: n,
            bound_fraction: opts.bound_fraction,
            strategy,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_with(eigenvalues: &[f64]) -> ShapeModel {
        let k = eigenvalues.len();
        let dim = 3 * (k + 3);
        let mean: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.7).sin()).collect();
        let modes = (0..k)
            .map(|m| {
                let mut v = vec![0.0; dim];
                v[m] = 1.0;
                v
            })
            .collect();
        ShapeModel::new(mean, modes, eigenvalues.to_vec()).unwrap()
    }

    #[test]
    fn one_mode_three_samples() {
        let m = model_with(&[4.0]);
        let t = build_instance_table(
            &m,
            &TableOptions {
                samples_per_mode: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let ws: Vec<f64> = t.instances().iter().map(|i| i.weights.0[0]).collect();
        assert_eq!(ws, vec![-4.0, 0.0, 4.0]);
        assert_eq!(t.spec().strategy, Sampling::Cartesian);
    }

    #[test]
    fn two_modes_cartesian() {
        let m = model_with(&[4.0, 1.0]);
        let t = build_instance_table(
            &m,
            &TableOptions {
                samples_per_mode: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(t.len(), 9);
        assert!(t.instances().iter().all(|i| i.weights.in_bounds(&m)));
    }

    #[test]
    fn axial_fallback_deduplicates_zero() {
        let m = model_with(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        let t = build_instance_table(
            &m,
            &TableOptions {
                samples_per_mode: 7,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(t.spec().strategy, Sampling::Axial);
        // Distinct weight vectors by exact equality.
        let mut distinct: Vec<&WeightVector> = Vec::new();
        for inst in t.instances() {
            if !distinct.iter().any(|w| **w == inst.weights) {
                distinct.push(&inst.weights);
            }
        }
        assert_eq!(distinct.len(), 5 * 7 - 4);
        assert_eq!(t.len(), 31);
    }

    #[test]
    fn even_sample_count_adds_zero_vector() {
        let m = model_with(&[2.0, 1.0]);
        let t = build_instance_table(
            &m,
            &TableOptions {
                samples_per_mode: 4,
                sampling: Sampling::Axial,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(t.len(), 2 * 4 + 1);
    }

    #[test]
    fn cartesian_over_cap_is_rejected() {
        let m = model_with(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.5]);
        let err = build_instance_table(
            &m,
            &TableOptions {
                samples_per_mode: 10,
                sampling: Sampling::Cartesian,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::TableTooLarge { requested: 1_000_000, cap: 100_000 }));
    }

    #[test]
    fn zero_modes_gives_mean_only() {
        let m = model_with(&[]);
        let t = build_instance_table(&m, &TableOptions::default()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.instances()[0].shape.to_flat(), m.mean_shape());
    }

    #[test]
    fn instances_match_synthesis() {
        let m = model_with(&[3.0, 2.0]);
        let t = build_instance_table(&m, &TableOptions::default()).unwrap();
        for inst in t.instances() {
            let again = synthesize(&m, &inst.weights, SynthesisMode::Strict).unwrap();
            assert!(again.max_abs_diff(&inst.shape) <= 1e-12);
        }
    }

    #[test]
    fn invalid_options() {
        let m = model_with(&[1.0]);
        for opts in [
            TableOptions { samples_per_mode: 0, ..Default::default() },
            TableOptions { bound_fraction: 0.0, ..Default::default() },
            TableOptions { bound_fraction: 1.5, ..Default::default() },
        ] {
            assert!(matches!(
                build_instance_table(&m, &opts),
                Err(Error::InvalidHyperparameter(_))
            ));
        }
    }
}
