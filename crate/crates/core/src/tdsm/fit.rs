//! Fitting the model to a point-cloud mesh.
//!
//! Every table instance is placed on the mesh by principal axes, refined by
//! nearest-vertex correspondence with similarity re-alignment, and scored by
//! its final RMS nearest-vertex residual. The lowest score wins, ties going
//! to the lower instance index.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{InstanceTable, PointCloudMesh, ShapeModel, WeightVector};
use crate::error::{Error, Result};
use crate::shape::{centroid_of, principal_frame, solve_similarity, LandmarkSet, SimilarityTransform};

/// Starting poses tried for each instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreAlignment {
    /// Principal axes with skewness-chosen signs only.
    PrincipalAxes,
    /// The skewness choice plus the three other proper sign flips of the axes.
    SignFlips,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FitOptions {
    pub refine_iters: usize,
    /// Stop refining once an iteration improves the residual by less.
    pub improvement_tol: f64,
    pub allow_scale: bool,
    pub pre_alignment: PreAlignment,
    /// Mesh vertices farther than this multiple of the mean shape's radius
    /// from the face centre are ignored when estimating the mesh frame.
    pub crop_factor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            refine_iters: 10,
            improvement_tol: 1e-9,
            allow_scale: true,
            pre_alignment: PreAlignment::PrincipalAxes,
            crop_factor: 1.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Winning instance's landmarks in mesh coordinates.
    pub landmarks: LandmarkSet,
    pub best_weights: WeightVector,
    pub distance: f64,
    pub instance_index: usize,
    /// Maps the instance from model to mesh coordinates.
    pub transform: SimilarityTransform,
}

/// One instance's refinement trace.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub landmarks: LandmarkSet,
    pub transform: SimilarityTransform,
    /// RMS nearest-vertex residual at the start and after each accepted step.
    pub residuals: Vec<f64>,
}

impl Refinement {
    pub fn distance(&self) -> f64 {
        *self.residuals.last().expect("at least the starting residual")
    }
}

#[derive(Clone, Debug)]
pub struct InstanceFit {
    pub landmarks: LandmarkSet,
    pub transform: SimilarityTransform,
    pub distance: f64,
}

/// Centre and principal frame of the face region of a mesh.
#[derive(Clone, Debug)]
pub struct MeshFrame {
    pub center: Vector3<f64>,
    pub frame: Matrix3<f64>,
    /// Vertices that contributed to the estimate.
    pub support: usize,
}

const CENTER_CANDIDATES: usize = 1024;

impl MeshFrame {
    /// The densest `radius`-ball among evenly strided candidate vertices
    /// seeds a trimmed mean, iterated to a fixed point; the principal frame
    /// comes from the vertices inside the final ball.
    pub fn estimate(mesh: &PointCloudMesh, radius: f64) -> Result<MeshFrame> {
        let verts = mesh.vertices();
        let r2 = radius * radius;
        let stride = verts.len().div_ceil(CENTER_CANDIDATES).max(1);
        let mut best = (0usize, 0usize);
        for i in (0..verts.len()).step_by(stride) {
            let c = verts[i];
            let count = verts.iter().filter(|v| (*v - c).norm_squared() <= r2).count();
            if count > best.1 {
                best = (i, count);
            }
        }
        let mut center = verts[best.0];
        let mut inside: Vec<Vector3<f64>> = Vec::new();
        for _ in 0..50 {
            inside = verts
                .iter()
                .filter(|v| (*v - center).norm_squared() <= r2)
                .copied()
                .collect();
            let next = centroid_of(&inside);
            let moved = (next - center).norm();
            center = next;
            if moved <= 1e-12 * radius {
                break;
            }
        }
        inside.retain(|v| (v - center).norm_squared() <= r2);
        let support = inside.len();
        let frame = if support >= 3 {
            principal_frame(&inside)
        } else {
            principal_frame(verts)
        };
        let frame = frame.or_else(|_| principal_frame(verts))?;
        Ok(MeshFrame {
            center,
            frame,
            support,
        })
    }
}

/// The four proper sign patterns of a frame's columns.
const SIGN_FLIPS: [[f64; 3]; 4] = [
    [1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0],
    [1.0, -1.0, -1.0],
];

fn starting_poses(
    instance: &LandmarkSet,
    mesh_frame: &MeshFrame,
    mode: PreAlignment,
) -> Result<Vec<SimilarityTransform>> {
    let c = instance.centroid();
    let own = principal_frame(instance.points())?;
    let flips = match mode {
        PreAlignment::PrincipalAxes => &SIGN_FLIPS[..1],
        PreAlignment::SignFlips => &SIGN_FLIPS[..],
    };
    Ok(flips
        .iter()
        .map(|s| {
            let signs = Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
            let rotation = mesh_frame.frame * signs * own.transpose();
            SimilarityTransform {
                scale: 1.0,
                translation: mesh_frame.center - rotation * c,
                rotation,
            }
        })
        .collect())
}

fn correspond(points: &[Vector3<f64>], mesh: &PointCloudMesh) -> (Vec<Vector3<f64>>, f64) {
    let verts = mesh.vertices();
    let mut sse = 0.0;
    let targets = points
        .iter()
        .map(|p| {
            let (i, d2) = mesh.nearest(p);
            sse += d2;
            verts[i]
        })
        .collect();
    (targets, (sse / points.len() as f64).sqrt())
}

/// Nearest-vertex refinement of one instance from a starting pose.
///
/// Each step re-solves the similarity transform for the current
/// correspondences and then re-corresponds, so the residual cannot grow
/// beyond rounding.
pub fn refine_instance(
    instance: &LandmarkSet,
    mesh: &PointCloudMesh,
    start: &SimilarityTransform,
    opts: &FitOptions,
) -> Refinement {
    let mut transform = start.clone();
    let mut placed = instance.transformed(&transform);
    let (mut targets, r0) = correspond(placed.points(), mesh);
    let mut residuals = vec![r0];
    for _ in 0..opts.refine_iters {
        let Ok(next) = solve_similarity(instance.points(), &targets, opts.allow_scale) else {
            break;
        };
        let moved = instance.transformed(&next);
        let (next_targets, r) = correspond(moved.points(), mesh);
        let prev = *residuals.last().unwrap();
        residuals.push(r);
        transform = next;
        placed = moved;
        targets = next_targets;
        if prev - r < opts.improvement_tol {
            break;
        }
    }
    Refinement {
        landmarks: placed,
        transform,
        residuals,
    }
}

fn best_refinement(
    instance: &LandmarkSet,
    mesh: &PointCloudMesh,
    starts: &[SimilarityTransform],
    opts: &FitOptions,
) -> InstanceFit {
    let mut best: Option<Refinement> = None;
    for start in starts {
        let r = refine_instance(instance, mesh, start, opts);
        if best.as_ref().is_none_or(|b| r.distance() < b.distance()) {
            best = Some(r);
        }
    }
    let best = best.expect("at least one starting pose");
    InstanceFit {
        distance: best.distance(),
        landmarks: best.landmarks,
        transform: best.transform,
    }
}

fn check_inputs(model: &ShapeModel, table: &InstanceTable, mesh: &PointCloudMesh) -> Result<()> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let n = model.num_landmarks();
    if mesh.len() < n {
        return Err(Error::MeshTooSparse {
            vertices: mesh.len(),
            required: n,
        });
    }
    if let Some(bad) = table.instances().iter().find(|i| i.shape.len() != n) {
        return Err(Error::CorrespondenceMismatch {
            left: n,
            right: bad.shape.len(),
        });
    }
    Ok(())
}

fn crop_radius(model: &ShapeModel, opts: &FitOptions) -> f64 {
    let mean = model.mean_landmarks();
    let c = mean.centroid();
    let reach = mean
        .points()
        .iter()
        .map(|p| (p - c).norm())
        .fold(0.0, f64::max);
    opts.crop_factor * reach
}

fn fit_candidates(
    table: &InstanceTable,
    mesh: &PointCloudMesh,
    candidates: &[usize],
    starts_for: impl Fn(&LandmarkSet) -> Result<Vec<SimilarityTransform>> + Sync,
    opts: &FitOptions,
) -> Result<(usize, InstanceFit)> {
    mesh.build_index();
    let fits: Vec<InstanceFit> = candidates
        .par_iter()
        .map(|&i| {
            let shape = &table.instances()[i].shape;
            Ok(best_refinement(shape, mesh, &starts_for(shape)?, opts))
        })
        .collect::<Result<_>>()?;
    let mut winner = 0;
    for (slot, f) in fits.iter().enumerate() {
        if f.distance < fits[winner].distance {
            winner = slot;
        }
    }
    let index = candidates[winner];
    Ok((index, fits.into_iter().nth(winner).unwrap()))
}

/// Detects landmarks on `mesh` as the best-fitting table instance.
pub fn fit(
    model: &ShapeModel,
    table: &InstanceTable,
    mesh: &PointCloudMesh,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_inputs(model, table, mesh)?;
    let frame = MeshFrame::estimate(mesh, crop_radius(model, opts))?;
    let all: Vec<usize> = (0..table.len()).collect();
    let (index, f) = fit_candidates(
        table,
        mesh,
        &all,
        |shape| starting_poses(shape, &frame, opts.pre_alignment),
        opts,
    )?;
    Ok(FitResult {
        landmarks: f.landmarks,
        best_weights: table.instances()[index].weights.clone(),
        distance: f.distance,
        instance_index: index,
        transform: f.transform,
    })
}

/// The fit objective for a single instance, as evaluated inside [`fit`].
pub fn fit_instance(
    model: &ShapeModel,
    table: &InstanceTable,
    mesh: &PointCloudMesh,
    index: usize,
    opts: &FitOptions,
) -> Result<InstanceFit> {
    check_inputs(model, table, mesh)?;
    let inst = table
        .instances()
        .get(index)
        .ok_or_else(|| Error::InvalidInput(format!("instance {index} out of range")))?;
    let frame = MeshFrame::estimate(mesh, crop_radius(model, opts))?;
    let starts = starting_poses(&inst.shape, &frame, opts.pre_alignment)?;
    Ok(best_refinement(&inst.shape, mesh, &starts, opts))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TemporalOptions {
    /// Candidate instances for frame `t` lie within this distance of frame
    /// `t-1`'s weights, measured in per-mode standard deviations.
    pub radius: f64,
}

impl Default for TemporalOptions {
    fn default() -> Self {
        TemporalOptions { radius: 1.0 }
    }
}

/// Fits consecutive frames, seeding each frame from the previous one.
///
/// Frame 0 is a full [`fit`]. Later frames start from the previous pose and
/// only consider instances near the previous weights.
pub fn fit_sequence(
    model: &ShapeModel,
    table: &InstanceTable,
    meshes: &[PointCloudMesh],
    opts: &FitOptions,
    temporal: &TemporalOptions,
) -> Result<Vec<FitResult>> {
    let mut out: Vec<FitResult> = Vec::with_capacity(meshes.len());
    for mesh in meshes {
        let result = match out.last() {
            None => fit(model, table, mesh, opts)?,
            Some(prev) => {
                check_inputs(model, table, mesh)?;
                let candidates: Vec<usize> = table
                    .instances()
                    .iter()
                    .enumerate()
                    .filter(|(i, inst)| {
                        *i == prev.instance_index
                            || inst.weights.normalized_distance(&prev.best_weights, model)
                                <= temporal.radius
                    })
                    .map(|(i, _)| i)
                    .collect();
                let seed = prev.transform.clone();
                let (index, f) =
                    fit_candidates(table, mesh, &candidates, |_| Ok(vec![seed.clone()]), opts)?;
                FitResult {
                    landmarks: f.landmarks,
                    best_weights: table.instances()[index].weights.clone(),
                    distance: f.distance,
                    instance_index: index,
                    transform: f.transform,
                }
            }
        };
        out.push(result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{build_instance_table, TableOptions};
    use super::*;
    use crate::rng::Stream;
    use nalgebra::{Rotation3, Unit};

    fn face_like(rng: &mut Stream, n: usize) -> Vec<f64> {
        // An anisotropic, skewed blob so principal axes are well defined.
        (0..n)
            .flat_map(|_| {
                let u = rng.uniform();
                [rng.normal() * 3.0, rng.normal() * 2.0 + u * u * 2.0, rng.normal() * 0.8 + u]
            })
            .collect()
    }

    fn toy_model(rng: &mut Stream) -> ShapeModel {
        let n = 20;
        let mean = face_like(rng, n);
        let dim = 3 * n;
        let mut modes: Vec<Vec<f64>> = Vec::new();
        for _ in 0..2 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            for m in &modes {
                let d: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
            modes.push(v);
        }
        ShapeModel::new(mean, modes, vec![1.0, 0.25]).unwrap()
    }

    fn distractors(rng: &mut Stream, center: Vector3<f64>, radius: f64, count: usize) -> Vec<Vector3<f64>> {
        (0..count)
            .map(|_| {
                let d = Vector3::new(rng.normal(), rng.normal(), rng.normal()).normalize();
                center + d * radius * rng.uniform_in(1.0, 1.5)
            })
            .collect()
    }

    #[test]
    fn planted_instance_is_recovered() {
        let mut rng = Stream::new(1, 0);
        let model = toy_model(&mut rng);
        let table = build_instance_table(&model, &TableOptions { samples_per_mode: 3, ..Default::default() }).unwrap();
        let j = 5;
        let inst = &table.instances()[j].shape;
        let diameter = 2.0 * inst.centroid_size() * 3.0;
        let mut verts = inst.points().to_vec();
        verts.extend(distractors(&mut rng, inst.centroid(), 10.0 * diameter, 500));
        let mesh = PointCloudMesh::new(verts).unwrap();
        let res = fit(&model, &table, &mesh, &FitOptions::default()).unwrap();
        assert_eq!(res.instance_index, j);
        assert!(res.distance < 1e-9);
    }

    #[test]
    fn rigidly_moved_mean_is_recovered() {
        let mut rng = Stream::new(2, 0);
        let model = toy_model(&mut rng);
        let table = InstanceTable::from_weights(
            &model,
            vec![WeightVector::zeros(2)],
            super::super::SamplingSpec {
                samples_per_mode: 1,
                bound_fraction: 1.0,
                strategy: super::super::Sampling::Axial,
            },
        )
        .unwrap();
        let rot = *Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(0.3, -1.0, 0.5)), 2.0).matrix();
        let motion = SimilarityTransform {
            scale: 1.0,
            rotation: rot,
            translation: Vector3::new(5.0, -2.0, 9.0),
        };
        let moved = model.mean_landmarks().transformed(&motion);
        let mesh = PointCloudMesh::new(moved.points().to_vec()).unwrap();
        let res = fit(&model, &table, &mesh, &FitOptions::default()).unwrap();
        assert!(res.distance < 1e-9);
        assert!(res.landmarks.max_abs_diff(&moved) < 1e-8);
    }

    #[test]
    fn dominant_instance_wins() {
        let mut rng = Stream::new(3, 0);
        let model = toy_model(&mut rng);
        let table = build_instance_table(&model, &TableOptions { samples_per_mode: 3, ..Default::default() }).unwrap();
        let a = &table.instances()[0].shape;
        let verts: Vec<Vector3<f64>> = a
            .points()
            .iter()
            .map(|p| p + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 1e-4)
            .collect();
        let mesh = PointCloudMesh::new(verts).unwrap();
        let sub = InstanceTable::from_weights(
            &model,
            vec![table.instances()[0].weights.clone(), table.instances()[8].weights.clone()],
            table.spec(),
        )
        .unwrap();
        let res = fit(&model, &sub, &mesh, &FitOptions::default()).unwrap();
        assert_eq!(res.instance_index, 0);
    }

    #[test]
    fn distance_matches_single_instance_objective() {
        let mut rng = Stream::new(4, 0);
        let model = toy_model(&mut rng);
        let table = build_instance_table(&model, &TableOptions { samples_per_mode: 3, ..Default::default() }).unwrap();
        let target = LandmarkSet::from_flat(&face_like(&mut rng, 20)).unwrap();
        let mut verts = Vec::new();
        for p in target.points() {
            for _ in 0..20 {
                verts.push(p + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 0.3);
            }
        }
        let mesh = PointCloudMesh::new(verts).unwrap();
        let opts = FitOptions::default();
        let res = fit(&model, &table, &mesh, &opts).unwrap();
        let again = fit_instance(&model, &table, &mesh, res.instance_index, &opts).unwrap();
        assert!((again.distance - res.distance).abs() < 1e-9);
        for i in 0..table.len() {
            assert!(fit_instance(&model, &table, &mesh, i, &opts).unwrap().distance >= res.distance);
        }
    }

    #[test]
    fn error_cases() {
        let mut rng = Stream::new(5, 0);
        let model = toy_model(&mut rng);
        let table = build_instance_table(&model, &TableOptions::default()).unwrap();
        let sparse = PointCloudMesh::new(vec![Vector3::zeros(); 5]).unwrap();
        assert!(matches!(
            fit(&model, &table, &sparse, &FitOptions::default()),
            Err(Error::MeshTooSparse { vertices: 5, required: 20 })
        ));
        let empty = InstanceTable::from_weights(&model, vec![], table.spec()).unwrap();
        let mesh = PointCloudMesh::new(model.mean_landmarks().points().to_vec()).unwrap();
        assert!(matches!(
            fit(&model, &empty, &mesh, &FitOptions::default()),
            Err(Error::EmptyTable)
        ));
    }

    #[test]
    fn sequence_fit_tracks_planted_instances() {
        let mut rng = Stream::new(6, 0);
        let model = toy_model(&mut rng);
        let table = build_instance_table(&model, &TableOptions { samples_per_mode: 5, ..Default::default() }).unwrap();
        let path = [12usize, 12, 13, 13];
        let meshes: Vec<PointCloudMesh> = path
            .iter()
            .map(|&j| PointCloudMesh::new(table.instances()[j].shape.points().to_vec()).unwrap())
            .collect();
        let out = fit_sequence(&model, &table, &meshes, &FitOptions::default(), &TemporalOptions { radius: 1.5 }).unwrap();
        let got: Vec<usize> = out.iter().map(|r| r.instance_index).collect();
        assert_eq!(got, path);
        assert!(out.iter().all(|r| r.distance < 1e-9));
    }
}
