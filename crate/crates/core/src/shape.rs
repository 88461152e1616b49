//! Landmark geometry and Procrustes alignment.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{eigh_symmetric, orthogonal_polar_factor, SymmetricMatrix};

/// Ordered 3D landmarks; index `i` is the same anatomical point in every set
/// of a population.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Vector3<f64>>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidLandmarks(format!(
                "need at least 3 landmarks, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidLandmarks(format!("landmark {i} is not finite")));
        }
        Ok(LandmarkSet { points })
    }

    /// Row-major `(x1, y1, z1, ..., xN, yN, zN)`.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return Err(Error::InvalidLandmarks(format!(
                "flat length {} is not a multiple of 3",
                values.len()
            )));
        }
        Self::new(
            values
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        centroid_of(&self.points)
    }

    /// RMS distance of the points from their centroid.
    pub fn centroid_size(&self) -> f64 {
        let c = self.centroid();
        (self.points.iter().map(|p| (p - c).norm_squared()).sum::<f64>()
            / self.points.len() as f64)
            .sqrt()
    }

    pub fn translated(&self, t: &Vector3<f64>) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|p| p + t).collect(),
        }
    }

    pub fn transformed(&self, transform: &SimilarityTransform) -> LandmarkSet {
        LandmarkSet {
            points: self.points.iter().map(|p| transform.apply(p)).collect(),
        }
    }

    /// Landmarks at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<LandmarkSet> {
        let points = indices
            .iter()
            .map(|&i| {
                self.points.get(i).copied().ok_or_else(|| {
                    Error::InvalidLandmarks(format!("index {i} out of range for {} landmarks", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        LandmarkSet::new(points)
    }

    /// Max absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &LandmarkSet) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn centroid_of(points: &[Vector3<f64>]) -> Vector3<f64> {
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p);
    sum / points.len() as f64
}

/// Arithmetic mean of the landmark positions.
pub fn centroid(s: &LandmarkSet) -> Vector3<f64> {
    s.centroid()
}

/// `p -> scale * rotation * p + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * first.scale,
            rotation: self.rotation * first.rotation,
            translation: self.scale * (self.rotation * first.translation) + self.translation,
        }
    }
}

/// Result of aligning a source set onto a target set.
#[derive(Clone, Debug)]
pub struct AlignmentReport {
    pub aligned: LandmarkSet,
    pub transform: SimilarityTransform,
    /// RMS residual between `aligned` and the target.
    pub distance: f64,
}

pub(crate) fn rms_residual(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let sse: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum();
    (sse / a.len() as f64).sqrt()
}

fn scatter(points: &[Vector3<f64>], center: &Vector3<f64>) -> SymmetricMatrix {
    SymmetricMatrix::from_upper(3, |i, j| {
        points.iter().map(|p| (p[i] - center[i]) * (p[j] - center[j])).sum()
    })
}

fn check_spread(points: &[Vector3<f64>], what: &str) -> Result<()> {
    let c = centroid_of(points);
    let eig = eigh_symmetric(&scatter(points, &c))?;
    if eig.values[0] <= 0.0 || eig.values[1] <= 1e-12 * eig.values[0] {
        return Err(Error::DegenerateAlignment(format!(
            "{what} landmarks are collinear or coincident"
        )));
    }
    Ok(())
}

/// Least-squares similarity (or rigid, without `allow_scale`) fit of
/// corresponding points, without the spread checks on either side.
pub(crate) fn solve_similarity(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    allow_scale: bool,
) -> Result<SimilarityTransform> {
    let cs = centroid_of(source);
    let ct = centroid_of(target);
    let mut cross = Matrix3::zeros();
    let mut source_ss = 0.0;
    for (p, q) in source.iter().zip(target) {
        let dp = p - cs;
        let dq = q - ct;
        cross += dq * dp.transpose();
        source_ss += dp.norm_squared();
    }
    let rotation = orthogonal_polar_factor(&cross)?;
    let scale = if allow_scale {
        let s = (rotation.transpose() * cross).trace() / source_ss;
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::DegenerateAlignment(format!("non-positive scale {s}")));
        }
        s
    } else {
        1.0
    };
    let translation = ct - scale * (rotation * cs);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Similarity (or rigid) transform minimising the summed squared distance of
/// corresponding landmarks; `distance` is `sqrt(SSE / N)`.
pub fn align_pair(
    source: &LandmarkSet,
    target: &LandmarkSet,
    allow_scale: bool,
) -> Result<AlignmentReport> {
    if source.len() != target.len() {
        return Err(Error::CorrespondenceMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    check_spread(&source.points, "source")?;
    check_spread(&target.points, "target")?;
    let transform = solve_similarity(&source.points, &target.points, allow_scale)?;
    let aligned = source.transformed(&transform);
    let distance = rms_residual(&aligned.points, &target.points);
    Ok(AlignmentReport {
        aligned,
        transform,
        distance,
    })
}

/// Procrustes distance: the RMS residual after optimal alignment of `a` onto `b`.
pub fn procrustes_distance(a: &LandmarkSet, b: &LandmarkSet, allow_scale: bool) -> Result<f64> {
    Ok(align_pair(a, b, allow_scale)?.distance)
}

/// Rotation whose columns are the principal axes of `points` (descending
/// variance). Signs of the two most skewed axes make the third moment along
/// them positive; the remaining axis completes a right-handed frame.
pub fn principal_frame(points: &[Vector3<f64>]) -> Result<Matrix3<f64>> {
    let c = centroid_of(points);
    let eig = eigh_symmetric(&scatter(points, &c))?;
    let mut axes: Vec<Vector3<f64>> = eig
        .vectors
        .iter()
        .map(|v| Vector3::new(v[0], v[1], v[2]))
        .collect();
    let skew: Vec<f64> = axes
        .iter()
        .map(|a| points.iter().map(|p| (p - c).dot(a).powi(3)).sum())
        .collect();
    let mut by_skew = [0usize, 1, 2];
    by_skew.sort_by(|&i, &j| skew[j].abs().total_cmp(&skew[i].abs()).then(i.cmp(&j)));
    for &i in &by_skew[..2] {
        if skew[i] < 0.0 {
            axes[i] = -axes[i];
        }
    }
    let mut frame = Matrix3::from_columns(&axes);
    if frame.determinant() < 0.0 {
        let free = by_skew[2];
        frame.set_column(free, &(-axes[free]));
    }
    Ok(frame)
}

/// Centre at origin, unit centroid size, principal axes on the coordinate axes.
pub fn normalize_shape(shape: &LandmarkSet) -> Result<LandmarkSet> {
    let c = shape.centroid();
    let size = shape.centroid_size();
    if size <= 0.0 {
        return Err(Error::DegenerateAlignment("shape has zero size".into()));
    }
    let frame = principal_frame(&shape.points)?;
    let to_frame = frame.transpose();
    LandmarkSet::new(
        shape
            .points
            .iter()
            .map(|p| to_frame * ((p - c) / size))
            .collect(),
    )
}

#[derive(Clone, Copy, Debug)]
pub struct GpaOptions {
    /// Stop once the mean moves by less than this (max abs coordinate).
    pub tol: f64,
    pub max_iter: usize,
    pub allow_scale: bool,
}

impl Default for GpaOptions {
    fn default() -> Self {
        GpaOptions {
            tol: 1e-10,
            max_iter: 100,
            allow_scale: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GpaResult {
    /// Each input aligned onto `mean`.
    pub aligned: Vec<LandmarkSet>,
    pub transforms: Vec<SimilarityTransform>,
    /// Normalised mean shape (see [`normalize_shape`]).
    pub mean: LandmarkSet,
    pub converged: bool,
    pub iterations: usize,
}

fn average(shapes: &[LandmarkSet]) -> Result<LandmarkSet> {
    let n = shapes[0].len();
    let mut sum = vec![Vector3::zeros(); n];
    for s in shapes {
        for (acc, p) in sum.iter_mut().zip(&s.points) {
            *acc += p;
        }
    }
    let k = shapes.len() as f64;
    LandmarkSet::new(sum.into_iter().map(|p| p / k).collect())
}

fn align_all(
    shapes: &[LandmarkSet],
    reference: &LandmarkSet,
    allow_scale: bool,
) -> Result<Vec<AlignmentReport>> {
    shapes
        .par_iter()
        .map(|s| align_pair(s, reference, allow_scale))
        .collect()
}

/// Generalised Procrustes analysis.
///
/// The starting reference is the normalised average of the individually
/// normalised inputs, so the result does not depend on input order.
pub fn generalized_procrustes(shapes: &[LandmarkSet], opts: GpaOptions) -> Result<GpaResult> {
    if shapes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "generalised Procrustes needs at least 2 shapes, got {}",
            shapes.len()
        )));
    }
    let n = shapes[0].len();
    if let Some(bad) = shapes.iter().find(|s| s.len() != n) {
        return Err(Error::CorrespondenceMismatch {
            left: n,
            right: bad.len(),
        });
    }

    let normalized = shapes
        .iter()
        .map(normalize_shape)
        .collect::<Result<Vec<_>>>()?;
    let mut mean = normalize_shape(&average(&normalized)?)?;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let reports = align_all(shapes, &mean, opts.allow_scale)?;
        let aligned: Vec<LandmarkSet> = reports.into_iter().map(|r| r.aligned).collect();
        let next = normalize_shape(&average(&aligned)?)?;
        let change = next.max_abs_diff(&mean);
        mean = next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let reports = align_all(shapes, &mean, opts.allow_scale)?;
    let (aligned, transforms) = reports
        .into_iter()
        .map(|r| (r.aligned, r.transform))
        .unzip();
    Ok(GpaResult {
        aligned,
        transforms,
        mean,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use nalgebra::{Rotation3, Unit};

    fn random_set(rng: &mut Stream, n: usize) -> LandmarkSet {
        LandmarkSet::new(
            (0..n)
                .map(|_| Vector3::new(rng.normal(), rng.normal(), rng.normal()))
                .collect(),
        )
        .unwrap()
    }

    fn random_rotation(rng: &mut Stream) -> Matrix3<f64> {
        let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        *Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.uniform_in(-3.1, 3.1)).matrix()
    }

    #[test]
    fn cube_centroid() {
        let pts = (0..8)
            .map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let s = LandmarkSet::new(pts).unwrap();
        assert_eq!(centroid(&s), Vector3::new(0.5, 0.5, 0.5));
        let t = Vector3::new(1.0, -2.0, 4.0);
        assert!((centroid(&s.translated(&t)) - (Vector3::new(0.5, 0.5, 0.5) + t)).amax() < 1e-15);
    }

    #[test]
    fn centroid_matches_direct_mean() {
        let mut rng = Stream::new(83, 0);
        let s = random_set(&mut rng, 83);
        let flat = s.to_flat();
        for axis in 0..3 {
            let oracle: f64 = flat.iter().skip(axis).step_by(3).sum::<f64>() / 83.0;
            assert!((centroid(&s)[axis] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_too_few_or_non_finite() {
        assert!(LandmarkSet::new(vec![Vector3::zeros(); 2]).is_err());
        let mut pts = vec![Vector3::zeros(); 4];
        pts[1].y = f64::NAN;
        assert!(LandmarkSet::new(pts).is_err());
    }

    #[test]
    fn self_alignment_is_identity() {
        let mut rng = Stream::new(1, 0);
        let s = random_set(&mut rng, 10);
        let r = align_pair(&s, &s, true).unwrap();
        assert!(r.distance < 1e-12);
        assert!((r.transform.scale - 1.0).abs() < 1e-12);
        assert!((r.transform.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(r.transform.translation.amax() < 1e-12);
    }

    #[test]
    fn recovers_known_similarity() {
        let mut rng = Stream::new(2, 0);
        let s = random_set(&mut rng, 12);
        let truth = SimilarityTransform {
            scale: 2.0,
            rotation: random_rotation(&mut rng),
            translation: Vector3::new(3.0, -1.0, 0.5),
        };
        let target = s.transformed(&truth);
        let r = align_pair(&s, &target, true).unwrap();
        assert!((r.transform.scale - 2.0).abs() < 1e-8);
        assert!((r.transform.rotation - truth.rotation).amax() < 1e-8);
        assert!((r.transform.translation - truth.translation).amax() < 1e-8);
        assert!(r.distance < 1e-10);
    }

    #[test]
    fn mismatched_counts_and_degenerate_source() {
        let mut rng = Stream::new(3, 0);
        let a = random_set(&mut rng, 5);
        let b = random_set(&mut rng, 6);
        assert!(matches!(
            align_pair(&a, &b, true),
            Err(Error::CorrespondenceMismatch { left: 5, right: 6 })
        ));
        let line = LandmarkSet::new((0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect()).unwrap();
        assert!(matches!(
            align_pair(&line, &a, true),
            Err(Error::DegenerateAlignment(_))
        ));
    }

    #[test]
    fn distance_is_residual_of_returned_transform() {
        let mut rng = Stream::new(4, 0);
        let a = random_set(&mut rng, 9);
        let b = random_set(&mut rng, 9);
        for scale in [false, true] {
            let r = align_pair(&a, &b, scale).unwrap();
            let moved = a.transformed(&r.transform);
            let oracle = rms_residual(moved.points(), b.points());
            assert!((procrustes_distance(&a, &b, scale).unwrap() - oracle).abs() < 1e-12);
            assert!((r.distance - rms_residual(r.aligned.points(), b.points())).abs() < 1e-12);
        }
    }

    /// Rotation from a quaternion parameterised by `(u, v, w)` in the unit cube
    /// (Shoemake's uniform map), for brute-force search.
    fn rotation_from_cube(u: f64, v: f64, w: f64) -> Matrix3<f64> {
        use std::f64::consts::TAU;
        let q = nalgebra::Quaternion::new(
            (u).sqrt() * (TAU * w).cos(),
            (1.0 - u).sqrt() * (TAU * v).sin(),
            (1.0 - u).sqrt() * (TAU * v).cos(),
            (u).sqrt() * (TAU * w).sin(),
        );
        *nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
    }

    fn objective(a: &LandmarkSet, b: &LandmarkSet, rot: &Matrix3<f64>, allow_scale: bool) -> f64 {
        // Optimal scale and translation are closed-form for a fixed rotation.
        let ca = a.centroid();
        let cb = b.centroid();
        let mut num = 0.0;
        let mut den = 0.0;
        for (p, q) in a.points().iter().zip(b.points()) {
            let rp = rot * (p - ca);
            num += rp.dot(&(q - cb));
            den += rp.norm_squared();
        }
        let s = if allow_scale { (num / den).max(0.0) } else { 1.0 };
        let sse: f64 = a
            .points()
            .iter()
            .zip(b.points())
            .map(|(p, q)| (s * (rot * (p - ca)) - (q - cb)).norm_squared())
            .sum();
        (sse / a.len() as f64).sqrt()
    }

    #[test]
    fn four_point_distance_matches_grid_search() {
        let mut rng = Stream::new(5, 0);
        for trial in 0..3 {
            let a = random_set(&mut rng, 4);
            let b = random_set(&mut rng, 4);
            let allow_scale = trial % 2 == 0;
            // Coarse grid over the rotation cube, then coordinate refinement.
            let steps = 24;
            let mut best = (f64::INFINITY, [0.0; 3]);
            for i in 0..steps {
                for j in 0..steps {
                    for k in 0..steps {
                        let x = [
                            (i as f64 + 0.5) / steps as f64,
                            (j as f64 + 0.5) / steps as f64,
                            (k as f64 + 0.5) / steps as f64,
                        ];
                        let f = objective(&a, &b, &rotation_from_cube(x[0], x[1], x[2]), allow_scale);
                        if f < best.0 {
                            best = (f, x);
                        }
                    }
                }
            }
            let mut h = 0.5 / steps as f64;
            while h > 1e-12 {
                let mut improved = false;
                for axis in 0..3 {
                    for dir in [-1.0, 1.0] {
                        let mut x = best.1;
                        x[axis] = (x[axis] + dir * h).clamp(0.0, 1.0);
                        let f = objective(&a, &b, &rotation_from_cube(x[0], x[1], x[2]), allow_scale);
                        if f < best.0 {
                            best = (f, x);
                            improved = true;
                        }
                    }
                }
                if !improved {
                    h *= 0.5;
                }
            }
            let d = procrustes_distance(&a, &b, allow_scale).unwrap();
            assert!((d - best.0).abs() < 1e-6, "closed form {d} vs search {}", best.0);
        }
    }

    #[test]
    fn gpa_of_identical_shapes() {
        let mut rng = Stream::new(6, 0);
        let s = random_set(&mut rng, 15);
        let shapes = vec![s.clone(); 4];
        let g = generalized_procrustes(&shapes, GpaOptions::default()).unwrap();
        assert!(g.converged);
        let expect = normalize_shape(&s).unwrap();
        assert!(g.mean.max_abs_diff(&expect) < 1e-9);
        for a in &g.aligned {
            assert!(a.max_abs_diff(&g.mean) < 1e-9);
        }
    }

    #[test]
    fn gpa_of_rigid_copies() {
        let mut rng = Stream::new(7, 0);
        let s = random_set(&mut rng, 20);
        let shapes: Vec<LandmarkSet> = (0..5)
            .map(|_| {
                s.transformed(&SimilarityTransform {
                    scale: 1.0,
                    rotation: random_rotation(&mut rng),
                    translation: Vector3::new(rng.normal(), rng.normal(), rng.normal()) * 10.0,
                })
            })
            .collect();
        let g = generalized_procrustes(&shapes, GpaOptions::default()).unwrap();
        assert!(procrustes_distance(&g.mean, &s, true).unwrap() < 1e-8);
        for a in &g.aligned {
            for b in &g.aligned {
                assert!(a.max_abs_diff(b) < 1e-8);
            }
        }
    }

    #[test]
    fn gpa_two_shapes_mean_is_normalised_midpoint() {
        let mut rng = Stream::new(8, 0);
        let a = random_set(&mut rng, 10);
        let b = random_set(&mut rng, 10);
        let g = generalized_procrustes(&[a, b], GpaOptions::default()).unwrap();
        assert!(g.converged);
        let mid = LandmarkSet::new(
            g.aligned[0]
                .points()
                .iter()
                .zip(g.aligned[1].points())
                .map(|(p, q)| (p + q) / 2.0)
                .collect(),
        )
        .unwrap();
        let expect = normalize_shape(&mid).unwrap();
        assert!(g.mean.max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn gpa_needs_two_shapes() {
        let mut rng = Stream::new(9, 0);
        let s = random_set(&mut rng, 5);
        assert!(matches!(
            generalized_procrustes(&[s], GpaOptions::default()),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            generalized_procrustes(&[], GpaOptions::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn principal_frame_is_rotation_equivariant() {
        let mut rng = Stream::new(10, 0);
        let s = random_set(&mut rng, 30);
        let rot = random_rotation(&mut rng);
        let moved: Vec<Vector3<f64>> = s.points().iter().map(|p| rot * p).collect();
        let f0 = principal_frame(s.points()).unwrap();
        let f1 = principal_frame(&moved).unwrap();
        assert!((f1 - rot * f0).amax() < 1e-9);
        assert!((f0.determinant() - 1.0).abs() < 1e-12);
    }
}
