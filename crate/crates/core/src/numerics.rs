//! Dense linear algebra used by the shape pipeline.
//!
//! Symmetric eigendecomposition is cyclic Jacobi; the 3x3 rotation solve for
//! Procrustes goes through a singular value decomposition.

use nalgebra::Matrix3;

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const JACOBI_REL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Square symmetric matrix stored row-major in full.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricMatrix {
    order: usize,
    entries: Vec<f64>,
}

impl SymmetricMatrix {
    pub fn new(order: usize, entries: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidMatrix("order must be at least 1".into()));
        }
        if entries.len() != order * order {
            return Err(Error::InvalidMatrix(format!(
                "expected {} entries for order {order}, got {}",
                order * order,
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!("entry {bad} is not finite")));
        }
        for i in 0..order {
            for j in (i + 1)..order {
                let (a, b) = (entries[i * order + j], entries[j * order + i]);
                if (a - b).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidMatrix(format!(
                        "entries ({i},{j})={a} and ({j},{i})={b} differ"
                    )));
                }
            }
        }
        Ok(SymmetricMatrix { order, entries })
    }

    /// Builds the matrix from its upper triangle; `f(i, j)` is called for `j >= i`.
    pub fn from_upper(order: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = vec![0.0; order * order];
        for i in 0..order {
            for j in i..order {
                let v = f(i, j);
                entries[i * order + j] = v;
                entries[j * order + i] = v;
            }
        }
        SymmetricMatrix { order, entries }
    }

    pub fn identity(order: usize) -> Self {
        Self::from_upper(order, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.order + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.order;
        (0..n)
            .map(|i| {
                self.entries[i * n..(i + 1) * n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

/// Eigenvalues in non-increasing order with matching unit eigenvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenResult {
    pub values: Vec<f64>,
    /// `vectors[i]` is the eigenvector for `values[i]`.
    pub vectors: Vec<Vec<f64>>,
}

impl EigenResult {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `V diag(values) V^T` as a row-major square array.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.vectors.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n * n];
        for (lambda, v) in self.values.iter().zip(&self.vectors) {
            for i in 0..n {
                let li = lambda * v[i];
                for j in 0..n {
                    out[i * n + j] += li * v[j];
                }
            }
        }
        out
    }
}

/// Flip a vector so its largest-magnitude entry (first on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += a[i * n + j] * a[i * n + j];
        }
    }
    (2.0 * sum).sqrt()
}

/// Full symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn eigh_symmetric(m: &SymmetricMatrix) -> Result<EigenResult> {
    let n = m.order;
    let mut a = m.entries.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let tol = JACOBI_REL_TOL * m.frobenius_norm();

    let mut sweep = 0;
    loop {
        let off = off_diagonal_norm(&a, n);
        if off <= tol {
            break;
        }
        if sweep == MAX_SWEEPS {
            return Err(Error::ConvergenceFailure {
                sweeps: sweep,
                off_norm: off,
            });
        }
        sweep += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Negligible against both diagonal entries: drop it outright.
                if sweep > 3
                    && app.abs() + 1e2 * apq.abs() == app.abs()
                    && aqq.abs() + 1e2 * apq.abs() == aqq.abs()
                {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let new_kp = c * akp - s * akq;
                    let new_kq = s * akp + c * akq;
                    a[k * n + p] = new_kp;
                    a[p * n + k] = new_kp;
                    a[k * n + q] = new_kq;
                    a[q * n + k] = new_kq;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;

                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&col| {
            let mut vec: Vec<f64> = (0..n).map(|row| v[row * n + col]).collect();
            canonical_sign(&mut vec);
            vec
        })
        .collect();
    Ok(EigenResult { values, vectors })
}

/// Rotation `R` (det +1) maximising `trace(R^T m)`.
///
/// Fails with `DegenerateAlignment` when that rotation is not unique: rank
/// below two, or a reflection fix-up between two equal singular values.
pub fn orthogonal_polar_factor(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateAlignment("non-finite matrix".into()));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateAlignment("SVD failed".into())),
    };
    let sv = svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let (s1, s2, s3) = (sv[idx[0]], sv[idx[1]], sv[idx[2]]);
    if s1 <= 0.0 || s2 <= 1e-12 * s1 {
        return Err(Error::DegenerateAlignment(format!(
            "cross-covariance rank below 2 (singular values {s1:e}, {s2:e}, {s3:e})"
        )));
    }
    let det = (u * v_t).determinant();
    let mut d = Matrix3::identity();
    if det < 0.0 {
        if s2 - s3 <= 1e-12 * s1 {
            return Err(Error::DegenerateAlignment(
                "reflection correction is ambiguous (repeated smallest singular value)".into(),
            ));
        }
        d[(idx[2], idx[2])] = -1.0;
    }
    Ok(u * d * v_t)
}

/// Sample mean and eigendecomposition of the sample covariance (divisor `rows - 1`).
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub eigen: EigenResult,
}

/// Principal component analysis of equal-length rows.
///
/// With fewer rows than columns the decomposition runs on the rows x rows
/// Gram matrix and the null space is completed with an orthonormal basis
/// (eigenvalue 0), so the result always spans the full column space.
pub fn pca(rows: &[Vec<f64>]) -> Result<Pca> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let dim = rows[0].len();
    if dim == 0 {
        return Err(Error::InsufficientData("PCA rows are empty".into()));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
        return Err(Error::InvalidMatrix(format!(
            "row {bad} has length {}, expected {dim}",
            rows[bad].len()
        )));
    }
    let count = rows.len();
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let denom = (count - 1) as f64;

    let eigen = if count > dim {
        let cov = SymmetricMatrix::from_upper(dim, |i, j| {
            centered.iter().map(|r| r[i] * r[j]).sum::<f64>() / denom
        });
        eigh_symmetric(&cov)?
    } else {
        gram_eigen(&centered, dim, denom)?
    };
    Ok(Pca { mean, eigen })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gram_eigen(centered: &[Vec<f64>], dim: usize, denom: f64) -> Result<EigenResult> {
    let count = centered.len();
    let gram = SymmetricMatrix::from_upper(count, |i, j| dot(&centered[i], &centered[j]) / denom);
    let small = eigh_symmetric(&gram)?;
    let top = small.values.first().copied().unwrap_or(0.0);

    let mut values = Vec::with_capacity(dim);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for (mu, u) in small.values.iter().zip(&small.vectors) {
        if top <= 0.0 || *mu <= 1e-12 * top {
            break;
        }
        let mut v = vec![0.0; dim];
        for (coef, row) in u.iter().zip(centered) {
            for (vi, x) in v.iter_mut().zip(row) {
                *vi += coef * x;
            }
        }
        if !orthonormalize_against(&mut v, &vectors) {
            continue;
        }
        canonical_sign(&mut v);
        values.push(*mu);
        vectors.push(v);
    }
    // Complete the basis; the remaining directions carry no variance.
    for axis in 0..dim {
        if vectors.len() == dim {
            break;
        }
        let mut e = vec![0.0; dim];
        e[axis] = 1.0;
        if orthonormalize_against(&mut e, &vectors) {
            canonical_sign(&mut e);
            values.push(0.0);
            vectors.push(e);
        }
    }
    Ok(EigenResult { values, vectors })
}

/// Two-pass modified Gram-Schmidt; false when `v` is (numerically) in the span.
fn orthonormalize_against(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let start = dot(v, v).sqrt();
    if start == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for b in basis {
            let proj = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
    }
    let norm = dot(v, v).sqrt();
    if norm <= 1e-8 * start {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use nalgebra::{Rotation3, Unit, Vector3};

    fn random_symmetric(n: usize, seed: u64) -> SymmetricMatrix {
        let mut rng = Stream::new(seed, 0);
        let raw: Vec<f64> = (0..n * n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        SymmetricMatrix::from_upper(n, |i, j| raw[i * n + j] + raw[j * n + i])
    }

    fn random_rotation(rng: &mut Stream) -> Matrix3<f64> {
        let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
        let angle = rng.uniform_in(-3.0, 3.0);
        *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
    }

    fn assert_orthonormal(vectors: &[Vec<f64>], tol: f64) {
        for (i, a) in vectors.iter().enumerate() {
            for (j, b) in vectors.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - expect).abs() < tol, "({i},{j}) = {}", dot(a, b));
            }
        }
    }

    #[test]
    fn identity_eigenvalues() {
        let e = eigh_symmetric(&SymmetricMatrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        assert_orthonormal(&e.vectors, 1e-12);
    }

    #[test]
    fn diagonal_recovers_standard_basis() {
        let m = SymmetricMatrix::new(3, vec![2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let e = eigh_symmetric(&m).unwrap();
        assert_eq!(e.values, vec![5.0, 2.0, 0.0]);
        assert_eq!(e.vectors[0], vec![0.0, 1.0, 0.0]);
        assert_eq!(e.vectors[1], vec![1.0, 0.0, 0.0]);
        assert_eq!(e.vectors[2], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn random_ten_by_ten_residuals() {
        let m = random_symmetric(10, 11);
        let e = eigh_symmetric(&m).unwrap();
        let norm = m.frobenius_norm();
        for (lambda, v) in e.values.iter().zip(&e.vectors) {
            let av = m.mul_vec(v);
            let resid = av
                .iter()
                .zip(v)
                .map(|(x, y)| (x - lambda * y).abs())
                .fold(0.0, f64::max);
            assert!(resid < 1e-8 * norm, "residual {resid}");
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        assert_orthonormal(&e.vectors, 1e-9);
        let rec = e.reconstruct();
        let err = rec
            .iter()
            .zip(m.entries())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-8 * (1.0 + m.max_abs()));
    }

    #[test]
    fn large_matrix_converges() {
        let m = random_symmetric(120, 5);
        let e = eigh_symmetric(&m).unwrap();
        let rec = e.reconstruct();
        let err = rec
            .iter()
            .zip(m.entries())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-8 * (1.0 + m.max_abs()));
    }

    #[test]
    fn rejects_asymmetric() {
        let err = SymmetricMatrix::new(2, vec![1.0, 2.0, 2.1, 1.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidMatrix(_)));
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let m = random_symmetric(6, 3);
        let e = eigh_symmetric(&m).unwrap();
        for v in &e.vectors {
            let big = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn polar_of_identity_and_rotation() {
        let id = Matrix3::identity();
        assert!((orthogonal_polar_factor(&id).unwrap() - id).amax() < 1e-15);
        let mut rng = Stream::new(1, 0);
        let r0 = random_rotation(&mut rng);
        assert!((orthogonal_polar_factor(&r0).unwrap() - r0).amax() < 1e-12);
    }

    #[test]
    fn polar_recovers_rotation_from_known_factors() {
        let mut rng = Stream::new(2, 0);
        for _ in 0..20 {
            let r0 = random_rotation(&mut rng);
            let m = r0 * Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, 1.0));
            let r = orthogonal_polar_factor(&m).unwrap();
            assert!((r - r0).amax() < 1e-8);
            assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn polar_excludes_reflections() {
        let m = Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, -1.0));
        let r = orthogonal_polar_factor(&m).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn polar_reports_rank_deficiency() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            orthogonal_polar_factor(&m),
            Err(Error::DegenerateAlignment(_))
        ));
        assert!(matches!(
            orthogonal_polar_factor(&Matrix3::zeros()),
            Err(Error::DegenerateAlignment(_))
        ));
    }

    #[test]
    fn pca_identical_rows() {
        let rows = vec![vec![1.0, 2.0]; 3];
        let p = pca(&rows).unwrap();
        assert_eq!(p.mean, vec![1.0, 2.0]);
        assert!(p.eigen.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pca_two_points() {
        let p = pca(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(p.mean, vec![1.0, 0.0]);
        assert!((p.eigen.values[0] - 2.0).abs() < 1e-15);
        assert!((p.eigen.vectors[0][0].abs() - 1.0).abs() < 1e-15);
        assert!(p.eigen.vectors[0][1].abs() < 1e-15);
    }

    #[test]
    fn pca_requires_two_rows() {
        assert!(matches!(pca(&[vec![1.0]]), Err(Error::InsufficientData(_))));
    }

    fn brute_covariance(rows: &[Vec<f64>]) -> Vec<f64> {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = rows
                    .iter()
                    .map(|r| (r[i] - mean[i]) * (r[j] - mean[j]))
                    .sum::<f64>()
                    / (n - 1.0);
            }
        }
        cov
    }

    fn check_covariance(rows: &[Vec<f64>]) {
        let p = pca(rows).unwrap();
        let expect = brute_covariance(rows);
        let got = p.eigen.reconstruct();
        let err = got
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "covariance reconstruction error {err}");
        assert_orthonormal(&p.eigen.vectors, 1e-9);
        let positive = p.eigen.values.iter().filter(|v| **v > 1e-12).count();
        assert!(positive <= (rows.len() - 1).min(rows[0].len()));
    }

    #[test]
    fn pca_direct_path_matches_brute_covariance() {
        let mut rng = Stream::new(20, 0);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        check_covariance(&rows);
    }

    #[test]
    fn pca_gram_path_matches_brute_covariance() {
        let mut rng = Stream::new(21, 0);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..12).map(|_| rng.normal()).collect())
            .collect();
        check_covariance(&rows);
        let p = pca(&rows).unwrap();
        assert_eq!(p.eigen.len(), 12);
    }
}
