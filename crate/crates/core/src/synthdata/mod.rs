//! Synthetic face populations with planted identity, expression and noise
//! structure, plus the landmark, mesh and manifest file formats.
//!
//! A frame's landmarks are `template + identity + expression(t) + noise`,
//! then a small rigid motion. Its mesh densely resamples the same noiseless
//! shape over a fixed triangulation of the template and receives the same
//! rigid motion.

mod io;
mod template;

pub use io::{
    load_landmarks, load_manifest, load_mesh, parse_obj, parse_xyz, save_landmarks, save_manifest, save_mesh_obj,
    LandmarkRecord, Manifest, MeshEntry,
};
pub use template::template;

use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FACE_LANDMARKS;
use crate::rng::{streams, Stream};
use crate::shape::{LandmarkSet, SimilarityTransform};
use crate::tdsm::PointCloudMesh;

/// Stream id of the surface noise of global frame `f`.
const MESH_STREAM_BASE: u64 = 5 << 32;
const EXPRESSION_MODES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub num_subjects: usize,
    pub sequences_per_subject: usize,
    pub frames_per_sequence: usize,
    pub num_landmarks: usize,
    pub identity_scale: f64,
    pub expression_scale: f64,
    pub noise_scale: f64,
    /// Rotations are drawn uniformly up to this angle about a random axis.
    pub rotation_jitter_deg: f64,
    /// Translations are uniform in `[-t, t]` per axis.
    pub translation_jitter: f64,
    /// Barycentric subdivision level of each template triangle.
    pub mesh_subdivision: usize,
    pub surface_noise: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            num_subjects: 30,
            sequences_per_subject: 2,
            frames_per_sequence: 40,
            num_landmarks: FACE_LANDMARKS,
            identity_scale: 5.0,
            expression_scale: 1.0,
            noise_scale: 0.05,
            rotation_jitter_deg: 2.0,
            translation_jitter: 5.0,
            mesh_subdivision: 6,
            surface_noise: 0.05,
            seed: 0,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.num_landmarks != FACE_LANDMARKS {
            return bad(format!(
                "only the {FACE_LANDMARKS}-landmark layout is available, not {}",
                self.num_landmarks
            ));
        }
        if self.num_subjects == 0 || self.sequences_per_subject == 0 || self.frames_per_sequence == 0 {
            return bad("subjects, sequences and frames must all be positive".into());
        }
        if self.mesh_subdivision == 0 {
            return bad("mesh subdivision must be at least 1".into());
        }
        let scales = [
            self.identity_scale,
            self.expression_scale,
            self.noise_scale,
            self.rotation_jitter_deg,
            self.translation_jitter,
            self.surface_noise,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("scales and jitter ranges must be finite and non-negative".into());
        }
        let frames = self.num_subjects as u128 * self.sequences_per_subject as u128 * self.frames_per_sequence as u128;
        if frames > u32::MAX as u128 {
            return bad("population too large".into());
        }
        Ok(())
    }

    /// Problems that leave the population valid but hard to identify.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !(self.identity_scale > self.expression_scale && self.expression_scale > self.noise_scale) {
            w.push(format!(
                "identity scale {} > expression scale {} > noise scale {} does not hold; subjects may not be identifiable",
                self.identity_scale, self.expression_scale, self.noise_scale
            ));
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticFrame {
    pub subject: u32,
    /// Global sequence id: `subject * sequences_per_subject + s`.
    pub sequence: u32,
    pub frame: u32,
    pub landmarks: LandmarkSet,
    /// Identity plus expression, before noise and motion.
    pub clean: LandmarkSet,
    pub motion: SimilarityTransform,
}

#[derive(Clone, Debug)]
pub struct SyntheticPopulation {
    pub config: PopulationConfig,
    pub template: LandmarkSet,
    /// Per-subject identity shape: template plus identity offset.
    pub identities: Vec<LandmarkSet>,
    /// Ordered by subject, sequence, frame.
    pub frames: Vec<SyntheticFrame>,
    triangles: Vec<[usize; 3]>,
}

fn expression_basis(seed: u64, template: &LandmarkSet) -> Vec<Vec<Vector3<f64>>> {
    // Smooth displacement fields: a random direction per mode modulated by a
    // low-frequency wave over the face, scaled to unit RMS per coordinate.
    let mut rng = Stream::new(seed, streams::EXPRESSION_BASIS);
    (0..EXPRESSION_MODES)
        .map(|_| {
            let dir = Vector3::new(rng.normal(), rng.normal(), rng.normal());
            let freq = Vector3::new(rng.normal(), rng.normal(), 0.0) * (PI / 80.0);
            let phase = rng.uniform_in(0.0, 2.0 * PI);
            let raw: Vec<Vector3<f64>> = template
                .points()
                .iter()
                .map(|p| dir * (freq.dot(p) + phase).cos())
                .collect();
            let rms = (raw.iter().map(|v| v.norm_squared()).sum::<f64>() / (3 * raw.len()) as f64).sqrt();
            raw.into_iter().map(|v| v / rms).collect()
        })
        .collect()
}

fn random_motion(rng: &mut Stream, max_deg: f64, max_shift: f64) -> SimilarityTransform {
    let axis = Vector3::new(rng.normal(), rng.normal(), rng.normal());
    let angle = rng.uniform_in(-max_deg, max_deg).to_radians();
    let shift = Vector3::new(
        rng.uniform_in(-max_shift, max_shift),
        rng.uniform_in(-max_shift, max_shift),
        rng.uniform_in(-max_shift, max_shift),
    );
    let rotation = match Unit::try_new(axis, 1e-12) {
        Some(a) => *Rotation3::from_axis_angle(&a, angle).matrix(),
        None => nalgebra::Matrix3::identity(),
    };
    SimilarityTransform {
        scale: 1.0,
        rotation,
        translation: shift,
    }
}

fn subject_frames(
    config: &PopulationConfig,
    template: &LandmarkSet,
    basis: &[Vec<Vector3<f64>>],
    subject: usize,
) -> (LandmarkSet, Vec<SyntheticFrame>) {
    let mut rng = Stream::new(config.seed, streams::SUBJECT_BASE + subject as u64);
    let identity: Vec<Vector3<f64>> = template
        .points()
        .iter()
        .map(|p| p + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * config.identity_scale)
        .collect();
    let mut frames = Vec::new();
    let t_len = config.frames_per_sequence as f64;
    let norm = (2.0 / EXPRESSION_MODES as f64).sqrt();
    for s in 0..config.sequences_per_subject {
        let waves: Vec<(f64, f64, f64)> = (0..EXPRESSION_MODES)
            .map(|_| (rng.uniform_in(0.5, 1.0), rng.uniform_in(0.5, 1.5), rng.uniform_in(0.0, 2.0 * PI)))
            .collect();
        for f in 0..config.frames_per_sequence {
            let t = f as f64 / t_len;
            let clean: Vec<Vector3<f64>> = identity
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut q = *p;
                    for (m, (amp, cycles, phase)) in waves.iter().enumerate() {
                        let w = config.expression_scale * norm * amp * (2.0 * PI * cycles * t + phase).sin();
                        q += basis[m][i] * w;
                    }
                    q
                })
                .collect();
            let noisy: Vec<Vector3<f64>> = clean
                .iter()
                .map(|p| p + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * config.noise_scale)
                .collect();
            let motion = random_motion(&mut rng, config.rotation_jitter_deg, config.translation_jitter);
            let landmarks = LandmarkSet::new(noisy).expect("finite").transformed(&motion);
            frames.push(SyntheticFrame {
                subject: subject as u32,
                sequence: (subject * config.sequences_per_subject + s) as u32,
                frame: f as u32,
                landmarks,
                clean: LandmarkSet::new(clean).expect("finite"),
                motion,
            });
        }
    }
    (LandmarkSet::new(identity).expect("finite"), frames)
}

/// Delaunay triangles of the template's (x, y) layout.
pub fn template_triangles(template: &LandmarkSet) -> Vec<[usize; 3]> {
    let pts: Vec<delaunator::Point> = template
        .points()
        .iter()
        .map(|p| delaunator::Point { x: p.x, y: p.y })
        .collect();
    let tri = delaunator::triangulate(&pts);
    tri.triangles.chunks_exact(3).map(|t| [t[0], t[1], t[2]]).collect()
}

/// Barycentric resampling of `shape` over `triangles`: the corners,
/// `level - 1` points inside every edge (each edge once) and the interior
/// lattice points of every triangle.
pub fn resample(shape: &[Vector3<f64>], triangles: &[[usize; 3]], level: usize) -> Vec<Vector3<f64>> {
    let l = level as f64;
    let mut out: Vec<Vector3<f64>> = shape.to_vec();
    let mut edges: Vec<(usize, usize)> = triangles
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    for (a, b) in edges {
        for k in 1..level {
            let s = k as f64 / l;
            out.push(shape[a] * (1.0 - s) + shape[b] * s);
        }
    }
    for t in triangles {
        for i in 1..level {
            for j in 1..level - i {
                let k = level - i - j;
                let (u, v, w) = (i as f64 / l, j as f64 / l, k as f64 / l);
                out.push(shape[t[0]] * u + shape[t[1]] * v + shape[t[2]] * w);
            }
        }
    }
    out
}

impl SyntheticPopulation {
    /// Dense mesh of frame `index`, regenerated on demand.
    pub fn mesh(&self, index: usize) -> PointCloudMesh {
        let fr = &self.frames[index];
        let mut rng = Stream::new(self.config.seed, MESH_STREAM_BASE + index as u64);
        let sigma = self.config.surface_noise;
        let verts = resample(fr.clean.points(), &self.triangles, self.config.mesh_subdivision)
            .into_iter()
            .map(|p| fr.motion.apply(&(p + Vector3::new(rng.normal(), rng.normal(), rng.normal()) * sigma)))
            .collect();
        PointCloudMesh::new(verts).expect("finite mesh")
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }
}

pub fn generate(config: &PopulationConfig) -> Result<SyntheticPopulation> {
    config.validate()?;
    let template = template();
    let basis = expression_basis(config.seed, &template);
    let per_subject: Vec<(LandmarkSet, Vec<SyntheticFrame>)> = (0..config.num_subjects)
        .into_par_iter()
        .map(|s| subject_frames(config, &template, &basis, s))
        .collect();
    let mut identities = Vec::with_capacity(per_subject.len());
    let mut frames = Vec::new();
    for (id, f) in per_subject {
        identities.push(id);
        frames.extend(f);
    }
    Ok(SyntheticPopulation {
        config: config.clone(),
        triangles: template_triangles(&template),
        template,
        identities,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract;

    fn small() -> PopulationConfig {
        PopulationConfig {
            num_subjects: 4,
            sequences_per_subject: 2,
            frames_per_sequence: 6,
            ..Default::default()
        }
    }

    #[test]
    fn still_population_repeats_identity() {
        let cfg = PopulationConfig {
            expression_scale: 0.0,
            noise_scale: 0.0,
            rotation_jitter_deg: 0.0,
            translation_jitter: 0.0,
            ..small()
        };
        let pop = generate(&cfg).unwrap();
        for f in &pop.frames {
            assert_eq!(f.landmarks, pop.identities[f.subject as usize]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.landmarks, y.landmarks);
        }
        assert_eq!(a.mesh(5).vertices(), b.mesh(5).vertices());
    }

    #[test]
    fn identity_dominates_within_subject_variation() {
        let pop = generate(&PopulationConfig::default()).unwrap();
        let feats: Vec<(u32, Vec<f64>)> = pop
            .frames
            .iter()
            .step_by(3)
            .map(|f| (f.subject, extract(&f.landmarks).into_inner()))
            .collect();
        let (mut inter, mut intra) = ((0.0, 0usize), (0.0, 0usize));
        for (i, a) in feats.iter().enumerate() {
            for b in &feats[i + 1..] {
                let d = a.1.iter().zip(&b.1).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                let slot = if a.0 == b.0 { &mut intra } else { &mut inter };
                slot.0 += d;
                slot.1 += 1;
            }
        }
        let ratio = (inter.0 / inter.1 as f64) / (intra.0 / intra.1 as f64);
        assert!(ratio > 3.0, "ratio {ratio}");
    }

    #[test]
    fn noiseless_frames_match_identities_by_nearest_neighbour() {
        let cfg = PopulationConfig {
            noise_scale: 0.0,
            rotation_jitter_deg: 0.0,
            translation_jitter: 0.0,
            ..small()
        };
        let pop = generate(&cfg).unwrap();
        for f in &pop.frames {
            let nearest = (0..pop.identities.len())
                .min_by(|&a, &b| {
                    let da = f.landmarks.max_abs_diff(&pop.identities[a]);
                    let db = f.landmarks.max_abs_diff(&pop.identities[b]);
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest as u32, f.subject);
        }
    }

    #[test]
    fn meshes_are_dense_and_cover_landmarks() {
        let pop = generate(&small()).unwrap();
        let cfg = &pop.config;
        for i in [0, 7, 30] {
            let mesh = pop.mesh(i);
            assert!(mesh.len() >= 30 * FACE_LANDMARKS, "{} vertices", mesh.len());
            // Every landmark sits on a mesh corner up to both noise levels.
            let bound = 6.0 * (cfg.noise_scale + cfg.surface_noise) * 3f64.sqrt();
            for p in pop.frames[i].landmarks.points() {
                let (_, d2) = mesh.nearest(p);
                assert!(d2.sqrt() < bound, "landmark {} from mesh", d2.sqrt());
            }
        }
    }

    #[test]
    fn resample_counts() {
        let shape = [Vector3::zeros(), Vector3::x(), Vector3::y()];
        let pts = resample(&shape, &[[0, 1, 2]], 4);
        // 3 corners + 3 edges * 3 + 3 interior
        assert_eq!(pts.len(), 3 + 9 + 3);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&PopulationConfig { num_landmarks: 68, ..small() }).is_err());
        assert!(generate(&PopulationConfig { num_subjects: 0, ..small() }).is_err());
        assert!(!PopulationConfig { identity_scale: 0.5, ..small() }.warnings().is_empty());
        assert!(small().warnings().is_empty());
    }
}
