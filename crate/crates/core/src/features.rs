//! Classifier features: centroid-centred flattened landmarks, quadrant
//! subsets for the occlusion experiments, and the per-frame CSV format.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shape::LandmarkSet;

/// Landmarks per face in the standard layout.
pub const FACE_LANDMARKS: usize = 83;

/// Flattened `(x0, y0, z0, x1, ...)` coordinates with their centroid at the
/// origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn to_landmarks(&self) -> LandmarkSet {
        LandmarkSet::from_flat(&self.0).expect("feature vectors come from valid landmark sets")
    }
}

pub fn extract(landmarks: &LandmarkSet) -> FeatureVector {
    let c = landmarks.centroid();
    FeatureVector(
        landmarks
            .points()
            .iter()
            .flat_map(|p| {
                let d = p - c;
                [d.x, d.y, d.z]
            })
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quadrant {
    TR,
    TL,
    LR,
    LL,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TR, Quadrant::TL, Quadrant::LR, Quadrant::LL];

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::TR => "TR",
            Quadrant::TL => "TL",
            Quadrant::LR => "LR",
            Quadrant::LL => "LL",
        }
    }

    /// Landmark count of this quadrant in the 83-point layout.
    pub fn size(self) -> usize {
        match self {
            Quadrant::TR | Quadrant::TL => 23,
            Quadrant::LR => 20,
            Quadrant::LL => 17,
        }
    }

    pub fn parse(name: &str) -> Option<Quadrant> {
        Quadrant::ALL.into_iter().find(|q| q.name().eq_ignore_ascii_case(name))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantSpec {
    pub quadrant: Quadrant,
    indices: Vec<usize>,
}

impl QuadrantSpec {
    /// Indices are sorted; duplicates are rejected.
    pub fn new(quadrant: Quadrant, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::InvalidQuadrantSpec(format!("{} is empty", quadrant.name())));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidQuadrantSpec(format!(
                "{} lists a landmark twice",
                quadrant.name()
            )));
        }
        Ok(QuadrantSpec { quadrant, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Checks that four specs cover `0..n` exactly once with the standard counts.
pub fn validate_quadrants(specs: &[QuadrantSpec; 4], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for (spec, q) in specs.iter().zip(Quadrant::ALL) {
        if spec.quadrant != q {
            return Err(Error::InvalidQuadrantSpec(format!(
                "expected {} in position of {}",
                q.name(),
                spec.quadrant.name()
            )));
        }
        if n == FACE_LANDMARKS && spec.indices.len() != q.size() {
            return Err(Error::InvalidQuadrantSpec(format!(
                "{} has {} landmarks, expected {}",
                q.name(),
                spec.indices.len(),
                q.size()
            )));
        }
        for &i in &spec.indices {
            if i >= n {
                return Err(Error::InvalidQuadrantSpec(format!("index {i} out of range for {n} landmarks")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidQuadrantSpec(format!("landmark {i} is in two quadrants")));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidQuadrantSpec(format!("landmark {i} is in no quadrant")));
    }
    Ok(())
}

pub fn quadrant_subset(landmarks: &LandmarkSet, spec: &QuadrantSpec) -> Result<FeatureVector> {
    if let Some(&i) = spec.indices.iter().find(|&&i| i >= landmarks.len()) {
        return Err(Error::InvalidQuadrantSpec(format!(
            "index {i} out of range for {} landmarks",
            landmarks.len()
        )));
    }
    let points: Vec<_> = spec.indices.iter().map(|&i| landmarks.points()[i]).collect();
    let c = crate::shape::centroid_of(&points);
    Ok(FeatureVector(
        points
            .iter()
            .flat_map(|p| {
                let d = p - c;
                [d.x, d.y, d.z]
            })
            .collect(),
    ))
}

/// Splits `order` (already sorted towards the preferred side) into the first
/// `take` and the rest, provided a threshold can realise the cut and at most
/// `limit` landmarks cross from their natural side.
fn threshold_split(
    order: &[usize],
    coord: impl Fn(usize) -> f64,
    take: usize,
    limit: usize,
    axis: &str,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let natural = order.iter().filter(|&&i| coord(i) > 0.0).count();
    let moved = natural.abs_diff(take);
    if moved > limit {
        return Err(Error::QuadrantPartition(format!(
            "{natural} landmarks lie on the positive {axis} side but {take} are required"
        )));
    }
    if take < order.len() && coord(order[take - 1]) == coord(order[take]) {
        return Err(Error::QuadrantPartition(format!(
            "no {axis} threshold separates {take} landmarks: tie at the boundary"
        )));
    }
    let (a, b) = order.split_at(take);
    Ok((a.to_vec(), b.to_vec()))
}

/// Derives the four quadrants from a canonical face layout (+x is the face's
/// right, +y is up).
///
/// The layout is centred on its centroid. The 46 highest landmarks form the
/// upper half; within each half the rightmost 23 (upper) or 20 (lower) form
/// the right quadrant. Landmarks near an axis may change sides to reach the
/// counts, but only a quarter of the smaller side may move in any split.
pub fn default_quadrants(layout: &LandmarkSet) -> Result<[QuadrantSpec; 4]> {
    if layout.len() != FACE_LANDMARKS {
        return Err(Error::QuadrantPartition(format!(
            "layout has {} landmarks, expected {FACE_LANDMARKS}",
            layout.len()
        )));
    }
    let c = layout.centroid();
    let rel: Vec<_> = layout.points().iter().map(|p| p - c).collect();
    let by = |key: fn(&nalgebra::Vector3<f64>) -> f64, mut idx: Vec<usize>| {
        idx.sort_by(|&a, &b| key(&rel[b]).total_cmp(&key(&rel[a])).then(a.cmp(&b)));
        idx
    };
    let upper_n = Quadrant::TR.size() + Quadrant::TL.size();
    let lower_n = FACE_LANDMARKS - upper_n;
    let (upper, lower) = threshold_split(
        &by(|p| p.y, (0..FACE_LANDMARKS).collect()),
        |i| rel[i].y,
        upper_n,
        upper_n.min(lower_n) / 4,
        "y",
    )?;
    let (tr, tl) = threshold_split(
        &by(|p| p.x, upper),
        |i| rel[i].x,
        Quadrant::TR.size(),
        Quadrant::TR.size().min(Quadrant::TL.size()) / 4,
        "upper x",
    )?;
    let (lr, ll) = threshold_split(
        &by(|p| p.x, lower),
        |i| rel[i].x,
        Quadrant::LR.size(),
        Quadrant::LR.size().min(Quadrant::LL.size()) / 4,
        "lower x",
    )?;
    Ok([
        QuadrantSpec::new(Quadrant::TR, tr)?,
        QuadrantSpec::new(Quadrant::TL, tl)?,
        QuadrantSpec::new(Quadrant::LR, lr)?,
        QuadrantSpec::new(Quadrant::LL, ll)?,
    ])
}

/// One frame's values with its labels; the row type of the landmark and
/// feature CSV files.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub subject: u32,
    pub sequence: u32,
    pub frame: u32,
    pub values: Vec<f64>,
}

const LABEL_COLUMNS: [&str; 3] = ["subject_id", "sequence_id", "frame_index"];

/// Writes records with a `subject_id,sequence_id,frame_index,x0,y0,z0,...`
/// header. Values use the shortest representation that parses back exactly.
pub fn write_records<W: Write>(out: W, records: &[FrameRecord]) -> Result<()> {
    let width = records.first().map_or(0, |r| r.values.len());
    if let Some(r) = records.iter().find(|r| r.values.len() != width) {
        return Err(Error::InvalidDataset(format!(
            "record ({}, {}, {}) has {} values, expected {width}",
            r.subject,
            r.sequence,
            r.frame,
            r.values.len()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = LABEL_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..width).map(|j| format!("{}{}", ["x", "y", "z"][j % 3], j / 3)))
        .collect();
    w.write_record(&header).map_err(csv_io)?;
    let mut row: Vec<String> = Vec::with_capacity(width + 3);
    for r in records {
        row.clear();
        row.extend([r.subject.to_string(), r.sequence.to_string(), r.frame.to_string()]);
        row.extend(r.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidDataset(format!("{other:?}")),
    }
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<FrameRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(1, e.to_string()))?
        .clone();
    if header.len() < 3 || header.iter().take(3).ne(LABEL_COLUMNS) {
        return Err(Error::parse(
            1,
            "header must start with subject_id,sequence_id,frame_index",
        ));
    }
    let width = header.len() - 3;
    if width % 3 != 0 {
        return Err(Error::parse(1, format!("{width} value columns is not a multiple of 3")));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let label = |j: usize| -> Result<u32> {
            rec[j]
                .trim()
                .parse()
                .map_err(|_| Error::parse(line, format!("bad {} {:?}", LABEL_COLUMNS[j], &rec[j])))
        };
        let values = rec
            .iter()
            .skip(3)
            .map(|s| match s.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::parse(line, format!("bad value {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(FrameRecord {
            subject: label(0)?,
            sequence: label(1)?,
            frame: label(2)?,
            values,
        });
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let file = File::create(path)?;
    write_records(std::io::BufWriter::new(file), records)
}

pub fn load_records(path: &Path) -> Result<Vec<FrameRecord>> {
    let file = File::open(path)?;
    read_records(std::io::BufReader::new(file)).map_err(|e| e.with_path(path))
}
