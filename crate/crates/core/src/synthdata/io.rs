use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{PopulationConfig, SyntheticPopulation};
use crate::error::{Error, Result};
use crate::features::{load_records, save_records, FrameRecord};
use crate::shape::LandmarkSet;
use crate::tdsm::PointCloudMesh;

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkRecord {
    pub subject: u32,
    pub sequence: u32,
    pub frame: u32,
    pub landmarks: LandmarkSet,
}

impl SyntheticPopulation {
    pub fn records(&self) -> Vec<LandmarkRecord> {
        self.frames
            .iter()
            .map(|f| LandmarkRecord {
                subject: f.subject,
                sequence: f.sequence,
                frame: f.frame,
                landmarks: f.landmarks.clone(),
            })
            .collect()
    }
}

/// Writes the landmark CSV: labels, then `x0,y0,z0,...` per row.
pub fn save_landmarks(path: &Path, records: &[LandmarkRecord]) -> Result<()> {
    let rows: Vec<FrameRecord> = records
        .iter()
        .map(|r| FrameRecord {
            subject: r.subject,
            sequence: r.sequence,
            frame: r.frame,
            values: r.landmarks.to_flat(),
        })
        .collect();
    save_records(path, &rows)
}

pub fn load_landmarks(path: &Path) -> Result<Vec<LandmarkRecord>> {
    load_records(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let landmarks = LandmarkSet::from_flat(&r.values).map_err(|e| {
                Error::Parse {
                    path: Some(path.to_path_buf()),
                    line: i as u64 + 2,
                    message: e.to_string(),
                }
            })?;
            Ok(LandmarkRecord {
                subject: r.subject,
                sequence: r.sequence,
                frame: r.frame,
                landmarks,
            })
        })
        .collect()
}

fn parse_coord(tok: Option<&str>, line: u64) -> Result<f64> {
    let tok = tok.ok_or_else(|| Error::parse(line, "expected three coordinates"))?;
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::parse(line, format!("bad coordinate {tok:?}"))),
    }
}

/// OBJ subset: `v x y z [w]` lines become vertices; everything else
/// (faces, normals, comments, groups) is skipped.
pub fn parse_obj(reader: impl BufRead) -> Result<PointCloudMesh> {
    let mut verts = Vec::new();
    let mut lines = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i as u64 + 1;
        lines = n;
        let mut toks = line.split_whitespace();
        if toks.next() != Some("v") {
            continue;
        }
        let x = parse_coord(toks.next(), n)?;
        let y = parse_coord(toks.next(), n)?;
        let z = parse_coord(toks.next(), n)?;
        verts.push(Vector3::new(x, y, z));
    }
    finish_mesh(verts, lines)
}

/// Whitespace-separated `x y z` triples, one per line; blank lines and `#`
/// comments are skipped.
pub fn parse_xyz(reader: impl BufRead) -> Result<PointCloudMesh> {
    let mut verts = Vec::new();
    let mut lines = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i as u64 + 1;
        lines = n;
        let body = line.split('#').next().unwrap_or("");
        let mut toks = body.split_whitespace();
        let Some(first) = toks.next() else {
            continue;
        };
        let x = parse_coord(Some(first), n)?;
        let y = parse_coord(toks.next(), n)?;
        let z = parse_coord(toks.next(), n)?;
        if toks.next().is_some() {
            return Err(Error::parse(n, "more than three values"));
        }
        verts.push(Vector3::new(x, y, z));
    }
    finish_mesh(verts, lines)
}

fn finish_mesh(verts: Vec<Vector3<f64>>, lines: u64) -> Result<PointCloudMesh> {
    if verts.is_empty() {
        return Err(Error::parse(lines, "no vertices"));
    }
    PointCloudMesh::new(verts)
}

/// Reads `.obj` files as OBJ and anything else as XYZ.
pub fn load_mesh(path: &Path) -> Result<PointCloudMesh> {
    let reader = BufReader::new(File::open(path)?);
    let is_obj = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("obj"));
    let parsed = if is_obj { parse_obj(reader) } else { parse_xyz(reader) };
    parsed.map_err(|e| e.with_path(path))
}

/// Vertices only, with values that parse back exactly.
pub fn save_mesh_obj(path: &Path, mesh: &PointCloudMesh) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in mesh.vertices() {
        writeln!(w, "v {:?} {:?} {:?}", v.x, v.y, v.z)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshEntry {
    pub file: PathBuf,
    pub subject: u32,
    pub sequence: u32,
    pub frame: u32,
}

/// Index of a population written to disk. Paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: PopulationConfig,
    pub landmarks: PathBuf,
    pub subjects: Vec<u32>,
    pub frames: usize,
    pub meshes: Vec<MeshEntry>,
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: Some(path.to_path_buf()),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate;

    #[test]
    fn landmark_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pop = generate(&PopulationConfig {
            num_subjects: 3,
            frames_per_sequence: 4,
            ..Default::default()
        })
        .unwrap();
        let path = dir.path().join("lm.csv");
        save_landmarks(&path, &pop.records()).unwrap();
        assert_eq!(load_landmarks(&path).unwrap(), pop.records());
        let text = std::fs::read_to_string(&path).unwrap();
        let crlf = dir.path().join("crlf.csv");
        std::fs::write(&crlf, text.replace('\n', "\r\n")).unwrap();
        assert_eq!(load_landmarks(&crlf).unwrap(), pop.records());
    }

    #[test]
    fn short_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let header: Vec<String> = (0..83).map(|i| format!("x{i},y{i},z{i}")).collect();
        let full: Vec<String> = (0..249).map(|i| i.to_string()).collect();
        let text = format!(
            "subject_id,sequence_id,frame_index,{}\n0,0,0,{}\n0,0,1,{}\n",
            header.join(","),
            full.join(","),
            full[..248].join(",")
        );
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, text).unwrap();
        match load_landmarks(&path) {
            Err(Error::Parse { line, path: Some(p), .. }) => {
                assert_eq!(line, 3);
                assert_eq!(p, path);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn obj_subset() {
        let m = parse_obj("v 1 2 3\nv -1.5 0 1e-3\nv 0 0 0\n".as_bytes()).unwrap();
        assert_eq!(m.vertices(), [Vector3::new(1.0, 2.0, 3.0), Vector3::new(-1.5, 0.0, 1e-3), Vector3::zeros()]);
        let text = "# comment\nmtllib x.mtl\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nvt 0.5 0.5\nv 0 0 1 1.0\nf 1 2 3\n";
        assert_eq!(parse_obj(text.as_bytes()).unwrap().len(), 3);
        assert!(matches!(parse_obj("f 1 2 3\n".as_bytes()), Err(Error::Parse { .. })));
        assert!(matches!(parse_obj("v 1 x 3\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn xyz_reader() {
        let m = parse_xyz("1 2 3\n\n# c\n4\t5 6 # tail\n".as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert!(parse_xyz("1 2\n".as_bytes()).is_err());
        assert!(parse_xyz("1 2 3 4\n".as_bytes()).is_err());
        assert!(parse_xyz("".as_bytes()).is_err());
    }

    #[test]
    fn dense_mesh_file_answers_exact_queries() {
        let dir = tempfile::tempdir().unwrap();
        let pop = generate(&PopulationConfig {
            num_subjects: 1,
            sequences_per_subject: 1,
            frames_per_sequence: 1,
            mesh_subdivision: 21,
            ..Default::default()
        })
        .unwrap();
        let mesh = pop.mesh(0);
        assert!(mesh.len() >= 30_000, "{}", mesh.len());
        let path = dir.path().join("m.obj");
        save_mesh_obj(&path, &mesh).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back.vertices(), mesh.vertices());
        let q = Vector3::new(3.0, -7.0, 12.0);
        assert_eq!(back.nearest(&q), back.nearest_linear(&q));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            seed: 9,
            config: PopulationConfig::default(),
            landmarks: "landmarks.csv".into(),
            subjects: vec![0, 1],
            frames: 2,
            meshes: vec![MeshEntry { file: "meshes/a.obj".into(), subject: 0, sequence: 0, frame: 0 }],
        };
        let path = dir.path().join("manifest.json");
        save_manifest(&path, &m).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }
}
