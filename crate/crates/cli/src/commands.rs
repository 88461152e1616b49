use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use faceid::classify::{
    evaluate, split_by_time, train_lstm, train_rf, train_svm, AccuracyReport, Classifier, LabeledDataset,
    Sample, SplitPlan,
};
use faceid::features::{default_quadrants, extract, quadrant_subset, QuadrantSpec};
use faceid::shape::LandmarkSet;
use faceid::synthdata::{
    generate, load_landmarks, load_manifest, load_mesh, save_landmarks, save_manifest, save_mesh_obj, template,
    LandmarkRecord, Manifest, MeshEntry,
};
use faceid::tdsm::{
    build_instance_table, fit, fit_sequence, load_model, model_to_json, save_model, train_detailed, FitResult,
    PointCloudMesh, TemporalOptions,
};
use rayon::prelude::*;

use crate::config::{ClassifierKind, ExperimentConfig, LandmarkSource};
use crate::report::{percent, Table};

pub const MANIFEST: &str = "manifest.json";
pub const LANDMARKS: &str = "landmarks.csv";
pub const FITTED: &str = "fitted.csv";
pub const DISTANCES: &str = "fit_distances.csv";
pub const MODEL: &str = "tdsm.bin";
pub const MODEL_JSON: &str = "tdsm.json";

pub struct SynthArgs {
    pub meshes: bool,
}

pub fn synth(cfg: &ExperimentConfig, args: &SynthArgs) -> anyhow::Result<()> {
    let pop_cfg = cfg.population();
    let pop = generate(&pop_cfg)?;
    let dir = &cfg.paths.data_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    save_landmarks(&dir.join(LANDMARKS), &pop.records())?;

    let mut meshes = Vec::new();
    if args.meshes {
        let mesh_dir = dir.join("meshes");
        std::fs::create_dir_all(&mesh_dir).with_context(|| format!("creating {}", mesh_dir.display()))?;
        meshes = pop
            .frames
            .iter()
            .map(|f| MeshEntry {
                file: PathBuf::from("meshes").join(format!("s{:03}_q{:03}_f{:04}.obj", f.subject, f.sequence, f.frame)),
                subject: f.subject,
                sequence: f.sequence,
                frame: f.frame,
            })
            .collect();
        meshes
            .par_iter()
            .enumerate()
            .try_for_each(|(i, e)| save_mesh_obj(&dir.join(&e.file), &pop.mesh(i)))?;
    }
    let manifest = Manifest {
        seed: cfg.seed,
        config: pop_cfg,
        landmarks: LANDMARKS.into(),
        subjects: pop.identities.iter().enumerate().map(|(i, _)| i as u32).collect(),
        frames: pop.frames.len(),
        meshes,
    };
    save_manifest(&dir.join(MANIFEST), &manifest)?;

    println!("subjects: {}", manifest.subjects.len());
    println!("frames: {}", manifest.frames);
    println!("meshes: {}", manifest.meshes.len());
    for w in pop.config.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn load_ground_truth(dir: &Path) -> anyhow::Result<Vec<LandmarkRecord>> {
    let path = dir.join(LANDMARKS);
    if !path.exists() {
        bail!(faceid::Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found; run `faceid synth` first", path.display()),
        )));
    }
    Ok(load_landmarks(&path)?)
}

fn landmark_dataset(records: &[LandmarkRecord], features: impl Fn(&LandmarkSet) -> anyhow::Result<Vec<f64>>) -> anyhow::Result<LabeledDataset> {
    let samples = records
        .iter()
        .map(|r| {
            Ok(Sample {
                features: features(&r.landmarks)?,
                subject: r.subject,
                sequence: r.sequence,
                frame: r.frame,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(LabeledDataset::new(samples)?)
}

pub fn train_tdsm(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let records = load_ground_truth(&cfg.paths.data_dir)?;
    let data = landmark_dataset(&records, |l| Ok(l.to_flat()))?;
    let plan = split_by_time(&data, cfg.classify.train_fraction)?;
    let shapes: Vec<LandmarkSet> = plan.train.iter().map(|&i| records[i].landmarks.clone()).collect();
    let training = train_detailed(&shapes, cfg.tdsm.train_options())?;

    let dir = &cfg.paths.model_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(MODEL), save_model(&training.model))?;
    std::fs::write(dir.join(MODEL_JSON), model_to_json(&training.model))?;

    println!("training frames: {}", shapes.len());
    println!("modes: {}", training.model.num_modes());
    println!("cumulative variance: {:.6}", training.retained_fraction);
    Ok(())
}

pub struct FitArgs {
    /// Explicit mesh files; empty means the meshes listed in the manifest.
    pub meshes: Vec<PathBuf>,
    pub output: Option<PathBuf>,
}

struct FitJob {
    path: PathBuf,
    subject: u32,
    sequence: u32,
    frame: u32,
}

pub fn fit_meshes(cfg: &ExperimentConfig, args: &FitArgs) -> anyhow::Result<()> {
    let model_path = cfg.paths.model_dir.join(MODEL);
    let bytes = std::fs::read(&model_path)
        .map_err(faceid::Error::Io)
        .with_context(|| format!("reading {}; run `faceid train-tdsm` first", model_path.display()))?;
    let model = load_model(&bytes)?;
    let table = build_instance_table(&model, &cfg.tdsm.table_options())?;
    let opts = cfg.tdsm.fit_options();

    let jobs: Vec<FitJob> = if args.meshes.is_empty() {
        let dir = &cfg.paths.data_dir;
        let manifest = load_manifest(&dir.join(MANIFEST))?;
        if manifest.meshes.is_empty() {
            bail!(faceid::Error::InvalidDataset(format!(
                "{} lists no meshes; rerun `faceid synth` without --no-meshes",
                dir.join(MANIFEST).display()
            )));
        }
        manifest
            .meshes
            .iter()
            .map(|m| FitJob { path: dir.join(&m.file), subject: m.subject, sequence: m.sequence, frame: m.frame })
            .collect()
    } else {
        args.meshes
            .iter()
            .enumerate()
            .map(|(i, p)| FitJob { path: p.clone(), subject: 0, sequence: 0, frame: i as u32 })
            .collect()
    };

    if let Some(missing) = jobs.iter().find(|j| !j.path.is_file()) {
        bail!(faceid::Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("mesh {} not found", missing.path.display()),
        )));
    }

    // Sequences in order of first appearance, frames sorted within each.
    let mut order: Vec<u32> = Vec::new();
    let mut by_sequence: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, j) in jobs.iter().enumerate() {
        by_sequence.entry(j.sequence).or_insert_with(|| {
            order.push(j.sequence);
            Vec::new()
        });
        by_sequence.get_mut(&j.sequence).unwrap().push(i);
    }
    for v in by_sequence.values_mut() {
        v.sort_by_key(|&i| jobs[i].frame);
    }

    let results: Vec<(usize, FitResult)> = if cfg.tdsm.temporal {
        let temporal = TemporalOptions { radius: cfg.tdsm.temporal_radius };
        let per_seq: Vec<Vec<(usize, FitResult)>> = order
            .par_iter()
            .map(|s| {
                let idx = &by_sequence[s];
                let meshes = idx.iter().map(|&i| load_mesh(&jobs[i].path)).collect::<faceid::Result<Vec<PointCloudMesh>>>()?;
                let fits = fit_sequence(&model, &table, &meshes, &opts, &temporal)?;
                Ok(idx.iter().copied().zip(fits).collect())
            })
            .collect::<faceid::Result<_>>()?;
        per_seq.into_iter().flatten().collect()
    } else {
        let idx: Vec<usize> = order.iter().flat_map(|s| by_sequence[s].iter().copied()).collect();
        idx.par_iter()
            .map(|&i| {
                let mesh = load_mesh(&jobs[i].path)?;
                fit(&model, &table, &mesh, &opts).map(|r| (i, r))
            })
            .collect::<faceid::Result<_>>()?
    };

    let out = args.output.clone().unwrap_or_else(|| cfg.paths.data_dir.join(FITTED));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let records: Vec<LandmarkRecord> = results
        .iter()
        .map(|(i, r)| LandmarkRecord {
            subject: jobs[*i].subject,
            sequence: jobs[*i].sequence,
            frame: jobs[*i].frame,
            landmarks: r.landmarks.clone(),
        })
        .collect();
    save_landmarks(&out, &records)?;

    let mut text = String::from("subject_id,sequence_id,frame_index,instance_index,distance\n");
    for (i, r) in &results {
        let j = &jobs[*i];
        writeln!(text, "{},{},{},{},{:?}", j.subject, j.sequence, j.frame, r.instance_index, r.distance).unwrap();
    }
    let dist_path = out.with_file_name(DISTANCES);
    std::fs::write(&dist_path, text).with_context(|| format!("writing {}", dist_path.display()))?;

    let mean = results.iter().map(|(_, r)| r.distance).sum::<f64>() / results.len() as f64;
    println!("table instances: {}", table.len());
    println!("meshes fitted: {}", results.len());
    println!("mean distance: {mean:.6}");
    Ok(())
}

fn dataset_records(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<Vec<LandmarkRecord>> {
    let path = dir.join(cfg.classify.source.file_name());
    if !path.exists() {
        let hint = match cfg.classify.source {
            LandmarkSource::Fitted => "run `faceid fit` first or set classify.source = \"ground-truth\"",
            LandmarkSource::GroundTruth => "run `faceid synth` first",
        };
        bail!(faceid::Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found; {hint}", path.display()),
        )));
    }
    Ok(load_landmarks(&path)?)
}

fn run_classifier(
    cfg: &ExperimentConfig,
    kind: ClassifierKind,
    data: &LabeledDataset,
    plan: &SplitPlan,
) -> anyhow::Result<AccuracyReport> {
    let train = data.subset(&plan.train)?;
    let model: Box<dyn Classifier> = match kind {
        ClassifierKind::Svm => Box::new(train_svm(&train, &cfg.svm_params())?),
        ClassifierKind::Rf => Box::new(train_rf(&train, &cfg.rf_params())?),
        ClassifierKind::Lstm => Box::new(train_lstm(&train, &cfg.lstm_params())?),
    };
    Ok(evaluate(model.as_ref(), data, plan)?)
}

pub fn identify(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let datasets = cfg.datasets();
    let kinds = &cfg.classify.classifiers;
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); kinds.len()];
    let mut breakdown = String::from("dataset,classifier,subject_id,correct,total,accuracy\n");
    for ds in &datasets {
        let records = dataset_records(cfg, &ds.dir)?;
        let data = landmark_dataset(&records, |l| Ok(extract(l).into_inner()))?;
        let plan = split_by_time(&data, cfg.classify.train_fraction)?;
        for (row, &kind) in kinds.iter().enumerate() {
            let rep = run_classifier(cfg, kind, &data, &plan)?;
            cells[row].push(percent(rep.accuracy));
            for (subject, (c, t)) in &rep.per_subject {
                writeln!(breakdown, "{},{},{subject},{c},{t},{}", ds.name, kind.label(), percent(*c as f64 / *t as f64)).unwrap();
            }
        }
    }
    let table = Table {
        title: "Subject identification accuracy (%)".into(),
        corner: "classifier".into(),
        groups: vec![(String::new(), datasets.iter().map(|d| d.name.clone()).collect())],
        rows: kinds.iter().map(|k| k.label().to_string()).zip(cells).collect(),
    };
    let dir = &cfg.paths.report_dir;
    table.write(dir, "identify").with_context(|| format!("writing reports to {}", dir.display()))?;
    std::fs::write(dir.join("identify_subjects.csv"), breakdown)?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn quadrants(cfg: &ExperimentConfig) -> anyhow::Result<[QuadrantSpec; 4]> {
    match &cfg.quadrants {
        Some(q) => q.specs(),
        None => Ok(default_quadrants(&template())?),
    }
}

pub fn occlusion(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let specs = quadrants(cfg)?;
    let datasets = cfg.datasets();
    let kinds = [ClassifierKind::Rf, ClassifierKind::Svm];
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); kinds.len()];
    for ds in &datasets {
        let records = dataset_records(cfg, &ds.dir)?;
        for spec in &specs {
            let data = landmark_dataset(&records, |l| Ok(quadrant_subset(l, spec)?.into_inner()))?;
            let plan = split_by_time(&data, cfg.classify.train_fraction)?;
            for (row, &kind) in kinds.iter().enumerate() {
                cells[row].push(percent(run_classifier(cfg, kind, &data, &plan)?.accuracy));
            }
        }
    }
    let table = Table {
        title: "Subject identification accuracy under quadrant occlusion (%)".into(),
        corner: "classifier".into(),
        groups: datasets
            .iter()
            .map(|d| (d.name.clone(), specs.iter().map(|s| s.quadrant.name().to_string()).collect()))
            .collect(),
        rows: kinds.iter().map(|k| k.label().to_string()).zip(cells).collect(),
    };
    let dir = &cfg.paths.report_dir;
    table.write(dir, "occlusion").with_context(|| format!("writing reports to {}", dir.display()))?;
    print!("{}", table.to_text());
    Ok(())
}

/// Writes the effective configuration as TOML.
pub fn show_config(cfg: &ExperimentConfig, out: &mut impl std::io::Write) -> anyhow::Result<()> {
    out.write_all(cfg.to_toml().as_bytes())?;
    Ok(())
}
