use std::fmt;
use std::path::{Path, PathBuf};

use faceid::classify::{LstmParams, RfParams, SvmParams};
use faceid::features::{validate_quadrants, Quadrant, QuadrantSpec, FACE_LANDMARKS};
use faceid::synthdata::PopulationConfig;
use faceid::tdsm::{FitOptions, PreAlignment, Sampling, TableOptions, TemporalOptions, TrainOptions};
use serde::{Deserialize, Serialize};

/// A problem with the configuration or the command line, as opposed to the
/// data being processed.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            model_dir: "model".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdsmConfig {
    pub variance_retained: f64,
    pub samples_per_mode: usize,
    pub bound_fraction: f64,
    pub sampling: Sampling,
    pub cartesian_limit: usize,
    pub cap: usize,
    pub refine_iters: usize,
    pub pre_alignment: PreAlignment,
    pub crop_factor: f64,
    pub allow_scale: bool,
    /// Seed each frame of a sequence from the previous frame's fit.
    pub temporal: bool,
    pub temporal_radius: f64,
}

impl Default for TdsmConfig {
    fn default() -> Self {
        let table = TableOptions::default();
        let fit = FitOptions::default();
        TdsmConfig {
            variance_retained: TrainOptions::default().variance_retained,
            samples_per_mode: table.samples_per_mode,
            bound_fraction: table.bound_fraction,
            sampling: table.sampling,
            cartesian_limit: table.cartesian_limit,
            cap: table.cap,
            refine_iters: fit.refine_iters,
            pre_alignment: fit.pre_alignment,
            crop_factor: fit.crop_factor,
            allow_scale: fit.allow_scale,
            temporal: false,
            temporal_radius: TemporalOptions::default().radius,
        }
    }
}

impl TdsmConfig {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            variance_retained: self.variance_retained,
            ..Default::default()
        }
    }

    pub fn table_options(&self) -> TableOptions {
        TableOptions {
            samples_per_mode: self.samples_per_mode,
            bound_fraction: self.bound_fraction,
            sampling: self.sampling,
            cartesian_limit: self.cartesian_limit,
            cap: self.cap,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            refine_iters: self.refine_iters,
            allow_scale: self.allow_scale,
            pre_alignment: self.pre_alignment,
            crop_factor: self.crop_factor,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Svm,
    Rf,
    Lstm,
}

impl ClassifierKind {
    pub fn label(self) -> &'static str {
        match self {
            ClassifierKind::Svm => "SVM",
            ClassifierKind::Rf => "RF",
            ClassifierKind::Lstm => "LSTM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "svm" => Some(ClassifierKind::Svm),
            "rf" => Some(ClassifierKind::Rf),
            "lstm" => Some(ClassifierKind::Lstm),
            _ => None,
        }
    }
}

/// Which landmarks feed the classifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LandmarkSource {
    /// `fitted.csv`, written by `fit`.
    Fitted,
    /// `landmarks.csv`, written by `synth`.
    GroundTruth,
}

impl LandmarkSource {
    pub fn file_name(self) -> &'static str {
        match self {
            LandmarkSource::Fitted => "fitted.csv",
            LandmarkSource::GroundTruth => "landmarks.csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfConfig {
    pub trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub max_features: Option<usize>,
}

impl Default for RfConfig {
    fn default() -> Self {
        let p = RfParams::default();
        RfConfig {
            trees: p.trees,
            max_depth: p.max_depth,
            min_leaf: p.min_leaf,
            max_features: p.max_features,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c: f64,
    pub epochs: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        let p = SvmParams::default();
        SvmConfig { c: p.c, epochs: p.epochs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub lookback: usize,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        let p = LstmParams::default();
        LstmConfig {
            hidden: p.hidden,
            epochs: p.epochs,
            batch: p.batch,
            learning_rate: p.learning_rate,
            dropout: p.dropout,
            lookback: p.lookback,
            rms_decay: p.rms_decay,
            rms_epsilon: p.rms_epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub classifiers: Vec<ClassifierKind>,
    pub train_fraction: f64,
    pub source: LandmarkSource,
    pub rf: RfConfig,
    pub svm: SvmConfig,
    pub lstm: LstmConfig,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            classifiers: vec![ClassifierKind::Svm, ClassifierKind::Rf, ClassifierKind::Lstm],
            train_fraction: 0.8,
            source: LandmarkSource::Fitted,
            rf: RfConfig::default(),
            svm: SvmConfig::default(),
            lstm: LstmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub dir: PathBuf,
}

/// Landmark indices per quadrant. When absent, the quadrants are derived from
/// the synthetic template's layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrantConfig {
    pub tr: Vec<usize>,
    pub tl: Vec<usize>,
    pub lr: Vec<usize>,
    pub ll: Vec<usize>,
}

impl QuadrantConfig {
    pub fn specs(&self) -> anyhow::Result<[QuadrantSpec; 4]> {
        let make = |q: Quadrant, idx: &[usize]| {
            QuadrantSpec::new(q, idx.to_vec()).map_err(|e| config_error(format!("quadrants.{}: {e}", q.name().to_lowercase())))
        };
        let specs = [
            make(Quadrant::TR, &self.tr)?,
            make(Quadrant::TL, &self.tl)?,
            make(Quadrant::LR, &self.lr)?,
            make(Quadrant::LL, &self.ll)?,
        ];
        validate_quadrants(&specs, FACE_LANDMARKS).map_err(|e| config_error(format!("quadrants: {e}")))?;
        Ok(specs)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    /// `population.seed` is replaced by the top-level `seed`.
    pub population: PopulationConfig,
    pub tdsm: TdsmConfig,
    pub classify: ClassifyConfig,
    /// Columns of the report tables. Empty means one dataset named
    /// `synthetic` in `paths.data_dir`.
    pub datasets: Vec<DatasetConfig>,
    pub quadrants: Option<QuadrantConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| config_error(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn population(&self) -> PopulationConfig {
        PopulationConfig {
            seed: self.seed,
            ..self.population.clone()
        }
    }

    pub fn datasets(&self) -> Vec<DatasetConfig> {
        if self.datasets.is_empty() {
            vec![DatasetConfig {
                name: "synthetic".into(),
                dir: self.paths.data_dir.clone(),
            }]
        } else {
            self.datasets.clone()
        }
    }

    pub fn rf_params(&self) -> RfParams {
        let c = &self.classify.rf;
        RfParams {
            trees: c.trees,
            max_depth: c.max_depth,
            min_leaf: c.min_leaf,
            max_features: c.max_features,
            seed: self.seed,
        }
    }

    pub fn svm_params(&self) -> SvmParams {
        SvmParams {
            c: self.classify.svm.c,
            epochs: self.classify.svm.epochs,
            seed: self.seed,
        }
    }

    pub fn lstm_params(&self) -> LstmParams {
        let c = &self.classify.lstm;
        LstmParams {
            hidden: c.hidden,
            epochs: c.epochs,
            batch: c.batch,
            learning_rate: c.learning_rate,
            dropout: c.dropout,
            lookback: c.lookback,
            rms_decay: c.rms_decay,
            rms_epsilon: c.rms_epsilon,
            seed: self.seed,
        }
    }

    /// Checks what can be checked without touching data.
    pub fn validate(&self) -> anyhow::Result<()> {
        let f = self.classify.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(config_error(format!("classify.train_fraction must be in (0, 1), got {f}")));
        }
        if self.classify.classifiers.is_empty() {
            return Err(config_error("classify.classifiers is empty"));
        }
        let mut seen = self.classify.classifiers.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classify.classifiers.len() {
            return Err(config_error("classify.classifiers lists a classifier twice"));
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.datasets.len() {
            return Err(config_error("dataset names must be unique"));
        }
        if self.datasets.iter().any(|d| d.name.is_empty() || d.name.contains([',', '"', '\n'])) {
            return Err(config_error("dataset names must be non-empty and free of commas, quotes and newlines"));
        }
        if !(self.tdsm.temporal_radius >= 0.0) {
            return Err(config_error("tdsm.temporal_radius must be non-negative"));
        }
        self.population().validate().map_err(|e| config_error(format!("population: {e}")))?;
        if let Some(q) = &self.quadrants {
            q.specs()?;
        }
        Ok(())
    }
}
