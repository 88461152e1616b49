//! Model persistence: a fixed little-endian binary layout and a JSON export.
//!
//! Binary layout: `b"TDSM"`, u32 format version, u32 `N`, u32 `k`, the mean
//! shape (`3N` f64), the modes column by column (`3N * k` f64), then the `k`
//! eigenvalues.

use serde::Serialize;

use super::ShapeModel;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TDSM";

pub fn save_model(model: &ShapeModel) -> Vec<u8> {
    let mut w = Writer::new(MAGIC, MODEL_FORMAT_VERSION);
    w.len(model.num_landmarks());
    w.len(model.num_modes());
    w.f64s(model.mean_shape());
    for m in model.modes() {
        w.f64s(m);
    }
    w.f64s(model.eigenvalues());
    w.finish()
}

pub fn load_model(bytes: &[u8]) -> Result<ShapeModel> {
    let mut r = Reader::open(bytes, MAGIC, MODEL_FORMAT_VERSION, "shape model")?;
    let n = r.len()?;
    let k = r.len()?;
    let dim = n
        .checked_mul(3)
        .ok_or_else(|| Error::ModelFormat("shape model: landmark count overflow".into()))?;
    // Reject absurd headers before allocating.
    let needed = (dim as u128 + dim as u128 * k as u128 + k as u128) * 8;
    if needed > (bytes.len() as u128) {
        return Err(Error::ModelFormat(format!(
            "shape model: truncated payload (header promises {needed} bytes)"
        )));
    }
    let mean = r.f64s(dim)?;
    let modes = (0..k).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
    let eigenvalues = r.f64s(k)?;
    r.finish()?;
    ShapeModel::new(mean, modes, eigenvalues).map_err(|e| Error::ModelFormat(format!("shape model: {e}")))
}

#[derive(Serialize)]
struct ModelDoc<'a> {
    format_version: u32,
    num_landmarks: usize,
    num_modes: usize,
    mean_shape: &'a [f64],
    modes: &'a [Vec<f64>],
    eigenvalues: &'a [f64],
}

/// Human-readable export of the same fields, for diffing.
pub fn model_to_json(model: &ShapeModel) -> String {
    let doc = ModelDoc {
        format_version: MODEL_FORMAT_VERSION,
        num_landmarks: model.num_landmarks(),
        num_modes: model.num_modes(),
        mean_shape: model.mean_shape(),
        modes: model.modes(),
        eigenvalues: model.eigenvalues(),
    };
    serde_json::to_string_pretty(&doc).expect("model serializes")
}
