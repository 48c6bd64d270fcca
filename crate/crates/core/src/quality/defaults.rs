//! Shipped seeded weights, embedded at build time.
//!
//! The files under `weights/` are produced by `nriqa gen-weights` from
//! [`super::training::train`] with the default config.

use super::{CalibrationParams, ModelKind, QualityModel};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::weights::WeightFile;

const NSS_WEIGHTS: &[u8] = include_bytes!("../../weights/nss.iqaw");
const CODEBOOK_WEIGHTS: &[u8] = include_bytes!("../../weights/codebook.iqaw");
const CNN_WEIGHTS: &[u8] = include_bytes!("../../weights/cnn.iqaw");
const EXTRACTOR_WEIGHTS: &[u8] = include_bytes!("../../weights/extractor.iqaw");
const NSS_CALIB: &str = include_str!("../../weights/nss.calib");
const CODEBOOK_CALIB: &str = include_str!("../../weights/codebook.calib");
const CNN_CALIB: &str = include_str!("../../weights/cnn.calib");

/// Embedded `(file name, bytes)` pairs, in the order written by the generator.
pub fn files() -> Vec<(&'static str, &'static [u8])> {
    vec![
        ("nss.iqaw", NSS_WEIGHTS),
        ("nss.calib", NSS_CALIB.as_bytes()),
        ("codebook.iqaw", CODEBOOK_WEIGHTS),
        ("codebook.calib", CODEBOOK_CALIB.as_bytes()),
        ("cnn.iqaw", CNN_WEIGHTS),
        ("cnn.calib", CNN_CALIB.as_bytes()),
        ("extractor.iqaw", EXTRACTOR_WEIGHTS),
    ]
}

pub fn weight_bytes(kind: ModelKind) -> &'static [u8] {
    match kind {
        ModelKind::Nss => NSS_WEIGHTS,
        ModelKind::Codebook => CODEBOOK_WEIGHTS,
        ModelKind::Cnn => CNN_WEIGHTS,
    }
}

pub fn calibration(kind: ModelKind) -> Result<CalibrationParams> {
    let text = match kind {
        ModelKind::Nss => NSS_CALIB,
        ModelKind::Codebook => CODEBOOK_CALIB,
        ModelKind::Cnn => CNN_CALIB,
    };
    let (params, id) = CalibrationParams::from_text(text)?;
    if id != kind.id() {
        return Err(Error::Format {
            what: "embedded calibration".into(),
            reason: format!("file for {kind} names model {id}"),
        });
    }
    Ok(params)
}

pub fn model(kind: ModelKind) -> Result<QualityModel> {
    QualityModel::load(kind, &WeightFile::from_bytes(weight_bytes(kind))?, calibration(kind)?)
}

pub fn extractor() -> Result<FeatureExtractor> {
    FeatureExtractor::from_weights(&WeightFile::from_bytes(EXTRACTOR_WEIGHTS)?)
}
