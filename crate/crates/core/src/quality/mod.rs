//! No-reference quality models `f_w` with their logistic calibration `q`.

mod calibration;
pub mod cnn;
pub mod codebook;
pub mod defaults;
pub mod nss;
pub mod training;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use self::calibration::{fit_calibration, CalibrationParams, BETA1, BETA2};
pub use self::cnn::CnnModel;
pub use self::codebook::CodebookModel;
pub use self::nss::NssModel;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ImageTensor, Var};
use crate::weights::WeightFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Nss,
    Codebook,
    Cnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Nss, ModelKind::Codebook, ModelKind::Cnn];

    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Nss => "nss",
            ModelKind::Codebook => "codebook",
            ModelKind::Cnn => "cnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nss" | "nss-svr" => Ok(ModelKind::Nss),
            "codebook" => Ok(ModelKind::Codebook),
            "cnn" => Ok(ModelKind::Cnn),
            other => Err(Error::invalid(format!(
                "unknown model {other:?} (nss|codebook|cnn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Nss(NssModel),
    Codebook(CodebookModel),
    Cnn(CnnModel),
}

impl Network {
    pub fn kind(&self) -> ModelKind {
        match self {
            Network::Nss(_) => ModelKind::Nss,
            Network::Codebook(_) => ModelKind::Codebook,
            Network::Cnn(_) => ModelKind::Cnn,
        }
    }

    pub fn from_weights(kind: ModelKind, w: &WeightFile) -> Result<Self> {
        Ok(match kind {
            ModelKind::Nss => Network::Nss(NssModel::from_weights(w)?),
            ModelKind::Codebook => Network::Codebook(CodebookModel::from_weights(w)?),
            ModelKind::Cnn => Network::Cnn(CnnModel::from_weights(w)?),
        })
    }

    pub fn to_weights(&self) -> WeightFile {
        match self {
            Network::Nss(m) => m.to_weights(),
            Network::Codebook(m) => m.to_weights(),
            Network::Cnn(m) => m.to_weights(),
        }
    }

    pub fn raw_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Network::Nss(m) => m.raw_graph(g, x),
            Network::Codebook(m) => m.raw_graph(g, x),
            Network::Cnn(m) => m.raw_graph(g, x),
        }
    }
}

/// A raw regressor bundled with its fixed calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityModel {
    pub network: Network,
    pub calibration: CalibrationParams,
}

impl QualityModel {
    pub fn new(network: Network, calibration: CalibrationParams) -> Self {
        Self {
            network,
            calibration,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.network.kind()
    }

    /// Shipped seeded weights and calibration.
    pub fn default_for(kind: ModelKind) -> Result<Self> {
        defaults::model(kind)
    }

    pub fn load(kind: ModelKind, weights: &WeightFile, calibration: CalibrationParams) -> Result<Self> {
        Ok(Self::new(Network::from_weights(kind, weights)?, calibration))
    }

    pub fn raw_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.network.raw_graph(g, x)
    }

    /// Calibrated `q(f_w(x))` on the tape.
    pub fn score_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let raw = self.raw_graph(g, x)?;
        Ok(self.calibration.graph(g, raw))
    }

    pub fn raw_score(&self, x: &ImageTensor) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(x.to_planar());
        let out = self.raw_graph(&mut g, xv)?;
        let v = g.forward(out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{} raw score", self.kind())));
        }
        Ok(v)
    }

    pub fn score(&self, x: &ImageTensor) -> Result<f64> {
        self.calibration.calibrate(self.raw_score(x)?)
    }
}

fn expect_kind(model: &QualityModel, kind: ModelKind) -> Result<()> {
    if model.kind() == kind {
        Ok(())
    } else {
        Err(Error::invalid(format!("expected a {kind} model, got {}", model.kind())))
    }
}

/// Raw NSS regressor output.
pub fn nss_score(x: &ImageTensor, model: &QualityModel) -> Result<f64> {
    expect_kind(model, ModelKind::Nss)?;
    model.raw_score(x)
}

/// Raw codebook regressor output.
pub fn codebook_score(x: &ImageTensor, model: &QualityModel) -> Result<f64> {
    expect_kind(model, ModelKind::Codebook)?;
    model.raw_score(x)
}

/// Raw CNN regressor output.
pub fn cnn_score(x: &ImageTensor, model: &QualityModel) -> Result<f64> {
    expect_kind(model, ModelKind::Cnn)?;
    model.raw_score(x)
}

/// Calibrated score `q(raw)`.
pub fn calibrate(raw: f64, params: &CalibrationParams) -> Result<f64> {
    params.calibrate(raw)
}
