//! Versioned JSON checkpoints: a config plus named row-major weight arrays.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{MoEModel, ModelConfig};
use crate::predictor::PredictorMLP;
use crate::rng::stream;
use crate::tensor::Matrix;

use super::config::SCHEMA_VERSION;

pub const KIND_MODEL: &str = "moe_model";
pub const KIND_PREDICTOR: &str = "predictor_mlp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    /// Parameter name → matrix with `rows`, `cols` and row-major `data`.
    pub params: BTreeMap<String, Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PredictorShape {
    layers: usize,
    experts: usize,
    input: usize,
    hidden: usize,
}

impl Checkpoint {
    pub fn from_model(model: &MoEModel) -> Result<Self> {
        let mut params = BTreeMap::new();
        model.visit_params(|_, name, m| {
            params.insert(name, m.clone());
        });
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            kind: KIND_MODEL.into(),
            config: serde_json::to_value(&model.config)?,
            params,
        })
    }

    pub fn to_model(&self) -> Result<MoEModel> {
        self.check_kind(KIND_MODEL)?;
        let config: ModelConfig = serde_json::from_value(self.config.clone())?;
        let mut model = MoEModel::init(config, &mut stream(0, "checkpoint"))?;
        let mut names = Vec::new();
        model.visit_params(|_, name, _| names.push(name));
        if names.len() != self.params.len() {
            return Err(shape_err("checkpoint parameter count", names.len(), self.params.len()));
        }
        for (name, (_, slot)) in names.iter().zip(model.params_mut()) {
            let m = self
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter `{name}`")))?;
            if (m.rows, m.cols) != (slot.rows, slot.cols) || m.data.len() != m.rows * m.cols {
                return Err(shape_err(
                    "checkpoint parameter",
                    format!("{}x{}", slot.rows, slot.cols),
                    name,
                ));
            }
            *slot = m.clone();
        }
        model.validate()?;
        Ok(model)
    }

    pub fn from_predictor(mlp: &PredictorMLP) -> Result<Self> {
        let shape = PredictorShape {
            layers: mlp.layers,
            experts: mlp.experts,
            input: mlp.w1.cols,
            hidden: mlp.w1.rows,
        };
        let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec());
        let params = BTreeMap::from([
            ("w1".to_string(), mlp.w1.clone()),
            ("b1".to_string(), row(&mlp.b1)?),
            ("w2".to_string(), mlp.w2.clone()),
            ("b2".to_string(), row(&mlp.b2)?),
        ]);
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            kind: KIND_PREDICTOR.into(),
            config: serde_json::to_value(shape)?,
            params,
        })
    }

    pub fn to_predictor(&self) -> Result<PredictorMLP> {
        self.check_kind(KIND_PREDICTOR)?;
        let s: PredictorShape = serde_json::from_value(self.config.clone())?;
        let get = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let m = self
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter `{name}`")))?;
            if (m.rows, m.cols) != (rows, cols) || m.data.len() != rows * cols {
                return Err(shape_err(
                    "predictor checkpoint",
                    format!("{rows}x{cols}"),
                    name.to_string(),
                ));
            }
            Ok(m.clone())
        };
        Ok(PredictorMLP {
            layers: s.layers,
            experts: s.experts,
            w1: get("w1", s.hidden, s.input)?,
            b1: get("b1", 1, s.hidden)?.data,
            w2: get("w2", s.layers * s.experts, s.hidden)?,
            b2: get("b2", 1, s.layers * s.experts)?.data,
        })
    }

    fn check_kind(&self, kind: &str) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "checkpoint schema_version {} is not supported",
                self.schema_version
            )));
        }
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn save_model(model: &MoEModel, path: &Path) -> Result<()> {
    Checkpoint::from_model(model)?.save(path)
}

pub fn load_model(path: &Path) -> Result<MoEModel> {
    Checkpoint::load(path)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn model_roundtrip_is_bit_identical() {
        let m = MoEModel::init(ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let bits = |m: &MoEModel| {
            m.params()
                .iter()
                .flat_map(|(_, p)| p.data.iter().map(|x| x.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn predictor_roundtrip() {
        let mlp = PredictorMLP::init(6, 5, 2, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let ck = Checkpoint::from_predictor(&mlp).unwrap();
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_predictor().unwrap(), mlp);
        assert!(back.to_model().is_err());
    }

    #[test]
    fn rejects_damaged_checkpoints() {
        let m = MoEModel::init(ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut ck = Checkpoint::from_model(&m).unwrap();
        ck.params.get_mut("head").unwrap().data.pop();
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::from_model(&m).unwrap();
        ck.params.remove("layers.0.router");
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::from_model(&m).unwrap();
        ck.schema_version = 0;
        assert!(ck.to_model().is_err());
    }
}
