use std::path::Path;

use serde::{Deserialize, Serialize};

use super::duq::DuqModel;
use super::mlp::Classifier;
use crate::error::{Error, Result};

const FORMAT: &str = "oodbench-checkpoint";
const VERSION: u32 = 1;

/// Any trained model the harness can persist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Mlp(Classifier),
    Duq(DuqModel),
}

impl Model {
    pub fn seed(&self) -> u64 {
        match self {
            Model::Mlp(c) => c.config().seed,
            Model::Duq(d) => d.config().seed,
        }
    }
}

/// Versioned, self-describing JSON checkpoint. Floats are written with
/// shortest round-trip formatting, so save/load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            seed: model.seed(),
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unrecognized format `{}`",
                ckpt.format
            )));
        }
        if ckpt.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DuqConfig, MlpConfig};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn mlp_round_trip_is_bit_exact(seed in any::<u64>(), h in 1usize..6) {
            let cfg = MlpConfig { hidden_dims: vec![h, 3], seed, ..Default::default() };
            let ckpt = Checkpoint::new(Model::Mlp(Classifier::new(cfg).unwrap()));
            let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
            prop_assert_eq!(&back, &ckpt);
            prop_assert_eq!(back.to_json().unwrap(), ckpt.to_json().unwrap());
        }
    }

    #[test]
    fn duq_round_trip_and_version_check() {
        let model = DuqModel::new(MlpConfig::default(), &DuqConfig::default()).unwrap();
        let ckpt = Checkpoint::new(Model::Duq(model));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

        let bumped = ckpt
            .to_json()
            .unwrap()
            .replace("\"version\":1", "\"version\":9");
        assert!(matches!(
            Checkpoint::from_json(&bumped),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn corrupted_tensor_shape_is_rejected() {
        let cfg = MlpConfig {
            hidden_dims: vec![],
            ..Default::default()
        };
        let json = Checkpoint::new(Model::Mlp(Classifier::new(cfg).unwrap()))
            .to_json()
            .unwrap();
        let broken = json.replacen("\"shape\":[2,2]", "\"shape\":[2,3]", 1);
        assert_ne!(broken, json);
        assert!(Checkpoint::from_json(&broken).is_err());
    }
}
