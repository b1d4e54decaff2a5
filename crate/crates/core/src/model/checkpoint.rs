//! Self-describing checkpoint: config, named tensors and data hashes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::NamedTensor;
use crate::corpus::Vocabularies;
use crate::error::{Error, Result};
use crate::io;

use super::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    /// sha256 of each vocabulary file the model was trained against.
    pub data_hashes: BTreeMap<String, String>,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub valid_accuracy: Option<f64>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, data_hashes: BTreeMap<String, String>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            model_config: model.config.clone(),
            data_hashes,
            epoch: None,
            valid_accuracy: None,
            tensors: model.params.to_named(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec(self).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        io::write_atomic(path, &text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let ck: Checkpoint = io::read_json(path)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("format version {} is not {FORMAT_VERSION}", ck.format_version),
            });
        }
        Ok(ck)
    }

    /// Rejects a checkpoint trained against different vocabulary files.
    pub fn verify_data(&self, data_dir: &Path) -> Result<()> {
        let actual = Vocabularies::file_hashes(data_dir)?;
        for (file, want) in &self.data_hashes {
            match actual.get(file) {
                Some(got) if got == want => {}
                Some(got) => {
                    return Err(Error::Checkpoint {
                        path: data_dir.join(file),
                        message: format!("hash {got} does not match the checkpoint's {want}"),
                    })
                }
                None => return Err(Error::MissingArtifact(data_dir.join(file))),
            }
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(self.model_config, 0)?;
        model.params.load_named(&self.tensors)?;
        Ok(model)
    }

    /// Reads a checkpoint, checks it against `data_dir`, and rebuilds the model.
    pub fn load(path: &Path, data_dir: &Path) -> Result<Model> {
        let ck = Self::read(path)?;
        ck.verify_data(data_dir)?;
        ck.into_model()
    }
}
