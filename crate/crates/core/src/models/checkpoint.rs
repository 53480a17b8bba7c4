//! Model checkpoints: a JSON manifest describing the architecture plus a raw
//! blob of little-endian `f64` values in the manifest's tensor order
//! (encoder parameters, head weight, upgrade parameters, then upgrade
//! batchnorm running mean/variance).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ArcFaceHead, EncoderConfig, EncoderModel, ModelGeneration, UpgradeConfig, UpgradeModule,
};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "bict-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub scale: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpgradeSpec {
    pub config: UpgradeConfig,
    pub identity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub generation: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub head: HeadSpec,
    pub upgrade: Option<UpgradeSpec>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub blob: Vec<f64>,
}

impl Checkpoint {
    pub fn from_generation(generation: &ModelGeneration, seed: u64) -> Self {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        let mut push = |name: String, t: &Tensor| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape(),
            });
            blob.extend_from_slice(t.data());
        };
        let enc = generation.encoder.mlp();
        for (name, t) in enc.parameter_names().into_iter().zip(enc.parameters()) {
            push(format!("encoder.{name}"), t);
        }
        push("head.weight".into(), &generation.head.weight);
        let upgrade = generation.upgrade.as_ref().map(|psi| {
            if let Some(m) = psi.mlp() {
                for (name, t) in m.parameter_names().into_iter().zip(m.parameters()) {
                    push(format!("psi.{name}"), t);
                }
                for (j, s) in m.running_stats().into_iter().enumerate() {
                    push(format!("psi.bn{j}.running_mean"), &Tensor::row(&s.mean));
                    push(format!("psi.bn{j}.running_var"), &Tensor::row(&s.var));
                }
            }
            UpgradeSpec {
                config: psi.config.clone(),
                identity: psi.is_identity(),
            }
        });
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            generation: generation.index,
            seed,
            encoder: generation.encoder.config.clone(),
            head: HeadSpec {
                num_classes: generation.head.num_classes(),
                dim: generation.head.dim(),
                scale: generation.head.scale,
                margin: generation.head.margin,
            },
            upgrade,
            tensors,
        };
        Self { manifest, blob }
    }

    pub fn to_generation(&self) -> Result<ModelGeneration> {
        let m = &self.manifest;
        if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                m.format, m.version
            )));
        }
        let expected: usize = m.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
        if expected != self.blob.len() {
            return Err(Error::Format(format!(
                "checkpoint blob holds {} values, manifest describes {expected}",
                self.blob.len()
            )));
        }
        let mut values = m.tensors.iter().scan(0usize, |offset, entry| {
            let n = entry.shape[0] * entry.shape[1];
            let slice = &self.blob[*offset..*offset + n];
            *offset += n;
            Some((entry, slice))
        });
        let mut fill = |target: &mut Tensor| -> Result<()> {
            let (entry, slice) = values
                .next()
                .ok_or_else(|| Error::Format("checkpoint is missing tensors".into()))?;
            if entry.shape != target.shape() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    entry.name,
                    entry.shape,
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(slice);
            Ok(())
        };

        let mut encoder = EncoderModel::new(m.encoder.clone(), 0)?;
        for p in encoder.mlp_mut().parameters_mut() {
            fill(p)?;
        }
        let mut weight = Tensor::zeros(m.head.num_classes, m.head.dim);
        fill(&mut weight)?;
        let head = ArcFaceHead::from_weight(weight, m.head.scale, m.head.margin)?;
        let upgrade = match &m.upgrade {
            None => None,
            Some(spec) if spec.identity => Some(UpgradeModule::identity(
                spec.config.input_dim,
                spec.config.output_dim,
            )?),
            Some(spec) => {
                let mut psi = UpgradeModule::new(spec.config.clone(), 0)?;
                let mlp = psi.mlp_mut().expect("mlp upgrade");
                for p in mlp.parameters_mut() {
                    fill(p)?;
                }
                for s in mlp.running_stats_mut() {
                    let mut mean = Tensor::zeros(1, s.mean.len());
                    let mut var = Tensor::zeros(1, s.var.len());
                    fill(&mut mean)?;
                    fill(&mut var)?;
                    s.mean = mean.into_data();
                    s.var = var.into_data();
                }
                Some(psi)
            }
        };
        ModelGeneration::new(m.generation, encoder, head, upgrade)
    }

    pub fn blob_bytes(&self) -> Vec<u8> {
        self.blob.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn save(&self, manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<()> {
        fs::write(manifest_path, serde_json::to_string_pretty(&self.manifest)?)?;
        fs::write(blob_path, self.blob_bytes())?;
        Ok(())
    }

    pub fn load(manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<Self> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        let bytes = fs::read(blob_path)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(
                "checkpoint blob length is not a multiple of 8".into(),
            ));
        }
        let blob = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { manifest, blob })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_roundtrips_through_files() {
        let enc = EncoderModel::new(EncoderConfig::mlp(5, 7, 3), 1).unwrap();
        let head = ArcFaceHead::new(4, 3, 30.0, 0.3, 2).unwrap();
        let mut psi = UpgradeModule::new(
            UpgradeConfig {
                depth: 2,
                hidden_dim: 6,
                input_dim: 3,
                output_dim: 3,
            },
            3,
        )
        .unwrap();
        psi.mlp_mut().unwrap().running_stats_mut()[0].mean[0] = 0.25;
        let generation = ModelGeneration::new(2, enc, head, Some(psi)).unwrap();
        let ckpt = Checkpoint::from_generation(&generation, 11);
        let dir = tempfile::tempdir().unwrap();
        let (j, b) = (dir.path().join("m.json"), dir.path().join("m.bin"));
        ckpt.save(&j, &b).unwrap();
        let back = Checkpoint::load(&j, &b).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_generation().unwrap(), generation);
        assert_eq!(std::fs::read(&b).unwrap().len(), ckpt.blob.len() * 8);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let generation = ModelGeneration::new(
            0,
            EncoderModel::identity(2),
            ArcFaceHead::new(2, 2, 1.0, 0.0, 0).unwrap(),
            None,
        )
        .unwrap();
        let mut ckpt = Checkpoint::from_generation(&generation, 0);
        ckpt.blob.pop();
        assert!(ckpt.to_generation().is_err());
    }
}
