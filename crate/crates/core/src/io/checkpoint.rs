//! Parameter checkpoints as JSON. Values use shortest round-trip decimal
//! form, so a save/load cycle is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator, GeneratorConfig, Linear, MlpClassifier, Parameterized};
use crate::simulator::GroundTruthModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Classifier,
    Generator,
    Discriminator,
    GroundTruth,
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Lineage {
    pub master_seed: u64,
    /// Producing step, e.g. `phase1` or `baseline-dp`.
    pub phase: String,
    /// Parameter fingerprints of the checkpoints this one was trained from.
    pub parents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
    /// Fingerprint of the experiment configuration.
    pub config_fingerprint: String,
    pub lineage: Lineage,
    /// Generator layout, for generator checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    /// Feature-update size, for ground-truth checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

impl Checkpoint {
    fn from_params(
        kind: CheckpointKind,
        model: &impl Parameterized,
        config_fingerprint: &str,
        lineage: Lineage,
    ) -> Self {
        let tensors = model.tensors();
        Checkpoint {
            kind,
            shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
            values: tensors.iter().map(|t| t.values().to_vec()).collect(),
            config_fingerprint: config_fingerprint.into(),
            lineage,
            generator: None,
            epsilon: None,
        }
    }

    pub fn classifier(model: &MlpClassifier, config_fingerprint: &str, lineage: Lineage) -> Self {
        Checkpoint::from_params(CheckpointKind::Classifier, model, config_fingerprint, lineage)
    }

    pub fn ground_truth(gt: &GroundTruthModel, config_fingerprint: &str, lineage: Lineage) -> Self {
        Checkpoint {
            epsilon: Some(gt.epsilon()),
            ..Checkpoint::from_params(
                CheckpointKind::GroundTruth,
                gt.classifier(),
                config_fingerprint,
                lineage,
            )
        }
    }

    pub fn generator(gen: &Generator, config_fingerprint: &str, lineage: Lineage) -> Self {
        Checkpoint {
            generator: Some(gen.config().clone()),
            ..Checkpoint::from_params(CheckpointKind::Generator, gen, config_fingerprint, lineage)
        }
    }

    pub fn discriminator(disc: &Discriminator, config_fingerprint: &str, lineage: Lineage) -> Self {
        Checkpoint::from_params(CheckpointKind::Discriminator, disc, config_fingerprint, lineage)
    }

    /// Hash of the stored parameter bits.
    pub fn param_fingerprint(&self) -> String {
        let tensors = self.tensors().unwrap_or_default();
        let mut h = Sha256::new();
        for t in &tensors {
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn tensors(&self) -> Result<Vec<Tensor>> {
        if self.shapes.len() != self.values.len() {
            return Err(Error::shape("checkpoint", "shape and value lists differ in length"));
        }
        self.shapes
            .iter()
            .zip(&self.values)
            .map(|(s, v)| Tensor::param(s.clone(), v.clone()))
            .collect()
    }

    fn expect(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(
                "checkpoint.kind",
                format!("expected {kind:?}, found {:?}", self.kind),
            ));
        }
        Ok(())
    }

    fn load_into(&self, model: &mut impl Parameterized) -> Result<()> {
        let shapes: Vec<Vec<usize>> = model.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if shapes != self.shapes {
            return Err(Error::shape(
                "checkpoint",
                format!("stored shapes {:?} vs model {:?}", self.shapes, shapes),
            ));
        }
        let flat: Vec<f64> = self.values.iter().flatten().copied().collect();
        model.set_flat_values(&flat)
    }

    fn mlp(&self) -> Result<MlpClassifier> {
        let tensors = self.tensors()?;
        if tensors.len() % 2 != 0 {
            return Err(Error::shape("checkpoint", "classifier needs weight/bias pairs"));
        }
        let layers = tensors
            .chunks(2)
            .map(|wb| {
                let (w, b) = (&wb[0], &wb[1]);
                if w.shape().len() != 2 || b.shape() != [w.shape()[1]] {
                    return Err(Error::shape(
                        "checkpoint",
                        format!("layer {:?} / {:?}", w.shape(), b.shape()),
                    ));
                }
                let mut layer = Linear::zeros(w.shape()[0], w.shape()[1]);
                layer.weight.values_mut().copy_from_slice(w.values());
                layer.bias.values_mut().copy_from_slice(b.values());
                Ok(layer)
            })
            .collect::<Result<Vec<_>>>()?;
        MlpClassifier::from_layers(layers)
    }

    pub fn to_classifier(&self) -> Result<MlpClassifier> {
        self.expect(CheckpointKind::Classifier)?;
        self.mlp()
    }

    pub fn to_ground_truth(&self) -> Result<GroundTruthModel> {
        self.expect(CheckpointKind::GroundTruth)?;
        let eps = self
            .epsilon
            .ok_or_else(|| Error::invalid("checkpoint.epsilon", "missing"))?;
        GroundTruthModel::new(self.mlp()?, eps)
    }

    pub fn to_generator(&self) -> Result<Generator> {
        self.expect(CheckpointKind::Generator)?;
        let cfg = self
            .generator
            .as_ref()
            .ok_or_else(|| Error::invalid("checkpoint.generator", "missing"))?;
        let mut rng = <crate::seeds::Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut gen = Generator::new(cfg, &mut rng);
        self.load_into(&mut gen)?;
        Ok(gen)
    }

    pub fn to_discriminator(&self) -> Result<Discriminator> {
        self.expect(CheckpointKind::Discriminator)?;
        // GRU1 update-gate input weights are [d x h1]; GRU2's are [h1 x h2].
        let (d, h1) = match self.shapes.first().map(Vec::as_slice) {
            Some([d, h]) => (*d, *h),
            _ => return Err(Error::shape("checkpoint", "discriminator has no input layer")),
        };
        let h2 = self.shapes.get(9).and_then(|s| s.get(1)).copied().unwrap_or(0);
        let mut disc = Discriminator::zeros(d, [h1, h2]);
        self.load_into(&mut disc)?;
        Ok(disc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        ck.tensors()?;
        Ok(ck)
    }
}
