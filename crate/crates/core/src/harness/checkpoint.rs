use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::prompt::{PromptContext, PromptEncoder};
use crate::tensor::Tensor;
use crate::train::{PromptState, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Trained prompt state plus what is needed to rebuild its surroundings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub backbone: BackboneConfig,
    pub class_names: Vec<String>,
    pub prompt_vectors: Tensor,
    pub encoder_params: Vec<NamedTensor>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(
        state: &PromptState,
        config: &TrainConfig,
        backbone: &BackboneConfig,
        class_names: &[String],
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            backbone: backbone.clone(),
            class_names: class_names.to_vec(),
            prompt_vectors: state.context.vectors().clone(),
            encoder_params: state
                .encoder
                .parameters()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    tensor: t.clone(),
                })
                .collect(),
            seed: config.seed,
        }
    }

    /// Rebuilds the prompt state, checking it against width `d`.
    pub fn to_state(&self, d: usize) -> Result<PromptState> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        if self.version != CHECKPOINT_VERSION {
            return bad(format!(
                "version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            ));
        }
        if self.backbone.width != d {
            return bad(format!(
                "checkpoint width {} but expected {d}",
                self.backbone.width
            ));
        }
        let v = checked(&self.prompt_vectors, "promptVectors")?;
        if v.shape() != [self.config.m, d] {
            return bad(format!(
                "promptVectors shape {:?}, expected [{}, {d}]",
                v.shape(),
                self.config.m
            ));
        }
        let mut encoder = PromptEncoder::new(self.config.encoder.clone(), d, self.config.m)?;
        let expected: Vec<(String, Vec<usize>)> = encoder
            .parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != self.encoder_params.len() {
            return bad(format!(
                "{} encoder tensors, expected {}",
                self.encoder_params.len(),
                expected.len()
            ));
        }
        for (((name, shape), slot), saved) in expected
            .iter()
            .zip(encoder.parameters_mut())
            .zip(&self.encoder_params)
        {
            let t = checked(&saved.tensor, &saved.name)?;
            if &saved.name != name || t.shape() != shape.as_slice() {
                return bad(format!(
                    "encoder tensor {} {:?} does not match {name} {shape:?}",
                    saved.name,
                    t.shape()
                ));
            }
            *slot = t;
        }
        Ok(PromptState {
            context: PromptContext::new(v)?,
            encoder,
        })
    }

    /// Writes via a temporary file so a crash never leaves a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn checked(t: &Tensor, what: &str) -> Result<Tensor> {
    let t = Tensor::new(t.shape().to_vec(), t.data().to_vec())
        .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
    if !t.is_finite() {
        return Err(Error::Checkpoint(format!("{what}: non-finite values")));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FrozenBackbone;
    use crate::prompt::{Architecture, Mode, Sharing};
    use crate::train::build_class_weights;

    fn setup(arch: Architecture) -> (Checkpoint, PromptState, FrozenBackbone, Vec<String>) {
        let names: Vec<String> = ["cat", "dog", "frog"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut bcfg = BackboneConfig::new(3, 8);
        bcfg.vocab_size = 32;
        let bb = FrozenBackbone::new(bcfg.clone(), &names).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.encoder.architecture = arch;
        cfg.encoder.sharing = Sharing::Separate;
        let mut state = PromptState::init(&cfg, &bb).unwrap();
        for p in state.parameters_mut() {
            p.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x += (i as f64 * 0.7).sin() / 3.0);
        }
        (
            Checkpoint::new(&state, &cfg, &bcfg, &names),
            state,
            bb,
            names,
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for arch in Architecture::ALL {
            let (ck, state, bb, names) = setup(arch);
            let path = dir.path().join(format!("{arch}.json"));
            ck.save(&path).unwrap();
            let loaded = Checkpoint::load(&path).unwrap();
            assert_eq!(loaded, ck);
            let back = loaded.to_state(8).unwrap();
            assert_eq!(back, state);
            let w0 = build_class_weights(&bb, &state, &names, Mode::Eval).unwrap();
            let w1 = build_class_weights(&bb, &back, &names, Mode::Eval).unwrap();
            assert_eq!(w0, w1);
        }
    }

    #[test]
    fn width_mismatch_errors() {
        let (ck, ..) = setup(Architecture::Bilstm);
        assert!(matches!(ck.to_state(16), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ck, ..) = setup(Architecture::Mlp);
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_and_shape_checks() {
        let (mut ck, ..) = setup(Architecture::Transformer);
        ck.version = 99;
        assert!(ck.to_state(8).is_err());
        let (mut ck, ..) = setup(Architecture::Transformer);
        ck.encoder_params.pop();
        assert!(ck.to_state(8).is_err());
        let (mut ck, ..) = setup(Architecture::Transformer);
        ck.encoder_params[0].tensor = Tensor::zeros(&[3, 3]);
        assert!(ck.to_state(8).is_err());
        let (mut ck, ..) = setup(Architecture::None);
        ck.prompt_vectors = Tensor::zeros(&[5, 8]);
        assert!(ck.to_state(8).is_err());
    }
}
