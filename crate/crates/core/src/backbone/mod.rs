//! The frozen dual-encoder stand-in: token embeddings, a small text
//! transformer, and a store of precomputed image features.

mod image_store;
mod text_encoder;
mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub(crate) use image_store::write_feature_csv;
pub use image_store::{ImageFeatureStore, ImageItem, Split, FEATURE_CSV_PREFIX};
pub use text_encoder::{BoundTextEncoder, FrozenTextEncoder};
pub use vocab::{Vocabulary, TEMPLATE, TEMPLATE_WORDS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Everything needed to rebuild a backbone bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BackboneConfig {
    pub seed: u64,
    pub width: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
}

fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_max_context() -> usize {
    16
}
fn default_vocab_size() -> usize {
    256
}

impl BackboneConfig {
    pub fn new(seed: u64, width: usize) -> Self {
        Self {
            seed,
            width,
            layers: default_layers(),
            heads: default_heads(),
            max_context: default_max_context(),
            vocab_size: default_vocab_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.width == 0 || !self.width.is_multiple_of(2) {
            errs.push(format!(
                "width: must be even and positive, got {}",
                self.width
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads.max(1)) {
            errs.push(format!(
                "heads: {} must divide width {}",
                self.heads, self.width
            ));
        }
        if self.layers == 0 {
            errs.push("layers: must be at least 1".into());
        }
        if self.max_context < 2 {
            errs.push("maxContext: must be at least 2".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Parameter-frozen text side of the model plus its vocabulary.
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    vocab: Vocabulary,
    text: FrozenTextEncoder,
}

impl FrozenBackbone {
    /// Seeds the vocabulary table and text encoder. The vocabulary holds
    /// the template words, every word of `class_names`, then filler words
    /// up to `vocab_size`.
    pub fn new(config: BackboneConfig, class_names: &[String]) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vocab = Vocabulary::generate(config.vocab_size, config.width, class_names, &mut rng)?;
        let text = FrozenTextEncoder::init(
            config.width,
            config.layers,
            config.heads,
            config.max_context,
            &mut rng,
        );
        Ok(Self {
            config,
            vocab,
            text,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn text_encoder(&self) -> &FrozenTextEncoder {
        &self.text
    }

    /// Always true; the backbone exposes no mutable parameter access.
    pub fn is_frozen(&self) -> bool {
        true
    }

    /// Token embeddings of a class name (one row per word).
    pub fn class_tokens(&self, name: &str) -> Result<Tensor> {
        let words: Vec<&str> = name.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::InvalidArgument("empty class name".into()));
        }
        self.vocab.embed_tokens(&words)
    }

    /// Every frozen tensor, in a fixed order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![self.vocab.table()];
        out.extend(self.text.parameters());
        out
    }

    /// SHA-256 over the bit patterns of every parameter.
    pub fn checksum(&self) -> String {
        checksum(self.parameters())
    }
}

pub(crate) fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
