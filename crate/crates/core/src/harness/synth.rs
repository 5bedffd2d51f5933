use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    write_feature_csv, BackboneConfig, FrozenBackbone, ImageFeatureStore, Split,
};
use crate::error::{Error, Result};
use crate::prompt::Mode;
use crate::prompt::{Architecture, EncoderConfig, PromptContext, PromptEncoder};
use crate::tensor::Tensor;
use crate::train::{build_class_weights, FewShotTask, PromptState};

pub const TASK_FILE: &str = "task.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const ORACLE_FILE: &str = "oracle.json";
pub const TASK_VERSION: u32 = 1;

const NOUNS: [&str; 40] = [
    "cat", "dog", "horse", "bird", "fish", "frog", "deer", "sheep", "cow", "bear", "car", "truck",
    "ship", "plane", "train", "bicycle", "tree", "flower", "mushroom", "apple", "orange", "banana",
    "chair", "table", "lamp", "clock", "phone", "guitar", "piano", "bottle", "cup", "house",
    "bridge", "castle", "tower", "mountain", "river", "beach", "forest", "desert",
];

/// Parameters of a generated few-shot task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "d")]
    pub width: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub oracle_prompt_seed: u64,
    pub backbone_seed: u64,
    pub dataset_seed: u64,
    /// Length of the hidden prompt.
    #[serde(rename = "M", default = "default_m")]
    pub m: usize,
    #[serde(default = "default_oracle_std")]
    pub oracle_prompt_std: f64,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_context")]
    pub max_context: usize,
}

fn default_m() -> usize {
    4
}
fn default_oracle_std() -> f64 {
    0.02
}
fn default_vocab() -> usize {
    256
}
fn default_context() -> usize {
    16
}

impl SyntheticTaskSpec {
    pub fn new(classes: usize, width: usize, k: usize, noise_sigma: f64) -> Self {
        Self {
            classes,
            width,
            k,
            test_per_class: 20,
            noise_sigma,
            oracle_prompt_seed: 1,
            backbone_seed: 0,
            dataset_seed: 2,
            m: default_m(),
            oracle_prompt_std: default_oracle_std(),
            vocab_size: default_vocab(),
            max_context: default_context(),
        }
    }

    /// Reads a spec file. Parse failures are config errors.
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path).map_err(|e| match e {
            Error::Json(j) => Error::Config(vec![j.to_string()]),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.classes < 2 {
            errs.push(format!("C: need at least 2 classes, got {}", self.classes));
        }
        if self.k == 0 {
            errs.push("K: must be positive".into());
        }
        if self.test_per_class == 0 {
            errs.push("testPerClass: must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            errs.push(format!(
                "noiseSigma: must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if self.m == 0 {
            errs.push("M: must be positive".into());
        }
        if !(self.oracle_prompt_std > 0.0 && self.oracle_prompt_std.is_finite()) {
            errs.push(format!(
                "oraclePromptStd: must be positive, got {}",
                self.oracle_prompt_std
            ));
        }
        if let Err(Error::Config(mut e)) = self.backbone_config().validate() {
            errs.append(&mut e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let mut b = BackboneConfig::new(self.backbone_seed, self.width);
        b.vocab_size = self.vocab_size;
        b.max_context = self.max_context;
        b
    }
}

/// `C` distinct single-word class names.
pub fn class_names(c: usize) -> Vec<String> {
    (0..c)
        .map(|i| {
            let w = NOUNS[i % NOUNS.len()];
            match i / NOUNS.len() {
                0 => w.to_string(),
                r => format!("{w}{}", r + 1),
            }
        })
        .collect()
}

/// Describes a task directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TaskManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub backbone: BackboneConfig,
    pub features: String,
    pub spec: SyntheticTaskSpec,
}

/// Hidden ground-truth prompt. Diagnostics only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct OracleRecord {
    pub prompt: Tensor,
}

/// An in-memory generated task.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub manifest: TaskManifest,
    pub backbone: FrozenBackbone,
    pub rows: Vec<(u64, usize, Split, Vec<f64>)>,
    pub oracle: OracleRecord,
}

impl SyntheticTask {
    pub fn store(&self) -> Result<ImageFeatureStore> {
        let mut store = ImageFeatureStore::new(self.manifest.backbone.width);
        for (id, class, split, f) in &self.rows {
            store.ingest(*id, *class, *split, f)?;
        }
        Ok(store)
    }

    pub fn task(&self) -> Result<FewShotTask> {
        FewShotTask::from_store(self.manifest.class_names.clone(), &self.store()?)
    }
}

/// Weights built by plain prompt `p` for `names`: `encode([p; c_i])`.
pub fn prompt_weights(backbone: &FrozenBackbone, p: &Tensor, names: &[String]) -> Result<Tensor> {
    let state = PromptState {
        context: PromptContext::new(p.clone())?,
        encoder: PromptEncoder::new(
            EncoderConfig::new(Architecture::None),
            backbone.width(),
            p.rows(),
        )?,
    };
    build_class_weights(backbone, &state, names, Mode::Eval)
}

/// Samples the oracle prompt, encodes class prototypes, and draws noisy
/// unit features around them: `K` train items per base class and
/// `testPerClass` test items per class.
pub fn generate_synthetic_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let names = class_names(spec.classes);
    let backbone = FrozenBackbone::new(spec.backbone_config(), &names)?;
    let mut orng = ChaCha8Rng::seed_from_u64(spec.oracle_prompt_seed);
    let prompt = Tensor::randn(&[spec.m, spec.width], spec.oracle_prompt_std, &mut orng);
    let protos = prompt_weights(&backbone, &prompt, &names)?;

    let nb = spec.classes.div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.dataset_seed);
    let mut rows = Vec::new();
    let mut id = 0u64;
    let mut draw = |class: usize, split: Split, rows: &mut Vec<_>| -> Result<()> {
        let noise = Tensor::randn(&[spec.width], spec.noise_sigma, &mut rng);
        let f: Vec<f64> = protos
            .row(class)
            .iter()
            .zip(noise.data())
            .map(|(p, n)| p + n)
            .collect();
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate(format!(
                "feature for class {class} has zero norm"
            )));
        }
        rows.push((id, class, split, f.iter().map(|x| x / norm).collect()));
        id += 1;
        Ok(())
    };
    for class in 0..nb {
        for _ in 0..spec.k {
            draw(class, Split::Train, &mut rows)?;
        }
    }
    for class in 0..spec.classes {
        for _ in 0..spec.test_per_class {
            draw(class, Split::Test, &mut rows)?;
        }
    }
    Ok(SyntheticTask {
        manifest: TaskManifest {
            version: TASK_VERSION,
            class_names: names,
            backbone: spec.backbone_config(),
            features: FEATURES_FILE.into(),
            spec: spec.clone(),
        },
        backbone,
        rows,
        oracle: OracleRecord { prompt },
    })
}

/// Generates a task and writes it to `outdir`. Returns the written paths.
pub fn write_synthetic_task(spec: &SyntheticTaskSpec, outdir: &Path) -> Result<Vec<PathBuf>> {
    let task = generate_synthetic_task(spec)?;
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let features = outdir.join(FEATURES_FILE);
    write_feature_csv(&features, spec.width, &task.rows)?;
    let manifest = outdir.join(TASK_FILE);
    write_json(&manifest, &task.manifest)?;
    let oracle = outdir.join(ORACLE_FILE);
    write_json(&oracle, &task.oracle)?;
    Ok(vec![manifest, features, oracle])
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A task directory loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedTask {
    pub manifest: TaskManifest,
    pub backbone: FrozenBackbone,
    pub task: FewShotTask,
}

/// Reads `task.json` and its feature file from `dir`. The oracle file is
/// never opened.
pub fn load_task_dir(dir: &Path) -> Result<LoadedTask> {
    let manifest: TaskManifest = read_json(&dir.join(TASK_FILE))?;
    if manifest.version != TASK_VERSION {
        return Err(Error::Dataset(format!(
            "task version {} is not supported (expected {TASK_VERSION})",
            manifest.version
        )));
    }
    let backbone = FrozenBackbone::new(manifest.backbone.clone(), &manifest.class_names)?;
    let store = ImageFeatureStore::read_csv(&dir.join(&manifest.features))?;
    if store.width() != backbone.width() {
        return Err(Error::Dataset(format!(
            "features have width {} but the backbone has {}",
            store.width(),
            backbone.width()
        )));
    }
    let task = FewShotTask::from_store(manifest.class_names.clone(), &store)?;
    Ok(LoadedTask {
        manifest,
        backbone,
        task,
    })
}
