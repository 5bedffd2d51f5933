use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ImageFeatureStore, Split};
use crate::error::{Error, Result};

/// One labelled image feature; `label` is the global class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub feature: Vec<f64>,
}

/// Class vocabulary with its base/new split plus train and test samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotTask {
    pub class_names: Vec<String>,
    pub base: Vec<usize>,
    pub new: Vec<usize>,
    /// Base-class items only.
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl FewShotTask {
    pub fn new(class_names: Vec<String>, train: Vec<Sample>, test: Vec<Sample>) -> Result<Self> {
        let (base, new) = split_base_new(class_names.len())?;
        let task = Self {
            class_names,
            base,
            new,
            train,
            test,
        };
        task.validate()?;
        Ok(task)
    }

    /// Builds a task from an ingested feature store. Train-split items of
    /// new classes are dropped.
    pub fn from_store(class_names: Vec<String>, store: &ImageFeatureStore) -> Result<Self> {
        let c = class_names.len();
        let (base, _) = split_base_new(c)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for it in store.items() {
            if it.class_id >= c {
                return Err(Error::Dataset(format!(
                    "item {} has class {} but only {c} classes exist",
                    it.id, it.class_id
                )));
            }
            let s = Sample {
                id: it.id,
                label: it.class_id,
                feature: it.feature.clone(),
            };
            match it.split {
                Split::Train if base.contains(&it.class_id) => train.push(s),
                Split::Train => {}
                Split::Test => test.push(s),
            }
        }
        Self::new(class_names, train, test)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        let base: BTreeSet<_> = self.base.iter().copied().collect();
        let new: BTreeSet<_> = self.new.iter().copied().collect();
        if !base.is_disjoint(&new) {
            return Err(Error::Dataset("base and new classes overlap".into()));
        }
        if base.union(&new).copied().ne(0..c) {
            return Err(Error::Dataset(
                "base and new classes do not cover every class".into(),
            ));
        }
        if let Some(s) = self.train.iter().find(|s| !base.contains(&s.label)) {
            return Err(Error::Dataset(format!(
                "train item {} belongs to non-base class {}",
                s.id, s.label
            )));
        }
        if let Some(s) = self.test.iter().find(|s| s.label >= c) {
            return Err(Error::Dataset(format!(
                "test item {} has unknown class",
                s.id
            )));
        }
        Ok(())
    }

    pub fn names(&self, classes: &[usize]) -> Vec<String> {
        classes
            .iter()
            .map(|&i| self.class_names[i].clone())
            .collect()
    }
}

/// First `ceil(C/2)` classes are base, the rest new.
pub fn split_base_new(c: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if c < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {c}"
        )));
    }
    let nb = c.div_ceil(2);
    Ok(((0..nb).collect(), (nb..c).collect()))
}

/// A K-shot subset plus the classes that had fewer than K items.
#[derive(Clone, Debug, PartialEq)]
pub struct KShotSelection {
    pub items: Vec<Sample>,
    /// `(class, available)` for every class that fell short of K.
    pub shortfalls: Vec<(usize, usize)>,
}

/// Draws `min(K, available)` items per base class without replacement.
pub fn sample_k_shot(
    items: &[Sample],
    base: &[usize],
    k: usize,
    seed: u64,
) -> Result<KShotSelection> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut shortfalls = Vec::new();
    for &class in base {
        let mut pool: Vec<&Sample> = items.iter().filter(|s| s.label == class).collect();
        if pool.is_empty() {
            return Err(Error::Dataset(format!(
                "base class {class} has no training items"
            )));
        }
        pool.sort_by_key(|s| s.id);
        pool.shuffle(&mut rng);
        if pool.len() < k {
            log::warn!("class {class}: only {} of {k} shots available", pool.len());
            shortfalls.push((class, pool.len()));
        }
        out.extend(pool.into_iter().take(k).cloned());
    }
    Ok(KShotSelection {
        items: out,
        shortfalls,
    })
}
