use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::dot;

/// Fixed leading columns of the feature CSV; `f0..f{d-1}` follow.
pub const FEATURE_CSV_PREFIX: [&str; 3] = ["item_id", "class_id", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageItem {
    pub id: u64,
    pub class_id: usize,
    pub split: Split,
    /// Unit-norm feature.
    pub feature: Vec<f64>,
}

/// Precomputed image features keyed by item id; plays the role of the
/// frozen visual encoder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageFeatureStore {
    width: usize,
    items: BTreeMap<u64, ImageItem>,
}

impl ImageFeatureStore {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            items: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Normalizes `raw` to unit length and stores it.
    pub fn ingest(&mut self, id: u64, class_id: usize, split: Split, raw: &[f64]) -> Result<()> {
        if raw.len() != self.width {
            return Err(Error::Shape(format!(
                "item {id}: feature width {} but store width {}",
                raw.len(),
                self.width
            )));
        }
        let norm = dot(raw, raw).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Degenerate(format!(
                "item {id}: zero or non-finite feature"
            )));
        }
        if self.items.contains_key(&id) {
            return Err(Error::Dataset(format!("duplicate item id {id}")));
        }
        let feature = raw.iter().map(|v| v / norm).collect();
        self.items.insert(
            id,
            ImageItem {
                id,
                class_id,
                split,
                feature,
            },
        );
        Ok(())
    }

    /// Unit-norm feature and label of one item.
    pub fn image_feature(&self, id: u64) -> Result<(&[f64], usize)> {
        self.items
            .get(&id)
            .map(|it| (it.feature.as_slice(), it.class_id))
            .ok_or(Error::UnknownItem(id))
    }

    pub fn get(&self, id: u64) -> Option<&ImageItem> {
        self.items.get(&id)
    }

    /// Items in ascending id order.
    pub fn items(&self) -> impl Iterator<Item = &ImageItem> {
        self.items.values()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageItem> {
        self.items.values().filter(move |it| it.split == split)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let width = headers.len().saturating_sub(FEATURE_CSV_PREFIX.len());
        let expected = feature_csv_header(width);
        if width == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Dataset(format!(
                "bad header {:?}; expected item_id,class_id,split,f0..f{{d-1}}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut store = Self::new(width);
        let mut raw = Vec::with_capacity(width);
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let bad = |what: &str| Error::Dataset(format!("row {}: bad {what}", line + 1));
            let id: u64 = record[0].parse().map_err(|_| bad("item_id"))?;
            let class_id: usize = record[1].parse().map_err(|_| bad("class_id"))?;
            let split: Split = record[2].parse()?;
            raw.clear();
            for field in record.iter().skip(FEATURE_CSV_PREFIX.len()) {
                raw.push(field.parse::<f64>().map_err(|_| bad("feature value"))?);
            }
            store.ingest(id, class_id, split, &raw)?;
        }
        Ok(store)
    }
}

pub(crate) fn feature_csv_header(width: usize) -> Vec<String> {
    FEATURE_CSV_PREFIX
        .iter()
        .map(|s| s.to_string())
        .chain((0..width).map(|i| format!("f{i}")))
        .collect()
}

/// Writes raw feature rows in the ingestion CSV format.
pub(crate) fn write_feature_csv(
    path: &Path,
    width: usize,
    rows: &[(u64, usize, Split, Vec<f64>)],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(feature_csv_header(width))?;
    for (id, class, split, feat) in rows {
        let mut rec = vec![id.to_string(), class.to_string(), split.to_string()];
        rec.extend(feat.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
