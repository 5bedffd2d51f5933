use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
    /// `1 - cos`.
    Cosine,
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Euclidean => "euclidean",
            Distance::Cosine => "cosine",
        })
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            _ => Err(Error::InvalidArgument(format!("unknown distance {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub word: String,
    pub distance: f64,
}

/// Nearest vocabulary words for each context vector, closest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestWordReport {
    pub metric: Distance,
    pub rows: Vec<Vec<Neighbor>>,
}

impl fmt::Display for NearestWordReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, row) in self.rows.iter().enumerate() {
            write!(f, "{}:", i + 1)?;
            for n in row {
                write!(f, " {} ({:.4})", n.word, n.distance)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn distance(metric: Distance, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Distance::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Distance::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                (1.0 - dot(a, b) / (na * nb)).max(0.0)
            }
        }
    }
}

/// Top-`n` words per row of `v`; `n` is clamped to the vocabulary size.
/// Ties keep vocabulary order.
pub fn nearest_words(
    v: &Tensor,
    vocab: &Vocabulary,
    n: usize,
    metric: Distance,
) -> Result<NearestWordReport> {
    if vocab.is_empty() {
        return Err(Error::InvalidArgument("vocabulary is empty".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if v.shape().len() != 2 || v.cols() != vocab.width() {
        return Err(Error::Shape(format!(
            "context shape {:?} does not match vocabulary width {}",
            v.shape(),
            vocab.width()
        )));
    }
    let table = vocab.table();
    let rows = (0..v.rows())
        .map(|i| {
            let mut d: Vec<(usize, f64)> = (0..vocab.len())
                .map(|j| (j, distance(metric, v.row(i), table.row(j))))
                .collect();
            d.sort_by(|a, b| a.1.total_cmp(&b.1));
            d.into_iter()
                .take(n)
                .map(|(j, distance)| Neighbor {
                    word: vocab.words()[j].clone(),
                    distance,
                })
                .collect()
        })
        .collect();
    Ok(NearestWordReport { metric, rows })
}
