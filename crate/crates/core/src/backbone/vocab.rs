use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The hand-written prompt used for zero-shot weights and template init.
pub const TEMPLATE: &str = "a photo of a";
pub const TEMPLATE_WORDS: [&str; 4] = ["a", "photo", "of", "a"];

const TOKEN_EMBEDDING_STD: f64 = 0.02;

/// Word list with a dense id space and one embedding row per word.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    table: Tensor,
}

fn filler_word(mut i: usize) -> String {
    const ONSETS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let base = ONSETS.len() * VOWELS.len();
    let mut out = String::new();
    for _ in 0..2 {
        let s = i % base;
        out.push(ONSETS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
        i /= base;
    }
    while i > 0 {
        let s = i % base;
        out.push(ONSETS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
        i /= base;
    }
    out
}

impl Vocabulary {
    /// Builds a vocabulary from explicit words and an embedding table.
    pub fn new(words: Vec<String>, table: Tensor) -> Result<Self> {
        if table.shape().len() != 2 || table.rows() != words.len() {
            return Err(Error::Shape(format!(
                "{} words but table shape {:?}",
                words.len(),
                table.shape()
            )));
        }
        if !table.is_finite() {
            return Err(Error::NonFinite("vocabulary table".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self {
            words,
            index,
            table,
        })
    }

    pub(crate) fn generate<R: Rng + ?Sized>(
        size: usize,
        width: usize,
        class_names: &[String],
        rng: &mut R,
    ) -> Result<Self> {
        let mut words: Vec<String> = Vec::new();
        let push = |w: &str, words: &mut Vec<String>| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for w in TEMPLATE_WORDS {
            push(w, &mut words);
        }
        for name in class_names {
            for w in name.split_whitespace() {
                push(w, &mut words);
            }
        }
        if size < words.len() {
            return Err(Error::Config(vec![format!(
                "vocabSize: {size} is smaller than the {} template and class words",
                words.len()
            )]));
        }
        let mut i = 0;
        while words.len() < size {
            push(&filler_word(i), &mut words);
            i += 1;
        }
        let table = Tensor::randn(&[size, width], TOKEN_EMBEDDING_STD, rng);
        Self::new(words, table)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn embedding(&self, word: &str) -> Result<&[f64]> {
        let id = self
            .id(word)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))?;
        Ok(self.table.row(id))
    }

    /// Stacks the embedding rows of `words`; an empty list gives `0 x d`.
    pub fn embed_tokens<S: AsRef<str>>(&self, words: &[S]) -> Result<Tensor> {
        let d = self.width();
        let mut data = Vec::with_capacity(words.len() * d);
        for w in words {
            data.extend_from_slice(self.embedding(w.as_ref())?);
        }
        Tensor::matrix(words.len(), d, data)
    }
}
