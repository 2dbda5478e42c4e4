//! Synthetic cross-modal classification.
//!
//! The text span encodes a query position `q`; the target modality's token
//! at `q` carries the pattern of class `c` plus noise, and `c` is the label.
//! Every other token is noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, RngStream, Scalar};
use crate::seqmodel::{modality_set, ModalityId, SegmentedSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryEncoding {
    /// Text tokens carry a random code vector for `q`.
    #[default]
    Codebook,
    /// Text tokens carry the `q`-th basis vector.
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    /// Modality names in sequence order.
    pub modalities: Vec<String>,
    pub text: String,
    /// Tokens per modality, same order as `modalities`.
    pub tokens: Vec<usize>,
    /// Modality holding the class pattern; defaults to the first non-text one.
    pub target: Option<String>,
    pub k: usize,
    pub classes: usize,
    pub noise: f64,
    pub query_encoding: QueryEncoding,
    /// Seeds the codebooks and the held-out set.
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            modalities: vec!["audio".into(), "visual".into(), "text".into()],
            text: "text".into(),
            tokens: vec![8, 8, 16],
            target: None,
            k: 32,
            classes: 8,
            noise: 0.1,
            query_encoding: QueryEncoding::Codebook,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Scalar> {
    pub seq: SegmentedSequence<T>,
    pub label: usize,
    pub query: usize,
}

impl<T: Scalar> Sample<T> {
    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            seq: self.seq.cast(),
            label: self.label,
            query: self.query,
        }
    }
}

/// A task instance with its codebooks fixed.
#[derive(Debug, Clone)]
pub struct Task {
    spec: TaskSpec,
    modalities: Vec<ModalityId>,
    target: usize,
    query_codes: Matrix<f64>,
    patterns: Matrix<f64>,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let names: Vec<&str> = spec.modalities.iter().map(String::as_str).collect();
        let modalities = modality_set(&names, &spec.text)?;
        if spec.tokens.len() != modalities.len() {
            return Err(Error::Config(format!(
                "{} token counts for {} modalities",
                spec.tokens.len(),
                modalities.len()
            )));
        }
        let target = match &spec.target {
            Some(t) => modalities
                .iter()
                .position(|m| &m.name == t)
                .ok_or_else(|| Error::UnknownModality(t.clone()))?,
            None => modalities
                .iter()
                .position(|m| !m.is_text)
                .ok_or_else(|| Error::Config("task needs a non-text modality".into()))?,
        };
        if modalities[target].is_text {
            return Err(Error::Config("target modality must be non-text".into()));
        }
        let positions = spec.tokens[target];
        if spec.classes < 2 || spec.classes > positions {
            return Err(Error::Config(format!(
                "need 2 <= classes <= target tokens, got {} classes and {positions} tokens",
                spec.classes
            )));
        }
        let text = modalities.iter().position(|m| m.is_text).expect("validated");
        if spec.tokens[text] == 0 {
            return Err(Error::Config("text span must be non-empty".into()));
        }
        if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and >= 0".into()));
        }
        if spec.query_encoding == QueryEncoding::OneHot && spec.k < positions {
            return Err(Error::Config(format!("one-hot queries need k >= {positions}")));
        }
        let root = RngStream::new(spec.seed, 2);
        let query_codes = match spec.query_encoding {
            QueryEncoding::Codebook => root.derive(0).normal_matrix(positions, spec.k, 1.0),
            QueryEncoding::OneHot => Matrix::from_fn(positions, spec.k, |r, c| if r == c { 1.0 } else { 0.0 }),
        };
        let patterns = root.derive(1).normal_matrix(spec.classes, spec.k, 1.0);
        Ok(Self {
            spec,
            modalities,
            target,
            query_codes,
            patterns,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn modalities(&self) -> &[ModalityId] {
        &self.modalities
    }

    pub fn target(&self) -> &ModalityId {
        &self.modalities[self.target]
    }

    pub fn patterns(&self) -> &Matrix<f64> {
        &self.patterns
    }

    pub fn query_codes(&self) -> &Matrix<f64> {
        &self.query_codes
    }

    /// Draws one labelled sequence.
    pub fn sample<T: Scalar>(&self, rng: &mut RngStream) -> Sample<T> {
        let k = self.spec.k;
        let sigma = self.spec.noise;
        let label = rng.index(self.spec.classes);
        let query = rng.index(self.spec.tokens[self.target]);
        let mut parts = Vec::with_capacity(self.modalities.len());
        for (i, m) in self.modalities.iter().enumerate() {
            let n = self.spec.tokens[i];
            let mut block = rng.normal_matrix::<f64>(n, k, sigma);
            if m.is_text {
                for r in 0..n {
                    for c in 0..k {
                        block.set(r, c, block.get(r, c) + self.query_codes.get(query, c));
                    }
                }
            } else if i == self.target {
                for c in 0..k {
                    block.set(query, c, block.get(query, c) + self.patterns.get(label, c));
                }
            }
            parts.push((m.clone(), block.cast::<T>()));
        }
        Sample {
            seq: SegmentedSequence::from_parts(parts).expect("generator layout"),
            label,
            query,
        }
    }

    pub fn samples<T: Scalar>(&self, n: usize, rng: &mut RngStream) -> Vec<Sample<T>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Fixed evaluation set, independent of any run seed.
    pub fn held_out<T: Scalar>(&self, n: usize) -> Vec<Sample<T>> {
        self.samples(n, &mut RngStream::new(self.spec.seed, 3))
    }
}
