//! Modality-segmented token sequences and partial-modality routing.
//!
//! A sequence is one token matrix (`L x k`) with contiguous, ordered spans,
//! one per modality. Routing masks decide which spans feed the adapter
//! pathway; the frozen pathway always sees every token.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Scalar};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityId {
    pub name: String,
    pub index: usize,
    pub is_text: bool,
}

impl ModalityId {
    pub fn new(name: impl Into<String>, index: usize, is_text: bool) -> Self {
        Self {
            name: name.into(),
            index,
            is_text,
        }
    }
}

/// Builds an ordered modality list, checking that names are unique and that
/// exactly one modality is the text modality.
pub fn modality_set(names: &[&str], text: &str) -> Result<Vec<ModalityId>> {
    let mods: Vec<ModalityId> = names
        .iter()
        .enumerate()
        .map(|(i, n)| ModalityId::new(*n, i, *n == text))
        .collect();
    validate_modalities(&mods)?;
    Ok(mods)
}

pub fn validate_modalities(mods: &[ModalityId]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (i, m) in mods.iter().enumerate() {
        if m.index != i {
            return Err(Error::Layout(format!(
                "modality `{}` has index {} at position {i}",
                m.name, m.index
            )));
        }
        if !seen.insert(m.name.as_str()) {
            return Err(Error::Layout(format!("duplicate modality `{}`", m.name)));
        }
    }
    let texts = mods.iter().filter(|m| m.is_text).count();
    if texts != 1 {
        return Err(Error::Layout(format!(
            "expected exactly one text modality, found {texts}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpan {
    pub modality: ModalityId,
    pub start: usize,
    pub len: usize,
}

impl ModalitySpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedSequence<T: Scalar = f64> {
    tokens: Matrix<T>,
    spans: Vec<ModalitySpan>,
}

impl<T: Scalar> SegmentedSequence<T> {
    pub fn new(tokens: Matrix<T>, spans: Vec<ModalitySpan>) -> Result<Self> {
        let seq = Self { tokens, spans };
        seq.validate()?;
        Ok(seq)
    }

    /// Concatenates per-modality token blocks in the given order.
    pub fn from_parts(parts: Vec<(ModalityId, Matrix<T>)>) -> Result<Self> {
        let Some(cols) = parts.first().map(|(_, m)| m.cols()) else {
            return Err(Error::Layout("sequence needs at least one span".into()));
        };
        let mut spans = Vec::with_capacity(parts.len());
        let mut start = 0;
        for (m, block) in &parts {
            if block.cols() != cols {
                return Err(Error::Shape {
                    op: "from_parts",
                    left: (start, cols),
                    right: block.shape(),
                });
            }
            spans.push(ModalitySpan {
                modality: m.clone(),
                start,
                len: block.rows(),
            });
            start += block.rows();
        }
        let blocks: Vec<&Matrix<T>> = parts.iter().map(|(_, b)| b).collect();
        Self::new(Matrix::concat_rows(&blocks)?, spans)
    }

    /// Checks span coverage, ordering and modality uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.spans.is_empty() {
            return Err(Error::Layout("sequence needs at least one span".into()));
        }
        let mut pos = 0;
        let mut names = BTreeSet::new();
        for s in &self.spans {
            if s.start != pos {
                return Err(Error::Layout(format!(
                    "span `{}` starts at {} but previous span ended at {pos}",
                    s.modality.name, s.start
                )));
            }
            if !names.insert(s.modality.name.as_str()) {
                return Err(Error::Layout(format!("modality `{}` appears twice", s.modality.name)));
            }
            pos = s.end();
        }
        if pos != self.tokens.rows() {
            return Err(Error::Layout(format!(
                "spans cover {pos} rows of {}",
                self.tokens.rows()
            )));
        }
        if self.spans.iter().filter(|s| s.modality.is_text).count() > 1 {
            return Err(Error::Layout("more than one text span".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> &Matrix<T> {
        &self.tokens
    }

    pub fn spans(&self) -> &[ModalitySpan] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn span(&self, name: &str) -> Option<&ModalitySpan> {
        self.spans.iter().find(|s| s.modality.name == name)
    }

    pub fn text_span(&self) -> Option<&ModalitySpan> {
        self.spans.iter().find(|s| s.modality.is_text)
    }

    pub fn modalities(&self) -> Vec<&ModalityId> {
        self.spans.iter().map(|s| &s.modality).collect()
    }

    /// The `N_i x k` block of one modality.
    pub fn slice_modality(&self, name: &str) -> Result<Matrix<T>> {
        let span = self
            .span(name)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))?;
        self.tokens.slice_rows(span.start, span.len)
    }

    pub fn with_tokens(&self, tokens: Matrix<T>) -> Result<Self> {
        Self::new(tokens, self.spans.clone())
    }

    pub fn cast<U: Scalar>(&self) -> SegmentedSequence<U> {
        SegmentedSequence {
            tokens: self.tokens.cast(),
            spans: self.spans.clone(),
        }
    }
}

/// Per-modality switch for the adapter pathway.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingMask {
    pass_through_adapter: BTreeMap<String, bool>,
}

impl RoutingMask {
    /// Every modality passes: regular full-modality inference.
    pub fn full(all: &[ModalityId]) -> Self {
        Self {
            pass_through_adapter: all.iter().map(|m| (m.name.clone(), true)).collect(),
        }
    }

    pub fn passes(&self, name: &str) -> Result<bool> {
        self.pass_through_adapter
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    pub fn is_full(&self) -> bool {
        self.pass_through_adapter.values().all(|&p| p)
    }

    pub fn selected(&self) -> Vec<&str> {
        self.pass_through_adapter
            .iter()
            .filter(|(_, &p)| p)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Errors unless the mask covers every modality of `seq`.
    pub fn check_covers<T: Scalar>(&self, seq: &SegmentedSequence<T>) -> Result<()> {
        for s in seq.spans() {
            self.passes(&s.modality.name)?;
        }
        Ok(())
    }
}

/// Mask passing exactly the `selected` modalities.
pub fn make_routing_mask(selected: &[&str], all: &[ModalityId]) -> Result<RoutingMask> {
    for name in selected {
        if !all.iter().any(|m| m.name == *name) {
            return Err(Error::UnknownModality(name.to_string()));
        }
    }
    Ok(RoutingMask {
        pass_through_adapter: all
            .iter()
            .map(|m| (m.name.clone(), selected.contains(&m.name.as_str())))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn avt() -> Vec<ModalityId> {
        modality_set(&["audio", "visual", "text"], "text").unwrap()
    }

    fn sample() -> SegmentedSequence<f64> {
        let m = avt();
        let tokens = Matrix::from_fn(9, 3, |r, c| (r * 3 + c) as f64);
        SegmentedSequence::from_parts(vec![
            (m[0].clone(), tokens.slice_rows(0, 2).unwrap()),
            (m[1].clone(), tokens.slice_rows(2, 3).unwrap()),
            (m[2].clone(), tokens.slice_rows(5, 4).unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn slice_by_span_arithmetic() {
        let seq = sample();
        assert_eq!(
            seq.slice_modality("visual").unwrap(),
            seq.tokens().slice_rows(2, 3).unwrap()
        );
        assert!(matches!(seq.slice_modality("point"), Err(Error::UnknownModality(_))));
    }

    #[test]
    fn empty_span_slices_to_zero_rows() {
        let m = avt();
        let seq = SegmentedSequence::<f64>::from_parts(vec![
            (m[0].clone(), Matrix::zeros(0, 3)),
            (m[2].clone(), Matrix::filled(2, 3, 1.0)),
        ])
        .unwrap();
        assert_eq!(seq.slice_modality("audio").unwrap().shape(), (0, 3));
    }

    #[test]
    fn slices_concatenate_back_bitwise() {
        let seq = sample();
        let parts: Vec<Matrix<f64>> = ["audio", "visual", "text"]
            .iter()
            .map(|n| seq.slice_modality(n).unwrap())
            .collect();
        let refs: Vec<&Matrix<f64>> = parts.iter().collect();
        assert!(Matrix::concat_rows(&refs).unwrap().bitwise_eq(seq.tokens()));
    }

    #[test]
    fn validator_rejects_gaps_and_bad_coverage() {
        let m = avt();
        let gap = vec![
            ModalitySpan {
                modality: m[0].clone(),
                start: 0,
                len: 2,
            },
            ModalitySpan {
                modality: m[2].clone(),
                start: 3,
                len: 2,
            },
        ];
        assert!(SegmentedSequence::new(Matrix::<f64>::zeros(5, 2), gap).is_err());
        let short = vec![ModalitySpan {
            modality: m[0].clone(),
            start: 0,
            len: 2,
        }];
        assert!(SegmentedSequence::new(Matrix::<f64>::zeros(5, 2), short).is_err());
        let dup = vec![
            ModalitySpan {
                modality: m[0].clone(),
                start: 0,
                len: 2,
            },
            ModalitySpan {
                modality: m[0].clone(),
                start: 2,
                len: 3,
            },
        ];
        assert!(SegmentedSequence::new(Matrix::<f64>::zeros(5, 2), dup).is_err());
    }

    #[test]
    fn modality_set_needs_one_text() {
        assert!(modality_set(&["audio", "visual"], "text").is_err());
        assert!(modality_set(&["audio", "audio", "text"], "text").is_err());
    }

    #[test]
    fn routing_masks() {
        let all = avt();
        let text_only = make_routing_mask(&["text"], &all).unwrap();
        assert!(!text_only.passes("audio").unwrap());
        assert!(!text_only.passes("visual").unwrap());
        assert!(text_only.passes("text").unwrap());
        assert!(make_routing_mask(&["audio", "visual", "text"], &all).unwrap().is_full());
        assert_eq!(
            make_routing_mask(&["audio", "visual", "text"], &all).unwrap(),
            RoutingMask::full(&all)
        );
        assert!(matches!(
            make_routing_mask(&["point"], &all),
            Err(Error::UnknownModality(_))
        ));
    }
}
