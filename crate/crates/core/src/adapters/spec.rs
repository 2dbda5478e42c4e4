use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::ModalityId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One shared `(A, B)` pair over every token.
    Lora,
    /// `n` full LoRA modules over every token, summed.
    MultipleLora,
    /// One `(A_i, B_i)` pair per modality, each applied only to its own span.
    UnimodalLora,
    /// Per-modality `A_i` with one uni-branch `B`, plus a shared LoRA.
    UniPlusMm,
    /// `UniPlusMm` with a per-token logistic gate between the branches.
    UniPlusMmGated,
    /// Per-modality `A_i`, rank-space cross-modal interaction, one shared `B`.
    Moka,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Lora,
        Variant::MultipleLora,
        Variant::UnimodalLora,
        Variant::UniPlusMm,
        Variant::UniPlusMmGated,
        Variant::Moka,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::MultipleLora => "multiple_lora",
            Variant::UnimodalLora => "unimodal_lora",
            Variant::UniPlusMm => "uni_plus_mm",
            Variant::UniPlusMmGated => "uni_plus_mm_gated",
            Variant::Moka => "moka",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| Error::Spec(format!("unknown variant `{s}`")))
    }
}

/// How MokA lets modalities interact in rank space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossMode {
    /// No interaction ("MokA w/o CA").
    None,
    /// Non-text tokens attend over text tokens.
    TaskCentric,
    /// Text tokens attend over non-text tokens.
    ReversedQuery,
    /// Mean text token added to every non-text token.
    Naive,
    /// Task-centric attention with learned rank-space projections.
    Projected,
    /// Task-centric attention plus one non-text to non-text attention term.
    /// `key` defaults to the first other non-text modality.
    ExtraPair { query: String, key: Option<String> },
}

impl CrossMode {
    pub fn is_none(&self) -> bool {
        matches!(self, CrossMode::None)
    }

    pub fn label(&self) -> String {
        match self {
            CrossMode::None => "none".into(),
            CrossMode::TaskCentric => "task_centric".into(),
            CrossMode::ReversedQuery => "reversed_query".into(),
            CrossMode::Naive => "naive".into(),
            CrossMode::Projected => "projected".into(),
            CrossMode::ExtraPair { query, key: None } => format!("extra_pair:{query}"),
            CrossMode::ExtraPair { query, key: Some(k) } => format!("extra_pair:{query}:{k}"),
        }
    }

    /// Every mode, with extra-pair instantiated for each non-text query.
    pub fn all_for(modalities: &[ModalityId]) -> Vec<CrossMode> {
        let mut modes = vec![
            CrossMode::None,
            CrossMode::TaskCentric,
            CrossMode::ReversedQuery,
            CrossMode::Naive,
            CrossMode::Projected,
        ];
        let nontext: Vec<&ModalityId> = modalities.iter().filter(|m| !m.is_text).collect();
        if nontext.len() >= 2 {
            for m in nontext {
                modes.push(CrossMode::ExtraPair {
                    query: m.name.clone(),
                    key: None,
                });
            }
        }
        modes
    }
}

impl fmt::Display for CrossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for CrossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Ok(match norm.as_str() {
            "none" => CrossMode::None,
            "task_centric" => CrossMode::TaskCentric,
            "reversed_query" => CrossMode::ReversedQuery,
            "naive" => CrossMode::Naive,
            "projected" => CrossMode::Projected,
            other => {
                let mut parts = other.split(':');
                match (parts.next(), parts.next(), parts.next(), parts.next()) {
                    (Some("extra_pair"), Some(q), key, None) if !q.is_empty() => CrossMode::ExtraPair {
                        query: q.to_string(),
                        key: key.map(str::to_string),
                    },
                    _ => return Err(Error::Spec(format!("unknown cross mode `{s}`"))),
                }
            }
        })
    }
}

/// Everything needed to construct one adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub variant: Variant,
    pub rank: usize,
    /// Interaction strength per non-text modality; missing entries use 1.0.
    pub lambdas: BTreeMap<String, f64>,
    pub cross_mode: CrossMode,
    /// Strength of the extra non-text pair term.
    pub extra_lambda: f64,
    /// Strength of the text update in reversed-query mode.
    pub text_lambda: f64,
    pub seed: u64,
}

impl AdapterSpec {
    pub fn new(variant: Variant, rank: usize) -> Self {
        Self {
            variant,
            rank,
            lambdas: BTreeMap::new(),
            cross_mode: if variant == Variant::Moka {
                CrossMode::TaskCentric
            } else {
                CrossMode::None
            },
            extra_lambda: 1.0,
            text_lambda: 1.0,
            seed: 0,
        }
    }

    pub fn moka(rank: usize, cross_mode: CrossMode) -> Self {
        Self {
            cross_mode,
            ..Self::new(Variant::Moka, rank)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lambda(mut self, modality: &str, lambda: f64) -> Self {
        self.lambdas.insert(modality.to_string(), lambda);
        self
    }

    pub fn lambda(&self, modality: &str) -> f64 {
        self.lambdas.get(modality).copied().unwrap_or(1.0)
    }

    /// Short label such as `moka[task_centric]` or `lora`.
    pub fn label(&self) -> String {
        if self.variant == Variant::Moka {
            format!("moka[{}]", self.cross_mode)
        } else {
            self.variant.to_string()
        }
    }

    /// Resolves the key modality of an extra-pair mode.
    pub fn extra_pair(&self, modalities: &[ModalityId]) -> Result<Option<(String, String)>> {
        let CrossMode::ExtraPair { query, key } = &self.cross_mode else {
            return Ok(None);
        };
        let find = |name: &str| {
            modalities
                .iter()
                .find(|m| m.name == name)
                .ok_or_else(|| Error::UnknownModality(name.to_string()))
        };
        let q = find(query)?;
        if q.is_text {
            return Err(Error::Spec("extra-pair query must be a non-text modality".into()));
        }
        let k = match key {
            Some(k) => find(k)?,
            None => modalities
                .iter()
                .find(|m| !m.is_text && m.name != q.name)
                .ok_or_else(|| Error::Spec("extra-pair needs two non-text modalities".into()))?,
        };
        if k.is_text || k.name == q.name {
            return Err(Error::Spec(
                "extra-pair key must be a different non-text modality".into(),
            ));
        }
        Ok(Some((q.name.clone(), k.name.clone())))
    }

    pub fn validate(&self, in_dim: usize, out_dim: usize, modalities: &[ModalityId]) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Spec("rank must be positive".into()));
        }
        if self.rank * 2 > in_dim.min(out_dim) {
            return Err(Error::Spec(format!(
                "rank {} exceeds half of min(d, k) = {}",
                self.rank,
                in_dim.min(out_dim)
            )));
        }
        if self.variant != Variant::Moka && !self.cross_mode.is_none() {
            return Err(Error::Spec(format!(
                "cross mode `{}` requires the moka variant",
                self.cross_mode
            )));
        }
        for (name, &lam) in &self.lambdas {
            let m = modalities
                .iter()
                .find(|m| &m.name == name)
                .ok_or_else(|| Error::UnknownModality(name.clone()))?;
            if m.is_text {
                return Err(Error::Spec(format!("lambda given for text modality `{name}`")));
            }
            if !(lam >= 0.0 && lam.is_finite()) {
                return Err(Error::Spec(format!("lambda for `{name}` must be finite and >= 0")));
            }
        }
        for (what, v) in [("extra_lambda", self.extra_lambda), ("text_lambda", self.text_lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Spec(format!("{what} must be finite and >= 0")));
            }
        }
        self.extra_pair(modalities)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::modality_set;

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("dora".parse::<Variant>().is_err());
        let mods = modality_set(&["audio", "visual", "text"], "text").unwrap();
        for m in CrossMode::all_for(&mods) {
            assert_eq!(m.label().parse::<CrossMode>().unwrap(), m);
        }
    }

    #[test]
    fn rank_bound_and_mode_restrictions() {
        let mods = modality_set(&["audio", "text"], "text").unwrap();
        assert!(AdapterSpec::new(Variant::Lora, 4).validate(8, 8, &mods).is_ok());
        assert!(AdapterSpec::new(Variant::Lora, 5).validate(8, 8, &mods).is_err());
        let mut bad = AdapterSpec::new(Variant::Lora, 2);
        bad.cross_mode = CrossMode::Naive;
        assert!(bad.validate(8, 8, &mods).is_err());
        assert!(AdapterSpec::new(Variant::Moka, 2)
            .with_lambda("text", 1.0)
            .validate(8, 8, &mods)
            .is_err());
        assert!(AdapterSpec::new(Variant::Moka, 2)
            .with_lambda("audio", -1.0)
            .validate(8, 8, &mods)
            .is_err());
    }

    #[test]
    fn extra_pair_key_resolution() {
        let mods = modality_set(&["audio", "visual", "text"], "text").unwrap();
        let spec = AdapterSpec::moka(2, "extra_pair:visual".parse().unwrap());
        assert_eq!(spec.extra_pair(&mods).unwrap(), Some(("visual".into(), "audio".into())));
        let bad = AdapterSpec::moka(2, "extra_pair:text".parse().unwrap());
        assert!(bad.validate(8, 8, &mods).is_err());
    }
}
