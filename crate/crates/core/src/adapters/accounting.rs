//! Closed-form matrix, parameter and FLOP counts.
//!
//! FLOPs follow the tape's cost model: a product of `m x k` by `k x n`
//! costs `2mkn`, a softmax 5 per entry, a logistic 4 per entry, any other
//! arithmetic 1 per output entry; slicing, concatenation and transposes
//! are free.

use crate::error::Result;
use crate::seqmodel::ModalitySpan;

use super::spec::{AdapterSpec, CrossMode, Variant};

/// `(#A, #B)` for `n` modalities.
pub fn count_matrices(spec: &AdapterSpec, n: usize) -> (usize, usize) {
    match spec.variant {
        Variant::Lora => (1, 1),
        Variant::MultipleLora | Variant::UnimodalLora => (n, n),
        Variant::UniPlusMm | Variant::UniPlusMmGated => (n + 1, 2),
        Variant::Moka => (n, 1),
    }
}

/// Trainable entries of one adapter with `B: d x r` and `A: r x k`.
pub fn param_count(spec: &AdapterSpec, d: usize, k: usize, n: usize) -> usize {
    let r = spec.rank;
    let lora = r * (k + d);
    match spec.variant {
        Variant::Lora => lora,
        Variant::MultipleLora | Variant::UnimodalLora => n * lora,
        Variant::UniPlusMm => (n + 1) * r * k + 2 * d * r,
        Variant::UniPlusMmGated => (n + 1) * r * k + 2 * d * r + 2 * r + 1,
        Variant::Moka => {
            let base = d * r + n * r * k;
            if spec.cross_mode == CrossMode::Projected {
                base + (n - 1) * r * r + 2 * r * r
            } else {
                base
            }
        }
    }
}

/// FLOPs of one `Δ` evaluation with every modality routed through the adapter.
pub fn flop_count(spec: &AdapterSpec, d: usize, k: usize, spans: &[ModalitySpan]) -> Result<u64> {
    let r = spec.rank as u64;
    let (d, k) = (d as u64, k as u64);
    let l: u64 = spans.iter().map(|s| s.len as u64).sum();
    let n = spans.len() as u64;
    let base = 2 * l * r * (k + d);
    let cost = match spec.variant {
        Variant::Lora | Variant::UnimodalLora => base,
        Variant::MultipleLora => n * base + n.saturating_sub(1) * l * d,
        Variant::UniPlusMm => 2 * base + l * d,
        Variant::UniPlusMmGated => 2 * base + 4 * l * r + 7 * l + 3 * l * d,
        Variant::Moka => base + moka_interaction_flops(spec, spans)?,
    };
    Ok(cost)
}

fn moka_interaction_flops(spec: &AdapterSpec, spans: &[ModalitySpan]) -> Result<u64> {
    let r = spec.rank as u64;
    let nt = spans.iter().find(|s| s.modality.is_text).map_or(0, |s| s.len as u64);
    let live: Vec<&ModalitySpan> = spans.iter().filter(|s| !s.modality.is_text && s.len > 0).collect();
    let attn = |nq: u64, nk: u64| 4 * nq * nk * r + 5 * nq * nk;
    let task_centric: u64 = live.iter().map(|s| attn(s.len as u64, nt) + s.len as u64 * r).sum();
    Ok(match &spec.cross_mode {
        CrossMode::None => 0,
        CrossMode::TaskCentric => task_centric,
        CrossMode::Naive => live.iter().map(|s| nt * r + r + s.len as u64 * r).sum(),
        CrossMode::Projected => {
            if live.is_empty() {
                0
            } else {
                task_centric + 4 * nt * r * r + live.iter().map(|s| 2 * s.len as u64 * r * r).sum::<u64>()
            }
        }
        CrossMode::ReversedQuery => {
            let m: u64 = live.iter().map(|s| s.len as u64).sum();
            if m == 0 {
                0
            } else {
                attn(nt, m) + nt * r
            }
        }
        CrossMode::ExtraPair { .. } => {
            let mods: Vec<_> = spans.iter().map(|s| s.modality.clone()).collect();
            let extra = match spec.extra_pair(&mods)? {
                Some((q, key)) => {
                    let len = |name: &str| {
                        spans
                            .iter()
                            .find(|s| s.modality.name == name)
                            .map_or(0, |s| s.len as u64)
                    };
                    let (nq, nk) = (len(&q), len(&key));
                    if nq > 0 && nk > 0 {
                        attn(nq, nk) + nq * r
                    } else {
                        0
                    }
                }
                None => 0,
            };
            task_centric + extra
        }
    })
}
