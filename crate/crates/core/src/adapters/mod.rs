//! The adapter zoo.
//!
//! Every adapter maps the tokens of one sequence (`L x k`) to an additive
//! update `Δ` (`L x d`) on a frozen linear layer. Parameters are exposed as
//! an ordered, named list; `bind` pushes them onto a tape in that order and
//! `delta` consumes the resulting variables.

mod accounting;
mod lora;
mod moka;
mod spec;

pub use accounting::{count_matrices, flop_count, param_count};
pub use lora::{GatedComposite, LoraAdapter, MultipleLora, UniPlusMm, UnimodalLora};
pub use moka::{MokaAdapter, Projections};
pub use spec::{AdapterSpec, CrossMode, Variant};

use crate::error::{Error, Result};
use crate::numkernel::{kaiming_uniform_init, Matrix, RngStream, Scalar, Tape, Var};
use crate::seqmodel::{validate_modalities, ModalityId, ModalitySpan, RoutingMask, SegmentedSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// A low-rank `A` matrix.
    Down,
    /// A low-rank `B` matrix.
    Up,
    Gate,
    Projection,
}

#[derive(Debug, Clone)]
pub struct NamedParam<'a, T: Scalar> {
    pub name: String,
    pub role: ParamRole,
    pub value: &'a Matrix<T>,
}

impl<'a, T: Scalar> NamedParam<'a, T> {
    pub fn new(name: String, role: ParamRole, value: &'a Matrix<T>) -> Self {
        Self { name, role, value }
    }
}

/// Attention weights produced while building `Δ`, still on the tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionTap {
    pub query: String,
    pub key: String,
    pub weights: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterKind<T: Scalar> {
    Lora(LoraAdapter<T>),
    MultipleLora(MultipleLora<T>),
    UnimodalLora(UnimodalLora<T>),
    UniPlusMm(UniPlusMm<T>),
    Gated(GatedComposite<T>),
    Moka(MokaAdapter<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T: Scalar> {
    spec: AdapterSpec,
    in_dim: usize,
    out_dim: usize,
    kind: AdapterKind<T>,
}

/// Init stream label of modality `i`'s down projection. The plain LoRA `A`
/// reuses the text label, so every variant starts from the same `A^t`.
fn modality_label(i: usize) -> u64 {
    1 + i as u64
}

impl<T: Scalar> Adapter<T> {
    /// Fresh adapter for attachment `layer`: Kaiming-uniform `A`, zero `B`.
    pub fn init(
        spec: &AdapterSpec,
        modalities: &[ModalityId],
        in_dim: usize,
        out_dim: usize,
        layer: usize,
    ) -> Result<Self> {
        validate_modalities(modalities)?;
        spec.validate(in_dim, out_dim, modalities)?;
        let r = spec.rank;
        let root = RngStream::new(spec.seed, 1000 + layer as u64);
        let init_a = |label: u64| kaiming_uniform_init::<T>(r, in_dim, &mut root.derive(label));
        let text = modalities.iter().position(|m| m.is_text).expect("validated");
        let lora = |label: u64| LoraAdapter::new(init_a(label), out_dim);
        let per_mod_a = || {
            (0..modalities.len())
                .map(|i| init_a(modality_label(i)))
                .collect::<Vec<_>>()
        };
        let uni_plus_mm = || UniPlusMm {
            modalities: modalities.to_vec(),
            uni_a: per_mod_a(),
            uni_b: Matrix::zeros(out_dim, r),
            mm: lora(0),
        };
        let kind = match spec.variant {
            Variant::Lora => AdapterKind::Lora(lora(modality_label(text))),
            Variant::MultipleLora => AdapterKind::MultipleLora(MultipleLora {
                adapters: (0..modalities.len()).map(|j| lora(modality_label(j))).collect(),
            }),
            Variant::UnimodalLora => AdapterKind::UnimodalLora(UnimodalLora {
                modalities: modalities.to_vec(),
                adapters: (0..modalities.len()).map(|i| lora(modality_label(i))).collect(),
            }),
            Variant::UniPlusMm => AdapterKind::UniPlusMm(uni_plus_mm()),
            Variant::UniPlusMmGated => AdapterKind::Gated(GatedComposite {
                base: uni_plus_mm(),
                gate_w: Matrix::zeros(2 * r, 1),
                gate_b: Matrix::zeros(1, 1),
            }),
            Variant::Moka => {
                let extra = spec.extra_pair(modalities)?.map(|(q, k)| {
                    let qi = modalities.iter().position(|m| m.name == q).expect("resolved");
                    let ki = modalities.iter().position(|m| m.name == k).expect("resolved");
                    (qi, ki, T::lit(spec.extra_lambda))
                });
                let proj = (spec.cross_mode == CrossMode::Projected).then(|| Projections {
                    wq: modalities
                        .iter()
                        .filter(|m| !m.is_text)
                        .map(|_| Matrix::identity(r))
                        .collect(),
                    wk: Matrix::identity(r),
                    wv: Matrix::identity(r),
                });
                AdapterKind::Moka(MokaAdapter {
                    modalities: modalities.to_vec(),
                    a: per_mod_a(),
                    b: Matrix::zeros(out_dim, r),
                    lambdas: modalities.iter().map(|m| T::lit(spec.lambda(&m.name))).collect(),
                    cross_mode: spec.cross_mode.clone(),
                    extra,
                    text_lambda: T::lit(spec.text_lambda),
                    proj,
                })
            }
        };
        Ok(Self {
            spec: spec.clone(),
            in_dim,
            out_dim,
            kind,
        })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn kind(&self) -> &AdapterKind<T> {
        &self.kind
    }

    pub fn kind_mut(&mut self) -> &mut AdapterKind<T> {
        &mut self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Trainable tensors in binding order.
    pub fn params(&self) -> Vec<NamedParam<'_, T>> {
        let mut out = Vec::new();
        match &self.kind {
            AdapterKind::Lora(a) => a.params("", &mut out),
            AdapterKind::MultipleLora(a) => a.params(&mut out),
            AdapterKind::UnimodalLora(a) => a.params(&mut out),
            AdapterKind::UniPlusMm(a) => a.params(&mut out),
            AdapterKind::Gated(a) => a.params(&mut out),
            AdapterKind::Moka(a) => a.params(&mut out),
        }
        out
    }

    /// Mutable trainable tensors, same order and names as `params`.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let names: Vec<String> = self.params().into_iter().map(|p| p.name).collect();
        let mut out = Vec::new();
        match &mut self.kind {
            AdapterKind::Lora(a) => a.params_mut(&mut out),
            AdapterKind::MultipleLora(a) => a.params_mut(&mut out),
            AdapterKind::UnimodalLora(a) => a.params_mut(&mut out),
            AdapterKind::UniPlusMm(a) => a.params_mut(&mut out),
            AdapterKind::Gated(a) => a.params_mut(&mut out),
            AdapterKind::Moka(a) => a.params_mut(&mut out),
        }
        names.into_iter().zip(out).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// `(#A, #B)` found by enumerating the registered tensors.
    pub fn matrix_counts(&self) -> (usize, usize) {
        let ps = self.params();
        let count = |role| ps.iter().filter(|p| p.role == role).count();
        (count(ParamRole::Down), count(ParamRole::Up))
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Fills every trainable tensor with `N(0, std²)` draws.
    pub fn randomize(&mut self, rng: &mut RngStream, std: f64) {
        for (_, m) in self.params_mut() {
            *m = rng.normal_matrix(m.rows(), m.cols(), std);
        }
    }

    /// Builds `Δ` on the tape. `vars` must come from `bind`. Modalities the
    /// mask does not pass contribute zero rows.
    pub fn delta(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        spans: &[ModalitySpan],
        mask: Option<&RoutingMask>,
        taps: Option<&mut Vec<AttentionTap>>,
    ) -> Result<Var> {
        let (rows, cols) = tape.shape(x);
        if cols != self.in_dim {
            return Err(Error::Shape {
                op: "adapter",
                left: (rows, cols),
                right: (self.spec.rank, self.in_dim),
            });
        }
        if let AdapterKind::Moka(m) = &self.kind {
            return m.delta(tape, vars, x, spans, mask, taps);
        }
        let delta = match &self.kind {
            AdapterKind::Lora(_) => LoraAdapter::delta(tape, vars, x)?,
            AdapterKind::MultipleLora(a) => a.delta(tape, vars, x)?,
            AdapterKind::UnimodalLora(a) => a.delta(tape, vars, x, spans)?,
            AdapterKind::UniPlusMm(a) => a.delta(tape, vars, x, spans)?,
            AdapterKind::Gated(a) => a.delta(tape, vars, x, spans)?,
            AdapterKind::Moka(_) => unreachable!(),
        };
        match mask {
            Some(m) if !m.is_full() => {
                let mut col = Matrix::zeros(rows, 1);
                for s in spans {
                    if m.passes(&s.modality.name)? {
                        for row in s.start..s.end() {
                            col.set(row, 0, T::one());
                        }
                    }
                }
                let col = tape.constant(col);
                tape.scale_rows(delta, col)
            }
            Some(m) => {
                for s in spans {
                    m.passes(&s.modality.name)?;
                }
                Ok(delta)
            }
            None => Ok(delta),
        }
    }

    /// Evaluates `Δ` for one sequence outside of training.
    pub fn delta_matrix(&self, seq: &SegmentedSequence<T>, mask: Option<&RoutingMask>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(seq.tokens().clone());
        let d = self.delta(&mut tape, &vars, x, seq.spans(), mask, None)?;
        Ok(tape.value(d).clone())
    }
}
