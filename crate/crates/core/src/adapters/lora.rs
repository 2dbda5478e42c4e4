//! LoRA and the baselines built from LoRA pieces.

use crate::error::{Error, Result};
use crate::numkernel::{Activation, Matrix, Scalar, Tape, Var};
use crate::seqmodel::{ModalityId, ModalitySpan};

use super::{NamedParam, ParamRole};

/// `x Aᵀ` for row tokens `x`.
pub(crate) fn down<T: Scalar>(tape: &mut Tape<T>, x: Var, a: Var) -> Result<Var> {
    let at = tape.transpose(a)?;
    tape.matmul(x, at)
}

/// `z Bᵀ` for low-rank row tokens `z`.
pub(crate) fn up<T: Scalar>(tape: &mut Tape<T>, z: Var, b: Var) -> Result<Var> {
    let bt = tape.transpose(b)?;
    tape.matmul(z, bt)
}

pub(crate) fn find_index(modalities: &[ModalityId], name: &str) -> Result<usize> {
    modalities
        .iter()
        .position(|m| m.name == name)
        .ok_or_else(|| Error::UnknownModality(name.to_string()))
}

/// Low-rank tokens of every span, each through its own modality's `A`.
pub(crate) fn routed_down<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spans: &[ModalitySpan],
    modalities: &[ModalityId],
    a_vars: &[Var],
) -> Result<Vec<Var>> {
    spans
        .iter()
        .map(|s| {
            let idx = find_index(modalities, &s.modality.name)?;
            let xs = tape.slice_rows(x, s.start, s.len)?;
            down(tape, xs, a_vars[idx])
        })
        .collect()
}

pub(crate) fn concat<T: Scalar>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(parts)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar> {
    /// `r x k` down projection.
    pub a: Matrix<T>,
    /// `d x r` up projection, zero at construction.
    pub b: Matrix<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(a: Matrix<T>, out_dim: usize) -> Self {
        let r = a.rows();
        Self {
            a,
            b: Matrix::zeros(out_dim, r),
        }
    }

    /// Explicit `B A` update matrix (`d x k`).
    pub fn delta_weight(&self) -> Result<Matrix<T>> {
        self.b.matmul(&self.a)
    }

    pub(crate) fn params<'a>(&'a self, prefix: &str, out: &mut Vec<NamedParam<'a, T>>) {
        out.push(NamedParam::new(format!("{prefix}a"), ParamRole::Down, &self.a));
        out.push(NamedParam::new(format!("{prefix}b"), ParamRole::Up, &self.b));
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix<T>>) {
        out.push(&mut self.a);
        out.push(&mut self.b);
    }

    /// `Δ = x Aᵀ Bᵀ`; `vars` holds `[a, b]`.
    pub(crate) fn delta(tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let z = down(tape, x, vars[0])?;
        up(tape, z, vars[1])
    }
}

/// `n` independent LoRA modules, all applied to every token and summed.
#[derive(Debug, Clone, PartialEq)]
pub struct MultipleLora<T: Scalar> {
    pub adapters: Vec<LoraAdapter<T>>,
}

impl<T: Scalar> MultipleLora<T> {
    pub(crate) fn params<'a>(&'a self, out: &mut Vec<NamedParam<'a, T>>) {
        for (j, a) in self.adapters.iter().enumerate() {
            a.params(&format!("{j}."), out);
        }
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix<T>>) {
        for a in &mut self.adapters {
            a.params_mut(out);
        }
    }

    pub(crate) fn delta(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let mut total: Option<Var> = None;
        for pair in vars.chunks(2) {
            let d = LoraAdapter::delta(tape, pair, x)?;
            total = Some(match total {
                Some(t) => tape.add(t, d)?,
                None => d,
            });
        }
        total.ok_or_else(|| Error::Spec("multiple LoRA with zero modules".into()))
    }
}

/// One LoRA per modality, each seeing only its own span.
#[derive(Debug, Clone, PartialEq)]
pub struct UnimodalLora<T: Scalar> {
    pub modalities: Vec<ModalityId>,
    pub adapters: Vec<LoraAdapter<T>>,
}

impl<T: Scalar> UnimodalLora<T> {
    pub(crate) fn params<'a>(&'a self, out: &mut Vec<NamedParam<'a, T>>) {
        for (m, a) in self.modalities.iter().zip(&self.adapters) {
            out.push(NamedParam::new(format!("a.{}", m.name), ParamRole::Down, &a.a));
            out.push(NamedParam::new(format!("b.{}", m.name), ParamRole::Up, &a.b));
        }
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix<T>>) {
        for a in &mut self.adapters {
            a.params_mut(out);
        }
    }

    pub(crate) fn delta(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, spans: &[ModalitySpan]) -> Result<Var> {
        let mut blocks = Vec::with_capacity(spans.len());
        for s in spans {
            let idx = find_index(&self.modalities, &s.modality.name)?;
            let xs = tape.slice_rows(x, s.start, s.len)?;
            blocks.push(LoraAdapter::delta(tape, &vars[2 * idx..2 * idx + 2], xs)?);
        }
        concat(tape, &blocks)
    }
}

/// Routed per-modality down projections with one shared uni-branch `B`,
/// plus a fully shared multimodal LoRA.
#[derive(Debug, Clone, PartialEq)]
pub struct UniPlusMm<T: Scalar> {
    pub modalities: Vec<ModalityId>,
    pub uni_a: Vec<Matrix<T>>,
    pub uni_b: Matrix<T>,
    pub mm: LoraAdapter<T>,
}

/// Intermediate results of the two branches for one sequence.
pub(crate) struct Branches {
    pub uni_lr: Var,
    pub uni_delta: Var,
    pub mm_lr: Var,
    pub mm_delta: Var,
}

impl<T: Scalar> UniPlusMm<T> {
    pub(crate) fn num_params(&self) -> usize {
        self.uni_a.len() + 3
    }

    pub(crate) fn params<'a>(&'a self, out: &mut Vec<NamedParam<'a, T>>) {
        for (m, a) in self.modalities.iter().zip(&self.uni_a) {
            out.push(NamedParam::new(format!("uni.a.{}", m.name), ParamRole::Down, a));
        }
        out.push(NamedParam::new("uni.b".into(), ParamRole::Up, &self.uni_b));
        self.mm.params("mm.", out);
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix<T>>) {
        for a in &mut self.uni_a {
            out.push(a);
        }
        out.push(&mut self.uni_b);
        self.mm.params_mut(out);
    }

    pub(crate) fn branches(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        spans: &[ModalitySpan],
    ) -> Result<Branches> {
        let n = self.uni_a.len();
        let blocks = routed_down(tape, x, spans, &self.modalities, &vars[..n])?;
        let uni_lr = concat(tape, &blocks)?;
        let uni_delta = up(tape, uni_lr, vars[n])?;
        let mm_lr = down(tape, x, vars[n + 1])?;
        let mm_delta = up(tape, mm_lr, vars[n + 2])?;
        Ok(Branches {
            uni_lr,
            uni_delta,
            mm_lr,
            mm_delta,
        })
    }

    pub(crate) fn delta(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, spans: &[ModalitySpan]) -> Result<Var> {
        let br = self.branches(tape, vars, x, spans)?;
        tape.add(br.uni_delta, br.mm_delta)
    }
}

/// `UniPlusMm` whose branches are mixed per token by
/// `g = sigmoid(w_uniᵀ z_uni + w_mmᵀ z_mm + b)`:
/// `Δ = g Δ_uni + (1 - g) Δ_mm`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedComposite<T: Scalar> {
    pub base: UniPlusMm<T>,
    /// `2r x 1`: weights on the uni then mm low-rank features.
    pub gate_w: Matrix<T>,
    /// `1 x 1`.
    pub gate_b: Matrix<T>,
}

impl<T: Scalar> GatedComposite<T> {
    pub(crate) fn params<'a>(&'a self, out: &mut Vec<NamedParam<'a, T>>) {
        self.base.params(out);
        out.push(NamedParam::new("gate.w".into(), ParamRole::Gate, &self.gate_w));
        out.push(NamedParam::new("gate.b".into(), ParamRole::Gate, &self.gate_b));
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix<T>>) {
        self.base.params_mut(out);
        out.push(&mut self.gate_w);
        out.push(&mut self.gate_b);
    }

    pub(crate) fn delta(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, spans: &[ModalitySpan]) -> Result<Var> {
        let nb = self.base.num_params();
        let br = self.base.branches(tape, &vars[..nb], x, spans)?;
        let (w, b) = (vars[nb], vars[nb + 1]);
        let r = self.base.uni_b.cols();
        let w_uni = tape.slice_rows(w, 0, r)?;
        let w_mm = tape.slice_rows(w, r, r)?;
        let from_uni = tape.matmul(br.uni_lr, w_uni)?;
        let from_mm = tape.matmul(br.mm_lr, w_mm)?;
        let logit = tape.add(from_uni, from_mm)?;
        let logit = tape.add_row(logit, b)?;
        let g = tape.activation(logit, Activation::Sigmoid)?;
        let uni = tape.scale_rows(br.uni_delta, g)?;
        let one_minus = tape.affine(g, -T::one(), T::one())?;
        let mm = tape.scale_rows(br.mm_delta, one_minus)?;
        tape.add(uni, mm)
    }
}
