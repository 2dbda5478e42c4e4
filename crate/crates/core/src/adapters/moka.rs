use crate::crossmodal::{attend, naive_interaction, project, residual_enhance, reversed_query};
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Scalar, Tape, Var};
use crate::seqmodel::{ModalityId, ModalitySpan, RoutingMask};

use super::lora::{concat, down, find_index, up};
use super::spec::CrossMode;
use super::{AttentionTap, NamedParam, ParamRole};

/// Rank-space projections for the projected cross mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections<T: Scalar> {
    /// One `r x r` query projection per non-text modality, in modality order.
    pub wq: Vec<Matrix<T>>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MokaAdapter<T: Scalar> {
    pub modalities: Vec<ModalityId>,
    /// `r x k` down projection per modality, indexed like `modalities`.
    pub a: Vec<Matrix<T>>,
    /// Shared `d x r` up projection.
    pub b: Matrix<T>,
    /// Residual weight per modality; the text entry is unused.
    pub lambdas: Vec<T>,
    pub cross_mode: CrossMode,
    /// `(query index, key index, weight)` of the extra non-text pair.
    pub extra: Option<(usize, usize, T)>,
    pub text_lambda: T,
    pub proj: Option<Projections<T>>,
}

impl<T: Scalar> MokaAdapter<T> {
    fn nontext(&self) -> impl Iterator<Item = &ModalityId> {
        self.modalities.iter().filter(|m| !m.is_text)
    }

    pub(crate) fn params<'a>(&'a self, out: &mut Vec<NamedParam<'a, T>>) {
        for (m, a) in self.modalities.iter().zip(&self.a) {
            out.push(NamedParam::new(format!("a.{}", m.name), ParamRole::Down, a));
        }
        out.push(NamedParam::new("b".into(), ParamRole::Up, &self.b));
        if let Some(p) = &self.proj {
            for (m, w) in self.nontext().zip(&p.wq) {
                out.push(NamedParam::new(format!("proj.q.{}", m.name), ParamRole::Projection, w));
            }
            out.push(NamedParam::new("proj.k".into(), ParamRole::Projection, &p.wk));
            out.push(NamedParam::new("proj.v".into(), ParamRole::Projection, &p.wv));
        }
    }

    pub(crate) fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix<T>>) {
        for a in &mut self.a {
            out.push(a);
        }
        out.push(&mut self.b);
        if let Some(p) = &mut self.proj {
            for w in &mut p.wq {
                out.push(w);
            }
            out.push(&mut p.wk);
            out.push(&mut p.wv);
        }
    }

    /// Position of modality `idx` among the non-text modalities.
    fn nontext_rank(&self, idx: usize) -> usize {
        self.modalities[..idx].iter().filter(|m| !m.is_text).count()
    }

    pub(crate) fn delta(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        spans: &[ModalitySpan],
        mask: Option<&RoutingMask>,
        mut taps: Option<&mut Vec<AttentionTap>>,
    ) -> Result<Var> {
        let n = self.a.len();
        let r = self.b.cols();
        let mut idx = Vec::with_capacity(spans.len());
        let mut pass = Vec::with_capacity(spans.len());
        let mut blocks = Vec::with_capacity(spans.len());
        for s in spans {
            let i = find_index(&self.modalities, &s.modality.name)?;
            let p = match mask {
                Some(m) => m.passes(&s.modality.name)?,
                None => true,
            };
            let z = if p {
                let xs = tape.slice_rows(x, s.start, s.len)?;
                down(tape, xs, vars[i])?
            } else {
                tape.constant(Matrix::zeros(s.len, r))
            };
            idx.push(i);
            pass.push(p);
            blocks.push(z);
        }
        let text_pos = spans.iter().position(|s| s.modality.is_text);
        let live: Vec<usize> = (0..spans.len())
            .filter(|&j| pass[j] && !spans[j].modality.is_text && spans[j].len > 0)
            .collect();
        let mut out = blocks.clone();
        let mut record = |query: &str, key: &str, w: Var| {
            if let Some(t) = taps.as_deref_mut() {
                t.push(AttentionTap {
                    query: query.to_string(),
                    key: key.to_string(),
                    weights: w,
                });
            }
        };

        match &self.cross_mode {
            CrossMode::None => {}
            CrossMode::ReversedQuery => {
                if let Some(tp) = text_pos.filter(|&tp| pass[tp]) {
                    if !live.is_empty() {
                        let keys: Vec<Var> = live.iter().map(|&j| blocks[j]).collect();
                        let (updated, w) = reversed_query(tape, blocks[tp], &keys, self.text_lambda)?;
                        out[tp] = updated;
                        let names: Vec<&str> = live.iter().map(|&j| spans[j].modality.name.as_str()).collect();
                        record(&spans[tp].modality.name, &names.join("+"), w);
                    }
                }
            }
            mode => {
                if !live.is_empty() {
                    let tp =
                        text_pos.ok_or_else(|| Error::Protocol("cross-modal interaction needs a text span".into()))?;
                    if !pass[tp] {
                        return Err(Error::Protocol(
                            "cross-modal interaction needs the text span routed through the adapter".into(),
                        ));
                    }
                    let t = blocks[tp];
                    let text_name = spans[tp].modality.name.as_str();
                    let kv = match mode {
                        CrossMode::Projected => {
                            let base = n + 1 + (n - 1);
                            let k = project(tape, t, vars[base])?;
                            let v = project(tape, t, vars[base + 1])?;
                            Some((k, v))
                        }
                        _ => None,
                    };
                    for &j in &live {
                        let i = idx[j];
                        let z = blocks[j];
                        let lam = self.lambdas[i];
                        let name = spans[j].modality.name.as_str();
                        let enhanced = match (mode, kv) {
                            (CrossMode::Naive, _) => naive_interaction(tape, z, t, lam)?,
                            (CrossMode::Projected, Some((k, v))) => {
                                let q = project(tape, z, vars[n + 1 + self.nontext_rank(i)])?;
                                let (att, w) = attend(tape, q, k, v)?;
                                record(name, text_name, w);
                                residual_enhance(tape, z, att, lam)?
                            }
                            _ => {
                                let (att, w) = attend(tape, z, t, t)?;
                                record(name, text_name, w);
                                residual_enhance(tape, z, att, lam)?
                            }
                        };
                        out[j] = enhanced;
                        if let Some((qi, ki, extra)) = self.extra {
                            if qi != i {
                                continue;
                            }
                            let key_pos = spans.iter().position(|s| s.modality.name == self.modalities[ki].name);
                            if let Some(kp) = key_pos.filter(|&kp| live.contains(&kp)) {
                                let (att, w) = attend(tape, z, blocks[kp], blocks[kp])?;
                                record(name, &spans[kp].modality.name, w);
                                out[j] = tape.axpy(out[j], att, extra)?;
                            }
                        }
                    }
                }
            }
        }
        let e = concat(tape, &out)?;
        up(tape, e, vars[n])
    }
}
