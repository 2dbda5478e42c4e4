//! Frozen toy host network.
//!
//! A stack of per-token linear maps, each with an optional adapter and a
//! SiLU nonlinearity, followed by a trainable linear classifier over
//! mean-pooled final states. The frozen path never mixes tokens, so every
//! cross-token interaction has to come from the adapters.

use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterSpec, AttentionTap};
use crate::crossmodal::AttentionRecord;
use crate::error::{Error, Result};
use crate::numkernel::{kaiming_uniform_init, Activation, Matrix, RngStream, Scalar, Tape, Var};
use crate::seqmodel::{validate_modalities, ModalityId, RoutingMask, SegmentedSequence};

/// Which final states feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over every token.
    #[default]
    All,
    /// Mean over the text span only.
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetDims {
    /// Token embedding width.
    pub k: usize,
    /// Hidden width.
    pub d: usize,
    pub depth: usize,
    pub classes: usize,
    pub bias: bool,
    pub pooling: Pooling,
}

impl Default for NetDims {
    fn default() -> Self {
        Self {
            k: 32,
            d: 32,
            depth: 2,
            classes: 8,
            bias: true,
            pooling: Pooling::All,
        }
    }
}

impl NetDims {
    pub fn layer_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.k
        } else {
            self.d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 || self.depth == 0 || self.classes < 2 {
            return Err(Error::Config(format!(
                "network needs k, d, depth >= 1 and at least 2 classes, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLinear<T: Scalar> {
    /// `d x k`.
    pub w0: Matrix<T>,
    /// `1 x d`.
    pub bias: Option<Matrix<T>>,
}

impl<T: Scalar> FrozenLinear<T> {
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let y = x.matmul(&self.w0.transpose())?;
        match &self.bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear<T: Scalar> {
    pub frozen: FrozenLinear<T>,
    pub adapter: Option<Adapter<T>>,
    pub attachment: String,
}

/// Tape variables of one bound network.
#[derive(Debug, Clone)]
pub struct NetVars {
    pub layers: Vec<Vec<Var>>,
    pub head_w: Var,
    pub head_b: Var,
    w0t: Vec<Var>,
    bias: Vec<Option<Var>>,
}

impl NetVars {
    /// Trainable variables in `trainable_parameters` order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flatten().copied().collect();
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork<T: Scalar> {
    dims: NetDims,
    modalities: Vec<ModalityId>,
    blocks: Vec<AdaptedLinear<T>>,
    /// `C x d`.
    head_w: Matrix<T>,
    /// `1 x C`.
    head_b: Matrix<T>,
}

impl<T: Scalar> ToyNetwork<T> {
    /// Frozen weights come from `frozen_seed`; adapters, when given, from
    /// their spec's seed. The head starts from the frozen seed so that every
    /// variant shares it.
    pub fn new(
        dims: NetDims,
        modalities: &[ModalityId],
        adapter: Option<&AdapterSpec>,
        frozen_seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        validate_modalities(modalities)?;
        let root = RngStream::new(frozen_seed, 1);
        let mut blocks = Vec::with_capacity(dims.depth);
        for l in 0..dims.depth {
            let k = dims.layer_in(l);
            let mut rng = root.derive(l as u64);
            let w0 = rng.normal_matrix(dims.d, k, 1.0 / (k as f64).sqrt());
            let bias = dims.bias.then(|| rng.normal_matrix(1, dims.d, 0.1));
            let adapter = adapter
                .map(|s| Adapter::init(s, modalities, k, dims.d, l))
                .transpose()?;
            blocks.push(AdaptedLinear {
                frozen: FrozenLinear { w0, bias },
                adapter,
                attachment: format!("layers.{l}"),
            });
        }
        let head_w = kaiming_uniform_init(dims.classes, dims.d, &mut root.derive(10_000));
        Ok(Self {
            dims,
            modalities: modalities.to_vec(),
            blocks,
            head_w,
            head_b: Matrix::zeros(1, dims.classes),
        })
    }

    pub fn dims(&self) -> &NetDims {
        &self.dims
    }

    pub fn modalities(&self) -> &[ModalityId] {
        &self.modalities
    }

    pub fn blocks(&self) -> &[AdaptedLinear<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [AdaptedLinear<T>] {
        &mut self.blocks
    }

    pub fn adapter_spec(&self) -> Option<&AdapterSpec> {
        self.blocks.iter().find_map(|b| b.adapter.as_ref()).map(|a| a.spec())
    }

    /// The same network with every adapter removed.
    pub fn without_adapters(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.adapter = None;
        }
        out
    }

    /// Named trainable tensors: adapters by layer, then the head.
    pub fn trainable_parameters(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            if let Some(a) = &b.adapter {
                for p in a.params() {
                    out.push((format!("layers.{l}.adapter.{}", p.name), p.value));
                }
            }
        }
        out.push(("head.weight".to_string(), &self.head_w));
        out.push(("head.bias".to_string(), &self.head_b));
        out
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter_mut().enumerate() {
            if let Some(a) = &mut b.adapter {
                for (name, m) in a.params_mut() {
                    out.push((format!("layers.{l}.adapter.{name}"), m));
                }
            }
        }
        out.push(("head.weight".to_string(), &mut self.head_w));
        out.push(("head.bias".to_string(), &mut self.head_b));
        out
    }

    pub fn frozen_parameters(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("frozen.layers.{l}.w0"), &b.frozen.w0));
            if let Some(bias) = &b.frozen.bias {
                out.push((format!("frozen.layers.{l}.bias"), bias));
            }
        }
        out
    }

    fn frozen_parameters_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("frozen.layers.{l}.w0"), &mut b.frozen.w0));
            if let Some(bias) = &mut b.frozen.bias {
                out.push((format!("frozen.layers.{l}.bias"), bias));
            }
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn num_frozen(&self) -> usize {
        self.frozen_parameters().iter().map(|(_, m)| m.len()).sum()
    }

    /// FNV-1a over the names, shapes and bytes of every frozen tensor.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = FnvHasher::default();
        let mut buf = Vec::new();
        for (name, m) in self.frozen_parameters() {
            h.write(name.as_bytes());
            h.write_u64(m.rows() as u64);
            h.write_u64(m.cols() as u64);
            buf.clear();
            for &v in m.data() {
                v.write_le(&mut buf);
            }
            h.write(&buf);
        }
        h.finish()
    }

    /// Every tensor, frozen first.
    pub fn named_tensors(&self) -> Vec<(String, Matrix<T>)> {
        self.frozen_parameters()
            .into_iter()
            .chain(self.trainable_parameters())
            .map(|(n, m)| (n, m.clone()))
            .collect()
    }

    /// Overwrites tensors by name. Every tensor of the network must be present
    /// with a matching shape.
    pub fn load_tensors(&mut self, tensors: &[(String, Matrix<T>)]) -> Result<()> {
        let expected = self.frozen_parameters().len() + self.trainable_parameters().len();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m);
        for (name, slot) in self.frozen_parameters().into_iter().chain(self.trainable_parameters()) {
            let m = find(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if m.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
        }
        for (name, slot) in self.frozen_parameters_mut() {
            *slot = find(&name).expect("checked").clone();
        }
        for (name, slot) in self.trainable_parameters_mut() {
            *slot = find(&name).expect("checked").clone();
        }
        Ok(())
    }

    /// Pushes trainable tensors as parameters and frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> NetVars {
        let mut layers = Vec::new();
        let mut w0t = Vec::new();
        let mut bias = Vec::new();
        for b in &self.blocks {
            layers.push(b.adapter.as_ref().map(|a| a.bind(tape)).unwrap_or_default());
            w0t.push(tape.constant(b.frozen.w0.transpose()));
            bias.push(b.frozen.bias.as_ref().map(|m| tape.constant(m.clone())));
        }
        NetVars {
            layers,
            head_w: tape.param(self.head_w.clone()),
            head_b: tape.param(self.head_b.clone()),
            w0t,
            bias,
        }
    }

    fn check_input(&self, seq: &SegmentedSequence<T>, mask: Option<&RoutingMask>) -> Result<()> {
        if seq.embed_dim() != self.dims.k {
            return Err(Error::Shape {
                op: "network input",
                left: (seq.len(), seq.embed_dim()),
                right: (self.dims.d, self.dims.k),
            });
        }
        if let Some(m) = mask {
            m.check_covers(seq)?;
        }
        Ok(())
    }

    /// Builds the `1 x C` logits of one sequence on `tape`.
    pub fn build(
        &self,
        tape: &mut Tape<T>,
        vars: &NetVars,
        seq: &SegmentedSequence<T>,
        mask: Option<&RoutingMask>,
        mut taps: Option<&mut Vec<(usize, AttentionTap)>>,
    ) -> Result<Var> {
        self.check_input(seq, mask)?;
        let mut h = tape.constant(seq.tokens().clone());
        for (l, b) in self.blocks.iter().enumerate() {
            let mut y = tape.matmul(h, vars.w0t[l])?;
            if let Some(bias) = vars.bias[l] {
                y = tape.add_row(y, bias)?;
            }
            if let Some(a) = &b.adapter {
                let mut layer_taps = taps.is_some().then(Vec::new);
                let delta = a.delta(tape, &vars.layers[l], h, seq.spans(), mask, layer_taps.as_mut())?;
                if let (Some(all), Some(new)) = (taps.as_deref_mut(), layer_taps) {
                    all.extend(new.into_iter().map(|t| (l, t)));
                }
                y = tape.add(y, delta)?;
            }
            h = tape.activation(y, Activation::Silu)?;
        }
        let pooled = match self.dims.pooling {
            Pooling::All => tape.mean_rows(h)?,
            Pooling::Text => {
                let t = seq
                    .text_span()
                    .filter(|s| s.len > 0)
                    .ok_or_else(|| Error::Protocol("text pooling needs a non-empty text span".into()))?;
                let rows = tape.slice_rows(h, t.start, t.len)?;
                tape.mean_rows(rows)?
            }
        };
        let hw = tape.transpose(vars.head_w)?;
        let logits = tape.matmul(pooled, hw)?;
        tape.add_row(logits, vars.head_b)
    }

    /// `1 x C` logits.
    pub fn forward(&self, seq: &SegmentedSequence<T>, mask: Option<&RoutingMask>) -> Result<Matrix<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.build(&mut tape, &vars, seq, mask, None)?;
        Ok(tape.value(out).clone())
    }

    /// Logits plus every attention matrix produced on the way.
    pub fn forward_with_attention(
        &self,
        seq: &SegmentedSequence<T>,
        mask: Option<&RoutingMask>,
    ) -> Result<(Matrix<T>, Vec<AttentionRecord<T>>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mut taps = Vec::new();
        let out = self.build(&mut tape, &vars, seq, mask, Some(&mut taps))?;
        let records = taps
            .into_iter()
            .map(|(l, t)| AttentionRecord {
                query_modality: t.query,
                key_modality: t.key,
                attachment: self.blocks[l].attachment.clone(),
                weights: tape.value(t.weights).clone(),
            })
            .collect();
        Ok((tape.value(out).clone(), records))
    }
}
