//! The GVP-GNN.
//!
//! One-hot node scalars are embedded to the hidden width with zero vector
//! channels; each message-passing layer computes per-edge messages with a
//! stack of GVPs over `(s_src ‖ s_edge, V_src ‖ V_edge)`, averages the
//! incoming messages, and applies residual updates with layer norm and a
//! feed-forward GVP stack. A final GVP drops the vector channels, node
//! scalars are pooled (or read out at tagged atoms) and a two-layer dense
//! head produces the output.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Primitive, Tape, ValueId};
use crate::graph::{MolGraph, RBF_COUNT};
use crate::gvp::{glorot_uniform, init_params_with, record_gvp, Activation, GvpConfig, GvpError, GvpWeights, Variant};
use crate::svt::{ScalarChannels, SvTuple, VectorChannels};
use crate::tensor::Tensor;

/// Regularizer of both layer-norm statistics.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Gvp(#[from] GvpError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("graph node features have width {got}, model expects {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("graph has no atoms")]
    EmptyGraph,
    #[error("node readout requested but no atom is tagged")]
    NoReadoutNodes,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("task mode {0:?} does not match this call")]
    TaskMode(TaskMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskMode {
    /// Mean of node scalars over the whole graph.
    Pool,
    /// Mean of node scalars over tagged atoms.
    NodeReadout,
    /// Two graphs, shared weights, pooled embeddings concatenated.
    Paired,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Width of the one-hot node input (vocabulary size + 1).
    pub in_scalars: usize,
    /// `(scalar, vector)` hidden node channels.
    pub node_dims: (usize, usize),
    /// `(scalar, vector)` edge features.
    pub edge_dims: (usize, usize),
    pub num_layers: usize,
    pub msg_gvps: usize,
    pub ff_gvps: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub output_dim: usize,
    pub task_mode: TaskMode,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_scalars: 12,
            node_dims: (100, 16),
            edge_dims: (RBF_COUNT, 1),
            num_layers: 5,
            msg_gvps: 3,
            ff_gvps: 2,
            dropout: 0.1,
            head_hidden: 100,
            output_dim: 1,
            task_mode: TaskMode::Pool,
            variant: Variant::Gated,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.in_scalars == 0 || self.node_dims.0 == 0 || self.node_dims.1 == 0 {
            return bad("input and node widths must be positive");
        }
        if self.edge_dims.1 != 1 {
            return bad("edges carry exactly one vector channel (the unit vector)");
        }
        if self.num_layers == 0 || self.msg_gvps == 0 || self.ff_gvps == 0 {
            return bad("layer and GVP counts must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout rate must lie in [0, 1)");
        }
        if self.head_hidden == 0 || self.output_dim == 0 {
            return bad("head widths must be positive");
        }
        Ok(())
    }

    fn gvp(&self, in_dims: (usize, usize), out_dims: (usize, usize)) -> GvpConfig {
        let base = match self.variant {
            Variant::Gated => GvpConfig::new(in_dims, out_dims),
            Variant::Original => GvpConfig::original(in_dims, out_dims),
        };
        base.with_scalar_act(Activation::Relu)
    }

    pub fn msg_config(&self, i: usize) -> GvpConfig {
        let (ns, nv) = self.node_dims;
        if i == 0 {
            self.gvp((ns + self.edge_dims.0, nv + self.edge_dims.1), (ns, nv))
        } else {
            self.gvp((ns, nv), (ns, nv))
        }
    }

    pub fn ff_config(&self) -> GvpConfig {
        self.gvp(self.node_dims, self.node_dims)
    }

    pub fn readout_config(&self) -> GvpConfig {
        self.gvp(self.node_dims, (self.node_dims.0, 0))
    }

    pub fn head_input(&self) -> usize {
        match self.task_mode {
            TaskMode::Paired => 2 * self.node_dims.0,
            _ => self.node_dims.0,
        }
    }
}

/// Layer-norm parameters: per-channel scalar scale/offset and one vector scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights<T> {
    pub gamma: T,
    pub beta: T,
    pub vscale: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub msg: Vec<GvpWeights<T>>,
    pub ff: Vec<GvpWeights<T>>,
    pub norm: [NormWeights<T>; 2],
}

/// All model tensors, generic over storage like [`GvpWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub embed: T,
    pub layers: Vec<LayerWeights<T>>,
    pub readout: GvpWeights<T>,
    pub head: [DenseWeights<T>; 2],
}

pub type NormParams = NormWeights<Tensor>;
pub type LayerParams = LayerWeights<Tensor>;

impl<T> ModelWeights<T> {
    /// Every tensor with its stable name, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![(String::from("embed.weight"), &self.embed)];
        for (k, layer) in self.layers.iter().enumerate() {
            for (i, g) in layer.msg.iter().enumerate() {
                out.extend(g.named().into_iter().map(|(n, t)| (format!("layer.{k}.msg.{i}.{n}"), t)));
            }
            for (i, g) in layer.ff.iter().enumerate() {
                out.extend(g.named().into_iter().map(|(n, t)| (format!("layer.{k}.ff.{i}.{n}"), t)));
            }
            for (j, nw) in layer.norm.iter().enumerate() {
                out.push((format!("layer.{k}.norm.{j}.gamma"), &nw.gamma));
                out.push((format!("layer.{k}.norm.{j}.beta"), &nw.beta));
                out.push((format!("layer.{k}.norm.{j}.vscale"), &nw.vscale));
            }
        }
        out.extend(self.readout.named().into_iter().map(|(n, t)| (format!("readout.{n}"), t)));
        for (j, d) in self.head.iter().enumerate() {
            out.push((format!("head.{j}.weight"), &d.weight));
            out.push((format!("head.{j}.bias"), &d.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![(String::from("embed.weight"), &mut self.embed)];
        for (k, layer) in self.layers.iter_mut().enumerate() {
            for (i, g) in layer.msg.iter_mut().enumerate() {
                out.extend(g.named_mut().into_iter().map(|(n, t)| (format!("layer.{k}.msg.{i}.{n}"), t)));
            }
            for (i, g) in layer.ff.iter_mut().enumerate() {
                out.extend(g.named_mut().into_iter().map(|(n, t)| (format!("layer.{k}.ff.{i}.{n}"), t)));
            }
            for (j, nw) in layer.norm.iter_mut().enumerate() {
                out.push((format!("layer.{k}.norm.{j}.gamma"), &mut nw.gamma));
                out.push((format!("layer.{k}.norm.{j}.beta"), &mut nw.beta));
                out.push((format!("layer.{k}.norm.{j}.vscale"), &mut nw.vscale));
            }
        }
        out.extend(self.readout.named_mut().into_iter().map(|(n, t)| (format!("readout.{n}"), t)));
        for (j, d) in self.head.iter_mut().enumerate() {
            out.push((format!("head.{j}.weight"), &mut d.weight));
            out.push((format!("head.{j}.bias"), &mut d.bias));
        }
        out
    }

    /// Applies `f` in canonical order.
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelWeights<U> {
        let embed = f(&self.embed);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                msg: l.msg.iter().map(|g| g.map(&mut *f)).collect(),
                ff: l.ff.iter().map(|g| g.map(&mut *f)).collect(),
                norm: [0, 1].map(|j| NormWeights { gamma: f(&l.norm[j].gamma), beta: f(&l.norm[j].beta), vscale: f(&l.norm[j].vscale) }),
            })
            .collect();
        let readout = self.readout.map(&mut *f);
        let head = [0, 1].map(|j| DenseWeights { weight: f(&self.head[j].weight), bias: f(&self.head[j].bias) });
        ModelWeights { embed, layers, readout, head }
    }
}

/// Node embeddings `(s, V)` as tape values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeRef {
    pub s: ValueId,
    pub v: ValueId,
}

/// Per-node feature tuples.
pub type NodeStates = Vec<SvTuple>;

#[derive(Debug, Clone, PartialEq)]
pub struct GvpGnnModel {
    config: ModelConfig,
    seed: u64,
    pub weights: ModelWeights<Tensor>,
    vector_bias: Option<[f64; 3]>,
}

impl GvpGnnModel {
    /// Fresh model with every tensor initialized from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ns = config.node_dims.0;
        let embed = glorot_uniform((ns, config.in_scalars), &mut rng);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let msg = (0..config.msg_gvps).map(|i| init_params_with(&config.msg_config(i), &mut rng)).collect();
            let ff = (0..config.ff_gvps).map(|_| init_params_with(&config.ff_config(), &mut rng)).collect();
            let norm = [0, 1].map(|_| NormWeights {
                gamma: Tensor::filled(ns, 1, 1.0),
                beta: Tensor::zeros(ns, 1),
                vscale: Tensor::scalar(1.0),
            });
            layers.push(LayerWeights { msg, ff, norm });
        }
        let readout = init_params_with(&config.readout_config(), &mut rng);
        let hidden = config.head_hidden;
        let head = [
            DenseWeights { weight: glorot_uniform((hidden, config.head_input()), &mut rng), bias: Tensor::zeros(hidden, 1) },
            DenseWeights { weight: glorot_uniform((config.output_dim, hidden), &mut rng), bias: Tensor::zeros(config.output_dim, 1) },
        ];
        Ok(Self { config, seed, weights: ModelWeights { embed, layers, readout, head }, vector_bias: None })
    }

    /// Adds a fixed vector to the first vector channel of every embedded
    /// node. This breaks equivariance on purpose and exists only as a
    /// negative control for the equivariance audit.
    pub fn with_vector_bias(mut self, bias: [f64; 3]) -> Self {
        self.vector_bias = Some(bias);
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A freshly initialized model with the same config and seed.
    pub fn reinitialized(&self) -> Self {
        Self::new(self.config.clone(), self.seed).expect("config was validated at construction")
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.weights.named()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.weights.named_mut()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.weights.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelWeights<ValueId> {
        self.weights.map(&mut |t| tape.leaf(t.clone()))
    }

    /// Registers every tensor as a constant (evaluation only).
    pub fn bind_const(&self, tape: &mut Tape) -> ModelWeights<ValueId> {
        self.weights.map(&mut |t| tape.constant(t.clone()))
    }

    fn check_graph(&self, graph: &MolGraph) -> Result<(), ModelError> {
        if graph.num_nodes() == 0 {
            return Err(ModelError::EmptyGraph);
        }
        let got = graph.node_scalars.first().map_or(0, Vec::len);
        if got != self.config.in_scalars {
            return Err(ModelError::WidthMismatch { expected: self.config.in_scalars, got });
        }
        if graph.edges.first().is_some_and(|e| e.rbf.len() != self.config.edge_dims.0) {
            return Err(ModelError::WidthMismatch { expected: self.config.edge_dims.0, got: graph.edges[0].rbf.len() });
        }
        Ok(())
    }
}

/// Dropout settings for one forward pass.
pub enum Mode<'a, R: Rng> {
    Eval,
    Train(&'a mut R),
}

impl<R: Rng> Mode<'_, R> {
    fn rng(&mut self) -> Option<&mut R> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) => Some(&mut **r),
        }
    }
}

/// Records one forward pass of a model.
pub struct Recorder<'m> {
    model: &'m GvpGnnModel,
    w: ModelWeights<ValueId>,
}

/// Values recorded by [`Recorder::graph`].
#[derive(Debug, Clone)]
pub struct GraphTrace {
    /// Node states after the embedding and after each layer.
    pub states: Vec<Vec<NodeRef>>,
    /// Invariant per-node scalars from the readout GVP.
    pub readout: Vec<ValueId>,
    /// The pooled (or tagged-node) embedding.
    pub pooled: ValueId,
}

impl<'m> Recorder<'m> {
    pub fn new(model: &'m GvpGnnModel, weights: ModelWeights<ValueId>) -> Self {
        Self { model, w: weights }
    }

    pub fn weights(&self) -> &ModelWeights<ValueId> {
        &self.w
    }

    pub fn embed(&self, tape: &mut Tape, graph: &MolGraph) -> Result<Vec<NodeRef>, ModelError> {
        self.model.check_graph(graph)?;
        let nv = self.model.config.node_dims.1;
        let mut out = Vec::with_capacity(graph.num_nodes());
        for i in 0..graph.num_nodes() {
            let x = tape.constant(graph.node_tensor(i));
            let s = tape.matmul(self.w.embed, x)?;
            let mut v0 = Tensor::zeros(nv, 3);
            if let Some(b) = self.model.vector_bias {
                v0.row_mut(0).copy_from_slice(&b);
            }
            let v = tape.constant(v0);
            out.push(NodeRef { s, v });
        }
        Ok(out)
    }

    /// One message-passing layer.
    pub fn layer<R: Rng>(
        &self,
        tape: &mut Tape,
        k: usize,
        graph: &MolGraph,
        edge_feats: &[NodeRef],
        states: &[NodeRef],
        mode: &mut Mode<'_, R>,
    ) -> Result<Vec<NodeRef>, ModelError> {
        let cfg = &self.model.config;
        let lw = &self.w.layers[k];
        let mut messages = Vec::with_capacity(graph.num_edges());
        for (e, feat) in graph.edges.iter().zip(edge_feats) {
            let src = states[e.src];
            let mut s = tape.concat(&[src.s, feat.s])?;
            let mut v = tape.concat(&[src.v, feat.v])?;
            for (i, gw) in lw.msg.iter().enumerate() {
                let t = record_gvp(tape, &cfg.msg_config(i), gw, s, v)?;
                s = t.s_out;
                v = t.v_out;
            }
            messages.push(NodeRef { s, v });
        }
        let incoming = graph.incoming();
        let mut out = Vec::with_capacity(states.len());
        for (i, h) in states.iter().enumerate() {
            let mut h = *h;
            if !incoming[i].is_empty() {
                let ms: Vec<ValueId> = incoming[i].iter().map(|&k| messages[k].s).collect();
                let mv: Vec<ValueId> = incoming[i].iter().map(|&k| messages[k].v).collect();
                let agg = NodeRef { s: tape.mean(&ms)?, v: tape.mean(&mv)? };
                let agg = record_dropout(tape, agg, cfg.dropout, mode)?;
                h = NodeRef { s: tape.add(h.s, agg.s)?, v: tape.add(h.v, agg.v)? };
            }
            h = record_layer_norm(tape, h, &lw.norm[0])?;
            let (mut s, mut v) = (h.s, h.v);
            for gw in &lw.ff {
                let t = record_gvp(tape, &cfg.ff_config(), gw, s, v)?;
                s = t.s_out;
                v = t.v_out;
            }
            let ff = record_dropout(tape, NodeRef { s, v }, cfg.dropout, mode)?;
            h = NodeRef { s: tape.add(h.s, ff.s)?, v: tape.add(h.v, ff.v)? };
            out.push(record_layer_norm(tape, h, &lw.norm[1])?);
        }
        Ok(out)
    }

    pub fn edge_features(&self, tape: &mut Tape, graph: &MolGraph) -> Vec<NodeRef> {
        graph
            .edges
            .iter()
            .map(|e| NodeRef { s: tape.constant(Tensor::column(e.rbf.clone())), v: tape.constant(Tensor::from_rows3(&[e.unit])) })
            .collect()
    }

    /// Embedding, message passing, readout GVP and pooling for one graph.
    pub fn graph<R: Rng>(&self, tape: &mut Tape, graph: &MolGraph, readout: bool, mode: &mut Mode<'_, R>) -> Result<GraphTrace, ModelError> {
        let mut states = vec![self.embed(tape, graph)?];
        let edge_feats = self.edge_features(tape, graph);
        for k in 0..self.model.config.num_layers {
            let next = self.layer(tape, k, graph, &edge_feats, states.last().unwrap(), mode)?;
            states.push(next);
        }
        let rcfg = self.model.config.readout_config();
        let mut node_scalars = Vec::with_capacity(graph.num_nodes());
        for h in states.last().unwrap() {
            node_scalars.push(record_gvp(tape, &rcfg, &self.w.readout, h.s, h.v)?.s_out);
        }
        let pooled = if readout {
            let tagged = graph.readout_nodes();
            if tagged.is_empty() {
                return Err(ModelError::NoReadoutNodes);
            }
            let picks: Vec<ValueId> = tagged.iter().map(|&i| node_scalars[i]).collect();
            tape.mean(&picks)?
        } else {
            tape.mean(&node_scalars)?
        };
        Ok(GraphTrace { states, readout: node_scalars, pooled })
    }

    pub fn head(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId, ModelError> {
        let [d0, d1] = &self.w.head;
        let h = tape.affine(d0.weight, x, d0.bias)?;
        let h = tape.relu(h)?;
        Ok(tape.affine(d1.weight, h, d1.bias)?)
    }

    /// Output for a single-graph task.
    pub fn forward<R: Rng>(&self, tape: &mut Tape, graph: &MolGraph, mode: &mut Mode<'_, R>) -> Result<ValueId, ModelError> {
        let readout = match self.model.config.task_mode {
            TaskMode::Pool => false,
            TaskMode::NodeReadout => true,
            TaskMode::Paired => return Err(ModelError::TaskMode(TaskMode::Paired)),
        };
        let trace = self.graph(tape, graph, readout, mode)?;
        self.head(tape, trace.pooled)
    }

    /// Output for a paired task: shared weights, concatenated pooled embeddings.
    pub fn forward_pair<R: Rng>(&self, tape: &mut Tape, g1: &MolGraph, g2: &MolGraph, mode: &mut Mode<'_, R>) -> Result<ValueId, ModelError> {
        if self.model.config.task_mode != TaskMode::Paired {
            return Err(ModelError::TaskMode(self.model.config.task_mode));
        }
        let a = self.graph(tape, g1, false, mode)?.pooled;
        let b = self.graph(tape, g2, false, mode)?.pooled;
        let x = tape.concat(&[a, b])?;
        self.head(tape, x)
    }
}

/// `s ↦ γ ⊙ standardize(s) + β`, `V ↦ c · V / sqrt(mean ‖v_i‖² + eps)`.
pub fn record_layer_norm(tape: &mut Tape, x: NodeRef, w: &NormWeights<ValueId>) -> Result<NodeRef, AutodiffError> {
    let z = tape.record(Primitive::Standardize { eps: NORM_EPS }, &[x.s])?;
    let z = tape.mul(z, w.gamma)?;
    let s = tape.add(z, w.beta)?;
    let r = tape.record(Primitive::RmsRows { eps: NORM_EPS }, &[x.v])?;
    let v = tape.scale(r, w.vscale)?;
    Ok(NodeRef { s, v })
}

/// Entrywise scalar dropout and whole-row vector dropout, survivors scaled by
/// `1 / (1 - rate)`. Identity in eval mode or at rate 0.
pub fn record_dropout<R: Rng>(tape: &mut Tape, x: NodeRef, rate: f64, mode: &mut Mode<'_, R>) -> Result<NodeRef, AutodiffError> {
    let Some(rng) = mode.rng() else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let (ns, nv) = (tape.shape(x.s).0, tape.shape(x.v).0);
    let smask: Vec<f64> = (0..ns).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    let vmask: Vec<f64> = (0..nv).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
    let sm = tape.constant(Tensor::column(smask));
    let vm = tape.constant(Tensor::column(vmask));
    Ok(NodeRef { s: tape.mul(x.s, sm)?, v: tape.gate_rows(vm, x.v)? })
}

fn read_tuple(tape: &Tape, r: NodeRef) -> SvTuple {
    SvTuple { s: ScalarChannels(tape.value(r.s).data().to_vec()), v: VectorChannels(tape.value(r.v).to_rows3()) }
}

fn put_tuple(tape: &mut Tape, x: &SvTuple) -> NodeRef {
    NodeRef { s: tape.constant(Tensor::column(x.s.0.clone())), v: tape.constant(x.v.to_tensor()) }
}

fn mode_of<R: Rng>(rng: Option<&mut R>) -> Mode<'_, R> {
    match rng {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    }
}

/// Initial node states: embedded one-hot scalars, zero vectors.
pub fn embed_inputs(graph: &MolGraph, model: &GvpGnnModel) -> Result<NodeStates, ModelError> {
    let mut tape = Tape::new();
    let rec = Recorder::new(model, model.bind_const(&mut tape));
    let refs = rec.embed(&mut tape, graph)?;
    Ok(refs.into_iter().map(|r| read_tuple(&tape, r)).collect())
}

/// Applies message-passing layer `k` of `model`. `rng = None` is eval mode.
pub fn mp_layer<R: Rng>(
    states: &[SvTuple],
    graph: &MolGraph,
    model: &GvpGnnModel,
    k: usize,
    rng: Option<&mut R>,
) -> Result<NodeStates, ModelError> {
    model.check_graph(graph)?;
    if states.len() != graph.num_nodes() || k >= model.config.num_layers {
        return Err(ModelError::Config(format!("layer {k} on {} states for {} nodes", states.len(), graph.num_nodes())));
    }
    let mut tape = Tape::new();
    let rec = Recorder::new(model, model.bind_const(&mut tape));
    let refs: Vec<NodeRef> = states.iter().map(|x| put_tuple(&mut tape, x)).collect();
    let edge_feats = rec.edge_features(&mut tape, graph);
    let mut mode = mode_of(rng);
    let out = rec.layer(&mut tape, k, graph, &edge_feats, &refs, &mut mode)?;
    Ok(out.into_iter().map(|r| read_tuple(&tape, r)).collect())
}

pub fn layer_norm_sv(x: &SvTuple, norm: &NormParams) -> Result<SvTuple, ModelError> {
    let mut tape = Tape::new();
    let w = NormWeights { gamma: tape.constant(norm.gamma.clone()), beta: tape.constant(norm.beta.clone()), vscale: tape.constant(norm.vscale.clone()) };
    let r = put_tuple(&mut tape, x);
    let out = record_layer_norm(&mut tape, r, &w)?;
    Ok(read_tuple(&tape, out))
}

/// `rng = None` is eval mode (identity).
pub fn dropout_sv<R: Rng>(x: &SvTuple, rate: f64, rng: Option<&mut R>) -> Result<SvTuple, ModelError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(ModelError::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let mut tape = Tape::new();
    let r = put_tuple(&mut tape, x);
    let mut mode = mode_of(rng);
    let out = record_dropout(&mut tape, r, rate, &mut mode)?;
    Ok(read_tuple(&tape, out))
}

/// Model output for one graph. `rng = None` is eval mode.
pub fn forward<R: Rng>(model: &GvpGnnModel, graph: &MolGraph, rng: Option<&mut R>) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let rec = Recorder::new(model, model.bind_const(&mut tape));
    let mut mode = mode_of(rng);
    let out = rec.forward(&mut tape, graph, &mut mode)?;
    Ok(tape.value(out).data().to_vec())
}

/// Model output for a pair of graphs. `rng = None` is eval mode.
pub fn forward_pair<R: Rng>(model: &GvpGnnModel, g1: &MolGraph, g2: &MolGraph, rng: Option<&mut R>) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let rec = Recorder::new(model, model.bind_const(&mut tape));
    let mut mode = mode_of(rng);
    let out = rec.forward_pair(&mut tape, g1, g2, &mut mode)?;
    Ok(tape.value(out).data().to_vec())
}

/// Node states after the embedding and after every layer, plus the pooled
/// embedding and output, all in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardStates {
    pub layers: Vec<NodeStates>,
    pub pooled: Vec<f64>,
    pub output: Vec<f64>,
}

pub fn forward_states(model: &GvpGnnModel, graph: &MolGraph) -> Result<ForwardStates, ModelError> {
    let mut tape = Tape::new();
    let rec = Recorder::new(model, model.bind_const(&mut tape));
    let mut mode: Mode<'_, ChaCha8Rng> = Mode::Eval;
    let readout = model.config.task_mode == TaskMode::NodeReadout;
    let trace = rec.graph(&mut tape, graph, readout, &mut mode)?;
    let head_in = if model.config.task_mode == TaskMode::Paired { tape.concat(&[trace.pooled, trace.pooled])? } else { trace.pooled };
    let out = rec.head(&mut tape, head_in)?;
    Ok(ForwardStates {
        layers: trace.states.iter().map(|l| l.iter().map(|r| read_tuple(&tape, *r)).collect()).collect(),
        pooled: tape.value(trace.pooled).data().to_vec(),
        output: tape.value(out).data().to_vec(),
    })
}
