//! Output heads that read final node states.
//!
//! Every head sees `concat(h_v, x_v)`: the propagated state next to the
//! node's original annotations, so a head can tell query nodes from the
//! rest even when propagation has washed the marking out. Three heads
//! cover the tasks: per-node scores softmaxed over the graph (node
//! selection), a gated-attention sum pooled into one vector for graph
//! classification, and per-node sigmoid outputs that become the next
//! step's annotations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Building blocks

/// One dense layer, stored row-acting: `y = x W + b`.
pub struct Linear {
    w: ParamId,
    /// `None` for layers whose output feeds a shift-invariant consumer.
    b: Option<ParamId>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::zeros_with_bias(store, name, in_dim, out_dim, true)
    }

    pub fn zeros_with_bias(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        Linear {
            w: store.add(&format!("{name}.w"), Tensor::zeros(in_dim, out_dim)),
            b: bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(1, out_dim))),
            in_dim,
            out_dim,
        }
    }

    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::init_with_bias(store, name, in_dim, out_dim, true, rng)
    }

    pub fn init_with_bias(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let layer = Self::zeros_with_bias(store, name, in_dim, out_dim, bias);
        let scale = 1.0 / (in_dim as f64).sqrt();
        *store.value_mut(layer.w) = Tensor::uniform(in_dim, out_dim, scale, rng);
        layer
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let xw = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row_broadcast(xw, b)
            }
            None => Ok(xw),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }

    pub fn weight_id(&self) -> ParamId {
        self.w
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.b
    }
}

/// A head network: one linear layer, or linear-tanh-linear when the config
/// asks for a hidden layer.
pub struct HeadNet {
    layers: Vec<Linear>,
}

impl HeadNet {
    fn build(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        hidden_dim: Option<usize>,
        final_bias: bool,
        rng: Option<&mut impl Rng>,
    ) -> Self {
        let dims: Vec<(usize, usize)> = match hidden_dim {
            Some(h) => vec![(in_dim, h), (h, out_dim)],
            None => vec![(in_dim, out_dim)],
        };
        let last = dims.len() - 1;
        let mut layers = Vec::new();
        match rng {
            Some(rng) => {
                for (i, (a, b)) in dims.iter().enumerate() {
                    let bias = final_bias || i < last;
                    layers.push(Linear::init_with_bias(
                        store,
                        &format!("{name}.{i}"),
                        *a,
                        *b,
                        bias,
                        rng,
                    ));
                }
            }
            None => {
                for (i, (a, b)) in dims.iter().enumerate() {
                    let bias = final_bias || i < last;
                    layers.push(Linear::zeros_with_bias(
                        store,
                        &format!("{name}.{i}"),
                        *a,
                        *b,
                        bias,
                    ));
                }
            }
        }
        HeadNet { layers }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut y = self.layers[0].apply(tape, store, x)?;
        for layer in &self.layers[1..] {
            y = tape.tanh(y)?;
            y = layer.apply(tape, store, y)?;
        }
        Ok(y)
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(Linear::num_scalars).sum()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone)]
pub struct OutputConfig {
    pub state_dim: usize,
    pub annot_dim: usize,
    /// Width of the pooled graph vector. Defaults to the state width.
    pub readout_dim: usize,
    /// When set, every head gets one tanh hidden layer of this width.
    pub hidden_dim: Option<usize>,
    /// Keep the tanh around the pooled sum (identity when false).
    pub readout_outer_tanh: bool,
    /// Keep the tanh on the per-node embeddings inside the sum.
    pub readout_inner_tanh: bool,
}

impl OutputConfig {
    pub fn new(state_dim: usize, annot_dim: usize) -> Self {
        OutputConfig {
            state_dim,
            annot_dim,
            readout_dim: state_dim,
            hidden_dim: None,
            readout_outer_tanh: true,
            readout_inner_tanh: true,
        }
    }

    fn in_dim(&self) -> usize {
        self.state_dim + self.annot_dim
    }
}

/// `concat(h, x)` with shape checks shared by all heads.
fn head_input(tape: &mut Tape, config: &OutputConfig, h: Var, x: Var) -> Result<Var> {
    let (n, d) = tape.value(h).shape();
    let (nx, l) = tape.value(x).shape();
    if n != nx || d != config.state_dim || l != config.annot_dim {
        return Err(Error::dim(
            "output_head",
            format!("states {n}x{d}, annotations {nx}x{l}"),
        ));
    }
    if n == 0 {
        return Err(Error::dim("output_head", "empty graph"));
    }
    tape.concat_cols(h, x)
}

// ---------------------------------------------------------------------------
// Node selection

/// Scores one node against the rest; softmax over the graph picks one.
///
/// The score net has no output bias: every consumer reads the scores through
/// a softmax or argmax over candidates, and a shared offset cannot move
/// either. Leaving the bias in would add a parameter with an identically
/// zero gradient. Sequence models that pit node scores against a separate
/// end-of-sequence logit carry the offset on that logit instead.
pub struct NodeSelectionHead {
    config: OutputConfig,
    score_net: HeadNet,
}

impl NodeSelectionHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: OutputConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let score_net = HeadNet::build(
            store,
            &format!("{prefix}.score"),
            config.in_dim(),
            1,
            config.hidden_dim,
            false,
            Some(rng),
        );
        NodeSelectionHead { config, score_net }
    }

    pub fn zeros(store: &mut ParamStore, prefix: &str, config: OutputConfig) -> Self {
        let score_net = HeadNet::build(
            store,
            &format!("{prefix}.score"),
            config.in_dim(),
            1,
            config.hidden_dim,
            false,
            None::<&mut rand_chacha::ChaCha8Rng>,
        );
        NodeSelectionHead { config, score_net }
    }

    /// Per-node scores, n x 1. Softmax over the column is the selection
    /// distribution; feed to a cross-entropy loss against the target node.
    pub fn scores(&self, tape: &mut Tape, store: &ParamStore, h: Var, x: Var) -> Result<Var> {
        let hx = head_input(tape, &self.config, h, x)?;
        self.score_net.apply(tape, store, hx)
    }

    pub fn num_scalars(&self) -> usize {
        self.score_net.num_scalars()
    }
}

/// Softmax of a score column, computed off the tape (for inference).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

// ---------------------------------------------------------------------------
// Graph-level readout and classification

/// Attention-gated pooling: `pool(act(sum_v sigmoid(gate(hx_v)) * act(embed(hx_v))))`.
pub struct GraphReadout {
    config: OutputConfig,
    gate_net: HeadNet,
    embed_net: HeadNet,
}

impl GraphReadout {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: OutputConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let gate_net = HeadNet::build(
            store,
            &format!("{prefix}.gate"),
            config.in_dim(),
            config.readout_dim,
            config.hidden_dim,
            true,
            Some(rng),
        );
        let embed_net = HeadNet::build(
            store,
            &format!("{prefix}.embed"),
            config.in_dim(),
            config.readout_dim,
            config.hidden_dim,
            true,
            Some(rng),
        );
        GraphReadout { config, gate_net, embed_net }
    }

    pub fn zeros(store: &mut ParamStore, prefix: &str, config: OutputConfig) -> Self {
        let gate_net = HeadNet::build(
            store,
            &format!("{prefix}.gate"),
            config.in_dim(),
            config.readout_dim,
            config.hidden_dim,
            true,
            None::<&mut rand_chacha::ChaCha8Rng>,
        );
        let embed_net = HeadNet::build(
            store,
            &format!("{prefix}.embed"),
            config.in_dim(),
            config.readout_dim,
            config.hidden_dim,
            true,
            None::<&mut rand_chacha::ChaCha8Rng>,
        );
        GraphReadout { config, gate_net, embed_net }
    }

    /// Pool all node states into one 1 x readout_dim vector.
    pub fn pool(&self, tape: &mut Tape, store: &ParamStore, h: Var, x: Var) -> Result<Var> {
        let hx = head_input(tape, &self.config, h, x)?;
        let gate_pre = self.gate_net.apply(tape, store, hx)?;
        let gates = tape.sigmoid(gate_pre)?;
        let mut embed = self.embed_net.apply(tape, store, hx)?;
        if self.config.readout_inner_tanh {
            embed = tape.tanh(embed)?;
        }
        let gated = tape.mul(gates, embed)?;
        let mut pooled = tape.sum_rows(gated)?;
        if self.config.readout_outer_tanh {
            pooled = tape.tanh(pooled)?;
        }
        Ok(pooled)
    }

    pub fn num_scalars(&self) -> usize {
        self.gate_net.num_scalars() + self.embed_net.num_scalars()
    }

    pub fn gate_net(&self) -> &HeadNet {
        &self.gate_net
    }

    pub fn embed_net(&self) -> &HeadNet {
        &self.embed_net
    }
}

/// Readout followed by a linear classifier over the pooled vector.
pub struct GraphClassificationHead {
    readout: GraphReadout,
    classifier: Linear,
    num_classes: usize,
}

impl GraphClassificationHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: OutputConfig,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let readout = GraphReadout::init(store, prefix, config.clone(), rng);
        let classifier =
            Linear::init(store, &format!("{prefix}.class"), config.readout_dim, num_classes, rng);
        GraphClassificationHead { readout, classifier, num_classes }
    }

    pub fn zeros(
        store: &mut ParamStore,
        prefix: &str,
        config: OutputConfig,
        num_classes: usize,
    ) -> Self {
        let readout = GraphReadout::zeros(store, prefix, config.clone());
        let classifier =
            Linear::zeros(store, &format!("{prefix}.class"), config.readout_dim, num_classes);
        GraphClassificationHead { readout, classifier, num_classes }
    }

    /// Class logits, 1 x num_classes.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, h: Var, x: Var) -> Result<Var> {
        let pooled = self.readout.pool(tape, store, h, x)?;
        self.classifier.apply(tape, store, pooled)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_scalars(&self) -> usize {
        self.readout.num_scalars() + self.classifier.num_scalars()
    }
}

// ---------------------------------------------------------------------------
// Per-node annotation prediction

/// Predicts the next annotation row for every node independently; outputs
/// are sigmoids, trained against observed bits with binary cross-entropy.
pub struct AnnotationHead {
    config: OutputConfig,
    net: HeadNet,
}

impl AnnotationHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: OutputConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let net = HeadNet::build(
            store,
            &format!("{prefix}.annot"),
            config.in_dim(),
            config.annot_dim,
            config.hidden_dim,
            true,
            Some(rng),
        );
        AnnotationHead { config, net }
    }

    pub fn zeros(store: &mut ParamStore, prefix: &str, config: OutputConfig) -> Self {
        let net = HeadNet::build(
            store,
            &format!("{prefix}.annot"),
            config.in_dim(),
            config.annot_dim,
            config.hidden_dim,
            true,
            None::<&mut rand_chacha::ChaCha8Rng>,
        );
        AnnotationHead { config, net }
    }

    /// Next annotations, n x annot_dim, every entry in (0, 1).
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, h: Var, x: Var) -> Result<Var> {
        let hx = head_input(tape, &self.config, h, x)?;
        let logits = self.net.apply(tape, store, hx)?;
        tape.sigmoid(logits)
    }

    pub fn num_scalars(&self) -> usize {
        self.net.num_scalars()
    }
}
