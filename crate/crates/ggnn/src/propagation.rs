//! Gated propagation over typed graphs.
//!
//! A run starts from annotation-padded node states, then alternates two
//! phases for a fixed number of rounds: typed-edge message aggregation
//! (every edge contributes in both directions, with matrices and biases
//! tied per edge type and direction) and a GRU-style state update. The
//! whole unroll is recorded on a [`Tape`], so losses attached to the final
//! states backpropagate through time.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{AnnotationMatrix, TypedGraph};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How message biases enter the aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasMode {
    /// One bias per incident edge, inside the sum: a node touched by three
    /// edges of a type collects that type's bias three times.
    PerEdge,
    /// Each (edge type, direction) bias added once to every node,
    /// regardless of incident edges.
    PerNode,
}

/// What the `steps` argument of [`propagate`] counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepConvention {
    /// `steps` counts state snapshots: the initialization is step 1 and
    /// `steps - 1` update rounds follow.
    Snapshots,
    /// `steps` counts update rounds directly.
    Updates,
}

#[derive(Debug, Clone)]
pub struct PropagationConfig {
    pub num_edge_types: usize,
    pub state_dim: usize,
    pub bias_mode: BiasMode,
    /// Divide each aggregated half by the node's incident-edge count for
    /// that direction (min 1). Off by default: aggregation is a plain sum.
    pub normalize_by_degree: bool,
    pub step_convention: StepConvention,
}

impl PropagationConfig {
    pub fn new(num_edge_types: usize, state_dim: usize) -> Self {
        PropagationConfig {
            num_edge_types,
            state_dim,
            bias_mode: BiasMode::PerEdge,
            normalize_by_degree: false,
            step_convention: StepConvention::Snapshots,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters

/// All learned tensors of one propagation model, registered in a
/// [`ParamStore`] under a caller-chosen name prefix.
///
/// Matrices act on row states from the right: the message a node receives
/// over an edge is `h_row * M`, and gate pre-activations are
/// `a_row * W + h_row * U`. Relative to column-vector notation the stored
/// shapes are transposed, so the per-type message matrices are D x D, the
/// W gates 2D x D and the U gates D x D.
pub struct PropagationParams {
    config: PropagationConfig,
    msg_out: Vec<ParamId>,
    msg_in: Vec<ParamId>,
    bias_out: Vec<ParamId>,
    bias_in: Vec<ParamId>,
    w_update: ParamId,
    u_update: ParamId,
    w_reset: ParamId,
    u_reset: ParamId,
    w_cand: ParamId,
    u_cand: ParamId,
}

impl PropagationParams {
    /// Register zero-valued parameters. Useful as a base for hand-built
    /// models and tests; training should start from [`Self::init`].
    pub fn zeros(store: &mut ParamStore, prefix: &str, config: PropagationConfig) -> Result<Self> {
        let (k, d) = Self::check_config(&config)?;
        let mut msg_out = Vec::with_capacity(k);
        let mut msg_in = Vec::with_capacity(k);
        let mut bias_out = Vec::with_capacity(k);
        let mut bias_in = Vec::with_capacity(k);
        for e in 1..=k {
            msg_out.push(store.add(&format!("{prefix}.msg_out.{e}"), Tensor::zeros(d, d)));
            msg_in.push(store.add(&format!("{prefix}.msg_in.{e}"), Tensor::zeros(d, d)));
            bias_out.push(store.add(&format!("{prefix}.bias_out.{e}"), Tensor::zeros(1, d)));
            bias_in.push(store.add(&format!("{prefix}.bias_in.{e}"), Tensor::zeros(1, d)));
        }
        Ok(PropagationParams {
            w_update: store.add(&format!("{prefix}.w_update"), Tensor::zeros(2 * d, d)),
            u_update: store.add(&format!("{prefix}.u_update"), Tensor::zeros(d, d)),
            w_reset: store.add(&format!("{prefix}.w_reset"), Tensor::zeros(2 * d, d)),
            u_reset: store.add(&format!("{prefix}.u_reset"), Tensor::zeros(d, d)),
            w_cand: store.add(&format!("{prefix}.w_cand"), Tensor::zeros(2 * d, d)),
            u_cand: store.add(&format!("{prefix}.u_cand"), Tensor::zeros(d, d)),
            config,
            msg_out,
            msg_in,
            bias_out,
            bias_in,
        })
    }

    /// Register randomly initialized parameters: matrices uniform in
    /// [-1/sqrt(D), 1/sqrt(D)], biases zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: PropagationConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let params = Self::zeros(store, prefix, config)?;
        let d = params.config.state_dim;
        let scale = 1.0 / (d as f64).sqrt();
        for e in 0..params.config.num_edge_types {
            *store.value_mut(params.msg_out[e]) = Tensor::uniform(d, d, scale, rng);
            *store.value_mut(params.msg_in[e]) = Tensor::uniform(d, d, scale, rng);
        }
        for id in [params.w_update, params.w_reset, params.w_cand] {
            *store.value_mut(id) = Tensor::uniform(2 * d, d, scale, rng);
        }
        for id in [params.u_update, params.u_reset, params.u_cand] {
            *store.value_mut(id) = Tensor::uniform(d, d, scale, rng);
        }
        Ok(params)
    }

    fn check_config(config: &PropagationConfig) -> Result<(usize, usize)> {
        if config.state_dim == 0 {
            return Err(Error::Config("state_dim must be at least 1".into()));
        }
        Ok((config.num_edge_types, config.state_dim))
    }

    pub fn config(&self) -> &PropagationConfig {
        &self.config
    }

    /// 2K(D^2 + D) message scalars plus 9D^2 gate scalars.
    pub fn num_scalars(&self) -> usize {
        let (k, d) = (self.config.num_edge_types, self.config.state_dim);
        2 * k * (d * d + d) + 9 * d * d
    }

    /// Message matrix for outgoing edges of `etype` (1-based).
    pub fn msg_out_id(&self, etype: usize) -> ParamId {
        self.msg_out[etype - 1]
    }

    pub fn msg_in_id(&self, etype: usize) -> ParamId {
        self.msg_in[etype - 1]
    }

    pub fn bias_out_id(&self, etype: usize) -> ParamId {
        self.bias_out[etype - 1]
    }

    pub fn bias_in_id(&self, etype: usize) -> ParamId {
        self.bias_in[etype - 1]
    }

    pub fn gate_ids(&self) -> GateIds {
        GateIds {
            w_update: self.w_update,
            u_update: self.u_update,
            w_reset: self.w_reset,
            u_reset: self.u_reset,
            w_cand: self.w_cand,
            u_cand: self.u_cand,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateIds {
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
}

// ---------------------------------------------------------------------------
// Forward passes

/// Pad annotation rows (already on the tape) with zero columns up to the
/// state width. Gradients flow back into `x`, which is what lets chained
/// models backpropagate through predicted annotations.
pub fn pad_annotations(tape: &mut Tape, x: Var, state_dim: usize) -> Result<Var> {
    let (rows, width) = tape.value(x).shape();
    if state_dim < width {
        return Err(Error::Config(format!(
            "state width {state_dim} smaller than annotation width {width}"
        )));
    }
    if width == 0 {
        return tape.zeros(rows, state_dim);
    }
    if state_dim == width {
        return Ok(x);
    }
    let pad = tape.zeros(rows, state_dim - width)?;
    tape.concat_cols(x, pad)
}

/// Initial node states: annotations in the leading columns, zeros after.
pub fn init_node_states(
    tape: &mut Tape,
    annotations: &AnnotationMatrix,
    state_dim: usize,
) -> Result<Var> {
    let x = tape.constant(annotations.tensor().clone())?;
    pad_annotations(tape, x, state_dim)
}

/// Sparse edge lists for one graph, grouped by type. Built once per graph
/// and reused across update rounds.
struct EdgeIndex {
    num_nodes: usize,
    // per type: (source row indices, destination row indices), parallel.
    by_type: Vec<(Vec<usize>, Vec<usize>)>,
    inv_out_degree: Option<Tensor>,
    inv_in_degree: Option<Tensor>,
}

impl EdgeIndex {
    fn new(graph: &TypedGraph, config: &PropagationConfig) -> Self {
        let mut by_type = vec![(Vec::new(), Vec::new()); graph.num_edge_types()];
        let mut out_deg = vec![0usize; graph.num_nodes()];
        let mut in_deg = vec![0usize; graph.num_nodes()];
        for e in graph.edges() {
            let (srcs, dsts) = &mut by_type[e.etype.0 - 1];
            srcs.push(e.src.index());
            dsts.push(e.dst.index());
            out_deg[e.src.index()] += 1;
            in_deg[e.dst.index()] += 1;
        }
        let inv = |deg: &[usize]| {
            Tensor::from_fn(deg.len(), config.state_dim, |r, _| {
                1.0 / deg[r].max(1) as f64
            })
        };
        let (inv_out_degree, inv_in_degree) = if config.normalize_by_degree {
            (Some(inv(&out_deg)), Some(inv(&in_deg)))
        } else {
            (None, None)
        };
        EdgeIndex { num_nodes: graph.num_nodes(), by_type, inv_out_degree, inv_in_degree }
    }
}

/// One aggregation half: for every edge, gather the sender states, apply
/// the type's message matrix (plus per-edge bias when configured), and
/// scatter-add into the receiver rows.
fn aggregate_half(
    tape: &mut Tape,
    store: &ParamStore,
    h: Var,
    index: &EdgeIndex,
    matrices: &[ParamId],
    biases: &[ParamId],
    receiver_is_src: bool,
    inv_degree: Option<&Tensor>,
    bias_mode: BiasMode,
) -> Result<Var> {
    let (n, d) = tape.value(h).shape();
    let mut half = tape.zeros(n, d)?;
    for (t, (srcs, dsts)) in index.by_type.iter().enumerate() {
        if srcs.is_empty() {
            continue;
        }
        let (senders, receivers) = if receiver_is_src { (dsts, srcs) } else { (srcs, dsts) };
        let gathered = tape.gather_rows(h, senders)?;
        let m = tape.param(store, matrices[t])?;
        let mut msgs = tape.matmul(gathered, m)?;
        if bias_mode == BiasMode::PerEdge {
            let b = tape.param(store, biases[t])?;
            msgs = tape.add_row_broadcast(msgs, b)?;
        }
        let contrib = tape.scatter_add_rows(msgs, receivers, n)?;
        half = tape.add(half, contrib)?;
    }
    if let Some(inv) = inv_degree {
        let inv = tape.constant(inv.clone())?;
        half = tape.mul(half, inv)?;
    }
    if bias_mode == BiasMode::PerNode {
        for &b in biases {
            let b = tape.param(store, b)?;
            half = tape.add_row_broadcast(half, b)?;
        }
    }
    Ok(half)
}

/// Typed-edge aggregation. Row v of the result is
/// `concat(sum over edges (v,e,w) of h_w * M_out[e] + b_out[e],
///         sum over edges (u,e,v) of h_u * M_in[e] + b_in[e])`,
/// an n x 2D matrix. Equals multiplication by the block matrix whose
/// (receiver, sender) block is the tied message matrix of the edge's type.
pub fn message_pass(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PropagationParams,
    graph: &TypedGraph,
    h: Var,
) -> Result<Var> {
    let index = EdgeIndex::new(graph, &params.config);
    message_pass_indexed(tape, store, params, &index, h)
}

fn message_pass_indexed(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PropagationParams,
    index: &EdgeIndex,
    h: Var,
) -> Result<Var> {
    let (n, d) = tape.value(h).shape();
    if d != params.config.state_dim || n != index.num_nodes {
        return Err(Error::dim(
            "message_pass",
            format!(
                "states {n}x{d} vs expected {}x{}",
                index.num_nodes, params.config.state_dim
            ),
        ));
    }
    let out_half = aggregate_half(
        tape,
        store,
        h,
        index,
        &params.msg_out,
        &params.bias_out,
        true,
        index.inv_out_degree.as_ref(),
        params.config.bias_mode,
    )?;
    let in_half = aggregate_half(
        tape,
        store,
        h,
        index,
        &params.msg_in,
        &params.bias_in,
        false,
        index.inv_in_degree.as_ref(),
        params.config.bias_mode,
    )?;
    tape.concat_cols(out_half, in_half)
}

/// GRU-style rowwise update:
/// update gate z = sigmoid(a W_z + h U_z), reset gate r = sigmoid(a W_r + h U_r),
/// candidate = tanh(a W + (r * h) U), new state = (1 - z) * h + z * candidate.
pub fn gru_update(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PropagationParams,
    h: Var,
    a: Var,
) -> Result<Var> {
    let (n, d) = tape.value(h).shape();
    if tape.value(a).shape() != (n, 2 * d) {
        return Err(Error::dim(
            "gru_update",
            format!("activations {:?} vs states {n}x{d}", tape.value(a).shape()),
        ));
    }
    let gate = |tape: &mut Tape, w: ParamId, u: ParamId, hv: Var| -> Result<Var> {
        let w = tape.param(store, w)?;
        let u = tape.param(store, u)?;
        let aw = tape.matmul(a, w)?;
        let hu = tape.matmul(hv, u)?;
        tape.add(aw, hu)
    };
    let z_pre = gate(tape, params.w_update, params.u_update, h)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, params.w_reset, params.u_reset, h)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let cand_pre = gate(tape, params.w_cand, params.u_cand, rh)?;
    let cand = tape.tanh(cand_pre)?;
    let ones = tape.constant(Tensor::ones(n, d))?;
    let keep = tape.sub(ones, z)?;
    let kept = tape.mul(keep, h)?;
    let mixed = tape.mul(z, cand)?;
    tape.add(kept, mixed)
}

/// Full unroll from raw annotations. `steps` is interpreted per the
/// config's [`StepConvention`]; with the default, `steps` state snapshots
/// mean `steps - 1` update rounds, so information travels at most
/// `steps - 1` hops.
pub fn propagate(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PropagationParams,
    graph: &TypedGraph,
    annotations: &AnnotationMatrix,
    steps: usize,
) -> Result<Var> {
    let x = tape.constant(annotations.tensor().clone())?;
    propagate_from(tape, store, params, graph, x, steps)
}

/// Full unroll from annotations already on the tape (n x L_V).
pub fn propagate_from(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PropagationParams,
    graph: &TypedGraph,
    x: Var,
    steps: usize,
) -> Result<Var> {
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let (rows, _) = tape.value(x).shape();
    if rows != graph.num_nodes() {
        return Err(Error::dim(
            "propagate",
            format!("{} annotation rows for {} nodes", rows, graph.num_nodes()),
        ));
    }
    if graph.num_edge_types() > params.config.num_edge_types {
        return Err(Error::Config(format!(
            "graph uses {} edge types, model has {}",
            graph.num_edge_types(),
            params.config.num_edge_types
        )));
    }
    let rounds = match params.config.step_convention {
        StepConvention::Snapshots => steps - 1,
        StepConvention::Updates => steps,
    };
    let index = EdgeIndex::new(graph, &params.config);
    let mut h = pad_annotations(tape, x, params.config.state_dim)?;
    for _ in 0..rounds {
        let a = message_pass_indexed(tape, store, params, &index, h)?;
        h = gru_update(tape, store, params, h, a)?;
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Hand-built reachability model

/// Saturation constant: tanh of anything this large times a surviving state
/// (>= 0.5 * 0.5) is exactly 1.0 in f64.
const SATURATE: f64 = 1000.0;

/// Hand-set parameters that mark every node reachable from the annotated
/// source without any training.
///
/// All gate weights are zero, so z = r = 1/2 everywhere. The in-direction
/// message matrix of edge type 1 copies bit 0 of each sender, and the
/// candidate weights on that bit saturate tanh. A node's bit 0 therefore
/// jumps to at least 1/2 the first round a predecessor (or itself) carries
/// the bit and climbs toward 1 afterwards, while unreached nodes stay at
/// exactly 0: after enough rounds, `bit 0 >= 0.5` decides reachability.
pub fn reachability_params(
    store: &mut ParamStore,
    prefix: &str,
    num_edge_types: usize,
    state_dim: usize,
) -> Result<PropagationParams> {
    if num_edge_types == 0 || state_dim == 0 {
        return Err(Error::Config("need at least one edge type and one state dim".into()));
    }
    let config = PropagationConfig::new(num_edge_types, state_dim);
    let params = PropagationParams::zeros(store, prefix, config)?;
    store.value_mut(params.msg_in[0]).set(0, 0, 1.0);
    // candidate pre-activation on bit 0: SATURATE * (incoming bit sum + r*own bit)
    store.value_mut(params.w_cand).set(state_dim, 0, SATURATE);
    store.value_mut(params.u_cand).set(0, 0, SATURATE);
    Ok(params)
}

/// Decide reachability for every node: run the hand-built model for
/// `steps` snapshots and threshold bit 0 at 1/2. Exact whenever the
/// distance from the source to every reachable node is below `steps`.
pub fn reachable_nodes(
    store: &ParamStore,
    params: &PropagationParams,
    graph: &TypedGraph,
    source: crate::graph::NodeId,
    steps: usize,
) -> Result<Vec<bool>> {
    let mut annotations = AnnotationMatrix::zeros(graph.num_nodes(), 1);
    annotations.set(source, 0, 1.0);
    let mut tape = Tape::new();
    let h = propagate(&mut tape, store, params, graph, &annotations, steps)?;
    let states = tape.value(h);
    Ok((0..graph.num_nodes()).map(|v| states.get(v, 0) >= 0.5).collect())
}
