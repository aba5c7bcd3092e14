//! Task-facing models: one type that bundles propagation with an output
//! head, knows how to compute its loss on a training instance, and can be
//! rebuilt from a checkpoint.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::graph::{AnnotationMatrix, NodeId, TypedGraph};
use crate::output::{softmax, GraphClassificationHead, NodeSelectionHead, OutputConfig};
use crate::params::{read_checkpoint, write_checkpoint, ParamId, ParamStore};
use crate::propagation::{propagate_from, PropagationConfig, PropagationParams};
use crate::sequence::{
    loss_latent, loss_observed, run_sequence, AnnotationFeeding, SeqToken, SequenceKind,
    SequenceModel, SequenceSpec, StepTrace,
};
use crate::tape::{Tape, Var};

/// What a question wants from the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Node(NodeId),
    Class(usize),
    Sequence(Vec<SeqToken>),
}

/// One training or evaluation example: a graph, the question's initial
/// annotations, and the expected output. `observed` optionally carries the
/// ground-truth annotation chain X^(2..K) for teacher-forced sequence
/// training.
#[derive(Debug, Clone)]
pub struct GraphInstance {
    pub graph: TypedGraph,
    pub annotations: AnnotationMatrix,
    pub target: Target,
    pub observed: Option<Vec<AnnotationMatrix>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    /// Teacher-forced: per-step losses on observed annotations.
    Observed,
    /// End-to-end: annotations are hidden, gradients flow through the chain.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelKind {
    /// Softmax over the graph's nodes; answers are single nodes.
    SelectNode,
    /// Pooled readout plus a classifier; answers are single classes.
    ClassifyGraph { num_classes: usize },
    /// Node token sequence ending in a learned end score.
    NodeSequence { mode: TrainingMode },
    /// Class token sequence with an extra end class.
    ClassSequence { num_real: usize, mode: TrainingMode },
}

/// Everything needed to rebuild a model's parameter layout from scratch.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub num_edge_types: usize,
    pub state_dim: usize,
    pub annot_dim: usize,
    /// Snapshots per propagation run.
    pub prop_steps: usize,
    /// Sequence step budget; `None` = kind-dependent default.
    pub max_steps: Option<usize>,
    pub shared_propagation: bool,
    pub hidden_dim: Option<usize>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, num_edge_types: usize, state_dim: usize, annot_dim: usize) -> Self {
        ModelSpec {
            kind,
            num_edge_types,
            state_dim,
            annot_dim,
            prop_steps: 5,
            max_steps: None,
            shared_propagation: true,
            hidden_dim: None,
        }
    }

    fn propagation_config(&self) -> PropagationConfig {
        PropagationConfig::new(self.num_edge_types, self.state_dim)
    }

    fn output_config(&self) -> OutputConfig {
        let mut config = OutputConfig::new(self.state_dim, self.annot_dim);
        config.hidden_dim = self.hidden_dim;
        config
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        let mut meta = Vec::new();
        let mut push = |k: &str, v: String| meta.push((k.to_string(), v));
        let (kind, mode) = match &self.kind {
            ModelKind::SelectNode => ("select_node", None),
            ModelKind::ClassifyGraph { num_classes } => {
                push("num_classes", num_classes.to_string());
                ("classify_graph", None)
            }
            ModelKind::NodeSequence { mode } => ("node_sequence", Some(mode)),
            ModelKind::ClassSequence { num_real, mode } => {
                push("num_real", num_real.to_string());
                ("class_sequence", Some(mode))
            }
        };
        push("kind", kind.to_string());
        if let Some(mode) = mode {
            let mode = match mode {
                TrainingMode::Observed => "observed",
                TrainingMode::Latent => "latent",
            };
            push("mode", mode.to_string());
        }
        push("num_edge_types", self.num_edge_types.to_string());
        push("state_dim", self.state_dim.to_string());
        push("annot_dim", self.annot_dim.to_string());
        push("prop_steps", self.prop_steps.to_string());
        if let Some(m) = self.max_steps {
            push("max_steps", m.to_string());
        }
        push("shared_propagation", self.shared_propagation.to_string());
        if let Some(h) = self.hidden_dim {
            push("hidden_dim", h.to_string());
        }
        meta
    }

    pub fn from_meta(meta: &[(String, String)]) -> Result<ModelSpec> {
        let get = |k: &str| -> Result<&str> {
            meta.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint meta missing {k}")))
        };
        let opt = |k: &str| meta.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("bad meta value for {k}")))
        };
        let mode = || -> Result<TrainingMode> {
            match get("mode")? {
                "observed" => Ok(TrainingMode::Observed),
                "latent" => Ok(TrainingMode::Latent),
                other => Err(Error::Format(format!("unknown training mode {other}"))),
            }
        };
        let kind = match get("kind")? {
            "select_node" => ModelKind::SelectNode,
            "classify_graph" => ModelKind::ClassifyGraph { num_classes: num("num_classes")? },
            "node_sequence" => ModelKind::NodeSequence { mode: mode()? },
            "class_sequence" => {
                ModelKind::ClassSequence { num_real: num("num_real")?, mode: mode()? }
            }
            other => return Err(Error::Format(format!("unknown model kind {other}"))),
        };
        let max_steps = match opt("max_steps") {
            Some(v) => {
                Some(v.parse().map_err(|_| Error::Format("bad meta value for max_steps".into()))?)
            }
            None => None,
        };
        let hidden_dim = match opt("hidden_dim") {
            Some(v) => {
                Some(v.parse().map_err(|_| Error::Format("bad meta value for hidden_dim".into()))?)
            }
            None => None,
        };
        Ok(ModelSpec {
            kind,
            num_edge_types: num("num_edge_types")?,
            state_dim: num("state_dim")?,
            annot_dim: num("annot_dim")?,
            prop_steps: num("prop_steps")?,
            max_steps,
            shared_propagation: get("shared_propagation")? == "true",
            hidden_dim,
        })
    }
}

pub enum TaskModel {
    SelectNode { prop: PropagationParams, head: NodeSelectionHead, steps: usize },
    ClassifyGraph { prop: PropagationParams, head: GraphClassificationHead, steps: usize },
    Sequence { model: SequenceModel, mode: TrainingMode },
}

impl TaskModel {
    pub fn build(spec: &ModelSpec, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        Self::assemble(spec, store, Some(rng))
    }

    /// Same layout as [`Self::build`] with all parameters zero; checkpoint
    /// loading overwrites the values anyway.
    fn build_zeroed(spec: &ModelSpec, store: &mut ParamStore) -> Result<Self> {
        Self::assemble(spec, store, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    fn assemble(
        spec: &ModelSpec,
        store: &mut ParamStore,
        mut rng: Option<&mut impl Rng>,
    ) -> Result<Self> {
        if spec.prop_steps == 0 {
            return Err(Error::Config("prop_steps must be at least 1".into()));
        }
        let prop_config = spec.propagation_config();
        let out_config = spec.output_config();
        let prop = |store: &mut ParamStore, rng: &mut Option<&mut _>| match rng {
            Some(rng) => PropagationParams::init(store, "model.prop", prop_config.clone(), rng),
            None => PropagationParams::zeros(store, "model.prop", prop_config.clone()),
        };
        match &spec.kind {
            ModelKind::SelectNode => {
                let prop = prop(store, &mut rng)?;
                let head = match &mut rng {
                    Some(rng) => NodeSelectionHead::init(store, "model.out", out_config, rng),
                    None => NodeSelectionHead::zeros(store, "model.out", out_config),
                };
                Ok(TaskModel::SelectNode { prop, head, steps: spec.prop_steps })
            }
            ModelKind::ClassifyGraph { num_classes } => {
                if *num_classes < 2 {
                    return Err(Error::Config("need at least two classes".into()));
                }
                let prop = prop(store, &mut rng)?;
                let head = match &mut rng {
                    Some(rng) => GraphClassificationHead::init(
                        store,
                        "model.out",
                        out_config,
                        *num_classes,
                        rng,
                    ),
                    None => {
                        GraphClassificationHead::zeros(store, "model.out", out_config, *num_classes)
                    }
                };
                Ok(TaskModel::ClassifyGraph { prop, head, steps: spec.prop_steps })
            }
            ModelKind::NodeSequence { mode } | ModelKind::ClassSequence { mode, .. } => {
                let kind = match &spec.kind {
                    ModelKind::NodeSequence { .. } => SequenceKind::NodeTokens,
                    ModelKind::ClassSequence { num_real, .. } => {
                        SequenceKind::ClassTokens { num_real: *num_real }
                    }
                    _ => unreachable!(),
                };
                let mut seq_spec = SequenceSpec::new(prop_config, out_config, kind);
                seq_spec.prop_steps = spec.prop_steps;
                seq_spec.max_steps = spec.max_steps;
                seq_spec.shared_propagation = spec.shared_propagation;
                let model = match rng {
                    Some(rng) => SequenceModel::init(store, "model", seq_spec, rng)?,
                    None => {
                        // no zero constructor for the bundled model; init with
                        // a fixed rng, then blank exactly the params it added
                        let start = store.len();
                        let mut fixed = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                        let model = SequenceModel::init(store, "model", seq_spec, &mut fixed)?;
                        for i in start..store.len() {
                            store.value_mut(ParamId(i)).fill(0.0);
                        }
                        model
                    }
                };
                Ok(TaskModel::Sequence { model, mode: *mode })
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        match self {
            TaskModel::SelectNode { prop, head, .. } => prop.num_scalars() + head.num_scalars(),
            TaskModel::ClassifyGraph { prop, head, .. } => prop.num_scalars() + head.num_scalars(),
            TaskModel::Sequence { model, .. } => model.num_scalars(),
        }
    }

    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, inst: &GraphInstance) -> Result<Var> {
        match self {
            TaskModel::SelectNode { prop, head, steps } => {
                let target = match &inst.target {
                    Target::Node(v) => v.index(),
                    _ => return Err(Error::Config("node-selection model needs node targets".into())),
                };
                let x = tape.constant(inst.annotations.tensor().clone())?;
                let h = propagate_from(tape, store, prop, &inst.graph, x, *steps)?;
                let scores = head.scores(tape, store, h, x)?;
                tape.softmax_cross_entropy(scores, target)
            }
            TaskModel::ClassifyGraph { prop, head, steps } => {
                let target = match &inst.target {
                    Target::Class(c) => *c,
                    _ => return Err(Error::Config("classification model needs class targets".into())),
                };
                if target >= head.num_classes() {
                    return Err(Error::Config(format!("target class {target} out of range")));
                }
                let x = tape.constant(inst.annotations.tensor().clone())?;
                let h = propagate_from(tape, store, prop, &inst.graph, x, *steps)?;
                let logits = head.logits(tape, store, h, x)?;
                tape.softmax_cross_entropy(logits, target)
            }
            TaskModel::Sequence { model, mode } => {
                let targets = match &inst.target {
                    Target::Sequence(t) => t.as_slice(),
                    _ => return Err(Error::Config("sequence model needs sequence targets".into())),
                };
                match mode {
                    TrainingMode::Latent => loss_latent(
                        tape,
                        store,
                        model,
                        &inst.graph,
                        &inst.annotations,
                        targets,
                    ),
                    TrainingMode::Observed => {
                        let mut chain = vec![inst.annotations.clone()];
                        if let Some(observed) = &inst.observed {
                            chain.extend(observed.iter().cloned());
                        }
                        loss_observed(tape, store, model, &inst.graph, &chain, targets)
                    }
                }
            }
        }
    }

    /// Raw per-node selection scores on a fresh tape (node-selection models
    /// only). Softmax of the result is the selection distribution.
    pub fn node_scores(
        &self,
        store: &ParamStore,
        graph: &TypedGraph,
        annotations: &AnnotationMatrix,
    ) -> Result<Vec<f64>> {
        match self {
            TaskModel::SelectNode { prop, head, steps } => {
                let mut tape = Tape::new();
                let x = tape.constant(annotations.tensor().clone())?;
                let h = propagate_from(&mut tape, store, prop, graph, x, *steps)?;
                let scores = head.scores(&mut tape, store, h, x)?;
                Ok(tape.value(scores).data().to_vec())
            }
            _ => Err(Error::Config("not a node-selection model".into())),
        }
    }

    /// Raw class logits on a fresh tape (classification models only).
    pub fn class_scores(
        &self,
        store: &ParamStore,
        graph: &TypedGraph,
        annotations: &AnnotationMatrix,
    ) -> Result<Vec<f64>> {
        match self {
            TaskModel::ClassifyGraph { prop, head, steps } => {
                let mut tape = Tape::new();
                let x = tape.constant(annotations.tensor().clone())?;
                let h = propagate_from(&mut tape, store, prop, graph, x, *steps)?;
                let logits = head.logits(&mut tape, store, h, x)?;
                Ok(tape.value(logits).data().to_vec())
            }
            _ => Err(Error::Config("not a classification model".into())),
        }
    }

    /// Greedy prediction for one instance.
    pub fn predict(&self, store: &ParamStore, inst: &GraphInstance) -> Result<Target> {
        match self {
            TaskModel::SelectNode { prop, head, steps } => {
                let mut tape = Tape::new();
                let x = tape.constant(inst.annotations.tensor().clone())?;
                let h = propagate_from(&mut tape, store, prop, &inst.graph, x, *steps)?;
                let scores = head.scores(&mut tape, store, h, x)?;
                let p = softmax(tape.value(scores).data());
                Ok(Target::Node(NodeId::from_index(argmax(&p))))
            }
            TaskModel::ClassifyGraph { prop, head, steps } => {
                let mut tape = Tape::new();
                let x = tape.constant(inst.annotations.tensor().clone())?;
                let h = propagate_from(&mut tape, store, prop, &inst.graph, x, *steps)?;
                let logits = head.logits(&mut tape, store, h, x)?;
                let p = softmax(tape.value(logits).data());
                Ok(Target::Class(argmax(&p)))
            }
            TaskModel::Sequence { .. } => {
                let trace = self.trace(store, inst)?;
                Ok(Target::Sequence(trace.tokens()))
            }
        }
    }

    /// Full decoding trace (sequence models only).
    pub fn trace(&self, store: &ParamStore, inst: &GraphInstance) -> Result<StepTrace> {
        match self {
            TaskModel::Sequence { model, mode } => {
                let feeding = match mode {
                    TrainingMode::Latent => AnnotationFeeding::Continuous,
                    TrainingMode::Observed => AnnotationFeeding::Thresholded,
                };
                run_sequence(store, model, &inst.graph, &inst.annotations, feeding)
            }
            _ => Err(Error::Config("not a sequence model".into())),
        }
    }

    pub fn correct(&self, store: &ParamStore, inst: &GraphInstance) -> Result<bool> {
        match self {
            TaskModel::Sequence { .. } => {
                let trace = self.trace(store, inst)?;
                let want = match &inst.target {
                    Target::Sequence(t) => t.as_slice(),
                    _ => return Err(Error::Config("sequence model needs sequence targets".into())),
                };
                Ok(trace.matches(want))
            }
            _ => Ok(self.predict(store, inst)? == inst.target),
        }
    }

    /// Key used when minibatches are class-balanced.
    pub fn class_key(&self, inst: &GraphInstance) -> usize {
        match &inst.target {
            Target::Node(v) => v.index(),
            Target::Class(c) => *c,
            Target::Sequence(tokens) => match tokens.first() {
                Some(SeqToken::Class(c)) => *c,
                Some(SeqToken::Node(v)) => v.index(),
                _ => 0,
            },
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Checkpointing

/// Serialize spec + parameters (+ caller metadata) into the versioned
/// checkpoint text format.
pub fn checkpoint_string(
    spec: &ModelSpec,
    store: &ParamStore,
    extra_meta: &[(String, String)],
) -> String {
    let mut meta = spec.to_meta();
    meta.extend(extra_meta.iter().cloned());
    write_checkpoint(store, &meta)
}

pub struct LoadedModel {
    pub spec: ModelSpec,
    pub model: TaskModel,
    pub store: ParamStore,
    pub meta: Vec<(String, String)>,
}

/// Rebuild a model from checkpoint text: the spec recreates the parameter
/// layout, then every stored tensor is matched by name. A checkpoint whose
/// tensors do not exactly fit the spec is rejected.
pub fn load_model(text: &str) -> Result<LoadedModel> {
    let (loaded, meta) = read_checkpoint(text)?;
    let spec = ModelSpec::from_meta(&meta)?;
    let mut store = ParamStore::new();
    let model = TaskModel::build_zeroed(&spec, &mut store)?;
    if loaded.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for id in loaded.ids() {
        let name = loaded.name(id);
        let dst = store
            .id_by_name(name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} not in model")))?;
        if store.value(dst).shape() != loaded.value(id).shape() {
            return Err(Error::Format(format!("checkpoint tensor {name} has the wrong shape")));
        }
        *store.value_mut(dst) = loaded.value(id).clone();
    }
    Ok(LoadedModel { spec, model, store, meta })
}
