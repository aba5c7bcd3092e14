//! Formula prediction: five small networks driven by one control flow.
//!
//! The procedure walks a heap graph twice. First it declares existential
//! quantifiers one at a time (a graph-binary "more?" decision followed by a
//! node pick), then it visits every name in turn and emits one shape atom
//! per name (a three-way predicate choice, a segment-end pick for lists,
//! and an annotation update that marks the explained cells). Each decision
//! is made by its own GG-NN; the surrounding bookkeeping - which nodes
//! carry names, whose turn it is - is not learned.
//!
//! The same control flow runs against two step sources: the trained
//! networks ([`GgnnSteps`], via [`batch_predict`]) and a recorded trace
//! ([`replay_trace`]), which doubles as a strict consistency check between
//! the data generator and this module.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{AnnotationMatrix, NodeId, TypedGraph};
use crate::model::{ModelKind, ModelSpec, TaskModel};
use crate::output::{AnnotationHead, OutputConfig};
use crate::params::{meta_get, read_checkpoint, write_checkpoint, ParamStore};
use crate::propagation::{propagate_from, PropagationConfig, PropagationParams};
use crate::tape::{Tape, Var};
use crate::train::{self, AdamConfig, TrainConfig, TrainOutcome, TrainableModel};

use super::data::{AnnotInstance, AnnotationTrace, ComponentData, SepInstance, StepAction};
use super::formula::{parse_formula, Atom, PredKind, SepFormula, Term};
use super::heap::{HeapGraph, ANNOT_BITS, BIT_EXPLAINED, BIT_NAMED, NUM_FIELDS};

// ---------------------------------------------------------------------------
// Annotation component

/// Propagation plus a per-node sigmoid head: predicts the next annotation
/// matrix from the current one. Unlike the four decision networks this is
/// not a [`TaskModel`] kind - its output is a whole n x 3 matrix.
pub struct AnnotationModel {
    prop: PropagationParams,
    head: AnnotationHead,
    steps: usize,
}

impl AnnotationModel {
    pub fn build(
        store: &mut ParamStore,
        num_edge_types: usize,
        state_dim: usize,
        prop_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<AnnotationModel> {
        let prop = PropagationParams::init(
            store,
            "model.prop",
            PropagationConfig::new(num_edge_types, state_dim),
            rng,
        )?;
        let head = AnnotationHead::init(store, "model.out", OutputConfig::new(state_dim, ANNOT_BITS), rng);
        Ok(AnnotationModel { prop, head, steps: prop_steps })
    }

    pub fn num_scalars(&self) -> usize {
        self.prop.num_scalars() + self.head.num_scalars()
    }

    fn probs_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &TypedGraph,
        annotations: &AnnotationMatrix,
    ) -> Result<Var> {
        let x = tape.constant(annotations.tensor().clone())?;
        let h = propagate_from(tape, store, &self.prop, graph, x, self.steps)?;
        self.head.predict(tape, store, h, x)
    }

    /// Per-bit probabilities for the next annotation matrix.
    pub fn predict_probs(
        &self,
        store: &ParamStore,
        graph: &TypedGraph,
        annotations: &AnnotationMatrix,
    ) -> Result<AnnotationMatrix> {
        let mut tape = Tape::new();
        let probs = self.probs_var(&mut tape, store, graph, annotations)?;
        let value = tape.value(probs).clone();
        Ok(AnnotationMatrix::from_tensor(value))
    }
}

impl TrainableModel for AnnotationModel {
    type Item = AnnotInstance;

    fn loss(&self, tape: &mut Tape, store: &ParamStore, item: &AnnotInstance) -> Result<Var> {
        let probs = self.probs_var(tape, store, &item.graph, &item.annotations)?;
        tape.binary_cross_entropy(probs, item.target.tensor())
    }

    /// Correct only when every bit of every node rounds to the target.
    fn correct(&self, store: &ParamStore, item: &AnnotInstance) -> Result<bool> {
        let probs = self.predict_probs(store, &item.graph, &item.annotations)?;
        for node in item.graph.nodes() {
            for bit in 0..probs.width() {
                if (probs.get(node, bit) >= 0.5) != (item.target.get(node, bit) >= 0.5) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

// ---------------------------------------------------------------------------
// The component bundle

#[derive(Debug, Clone)]
pub struct SepConfig {
    pub num_edge_types: usize,
    /// State width of the declare / pick-existential pair.
    pub select_dim: usize,
    /// State width of the predicate / list-end / annotation trio.
    pub shape_dim: usize,
    pub prop_steps: usize,
}

impl Default for SepConfig {
    fn default() -> Self {
        SepConfig { num_edge_types: NUM_FIELDS, select_dim: 16, shape_dim: 8, prop_steps: 10 }
    }
}

impl SepConfig {
    fn validate(&self) -> Result<()> {
        if self.select_dim < ANNOT_BITS || self.shape_dim < ANNOT_BITS {
            return Err(Error::Config("state width must fit the three annotation bits".into()));
        }
        if self.prop_steps == 0 {
            return Err(Error::Config("prop_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One decision network with its own parameter store.
pub struct SepComponent {
    pub spec: ModelSpec,
    pub model: TaskModel,
    pub store: ParamStore,
}

fn task_component(
    kind: ModelKind,
    dim: usize,
    config: &SepConfig,
    rng: &mut impl Rng,
) -> Result<SepComponent> {
    let mut spec = ModelSpec::new(kind, config.num_edge_types, dim, ANNOT_BITS);
    spec.prop_steps = config.prop_steps;
    let mut store = ParamStore::new();
    let model = TaskModel::build(&spec, &mut store, rng)?;
    Ok(SepComponent { spec, model, store })
}

pub struct AnnotComponent {
    pub model: AnnotationModel,
    pub store: ParamStore,
}

/// The five networks of the formula predictor. Each has its own store so
/// they train independently; checkpoints bundle them into one file.
pub struct SepModels {
    pub config: SepConfig,
    /// Graph-binary: declare another existential?
    pub declare: SepComponent,
    /// Node selection for a fresh existential's referent.
    pub pick_existential: SepComponent,
    /// Three-way shape choice for the active name.
    pub predicate: SepComponent,
    /// Node selection for the active segment's end.
    pub list_end: SepComponent,
    /// Next-annotation prediction (explained cells).
    pub annotate: AnnotComponent,
}

impl SepModels {
    pub fn build(config: &SepConfig, rng: &mut impl Rng) -> Result<SepModels> {
        config.validate()?;
        let declare =
            task_component(ModelKind::ClassifyGraph { num_classes: 2 }, config.select_dim, config, rng)?;
        let pick_existential = task_component(ModelKind::SelectNode, config.select_dim, config, rng)?;
        let predicate =
            task_component(ModelKind::ClassifyGraph { num_classes: 3 }, config.shape_dim, config, rng)?;
        let list_end = task_component(ModelKind::SelectNode, config.shape_dim, config, rng)?;
        let mut store = ParamStore::new();
        let model = AnnotationModel::build(
            &mut store,
            config.num_edge_types,
            config.shape_dim,
            config.prop_steps,
            rng,
        )?;
        Ok(SepModels {
            config: config.clone(),
            declare,
            pick_existential,
            predicate,
            list_end,
            annotate: AnnotComponent { model, store },
        })
    }

    pub fn scalar_counts(&self) -> [(&'static str, usize); 5] {
        [
            ("declare", self.declare.model.num_scalars()),
            ("pick_existential", self.pick_existential.model.num_scalars()),
            ("predicate", self.predicate.model.num_scalars()),
            ("list_end", self.list_end.model.num_scalars()),
            ("annotate", self.annotate.model.num_scalars()),
        ]
    }

    /// Train all five components on flattened per-step data. The two
    /// graph-level classifiers get class-balanced batches; their step
    /// distributions are heavily skewed (most declare answers are "no").
    pub fn train(
        &mut self,
        train_data: &ComponentData,
        valid_data: &ComponentData,
        config: &SepTrainConfig,
    ) -> Result<Vec<(&'static str, TrainOutcome)>> {
        let base = |balance: bool, offset: u64| TrainConfig {
            adam: config.adam.clone(),
            minibatch: config.minibatch,
            max_epochs: config.max_epochs,
            patience: config.patience,
            seed: config.seed.wrapping_add(offset),
            balance_classes: balance,
            clip_norm: Some(5.0),
            stop_at_perfect_validation: true,
            echo: config.echo,
        };
        let mut results = Vec::with_capacity(5);
        if config.echo {
            println!("# declare");
        }
        results.push((
            "declare",
            train::train(
                &self.declare.model,
                &mut self.declare.store,
                &train_data.declare,
                &valid_data.declare,
                &base(true, 1),
            )?,
        ));
        // Existential picks only exist for formulas with quantifiers; skip
        // the component when the grammar produced none.
        if !train_data.pick_existential.is_empty() && !valid_data.pick_existential.is_empty() {
            if config.echo {
                println!("# pick_existential");
            }
            results.push((
                "pick_existential",
                train::train(
                    &self.pick_existential.model,
                    &mut self.pick_existential.store,
                    &train_data.pick_existential,
                    &valid_data.pick_existential,
                    &base(false, 2),
                )?,
            ));
        }
        if config.echo {
            println!("# predicate");
        }
        results.push((
            "predicate",
            train::train(
                &self.predicate.model,
                &mut self.predicate.store,
                &train_data.predicate,
                &valid_data.predicate,
                &base(true, 3),
            )?,
        ));
        if !train_data.list_end.is_empty() && !valid_data.list_end.is_empty() {
            if config.echo {
                println!("# list_end");
            }
            results.push((
                "list_end",
                train::train(
                    &self.list_end.model,
                    &mut self.list_end.store,
                    &train_data.list_end,
                    &valid_data.list_end,
                    &base(false, 4),
                )?,
            ));
        }
        if config.echo {
            println!("# annotate");
        }
        results.push((
            "annotate",
            train::train(
                &self.annotate.model,
                &mut self.annotate.store,
                &train_data.annotate,
                &valid_data.annotate,
                &base(false, 5),
            )?,
        ));
        Ok(results)
    }

    // -- checkpointing ------------------------------------------------------

    fn stores(&self) -> [(&'static str, &ParamStore); 5] {
        [
            ("declare", &self.declare.store),
            ("pick_existential", &self.pick_existential.store),
            ("predicate", &self.predicate.store),
            ("list_end", &self.list_end.store),
            ("annotate", &self.annotate.store),
        ]
    }

    /// All five stores in one checkpoint, tensor names prefixed by
    /// component.
    pub fn checkpoint_string(&self) -> String {
        self.checkpoint_string_with(&[])
    }

    /// Like [`checkpoint_string`](Self::checkpoint_string), with caller
    /// metadata appended (dataset provenance, mostly).
    pub fn checkpoint_string_with(&self, extra_meta: &[(String, String)]) -> String {
        let mut combined = ParamStore::new();
        for (prefix, store) in self.stores() {
            for id in store.ids() {
                combined.add(&format!("{prefix}.{}", store.name(id)), store.value(id).clone());
            }
        }
        let c = &self.config;
        let mut meta: Vec<(String, String)> = vec![
            ("kind".into(), "seplogic-bundle".into()),
            ("num_edge_types".into(), c.num_edge_types.to_string()),
            ("select_dim".into(), c.select_dim.to_string()),
            ("shape_dim".into(), c.shape_dim.to_string()),
            ("prop_steps".into(), c.prop_steps.to_string()),
        ];
        meta.extend(extra_meta.iter().cloned());
        write_checkpoint(&combined, &meta)
    }

    pub fn from_checkpoint(text: &str) -> Result<SepModels> {
        let (combined, meta) = read_checkpoint(text)?;
        if meta_get(&meta, "kind")? != "seplogic-bundle" {
            return Err(Error::Format("checkpoint is not a formula-predictor bundle".into()));
        }
        let num = |key: &str| -> Result<usize> {
            meta_get(&meta, key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad {key} in checkpoint")))
        };
        let config = SepConfig {
            num_edge_types: num("num_edge_types")?,
            select_dim: num("select_dim")?,
            shape_dim: num("shape_dim")?,
            prop_steps: num("prop_steps")?,
        };
        let mut models = SepModels::build(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut used = 0;
        copy_component("declare", &mut models.declare.store, &combined, &mut used)?;
        copy_component("pick_existential", &mut models.pick_existential.store, &combined, &mut used)?;
        copy_component("predicate", &mut models.predicate.store, &combined, &mut used)?;
        copy_component("list_end", &mut models.list_end.store, &combined, &mut used)?;
        copy_component("annotate", &mut models.annotate.store, &combined, &mut used)?;
        if used != combined.len() {
            return Err(Error::Format(format!(
                "checkpoint carries {} tensors, models use {used}",
                combined.len()
            )));
        }
        Ok(models)
    }
}

fn copy_component(
    prefix: &str,
    store: &mut ParamStore,
    combined: &ParamStore,
    used: &mut usize,
) -> Result<()> {
    let items: Vec<(crate::params::ParamId, String)> =
        store.ids().map(|id| (id, store.name(id).to_string())).collect();
    for (id, name) in items {
        let full = format!("{prefix}.{name}");
        let src = combined
            .id_by_name(&full)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {full}")))?;
        let tensor = combined.value(src);
        if tensor.shape() != store.value(id).shape() {
            return Err(Error::dim(
                "checkpoint",
                format!(
                    "tensor {full} is {:?}, model wants {:?}",
                    tensor.shape(),
                    store.value(id).shape()
                ),
            ));
        }
        *store.value_mut(id) = tensor.clone();
        *used += 1;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SepTrainConfig {
    pub adam: AdamConfig,
    pub minibatch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub echo: bool,
}

impl Default for SepTrainConfig {
    fn default() -> Self {
        SepTrainConfig {
            adam: AdamConfig::default(),
            minibatch: 20,
            max_epochs: 300,
            patience: 50,
            seed: 0,
            echo: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Control flow

/// What the control flow knows between decisions. `labels` is what the
/// networks see; `env` maps every declared name to its node per graph.
struct AlgState<'a> {
    heaps: &'a [HeapGraph],
    labels: Vec<AnnotationMatrix>,
    /// Program variables (sorted) followed by declared existentials.
    names: Vec<String>,
    env: Vec<BTreeMap<String, NodeId>>,
}

/// The five decision points, abstracted so the trained networks and a
/// recorded trace drive the identical control flow.
trait AlgSteps {
    fn declare_more(&mut self, state: &AlgState) -> Result<bool>;
    /// One node per graph for the fresh existential.
    fn pick_existential(&mut self, state: &AlgState) -> Result<Vec<NodeId>>;
    fn pick_predicate(&mut self, state: &AlgState) -> Result<PredKind>;
    fn pick_list_end(&mut self, state: &AlgState) -> Result<Term>;
    /// Full next-annotation matrices; the control flow only trusts their
    /// explained column and re-derives the name bits itself.
    fn next_explained(&mut self, state: &AlgState) -> Result<Vec<AnnotationMatrix>>;
}

#[derive(Debug, Clone)]
pub struct SepPrediction {
    pub formula: SepFormula,
    /// The declaration loop hit its hard cap or ran out of unnamed nodes.
    pub truncated: bool,
}

/// First unused name from the t1, t2, ... sequence. Matches the generator's
/// numbering, so replayed predictions render identically.
fn fresh_name(taken: &[String]) -> String {
    for k in 1.. {
        let cand = format!("t{k}");
        if !taken.iter().any(|n| n == &cand) {
            return cand;
        }
    }
    unreachable!()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Named bits come from the control flow's own books, the active bit is
/// cleared, and only the explained column is taken from the step source
/// (rounded at 1/2).
fn rebuild_labels(
    heap: &HeapGraph,
    env: &BTreeMap<String, NodeId>,
    predicted: &AnnotationMatrix,
) -> Result<AnnotationMatrix> {
    if predicted.num_nodes() != heap.num_nodes() || predicted.width() != ANNOT_BITS {
        return Err(Error::dim(
            "annotation update",
            format!("{}x{} matrix for {} nodes", predicted.num_nodes(), predicted.width(), heap.num_nodes()),
        ));
    }
    let mut out = AnnotationMatrix::zeros(heap.num_nodes(), ANNOT_BITS);
    out.set(heap.null(), BIT_NAMED, 1.0);
    for &v in env.values() {
        out.set(v, BIT_NAMED, 1.0);
    }
    for node in heap.graph().nodes() {
        if predicted.get(node, BIT_EXPLAINED) >= 0.5 {
            out.set(node, BIT_EXPLAINED, 1.0);
        }
    }
    Ok(out)
}

fn run_algorithm(heaps: &[HeapGraph], steps: &mut impl AlgSteps) -> Result<SepPrediction> {
    if heaps.is_empty() {
        return Err(Error::Config("need at least one heap graph".into()));
    }
    let var_names: Vec<String> = heaps[0].variables().iter().map(|(n, _)| n.clone()).collect();
    for h in &heaps[1..] {
        let names: Vec<String> = h.variables().iter().map(|(n, _)| n.clone()).collect();
        if names != var_names {
            return Err(Error::Config(
                "all graphs in a batch must bind the same variable names".into(),
            ));
        }
    }
    let mut state = AlgState {
        heaps,
        labels: heaps.iter().map(|h| h.initial_annotations()).collect(),
        names: var_names,
        env: heaps.iter().map(|h| h.variables().iter().cloned().collect()).collect(),
    };

    // Declaration loop. Every pass names one node per graph, so the cap and
    // the unnamed-nodes check make it terminate even when the declare
    // network never says stop.
    let cap = heaps.iter().map(|h| h.num_nodes()).max().unwrap();
    let mut existentials: Vec<String> = Vec::new();
    let mut truncated = false;
    loop {
        if !steps.declare_more(&state)? {
            break;
        }
        let exhausted = state.heaps.iter().zip(&state.labels).any(|(h, l)| {
            h.graph().nodes().all(|v| l.get(v, BIT_NAMED) == 1.0)
        });
        if existentials.len() >= cap || exhausted {
            truncated = true;
            break;
        }
        let name = fresh_name(&state.names);
        let picks = steps.pick_existential(&state)?;
        if picks.len() != heaps.len() {
            return Err(Error::Config("one existential pick per graph expected".into()));
        }
        for (g, &v) in picks.iter().enumerate() {
            if v.0 == 0 || v.0 > heaps[g].num_nodes() {
                return Err(Error::Config("existential pick out of range".into()));
            }
            if state.labels[g].get(v, BIT_NAMED) == 1.0 {
                return Err(Error::Config("existential pick landed on a named node".into()));
            }
            state.labels[g].set(v, BIT_NAMED, 1.0);
            state.env[g].insert(name.clone(), v);
        }
        state.names.push(name.clone());
        existentials.push(name);
    }

    // One atom per name: program variables first, then the existentials in
    // declaration order.
    let round: Vec<String> = state.names.clone();
    let mut atoms = Vec::with_capacity(round.len());
    for name in &round {
        for g in 0..heaps.len() {
            let v = state.env[g][name];
            state.labels[g].set(v, super::heap::BIT_ACTIVE, 1.0);
        }
        let pred = steps.pick_predicate(&state)?;
        let atom = match pred {
            PredKind::Ls => Atom::Ls(Term::var(name), steps.pick_list_end(&state)?),
            PredKind::Tree => Atom::Tree(Term::var(name)),
            PredKind::None => Atom::None(Term::var(name)),
        };
        atoms.push(atom);
        let predicted = steps.next_explained(&state)?;
        if predicted.len() != heaps.len() {
            return Err(Error::Config("one annotation update per graph expected".into()));
        }
        for g in 0..heaps.len() {
            state.labels[g] = rebuild_labels(&heaps[g], &state.env[g], &predicted[g])?;
        }
    }
    Ok(SepPrediction { formula: SepFormula::new(existentials, atoms), truncated })
}

// ---------------------------------------------------------------------------
// Network-driven steps

/// Batch aggregation: class decisions sum logits across graphs (the argmax
/// of summed scores is the argmax of the per-graph probability product),
/// and list ends sum each candidate name's node score across graphs. Node
/// picks for existentials stay per-graph.
struct GgnnSteps<'a> {
    models: &'a SepModels,
}

impl GgnnSteps<'_> {
    fn summed_class_scores(
        &self,
        component: &SepComponent,
        state: &AlgState,
        num_classes: usize,
    ) -> Result<Vec<f64>> {
        let mut totals = vec![0.0; num_classes];
        for (heap, labels) in state.heaps.iter().zip(&state.labels) {
            let scores = component.model.class_scores(&component.store, heap.graph(), labels)?;
            if scores.len() != num_classes {
                return Err(Error::dim(
                    "classify",
                    format!("{} logits, expected {num_classes}", scores.len()),
                ));
            }
            for (t, s) in totals.iter_mut().zip(&scores) {
                *t += s;
            }
        }
        Ok(totals)
    }
}

impl AlgSteps for GgnnSteps<'_> {
    fn declare_more(&mut self, state: &AlgState) -> Result<bool> {
        let totals = self.summed_class_scores(&self.models.declare, state, 2)?;
        Ok(argmax(&totals) == 1)
    }

    fn pick_existential(&mut self, state: &AlgState) -> Result<Vec<NodeId>> {
        let comp = &self.models.pick_existential;
        let mut picks = Vec::with_capacity(state.heaps.len());
        for (heap, labels) in state.heaps.iter().zip(&state.labels) {
            let scores = comp.model.node_scores(&comp.store, heap.graph(), labels)?;
            // Masked to unnamed nodes so the pick is always usable.
            let mut best: Option<NodeId> = None;
            for node in heap.graph().nodes() {
                if labels.get(node, BIT_NAMED) == 1.0 {
                    continue;
                }
                if best.is_none_or(|b| scores[node.index()] > scores[b.index()]) {
                    best = Some(node);
                }
            }
            match best {
                Some(v) => picks.push(v),
                None => return Err(Error::Config("no unnamed node left to pick".into())),
            }
        }
        Ok(picks)
    }

    fn pick_predicate(&mut self, state: &AlgState) -> Result<PredKind> {
        let totals = self.summed_class_scores(&self.models.predicate, state, 3)?;
        PredKind::from_class(argmax(&totals))
    }

    fn pick_list_end(&mut self, state: &AlgState) -> Result<Term> {
        // Candidates are NULL plus every declared name; scoring raw nodes
        // could point at an unnamed cell no formula term can mention. NULL
        // sits first so exact ties fall toward the simpler formula.
        let mut candidates = vec![Term::Null];
        candidates.extend(state.names.iter().map(|n| Term::var(n)));
        let comp = &self.models.list_end;
        let mut totals = vec![0.0; candidates.len()];
        for (g, (heap, labels)) in state.heaps.iter().zip(&state.labels).enumerate() {
            let scores = comp.model.node_scores(&comp.store, heap.graph(), labels)?;
            for (i, cand) in candidates.iter().enumerate() {
                let node = match cand {
                    Term::Null => heap.null(),
                    Term::Var(name) => state.env[g][name],
                };
                totals[i] += scores[node.index()];
            }
        }
        Ok(candidates[argmax(&totals)].clone())
    }

    fn next_explained(&mut self, state: &AlgState) -> Result<Vec<AnnotationMatrix>> {
        let comp = &self.models.annotate;
        state
            .heaps
            .iter()
            .zip(&state.labels)
            .map(|(heap, labels)| comp.model.predict_probs(&comp.store, heap.graph(), labels))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Trace-driven steps

/// Replays a recorded trace through the control flow, checking at every
/// step that the control flow's annotation matrix matches the recorded one
/// exactly. Single-graph batches only.
struct TraceSteps<'a> {
    steps: std::slice::Iter<'a, TraceStepRef<'a>>,
}

type TraceStepRef<'a> = &'a super::data::TraceStep;

impl TraceSteps<'_> {
    fn next_action(&mut self, state: &AlgState) -> Result<&StepAction> {
        let step = self
            .steps
            .next()
            .ok_or_else(|| Error::Config("trace ended before the control flow did".into()))?;
        if state.labels[0] != step.annot {
            return Err(Error::Config(
                "control-flow annotations diverged from the recorded trace".into(),
            ));
        }
        Ok(&step.action)
    }
}

impl AlgSteps for TraceSteps<'_> {
    fn declare_more(&mut self, state: &AlgState) -> Result<bool> {
        match self.next_action(state)? {
            StepAction::DeclareMore(more) => Ok(*more),
            _ => Err(Error::Config("trace step is not a declare decision".into())),
        }
    }

    fn pick_existential(&mut self, state: &AlgState) -> Result<Vec<NodeId>> {
        match self.next_action(state)? {
            StepAction::PickExistential(node) => Ok(vec![*node]),
            _ => Err(Error::Config("trace step is not an existential pick".into())),
        }
    }

    fn pick_predicate(&mut self, state: &AlgState) -> Result<PredKind> {
        match self.next_action(state)? {
            StepAction::PickPredicate(kind) => Ok(*kind),
            _ => Err(Error::Config("trace step is not a predicate choice".into())),
        }
    }

    fn pick_list_end(&mut self, state: &AlgState) -> Result<Term> {
        match self.next_action(state)? {
            StepAction::PickListEnd(node) => {
                if *node == state.heaps[0].null() {
                    return Ok(Term::Null);
                }
                for (name, v) in &state.env[0] {
                    if v == node {
                        return Ok(Term::var(name));
                    }
                }
                Err(Error::Config("trace list end is not a named node".into()))
            }
            _ => Err(Error::Config("trace step is not a list-end pick".into())),
        }
    }

    fn next_explained(&mut self, state: &AlgState) -> Result<Vec<AnnotationMatrix>> {
        match self.next_action(state)? {
            StepAction::UpdateAnnotations(m) => Ok(vec![m.clone()]),
            _ => Err(Error::Config("trace step is not an annotation update".into())),
        }
    }
}

// ---------------------------------------------------------------------------
// Entry points

/// Predict one formula from several heaps known to share it. Decisions
/// aggregate evidence across the whole batch.
pub fn batch_predict(heaps: &[HeapGraph], models: &SepModels) -> Result<SepPrediction> {
    run_algorithm(heaps, &mut GgnnSteps { models })
}

pub fn predict_formula(heap: &HeapGraph, models: &SepModels) -> Result<SepPrediction> {
    batch_predict(std::slice::from_ref(heap), models)
}

/// Drive the control flow from a recorded trace instead of networks. The
/// result must reproduce the trace's formula; any bookkeeping drift between
/// generator and predictor surfaces here as an error.
pub fn replay_trace(heap: &HeapGraph, trace: &AnnotationTrace) -> Result<SepPrediction> {
    let refs: Vec<TraceStepRef> = trace.steps.iter().collect();
    let mut steps = TraceSteps { steps: refs.iter() };
    let prediction = run_algorithm(std::slice::from_ref(heap), &mut steps)?;
    if steps.steps.next().is_some() {
        return Err(Error::Config("control flow finished with trace steps left over".into()));
    }
    Ok(prediction)
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SepEvalReport {
    /// Prediction units: instances for per-graph evaluation, formulas for
    /// batched evaluation.
    pub n: usize,
    /// Fraction of predictions logically equivalent to the ground truth.
    pub accuracy: f64,
    /// Fraction of predictions that re-parse as well-formed formulas.
    pub valid_fraction: f64,
    /// Predictions whose declaration loop was cut short.
    pub truncated: usize,
}

fn score_prediction(
    prediction: &SepPrediction,
    truth: &SepFormula,
    right: &mut usize,
    valid: &mut usize,
    truncated: &mut usize,
) {
    if prediction.truncated {
        *truncated += 1;
    }
    if prediction.formula.equivalent(truth) {
        *right += 1;
    }
    if parse_formula(&prediction.formula.to_string()).is_ok() {
        *valid += 1;
    }
}

/// One prediction per heap, each scored against its formula.
pub fn evaluate_formulas(
    models: &SepModels,
    instances: &[SepInstance],
    formulas: &[SepFormula],
) -> Result<SepEvalReport> {
    if instances.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let (mut right, mut valid, mut truncated) = (0, 0, 0);
    for inst in instances {
        let prediction = predict_formula(&inst.heap, models)?;
        score_prediction(&prediction, &formulas[inst.formula], &mut right, &mut valid, &mut truncated);
    }
    let n = instances.len();
    Ok(SepEvalReport {
        n,
        accuracy: right as f64 / n as f64,
        valid_fraction: valid as f64 / n as f64,
        truncated,
    })
}

/// One prediction per formula, aggregating all heaps that share it.
pub fn evaluate_batched(
    models: &SepModels,
    instances: &[SepInstance],
    formulas: &[SepFormula],
) -> Result<SepEvalReport> {
    if instances.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let mut groups: BTreeMap<usize, Vec<HeapGraph>> = BTreeMap::new();
    for inst in instances {
        groups.entry(inst.formula).or_default().push(inst.heap.clone());
    }
    let (mut right, mut valid, mut truncated) = (0, 0, 0);
    let n = groups.len();
    for (formula, heaps) in groups {
        let prediction = batch_predict(&heaps, models)?;
        score_prediction(&prediction, &formulas[formula], &mut right, &mut valid, &mut truncated);
    }
    Ok(SepEvalReport {
        n,
        accuracy: right as f64 / n as f64,
        valid_fraction: valid as f64 / n as f64,
        truncated,
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seplogic::data::{
        build_sep_dataset, component_data, sample_heap_graphs, SampleConfig, SepDataConfig,
    };
    use crate::tape::{gradcheck, GRADCHECK_EPS};

    fn sample_one(text: &str, seed: u64, max_nodes: usize) -> (SepFormula, HeapGraph, AnnotationTrace) {
        let formula = parse_formula(text).unwrap().canonicalize();
        let mut out = sample_heap_graphs(
            &formula,
            &SampleConfig { count: 1, min_nodes: 3, max_nodes, seed },
        )
        .unwrap();
        let (heap, trace) = out.pop().unwrap();
        (formula, heap, trace)
    }

    #[test]
    fn trace_replay_reproduces_every_generated_formula() {
        let config = SepDataConfig {
            max_formulas: 14,
            train_graphs_per_formula: 3,
            eval_graphs_per_formula: 2,
            max_nodes: 10,
            seed: 5,
            ..SepDataConfig::default()
        };
        let data = build_sep_dataset(&config).unwrap();
        // 14 formulas split 8/2/4, with 3 train and 2 eval graphs each.
        let total = data.train.len() + data.valid.len() + data.test.len();
        assert_eq!(total, 8 * 3 + 2 * 2 + 4 * 2);
        let all = data.train.iter().chain(&data.valid).chain(&data.test);
        let mut checked = 0;
        for inst in all {
            let replayed = replay_trace(&inst.heap, &inst.trace).unwrap();
            assert!(!replayed.truncated);
            let truth = &data.formulas[inst.formula];
            assert!(
                replayed.formula.equivalent(truth),
                "replayed {} from a heap of {}",
                replayed.formula,
                truth
            );
            // Same canonical naming scheme on both sides, so even the
            // rendered text matches.
            assert_eq!(replayed.formula.canonicalize().to_string(), truth.to_string());
            checked += 1;
        }
        assert_eq!(checked, total);
    }

    #[test]
    fn replay_rejects_traces_from_a_different_heap() {
        let (_, heap_a, trace_a) = sample_one("exists t1 . ls(x, t1) * ls(t1, t1)", 3, 8);
        let (_, heap_b, _) = sample_one("ls(x, NULL)", 4, 8);
        // Wrong graph: either a shape mismatch or an annotation divergence.
        assert!(replay_trace(&heap_b, &trace_a).is_err());
        // Truncating the trace leaves the control flow starved.
        let mut cut = trace_a.clone();
        cut.steps.truncate(2);
        assert!(replay_trace(&heap_a, &cut).is_err());
    }

    #[test]
    fn untrained_models_still_emit_well_formed_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let config = SepConfig { select_dim: 8, shape_dim: 6, prop_steps: 4, ..SepConfig::default() };
        for (seed, text) in
            [(1, "ls(x, NULL)"), (2, "exists t1 . ls(x, t1) * ls(t1, t1)"), (3, "tree(x) * none(y)")]
                .into_iter()
        {
            let models = SepModels::build(&config, &mut rng).unwrap();
            let (_, heap, _) = sample_one(text, seed, 9);
            let prediction = predict_formula(&heap, &models).unwrap();
            let rendered = prediction.formula.to_string();
            let reparsed = parse_formula(&rendered).unwrap();
            assert!(reparsed.equivalent(&prediction.formula));
            // Every variable of the heap gets exactly one atom, whatever
            // the (random) networks decided.
            let vars: std::collections::BTreeSet<String> =
                heap.variables().iter().map(|(n, _)| n.clone()).collect();
            assert_eq!(prediction.formula.free_vars(), vars);
            assert_eq!(
                prediction.formula.atoms.len(),
                vars.len() + prediction.formula.existentials.len()
            );
        }
    }

    #[test]
    fn batched_prediction_matches_single_on_identical_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let config = SepConfig { select_dim: 8, shape_dim: 6, prop_steps: 4, ..SepConfig::default() };
        let models = SepModels::build(&config, &mut rng).unwrap();
        let (_, heap, _) = sample_one("exists t1 . ls(x, t1) * tree(t1)", 9, 9);
        let single = predict_formula(&heap, &models).unwrap();
        let batch =
            batch_predict(&[heap.clone(), heap.clone(), heap.clone()], &models).unwrap();
        // Tripling every summed score moves no argmax.
        assert_eq!(single.formula.to_string(), batch.formula.to_string());
        assert_eq!(single.truncated, batch.truncated);
    }

    #[test]
    fn summed_scores_pick_the_probability_product_argmax() {
        // softmax(a) * softmax(b) elementwise is proportional to
        // softmax(a + b), so summing logits across a batch and taking the
        // argmax is exactly the product-of-probabilities decision.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..200 {
            let k = rng.random_range(2..6usize);
            let a: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            let soft = |v: &[f64]| -> Vec<f64> {
                let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            };
            let product: Vec<f64> =
                soft(&a).iter().zip(soft(&b)).map(|(p, q)| p * q).collect();
            let summed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            assert_eq!(argmax(&product), argmax(&summed));
        }
    }

    #[test]
    fn batch_input_validation_catches_misuse() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let config = SepConfig { select_dim: 8, shape_dim: 6, prop_steps: 3, ..SepConfig::default() };
        let models = SepModels::build(&config, &mut rng).unwrap();
        assert!(batch_predict(&[], &models).is_err());
        let (_, heap_x, _) = sample_one("ls(x, NULL)", 1, 6);
        let (_, heap_xy, _) = sample_one("ls(x, y) * tree(y)", 2, 8);
        assert!(batch_predict(&[heap_x, heap_xy], &models).is_err());
    }

    #[test]
    fn annotation_model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (_, heap, trace) = sample_one("exists t1 . ls(x, t1) * ls(t1, t1)", 6, 7);
        // The last update step has non-trivial bits in both input and
        // target.
        let item = trace
            .steps
            .iter()
            .rev()
            .find_map(|s| match &s.action {
                StepAction::UpdateAnnotations(next) => Some(AnnotInstance {
                    graph: heap.graph().clone(),
                    annotations: s.annot.clone(),
                    target: next.clone(),
                }),
                _ => None,
            })
            .unwrap();
        let mut store = ParamStore::new();
        let model = AnnotationModel::build(&mut store, NUM_FIELDS, 4, 3, &mut rng).unwrap();
        let report = gradcheck(
            &mut store,
            |s, tape| model.loss(tape, s, &item),
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst {:?}", report.worst);
    }

    #[test]
    fn component_budgets_stay_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let models = SepModels::build(&SepConfig::default(), &mut rng).unwrap();
        for (name, scalars) in models.scalar_counts() {
            assert!(scalars < 5000, "{name} uses {scalars} parameters");
        }
    }

    #[test]
    fn bundle_checkpoint_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let config = SepConfig { select_dim: 6, shape_dim: 5, prop_steps: 3, ..SepConfig::default() };
        let models = SepModels::build(&config, &mut rng).unwrap();
        let text = models.checkpoint_string();
        let restored = SepModels::from_checkpoint(&text).unwrap();
        for ((_, a), (_, b)) in models.stores().into_iter().zip(restored.stores()) {
            assert_eq!(a.len(), b.len());
            for id in a.ids() {
                assert_eq!(a.name(id), b.name(id));
                assert_eq!(a.value(id), b.value(id));
            }
        }
        let (_, heap, _) = sample_one("exists t1 . ls(x, t1) * tree(t1)", 12, 9);
        let before = predict_formula(&heap, &models).unwrap();
        let after = predict_formula(&heap, &restored).unwrap();
        assert_eq!(before.formula.to_string(), after.formula.to_string());

        assert!(SepModels::from_checkpoint("not a checkpoint").is_err());
        let mut other_meta = ParamStore::new();
        other_meta.add("w", crate::tensor::Tensor::zeros(1, 1));
        let wrong =
            write_checkpoint(&other_meta, &[("kind".to_string(), "task-model".to_string())]);
        assert!(SepModels::from_checkpoint(&wrong).is_err());
    }

    #[test]
    fn five_components_fit_a_tiny_world_end_to_end() {
        // Small dims and few epochs: this checks the plumbing, not the
        // score. Learning quality is covered by the focused test below and
        // by the full acceptance run.
        let data_config = SepDataConfig {
            num_vars: 1,
            max_formulas: 6,
            train_graphs_per_formula: 4,
            eval_graphs_per_formula: 2,
            // A lone none(x) heap is just NULL plus one marker cell.
            min_nodes: 2,
            max_nodes: 8,
            seed: 2,
            ..SepDataConfig::default()
        };
        let data = build_sep_dataset(&data_config).unwrap();
        let train_data = component_data(&data.train);
        let valid_data = component_data(&data.valid);
        let config = SepConfig { select_dim: 8, shape_dim: 6, prop_steps: 4, ..SepConfig::default() };
        let mut models = SepModels::build(&config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let results = models
            .train(
                &train_data,
                &valid_data,
                &SepTrainConfig { max_epochs: 4, patience: 4, ..SepTrainConfig::default() },
            )
            .unwrap();
        assert!(results.len() >= 3);
        for (name, outcome) in &results {
            assert!(outcome.best_valid_loss.is_finite(), "{name} diverged");
        }
        let report = evaluate_formulas(&models, &data.test, &data.formulas).unwrap();
        assert_eq!(report.n, data.test.len());
        // Whatever the networks decided, the emitted formulas parse.
        assert_eq!(report.valid_fraction, 1.0);
        let batched = evaluate_batched(&models, &data.test, &data.formulas).unwrap();
        assert_eq!(batched.n, data.test_formulas.len());
        assert_eq!(batched.valid_fraction, 1.0);
    }

    #[test]
    fn predicate_component_learns_shapes_quickly() {
        // The three-way shape choice is nearly syntactic (the active node's
        // outgoing fields give it away), so a few epochs must solve it.
        let data_config = SepDataConfig {
            max_formulas: 20,
            train_graphs_per_formula: 2,
            eval_graphs_per_formula: 1,
            max_nodes: 9,
            seed: 11,
            ..SepDataConfig::default()
        };
        let data = build_sep_dataset(&data_config).unwrap();
        let train_data = component_data(&data.train);
        let valid_data = component_data(&data.valid);
        let config = SepConfig::default();
        let mut models = SepModels::build(&config, &mut ChaCha8Rng::seed_from_u64(19)).unwrap();
        let outcome = train::train(
            &models.predicate.model,
            &mut models.predicate.store,
            &train_data.predicate,
            &valid_data.predicate,
            &TrainConfig {
                max_epochs: 60,
                patience: 60,
                balance_classes: true,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(
            outcome.best_valid_acc >= 0.8,
            "predicate component stuck at {}",
            outcome.best_valid_acc
        );
    }
}
