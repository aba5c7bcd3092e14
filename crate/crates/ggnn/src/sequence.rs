//! Sequence outputs from a graph: a chain of per-step predictions.
//!
//! Each step runs propagation from the current annotations, emits one
//! token (a node or a class, with an extra "end" choice), and, unless the
//! sequence stops, predicts the next annotations that carry state to the
//! following step. Training comes in two regimes: observed, where ground
//! truth annotations are teacher-forced and the loss decomposes per step,
//! and latent, where the continuous annotation predictions are chained and
//! gradients flow through the whole unroll.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{AnnotationMatrix, NodeId, TypedGraph};
use crate::output::{softmax, AnnotationHead, GraphClassificationHead, NodeSelectionHead, OutputConfig};
use crate::params::{ParamId, ParamStore};
use crate::propagation::{propagate_from, PropagationConfig, PropagationParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// What kind of token a step emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceKind {
    /// One node of the graph per step (plus a learned end score).
    NodeTokens,
    /// One of `num_real` task classes per step; the end token is an extra
    /// class appended after the real ones.
    ClassTokens { num_real: usize },
}

/// One emitted token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqToken {
    Node(NodeId),
    Class(usize),
    End,
}

/// How predicted annotations are fed to the next step at test time.
/// Latent-trained models chain the continuous sigmoid values (that is what
/// they saw during training); observed-trained models round to bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationFeeding {
    Continuous,
    Thresholded,
}

#[derive(Debug, Clone)]
pub struct SequenceSpec {
    pub propagation: PropagationConfig,
    pub output: OutputConfig,
    pub kind: SequenceKind,
    /// Snapshots per propagation run (the inner unroll length).
    pub prop_steps: usize,
    /// Step budget; `None` picks num_nodes + 2 for node tokens and 10 for
    /// class tokens at run time.
    pub max_steps: Option<usize>,
    /// One propagation parameter set serving both the output and the
    /// annotation path. When false the two paths get separate parameters.
    pub shared_propagation: bool,
}

impl SequenceSpec {
    pub fn new(propagation: PropagationConfig, output: OutputConfig, kind: SequenceKind) -> Self {
        SequenceSpec {
            propagation,
            output,
            kind,
            prop_steps: 5,
            max_steps: None,
            shared_propagation: true,
        }
    }
}

enum OutputHead {
    Nodes { head: NodeSelectionHead, end_score: ParamId },
    Classes { head: GraphClassificationHead, end_class: usize },
}

pub struct SequenceModel {
    spec: SequenceSpec,
    output_prop: PropagationParams,
    /// `None` aliases the output propagation (shared storage, so gradient
    /// contributions from both paths land in the same tensors).
    annot_prop: Option<PropagationParams>,
    head: OutputHead,
    annot_head: AnnotationHead,
}

impl SequenceModel {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        spec: SequenceSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if spec.prop_steps == 0 {
            return Err(Error::Config("prop_steps must be at least 1".into()));
        }
        let output_prop = PropagationParams::init(
            store,
            &format!("{prefix}.prop"),
            spec.propagation.clone(),
            rng,
        )?;
        let annot_prop = if spec.shared_propagation {
            None
        } else {
            Some(PropagationParams::init(
                store,
                &format!("{prefix}.annot_prop"),
                spec.propagation.clone(),
                rng,
            )?)
        };
        let head = match spec.kind {
            SequenceKind::NodeTokens => OutputHead::Nodes {
                head: NodeSelectionHead::init(
                    store,
                    &format!("{prefix}.out"),
                    spec.output.clone(),
                    rng,
                ),
                end_score: store.add(&format!("{prefix}.end"), Tensor::zeros(1, 1)),
            },
            SequenceKind::ClassTokens { num_real } => {
                if num_real == 0 {
                    return Err(Error::Config("need at least one real class".into()));
                }
                OutputHead::Classes {
                    head: GraphClassificationHead::init(
                        store,
                        &format!("{prefix}.out"),
                        spec.output.clone(),
                        num_real + 1,
                        rng,
                    ),
                    end_class: num_real,
                }
            }
        };
        let annot_head =
            AnnotationHead::init(store, &format!("{prefix}.annot"), spec.output.clone(), rng);
        Ok(SequenceModel { spec, output_prop, annot_prop, head, annot_head })
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn output_propagation(&self) -> &PropagationParams {
        &self.output_prop
    }

    /// The annotation-path propagation: the shared parameters unless the
    /// model was built with separate ones.
    pub fn annotation_propagation(&self) -> &PropagationParams {
        self.annot_prop.as_ref().unwrap_or(&self.output_prop)
    }

    pub fn annotation_head(&self) -> &AnnotationHead {
        &self.annot_head
    }

    pub fn num_scalars(&self) -> usize {
        let prop = self.output_prop.num_scalars()
            + self.annot_prop.as_ref().map_or(0, |p| p.num_scalars());
        let head = match &self.head {
            OutputHead::Nodes { head, .. } => head.num_scalars() + 1,
            OutputHead::Classes { head, .. } => head.num_scalars(),
        };
        prop + head + self.annot_head.num_scalars()
    }

    pub fn effective_max_steps(&self, graph: &TypedGraph) -> usize {
        self.spec.max_steps.unwrap_or(match self.spec.kind {
            SequenceKind::NodeTokens => graph.num_nodes() + 2,
            SequenceKind::ClassTokens { .. } => 10,
        })
    }

    /// Output logits for one step given propagated states and the step's
    /// input annotations. Node models append the end score below the node
    /// scores; class models already carry the end class.
    fn step_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        x: Var,
    ) -> Result<Var> {
        match &self.head {
            OutputHead::Nodes { head, end_score } => {
                let scores = head.scores(tape, store, h, x)?;
                let end = tape.param(store, *end_score)?;
                tape.concat_rows(scores, end)
            }
            OutputHead::Classes { head, .. } => head.logits(tape, store, h, x),
        }
    }

    fn token_for(&self, flat_index: usize, num_nodes: usize) -> SeqToken {
        match &self.head {
            OutputHead::Nodes { .. } => {
                if flat_index == num_nodes {
                    SeqToken::End
                } else {
                    SeqToken::Node(NodeId::from_index(flat_index))
                }
            }
            OutputHead::Classes { end_class, .. } => {
                if flat_index == *end_class {
                    SeqToken::End
                } else {
                    SeqToken::Class(flat_index)
                }
            }
        }
    }

    fn target_index(&self, token: SeqToken, num_nodes: usize) -> Result<usize> {
        match (&self.head, token) {
            (OutputHead::Nodes { .. }, SeqToken::Node(v)) => {
                if v.0 == 0 || v.0 > num_nodes {
                    return Err(Error::Config(format!("target node {} out of range", v.0)));
                }
                Ok(v.index())
            }
            (OutputHead::Nodes { .. }, SeqToken::End) => Ok(num_nodes),
            (OutputHead::Classes { end_class, .. }, SeqToken::Class(c)) => {
                if c >= *end_class {
                    return Err(Error::Config(format!("target class {c} out of range")));
                }
                Ok(c)
            }
            (OutputHead::Classes { end_class, .. }, SeqToken::End) => Ok(*end_class),
            _ => Err(Error::Config("target token kind does not match the model".into())),
        }
    }
}

// ---------------------------------------------------------------------------
// Greedy decoding

#[derive(Debug, Clone)]
pub struct SequenceStep {
    /// Annotations this step read.
    pub annotations: Tensor,
    /// Softmax over the step's choices (nodes plus end, or classes).
    pub distribution: Vec<f64>,
    pub token: SeqToken,
    /// Annotations handed to the next step (absent on the final step).
    pub next_annotations: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct StepTrace {
    pub steps: Vec<SequenceStep>,
    /// The budget ran out before the model emitted end. Evaluation counts
    /// such sequences as wrong; decoding itself does not fail.
    pub truncated: bool,
}

impl StepTrace {
    pub fn tokens(&self) -> Vec<SeqToken> {
        self.steps.iter().map(|s| s.token).collect()
    }

    /// Exact-match comparison, end token included.
    pub fn matches(&self, want: &[SeqToken]) -> bool {
        !self.truncated && self.tokens() == want
    }
}

/// Greedy decoding: argmax token per step (first index wins ties), stop at
/// end or when the step budget runs out.
pub fn run_sequence(
    store: &ParamStore,
    model: &SequenceModel,
    graph: &TypedGraph,
    x1: &AnnotationMatrix,
    feeding: AnnotationFeeding,
) -> Result<StepTrace> {
    let n = graph.num_nodes();
    let max_steps = model.effective_max_steps(graph);
    let mut x = x1.tensor().clone();
    let mut steps = Vec::new();
    let mut truncated = false;
    for k in 1..=max_steps {
        let mut tape = Tape::new();
        let x_var = tape.constant(x.clone())?;
        let h = propagate_from(
            &mut tape,
            store,
            &model.output_prop,
            graph,
            x_var,
            model.spec.prop_steps,
        )?;
        let logits = model.step_logits(&mut tape, store, h, x_var)?;
        let distribution = softmax(tape.value(logits).data());
        let argmax = distribution
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .expect("non-empty logits");
        // max_by returns the LAST maximum; flip to the first for stable ties
        let argmax = distribution.iter().position(|&p| p == distribution[argmax]).unwrap();
        let token = model.token_for(argmax, n);

        let done = token == SeqToken::End;
        let out_of_budget = k == max_steps && !done;
        let next_annotations = if done || k == max_steps {
            None
        } else {
            let hx = if model.annot_prop.is_some() {
                propagate_from(
                    &mut tape,
                    store,
                    model.annotation_propagation(),
                    graph,
                    x_var,
                    model.spec.prop_steps,
                )?
            } else {
                h
            };
            let pred = model.annot_head.predict(&mut tape, store, hx, x_var)?;
            let mut next = tape.value(pred).clone();
            if feeding == AnnotationFeeding::Thresholded {
                next = next.map(|p| if p >= 0.5 { 1.0 } else { 0.0 });
            }
            Some(next)
        };

        steps.push(SequenceStep {
            annotations: x.clone(),
            distribution,
            token,
            next_annotations: next_annotations.clone(),
        });
        if let Some(next) = next_annotations {
            x = next;
        }
        if done {
            break;
        }
        if out_of_budget {
            truncated = true;
            break;
        }
    }
    Ok(StepTrace { steps, truncated })
}

// ---------------------------------------------------------------------------
// Training losses

/// Teacher-forced loss. `observed` holds X^(1)..X^(K) (one per target);
/// step k propagates from the observed X^(k), pays cross-entropy on its
/// token, and (except for the last step) binary cross-entropy between its
/// annotation predictions and the observed X^(k+1). Predicted annotations
/// are never fed forward here.
pub fn loss_observed(
    tape: &mut Tape,
    store: &ParamStore,
    model: &SequenceModel,
    graph: &TypedGraph,
    observed: &[AnnotationMatrix],
    targets: &[SeqToken],
) -> Result<Var> {
    if observed.len() != targets.len() || targets.is_empty() {
        return Err(Error::dim(
            "loss_observed",
            format!("{} annotation sets for {} targets", observed.len(), targets.len()),
        ));
    }
    let n = graph.num_nodes();
    let mut total: Option<Var> = None;
    for (k, target) in targets.iter().enumerate() {
        let x_var = tape.constant(observed[k].tensor().clone())?;
        let h = propagate_from(
            tape,
            store,
            &model.output_prop,
            graph,
            x_var,
            model.spec.prop_steps,
        )?;
        let logits = model.step_logits(tape, store, h, x_var)?;
        let ce = tape.softmax_cross_entropy(logits, model.target_index(*target, n)?)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
        if k + 1 < targets.len() {
            let hx = if model.annot_prop.is_some() {
                propagate_from(
                    tape,
                    store,
                    model.annotation_propagation(),
                    graph,
                    x_var,
                    model.spec.prop_steps,
                )?
            } else {
                h
            };
            let pred = model.annot_head.predict(tape, store, hx, x_var)?;
            let bce = tape.binary_cross_entropy(pred, observed[k + 1].tensor())?;
            let t = total.take().expect("set above");
            total = Some(tape.add(t, bce)?);
        }
    }
    Ok(total.expect("at least one step"))
}

/// End-to-end loss with hidden intermediate annotations: each step's
/// continuous annotation predictions become the next step's input on the
/// same tape, so the cross-entropy sum backpropagates through the whole
/// chain including every annotation head application.
pub fn loss_latent(
    tape: &mut Tape,
    store: &ParamStore,
    model: &SequenceModel,
    graph: &TypedGraph,
    x1: &AnnotationMatrix,
    targets: &[SeqToken],
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::dim("loss_latent", "no targets"));
    }
    let n = graph.num_nodes();
    let mut x_var = tape.constant(x1.tensor().clone())?;
    let mut total: Option<Var> = None;
    for (k, target) in targets.iter().enumerate() {
        let h = propagate_from(
            tape,
            store,
            &model.output_prop,
            graph,
            x_var,
            model.spec.prop_steps,
        )?;
        let logits = model.step_logits(tape, store, h, x_var)?;
        let ce = tape.softmax_cross_entropy(logits, model.target_index(*target, n)?)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
        if k + 1 < targets.len() {
            let hx = if model.annot_prop.is_some() {
                propagate_from(
                    tape,
                    store,
                    model.annotation_propagation(),
                    graph,
                    x_var,
                    model.spec.prop_steps,
                )?
            } else {
                h
            };
            x_var = model.annot_head.predict(tape, store, hx, x_var)?;
        }
    }
    Ok(total.expect("at least one step"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_initial_annotations, Edge, EdgeTypeId};
    use crate::tape::{gradcheck, GRADCHECK_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_graph() -> TypedGraph {
        let edges = vec![
            Edge { src: NodeId(1), etype: EdgeTypeId(1), dst: NodeId(2) },
            Edge { src: NodeId(2), etype: EdgeTypeId(1), dst: NodeId(3) },
            Edge { src: NodeId(3), etype: EdgeTypeId(2), dst: NodeId(4) },
        ];
        TypedGraph::new(4, 2, edges).unwrap()
    }

    fn node_spec(shared: bool) -> SequenceSpec {
        let mut spec = SequenceSpec::new(
            PropagationConfig::new(2, 3),
            OutputConfig::new(3, 2),
            SequenceKind::NodeTokens,
        );
        spec.prop_steps = 3;
        spec.shared_propagation = shared;
        spec
    }

    fn class_spec() -> SequenceSpec {
        let mut spec = SequenceSpec::new(
            PropagationConfig::new(2, 3),
            OutputConfig::new(3, 2),
            SequenceKind::ClassTokens { num_real: 3 },
        );
        spec.prop_steps = 2;
        spec
    }

    #[test]
    fn an_always_end_model_stops_after_one_step() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = SequenceModel::init(&mut store, "seq", node_spec(true), &mut rng).unwrap();
        let end = store.id_by_name("seq.end").unwrap();
        store.value_mut(end).set(0, 0, 50.0);
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(1)], 2).unwrap();
        let trace =
            run_sequence(&store, &model, &g, &x1, AnnotationFeeding::Continuous).unwrap();
        assert_eq!(trace.tokens(), vec![SeqToken::End]);
        assert!(!trace.truncated);
    }

    #[test]
    fn a_model_that_never_ends_is_truncated_at_the_budget() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut spec = node_spec(true);
        spec.max_steps = Some(4);
        let model = SequenceModel::init(&mut store, "seq", spec, &mut rng).unwrap();
        let end = store.id_by_name("seq.end").unwrap();
        store.value_mut(end).set(0, 0, -50.0);
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(1)], 2).unwrap();
        let trace =
            run_sequence(&store, &model, &g, &x1, AnnotationFeeding::Thresholded).unwrap();
        assert!(trace.truncated);
        assert_eq!(trace.steps.len(), 4);
        assert!(trace.tokens().iter().all(|t| *t != SeqToken::End));
        assert!(!trace.matches(&[SeqToken::Node(NodeId(1)), SeqToken::End]));
    }

    #[test]
    fn default_step_budget_tracks_the_output_kind() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nodes = SequenceModel::init(&mut store, "a", node_spec(true), &mut rng).unwrap();
        let classes = SequenceModel::init(&mut store, "b", class_spec(), &mut rng).unwrap();
        let g = toy_graph();
        assert_eq!(nodes.effective_max_steps(&g), 6);
        assert_eq!(classes.effective_max_steps(&g), 10);
    }

    #[test]
    fn one_step_observed_loss_is_the_single_model_loss() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = SequenceModel::init(&mut store, "seq", node_spec(true), &mut rng).unwrap();
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(2)], 2).unwrap();
        let target = SeqToken::Node(NodeId(3));

        let mut t1 = Tape::new();
        let seq_loss =
            loss_observed(&mut t1, &store, &model, &g, std::slice::from_ref(&x1), &[target])
                .unwrap();

        let mut t2 = Tape::new();
        let x = t2.constant(x1.tensor().clone()).unwrap();
        let h = propagate_from(&mut t2, &store, &model.output_prop, &g, x, 3).unwrap();
        let logits = model.step_logits(&mut t2, &store, h, x).unwrap();
        let single = t2.softmax_cross_entropy(logits, 2).unwrap();

        assert_eq!(t1.value(seq_loss).get(0, 0), t2.value(single).get(0, 0));
    }

    #[test]
    fn observed_loss_decomposes_into_per_step_terms() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = SequenceModel::init(&mut store, "seq", node_spec(true), &mut rng).unwrap();
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(1)], 2).unwrap();
        // observed step-2 annotations deliberately differ from anything the
        // annotation head would predict
        let mut x2 = AnnotationMatrix::zeros(4, 2);
        x2.set(NodeId(3), 0, 1.0);
        x2.set(NodeId(4), 1, 1.0);
        let targets = [SeqToken::Node(NodeId(2)), SeqToken::End];

        let mut tape = Tape::new();
        let whole =
            loss_observed(&mut tape, &store, &model, &g, &[x1.clone(), x2.clone()], &targets)
                .unwrap();
        let whole = tape.value(whole).get(0, 0);

        let step_ce = |x: &AnnotationMatrix, idx: usize| {
            let mut t = Tape::new();
            let xv = t.constant(x.tensor().clone()).unwrap();
            let h = propagate_from(&mut t, &store, &model.output_prop, &g, xv, 3).unwrap();
            let logits = model.step_logits(&mut t, &store, h, xv).unwrap();
            let l = t.softmax_cross_entropy(logits, idx).unwrap();
            t.value(l).get(0, 0)
        };
        let annot_bce = {
            let mut t = Tape::new();
            let xv = t.constant(x1.tensor().clone()).unwrap();
            let h = propagate_from(&mut t, &store, &model.output_prop, &g, xv, 3).unwrap();
            let pred = model.annot_head.predict(&mut t, &store, h, xv).unwrap();
            let l = t.binary_cross_entropy(pred, x2.tensor()).unwrap();
            t.value(l).get(0, 0)
        };
        let sum = step_ce(&x1, 1) + step_ce(&x2, 4) + annot_bce;
        assert!((whole - sum).abs() < 1e-12);
    }

    #[test]
    fn saturated_end_scores_drive_the_loss_to_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = SequenceModel::init(&mut store, "seq", node_spec(true), &mut rng).unwrap();
        let end = store.id_by_name("seq.end").unwrap();
        store.value_mut(end).set(0, 0, 60.0);
        // flatten the node scores so end dominates
        store.value_mut(store.id_by_name("seq.out.score.0.w").unwrap()).fill(0.0);
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(1)], 2).unwrap();
        let mut tape = Tape::new();
        let loss =
            loss_observed(&mut tape, &store, &model, &g, &[x1], &[SeqToken::End]).unwrap();
        assert!(tape.value(loss).get(0, 0) < 1e-6);
    }

    #[test]
    fn one_step_latent_loss_equals_one_step_observed_loss() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = SequenceModel::init(&mut store, "seq", class_spec(), &mut rng).unwrap();
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(1)], 2).unwrap();
        let targets = [SeqToken::Class(1)];
        let mut t1 = Tape::new();
        let a = loss_latent(&mut t1, &store, &model, &g, &x1, &targets).unwrap();
        let mut t2 = Tape::new();
        let b = loss_observed(&mut t2, &store, &model, &g, &[x1.clone()], &targets).unwrap();
        assert_eq!(t1.value(a).get(0, 0), t2.value(b).get(0, 0));
    }

    #[test]
    fn latent_loss_depends_on_the_annotation_path() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = SequenceModel::init(&mut store, "seq", node_spec(false), &mut rng).unwrap();
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(1)], 2).unwrap();
        let targets = [SeqToken::Node(NodeId(2)), SeqToken::End];
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let l = loss_latent(&mut tape, store, &model, &g, &x1, &targets).unwrap();
            tape.value(l).get(0, 0)
        };
        let before = run(&store);
        // separate annotation propagation: nudging it must move the loss
        let id = store.id_by_name("seq.annot_prop.msg_out.1").unwrap();
        let nudged = store.value(id).get(0, 0) + 0.5;
        store.value_mut(id).set(0, 0, nudged);
        assert_ne!(before, run(&store));
    }

    #[test]
    fn observed_loss_ignores_the_annotation_propagation_of_unused_steps() {
        // teacher forcing: with a single step there is no annotation term,
        // so the annotation head cannot influence the loss
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = SequenceModel::init(&mut store, "seq", node_spec(true), &mut rng).unwrap();
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(1)], 2).unwrap();
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let l =
                loss_observed(&mut tape, store, &model, &g, &[x1.clone()], &[SeqToken::End])
                    .unwrap();
            tape.value(l).get(0, 0)
        };
        let before = run(&store);
        let id = store.id_by_name("seq.annot.annot.0.w").unwrap();
        store.value_mut(id).fill(3.0);
        assert_eq!(before, run(&store));
    }

    #[test]
    fn observed_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = SequenceModel::init(&mut store, "seq", node_spec(true), &mut rng).unwrap();
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(1)], 2).unwrap();
        let mut x2 = AnnotationMatrix::zeros(4, 2);
        x2.set(NodeId(2), 0, 1.0);
        let targets = [SeqToken::Node(NodeId(2)), SeqToken::End];
        let report = gradcheck(
            &mut store,
            |store, tape| loss_observed(tape, store, &model, &g, &[x1.clone(), x2.clone()], &targets),
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst: {:?}", report.worst);
    }

    #[test]
    fn latent_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = SequenceModel::init(&mut store, "seq", class_spec(), &mut rng).unwrap();
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(1)], 2).unwrap();
        let targets = [SeqToken::Class(0), SeqToken::Class(2), SeqToken::End];
        let report = gradcheck(
            &mut store,
            |store, tape| loss_latent(tape, store, &model, &g, &x1, &targets),
            GRADCHECK_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst: {:?}", report.worst);
    }

    #[test]
    fn shared_propagation_is_one_parameter_set() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shared = SequenceModel::init(&mut store, "s", node_spec(true), &mut rng).unwrap();
        assert!(store.id_by_name("s.annot_prop.msg_out.1").is_none());
        assert_eq!(
            shared.output_propagation().msg_out_id(1).0,
            shared.annotation_propagation().msg_out_id(1).0
        );
        let separate = SequenceModel::init(&mut store, "t", node_spec(false), &mut rng).unwrap();
        assert!(store.id_by_name("t.annot_prop.msg_out.1").is_some());
        assert_ne!(
            separate.output_propagation().msg_out_id(1).0,
            separate.annotation_propagation().msg_out_id(1).0
        );
    }

    #[test]
    fn greedy_decoding_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = SequenceModel::init(&mut store, "seq", node_spec(true), &mut rng).unwrap();
        let g = toy_graph();
        let x1 = build_initial_annotations(&g, &[NodeId(1)], 2).unwrap();
        let a = run_sequence(&store, &model, &g, &x1, AnnotationFeeding::Continuous).unwrap();
        let b = run_sequence(&store, &model, &g, &x1, AnnotationFeeding::Continuous).unwrap();
        assert_eq!(a.tokens(), b.tokens());
        assert_eq!(a.truncated, b.truncated);
        for (s, t) in a.steps.iter().zip(&b.steps) {
            assert_eq!(s.distribution, t.distribution);
        }
    }
}
