//! Formula enumeration and labeled heap-graph generation.
//!
//! Formulas come from a rooted grammar: every name (program variable or
//! existential) is described by exactly one atom, and list segments may only
//! end at another described name or at null. Existentials are kept only
//! where the shape genuinely needs a fresh name (a join, a cycle entry, or
//! a structure hanging off a segment); a name that merely splits one
//! segment into two would make distinct formulas describe identical heaps.
//!
//! Each sampled graph carries the full step-by-step annotation trace of the
//! prediction procedure, which is what observed-annotation training and the
//! replay tests consume.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{AnnotationMatrix, Edge, NodeId, TypedGraph};
use crate::model::{GraphInstance, Target};

use super::formula::{Atom, PredKind, SepFormula, Term};
use super::heap::{
    satisfies, HeapGraph, BIT_ACTIVE, BIT_EXPLAINED, BIT_NAMED, FIELD_LEFT, FIELD_NEXT,
    FIELD_RIGHT, NUM_FIELDS,
};

const VAR_NAMES: [&str; 6] = ["x", "y", "z", "w", "v", "u"];

// ---------------------------------------------------------------------------
// Enumeration

pub fn enumerate_formulas(
    num_vars: usize,
    predicates: &[PredKind],
    max_existentials: usize,
) -> Result<Vec<SepFormula>> {
    if num_vars == 0 || num_vars > VAR_NAMES.len() {
        return Err(Error::Config(format!(
            "num_vars must be 1..={}, got {num_vars}",
            VAR_NAMES.len()
        )));
    }
    if predicates.is_empty() {
        return Err(Error::Config("need at least one predicate".into()));
    }
    let vars: Vec<String> = VAR_NAMES[..num_vars].iter().map(|s| s.to_string()).collect();

    let mut seen = BTreeMap::new();
    for n_exist in 0..=max_existentials {
        let existentials: Vec<String> = (1..=n_exist).map(|i| format!("t{i}")).collect();
        let mut names: Vec<String> = vars.clone();
        names.extend(existentials.iter().cloned());

        let mut atoms: Vec<Atom> = Vec::with_capacity(names.len());
        assign_atoms(&vars, &existentials, &names, predicates, &mut atoms, &mut |atoms| {
            let formula = SepFormula::new(existentials.clone(), atoms.to_vec());
            if admissible(&formula) {
                let canon = formula.canonicalize();
                seen.entry(canon.to_string()).or_insert(canon);
            }
        });
    }
    Ok(seen.into_values().collect())
}

/// Every name roots one atom; recurse over the choices.
fn assign_atoms(
    vars: &[String],
    existentials: &[String],
    names: &[String],
    predicates: &[PredKind],
    atoms: &mut Vec<Atom>,
    emit: &mut impl FnMut(&[Atom]),
) {
    let depth = atoms.len();
    if depth == names.len() {
        emit(atoms);
        return;
    }
    let root = Term::var(&names[depth]);
    let is_var = depth < vars.len();
    for &pred in predicates {
        match pred {
            // a dangling name is only meaningful for a program variable
            PredKind::None if is_var => {
                atoms.push(Atom::None(root.clone()));
                assign_atoms(vars, existentials, names, predicates, atoms, emit);
                atoms.pop();
            }
            PredKind::None => {}
            PredKind::Tree => {
                atoms.push(Atom::Tree(root.clone()));
                assign_atoms(vars, existentials, names, predicates, atoms, emit);
                atoms.pop();
            }
            PredKind::Ls => {
                let mut targets: Vec<Term> = vec![Term::Null];
                targets.extend(names.iter().map(|n| Term::var(n)));
                for target in targets {
                    atoms.push(Atom::Ls(root.clone(), target));
                    assign_atoms(vars, existentials, names, predicates, atoms, emit);
                    atoms.pop();
                }
            }
        }
    }
}

/// Grammar-level sanity for a rooted formula: segments may not end at a
/// dangling name, and each existential must be load-bearing — the target of
/// two other segments (a join) or of one plus its own cycle or tree.
fn admissible(formula: &SepFormula) -> bool {
    let atom_of = |name: &str| {
        formula
            .atoms
            .iter()
            .find(|a| *a.root() == Term::Var(name.to_string()))
    };
    for atom in &formula.atoms {
        if let Atom::Ls(_, Term::Var(target)) = atom {
            match atom_of(target) {
                Some(rooted) if rooted.kind() == PredKind::None => return false,
                Some(_) => {}
                None => return false,
            }
        }
    }
    for e in &formula.existentials {
        let own = match atom_of(e) {
            Some(a) => a,
            None => return false,
        };
        let incoming = formula
            .atoms
            .iter()
            .filter(|a| match a {
                Atom::Ls(root, Term::Var(t)) => t == e && *root != Term::Var(e.clone()),
                _ => false,
            })
            .count();
        let self_closing = matches!(own, Atom::Ls(a, b) if a == b) || own.kind() == PredKind::Tree;
        if !(incoming >= 2 || (incoming == 1 && self_closing)) {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Traces

/// One supervised decision of the prediction procedure, paired with the
/// annotation matrix the deciding network sees.
#[derive(Debug, Clone)]
pub enum StepAction {
    /// Declare another existential? (graph-level, two classes)
    DeclareMore(bool),
    /// Which node the fresh existential names.
    PickExistential(NodeId),
    /// Which shape predicate describes the active name.
    PickPredicate(PredKind),
    /// Where the active name's segment ends.
    PickListEnd(NodeId),
    /// The annotation matrix after the atom is emitted.
    UpdateAnnotations(AnnotationMatrix),
}

#[derive(Debug, Clone)]
pub struct TraceStep {
    pub annot: AnnotationMatrix,
    pub action: StepAction,
}

/// The aligned (annotations, decision) sequence for one heap graph.
#[derive(Debug, Clone)]
pub struct AnnotationTrace {
    pub steps: Vec<TraceStep>,
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub count: usize,
    /// Bounds on total node count, null included.
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { count: 10, min_nodes: 3, max_nodes: 12, seed: 0 }
    }
}

/// Generate heaps satisfying a canonical rooted formula, each with its
/// ground-truth trace. Node ids are freshly permuted per graph so that
/// numbering carries no signal.
pub fn sample_heap_graphs(
    formula: &SepFormula,
    config: &SampleConfig,
) -> Result<Vec<(HeapGraph, AnnotationTrace)>> {
    if *formula != formula.canonicalize() {
        return Err(Error::Config(format!("formula {formula} is not canonical")));
    }
    let plan = RootedPlan::from_formula(formula)?;
    if config.max_nodes < plan.base_nodes() {
        return Err(Error::Generate(format!(
            "formula {formula} needs {} nodes, range allows {}",
            plan.base_nodes(),
            config.max_nodes
        )));
    }
    if !plan.growable() && config.min_nodes > plan.base_nodes() {
        return Err(Error::Generate(format!(
            "formula {formula} always has {} nodes, below the requested minimum",
            plan.base_nodes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        let (heap, env) = plan.realize(config, &mut rng)?;
        if !satisfies(&heap, formula) {
            return Err(Error::Generate(format!(
                "generated heap fails its own formula {formula}"
            )));
        }
        let trace = plan.trace(&heap, &env)?;
        out.push((heap, trace));
    }
    Ok(out)
}

/// A formula reorganized root-by-root, the shape the generator and the
/// prediction procedure both walk.
struct RootedPlan {
    /// (name, atom) in emission order: program variables, then existentials.
    roots: Vec<(String, Atom)>,
    num_vars: usize,
}

impl RootedPlan {
    fn from_formula(formula: &SepFormula) -> Result<RootedPlan> {
        let free = formula.free_vars();
        let mut roots = Vec::new();
        let mut names: Vec<String> = free.iter().cloned().collect();
        names.extend(formula.existentials.iter().cloned());
        for name in &names {
            let mut rooted = formula
                .atoms
                .iter()
                .filter(|a| *a.root() == Term::Var(name.clone()));
            let atom = rooted
                .next()
                .ok_or_else(|| Error::Generate(format!("{formula}: name {name} has no atom")))?;
            if rooted.next().is_some() {
                return Err(Error::Generate(format!("{formula}: name {name} roots two atoms")));
            }
            roots.push((name.clone(), atom.clone()));
        }
        if roots.len() != formula.atoms.len() {
            return Err(Error::Generate(format!("{formula}: atom without a described root")));
        }
        Ok(RootedPlan { roots, num_vars: free.len() })
    }

    /// Null plus one node per name.
    fn base_nodes(&self) -> usize {
        1 + self.roots.len()
    }

    fn growable(&self) -> bool {
        self.roots.iter().any(|(_, a)| a.kind() != PredKind::None)
    }

    fn realize(
        &self,
        config: &SampleConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(HeapGraph, BTreeMap<String, NodeId>)> {
        let base = self.base_nodes();
        let lo = config.min_nodes.max(base);
        let total = if self.growable() { rng.random_range(lo..=config.max_nodes) } else { base };

        // distribute the extra cells over the growable atoms
        let growable: Vec<usize> = self
            .roots
            .iter()
            .enumerate()
            .filter(|(_, (_, a))| a.kind() != PredKind::None)
            .map(|(i, _)| i)
            .collect();
        let mut sizes = vec![1usize; self.roots.len()];
        for _ in base..total {
            sizes[growable[rng.random_range(0..growable.len())]] += 1;
        }

        let null = NodeId(1);
        let mut next_free = 2;
        let mut alloc = || {
            let v = NodeId(next_free);
            next_free += 1;
            v
        };
        let mut env: BTreeMap<String, NodeId> = BTreeMap::new();
        for (name, _) in &self.roots {
            env.insert(name.clone(), alloc());
        }
        let resolve = |env: &BTreeMap<String, NodeId>, term: &Term| match term {
            Term::Null => null,
            Term::Var(name) => env[name],
        };

        let mut edges = Vec::new();
        for ((name, atom), size) in self.roots.iter().zip(&sizes) {
            match atom {
                Atom::None(_) => {}
                Atom::Ls(_, target) => {
                    let mut cells = vec![env[name]];
                    cells.extend((1..*size).map(|_| alloc()));
                    cells.push(resolve(&env, target));
                    for pair in cells.windows(2) {
                        edges.push(Edge { src: pair[0], etype: FIELD_NEXT, dst: pair[1] });
                    }
                }
                Atom::Tree(_) => {
                    let mut open = vec![(env[name], FIELD_LEFT), (env[name], FIELD_RIGHT)];
                    for _ in 1..*size {
                        let (parent, side) = open.swap_remove(rng.random_range(0..open.len()));
                        let child = alloc();
                        edges.push(Edge { src: parent, etype: side, dst: child });
                        open.push((child, FIELD_LEFT));
                        open.push((child, FIELD_RIGHT));
                    }
                    for (leaf, side) in open {
                        edges.push(Edge { src: leaf, etype: side, dst: null });
                    }
                }
            }
        }

        let graph = TypedGraph::new(total, NUM_FIELDS, edges)?;
        let vars: Vec<(String, NodeId)> = self.roots[..self.num_vars]
            .iter()
            .map(|(name, _)| (name.clone(), env[name]))
            .collect();
        let heap = HeapGraph::new(graph, null, vars)?;

        // hide construction order behind a fresh numbering
        let mut perm: Vec<usize> = (0..total).collect();
        perm.shuffle(rng);
        let heap = heap.relabel(&perm)?;
        let env = env
            .into_iter()
            .map(|(name, v)| (name, NodeId::from_index(perm[v.index()])))
            .collect();
        Ok((heap, env))
    }

    /// Ground-truth trace: existential declarations first, then one
    /// predicate / list-end / annotation-update round per name.
    fn trace(&self, heap: &HeapGraph, env: &BTreeMap<String, NodeId>) -> Result<AnnotationTrace> {
        let resolve = |term: &Term| match term {
            Term::Null => heap.null(),
            Term::Var(name) => env[name],
        };
        let mut l = heap.initial_annotations();
        let mut steps = Vec::new();
        for (name, _) in &self.roots[self.num_vars..] {
            steps.push(TraceStep { annot: l.clone(), action: StepAction::DeclareMore(true) });
            steps.push(TraceStep {
                annot: l.clone(),
                action: StepAction::PickExistential(env[name]),
            });
            l.set(env[name], BIT_NAMED, 1.0);
        }
        steps.push(TraceStep { annot: l.clone(), action: StepAction::DeclareMore(false) });

        for (name, atom) in &self.roots {
            let mut active = l.clone();
            active.set(env[name], BIT_ACTIVE, 1.0);
            steps.push(TraceStep {
                annot: active.clone(),
                action: StepAction::PickPredicate(atom.kind()),
            });
            if let Atom::Ls(_, target) = atom {
                steps.push(TraceStep {
                    annot: active.clone(),
                    action: StepAction::PickListEnd(resolve(target)),
                });
            }
            let region = atom_region_in_heap(heap, atom, &resolve)?;
            let mut next = active.clone();
            next.set(env[name], BIT_ACTIVE, 0.0);
            for cell in region {
                next.set(cell, BIT_EXPLAINED, 1.0);
            }
            steps.push(TraceStep { annot: active, action: StepAction::UpdateAnnotations(next.clone()) });
            l = next;
        }

        for cell in heap.cells() {
            if l.get(cell, BIT_EXPLAINED) != 1.0 {
                return Err(Error::Generate(format!("cell {} left unexplained", cell.0)));
            }
        }
        Ok(AnnotationTrace { steps })
    }
}

/// The unique region an atom claims in a generated heap. Regions here are
/// recomputed from the graph rather than remembered from construction, so a
/// construction bug cannot silently produce a consistent-looking trace.
fn atom_region_in_heap(
    heap: &HeapGraph,
    atom: &Atom,
    resolve: &dyn Fn(&Term) -> NodeId,
) -> Result<BTreeSet<NodeId>> {
    let mut regions = super::heap::atom_regions(heap, atom, resolve);
    // generation never uses the empty unfolding of a cyclic segment
    if matches!(atom, Atom::Ls(a, b) if a == b) {
        regions.retain(|r| !r.is_empty());
    }
    // the first candidate stops at the first arrival, i.e. the cells this
    // atom built; later ones would swallow the target's own structure
    regions
        .into_iter()
        .next()
        .ok_or_else(|| Error::Generate(format!("atom {atom} claims no region")))
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone)]
pub struct SepDataConfig {
    pub num_vars: usize,
    pub predicates: Vec<PredKind>,
    pub max_existentials: usize,
    /// Keep at most this many formulas (a seeded subset when more exist).
    pub max_formulas: usize,
    pub train_graphs_per_formula: usize,
    pub eval_graphs_per_formula: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub seed: u64,
}

impl Default for SepDataConfig {
    fn default() -> Self {
        SepDataConfig {
            num_vars: 2,
            predicates: PredKind::ALL.to_vec(),
            max_existentials: 1,
            max_formulas: 60,
            train_graphs_per_formula: 20,
            eval_graphs_per_formula: 10,
            min_nodes: 3,
            max_nodes: 12,
            seed: 0,
        }
    }
}

/// One labeled example: a heap, its trace, and which formula produced it.
#[derive(Debug, Clone)]
pub struct SepInstance {
    pub heap: HeapGraph,
    pub trace: AnnotationTrace,
    pub formula: usize,
}

/// Formula-level 6:2:2 split: graphs of a held-out formula never appear in
/// training.
#[derive(Debug, Clone)]
pub struct SepDataset {
    pub formulas: Vec<SepFormula>,
    pub train_formulas: Vec<usize>,
    pub valid_formulas: Vec<usize>,
    pub test_formulas: Vec<usize>,
    pub train: Vec<SepInstance>,
    pub valid: Vec<SepInstance>,
    pub test: Vec<SepInstance>,
}

pub fn build_sep_dataset(config: &SepDataConfig) -> Result<SepDataset> {
    let mut formulas =
        enumerate_formulas(config.num_vars, &config.predicates, config.max_existentials)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    formulas.shuffle(&mut rng);
    formulas.truncate(config.max_formulas);
    if formulas.len() < 5 {
        return Err(Error::Config(format!(
            "only {} formulas enumerated; not enough to split",
            formulas.len()
        )));
    }

    let n = formulas.len();
    let n_train = n * 6 / 10;
    let n_valid = n * 2 / 10;
    let train_formulas: Vec<usize> = (0..n_train).collect();
    let valid_formulas: Vec<usize> = (n_train..n_train + n_valid).collect();
    let test_formulas: Vec<usize> = (n_train + n_valid..n).collect();

    let fill = |ids: &[usize], count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<SepInstance>> {
        let mut out = Vec::new();
        for &i in ids {
            let sample = SampleConfig {
                count,
                min_nodes: config.min_nodes,
                max_nodes: config.max_nodes,
                seed: rng.random(),
            };
            for (heap, trace) in sample_heap_graphs(&formulas[i], &sample)? {
                out.push(SepInstance { heap, trace, formula: i });
            }
        }
        Ok(out)
    };
    let train = fill(&train_formulas, config.train_graphs_per_formula, &mut rng)?;
    let valid = fill(&valid_formulas, config.eval_graphs_per_formula, &mut rng)?;
    let test = fill(&test_formulas, config.eval_graphs_per_formula, &mut rng)?;

    Ok(SepDataset {
        formulas,
        train_formulas,
        valid_formulas,
        test_formulas,
        train,
        valid,
        test,
    })
}

// ---------------------------------------------------------------------------
// Component training examples

/// Per-step training sets for the five component networks, extracted from
/// traces. Losses decompose per step, so each component trains on flat
/// (graph, annotations, decision) triples.
#[derive(Debug, Default)]
pub struct ComponentData {
    /// Graph-binary: declare another existential?
    pub declare: Vec<GraphInstance>,
    /// Node selection for the fresh existential.
    pub pick_existential: Vec<GraphInstance>,
    /// Three-way shape predicate choice.
    pub predicate: Vec<GraphInstance>,
    /// Node selection for a segment's end.
    pub list_end: Vec<GraphInstance>,
    /// Next-annotation regression targets.
    pub annotate: Vec<AnnotInstance>,
}

/// A supervised annotation update: predict `target` from `annotations`.
#[derive(Debug, Clone)]
pub struct AnnotInstance {
    pub graph: TypedGraph,
    pub annotations: AnnotationMatrix,
    pub target: AnnotationMatrix,
}

pub fn component_data(instances: &[SepInstance]) -> ComponentData {
    let mut out = ComponentData::default();
    for inst in instances {
        let graph = inst.heap.graph();
        for step in &inst.trace.steps {
            let make = |target: Target| GraphInstance {
                graph: graph.clone(),
                annotations: step.annot.clone(),
                target,
                observed: None,
            };
            match &step.action {
                StepAction::DeclareMore(more) => {
                    out.declare.push(make(Target::Class(*more as usize)));
                }
                StepAction::PickExistential(v) => {
                    out.pick_existential.push(make(Target::Node(*v)));
                }
                StepAction::PickPredicate(pred) => {
                    out.predicate.push(make(Target::Class(pred.class_index())));
                }
                StepAction::PickListEnd(v) => {
                    out.list_end.push(make(Target::Node(*v)));
                }
                StepAction::UpdateAnnotations(next) => {
                    out.annotate.push(AnnotInstance {
                        graph: graph.clone(),
                        annotations: step.annot.clone(),
                        target: next.clone(),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seplogic::formula::parse_formula;

    fn renders(formulas: &[SepFormula]) -> Vec<String> {
        formulas.iter().map(|f| f.to_string()).collect()
    }

    #[test]
    fn one_variable_list_fragment_enumerates_exactly() {
        let got = enumerate_formulas(1, &[PredKind::Ls, PredKind::None], 0).unwrap();
        assert_eq!(renders(&got), vec!["ls(x, NULL)", "ls(x, x)", "none(x)"]);
    }

    #[test]
    fn panhandle_needs_and_gets_one_existential() {
        let got = enumerate_formulas(1, &PredKind::ALL, 1).unwrap();
        let want = parse_formula("exists t1 . ls(x, t1) * ls(t1, t1)").unwrap().canonicalize();
        assert!(got.contains(&want), "panhandle missing from {:?}", renders(&got));
        // a pass-through existential must not appear
        let collapsible = parse_formula("exists t1 . ls(x, t1) * ls(t1, NULL)")
            .unwrap()
            .canonicalize();
        assert!(!got.contains(&collapsible));
    }

    #[test]
    fn segments_never_end_at_dangling_names() {
        for formulas in [
            enumerate_formulas(2, &PredKind::ALL, 1).unwrap(),
            enumerate_formulas(3, &PredKind::ALL, 2).unwrap(),
        ] {
            for f in &formulas {
                for atom in &f.atoms {
                    if let Atom::Ls(_, Term::Var(t)) = atom {
                        let target_atom = f
                            .atoms
                            .iter()
                            .find(|a| *a.root() == Term::var(t))
                            .unwrap_or_else(|| panic!("{f}: segment ends at unrooted {t}"));
                        assert_ne!(target_atom.kind(), PredKind::None, "{f}");
                    }
                }
            }
        }
    }

    #[test]
    fn enumeration_is_canonical_and_duplicate_free() {
        let formulas = enumerate_formulas(2, &PredKind::ALL, 2).unwrap();
        let mut seen = BTreeSet::new();
        for f in &formulas {
            assert_eq!(*f, f.canonicalize(), "{f} not canonical");
            assert!(seen.insert(f.to_string()), "{f} enumerated twice");
        }
    }

    #[test]
    fn two_variable_space_stays_desk_sized() {
        let formulas = enumerate_formulas(2, &PredKind::ALL, 1).unwrap();
        assert_eq!(formulas.len(), 48);
    }

    #[test]
    fn three_variable_space_matches_reference_scale() {
        let formulas = enumerate_formulas(3, &PredKind::ALL, 2).unwrap();
        // same order of magnitude as the 327 three-variable formulas the
        // original dataset used
        assert!(
            formulas.len() >= 100 && formulas.len() <= 1500,
            "unexpected formula count {}",
            formulas.len()
        );
    }

    #[test]
    fn sampled_graphs_satisfy_their_formulas() {
        let formulas = enumerate_formulas(2, &PredKind::ALL, 1).unwrap();
        let mut checked = 0;
        for (i, formula) in formulas.iter().enumerate() {
            let config = SampleConfig { count: 3, seed: 7 + i as u64, ..SampleConfig::default() };
            for (heap, trace) in sample_heap_graphs(formula, &config).unwrap() {
                assert!(satisfies(&heap, formula), "{formula} unsatisfied");
                assert!(!trace.steps.is_empty());
                checked += 1;
            }
        }
        assert_eq!(checked, 3 * formulas.len());
    }

    #[test]
    fn plain_list_sample_is_a_chain() {
        let formula = parse_formula("ls(x, NULL)").unwrap();
        let config = SampleConfig { count: 1, min_nodes: 4, max_nodes: 4, seed: 3 };
        let (heap, _) = sample_heap_graphs(&formula, &config).unwrap().pop().unwrap();
        assert_eq!(heap.num_nodes(), 4);
        let mut pos = heap.variable_node("x").unwrap();
        let mut hops = 0;
        while pos != heap.null() {
            assert_eq!(heap.fields(pos), [FIELD_NEXT]);
            pos = heap.field(pos, FIELD_NEXT).unwrap();
            hops += 1;
        }
        assert_eq!(hops, 3);
    }

    #[test]
    fn dangling_variables_become_markers() {
        let formula = parse_formula("none(x) * none(y)").unwrap();
        let config = SampleConfig { count: 2, min_nodes: 3, max_nodes: 12, seed: 11 };
        for (heap, trace) in sample_heap_graphs(&formula, &config).unwrap() {
            assert_eq!(heap.num_nodes(), 3); // null and two markers
            let x = heap.variable_node("x").unwrap();
            assert_ne!(x, heap.null());
            assert!(heap.fields(x).is_empty());
            // trace: one declare-no step, then predicate and update per name
            assert_eq!(trace.steps.len(), 5);
        }
    }

    #[test]
    fn impossible_size_ranges_error() {
        let formula = parse_formula("ls(x, NULL) * tree(y)").unwrap();
        let too_small = SampleConfig { count: 1, min_nodes: 1, max_nodes: 2, seed: 0 };
        assert!(sample_heap_graphs(&formula, &too_small).is_err());

        let fixed = parse_formula("none(x)").unwrap();
        let too_big = SampleConfig { count: 1, min_nodes: 5, max_nodes: 8, seed: 0 };
        assert!(sample_heap_graphs(&fixed, &too_big).is_err());
    }

    #[test]
    fn non_canonical_formulas_are_refused() {
        let f = parse_formula("exists q . ls(x, q) * ls(q, q)").unwrap();
        assert!(sample_heap_graphs(&f, &SampleConfig::default()).is_err());
    }

    #[test]
    fn traces_follow_the_fig_style_panhandle_script() {
        let formula = parse_formula("exists t1 . ls(t1, t1) * ls(x, t1)").unwrap();
        assert_eq!(formula, formula.canonicalize());
        let config = SampleConfig { count: 1, min_nodes: 5, max_nodes: 5, seed: 5 };
        let (heap, trace) = sample_heap_graphs(&formula, &config).unwrap().pop().unwrap();
        let t_node = match &trace.steps[1].action {
            StepAction::PickExistential(v) => *v,
            other => panic!("step 2 should declare the existential, got {other:?}"),
        };

        // declare yes -> pick node -> declare no -> per-x round -> per-t round
        assert!(matches!(trace.steps[0].action, StepAction::DeclareMore(true)));
        assert!(matches!(trace.steps[2].action, StepAction::DeclareMore(false)));
        assert!(
            matches!(trace.steps[3].action, StepAction::PickPredicate(PredKind::Ls)),
            "x is a segment"
        );
        assert!(matches!(trace.steps[4].action, StepAction::PickListEnd(v) if v == t_node));

        // before declaration t is unnamed; afterwards named everywhere
        assert_eq!(trace.steps[1].annot.get(t_node, BIT_NAMED), 0.0);
        assert_eq!(trace.steps[3].annot.get(t_node, BIT_NAMED), 1.0);

        // x's round explains exactly the handle cells
        let x_node = heap.variable_node("x").unwrap();
        assert_eq!(trace.steps[3].annot.get(x_node, BIT_ACTIVE), 1.0);
        match &trace.steps[5].action {
            StepAction::UpdateAnnotations(next) => {
                assert_eq!(next.get(x_node, BIT_EXPLAINED), 1.0);
                assert_eq!(next.get(t_node, BIT_EXPLAINED), 0.0);
                assert_eq!(next.get(x_node, BIT_ACTIVE), 0.0);
            }
            other => panic!("expected an annotation update, got {other:?}"),
        }

        // t's round explains the cycle
        assert!(matches!(trace.steps[6].action, StepAction::PickPredicate(PredKind::Ls)));
        assert!(matches!(trace.steps[7].action, StepAction::PickListEnd(v) if v == t_node));
        match &trace.steps[8].action {
            StepAction::UpdateAnnotations(next) => {
                for cell in heap.cells() {
                    assert_eq!(next.get(cell, BIT_EXPLAINED), 1.0, "cell {}", cell.0);
                }
            }
            other => panic!("expected the final update, got {other:?}"),
        }
    }

    #[test]
    fn trace_invariants_hold_across_the_board() {
        let formulas = enumerate_formulas(2, &PredKind::ALL, 1).unwrap();
        for (i, formula) in formulas.iter().enumerate() {
            let config = SampleConfig { count: 2, seed: 100 + i as u64, ..SampleConfig::default() };
            for (heap, trace) in sample_heap_graphs(formula, &config).unwrap() {
                let mut named_before = heap.initial_annotations();
                let mut seen_declare_no = false;
                for step in &trace.steps {
                    // is-named only grows
                    for v in heap.graph().nodes() {
                        assert!(
                            step.annot.get(v, BIT_NAMED) >= named_before.get(v, BIT_NAMED),
                            "{formula}: is-named shrank"
                        );
                    }
                    named_before = step.annot.clone();
                    let active: Vec<NodeId> = heap
                        .graph()
                        .nodes()
                        .filter(|&v| step.annot.get(v, BIT_ACTIVE) == 1.0)
                        .collect();
                    match &step.action {
                        StepAction::DeclareMore(more) => {
                            assert!(active.is_empty());
                            if !more {
                                seen_declare_no = true;
                            }
                        }
                        StepAction::PickExistential(v) => {
                            assert!(active.is_empty());
                            assert_eq!(step.annot.get(*v, BIT_NAMED), 0.0);
                        }
                        _ => assert_eq!(active.len(), 1, "{formula}: one active node per round"),
                    }
                }
                assert!(seen_declare_no, "{formula}: existential phase never closed");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let formula = parse_formula("exists t1 . ls(t1, t1) * ls(x, t1) * tree(y)")
            .unwrap()
            .canonicalize();
        let config = SampleConfig { count: 4, seed: 21, ..SampleConfig::default() };
        let a = sample_heap_graphs(&formula, &config).unwrap();
        let b = sample_heap_graphs(&formula, &config).unwrap();
        assert_eq!(a.len(), b.len());
        for ((ha, _), (hb, _)) in a.iter().zip(&b) {
            assert_eq!(ha.to_text(), hb.to_text());
        }
        let other = SampleConfig { seed: 22, ..config };
        let c = sample_heap_graphs(&formula, &other).unwrap();
        assert!(a.iter().zip(&c).any(|((ha, _), (hc, _))| ha.to_text() != hc.to_text()));
    }

    #[test]
    fn dataset_split_is_by_formula() {
        let config = SepDataConfig {
            train_graphs_per_formula: 3,
            eval_graphs_per_formula: 2,
            seed: 9,
            ..SepDataConfig::default()
        };
        let data = build_sep_dataset(&config).unwrap();
        assert_eq!(data.formulas.len(), 48);
        assert_eq!(data.train_formulas.len(), 28);
        assert_eq!(data.valid_formulas.len(), 9);
        assert_eq!(data.test_formulas.len(), 11);
        assert_eq!(data.train.len(), 28 * 3);
        assert_eq!(data.test.len(), 11 * 2);

        let train_set: BTreeSet<usize> = data.train.iter().map(|i| i.formula).collect();
        let test_set: BTreeSet<usize> = data.test.iter().map(|i| i.formula).collect();
        assert!(train_set.is_disjoint(&test_set), "train formulas leaked into test");
    }

    #[test]
    fn component_extraction_counts_match_trace_shapes() {
        let config = SepDataConfig {
            train_graphs_per_formula: 2,
            eval_graphs_per_formula: 1,
            seed: 13,
            ..SepDataConfig::default()
        };
        let data = build_sep_dataset(&config).unwrap();
        let comp = component_data(&data.train);

        let n_steps: usize = data.train.iter().map(|i| i.trace.steps.len()).sum();
        let total = comp.declare.len()
            + comp.pick_existential.len()
            + comp.predicate.len()
            + comp.list_end.len()
            + comp.annotate.len();
        assert_eq!(total, n_steps);
        // every instance closes its existential phase and updates per name
        assert!(comp.declare.len() >= data.train.len());
        assert_eq!(comp.annotate.len(), comp.predicate.len());
        // both declare classes are present
        let yes = comp
            .declare
            .iter()
            .filter(|i| i.target == Target::Class(1))
            .count();
        assert!(yes > 0 && yes < comp.declare.len());
    }
}
