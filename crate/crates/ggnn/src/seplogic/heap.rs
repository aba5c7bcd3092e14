//! Heap states as typed graphs: nodes are memory addresses, edge types are
//! pointer fields, and a designated node stands for the null address.
//!
//! The satisfaction oracle below decides `graph |= formula` exactly, by
//! trying every assignment of existentials to nodes and every way of
//! carving the allocated cells into disjoint per-atom regions. It is meant
//! for small graphs and keeps the rest of the pipeline honest.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{parse_graph_file, serialize_graph, AnnotationMatrix, EdgeTypeId, NodeId, TypedGraph};

use super::formula::{Atom, SepFormula, Term, NULL_NAME};

/// Pointer fields, doubling as edge types.
pub const FIELD_NEXT: EdgeTypeId = EdgeTypeId(1);
pub const FIELD_LEFT: EdgeTypeId = EdgeTypeId(2);
pub const FIELD_RIGHT: EdgeTypeId = EdgeTypeId(3);
pub const NUM_FIELDS: usize = 3;

/// Annotation bit layout shared by the whole pipeline.
pub const BIT_NAMED: usize = 0;
pub const BIT_ACTIVE: usize = 1;
pub const BIT_EXPLAINED: usize = 2;
pub const ANNOT_BITS: usize = 3;

/// A memory snapshot. Program variables live in their own map so that
/// several of them may label one address (all of them null, say).
#[derive(Debug, Clone)]
pub struct HeapGraph {
    graph: TypedGraph,
    null: NodeId,
    vars: Vec<(String, NodeId)>,
}

impl HeapGraph {
    /// Every node's outgoing edges must carry distinct fields, the null
    /// node must have none, and variable names must be unique.
    pub fn new(graph: TypedGraph, null: NodeId, mut vars: Vec<(String, NodeId)>) -> Result<HeapGraph> {
        let in_range = |v: NodeId| v.0 >= 1 && v.0 <= graph.num_nodes();
        if !in_range(null) {
            return Err(Error::Format(format!("null node {} out of range", null.0)));
        }
        vars.sort();
        for pair in vars.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Format(format!("variable {} bound twice", pair[0].0)));
            }
        }
        for (name, node) in &vars {
            if name == NULL_NAME {
                return Err(Error::Format(format!("{NULL_NAME} is not a variable name")));
            }
            if !in_range(*node) {
                return Err(Error::Format(format!("variable {name} points at a missing node")));
            }
        }
        for node in graph.nodes() {
            let mut seen = vec![false; graph.num_edge_types() + 1];
            for e in graph.edges().iter().filter(|e| e.src == node) {
                if node == null {
                    return Err(Error::Format("null node cannot have outgoing edges".into()));
                }
                if seen[e.etype.0] {
                    return Err(Error::Format(format!(
                        "node {} repeats outgoing field {}",
                        node.0, e.etype.0
                    )));
                }
                seen[e.etype.0] = true;
            }
        }
        Ok(HeapGraph { graph, null, vars })
    }

    pub fn graph(&self) -> &TypedGraph {
        &self.graph
    }

    pub fn null(&self) -> NodeId {
        self.null
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    /// Program variables in name order, with the node each one labels.
    pub fn variables(&self) -> &[(String, NodeId)] {
        &self.vars
    }

    pub fn variable_node(&self, name: &str) -> Option<NodeId> {
        if name == NULL_NAME {
            return Some(self.null);
        }
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Outgoing field labels of a node, ascending.
    pub fn fields(&self, node: NodeId) -> Vec<EdgeTypeId> {
        let mut out: Vec<EdgeTypeId> = self
            .graph
            .edges()
            .iter()
            .filter(|e| e.src == node)
            .map(|e| e.etype)
            .collect();
        out.sort_by_key(|t| t.0);
        out
    }

    pub fn field(&self, node: NodeId, field: EdgeTypeId) -> Option<NodeId> {
        self.graph
            .edges()
            .iter()
            .find(|e| e.src == node && e.etype == field)
            .map(|e| e.dst)
    }

    /// Allocated addresses: every node except null.
    pub fn cells(&self) -> BTreeSet<NodeId> {
        self.graph.nodes().filter(|&v| v != self.null).collect()
    }

    /// The `{is-named, active, is-explained}` bits at the start of a run:
    /// variables and null carry is-named, everything else is blank.
    pub fn initial_annotations(&self) -> AnnotationMatrix {
        let mut x = AnnotationMatrix::zeros(self.num_nodes(), ANNOT_BITS);
        x.set(self.null, BIT_NAMED, 1.0);
        for (_, node) in &self.vars {
            x.set(*node, BIT_NAMED, 1.0);
        }
        x
    }

    /// Renumber nodes; `perm[old_index] = new_index`.
    pub fn relabel(&self, perm: &[usize]) -> Result<HeapGraph> {
        let graph = self.graph.relabel(perm)?;
        let vars = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), NodeId::from_index(perm[v.index()])))
            .collect();
        HeapGraph::new(graph, NodeId::from_index(perm[self.null.index()]), vars)
    }

    /// Graph-core file format; the null marker and the program variables go
    /// out as `name` lines.
    pub fn to_text(&self) -> String {
        let bare = TypedGraph::new(
            self.num_nodes(),
            self.graph.num_edge_types(),
            self.graph.edges().to_vec(),
        )
        .expect("valid by construction");
        let mut out = serialize_graph(&bare, &self.initial_annotations());
        let _ = writeln!(out, "name {} {}", self.null.0, NULL_NAME);
        for (name, node) in &self.vars {
            let _ = writeln!(out, "name {} {}", node.0, name);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<HeapGraph> {
        let (graph, _) = parse_graph_file(text)?;
        let mut null = None;
        let mut vars = Vec::new();
        for line in text.lines().map(str::trim) {
            let Some(rest) = line.strip_prefix("name ") else { continue };
            let (id, name) = rest
                .split_once(' ')
                .ok_or_else(|| Error::Format("name line needs `name <node> <str>`".into()))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("bad node id in name line {line:?}")))?;
            if name == NULL_NAME {
                if null.replace(NodeId(id)).is_some() {
                    return Err(Error::Format("two nodes claim to be null".into()));
                }
            } else {
                vars.push((name.to_string(), NodeId(id)));
            }
        }
        let null =
            null.ok_or_else(|| Error::Format(format!("heap graph has no {NULL_NAME} node")))?;
        HeapGraph::new(graph, null, vars)
    }
}

// ---------------------------------------------------------------------------
// Satisfaction oracle

/// Does the heap satisfy the formula? Exhaustive: existentials range over
/// all nodes, and the atoms must carve the allocated cells into disjoint
/// regions that cover every cell.
pub fn satisfies(heap: &HeapGraph, formula: &SepFormula) -> bool {
    // free variables must be program variables of the graph
    let mut base: Vec<(String, NodeId)> = Vec::new();
    for name in formula.free_vars() {
        match heap.variable_node(&name) {
            Some(node) => base.push((name, node)),
            None => return false,
        }
    }
    let nodes: Vec<NodeId> = heap.graph.nodes().collect();
    let mut assignment = vec![NodeId(1); formula.existentials.len()];
    assign_and_check(heap, formula, &base, &nodes, 0, &mut assignment)
}

fn assign_and_check(
    heap: &HeapGraph,
    formula: &SepFormula,
    base: &[(String, NodeId)],
    nodes: &[NodeId],
    depth: usize,
    assignment: &mut Vec<NodeId>,
) -> bool {
    if depth == formula.existentials.len() {
        let lookup = |term: &Term| -> NodeId {
            match term {
                Term::Null => heap.null(),
                Term::Var(name) => {
                    if let Some(i) = formula.existentials.iter().position(|e| e == name) {
                        assignment[i]
                    } else {
                        base.iter().find(|(n, _)| n == name).map(|(_, v)| *v).unwrap()
                    }
                }
            }
        };
        let mut used = BTreeSet::new();
        return cover(heap, &formula.atoms, &lookup, &mut used);
    }
    for &node in nodes {
        assignment[depth] = node;
        if assign_and_check(heap, formula, base, nodes, depth + 1, assignment) {
            return true;
        }
    }
    false
}

/// Backtracking exact cover: pick a region for each atom in turn; regions
/// must be pairwise disjoint and end up covering all cells.
fn cover(
    heap: &HeapGraph,
    atoms: &[Atom],
    lookup: &dyn Fn(&Term) -> NodeId,
    used: &mut BTreeSet<NodeId>,
) -> bool {
    let Some((atom, rest)) = atoms.split_first() else {
        return *used == heap.cells();
    };
    for region in atom_regions(heap, atom, lookup) {
        if region.iter().any(|v| used.contains(v)) {
            continue;
        }
        used.extend(region.iter().copied());
        if cover(heap, rest, lookup, used) {
            return true;
        }
        for v in &region {
            used.remove(v);
        }
    }
    false
}

/// The candidate regions an atom can claim under a given assignment.
pub(crate) fn atom_regions(
    heap: &HeapGraph,
    atom: &Atom,
    lookup: &dyn Fn(&Term) -> NodeId,
) -> Vec<BTreeSet<NodeId>> {
    match atom {
        Atom::Ls(a, b) => ls_regions(heap, lookup(a), lookup(b)),
        Atom::Tree(a) => tree_region(heap, lookup(a)).into_iter().collect(),
        Atom::None(a) => {
            let node = lookup(a);
            if node == heap.null() {
                vec![BTreeSet::new()]
            } else if heap.fields(node).is_empty() {
                // an unallocated marker: the variable holds a dangling
                // address with no structure behind it
                vec![BTreeSet::from([node])]
            } else {
                Vec::new()
            }
        }
    }
}

/// `ls(x, y)` is either the empty segment (x = y) or one cell followed by a
/// segment. Next-pointers are unique, so the possible regions are exactly
/// the walk prefixes from x that stop at y.
fn ls_regions(heap: &HeapGraph, start: NodeId, end: NodeId) -> Vec<BTreeSet<NodeId>> {
    let mut regions = Vec::new();
    let mut region = BTreeSet::new();
    let mut pos = start;
    loop {
        if pos == end {
            regions.push(region.clone());
        }
        if pos == heap.null() || region.contains(&pos) {
            break;
        }
        // a segment cell is exactly a `next` record
        if heap.fields(pos) != [FIELD_NEXT] {
            break;
        }
        let next = heap.field(pos, FIELD_NEXT).unwrap();
        region.insert(pos);
        pos = next;
    }
    regions
}

/// `tree(x)` is empty for null, otherwise a `left`/`right` record over two
/// disjoint trees; the unfolding is forced, so there is at most one region.
fn tree_region(heap: &HeapGraph, root: NodeId) -> Option<BTreeSet<NodeId>> {
    let mut region = BTreeSet::new();
    if collect_tree(heap, root, &mut region) {
        Some(region)
    } else {
        None
    }
}

fn collect_tree(heap: &HeapGraph, node: NodeId, region: &mut BTreeSet<NodeId>) -> bool {
    if node == heap.null() {
        return true;
    }
    if region.contains(&node) {
        return false; // sharing or a cycle: not a tree
    }
    if heap.fields(node) != [FIELD_LEFT, FIELD_RIGHT] {
        return false;
    }
    region.insert(node);
    let left = heap.field(node, FIELD_LEFT).unwrap();
    let right = heap.field(node, FIELD_RIGHT).unwrap();
    collect_tree(heap, left, region) && collect_tree(heap, right, region)
}
