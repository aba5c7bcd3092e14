//! Typed directed multigraphs, the symbolic story format, per-node
//! annotations, and the token encoding consumed by the sequence baselines.
//!
//! Node ids and edge-type ids are 1-based and dense. Entities are mapped to
//! node ids in order of first appearance in the fact lines; relation and
//! question-type ids are interned into a caller-supplied vocabulary so they
//! stay dense across a whole dataset rather than per story.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fmt::Write as _;

/// 1-based dense node id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl NodeId {
    /// 0-based row index for matrix storage.
    #[inline]
    pub fn index(self) -> usize {
        debug_assert!(self.0 >= 1);
        self.0 - 1
    }

    #[inline]
    pub fn from_index(i: usize) -> Self {
        NodeId(i + 1)
    }
}

/// 1-based dense edge-type id. Type 0 is invalid everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeTypeId(pub usize);

impl EdgeTypeId {
    #[inline]
    pub fn index(self) -> usize {
        debug_assert!(self.0 >= 1);
        self.0 - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: NodeId,
    pub etype: EdgeTypeId,
    pub dst: NodeId,
}

/// Directed multigraph with typed edges. Parallel edges and self-loops are
/// allowed; reverse edges are not stored (propagation derives both
/// directions from the one edge list).
#[derive(Debug, Clone, PartialEq)]
pub struct TypedGraph {
    num_nodes: usize,
    num_edge_types: usize,
    edges: Vec<Edge>,
    node_names: Vec<Option<String>>,
}

impl TypedGraph {
    pub fn new(num_nodes: usize, num_edge_types: usize, edges: Vec<Edge>) -> Result<Self> {
        for e in &edges {
            if e.etype.0 == 0 {
                return Err(Error::Format("edge type 0: types are 1-based".into()));
            }
            if e.etype.0 > num_edge_types {
                return Err(Error::Format(format!(
                    "edge type {} out of 1..={num_edge_types}",
                    e.etype.0
                )));
            }
            for node in [e.src, e.dst] {
                if node.0 == 0 || node.0 > num_nodes {
                    return Err(Error::Format(format!(
                        "node id {} out of 1..={num_nodes}",
                        node.0
                    )));
                }
            }
        }
        Ok(TypedGraph {
            num_nodes,
            num_edge_types,
            edges,
            node_names: vec![None; num_nodes],
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edge_types(&self) -> usize {
        self.num_edge_types
    }

    /// Widen the edge-type space (dataset-level vocabularies can grow after
    /// an individual story was parsed).
    pub fn set_num_edge_types(&mut self, k: usize) -> Result<()> {
        let used = self.edges.iter().map(|e| e.etype.0).max().unwrap_or(0);
        if k < used {
            return Err(Error::Format(format!(
                "num_edge_types {k} below used edge type {used}"
            )));
        }
        self.num_edge_types = k;
        Ok(())
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edges_of_type(&self, etype: EdgeTypeId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.etype == etype)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (1..=self.num_nodes).map(NodeId)
    }

    pub fn set_name(&mut self, node: NodeId, name: &str) {
        self.node_names[node.index()] = Some(name.to_string());
    }

    pub fn name(&self, node: NodeId) -> Option<&str> {
        self.node_names[node.index()].as_deref()
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.node_names
            .iter()
            .position(|n| n.as_deref() == Some(name))
            .map(NodeId::from_index)
    }

    pub fn names(&self) -> &[Option<String>] {
        &self.node_names
    }

    /// Relabel nodes: `perm[old_index] = new_index` (a permutation of
    /// 0..num_nodes). Edge order is preserved; names move with their nodes.
    pub fn relabel(&self, perm: &[usize]) -> Result<TypedGraph> {
        if perm.len() != self.num_nodes {
            return Err(Error::Format("relabel: permutation length mismatch".into()));
        }
        let mut seen = vec![false; self.num_nodes];
        for &p in perm {
            if p >= self.num_nodes || seen[p] {
                return Err(Error::Format("relabel: not a permutation".into()));
            }
            seen[p] = true;
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: NodeId::from_index(perm[e.src.index()]),
                etype: e.etype,
                dst: NodeId::from_index(perm[e.dst.index()]),
            })
            .collect();
        let mut g = TypedGraph::new(self.num_nodes, self.num_edge_types, edges)?;
        for (old, name) in self.node_names.iter().enumerate() {
            if let Some(name) = name {
                g.node_names[perm[old]] = Some(name.clone());
            }
        }
        Ok(g)
    }
}

/// Per-node annotation rows (num_nodes x width). Initial task annotations
/// are 0/1 bits; predicted annotations are sigmoid values in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMatrix(Tensor);

impl AnnotationMatrix {
    pub fn zeros(num_nodes: usize, width: usize) -> Self {
        AnnotationMatrix(Tensor::zeros(num_nodes, width))
    }

    pub fn from_tensor(t: Tensor) -> Self {
        AnnotationMatrix(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, node: NodeId, bit: usize) -> f64 {
        self.0.get(node.index(), bit)
    }

    pub fn set(&mut self, node: NodeId, bit: usize, v: f64) {
        self.0.set(node.index(), bit, v);
    }

    pub fn relabel(&self, perm: &[usize]) -> AnnotationMatrix {
        let mut out = Tensor::zeros(self.0.rows(), self.0.cols());
        for i in 0..self.0.rows() {
            out.row_mut(perm[i]).copy_from_slice(self.0.row(i));
        }
        AnnotationMatrix(out)
    }
}

/// Initial annotations for a question: argument node `i` gets bit `i` set,
/// everything else (including the padding columns) is zero.
pub fn build_initial_annotations(
    graph: &TypedGraph,
    args: &[NodeId],
    width: usize,
) -> Result<AnnotationMatrix> {
    if args.len() > width {
        return Err(Error::dim(
            "build_initial_annotations",
            format!("{} arguments exceed annotation width {width}", args.len()),
        ));
    }
    let mut x = AnnotationMatrix::zeros(graph.num_nodes(), width);
    for (bit, &node) in args.iter().enumerate() {
        if node.0 == 0 || node.0 > graph.num_nodes() {
            return Err(Error::dim("build_initial_annotations", "argument node out of range"));
        }
        x.set(node, bit, 1.0);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    /// 1-based dense id from the dataset vocabulary.
    pub qtype_id: usize,
    pub qtype: String,
    pub args: Vec<NodeId>,
    /// Raw answer tokens (entity names or class labels), comma-split from
    /// the last field of the eval line.
    pub answer: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicInstance {
    pub graph: TypedGraph,
    pub questions: Vec<Question>,
}

/// Dense 1-based string interner.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interner {
    names: Vec<String>,
    by_name: HashMap<String, usize>,
}

impl Interner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        self.names.push(name.to_string());
        let id = self.names.len();
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Name for a 1-based id.
    pub fn name(&self, id: usize) -> &str {
        &self.names[id - 1]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Relation and question-type vocabularies shared across a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoryVocab {
    pub relations: Interner,
    pub qtypes: Interner,
}

/// Parse one story: `ENT rel ENT` fact lines and
/// `eval qtype arg... answer` question lines (answer comma-split).
pub fn parse_symbolic(text: &str, vocab: &mut StoryVocab) -> Result<SymbolicInstance> {
    parse_symbolic_at(text, 1, vocab)
}

fn parse_symbolic_at(
    text: &str,
    first_line: usize,
    vocab: &mut StoryVocab,
) -> Result<SymbolicInstance> {
    let mut entities = Interner::new();
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (first_line + i, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, toks)| !toks.is_empty())
        .collect();

    // First pass: entities come from fact lines, in order of appearance.
    let mut num_facts = 0usize;
    for (lineno, toks) in &lines {
        if toks[0] == "eval" {
            continue;
        }
        if toks.len() != 3 {
            return Err(Error::parse(
                *lineno,
                format!("fact needs `ENT rel ENT`, got {} tokens", toks.len()),
            ));
        }
        entities.intern(toks[0]);
        entities.intern(toks[2]);
        num_facts += 1;
    }

    let mut edges = Vec::new();
    let mut questions = Vec::new();
    for (lineno, toks) in &lines {
        if toks[0] != "eval" {
            let src = NodeId(entities.get(toks[0]).expect("interned in first pass"));
            let etype = EdgeTypeId(vocab.relations.intern(toks[1]));
            let dst = NodeId(entities.get(toks[2]).expect("interned in first pass"));
            edges.push(Edge { src, etype, dst });
            continue;
        }
        if toks.len() < 4 {
            return Err(Error::parse(
                *lineno,
                "eval needs `eval qtype arg... answer`".to_string(),
            ));
        }
        // Questions come in two shapes mirroring the fact syntax: prefix
        // `eval path B A w,s` and infix `eval B has_fear H` (the question
        // type sits where the relation would). If the token after `eval` is
        // a known entity and the one after that is not, the line is infix.
        let qtype_pos = if entities.get(toks[1]).is_some() && entities.get(toks[2]).is_none() {
            2
        } else {
            1
        };
        let qtype = toks[qtype_pos];
        let mut args = Vec::new();
        let arg_toks = toks[1..toks.len() - 1]
            .iter()
            .enumerate()
            .filter(|(i, _)| i + 1 != qtype_pos)
            .map(|(_, &t)| t);
        for arg in arg_toks {
            let id = match entities.get(arg) {
                Some(id) => id,
                // A story with no facts at all is a degenerate graph made of
                // the question's own argument nodes; otherwise an unknown
                // entity in a question is a data error.
                None if num_facts == 0 => entities.intern(arg),
                None => {
                    return Err(Error::parse(
                        *lineno,
                        format!("eval references unknown entity {arg:?}"),
                    ));
                }
            };
            args.push(NodeId(id));
        }
        let answer: Vec<String> = toks[toks.len() - 1]
            .split(',')
            .map(str::to_string)
            .collect();
        questions.push(Question {
            qtype_id: vocab.qtypes.intern(qtype),
            qtype: qtype.to_string(),
            args,
            answer,
        });
    }

    if entities.is_empty() {
        return Err(Error::parse(first_line, "story has no entities".to_string()));
    }
    let mut graph = TypedGraph::new(entities.len(), vocab.relations.len(), edges)?;
    for id in 1..=entities.len() {
        graph.set_name(NodeId(id), entities.name(id));
    }
    Ok(SymbolicInstance { graph, questions })
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub instances: Vec<SymbolicInstance>,
    pub vocab: StoryVocab,
}

/// Parse a whole file of stories separated by blank lines. Edge-type ids are
/// dense over the file; every returned graph carries the final type count.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    parse_dataset_with(text, StoryVocab::default())
}

/// Like `parse_dataset` but extending an existing vocabulary (used to parse
/// a test split against the training vocabulary).
pub fn parse_dataset_with(text: &str, mut vocab: StoryVocab) -> Result<Dataset> {
    let mut instances = Vec::new();
    let mut chunk = String::new();
    let mut chunk_start = 1usize;
    let mut flush = |chunk: &mut String, start: usize, vocab: &mut StoryVocab| -> Result<()> {
        if !chunk.trim().is_empty() {
            instances.push(parse_symbolic_at(chunk, start, vocab)?);
        }
        chunk.clear();
        Ok(())
    };
    let mut lineno = 0usize;
    for line in text.lines() {
        lineno += 1;
        if line.trim().is_empty() {
            flush(&mut chunk, chunk_start, &mut vocab)?;
            chunk_start = lineno + 1;
        } else {
            chunk.push_str(line);
            chunk.push('\n');
        }
    }
    flush(&mut chunk, chunk_start, &mut vocab)?;
    let k = vocab.relations.len();
    for inst in &mut instances {
        inst.graph.set_num_edge_types(k)?;
    }
    Ok(Dataset { instances, vocab })
}

/// Render a story back to the symbolic format (inverse of `parse_symbolic`
/// for named graphs; edge order is preserved).
pub fn serialize_symbolic(inst: &SymbolicInstance, vocab: &StoryVocab) -> String {
    let mut out = String::new();
    let name = |n: NodeId| inst.graph.name(n).expect("symbolic instances name every node");
    for e in inst.graph.edges() {
        let _ = writeln!(
            out,
            "{} {} {}",
            name(e.src),
            vocab.relations.name(e.etype.0),
            name(e.dst)
        );
    }
    for q in &inst.questions {
        let args: Vec<&str> = q.args.iter().map(|&a| name(a)).collect();
        let _ = writeln!(out, "eval {} {} {}", q.qtype, args.join(" "), q.answer.join(","));
    }
    out
}

/// Graph file format: a `nodes=<n> etypes=<K> annot=<L>` header, then
/// `edge <src> <etype> <dst>`, `annot <node> <bit>` and `name <node> <str>`
/// lines. Node and edge-type ids are 1-based; annotation bits are 0-based.
pub fn serialize_graph(graph: &TypedGraph, annotations: &AnnotationMatrix) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "nodes={} etypes={} annot={}",
        graph.num_nodes(),
        graph.num_edge_types(),
        annotations.width()
    );
    for e in graph.edges() {
        let _ = writeln!(out, "edge {} {} {}", e.src.0, e.etype.0, e.dst.0);
    }
    for node in graph.nodes() {
        for bit in 0..annotations.width() {
            if annotations.get(node, bit) != 0.0 {
                let _ = writeln!(out, "annot {} {}", node.0, bit);
            }
        }
    }
    for node in graph.nodes() {
        if let Some(name) = graph.name(node) {
            let _ = writeln!(out, "name {} {}", node.0, name);
        }
    }
    out
}

pub fn parse_graph_file(text: &str) -> Result<(TypedGraph, AnnotationMatrix)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines
        .by_ref()
        .find(|(_, l)| !l.is_empty())
        .ok_or_else(|| Error::parse(1, "empty graph file"))?;
    let mut nodes = None;
    let mut etypes = None;
    let mut annot = None;
    for field in header.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("bad header field {field:?}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| Error::parse(1, format!("bad header value {field:?}")))?;
        match k {
            "nodes" => nodes = Some(v),
            "etypes" => etypes = Some(v),
            "annot" => annot = Some(v),
            _ => return Err(Error::parse(1, format!("unknown header field {k:?}"))),
        }
    }
    let (num_nodes, num_etypes, width) = match (nodes, etypes, annot) {
        (Some(n), Some(k), Some(l)) => (n, k, l),
        _ => return Err(Error::parse(1, "header needs nodes=, etypes=, annot=")),
    };

    let mut edges = Vec::new();
    let mut names: Vec<Option<String>> = vec![None; num_nodes];
    let mut x = AnnotationMatrix::zeros(num_nodes, width);
    let node_in_range = |lineno: usize, id: usize| -> Result<NodeId> {
        if id == 0 || id > num_nodes {
            return Err(Error::parse(lineno, format!("node id {id} out of 1..={num_nodes}")));
        }
        Ok(NodeId(id))
    };
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.splitn(4, ' ').collect();
        match toks[0] {
            "edge" => {
                if toks.len() != 4 {
                    return Err(Error::parse(lineno, "edge needs `edge src etype dst`"));
                }
                let src: usize = toks[1]
                    .parse()
                    .map_err(|_| Error::parse(lineno, "bad edge src"))?;
                let et: usize = toks[2]
                    .parse()
                    .map_err(|_| Error::parse(lineno, "bad edge type"))?;
                let dst: usize = toks[3]
                    .parse()
                    .map_err(|_| Error::parse(lineno, "bad edge dst"))?;
                if et == 0 {
                    return Err(Error::parse(lineno, "edge type 0: types are 1-based"));
                }
                if et > num_etypes {
                    return Err(Error::parse(
                        lineno,
                        format!("edge type {et} out of 1..={num_etypes}"),
                    ));
                }
                edges.push(Edge {
                    src: node_in_range(lineno, src)?,
                    etype: EdgeTypeId(et),
                    dst: node_in_range(lineno, dst)?,
                });
            }
            "annot" => {
                if toks.len() != 3 {
                    return Err(Error::parse(lineno, "annot needs `annot node bit`"));
                }
                let node: usize = toks[1]
                    .parse()
                    .map_err(|_| Error::parse(lineno, "bad annot node"))?;
                let bit: usize = toks[2]
                    .parse()
                    .map_err(|_| Error::parse(lineno, "bad annot bit"))?;
                if bit >= width {
                    return Err(Error::parse(lineno, format!("annot bit {bit} out of 0..{width}")));
                }
                x.set(node_in_range(lineno, node)?, bit, 1.0);
            }
            "name" => {
                if toks.len() < 3 {
                    return Err(Error::parse(lineno, "name needs `name node string`"));
                }
                let node: usize = toks[1]
                    .parse()
                    .map_err(|_| Error::parse(lineno, "bad name node"))?;
                let node = node_in_range(lineno, node)?;
                names[node.index()] = Some(toks[2..].join(" "));
            }
            other => {
                return Err(Error::parse(lineno, format!("unknown line tag {other:?}")));
            }
        }
    }
    let mut graph = TypedGraph::new(num_nodes, num_etypes, edges)?;
    for (i, name) in names.into_iter().enumerate() {
        if let Some(name) = name {
            graph.set_name(NodeId::from_index(i), name.as_str());
        }
    }
    Ok((graph, x))
}

/// Token string for one question of a story, in the form consumed by the
/// RNN/LSTM baselines: `n<i> e<t> n<j> eol` per fact, then
/// `q<t> n<arg>... ans` followed by the target tokens.
///
/// Ids are per-instance and deliberately decoupled from the entity names:
/// entities are numbered 1.. in sorted order (numeric when every name is a
/// number), relations and question types in lexicographic order. Answer
/// tokens that name entities are emitted as their dense id; other answer
/// tokens (class labels) pass through unchanged.
pub fn tokenize_for_rnn(
    inst: &SymbolicInstance,
    question: usize,
    vocab: &StoryVocab,
) -> Result<Vec<String>> {
    let q = inst
        .questions
        .get(question)
        .ok_or_else(|| Error::Format(format!("no question {question}")))?;
    let mut names: Vec<&str> = Vec::with_capacity(inst.graph.num_nodes());
    for node in inst.graph.nodes() {
        names.push(
            inst.graph
                .name(node)
                .ok_or_else(|| Error::Format("tokenize needs named nodes".into()))?,
        );
    }
    let all_numeric = names.iter().all(|n| n.parse::<u64>().is_ok());
    let mut sorted = names.clone();
    if all_numeric {
        sorted.sort_by_key(|n| n.parse::<u64>().unwrap());
    } else {
        sorted.sort_unstable();
    }
    let ent_id = |name: &str| -> usize {
        sorted.iter().position(|&n| n == name).expect("name from this graph") + 1
    };

    let mut rels: Vec<&str> = inst
        .graph
        .edges()
        .iter()
        .map(|e| vocab.relations.name(e.etype.0))
        .collect();
    rels.sort_unstable();
    rels.dedup();
    let rel_id = |name: &str| rels.iter().position(|&n| n == name).unwrap() + 1;

    let mut qts: Vec<&str> = inst.questions.iter().map(|q| q.qtype.as_str()).collect();
    qts.sort_unstable();
    qts.dedup();
    let qt_id = |name: &str| qts.iter().position(|&n| n == name).unwrap() + 1;

    let mut toks = Vec::new();
    for e in inst.graph.edges() {
        let src = inst.graph.name(e.src).unwrap();
        let dst = inst.graph.name(e.dst).unwrap();
        toks.push(format!("n{}", ent_id(src)));
        toks.push(format!("e{}", rel_id(vocab.relations.name(e.etype.0))));
        toks.push(format!("n{}", ent_id(dst)));
        toks.push("eol".to_string());
    }
    toks.push(format!("q{}", qt_id(&q.qtype)));
    for &arg in &q.args {
        toks.push(format!("n{}", ent_id(inst.graph.name(arg).unwrap())));
    }
    toks.push("ans".to_string());
    for a in &q.answer {
        if names.contains(&a.as_str()) {
            toks.push(ent_id(a).to_string());
        } else {
            toks.push(a.clone());
        }
    }
    Ok(toks)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FEAR_STORY: &str = "\
D is A
B is E
A has_fear F
G is F
E has_fear H
F has_fear A
H has_fear A
C is H
eval B has_fear H
eval G has_fear A
eval C has_fear A
eval A has_fear F
";

    #[test]
    fn fact_story_parses_with_first_appearance_ids() {
        let mut vocab = StoryVocab::default();
        let inst = parse_symbolic(FEAR_STORY, &mut vocab).unwrap();
        assert_eq!(inst.graph.num_nodes(), 8);
        assert_eq!(inst.graph.num_edge_types(), 2);
        assert_eq!(inst.graph.edges().len(), 8);
        // First-appearance order: D A B E F G H C.
        assert_eq!(inst.graph.name(NodeId(1)), Some("D"));
        assert_eq!(inst.graph.name(NodeId(2)), Some("A"));
        assert_eq!(inst.graph.name(NodeId(8)), Some("C"));
        assert_eq!(vocab.relations.name(1), "is");
        assert_eq!(vocab.relations.name(2), "has_fear");
        assert_eq!(inst.questions.len(), 4);
        let q = &inst.questions[0];
        assert_eq!(q.qtype, "has_fear");
        assert_eq!(q.args, vec![inst.graph.node_by_name("B").unwrap()]);
        assert_eq!(q.answer, vec!["H".to_string()]);
    }

    #[test]
    fn reparsing_identical_text_gives_identical_ids() {
        let mut v1 = StoryVocab::default();
        let mut v2 = StoryVocab::default();
        let a = parse_symbolic(FEAR_STORY, &mut v1).unwrap();
        let b = parse_symbolic(FEAR_STORY, &mut v2).unwrap();
        assert_eq!(a, b);
        assert_eq!(v1, v2);
    }

    #[test]
    fn direction_story_parses() {
        let text = "E s A\nB n C\nE w F\nB w E\neval path B A w,s\n";
        let mut vocab = StoryVocab::default();
        let inst = parse_symbolic(text, &mut vocab).unwrap();
        assert_eq!(inst.graph.num_nodes(), 5);
        // Only s, n, w appear in this story; e would join the vocabulary
        // through other stories of the same dataset.
        assert_eq!(inst.graph.num_edge_types(), 3);
        let q = &inst.questions[0];
        assert_eq!(q.args.len(), 2);
        assert_eq!(q.answer, vec!["w".to_string(), "s".to_string()]);
    }

    #[test]
    fn eval_with_unknown_entity_is_an_error_with_line_number() {
        let mut vocab = StoryVocab::default();
        let err = parse_symbolic("A is B\neval q C true\n", &mut vocab).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("C"), "{msg}");
    }

    #[test]
    fn story_with_no_facts_builds_graph_from_question_arguments() {
        let mut vocab = StoryVocab::default();
        let inst = parse_symbolic("eval reach X Y false\n", &mut vocab).unwrap();
        assert_eq!(inst.graph.num_nodes(), 2);
        assert_eq!(inst.graph.edges().len(), 0);
        assert_eq!(inst.graph.name(NodeId(1)), Some("X"));
        assert_eq!(inst.graph.name(NodeId(2)), Some("Y"));
    }

    #[test]
    fn malformed_fact_arity_is_an_error_with_line_number() {
        let mut vocab = StoryVocab::default();
        let err = parse_symbolic("A is\n", &mut vocab).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn initial_annotations_one_hot_per_argument() {
        let mut vocab = StoryVocab::default();
        let inst = parse_symbolic("E bigger A\neval gt E A true\n", &mut vocab).unwrap();
        let q = &inst.questions[0];
        let x = build_initial_annotations(&inst.graph, &q.args, 2).unwrap();
        let e = inst.graph.node_by_name("E").unwrap();
        let a = inst.graph.node_by_name("A").unwrap();
        assert_eq!(x.get(e, 0), 1.0);
        assert_eq!(x.get(e, 1), 0.0);
        assert_eq!(x.get(a, 1), 1.0);
        assert_eq!(x.get(a, 0), 0.0);
        // Too many arguments for the width must fail.
        assert!(build_initial_annotations(&inst.graph, &q.args, 1).is_err());
    }

    #[test]
    fn symbolic_round_trip_preserves_instance() {
        let mut vocab = StoryVocab::default();
        let inst = parse_symbolic(FEAR_STORY, &mut vocab).unwrap();
        let text = serialize_symbolic(&inst, &vocab);
        let mut vocab2 = StoryVocab::default();
        let back = parse_symbolic(&text, &mut vocab2).unwrap();
        assert_eq!(inst, back);
    }

    #[test]
    fn graph_file_round_trip() {
        let mut vocab = StoryVocab::default();
        let inst = parse_symbolic(FEAR_STORY, &mut vocab).unwrap();
        let x = build_initial_annotations(&inst.graph, &inst.questions[0].args, 2).unwrap();
        let text = serialize_graph(&inst.graph, &x);
        let (g, x2) = parse_graph_file(&text).unwrap();
        assert_eq!(g, inst.graph);
        assert_eq!(x2, x);
    }

    #[test]
    fn graph_file_rejects_edge_type_zero_and_dangling_ids() {
        assert!(parse_graph_file("nodes=2 etypes=1 annot=0\nedge 1 0 2\n")
            .unwrap_err()
            .to_string()
            .contains("1-based"));
        assert!(parse_graph_file("nodes=2 etypes=1 annot=0\nedge 1 1 3\n").is_err());
        assert!(parse_graph_file("nodes=2 etypes=1 annot=1\nannot 1 1\n").is_err());
    }

    #[test]
    fn parallel_edges_and_self_loops_are_preserved() {
        let edges = vec![
            Edge { src: NodeId(1), etype: EdgeTypeId(1), dst: NodeId(2) },
            Edge { src: NodeId(1), etype: EdgeTypeId(1), dst: NodeId(2) },
            Edge { src: NodeId(2), etype: EdgeTypeId(1), dst: NodeId(2) },
        ];
        let g = TypedGraph::new(2, 1, edges).unwrap();
        let x = AnnotationMatrix::zeros(2, 1);
        let (back, _) = parse_graph_file(&serialize_graph(&g, &x)).unwrap();
        assert_eq!(back.edges().len(), 3);
        assert_eq!(back, g);
    }

    // Eulerian-circuit story whose token encoding is pinned: entity ids are
    // assigned in sorted (numeric) order, so they differ from the raw names.
    const EULERIAN_STORY: &str = "\
3 connected-to 7
7 connected-to 3
1 connected-to 2
2 connected-to 1
5 connected-to 7
7 connected-to 5
0 connected-to 4
4 connected-to 0
1 connected-to 0
0 connected-to 1
8 connected-to 6
6 connected-to 8
3 connected-to 6
6 connected-to 3
5 connected-to 8
8 connected-to 5
4 connected-to 2
2 connected-to 4
eval eulerian-circuit 5 7 5,7,3,6,8
";

    #[test]
    fn eulerian_story_tokenization_matches_pinned_string() {
        let mut vocab = StoryVocab::default();
        let inst = parse_symbolic(EULERIAN_STORY, &mut vocab).unwrap();
        let toks = tokenize_for_rnn(&inst, 0, &vocab).unwrap();
        let expect = "n4 e1 n8 eol n8 e1 n4 eol n2 e1 n3 eol n3 e1 n2 eol \
n6 e1 n8 eol n8 e1 n6 eol n1 e1 n5 eol n5 e1 n1 eol n2 e1 n1 eol n1 e1 n2 eol \
n9 e1 n7 eol n7 e1 n9 eol n4 e1 n7 eol n7 e1 n4 eol n6 e1 n9 eol n9 e1 n6 eol \
n5 e1 n3 eol n3 e1 n5 eol q1 n6 n8 ans 6 8 4 7 9";
        assert_eq!(toks.join(" "), expect);
    }

    #[test]
    fn token_count_is_4f_plus_2_plus_args_plus_answer() {
        for (story, q, args, answer) in [
            (FEAR_STORY, 0usize, 1usize, 1usize),
            (EULERIAN_STORY, 0, 2, 5),
            ("E s A\nB n C\nE w F\nB w E\neval path B A w,s\n", 0, 2, 2),
        ] {
            let mut vocab = StoryVocab::default();
            let inst = parse_symbolic(story, &mut vocab).unwrap();
            let toks = tokenize_for_rnn(&inst, q, &vocab).unwrap();
            let f = inst.graph.edges().len();
            assert_eq!(toks.len(), 4 * f + 2 + args + answer);
        }
    }

    #[test]
    fn class_label_answers_pass_through_tokenization() {
        let text = "E s A\nB n C\nE w F\nB w E\neval path B A w,s\n";
        let mut vocab = StoryVocab::default();
        let inst = parse_symbolic(text, &mut vocab).unwrap();
        let toks = tokenize_for_rnn(&inst, 0, &vocab).unwrap();
        assert_eq!(&toks[toks.len() - 2..], &["w".to_string(), "s".to_string()]);
    }

    #[test]
    fn dataset_parse_shares_edge_type_vocabulary() {
        let text = "A s B\neval path A B s\n\nC e D\neval path C D e\n";
        let ds = parse_dataset(text).unwrap();
        assert_eq!(ds.instances.len(), 2);
        assert_eq!(ds.vocab.relations.len(), 2);
        for inst in &ds.instances {
            assert_eq!(inst.graph.num_edge_types(), 2);
        }
        assert_eq!(ds.instances[1].graph.edges()[0].etype, EdgeTypeId(2));
    }

    #[test]
    fn relabel_moves_edges_and_names_consistently() {
        let mut vocab = StoryVocab::default();
        let inst = parse_symbolic("A r B\nB r C\neval q A C\n", &mut vocab).unwrap();
        let g = inst.graph.relabel(&[2, 0, 1]).unwrap();
        let a = g.node_by_name("A").unwrap();
        let b = g.node_by_name("B").unwrap();
        assert_eq!(a, NodeId(3));
        assert!(g.edges().iter().any(|e| e.src == a && e.dst == b));
        assert!(g.relabel(&[0, 0, 1]).is_err());
    }
}
