//! Heap-to-formula pipeline: describe a memory graph with a separation
//! logic formula.
//!
//! The restricted formula language is `exists x1..xn . a1 * .. * am` where
//! every atom is `ls(x, y)` (acyclic list segment), `tree(x)` (binary
//! tree), or `none(x)` (x holds no structure), and `*` is separating
//! conjunction: the atoms' memory regions are disjoint and together cover
//! the whole heap.
//!
//! - [`formula`]: the AST, parser, canonical renaming and logical
//!   equivalence.
//! - [`heap`]: heap graphs (one node per memory cell plus NULL, one edge
//!   type per pointer field) and an exact-cover satisfaction oracle.
//! - [`data`]: formula enumeration, satisfying-heap samplers and the
//!   step-by-step decision traces used as supervision.
//! - [`predict`]: the five-network predictor and its shared control flow.

pub mod data;
pub mod formula;
pub mod heap;
pub mod predict;

pub use data::{
    build_sep_dataset, component_data, enumerate_formulas, sample_heap_graphs, AnnotInstance,
    AnnotationTrace, ComponentData, SampleConfig, SepDataConfig, SepDataset, SepInstance,
    StepAction, TraceStep,
};
pub use formula::{parse_formula, Atom, PredKind, SepFormula, Term, NULL_NAME};
pub use heap::{
    satisfies, HeapGraph, ANNOT_BITS, BIT_ACTIVE, BIT_EXPLAINED, BIT_NAMED, FIELD_LEFT,
    FIELD_NEXT, FIELD_RIGHT, NUM_FIELDS,
};
pub use predict::{
    batch_predict, evaluate_batched, evaluate_formulas, predict_formula, replay_trace,
    AnnotationModel, SepConfig, SepEvalReport, SepModels, SepPrediction, SepTrainConfig,
};
