//! `ggnn gradcheck`: analytic tape gradients vs central finite differences
//! on a random small model. Exits 1 when any head strays past --tol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ggnn::graph::{AnnotationMatrix, Edge, EdgeTypeId, NodeId, TypedGraph};
use ggnn::model::{GraphInstance, ModelKind, ModelSpec, Target, TaskModel, TrainingMode};
use ggnn::seplogic::AnnotationModel;
use ggnn::sequence::SeqToken;
use ggnn::tape::{gradcheck, GradCheckReport, GRADCHECK_EPS};
use ggnn::train::TrainableModel;
use ggnn::ParamStore;

use super::base_settings;
use crate::report::Report;
use crate::{CliError, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// Node state width D.
    #[arg(long, alias = "D", alias = "state_dim")]
    state_dim: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Propagation steps T.
    #[arg(long, alias = "T", alias = "prop_steps")]
    prop_steps: Option<usize>,
    #[arg(long, alias = "edge_types")]
    edge_types: Option<usize>,
    /// Which output to check: node, class, sequence, annotation or all.
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum tolerated relative error.
    #[arg(long)]
    tol: Option<f64>,
}

pub fn run(ctx: &Ctx, args: &Args) -> Result<(), CliError> {
    let mut settings = base_settings(
        ctx,
        &[
            ("state_dim", "3"),
            ("nodes", "4"),
            ("prop_steps", "3"),
            ("edge_types", "2"),
            ("head", "all"),
            ("seed", "0"),
            ("tol", "1e-4"),
        ],
        &[],
    )?;
    settings.set("state_dim", args.state_dim);
    settings.set("nodes", args.nodes);
    settings.set("prop_steps", args.prop_steps);
    settings.set("edge_types", args.edge_types);
    settings.set("head", args.head.as_ref());
    settings.set("seed", args.seed);
    settings.set("tol", args.tol);

    let d = settings.usize("state_dim")?;
    let n = settings.usize("nodes")?;
    let t = settings.usize("prop_steps")?;
    let k = settings.usize("edge_types")?;
    let seed = settings.u64("seed")?;
    let tol = settings.f64("tol")?;
    let head = settings.require("head")?.to_string();
    let heads: Vec<&str> = match head.as_str() {
        "all" => vec!["node", "class", "sequence", "annotation"],
        "node" | "class" | "sequence" | "annotation" => vec![&head],
        other => return Err(CliError::Usage(format!("unknown head `{other}`"))),
    };

    let mut report = Report::new("gradcheck");
    report.config_echo(settings.echo());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for h in heads {
        let rep = check_head(h, d, n, t, k, &mut rng)?;
        report.metric(&format!("{h}.max_rel_err"), format!("{:.3e}", rep.max_rel_err));
        if rep.max_rel_err >= tol {
            // Name the offending entry so a failure is actionable.
            if let Some(w) = &rep.worst {
                report.metric(
                    &format!("{h}.worst"),
                    format!(
                        "{}[{},{}] analytic={:.6e} numeric={:.6e}",
                        w.param, w.row, w.col, w.analytic, w.numeric
                    ),
                );
            }
        }
        worst = worst.max(rep.max_rel_err);
    }
    let pass = worst < tol;
    report.metric("max_rel_err", format!("{worst:.3e}"));
    report.metric("pass", pass);
    report.finish(ctx.report_path().as_deref(), ctx.force)?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Task(format!("max relative error {worst:.3e} is not under {tol:.0e}")))
    }
}

/// A connected random graph plus 0/1 annotations of the given width.
fn random_case(
    n: usize,
    k: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(TypedGraph, AnnotationMatrix), CliError> {
    if n < 2 {
        return Err(CliError::Usage("need at least two nodes".into()));
    }
    let mut edges = Vec::new();
    for v in 2..=n {
        // Spanning chain first so every node participates.
        edges.push(Edge {
            src: NodeId(v - 1),
            etype: EdgeTypeId(rng.random_range(1..=k)),
            dst: NodeId(v),
        });
    }
    for from in 1..=n {
        for to in 1..=n {
            if from != to && rng.random_bool(0.2) {
                edges.push(Edge {
                    src: NodeId(from),
                    etype: EdgeTypeId(rng.random_range(1..=k)),
                    dst: NodeId(to),
                });
            }
        }
    }
    let graph = TypedGraph::new(n, k, edges)?;
    let mut annot = AnnotationMatrix::zeros(n, width);
    for v in 1..=n {
        for b in 0..width {
            if rng.random_bool(0.5) {
                annot.set(NodeId(v), b, 1.0);
            }
        }
    }
    for b in 0..width {
        // A column constant across nodes shifts every node's score equally,
        // so the weight reading it gets an exactly zero gradient, which
        // central differences cannot resolve. Flip one bit to break ties.
        let ones = (1..=n).filter(|&v| annot.get(NodeId(v), b) == 1.0).count();
        if ones == 0 || ones == n {
            let v = NodeId(rng.random_range(1..=n));
            let cur = annot.get(v, b);
            annot.set(v, b, 1.0 - cur);
        }
    }
    Ok((graph, annot))
}

fn check_head(
    head: &str,
    d: usize,
    n: usize,
    t: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport, CliError> {
    let width = 2.min(d);
    if head == "annotation" {
        // The annotation updater carries its own fixed three-bit width.
        let (graph, annot) = random_case(n, k, 3, rng)?;
        let (_, target) = random_case(n, k, 3, rng)?;
        let mut store = ParamStore::new();
        let model = AnnotationModel::build(&mut store, k, d.max(3), t, rng)?;
        let item = ggnn::seplogic::AnnotInstance { graph, annotations: annot, target };
        let report = gradcheck(&mut store, |s, tape| model.loss(tape, s, &item), GRADCHECK_EPS)?;
        return Ok(report);
    }

    let (graph, annot) = random_case(n, k, width, rng)?;
    let (kind, target) = match head {
        "node" => (ModelKind::SelectNode, Target::Node(NodeId(rng.random_range(1..=n)))),
        "class" => {
            (ModelKind::ClassifyGraph { num_classes: 3 }, Target::Class(rng.random_range(0..3)))
        }
        "sequence" => {
            let len = rng.random_range(1..=2usize);
            let mut tokens: Vec<SeqToken> =
                (0..len).map(|_| SeqToken::Node(NodeId(rng.random_range(1..=n)))).collect();
            tokens.push(SeqToken::End);
            (ModelKind::NodeSequence { mode: TrainingMode::Latent }, Target::Sequence(tokens))
        }
        other => return Err(CliError::Usage(format!("unknown head `{other}`"))),
    };
    let mut spec = ModelSpec::new(kind, k, d, width);
    spec.prop_steps = t;
    let mut store = ParamStore::new();
    let model = TaskModel::build(&spec, &mut store, rng)?;
    let item = GraphInstance { graph, annotations: annot, target, observed: None };
    let report = gradcheck(&mut store, |s, tape| model.loss(tape, s, &item), GRADCHECK_EPS)?;
    Ok(report)
}
