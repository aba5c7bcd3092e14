//! `ggnn seplogic`: the heap-to-formula pipeline. Datasets are regenerated
//! from their seed rather than stored, so a bundle checkpoint carries the
//! dataset settings in its metadata and `eval` needs nothing else.

use std::fs;

use clap::Subcommand;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ggnn::params::{meta_get, read_checkpoint};
use ggnn::seplogic::{
    build_sep_dataset, component_data, enumerate_formulas, evaluate_batched, evaluate_formulas,
    satisfies, PredKind, SepDataConfig, SepDataset, SepModels, SepTrainConfig,
};

use super::base_settings;
use crate::report::Report;
use crate::settings::Settings;
use crate::{CliError, Ctx};

#[derive(Subcommand)]
pub enum Command {
    /// Print the enumerated formula space
    Enumerate(EnumerateArgs),
    /// Generate the dataset and train the five decision networks
    Train(TrainArgs),
    /// Re-evaluate a bundle checkpoint on its regenerated dataset
    Eval(EvalArgs),
}

pub fn run(ctx: &Ctx, cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Enumerate(args) => run_enumerate(ctx, args),
        Command::Train(args) => run_train(ctx, args),
        Command::Eval(args) => run_eval(ctx, args),
    }
}

fn parse_predicates(raw: &str) -> Result<Vec<PredKind>, CliError> {
    raw.split(',')
        .map(|p| match p.trim() {
            "ls" => Ok(PredKind::Ls),
            "tree" => Ok(PredKind::Tree),
            "none" => Ok(PredKind::None),
            other => Err(CliError::Usage(format!("unknown predicate `{other}`"))),
        })
        .collect()
}

const DATA_KEYS: [(&str, &str); 9] = [
    ("vars", "2"),
    ("predicates", "ls,tree,none"),
    ("max_existentials", "1"),
    ("max_formulas", "60"),
    ("train_graphs", "20"),
    ("eval_graphs", "10"),
    ("min_nodes", "3"),
    ("max_nodes", "12"),
    ("data_seed", "0"),
];

fn data_config(settings: &Settings) -> Result<SepDataConfig, CliError> {
    Ok(SepDataConfig {
        num_vars: settings.usize("vars")?,
        predicates: parse_predicates(settings.require("predicates")?)?,
        max_existentials: settings.usize("max_existentials")?,
        max_formulas: settings.usize("max_formulas")?,
        train_graphs_per_formula: settings.usize("train_graphs")?,
        eval_graphs_per_formula: settings.usize("eval_graphs")?,
        min_nodes: settings.usize("min_nodes")?,
        max_nodes: settings.usize("max_nodes")?,
        seed: settings.u64("data_seed")?,
    })
}

// ---------------------------------------------------------------------------

#[derive(clap::Args)]
pub struct EnumerateArgs {
    #[arg(long)]
    vars: Option<usize>,
    /// Comma-separated subset of ls, tree, none.
    #[arg(long)]
    predicates: Option<String>,
    #[arg(long, alias = "max_existentials")]
    max_existentials: Option<usize>,
}

fn run_enumerate(ctx: &Ctx, args: &EnumerateArgs) -> Result<(), CliError> {
    let mut settings = base_settings(
        ctx,
        &[("vars", "2"), ("predicates", "ls,tree,none"), ("max_existentials", "1")],
        &[],
    )?;
    settings.set("vars", args.vars);
    settings.set("predicates", args.predicates.as_ref());
    settings.set("max_existentials", args.max_existentials);

    let formulas = enumerate_formulas(
        settings.usize("vars")?,
        &parse_predicates(settings.require("predicates")?)?,
        settings.usize("max_existentials")?,
    )?;
    for f in &formulas {
        println!("{f}");
    }
    let mut report = Report::new("seplogic-enumerate");
    report.config_echo(settings.echo());
    report.metric("count", formulas.len());
    report.finish(ctx.report_path().as_deref(), ctx.force)
}

// ---------------------------------------------------------------------------

#[derive(clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    vars: Option<usize>,
    #[arg(long)]
    predicates: Option<String>,
    #[arg(long, alias = "max_existentials")]
    max_existentials: Option<usize>,
    #[arg(long, alias = "max_formulas")]
    max_formulas: Option<usize>,
    /// Training heaps sampled per formula.
    #[arg(long, alias = "train_graphs")]
    train_graphs: Option<usize>,
    /// Validation/test heaps sampled per formula.
    #[arg(long, alias = "eval_graphs")]
    eval_graphs: Option<usize>,
    #[arg(long, alias = "min_nodes")]
    min_nodes: Option<usize>,
    #[arg(long, alias = "max_nodes")]
    max_nodes: Option<usize>,
    /// Seed for formula selection and heap sampling.
    #[arg(long, alias = "data_seed")]
    data_seed: Option<u64>,
    /// Seed for initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// State width of the declare / pick-existential networks.
    #[arg(long, alias = "select_dim")]
    select_dim: Option<usize>,
    /// State width of the predicate / list-end / annotation networks.
    #[arg(long, alias = "shape_dim")]
    shape_dim: Option<usize>,
    #[arg(long, alias = "prop_steps")]
    prop_steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    minibatch: Option<usize>,
    /// Print every epoch line while training.
    #[arg(long)]
    echo: Option<bool>,
    #[arg(long)]
    checkpoint: Option<String>,
}

fn train_keys() -> Vec<(&'static str, &'static str)> {
    let mut keys = DATA_KEYS.to_vec();
    keys.extend([
        ("seed", "0"),
        ("select_dim", "16"),
        ("shape_dim", "8"),
        ("prop_steps", "10"),
        ("epochs", "300"),
        ("patience", "50"),
        ("minibatch", "20"),
        ("echo", "false"),
        ("checkpoint", "checkpoints/seplogic.ckpt"),
    ]);
    keys
}

fn run_train(ctx: &Ctx, args: &TrainArgs) -> Result<(), CliError> {
    let mut settings = base_settings(ctx, &train_keys(), &[])?;
    settings.set("vars", args.vars);
    settings.set("predicates", args.predicates.as_ref());
    settings.set("max_existentials", args.max_existentials);
    settings.set("max_formulas", args.max_formulas);
    settings.set("train_graphs", args.train_graphs);
    settings.set("eval_graphs", args.eval_graphs);
    settings.set("min_nodes", args.min_nodes);
    settings.set("max_nodes", args.max_nodes);
    settings.set("data_seed", args.data_seed);
    settings.set("seed", args.seed);
    settings.set("select_dim", args.select_dim);
    settings.set("shape_dim", args.shape_dim);
    settings.set("prop_steps", args.prop_steps);
    settings.set("epochs", args.epochs);
    settings.set("patience", args.patience);
    settings.set("minibatch", args.minibatch);
    settings.set("echo", args.echo);
    settings.set("checkpoint", args.checkpoint.as_ref());

    let dconfig = data_config(&settings)?;
    let data = build_sep_dataset(&dconfig)?;

    let mut report = Report::new("seplogic-train");
    report.config_echo(settings.echo());
    report.metric("formulas", data.formulas.len());
    report.metric("train_instances", data.train.len());
    report.metric("valid_instances", data.valid.len());
    report.metric("test_instances", data.test.len());
    // The generator re-checks each sample against the oracle already; this
    // published figure re-runs the check on the finished dataset.
    report.metric("train_satisfies", format!("{:.4}", satisfied_fraction(&data)));

    let sep_config = ggnn::seplogic::SepConfig {
        select_dim: settings.usize("select_dim")?,
        shape_dim: settings.usize("shape_dim")?,
        prop_steps: settings.usize("prop_steps")?,
        ..ggnn::seplogic::SepConfig::default()
    };
    let seed = settings.u64("seed")?;
    let mut models = SepModels::build(&sep_config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let train_data = component_data(&data.train);
    let valid_data = component_data(&data.valid);
    let outcomes = models.train(
        &train_data,
        &valid_data,
        &SepTrainConfig {
            minibatch: settings.usize("minibatch")?,
            max_epochs: settings.usize("epochs")?,
            patience: settings.usize("patience")?,
            seed,
            echo: settings.bool("echo")?,
            ..SepTrainConfig::default()
        },
    )?;
    for (name, outcome) in &outcomes {
        report.metric(&format!("component.{name}.best_epoch"), outcome.best_epoch);
        report.metric(
            &format!("component.{name}.valid_acc"),
            format!("{:.4}", outcome.best_valid_acc),
        );
    }

    let batched = evaluate_batched(&models, &data.test, &data.formulas)?;
    let single = evaluate_formulas(&models, &data.test, &data.formulas)?;
    report.metric("test.formula_acc", format!("{:.4}", batched.accuracy));
    report.metric("test.formula_acc_single", format!("{:.4}", single.accuracy));
    report.metric("test.valid_fraction", format!("{:.4}", single.valid_fraction.min(batched.valid_fraction)));
    report.metric("test.truncated", batched.truncated + single.truncated);
    println!(
        "held-out formulas: {:.1}% of {} correct (batched), {:.1}% of {} graphs (single)",
        100.0 * batched.accuracy,
        batched.n,
        100.0 * single.accuracy,
        single.n
    );

    let meta: Vec<(String, String)> = settings
        .echo()
        .filter(|(k, _)| DATA_KEYS.iter().any(|(dk, _)| dk == k))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let path = ctx.path(settings.require("checkpoint")?);
    let text = models.checkpoint_string_with(&meta);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Task(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    fs::write(&path, text)
        .map_err(|e| CliError::Task(format!("cannot write {}: {e}", path.display())))?;
    report.finish(ctx.report_path().as_deref(), ctx.force)
}

fn satisfied_fraction(data: &SepDataset) -> f64 {
    let good = data
        .train
        .iter()
        .filter(|inst| satisfies(&inst.heap, &data.formulas[inst.formula]))
        .count();
    good as f64 / data.train.len().max(1) as f64
}

// ---------------------------------------------------------------------------

#[derive(clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<String>,
}

fn run_eval(ctx: &Ctx, args: &EvalArgs) -> Result<(), CliError> {
    let mut settings = base_settings(ctx, &[], &["checkpoint"])?;
    settings.set("checkpoint", args.checkpoint.as_ref());

    let path = ctx.path(settings.require("checkpoint")?);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Task(format!("cannot read {}: {e}", path.display())))?;
    let models = SepModels::from_checkpoint(&text)?;
    let (_, meta) = read_checkpoint(&text)?;

    // Rebuild the exact dataset from the settings stored at training time.
    let mut data_settings = Settings::new(&DATA_KEYS, &[]);
    let mut found = 0;
    for (key, _) in DATA_KEYS {
        if let Ok(v) = meta_get(&meta, key) {
            data_settings.set(key, Some(v));
            found += 1;
        }
    }
    if found != DATA_KEYS.len() {
        return Err(CliError::Task(
            "checkpoint carries no dataset settings; was it written by `seplogic train`?".into(),
        ));
    }
    let data = build_sep_dataset(&data_config(&data_settings)?)?;

    let batched = evaluate_batched(&models, &data.test, &data.formulas)?;
    let single = evaluate_formulas(&models, &data.test, &data.formulas)?;

    let mut report = Report::new("seplogic-eval");
    report.config_echo(data_settings.echo());
    report.metric("test.formulas", batched.n);
    report.metric("test.graphs", single.n);
    report.metric("test.formula_acc", format!("{:.4}", batched.accuracy));
    report.metric("test.formula_acc_single", format!("{:.4}", single.accuracy));
    report.metric(
        "test.valid_fraction",
        format!("{:.4}", single.valid_fraction.min(batched.valid_fraction)),
    );
    report.metric("test.truncated", batched.truncated + single.truncated);
    report.finish(ctx.report_path().as_deref(), ctx.force)
}
