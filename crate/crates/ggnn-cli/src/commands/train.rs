//! `ggnn train`: fit a task model (or token baseline) and report per-replica
//! plus aggregate accuracy in the paper's mean±std (n) shape.

use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ggnn::baselines::{
    token_instances, tokenize_questions, BaselineConfig, BaselineModel, BaselineVocab, CellKind,
};
use ggnn::graph::{parse_dataset, parse_dataset_with, StoryVocab, SymbolicInstance};
use ggnn::model::{checkpoint_string, GraphInstance, TaskModel};
use ggnn::tasks::{generate, graph_instances, replica_seeds, TaskGenConfig, TaskKind};
use ggnn::train::{evaluate, mean_std, train, TrainConfig, TrainOutcome};

use super::base_settings;
use crate::report::Report;
use crate::{CliError, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// Task name (see `generate`).
    #[arg(long)]
    task: Option<String>,
    /// Dataset directory from `generate`; omitted = generate in-process.
    #[arg(long)]
    data: Option<String>,
    /// Training questions (truncates the pool).
    #[arg(long)]
    ntrain: Option<usize>,
    /// Validation stories when generating in-process.
    #[arg(long)]
    valid: Option<usize>,
    /// Test stories when generating in-process.
    #[arg(long)]
    test: Option<usize>,
    /// Node state width D (default: task-specific).
    #[arg(long, alias = "D", alias = "state_dim")]
    state_dim: Option<usize>,
    /// Propagation steps T (default: task-specific).
    #[arg(long, alias = "T", alias = "prop_steps")]
    prop_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Independent replicas (fresh data and init per replica).
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    minibatch: Option<usize>,
    /// Draw class-balanced minibatches.
    #[arg(long)]
    balance: Option<bool>,
    /// Train a token baseline instead: rnn or lstm.
    #[arg(long)]
    baseline: Option<String>,
    /// Checkpoint output path (graph models only).
    #[arg(long)]
    checkpoint: Option<String>,
    /// Epoch log output path.
    #[arg(long)]
    log: Option<String>,
}

struct Splits {
    train: Vec<SymbolicInstance>,
    valid: Vec<SymbolicInstance>,
    test: Vec<SymbolicInstance>,
    vocab: StoryVocab,
}

pub fn run(ctx: &Ctx, args: &Args) -> Result<(), CliError> {
    let mut settings = base_settings(
        ctx,
        &[
            ("ntrain", "50"),
            ("valid", "10"),
            ("test", "100"),
            ("seed", "0"),
            ("replicas", "1"),
            ("epochs", "2000"),
            ("patience", "100"),
            ("minibatch", "20"),
            ("balance", "false"),
            ("baseline", "none"),
        ],
        &["task", "data", "state_dim", "prop_steps", "checkpoint", "log"],
    )?;
    settings.set("task", args.task.as_ref());
    settings.set("data", args.data.as_ref());
    settings.set("ntrain", args.ntrain);
    settings.set("valid", args.valid);
    settings.set("test", args.test);
    settings.set("state_dim", args.state_dim);
    settings.set("prop_steps", args.prop_steps);
    settings.set("seed", args.seed);
    settings.set("replicas", args.replicas);
    settings.set("epochs", args.epochs);
    settings.set("patience", args.patience);
    settings.set("minibatch", args.minibatch);
    settings.set("balance", args.balance);
    settings.set("baseline", args.baseline.as_ref());
    settings.set("checkpoint", args.checkpoint.as_ref());
    settings.set("log", args.log.as_ref());

    let kind = TaskKind::from_name(settings.require("task")?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let ntrain = settings.usize("ntrain")?;
    let replicas = settings.usize("replicas")?;
    if replicas == 0 {
        return Err(CliError::Usage("need at least one replica".into()));
    }
    let baseline = match settings.require("baseline")? {
        "none" => None,
        name => Some(CellKind::from_name(name).map_err(|e| CliError::Usage(e.to_string()))?),
    };

    let mut report = Report::new("train");
    report.config_echo(settings.echo());

    let seeds = replica_seeds(settings.u64("seed")?, replicas);
    let mut test_accs = Vec::with_capacity(replicas);
    for (r, &rs) in seeds.iter().enumerate() {
        let splits = load_or_generate(ctx, &settings, kind, rs)?;
        let (outcome, test_acc) = if let Some(cell) = baseline {
            train_baseline(&settings, &splits, cell, rs)?
        } else {
            train_graph_model(ctx, &settings, kind, &splits, ntrain, rs, r, replicas)?
        };
        if let Some(log) = settings.get("log") {
            let path = replica_path(ctx.path(log), r, replicas);
            let text: String =
                outcome.log.iter().map(|l| format!("{l}\n")).collect();
            write_file(&path, &text)?;
        }
        report.metric(&format!("replica.{r}.seed"), rs);
        report.metric(&format!("replica.{r}.best_epoch"), outcome.best_epoch);
        report.metric(&format!("replica.{r}.valid_acc"), format!("{:.4}", outcome.best_valid_acc));
        report.metric(&format!("replica.{r}.test_acc"), format!("{test_acc:.4}"));
        test_accs.push(test_acc);
    }

    let (mean, std) = mean_std(&test_accs);
    report.metric("test_acc.mean", format!("{mean:.4}"));
    report.metric("test_acc.std", format!("{std:.4}"));
    println!(
        "{} {}: {:.1}±{:.1} ({ntrain})",
        kind.name(),
        baseline.map_or("ggnn", |c| c.name()),
        100.0 * mean,
        100.0 * std
    );
    report.finish(ctx.report_path().as_deref(), ctx.force)
}

fn replica_path(base: PathBuf, r: usize, replicas: usize) -> PathBuf {
    if replicas == 1 {
        base
    } else {
        let mut s = base.into_os_string();
        s.push(format!(".r{r}"));
        PathBuf::from(s)
    }
}

fn write_file(path: &PathBuf, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Task(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    fs::write(path, text).map_err(|e| CliError::Task(format!("cannot write {}: {e}", path.display())))
}

/// Read the three split files against one shared vocabulary, or generate a
/// fresh dataset from this replica's seed.
fn load_or_generate(
    ctx: &Ctx,
    settings: &crate::settings::Settings,
    kind: TaskKind,
    seed: u64,
) -> Result<Splits, CliError> {
    if let Some(dir) = settings.get("data") {
        let dir = ctx.path(dir);
        let read = |name: &str| -> Result<String, CliError> {
            fs::read_to_string(dir.join(name))
                .map_err(|e| CliError::Task(format!("cannot read {}/{name}: {e}", dir.display())))
        };
        let train = parse_dataset(&read("train.txt")?)?;
        let valid = parse_dataset_with(&read("valid.txt")?, train.vocab)?;
        let test = parse_dataset_with(&read("test.txt")?, valid.vocab.clone())?;
        Ok(Splits {
            train: train.instances,
            valid: valid.instances,
            test: test.instances,
            vocab: test.vocab,
        })
    } else {
        let nvalid = settings.usize("valid")?;
        let config = TaskGenConfig {
            params: kind.default_params(),
            // One question per story at minimum, so ntrain stories cover an
            // ntrain-question budget.
            train: settings.usize("ntrain")? + nvalid,
            valid: nvalid,
            test: settings.usize("test")?,
            seed,
        };
        let data = generate(&config)?;
        Ok(Splits { train: data.train, valid: data.valid, test: data.test, vocab: data.vocab })
    }
}

fn train_graph_model(
    ctx: &Ctx,
    settings: &crate::settings::Settings,
    kind: TaskKind,
    splits: &Splits,
    ntrain: usize,
    seed: u64,
    replica: usize,
    replicas: usize,
) -> Result<(TrainOutcome, f64), CliError> {
    let mut spec = kind.default_model_spec();
    if let Some(_) = settings.get("state_dim") {
        spec.state_dim = settings.usize("state_dim")?;
    }
    if let Some(_) = settings.get("prop_steps") {
        spec.prop_steps = settings.usize("prop_steps")?;
    }

    let mut train_items: Vec<GraphInstance> = graph_instances(kind, &splits.train)?;
    if train_items.len() < ntrain {
        return Err(CliError::Task(format!(
            "train split holds {} questions, need {ntrain}",
            train_items.len()
        )));
    }
    train_items.truncate(ntrain);
    let valid_items = graph_instances(kind, &splits.valid)?;
    let test_items = graph_instances(kind, &splits.test)?;

    let mut store = ggnn::ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let model = TaskModel::build(&spec, &mut store, &mut rng)?;
    let config = TrainConfig {
        minibatch: settings.usize("minibatch")?,
        max_epochs: settings.usize("epochs")?,
        patience: settings.usize("patience")?,
        seed: seed.wrapping_add(2),
        balance_classes: settings.bool("balance")?,
        ..TrainConfig::default()
    };
    let outcome = train(&model, &mut store, &train_items, &valid_items, &config)?;
    let test = evaluate(&model, &store, &test_items)?;

    if let Some(raw) = settings.get("checkpoint") {
        let path = replica_path(ctx.path(raw), replica, replicas);
        let meta = vec![
            ("task".to_string(), kind.name().to_string()),
            ("ntrain".to_string(), ntrain.to_string()),
            ("seed".to_string(), seed.to_string()),
        ];
        write_file(&path, &checkpoint_string(&spec, &store, &meta))?;
    }
    Ok((outcome, test.accuracy))
}

fn train_baseline(
    settings: &crate::settings::Settings,
    splits: &Splits,
    cell: CellKind,
    seed: u64,
) -> Result<(TrainOutcome, f64), CliError> {
    let train_seqs = tokenize_questions(&splits.train, &splits.vocab)?;
    let valid_seqs = tokenize_questions(&splits.valid, &splits.vocab)?;
    let test_seqs = tokenize_questions(&splits.test, &splits.vocab)?;
    // Vocabulary over all splits: baselines should lose on structure, not
    // on out-of-vocabulary tokens.
    let mut all = train_seqs.clone();
    all.extend(valid_seqs.iter().cloned());
    all.extend(test_seqs.iter().cloned());
    let vocab = BaselineVocab::build(&all)?;

    let mut train_items = token_instances(&train_seqs, &vocab)?;
    train_items.truncate(settings.usize("ntrain")?);
    let valid_items = token_instances(&valid_seqs, &vocab)?;
    let test_items = token_instances(&test_seqs, &vocab)?;

    let mut store = ggnn::ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let model = BaselineModel::init(&mut store, "baseline", BaselineConfig::new(cell, &vocab), &mut rng)?;
    let config = TrainConfig {
        minibatch: settings.usize("minibatch")?,
        max_epochs: settings.usize("epochs")?,
        patience: settings.usize("patience")?,
        seed: seed.wrapping_add(2),
        balance_classes: settings.bool("balance")?,
        ..TrainConfig::default()
    };
    let outcome = train(&model, &mut store, &train_items, &valid_items, &config)?;
    let test = evaluate(&model, &store, &test_items)?;
    Ok((outcome, test.accuracy))
}
