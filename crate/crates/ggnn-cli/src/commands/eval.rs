//! `ggnn eval`: score a saved checkpoint on one split of a dataset
//! directory. The train split is always parsed first so relation ids match
//! the vocabulary the model was trained with.

use std::fs;

use ggnn::graph::{parse_dataset, parse_dataset_with};
use ggnn::model::load_model;
use ggnn::params::meta_get;
use ggnn::tasks::{graph_instances, TaskKind};
use ggnn::train::evaluate;

use super::base_settings;
use crate::report::Report;
use crate::{CliError, Ctx};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: Option<String>,
    /// Dataset directory (a `generate` replica).
    #[arg(long)]
    data: Option<String>,
    /// Split to score: train, valid or test.
    #[arg(long)]
    split: Option<String>,
}

pub fn run(ctx: &Ctx, args: &Args) -> Result<(), CliError> {
    let mut settings =
        base_settings(ctx, &[("split", "test")], &["checkpoint", "data"])?;
    settings.set("checkpoint", args.checkpoint.as_ref());
    settings.set("data", args.data.as_ref());
    settings.set("split", args.split.as_ref());

    let split = settings.require("split")?.to_string();
    if !["train", "valid", "test"].contains(&split.as_str()) {
        return Err(CliError::Usage(format!("unknown split `{split}`")));
    }
    let ckpt_path = ctx.path(settings.require("checkpoint")?);
    let data_dir = ctx.path(settings.require("data")?);

    let text = fs::read_to_string(&ckpt_path)
        .map_err(|e| CliError::Task(format!("cannot read {}: {e}", ckpt_path.display())))?;
    let loaded = load_model(&text)?;
    let kind = TaskKind::from_name(meta_get(&loaded.meta, "task")?)?;

    let read = |name: &str| -> Result<String, CliError> {
        fs::read_to_string(data_dir.join(name))
            .map_err(|e| CliError::Task(format!("cannot read {}/{name}: {e}", data_dir.display())))
    };
    let train = parse_dataset(&read("train.txt")?)?;
    let dataset = if split == "train" {
        train
    } else {
        parse_dataset_with(&read(&format!("{split}.txt"))?, train.vocab)?
    };
    let items = graph_instances(kind, &dataset.instances)?;
    let result = evaluate(&loaded.model, &loaded.store, &items)?;

    let mut report = Report::new("eval");
    report.config_echo(settings.echo());
    report.metric("task", kind.name());
    report.metric("n", result.n);
    report.metric("accuracy", format!("{:.4}", result.accuracy));
    report.metric("loss", format!("{:.6}", result.loss));
    report.finish(ctx.report_path().as_deref(), ctx.force)
}
