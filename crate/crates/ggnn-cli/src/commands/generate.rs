//! `ggnn generate`: write replica dataset directories plus a manifest.

use std::fs;
use std::path::Path;

use ggnn::tasks::{generate, render_stories, replica_seeds, TaskGenConfig, TaskKind};

use super::base_settings;
use crate::report::Report;
use crate::{CliError, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// Task name: reachability, deduction, pathfinding, shortest-path, eulerian.
    #[arg(long)]
    task: Option<String>,
    /// Independent datasets to generate (seeds derived from --seed).
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training stories per replica.
    #[arg(long)]
    train: Option<usize>,
    /// Validation stories per replica.
    #[arg(long)]
    valid: Option<usize>,
    /// Test stories per replica.
    #[arg(long)]
    test: Option<usize>,
    /// Output directory (default data/<task>).
    #[arg(long)]
    out: Option<String>,
}

pub fn run(ctx: &Ctx, args: &Args) -> Result<(), CliError> {
    let mut settings = base_settings(
        ctx,
        &[("replicas", "1"), ("seed", "0"), ("train", "50"), ("valid", "10"), ("test", "100")],
        &["task", "out"],
    )?;
    settings.set("task", args.task.as_ref());
    settings.set("replicas", args.replicas);
    settings.set("seed", args.seed);
    settings.set("train", args.train);
    settings.set("valid", args.valid);
    settings.set("test", args.test);
    settings.set("out", args.out.as_ref());

    let kind = TaskKind::from_name(settings.require("task")?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let replicas = settings.usize("replicas")?;
    let seed = settings.u64("seed")?;
    let train = settings.usize("train")?;
    let valid = settings.usize("valid")?;
    let test = settings.usize("test")?;
    if replicas == 0 {
        return Err(CliError::Usage("need at least one replica".into()));
    }
    let out_raw = match settings.get("out") {
        Some(o) => o.to_string(),
        None => format!("data/{}", kind.name()),
    };
    settings.set("out", Some(&out_raw));
    let out = ctx.path(&out_raw);

    let mut report = Report::new("generate");
    report.config_echo(settings.echo());

    let seeds = replica_seeds(seed, replicas);
    let mut manifest = String::new();
    manifest.push_str(&format!(
        "task={}\nreplicas={replicas}\nseed={seed}\ntrain={train}\nvalid={valid}\ntest={test}\n",
        kind.name()
    ));
    for (i, &rs) in seeds.iter().enumerate() {
        // A single replica lands directly in the output directory so that
        // `train --data <out>` and `eval --data <out>` point at it as-is.
        let dir = if replicas == 1 { out.clone() } else { out.join(format!("replica-{i:02}")) };
        write_replica(ctx, kind, rs, train, valid, test, &dir)?;
        manifest.push_str(&format!("replica-{i:02}.seed={rs}\n"));
        report.metric(&format!("replica.{i}.seed"), rs);
    }
    fs::create_dir_all(&out).map_err(|e| CliError::Task(format!("cannot create {}: {e}", out.display())))?;
    fs::write(out.join("manifest.txt"), manifest)
        .map_err(|e| CliError::Task(format!("cannot write manifest: {e}")))?;
    report.metric("replicas_written", replicas);
    report.finish(ctx.report_path().as_deref(), ctx.force)
}

fn write_replica(
    ctx: &Ctx,
    kind: TaskKind,
    seed: u64,
    train: usize,
    valid: usize,
    test: usize,
    dir: &Path,
) -> Result<(), CliError> {
    if dir.join("train.txt").exists() && !ctx.force {
        return Err(CliError::Task(format!(
            "{} already holds a dataset; rerun with --force to regenerate",
            dir.display()
        )));
    }
    // `train` in the generator config counts stories bound for the training
    // file before the validation split is carved off the end.
    let config = TaskGenConfig {
        params: kind.default_params(),
        train: train + valid,
        valid,
        test,
        seed,
    };
    let data = generate(&config)?;
    fs::create_dir_all(dir).map_err(|e| CliError::Task(format!("cannot create {}: {e}", dir.display())))?;
    let write = |name: &str, text: String| -> Result<(), CliError> {
        fs::write(dir.join(name), text)
            .map_err(|e| CliError::Task(format!("cannot write {name}: {e}")))
    };
    write("train.txt", render_stories(&data.train, &data.vocab))?;
    write("valid.txt", render_stories(&data.valid, &data.vocab))?;
    write("test.txt", render_stories(&data.test, &data.vocab))?;
    Ok(())
}
