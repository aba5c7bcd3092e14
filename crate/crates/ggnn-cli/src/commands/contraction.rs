//! `ggnn contraction`: sample a cycle model with multipliers inside
//! (-rho, rho) and tabulate how fast d h_t(t) / d h_1(1) dies off against
//! the rho^(t-1) bound.

use ggnn::contraction::contraction_decay_demo;

use super::base_settings;
use crate::report::Report;
use crate::{CliError, Ctx};

#[derive(clap::Args)]
pub struct Args {
    /// Cycle length (the table runs to this horizon).
    #[arg(long)]
    nodes: Option<usize>,
    /// Contraction modulus in (0, 1).
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(ctx: &Ctx, args: &Args) -> Result<(), CliError> {
    let mut settings =
        base_settings(ctx, &[("nodes", "20"), ("rho", "0.9"), ("seed", "0")], &[])?;
    settings.set("nodes", args.nodes);
    settings.set("rho", args.rho);
    settings.set("seed", args.seed);

    let rows = contraction_decay_demo(
        settings.usize("nodes")?,
        settings.f64("rho")?,
        settings.u64("seed")?,
    )?;

    println!("{:>4} {:>14} {:>14} {:>12}", "t", "autodiff", "closed form", "bound");
    let mut max_err: f64 = 0.0;
    for row in &rows {
        println!(
            "{:>4} {:>14.6e} {:>14.6e} {:>12.6e}",
            row.t, row.autodiff, row.closed_form, row.bound
        );
        max_err = max_err.max((row.autodiff - row.closed_form).abs());
    }

    let mut report = Report::new("contraction");
    report.config_echo(settings.echo());
    report.metric("rows", rows.len());
    report.metric("max_product_err", format!("{max_err:.3e}"));
    // decay_table verifies |autodiff| < bound row by row before returning.
    report.metric("bound_satisfied", true);
    report.finish(ctx.report_path().as_deref(), ctx.force)
}
