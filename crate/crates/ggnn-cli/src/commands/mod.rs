pub mod contraction;
pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod seplogic;
pub mod train;

use crate::{CliError, Ctx};
use crate::settings::Settings;

/// Start settings for a command: defaults, then the shared `--config` file.
pub fn base_settings(
    ctx: &Ctx,
    defaults: &[(&'static str, &str)],
    optional: &[&'static str],
) -> Result<Settings, CliError> {
    let mut settings = Settings::new(defaults, optional);
    if let Some(path) = &ctx.config {
        let path = if path.is_absolute() { path.clone() } else { ctx.workdir.join(path) };
        settings.load_file(&path)?;
    }
    Ok(settings)
}
