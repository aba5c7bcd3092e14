//! Run reports: `metric=value` lines printed to stdout and, when a report
//! path is given, appended to the file. Reports never overwrite earlier
//! runs unless forced.

use std::fmt::Display;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::CliError;

pub struct Report {
    lines: Vec<String>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Report { lines: vec![format!("run={command}")] }
    }

    pub fn metric(&mut self, key: &str, value: impl Display) {
        self.lines.push(format!("{key}={value}"));
    }

    pub fn config_echo<'a>(&mut self, pairs: impl Iterator<Item = (&'a str, &'a str)>) {
        for (k, v) in pairs {
            self.lines.push(format!("config.{k}={v}"));
        }
    }

    /// Print all lines and append them to `path` if given. `force`
    /// truncates an existing file first.
    pub fn finish(self, path: Option<&Path>, force: bool) -> Result<(), CliError> {
        for line in &self.lines {
            println!("{line}");
        }
        let Some(path) = path else { return Ok(()) };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| {
                    CliError::Task(format!("cannot create {}: {e}", parent.display()))
                })?;
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(!force)
            .write(true)
            .truncate(force)
            .open(path)
            .map_err(|e| CliError::Task(format!("cannot open report {}: {e}", path.display())))?;
        for line in &self.lines {
            writeln!(file, "{line}")
                .map_err(|e| CliError::Task(format!("cannot write report: {e}")))?;
        }
        Ok(())
    }
}
