//! Result files. Everything here is written from one thread.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::report::RunSummary;
use crate::scenarios::Outcome;
use crate::Result;

pub const RESULTS_HEADER: &str = "name,value,stderr,tolerance,pass,method,config_hash";

pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("rds-out").join(format!("{}-{}", cfg.scenario.name(), cfg.hash())))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn results_csv(summary: &RunSummary) -> String {
    let mut out = String::new();
    out.push_str(RESULTS_HEADER);
    out.push('\n');
    for c in &summary.criteria {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&c.name),
            c.value,
            c.stderr,
            c.tolerance,
            c.pass,
            c.method,
            summary.config_hash
        );
    }
    out
}

pub fn summary_text(summary: &RunSummary) -> String {
    toml::to_string(summary).expect("summary serialises")
}

pub fn write_all(dir: &Path, cfg: &ExperimentConfig, outcome: &Outcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), results_csv(&outcome.summary))?;
    fs::write(dir.join("summary.txt"), summary_text(&outcome.summary))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    if !outcome.dumps.is_empty() {
        let d = dir.join("dump");
        fs::create_dir_all(&d)?;
        for (name, bytes) in &outcome.dumps {
            fs::write(d.join(name), bytes)?;
        }
    }
    Ok(())
}
