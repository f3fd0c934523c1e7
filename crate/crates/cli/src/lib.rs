//! Command-line front end for the relstable laboratory: configuration,
//! seeding, worker control and artifact emission.

pub mod checks;
pub mod commands;
pub mod config;
pub mod output;
pub mod selftest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::commands::Outcome;
use crate::config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] relstable::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "relstable",
    version,
    about = "Heat-trace laboratory for the relativistic alpha-stable process"
)]
pub struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, short, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0: one per core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// csv or json (one record per line).
    #[arg(long, global = true)]
    pub format: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// C1, the C1(t) table and a cached C4.
    Constants,
    /// Free transition density tables p(t, r).
    Density,
    /// Laplace-transform and acceptance-rate self-tests of the subordinator sampler.
    Subordinator,
    /// Empirical characteristic function of the increments.
    Charfn,
    /// Half-space profile f_H(t, q) and C2(t) over t_grid.
    Halfspace,
    /// Heat trace Z_D(t) over t_grid.
    Trace,
    /// Two-term residual report over t_grid.
    Residual,
    /// Principal eigenvalue from the decay of Z_D(t).
    Lambda1,
    /// The full acceptance suite; exits 1 on any failure.
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Constants => "constants",
            Command::Density => "density",
            Command::Subordinator => "subordinator",
            Command::Charfn => "charfn",
            Command::Halfspace => "halfspace",
            Command::Trace => "trace",
            Command::Residual => "residual",
            Command::Lambda1 => "lambda1",
            Command::Verify => "verify",
        }
    }
}

impl Cli {
    /// The effective configuration: file, then `--set`, then dedicated flags.
    pub fn config(&self) -> Result<ExperimentConfig, CliError> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(w) = self.workers {
            overrides.push(format!("workers={w}"));
        }
        if let Some(o) = &self.out {
            let quoted = toml::Value::String(o.display().to_string());
            overrides.push(format!("out={quoted}"));
        }
        if let Some(f) = &self.format {
            overrides.push(format!("format={}", f.parse::<config::Format>()?));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

/// Runs one subcommand on a pool of `cfg.workers` threads.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()?;
    pool.install(|| match command {
        Command::Constants => commands::constants(cfg),
        Command::Density => commands::density(cfg),
        Command::Subordinator => commands::subordinator(cfg),
        Command::Charfn => commands::charfn(cfg),
        Command::Halfspace => commands::halfspace(cfg),
        Command::Trace => commands::trace(cfg),
        Command::Residual => commands::residual(cfg),
        Command::Lambda1 => commands::lambda1(cfg),
        Command::Verify => commands::verify(cfg),
    })
}

/// Maps a finished run to the process exit status.
pub fn exit_status(result: &Result<Outcome, CliError>) -> i32 {
    match result {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::Failed(_)) => 1,
        Err(e) => e.exit_code(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Format;

    fn cfg(dir: &std::path::Path, extra: &[&str]) -> ExperimentConfig {
        let mut o: Vec<String> = vec![
            format!("out={}", toml::Value::String(dir.display().to_string())),
            "workers=2".into(),
            "n_paths=200".into(),
            "n_x=2000".into(),
            "n_draws=5000".into(),
            "base_steps=16".into(),
            "per_decade=3".into(),
        ];
        o.extend(extra.iter().map(|s| s.to_string()));
        ExperimentConfig::load(None, &o).unwrap()
    }

    fn body(path: &std::path::Path) -> Vec<csv::StringRecord> {
        let text = std::fs::read_to_string(path).unwrap();
        csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes())
            .records()
            .map(|r| r.unwrap())
            .collect()
    }

    #[test]
    fn every_subcommand_writes_its_tables() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &["t_grid=[0.05, 0.1]"]);
        for (cmd, tables) in [
            (Command::Constants, vec!["constants"]),
            (Command::Density, vec!["density"]),
            (
                Command::Subordinator,
                vec!["subordinator_laplace", "subordinator_acceptance"],
            ),
            (Command::Charfn, vec!["charfn"]),
            (
                Command::Halfspace,
                vec!["halfspace_profile", "halfspace_c2"],
            ),
            (Command::Trace, vec!["trace"]),
            (Command::Residual, vec!["residual", "residual_summary"]),
        ] {
            assert_eq!(run(cmd, &c).unwrap(), Outcome::Ok, "{cmd:?}");
            for t in tables {
                let rows = body(&c.out.join(format!("{t}.csv")));
                assert!(!rows.is_empty(), "{t}");
            }
        }
        let constants = body(&c.out.join("constants.csv"));
        assert_eq!(&constants[0][0], "C1");
        let c1: f64 = constants[0][2].parse().unwrap();
        assert!((c1 - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
    }

    #[test]
    fn halfspace_at_zero_mass_caches_c4_for_constants() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &["m=0", "t_grid=[1.0]", "format=json"]);
        run(Command::Halfspace, &c).unwrap();
        assert!(c.out.join("c4_cache.jsonl").exists());
        run(Command::Constants, &c).unwrap();
        let text = std::fs::read_to_string(c.out.join("constants.jsonl")).unwrap();
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        assert_eq!(last["quantity"], "C4");
        assert!(last["value"].as_f64().unwrap() > 0.0);
        // A cache for another alpha is ignored.
        let other = cfg(dir.path(), &["alpha=0.5", "format=json"]);
        run(Command::Constants, &other).unwrap();
        let text = std::fs::read_to_string(other.out.join("constants.jsonl")).unwrap();
        assert!(!text.contains("\"C4\""));
    }

    #[test]
    fn lambda1_runs_in_the_single_mode_regime() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &["m=0", "t_grid=[1.0, 1.5, 2.0]"]);
        run(Command::Lambda1, &c).unwrap();
        let rows = body(&c.out.join("lambda1.csv"));
        let l: f64 = rows[0][1].parse().unwrap();
        assert!(l > 0.0 && l.is_finite());
    }

    #[test]
    fn same_config_gives_identical_bytes_on_any_pool() {
        let dir = tempfile::tempdir().unwrap();
        let a = cfg(dir.path(), &["t_grid=[0.05]"]);
        run(Command::Trace, &a).unwrap();
        let first = std::fs::read(a.out.join("trace.csv")).unwrap();
        let b = cfg(dir.path(), &["t_grid=[0.05]", "workers=1"]);
        run(Command::Trace, &b).unwrap();
        let second = std::fs::read(b.out.join("trace.csv")).unwrap();
        // Only the recorded worker count differs.
        let strip = |v: &[u8]| String::from_utf8_lossy(v).replace("\"workers\":1", "\"workers\":2");
        assert_eq!(strip(&first), strip(&second));
    }

    #[test]
    fn errors_map_to_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &["domain=halfspace", "format=csv"]);
        // The heat trace needs a bounded domain: a runtime error, exit 1.
        let r = run(Command::Trace, &c);
        assert_eq!(exit_status(&r), 1);
        let usage = ExperimentConfig::load(None, &["alpha=3".into()]);
        assert_eq!(usage.unwrap_err().exit_code(), 2);
        assert_eq!(exit_status(&Ok(Outcome::Ok)), 0);
        assert_eq!(exit_status(&Ok(Outcome::Failed(vec![]))), 1);
        assert_eq!(c.format, Format::Csv);
    }
}
