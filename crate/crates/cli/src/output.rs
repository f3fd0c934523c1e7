//! Artifact emission. Every file carries the schema version, the
//! subcommand, the seed and the full configuration.
//!
//! CSV files start with `#`-prefixed metadata lines followed by an
//! RFC 4180 table with a header row. JSON files hold one record per line:
//! a `meta` record, then one record per row tagged with its table name.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Format};
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Where and how a subcommand writes its tables.
#[derive(Debug, Clone)]
pub struct Emitter {
    pub subcommand: String,
    pub config: ExperimentConfig,
}

impl Emitter {
    pub fn new(subcommand: &str, config: &ExperimentConfig) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config: config.clone(),
        }
    }

    pub fn path(&self, table: &str) -> PathBuf {
        self.config
            .out
            .join(format!("{table}.{}", self.config.format.extension()))
    }

    fn meta(&self, table: &str) -> Value {
        json!({
            "record": "meta",
            "schema_version": SCHEMA_VERSION,
            "subcommand": self.subcommand,
            "table": table,
            "seed": self.config.seed,
            "config": self.config,
        })
    }

    /// Writes `rows` as the table `table`; returns the file path.
    pub fn emit<T: Serialize>(&self, table: &str, rows: &[T]) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.config.out)?;
        let path = self.path(table);
        let mut w = BufWriter::new(File::create(&path)?);
        match self.config.format {
            Format::Csv => {
                let meta = self.meta(table);
                writeln!(w, "# schema_version={SCHEMA_VERSION}")?;
                writeln!(w, "# subcommand={}", self.subcommand)?;
                writeln!(w, "# table={table}")?;
                writeln!(w, "# seed={}", self.config.seed)?;
                writeln!(w, "# config={}", meta["config"])?;
                let mut cw = csv::Writer::from_writer(&mut w);
                for row in rows {
                    cw.serialize(row)?;
                }
                cw.flush()?;
            }
            Format::Json => {
                writeln!(w, "{}", self.meta(table))?;
                for row in rows {
                    let mut v = serde_json::to_value(row)?;
                    if let Value::Object(map) = &mut v {
                        map.insert("record".into(), Value::String(table.to_string()));
                    }
                    writeln!(w, "{v}")?;
                }
            }
        }
        w.flush()?;
        Ok(path)
    }
}
