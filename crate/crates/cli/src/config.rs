//! Experiment configuration: a flat `key = value` file (TOML syntax, no
//! tables) plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use relstable::geometry::Domain;
use relstable::tracelab::{Lab, Ladder};
use relstable::ProcessParams;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "jsonl",
        }
    }
}

impl FromStr for Format {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" | "jsonl" => Ok(Format::Json),
            _ => Err(CliError::Usage(format!(
                "unknown output format '{s}' (expected csv or json)"
            ))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

/// Everything an experiment depends on. Serialized into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub m: f64,
    pub d: usize,
    /// `ball:R0=1`, `annulus:rin=1,rout=3`, `halfspace` or `space`.
    pub domain: String,
    pub t_grid: Vec<f64>,
    /// Paths per starting point.
    pub n_paths: usize,
    /// Starting points for trace estimates.
    pub n_x: usize,
    /// Paths from each trace starting point.
    pub paths_per_x: usize,
    /// Step for the sampler self-tests (`subordinator`, `charfn`).
    pub dt: f64,
    /// Draws for the sampler self-tests.
    pub n_draws: usize,
    /// Exit-monitoring ladder: `base_steps · 2^ℓ` steps for `ℓ < levels`.
    pub base_steps: usize,
    pub levels: usize,
    pub order: f64,
    /// Depth-grid density for `C2(t)`.
    pub per_decade: usize,
    pub seed: u64,
    /// Worker threads; 0 lets the pool pick.
    pub workers: usize,
    pub out: PathBuf,
    pub format: Format,
    /// Standard errors for the "within joint CIs" bands.
    pub z: f64,
    /// Standard errors for the sampler-law bands.
    pub z_sampler: f64,
    /// Multiplies every `verify` budget.
    pub budget_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            m: 1.0,
            d: 2,
            domain: "ball:R0=1".into(),
            t_grid: vec![0.02, 0.04, 0.08, 0.16],
            n_paths: 10_000,
            n_x: 100_000,
            paths_per_x: 1,
            dt: 0.1,
            n_draws: 1_000_000,
            base_steps: 64,
            levels: 3,
            order: 1.0,
            per_decade: 8,
            seed: 20_240_917,
            workers: 0,
            out: PathBuf::from("out"),
            format: Format::Csv,
            z: 3.0,
            z_sampler: 4.0,
            budget_scale: 1.0,
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table, CliError> {
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Usage(format!("{origin}: {e}")))
}

/// `key=value` with the value read as TOML, falling back to a bare string,
/// so `domain=ball:R0=2` and `t_grid=[0.1,0.2]` both work.
fn parse_override(item: &str) -> Result<(String, toml::Value), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override '{item}' is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match parse_table(&format!("v = {raw}"), "override") {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = toml::Table::try_from(Self::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (k, v) in parse_table(&text, &path.display().to_string())? {
                if matches!(v, toml::Value::Table(_)) {
                    return Err(CliError::Usage(format!(
                        "config must be flat; '{k}' is a table"
                    )));
                }
                table.insert(k, v);
            }
        }
        for item in overrides {
            let (k, v) = parse_override(item)?;
            table.insert(k, v);
        }
        // Integers are accepted where floats are expected.
        for key in [
            "alpha",
            "m",
            "dt",
            "order",
            "z",
            "z_sampler",
            "budget_scale",
        ] {
            if let Some(toml::Value::Integer(i)) = table.get(key) {
                let f = *i as f64;
                table.insert(key.into(), toml::Value::Float(f));
            }
        }
        if let Some(toml::Value::Array(a)) = table.get_mut("t_grid") {
            for v in a.iter_mut() {
                if let toml::Value::Integer(i) = v {
                    *v = toml::Value::Float(*i as f64);
                }
            }
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| {
            CliError::Usage(format!("invalid config: {}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn params(&self) -> Result<ProcessParams, CliError> {
        ProcessParams::new(self.alpha, self.m, self.d).map_err(usage)
    }

    pub fn domain(&self) -> Result<Domain, CliError> {
        Domain::parse(&self.domain, self.d).map_err(usage)
    }

    pub fn ladder(&self) -> Result<Ladder, CliError> {
        Ladder::new(self.base_steps, self.levels, self.order).map_err(usage)
    }

    pub fn lab(&self) -> Result<Lab, CliError> {
        Ok(Lab::new(&self.params()?, self.ladder()?)?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.params()?;
        self.domain()?;
        self.ladder()?;
        if self.t_grid.is_empty() || self.t_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(CliError::Usage(format!(
                "t_grid must be non-empty and positive, got {:?}",
                self.t_grid
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CliError::Usage(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        for (name, v) in [
            ("z", self.z),
            ("z_sampler", self.z_sampler),
            ("budget_scale", self.budget_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Usage(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_paths == 0
            || self.n_x == 0
            || self.paths_per_x == 0
            || self.n_draws == 0
            || self.per_decade == 0
        {
            return Err(CliError::Usage("budgets must be positive".into()));
        }
        Ok(())
    }

    /// Flat `key = value` text that [`ExperimentConfig::load`] reads back.
    pub fn to_flat_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn usage(e: relstable::Error) -> CliError {
    CliError::Usage(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "alpha=0.5".into(),
                "domain=annulus:rin=1,rout=3".into(),
                "t_grid=[1, 0.5]".into(),
                "alpha=1.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.alpha, 1.5);
        assert_eq!(cfg.domain, "annulus:rin=1,rout=3");
        assert_eq!(cfg.t_grid, vec![1.0, 0.5]);
    }

    #[test]
    fn flat_text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.m = 0.25;
        cfg.format = Format::Json;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.conf");
        std::fs::write(&path, cfg.to_flat_text()).unwrap();
        assert_eq!(ExperimentConfig::load(Some(&path), &[]).unwrap(), cfg);
    }

    #[test]
    fn bad_configs_are_usage_errors() {
        for bad in [
            "alpha=2.5",
            "m=-1",
            "d=0",
            "domain=cube:1",
            "t_grid=[]",
            "nonsense=1",
            "levels=0",
            "format=xml",
        ] {
            let err = ExperimentConfig::load(None, &[bad.into()]).unwrap_err();
            assert!(matches!(err, CliError::Usage(_)), "{bad}: {err:?}");
        }
        assert!(matches!(
            ExperimentConfig::load(None, &["novalue".into()]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
        let cfg = ExperimentConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }
}
