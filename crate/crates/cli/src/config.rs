//! Run configuration: defaults, then an optional TOML or JSON file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dcssl::augment::SslConfig;
use dcssl::data::CsvSchema;
use dcssl::sim::SimConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Everything a subcommand needs, echoed into its outputs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub ssl: SslConfig,
    pub schema: CsvSchema,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Worker threads for `mc`; `None` uses one per core.
    pub threads: Option<usize>,
}

/// A single override at a dotted path, such as `sim.n`.
pub struct Patch {
    pub path: &'static str,
    pub value: Value,
}

impl Patch {
    pub fn new(path: &'static str, value: impl Serialize) -> Self {
        Self { path, value: serde_json::to_value(value).expect("flag values serialise") }
    }
}

/// Merges `file` into the defaults, then `flags`. When the file does not set
/// `ssl.r`, the working model follows `sim.r`.
pub fn resolve(file: Option<&Path>, flags: &[Patch]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    let mut ssl_r_from_file = false;
    if let Some(path) = file {
        let over = read_file(path)?;
        ssl_r_from_file = over.pointer("/ssl/r").is_some();
        merge(&mut value, over, "").with_context(|| format!("config file {}", path.display()))?;
    }
    if !ssl_r_from_file {
        let r = value["sim"]["r"].clone();
        value["ssl"]["r"] = r;
    }
    for p in flags {
        let ptr = format!("/{}", p.path.replace('.', "/"));
        *value.pointer_mut(&ptr).unwrap_or_else(|| panic!("no config field {}", p.path)) = p.value.clone();
    }
    let cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let v: Value = if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    if !v.is_object() {
        bail!("config file {} must hold a table", path.display());
    }
    Ok(v)
}

/// Recursive merge that rejects keys the defaults do not have. Tagged enums
/// (objects with a `kind` key) are replaced whole.
fn merge(base: &mut Value, over: Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => bail!("unknown config key `{path}`"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.sim.reps == 0 {
            bail!("reps must be at least 1");
        }
        if !(self.ssl.em.tol > 0.0) {
            bail!("tol must be positive, got {}", self.ssl.em.tol);
        }
        if self.ssl.em.max_iter == 0 {
            bail!("max_iter must be at least 1");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        Ok(())
    }

    /// The config as a JSON object with the tool version alongside.
    pub fn echo(&self) -> Value {
        let mut m = Map::new();
        m.insert("version".into(), Value::String(crate::VERSION.into()));
        m.insert("config".into(), serde_json::to_value(self).expect("config serialises"));
        Value::Object(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(ext: &str, text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let f = file(".toml", "[sim]\nn = 50\nreps = 7\n");
        let c = resolve(Some(f.path()), &[Patch::new("sim.n", 60)]).unwrap();
        assert_eq!(c.sim.n, 60);
        assert_eq!(c.sim.reps, 7);
        assert_eq!(c.sim.n_mult, SimConfig::default().n_mult);
    }

    #[test]
    fn json_files_and_tagged_designs() {
        let f = file(
            ".json",
            r#"{"sim": {"beta_true": [1, 2, 3], "gamma_true": [0, 0, 0],
                "design": {"kind": "mixed", "binary_probs": [0.4, 0.5]}}}"#,
        );
        let c = resolve(Some(f.path()), &[]).unwrap();
        assert_eq!(c.sim.p(), 3);
        assert!(matches!(c.sim.design, dcssl::sim::CovariateDesign::Mixed { .. }));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let f = file(".toml", "[sim]\nnn = 5\n");
        let e = resolve(Some(f.path()), &[]).unwrap_err();
        assert!(format!("{e:#}").contains("sim.nn"));
        let f = file(".toml", "[sim]\ncens_lo = 0.5\ncens_hi = 0.5\n");
        assert!(resolve(Some(f.path()), &[]).is_err());
        let f = file(".toml", "[sim]\nr = -1.0\n");
        assert!(resolve(Some(f.path()), &[]).is_err());
    }

    #[test]
    fn working_r_follows_sim_r_unless_set() {
        let f = file(".toml", "[sim]\nr = 1.0\n");
        assert_eq!(resolve(Some(f.path()), &[]).unwrap().ssl.r.r(), 1.0);
        let f = file(".toml", "[sim]\nr = 1.0\n[ssl]\nr = 0.5\n");
        assert_eq!(resolve(Some(f.path()), &[]).unwrap().ssl.r.r(), 0.5);
    }
}
