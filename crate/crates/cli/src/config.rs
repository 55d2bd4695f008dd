//! Effective run configuration: built-in defaults, overlaid by an optional
//! TOML file, overlaid by command-line settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tilt_core::experiments::{bench_ladmap_options, experiment_outer_options, BoardSpec};
use tilt_core::inner::{SolverKind, SolverOptions};
use tilt_core::outer::{Method, OuterOptions};
use toml::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
    /// Success threshold on the relative transform error.
    pub rel_err_tol: f64,
    /// Shared by `range`, `corruption`, `speed` and `rectify`; the solver
    /// choice on top of it is made per command.
    pub outer: OuterOptions,
    pub rectify: RectifySection,
    pub bench: BenchSection,
    pub range: RangeSection,
    pub corruption: CorruptionSection,
    pub speed: SpeedSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            out: PathBuf::from("results"),
            rel_err_tol: 0.05,
            outer: experiment_outer_options(),
            rectify: RectifySection::default(),
            bench: BenchSection::default(),
            range: RangeSection::default(),
            corruption: CorruptionSection::default(),
            speed: SpeedSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RectifySection {
    pub input: Option<PathBuf>,
    /// `[x0, y0, width, height]`; taken from the sidecar when absent.
    pub window: Option<[f64; 4]>,
    /// JSON sidecar next to the input; its deformation, if any, is applied
    /// before rectifying and serves as ground truth.
    pub sidecar: Option<PathBuf>,
    pub solver: Method,
}

impl Default for RectifySection {
    fn default() -> Self {
        Self { input: None, window: None, sidecar: None, solver: Method::LadmapVwsSvdws }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub num_params: usize,
    pub lambda_scale: f64,
    pub adm: SolverOptions,
    /// Shared by `ladmap` and `ladmap-svdws`.
    pub ladmap: SolverOptions,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            sizes: vec![10, 50, 100],
            trials: 10,
            num_params: 8,
            lambda_scale: 1.0,
            adm: SolverOptions::with_kind(SolverKind::Adm),
            ladmap: bench_ladmap_options(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    Full,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeSection {
    pub grid: Grid,
    pub methods: Vec<Method>,
    pub board: BoardSpec,
}

impl Default for RangeSection {
    fn default() -> Self {
        Self { grid: Grid::Full, methods: vec![Method::Adm, Method::Ladmap], board: BoardSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSection {
    pub corpus: PathBuf,
    pub levels: Vec<f64>,
    pub methods: Vec<Method>,
    pub rotation_deg: f64,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("data/corpus"),
            levels: (0..=10).map(|i| i as f64 / 10.0).collect(),
            methods: vec![Method::Adm, Method::Ladmap],
            rotation_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedSection {
    pub corpus: PathBuf,
    pub methods: Vec<Method>,
    pub repeats: usize,
    /// Restrict to these sidecar names; empty means the whole corpus.
    pub cases: Vec<String>,
}

impl Default for SpeedSection {
    fn default() -> Self {
        Self { corpus: PathBuf::from("data/corpus"), methods: Method::ALL.to_vec(), repeats: 1, cases: Vec::new() }
    }
}

/// Recursively overlays `over` onto `base`; tables merge key by key, any
/// other value replaces.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Turns `a.b.c=value` into the nested table `{a: {b: {c: value}}}`.
pub fn dotted(assign: &str) -> Result<Value, CliError> {
    let (key, raw) = assign
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected key=value, got `{assign}`")))?;
    let mut value = parse_value(raw.trim());
    for part in key.trim().rsplit('.') {
        if part.is_empty() {
            return Err(CliError::Usage(format!("empty key segment in `{assign}`")));
        }
        let mut t = toml::Table::new();
        t.insert(part.to_string(), value);
        value = Value::Table(t);
    }
    Ok(value)
}

/// Builds and validates the effective configuration. `env_seed` sits
/// between the built-in default and the file.
pub fn resolve(file: Option<&Path>, env_seed: Option<u64>, overrides: &[Value]) -> Result<RunConfig, CliError> {
    let mut value = Value::try_from(RunConfig::default()).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(seed) = env_seed {
        merge(&mut value, dotted(&format!("seed={seed}"))?);
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        merge(&mut value, Value::Table(table));
    }
    for o in overrides {
        merge(&mut value, o.clone());
    }
    let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Usage(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.outer.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.bench.adm.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.bench.ladmap.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if !(self.rel_err_tol > 0.0 && self.rel_err_tol.is_finite()) {
            return usage(format!("rel_err_tol must be positive, got {}", self.rel_err_tol));
        }
        if self.jobs == 0 {
            return usage("jobs must be at least 1".into());
        }
        if self.bench.trials == 0 || self.bench.sizes.is_empty() || self.bench.sizes.iter().any(|&s| s < 2) {
            return usage("bench needs trials >= 1 and sizes >= 2".into());
        }
        if self.bench.num_params == 0 || self.bench.sizes.iter().any(|&s| s * s <= self.bench.num_params) {
            return usage("bench num_params must be at least 1 and below size^2".into());
        }
        if self.corruption.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return usage("corruption levels must lie in [0, 1]".into());
        }
        if self.speed.repeats == 0 {
            return usage("speed repeats must be at least 1".into());
        }
        if let Some([_, _, w, h]) = self.rectify.window {
            if w < 2.0 || h < 2.0 || w.fract() != 0.0 || h.fract() != 0.0 {
                return usage(format!("window width and height must be integers >= 2, got {w}x{h}"));
            }
        }
        for methods in [&self.range.methods, &self.corruption.methods, &self.speed.methods] {
            if methods.is_empty() {
                return usage("method lists must not be empty".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = resolve(None, None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn later_layers_win() {
        let dir = std::env::temp_dir().join(format!("tilt-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.toml");
        std::fs::write(&path, "seed = 5\njobs = 3\n[outer.inner]\nrho0 = 1.7\n").unwrap();
        let cfg = resolve(Some(&path), Some(3), &[dotted("seed=9").unwrap()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(resolve(Some(&path), Some(3), &[]).unwrap().seed, 5);
        std::fs::write(&path, "jobs = 3\n").unwrap();
        assert_eq!(resolve(Some(&path), Some(3), &[]).unwrap().seed, 3);
        std::fs::write(&path, "seed = 5\njobs = 3\n[outer.inner]\nrho0 = 1.7\n").unwrap();
        let cfg = resolve(Some(&path), None, &[dotted("seed=9").unwrap()]).unwrap();
        assert_eq!(cfg.jobs, 3);
        assert_eq!(cfg.outer.inner.rho0, 1.7);
        assert_eq!(cfg.outer.inner.eps1, experiment_outer_options().inner.eps1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve(None, None, &[dotted("outer.inner.rho=2").unwrap()]).is_err());
        assert!(resolve(None, None, &[dotted("sed=1").unwrap()]).is_err());
    }

    #[test]
    fn values_parse_as_toml_or_string() {
        let cfg = resolve(None, None, &[dotted("range.grid=reduced").unwrap(), dotted("bench.sizes=[4, 6]").unwrap()]).unwrap();
        assert_eq!(cfg.range.grid, Grid::Reduced);
        assert_eq!(cfg.bench.sizes, vec![4, 6]);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(resolve(None, None, &[dotted("rel_err_tol=0").unwrap()]).is_err());
        assert!(resolve(None, None, &[dotted("outer.inner.eps1=-1").unwrap()]).is_err());
        assert!(dotted("novalue").is_err());
    }
}
