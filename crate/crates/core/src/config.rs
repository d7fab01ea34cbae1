//! Run configuration: one TOML file with a section per pipeline stage.
//! Every key is optional and defaults to the reference settings for
//! continuous tasks; unknown keys are rejected with their dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{ExptConfig, GradErrorConfig, GridSpec, Method, Oracle, PipelineConfig, SurrogateConfig};
use crate::error::CliError;
use crate::metatrain::{BaselineConfig, FinetuneConfig, MetaConfig};
use crate::search::SearchConfig;
use crate::sim4opt::Sim4OptConfig;

/// Environment variable that overrides `output.dir`.
pub const OUT_DIR_ENV: &str = "OPTBIAS_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Record measured runtimes in score and log files. Off by default so
    /// that repeated runs produce identical bytes.
    pub wall_clock: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub benchmarks: Vec<String>,
    pub methods: Vec<Method>,
    /// Size of the uniform sample each benchmark is drawn from.
    pub n_full: usize,
    /// Share of that sample, lowest values first, kept as offline data.
    pub frac: f64,
    pub sim4opt: Sim4OptConfig,
    pub meta: MetaConfig,
    pub finetune: FinetuneConfig,
    pub baseline: BaselineConfig,
    pub search: SearchConfig,
    pub surrogate: SurrogateConfig,
    pub expt: ExptConfig,
    pub grad_error: GradErrorConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = GridSpec::default();
        Self {
            seeds: grid.seeds,
            benchmarks: grid.benchmarks,
            methods: grid.methods,
            n_full: grid.n_full,
            frac: grid.frac,
            sim4opt: Sim4OptConfig::default(),
            meta: MetaConfig::default(),
            finetune: FinetuneConfig::default(),
            baseline: BaselineConfig::default(),
            search: SearchConfig::default(),
            surrogate: SurrogateConfig::default(),
            expt: ExptConfig::default(),
            grad_error: GradErrorConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            sim4opt: self.sim4opt.clone(),
            meta: self.meta.clone(),
            finetune: self.finetune.clone(),
            baseline: self.baseline.clone(),
            search: self.search.clone(),
            surrogate: self.surrogate.clone(),
            expt: self.expt.clone(),
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            benchmarks: self.benchmarks.clone(),
            methods: self.methods.clone(),
            seeds: self.seeds.clone(),
            n_full: self.n_full,
            frac: self.frac,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |path: &str, e: &dyn std::fmt::Display| CliError::config(path, e.to_string());
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "at least one seed is required"));
        }
        if self.benchmarks.is_empty() {
            return Err(CliError::config("benchmarks", "at least one benchmark is required"));
        }
        for b in &self.benchmarks {
            Oracle::by_name(b).map_err(|e| err("benchmarks", &e))?;
        }
        if self.methods.is_empty() {
            return Err(CliError::config("methods", "at least one method is required"));
        }
        if !(self.frac > 0.0 && self.frac <= 1.0) {
            return Err(CliError::config("frac", format!("{} is outside (0, 1]", self.frac)));
        }
        if (self.n_full as f64) * self.frac < 2.0 - 1e-9 {
            return Err(CliError::config("n_full", "n_full * frac must keep at least two points"));
        }
        self.sim4opt.validate().map_err(|e| err("sim4opt", &e))?;
        self.meta.validate().map_err(|e| err("meta", &e))?;
        self.finetune.validate().map_err(|e| err("finetune", &e))?;
        self.baseline.validate().map_err(|e| err("baseline", &e))?;
        self.search.validate().map_err(|e| err("search", &e))?;
        self.surrogate.architecture(1).validate().map_err(|e| err("surrogate", &e))?;
        let (l0, l1) = self.expt.lengthscale_range;
        let (v0, v1) = self.expt.variance_range;
        if !(l0 > 0.0 && l0 <= l1 && v0 > 0.0 && v0 <= v1) {
            return Err(CliError::config("expt", "parameter ranges must be positive and ordered"));
        }
        Oracle::by_name(&self.grad_error.benchmark).map_err(|e| err("grad_error.benchmark", &e))?;
        if self.grad_error.fractions.is_empty() {
            return Err(CliError::config("grad_error.fractions", "at least one fraction is required"));
        }
        if let Some(f) = self.grad_error.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(CliError::config("grad_error.fractions", format!("{f} is outside (0, 1]")));
        }
        Ok(())
    }
}

/// Parses and validates a config. Unknown keys anywhere in the tree are
/// reported by dotted path before any type checking.
pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    let user: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::config("-", e.message().to_string()))?;
    let reference = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    let mut unknown = Vec::new();
    unknown_keys(&user, &reference, "", &mut unknown);
    if let Some(first) = unknown.first() {
        return Err(CliError::config(first.clone(), "unknown key"));
    }
    for (key, value) in &user {
        // Type-check section by section so errors carry the section name.
        let mut one = toml::Table::new();
        one.insert(key.clone(), value.clone());
        if let Err(e) = toml::Value::Table(one).try_into::<RunConfig>() {
            return Err(CliError::config(key.clone(), e.message().trim().to_string()));
        }
    }
    let cfg: RunConfig = toml::Value::Table(user)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config("-", e.message().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config_str(&text)
}

fn unknown_keys(user: &toml::Table, reference: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, reference.get(k)) {
            (_, None) => out.push(leaf_path(v, path)),
            (toml::Value::Table(u), Some(toml::Value::Table(r))) => unknown_keys(u, r, &path, out),
            _ => {}
        }
    }
}

fn leaf_path(v: &toml::Value, path: String) -> String {
    match v {
        toml::Value::Table(t) => match t.iter().next() {
            Some((k, inner)) => leaf_path(inner, format!("{path}.{k}")),
            None => path,
        },
        _ => path,
    }
}
