//! Experiment configuration: one TOML file composing every module's settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use conceptvae::evaluation::EvalSettings;
use conceptvae::interpret::Selector;
use conceptvae::model::ModelConfig;
use conceptvae::phantom::{CohortSpec, FrameShape};
use conceptvae::training::TrainConfig;
use conceptvae::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Prefix of environment variables that override config keys, e.g.
/// `CONCEPTVAE_TRAIN_LEARNING_RATE=1e-3` or `CONCEPTVAE_MODEL_CONCEPTS_0_SIZE=8`.
pub const ENV_PREFIX: &str = "CONCEPTVAE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSettings {
    /// unlabeled pretraining sequences; 0 skips the pool phase
    pub n: usize,
}

impl Default for PoolSettings {
    fn default() -> Self {
        Self { n: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretSettings {
    pub selector: Selector,
    /// concept used for the concept-mean figures
    pub concept: String,
    pub steps: usize,
    pub span: f64,
    pub slice: usize,
    /// M-mode line `[x0, y0, x1, y1]`; derived from the first subject when absent
    pub line: Option<[usize; 4]>,
}

impl Default for InterpretSettings {
    fn default() -> Self {
        Self {
            selector: Selector::ByLabel,
            concept: "SF".into(),
            steps: 9,
            span: 1.5,
            slice: 1,
            line: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// master seed: cohort, pool, splits and training streams derive from it
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cohort: CohortSpec,
    pub pool: PoolSettings,
    pub eval: EvalSettings,
    pub interpret: InterpretSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("experiment"),
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
            cohort: CohortSpec::default(),
            pool: PoolSettings::default(),
            eval: EvalSettings::default(),
            interpret: InterpretSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Workstation-scale experiment: D=32, 200 subjects, 50/50/30 epochs,
    /// 40 pool sequences.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            pool: PoolSettings { n: 40 },
            cohort: CohortSpec {
                n_subjects: 200,
                ..CohortSpec::default()
            },
            ..Self::default()
        }
    }

    pub fn shape(&self) -> FrameShape {
        FrameShape {
            slices: self.model.slices,
            height: self.model.height,
            width: self.model.width,
        }
    }

    /// Training settings with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn concept_index(&self) -> Result<usize> {
        self.model
            .concepts
            .iter()
            .position(|c| c.name == self.interpret.concept)
            .ok_or_else(|| Error::config("interpret.concept", format!("no concept named '{}'", self.interpret.concept)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::config("seed", "must fit in a TOML integer (< 2^63)"));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(Error::config("train.seed", "set the top-level `seed` instead"));
        }
        if self.train.weights.alpha.len() != self.model.concepts.len() {
            return Err(Error::config("train.weights.alpha", "needs one weight per concept"));
        }
        self.cohort.validate().map_err(|e| Error::config("cohort", e.to_string()))?;
        self.eval.validate()?;
        if self.pool.n == 0 && self.train.pool_epochs > 0 {
            return Err(Error::config("pool.n", "pool_epochs > 0 needs a nonempty pool"));
        }
        let i = &self.interpret;
        if i.steps == 0 {
            return Err(Error::config("interpret.steps", "must be >= 1"));
        }
        if !(i.span.is_finite() && i.span > 0.0) {
            return Err(Error::config("interpret.span", "must be positive"));
        }
        if i.slice >= self.model.slices {
            return Err(Error::config("interpret.slice", format!("must be < {}", self.model.slices)));
        }
        if let Some([x0, y0, x1, y1]) = i.line {
            if x0.max(x1) >= self.model.width || y0.max(y1) >= self.model.height {
                return Err(Error::config("interpret.line", "endpoint outside the frame"));
            }
        }
        self.concept_index()?;
        Ok(())
    }

    /// sha256 of the canonical JSON, ignoring `out_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out_dir");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<config>", e.to_string()))
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<config>".into());
    Error::config(key, msg)
}

/// Parses and validates a config; missing keys take their defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(toml_error)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
    parse_config_str(&text)
}

/// Resolves `tokens` (an upper-case env suffix split on `_`) to a key path
/// in `value`. Keys may themselves contain underscores; array elements are
/// addressed by index.
fn resolve(value: &toml::Value, tokens: &[&str]) -> Option<Vec<String>> {
    if tokens.is_empty() {
        return Some(Vec::new());
    }
    match value {
        toml::Value::Table(t) => {
            for (key, child) in t {
                let parts: Vec<&str> = key.split('_').collect();
                if parts.len() <= tokens.len()
                    && parts.iter().zip(tokens).all(|(p, t)| p.eq_ignore_ascii_case(t))
                {
                    if let Some(mut rest) = resolve(child, &tokens[parts.len()..]) {
                        rest.insert(0, key.clone());
                        return Some(rest);
                    }
                }
            }
            None
        }
        toml::Value::Array(a) => {
            let i: usize = tokens[0].parse().ok()?;
            let mut rest = resolve(a.get(i)?, &tokens[1..])?;
            rest.insert(0, i.to_string());
            Some(rest)
        }
        _ => None,
    }
}

fn set_path(value: &mut toml::Value, path: &[String], new: toml::Value) {
    let Some((head, rest)) = path.split_first() else {
        *value = new;
        return;
    };
    let child = match value {
        toml::Value::Table(t) => t.get_mut(head),
        toml::Value::Array(a) => head.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
        _ => None,
    };
    if let Some(c) = child {
        set_path(c, rest, new);
    }
}

/// Parses an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `CONCEPTVAE_*` overrides from `vars`. Optional keys that are
/// unset in `cfg` cannot be addressed this way.
pub fn apply_overrides<I>(cfg: &ExperimentConfig, vars: I) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut value = toml::Value::try_from(cfg).map_err(|e| Error::config("<config>", e.to_string()))?;
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let suffix = &name[ENV_PREFIX.len()..];
        let tokens: Vec<&str> = suffix.split('_').collect();
        let path = resolve(&value, &tokens)
            .ok_or_else(|| Error::config(name.clone(), "does not name a config key"))?;
        set_path(&mut value, &path, parse_value(&raw));
    }
    let out: ExperimentConfig = value.try_into().map_err(toml_error)?;
    out.validate()?;
    Ok(out)
}

/// File (or defaults) plus environment overrides.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(&base, std::env::vars())
}
