//! Run configuration: TOML files, dotted overrides and the config hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::datagen::{GrammarConfig, GrammarKind, RulesetConfig, TspConfig, TspStart};
use crate::decoder::{DecoderConfig, LossConfig};
use crate::encoder::{EncoderConfig, Sigma};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::AdamwConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_sit_layers: usize,
    pub sigma: Sigma,
    pub use_residual: bool,
    pub use_layer_norm: bool,
    pub augment_set: bool,
    pub d_att: usize,
    pub pair_hidden: usize,
    pub zero_init_pointer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub dropout: f64,
    /// Pairwise logits per decode step in the auxiliary loss (0 = all).
    pub pair_cap: usize,
    pub paper_sign: bool,
    pub clip_norm: f64,
    /// Stop once the validation score reaches this value; 0 disables.
    pub early_stop_score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataTask {
    Tsp,
    Grammar,
    Ruleset,
    /// Datasets read from `train_path` / `test_path`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub task: DataTask,
    pub train_path: String,
    pub test_path: String,
    pub val_fraction: f64,
    /// Size of the generated held-out set.
    pub test_count: usize,
    pub tsp: TspConfig,
    pub grammar: GrammarConfig,
    pub ruleset: RulesetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSection {
    /// Training runs per table cell.
    pub seeds: usize,
    /// Held-out instances per evaluated cardinality.
    pub eval_count: usize,
    /// Test cardinalities of the TSP generalization table.
    pub tsp_eval_n: Vec<usize>,
    /// Longest grammar word in the grammar suite (0 = full generator ranges).
    pub grammar_max_len: usize,
    /// Rule orders and interdependence depths of the ruleset ladder.
    pub ruleset_orders: Vec<usize>,
    pub ruleset_layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub data: DataSection,
    pub recipe: RecipeSection,
}

impl Default for RunConfig {
    /// Full-size settings: hidden size 256, 4 heads, 3 interdependence
    /// layers, AdamW at 1e-4 with decay 1e-2, batch 32, 50 epochs.
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::Double,
            eval_every: 1,
            model: ModelSection {
                d_model: 256,
                n_heads: 4,
                n_sit_layers: 3,
                sigma: Sigma::Softmax,
                use_residual: true,
                use_layer_norm: true,
                augment_set: true,
                d_att: 256,
                pair_hidden: 256,
                zero_init_pointer: true,
            },
            optim: OptimSection {
                lr: 1e-4,
                weight_decay: 1e-2,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch_size: 32,
                epochs: 50,
                lambda: 0.1,
                dropout: 0.1,
                pair_cap: 32,
                paper_sign: false,
                clip_norm: 5.0,
                early_stop_score: 0.0,
            },
            data: DataSection {
                task: DataTask::Grammar,
                train_path: String::new(),
                test_path: String::new(),
                val_fraction: 0.1,
                test_count: 500,
                tsp: TspConfig::default(),
                grammar: GrammarConfig::new(GrammarKind::Anbncn),
                ruleset: RulesetConfig::default(),
            },
            recipe: RecipeSection {
                seeds: 3,
                eval_count: 500,
                tsp_eval_n: vec![10, 15, 20],
                grammar_max_len: 0,
                ruleset_orders: vec![3, 4, 5],
                ruleset_layers: vec![2, 3, 4],
            },
        }
    }
}

/// Named starting points for a config file (`profile = "desk"`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            _ => Err(Error::Config(format!("unknown profile `{s}` (paper, desk)"))),
        }
    }
}

impl RunConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    /// CPU-sized settings: width 64, 2 heads, 2 interdependence layers,
    /// 20 epochs, full pair enumeration and smaller generated sets.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model.d_model = 64;
        c.model.n_heads = 2;
        c.model.n_sit_layers = 2;
        c.model.d_att = 64;
        c.model.pair_hidden = 32;
        c.optim.epochs = 20;
        c.optim.lr = 1e-3;
        c.optim.pair_cap = 0;
        c.data.grammar.n_range = [1, 8];
        c.data.grammar.count = 5000;
        c.data.tsp.n_range = [5, 7];
        c.data.tsp.start = TspStart::Leftmost;
        c.data.tsp.count = 5000;
        c.data.ruleset.count = 3000;
        c.recipe.seeds = 1;
        c.recipe.eval_count = 100;
        c.recipe.tsp_eval_n = vec![5, 7, 10];
        c.recipe.grammar_max_len = 24;
        c
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision == Precision::Single {
            return Err(Error::Config("precision = \"single\" is not supported; all arithmetic is f64".into()));
        }
        let o = &self.optim;
        if o.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", o.dropout)));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.data.val_fraction)));
        }
        if !(o.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.encoder().validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_sit_layers: m.n_sit_layers,
            sigma: m.sigma,
            use_residual: m.use_residual,
            use_layer_norm: m.use_layer_norm,
            dropout: self.optim.dropout,
            augment_set: m.augment_set,
        }
    }

    pub fn model_config(&self, d_input: usize) -> ModelConfig {
        ModelConfig {
            d_input,
            encoder: self.encoder(),
            decoder: DecoderConfig {
                d_att: self.model.d_att,
                pair_hidden: self.model.pair_hidden,
                zero_init_pointer: self.model.zero_init_pointer,
            },
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.optim.lambda,
            pair_cap: self.optim.pair_cap,
            paper_sign: self.optim.paper_sign,
        }
    }

    pub fn adamw(&self) -> AdamwConfig {
        AdamwConfig {
            lr: self.optim.lr,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
        }
    }

    fn to_table(&self) -> Table {
        match Value::try_from(self).expect("config serializes") {
            Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        }
    }

    fn from_table(t: Table) -> Result<Self> {
        let cfg: Self = Value::Table(t).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every dotted key accepted by config files and `--override`.
    pub fn valid_keys() -> Vec<String> {
        let mut out = Vec::new();
        flatten_keys(&Self::default().to_table(), "", &mut out);
        out
    }

    /// Parses a config file on top of a profile. A top-level
    /// `profile = "paper" | "desk"` picks the base (desk when absent).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut file: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match file.remove("profile") {
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
            None => Profile::Desk,
        };
        let mut base = Self::profile(profile).to_table();
        merge(&mut base, file, "")?;
        Self::from_table(base)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies one `dotted.key=value` override; the value is parsed as a
    /// TOML value, falling back to a plain string.
    pub fn apply_override(&self, spec: &str) -> Result<Self> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        let mut patch = Table::new();
        let parts: Vec<&str> = key.split('.').collect();
        let mut cursor = &mut patch;
        for part in &parts[..parts.len() - 1] {
            cursor = cursor
                .entry(part.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("fresh table");
        }
        cursor.insert(parts[parts.len() - 1].to_string(), value);
        let mut base = self.to_table();
        merge(&mut base, patch, "")?;
        Self::from_table(base)
    }

    pub fn with_overrides<S: AsRef<str>>(&self, specs: &[S]) -> Result<Self> {
        specs.iter().try_fold(self.clone(), |cfg, s| cfg.apply_override(s.as_ref()))
    }

    /// Digest of the fully resolved configuration (16 hex chars).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Dotted key/value listing of the resolved config.
    pub fn flattened(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten_values(&self.to_table(), "", &mut out);
        out
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn flatten_keys(t: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        match v {
            Value::Table(inner) => flatten_keys(inner, &join(prefix, k), out),
            _ => out.push(join(prefix, k)),
        }
    }
}

fn flatten_values(t: &Table, prefix: &str, out: &mut Vec<(String, String)>) {
    for (k, v) in t {
        match v {
            Value::Table(inner) => flatten_values(inner, &join(prefix, k), out),
            other => out.push((join(prefix, k), other.to_string())),
        }
    }
}

fn unknown_key(key: &str) -> Error {
    Error::Config(format!(
        "unknown key `{key}`; valid keys: {}",
        RunConfig::valid_keys().join(", ")
    ))
}

/// Overlays `patch` onto `base`, refusing keys `base` does not have.
fn merge(base: &mut Table, patch: Table, prefix: &str) -> Result<()> {
    for (k, v) in patch {
        let path = join(prefix, &k);
        match (base.get_mut(&k), v) {
            (None, _) => return Err(unknown_key(&path)),
            (Some(Value::Table(b)), Value::Table(p)) => merge(b, p, &path)?,
            (Some(Value::Table(_)), _) => {
                return Err(Error::Config(format!("`{path}` is a section, not a value")))
            }
            (Some(_), Value::Table(_)) => return Err(unknown_key(&format!("{path}.*"))),
            (Some(slot), v) => {
                // integers are accepted where floats are expected
                *slot = match (&*slot, v) {
                    (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
                    (_, v) => v,
                };
            }
        }
    }
    Ok(())
}
