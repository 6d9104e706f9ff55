//! Declarative experiment configuration with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{build_layout, WeightLayout};
use crate::corpus::{make_task, TaskDataset, TaskKind};
use crate::decoder::{DecoderSpec, Dims};
use crate::encoder::{ConditionEncoder, EncoderParams, EncoderRegistry};
use crate::error::{config_err, Error, Result};
use crate::eval::EvalOptions;
use crate::seed;
use crate::trainer::RunConfig;
use crate::zoo::{adapter_schema, BackboneConfig, PretrainConfig, ZooRecipe};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "ADAPTGEN_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub tasks: Vec<TaskKind>,
    pub samples_per_task: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            tasks: vec![
                TaskKind::Reverse,
                TaskKind::Copy,
                TaskKind::SortDigits,
                TaskKind::Uppercase,
                TaskKind::VowelCount,
            ],
            samples_per_task: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub config: BackboneConfig,
    pub pretrain: PretrainConfig,
    /// Task kinds mixed into backbone pretraining; empty means every kind.
    pub pretrain_tasks: Vec<TaskKind>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            config: BackboneConfig::default(),
            pretrain: PretrainConfig {
                steps: 3000,
                ..PretrainConfig::default()
            },
            pretrain_tasks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub id: String,
    pub params: EncoderParams,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            id: "ngram-hash".into(),
            params: EncoderParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub token_len: usize,
    pub row_len: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            token_len: 128,
            row_len: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Closeset,
    #[default]
    Openset,
    Crossdomain,
    Arrangement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: Protocol,
    /// Held-out task for open-set runs.
    pub holdout: Option<String>,
    pub train_family: Vec<String>,
    pub test_family: Vec<String>,
    pub k_train: usize,
    /// Which cyclic arrangement to run (see [`crate::eval::arrangements`]).
    pub rotation: usize,
    pub options: EvalOptions,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Openset,
            holdout: None,
            train_family: Vec::new(),
            test_family: Vec::new(),
            k_train: 4,
            rotation: 0,
            options: EvalOptions::default(),
        }
    }
}

/// One experiment. Sub-seeds (corpus, zoo, pairing/init, eval) are derived
/// from `seed`; seed fields inside sections are overwritten on resolve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub backbone: BackboneSection,
    pub zoo: ZooRecipe,
    pub encoder: EncoderSection,
    pub codec: CodecConfig,
    /// Defaults to [`default_decoder_spec`] for the resolved layout.
    pub decoder: Option<DecoderSpec>,
    pub run: RunConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seed: 0,
            output_dir: None,
            corpus: CorpusConfig::default(),
            backbone: BackboneSection::default(),
            zoo: ZooRecipe {
                pretrain: crate::zoo::Phase { lr: 1e-2, steps: 150 },
                finetune: crate::zoo::Phase { lr: 1e-3, steps: 20 },
                ..ZooRecipe::default()
            },
            encoder: EncoderSection::default(),
            codec: CodecConfig::default(),
            decoder: None,
            run: RunConfig {
                lr: 1e-3,
                steps: 300,
                ..RunConfig::default()
            },
            eval: EvalSection::default(),
        }
    }
}

/// Desk decoder: one intermediate stage halfway between input and grid.
pub fn default_decoder_spec(batch_len: usize, input_len: usize, dim: usize, grid: Dims) -> DecoderSpec {
    let mid = (
        (batch_len + grid.0).div_ceil(2),
        (input_len + grid.1).div_ceil(2),
        (dim + grid.2).div_ceil(2),
    );
    DecoderSpec::chain((batch_len, input_len, dim), None, &[mid, grid])
}

impl ExperimentConfig {
    /// Parses TOML text over the defaults, applies `key=value` overrides and
    /// resolves seeds. Partial sections keep the defaults of their missing keys.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Value = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        let mut value = toml::Value::try_from(Self::default()).map_err(|e| config_err!("{e}"))?;
        merge_toml(&mut value, file);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| config_err!("{e}"))?;
        cfg.resolved()
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            Error::Config(m) => config_err!("{}: {m}", path.display()),
            other => other,
        })
    }

    /// Default config with overrides applied.
    pub fn with_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_toml("", overrides)
    }

    /// Distributes sub-seeds and checks cross-section invariants.
    pub fn resolved(mut self) -> Result<Self> {
        self.zoo.seed = seed::derive(self.seed, "zoo");
        self.backbone.pretrain.seed = seed::derive(self.seed, "backbone");
        self.backbone.config.seed = seed::derive(self.seed, "backbone-init");
        self.run.seed = seed::derive(self.seed, "generator");
        self.eval.options.seed = seed::derive(self.seed, "eval");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.config.validate()?;
        self.run.validate()?;
        if self.corpus.tasks.is_empty() {
            return Err(config_err!("corpus.tasks is empty"));
        }
        let ids = self.task_ids();
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(config_err!("task '{id}' listed twice"));
            }
        }
        let known = |t: &String| ids.contains(t);
        for t in self
            .eval
            .holdout
            .iter()
            .chain(&self.eval.train_family)
            .chain(&self.eval.test_family)
        {
            if !known(t) {
                return Err(config_err!("eval references unknown task '{t}'"));
            }
        }
        if self.corpus.samples_per_task < 10 {
            return Err(config_err!("corpus.samples_per_task must be >= 10"));
        }
        EncoderRegistry::default()
            .build(&self.encoder.id, &self.encoder.params)
            .map(|_| ())
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.corpus.tasks.iter().map(|k| k.name().to_string()).collect()
    }

    /// Content hash of the resolved config; independent of key order in the
    /// source file.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        seed::content_hash(canonical_json(&v).as_bytes())
    }

    /// `output_dir`, else `$ADAPTGEN_OUT`, else `./runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Run directory named by the config hash.
    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(format!("{}-{}", self.name, &self.hash()[..12]))
    }

    /// Training and test task ids for the configured protocol.
    pub fn split_tasks(&self) -> Result<(Vec<String>, Vec<String>)> {
        let ids = self.task_ids();
        match self.eval.protocol {
            Protocol::Closeset => Ok((ids.clone(), ids)),
            Protocol::Openset => {
                let holdout = self.eval.holdout.clone().unwrap_or_else(|| ids[ids.len() - 1].clone());
                let train: Vec<String> = ids.iter().filter(|t| **t != holdout).cloned().collect();
                if train.is_empty() {
                    return Err(config_err!("open-set needs at least one training task besides '{holdout}'"));
                }
                Ok((train, vec![holdout]))
            }
            Protocol::Crossdomain => {
                if !self.eval.train_family.is_empty() || !self.eval.test_family.is_empty() {
                    return Ok((self.eval.train_family.clone(), self.eval.test_family.clone()));
                }
                let (arith, strings): (Vec<TaskKind>, Vec<TaskKind>) =
                    self.corpus.tasks.iter().partition(|k| k.is_arithmetic());
                if arith.is_empty() || strings.is_empty() {
                    return Err(config_err!("cross-domain needs both string and arithmetic tasks"));
                }
                let names = |v: Vec<TaskKind>| v.iter().map(|k| k.name().to_string()).collect();
                Ok((names(strings), names(arith)))
            }
            Protocol::Arrangement => {
                let all = crate::eval::arrangements(&ids, self.eval.k_train)?;
                let n = all.len();
                all.into_iter()
                    .nth(self.eval.rotation)
                    .ok_or_else(|| config_err!("rotation {} out of range for {n} arrangements", self.eval.rotation))
            }
        }
    }

    pub fn build_corpus(&self) -> Result<Vec<TaskDataset>> {
        self.corpus
            .tasks
            .iter()
            .map(|k| make_task(*k, self.corpus.samples_per_task, seed::derive(self.seed, &format!("corpus-{}", k.name()))))
            .collect()
    }

    /// Datasets used for backbone pretraining.
    pub fn pretrain_corpus(&self) -> Result<Vec<TaskDataset>> {
        let kinds = if self.backbone.pretrain_tasks.is_empty() {
            TaskKind::ALL.to_vec()
        } else {
            self.backbone.pretrain_tasks.clone()
        };
        kinds
            .iter()
            .map(|k| make_task(*k, self.corpus.samples_per_task, seed::derive(self.seed, &format!("corpus-{}", k.name()))))
            .collect()
    }

    pub fn encoder(&self) -> Result<Box<dyn ConditionEncoder>> {
        EncoderRegistry::default().build(&self.encoder.id, &self.encoder.params)
    }

    pub fn layout(&self) -> Result<WeightLayout> {
        let schema = adapter_schema(&self.backbone.config, self.zoo.rank)?;
        build_layout(&schema, self.codec.token_len, self.codec.row_len)
    }

    pub fn decoder_spec(&self, layout: &WeightLayout) -> DecoderSpec {
        self.decoder.clone().unwrap_or_else(|| {
            let input_len = if self.run.condition_source.uses_answers() {
                2 * self.encoder.params.window
            } else {
                self.encoder.params.window
            };
            default_decoder_spec(self.run.batch_len, input_len, self.encoder.params.dim, layout.grid)
        })
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
fn merge_toml(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// JSON text with object keys sorted at every level.
pub fn canonical_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", serde_json::Value::String((*k).clone()), canonical_json(&m[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        serde_json::Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML literal when possible
/// and taken as a bare string otherwise.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err!("override '{assignment}' is not key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(config_err!("override '{assignment}' has an empty key"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| config_err!("override '{key}': '{p}' is not a table"))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| config_err!("override '{key}' does not address a table entry"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
