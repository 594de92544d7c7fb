//! Run configuration: one TOML file drives every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Variant;
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::synth::SynthCityConfig;
use crate::tokenizer::TokenizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub ingest: IngestConfig,
    pub kg: KgConfig,
    pub tokenizer: TokenizerConfig,
    pub corpus: CorpusConfig,
    pub lm: LmConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    /// When present, `synth` and `pipeline` generate the raw check-ins.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthCityConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            ingest: IngestConfig::default(),
            kg: KgConfig::default(),
            tokenizer: TokenizerConfig::default(),
            corpus: CorpusConfig::default(),
            lm: LmConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            synth: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub raw: PathBuf,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            raw: PathBuf::from("data/checkins.jsonl"),
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub cells_per_axis: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { cells_per_axis: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgConfig {
    pub d_km: f64,
}

impl Default for KgConfig {
    fn default() -> Self {
        KgConfig { d_km: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub window: usize,
    pub variant: Variant,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            window: 16,
            variant: Variant::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub beam_width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: crate::eval::DEFAULT_KS.to_vec(),
            beam_width: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: Variant::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `key.path=value` overrides, where the value is parsed as a
    /// TOML value (bare words fall back to strings).
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut doc = toml::Value::try_from(&self).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut cur = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, p) in parts.iter().enumerate() {
                let table = cur
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("override {key}: {p} is not a table")))?;
                if i + 1 == parts.len() {
                    table.insert(p.to_string(), value.clone());
                    break;
                }
                cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let text = toml::to_string(&doc).map_err(|e| Error::config(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ingest.cells_per_axis == 0 {
            return Err(Error::config("ingest.cells_per_axis must be at least 1"));
        }
        if !(self.kg.d_km >= 0.0) {
            return Err(Error::config("kg.d_km must be non-negative"));
        }
        if self.corpus.window == 0 {
            return Err(Error::config("corpus.window must be at least 1"));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::config("eval.ks must be non-empty positive cutoffs"));
        }
        let kmax = *self.eval.ks.iter().max().unwrap();
        if self.eval.beam_width < kmax {
            return Err(Error::config(format!(
                "eval.beam_width {} is smaller than the largest K {kmax}",
                self.eval.beam_width
            )));
        }
        self.tokenizer.validate()?;
        self.lm.validate()
    }

    /// Configuration that determines the output of `stage`, including every
    /// earlier stage. Paths are excluded.
    pub fn stage_fragment(&self, stage: Stage) -> serde_json::Value {
        use serde_json::json;
        let mut v = json!({ "ingest": self.ingest });
        if stage >= Stage::BuildKg {
            v["kg"] = json!(self.kg);
        }
        if stage >= Stage::TrainTokenizer {
            v["tokenizer"] = json!(self.tokenizer);
            v["seed"] = json!(self.seed);
        }
        if stage >= Stage::BuildCorpus {
            v["corpus"] = json!({ "window": self.corpus.window });
        }
        if stage >= Stage::TrainLm {
            v["lm"] = json!(self.lm);
        }
        if stage >= Stage::Evaluate {
            v["eval"] = json!(self.eval);
        }
        v
    }

    pub fn stage_hash(&self, stage: Stage) -> String {
        let text = serde_json::to_string(&self.stage_fragment(stage)).expect("fragment serializes");
        crate::io::sha256_hex(text.as_bytes())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    BuildKg,
    TrainTokenizer,
    AssignIds,
    BuildCorpus,
    TrainLm,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::BuildKg,
        Stage::TrainTokenizer,
        Stage::AssignIds,
        Stage::BuildCorpus,
        Stage::TrainLm,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::BuildKg => "build-kg",
            Stage::TrainTokenizer => "train-tokenizer",
            Stage::AssignIds => "assign-ids",
            Stage::BuildCorpus => "build-corpus",
            Stage::TrainLm => "train-lm",
            Stage::Evaluate => "evaluate",
        }
    }
}
