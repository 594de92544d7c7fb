//! Stage orchestration over a working directory.
//!
//! Each stage writes its artifacts under `<workdir>/<stage>/` (per variant
//! for corpus, language model and evaluation) together with a
//! `manifest.json` recording the version, seed, cumulative config hash and
//! the hashes of its inputs and outputs. A stage whose manifest matches the
//! current config and inputs is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::corpus::{build_corpus, Corpus, EntityTokens, Ids, PoiMeta, SplitPart, TokenSequence, Variant, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{ablation_table, project_ids, projection_tsv, run_eval, AblationTable, EvalInputs, EvalReport};
use crate::ingest::{dataset_stats, index_events, parse_checkins, read_split, split_chronological, write_split, InputFormat};
use crate::io::{read_json, read_jsonl, sha256_file, write_json, write_jsonl, write_text};
use crate::kg::{build_kg, EntityType, KnowledgeGraph};
use crate::lm::{train_lm, LanguageModel, TrainSequence};
use crate::synth::synthetic_city;
use crate::tokenizer::{train_tokenizer, StruIdTable, TokenizerModel};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub variant: Option<Variant>,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// Workdir-relative path (or the raw input path) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Stage-relative path to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub workdir: PathBuf,
    /// Accept predecessor artifacts built under a different config.
    pub force: bool,
}

fn hash_dir(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).expect("below dir").to_string_lossy().replace('\\', "/");
            if rel != MANIFEST {
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

impl Pipeline {
    pub fn new(config: RunConfig, force: bool) -> Self {
        let workdir = config.paths.workdir.clone();
        Pipeline { config, workdir, force }
    }

    pub fn stage_dir(&self, stage: Stage, variant: Option<Variant>) -> PathBuf {
        let d = self.workdir.join(stage.name());
        match variant {
            Some(v) => d.join(v.key()),
            None => d,
        }
    }

    fn command(stage: Stage, variant: Option<Variant>) -> String {
        match variant {
            Some(v) if v != Variant::Full => format!("{} --variant {}", stage.name(), v.key()),
            _ => stage.name().to_string(),
        }
    }

    /// Manifest of a finished predecessor, checked against the current config.
    fn require(&self, stage: Stage, variant: Option<Variant>) -> Result<StageManifest> {
        let path = self.stage_dir(stage, variant).join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: Self::command(stage, variant),
                path: path.display().to_string(),
            });
        }
        let m: StageManifest = read_json(&path)?;
        let want = self.config.stage_hash(stage);
        if m.config_hash != want {
            let msg = format!(
                "{} was built with config {} but the current config hashes to {want}; rerun `{}` or pass --force",
                path.display(),
                &m.config_hash[..12.min(m.config_hash.len())],
                Self::command(stage, variant)
            );
            if !self.force {
                return Err(Error::config(msg));
            }
            log::warn!("{msg}");
        }
        Ok(m)
    }

    fn lineage(&self, deps: &[(Stage, Option<Variant>)]) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for &(s, v) in deps {
            let m = self.require(s, v)?;
            let prefix = self.stage_dir(s, v).strip_prefix(&self.workdir).expect("inside workdir").to_path_buf();
            for (rel, h) in m.outputs {
                inputs.insert(prefix.join(rel).to_string_lossy().replace('\\', "/"), h);
            }
        }
        Ok(inputs)
    }

    fn up_to_date(&self, stage: Stage, variant: Option<Variant>, inputs: &BTreeMap<String, String>) -> bool {
        let dir = self.stage_dir(stage, variant);
        let Ok(m) = read_json::<StageManifest>(&dir.join(MANIFEST)) else {
            return false;
        };
        m.config_hash == self.config.stage_hash(stage)
            && m.seed == self.config.seed
            && &m.inputs == inputs
            && hash_dir(&dir).map(|h| h == m.outputs).unwrap_or(false)
    }

    fn fresh_dir(&self, stage: Stage, variant: Option<Variant>) -> Result<PathBuf> {
        let dir = self.stage_dir(stage, variant);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn finish(&self, stage: Stage, variant: Option<Variant>, inputs: BTreeMap<String, String>) -> Result<Outcome> {
        let dir = self.stage_dir(stage, variant);
        let m = StageManifest {
            stage,
            variant,
            version: VERSION.to_string(),
            seed: self.config.seed,
            config_hash: self.config.stage_hash(stage),
            inputs,
            outputs: hash_dir(&dir)?,
        };
        write_json(&dir.join(MANIFEST), &m)?;
        log::info!("{} finished", Self::command(stage, variant));
        Ok(Outcome::Ran)
    }

    /// Runs `body` unless the stage is already up to date.
    fn stage(
        &self,
        stage: Stage,
        variant: Option<Variant>,
        inputs: BTreeMap<String, String>,
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<Outcome> {
        if self.up_to_date(stage, variant, &inputs) {
            log::info!("{} is up to date", Self::command(stage, variant));
            return Ok(Outcome::UpToDate);
        }
        let dir = self.fresh_dir(stage, variant)?;
        body(&dir)?;
        self.finish(stage, variant, inputs)
    }

    /// Writes the synthetic city of the `[synth]` section to the raw path.
    pub fn synth(&self) -> Result<Outcome> {
        let cfg = self
            .config
            .synth
            .as_ref()
            .ok_or_else(|| Error::config("the config has no [synth] section"))?;
        let events = synthetic_city(cfg, self.config.seed);
        let mut buf = Vec::new();
        for e in &events {
            serde_json::to_writer(&mut buf, e).expect("event serializes");
            buf.push(b'\n');
        }
        let path = &self.config.paths.raw;
        if fs::read(path).ok().as_deref() == Some(buf.as_slice()) {
            return Ok(Outcome::UpToDate);
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        log::info!("wrote {} synthetic check-ins to {}", events.len(), path.display());
        Ok(Outcome::Ran)
    }

    pub fn ingest(&self) -> Result<Outcome> {
        let raw = &self.config.paths.raw;
        if !raw.exists() {
            return Err(Error::MissingArtifact {
                stage: if self.config.synth.is_some() { "synth".into() } else { "a raw check-in file".into() },
                path: raw.display().to_string(),
            });
        }
        let mut inputs = BTreeMap::new();
        inputs.insert(raw.display().to_string(), sha256_file(raw)?);
        self.stage(Stage::Ingest, None, inputs, |dir| {
            let parsed = parse_checkins(raw, InputFormat::from_path(raw))?;
            let ds = index_events(&parsed.events, self.config.ingest.cells_per_axis)?;
            let split = split_chronological(&ds.visits, ds.catalog.users.len());
            write_split(dir, &ds.catalog, &split)?;
            write_json(&dir.join("stats.json"), &dataset_stats(&ds.catalog, &split))
        })
    }

    pub fn build_kg(&self) -> Result<Outcome> {
        let inputs = self.lineage(&[(Stage::Ingest, None)])?;
        self.stage(Stage::BuildKg, None, inputs, |dir| {
            let (catalog, split) = read_split(&self.stage_dir(Stage::Ingest, None))?;
            let kg = build_kg(&catalog, &split, self.config.kg.d_km)?;
            write_text(&dir.join("kg.json"), &kg.to_json())?;
            write_json(&dir.join("stats.json"), &kg.stats())
        })
    }

    fn load_kg(&self) -> Result<KnowledgeGraph> {
        let path = self.stage_dir(Stage::BuildKg, None).join("kg.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        KnowledgeGraph::from_json(&text)
    }

    pub fn train_tokenizer(&self) -> Result<Outcome> {
        let inputs = self.lineage(&[(Stage::BuildKg, None)])?;
        self.stage(Stage::TrainTokenizer, None, inputs, |dir| {
            let kg = self.load_kg()?;
            match train_tokenizer(&kg, &self.config.tokenizer, self.config.seed) {
                Ok(t) => {
                    t.model.save(&dir.join("checkpoint"), self.config.seed, t.log.len() as u64)?;
                    write_json(&dir.join("log.json"), &t.log)
                }
                Err(abort) => {
                    abort.last_good.save(&dir.join("last_good"), self.config.seed, abort.log.len() as u64)?;
                    write_json(&dir.join("log.json"), &abort.log)?;
                    Err(Error::Numerical(format!(
                        "tokenizer training aborted: {}; last good parameters in {}",
                        abort.reason,
                        dir.join("last_good").display()
                    )))
                }
            }
        })
    }

    pub fn assign_ids(&self) -> Result<Outcome> {
        let inputs = self.lineage(&[(Stage::Ingest, None), (Stage::BuildKg, None), (Stage::TrainTokenizer, None)])?;
        self.stage(Stage::AssignIds, None, inputs, |dir| {
            let (catalog, _) = read_split(&self.stage_dir(Stage::Ingest, None))?;
            let kg = self.load_kg()?;
            let model = TokenizerModel::load(&self.stage_dir(Stage::TrainTokenizer, None).join("checkpoint"))?;
            let lists = kg.neighbor_lists();
            let qg = model.quantize_graph(&kg, &lists);
            let table = StruIdTable::from_graph(&model, &kg, &qg);
            let names = [
                catalog.users.clone(),
                catalog.pois.iter().map(|p| p.id.clone()).collect(),
                catalog.categories.clone(),
                (0..catalog.num_regions()).map(|r| catalog.region_name(r)).collect(),
            ];
            write_text(&dir.join("struids.tsv"), &table.to_tsv(&names))
        })
    }

    fn corpus_deps(&self, variant: Variant) -> Vec<(Stage, Option<Variant>)> {
        let mut deps = vec![(Stage::Ingest, None)];
        if variant != Variant::NoStruId {
            deps.push((Stage::AssignIds, None));
        }
        deps
    }

    pub fn build_corpus(&self, variant: Variant) -> Result<Outcome> {
        let inputs = self.lineage(&self.corpus_deps(variant))?;
        self.stage(Stage::BuildCorpus, Some(variant), inputs, |dir| {
            let (catalog, split) = read_split(&self.stage_dir(Stage::Ingest, None))?;
            let meta = PoiMeta::from_catalog(&catalog);
            let window = self.config.corpus.window;
            let corpus = if variant == Variant::NoStruId {
                let counts = [catalog.users.len(), catalog.pois.len(), catalog.categories.len(), catalog.num_regions()];
                build_corpus(&split, &meta, Ids::Random { counts, seed: self.config.seed }, variant, window)?
            } else {
                let path = self.stage_dir(Stage::AssignIds, None).join("struids.tsv");
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let (table, _) = StruIdTable::from_tsv(&text)?;
                let sizes = &self.config.tokenizer.codebook_sizes;
                build_corpus(&split, &meta, Ids::StruId(&table, sizes), variant, window)?
            };
            save_corpus(dir, &corpus)
        })
    }

    pub fn load_corpus(&self, variant: Variant) -> Result<Corpus> {
        load_corpus(&self.stage_dir(Stage::BuildCorpus, Some(variant)))
    }

    pub fn train_lm(&self, variant: Variant) -> Result<Outcome> {
        let inputs = self.lineage(&[(Stage::BuildCorpus, Some(variant))])?;
        self.stage(Stage::TrainLm, Some(variant), inputs, |dir| {
            let corpus = self.load_corpus(variant)?;
            let data: Vec<TrainSequence> = corpus
                .examples
                .iter()
                .filter(|e| e.split == SplitPart::Train)
                .map(TrainSequence::from)
                .collect();
            if data.is_empty() {
                return Err(Error::data("corpus has no training examples"));
            }
            match train_lm(&data, corpus.vocab.len(), corpus.max_len, &self.config.lm, self.config.seed) {
                Ok(t) => {
                    t.model.save(&dir.join("checkpoint"), self.config.seed, t.steps)?;
                    write_json(&dir.join("log.json"), &t.log)
                }
                Err(abort) => {
                    abort.last_good.save(&dir.join("last_good"), self.config.seed, 0)?;
                    write_json(&dir.join("log.json"), &abort.log)?;
                    Err(Error::Numerical(format!(
                        "language model training aborted: {}; last good parameters in {}",
                        abort.reason,
                        dir.join("last_good").display()
                    )))
                }
            }
        })
    }

    fn split_hash(&self) -> Result<String> {
        let dir = self.stage_dir(Stage::Ingest, None);
        let mut joined = String::new();
        for f in crate::ingest::SPLIT_FILES {
            joined.push_str(&sha256_file(&dir.join(f))?);
        }
        Ok(crate::io::sha256_hex(joined.as_bytes()))
    }

    pub fn evaluate(&self, variant: Variant) -> Result<Outcome> {
        let inputs = self.lineage(&[(Stage::Ingest, None), (Stage::BuildCorpus, Some(variant)), (Stage::TrainLm, Some(variant))])?;
        self.stage(Stage::Evaluate, Some(variant), inputs, |dir| {
            let (_, split) = read_split(&self.stage_dir(Stage::Ingest, None))?;
            let corpus = self.load_corpus(variant)?;
            let model = LanguageModel::load(&self.stage_dir(Stage::TrainLm, Some(variant)).join("checkpoint"))?;
            let report = run_eval(&EvalInputs {
                model: &model,
                corpus: &corpus,
                train: &split.train,
                ks: &self.config.eval.ks,
                beam_width: self.config.eval.beam_width,
                seed: self.config.seed,
                config_hash: self.config.stage_hash(Stage::Evaluate),
                split_hash: self.split_hash()?,
            })?;
            write_json(&dir.join("report.json"), &report)?;
            write_text(&dir.join("report.txt"), &report.to_table())
        })
    }

    pub fn report(&self, variant: Variant) -> Result<EvalReport> {
        self.require(Stage::Evaluate, Some(variant))?;
        read_json(&self.stage_dir(Stage::Evaluate, Some(variant)).join("report.json"))
    }

    /// Corpus, model and evaluation for one variant.
    pub fn run_variant(&self, variant: Variant) -> Result<EvalReport> {
        if variant != Variant::NoStruId {
            self.assign_ids()?;
        }
        self.build_corpus(variant)?;
        self.train_lm(variant)?;
        self.evaluate(variant)?;
        self.report(variant)
    }

    /// Every stage from ingestion to evaluation of the configured variant.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.shared_stages()?;
        self.run_variant(self.config.corpus.variant)
    }

    fn shared_stages(&self) -> Result<()> {
        if self.config.synth.is_some() {
            self.synth()?;
        }
        self.ingest()?;
        self.build_kg()?;
        self.train_tokenizer()?;
        self.assign_ids()?;
        Ok(())
    }

    /// Evaluates every configured variant and tabulates POI-task metrics.
    pub fn ablate(&self) -> Result<AblationTable> {
        self.shared_stages()?;
        let mut reports = Vec::new();
        for &v in &self.config.ablate.variants {
            reports.push(self.run_variant(v)?);
        }
        let table = ablation_table(&reports)?;
        let dir = self.workdir.join("ablate");
        write_json(&dir.join("table.json"), &table)?;
        write_text(&dir.join("table.txt"), &table.to_text())?;
        Ok(table)
    }

    /// PCA projections of quantised POI vectors labelled by region and by
    /// category, with silhouettes.
    pub fn project(&self) -> Result<BTreeMap<String, Option<f64>>> {
        self.require(Stage::TrainTokenizer, None)?;
        let (catalog, _) = read_split(&self.stage_dir(Stage::Ingest, None))?;
        let kg = self.load_kg()?;
        let model = TokenizerModel::load(&self.stage_dir(Stage::TrainTokenizer, None).join("checkpoint"))?;
        let qg = model.quantize_graph(&kg, &kg.neighbor_lists());
        let off = kg.offset(EntityType::Poi);
        let vectors: Vec<Vec<f64>> = (0..kg.count(EntityType::Poi)).map(|i| qg.quantized.row(off + i).to_vec()).collect();
        let ids: Vec<String> = catalog.pois.iter().map(|p| p.id.clone()).collect();
        let dir = self.workdir.join("project");
        let mut sil = BTreeMap::new();
        let labelings: [(&str, Vec<usize>, Vec<String>); 2] = [
            (
                "region",
                catalog.pois.iter().map(|p| p.region).collect(),
                catalog.pois.iter().map(|p| catalog.region_name(p.region)).collect(),
            ),
            (
                "category",
                catalog.pois.iter().map(|p| p.category).collect(),
                catalog.pois.iter().map(|p| catalog.categories[p.category].clone()).collect(),
            ),
        ];
        for (name, labels, names) in labelings {
            let p = project_ids(&vectors, &labels)?;
            write_text(&dir.join(format!("projection_{name}.tsv")), &projection_tsv(&p, &names, &ids))?;
            sil.insert(name.to_string(), p.silhouette);
        }
        write_json(&dir.join("silhouette.json"), &sil)?;
        Ok(sil)
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    variant: Variant,
    window: usize,
    max_len: usize,
    examples: usize,
}

pub fn save_corpus(dir: &Path, c: &Corpus) -> Result<()> {
    write_json(
        &dir.join("corpus.json"),
        &CorpusHeader {
            variant: c.variant,
            window: c.window,
            max_len: c.max_len,
            examples: c.examples.len(),
        },
    )?;
    write_text(&dir.join("vocab.json"), &(c.vocab.to_json() + "\n"))?;
    write_json(&dir.join("entity_tokens.json"), &c.entity_tokens)?;
    write_jsonl(&dir.join("corpus.jsonl"), &c.examples)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let header: CorpusHeader = read_json(&dir.join("corpus.json"))?;
    let path = dir.join("vocab.json");
    let vocab = Vocabulary::from_json(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let entity_tokens: EntityTokens = read_json(&dir.join("entity_tokens.json"))?;
    let examples: Vec<TokenSequence> = read_jsonl(&dir.join("corpus.jsonl"))?;
    if examples.len() != header.examples {
        return Err(Error::data(format!(
            "{}: expected {} examples, found {}",
            dir.display(),
            header.examples,
            examples.len()
        )));
    }
    Ok(Corpus {
        variant: header.variant,
        window: header.window,
        vocab,
        entity_tokens,
        examples,
        max_len: header.max_len,
    })
}
