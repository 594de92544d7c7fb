use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use struid_core::config::{RunConfig, Stage};
use struid_core::corpus::{Task, Variant};
use struid_core::eval::build_tries;
use struid_core::ingest::read_split;
use struid_core::io::{read_jsonl, write_jsonl};
use struid_core::kg::KnowledgeGraph;
use struid_core::lm::{generate_topk, LanguageModel};
use struid_core::pipeline::{Outcome, Pipeline};
use struid_core::{Error, Result};

/// Knowledge-graph tokenised generative next-POI recommendation.
#[derive(Parser)]
#[command(name = "struid", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Working directory for artifacts; overrides `paths.workdir`.
    #[arg(long, global = true, env = "STRUID_WORKDIR")]
    workdir: Option<PathBuf>,
    /// Override a config field, e.g. `--set lm.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Use predecessor artifacts even if they were built with another config.
    #[arg(long, global = true)]
    force: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic city of the `[synth]` section to `paths.raw`.
    Synth,
    /// Parse raw check-ins, assign regions and split chronologically.
    Ingest,
    /// Build the knowledge graph from the train split.
    BuildKg {
        /// Print entity and triple counts.
        #[arg(long)]
        stats: bool,
    },
    /// Train the graph encoder and residual quantiser.
    TrainTokenizer,
    /// Assign structural ids to every entity.
    AssignIds,
    /// Serialise the multi-task corpus.
    BuildCorpus {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Train the language model on a corpus.
    TrainLm {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Rank test targets and write an evaluation report.
    Evaluate {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Run every stage for each configured variant and compare them.
    Ablate,
    /// Export 2-D projections of quantised POI vectors.
    Project,
    /// Run every stage through evaluation.
    Pipeline,
    /// Rank ids for prompts read from a JSONL file.
    Generate {
        /// JSONL with `task` and `input_ids` per line.
        #[arg(long)]
        input: PathBuf,
        /// Output JSONL; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Number of ids per prompt; defaults to the largest eval K.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        beam_width: Option<usize>,
    },
}

#[derive(Deserialize)]
struct GenerateRequest {
    task: Task,
    input_ids: Vec<usize>,
}

#[derive(Serialize)]
struct Ranked {
    id: String,
    tokens: Vec<usize>,
    score: f64,
}

#[derive(Serialize)]
struct GenerateResponse {
    task: Task,
    ranked: Vec<Ranked>,
    short: bool,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(w) = &cli.workdir {
        cfg.paths.workdir = w.clone();
    }
    Ok(cfg)
}

fn report(stage: &str, o: Outcome) {
    match o {
        Outcome::Ran => eprintln!("{stage}: done"),
        Outcome::UpToDate => eprintln!("{stage}: up to date"),
    }
}

fn generate(p: &Pipeline, input: &PathBuf, output: Option<&PathBuf>, variant: Variant, k: usize, beam: usize) -> Result<()> {
    let corpus = p.load_corpus(variant).map_err(|e| match e {
        Error::Io { .. } => Error::MissingArtifact {
            stage: "build-corpus".into(),
            path: p.stage_dir(Stage::BuildCorpus, Some(variant)).display().to_string(),
        },
        other => other,
    })?;
    let ckpt = p.stage_dir(Stage::TrainLm, Some(variant)).join("checkpoint");
    if !ckpt.exists() {
        return Err(Error::MissingArtifact {
            stage: "train-lm".into(),
            path: ckpt.display().to_string(),
        });
    }
    let model = LanguageModel::load(&ckpt)?;
    let (catalog, _) = read_split(&p.stage_dir(Stage::Ingest, None))?;
    let names: [Vec<String>; 4] = [
        catalog.users.clone(),
        catalog.pois.iter().map(|p| p.id.clone()).collect(),
        catalog.categories.clone(),
        (0..catalog.num_regions()).map(|r| catalog.region_name(r)).collect(),
    ];
    let tries = build_tries(&corpus)?;
    let requests: Vec<GenerateRequest> = read_jsonl(input)?;
    let mut out = Vec::with_capacity(requests.len());
    for (i, r) in requests.iter().enumerate() {
        let trie = tries
            .get(&r.task)
            .ok_or_else(|| Error::data(format!("line {}: variant {variant} has no {} task", i + 1, r.task.name())))?;
        if let Some(&bad) = r.input_ids.iter().find(|&&t| t >= corpus.vocab.len()) {
            return Err(Error::data(format!("line {}: token id {bad} is outside the vocabulary", i + 1)));
        }
        if r.input_ids.is_empty() || r.input_ids.len() >= model.shape.max_len {
            return Err(Error::data(format!("line {}: prompt length {} is out of range", i + 1, r.input_ids.len())));
        }
        let g = generate_topk(&model, &r.input_ids, trie, k, beam.max(k));
        let ty = r.task.target_type();
        out.push(GenerateResponse {
            task: r.task,
            short: g.short,
            ranked: g
                .candidates
                .into_iter()
                .map(|c| Ranked {
                    id: names[ty.index()][c.entity].clone(),
                    tokens: c.tokens,
                    score: c.score,
                })
                .collect(),
        });
    }
    match output {
        Some(path) => write_jsonl(path, &out),
        None => {
            let mut stdout = std::io::stdout().lock();
            for r in &out {
                let line = serde_json::to_string(r).expect("response serializes");
                writeln!(stdout, "{line}").map_err(|e| Error::io(std::path::Path::new("<stdout>"), e))?;
            }
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let default_variant = cfg.corpus.variant;
    let p = Pipeline::new(cfg, cli.force);
    match &cli.command {
        Command::Synth => report("synth", p.synth()?),
        Command::Ingest => report("ingest", p.ingest()?),
        Command::BuildKg { stats } => {
            report("build-kg", p.build_kg()?);
            if *stats {
                let path = p.stage_dir(Stage::BuildKg, None).join("kg.json");
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let kg = KnowledgeGraph::from_json(&text)?;
                println!("{}", serde_json::to_string_pretty(&kg.stats()).expect("stats serialize"));
            }
        }
        Command::TrainTokenizer => report("train-tokenizer", p.train_tokenizer()?),
        Command::AssignIds => report("assign-ids", p.assign_ids()?),
        Command::BuildCorpus { variant } => report("build-corpus", p.build_corpus(variant.unwrap_or(default_variant))?),
        Command::TrainLm { variant } => report("train-lm", p.train_lm(variant.unwrap_or(default_variant))?),
        Command::Evaluate { variant } => {
            let v = variant.unwrap_or(default_variant);
            report("evaluate", p.evaluate(v)?);
            print!("{}", p.report(v)?.to_table());
        }
        Command::Ablate => print!("{}", p.ablate()?.to_text()),
        Command::Project => {
            let sil = p.project()?;
            println!("{}", serde_json::to_string_pretty(&sil).expect("silhouettes serialize"));
        }
        Command::Pipeline => print!("{}", p.run_all()?.to_table()),
        Command::Generate {
            input,
            output,
            variant,
            k,
            beam_width,
        } => {
            let k = k.unwrap_or_else(|| p.config.eval.ks.iter().copied().max().unwrap_or(10));
            let beam = beam_width.unwrap_or(p.config.eval.beam_width);
            generate(&p, input, output.as_ref(), variant.unwrap_or(default_variant), k, beam)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
