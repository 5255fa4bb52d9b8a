use std::fs;
use std::io::{self, BufWriter};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser as ClapParser, Subcommand};
use serde::Serialize;
use serde_json::json;

use scenparse_core::bank::{Origin, ScenarioBank, DEFAULT_UNSUPPORTED_PREFIX};
use scenparse_core::dataset::{load_dataset, write_dataset};
use scenparse_core::eval::{evaluate, export_embeddings, EvalMode, Parser};
use scenparse_core::model::Model;
use scenparse_core::negatives::mine_model_negatives;
use scenparse_core::repr::{OntologyRegistry, ReprKind};
use scenparse_core::retrieval::{build_index, ScenarioIndex};
use scenparse_core::serve::Service;
use scenparse_core::synth::{generate_splits, SplitSizes, SyntheticGrammar};
use scenparse_core::train::{three_round_train, TrainConfig};

/// Scenario-based semantic parser.
#[derive(ClapParser)]
#[command(name = "scenparse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/eval/test splits from a grammar.
    GenData(GenDataArgs),
    /// Collect the scenario bank from dataset files.
    BuildBank(BuildBankArgs),
    /// Run round 1, mining and round 3.
    Train(TrainArgs),
    /// Mine hard negatives with a trained model.
    MineNegatives(MineArgs),
    /// Encode the bank into a scenario index.
    BuildIndex(BuildIndexArgs),
    /// Score a dataset and print an evaluation report.
    Eval(EvalArgs),
    /// Parse one utterance.
    Parse(ParseArgs),
    /// Write utterance vectors and their PCA projection as CSV.
    ExportEmbeddings(ExportArgs),
    /// Answer JSON-lines requests on stdin/stdout or a TCP address.
    Serve(ServeArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    /// `weather`, `confusable`, or a TOML grammar file.
    #[arg(long, default_value = "confusable")]
    grammar: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    eval: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share of scenarios that only appear in the test split.
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
}

#[derive(Args, Serialize)]
struct BuildBankArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Label descriptions, `label<TAB>description` per line.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    no_hard_negatives: bool,
    #[arg(long)]
    no_identity_masking: bool,
    #[arg(long)]
    no_scenario_fusion: bool,
    #[arg(long)]
    no_parameter_sharing: bool,
    #[arg(long)]
    no_repr_sampling: bool,
    #[arg(long)]
    heuristic_negatives: bool,
}

#[derive(Args, Serialize)]
struct MineArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    train: PathBuf,
    /// Reused when fresh; built otherwise.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BuildIndexArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    /// Representation kind; defaults to the model's inference kind.
    #[arg(long)]
    repr: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct Artifacts {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Use an index built for a different checkpoint.
    #[arg(long)]
    allow_stale: bool,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    artifacts: Artifacts,
    #[arg(long)]
    data: PathBuf,
    /// standard, oracle_retrieval or oracle_filling.
    #[arg(long, default_value = "standard")]
    mode: String,
    #[arg(long, default_value_t = 3)]
    top_n: usize,
    #[arg(long, default_value = DEFAULT_UNSUPPORTED_PREFIX)]
    unsupported_prefix: String,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ParseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    artifacts: Artifacts,
    #[arg(long)]
    utterance: String,
    #[arg(long, default_value_t = 3)]
    top_n: usize,
    /// Print the full parse result as JSON instead of the frame.
    #[arg(long)]
    json: bool,
    /// Fill every top-n candidate (implies --json).
    #[arg(long)]
    fill_all: bool,
}

#[derive(Args, Serialize)]
struct ExportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    artifacts: Artifacts,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ServeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    artifacts: Artifacts,
    /// Listen on this address instead of standard streams.
    #[arg(long)]
    tcp: Option<String>,
}

/// Resolved configuration goes to stderr so stdout stays machine-readable.
fn announce(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<()> {
    let line = json!({"command": command, "config": config, "seed": seed});
    eprintln!("{line}");
    Ok(())
}

fn training_seed(model: &Model) -> Option<u64> {
    model
        .metadata
        .get("train_config")
        .and_then(|c| c.get("seed"))
        .and_then(|s| s.as_u64())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

struct Loaded {
    model: Model,
    bank: ScenarioBank,
    index: ScenarioIndex,
}

impl Loaded {
    fn open(a: &Artifacts) -> Result<Self> {
        Ok(Self {
            model: Model::load(&a.model)?,
            bank: ScenarioBank::load(&a.bank)?,
            index: ScenarioIndex::load(&a.index)?,
        })
    }

    fn parser(&self, allow_stale: bool) -> Result<Parser<'_>> {
        Ok(Parser::new(&self.model, &self.index, &self.bank, allow_stale)?)
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    announce("gen-data", a, Some(a.seed))?;
    let grammar = SyntheticGrammar::named_or_path(&a.grammar)?;
    let sizes = SplitSizes {
        train: a.train,
        eval: a.eval,
        test: a.test,
    };
    let data = generate_splits(&grammar, &sizes, a.seed, a.holdout)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_dataset(&a.out.join("train.tsv"), &data.train)?;
    write_dataset(&a.out.join("eval.tsv"), &data.eval)?;
    write_dataset(&a.out.join("test.tsv"), &data.test)?;
    write_text(&a.out.join("registry.tsv"), &data.registry.to_tsv())?;
    let mut held = data.held_out.join("\n");
    if !held.is_empty() {
        held.push('\n');
    }
    write_text(&a.out.join("held_out.txt"), &held)?;
    println!(
        "{}",
        json!({"train": data.train.len(), "eval": data.eval.len(), "test": data.test.len(), "held_out": data.held_out.len()})
    );
    Ok(())
}

fn build_bank(a: &BuildBankArgs) -> Result<()> {
    announce("build-bank", a, None)?;
    let mut files = vec![(Origin::Train, a.train.as_path())];
    if let Some(p) = &a.eval {
        files.push((Origin::Eval, p.as_path()));
    }
    if let Some(p) = &a.test {
        files.push((Origin::Test, p.as_path()));
    }
    let bank = ScenarioBank::build_from_files(&files)?;
    bank.save(&a.out)?;
    println!("{}", json!({"scenarios": bank.len()}));
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    if let Some(k) = a.k {
        config.k = k;
    }
    config.hard_negatives &= !a.no_hard_negatives;
    config.identity_masking &= !a.no_identity_masking;
    config.scenario_fusion &= !a.no_scenario_fusion;
    config.parameter_sharing &= !a.no_parameter_sharing;
    config.repr_sampling &= !a.no_repr_sampling;
    config.heuristic_negatives |= a.heuristic_negatives;
    config.validate()?;
    announce("train", &config, Some(config.seed))?;

    let samples = load_dataset(&a.train)?;
    let bank = ScenarioBank::load(&a.bank)?;
    let registry = match &a.registry {
        Some(p) => OntologyRegistry::load_tsv(p)?,
        None => OntologyRegistry::new(),
    };
    let outcome = three_round_train(&config, &samples, &bank, registry)?;
    outcome.save(&a.out)?;
    write_text(&a.out.join("config.toml"), &config.to_toml())?;
    let model = outcome.final_model();
    let index = build_index(model, &bank, config.inference_repr)?;
    index.save(&a.out.join("index.json"))?;
    println!(
        "{}",
        json!({"model": a.out.join("model.json"), "index": a.out.join("index.json"), "sha256": model.hash()?})
    );
    Ok(())
}

fn mine(a: &MineArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    announce("mine-negatives", a, training_seed(&model))?;
    let bank = ScenarioBank::load(&a.bank)?;
    let samples = load_dataset(&a.train)?;
    let hash = model.hash()?;
    let cached = match &a.index {
        Some(p) if p.exists() => {
            let ix = ScenarioIndex::load(p)?;
            (ix.check_fresh(&hash, false).is_ok() && ix.check_bank(&bank).is_ok()).then_some(ix)
        }
        _ => None,
    };
    let index = match cached {
        Some(ix) => ix,
        None => build_index(&model, &bank, model.config.inference_repr)?,
    };
    let negatives = mine_model_negatives(&model, &index, &samples, &bank, a.k)?;
    negatives.save(&a.out)?;
    println!("{}", json!({"examples": negatives.len()}));
    Ok(())
}

fn build_index_cmd(a: &BuildIndexArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let kind: ReprKind = match &a.repr {
        Some(r) => r.parse()?,
        None => model.config.inference_repr,
    };
    announce("build-index", &json!({"args": a, "repr": kind}), training_seed(&model))?;
    let bank = ScenarioBank::load(&a.bank)?;
    let index = build_index(&model, &bank, kind)?;
    index.save(&a.out)?;
    println!("{}", json!({"scenarios": index.len(), "repr": kind}));
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mode: EvalMode = a.mode.parse()?;
    let loaded = Loaded::open(&a.artifacts)?;
    announce("eval", a, training_seed(&loaded.model))?;
    let parser = loaded.parser(a.artifacts.allow_stale)?;
    let samples = load_dataset(&a.data)?;
    let report = evaluate(&parser, &samples, mode, a.top_n, &a.unsupported_prefix)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &a.out {
        write_text(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn parse(a: &ParseArgs) -> Result<()> {
    let loaded = Loaded::open(&a.artifacts)?;
    announce("parse", a, training_seed(&loaded.model))?;
    let parser = loaded.parser(a.artifacts.allow_stale)?;
    if a.fill_all {
        let r = parser.parse_one_fill_all(&a.utterance, a.top_n)?;
        println!("{}", serde_json::to_string(&r)?);
        return Ok(());
    }
    let r = parser.parse_one(&a.utterance, a.top_n)?;
    if a.json {
        println!("{}", serde_json::to_string(&r)?);
    } else {
        println!("{}", r.frame);
    }
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    let loaded = Loaded::open(&a.artifacts)?;
    announce("export-embeddings", a, training_seed(&loaded.model))?;
    let parser = loaded.parser(a.artifacts.allow_stale)?;
    let samples = load_dataset(&a.data)?;
    export_embeddings(&parser, &samples, &a.out)?;
    println!("{}", json!({"rows": samples.len(), "out": a.out}));
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let loaded = Loaded::open(&a.artifacts)?;
    announce("serve", a, training_seed(&loaded.model))?;
    let service = Service::new(
        Arc::new(loaded.model),
        loaded.bank,
        loaded.index,
        a.artifacts.allow_stale,
    )?;
    match &a.tcp {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("{}", json!({"listening": listener.local_addr()?.to_string()}));
            Arc::new(service).serve_tcp(listener)?;
        }
        None => {
            let stdin = io::stdin();
            service.serve_lines(stdin.lock(), BufWriter::new(io::stdout().lock()))?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::BuildBank(a) => build_bank(a),
        Command::Train(a) => train(a),
        Command::MineNegatives(a) => mine(a),
        Command::BuildIndex(a) => build_index_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Parse(a) => parse(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::Serve(a) => serve(a),
    }
}

fn error_line(e: &anyhow::Error) -> serde_json::Value {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<scenparse_core::Error>())
        .map_or("cli", scenparse_core::Error::kind);
    json!({"error": {"kind": kind, "message": format!("{e:#}")}})
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
