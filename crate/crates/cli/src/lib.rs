//! The `spt` command line: toy setup, training, evaluation, decoding,
//! analysis, parameter counting and ablation runs.

pub mod workflow;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use spt_core::backbone::BackboneConfig;
use spt_core::corpus::{Corpus, SlotRegistry};
use spt_core::decode::greedy_decode;
use spt_core::eval::write_predictions;
use spt_core::instance::{assemble, Ablation};
use spt_core::prompt_bank::{parameter_count_for, PromptBank};
use spt_core::tokenizer::Tokenizer;
use spt_core::toy::{self, PretrainConfig, ToyData, TOY_SEED};
use spt_core::trainer::{Checkpoint, TrainConfig};

use workflow::Inputs;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(spt_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(spt_core::Error::Numerical(_)) => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_VALIDATION,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<spt_core::Error> for CliError {
    fn from(e: spt_core::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "spt", version, about = "Prompt-tuned dialogue state tracking over a frozen transformer")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON mirroring the training config).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for decoding; falls back to SPT_THREADS, then all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

/// Input files, by default looked up in `--data`.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory written by `toy-setup`.
    #[arg(long, default_value = ".")]
    pub data: PathBuf,
    /// Slot registry (default: registry.json in --data).
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Tokenizer vocabulary (default: vocab.json).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Frozen backbone weights (default: backbone.sptw).
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Restrict to one target domain.
    #[arg(long)]
    pub domain: Option<String>,
}

impl DataArgs {
    fn file(&self, explicit: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
        let path = explicit.clone().unwrap_or_else(|| self.data.join(name));
        existing(path)
    }

    fn inputs(&self) -> CliResult<(Inputs, Vec<PathBuf>)> {
        let paths = vec![
            self.file(&self.registry, "registry.json")?,
            self.file(&self.vocab, "vocab.json")?,
            self.file(&self.backbone, "backbone.sptw")?,
        ];
        Ok((Inputs::load(&paths[0], &paths[1], &paths[2])?, paths))
    }

    fn corpus(&self, explicit: &Option<PathBuf>, name: &str) -> CliResult<(Corpus, PathBuf)> {
        let path = self.file(explicit, name)?;
        Ok((Corpus::load(&path)?, path))
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Training corpus (default: train.json).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Dev corpus for checkpoint selection (default: dev.json).
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Task prompt tokens per task; overrides the config file.
    #[arg(long)]
    pub k: Option<usize>,
    /// Overrides the config file.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Drift penalty weight; overrides the config file.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Train on a seeded subset of this many instances.
    #[arg(long)]
    pub instances: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the toy world, its corpora and the pretrained toy backbone.
    ToySetup {
        /// Re-run backbone pretraining instead of using the shipped weights.
        #[arg(long)]
        pretrain: bool,
    },
    /// Fit prompt and segment embeddings; writes checkpoint and log.
    Train(TrainArgs),
    /// Decode a corpus; writes predictions and evaluation reports.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus to evaluate (default: test.json in --data).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Print one generation for a dialogue turn and slot.
    Decode {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus holding the dialogue (default: test.json).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Dialogue id.
        #[arg(long)]
        dialogue: String,
        /// Zero-based turn index.
        #[arg(long)]
        turn: usize,
        /// Slot key, `domain-name`.
        #[arg(long)]
        slot: String,
    },
    /// Most-changed prompt rows and their closest vocabulary tokens.
    Analyze {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rows to list.
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Closest vocabulary tokens per row.
        #[arg(long, default_value_t = 5)]
        neighbors: usize,
    },
    /// Trainable parameter count for a registry domain and k.
    CountParams {
        /// Registry file (default: the bundled MultiWOZ registry).
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        domain: String,
        /// Task prompt tokens per task.
        #[arg(long)]
        k: usize,
        /// Embedding width.
        #[arg(long)]
        d_model: usize,
    },
    /// Train and evaluate with segments dropped or reiteration disabled.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// Ablations applied together in one run (repeatable).
        #[arg(long, value_parser = parse_ablation)]
        drop: Vec<Ablation>,
        /// Run the full model and every single ablation instead.
        #[arg(long)]
        matrix: bool,
        /// Evaluation corpus (default: test.json).
        #[arg(long)]
        test: Option<PathBuf>,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

fn existing(path: PathBuf) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| spt_core::Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Run {
    command: String,
    common: Common,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
}

impl Run {
    fn out_dir(&self, default: &str) -> CliResult<PathBuf> {
        let dir = self.common.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir).map_err(|e| spt_core::Error::Io { path: dir.clone(), source: e })?;
        Ok(dir)
    }

    fn write(&mut self, path: PathBuf, contents: impl AsRef<[u8]>) -> CliResult<()> {
        fs::write(&path, contents).map_err(|e| spt_core::Error::Io { path: path.clone(), source: e })?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish(self, dir: Option<&Path>) -> CliResult<()> {
        let Some(dir) = dir else { return Ok(()) };
        let mut inputs = BTreeMap::new();
        for p in self.inputs.iter().chain(&self.common.config) {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
        }
        let manifest = RunManifest {
            command: self.command,
            config_path: self.common.config.as_ref().map(|p| p.display().to_string()),
            inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            seed: self.seed,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
        };
        let path = dir.join("run_manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(spt_core::Error::from)?;
        fs::write(&path, json).map_err(|e| spt_core::Error::Io { path, source: e })?;
        Ok(())
    }
}

/// Thread cap: flag, then SPT_THREADS, then available parallelism.
pub fn resolve_threads(flag: Option<usize>) -> CliResult<usize> {
    if let Some(n) = flag {
        return if n == 0 { Err(CliError::Usage("--threads must be at least 1".into())) } else { Ok(n) };
    }
    if let Ok(v) = std::env::var("SPT_THREADS") {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("SPT_THREADS must be a positive integer, got `{v}`"))),
        };
    }
    Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Config file, then flags.
pub fn resolve_config(common: &Common, args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c = match &common.config {
        Some(p) => TrainConfig::load(&existing(p.clone())?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if args.k.is_some() {
        c.k = args.k;
    }
    if let Some(e) = args.max_epochs {
        c.max_epochs = e;
    }
    if let Some(l) = args.lambda {
        c.lambda = l;
    }
    c.validate()?;
    Ok(c)
}

fn resolve_k(config: &TrainConfig, domain: Option<&str>) -> CliResult<usize> {
    match (config.k, domain) {
        (Some(k), _) => Ok(k),
        (None, Some(d)) => Ok(config.resolve_k(d)?),
        (None, None) => Err(CliError::Usage("k is required when training on all domains (--k or config)".into())),
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let name = match &cli.command {
        Command::ToySetup { .. } => "toy-setup",
        Command::Train(_) => "train",
        Command::Eval { .. } => "eval",
        Command::Decode { .. } => "decode",
        Command::Analyze { .. } => "analyze",
        Command::CountParams { .. } => "count-params",
        Command::Ablate { .. } => "ablate",
    };
    let mut run = Run {
        command: name.to_owned(),
        common: cli.common.clone(),
        started: Instant::now(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        seed: cli.common.seed,
    };
    let threads = resolve_threads(cli.common.threads)?;
    match cli.command {
        Command::ToySetup { pretrain } => toy_setup(&mut run, pretrain),
        Command::Train(args) => train_cmd(run, &args, threads),
        Command::Eval { data, checkpoint, corpus } => eval_cmd(run, &data, checkpoint, &corpus, threads),
        Command::Decode { data, checkpoint, corpus, dialogue, turn, slot } => {
            decode_cmd(run, &data, checkpoint, &corpus, &dialogue, turn, &slot)
        }
        Command::Analyze { data, checkpoint, top, neighbors } => analyze_cmd(run, &data, checkpoint, top, neighbors),
        Command::CountParams { registry, domain, k, d_model } => count_params(run, registry, &domain, k, d_model),
        Command::Ablate { train, drop, matrix, test } => ablate_cmd(run, &train, drop, matrix, &test, threads),
    }
    .and(Ok(()))
}

fn toy_setup(run: &mut Run, pretrain: bool) -> CliResult<()> {
    let seed = run.common.seed.unwrap_or(TOY_SEED);
    run.seed = Some(seed);
    let dir = run.out_dir("toy")?;
    let data = ToyData::generate(seed)?;
    let (backbone, report) = if pretrain {
        let config = PretrainConfig { seed, ..PretrainConfig::default() };
        let (w, r) = toy::pretrain_toy_backbone(&data.world, BackboneConfig::toy(), &config, |step, ce| {
            eprintln!("pretrain step {step}: CE {ce:.4}")
        })?;
        (w, Some(r))
    } else {
        (toy::shipped_backbone()?, None)
    };
    let write_json = |run: &mut Run, name: &str, json: String| run.write(dir.join(name), json);
    write_json(run, "registry.json", data.registry.to_json())?;
    write_json(run, "train.json", data.train.to_json())?;
    write_json(run, "dev.json", data.dev.to_json())?;
    write_json(run, "test.json", data.test.to_json())?;
    write_json(run, "world.json", serde_json::to_string_pretty(&data.world).map_err(spt_core::Error::from)?)?;
    let vocab = dir.join("vocab.json");
    data.tokenizer.save(&vocab)?;
    run.outputs.push(vocab);
    let weights = dir.join("backbone.sptw");
    backbone.save(&weights)?;
    run.outputs.push(weights);
    if let Some(r) = report {
        let shipped = toy::shipped_backbone()?.content_hash();
        eprintln!(
            "pretraining: final CE {:.4}, held-out CE {:.4}, answer accuracy {:.3}; {} shipped weights",
            r.final_ce,
            r.heldout_ce,
            r.heldout_answer_accuracy,
            if r.content_hash == shipped { "matches" } else { "differs from" }
        );
        write_json(run, "pretrain_report.json", serde_json::to_string_pretty(&r).map_err(spt_core::Error::from)?)?;
    }
    println!("toy setup written to {} (backbone {})", dir.display(), backbone.content_hash());
    let r = std::mem::replace(run, placeholder());
    r.finish(Some(&dir))
}

fn placeholder() -> Run {
    Run {
        command: String::new(),
        common: Common { config: None, seed: None, out: None, threads: None },
        started: Instant::now(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        seed: None,
    }
}

struct Trained {
    inputs: Inputs,
    outcome: spt_core::trainer::FitOutcome<f32>,
    train_corpus: Corpus,
}

fn train_into(run: &mut Run, args: &TrainArgs, config: &TrainConfig, dir: &Path, threads: usize) -> CliResult<Trained> {
    let (inputs, paths) = args.data.inputs()?;
    let (train_corpus, train_path) = args.data.corpus(&args.train, "train.json")?;
    let (dev_corpus, dev_path) = args.data.corpus(&args.dev, "dev.json")?;
    run.inputs.extend(paths);
    run.inputs.extend([train_path, dev_path]);
    let domain = args.data.domain.as_deref();
    let k = resolve_k(config, domain)?;
    let mut train = workflow::slot_instances(&train_corpus, &inputs.registry, domain)?;
    if let Some(n) = args.instances {
        train = toy::sample_instances(&train, n, config.seed)?;
    }
    let dev = workflow::slot_instances(&dev_corpus, &inputs.registry, domain)?;
    let mut log = Vec::new();
    let outcome = workflow::train(&inputs, &train, &dev, config, k, threads, Some(&mut log))?;
    run.write(dir.join("train_log.jsonl"), log)?;
    let ckpt = dir.join("checkpoint.sptw");
    outcome.checkpoint.save(&ckpt)?;
    run.outputs.push(ckpt);
    run.write(dir.join("config.json"), config.to_json())?;
    Ok(Trained { inputs, outcome, train_corpus })
}

fn train_cmd(mut run: Run, args: &TrainArgs, threads: usize) -> CliResult<()> {
    let config = resolve_config(&run.common, args)?;
    run.seed = Some(config.seed);
    let dir = run.out_dir("spt-train")?;
    let t = train_into(&mut run, args, &config, &dir, threads)?;
    let c = &t.outcome.checkpoint;
    println!(
        "best epoch {} of {} (dev JGA {:.4}); checkpoint in {}",
        c.epoch,
        t.outcome.history.len(),
        c.best_dev_jga,
        dir.display()
    );
    run.finish(Some(&dir))
}

fn load_checkpoint(run: &mut Run, inputs: &Inputs, path: PathBuf) -> CliResult<Checkpoint<f32>> {
    let path = existing(path)?;
    let (ckpt, _) = Checkpoint::<f32>::load(&path)?;
    workflow::check_compatible(inputs, &ckpt.bank)?;
    run.inputs.push(path);
    Ok(ckpt)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_into(
    run: &mut Run,
    inputs: &Inputs,
    bank: &PromptBank<f32>,
    config: &TrainConfig,
    corpus: &Corpus,
    domain: Option<&str>,
    train: Option<&Corpus>,
    dir: &Path,
    threads: usize,
) -> CliResult<BTreeMap<String, spt_core::eval::EvalReport>> {
    let instances = workflow::slot_instances(corpus, &inputs.registry, domain)?;
    let preds = workflow::predict(inputs, bank, &instances, config.assembly_options(), threads)?;
    let pred_path = dir.join("predictions.jsonl");
    write_predictions(&pred_path, &preds)?;
    run.outputs.push(pred_path);
    let reports = workflow::reports(&preds, &inputs.registry, train)?;
    run.write(dir.join("eval_report.json"), serde_json::to_string_pretty(&reports).map_err(spt_core::Error::from)?)?;
    Ok(reports)
}

fn eval_cmd(
    mut run: Run,
    data: &DataArgs,
    checkpoint: PathBuf,
    corpus: &Option<PathBuf>,
    threads: usize,
) -> CliResult<()> {
    let (inputs, paths) = data.inputs()?;
    run.inputs.extend(paths);
    let ckpt = load_checkpoint(&mut run, &inputs, checkpoint)?;
    let (test, test_path) = data.corpus(corpus, "test.json")?;
    run.inputs.push(test_path);
    let train = data.file(&None, "train.json").ok().map(|p| Corpus::load(&p)).transpose()?;
    let dir = run.out_dir("spt-eval")?;
    let reports = evaluate_into(
        &mut run,
        &inputs,
        &ckpt.bank,
        &ckpt.config,
        &test,
        data.domain.as_deref(),
        train.as_ref(),
        &dir,
        threads,
    )?;
    for r in reports.values() {
        println!("{}", r.to_table());
    }
    run.finish(Some(&dir))
}

fn decode_cmd(
    mut run: Run,
    data: &DataArgs,
    checkpoint: PathBuf,
    corpus: &Option<PathBuf>,
    dialogue: &str,
    turn: usize,
    slot: &str,
) -> CliResult<()> {
    let (inputs, paths) = data.inputs()?;
    run.inputs.extend(paths);
    let ckpt = load_checkpoint(&mut run, &inputs, checkpoint)?;
    let (corpus, corpus_path) = data.corpus(corpus, "test.json")?;
    run.inputs.push(corpus_path);
    let (domain, name) =
        slot.split_once('-').ok_or_else(|| CliError::Usage(format!("slot `{slot}` is not of the form domain-name")))?;
    let spec =
        inputs.registry.get(domain, name).ok_or_else(|| CliError::Usage(format!("registry has no slot `{slot}`")))?;
    let d = corpus
        .dialogues
        .iter()
        .find(|d| d.id == dialogue)
        .ok_or_else(|| CliError::Usage(format!("corpus has no dialogue `{dialogue}`")))?;
    let inst = spt_core::corpus::make_instances(d, &inputs.registry, domain)
        .into_iter()
        .find(|i| i.context.turn == turn && i.slot.name == spec.name)
        .ok_or_else(|| CliError::Usage(format!("dialogue `{dialogue}` has no turn {turn}")))?;
    let opts = ckpt.config.assembly_options();
    let prompt = assemble(
        &inst.context,
        spec,
        None,
        &ckpt.bank,
        &inputs.tokenizer,
        inputs.backbone.config.max_positions,
        &opts,
    )?;
    let ids = greedy_decode(&prompt, &ckpt.bank, &inputs.backbone, inputs.tokenizer.eos_id(), opts.max_new)?;
    let text = inputs.tokenizer.decode(&ids);
    println!("{text}");
    if let Some(dir) = run.common.out.clone() {
        fs::create_dir_all(&dir).map_err(|e| spt_core::Error::Io { path: dir.clone(), source: e })?;
        run.write(dir.join("generation.txt"), format!("{text}\n"))?;
        return run.finish(Some(&dir));
    }
    Ok(())
}

fn analyze_cmd(mut run: Run, data: &DataArgs, checkpoint: PathBuf, top: usize, neighbors: usize) -> CliResult<()> {
    let (inputs, paths) = data.inputs()?;
    run.inputs.extend(paths);
    let ckpt = load_checkpoint(&mut run, &inputs, checkpoint)?;
    let report = ckpt.bank.analyze(&inputs.backbone, &inputs.tokenizer, top, neighbors);
    let dir = run.out_dir("spt-analysis")?;
    let text = report.to_text();
    run.write(dir.join("analysis.txt"), &text)?;
    run.write(dir.join("analysis.json"), serde_json::to_string_pretty(&report).map_err(spt_core::Error::from)?)?;
    print!("{text}");
    run.finish(Some(&dir))
}

/// Trainable parameters for `domain` of `registry` at `k` prompt tokens per task.
pub fn count_parameters(registry: &SlotRegistry, domain: &str, k: usize, d_model: usize) -> spt_core::Result<usize> {
    let slots = registry.domain_slots(domain);
    if slots.is_empty() {
        return Err(spt_core::Error::invalid(format!("registry has no slots for domain `{domain}`")));
    }
    if k == 0 || d_model == 0 {
        return Err(spt_core::Error::invalid("k and d_model must be at least 1"));
    }
    let domain_registry = registry.for_domain(domain)?;
    let tok = spt_core::tokenizer::WordTokenizer::from_texts(
        domain_registry.slots().iter().flat_map(|s| [spt_core::instance::prefix_text(s), s.question.clone()]),
    );
    let rows = spt_core::prompt_bank::prompt_row_count(&domain_registry, k, &tok)?;
    Ok(parameter_count_for(rows, d_model))
}

fn count_params(mut run: Run, registry: Option<PathBuf>, domain: &str, k: usize, d_model: usize) -> CliResult<()> {
    let reg = match registry {
        Some(p) => {
            let p = existing(p)?;
            run.inputs.push(p.clone());
            SlotRegistry::load(&p)?
        }
        None => SlotRegistry::default_multiwoz(),
    };
    let n = count_parameters(&reg, domain, k, d_model)?;
    println!("{n}");
    if let Some(dir) = run.common.out.clone() {
        fs::create_dir_all(&dir).map_err(|e| spt_core::Error::Io { path: dir.clone(), source: e })?;
        run.write(dir.join("param_count.txt"), format!("{n}\n"))?;
        return run.finish(Some(&dir));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    name: String,
    ablations: Vec<Ablation>,
    best_epoch: usize,
    best_dev_jga: f64,
    reports: BTreeMap<String, spt_core::eval::EvalReport>,
}

/// Run names and ablation sets: the full model, then each single ablation.
pub fn ablation_matrix() -> Vec<(String, Vec<Ablation>)> {
    let mut rows = vec![("full".to_owned(), Vec::new())];
    for a in Ablation::ALL {
        rows.push((format!("no-{a}"), vec![a]));
    }
    rows
}

fn ablate_cmd(
    mut run: Run,
    args: &TrainArgs,
    drop: Vec<Ablation>,
    matrix: bool,
    test: &Option<PathBuf>,
    threads: usize,
) -> CliResult<()> {
    if matrix && !drop.is_empty() {
        return Err(CliError::Usage("--matrix and --drop are mutually exclusive".into()));
    }
    let base = resolve_config(&run.common, args)?;
    run.seed = Some(base.seed);
    let rows = if matrix {
        ablation_matrix()
    } else {
        let name = drop.iter().map(|a| format!("no-{a}")).collect::<Vec<_>>().join("+");
        vec![(if name.is_empty() { "full".to_owned() } else { name }, drop)]
    };
    let dir = run.out_dir("spt-ablate")?;
    let (test_corpus, test_path) = args.data.corpus(test, "test.json")?;
    run.inputs.push(test_path);
    let mut summary = Vec::new();
    for (name, ablations) in rows {
        let mut config = base.clone();
        for a in &ablations {
            if !config.ablations.contains(a) {
                config.ablations.push(*a);
            }
        }
        let sub = dir.join(&name);
        fs::create_dir_all(&sub).map_err(|e| spt_core::Error::Io { path: sub.clone(), source: e })?;
        let t = train_into(&mut run, args, &config, &sub, threads)?;
        let reports = evaluate_into(
            &mut run,
            &t.inputs,
            &t.outcome.checkpoint.bank,
            &config,
            &test_corpus,
            args.data.domain.as_deref(),
            Some(&t.train_corpus),
            &sub,
            threads,
        )?;
        for (domain, r) in &reports {
            println!("{name:<18} {domain:<12} JGA {:.4}  SA {:.4}", r.jga, r.slot_accuracy);
        }
        summary.push(AblationRow {
            name,
            ablations,
            best_epoch: t.outcome.checkpoint.epoch,
            best_dev_jga: t.outcome.checkpoint.best_dev_jga,
            reports,
        });
    }
    run.inputs.sort();
    run.inputs.dedup();
    run.write(
        dir.join("ablation_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(spt_core::Error::from)?,
    )?;
    run.finish(Some(&dir))
}
