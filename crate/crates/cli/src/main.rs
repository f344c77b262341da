//! Command-line front end for the octofunc pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use octofunc::agent::{
    benchmark_latency, dispatch, evaluate, record_outputs, HandlerTable, RecordedOutputs,
};
use octofunc::decoder::{parse_text, CallDecoder};
use octofunc::model::{Constraint, DecodeMode, GenerationConfig, ModelConfig};
use octofunc::numerics::{Rng, SeedStream};
use octofunc::registry::{import_declarations, CallStyle, Registry};
use octofunc::training::{
    prompt_tokens, retrieval_top1, stage_a_pretrain, stage_b_contrastive, stage_c_align,
    stage_d_functional, stage_e_rl, Checkpoint, PairExample, RewardConfig, RlSettings, Stage,
    StageConfig, StageReport, TaskItem, TextExample,
};
use octofunc::world::{
    build_datasets, caption, caption_pairs, generate_scene, lm_texts, pixels_to_f32, read_jsonl,
    tasks, DatasetConfig, DatasetManifest, Language, PairRecord, Purpose, TaskRecord, TextRecord,
    PIXEL_BYTES,
};

#[derive(Parser)]
#[command(
    name = "octofunc",
    version,
    about = "Train and run a small on-device multimodal function-calling model"
)]
struct Cli {
    /// Base seed; the OCTOFUNC_SEED environment variable takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output format for reports.
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Name,
    Token,
}

impl From<Style> for CallStyle {
    fn from(s: Style) -> Self {
        match s {
            Style::Name => CallStyle::Name,
            Style::Token => CallStyle::Token,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse Python-style function declarations into a schema manifest.
    ImportSchemas {
        /// Declarations text file.
        #[arg(long)]
        from: PathBuf,
        /// Manifest to write (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic corpora, or a single scene image.
    GenData(GenDataArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Generate a call for one image and query.
    Infer(InferArgs),
    /// Score a checkpoint or a recorded-output file on the held-out tasks.
    Eval(EvalArgs),
    /// Measure generation latency with and without the image.
    Bench(BenchArgs),
    /// Print a checkpoint's configuration and provenance.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args)]
struct ManifestArg {
    /// Schema manifest; defaults to the ten bundled demo functions.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl ManifestArg {
    fn load(&self) -> Result<Registry> {
        let Some(path) = &self.manifest else {
            return Ok(Registry::demo());
        };
        let mut reg = Registry::load_manifest(path)?;
        reg.freeze_standard()?;
        Ok(reg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (or image file with --scene).
    #[arg(long)]
    out: PathBuf,
    /// Write the raw 32x32x3 bytes of the scene with this seed instead of corpora.
    #[arg(long)]
    scene: Option<u64>,
    #[arg(long, default_value_t = DatasetConfig::default().lm_lines)]
    lm_lines: usize,
    #[arg(long, default_value_t = DatasetConfig::default().contrastive_pairs)]
    contrastive_pairs: usize,
    #[arg(long, default_value_t = DatasetConfig::default().alignment_pairs)]
    alignment_pairs: usize,
    #[arg(long, default_value_t = DatasetConfig::default().functional_tasks)]
    functional_tasks: usize,
    #[arg(long, default_value_t = DatasetConfig::default().rl_prompts)]
    rl_prompts: usize,
    #[arg(long, default_value_t = DatasetConfig::default().eval_tasks)]
    eval_tasks: usize,
    #[arg(long, default_value_t = DatasetConfig::default().eval_pairs)]
    eval_pairs: usize,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage to run.
    #[arg(long, value_parser = parse_stage)]
    stage: Stage,
    /// Input checkpoint; stage A starts from a fresh model when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory from gen-data; corpora are generated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Write one JSON metrics record per logged step to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    log_every: Option<usize>,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Raw 32x32x3 image bytes.
    #[arg(
        long,
        conflicts_with = "scene_seed",
        required_unless_present = "scene_seed"
    )]
    image: Option<PathBuf>,
    /// Use the synthetic scene with this seed as the image.
    #[arg(long)]
    scene_seed: Option<u64>,
    #[arg(long)]
    query: String,
    #[arg(long, value_enum, default_value_t = Style::Name)]
    style: Style,
    /// Grammar-masked decoding.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    constrain: bool,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long, default_value_t = 128)]
    max_new_tokens: usize,
    /// Also run the call through the offline mock handler.
    #[arg(long)]
    run: bool,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to run live.
    #[arg(
        long,
        conflicts_with = "recorded",
        required_unless_present = "recorded"
    )]
    ckpt: Option<PathBuf>,
    /// Recorded outputs, JSON lines of {example_id, output_text}.
    #[arg(long)]
    recorded: Option<PathBuf>,
    /// Dataset directory holding eval.jsonl; generated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out tasks to generate when --data is omitted.
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    constrain: bool,
    #[arg(long, default_value_t = 128)]
    max_new_tokens: usize,
    /// Save the live outputs in recorded-output form.
    #[arg(long)]
    record_out: Option<PathBuf>,
    #[command(flatten)]
    manifest: ManifestArg,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    constrain: bool,
    #[arg(long, default_value_t = 128)]
    max_new_tokens: usize,
    #[command(flatten)]
    manifest: ManifestArg,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage `{s}`, expected one of A, B, C, D, E"))
}

fn seed(cli_seed: u64) -> Result<u64> {
    match std::env::var("OCTOFUNC_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("OCTOFUNC_SEED={v:?} is not an unsigned integer")),
        Err(_) => Ok(cli_seed),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

/// A flag combination clap cannot express; reported with the usage exit code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = seed(cli.seed)?;
    let format = cli.format;
    match cli.command {
        Command::ImportSchemas { from, out } => import_schemas(&from, &out),
        Command::GenData(a) => gen_data(a, seed),
        Command::Train(a) => train(a, seed, format),
        Command::Infer(a) => infer(a, seed),
        Command::Eval(a) => eval(a, seed, format),
        Command::Bench(a) => bench(a, seed, format),
        Command::InspectCkpt { ckpt } => inspect(&ckpt, format),
    }
}

fn import_schemas(from: &Path, out: &Path) -> Result<()> {
    let text =
        std::fs::read_to_string(from).with_context(|| format!("reading {}", from.display()))?;
    let mut reg = Registry::new();
    for schema in import_declarations(&text)? {
        reg.register(schema)?;
    }
    std::fs::write(out, reg.to_manifest()).with_context(|| format!("writing {}", out.display()))?;
    println!("imported {} schemas into {}", reg.len(), out.display());
    Ok(())
}

fn gen_data(a: GenDataArgs, seed: u64) -> Result<()> {
    if let Some(scene_seed) = a.scene {
        let scene = generate_scene(scene_seed);
        std::fs::write(&a.out, &scene.pixels)
            .with_context(|| format!("writing {}", a.out.display()))?;
        println!("{}", caption(&scene, Language::En));
        return Ok(());
    }
    let registry = a.manifest.load()?;
    let config = DatasetConfig {
        seed,
        lm_lines: a.lm_lines,
        contrastive_pairs: a.contrastive_pairs,
        alignment_pairs: a.alignment_pairs,
        functional_tasks: a.functional_tasks,
        rl_prompts: a.rl_prompts,
        eval_tasks: a.eval_tasks,
        eval_pairs: a.eval_pairs,
    };
    let manifest = build_datasets(&config, &a.out, &registry)?;
    for (file, n) in &manifest.files {
        println!("{n:>7}  {}", a.out.join(file).display());
    }
    Ok(())
}

fn data_file(dir: &Path, name: &str) -> PathBuf {
    DatasetManifest::path(dir, name)
}

fn text_corpus(data: Option<&Path>, seed: u64, registry: &Registry) -> Result<Vec<TextExample>> {
    let records: Vec<TextRecord> = match data {
        Some(d) => read_jsonl(&data_file(d, DatasetManifest::LM))?,
        None => lm_texts(seed, DatasetConfig::default().lm_lines, registry)?,
    };
    Ok(records.iter().map(TextExample::from).collect())
}

fn pair_corpus(
    data: Option<&Path>,
    file: &str,
    purpose: Purpose,
    n: usize,
    seed: u64,
) -> Result<Vec<PairExample>> {
    match data {
        Some(d) => {
            let records: Vec<PairRecord> = read_jsonl(&data_file(d, file))?;
            Ok(records
                .iter()
                .map(PairExample::from_record)
                .collect::<Result<_, _>>()?)
        }
        None => Ok(caption_pairs(seed, purpose, n)
            .iter()
            .map(|(s, l)| PairExample::from_scene(s, *l))
            .collect()),
    }
}

fn task_corpus(
    data: Option<&Path>,
    file: &str,
    purpose: Purpose,
    n: usize,
    seed: u64,
    registry: &Registry,
    ckpt: &Checkpoint,
) -> Result<Vec<TaskItem>> {
    match data {
        Some(d) => {
            let records: Vec<TaskRecord> = read_jsonl(&data_file(d, file))?;
            Ok(records
                .iter()
                .map(|r| TaskItem::from_record(r, registry, &ckpt.vocab))
                .collect::<Result<_, _>>()?)
        }
        None => Ok(tasks(seed, purpose, n, registry)?
            .iter()
            .enumerate()
            .map(|(i, t)| {
                TaskItem::from_example(
                    format!("{}-{i}", file.trim_end_matches(".jsonl")),
                    t,
                    registry,
                    &ckpt.vocab,
                )
            })
            .collect()),
    }
}

fn train(a: TrainArgs, seed: u64, format: Format) -> Result<()> {
    let registry = a.manifest.load()?;
    let mut ckpt = match &a.ckpt {
        Some(p) => Checkpoint::load(p)?,
        None if a.stage == Stage::A => Checkpoint::initial(ModelConfig::default(), seed)?,
        None => return Err(UsageError(format!("stage {} needs --ckpt", a.stage)).into()),
    };
    let mut cfg = StageConfig::default_for(a.stage);
    cfg.seed = seed;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.log_every {
        cfg.log_every = v;
    }
    let defaults = DatasetConfig::default();
    let data = a.data.as_deref();
    let report = match a.stage {
        Stage::A => stage_a_pretrain(&mut ckpt, &text_corpus(data, seed, &registry)?, &cfg)?,
        Stage::B => {
            let pairs = pair_corpus(
                data,
                DatasetManifest::CONTRASTIVE,
                Purpose::Contrastive,
                defaults.contrastive_pairs,
                seed,
            )?;
            stage_b_contrastive(&mut ckpt, &pairs, &cfg)?
        }
        Stage::C => {
            let pairs = pair_corpus(
                data,
                DatasetManifest::ALIGNMENT,
                Purpose::Alignment,
                defaults.alignment_pairs,
                seed,
            )?;
            stage_c_align(&mut ckpt, &pairs, &cfg)?
        }
        Stage::D => {
            if !ckpt.vocab.is_extended() {
                ckpt.extend_vocabulary(&registry, seed)?;
            }
            let items = task_corpus(
                data,
                DatasetManifest::FUNCTIONAL,
                Purpose::Functional,
                defaults.functional_tasks,
                seed,
                &registry,
                &ckpt,
            )?;
            stage_d_functional(&mut ckpt, &items, &registry, &cfg)?
        }
        Stage::E => {
            let items = task_corpus(
                data,
                DatasetManifest::RL,
                Purpose::Rl,
                defaults.rl_prompts,
                seed,
                &registry,
                &ckpt,
            )?;
            stage_e_rl(
                &mut ckpt,
                &items,
                &registry,
                &cfg,
                &RewardConfig::default(),
                &RlSettings::default(),
            )?
        }
    };
    ckpt.save(&a.out)?;
    report_training(&report, a.metrics.as_deref(), format)?;
    if a.stage == Stage::B {
        let gallery = pair_corpus(
            data,
            DatasetManifest::EVAL_PAIRS,
            Purpose::EvalPairs,
            64,
            seed,
        )?;
        let gallery = &gallery[..gallery.len().min(64)];
        println!(
            "held-out retrieval top-1 over {} pairs: {:.3}",
            gallery.len(),
            retrieval_top1(&ckpt.model, gallery)?
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn report_training(report: &StageReport, metrics: Option<&Path>, format: Format) -> Result<()> {
    if let Some(path) = metrics {
        let mut lines = String::new();
        for m in &report.metrics {
            lines.push_str(&serde_json::to_string(m)?);
            lines.push('\n');
        }
        std::fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?;
    }
    for m in &report.metrics {
        match format {
            Format::Json => print_json(m)?,
            Format::Table => match m.reward {
                Some(r) => println!(
                    "stage {} step {:>5}  loss {:.4}  lr {:.2e}  reward {:.3}",
                    m.stage, m.step, m.loss, m.lr, r
                ),
                None => println!(
                    "stage {} step {:>5}  loss {:.4}  lr {:.2e}",
                    m.stage, m.step, m.loss, m.lr
                ),
            },
        }
    }
    if format == Format::Table {
        println!("stage {} finished in {:.1}s", report.stage, report.seconds);
    }
    Ok(())
}

fn generation_config(
    constrain: bool,
    temperature: Option<f32>,
    max_new_tokens: usize,
) -> GenerationConfig {
    GenerationConfig {
        mode: temperature.map_or(DecodeMode::Greedy, |t| DecodeMode::Sample {
            temperature: t,
        }),
        max_new_tokens,
        constraint: if constrain {
            Constraint::GrammarMask
        } else {
            Constraint::Off
        },
    }
}

fn load_extended(path: &Path, registry: &Registry) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if !ckpt.is_extended_for(registry) {
        bail!(
            "checkpoint {} has no functional tokens for this registry; run stage D first",
            path.display()
        );
    }
    Ok(ckpt)
}

fn infer(a: InferArgs, seed: u64) -> Result<()> {
    let registry = a.manifest.load()?;
    let ckpt = load_extended(&a.ckpt, &registry)?;
    let bytes = match (&a.image, a.scene_seed) {
        (Some(p), _) => std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(s)) => generate_scene(s).pixels,
        (None, None) => unreachable!("clap requires one image source"),
    };
    if bytes.len() != PIXEL_BYTES {
        bail!(
            "image holds {} bytes, expected {PIXEL_BYTES} (32x32 RGB)",
            bytes.len()
        );
    }
    let gen = generation_config(a.constrain, a.temperature, a.max_new_tokens);
    let decoder = CallDecoder::constrained(&ckpt.vocab, &registry);
    let mut rng = Rng::new(seed, SeedStream::Sampling);
    let out = ckpt.model.generate(
        Some(&pixels_to_f32(&bytes)),
        &prompt_tokens(&a.query),
        &gen,
        Some(&decoder),
        &mut rng,
    )?;
    let text = ckpt.vocab.decode(&out)?;
    let call = parse_text(&text, &ckpt.vocab, &registry)
        .map_err(|e| anyhow!("model output {text:?} is not a valid call: {e}"))?;
    println!("{}", registry.render_call(&call, a.style.into()));
    if a.run {
        let result = dispatch(&call, &HandlerTable::demo())?;
        println!("{}", result.text);
    }
    Ok(())
}

fn eval_items(
    data: Option<&Path>,
    n: usize,
    seed: u64,
    registry: &Registry,
    ckpt: Option<&Checkpoint>,
) -> Result<Vec<TaskItem>> {
    let vocab = match ckpt {
        Some(c) => c.vocab.clone(),
        None => {
            octofunc::tokenizer::Vocabulary::new().extend_with_functional_tokens(registry.len())?
        }
    };
    let build = |records: Vec<TaskRecord>| -> Result<Vec<TaskItem>> {
        Ok(records
            .iter()
            .map(|r| TaskItem::from_record(r, registry, &vocab))
            .collect::<Result<_, _>>()?)
    };
    match data {
        Some(d) => build(read_jsonl(&data_file(d, DatasetManifest::EVAL))?),
        None => Ok(tasks(seed, Purpose::Eval, n, registry)?
            .iter()
            .enumerate()
            .map(|(i, t)| TaskItem::from_example(format!("eval-{i}"), t, registry, &vocab))
            .collect()),
    }
}

fn eval(a: EvalArgs, seed: u64, format: Format) -> Result<()> {
    let registry = a.manifest.load()?;
    let vocab =
        octofunc::tokenizer::Vocabulary::new().extend_with_functional_tokens(registry.len())?;
    let (outputs, items) = match (&a.ckpt, &a.recorded) {
        (Some(p), _) => {
            let ckpt = load_extended(p, &registry)?;
            let items = eval_items(a.data.as_deref(), a.n, seed, &registry, Some(&ckpt))?;
            let gen = generation_config(a.constrain, None, a.max_new_tokens);
            let outputs = record_outputs(&ckpt.model, &items, &registry, &ckpt.vocab, &gen, seed)?;
            if let Some(out) = &a.record_out {
                std::fs::write(out, outputs.to_jsonl())
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            (outputs, items)
        }
        (None, Some(p)) => (
            RecordedOutputs::load(p)?,
            eval_items(a.data.as_deref(), a.n, seed, &registry, None)?,
        ),
        (None, None) => unreachable!("clap requires a system to evaluate"),
    };
    let report = evaluate(
        &outputs,
        &items,
        &registry,
        &vocab,
        &RewardConfig::default(),
    )?;
    match format {
        Format::Json => print_json(&report)?,
        Format::Table => print!("{report}"),
    }
    Ok(())
}

fn bench(a: BenchArgs, seed: u64, format: Format) -> Result<()> {
    let registry = a.manifest.load()?;
    let ckpt = load_extended(&a.ckpt, &registry)?;
    let mut items = eval_items(a.data.as_deref(), a.samples, seed, &registry, Some(&ckpt))?;
    items.truncate(a.samples);
    let gen = generation_config(a.constrain, None, a.max_new_tokens);
    let report = benchmark_latency(&ckpt.model, &items, &registry, &ckpt.vocab, &gen, seed)?;
    match format {
        Format::Json => print_json(&report)?,
        Format::Table => print!("{report}"),
    }
    Ok(())
}

fn inspect(path: &Path, format: Format) -> Result<()> {
    let ckpt = Checkpoint::load(path)?;
    if format == Format::Json {
        let v = serde_json::json!({
            "model_config": ckpt.model.config(),
            "parameters": ckpt.model.parameter_count(),
            "vocab_size": ckpt.vocab.size(),
            "functional_tokens": ckpt.vocab.functional_count(),
            "provenance": ckpt.provenance,
        });
        return print_json(&v);
    }
    let c = ckpt.model.config();
    println!("checkpoint    {}", path.display());
    println!("parameters    {}", ckpt.model.parameter_count());
    println!(
        "model         d_model {} layers {} heads {} context {} image {}x{}x{} patch {} d_img {} encoder layers {} prefix {}",
        c.d_model, c.n_layers, c.n_heads, c.context_len, c.image_size, c.image_size, c.channels, c.patch_size, c.d_img,
        c.encoder_layers, c.n_prefix
    );
    println!(
        "vocabulary    {} tokens, {} functional",
        ckpt.vocab.size(),
        ckpt.vocab.functional_count()
    );
    println!("temperature   {:.4}", ckpt.model.temperature());
    if ckpt.provenance.is_empty() {
        println!("provenance    (untrained)");
    }
    for p in &ckpt.provenance {
        let loss = p.final_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        println!(
            "stage {}       steps {} batch {} lr {:.1e} seed {} final loss {loss}",
            p.stage, p.config.steps, p.config.batch_size, p.config.lr, p.config.seed
        );
    }
    Ok(())
}
