mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use resona::bench::{run_bench, BenchConfig, CountingAlloc};
use resona::report::{join, parse_summary};
use resona::resona::{AlphaMode, Eligibility};
use resona::tasks::{checksum, gen_mad, gen_mqar, Dataset, Header};
use resona::tensor::{DType, Scalar};
use resona::trainer::{assemble, evaluate, train, AdamW, Checkpoint, EvalResult, Hooks, Metrics, Model, TrainConfig};
use resona::verify::{run_suite, VerifyOptions, SUITES};

use config::{ConfigError, Overrides, RunConfig, Task, TaskSection};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc::new();

#[derive(Parser)]
#[command(name = "resona", version, about = "Retrieval-augmented recurrent models on synthetic recall tasks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Comma-separated layer indices that get retrieval; `none` for the
    /// baseline.
    #[arg(long, global = true, value_parser = parse_layers)]
    resona_layers: Option<Layers>,
    #[arg(long, global = true)]
    chunk_size: Option<usize>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_enum)]
    alpha_mode: Option<Mode>,
    #[arg(long, global = true)]
    resona_lr_mult: Option<f64>,
}

#[derive(Clone, Debug)]
struct Layers(Vec<usize>);

fn parse_layers(s: &str) -> Result<Layers, String> {
    if s.is_empty() || s == "none" {
        return Ok(Layers(Vec::new()));
    }
    s.split(',')
        .map(|l| l.trim().parse::<usize>().map_err(|e| format!("`{l}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Layers)
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Fixed,
    Gated,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset file.
    GenData(GenArgs),
    /// Train a model and write metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the property suites.
    Verify(VerifyArgs),
    /// Prefill and decode latency over context lengths.
    Bench(BenchArgs),
    /// Join run summaries into comparison tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// mqar, icr, noisy_icr, fuzzy_icr or selective_copy.
    task: Option<String>,
    #[arg(long = "T")]
    len: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    noise_budget: Option<usize>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    eval_count: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file; generated from the task config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Comma-separated suite names.
    #[arg(long, value_delimiter = ',')]
    only: Option<Vec<String>>,
    /// Deliberately broken eligibility rule, for checking the suites.
    #[arg(long, hide = true)]
    fault_off_by_one: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 128)]
    generate: usize,
    /// Skip rows whose estimated working set exceeds this many MiB.
    #[arg(long, default_value_t = 2048)]
    budget_mib: usize,
}

#[derive(Args)]
struct ReportArgs {
    files: Vec<PathBuf>,
}

/// Verification failed (exit code 3).
#[derive(Debug)]
struct VerifyFailed(usize);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} verification suite(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<VerifyFailed>().is_some() {
        return 3;
    }
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 1;
        }
        if let Some(r) = cause.downcast_ref::<resona::Error>() {
            use resona::Error as E;
            return match r {
                E::Config(_) | E::Capacity(_) | E::Shape { .. } | E::InvalidShape { .. } | E::Index { .. } => 1,
                E::Parse { .. } | E::Join(_) | E::Checkpoint(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RESONA_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn overrides(g: &Global) -> Overrides {
    Overrides {
        seed: g.seed,
        out: g.out.clone(),
        precision: g.precision.map(|p| match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }),
        resona_layers: g.resona_layers.as_ref().map(|l| l.0.clone()),
        chunk_size: g.chunk_size,
        top_k: g.top_k,
        alpha: g.alpha,
        alpha_mode: g.alpha_mode.map(|m| match m {
            Mode::Fixed => AlphaMode::Fixed,
            Mode::Gated => AlphaMode::Gated,
        }),
        resona_lr_mult: g.resona_lr_mult,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let o = overrides(&cli.global);
    let cfg_path = cli.global.config.as_deref();
    match cli.cmd {
        Cmd::GenData(a) => gen_data(cfg_path, &o, a),
        Cmd::Train(a) => cmd_train(cfg_path, &o, a),
        Cmd::Eval(a) => cmd_eval(&o, a),
        Cmd::Verify(a) => cmd_verify(&o, a),
        Cmd::Bench(a) => cmd_bench(cfg_path, &o, a),
        Cmd::Report(a) => cmd_report(&o, a),
    }
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn validation(e: resona::Error) -> anyhow::Error {
    anyhow!(ConfigError(e.to_string()))
}

fn generate(task: &TaskSection, seed: u64) -> anyhow::Result<Dataset> {
    let total = task.train_count + task.eval_count;
    let all = match task.task()? {
        Task::Mqar(c) => gen_mqar(&c, seed, total),
        Task::Mad(c) => gen_mad(&c, seed, total),
    }
    .map_err(validation)?;
    let (train, eval) = all.split_at(task.train_count);
    Ok(Dataset {
        header: Some(Header {
            task: task.name.clone(),
            seed,
            config: task.config_json()?,
        }),
        train: train.to_vec(),
        eval: eval.to_vec(),
    })
}

fn gen_data(cfg_path: Option<&Path>, o: &Overrides, a: GenArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::resolve(cfg_path, o)?;
    let t = &mut cfg.task;
    if let Some(name) = a.task {
        t.name = name;
    }
    if let Some(v) = a.len {
        t.len = v;
    }
    if let Some(v) = a.pairs {
        t.pairs = v;
    }
    if let Some(v) = a.vocab {
        t.vocab = v;
    }
    if a.queries.is_some() {
        t.queries = a.queries;
    }
    if let Some(v) = a.noise_budget {
        t.noise_budget = v;
    }
    if let Some(v) = a.train_count {
        t.train_count = v;
    }
    if let Some(v) = a.eval_count {
        t.eval_count = v;
    }
    let ds = generate(&cfg.task, cfg.seed)?;
    let path = out_dir(&cfg)?.join("dataset.jsonl");
    ds.save(&path)?;
    println!(
        "wrote {} train + {} eval examples to {} (checksum {})",
        ds.train.len(),
        ds.eval.len(),
        path.display(),
        checksum(&path)?
    );
    Ok(())
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

struct Writer(BufWriter<File>);

impl Writer {
    fn create(path: &Path) -> anyhow::Result<Self> {
        Ok(Self(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?)))
    }

    fn record(&mut self, v: &Value) -> anyhow::Result<()> {
        serde_json::to_writer(&mut self.0, v)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

fn step_record(m: &Metrics) -> Value {
    let mut v = serde_json::to_value(m).expect("metrics serialise");
    v["kind"] = json!("step");
    v
}

fn summary_record(cfg: &RunConfig, eval: &EvalResult, steps: usize) -> anyhow::Result<Value> {
    Ok(json!({
        "kind": "summary",
        "task": cfg.task.name,
        "len": cfg.task.len,
        "pairs": cfg.task.pairs,
        "d_model": cfg.model.d_model,
        "variant": cfg.variant(),
        "seed": cfg.seed,
        "steps": steps,
        "slot_acc": eval.slot_acc,
        "exact": eval.exact,
        "task_config": cfg.task.config_json()?,
    }))
}

fn cmd_train(cfg_path: Option<&Path>, o: &Overrides, a: TrainArgs) -> anyhow::Result<()> {
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    let mut cfg = match (&resume, cfg_path) {
        (Some(ck), None) => {
            let meta = ck.meta()?;
            let mut c: RunConfig = serde_json::from_value(meta.config).context("checkpoint config echo")?;
            apply_cli(&mut c, o);
            c
        }
        _ => RunConfig::resolve(cfg_path, o)?,
    };
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    cfg.validate()?;
    match cfg.train.precision {
        DType::F32 => train_with::<f32>(&cfg, a.data.as_deref(), resume.as_ref()),
        DType::F64 => train_with::<f64>(&cfg, a.data.as_deref(), resume.as_ref()),
    }
}

fn apply_cli(c: &mut RunConfig, o: &Overrides) {
    if let Some(p) = &o.out {
        c.out = p.clone();
    }
}

fn train_with<S: Scalar>(cfg: &RunConfig, data: Option<&Path>, resume: Option<&Checkpoint>) -> anyhow::Result<()> {
    let out = out_dir(cfg)?.to_path_buf();
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let ds = match data {
        Some(p) => load_data(p)?,
        None => generate(&cfg.task, cfg.seed)?,
    };
    let (mut model, mut opt, start) = match resume {
        Some(ck) => {
            let (m, o) = ck.restore::<S>()?;
            (m, o, ck.step as usize)
        }
        None => (assemble::<S>(&cfg.model, cfg.seed).map_err(validation)?, AdamW::new(cfg.train.weight_decay), 0),
    };
    let r = model.param_report();
    println!("parameters: {} total, {} baseline, {} retrieval", r.total, r.baseline, r.resona);
    let echo = serde_json::to_value(cfg)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut w = if start > 0 && metrics_path.exists() {
        Writer(BufWriter::new(fs::OpenOptions::new().append(true).open(&metrics_path)?))
    } else {
        Writer::create(&metrics_path)?
    };
    let best_path = out.join("best.bin");
    let mut log_err = None;
    let outcome = {
        let w = &mut w;
        let log_err = &mut log_err;
        let echo = echo.clone();
        let mut hooks = Hooks {
            on_metrics: Some(Box::new(move |m: &Metrics| {
                log::info!("step {} loss {:.4}", m.step, m.train_loss);
                if let Err(e) = w.record(&step_record(m)) {
                    *log_err = Some(e);
                }
                Ok(())
            })),
            on_best: Some(Box::new(move |m: &Model<S>, o: &AdamW<S>, step: usize| {
                Checkpoint::capture(m, Some(o), step as u64, echo.clone())?.save(&best_path)
            })),
        };
        let tc: &TrainConfig = &cfg.train;
        train(&mut model, &mut opt, &ds.train, &ds.eval, tc, start, &mut hooks)?
    };
    if let Some(e) = log_err {
        return Err(e);
    }
    Checkpoint::capture(&model, Some(&opt), cfg.train.steps as u64, echo)?.save(&out.join("checkpoint.bin"))?;
    let eval = match outcome.final_eval {
        Some(e) => e,
        None => evaluate(&model, &ds.eval, 64)?,
    };
    w.record(&summary_record(cfg, &eval, cfg.train.steps)?)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "summary task={} T={} P={} variant={} steps={} train_loss={:.4} slot_acc={:.4} exact={:.4}",
        cfg.task.name,
        cfg.task.len,
        cfg.task.pairs,
        cfg.variant(),
        cfg.train.steps,
        last,
        eval.slot_acc,
        eval.exact
    );
    Ok(())
}

fn cmd_eval(o: &Overrides, a: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let meta = ck.meta()?;
    let mut cfg: RunConfig = serde_json::from_value(meta.config).context("checkpoint config echo")?;
    apply_cli(&mut cfg, o);
    let ds = load_data(&a.data)?;
    if ds.eval.is_empty() {
        bail!(ConfigError(format!("{} has no eval examples", a.data.display())));
    }
    let eval = match cfg.train.precision {
        DType::F32 => evaluate(&ck.restore::<f32>()?.0, &ds.eval, 64)?,
        DType::F64 => evaluate(&ck.restore::<f64>()?.0, &ds.eval, 64)?,
    };
    let out = out_dir(&cfg)?;
    let mut w = Writer::create(&out.join("eval.jsonl"))?;
    w.record(&summary_record(&cfg, &eval, ck.step as usize)?)?;
    println!(
        "summary task={} variant={} examples={} slot_acc={:.4} exact={:.4}",
        cfg.task.name,
        cfg.variant(),
        eval.examples,
        eval.slot_acc,
        eval.exact
    );
    Ok(())
}

fn cmd_verify(o: &Overrides, a: VerifyArgs) -> anyhow::Result<()> {
    let opts = VerifyOptions {
        seed: o.seed.unwrap_or(0),
        eligibility: if a.fault_off_by_one { Eligibility::OffByOneChunk } else { Eligibility::Causal },
        ..VerifyOptions::default()
    };
    let suites: Vec<String> = match a.only {
        Some(s) => s,
        None => SUITES.iter().map(|s| s.to_string()).collect(),
    };
    let mut failed = 0;
    for s in &suites {
        let r = run_suite(s, &opts).map_err(validation)?;
        println!("{}", r.line());
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(VerifyFailed(failed).into());
    }
    println!("all {} suites passed", suites.len());
    Ok(())
}

fn cmd_bench(cfg_path: Option<&Path>, o: &Overrides, a: BenchArgs) -> anyhow::Result<()> {
    let mut bench = BenchConfig::default();
    if let Some(p) = cfg_path {
        bench.model = RunConfig::load(p)?.model;
        bench.model.resona.chunk_size = 64;
    }
    if let Some(u) = o.chunk_size {
        bench.model.resona.chunk_size = u;
    }
    if let Some(k) = o.top_k {
        bench.model.resona.top_k = k;
    }
    if let Some(l) = &o.resona_layers {
        bench.resona_layers = l.clone();
    }
    if let Some(l) = a.lengths {
        bench.lengths = l;
    }
    bench.reps = a.reps;
    bench.generate = a.generate;
    bench.budget_bytes = Some(a.budget_mib << 20);
    bench.seed = o.seed.unwrap_or(0);
    bench.validate().map_err(validation)?;
    let report = match o.precision.unwrap_or(DType::F32) {
        DType::F32 => run_bench::<f32>(&bench, Some(&ALLOC))?,
        DType::F64 => run_bench::<f64>(&bench, Some(&ALLOC))?,
    };
    let out = o.out.clone().unwrap_or_else(|| PathBuf::from("runs/bench"));
    fs::create_dir_all(&out)?;
    fs::write(out.join("bench.csv"), report.to_csv())?;
    fs::write(out.join("bench.md"), report.to_markdown())?;
    fs::write(out.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn cmd_report(o: &Overrides, a: ReportArgs) -> anyhow::Result<()> {
    if a.files.is_empty() {
        bail!(ConfigError("report needs at least one metrics file".into()));
    }
    let mut runs = Vec::new();
    for f in &a.files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        runs.push(parse_summary(&f.display().to_string(), &text)?);
    }
    let c = join(&runs)?;
    let out = o.out.clone().unwrap_or_else(|| PathBuf::from("runs/report"));
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.csv"), c.to_csv())?;
    let md = c.to_markdown();
    fs::write(out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}
