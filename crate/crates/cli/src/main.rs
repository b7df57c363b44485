mod outdir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hrmark::blocks::{FusionVariant, HeadVariant};
use hrmark::cost::{compare, profile, Dimension};
use hrmark::eval::{evaluate, evaluate_dataset, load_annotations, resize_sample, AnnotationFormat, NmeResult};
use hrmark::network::{read_params, write_params};
use hrmark::train::{synth_dataset, synth_split, train, Dataset, Image, Layout, Sample};
use hrmark::{build, DType, Error, Model, ModelParams, RunConfig, Scalar};
use serde::Serialize;

use outdir::OutDir;

#[derive(Parser, Debug)]
#[command(name = "hrmark", version, about = "Landmark heatmap network: cost profiler, trainer, evaluator")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single thread, for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Static MAC / parameter report per block and family.
    Profile(ProfileArgs),
    /// Cost of every fusion or head variant against its baseline.
    Compare(CompareArgs),
    /// Train on synthetic faces or an annotation file.
    Train(TrainArgs),
    /// NME of a parameter file on synthetic faces or an annotation file.
    Eval(EvalArgs),
    /// Inference latency and throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Preset name (plus-L, plus-S, toy, toy-train) or TOML path.
    #[arg(long)]
    config: String,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Fusion variant override; give several to compare them side by side.
    #[arg(long, value_parser = parse::<FusionVariant>)]
    fusion: Vec<FusionVariant>,
    #[arg(long, value_parser = parse::<HeadVariant>)]
    head: Option<HeadVariant>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// fusion or head.
    #[arg(long, value_parser = parse::<Dimension>)]
    dimension: Dimension,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Wflw,
    Simple,
}

impl From<Format> for AnnotationFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Wflw => AnnotationFormat::Wflw,
            Format::Simple => AnnotationFormat::Simple,
        }
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// `synth` or an annotation file.
    #[arg(long)]
    data: String,
    #[arg(long, value_enum, default_value = "wflw")]
    format: Format,
    /// Crop each image to its annotated face box first (WFLW only).
    #[arg(long)]
    crop: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    /// Validation annotation file (annotation-file training only).
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    train_size: usize,
    #[arg(long, default_value_t = 50)]
    val_size: usize,
    /// Overrides `train.epochs`, shortening the schedule is the caller's call.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[command(flatten)]
    data: DataArgs,
    /// Parameter file; a freshly initialized model when omitted.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Synthetic validation set size.
    #[arg(long, default_value_t = 50)]
    size: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    repeat: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    config: &'a str,
    resolved: &'a RunConfig,
    seed: u64,
    out: Option<&'a Path>,
    dtype: DType,
    threads: usize,
    deterministic: bool,
    args: Vec<String>,
    version: &'static str,
}

struct Ctx {
    threads: usize,
    deterministic: bool,
}

impl Ctx {
    fn manifest<'a>(
        &self,
        subcommand: &'a str,
        config: &'a str,
        resolved: &'a RunConfig,
        seed: u64,
        out: Option<&'a Path>,
    ) -> RunManifest<'a> {
        RunManifest {
            subcommand,
            config,
            resolved,
            seed,
            out,
            dtype: resolved.network.dtype,
            threads: self.threads,
            deterministic: self.deterministic,
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    /// Writes the manifest and resolved config, then renames the directory into place.
    fn seal(&self, dir: OutDir, manifest: &RunManifest) -> Result<()> {
        dir.write_json("manifest.json", manifest)?;
        dir.write("config.toml", manifest.resolved.to_toml_string())?;
        let path = dir.finish()?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let threads = if cli.deterministic {
        1
    } else {
        cli.threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1)
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(3);
    }
    let ctx = Ctx {
        threads,
        deterministic: cli.deterministic,
    };

    let result = match &cli.command {
        Command::Profile(a) => cmd_profile(&ctx, a),
        Command::Compare(a) => cmd_compare(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for bad input, 3 for failures while running.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Numeric { .. } | Error::Eval(_)) => 3,
        Some(_) => 2,
        None => 3,
    }
}

fn cmd_profile(ctx: &Ctx, a: &ProfileArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&a.config.config)?;
    if let Some(h) = a.head {
        cfg.network.head = h;
    }
    let variants = if a.fusion.is_empty() {
        vec![cfg.network.fusion]
    } else {
        a.fusion.clone()
    };
    let mut reports = Vec::new();
    for &v in &variants {
        let mut net = cfg.network.clone();
        net.fusion = v;
        reports.push((v, profile(&net)?));
    }
    let dir = a.out.as_deref().map(OutDir::create).transpose()?;
    let single = reports.len() == 1;
    for (v, r) in &reports {
        if !single {
            println!("== fusion: {}", v.label());
        }
        if a.json {
            println!("{}", r.to_json());
        } else {
            print!("{}", r.to_table());
        }
        if let Some(d) = &dir {
            let stem = if single { "profile".to_string() } else { format!("profile-{}", v.as_str()) };
            d.write(&format!("{stem}.json"), r.to_json() + "\n")?;
            d.write(&format!("{stem}.txt"), r.to_table())?;
        }
    }
    if !single {
        let fusion = |r: &hrmark::cost::CostReport| r.family(hrmark::cost::Family::Fusion).macs as f64;
        let (b0, r0) = &reports[0];
        for (v, r) in &reports[1..] {
            let ratio = fusion(r) / fusion(r0);
            let line = format!(
                "fusion MACs {} / {} = {ratio:.4} ({:.1}% reduction); total {:.2} vs {:.2} MFLOPs",
                v.label(),
                b0.label(),
                100.0 * (1.0 - ratio),
                r.total.mflops(),
                r0.total.mflops()
            );
            println!("{line}");
        }
    }
    if let Some(d) = dir {
        let m = ctx.manifest("profile", &a.config.config, &cfg, 0, a.out.as_deref());
        ctx.seal(d, &m)?;
    }
    Ok(())
}

fn cmd_compare(ctx: &Ctx, a: &CompareArgs) -> Result<()> {
    let cfg = RunConfig::resolve(&a.config.config)?;
    let c = compare(&cfg.network, a.dimension)?;
    if a.json {
        println!("{}", c.to_json());
    } else {
        print!("{}", c.to_table());
    }
    if let Some(out) = &a.out {
        let d = OutDir::create(out)?;
        let name = format!("compare-{}", a.dimension);
        d.write(&format!("{name}.json"), c.to_json() + "\n")?;
        d.write(&format!("{name}.txt"), c.to_table())?;
        ctx.seal(d, &ctx.manifest("compare", &a.config.config, &cfg, 0, Some(out)))?;
    }
    Ok(())
}

/// Loads an annotation file into memory, resizing each image to `size`.
fn load_dataset(path: &Path, data: &DataArgs, cfg: &RunConfig) -> Result<Dataset> {
    let l = cfg.network.landmarks;
    let records = load_annotations(path, data.format.into(), l)?;
    let size = cfg.network.input_size;
    let mut samples = Vec::with_capacity(records.len());
    for r in &records {
        let img = match Image::load(&r.image) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {}: {e}", r.image.display());
                continue;
            }
        };
        let (image, landmarks) = resize_sample(&img, &r.landmarks, size);
        samples.push(Sample { image, landmarks });
    }
    if samples.is_empty() {
        return Err(Error::config(format!("no readable images in {}", path.display())).into());
    }
    Ok(Dataset {
        samples,
        layout: Layout::for_landmarks(l),
    })
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&a.config.config)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        cfg.train.milestones.retain(|&m| m < e);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let dir = OutDir::create(&a.out)?;
    match cfg.network.dtype {
        DType::F32 => train_typed::<f32>(a, &cfg, &dir)?,
        DType::F64 => train_typed::<f64>(a, &cfg, &dir)?,
    }
    ctx.seal(dir, &ctx.manifest("train", &a.config.config, &cfg, cfg.train.seed, Some(&a.out)))
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    final_val_nme: Option<f64>,
    final_loss: f64,
    lr_trace: Vec<f64>,
    seconds: f64,
    train_samples: usize,
    val_samples: usize,
    params: usize,
    params_sha256: String,
}

fn train_typed<T: Scalar>(a: &TrainArgs, cfg: &RunConfig, dir: &OutDir) -> Result<()> {
    let (data, val) = if a.data.data == "synth" {
        if cfg.network.landmarks != Layout::Synthetic.landmarks() {
            return Err(Error::config(format!(
                "synthetic faces have 5 landmarks, network.landmarks is {}",
                cfg.network.landmarks
            ))
            .into());
        }
        let (t, v) = synth_split(a.train_size, a.val_size, cfg.train.seed);
        (t, Some(v))
    } else {
        let t = load_dataset(Path::new(&a.data.data), &a.data, cfg)?;
        let v = a.val.as_deref().map(|p| load_dataset(p, &a.data, cfg)).transpose()?;
        (t, v)
    };
    let (model, params) = build::<T>(&cfg.network, cfg.train.seed)?;
    let mut train_cfg = cfg.train.clone();
    if data.layout.is_none() && train_cfg.flip_prob > 0.0 {
        log::warn!("no flip table for {} landmarks, flipping disabled", cfg.network.landmarks);
        train_cfg.flip_prob = 0.0;
    }
    let norm = cfg.norm()?;
    let start = Instant::now();
    let mut log_lines = String::new();
    let outcome = train(&model, params, &data, val.as_ref(), &train_cfg, norm, |e| {
        let nme = e.val_nme.map_or("-".to_string(), |v| format!("{v:.5}"));
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.6}  val NME {nme}  ({:.1}s)",
            e.epoch, e.lr, e.loss, e.seconds
        );
        log_lines.push_str(&serde_json::to_string(e).expect("log serializes"));
        log_lines.push('\n');
    })?;
    dir.write("train_log.jsonl", &log_lines)?;
    write_params(&outcome.params, &dir.path("params.bin"))?;
    let summary = TrainSummary {
        epochs: outcome.log.len(),
        final_val_nme: outcome.final_val_nme(),
        final_loss: outcome.log.last().map_or(f64::NAN, |l| l.loss),
        lr_trace: outcome.log.iter().map(|l| l.lr).collect(),
        seconds: start.elapsed().as_secs_f64(),
        train_samples: data.len(),
        val_samples: val.as_ref().map_or(0, Dataset::len),
        params: outcome.params.num_params(),
        params_sha256: outcome.params.checksum(),
    };
    dir.write_json("summary.json", &summary)?;
    match summary.final_val_nme {
        Some(v) => println!("final val NME: {v:.5}"),
        None => println!("final loss: {:.6}", summary.final_loss),
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&a.config.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let dir = a.out.as_deref().map(OutDir::create).transpose()?;
    let result = match cfg.network.dtype {
        DType::F32 => eval_typed::<f32>(a, &cfg)?,
        DType::F64 => eval_typed::<f64>(a, &cfg)?,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        print!("{}", result.to_table());
    }
    if let Some(d) = dir {
        d.write_json("nme.json", &result)?;
        d.write("nme.txt", result.to_table())?;
        ctx.seal(d, &ctx.manifest("eval", &a.config.config, &cfg, cfg.train.seed, a.out.as_deref()))?;
    }
    Ok(())
}

fn eval_typed<T: Scalar>(a: &EvalArgs, cfg: &RunConfig) -> Result<NmeResult> {
    let model = Model::new(cfg.network.clone())?;
    let params: ModelParams<T> = match &a.params {
        Some(p) => read_params(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            log::warn!("no --params given, evaluating a freshly initialized model");
            build::<T>(&cfg.network, cfg.train.seed)?.1
        }
    };
    model.check_params(&params)?;
    let norm = cfg.norm()?;
    if a.data.data == "synth" {
        let (_, val) = synth_split(0, a.size, cfg.train.seed);
        if cfg.network.landmarks != val.samples[0].landmarks.len() {
            return Err(Error::config(format!(
                "synthetic faces have 5 landmarks, network.landmarks is {}",
                cfg.network.landmarks
            ))
            .into());
        }
        Ok(evaluate_dataset(&model, &params, &val, norm)?)
    } else {
        let path = Path::new(&a.data.data);
        let records = load_annotations(path, a.data.format.into(), cfg.network.landmarks)?;
        Ok(evaluate(&model, &params, &records, norm, a.data.crop)?)
    }
}

#[derive(Debug, Serialize)]
struct BenchReport {
    config: String,
    dtype: DType,
    threads: usize,
    batch: usize,
    warmup: usize,
    repeat: usize,
    mflops_per_image: f64,
    mean_ms: f64,
    median_ms: f64,
    std_ms: f64,
    min_ms: f64,
    max_ms: f64,
    images_per_second: f64,
}

impl BenchReport {
    fn to_table(&self) -> String {
        format!(
            "config {} ({}, {} thread(s), batch {})\n\
             {:.2} MFLOPs per image, {} warmup + {} timed runs\n\
             per image: mean {:.3} ms, median {:.3} ms, std {:.3} ms, min {:.3} ms, max {:.3} ms\n\
             throughput: {:.1} images/s\n",
            self.config,
            self.dtype,
            self.threads,
            self.batch,
            self.mflops_per_image,
            self.warmup,
            self.repeat,
            self.mean_ms,
            self.median_ms,
            self.std_ms,
            self.min_ms,
            self.max_ms,
            self.images_per_second
        )
    }
}

fn cmd_bench(ctx: &Ctx, a: &BenchArgs) -> Result<()> {
    if a.repeat == 0 || a.batch == 0 {
        return Err(Error::Usage("--repeat and --batch must be at least 1".into()).into());
    }
    let cfg = RunConfig::resolve(&a.config.config)?;
    let dir = a.out.as_deref().map(OutDir::create).transpose()?;
    let times = match cfg.network.dtype {
        DType::F32 => bench_typed::<f32>(a, &cfg)?,
        DType::F64 => bench_typed::<f64>(a, &cfg)?,
    };
    let per_image: Vec<f64> = times.iter().map(|t| t * 1e3 / a.batch as f64).collect();
    let mut sorted = per_image.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let std = (sorted.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
    let report = BenchReport {
        config: a.config.config.clone(),
        dtype: cfg.network.dtype,
        threads: ctx.threads,
        batch: a.batch,
        warmup: a.warmup,
        repeat: a.repeat,
        mflops_per_image: profile(&cfg.network)?.total.mflops(),
        mean_ms: mean,
        median_ms: median,
        std_ms: std,
        min_ms: sorted[0],
        max_ms: sorted[sorted.len() - 1],
        images_per_second: 1e3 / mean,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    if let Some(d) = dir {
        d.write_json("bench.json", &report)?;
        d.write("bench.txt", report.to_table())?;
        ctx.seal(d, &ctx.manifest("bench", &a.config.config, &cfg, 0, a.out.as_deref()))?;
    }
    Ok(())
}

/// Seconds per forward pass of a batch, after `warmup` untimed passes.
fn bench_typed<T: Scalar>(a: &BenchArgs, cfg: &RunConfig) -> Result<Vec<f64>> {
    let (model, fresh) = build::<T>(&cfg.network, 0)?;
    let params: ModelParams<T> = match &a.params {
        Some(p) => read_params(p).with_context(|| format!("loading {}", p.display()))?,
        None => fresh,
    };
    model.check_params(&params)?;
    let faces = synth_dataset(a.batch, cfg.network.input_size, 0);
    let refs: Vec<&Image> = faces.samples.iter().map(|s| &s.image).collect();
    let x = Image::batch::<T>(&refs)?;
    for _ in 0..a.warmup {
        model.infer(&params, &x)?;
    }
    let mut times = Vec::with_capacity(a.repeat);
    for _ in 0..a.repeat {
        let t = Instant::now();
        let y = model.infer(&params, &x)?;
        times.push(t.elapsed().as_secs_f64());
        std::hint::black_box(y);
    }
    Ok(times)
}
