mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{ConfigFile, List};
use vemse_core::benchmark::{run_benchmark, BenchmarkConfig};
use vemse_core::dsp::{read_wav, write_wav, WavEncoding, DEFAULT_FRAME_SIZE, DEFAULT_HOP};
use vemse_core::inference::{EngineConfig, Method, MhConfig, ReconMode};
use vemse_core::metrics::{mix_at_snr, si_sdr};
use vemse_core::model_store;
use vemse_core::pipeline::enhance;
use vemse_core::vae::{make_toy_dataset, power_frames, train, TrainConfig, VaeModel};

#[derive(Parser)]
#[command(name = "vemse", version, about = "VAE/NMF speech enhancement")]
struct Cli {
    /// `key = value` file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a VAE speech model on synthetic utterances.
    Train(TrainArgs),
    /// Enhance a noisy recording.
    Enhance(EnhanceArgs),
    /// Compare the engines on seeded synthetic mixtures.
    Benchmark(BenchArgs),
    /// SI-SDR of an estimate against a reference.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    n_utterances: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args, Default)]
struct EngineArgs {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long = "D")]
    d: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    mh_iters: Option<usize>,
    #[arg(long)]
    mh_keep: Option<usize>,
    #[arg(long)]
    mh_eps2: Option<f64>,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long, conflicts_with_all = ["speech", "noise"])]
    input: Option<PathBuf>,
    #[arg(long, requires = "noise")]
    speech: Option<PathBuf>,
    #[arg(long, requires = "speech")]
    noise: Option<PathBuf>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    recon: Option<ReconMode>,
    /// Where to write the per-iteration report (JSON lines).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    n_utterances: Option<usize>,
    #[arg(long)]
    d_values: Option<List<usize>>,
    #[arg(long)]
    r_values: Option<List<usize>>,
    #[arg(long)]
    methods: Option<List<Method>>,
    #[arg(long)]
    modes: Option<List<ReconMode>>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    mh_iters: Option<usize>,
    #[arg(long)]
    mh_keep: Option<usize>,
    #[arg(long)]
    mh_eps2: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    estimate: Option<PathBuf>,
}

/// Settings shared by every command.
struct Shared {
    seed: u64,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let shared = Shared {
        seed: file.resolve("seed", cli.seed, 0)?,
        model: file.resolve_opt("model", cli.model)?,
        out: file.resolve_opt("out", cli.out)?,
    };
    match cli.command {
        Command::Train(a) => cmd_train(a, shared, file),
        Command::Enhance(a) => cmd_enhance(a, shared, file),
        Command::Benchmark(a) => cmd_benchmark(a, shared, file),
        Command::Eval(a) => cmd_eval(a, file),
    }
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.with_context(|| format!("--{flag} is required"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: TrainArgs, shared: Shared, mut file: ConfigFile) -> Result<()> {
    let defaults = TrainConfig::default();
    let n_utterances = file.resolve("n-utterances", a.n_utterances, 50)?;
    let latent_dim = file.resolve("latent-dim", a.latent_dim, 8)?;
    let cfg = TrainConfig {
        learning_rate: file.resolve("learning-rate", a.learning_rate, defaults.learning_rate)?,
        batch_size: file.resolve("batch-size", a.batch_size, defaults.batch_size)?,
        patience: file.resolve("patience", a.patience, defaults.patience)?,
        max_epochs: file.resolve("max-epochs", a.max_epochs, defaults.max_epochs)?,
        validation_fraction: defaults.validation_fraction,
        seed: shared.seed,
    };
    file.finish()?;
    if latent_dim == 0 {
        bail!("--latent-dim must be at least 1");
    }
    let model_path = required(shared.model, "model")?;
    let log_path = shared.out.unwrap_or_else(|| with_suffix(&model_path, ".log.jsonl"));

    let data = make_toy_dataset(shared.seed, n_utterances)?;
    let frames = power_frames(&data.utterances, DEFAULT_FRAME_SIZE, DEFAULT_HOP)?;
    let init = VaeModel::new(frames.nrows(), latent_dim, shared.seed);
    let outcome = train(init, &frames, &cfg)?;

    model_store::save(&outcome.model, &model_path)?;
    let mut log = create(&log_path)?;
    for record in &outcome.history {
        serde_json::to_writer(&mut log, record)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    eprintln!(
        "trained on {} frames; best epoch {} of {}; model {}",
        frames.ncols(),
        outcome.best_epoch,
        outcome.history.len(),
        model_path.display()
    );
    Ok(())
}

fn engine_config(
    a: &EngineArgs,
    method_default: Method,
    seed: u64,
    file: &mut ConfigFile,
) -> Result<EngineConfig> {
    let method = file.resolve("method", a.method, method_default)?;
    let base = EngineConfig::new(method);
    let cfg = EngineConfig {
        method,
        rank: file.resolve("K", a.k, base.rank)?,
        samples: file.resolve("D", a.d, base.samples)?,
        max_iters: file.resolve("max-iters", a.max_iters, base.max_iters)?,
        tol: file.resolve("tol", a.tol, base.tol)?,
        seed,
        mh: MhConfig {
            n_iters: file.resolve("mh-iters", a.mh_iters, base.mh.n_iters)?,
            keep_last: file.resolve("mh-keep", a.mh_keep, base.mh.keep_last)?,
            eps2: file.resolve("mh-eps2", a.mh_eps2, base.mh.eps2)?,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_enhance(a: EnhanceArgs, shared: Shared, mut file: ConfigFile) -> Result<()> {
    let cfg = engine_config(&a.engine, Method::Vem, shared.seed, &mut file)?;
    let recon = file.resolve("recon", a.recon, ReconMode::Mh)?;
    let input = file.resolve_opt("input", a.input)?;
    let speech = file.resolve_opt("speech", a.speech)?;
    let noise = file.resolve_opt("noise", a.noise)?;
    let snr = file.resolve("snr", a.snr, 0.0)?;
    let report_path = file.resolve_opt("report", a.report)?;
    file.finish()?;

    let model_path = required(shared.model, "model")?;
    let out_path = required(shared.out, "out")?;
    let m = model_store::load(&model_path)?;

    let (mixture, reference) = match (input, speech, noise) {
        (Some(input), None, None) => (read_wav(&input, None)?, None),
        (None, Some(speech), Some(noise)) => {
            let s = read_wav(&speech, None)?;
            let n = read_wav(&noise, Some(s.sample_rate))?;
            let (mix, _) = mix_at_snr(&s, &n, snr)?;
            (mix, Some(s))
        }
        _ => bail!("give either --input or both --speech and --noise"),
    };

    let out = enhance(&mixture, &m, &cfg, recon, reference.as_ref())?;
    write_wav(&out_path, &out.estimate, WavEncoding::Float32)?;
    let report_path = report_path.unwrap_or_else(|| with_suffix(&out_path, ".report.jsonl"));
    let mut w = create(&report_path)?;
    out.report.write_jsonl(&mut w)?;
    w.flush()?;
    eprintln!(
        "{} iterations ({:.1} ms/iter), converged: {}",
        out.report.iterations_used(),
        out.report.mean_ms_per_iter(),
        out.report.converged
    );
    if let Some(sdr) = out.report.final_si_sdr {
        println!("{sdr:.3}");
    }
    Ok(())
}

fn cmd_benchmark(a: BenchArgs, shared: Shared, mut file: ConfigFile) -> Result<()> {
    let d = BenchmarkConfig::default();
    let base = d.engine.clone();
    let cfg = BenchmarkConfig {
        n_utterances: file.resolve("n-utterances", a.n_utterances, d.n_utterances)?,
        snr_db: file.resolve("snr", a.snr, d.snr_db)?,
        seed: shared.seed,
        methods: file.resolve("methods", a.methods, List(d.methods))?.0,
        d_values: file.resolve("d-values", a.d_values, List(d.d_values))?.0,
        r_values: file.resolve("r-values", a.r_values, List(d.r_values))?.0,
        modes: file.resolve("modes", a.modes, List(d.modes))?.0,
        engine: EngineConfig {
            rank: file.resolve("K", a.k, base.rank)?,
            max_iters: file.resolve("max-iters", a.max_iters, base.max_iters)?,
            tol: file.resolve("tol", a.tol, base.tol)?,
            mh: MhConfig {
                n_iters: file.resolve("mh-iters", a.mh_iters, base.mh.n_iters)?,
                keep_last: file.resolve("mh-keep", a.mh_keep, base.mh.keep_last)?,
                eps2: file.resolve("mh-eps2", a.mh_eps2, base.mh.eps2)?,
            },
            ..base
        },
        trace: true,
    };
    file.finish()?;
    cfg.validate()?;
    let model_path = required(shared.model, "model")?;
    let out_dir = required(shared.out, "out")?;
    let m = model_store::load(&model_path)?;

    let res = run_benchmark(&m, &cfg)?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut csv = create(&out_dir.join("benchmark.csv"))?;
    res.write_csv(&mut csv)?;
    csv.flush()?;
    let mut summary = create(&out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut summary, &res.summary)?;
    summary.write_all(b"\n")?;
    summary.flush()?;

    println!("method,D,mode,median_si_sdr,median_improvement,mean_ms_per_iter,median_iters_to_tol");
    for g in &res.summary.groups {
        let tol = g
            .median_iters_to_tol
            .map_or_else(String::new, |v| format!("{v}"));
        println!(
            "{},{},{},{:.3},{:.3},{:.3},{}",
            g.method, g.d, g.mode, g.median_si_sdr, g.median_improvement, g.mean_ms_per_iter, tol
        );
    }
    if let Some(r) = &res.summary.cost_ratio {
        println!(
            "cost ratio mcem(R={})/vem(D={}): {:.2}",
            r.mcem_r, r.vem_d, r.ratio
        );
    }
    if let Some(d) = res.summary.vem_minus_heuristic_db {
        println!("vem - heuristic median SI-SDR: {d:+.3} dB");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, mut file: ConfigFile) -> Result<()> {
    let reference = file.resolve_opt("reference", a.reference)?;
    let estimate = file.resolve_opt("estimate", a.estimate)?;
    file.finish()?;
    let r = read_wav(required(reference, "reference")?, None)?;
    let e = read_wav(required(estimate, "estimate")?, Some(r.sample_rate))?;
    println!("{:.6}", si_sdr(&r, &e)?);
    Ok(())
}
