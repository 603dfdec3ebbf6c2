use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cse_core::audio::{
    read_wav_16k, write_synthetic_dataset, write_wav, DatasetManifest, NoiseKind, WaveBuffer, SAMPLE_RATE,
};
use cse_core::checkpoint::load_model;
use cse_core::config::{Config, Preset};
use cse_core::enhance::{enhance_batch, enhance_streaming};
use cse_core::eval::evaluate_manifest;
use cse_core::gradsuite::{self, SuiteOptions};
use cse_core::model::ModelInput;
use cse_core::ssl::load_external_features;
use cse_core::tensor::OpKind;
use cse_core::train::{load_items, split_validation, train_loop, TrainLoop};

#[derive(Parser)]
#[command(
    name = "cse",
    version,
    about = "Causal speech enhancement with semantic token prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    White,
    Pink,
    Babble,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes last.ckpt, best.ckpt and metrics.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Held-out manifest; defaults to the first `train.val_count` entries.
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one WAV file.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        streaming: bool,
        #[arg(long, default_value_t = 20.0)]
        chunk_ms: f64,
        /// Requested config; must match the checkpoint architecture.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        unit_mask: bool,
    },
    /// Enhance and score every entry of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// JSON report path; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Debug: force the mask to 1 (identity enhancement).
        #[arg(long)]
        unit_mask: bool,
    },
    /// Print the semantic token of every frame.
    Tokens {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Also print the first N predicted future tokens.
        #[arg(long)]
        predict: Option<usize>,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Test hook: corrupt the backward rule of one op.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write a synthetic noisy/clean dataset and its manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 1.5)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        snr_min: f64,
        #[arg(long, default_value_t = 10.0)]
        snr_max: f64,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [NoiseArg::White, NoiseArg::Pink])]
        noise: Vec<NoiseArg>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<cse_core::Error> for Failure {
    fn from(e: cse_core::Error) -> Self {
        let code = if e.is_numerical() {
            3
        } else if e.is_io() {
            4
        } else {
            2
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<cse_core::Error>() {
            Ok(core) => core.into(),
            Err(e) => Failure {
                code: 4,
                message: format!("{e:#}"),
            },
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> CliResult<u8> {
    match cmd {
        Command::Train {
            config,
            manifest,
            out_dir,
            preset,
            val_manifest,
            resume,
        } => cmd_train(
            config.as_deref(),
            &manifest,
            &out_dir,
            preset,
            val_manifest.as_deref(),
            resume.as_deref(),
        ),
        Command::Enhance {
            checkpoint,
            input,
            output,
            streaming,
            chunk_ms,
            config,
            unit_mask,
        } => cmd_enhance(
            &checkpoint,
            &input,
            &output,
            streaming,
            chunk_ms,
            config.as_deref(),
            unit_mask,
        ),
        Command::Eval {
            checkpoint,
            manifest,
            report,
            unit_mask,
        } => cmd_eval(&checkpoint, &manifest, report.as_deref(), unit_mask),
        Command::Tokens {
            checkpoint,
            input,
            predict,
        } => cmd_tokens(&checkpoint, &input, predict),
        Command::Gradcheck {
            config,
            seed,
            preset,
            corrupt,
        } => cmd_gradcheck(config.as_deref(), seed, preset, corrupt.as_deref()),
        Command::Synth {
            out_dir,
            count,
            duration,
            seed,
            snr_min,
            snr_max,
            noise,
        } => cmd_synth(&out_dir, count, duration, seed, (snr_min, snr_max), &noise),
    }
}

fn resolve_config(path: Option<&Path>, preset: Option<PresetArg>) -> CliResult<Config> {
    let preset = preset.map(Preset::from);
    Ok(match path {
        Some(p) => Config::load(p, preset)?,
        None => Config::resolve(preset, None)?,
    })
}

fn open_manifest(path: &Path) -> CliResult<DatasetManifest> {
    if !path.is_file() {
        return Err(usage(format!("manifest not found: {}", path.display())));
    }
    Ok(DatasetManifest::load(path)?)
}

fn cmd_train(
    config: Option<&Path>,
    manifest: &Path,
    out_dir: &Path,
    preset: Option<PresetArg>,
    val_manifest: Option<&Path>,
    resume: Option<&Path>,
) -> CliResult<u8> {
    let cfg = resolve_config(config, preset)?;
    let train_m = open_manifest(manifest)?;
    let val_m = val_manifest.map(open_manifest).transpose()?;
    let items = load_items(&train_m, &cfg)?;
    let (train, val) = match val_m {
        Some(m) => (items, load_items(&m, &cfg)?),
        None => split_validation(items, cfg.train.val_count),
    };
    eprintln!(
        "training on {} utterances, validating on {}, {} epochs",
        train.len(),
        val.len(),
        cfg.train.epochs
    );
    let outcome = train_loop(
        &cfg,
        TrainLoop {
            out_dir,
            train: &train,
            val: &val,
            resume,
        },
        &mut |s| {
            eprintln!(
                "epoch {:>3}  train {:.4}  val {:.4}  si-sdr {:.2} dB (noisy {:.2})  acc {:.3}{}",
                s.epoch,
                s.train.total,
                s.validation.total,
                s.validation.si_sdr,
                s.validation.noisy_si_sdr,
                s.validation.token_acc,
                if s.best { "  *" } else { "" }
            );
        },
    )?;
    println!("{}", outcome.last.display());
    println!("{}", outcome.best.display());
    println!("{}", outcome.metrics.display());
    Ok(0)
}

fn requested(config: Option<&Path>) -> CliResult<Option<Config>> {
    config.map(|p| Config::load(p, None).map_err(Failure::from)).transpose()
}

fn cmd_enhance(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    streaming: bool,
    chunk_ms: f64,
    config: Option<&Path>,
    unit_mask: bool,
) -> CliResult<u8> {
    let req = requested(config)?;
    let model = load_model(checkpoint, req.as_ref())?;
    let wave = read_wav_16k(input)?;
    let samples = if streaming {
        if !(chunk_ms > 0.0) {
            return Err(usage("--chunk-ms must be positive"));
        }
        let chunk = ((chunk_ms * f64::from(SAMPLE_RATE) / 1000.0).round() as usize).max(1);
        enhance_streaming(&model, &wave.samples, chunk, unit_mask)?
    } else {
        let external = external_for(&model.config, input)?;
        enhance_batch(&model, &wave.samples, external, unit_mask)?.samples
    };
    write_wav(output, &WaveBuffer::new(samples, SAMPLE_RATE)?)?;
    Ok(0)
}

/// External features for a single file live next to the configured
/// directory as `<file stem>.cse`.
fn external_for(cfg: &Config, input: &Path) -> CliResult<Option<cse_core::ssl::SslFeatureStack>> {
    let Some(dir) = &cfg.ssl.external_features_path else {
        return Ok(None);
    };
    let stem = input
        .file_stem()
        .ok_or_else(|| usage(format!("{}: no file name", input.display())))?;
    let mut name = stem.to_os_string();
    name.push(".cse");
    Ok(Some(load_external_features(dir.join(name))?))
}

fn cmd_eval(checkpoint: &Path, manifest: &Path, report: Option<&Path>, unit_mask: bool) -> CliResult<u8> {
    let model = load_model(checkpoint, None)?;
    let m = open_manifest(manifest)?;
    let r = evaluate_manifest(&model, &m, unit_mask)?;
    let text = serde_json::to_string_pretty(&r).map_err(anyhow::Error::from)?;
    match report {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Failure {
            code: 4,
            message: format!("{}: {e}", p.display()),
        })?,
        None => println!("{text}"),
    }
    eprintln!(
        "{} utterances  si-sdr {:.2} -> {:.2} dB ({:+.2})  lsd {:.2} -> {:.2}  token acc {:.3}",
        r.utterances.len(),
        r.mean_noisy_si_sdr,
        r.mean_enhanced_si_sdr,
        r.mean_si_sdr_improvement,
        r.mean_noisy_lsd,
        r.mean_enhanced_lsd,
        r.token_acc_mean
    );
    Ok(0)
}

fn cmd_tokens(checkpoint: &Path, input: &Path, predict: Option<usize>) -> CliResult<u8> {
    let model = load_model(checkpoint, None)?;
    let n = model.n_predict();
    if let Some(p) = predict {
        if p == 0 || p > n {
            return Err(usage(format!("--predict must be in 1..={n} for this checkpoint")));
        }
    }
    let wave = read_wav_16k(input)?;
    let (mut x, _) = ModelInput::from_samples(&wave.samples, &model.config)?;
    x.external = external_for(&model.config, input)?;
    let inf = model.infer(&x, false)?;
    let k = model.codebook_size();
    let mut out = String::new();
    for (t, tok) in inf.tokens.iter().enumerate() {
        out.push_str(&format!("{t}\t{tok}"));
        if let Some(p) = predict {
            let pred = inf.predicted(t, k);
            let cols: Vec<String> = pred[..p].iter().map(usize::to_string).collect();
            out.push('\t');
            out.push_str(&cols.join(" "));
        }
        out.push('\n');
    }
    print!("{out}");
    Ok(0)
}

fn cmd_gradcheck(config: Option<&Path>, seed: u64, preset: Option<PresetArg>, corrupt: Option<&str>) -> CliResult<u8> {
    let cfg = resolve_config(config, preset)?;
    let fault = corrupt
        .map(|name| OpKind::from_name(name).ok_or_else(|| usage(format!("unknown op `{name}`"))))
        .transpose()?;
    let results = gradsuite::run(
        &cfg,
        SuiteOptions {
            seed,
            fault,
            ..SuiteOptions::default()
        },
    )?;
    println!("{:<32} {:>7} {:>14}  result", "component", "probes", "max rel err");
    for r in &results {
        println!(
            "{:<32} {:>7} {:>14.3e}  {}",
            r.component,
            r.probes,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    Ok(if gradsuite::all_passed(&results) { 0 } else { 3 })
}

fn cmd_synth(
    out_dir: &Path,
    count: usize,
    duration: f64,
    seed: u64,
    snr: (f64, f64),
    noise: &[NoiseArg],
) -> CliResult<u8> {
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let kinds: Vec<NoiseKind> = noise
        .iter()
        .map(|n| match n {
            NoiseArg::White => NoiseKind::White,
            NoiseArg::Pink => NoiseKind::Pink,
            NoiseArg::Babble => NoiseKind::BabbleSurrogate,
        })
        .collect();
    let path = write_synthetic_dataset(out_dir, count, duration, seed, snr, &kinds)?;
    println!("{}", path.display());
    Ok(0)
}
