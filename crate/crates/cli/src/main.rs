use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gre_core::harness::{self, attn_dump, corpus, equivcheck, eval, gradcheck, phase_retrieval};
use gre_core::network::ModelConfig;
use gre_core::params::BreakMode;
use gre_core::signal::{read_wav, DegradationSpec};

#[derive(Parser)]
#[command(name = "gre", version, about = "Rotation-equivariant speech enhancement harness")]
struct Cli {
    /// Model config: `small`, `standard`, or a JSON file.
    #[arg(long, global = true)]
    config: Option<String>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "none")]
    break_mode: BreakMode,
    /// Output directory for reports.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rotation-equivariance sweep over every phase-carrying unit.
    Equivcheck {
        #[arg(long, default_value_t = 16)]
        frames: usize,
        /// Comma-separated rotation angles in radians.
        #[arg(long, value_delimiter = ',')]
        theta: Option<Vec<f64>>,
    },
    /// Finite-difference gradient checks.
    Gradcheck,
    /// Zero-phase single-utterance overfit with the omni-directional phase loss.
    PhaseRetrieval {
        /// Target utterance; a synthetic harmonic tone when omitted.
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long, default_value_t = phase_retrieval::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = phase_retrieval::DEFAULT_LR)]
        lr: f64,
    },
    /// Metrics over a manifest of clean/degraded pairs.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Score the degraded input unchanged instead of running the model.
        #[arg(long)]
        identity: bool,
    },
    /// Export the attention maps of one frequency-axis bottleneck block.
    AttnDump {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        block: usize,
        /// Frame to capture; the middle frame when omitted.
        #[arg(long)]
        frame: Option<usize>,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Degrade every WAV in a directory and write a pair manifest.
    Degrade {
        /// Degradation spec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        clean_dir: PathBuf,
        /// Noise recording; seeded white noise when omitted.
        #[arg(long)]
        noise: Option<PathBuf>,
    },
    /// Exact trainable parameter counts.
    ParamCount,
}

fn model(cli: &Cli, fallback: ModelConfig) -> Result<ModelConfig> {
    match &cli.config {
        Some(c) => ModelConfig::resolve(c).with_context(|| format!("loading config {c}")),
        None => Ok(fallback),
    }
}

fn write(out: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    let path = out.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(path)
}

fn verdict(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Equivcheck { frames, theta } => {
            let mut opts = equivcheck::EquivcheckOptions::new(model(cli, ModelConfig::small())?, cli.seed, cli.break_mode);
            opts.frames = *frames;
            if let Some(t) = theta {
                opts.thetas = t.clone();
            }
            let report = equivcheck::run(&opts)?;
            write(out, "equivcheck.json", harness::to_json(&report)?.as_bytes())?;
            for u in &report.units {
                println!(
                    "{:<18} {:>12.3e} {:?} {} {:.0e}",
                    u.unit_name,
                    u.max_rel_error,
                    u.expect,
                    if u.pass { "ok" } else { "FAIL" },
                    u.threshold
                );
            }
            Ok(verdict(report.pass))
        }
        Command::Gradcheck => {
            let report = gradcheck::run(cli.seed)?;
            write(out, "gradcheck.json", harness::to_json(&report)?.as_bytes())?;
            for e in report.entries.iter().chain([&report.wrong_adjoint_fixture]) {
                println!("{:<22} {:>12.3e} {}", e.name, e.max_error, if e.pass { "ok" } else { "FAIL" });
            }
            Ok(verdict(report.pass))
        }
        Command::PhaseRetrieval { wav, steps, lr } => {
            let mut opts = phase_retrieval::PhaseRetrievalOptions::new(cli.seed);
            opts.model = model(cli, phase_retrieval::reduced_config())?;
            opts.steps = *steps;
            opts.lr = *lr;
            if let Some(p) = wav {
                opts.wave = Some(read_wav(p)?);
            }
            let result = phase_retrieval::run(&opts)?;
            write(out, "phase_retrieval.json", harness::to_json(&result.report)?.as_bytes())?;
            let mut curve = Vec::new();
            result.write_curve_csv(&mut curve)?;
            write(out, "loss_curve.csv", &curve)?;
            result.params.save_json(&out.join("params.json"))?;
            println!("wrote {}", out.join("params.json").display());
            let r = &result.report;
            println!(
                "omni {:.4} -> {:.4} (ratio {:.3}); PD {:.2} -> {:.2} deg; Griffin-Lim({}) PD {:.2} deg",
                r.initial_omni, r.final_omni, r.omni_ratio, r.pd_zero_phase_deg, r.pd_final_deg, r.griffin_lim_iters, r.pd_griffin_lim_deg
            );
            Ok(verdict(r.loss_halved && r.pd_improved))
        }
        Command::Eval { manifest, params, identity } => {
            let rows = eval::read_manifest(manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let config = model(cli, ModelConfig::small())?;
            let loaded;
            let enhancer = if *identity {
                eval::Enhancer::Identity
            } else {
                loaded = harness::load_model(config, params.as_deref(), cli.seed)?;
                eval::Enhancer::Network {
                    net: &loaded.0,
                    store: &loaded.1,
                }
            };
            let report = eval::run(&rows, base, &enhancer, config.alpha)?;
            write(out, "eval.json", harness::to_json(&report)?.as_bytes())?;
            for r in report.rows.iter().filter(|r| r.error.is_some()) {
                eprintln!("{}: {}", r.utterance, r.error.as_deref().unwrap_or_default());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::AttnDump { wav, block, frame, params } => {
            let (net, store) = harness::load_model(model(cli, ModelConfig::small())?, params.as_deref(), cli.seed)?;
            let export = attn_dump::run(&net, &store, &read_wav(wav)?, *block, *frame)?;
            let mut csv = Vec::new();
            export.write_csv(&mut csv)?;
            write(out, &format!("attn_block{block}.csv"), &csv)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Degrade { spec, clean_dir, noise } => {
            let spec: DegradationSpec = serde_json::from_slice(&fs::read(spec)?)
                .with_context(|| format!("parsing {}", spec.display()))?;
            let noise = noise.as_deref().map(read_wav).transpose()?;
            let rows = corpus::run(&spec, clean_dir, out, noise.as_deref(), cli.seed)?;
            println!("wrote {} ({} pairs)", out.join(corpus::MANIFEST_NAME).display(), rows.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::ParamCount => {
            let report = harness::param_count_report(model(cli, ModelConfig::small())?)?;
            write(out, "param_count.json", harness::to_json(&report)?.as_bytes())?;
            println!("{} parameters", report.param_count);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
