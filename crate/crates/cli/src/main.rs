//! `gazeprompt`: anchors, interpolation, training, evaluation, ablations and
//! gradient checks from the command line.

mod config;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gazeprompt::anchors::{AnchorGrid, AnchorSet, InterpolationScheme};
use gazeprompt::encoders::ParameterSet;
use gazeprompt::geometry::{angular_error, vec_to_yawpitch, yawpitch_to_vec, YawPitch};
use gazeprompt::gradcheck::{run_gradcheck, GradTarget, DEFAULT_CONFIGS};
use gazeprompt::harness::{
    evaluate, feature_label_correlation, generate_with_mixing, run_ablation, train_with, AblationAxis,
    DEFAULT_K_VALUES,
};
use gazeprompt::losses::{build_negative_bank, BankLayout};
use gazeprompt::Error;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use config::{load, write_file, LoadedConfig};

#[derive(Parser)]
#[command(name = "gazeprompt", version, about = "Geometry-aware prompt learning for gaze regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set lambda.geo=0` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Source,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Build an anchor grid with random embeddings and print its size.
    Anchors {
        #[arg(long, default_value_t = 30.0)]
        yaw_step: f64,
        #[arg(long, default_value_t = 30.0)]
        pitch_step: f64,
        /// Embedding dimension.
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; JSON goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the interpolation weights of one gaze direction.
    Interp {
        #[arg(long, allow_hyphen_values = true)]
        yaw: f64,
        #[arg(long, allow_hyphen_values = true)]
        pitch: f64,
        /// global-linear, planar-bilinear or spherical-bilinear (aliases: global, planar, spherical).
        #[arg(long, default_value = "spherical-bilinear", value_parser = parse_scheme)]
        scheme: InterpolationScheme,
        /// Anchor-set JSON whose grid is used; the 30° grid otherwise.
        #[arg(long)]
        anchors: Option<PathBuf>,
    },
    /// Train on the synthetic source domain.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Mean angular error of a checkpoint on a generated domain.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Data seed; the config's data seed when omitted.
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Domain::Target)]
        domain: Domain,
        /// Also report the feature/label rank correlation over this many pairs.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Train every variant along one ablation axis over several seeds.
    Ablate {
        /// loss-terms, interpolation or K.
        #[arg(long, value_parser = parse_axis)]
        axis: AblationAxis,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Replicates per variant.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Bank sizes for the K axis.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_K_VALUES.to_vec())]
        k: Vec<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_parser = parse_target, default_value = "all")]
        target: GradTarget,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random configurations per check.
        #[arg(long, default_value_t = DEFAULT_CONFIGS)]
        configs: usize,
    },
    /// Write the global negative bank as CSV.
    Negatives {
        #[arg(long, default_value_t = 256)]
        k: usize,
        /// Checkpoint whose text features are appended to each row.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_scheme(s: &str) -> std::result::Result<InterpolationScheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<AblationAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_target(s: &str) -> std::result::Result<GradTarget, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug)]
struct GradcheckFailed;

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("gradient check failed")
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 4;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config { .. }) => 2,
        Some(e) if e.is_singular() => 3,
        _ => 1,
    }
}

fn manifest(command: &str, loaded: &LoadedConfig, outputs: serde_json::Value) -> Result<String> {
    let doc = json!({
        "tool": "gazeprompt",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed_env": {
            "variable": config::SEED_ENV,
            "value": loaded.env_seed,
        },
        "seeds": loaded.config.seeds,
        "config": loaded.config,
        "outputs": outputs,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_anchors(yaw_step: f64, pitch_step: f64, dim: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let seed = config::env_seed()?.unwrap_or(seed);
    let set = AnchorSet::build(yaw_step, pitch_step, dim, seed)?;
    let text = set.to_json()? + "\n";
    match out {
        Some(p) => {
            write_file(p, &text)?;
            println!("N={}", set.len());
        }
        None => {
            eprintln!("N={}", set.len());
            print!("{text}");
        }
    }
    Ok(())
}

fn cmd_interp(yaw: f64, pitch: f64, scheme: InterpolationScheme, anchors: Option<&Path>) -> Result<()> {
    let grid = match anchors {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            AnchorSet::from_json(&text)?.grid().clone()
        }
        None => AnchorGrid::new(30.0, 30.0)?,
    };
    let target = yawpitch_to_vec(YawPitch::new(yaw, pitch)?)?;
    let weights = scheme.weights(&target, &grid)?;
    println!("scheme={scheme}");
    for &(idx, w) in &weights.entries {
        let at = grid.positions()[idx];
        println!("anchor={idx} yaw={} pitch={} weight={w}", at.yaw, at.pitch);
    }
    println!("weight_sum={}", weights.sum());
    let recon = weights.reconstruct(grid.gazes())?;
    println!("reconstruction_error_deg={}", angular_error(&recon, &target));
    Ok(())
}

fn cmd_train(cfg: &ConfigArgs, out_dir: &Path) -> Result<()> {
    let loaded = load(cfg.config.as_deref(), &cfg.overrides)?;
    let c = &loaded.config;
    let metrics = out_dir.join("metrics.csv");
    let ckpt = out_dir.join("checkpoint.json");
    write_file(
        &out_dir.join("manifest.json"),
        &manifest("train", &loaded, json!({ "metrics": "metrics.csv", "checkpoint": "checkpoint.json" }))?,
    )?;
    let (source, target) = c.datasets()?;
    let outcome = train_with(c, &source, Some(&target), |row| {
        eprintln!(
            "epoch {:>3}  total {:.5}  gaze {:.5}  lr {:.5}  src {:.3}°  tgt {:.3}°",
            row.epoch,
            row.total,
            row.gaze,
            row.lr,
            row.src_err_deg,
            row.tgt_err_deg.unwrap_or(f64::NAN)
        );
    })?;
    write_file(&metrics, &outcome.log.to_csv()?)?;
    write_file(&ckpt, &(outcome.params.to_json()? + "\n"))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "src_err_deg={} tgt_err_deg={}",
            last.src_err_deg,
            last.tgt_err_deg.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn cmd_eval(ckpt: &Path, cfg: &ConfigArgs, data_seed: Option<u64>, domain: Domain, pairs: Option<usize>) -> Result<()> {
    let mut loaded = load(cfg.config.as_deref(), &cfg.overrides)?;
    if let Some(seed) = data_seed {
        loaded.config.seeds.data = seed;
    }
    let c = &loaded.config;
    let text = std::fs::read_to_string(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let params = ParameterSet::from_json(&text)?;
    let (n, spec) = match domain {
        Domain::Source => (c.data.n_source, &c.data.source),
        Domain::Target => (c.data.n_target, &c.data.target),
    };
    let mixing = c.mixing();
    let data = generate_with_mixing(n, spec, &mixing, c.seeds.data)?;
    println!("mean_angular_error_deg={}", evaluate(&params, &data)?);
    if let Some(pairs) = pairs {
        println!("spearman_rho={}", feature_label_correlation(&params, &data, pairs, c.seeds.pairs)?);
    }
    Ok(())
}

fn cmd_ablate(axis: AblationAxis, cfg: &ConfigArgs, seeds: u64, k: &[usize], out_dir: &Path) -> Result<()> {
    let loaded = load(cfg.config.as_deref(), &cfg.overrides)?;
    let csv_name = format!("ablation_{}.csv", axis.name());
    write_file(
        &out_dir.join("manifest.json"),
        &manifest(
            "ablate",
            &loaded,
            json!({ "axis": axis.name(), "replicates": seeds, "k_values": k, "table": csv_name }),
        )?,
    )?;
    let table = run_ablation(axis, &loaded.config, k, seeds, |variant, run| {
        eprintln!(
            "{variant:<20} seed {}  src {:.3}°  tgt {:.3}°",
            run.replicate, run.source_error, run.target_error
        );
    })?;
    let csv = table.to_csv()?;
    write_file(&out_dir.join(&csv_name), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(target: GradTarget, seed: u64, configs: usize) -> Result<()> {
    let seed = config::env_seed()?.unwrap_or(seed);
    let report = run_gradcheck(target, seed, configs)?;
    print!("{report}");
    println!("worst_relative_error={:e}", report.worst());
    if !report.passed() {
        return Err(GradcheckFailed.into());
    }
    Ok(())
}

fn cmd_negatives(k: usize, ckpt: Option<&Path>, cfg: &ConfigArgs, out: Option<&Path>) -> Result<()> {
    let loaded = load(cfg.config.as_deref(), &cfg.overrides)?;
    let c = &loaded.config;
    let layout = BankLayout::new(k, &c.anchor_grid()?, c.interpolation)?;
    let features = match ckpt {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let params = ParameterSet::from_json(&text)?;
            let bank = build_negative_bank(&layout, &params)?;
            Some(bank.caches.into_iter().map(|c| c.feature.into_vec()).collect::<Vec<_>>())
        }
        None => None,
    };
    let mut csv = String::from("index,x,y,z,yaw,pitch");
    if let Some(f) = features.as_ref().and_then(|f| f.first()) {
        for d in 0..f.len() {
            csv.push_str(&format!(",f{d}"));
        }
    }
    csv.push('\n');
    for (i, g) in layout.gazes.iter().enumerate() {
        let yp = vec_to_yawpitch(g)?;
        csv.push_str(&format!("{i},{},{},{},{},{}", g.x(), g.y(), g.z(), yp.yaw, yp.pitch));
        if let Some(f) = &features {
            for v in &f[i] {
                csv.push_str(&format!(",{v}"));
            }
        }
        csv.push('\n');
    }
    emit(out, &csv)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Anchors {
            yaw_step,
            pitch_step,
            dim,
            seed,
            out,
        } => cmd_anchors(yaw_step, pitch_step, dim, seed, out.as_deref()),
        Command::Interp {
            yaw,
            pitch,
            scheme,
            anchors,
        } => cmd_interp(yaw, pitch, scheme, anchors.as_deref()),
        Command::Train { cfg, out_dir } => cmd_train(&cfg, &out_dir),
        Command::Eval {
            ckpt,
            cfg,
            data_seed,
            domain,
            pairs,
        } => cmd_eval(&ckpt, &cfg, data_seed, domain, pairs),
        Command::Ablate {
            axis,
            cfg,
            seeds,
            k,
            out_dir,
        } => cmd_ablate(axis, &cfg, seeds, &k, &out_dir),
        Command::Gradcheck { target, seed, configs } => cmd_gradcheck(target, seed, configs),
        Command::Negatives { k, ckpt, cfg, out } => cmd_negatives(k, ckpt.as_deref(), &cfg, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
