//! Command-line front end. Every subcommand resolves its configuration the
//! same way — defaults, then `--config FILE`, then each `--set KEY=VALUE` in
//! order, then `--seed` — prints the resolved dump for the run record, and
//! exits 0 on success, 2 on argument/configuration problems, 1 on runtime
//! failures.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array3;

use crate::config::RunConfig;
use crate::datapipe::{self, Dataset, DatasetRole};
use crate::error::{Error, Result};
use crate::evalreport::evaluate_domains;
use crate::netgraph::{Assembly, InferenceModel, StatsSource};
use crate::trainharness::{run_training, TrainState};

/// Environment variable consulted for the output root when `--out` is absent.
pub const OUT_ENV: &str = "WILDNET_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "wildnet",
    version,
    about = "Domain-generalized semantic segmentation trainer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the training loop and write checkpoints, logs, and reports
    Train(TrainArgs),
    /// Evaluate a checkpoint over the configured evaluation domains
    Eval(EvalArgs),
    /// Write side-by-side plain vs. stylized prediction maps for one pair
    StylizePreview(PreviewArgs),
    /// Generate the synthetic multi-domain toy dataset
    SynthData(SynthArgs),
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file (sectioned `key = value` text)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one value, e.g. --set trainer.total_iters=10 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Output directory root
    #[arg(long, value_name = "DIR", env = OUT_ENV)]
    pub out: Option<PathBuf>,

    /// Training seed; shorthand for --set trainer.seed=N, applied last
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,

    /// Print the resolved configuration and exit without running
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Resume from a full checkpoint written under the same configuration
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Checkpoint to evaluate (full or stripped)
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Full (unstripped) checkpoint; omitted means a fresh seeded network
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Source-domain image to predict on
    #[arg(long, value_name = "PATH")]
    pub source: PathBuf,

    /// Wild image supplying the style statistics
    #[arg(long, value_name = "PATH")]
    pub wild: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Apply the layered configuration sources in their documented order.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for spec in &common.set {
        cfg.apply_set(spec)?;
    }
    if let Some(seed) = common.seed {
        cfg.trainer.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_out(common: &CommonArgs) -> Result<PathBuf> {
    // clap already consulted the environment fallback for `out`
    common.out.clone().ok_or_else(|| {
        Error::Config(format!(
            "no output directory: pass --out DIR or set {OUT_ENV}"
        ))
    })
}

/// Entry point used by the binary. Prints the resolved configuration, then
/// dispatches; callers map the error to an exit code via
/// [`Error::exit_code`].
pub fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Train(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::StylizePreview(a) => &a.common,
        Command::SynthData(a) => &a.common,
    };
    let cfg = resolve_config(common)?;
    print!("{}", cfg.dump());
    if common.dump_config {
        return Ok(());
    }
    match cli.command {
        Command::Train(args) => cmd_train(cfg, &args),
        Command::Eval(args) => cmd_eval(cfg, &args),
        Command::StylizePreview(args) => cmd_preview(cfg, &args),
        Command::SynthData(args) => cmd_synth(cfg, &args),
    }
}

fn mapping_path(cfg: &RunConfig) -> Option<PathBuf> {
    cfg.datapipe.mapping.as_ref().map(PathBuf::from)
}

fn load_eval_sets(cfg: &RunConfig) -> Result<Vec<(String, Dataset)>> {
    let mapping = mapping_path(cfg);
    cfg.datapipe
        .eval
        .iter()
        .map(|(name, root)| {
            Dataset::load(Path::new(root), mapping.as_deref(), DatasetRole::Eval)
                .map(|ds| (name.clone(), ds))
        })
        .collect()
}

fn cmd_train(cfg: RunConfig, args: &TrainArgs) -> Result<()> {
    let out = resolve_out(&args.common)?;
    let mapping = mapping_path(&cfg);
    let source = Dataset::load(
        Path::new(&cfg.datapipe.source_root),
        mapping.as_deref(),
        DatasetRole::Source,
    )?;
    let wild = Dataset::load(Path::new(&cfg.datapipe.wild_root), None, DatasetRole::Wild)?;
    let eval_sets = if cfg.trainer.eval_at_end {
        load_eval_sets(&cfg)?
    } else {
        Vec::new()
    };

    let mut state = match &args.resume {
        Some(ckpt) => TrainState::from_checkpoint(cfg, ckpt, source, wild)?,
        None => TrainState::new(cfg, source, wild)?,
    };
    let artifacts = run_training(&mut state, &out, &eval_sets)?;

    println!("trained to iteration {}", state.iteration());
    println!("loss log: {}", artifacts.log_path.display());
    println!("full checkpoint: {}", artifacts.final_full.display());
    println!("inference checkpoint: {}", artifacts.final_stripped.display());
    if let Some(report) = &artifacts.eval {
        print_report_summary(report);
    }
    Ok(())
}

fn cmd_eval(cfg: RunConfig, args: &EvalArgs) -> Result<()> {
    let out = resolve_out(&args.common)?;
    let (model, meta) = InferenceModel::load_checkpoint(&args.checkpoint)?;
    println!(
        "evaluating {} (iteration {})",
        args.checkpoint.display(),
        meta.iteration
    );
    let eval_sets = load_eval_sets(&cfg)?;
    if eval_sets.is_empty() {
        return Err(Error::Config(
            "no evaluation domains configured: add datapipe.eval entries".into(),
        ));
    }
    let sets: Vec<(String, &Dataset)> = eval_sets
        .iter()
        .map(|(name, ds)| (name.clone(), ds))
        .collect();
    let report = evaluate_domains(&model, &sets, cfg.losses.ignore_id)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io("cli", &out, e))?;
    report.write(&out)?;
    print_report_summary(&report);
    println!("reports written to {}", out.display());
    Ok(())
}

fn print_report_summary(report: &crate::evalreport::EvalReport) {
    for d in &report.domains {
        match d.miou {
            Some(m) => println!("  {}: mIoU {:.2}", d.name, 100.0 * m),
            None => println!("  {}: mIoU undefined (no measurable pixels)", d.name),
        }
    }
    match report.avg {
        Some(avg) => println!("  Avg: {:.2}", 100.0 * avg),
        None => println!("  Avg: undefined"),
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn cmd_synth(cfg: RunConfig, args: &SynthArgs) -> Result<()> {
    let out = resolve_out(&args.common)?;
    let sets = datapipe::synth_toy(cfg.trainer.seed, &cfg.datapipe.toy, &out)?;
    println!(
        "toy dataset written to {} (source {} train / {} eval, {} unseen domains, {} wild images)",
        out.display(),
        sets.source_train.len(),
        sets.source_eval.len(),
        sets.unseen.len(),
        sets.wild.len()
    );
    Ok(())
}

fn cmd_preview(cfg: RunConfig, args: &PreviewArgs) -> Result<()> {
    let out = resolve_out(&args.common)?;
    let assembly = match &args.checkpoint {
        Some(path) => Assembly::load_checkpoint(path)?.0,
        None => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.trainer.seed);
            Assembly::new(cfg.netgraph.clone(), &mut rng)?
        }
    };
    let source = datapipe::read_image(&args.source)?;
    let wild = datapipe::read_image(&args.wild)?;

    let (stats, _) = assembly.forward_wild(&wild)?;
    let (plain, _) = assembly.forward_plain(&source)?;
    let (stylized, _) = assembly.forward_stylized(&source, StatsSource::Wild(&stats))?;

    let plain_map = crate::losses::softmax_probs(&plain.logits)?.argmax_classes();
    let stylized_map = crate::losses::softmax_probs(&stylized.logits)?.argmax_classes();
    let image = side_by_side(&colorize(&plain_map), &colorize(&stylized_map));

    std::fs::create_dir_all(&out).map_err(|e| Error::io("cli", &out, e))?;
    let path = out.join("stylize_preview.png");
    datapipe::write_image(&path, &image)?;
    println!("prediction maps (plain | stylized) written to {}", path.display());
    Ok(())
}

/// Fixed, well-separated class colors: a golden-angle hue walk over HSV with
/// full saturation, so any class count gets distinct colors.
fn class_color(id: u32) -> [f32; 3] {
    if id == 0 {
        return [0.12, 0.12, 0.12];
    }
    let hue = (id as f32 * 0.618_034) % 1.0 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.85 * r, 0.15 + 0.85 * g, 0.15 + 0.85 * b]
}

fn colorize(classes: &ndarray::Array2<u32>) -> Array3<f32> {
    let (h, w) = classes.dim();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for row in 0..h {
        for col in 0..w {
            let c = class_color(classes[[row, col]]);
            for ch in 0..3 {
                out[[ch, row, col]] = c[ch];
            }
        }
    }
    out
}

/// Concatenate two `[3, H, W]` images horizontally with a thin white gap.
fn side_by_side(left: &Array3<f32>, right: &Array3<f32>) -> Array3<f32> {
    let (c, lh, lw) = left.dim();
    let (_, rh, rw) = right.dim();
    let gap = 2;
    let h = lh.max(rh);
    let mut out = Array3::<f32>::from_elem((c, h, lw + gap + rw), 1.0);
    for ch in 0..c {
        for row in 0..lh {
            for col in 0..lw {
                out[[ch, row, col]] = left[[ch, row, col]];
            }
        }
        for row in 0..rh {
            for col in 0..rw {
                out[[ch, row, lw + gap + col]] = right[[ch, row, col]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(set: &[&str], seed: Option<u64>) -> CommonArgs {
        CommonArgs {
            config: None,
            set: set.iter().map(|s| s.to_string()).collect(),
            out: None,
            seed,
            dump_config: false,
        }
    }

    #[test]
    fn overrides_layer_in_order_and_seed_wins() {
        let cfg = resolve_config(&common(
            &["trainer.seed=3", "trainer.total_iters=5", "trainer.total_iters=7"],
            Some(42),
        ))
        .unwrap();
        assert_eq!(cfg.trainer.total_iters, 7);
        assert_eq!(cfg.trainer.seed, 42);
    }

    #[test]
    fn resolution_is_pure() {
        let args = common(&["losses.tau=0.1", "embed.anchor_grid=32"], None);
        let a = resolve_config(&args).unwrap();
        let b = resolve_config(&args).unwrap();
        assert_eq!(a.dump(), b.dump());
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for spec in ["nonsense", "trainer.unknown=1", "losses.tau=-1"] {
            let err = resolve_config(&common(&[spec], None)).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{spec} should be a config error");
        }
    }

    #[test]
    fn missing_out_is_a_config_error() {
        let err = resolve_out(&common(&[], None)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains(OUT_ENV));
    }

    #[test]
    fn class_colors_are_distinct() {
        let colors: Vec<_> = (0..20).map(class_color).collect();
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                let d: f32 = colors[i]
                    .iter()
                    .zip(&colors[j])
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(d > 0.05, "classes {i} and {j} share a color");
            }
        }
    }

    #[test]
    fn side_by_side_preserves_panels() {
        let left = Array3::<f32>::from_elem((3, 4, 5), 0.25);
        let right = Array3::<f32>::from_elem((3, 4, 3), 0.75);
        let joined = side_by_side(&left, &right);
        assert_eq!(joined.dim(), (3, 4, 10));
        assert_eq!(joined[[0, 2, 1]], 0.25);
        assert_eq!(joined[[1, 2, 5]], 1.0);
        assert_eq!(joined[[2, 3, 9]], 0.75);
    }

    #[test]
    fn cli_parses_documented_flags() {
        let cli = Cli::try_parse_from([
            "wildnet",
            "train",
            "--config",
            "toy.cfg",
            "--set",
            "trainer.total_iters=10",
            "--out",
            "/tmp/run",
            "--seed",
            "5",
        ])
        .unwrap();
        match cli.command {
            Command::Train(args) => {
                assert_eq!(args.common.config.as_deref(), Some(Path::new("toy.cfg")));
                assert_eq!(args.common.set, vec!["trainer.total_iters=10"]);
                assert_eq!(args.common.seed, Some(5));
                assert!(args.resume.is_none());
            }
            other => panic!("parsed the wrong command: {other:?}"),
        }
        assert!(Cli::try_parse_from(["wildnet", "train", "--bogus"]).is_err());
    }
}
