//! Command-line front end: `gen`, `train`, `eval` and `ablate`.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags or invalid
//! settings), 2 on data or format errors.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mmsfit::ablation::{render_table, run_ablation, AblationConfig};
use mmsfit::databench::{
    generate, partition_classes, BenchmarkSpec, EmbeddingArchive, SplitConfig, SplitKind,
};
use mmsfit::eval::{zero_shot_evaluate, EvalOptions, EvalReport};
use mmsfit::experiment::{evaluate_run, train_run, ExperimentConfig, ExperimentError};
use mmsfit::losses::{LossConfig, LossError};
use mmsfit::model::{HeadKind, Lift};
use mmsfit::runfile::{RunFile, Weights};
use mmsfit::trainer::{EnsembleMode, TrainError, TrainerConfig, REFERENCE_BASE_LR};
use mmsfit::{Execution, MarginMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mmsfit",
    version,
    about = "Margin metric softmax fine-tuning with Beta moving averages"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark archive.
    Gen(GenArgs),
    /// Fine-tune on the training split and write a run file.
    Train(TrainCmd),
    /// Evaluate a run (or the zero-shot model) on one split.
    Eval(EvalArgs),
    /// Sweep the margin × ensemble grid over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 48)]
    input_dim: usize,
    /// Samples per class per domain.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Checked for validity only; splits are chosen at train time.
    #[arg(long, default_value_t = 0.5)]
    base_fraction: f64,
    /// Checked for validity only; splits are chosen at train time.
    #[arg(long, default_value_t = 0)]
    test_domain: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.5)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Clone)]
struct SplitArgs {
    #[arg(long, default_value_t = 0)]
    test_domain: usize,
    #[arg(long, default_value_t = 0.5)]
    base_fraction: f64,
    /// Seed of the base/new class shuffle.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Keep at most this many training samples per class and domain.
    #[arg(long)]
    shots: Option<usize>,
}

impl SplitArgs {
    fn config(&self) -> SplitConfig {
        SplitConfig {
            base_fraction: self.base_fraction,
            test_domain: self.test_domain,
            seed: self.split_seed,
            shots: self.shots,
        }
    }
}

#[derive(Debug, Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    /// Base learning rate; `reference` selects the large-encoder setting.
    #[arg(long, default_value = "3e-3", value_parser = parse_lr)]
    lr: f64,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 36)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// adaptive | fixed:<m> | none
    #[arg(long, default_value = "adaptive", value_parser = parse_margin)]
    margin: MarginMode,
    /// bma | ema:<decay> | avg | none
    #[arg(long, default_value = "bma", value_parser = parse_ensemble)]
    ensemble: EnsembleMode,
    /// metric | linear | linear-normalized
    #[arg(long, default_value = "metric", value_parser = parse_head)]
    head: HeadKind,
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Fold every k-th step into the ensemble.
    #[arg(long, default_value_t = 1)]
    bma_every: usize,
    #[command(flatten)]
    split: SplitArgs,
}

impl TrainArgs {
    fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            split: self.split.config(),
            trainer: TrainerConfig {
                steps: self.steps,
                batch_size: self.batch,
                base_lr: self.lr,
                weight_decay: self.weight_decay,
                beta: self.beta,
                loss: LossConfig {
                    tau: self.tau,
                    lambda: self.lambda,
                    margin: self.margin,
                },
                seed: self.seed,
                ensemble: self.ensemble,
                ensemble_every: self.bma_every,
                keep_trajectory: false,
            },
            hidden: self.hidden,
            head: self.head,
        }
    }
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run file from `train`; omit together with --zero-shot.
    #[arg(long, required_unless_present = "zero_shot")]
    run: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// domain | open | both | train
    #[arg(long, default_value = "both")]
    split: SplitKind,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    json: bool,
    /// Evaluate the final iterate instead of the ensemble.
    #[arg(long)]
    final_weights: bool,
    /// Evaluate the untrained model; split flags then apply.
    #[arg(long, conflicts_with = "run")]
    zero_shot: bool,
    /// Temperature for reported scores (zero-shot only; runs use their own).
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[command(flatten)]
    split_args: SplitArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long)]
    json: bool,
    /// Run seeds one after another instead of concurrently.
    #[arg(long)]
    sequential: bool,
}

fn parse_lr(s: &str) -> Result<f64, String> {
    if s == "reference" {
        return Ok(REFERENCE_BASE_LR);
    }
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_margin(s: &str) -> Result<MarginMode, String> {
    match s {
        "adaptive" => Ok(MarginMode::Adaptive),
        "none" => Ok(MarginMode::None),
        _ => match s.strip_prefix("fixed:") {
            Some(m) => m
                .parse()
                .map(MarginMode::Fixed)
                .map_err(|e| format!("fixed margin '{m}': {e}")),
            None => Err(format!("expected adaptive, fixed:<m> or none, got '{s}'")),
        },
    }
}

fn parse_ensemble(s: &str) -> Result<EnsembleMode, String> {
    match s {
        "bma" => Ok(EnsembleMode::Bma),
        "avg" => Ok(EnsembleMode::Avg),
        "none" => Ok(EnsembleMode::None),
        _ => match s.strip_prefix("ema:") {
            Some(d) => d
                .parse()
                .map(|decay| EnsembleMode::Ema { decay })
                .map_err(|e| format!("EMA decay '{d}': {e}")),
            None => Err(format!("expected bma, ema:<decay>, avg or none, got '{s}'")),
        },
    }
}

fn parse_head(s: &str) -> Result<HeadKind, String> {
    match s {
        "metric" => Ok(HeadKind::Metric),
        "linear" => Ok(HeadKind::Linear {
            normalize_input: false,
        }),
        "linear-normalized" => Ok(HeadKind::Linear {
            normalize_input: true,
        }),
        _ => Err(format!(
            "expected metric, linear or linear-normalized, got '{s}'"
        )),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn data(e: impl std::fmt::Display) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match &e {
            ExperimentError::Train(TrainError::Config(_))
            | ExperimentError::Train(TrainError::Loss(LossError::Config(_))) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Data(e.to_string()),
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Ablate(a) => ablate(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_DATA
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes()).map_err(Failure::data)
}

fn load_archive(path: &PathBuf) -> Result<EmbeddingArchive, Failure> {
    EmbeddingArchive::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn gen(a: GenArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let spec = BenchmarkSpec {
        num_classes: a.classes,
        num_domains: a.domains,
        embed_dim: a.embed_dim,
        input_dim: a.input_dim,
        samples_per_class_per_domain: a.samples,
        base_fraction: a.base_fraction,
        test_domain: a.test_domain,
        noise_sigma: a.noise,
        domain_strength: a.strength,
        seed: a.seed,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let archive = generate(&spec).map_err(Failure::data)?;
    archive
        .save(&a.out)
        .map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    emit(
        out,
        &format!(
            "wrote {} samples ({} classes, {} domains) to {}\n",
            archive.num_samples(),
            archive.num_classes(),
            archive.num_domains,
            a.out.display()
        ),
    )
}

fn check_config(cfg: &ExperimentConfig) -> Result<(), Failure> {
    cfg.trainer
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    partition_classes(4, cfg.split.base_fraction, 0).map_err(|e| Failure::Usage(e.to_string()))?;
    if cfg.hidden == 0 {
        return Err(Failure::Usage("hidden width must be >= 1".into()));
    }
    Ok(())
}

fn train(a: TrainCmd, out: &mut dyn Write) -> Result<(), Failure> {
    let cfg = a.train.experiment();
    check_config(&cfg)?;
    let archive = load_archive(&a.train.data)?;
    let (run, result, splits) = train_run(&archive, &cfg)?;
    run.save(&a.out)
        .map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    emit(
        out,
        &format!(
            "trained {} steps on {} samples ({} base classes): loss {:.6} -> {:.6}; wrote {}\n",
            cfg.trainer.steps,
            splits.train.len(),
            splits.base_classes.len(),
            result.initial_loss,
            result.final_loss,
            a.out.display()
        ),
    )
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if a.topk == Some(0) {
        return Err(Failure::Usage("--topk must be >= 1".into()));
    }
    let archive = load_archive(&a.data)?;
    let report = match &a.run {
        Some(path) => {
            let run = RunFile::load(path)
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            let weights = if a.final_weights {
                Weights::Final
            } else {
                Weights::Ensemble
            };
            let opts = EvalOptions {
                tau: run.config.trainer.loss.tau,
                topk: a.topk,
                execution: Execution::default(),
            };
            let mut report = evaluate_run(&run, &archive, a.split, weights, &opts)?;
            report.config = serde_json::json!({
                "run": run.config,
                "weights": if a.final_weights { "final" } else { "ensemble" },
            });
            report
        }
        None => zero_shot(&a, &archive)?,
    };
    if a.json {
        let text = serde_json::to_string_pretty(&report).map_err(Failure::data)?;
        emit(out, &format!("{text}\n"))
    } else {
        emit(out, &render_report(&report))
    }
}

fn zero_shot(a: &EvalArgs, archive: &EmbeddingArchive) -> Result<EvalReport, Failure> {
    if !(a.tau > 0.0 && a.tau.is_finite()) {
        return Err(Failure::Usage(format!("tau must be > 0, got {}", a.tau)));
    }
    let split_cfg = a.split_args.config();
    partition_classes(4, split_cfg.base_fraction, 0).map_err(|e| Failure::Usage(e.to_string()))?;
    let bank = archive.bank().map_err(Failure::data)?;
    let splits = mmsfit::databench::split(archive, &split_cfg).map_err(Failure::data)?;
    let lift = Lift::canonical(archive.input_dim, archive.embed_dim).map_err(Failure::data)?;
    let opts = EvalOptions {
        tau: a.tau,
        topk: a.topk,
        execution: Execution::default(),
    };
    let mut report = zero_shot_evaluate(
        &bank,
        splits.get(a.split),
        &lift,
        &splits.base_mask(bank.num_classes()),
        &opts,
    )
    .map_err(Failure::data)?;
    report.split = a.split.name().to_string();
    report.config = serde_json::json!({ "zero_shot": true, "split": split_cfg, "tau": a.tau });
    Ok(report)
}

fn render_report(r: &EvalReport) -> String {
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let mut s = format!(
        "split {}: base {} (n={}), new {} (n={}), H {}, all {}\n",
        r.split,
        pct(r.acc_base),
        r.n_base,
        pct(r.acc_new),
        r.n_new,
        pct(r.acc_h),
        pct(r.acc_all)
    );
    for (d, acc) in &r.per_domain {
        s.push_str(&format!("  domain {d}: {}\n", pct(*acc)));
    }
    if let Some(top) = &r.topk {
        for t in top {
            let ranked: Vec<String> = t
                .ranked
                .iter()
                .map(|c| format!("{}:{:.3}", c.class, c.score))
                .collect();
            s.push_str(&format!(
                "  sample {} (label {}): {}\n",
                t.sample,
                t.label,
                ranked.join(" ")
            ));
        }
    }
    s
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be >= 1".into()));
    }
    let base = a.train.experiment();
    check_config(&base)?;
    let archive = load_archive(&a.train.data)?;
    let bank = archive.bank().map_err(Failure::data)?;
    let mut cfg = AblationConfig::full_grid(base, &bank, a.seeds);
    if a.sequential {
        cfg.execution = Execution::Sequential;
    }
    let report = run_ablation(&archive, &cfg)?;
    if a.json {
        let text = serde_json::to_string_pretty(&report).map_err(Failure::data)?;
        emit(out, &format!("{text}\n"))
    } else {
        emit(out, &render_table(&report, cfg.base.head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_grammar() {
        assert_eq!(parse_margin("fixed:0.25"), Ok(MarginMode::Fixed(0.25)));
        assert!(parse_margin("fixed:x").is_err());
        assert!(parse_margin("big").is_err());
        assert_eq!(
            parse_ensemble("ema:0.9"),
            Ok(EnsembleMode::Ema { decay: 0.9 })
        );
        assert!(parse_ensemble("swa").is_err());
        assert_eq!(parse_lr("reference"), Ok(5e-6));
        assert_eq!(
            parse_head("linear"),
            Ok(HeadKind::Linear {
                normalize_input: false
            })
        );
        assert_eq!(
            parse_head("linear-normalized"),
            Ok(HeadKind::Linear {
                normalize_input: true
            })
        );
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(["mmsfit", "gen", "--bogus"], &mut out, &mut err);
        assert_eq!(code, EXIT_USAGE);
        assert!(String::from_utf8(err).unwrap().contains("Usage"));
    }

    #[test]
    fn help_goes_to_stdout() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["mmsfit", "--help"], &mut out, &mut err), EXIT_OK);
        assert!(!out.is_empty() && err.is_empty());
    }
}
