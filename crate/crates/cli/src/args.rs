use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use comol_core::{DType, Method};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "comol-lab", version, about = "Core-space mixture-of-LoRA lab: accounting, checks, training, benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Trainable parameter counts.
    Count(CountArgs),
    /// FLOP counts (general and square forms).
    Flops(ConfigArgs),
    /// Params(x) / FLOPs(x) table for every method at one shape.
    Table1(ConfigArgs),
    /// Fused vs output-level CoMoL forward over a seed range.
    EquivCheck(CheckArgs),
    /// Analytic vs finite-difference gradients over a seed range.
    GradCheck(CheckArgs),
    /// Re-parameterize a LoRA or MoE-LoRA checkpoint into core-space form.
    SvdConvert(ConvertArgs),
    /// Train one layer on the synthetic task.
    Train(TrainArgs),
    /// Latency microbenchmark of the adapter forwards.
    Bench(BenchArgs),
    /// Print a checkpoint's manifest and tensor norms.
    Inspect(InspectArgs),
}

/// Flags mirror the config-file keys and override them.
#[derive(Args, Debug, Default, Clone)]
pub struct ShapeFlags {
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub num_experts: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ShapeFlags,
    /// Directory for machine-readable output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Model-dimension file: totals over every listed projection.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Inclusive seed range `a..b`, or a single seed.
    #[arg(long)]
    pub seeds: Option<String>,
    #[command(flatten)]
    pub shape: ShapeFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Checkpoint directory holding a lora, moe_* or smear layer.
    #[arg(long)]
    pub input: PathBuf,
    /// Destination checkpoint directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Expert whose singular bases become the shared ones.
    #[arg(long, default_value_t = 0)]
    pub anchor: usize,
    /// Seed for the fresh core-space router.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ShapeFlags,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub r_true: Option<usize>,
    #[arg(long)]
    pub num_sequences: Option<usize>,
    #[arg(long)]
    pub mix_rate: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub aux_loss_coef: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<DType>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub shape: ShapeFlags,
    #[arg(long, default_value_t = 30)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also time CoMoL evaluated output-level.
    #[arg(long)]
    pub reference: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint directory.
    pub path: PathBuf,
}

impl ShapeFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let l = &mut cfg.layer;
        if let Some(v) = self.method {
            l.method = v;
        }
        if let Some(v) = self.m {
            l.m = v;
        }
        if let Some(v) = self.n {
            l.n = v;
        }
        if let Some(v) = self.r {
            l.r = v;
        }
        if let Some(v) = self.num_experts {
            l.num_experts = v;
        }
        if let Some(v) = self.top_k {
            l.top_k = Some(v);
        }
        if let Some(v) = self.alpha {
            l.alpha = Some(v);
        }
        if let Some(v) = self.seq_len {
            l.seq_len = v;
        }
    }
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.shape.apply(cfg);
        let t = &mut cfg.task;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(t.clusters, self.clusters);
        set!(t.r_true, self.r_true);
        set!(t.num_sequences, self.num_sequences);
        set!(t.mix_rate, self.mix_rate);
        set!(t.noise, self.noise);
        let tr = &mut cfg.train;
        set!(tr.steps, self.steps);
        set!(tr.learning_rate, self.learning_rate);
        set!(tr.batch_size, self.batch_size);
        set!(tr.aux_loss_coef, self.aux_loss_coef);
        set!(tr.eval_every, self.eval_every);
        set!(cfg.seed, self.seed);
        set!(cfg.dtype, self.dtype);
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
    }
}

/// Parses `a..b` (inclusive) or a single seed.
pub fn parse_seeds(s: &str) -> Result<std::ops::RangeInclusive<u64>, String> {
    let parse = |v: &str| v.trim().parse::<u64>().map_err(|_| format!("invalid seed `{v}` in `{s}`"));
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (parse(a)?, parse(b.strip_prefix('=').unwrap_or(b))?);
            if a > b {
                return Err(format!("empty seed range `{s}`"));
            }
            Ok(a..=b)
        }
        None => {
            let a = parse(s)?;
            Ok(a..=a)
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: comol_core::Error| e.to_string())
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    s.parse().map_err(|e: comol_core::Error| e.to_string())
}
