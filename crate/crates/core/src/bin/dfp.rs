use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dfp::arith::shadow_check_default;
use dfp::harness::{
    bench_conv, bench_gemm, cmd_compare, cmd_quantize, cmd_train, parse_conv_spec, write_rows, BenchData, BenchOptions,
    PolicyKind, Tolerances,
};
use dfp::tensor::RoundingMode;
use dfp::train::{RunPrecision, TrainConfig};

/// Dynamic fixed point tensors, kernels and training.
#[derive(Parser)]
#[command(name = "dfp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize an FP32 DFT1 tensor and report residuals.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 16)]
        bits: u32,
        /// nearest, biased, stochastic or stochastic:<seed>.
        #[arg(long, default_value = "nearest")]
        round: RoundingMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark the GEMM kernel; writes CSV rows to stdout.
    BenchGemm {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Benchmark the forward convolution kernel; writes CSV rows to stdout.
    BenchConv {
        /// C,K,H,W,KH,KW,S,pad
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[command(flatten)]
        bench: BenchArgs,
    },
    /// Train a model and write metrics, resolved config and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// IDX directory or synthetic spec such as gauss2:n=1000.
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "dfp16")]
        precision: RunPrecision,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two metrics files; exit code 0 on pass, 1 on fail.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0.005)]
        tol_acc: f64,
        #[arg(long, default_value_t = 0.10)]
        tol_loss: f64,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    icblk: Option<usize>,
    #[arg(long)]
    rb: Option<usize>,
    #[arg(long, default_value = "empirical")]
    policy: PolicyKind,
    /// Strict: maximum chain. Empirical: chain target.
    #[arg(long)]
    chain: Option<usize>,
    #[arg(long, default_value_t = 16)]
    bits: u32,
    #[arg(long, default_value_t = 1)]
    pre_shift: u32,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// gaussian, uniform or adversarial.
    #[arg(long, default_value = "gaussian")]
    data: BenchData,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable 64-bit overflow shadowing (on by default for benchmarks).
    #[arg(long)]
    no_shadow: bool,
}

impl BenchArgs {
    fn options(&self) -> BenchOptions {
        BenchOptions {
            icblk: self.icblk,
            rb: self.rb,
            policy: self.policy,
            chain: self.chain,
            bits: self.bits,
            pre_shift: self.pre_shift,
            trials: self.trials,
            data: self.data,
            seed: self.seed,
            shadow_check: !self.no_shadow || shadow_check_default(),
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Quantize { input, bits, round, out } => {
            let r = cmd_quantize(&input, bits, round, &out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::BenchGemm { m, n, k, bench } => {
            write_rows(&bench_gemm(m, n, k, &bench.options())?, io::stdout())?;
        }
        Command::BenchConv { spec, batch, bench } => {
            let spec = parse_conv_spec(&spec)?;
            write_rows(&bench_conv(&spec, batch, &bench.options())?, io::stdout())?;
        }
        Command::Train {
            config,
            data,
            precision,
            seed,
            out,
        } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = TrainConfig::from_json(&text)?;
            let (outcome, paths) = cmd_train(&cfg, &data, precision, seed, &out)?;
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            let val = outcome.final_val.as_ref();
            let train = outcome.final_train.as_ref();
            println!(
                "{precision}: {} iterations, val loss {} acc {}, train loss {} acc {}",
                outcome.metrics.len(),
                fmt(val.map(|e| e.loss)),
                fmt(val.and_then(|e| e.accuracy)),
                fmt(train.map(|e| e.loss)),
                fmt(train.and_then(|e| e.accuracy)),
            );
            println!(
                "wrote {}, {}, {}",
                paths.metrics.display(),
                paths.config.display(),
                paths.checkpoint.display()
            );
        }
        Command::Compare { a, b, tol_acc, tol_loss } => {
            let r = cmd_compare(&a, &b, Tolerances { acc: tol_acc, loss: tol_loss })?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            println!("{}", if r.pass { "PASS" } else { "FAIL" });
            return Ok(if r.pass { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
