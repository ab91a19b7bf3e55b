use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ep_cli::footprint::{allocated_receive_bytes, footprint, ll_config};
use ep_cli::harness::{verify_grid, ExpertStub, Grid};
use ep_cli::report::write_csv;
use ep_cli::run::{run_workload, RunSpec};
use ep_core::config::{Algorithm, EpConfig, LlLayout};
use ep_core::fabric::write_trace;
use ep_core::Dtype;

#[derive(Parser)]
#[command(name = "epsim", about = "Simulated expert-parallel dispatch/combine harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded dispatch/combine iterations and emit stats CSV.
    Run(RunArgs),
    /// Sweep the verification grid against the oracle.
    Verify(VerifyArgs),
    /// Compare legacy and optimized LL receive-buffer footprints.
    Footprint(FootprintArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ll,
    Ht,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Optimized,
    Legacy,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    Bf16,
    Fp8,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::Bf16 => Dtype::BF16,
            DtypeArg::Fp8 => Dtype::FP8,
        }
    }
}

impl From<LayoutArg> for LlLayout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Optimized => LlLayout::Optimized,
            LayoutArg::Legacy => LlLayout::Legacy,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
    #[arg(long)]
    ranks: Option<usize>,
    #[arg(long)]
    ranks_per_node: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    /// Tokens per rank.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long, value_enum)]
    dtype: Option<DtypeArg>,
    /// Send per-block scales with the tokens (implied by fp8).
    #[arg(long)]
    scales: bool,
    #[arg(long, default_value_t = 1)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    send_only: bool,
    #[arg(long, value_enum, default_value_t = ExpertStub::Scale)]
    stub: ExpertStub,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write the fabric operation trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// JSON group config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// First of three delay seeds.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct FootprintArgs {
    #[arg(long, default_value_t = 512)]
    experts: usize,
    #[arg(long, default_value_t = 64)]
    ranks: usize,
    #[arg(long, default_value_t = 8)]
    topk: usize,
    #[arg(long, default_value_t = 7168)]
    hidden: usize,
    #[arg(long, default_value_t = 128)]
    tokens: usize,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
    /// Also create both groups and report the bytes actually registered.
    #[arg(long)]
    allocate: bool,
}

fn bad(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn build_config(a: &RunArgs) -> Result<EpConfig, String> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => EpConfig { num_ranks: 4, ranks_per_node: 4, num_experts: 16, top_k: 2, hidden: 128, max_tokens_per_rank: 16, ..Default::default() },
    };
    if let Some(m) = a.mode {
        cfg.algorithm = match m {
            Mode::Ll => Algorithm::Ll,
            Mode::Ht => Algorithm::Ht,
        };
    }
    if let Some(l) = a.layout {
        cfg.ll_layout = l.into();
    }
    if let Some(n) = a.ranks {
        cfg.num_ranks = n;
        if a.ranks_per_node.is_none() && a.config.is_none() {
            cfg.ranks_per_node = n;
        }
    }
    if let Some(r) = a.ranks_per_node {
        cfg.ranks_per_node = r;
    }
    if let Some(e) = a.experts {
        cfg.num_experts = e;
    }
    if let Some(b) = a.tokens {
        cfg.max_tokens_per_rank = b;
    }
    if let Some(h) = a.hidden {
        cfg.hidden = h;
    }
    if let Some(k) = a.topk {
        cfg.top_k = k;
    }
    if let Some(d) = a.dtype {
        cfg.token_dtype = d.into();
        cfg.with_scales = cfg.token_dtype == Dtype::FP8;
    }
    if a.scales {
        cfg.with_scales = true;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn cmd_run(a: RunArgs) -> ExitCode {
    let cfg = match build_config(&a) {
        Ok(c) => c,
        Err(e) => return bad(e),
    };
    let spec = RunSpec { iters: a.iters, seed: a.seed, stub: a.stub, send_only: a.send_only, trace: a.trace.is_some() };
    if a.send_only && cfg.algorithm == Algorithm::Ht {
        return bad("--send-only is only available in ll mode");
    }
    let out = match run_workload(&cfg, spec) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("run failed: {e}");
            return ExitCode::from(1);
        }
    };
    let written = match &a.output {
        Some(p) => File::create(p).map_err(csv::Error::from).and_then(|f| write_csv(&out.rows, f)),
        None => write_csv(&out.rows, io::stdout().lock()),
    };
    if let Err(e) = written {
        eprintln!("writing stats failed: {e}");
        return ExitCode::from(1);
    }
    if let Some(p) = &a.trace {
        if let Err(e) = File::create(p).and_then(|mut f| write_trace(&out.trace, &mut f)) {
            eprintln!("writing trace failed: {e}");
            return ExitCode::from(1);
        }
    }
    if let Some((engine, oracle)) = out.ht_inter_node {
        let bound = cfg.num_ranks as u64 * cfg.max_tokens_per_rank as u64 * cfg.top_k as u64 * a.iters;
        eprintln!("inter_node_msgs={engine} dedup_oracle={oracle} N*B*K*iters={bound}");
    }
    eprintln!("max_combine_error={:e}", out.max_combine_error);
    if out.violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        for v in &out.violations {
            eprintln!("violation: {v}");
        }
        ExitCode::from(1)
    }
}

fn cmd_verify(a: VerifyArgs) -> ExitCode {
    let mut grid = Grid { hidden: a.hidden, delay_seeds: vec![a.seed, a.seed + 1, a.seed + 2], ..Grid::default() };
    match a.mode {
        Some(Mode::Ll) => grid.algorithms = vec![Algorithm::Ll],
        Some(Mode::Ht) => grid.algorithms = vec![Algorithm::Ht],
        None => {}
    }
    if let Some(l) = a.layout {
        grid.layouts = vec![l.into()];
    }
    let start = Instant::now();
    let rep = verify_grid(&grid);
    println!(
        "cases={} passed={} max_rel_error_ll={:e} max_rel_error_ht={:e} elapsed={:.2}s",
        rep.cases,
        rep.passed,
        rep.max_error_ll,
        rep.max_error_ht,
        start.elapsed().as_secs_f64()
    );
    match rep.first_failure {
        None => ExitCode::SUCCESS,
        Some(m) => {
            println!("counterexample: {m}");
            ExitCode::from(1)
        }
    }
}

fn cmd_footprint(a: FootprintArgs) -> ExitCode {
    let dtype: Dtype = a.dtype.into();
    let rep = match footprint(a.experts, a.ranks, a.topk, a.hidden, a.tokens, dtype) {
        Ok(r) => r,
        Err(e) => return bad(e),
    };
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "E={} N={} K={} H={} B={} dtype={dtype}", a.experts, a.ranks, a.topk, a.hidden, a.tokens);
    let _ = writeln!(out, "legacy_bytes    {}", rep.legacy_bytes);
    let _ = writeln!(out, "optimized_bytes {}", rep.optimized_bytes);
    let _ = writeln!(out, "formula_ratio   {:.4}", rep.formula_ratio);
    let _ = writeln!(out, "measured_ratio  {:.4}", rep.measured_ratio);
    if a.allocate {
        let alloc = |layout| allocated_receive_bytes(&ll_config(a.experts, a.ranks, a.topk, a.hidden, a.tokens, dtype, layout));
        match (alloc(LlLayout::Legacy), alloc(LlLayout::Optimized)) {
            (Ok(l), Ok(o)) => {
                let _ = writeln!(out, "allocated_legacy_bytes    {l}");
                let _ = writeln!(out, "allocated_optimized_bytes {o}");
                let _ = writeln!(out, "allocated_ratio           {:.4}", l as f64 / o as f64);
            }
            (Err(e), _) | (_, Err(e)) => {
                eprintln!("allocation failed: {e}");
                return ExitCode::from(1);
            }
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Footprint(a) => cmd_footprint(a),
    }
}
