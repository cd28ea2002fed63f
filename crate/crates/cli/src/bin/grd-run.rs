//! Executes a multi-client scenario script against an in-process manager
//! (hermetic and deterministic), or against an external manager socket with
//! `--connect`. Exit code 0 means every expectation held and no operation
//! failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use grd_core::manager::{ManagerConfig, TaskKind, TaskOutcome};
use grd_core::patch::SandboxMode;
use grd_core::scenario::{parse_scenario, RunConfig, ScenarioRunner};

#[derive(Parser)]
#[command(name = "grd-run", about = "Run a multi-client scenario script")]
struct Args {
    /// Scenario script path; `load` paths resolve relative to it.
    scenario: PathBuf,

    /// Bounds method used when patching loaded modules.
    #[arg(long, default_value = "fence-bitwise", value_parser = parse_mode)]
    mode: SandboxMode,

    /// Disable kernel sandboxing: launches use native kernels with
    /// unmodified arguments. Transfers are still validated.
    #[arg(long)]
    unprotected: bool,

    /// Simulated device base address.
    #[arg(long, value_parser = parse_u64, default_value = "0x7fa2c0000000")]
    device_base: u64,

    /// Simulated device size in bytes (power of two).
    #[arg(long, value_parser = parse_u64, default_value = "268435456")]
    device_size: u64,

    /// Per-thread instruction budget for launches.
    #[arg(long, default_value_t = grd_core::interp::DEFAULT_STEP_LIMIT)]
    step_limit: u64,

    /// Lower modulo fencing through the reciprocal parameter.
    #[arg(long)]
    inline_reciprocal: bool,

    /// Dump dispatch order and access-trace summaries.
    #[arg(long)]
    trace: bool,

    /// Drive an external manager over this socket instead of an in-process
    /// one.
    #[arg(long)]
    connect: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<SandboxMode, String> {
    SandboxMode::from_name(s).ok_or_else(|| format!("unknown mode '{s}'"))
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let parsed = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        s.parse()
    };
    parsed.map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();

    let text = match std::fs::read_to_string(&args.scenario) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: {e}", args.scenario.display());
            return ExitCode::from(2);
        }
    };
    let script = match parse_scenario(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: {e}", args.scenario.display());
            return ExitCode::from(2);
        }
    };
    let base_dir = args
        .scenario
        .parent()
        .map(|p| p.to_path_buf())
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."));

    let manager_cfg = ManagerConfig {
        device_base: args.device_base,
        device_size: args.device_size,
        mode: args.mode,
        inline_reciprocal: args.inline_reciprocal,
        protected: !args.unprotected,
        step_limit: args.step_limit,
        ..ManagerConfig::default()
    };

    let runner = if let Some(socket) = &args.connect {
        ScenarioRunner::over_socket(script, base_dir, socket)
    } else {
        ScenarioRunner::in_process(script, RunConfig::new(manager_cfg, base_dir))
    };
    let report = match runner.and_then(|r| r.run()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };

    if args.trace {
        for ev in &report.dispatch {
            let what = match &ev.kind {
                TaskKind::Launch { kernel } => format!("launch {kernel}"),
                TaskKind::CopyD2d { dst, src, len } => {
                    format!("d2d dst={dst:#x} src={src:#x} len={len}")
                }
            };
            let outcome = match &ev.outcome {
                TaskOutcome::Completed { trace: Some(t) } => {
                    format!("ok accesses={} oob_exits={}", t.entries.len(), t.oob_exits)
                }
                TaskOutcome::Completed { trace: None } => "ok".to_string(),
                TaskOutcome::Failed { error } => format!("failed: {error}"),
            };
            println!(
                "dispatch {} {} {} [{}] {}",
                ev.seq, ev.conn, ev.app, what, outcome
            );
        }
        for (client, line, bytes) in &report.d2h_log {
            let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
            println!("d2h {client} line {line}: {hex}");
        }
    }

    if report.passed() {
        if report.dispatch.is_empty() {
            println!("ok: {} expectation(s) held", report.expectations_checked);
        } else {
            println!(
                "ok: {} expectation(s) held across {} dispatch(es)",
                report.expectations_checked,
                report.dispatch.len()
            );
        }
        ExitCode::SUCCESS
    } else {
        for f in &report.failures {
            eprintln!("line {} ({}): {}", f.line, f.client, f.message);
        }
        ExitCode::from(1)
    }
}
