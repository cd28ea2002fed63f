//! Offline PTX sandboxing: reads a `.ptx` file, rewrites every kernel with
//! the selected bounds method, and writes the sandboxed module.
//!
//! Exit codes: 0 success, 1 parse error, 2 unsupported feature.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use grd_core::patch::{
    instrumentation_report_json, sandbox_module, PatchError, PatchOptions, SandboxMode,
};
use grd_core::ptx::{parse_module_opts, ParseOptions, PtxError};

#[derive(Parser)]
#[command(name = "grd-patch", about = "Sandbox the kernels of a PTX module")]
struct Args {
    /// Input PTX file.
    input: PathBuf,

    /// Output path for the sandboxed module (defaults to stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,

    /// Bounds method: fence-bitwise, fence-modulo, or check.
    #[arg(long, default_value = "fence-bitwise", value_parser = parse_mode)]
    mode: SandboxMode,

    /// Accept non-memory statements outside the subset, preserving them
    /// verbatim.
    #[arg(long)]
    lenient: bool,

    /// Lower modulo fencing through the reciprocal parameter instead of
    /// rem.u64.
    #[arg(long)]
    inline_reciprocal: bool,

    /// Write the instrumentation report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<SandboxMode, String> {
    SandboxMode::from_name(s).ok_or_else(|| format!("unknown mode '{s}'"))
}

fn main() -> ExitCode {
    let args = Args::parse();

    let text = match std::fs::read_to_string(&args.input) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: {e}", args.input.display());
            return ExitCode::from(1);
        }
    };

    let opts = ParseOptions {
        strict: !args.lenient,
    };
    let parsed = match parse_module_opts(&text, opts) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}:{}", args.input.display(), e);
            let code = match e {
                PtxError::Unsupported { .. } => 2,
                _ => 1,
            };
            return ExitCode::from(code);
        }
    };
    for w in &parsed.warnings {
        eprintln!("{}: warning: {w}", args.input.display());
    }

    let popts = PatchOptions {
        mode: args.mode,
        inline_reciprocal: args.inline_reciprocal,
    };
    let (patched, report) = match sandbox_module(&parsed.module, &popts) {
        Ok(out) => out,
        Err(e) => {
            eprintln!("{}: {e}", args.input.display());
            let code = match e {
                PatchError::Unsupported { .. } | PatchError::AlreadySandboxed { .. } => 2,
                _ => 1,
            };
            return ExitCode::from(code);
        }
    };

    let rendered = patched.emit();
    let write_result = match &args.output {
        Some(path) => std::fs::write(path, rendered),
        None => {
            print!("{rendered}");
            Ok(())
        }
    };
    if let Err(e) = write_result {
        eprintln!("writing output: {e}");
        return ExitCode::from(1);
    }

    if let Some(path) = &args.report {
        if let Err(e) = std::fs::write(path, instrumentation_report_json(&report)) {
            eprintln!("writing report: {e}");
            return ExitCode::from(1);
        }
    }
    ExitCode::SUCCESS
}
