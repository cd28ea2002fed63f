//! The standalone manager server: listens on a Unix socket, preloads and
//! patches modules from a directory, and serves clients until SHUTDOWN.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use grd_core::manager::server::serve;
use grd_core::manager::ManagerConfig;
use grd_core::patch::SandboxMode;

#[derive(Parser)]
#[command(
    name = "grd-manager",
    about = "Serve the simulated device to multiple clients"
)]
struct Args {
    /// Unix socket path to listen on.
    #[arg(long)]
    listen: PathBuf,

    /// Simulated device base address.
    #[arg(long, value_parser = parse_u64, default_value = "0x7fa2c0000000")]
    device_base: u64,

    /// Simulated device size in bytes (power of two).
    #[arg(long, value_parser = parse_u64, default_value = "268435456")]
    device_size: u64,

    /// Bounds method applied to every module on ingest.
    #[arg(long, default_value = "fence-bitwise", value_parser = parse_mode)]
    mode: SandboxMode,

    /// Directory of `*.ptx` modules patched and registered at startup.
    #[arg(long)]
    modules_dir: Option<PathBuf>,

    /// Launch native kernels while exactly one client is connected.
    #[arg(long)]
    native_when_solo: bool,

    /// Accept non-memory statements outside the subset when parsing
    /// modules.
    #[arg(long)]
    lenient: bool,

    /// Lower modulo fencing through the reciprocal parameter.
    #[arg(long)]
    inline_reciprocal: bool,

    /// Per-thread instruction budget for launches.
    #[arg(long, default_value_t = grd_core::interp::DEFAULT_STEP_LIMIT)]
    step_limit: u64,
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
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();

    let mut preload = Vec::new();
    if let Some(dir) = &args.modules_dir {
        let entries = match std::fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) => {
                eprintln!("{}: {e}", dir.display());
                return ExitCode::from(1);
            }
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "ptx"))
            .collect();
        paths.sort();
        for p in paths {
            match std::fs::read_to_string(&p) {
                Ok(text) => preload.push((p.display().to_string(), text)),
                Err(e) => {
                    eprintln!("{}: {e}", p.display());
                    return ExitCode::from(1);
                }
            }
        }
    }

    let cfg = ManagerConfig {
        device_base: args.device_base,
        device_size: args.device_size,
        mode: args.mode,
        strict_parse: !args.lenient,
        inline_reciprocal: args.inline_reciprocal,
        native_when_solo: args.native_when_solo,
        protected: true,
        step_limit: args.step_limit,
    };

    // Stale socket files from unclean exits block rebinding.
    let _ = std::fs::remove_file(&args.listen);
    let listener = match std::os::unix::net::UnixListener::bind(&args.listen) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("{}: {e}", args.listen.display());
            return ExitCode::from(1);
        }
    };
    log::info!("listening on {}", args.listen.display());

    match serve(listener, cfg, preload) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
