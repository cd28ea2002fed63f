//! Static accounting over PTX files: kernels, functions, loads, stores,
//! atomics, and indirect branches, in the column style of a coverage table.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use grd_core::ptx::{list_memory_ops, parse_module_opts, Opcode, ParseOptions, Statement};

#[derive(Parser)]
#[command(
    name = "grd-inspect",
    about = "Count kernels and memory instructions in PTX files"
)]
struct Args {
    /// PTX files, or directories scanned for `*.ptx`.
    #[arg(required = true)]
    paths: Vec<PathBuf>,

    /// Accept non-memory statements outside the subset.
    #[arg(long)]
    lenient: bool,

    /// Emit the counts as JSON instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Default, Clone, Copy, Serialize)]
struct Counts {
    kernels: u64,
    funcs: u64,
    loads: u64,
    stores: u64,
    atomics: u64,
    indirect_branches: u64,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.kernels += other.kernels;
        self.funcs += other.funcs;
        self.loads += other.loads;
        self.stores += other.stores;
        self.atomics += other.atomics;
        self.indirect_branches += other.indirect_branches;
    }
}

#[derive(Serialize)]
struct FileCounts {
    name: String,
    #[serde(flatten)]
    counts: Counts,
}

fn count_file(text: &str, lenient: bool) -> Result<Counts, String> {
    let parsed =
        parse_module_opts(text, ParseOptions { strict: !lenient }).map_err(|e| e.to_string())?;
    let m = parsed.module;
    let mut c = Counts {
        kernels: m.entries.len() as u64,
        funcs: m.funcs.len() as u64,
        ..Default::default()
    };
    for k in m.kernels() {
        for op in list_memory_ops(k) {
            match op.opcode {
                Opcode::Ld => c.loads += 1,
                Opcode::St => c.stores += 1,
                Opcode::Atom | Opcode::Red => c.atomics += 1,
                _ => {}
            }
        }
        for stmt in &k.body {
            if let Statement::Instr(i) = stmt {
                if i.opcode == Opcode::BrxIdx {
                    c.indirect_branches += 1;
                }
            }
        }
    }
    Ok(c)
}

/// Directories expand to their `*.ptx` files, sorted by name.
fn expand_paths(paths: &[PathBuf]) -> (Vec<PathBuf>, bool) {
    let mut out = Vec::new();
    let mut failed = false;
    for p in paths {
        if p.is_dir() {
            match std::fs::read_dir(p) {
                Ok(entries) => {
                    let mut files: Vec<PathBuf> = entries
                        .filter_map(|e| e.ok())
                        .map(|e| e.path())
                        .filter(|f| f.extension().is_some_and(|x| x == "ptx"))
                        .collect();
                    files.sort();
                    out.extend(files);
                }
                Err(e) => {
                    eprintln!("{}: {e}", p.display());
                    failed = true;
                }
            }
        } else {
            out.push(p.clone());
        }
    }
    (out, failed)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut rows: Vec<FileCounts> = Vec::new();
    let mut totals = Counts::default();
    let (paths, mut failed) = expand_paths(&args.paths);

    for path in &paths {
        let name = path.display().to_string();
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("{name}: {e}");
                failed = true;
                continue;
            }
        };
        match count_file(&text, args.lenient) {
            Ok(counts) => {
                totals.add(counts);
                rows.push(FileCounts { name, counts });
            }
            Err(e) => {
                eprintln!("{name}: {e}");
                failed = true;
            }
        }
    }

    if args.json {
        #[derive(Serialize)]
        struct Output {
            files: Vec<FileCounts>,
            totals: Counts,
        }
        let out = Output {
            files: rows,
            totals,
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&out).expect("serializable")
        );
    } else {
        let name_w = rows
            .iter()
            .map(|r| r.name.len())
            .chain(["name".len(), "total".len()])
            .max()
            .unwrap_or(4);
        println!(
            "{:<name_w$}  {:>8}  {:>5}  {:>12}  {:>13}  {:>8}  {:>9}",
            "name", "#kernels", "#func", "#total loads", "#total stores", "#atomics", "#indirect"
        );
        for r in &rows {
            println!(
                "{:<name_w$}  {:>8}  {:>5}  {:>12}  {:>13}  {:>8}  {:>9}",
                r.name,
                r.counts.kernels,
                r.counts.funcs,
                r.counts.loads,
                r.counts.stores,
                r.counts.atomics,
                r.counts.indirect_branches
            );
        }
        println!(
            "{:<name_w$}  {:>8}  {:>5}  {:>12}  {:>13}  {:>8}  {:>9}",
            "total",
            totals.kernels,
            totals.funcs,
            totals.loads,
            totals.stores,
            totals.atomics,
            totals.indirect_branches
        );
    }

    if failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}
