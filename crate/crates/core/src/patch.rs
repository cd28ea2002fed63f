//! The offline sandboxing pass.
//!
//! Kernels are rewritten so every load, store, and atomic in an
//! instrumentable state space (global, local, or generic) goes through a
//! bounds sequence, and every indirect branch is clamped or checked. The
//! partition bounds arrive through parameters appended to the kernel
//! signature; the manager supplies their values at launch from the owning
//! client's partition record.
//!
//! Three bounds methods are supported:
//!
//! * **FenceBitwise** — `and` the address with `size-1`, `or` in the base.
//!   Requires power-of-two, size-aligned partitions; two instructions per
//!   direct access.
//! * **FenceModulo** — `base + ((addr - base) mod size)`. Works for any
//!   partition size. Lowered through `rem.u64` by default; an inline
//!   multiply-high reciprocal lowering is available behind
//!   [`PatchOptions::inline_reciprocal`].
//! * **Check** — conditional bounds tests that branch to a `ret` epilogue
//!   on violation, detecting rather than wrapping.

use std::collections::HashSet;

use serde::Serialize;
use thiserror::Error;

use crate::ptx::{
    classify_addressing, list_memory_ops, AddrBase, AddrOperand, Addressing, BoolOp, CmpOp, Guard,
    Immediate, Instruction, KernelDef, Modifier, MulHalf, Opcode, Operand, PtxModule, RegDecl,
    ScalarType, StateSpace, Statement,
};

/// Marker embedded in every appended parameter name; its presence is how an
/// already-sandboxed kernel is recognized.
pub const PARAM_MARKER: &str = "_grd_";

/// Label prefix of the Check-mode violation epilogue.
pub const OOB_LABEL: &str = "GRD_OOB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SandboxMode {
    #[serde(rename = "fence-bitwise")]
    FenceBitwise,
    #[serde(rename = "fence-modulo")]
    FenceModulo,
    #[serde(rename = "check")]
    Check,
}

impl SandboxMode {
    /// Role suffixes of the appended parameters, in signature order.
    pub fn param_roles(&self) -> &'static [&'static str] {
        match self {
            SandboxMode::FenceBitwise => &["base", "mask"],
            SandboxMode::FenceModulo => &["base", "size", "inv"],
            SandboxMode::Check => &["base", "end"],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SandboxMode::FenceBitwise => "fence-bitwise",
            SandboxMode::FenceModulo => "fence-modulo",
            SandboxMode::Check => "check",
        }
    }

    pub fn from_name(s: &str) -> Option<SandboxMode> {
        match s {
            "fence-bitwise" => Some(SandboxMode::FenceBitwise),
            "fence-modulo" => Some(SandboxMode::FenceModulo),
            "check" => Some(SandboxMode::Check),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("{value} is not a power of two")]
    NotPowerOfTwo { value: u64 },
    #[error("kernel {kernel} is already sandboxed (parameter carries the {PARAM_MARKER} marker)")]
    AlreadySandboxed { kernel: String },
    #[error("kernel {kernel}: unsupported feature: {feature}")]
    Unsupported { kernel: String, feature: String },
    #[error("invalid fence parameters: {reason}")]
    BadFenceParams { reason: String },
}

/// `partition_size - 1`, the bitwise fencing mask. The size must be a power
/// of two so that `(addr AND mask) OR base` lands inside the partition.
pub fn compute_mask(partition_size: u64) -> Result<u64, PatchError> {
    if !partition_size.is_power_of_two() {
        return Err(PatchError::NotPowerOfTwo {
            value: partition_size,
        });
    }
    Ok(partition_size - 1)
}

/// The values bound to a sandboxed kernel's appended parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FenceParams {
    Bitwise { base: u64, mask: u64 },
    Modulo { base: u64, size: u64, inv: u64 },
    Check { base: u64, end: u64 },
}

impl FenceParams {
    pub fn for_partition(
        mode: SandboxMode,
        base: u64,
        size: u64,
    ) -> Result<FenceParams, PatchError> {
        if size == 0 {
            return Err(PatchError::BadFenceParams {
                reason: "partition size is zero".into(),
            });
        }
        match mode {
            SandboxMode::FenceBitwise => {
                let mask = compute_mask(size)?;
                if base & mask != 0 {
                    return Err(PatchError::BadFenceParams {
                        reason: format!("base {base:#x} is not aligned to size {size:#x}"),
                    });
                }
                Ok(FenceParams::Bitwise { base, mask })
            }
            SandboxMode::FenceModulo => {
                // Fixed-point reciprocal floor(2^64 / size); exact enough
                // that one conditional fixup bounds the remainder. Sizes
                // below two have no representable reciprocal, and the
                // allocator's 4 KiB minimum keeps them out of reach.
                if size < 2 {
                    return Err(PatchError::BadFenceParams {
                        reason: "modulo fencing requires size >= 2".into(),
                    });
                }
                let inv = ((1u128 << 64) / size as u128) as u64;
                Ok(FenceParams::Modulo { base, size, inv })
            }
            SandboxMode::Check => {
                let end = base
                    .checked_add(size)
                    .ok_or_else(|| PatchError::BadFenceParams {
                        reason: "partition end overflows the address space".into(),
                    })?;
                Ok(FenceParams::Check { base, end })
            }
        }
    }

    /// Values in appended-parameter order.
    pub fn arg_values(&self) -> Vec<u64> {
        match *self {
            FenceParams::Bitwise { base, mask } => vec![base, mask],
            FenceParams::Modulo { base, size, inv } => vec![base, size, inv],
            FenceParams::Check { base, end } => vec![base, end],
        }
    }

    pub fn mode(&self) -> SandboxMode {
        match self {
            FenceParams::Bitwise { .. } => SandboxMode::FenceBitwise,
            FenceParams::Modulo { .. } => SandboxMode::FenceModulo,
            FenceParams::Check { .. } => SandboxMode::Check,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PatchOptions {
    pub mode: SandboxMode,
    /// Lower modulo fencing through `mul.hi` with the reciprocal parameter
    /// instead of `rem.u64`.
    pub inline_reciprocal: bool,
}

impl PatchOptions {
    pub fn new(mode: SandboxMode) -> Self {
        PatchOptions {
            mode,
            inline_reciprocal: false,
        }
    }
}

/// Per-kernel instrumentation accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KernelReport {
    pub kernel: String,
    /// Instrumented accesses by kind.
    pub loads: u32,
    pub stores: u32,
    pub atomics: u32,
    pub indirect_branches: u32,
    pub skipped: SkippedBySpace,
    /// Instrumented accesses by addressing form.
    pub direct_accesses: u32,
    pub offset_accesses: u32,
    /// Bounds instructions inserted for accesses and indirect branches;
    /// the appended parameter loads are counted by `params_added`.
    pub instructions_added: u32,
    pub max_instructions_per_access: u32,
    pub params_added: u32,
    pub registers_added: u32,
}

/// Accesses left untouched because their state space is private to the
/// kernel or read-only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SkippedBySpace {
    pub shared: u32,
    pub param: u32,
    #[serde(rename = "const")]
    pub konst: u32,
}

impl KernelReport {
    pub fn instrumented_accesses(&self) -> u32 {
        self.loads + self.stores + self.atomics
    }

    pub fn skipped_total(&self) -> u32 {
        self.skipped.shared + self.skipped.param + self.skipped.konst
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InstrumentationReport {
    pub mode: SandboxMode,
    pub kernels: Vec<KernelReport>,
    pub totals: ReportTotals,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReportTotals {
    pub kernels: u32,
    pub loads: u32,
    pub stores: u32,
    pub atomics: u32,
    pub indirect_branches: u32,
    pub skipped: u32,
    pub instructions_added: u32,
    pub params_added: u32,
    pub registers_added: u32,
}

impl InstrumentationReport {
    fn from_kernels(mode: SandboxMode, kernels: Vec<KernelReport>) -> Self {
        let mut t = ReportTotals {
            kernels: kernels.len() as u32,
            ..Default::default()
        };
        for k in &kernels {
            t.loads += k.loads;
            t.stores += k.stores;
            t.atomics += k.atomics;
            t.indirect_branches += k.indirect_branches;
            t.skipped += k.skipped_total();
            t.instructions_added += k.instructions_added;
            t.params_added += k.params_added;
            t.registers_added += k.registers_added;
        }
        InstrumentationReport {
            mode,
            kernels,
            totals: t,
        }
    }
}

/// Stable-key JSON rendering of a report; field order follows the schema in
/// `docs/report.md`.
pub fn instrumentation_report_json(r: &InstrumentationReport) -> String {
    serde_json::to_string_pretty(r).expect("report serialization cannot fail")
}

/// A sandboxed kernel plus its accounting and the registers holding the
/// loaded bounds parameters (needed to augment call sites).
#[derive(Debug, Clone)]
pub struct SandboxedKernel {
    pub kernel: KernelDef,
    pub report: KernelReport,
    fence_regs: Vec<String>,
}

/// Sandboxes every `.entry` and `.func` of a module and augments call sites
/// with the caller's fence registers.
pub fn sandbox_module(
    m: &PtxModule,
    opts: &PatchOptions,
) -> Result<(PtxModule, InstrumentationReport), PatchError> {
    let mut out = m.clone();
    let mut reports = Vec::new();

    let mut sandboxed_funcs = Vec::new();
    for f in &m.funcs {
        sandboxed_funcs.push(sandbox_kernel(f, opts)?);
    }
    let mut sandboxed_entries = Vec::new();
    for e in &m.entries {
        sandboxed_entries.push(sandbox_kernel(e, opts)?);
    }

    for sk in sandboxed_funcs
        .iter_mut()
        .chain(sandboxed_entries.iter_mut())
    {
        augment_call_sites(&mut sk.kernel, &sk.fence_regs);
    }

    out.funcs = sandboxed_funcs
        .into_iter()
        .map(|sk| {
            reports.push(sk.report);
            sk.kernel
        })
        .collect();
    out.entries = sandboxed_entries
        .into_iter()
        .map(|sk| {
            reports.push(sk.report);
            sk.kernel
        })
        .collect();

    Ok((out, InstrumentationReport::from_kernels(opts.mode, reports)))
}

/// Every call passes the caller's loaded bounds registers as trailing
/// arguments; the callee's appended formal parameters receive them.
fn augment_call_sites(k: &mut KernelDef, fence_regs: &[String]) {
    for stmt in &mut k.body {
        if let Statement::Instr(i) = stmt {
            if i.opcode == Opcode::Call {
                i.operands
                    .extend(fence_regs.iter().cloned().map(Operand::Reg));
            }
        }
    }
}

/// Sandboxes a single kernel. The returned kernel has the appended
/// parameters, the new register bank(s), the parameter loads at body start,
/// and a bounds sequence before every instrumentable access.
pub fn sandbox_kernel(k: &KernelDef, opts: &PatchOptions) -> Result<SandboxedKernel, PatchError> {
    if k.params.iter().any(|p| p.name.contains(PARAM_MARKER)) {
        return Err(PatchError::AlreadySandboxed {
            kernel: k.name.clone(),
        });
    }

    // Symbolic bases in instrumentable spaces cannot be fenced: there is no
    // register holding the address to rewrite.
    for op in list_memory_ops(k) {
        if op.instrumentable() && op.addressing == Addressing::Symbolic {
            return Err(PatchError::Unsupported {
                kernel: k.name.clone(),
                feature: "symbolic address operand".into(),
            });
        }
    }

    let mode = opts.mode;
    let roles = mode.param_roles();
    let n_loaded = roles.len() as u32;
    let n_scratch: u32 = if mode == SandboxMode::FenceModulo && opts.inline_reciprocal {
        2
    } else {
        1
    };

    let mut out = k.clone();

    // Appended parameter names: <kernel>_grd_<role>, numeric suffix on
    // collision.
    let mut taken: HashSet<String> = k.params.iter().map(|p| p.name.clone()).collect();
    for stmt in &k.body {
        if let Statement::Label { name, .. } = stmt {
            taken.insert(name.clone());
        }
    }
    let param_names: Vec<String> = roles
        .iter()
        .map(|role| {
            let base = format!("{}{}{}", k.name, PARAM_MARKER, role);
            let name = unique_name(&base, &taken);
            taken.insert(name.clone());
            name
        })
        .collect();
    for name in &param_names {
        out.params.push(crate::ptx::ParamDecl {
            name: name.clone(),
            ty: ScalarType::U64,
            align: None,
        });
    }

    // One fresh 64-bit bank: loaded parameters then scratch, 1-indexed.
    let bank_prefix = unique_prefix("%grdreg", &k.reg_decls);
    let bank_count = n_loaded + n_scratch;
    out.reg_decls.push(RegDecl {
        ty: ScalarType::B64,
        prefix: bank_prefix.clone(),
        count: bank_count + 1,
    });
    let reg = |i: u32| format!("{bank_prefix}{i}");
    let loaded_regs: Vec<String> = (1..=n_loaded).map(reg).collect();
    let scratch = reg(n_loaded + 1);
    let scratch2 = reg(n_loaded + 2); // only declared when n_scratch == 2

    let mut registers_added = bank_count;

    // Check mode needs one predicate; fencing an indirect branch needs one
    // 32-bit index register. Declared lazily below.
    let needs_pred = mode == SandboxMode::Check
        && k.body.iter().any(|s| {
            s.as_instr().is_some_and(|i| {
                (i.is_memory_class() && i.space().instrumentable()) || i.opcode == Opcode::BrxIdx
            })
        });
    let has_brx = k
        .body
        .iter()
        .any(|s| s.as_instr().is_some_and(|i| i.opcode == Opcode::BrxIdx));
    let pred_reg = if needs_pred {
        let prefix = unique_prefix("%grdp", &out.reg_decls);
        out.reg_decls.push(RegDecl {
            ty: ScalarType::Pred,
            prefix: prefix.clone(),
            count: 2,
        });
        registers_added += 1;
        Some(format!("{prefix}1"))
    } else {
        None
    };
    let idx_reg = if has_brx && mode != SandboxMode::Check {
        let prefix = unique_prefix("%grdidx", &out.reg_decls);
        out.reg_decls.push(RegDecl {
            ty: ScalarType::B32,
            prefix: prefix.clone(),
            count: 2,
        });
        registers_added += 1;
        Some(format!("{prefix}1"))
    } else {
        None
    };

    let oob_label = if mode == SandboxMode::Check && needs_pred {
        let labels: HashSet<String> = k
            .body
            .iter()
            .filter_map(|s| match s {
                Statement::Label { name, .. } => Some(name.clone()),
                _ => None,
            })
            .collect();
        Some(unique_name(OOB_LABEL, &labels))
    } else {
        None
    };

    let mut report = KernelReport {
        kernel: k.name.clone(),
        ..Default::default()
    };
    report.params_added = n_loaded;
    report.registers_added = registers_added;

    let mut body: Vec<Statement> = Vec::with_capacity(k.body.len() + 2 * k.body.len());

    // Parameter loads at body start.
    for (r, p) in loaded_regs.iter().zip(&param_names) {
        body.push(Statement::Instr(Instruction::bare(
            Opcode::Ld,
            vec![
                Modifier::Space(StateSpace::Param),
                Modifier::Ty(ScalarType::U64),
            ],
            vec![
                Operand::Reg(r.clone()),
                Operand::Addr(AddrOperand {
                    base: AddrBase::Sym(p.clone()),
                    offset: 0,
                }),
            ],
        )));
    }

    let env = Env {
        mode,
        inline_reciprocal: opts.inline_reciprocal,
        loaded_regs: &loaded_regs,
        scratch: &scratch,
        scratch2: &scratch2,
        pred_reg: pred_reg.as_deref(),
        idx_reg: idx_reg.as_deref(),
        oob_label: oob_label.as_deref(),
    };

    for stmt in &k.body {
        match stmt {
            Statement::Instr(i) if i.is_memory_class() && i.address_operand().is_some() => {
                let space = i.space();
                if space.instrumentable() {
                    let added = instrument_access(&mut body, i, &env);
                    report.instructions_added += added;
                    report.max_instructions_per_access =
                        report.max_instructions_per_access.max(added);
                    let addr = i.address_operand().expect("memory op has an address");
                    match classify_addressing(space, addr) {
                        Addressing::Direct => report.direct_accesses += 1,
                        Addressing::BaseOffset => report.offset_accesses += 1,
                        Addressing::Symbolic => unreachable!("rejected above"),
                    }
                    match i.opcode {
                        Opcode::Ld => report.loads += 1,
                        Opcode::St => report.stores += 1,
                        Opcode::Atom | Opcode::Red => report.atomics += 1,
                        _ => unreachable!(),
                    }
                } else {
                    match space {
                        StateSpace::Shared => report.skipped.shared += 1,
                        StateSpace::Param => report.skipped.param += 1,
                        StateSpace::Const => report.skipped.konst += 1,
                        _ => {}
                    }
                    body.push(stmt.clone());
                }
            }
            Statement::Instr(i) if i.opcode == Opcode::BrxIdx => {
                report.instructions_added += instrument_indirect_branch(&mut body, i, &env);
                report.indirect_branches += 1;
            }
            other => body.push(other.clone()),
        }
    }

    if let Some(label) = &oob_label {
        body.push(Statement::Label {
            name: label.clone(),
            comments: Vec::new(),
        });
        body.push(Statement::Instr(Instruction::bare(
            Opcode::Ret,
            vec![],
            vec![],
        )));
    }

    out.body = body;
    Ok(SandboxedKernel {
        kernel: out,
        report,
        fence_regs: loaded_regs,
    })
}

struct Env<'a> {
    mode: SandboxMode,
    inline_reciprocal: bool,
    loaded_regs: &'a [String],
    scratch: &'a str,
    scratch2: &'a str,
    pred_reg: Option<&'a str>,
    idx_reg: Option<&'a str>,
    oob_label: Option<&'a str>,
}

fn bin64(op: Opcode, ty: ScalarType, dst: &str, a: Operand, b: Operand) -> Statement {
    Statement::Instr(Instruction::bare(
        op,
        vec![Modifier::Ty(ty)],
        vec![Operand::Reg(dst.to_string()), a, b],
    ))
}

fn reg(r: &str) -> Operand {
    Operand::Reg(r.to_string())
}

/// Emits the bounds sequence for one access and pushes the rewritten access.
/// Returns the number of inserted instructions.
fn instrument_access(body: &mut Vec<Statement>, i: &Instruction, env: &Env<'_>) -> u32 {
    let addr = i
        .address_operand()
        .expect("instrumentable access has an address");
    let AddrBase::Reg(base_reg) = &addr.base else {
        unreachable!("symbolic instrumentable bases are rejected earlier")
    };

    let mut added = 0u32;
    // Base+offset form: materialize the effective address first, then apply
    // the same sequence with the offset rewritten to zero.
    let addr_reg: String = if addr.offset != 0 {
        body.push(bin64(
            Opcode::Add,
            ScalarType::S64,
            env.scratch,
            reg(base_reg),
            Operand::Imm(Immediate::Int(addr.offset as i128)),
        ));
        added += 1;
        env.scratch.to_string()
    } else {
        base_reg.clone()
    };

    let base = &env.loaded_regs[0];
    match env.mode {
        SandboxMode::FenceBitwise => {
            let mask = &env.loaded_regs[1];
            body.push(bin64(
                Opcode::And,
                ScalarType::B64,
                env.scratch,
                reg(&addr_reg),
                reg(mask),
            ));
            body.push(bin64(
                Opcode::Or,
                ScalarType::B64,
                env.scratch,
                reg(env.scratch),
                reg(base),
            ));
            added += 2;
            push_rewritten(body, i, env.scratch);
        }
        SandboxMode::FenceModulo => {
            let size = &env.loaded_regs[1];
            if env.inline_reciprocal {
                let inv = &env.loaded_regs[2];
                let s = env.scratch;
                let s2 = env.scratch2;
                // off = addr - base; q = mulhi(off, inv); r0 = off - q*size.
                // The reciprocal underestimates by at most one, so r0 is in
                // [0, 2*size); min(r0, r0 - size) is the wrapped fixup.
                body.push(bin64(
                    Opcode::Sub,
                    ScalarType::U64,
                    s,
                    reg(&addr_reg),
                    reg(base),
                ));
                body.push(Statement::Instr(Instruction::bare(
                    Opcode::Mul,
                    vec![Modifier::Half(MulHalf::Hi), Modifier::Ty(ScalarType::U64)],
                    vec![reg(s2), reg(s), reg(inv)],
                )));
                body.push(Statement::Instr(Instruction::bare(
                    Opcode::Mul,
                    vec![Modifier::Half(MulHalf::Lo), Modifier::Ty(ScalarType::U64)],
                    vec![reg(s2), reg(s2), reg(size)],
                )));
                body.push(bin64(Opcode::Sub, ScalarType::U64, s, reg(s), reg(s2)));
                body.push(bin64(Opcode::Sub, ScalarType::U64, s2, reg(s), reg(size)));
                body.push(bin64(Opcode::Min, ScalarType::U64, s, reg(s), reg(s2)));
                body.push(bin64(Opcode::Add, ScalarType::U64, s, reg(s), reg(base)));
                added += 7;
            } else {
                body.push(bin64(
                    Opcode::Sub,
                    ScalarType::U64,
                    env.scratch,
                    reg(&addr_reg),
                    reg(base),
                ));
                body.push(bin64(
                    Opcode::Rem,
                    ScalarType::U64,
                    env.scratch,
                    reg(env.scratch),
                    reg(size),
                ));
                body.push(bin64(
                    Opcode::Add,
                    ScalarType::U64,
                    env.scratch,
                    reg(env.scratch),
                    reg(base),
                ));
                added += 3;
            }
            push_rewritten(body, i, env.scratch);
        }
        SandboxMode::Check => {
            let end = &env.loaded_regs[1];
            let p = env.pred_reg.expect("check mode declares a predicate");
            let label = env.oob_label.expect("check mode appends an epilogue");
            body.push(Statement::Instr(Instruction::bare(
                Opcode::Setp,
                vec![Modifier::Cmp(CmpOp::Lt), Modifier::Ty(ScalarType::U64)],
                vec![reg(p), reg(&addr_reg), reg(base)],
            )));
            body.push(Statement::Instr(Instruction::bare(
                Opcode::Setp,
                vec![
                    Modifier::Cmp(CmpOp::Ge),
                    Modifier::Bool(BoolOp::Or),
                    Modifier::Ty(ScalarType::U64),
                ],
                vec![reg(p), reg(&addr_reg), reg(end), reg(p)],
            )));
            body.push(Statement::Instr(Instruction {
                comments: Vec::new(),
                guard: Some(Guard {
                    reg: p.to_string(),
                    negated: false,
                }),
                opcode: Opcode::Bra,
                modifiers: vec![],
                operands: vec![Operand::LabelRef(label.to_string())],
            }));
            added += 3;
            if addr.offset != 0 {
                // The materialized address in scratch is the checked value;
                // the access reuses it so check and access agree.
                push_rewritten(body, i, env.scratch);
            } else {
                body.push(Statement::Instr(i.clone()));
            }
        }
    }
    added
}

/// Pushes `i` with its address operand replaced by `[reg]`, keeping any
/// predicate guard.
fn push_rewritten(body: &mut Vec<Statement>, i: &Instruction, addr_reg: &str) {
    let mut rewritten = i.clone();
    for op in &mut rewritten.operands {
        if let Operand::Addr(a) = op {
            *a = AddrOperand {
                base: AddrBase::Reg(addr_reg.to_string()),
                offset: 0,
            };
        }
    }
    body.push(Statement::Instr(rewritten));
}

/// Fencing clamps the index into the label array; Check branches to the
/// epilogue when the index is out of range.
fn instrument_indirect_branch(body: &mut Vec<Statement>, i: &Instruction, env: &Env<'_>) -> u32 {
    let (idx_operand, n_labels) = match (&i.operands[0], &i.operands[1]) {
        (Operand::Reg(r), Operand::LabelArray(ls)) => (r.clone(), ls.len() as i128),
        _ => unreachable!("shape-checked by the parser"),
    };
    match env.mode {
        SandboxMode::FenceBitwise | SandboxMode::FenceModulo => {
            let clamped = env
                .idx_reg
                .expect("fencing modes declare an index register");
            body.push(Statement::Instr(Instruction::bare(
                Opcode::Rem,
                vec![Modifier::Ty(ScalarType::U32)],
                vec![
                    reg(clamped),
                    reg(&idx_operand),
                    Operand::Imm(Immediate::Int(n_labels)),
                ],
            )));
            let mut rewritten = i.clone();
            rewritten.operands[0] = reg(clamped);
            body.push(Statement::Instr(rewritten));
            1
        }
        SandboxMode::Check => {
            let p = env.pred_reg.expect("check mode declares a predicate");
            let label = env.oob_label.expect("check mode appends an epilogue");
            body.push(Statement::Instr(Instruction::bare(
                Opcode::Setp,
                vec![Modifier::Cmp(CmpOp::Ge), Modifier::Ty(ScalarType::U32)],
                vec![
                    reg(p),
                    reg(&idx_operand),
                    Operand::Imm(Immediate::Int(n_labels)),
                ],
            )));
            body.push(Statement::Instr(Instruction {
                comments: Vec::new(),
                guard: Some(Guard {
                    reg: p.to_string(),
                    negated: false,
                }),
                opcode: Opcode::Bra,
                modifiers: vec![],
                operands: vec![Operand::LabelRef(label.to_string())],
            }));
            body.push(Statement::Instr(i.clone()));
            2
        }
    }
}

fn unique_name(base: &str, taken: &HashSet<String>) -> String {
    if !taken.contains(base) {
        return base.to_string();
    }
    let mut n = 2;
    loop {
        let candidate = format!("{base}_{n}");
        if !taken.contains(&candidate) {
            return candidate;
        }
        n += 1;
    }
}

fn unique_prefix(base: &str, decls: &[RegDecl]) -> String {
    let mut candidate = base.to_string();
    while decls.iter().any(|d| d.prefix == candidate) {
        candidate.push('x');
    }
    candidate
}
