//! Deterministic execution of the PTX subset over simulated device memory.
//!
//! Threads run sequentially in increasing linear id, registers start at
//! zero, and every device-memory access (global, local, or generic space)
//! is recorded in an [`AccessTrace`]. That trace is the evidence the rest of
//! the system is judged by: containment of fenced kernels, detection counts
//! of checked kernels, and bit-identical replay of in-bounds runs.
//!
//! Simplifications are deliberate and documented in the guide: grids and
//! blocks are one-dimensional, `bar.sync` is a no-op under sequential
//! execution, shared/const accesses execute as no-ops (loads produce zero),
//! and `.local` addresses are ordinary device addresses. The convention for
//! local data is a per-thread 4 KiB slice carved from the top of the owning
//! partition; kernels receive a pointer to it like any other buffer.

use std::collections::HashMap;

use thiserror::Error;

use crate::patch::{FenceParams, OOB_LABEL};
use crate::ptx::{
    AddrBase, AtomOp, BoolOp, CmpOp, Immediate, KernelDef, KernelKind, Modifier, MulHalf, Opcode,
    Operand, PtxModule, ScalarType, SpecialReg, StateSpace, Statement,
};

/// Byte-addressable simulated device memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMemory {
    device_base: u64,
    backing: Vec<u8>,
}

impl SimMemory {
    pub fn new(device_base: u64, device_size: u64) -> Self {
        SimMemory {
            device_base,
            backing: vec![0; device_size as usize],
        }
    }

    pub fn device_base(&self) -> u64 {
        self.device_base
    }

    pub fn device_size(&self) -> u64 {
        self.backing.len() as u64
    }

    fn index(&self, addr: u64, len: u64) -> Option<usize> {
        let off = addr.checked_sub(self.device_base)?;
        let end = off.checked_add(len)?;
        if end <= self.backing.len() as u64 {
            Some(off as usize)
        } else {
            None
        }
    }

    pub fn read_bytes(&self, addr: u64, len: u64) -> Option<&[u8]> {
        let i = self.index(addr, len)?;
        Some(&self.backing[i..i + len as usize])
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) -> Option<()> {
        let i = self.index(addr, bytes.len() as u64)?;
        self.backing[i..i + bytes.len()].copy_from_slice(bytes);
        Some(())
    }

    fn load(&self, addr: u64, width: u64) -> Option<u64> {
        let b = self.read_bytes(addr, width)?;
        let mut v = [0u8; 8];
        v[..b.len()].copy_from_slice(b);
        Some(u64::from_le_bytes(v))
    }

    fn store(&mut self, addr: u64, width: u64, value: u64) -> Option<()> {
        let bytes = value.to_le_bytes();
        self.write_bytes(addr, &bytes[..width as usize])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArgValue {
    Scalar64(u64),
    Scalar32(u32),
    F32(f32),
    DevAddr(u64),
}

impl ArgValue {
    fn bits(&self) -> u64 {
        match *self {
            ArgValue::Scalar64(v) | ArgValue::DevAddr(v) => v,
            ArgValue::Scalar32(v) => v as u64,
            ArgValue::F32(v) => v.to_bits() as u64,
        }
    }
}

pub const DEFAULT_STEP_LIMIT: u64 = 1_000_000;

/// Largest grid·block product accepted by a launch.
pub const MAX_THREADS: u64 = 1 << 20;

#[derive(Debug, Clone)]
pub struct LaunchConfig {
    pub grid_dim_x: u32,
    pub block_dim_x: u32,
    pub args: Vec<ArgValue>,
    /// Per-thread instruction budget standing in for endless-kernel
    /// revocation.
    pub step_limit: u64,
}

impl LaunchConfig {
    pub fn new(grid_dim_x: u32, block_dim_x: u32, args: Vec<ArgValue>) -> Self {
        LaunchConfig {
            grid_dim_x,
            block_dim_x,
            args,
            step_limit: DEFAULT_STEP_LIMIT,
        }
    }

    pub fn thread_count(&self) -> u64 {
        self.grid_dim_x as u64 * self.block_dim_x as u64
    }

    /// The same launch with fence argument values appended, as the manager
    /// does before dispatching a sandboxed handle.
    pub fn with_fence_args(&self, fence: &FenceParams) -> LaunchConfig {
        let mut cfg = self.clone();
        cfg.args
            .extend(fence.arg_values().into_iter().map(ArgValue::Scalar64));
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Load,
    Store,
    Atomic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    /// Linear thread id (ctaid·ntid + tid).
    pub thread: u32,
    /// Index of the access in the kernel body.
    pub stmt_index: usize,
    pub kind: AccessKind,
    pub addr: u64,
    pub width: u64,
}

/// Every device-memory access performed by a launch, in execution order,
/// plus the count of Check-mode violation exits taken.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub entries: Vec<TraceEntry>,
    pub oob_exits: u64,
}

impl AccessTrace {
    /// Whether every recorded access address lies in `[base, base+size)`.
    pub fn contained_in(&self, base: u64, size: u64) -> bool {
        self.entries
            .iter()
            .all(|e| e.addr >= base && e.addr < base + size)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("device fault: thread {thread} touched {addr:#x} (statement {stmt_index})")]
    DeviceFault {
        addr: u64,
        thread: u32,
        stmt_index: usize,
    },
    #[error("thread {thread} exceeded the step limit")]
    StepLimitExceeded { thread: u32 },
    #[error("type fault in thread {thread} at statement {stmt_index}: {msg}")]
    TypeFault {
        thread: u32,
        stmt_index: usize,
        msg: String,
    },
    #[error("kernel {kernel} expects {expected} arguments, got {got}")]
    ArityMismatch {
        kernel: String,
        expected: usize,
        got: usize,
    },
    #[error("kernel {kernel} argument {index}: {msg}")]
    BadArg {
        kernel: String,
        index: usize,
        msg: String,
    },
    #[error("unknown kernel {name}")]
    UnknownKernel { name: String },
    #[error("launch of {threads} threads exceeds the {MAX_THREADS}-thread bound")]
    GridTooLarge { threads: u64 },
}

// ---------------------------------------------------------------------------
// Compilation: resolve registers to slots, labels to code indices, and
// operands to executable forms.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum CVal {
    Slot(usize),
    Imm(u64),
    Special(SpecialReg),
}

#[derive(Debug, Clone, Copy)]
enum CAddr {
    Slot { slot: usize, offset: i64 },
    Param { index: usize, offset: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum IBin {
    Add,
    Sub,
    MulLo,
    MulHi,
    MulWide,
    Div,
    Rem,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Min,
    Max,
}

#[derive(Debug, Clone)]
enum COp {
    Ld {
        space: StateSpace,
        width: u64,
        dst: Vec<usize>,
        addr: CAddr,
    },
    St {
        space: StateSpace,
        width: u64,
        src: Vec<CVal>,
        addr: CAddr,
    },
    Atom {
        space: StateSpace,
        op: AtomOp,
        ty: ScalarType,
        dst: Option<usize>,
        addr: CAddr,
        src: CVal,
    },
    Mov {
        dst: usize,
        src: CVal,
    },
    IBin {
        kind: IBin,
        ty: ScalarType,
        dst: usize,
        a: CVal,
        b: CVal,
    },
    Mad {
        half: MulHalf,
        ty: ScalarType,
        dst: usize,
        a: CVal,
        b: CVal,
        c: CVal,
    },
    Not {
        ty: ScalarType,
        dst: usize,
        a: CVal,
    },
    FBin {
        mul: bool,
        wide: bool,
        dst: usize,
        a: CVal,
        b: CVal,
    },
    Setp {
        cmp: CmpOp,
        ty: ScalarType,
        combine: Option<(BoolOp, usize)>,
        dst: usize,
        a: CVal,
        b: CVal,
    },
    Selp {
        dst: usize,
        a: CVal,
        b: CVal,
        p: usize,
    },
    Cvt {
        dst_ty: ScalarType,
        src_ty: ScalarType,
        dst: usize,
        a: CVal,
    },
    Bra {
        target: usize,
        oob_exit: bool,
    },
    Brx {
        idx: CVal,
        targets: Vec<usize>,
    },
    Call {
        callee: usize,
        args: Vec<CVal>,
    },
    Ret,
    Bar,
    Fault {
        msg: String,
    },
}

#[derive(Debug, Clone)]
struct CInstr {
    guard: Option<(usize, bool)>,
    op: COp,
    stmt_index: usize,
}

#[derive(Debug, Clone)]
pub struct CompiledKernel {
    name: String,
    kind: KernelKind,
    params: Vec<ScalarType>,
    code: Vec<CInstr>,
    slot_count: usize,
}

impl CompiledKernel {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn param_arity(&self) -> usize {
        self.params.len()
    }

    pub fn param_types(&self) -> &[ScalarType] {
        &self.params
    }
}

/// A module lowered for execution; kernels are launched by name.
#[derive(Debug, Clone, Default)]
pub struct Executable {
    kernels: Vec<CompiledKernel>,
    by_name: HashMap<String, usize>,
}

impl Executable {
    pub fn kernel(&self, name: &str) -> Option<&CompiledKernel> {
        self.by_name.get(name).map(|i| &self.kernels[*i])
    }

    pub fn kernel_names(&self) -> impl Iterator<Item = &str> {
        self.kernels.iter().map(|k| k.name.as_str())
    }
}

/// Lowers a parsed module. Never fails: constructs outside the executable
/// subset become faults raised if and when they are reached.
pub fn compile_module(m: &PtxModule) -> Executable {
    let mut exe = Executable::default();
    // Funcs first so call targets resolve by name to their final index.
    let order: Vec<&KernelDef> = m.kernels().collect();
    for (i, k) in order.iter().enumerate() {
        exe.by_name.insert(k.name.clone(), i);
    }
    for k in order {
        let compiled = compile_kernel(k, &exe.by_name);
        exe.kernels.push(compiled);
    }
    exe
}

fn compile_kernel(k: &KernelDef, funcs: &HashMap<String, usize>) -> CompiledKernel {
    // Slot assignment: one slot per declared register, banks in order.
    let mut slot_of: HashMap<String, usize> = HashMap::new();
    let mut slots = 0usize;
    for d in &k.reg_decls {
        for i in 0..d.count {
            slot_of.insert(format!("{}{}", d.prefix, i), slots);
            slots += 1;
        }
    }
    let param_index: HashMap<&str, usize> = k
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.as_str(), i))
        .collect();

    // First pass: map labels to code indices (labels emit no code).
    let mut label_at: HashMap<&str, usize> = HashMap::new();
    let mut code_len = 0usize;
    for stmt in &k.body {
        match stmt {
            Statement::Label { name, .. } => {
                label_at.insert(name, code_len);
            }
            Statement::Instr(_) | Statement::Verbatim { .. } => code_len += 1,
        }
    }

    let mut code: Vec<CInstr> = Vec::with_capacity(code_len + 1);
    for (stmt_index, stmt) in k.body.iter().enumerate() {
        match stmt {
            Statement::Label { .. } => {}
            Statement::Verbatim { text, .. } => code.push(CInstr {
                guard: None,
                op: COp::Fault {
                    msg: format!("verbatim statement cannot be executed: {text}"),
                },
                stmt_index,
            }),
            Statement::Instr(i) => {
                let guard = i
                    .guard
                    .as_ref()
                    .map(|g| (*slot_of.get(&g.reg).expect("validated register"), g.negated));
                let op = lower(i, &slot_of, &param_index, &label_at, funcs);
                code.push(CInstr {
                    guard,
                    op,
                    stmt_index,
                });
            }
        }
    }
    // Falling off the end of the body ends the thread.
    code.push(CInstr {
        guard: None,
        op: COp::Ret,
        stmt_index: k.body.len(),
    });

    CompiledKernel {
        name: k.name.clone(),
        kind: k.kind,
        params: k.params.iter().map(|p| p.ty).collect(),
        code,
        slot_count: slots,
    }
}

fn lower(
    i: &crate::ptx::Instruction,
    slot_of: &HashMap<String, usize>,
    param_index: &HashMap<&str, usize>,
    label_at: &HashMap<&str, usize>,
    funcs: &HashMap<String, usize>,
) -> COp {
    let fault = |msg: String| COp::Fault { msg };
    let slot = |r: &str| *slot_of.get(r).expect("validated register");
    let val = |o: &Operand| -> Option<CVal> {
        Some(match o {
            Operand::Reg(r) => CVal::Slot(slot(r)),
            Operand::Imm(Immediate::Int(v)) => CVal::Imm(*v as u64),
            Operand::Imm(Immediate::F32Bits(b)) => CVal::Imm(*b as u64),
            Operand::Imm(Immediate::F64Bits(b)) => CVal::Imm(*b),
            Operand::Special(s) => CVal::Special(*s),
            _ => return None,
        })
    };
    let caddr = |o: &Operand| -> Option<CAddr> {
        let Operand::Addr(a) = o else { return None };
        Some(match &a.base {
            AddrBase::Reg(r) => CAddr::Slot {
                slot: slot(r),
                offset: a.offset,
            },
            AddrBase::Sym(s) => CAddr::Param {
                index: *param_index.get(s.as_str())?,
                offset: a.offset,
            },
        })
    };

    let ty = i.scalar_type();
    let space = i.space();

    match i.opcode {
        Opcode::Ld => {
            let Some(ty) = ty else {
                return fault("ld requires a type".into());
            };
            let dst: Vec<usize> = match &i.operands[0] {
                Operand::Reg(r) => vec![slot(r)],
                Operand::VecGroup(rs) => rs.iter().map(|r| slot(r)).collect(),
                _ => return fault("ld destination must be a register".into()),
            };
            if dst.len() != i.vector_arity() as usize {
                return fault("vector arity does not match destination group".into());
            }
            let Some(addr) = caddr(&i.operands[1]) else {
                return fault("ld address symbol is not a parameter".into());
            };
            COp::Ld {
                space,
                width: ty.width_bytes(),
                dst,
                addr,
            }
        }
        Opcode::St => {
            let Some(ty) = ty else {
                return fault("st requires a type".into());
            };
            let src: Vec<CVal> = match &i.operands[1] {
                Operand::VecGroup(rs) => rs.iter().map(|r| CVal::Slot(slot(r))).collect(),
                other => match val(other) {
                    Some(v) => vec![v],
                    None => return fault("st source must be a register or immediate".into()),
                },
            };
            if src.len() != i.vector_arity() as usize {
                return fault("vector arity does not match source group".into());
            }
            let Some(addr) = caddr(&i.operands[0]) else {
                return fault("st address symbol is not a parameter".into());
            };
            COp::St {
                space,
                width: ty.width_bytes(),
                src,
                addr,
            }
        }
        Opcode::Atom | Opcode::Red => {
            let Some(ty) = ty else {
                return fault("atomic requires a type".into());
            };
            let op = i.modifiers.iter().find_map(|m| match m {
                Modifier::AtomOp(a) => Some(*a),
                _ => None,
            });
            let Some(op) = op else {
                return fault("atomic requires an operation".into());
            };
            let (dst, addr_op, src_op) = if i.opcode == Opcode::Atom {
                let Operand::Reg(d) = &i.operands[0] else {
                    return fault("atom destination must be a register".into());
                };
                (Some(slot(d)), &i.operands[1], &i.operands[2])
            } else {
                (None, &i.operands[0], &i.operands[1])
            };
            let Some(addr) = caddr(addr_op) else {
                return fault("atomic address symbol is not a parameter".into());
            };
            let Some(src) = val(src_op) else {
                return fault("atomic source must be a register or immediate".into());
            };
            COp::Atom {
                space,
                op,
                ty,
                dst,
                addr,
                src,
            }
        }
        Opcode::Mov => {
            let Operand::Reg(d) = &i.operands[0] else {
                return fault("mov destination must be a register".into());
            };
            match val(&i.operands[1]) {
                Some(src) => COp::Mov { dst: slot(d), src },
                None => fault("mov source must be a register, immediate, or special".into()),
            }
        }
        Opcode::Add
        | Opcode::Sub
        | Opcode::Mul
        | Opcode::Div
        | Opcode::Rem
        | Opcode::And
        | Opcode::Or
        | Opcode::Xor
        | Opcode::Shl
        | Opcode::Shr
        | Opcode::Min
        | Opcode::Max => {
            let Some(ty) = ty else {
                return fault("arithmetic requires a type".into());
            };
            let Operand::Reg(d) = &i.operands[0] else {
                return fault("destination must be a register".into());
            };
            let (Some(a), Some(b)) = (val(&i.operands[1]), val(&i.operands[2])) else {
                return fault("operands must be registers or immediates".into());
            };
            if ty.is_float() {
                let mul = i.opcode == Opcode::Mul;
                if !(mul || i.opcode == Opcode::Add) {
                    return fault(format!(
                        "{} is not supported on floats",
                        i.opcode.mnemonic()
                    ));
                }
                return COp::FBin {
                    mul,
                    wide: ty == ScalarType::F64,
                    dst: slot(d),
                    a,
                    b,
                };
            }
            let half = i.modifiers.iter().find_map(|m| match m {
                Modifier::Half(h) => Some(*h),
                _ => None,
            });
            let kind = match i.opcode {
                Opcode::Add => IBin::Add,
                Opcode::Sub => IBin::Sub,
                Opcode::Mul => match half.unwrap_or(MulHalf::Lo) {
                    MulHalf::Lo => IBin::MulLo,
                    MulHalf::Hi => IBin::MulHi,
                    MulHalf::Wide => IBin::MulWide,
                },
                Opcode::Div => IBin::Div,
                Opcode::Rem => IBin::Rem,
                Opcode::And => IBin::And,
                Opcode::Or => IBin::Or,
                Opcode::Xor => IBin::Xor,
                Opcode::Shl => IBin::Shl,
                Opcode::Shr => IBin::Shr,
                Opcode::Min => IBin::Min,
                Opcode::Max => IBin::Max,
                _ => unreachable!(),
            };
            COp::IBin {
                kind,
                ty,
                dst: slot(d),
                a,
                b,
            }
        }
        Opcode::Mad => {
            let Some(ty) = ty else {
                return fault("mad requires a type".into());
            };
            if ty.is_float() {
                return fault("mad is not supported on floats".into());
            }
            let Operand::Reg(d) = &i.operands[0] else {
                return fault("mad destination must be a register".into());
            };
            let half = i
                .modifiers
                .iter()
                .find_map(|m| match m {
                    Modifier::Half(h) => Some(*h),
                    _ => None,
                })
                .unwrap_or(MulHalf::Lo);
            let (Some(a), Some(b), Some(c)) = (
                val(&i.operands[1]),
                val(&i.operands[2]),
                val(&i.operands[3]),
            ) else {
                return fault("mad operands must be registers or immediates".into());
            };
            COp::Mad {
                half,
                ty,
                dst: slot(d),
                a,
                b,
                c,
            }
        }
        Opcode::Not => {
            let Some(ty) = ty else {
                return fault("not requires a type".into());
            };
            let Operand::Reg(d) = &i.operands[0] else {
                return fault("not destination must be a register".into());
            };
            match val(&i.operands[1]) {
                Some(a) => COp::Not {
                    ty,
                    dst: slot(d),
                    a,
                },
                None => fault("not operand must be a register or immediate".into()),
            }
        }
        Opcode::Setp => {
            let Some(ty) = ty else {
                return fault("setp requires a type".into());
            };
            let cmp = i.modifiers.iter().find_map(|m| match m {
                Modifier::Cmp(c) => Some(*c),
                _ => None,
            });
            let Some(cmp) = cmp else {
                return fault("setp requires a comparison".into());
            };
            let boolop = i.modifiers.iter().find_map(|m| match m {
                Modifier::Bool(b) => Some(*b),
                _ => None,
            });
            let Operand::Reg(d) = &i.operands[0] else {
                return fault("setp destination must be a predicate register".into());
            };
            let (Some(a), Some(b)) = (val(&i.operands[1]), val(&i.operands[2])) else {
                return fault("setp operands must be registers or immediates".into());
            };
            let combine = match boolop {
                None => None,
                Some(op) => {
                    let Operand::Reg(c) = &i.operands[3] else {
                        return fault("setp combine operand must be a predicate register".into());
                    };
                    Some((op, slot(c)))
                }
            };
            COp::Setp {
                cmp,
                ty,
                combine,
                dst: slot(d),
                a,
                b,
            }
        }
        Opcode::Selp => {
            let Operand::Reg(d) = &i.operands[0] else {
                return fault("selp destination must be a register".into());
            };
            let (Some(a), Some(b)) = (val(&i.operands[1]), val(&i.operands[2])) else {
                return fault("selp operands must be registers or immediates".into());
            };
            let Operand::Reg(p) = &i.operands[3] else {
                return fault("selp selector must be a predicate register".into());
            };
            COp::Selp {
                dst: slot(d),
                a,
                b,
                p: slot(p),
            }
        }
        Opcode::Cvt => {
            let types: Vec<ScalarType> = i
                .modifiers
                .iter()
                .filter_map(|m| match m {
                    Modifier::Ty(t) => Some(*t),
                    _ => None,
                })
                .collect();
            if types.len() != 2 {
                return fault("cvt requires destination and source types".into());
            }
            let (dst_ty, src_ty) = (types[0], types[1]);
            if dst_ty.is_float() || src_ty.is_float() {
                return fault("float conversions are not supported".into());
            }
            let Operand::Reg(d) = &i.operands[0] else {
                return fault("cvt destination must be a register".into());
            };
            match val(&i.operands[1]) {
                Some(a) => COp::Cvt {
                    dst_ty,
                    src_ty,
                    dst: slot(d),
                    a,
                },
                None => fault("cvt source must be a register or immediate".into()),
            }
        }
        Opcode::Cvta => {
            // The simulated device is flat: converting to a global address
            // is a 64-bit copy.
            let Operand::Reg(d) = &i.operands[0] else {
                return fault("cvta destination must be a register".into());
            };
            match val(&i.operands[1]) {
                Some(src) => COp::Mov { dst: slot(d), src },
                None => fault("cvta source must be a register".into()),
            }
        }
        Opcode::Bra => {
            let Operand::LabelRef(l) = &i.operands[0] else {
                unreachable!("shape-checked")
            };
            match label_at.get(l.as_str()) {
                Some(target) => COp::Bra {
                    target: *target,
                    oob_exit: l.starts_with(OOB_LABEL),
                },
                None => fault(format!("unresolved label {l}")),
            }
        }
        Opcode::BrxIdx => {
            let Operand::Reg(r) = &i.operands[0] else {
                unreachable!("shape-checked")
            };
            let Operand::LabelArray(ls) = &i.operands[1] else {
                unreachable!("shape-checked")
            };
            let mut targets = Vec::with_capacity(ls.len());
            for l in ls {
                match label_at.get(l.as_str()) {
                    Some(t) => targets.push(*t),
                    None => return fault(format!("unresolved label {l}")),
                }
            }
            COp::Brx {
                idx: CVal::Slot(slot(r)),
                targets,
            }
        }
        Opcode::Call => {
            let Operand::LabelRef(callee) = &i.operands[0] else {
                unreachable!("shape-checked")
            };
            let Some(&callee_idx) = funcs.get(callee) else {
                return fault(format!("unresolved call target {callee}"));
            };
            let mut args = Vec::with_capacity(i.operands.len() - 1);
            for a in &i.operands[1..] {
                match val(a) {
                    Some(v) => args.push(v),
                    None => return fault("call arguments must be registers or immediates".into()),
                }
            }
            COp::Call {
                callee: callee_idx,
                args,
            }
        }
        Opcode::Ret => COp::Ret,
        Opcode::Bar => COp::Bar,
    }
}

// ---------------------------------------------------------------------------
// Execution.
// ---------------------------------------------------------------------------

const CALL_DEPTH_LIMIT: usize = 64;

struct Frame {
    kernel: usize,
    pc: usize,
    regs: Vec<u64>,
    /// Parameter bytes, one buffer per declared parameter.
    params: Vec<Vec<u8>>,
}

struct ThreadCtx {
    tid: u32,
    ntid: u32,
    ctaid: u32,
    nctaid: u32,
    linear: u32,
}

/// Executes `name` from `exe` over `mem`, returning the access trace.
pub fn launch(
    exe: &Executable,
    name: &str,
    cfg: &LaunchConfig,
    mem: &mut SimMemory,
) -> Result<AccessTrace, ExecError> {
    let Some(&entry_idx) = exe.by_name.get(name) else {
        return Err(ExecError::UnknownKernel {
            name: name.to_string(),
        });
    };
    let entry = &exe.kernels[entry_idx];

    let threads = cfg.thread_count();
    if threads > MAX_THREADS {
        return Err(ExecError::GridTooLarge { threads });
    }
    let params = bind_entry_args(entry, &cfg.args)?;

    let mut trace = AccessTrace::default();
    for linear in 0..threads as u32 {
        let ctx = ThreadCtx {
            tid: linear % cfg.block_dim_x,
            ntid: cfg.block_dim_x,
            ctaid: linear / cfg.block_dim_x,
            nctaid: cfg.grid_dim_x,
            linear,
        };
        run_thread(
            exe,
            entry_idx,
            params.clone(),
            &ctx,
            cfg.step_limit,
            mem,
            &mut trace,
        )?;
    }
    Ok(trace)
}

fn bind_entry_args(entry: &CompiledKernel, args: &[ArgValue]) -> Result<Vec<Vec<u8>>, ExecError> {
    if args.len() != entry.params.len() {
        return Err(ExecError::ArityMismatch {
            kernel: entry.name.clone(),
            expected: entry.params.len(),
            got: args.len(),
        });
    }
    let mut out = Vec::with_capacity(args.len());
    for (index, (arg, ty)) in args.iter().zip(&entry.params).enumerate() {
        let width = ty.width_bytes() as usize;
        #[allow(clippy::match_like_matches_macro)]
        let ok = match (arg, ty) {
            (
                ArgValue::Scalar64(_) | ArgValue::DevAddr(_),
                ScalarType::U64 | ScalarType::B64 | ScalarType::S64 | ScalarType::F64,
            ) => true,
            (ArgValue::Scalar32(_), ScalarType::U32 | ScalarType::B32 | ScalarType::S32) => true,
            (ArgValue::Scalar32(_), ScalarType::U16 | ScalarType::B16) => true,
            (ArgValue::F32(_), ScalarType::F32) => true,
            _ => false,
        };
        if !ok {
            return Err(ExecError::BadArg {
                kernel: entry.name.clone(),
                index,
                msg: format!("value does not fit a .{} parameter", ty.keyword()),
            });
        }
        out.push(arg.bits().to_le_bytes()[..width].to_vec());
    }
    Ok(out)
}

fn run_thread(
    exe: &Executable,
    entry: usize,
    entry_params: Vec<Vec<u8>>,
    ctx: &ThreadCtx,
    step_limit: u64,
    mem: &mut SimMemory,
    trace: &mut AccessTrace,
) -> Result<(), ExecError> {
    let mut stack = vec![Frame {
        kernel: entry,
        pc: 0,
        regs: vec![0u64; exe.kernels[entry].slot_count],
        params: entry_params,
    }];
    let mut steps = 0u64;

    'thread: loop {
        let depth = stack.len();
        let Some(frame) = stack.last_mut() else { break };
        let k = &exe.kernels[frame.kernel];
        let Some(instr) = k.code.get(frame.pc) else {
            stack.pop();
            continue;
        };
        steps += 1;
        if steps > step_limit {
            return Err(ExecError::StepLimitExceeded { thread: ctx.linear });
        }

        let stmt_index = instr.stmt_index;
        let type_fault = |msg: String| ExecError::TypeFault {
            thread: ctx.linear,
            stmt_index,
            msg,
        };

        if let Some((slot, negated)) = instr.guard {
            let active = (frame.regs[slot] != 0) != negated;
            if !active {
                frame.pc += 1;
                continue;
            }
        }

        let eval = |regs: &[u64], v: CVal| -> u64 {
            match v {
                CVal::Slot(s) => regs[s],
                CVal::Imm(i) => i,
                CVal::Special(sp) => match sp {
                    SpecialReg::TidX => ctx.tid as u64,
                    SpecialReg::NtidX => ctx.ntid as u64,
                    SpecialReg::CtaidX => ctx.ctaid as u64,
                    SpecialReg::NctaidX => ctx.nctaid as u64,
                },
            }
        };
        let resolve_addr = |frame: &Frame, a: CAddr| -> Result<u64, ExecError> {
            match a {
                CAddr::Slot { slot, offset } => Ok(frame.regs[slot].wrapping_add(offset as u64)),
                CAddr::Param { .. } => Err(type_fault(
                    "parameter symbols are only addressable in the param space".into(),
                )),
            }
        };

        match &instr.op {
            COp::Ld {
                space,
                width,
                dst,
                addr,
            } => {
                match space {
                    StateSpace::Param => {
                        let CAddr::Param { index, offset } = *addr else {
                            return Err(type_fault("ld.param requires a parameter symbol".into()));
                        };
                        let bytes = &frame.params[index];
                        let start = offset as usize;
                        for (lane, d) in dst.iter().enumerate() {
                            let lo = start + lane * *width as usize;
                            let hi = lo + *width as usize;
                            if hi > bytes.len() {
                                return Err(type_fault("parameter read out of range".into()));
                            }
                            let mut v = [0u8; 8];
                            v[..*width as usize].copy_from_slice(&bytes[lo..hi]);
                            frame.regs[*d] = u64::from_le_bytes(v);
                        }
                    }
                    StateSpace::Shared | StateSpace::Const => {
                        // Parse-and-skip spaces: deterministic zero loads.
                        for d in dst {
                            frame.regs[*d] = 0;
                        }
                    }
                    _ => {
                        let base = resolve_addr(frame, *addr)?;
                        let total = *width * dst.len() as u64;
                        trace.entries.push(TraceEntry {
                            thread: ctx.linear,
                            stmt_index,
                            kind: AccessKind::Load,
                            addr: base,
                            width: total,
                        });
                        for (lane, d) in dst.iter().enumerate() {
                            let a = base.wrapping_add(lane as u64 * *width);
                            let v = mem.load(a, *width).ok_or(ExecError::DeviceFault {
                                addr: a,
                                thread: ctx.linear,
                                stmt_index,
                            })?;
                            frame.regs[*d] = v;
                        }
                    }
                }
                frame.pc += 1;
            }
            COp::St {
                space,
                width,
                src,
                addr,
            } => {
                match space {
                    StateSpace::Param => {
                        return Err(type_fault("the param space is read-only".into()));
                    }
                    StateSpace::Shared | StateSpace::Const => {
                        // Parse-and-skip spaces: stores are dropped.
                    }
                    _ => {
                        let base = resolve_addr(frame, *addr)?;
                        let total = *width * src.len() as u64;
                        trace.entries.push(TraceEntry {
                            thread: ctx.linear,
                            stmt_index,
                            kind: AccessKind::Store,
                            addr: base,
                            width: total,
                        });
                        for (lane, s) in src.iter().enumerate() {
                            let a = base.wrapping_add(lane as u64 * *width);
                            let v = eval(&frame.regs, *s);
                            mem.store(a, *width, v).ok_or(ExecError::DeviceFault {
                                addr: a,
                                thread: ctx.linear,
                                stmt_index,
                            })?;
                        }
                    }
                }
                frame.pc += 1;
            }
            COp::Atom {
                space,
                op,
                ty,
                dst,
                addr,
                src,
            } => {
                if matches!(
                    space,
                    StateSpace::Shared | StateSpace::Const | StateSpace::Param
                ) {
                    // Parse-and-skip spaces: no memory effect, old value zero.
                    if let Some(d) = dst {
                        frame.regs[*d] = 0;
                    }
                    frame.pc += 1;
                    continue;
                }
                let width = ty.width_bytes();
                let base = resolve_addr(frame, *addr)?;
                trace.entries.push(TraceEntry {
                    thread: ctx.linear,
                    stmt_index,
                    kind: AccessKind::Atomic,
                    addr: base,
                    width,
                });
                let old = mem.load(base, width).ok_or(ExecError::DeviceFault {
                    addr: base,
                    thread: ctx.linear,
                    stmt_index,
                })?;
                let rhs = eval(&frame.regs, *src);
                let new = apply_atom(*op, *ty, old, rhs);
                mem.store(base, width, new).ok_or(ExecError::DeviceFault {
                    addr: base,
                    thread: ctx.linear,
                    stmt_index,
                })?;
                if let Some(d) = dst {
                    frame.regs[*d] = old;
                }
                frame.pc += 1;
            }
            COp::Mov { dst, src } => {
                frame.regs[*dst] = eval(&frame.regs, *src);
                frame.pc += 1;
            }
            COp::IBin {
                kind,
                ty,
                dst,
                a,
                b,
            } => {
                let x = eval(&frame.regs, *a);
                let y = eval(&frame.regs, *b);
                let v = apply_ibin(*kind, *ty, x, y).map_err(type_fault)?;
                frame.regs[*dst] = v;
                frame.pc += 1;
            }
            COp::Mad {
                half,
                ty,
                dst,
                a,
                b,
                c,
            } => {
                let x = eval(&frame.regs, *a);
                let y = eval(&frame.regs, *b);
                let z = eval(&frame.regs, *c);
                let kind = match half {
                    MulHalf::Lo => IBin::MulLo,
                    MulHalf::Hi => IBin::MulHi,
                    MulHalf::Wide => IBin::MulWide,
                };
                let prod = apply_ibin(kind, *ty, x, y).map_err(&type_fault)?;
                let add_ty = if *half == MulHalf::Wide {
                    widen(*ty)
                } else {
                    *ty
                };
                let v = apply_ibin(IBin::Add, add_ty, prod, z).map_err(&type_fault)?;
                frame.regs[*dst] = v;
                frame.pc += 1;
            }
            COp::Not { ty, dst, a } => {
                let x = eval(&frame.regs, *a);
                frame.regs[*dst] = mask(!x, *ty);
                frame.pc += 1;
            }
            COp::FBin {
                mul,
                wide,
                dst,
                a,
                b,
            } => {
                let x = eval(&frame.regs, *a);
                let y = eval(&frame.regs, *b);
                let v = if *wide {
                    let (fx, fy) = (f64::from_bits(x), f64::from_bits(y));
                    (if *mul { fx * fy } else { fx + fy }).to_bits()
                } else {
                    let (fx, fy) = (f32::from_bits(x as u32), f32::from_bits(y as u32));
                    (if *mul { fx * fy } else { fx + fy }).to_bits() as u64
                };
                frame.regs[*dst] = v;
                frame.pc += 1;
            }
            COp::Setp {
                cmp,
                ty,
                combine,
                dst,
                a,
                b,
            } => {
                let x = eval(&frame.regs, *a);
                let y = eval(&frame.regs, *b);
                let t = compare(*cmp, *ty, x, y);
                let v = match combine {
                    None => t,
                    Some((op, c)) => {
                        let cv = frame.regs[*c] != 0;
                        match op {
                            BoolOp::And => t && cv,
                            BoolOp::Or => t || cv,
                            BoolOp::Xor => t != cv,
                        }
                    }
                };
                frame.regs[*dst] = v as u64;
                frame.pc += 1;
            }
            COp::Selp { dst, a, b, p } => {
                let take_a = frame.regs[*p] != 0;
                frame.regs[*dst] = if take_a {
                    eval(&frame.regs, *a)
                } else {
                    eval(&frame.regs, *b)
                };
                frame.pc += 1;
            }
            COp::Cvt {
                dst_ty,
                src_ty,
                dst,
                a,
            } => {
                let x = eval(&frame.regs, *a);
                let v = if src_ty.is_signed() {
                    mask(sign_extend(x, *src_ty) as u64, *dst_ty)
                } else {
                    mask(mask(x, *src_ty), *dst_ty)
                };
                frame.regs[*dst] = v;
                frame.pc += 1;
            }
            COp::Bra { target, oob_exit } => {
                if *oob_exit {
                    trace.oob_exits += 1;
                }
                frame.pc = *target;
            }
            COp::Brx { idx, targets } => {
                let i = eval(&frame.regs, *idx) as u32 as usize;
                let Some(target) = targets.get(i) else {
                    return Err(type_fault(format!(
                        "indirect branch index {i} outside the {}-entry label array",
                        targets.len()
                    )));
                };
                frame.pc = *target;
            }
            COp::Call { callee, args } => {
                if depth >= CALL_DEPTH_LIMIT {
                    return Err(type_fault("call depth limit exceeded".into()));
                }
                let callee_k = &exe.kernels[*callee];
                if callee_k.kind != KernelKind::Func {
                    return Err(type_fault(format!("{} is not callable", callee_k.name)));
                }
                if args.len() != callee_k.params.len() {
                    return Err(type_fault(format!(
                        "call passes {} arguments, {} expects {}",
                        args.len(),
                        callee_k.name,
                        callee_k.params.len()
                    )));
                }
                let values: Vec<u64> = args.iter().map(|a| eval(&frame.regs, *a)).collect();
                frame.pc += 1;
                let params: Vec<Vec<u8>> = values
                    .iter()
                    .zip(&callee_k.params)
                    .map(|(v, ty)| v.to_le_bytes()[..ty.width_bytes() as usize].to_vec())
                    .collect();
                let new_frame = Frame {
                    kernel: *callee,
                    pc: 0,
                    regs: vec![0u64; callee_k.slot_count],
                    params,
                };
                stack.push(new_frame);
                continue 'thread;
            }
            COp::Ret => {
                stack.pop();
            }
            COp::Bar => {
                // Sequential semantics make barriers vacuous.
                frame.pc += 1;
            }
            COp::Fault { msg } => {
                return Err(type_fault(msg.clone()));
            }
        }
    }
    Ok(())
}

fn width_bits(ty: ScalarType) -> u32 {
    (ty.width_bytes() * 8) as u32
}

fn mask(v: u64, ty: ScalarType) -> u64 {
    match width_bits(ty) {
        64 => v,
        w => v & ((1u64 << w) - 1),
    }
}

fn sign_extend(v: u64, ty: ScalarType) -> i64 {
    let w = width_bits(ty);
    if w == 64 {
        v as i64
    } else {
        let shift = 64 - w;
        ((v << shift) as i64) >> shift
    }
}

fn widen(ty: ScalarType) -> ScalarType {
    match ty {
        ScalarType::S32 => ScalarType::S64,
        ScalarType::U32 | ScalarType::B32 => ScalarType::U64,
        ScalarType::U16 | ScalarType::B16 => ScalarType::U32,
        other => other,
    }
}

fn apply_ibin(kind: IBin, ty: ScalarType, a: u64, b: u64) -> Result<u64, String> {
    if ty == ScalarType::Pred {
        return Err("arithmetic on predicates".into());
    }
    let w = width_bits(ty);
    let ua = mask(a, ty);
    let ub = mask(b, ty);
    let out = match kind {
        IBin::Add => ua.wrapping_add(ub),
        IBin::Sub => ua.wrapping_sub(ub),
        IBin::MulLo => ua.wrapping_mul(ub),
        IBin::MulHi => {
            if ty.is_signed() {
                let p = (sign_extend(a, ty) as i128) * (sign_extend(b, ty) as i128);
                (p >> w) as u64
            } else {
                ((ua as u128 * ub as u128) >> w) as u64
            }
        }
        IBin::MulWide => {
            // Result is twice the operand width; the destination register
            // holds the full product.
            if ty.is_signed() {
                let p = sign_extend(a, ty) as i128 * sign_extend(b, ty) as i128;
                return Ok(p as u64);
            }
            return Ok((ua as u128 * ub as u128) as u64);
        }
        IBin::Div => {
            if ub == 0 {
                return Err("division by zero".into());
            }
            if ty.is_signed() {
                (sign_extend(a, ty).wrapping_div(sign_extend(b, ty))) as u64
            } else {
                ua / ub
            }
        }
        IBin::Rem => {
            if ub == 0 {
                return Err("remainder by zero".into());
            }
            if ty.is_signed() {
                (sign_extend(a, ty).wrapping_rem(sign_extend(b, ty))) as u64
            } else {
                ua % ub
            }
        }
        IBin::And => ua & ub,
        IBin::Or => ua | ub,
        IBin::Xor => ua ^ ub,
        IBin::Shl => {
            if ub >= w as u64 {
                0
            } else {
                ua << ub
            }
        }
        IBin::Shr => {
            if ty.is_signed() {
                let sh = ub.min(w as u64 - 1);
                (sign_extend(a, ty) >> sh) as u64
            } else if ub >= w as u64 {
                0
            } else {
                ua >> ub
            }
        }
        IBin::Min => {
            if ty.is_signed() {
                sign_extend(a, ty).min(sign_extend(b, ty)) as u64
            } else {
                ua.min(ub)
            }
        }
        IBin::Max => {
            if ty.is_signed() {
                sign_extend(a, ty).max(sign_extend(b, ty)) as u64
            } else {
                ua.max(ub)
            }
        }
    };
    Ok(mask(out, ty))
}

fn apply_atom(op: AtomOp, ty: ScalarType, old: u64, rhs: u64) -> u64 {
    let kind = match op {
        AtomOp::Add => IBin::Add,
        AtomOp::Min => IBin::Min,
        AtomOp::Max => IBin::Max,
        AtomOp::And => IBin::And,
        AtomOp::Or => IBin::Or,
        AtomOp::Xor => IBin::Xor,
        AtomOp::Exch => return mask(rhs, ty),
    };
    apply_ibin(kind, ty, old, rhs).expect("atomic operations cannot fault")
}

fn compare(cmp: CmpOp, ty: ScalarType, a: u64, b: u64) -> bool {
    if ty.is_float() {
        let (x, y) = if ty == ScalarType::F64 {
            (f64::from_bits(a), f64::from_bits(b))
        } else {
            (
                f32::from_bits(a as u32) as f64,
                f32::from_bits(b as u32) as f64,
            )
        };
        return match cmp {
            CmpOp::Eq => x == y,
            CmpOp::Ne => x != y,
            CmpOp::Lt => x < y,
            CmpOp::Le => x <= y,
            CmpOp::Gt => x > y,
            CmpOp::Ge => x >= y,
        };
    }
    if ty.is_signed() {
        let (x, y) = (sign_extend(a, ty), sign_extend(b, ty));
        match cmp {
            CmpOp::Eq => x == y,
            CmpOp::Ne => x != y,
            CmpOp::Lt => x < y,
            CmpOp::Le => x <= y,
            CmpOp::Gt => x > y,
            CmpOp::Ge => x >= y,
        }
    } else {
        let (x, y) = (mask(a, ty), mask(b, ty));
        match cmp {
            CmpOp::Eq => x == y,
            CmpOp::Ne => x != y,
            CmpOp::Lt => x < y,
            CmpOp::Le => x <= y,
            CmpOp::Gt => x > y,
            CmpOp::Ge => x >= y,
        }
    }
}

// ---------------------------------------------------------------------------
// Paired execution: the oracle harness comparing an original kernel with its
// sandboxed counterpart on identical memory snapshots.
// ---------------------------------------------------------------------------

/// Outcome of running original and sandboxed kernels side by side.
#[derive(Debug, Clone)]
pub struct PairVerdict {
    /// Every access of the original run was inside the partition.
    pub original_in_partition: bool,
    /// Final memories of the two runs are bit-identical.
    pub memories_identical: bool,
    /// Every access of the sandboxed run was inside the partition.
    pub sandboxed_contained: bool,
    pub original_trace: AccessTrace,
    pub sandboxed_trace: AccessTrace,
    pub original_mem: SimMemory,
    pub sandboxed_mem: SimMemory,
}

/// Runs `original` and `sandboxed` on snapshots of `mem`. The sandboxed
/// launch receives the fence argument values appended, as the manager would
/// append them.
pub fn run_pair(
    originals: &Executable,
    original: &str,
    sandboxed_exe: &Executable,
    sandboxed: &str,
    cfg: &LaunchConfig,
    mem: &SimMemory,
    fence: &FenceParams,
) -> Result<PairVerdict, ExecError> {
    let (base, size) = match *fence {
        FenceParams::Bitwise { base, mask } => (base, mask + 1),
        FenceParams::Modulo { base, size, .. } => (base, size),
        FenceParams::Check { base, end } => (base, end - base),
    };

    let mut orig_mem = mem.clone();
    let original_trace = launch(originals, original, cfg, &mut orig_mem)?;

    let mut sand_mem = mem.clone();
    let sand_cfg = cfg.with_fence_args(fence);
    let sandboxed_trace = launch(sandboxed_exe, sandboxed, &sand_cfg, &mut sand_mem)?;

    Ok(PairVerdict {
        original_in_partition: original_trace.contained_in(base, size),
        memories_identical: orig_mem == sand_mem,
        sandboxed_contained: sandboxed_trace.contained_in(base, size),
        original_trace,
        sandboxed_trace,
        original_mem: orig_mem,
        sandboxed_mem: sand_mem,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{sandbox_module, PatchOptions, SandboxMode};
    use crate::ptx::parse_module;

    const STORE_TID: &str = include_str!("../tests/fixtures/store_tid.ptx");
    const LISTING1: &str = include_str!("../tests/fixtures/listing1.ptx");

    const DEV_BASE: u64 = 0x7fa2_c000_0000;
    const MIB: u64 = 1024 * 1024;

    fn compile(src: &str) -> Executable {
        compile_module(&parse_module(src).unwrap())
    }

    fn compile_sandboxed(src: &str, mode: SandboxMode) -> Executable {
        let m = parse_module(src).unwrap();
        let (out, _) = sandbox_module(&m, &PatchOptions::new(mode)).unwrap();
        compile_module(&out)
    }

    fn wrap_body(body: &str) -> String {
        format!(
            ".version 7.7\n.target sm_86\n.address_size 64\n\
             .visible .entry k(\n\t.param .u64 k_param_0\n)\n{{\n\
             \t.reg .b32 %r<8>;\n\t.reg .b64 %rd<8>;\n\t.reg .pred %p<4>;\n{body}\n}}\n"
        )
    }

    #[test]
    fn sandboxed_store_tid_writes_each_cell() {
        let exe = compile_sandboxed(STORE_TID, SandboxMode::FenceBitwise);
        let mut mem = SimMemory::new(DEV_BASE, 32 * MIB);
        let base = DEV_BASE;
        let fence = FenceParams::for_partition(SandboxMode::FenceBitwise, base, 16 * MIB).unwrap();
        let cfg = LaunchConfig::new(1, 8, vec![ArgValue::DevAddr(base), ArgValue::Scalar32(4)])
            .with_fence_args(&fence);
        let trace = launch(&exe, "store_tid", &cfg, &mut mem).unwrap();
        for t in 0..8u64 {
            let got = mem.load(base + 4 * t, 4).unwrap();
            assert_eq!(got, t, "cell {t}");
        }
        assert_eq!(trace.entries.len(), 8);
        assert!(trace.entries.iter().all(|e| e.kind == AccessKind::Store));
        assert!(trace.contained_in(base, 16 * MIB));
    }

    #[test]
    fn listing1_as_written_stores_tid_at_param_index() {
        // The store address is computed from the second parameter, so every
        // thread hits the same cell and the last thread wins.
        let exe = compile_sandboxed(LISTING1, SandboxMode::FenceBitwise);
        let mut mem = SimMemory::new(DEV_BASE, 32 * MIB);
        let fence =
            FenceParams::for_partition(SandboxMode::FenceBitwise, DEV_BASE, 16 * MIB).unwrap();
        let cfg = LaunchConfig::new(
            1,
            8,
            vec![ArgValue::DevAddr(DEV_BASE), ArgValue::Scalar32(4)],
        )
        .with_fence_args(&fence);
        let trace = launch(&exe, "kernel", &cfg, &mut mem).unwrap();
        assert_eq!(trace.entries.len(), 8);
        assert!(trace.entries.iter().all(|e| e.addr == DEV_BASE + 16));
        assert_eq!(mem.load(DEV_BASE + 16, 4).unwrap(), 7);
    }

    #[test]
    fn ret_only_kernel_has_empty_trace() {
        let src =
            ".version 7.7\n.target sm_86\n.address_size 64\n.visible .entry k()\n{\n\tret;\n}\n";
        let exe = compile(src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let trace = launch(&exe, "k", &LaunchConfig::new(1, 4, vec![]), &mut mem).unwrap();
        assert!(trace.entries.is_empty());
        assert_eq!(trace.oob_exits, 0);
    }

    #[test]
    fn fencing_wraps_cross_partition_store() {
        // Partition 2 lives at +256 MiB; a raw address inside partition 1
        // wraps to partition 2's matching offset.
        let exe_orig = compile(STORE_TID);
        let exe_sand = compile_sandboxed(STORE_TID, SandboxMode::FenceBitwise);
        let part2_base = 0x7fa2_d000_0000u64;
        let raw = 0x7fa2_cf00_0010u64;
        let mut mem = SimMemory::new(DEV_BASE, 512 * MIB);

        let cfg = LaunchConfig::new(1, 1, vec![ArgValue::DevAddr(raw), ArgValue::Scalar32(0)]);
        let t0 = launch(&exe_orig, "store_tid", &cfg, &mut mem).unwrap();
        assert_eq!(t0.entries[0].addr, raw);
        assert!(!t0.contained_in(part2_base, 16 * MIB));

        let fence =
            FenceParams::for_partition(SandboxMode::FenceBitwise, part2_base, 16 * MIB).unwrap();
        let t1 = launch(
            &exe_sand,
            "store_tid",
            &cfg.with_fence_args(&fence),
            &mut mem,
        )
        .unwrap();
        assert_eq!(t1.entries[0].addr, 0x7fa2_d000_0010);
        assert!(t1.contained_in(part2_base, 16 * MIB));
    }

    #[test]
    fn check_mode_detects_and_skips_oob() {
        let exe_sand = compile_sandboxed(STORE_TID, SandboxMode::Check);
        let part_base = DEV_BASE + 16 * MIB;
        let raw = DEV_BASE; // inside the device, outside the partition
        let mut mem = SimMemory::new(DEV_BASE, 64 * MIB);
        let fence = FenceParams::for_partition(SandboxMode::Check, part_base, 16 * MIB).unwrap();
        let cfg = LaunchConfig::new(1, 4, vec![ArgValue::DevAddr(raw), ArgValue::Scalar32(0)])
            .with_fence_args(&fence);
        let trace = launch(&exe_sand, "store_tid", &cfg, &mut mem).unwrap();
        assert_eq!(trace.oob_exits, 4);
        assert!(trace.entries.is_empty(), "no access may be performed");
        assert_eq!(mem.load(raw, 4).unwrap(), 0);
    }

    #[test]
    fn run_pair_in_bounds_is_identity() {
        let exe_orig = compile(STORE_TID);
        let exe_sand = compile_sandboxed(STORE_TID, SandboxMode::FenceBitwise);
        let mem = SimMemory::new(DEV_BASE, 32 * MIB);
        let fence =
            FenceParams::for_partition(SandboxMode::FenceBitwise, DEV_BASE, 16 * MIB).unwrap();
        let cfg = LaunchConfig::new(
            2,
            4,
            vec![ArgValue::DevAddr(DEV_BASE), ArgValue::Scalar32(0)],
        );
        let v = run_pair(
            &exe_orig,
            "store_tid",
            &exe_sand,
            "store_tid",
            &cfg,
            &mem,
            &fence,
        )
        .unwrap();
        assert!(v.original_in_partition);
        assert!(v.memories_identical);
        assert!(v.sandboxed_contained);
        assert_eq!(
            v.original_trace.entries.len(),
            v.sandboxed_trace.entries.len()
        );
    }

    #[test]
    fn run_pair_oob_contains_sandboxed_run() {
        let exe_orig = compile(STORE_TID);
        let exe_sand = compile_sandboxed(STORE_TID, SandboxMode::FenceBitwise);
        let mem = SimMemory::new(DEV_BASE, 64 * MIB);
        // Partition at +16 MiB; raw target in the neighbor below.
        let base = DEV_BASE + 16 * MIB;
        let fence = FenceParams::for_partition(SandboxMode::FenceBitwise, base, 16 * MIB).unwrap();
        let cfg = LaunchConfig::new(
            1,
            4,
            vec![ArgValue::DevAddr(DEV_BASE), ArgValue::Scalar32(0)],
        );
        let v = run_pair(
            &exe_orig,
            "store_tid",
            &exe_sand,
            "store_tid",
            &cfg,
            &mem,
            &fence,
        )
        .unwrap();
        assert!(!v.original_in_partition);
        assert!(v.sandboxed_contained);
        assert!(!v.memories_identical);
        // The sandboxed run never touched the raw target's partition.
        assert_eq!(
            v.sandboxed_mem.read_bytes(DEV_BASE, 16).unwrap(),
            &[0u8; 16]
        );
    }

    #[test]
    fn run_pair_check_mode_detects_without_performing_oob() {
        let exe_orig = compile(STORE_TID);
        let exe_sand = compile_sandboxed(STORE_TID, SandboxMode::Check);
        let mem = SimMemory::new(DEV_BASE, 64 * MIB);
        let base = DEV_BASE + 16 * MIB;
        let fence = FenceParams::for_partition(SandboxMode::Check, base, 16 * MIB).unwrap();
        // Raw target inside the device but outside the partition.
        let cfg = LaunchConfig::new(
            1,
            4,
            vec![ArgValue::DevAddr(DEV_BASE), ArgValue::Scalar32(0)],
        );
        let v = run_pair(
            &exe_orig,
            "store_tid",
            &exe_sand,
            "store_tid",
            &cfg,
            &mem,
            &fence,
        )
        .unwrap();
        assert!(!v.original_in_partition);
        assert!(
            v.sandboxed_trace.entries.is_empty(),
            "no OOB access performed"
        );
        assert!(v.sandboxed_trace.oob_exits >= 1);
        // The sandboxed run left the raw target untouched.
        assert_eq!(
            v.sandboxed_mem.read_bytes(DEV_BASE, 16).unwrap(),
            &[0u8; 16]
        );
    }

    #[test]
    fn infinite_loop_hits_step_limit() {
        let src = wrap_body("LOOP:\n\tbra LOOP;");
        let exe = compile(&src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let mut cfg = LaunchConfig::new(1, 1, vec![ArgValue::DevAddr(DEV_BASE)]);
        cfg.step_limit = 10_000;
        let err = launch(&exe, "k", &cfg, &mut mem).unwrap_err();
        assert!(matches!(err, ExecError::StepLimitExceeded { thread: 0 }));
    }

    #[test]
    fn division_by_zero_is_a_type_fault() {
        let src = wrap_body("\tdiv.u32 %r1, %r2, %r3;");
        let exe = compile(&src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let err = launch(
            &exe,
            "k",
            &LaunchConfig::new(1, 1, vec![ArgValue::DevAddr(DEV_BASE)]),
            &mut mem,
        )
        .unwrap_err();
        assert!(matches!(err, ExecError::TypeFault { .. }));
    }

    #[test]
    fn device_fault_outside_simulated_memory() {
        let src = wrap_body("\tld.param.u64 %rd1, [k_param_0];\n\tst.global.u32 [%rd1], %r1;");
        let exe = compile(&src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let cfg = LaunchConfig::new(1, 1, vec![ArgValue::DevAddr(DEV_BASE + 2 * MIB)]);
        let err = launch(&exe, "k", &cfg, &mut mem).unwrap_err();
        assert!(matches!(err, ExecError::DeviceFault { thread: 0, .. }));
    }

    #[test]
    fn unknown_kernel_and_arity_errors() {
        let exe = compile(STORE_TID);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        assert!(matches!(
            launch(&exe, "nope", &LaunchConfig::new(1, 1, vec![]), &mut mem),
            Err(ExecError::UnknownKernel { .. })
        ));
        assert!(matches!(
            launch(
                &exe,
                "store_tid",
                &LaunchConfig::new(1, 1, vec![]),
                &mut mem
            ),
            Err(ExecError::ArityMismatch { .. })
        ));
        let bad = LaunchConfig::new(1, 1, vec![ArgValue::Scalar32(1), ArgValue::Scalar32(0)]);
        assert!(matches!(
            launch(&exe, "store_tid", &bad, &mut mem),
            Err(ExecError::BadArg { index: 0, .. })
        ));
    }

    #[test]
    fn launches_are_deterministic() {
        let exe = compile_sandboxed(STORE_TID, SandboxMode::FenceModulo);
        let fence =
            FenceParams::for_partition(SandboxMode::FenceModulo, DEV_BASE, 4 * MIB).unwrap();
        let cfg = LaunchConfig::new(
            4,
            16,
            vec![ArgValue::DevAddr(DEV_BASE), ArgValue::Scalar32(0)],
        )
        .with_fence_args(&fence);
        let mut m1 = SimMemory::new(DEV_BASE, 8 * MIB);
        let mut m2 = SimMemory::new(DEV_BASE, 8 * MIB);
        let t1 = launch(&exe, "store_tid", &cfg, &mut m1).unwrap();
        let t2 = launch(&exe, "store_tid", &cfg, &mut m2).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn calls_bind_parameters_and_return() {
        let src = ".version 7.7\n.target sm_86\n.address_size 64\n\
            .func poke(\n\t.param .u64 poke_p0,\n\t.param .u32 poke_p1\n)\n{\n\
            \t.reg .b32 %r<2>;\n\t.reg .b64 %rd<2>;\n\
            \tld.param.u64 %rd1, [poke_p0];\n\tld.param.u32 %r1, [poke_p1];\n\
            \tst.global.u32 [%rd1], %r1;\n\tret;\n}\n\
            .visible .entry k(\n\t.param .u64 k_param_0\n)\n{\n\
            \t.reg .b32 %r<2>;\n\t.reg .b64 %rd<2>;\n\
            \tld.param.u64 %rd1, [k_param_0];\n\tmov.u32 %r1, 77;\n\
            \tcall.uni poke, (%rd1, %r1);\n\tmov.u32 %r1, 1;\n\tret;\n}\n";
        let exe = compile(src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let cfg = LaunchConfig::new(1, 1, vec![ArgValue::DevAddr(DEV_BASE + 64)]);
        let trace = launch(&exe, "k", &cfg, &mut mem).unwrap();
        assert_eq!(mem.load(DEV_BASE + 64, 4).unwrap(), 77);
        assert_eq!(trace.entries.len(), 1);
    }

    #[test]
    fn atomics_read_modify_write_and_trace() {
        let src = wrap_body(
            "\tld.param.u64 %rd1, [k_param_0];\n\tmov.u32 %r1, 5;\n\
             \tatom.global.add.u32 %r2, [%rd1], %r1;\n\
             \tred.global.add.u32 [%rd1], %r1;",
        );
        let exe = compile(&src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let cfg = LaunchConfig::new(1, 3, vec![ArgValue::DevAddr(DEV_BASE)]);
        let trace = launch(&exe, "k", &cfg, &mut mem).unwrap();
        // Three threads, two atomics each, +10 per thread.
        assert_eq!(mem.load(DEV_BASE, 4).unwrap(), 30);
        assert_eq!(trace.entries.len(), 6);
        assert!(trace.entries.iter().all(|e| e.kind == AccessKind::Atomic));
    }

    #[test]
    fn brx_dispatches_by_index() {
        let src = wrap_body(
            "\tld.param.u64 %rd1, [k_param_0];\n\tmov.u32 %r1, %tid.x;\n\
             \tbrx.idx %r1, {A, B};\n\
             A:\n\tmov.u32 %r2, 10;\n\tbra DONE;\n\
             B:\n\tmov.u32 %r2, 20;\n\tbra DONE;\n\
             DONE:\n\tmul.wide.u32 %rd2, %tid.x, 4;\n\tadd.u64 %rd3, %rd1, %rd2;\n\
             \tst.global.u32 [%rd3], %r2;",
        );
        let exe = compile(&src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let cfg = LaunchConfig::new(1, 2, vec![ArgValue::DevAddr(DEV_BASE)]);
        launch(&exe, "k", &cfg, &mut mem).unwrap();
        assert_eq!(mem.load(DEV_BASE, 4).unwrap(), 10);
        assert_eq!(mem.load(DEV_BASE + 4, 4).unwrap(), 20);
    }

    #[test]
    fn brx_out_of_range_faults_unsandboxed() {
        let src = wrap_body("\tmov.u32 %r1, 9;\n\tbrx.idx %r1, {A};\nA:\n\tret;");
        let exe = compile(&src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let err = launch(
            &exe,
            "k",
            &LaunchConfig::new(1, 1, vec![ArgValue::DevAddr(DEV_BASE)]),
            &mut mem,
        )
        .unwrap_err();
        assert!(matches!(err, ExecError::TypeFault { .. }));
    }

    #[test]
    fn bar_sync_is_a_sequential_noop() {
        let src = wrap_body(
            "\tld.param.u64 %rd1, [k_param_0];\n\tmov.u32 %r1, %tid.x;\n\
             \tbar.sync 0;\n\tmul.wide.u32 %rd2, %r1, 4;\n\tadd.u64 %rd3, %rd1, %rd2;\n\
             \tst.global.u32 [%rd3], %r1;",
        );
        let exe = compile(&src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let cfg = LaunchConfig::new(1, 4, vec![ArgValue::DevAddr(DEV_BASE)]);
        launch(&exe, "k", &cfg, &mut mem).unwrap();
        assert_eq!(mem.load(DEV_BASE + 12, 4).unwrap(), 3);
    }

    #[test]
    fn f32_add_mul_and_stores() {
        let src = ".version 7.7\n.target sm_86\n.address_size 64\n\
            .visible .entry k(\n\t.param .u64 k_param_0,\n\t.param .f32 k_param_1\n)\n{\n\
            \t.reg .b64 %rd<2>;\n\t.reg .f32 %f<4>;\n\
            \tld.param.u64 %rd1, [k_param_0];\n\tld.param.f32 %f1, [k_param_1];\n\
            \tadd.f32 %f2, %f1, 0f3F800000;\n\tmul.f32 %f3, %f2, %f2;\n\
            \tst.global.f32 [%rd1], %f3;\n\tret;\n}\n";
        let exe = compile(src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let cfg = LaunchConfig::new(1, 1, vec![ArgValue::DevAddr(DEV_BASE), ArgValue::F32(1.5)]);
        launch(&exe, "k", &cfg, &mut mem).unwrap();
        let bits = mem.load(DEV_BASE, 4).unwrap() as u32;
        assert_eq!(f32::from_bits(bits), 6.25);
    }

    #[test]
    fn v4_vector_load_store() {
        let src = wrap_body(
            "\tld.param.u64 %rd1, [k_param_0];\n\
             \tmov.u32 %r1, 10;\n\tmov.u32 %r2, 20;\n\tmov.u32 %r3, 30;\n\tmov.u32 %r4, 40;\n\
             \tst.global.v4.u32 [%rd1], {%r1, %r2, %r3, %r4};\n\
             \tld.global.v4.u32 {%r5, %r6, %r7, %r1}, [%rd1];\n\
             \tst.global.u32 [%rd1+16], %r7;",
        );
        let exe = compile(&src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let cfg = LaunchConfig::new(1, 1, vec![ArgValue::DevAddr(DEV_BASE)]);
        let trace = launch(&exe, "k", &cfg, &mut mem).unwrap();
        assert_eq!(mem.load(DEV_BASE + 16, 4).unwrap(), 30);
        // One trace entry per vector instruction, width = lanes * 4.
        assert_eq!(trace.entries[0].width, 16);
        assert_eq!(trace.entries[1].width, 16);
    }

    #[test]
    fn arithmetic_edge_semantics() {
        // Each case stores one computed value; the final buffer pins the
        // semantics the equivalence corpus silently depends on.
        let src = wrap_body(
            "\tld.param.u64 %rd1, [k_param_0];\n\
             // signed shift-right fills with the sign bit and clamps\n\
             \tmov.u32 %r1, 2147483648;\n\
             \tshr.s32 %r2, %r1, 40;\n\
             \tst.global.u32 [%rd1], %r2;\n\
             // unsigned shift past the width is zero\n\
             \tshr.u32 %r3, %r1, 40;\n\
             \tst.global.u32 [%rd1+4], %r3;\n\
             // mul.wide.s32 sign-extends into the full 64-bit product\n\
             \tmov.u32 %r4, 4294967295;\n\
             \tmul.wide.s32 %rd2, %r4, 7;\n\
             \tst.global.u64 [%rd1+8], %rd2;\n\
             // mul.hi.u32 keeps the high half\n\
             \tmul.hi.u32 %r5, %r4, %r4;\n\
             \tst.global.u32 [%rd1+16], %r5;\n\
             // cvt.s64.s32 sign-extends, cvt.u64.u32 zero-extends\n\
             \tcvt.s64.s32 %rd3, %r4;\n\
             \tst.global.u64 [%rd1+24], %rd3;\n\
             \tcvt.u64.u32 %rd4, %r4;\n\
             \tst.global.u64 [%rd1+32], %rd4;\n\
             // signed min sees -1 < 3; unsigned min sees 3 < 0xffffffff\n\
             \tmov.u32 %r6, 3;\n\
             \tmin.s32 %r7, %r4, %r6;\n\
             \tst.global.u32 [%rd1+40], %r7;\n\
             \tmin.u32 %r7, %r4, %r6;\n\
             \tst.global.u32 [%rd1+44], %r7;\n\
             // selp picks by predicate; mad.wide accumulates in 64 bits\n\
             \tsetp.lt.s32 %p1, %r4, %r6;\n\
             \tselp.b32 %r2, 11, 22, %p1;\n\
             \tst.global.u32 [%rd1+48], %r2;\n\
             \tmad.wide.u32 %rd5, %r4, %r4, %rd4;\n\
             \tst.global.u64 [%rd1+56], %rd5;",
        );
        let exe = compile(&src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let cfg = LaunchConfig::new(1, 1, vec![ArgValue::DevAddr(DEV_BASE)]);
        launch(&exe, "k", &cfg, &mut mem).unwrap();
        let u32_at = |off: u64| mem.load(DEV_BASE + off, 4).unwrap() as u32;
        let u64_at = |off: u64| mem.load(DEV_BASE + off, 8).unwrap();
        assert_eq!(u32_at(0), 0xFFFF_FFFF, "sign fill");
        assert_eq!(u32_at(4), 0, "zero fill");
        assert_eq!(u64_at(8), (-7i64) as u64, "wide signed product");
        assert_eq!(u32_at(16), ((0xFFFF_FFFFu64 * 0xFFFF_FFFFu64) >> 32) as u32);
        assert_eq!(u64_at(24), u64::MAX, "sign extension");
        assert_eq!(u64_at(32), 0xFFFF_FFFF, "zero extension");
        assert_eq!(u32_at(40), 0xFFFF_FFFF, "signed min picks -1");
        assert_eq!(u32_at(44), 3, "unsigned min picks 3");
        assert_eq!(u32_at(48), 11, "selp true arm");
        assert_eq!(u64_at(56), 0xFFFF_FFFFu64 * 0xFFFF_FFFFu64 + 0xFFFF_FFFF);
    }

    #[test]
    fn integer_wraparound_matches_register_width() {
        let src = wrap_body(
            "\tld.param.u64 %rd1, [k_param_0];\n\
             \tmov.u32 %r1, 4294967295;\n\
             \tadd.u32 %r2, %r1, 1;\n\
             \tst.global.u32 [%rd1], %r2;\n\
             \tsub.u32 %r3, %r2, 1;\n\
             \tst.global.u32 [%rd1+4], %r3;",
        );
        let exe = compile(&src);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        launch(
            &exe,
            "k",
            &LaunchConfig::new(1, 1, vec![ArgValue::DevAddr(DEV_BASE)]),
            &mut mem,
        )
        .unwrap();
        assert_eq!(mem.load(DEV_BASE, 4).unwrap(), 0, "u32 add wraps");
        assert_eq!(
            mem.load(DEV_BASE + 4, 4).unwrap(),
            0xFFFF_FFFF,
            "u32 sub wraps"
        );
    }

    #[test]
    fn verbatim_statements_fault_when_reached() {
        // Lenient parsing keeps unknown non-memory statements; they can be
        // patched and loaded, but executing one is a type fault.
        let src = ".version 7.7\n.target sm_86\n.address_size 64\n\
            .visible .entry k()\n{\n\t.reg .f32 %f<3>;\n\
            \tsqrt.approx.f32 %f1, %f2;\n\tret;\n}\n";
        let parsed = crate::ptx::parse_module_opts(src, crate::ptx::ParseOptions { strict: false })
            .unwrap()
            .module;
        let (patched, _) =
            sandbox_module(&parsed, &PatchOptions::new(SandboxMode::FenceBitwise)).unwrap();
        let exe = compile_module(&patched);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let fence = FenceParams::for_partition(SandboxMode::FenceBitwise, DEV_BASE, 4096).unwrap();
        let cfg = LaunchConfig::new(1, 1, vec![]).with_fence_args(&fence);
        let err = launch(&exe, "k", &cfg, &mut mem).unwrap_err();
        assert!(matches!(err, ExecError::TypeFault { .. }));
        assert!(err.to_string().contains("verbatim"));
    }

    #[test]
    fn grid_limit_enforced() {
        let exe = compile(STORE_TID);
        let mut mem = SimMemory::new(DEV_BASE, MIB);
        let cfg = LaunchConfig::new(
            1 << 12,
            1 << 9,
            vec![ArgValue::DevAddr(DEV_BASE), ArgValue::Scalar32(0)],
        );
        assert!(matches!(
            launch(&exe, "store_tid", &cfg, &mut mem),
            Err(ExecError::GridTooLarge { .. })
        ));
    }
}
