//! Lossless syntax representation for the PTX text subset.
//!
//! A [`PtxModule`] holds the parsed form of one translation unit: module
//! directives, `.entry` kernels, `.func` bodies, and any module-level lines
//! the grammar does not model. Parsing and printing round-trip: the printed
//! form of a parsed module parses back to an equal module. The subset
//! grammar is documented in `docs/ptx-subset.md`.

mod emit;
mod lex;
mod parse;

pub use parse::{parse_module, parse_module_opts, ParseOptions, ParseOutcome};

/// Canonical single-line rendering of one instruction.
pub fn instruction_text(i: &Instruction) -> String {
    emit::instruction_text(i)
}

use thiserror::Error;

/// Errors produced while parsing or validating PTX text.
#[derive(Debug, Error)]
pub enum PtxError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: u32, msg: String },
    #[error("line {line}: unsupported feature: {feature}")]
    Unsupported { line: u32, feature: String },
    #[error("line {line}: .address_size 32 is not supported (64-bit modules only)")]
    AddressSize32 { line: u32 },
}

impl PtxError {
    pub fn line(&self) -> u32 {
        match self {
            PtxError::Syntax { line, .. }
            | PtxError::Unsupported { line, .. }
            | PtxError::AddressSize32 { line } => *line,
        }
    }
}

/// A parsed PTX translation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PtxModule {
    /// `.version` major/minor pair.
    pub version: (u32, u32),
    /// `.target` architecture string, e.g. `sm_86`.
    pub target: String,
    /// `.address_size` in bits; always 64 for accepted modules.
    pub address_size: u32,
    /// `.entry` kernels in source order.
    pub entries: Vec<KernelDef>,
    /// `.func` definitions in source order.
    pub funcs: Vec<KernelDef>,
    /// Verbatim module-level lines not modeled by the grammar
    /// (module comments; unknown directives in lenient mode).
    pub passthrough: Vec<String>,
}

impl PtxModule {
    pub fn emit(&self) -> String {
        emit::emit_module(self)
    }

    /// All kernels, `.func` definitions first.
    pub fn kernels(&self) -> impl Iterator<Item = &KernelDef> {
        self.funcs.iter().chain(self.entries.iter())
    }

    pub fn kernels_mut(&mut self) -> impl Iterator<Item = &mut KernelDef> {
        self.funcs.iter_mut().chain(self.entries.iter_mut())
    }

    pub fn find_kernel(&self, name: &str) -> Option<&KernelDef> {
        self.kernels().find(|k| k.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Entry,
    Func,
}

/// One `.entry` kernel or `.func` definition.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelDef {
    pub name: String,
    pub kind: KernelKind,
    pub visible: bool,
    pub params: Vec<ParamDecl>,
    pub reg_decls: Vec<RegDecl>,
    pub body: Vec<Statement>,
    /// Comments between the last statement and the closing brace.
    pub trailing_comments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub ty: ScalarType,
    pub align: Option<u32>,
}

/// One `.reg` bank declaration, e.g. `.reg .b64 %rd<5>;`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegDecl {
    pub ty: ScalarType,
    pub prefix: String,
    pub count: u32,
}

impl RegDecl {
    /// Whether `name` is one of the registers declared by this bank.
    pub fn covers(&self, name: &str) -> bool {
        match split_reg_name(name) {
            Some((prefix, index)) => prefix == self.prefix && index < self.count,
            None => false,
        }
    }
}

/// Splits `%rd12` into `("%rd", 12)`. Returns `None` for names without a
/// trailing index; the subset only declares banked registers.
pub fn split_reg_name(name: &str) -> Option<(&str, u32)> {
    let digits = name.len() - name.bytes().rev().take_while(u8::is_ascii_digit).count();
    if digits == name.len() || digits < 2 {
        return None;
    }
    let index: u32 = name[digits..].parse().ok()?;
    Some((&name[..digits], index))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Statement {
    Label {
        name: String,
        comments: Vec<String>,
    },
    Instr(Instruction),
    /// A line preserved verbatim in lenient mode.
    Verbatim {
        text: String,
        comments: Vec<String>,
    },
}

impl Statement {
    pub fn as_instr(&self) -> Option<&Instruction> {
        match self {
            Statement::Instr(i) => Some(i),
            _ => None,
        }
    }

    pub fn comments(&self) -> &[String] {
        match self {
            Statement::Label { comments, .. } | Statement::Verbatim { comments, .. } => comments,
            Statement::Instr(i) => &i.comments,
        }
    }
}

/// Predicate guard on an instruction: `@%p1` or `@!%p1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Guard {
    pub reg: String,
    pub negated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    /// Comments on the lines immediately above (and trailing on the same line).
    pub comments: Vec<String>,
    pub guard: Option<Guard>,
    pub opcode: Opcode,
    pub modifiers: Vec<Modifier>,
    pub operands: Vec<Operand>,
}

impl Instruction {
    pub fn bare(opcode: Opcode, modifiers: Vec<Modifier>, operands: Vec<Operand>) -> Self {
        Instruction {
            comments: Vec::new(),
            guard: None,
            opcode,
            modifiers,
            operands,
        }
    }

    /// State space qualifier, or `Generic` when absent.
    pub fn space(&self) -> StateSpace {
        self.modifiers
            .iter()
            .find_map(|m| match m {
                Modifier::Space(s) => Some(*s),
                _ => None,
            })
            .unwrap_or(StateSpace::Generic)
    }

    pub fn scalar_type(&self) -> Option<ScalarType> {
        self.modifiers.iter().find_map(|m| match m {
            Modifier::Ty(t) => Some(*t),
            _ => None,
        })
    }

    pub fn vector_arity(&self) -> u32 {
        self.modifiers
            .iter()
            .find_map(|m| match m {
                Modifier::Vector(n) => Some(*n as u32),
                _ => None,
            })
            .unwrap_or(1)
    }

    pub fn is_memory_class(&self) -> bool {
        matches!(
            self.opcode,
            Opcode::Ld | Opcode::St | Opcode::Atom | Opcode::Red
        )
    }

    pub fn address_operand(&self) -> Option<&AddrOperand> {
        self.operands.iter().find_map(|o| match o {
            Operand::Addr(a) => Some(a),
            _ => None,
        })
    }
}

/// Root mnemonics of the subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Ld,
    St,
    Atom,
    Red,
    Mov,
    Add,
    Sub,
    Mul,
    Mad,
    Div,
    Rem,
    And,
    Or,
    Xor,
    Not,
    Shl,
    Shr,
    Min,
    Max,
    Setp,
    Selp,
    Cvt,
    Cvta,
    Bra,
    BrxIdx,
    Call,
    Ret,
    Bar,
}

impl Opcode {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Opcode::Ld => "ld",
            Opcode::St => "st",
            Opcode::Atom => "atom",
            Opcode::Red => "red",
            Opcode::Mov => "mov",
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::Mad => "mad",
            Opcode::Div => "div",
            Opcode::Rem => "rem",
            Opcode::And => "and",
            Opcode::Or => "or",
            Opcode::Xor => "xor",
            Opcode::Not => "not",
            Opcode::Shl => "shl",
            Opcode::Shr => "shr",
            Opcode::Min => "min",
            Opcode::Max => "max",
            Opcode::Setp => "setp",
            Opcode::Selp => "selp",
            Opcode::Cvt => "cvt",
            Opcode::Cvta => "cvta",
            Opcode::Bra => "bra",
            Opcode::BrxIdx => "brx.idx",
            Opcode::Call => "call",
            Opcode::Ret => "ret",
            Opcode::Bar => "bar",
        }
    }

    pub fn from_root(word: &str) -> Option<Opcode> {
        Some(match word {
            "ld" => Opcode::Ld,
            "st" => Opcode::St,
            "atom" => Opcode::Atom,
            "red" => Opcode::Red,
            "mov" => Opcode::Mov,
            "add" => Opcode::Add,
            "sub" => Opcode::Sub,
            "mul" => Opcode::Mul,
            "mad" => Opcode::Mad,
            "div" => Opcode::Div,
            "rem" => Opcode::Rem,
            "and" => Opcode::And,
            "or" => Opcode::Or,
            "xor" => Opcode::Xor,
            "not" => Opcode::Not,
            "shl" => Opcode::Shl,
            "shr" => Opcode::Shr,
            "min" => Opcode::Min,
            "max" => Opcode::Max,
            "setp" => Opcode::Setp,
            "selp" => Opcode::Selp,
            "cvt" => Opcode::Cvt,
            "cvta" => Opcode::Cvta,
            "bra" => Opcode::Bra,
            "brx" => Opcode::BrxIdx,
            "call" => Opcode::Call,
            "ret" => Opcode::Ret,
            "bar" => Opcode::Bar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateSpace {
    Global,
    Local,
    Shared,
    Param,
    Const,
    /// No state-space qualifier on the access.
    Generic,
}

impl StateSpace {
    pub fn keyword(&self) -> Option<&'static str> {
        match self {
            StateSpace::Global => Some("global"),
            StateSpace::Local => Some("local"),
            StateSpace::Shared => Some("shared"),
            StateSpace::Param => Some("param"),
            StateSpace::Const => Some("const"),
            StateSpace::Generic => None,
        }
    }

    /// Spaces the sandboxing pass rewrites; shared/param/const accesses are
    /// left untouched.
    pub fn instrumentable(&self) -> bool {
        matches!(
            self,
            StateSpace::Global | StateSpace::Local | StateSpace::Generic
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarType {
    Pred,
    B16,
    B32,
    B64,
    U16,
    U32,
    U64,
    S32,
    S64,
    F32,
    F64,
}

impl ScalarType {
    pub fn keyword(&self) -> &'static str {
        match self {
            ScalarType::Pred => "pred",
            ScalarType::B16 => "b16",
            ScalarType::B32 => "b32",
            ScalarType::B64 => "b64",
            ScalarType::U16 => "u16",
            ScalarType::U32 => "u32",
            ScalarType::U64 => "u64",
            ScalarType::S32 => "s32",
            ScalarType::S64 => "s64",
            ScalarType::F32 => "f32",
            ScalarType::F64 => "f64",
        }
    }

    pub fn from_keyword(word: &str) -> Option<ScalarType> {
        Some(match word {
            "pred" => ScalarType::Pred,
            "b16" => ScalarType::B16,
            "b32" => ScalarType::B32,
            "b64" => ScalarType::B64,
            "u16" => ScalarType::U16,
            "u32" => ScalarType::U32,
            "u64" => ScalarType::U64,
            "s32" => ScalarType::S32,
            "s64" => ScalarType::S64,
            "f32" => ScalarType::F32,
            "f64" => ScalarType::F64,
            _ => return None,
        })
    }

    /// Width in bytes; predicates have no memory width.
    pub fn width_bytes(&self) -> u64 {
        match self {
            ScalarType::Pred => 1,
            ScalarType::B16 | ScalarType::U16 => 2,
            ScalarType::B32 | ScalarType::U32 | ScalarType::S32 | ScalarType::F32 => 4,
            ScalarType::B64 | ScalarType::U64 | ScalarType::S64 | ScalarType::F64 => 8,
        }
    }

    pub fn is_signed(&self) -> bool {
        matches!(self, ScalarType::S32 | ScalarType::S64)
    }

    pub fn is_float(&self) -> bool {
        matches!(self, ScalarType::F32 | ScalarType::F64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn keyword(&self) -> &'static str {
        match self {
            CmpOp::Eq => "eq",
            CmpOp::Ne => "ne",
            CmpOp::Lt => "lt",
            CmpOp::Le => "le",
            CmpOp::Gt => "gt",
            CmpOp::Ge => "ge",
        }
    }
}

/// Predicate-combining qualifier on `setp`, e.g. the `.or` in
/// `setp.ge.or.u64 %p, %a, %b, %p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoolOp {
    And,
    Or,
    Xor,
}

impl BoolOp {
    pub fn keyword(&self) -> &'static str {
        match self {
            BoolOp::And => "and",
            BoolOp::Or => "or",
            BoolOp::Xor => "xor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MulHalf {
    Lo,
    Hi,
    Wide,
}

impl MulHalf {
    pub fn keyword(&self) -> &'static str {
        match self {
            MulHalf::Lo => "lo",
            MulHalf::Hi => "hi",
            MulHalf::Wide => "wide",
        }
    }
}

/// Operation qualifier on `atom`/`red`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomOp {
    Add,
    Min,
    Max,
    And,
    Or,
    Xor,
    Exch,
}

impl AtomOp {
    pub fn keyword(&self) -> &'static str {
        match self {
            AtomOp::Add => "add",
            AtomOp::Min => "min",
            AtomOp::Max => "max",
            AtomOp::And => "and",
            AtomOp::Or => "or",
            AtomOp::Xor => "xor",
            AtomOp::Exch => "exch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundMode {
    Rn,
    Rz,
    Rm,
    Rp,
}

impl RoundMode {
    pub fn keyword(&self) -> &'static str {
        match self {
            RoundMode::Rn => "rn",
            RoundMode::Rz => "rz",
            RoundMode::Rm => "rm",
            RoundMode::Rp => "rp",
        }
    }
}

/// One dotted qualifier, in source order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Modifier {
    Space(StateSpace),
    Ty(ScalarType),
    Vector(u8),
    Cmp(CmpOp),
    Bool(BoolOp),
    Half(MulHalf),
    AtomOp(AtomOp),
    Round(RoundMode),
    To,
    Sync,
    Uni,
}

impl Modifier {
    pub fn keyword(&self) -> String {
        match self {
            Modifier::Space(s) => s
                .keyword()
                .expect("generic space has no keyword")
                .to_string(),
            Modifier::Ty(t) => t.keyword().to_string(),
            Modifier::Vector(n) => format!("v{n}"),
            Modifier::Cmp(c) => c.keyword().to_string(),
            Modifier::Bool(b) => b.keyword().to_string(),
            Modifier::Half(h) => h.keyword().to_string(),
            Modifier::AtomOp(a) => a.keyword().to_string(),
            Modifier::Round(r) => r.keyword().to_string(),
            Modifier::To => "to".to_string(),
            Modifier::Sync => "sync".to_string(),
            Modifier::Uni => "uni".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialReg {
    TidX,
    NtidX,
    CtaidX,
    NctaidX,
}

impl SpecialReg {
    pub fn text(&self) -> &'static str {
        match self {
            SpecialReg::TidX => "%tid.x",
            SpecialReg::NtidX => "%ntid.x",
            SpecialReg::CtaidX => "%ctaid.x",
            SpecialReg::NctaidX => "%nctaid.x",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Immediate {
    /// Integer literal; value range checked to fit the subset's 64-bit lanes.
    Int(i128),
    /// `0f`-form single-precision literal, stored as raw bits.
    F32Bits(u32),
    /// `0d`-form double-precision literal, stored as raw bits.
    F64Bits(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AddrBase {
    Reg(String),
    Sym(String),
}

/// The bracketed operand of a memory access: `[%rd3+8]` or `[name]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AddrOperand {
    pub base: AddrBase,
    pub offset: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Reg(String),
    Imm(Immediate),
    Addr(AddrOperand),
    /// Braced register group for vector accesses: `{%r1, %r2}`.
    VecGroup(Vec<String>),
    Special(SpecialReg),
    LabelRef(String),
    /// Braced label list of `brx.idx`: `{L0, L1, L2}`.
    LabelArray(Vec<String>),
}

/// Addressing classification of one memory access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Addressing {
    /// Zero offset: the access uses a base value as-is.
    Direct,
    /// Register base plus a nonzero byte offset.
    BaseOffset,
    /// Symbol base outside the `.param` space (module-scope variables;
    /// only reachable in lenient mode).
    Symbolic,
}

/// One entry of [`list_memory_ops`].
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryOp {
    /// Index into the kernel body (labels included).
    pub stmt_index: usize,
    pub opcode: Opcode,
    pub space: StateSpace,
    pub addressing: Addressing,
}

impl MemoryOp {
    pub fn instrumentable(&self) -> bool {
        self.space.instrumentable()
    }
}

/// Lists every `ld`/`st`/`atom`/`red` in body order with its state space and
/// addressing classification.
pub fn list_memory_ops(kernel: &KernelDef) -> Vec<MemoryOp> {
    let mut out = Vec::new();
    for (stmt_index, stmt) in kernel.body.iter().enumerate() {
        let Some(instr) = stmt.as_instr() else {
            continue;
        };
        if !instr.is_memory_class() {
            continue;
        }
        let space = instr.space();
        let Some(addr) = instr.address_operand() else {
            continue;
        };
        let addressing = classify_addressing(space, addr);
        out.push(MemoryOp {
            stmt_index,
            opcode: instr.opcode,
            space,
            addressing,
        });
    }
    out
}

pub fn classify_addressing(space: StateSpace, addr: &AddrOperand) -> Addressing {
    match (&addr.base, space) {
        // Parameters are always addressed by name; that is the ordinary
        // direct form for the param space.
        (AddrBase::Sym(_), StateSpace::Param) => {
            if addr.offset == 0 {
                Addressing::Direct
            } else {
                Addressing::BaseOffset
            }
        }
        (AddrBase::Sym(_), _) => Addressing::Symbolic,
        (AddrBase::Reg(_), _) => {
            if addr.offset == 0 {
                Addressing::Direct
            } else {
                Addressing::BaseOffset
            }
        }
    }
}
