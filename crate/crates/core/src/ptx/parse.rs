//! Recursive-descent parser for the PTX subset, with strict and lenient modes.

use std::collections::HashSet;

use super::lex::{lex, SpTok, Tok};
use super::*;

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    /// In strict mode (the default) statements and directives outside the
    /// subset are errors. In lenient mode non-memory statements are kept
    /// verbatim with a warning; memory-class statements must parse in both
    /// modes.
    pub strict: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { strict: true }
    }
}

#[derive(Debug)]
pub struct ParseOutcome {
    pub module: PtxModule,
    pub warnings: Vec<String>,
}

/// Parses a module in strict mode.
pub fn parse_module(text: &str) -> Result<PtxModule, PtxError> {
    parse_module_opts(text, ParseOptions::default()).map(|o| o.module)
}

pub fn parse_module_opts(text: &str, opts: ParseOptions) -> Result<ParseOutcome, PtxError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        pos: 0,
        opts,
        warnings: Vec::new(),
    };
    let module = p.module()?;
    validate(&module)?;
    Ok(ParseOutcome {
        module,
        warnings: p.warnings,
    })
}

struct Parser {
    toks: Vec<SpTok>,
    pos: usize,
    opts: ParseOptions,
    warnings: Vec<String>,
}

enum BodyItem {
    Instr(Instruction),
    Verbatim(String),
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn line(&self) -> u32 {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map(|t| t.line)
            .unwrap_or(1)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.tok.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, PtxError> {
        Err(PtxError::Syntax {
            line: self.line(),
            msg: msg.into(),
        })
    }

    fn unsupported<T>(&self, feature: impl Into<String>) -> Result<T, PtxError> {
        Err(PtxError::Unsupported {
            line: self.line(),
            feature: feature.into(),
        })
    }

    fn expect(&mut self, want: &Tok) -> Result<(), PtxError> {
        match self.peek() {
            Some(t) if t == want => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => {
                let got = t.describe();
                self.err(format!("expected {}, found {}", want.describe(), got))
            }
            None => self.err(format!("expected {}, found end of file", want.describe())),
        }
    }

    fn expect_dot(&mut self, word: &str) -> Result<(), PtxError> {
        self.expect(&Tok::Dot(word.to_string()))
    }

    fn expect_word(&mut self) -> Result<String, PtxError> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            Some(t) => {
                let got = t.describe();
                self.err(format!("expected identifier, found {got}"))
            }
            None => self.err("expected identifier, found end of file"),
        }
    }

    fn expect_int(&mut self) -> Result<i128, PtxError> {
        match self.peek() {
            Some(Tok::Int(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            Some(t) => {
                let got = t.describe();
                self.err(format!("expected integer, found {got}"))
            }
            None => self.err("expected integer, found end of file"),
        }
    }

    fn expect_reg(&mut self) -> Result<String, PtxError> {
        match self.peek() {
            Some(Tok::Reg(r)) => {
                let r = r.clone();
                self.pos += 1;
                Ok(r)
            }
            Some(t) => {
                let got = t.describe();
                self.err(format!("expected register, found {got}"))
            }
            None => self.err("expected register, found end of file"),
        }
    }

    /// Consumes up to and including the next `;` (stopping before `}`) and
    /// re-renders the covered tokens as one line of text.
    fn take_verbatim_statement(&mut self) -> String {
        let mut parts: Vec<String> = Vec::new();
        while let Some(t) = self.peek() {
            if matches!(t, Tok::RBrace) {
                break;
            }
            let t = self.next().unwrap();
            let done = t == Tok::Semi;
            parts.push(t.describe());
            if done {
                break;
            }
        }
        render_tokens(&parts)
    }

    fn module(&mut self) -> Result<PtxModule, PtxError> {
        let mut passthrough = Vec::new();

        // Leading comments belong to the module.
        while let Some(Tok::Comment(_)) = self.peek() {
            if let Some(Tok::Comment(c)) = self.next() {
                passthrough.push(format!("// {c}"));
            }
        }

        self.expect_dot("version")?;
        let version = match self.peek() {
            Some(Tok::Version(a, b)) => {
                let v = (*a, *b);
                self.pos += 1;
                v
            }
            _ => return self.err("expected version number after .version"),
        };
        self.expect_dot("target")?;
        let target = self.expect_word()?;
        self.expect_dot("address_size")?;
        let line = self.line();
        let address_size = self.expect_int()? as u32;
        if address_size == 32 {
            return Err(PtxError::AddressSize32 { line });
        }
        if address_size != 64 {
            return self.err(format!("unsupported .address_size {address_size}"));
        }

        let mut entries = Vec::new();
        let mut funcs = Vec::new();

        loop {
            match self.peek() {
                None => break,
                Some(Tok::Comment(_)) => {
                    if let Some(Tok::Comment(c)) = self.next() {
                        passthrough.push(format!("// {c}"));
                    }
                }
                Some(Tok::Dot(word)) => match word.as_str() {
                    "visible" | "entry" | "func" => {
                        let k = self.kernel()?;
                        match k.kind {
                            KernelKind::Entry => entries.push(k),
                            KernelKind::Func => funcs.push(k),
                        }
                    }
                    other => {
                        if self.opts.strict {
                            return self.unsupported(format!("module-level directive .{other}"));
                        }
                        let line = self.line();
                        let text = self.take_verbatim_statement();
                        self.warnings.push(format!(
                            "line {line}: preserved unmodeled directive: {text}"
                        ));
                        passthrough.push(text);
                    }
                },
                Some(t) => {
                    let got = t.describe();
                    return self.err(format!("expected kernel or directive, found {got}"));
                }
            }
        }

        Ok(PtxModule {
            version,
            target,
            address_size,
            entries,
            funcs,
            passthrough,
        })
    }

    fn kernel(&mut self) -> Result<KernelDef, PtxError> {
        let mut visible = false;
        if self.peek() == Some(&Tok::Dot("visible".into())) {
            self.pos += 1;
            visible = true;
        }
        let kind = match self.peek() {
            Some(Tok::Dot(w)) if w == "entry" => {
                self.pos += 1;
                KernelKind::Entry
            }
            Some(Tok::Dot(w)) if w == "func" => {
                self.pos += 1;
                KernelKind::Func
            }
            _ => return self.err("expected .entry or .func"),
        };
        let name = self.expect_word()?;

        self.expect(&Tok::LParen)?;
        let mut params = Vec::new();
        if self.peek() == Some(&Tok::RParen) {
            self.pos += 1;
        } else {
            loop {
                // Comments between parameter declarations are not modeled.
                while let Some(Tok::Comment(_)) = self.peek() {
                    self.pos += 1;
                }
                params.push(self.param_decl()?);
                while let Some(Tok::Comment(_)) = self.peek() {
                    self.pos += 1;
                }
                match self.peek() {
                    Some(Tok::Comma) => self.pos += 1,
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        break;
                    }
                    _ => return self.err("expected ',' or ')' in parameter list"),
                }
            }
        }

        self.expect(&Tok::LBrace)?;
        let mut reg_decls = Vec::new();
        let mut body = Vec::new();
        let mut pending: Vec<String> = Vec::new();
        loop {
            match self.peek() {
                None => return self.err("unterminated kernel body"),
                Some(Tok::RBrace) => {
                    self.pos += 1;
                    break;
                }
                Some(Tok::Comment(_)) => {
                    if let Some(Tok::Comment(c)) = self.next() {
                        pending.push(c);
                    }
                }
                Some(Tok::Dot(w)) if w == "reg" => {
                    // Register banks may appear anywhere in the body; they
                    // are hoisted to the declaration list. Comments above a
                    // declaration attach to the next statement instead.
                    self.pos += 1;
                    reg_decls.push(self.reg_decl()?);
                }
                Some(Tok::Dot(w)) => {
                    let w = w.clone();
                    if self.opts.strict {
                        return self.unsupported(format!("body-level directive .{w}"));
                    }
                    let line = self.line();
                    let text = self.take_verbatim_statement();
                    self.warnings.push(format!(
                        "line {line}: preserved unmodeled statement: {text}"
                    ));
                    body.push(Statement::Verbatim {
                        text,
                        comments: std::mem::take(&mut pending),
                    });
                }
                Some(Tok::Word(_))
                    if self.toks.get(self.pos + 1).map(|t| &t.tok) == Some(&Tok::Colon) =>
                {
                    let name = self.expect_word()?;
                    self.pos += 1; // colon
                    body.push(Statement::Label {
                        name,
                        comments: std::mem::take(&mut pending),
                    });
                }
                _ => {
                    let comments = std::mem::take(&mut pending);
                    match self.statement()? {
                        BodyItem::Instr(mut instr) => {
                            instr.comments = comments;
                            // A trailing comment on the same line attaches to
                            // the statement it follows.
                            let stmt_line =
                                self.toks.get(self.pos.saturating_sub(1)).map(|t| t.line);
                            while let Some(SpTok {
                                tok: Tok::Comment(c),
                                line,
                            }) = self.toks.get(self.pos)
                            {
                                if Some(*line) == stmt_line {
                                    instr.comments.push(c.clone());
                                    self.pos += 1;
                                } else {
                                    break;
                                }
                            }
                            body.push(Statement::Instr(instr));
                        }
                        BodyItem::Verbatim(text) => {
                            body.push(Statement::Verbatim { text, comments });
                        }
                    }
                }
            }
        }

        Ok(KernelDef {
            name,
            kind,
            visible,
            params,
            reg_decls,
            body,
            trailing_comments: pending,
        })
    }

    fn param_decl(&mut self) -> Result<ParamDecl, PtxError> {
        self.expect_dot("param")?;
        let mut align = None;
        if self.peek() == Some(&Tok::Dot("align".into())) {
            self.pos += 1;
            align = Some(self.expect_int()? as u32);
        }
        let ty = self.scalar_type()?;
        if ty == ScalarType::Pred {
            return self.err("parameters cannot have type .pred");
        }
        let name = self.expect_word()?;
        Ok(ParamDecl { name, ty, align })
    }

    fn reg_decl(&mut self) -> Result<RegDecl, PtxError> {
        let ty = self.scalar_type()?;
        let prefix = self.expect_reg()?;
        self.expect(&Tok::Lt)?;
        let count = self.expect_int()?;
        if !(1..=1 << 16).contains(&count) {
            return self.err("register bank count out of range");
        }
        self.expect(&Tok::Gt)?;
        self.expect(&Tok::Semi)?;
        Ok(RegDecl {
            ty,
            prefix,
            count: count as u32,
        })
    }

    fn scalar_type(&mut self) -> Result<ScalarType, PtxError> {
        match self.peek() {
            Some(Tok::Dot(w)) => match ScalarType::from_keyword(w) {
                Some(t) => {
                    self.pos += 1;
                    Ok(t)
                }
                None => {
                    let w = w.clone();
                    self.unsupported(format!("type .{w}"))
                }
            },
            _ => self.err("expected a type qualifier"),
        }
    }

    /// Parses one instruction, falling back to a verbatim line in lenient
    /// mode for non-memory statements outside the subset.
    fn statement(&mut self) -> Result<BodyItem, PtxError> {
        let start_pos = self.pos;
        let line = self.line();
        match self.instruction() {
            Ok(i) => Ok(BodyItem::Instr(i)),
            Err(e) => {
                if self.opts.strict {
                    return Err(e);
                }
                // Memory-class statements must parse fully even in lenient
                // mode.
                let root = match self.toks.get(start_pos).map(|t| &t.tok) {
                    Some(Tok::Word(w)) => Opcode::from_root(w),
                    _ => None,
                };
                if matches!(
                    root,
                    Some(Opcode::Ld) | Some(Opcode::St) | Some(Opcode::Atom) | Some(Opcode::Red)
                ) {
                    return Err(e);
                }
                self.pos = start_pos;
                let text = self.take_verbatim_statement();
                self.warnings.push(format!(
                    "line {line}: preserved unmodeled statement: {text}"
                ));
                Ok(BodyItem::Verbatim(text))
            }
        }
    }

    fn instruction(&mut self) -> Result<Instruction, PtxError> {
        let mut guard = None;
        if self.peek() == Some(&Tok::At) {
            self.pos += 1;
            let negated = if self.peek() == Some(&Tok::Bang) {
                self.pos += 1;
                true
            } else {
                false
            };
            let reg = self.expect_reg()?;
            guard = Some(Guard { reg, negated });
        }

        let root = self.expect_word()?;
        let Some(opcode) = Opcode::from_root(&root) else {
            self.pos -= 1;
            return self.unsupported(format!("opcode {root}"));
        };
        if opcode == Opcode::BrxIdx {
            self.expect_dot("idx")?;
        }

        let mut modifiers = Vec::new();
        while let Some(Tok::Dot(w)) = self.peek() {
            let w = w.clone();
            let m = self.modifier(opcode, &w)?;
            modifiers.push(m);
            self.pos += 1;
        }

        let operands = if opcode == Opcode::Call {
            self.call_operands()?
        } else {
            let mut operands = Vec::new();
            if self.peek() == Some(&Tok::Semi) {
                self.pos += 1;
            } else {
                loop {
                    operands.push(self.operand(opcode)?);
                    match self.peek() {
                        Some(Tok::Comma) => self.pos += 1,
                        Some(Tok::Semi) => {
                            self.pos += 1;
                            break;
                        }
                        _ => return self.err("expected ',' or ';' after operand"),
                    }
                }
            }
            operands
        };

        let instr = Instruction {
            comments: Vec::new(),
            guard,
            opcode,
            modifiers,
            operands,
        };
        self.check_shape(&instr)?;
        Ok(instr)
    }

    /// `call[.uni] callee[, (arg, ...)];` — the argument group is flattened
    /// into the operand list after the callee.
    fn call_operands(&mut self) -> Result<Vec<Operand>, PtxError> {
        if self.peek() == Some(&Tok::LParen) {
            return self.unsupported("call with return values");
        }
        let callee = self.expect_word()?;
        let mut operands = vec![Operand::LabelRef(callee)];
        match self.peek() {
            Some(Tok::Semi) => {
                self.pos += 1;
                return Ok(operands);
            }
            Some(Tok::Comma) => self.pos += 1,
            _ => return self.err("expected ',' or ';' after call target"),
        }
        self.expect(&Tok::LParen)?;
        if self.peek() == Some(&Tok::RParen) {
            self.pos += 1;
        } else {
            loop {
                operands.push(self.operand(Opcode::Call)?);
                match self.peek() {
                    Some(Tok::Comma) => self.pos += 1,
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        break;
                    }
                    _ => return self.err("expected ',' or ')' in call arguments"),
                }
            }
        }
        self.expect(&Tok::Semi)?;
        Ok(operands)
    }

    fn modifier(&mut self, opcode: Opcode, word: &str) -> Result<Modifier, PtxError> {
        // Keywords are context sensitive: `.or` combines predicates on setp
        // but is an operation qualifier on atom/red.
        if matches!(opcode, Opcode::Atom | Opcode::Red) {
            let op = match word {
                "add" => Some(AtomOp::Add),
                "min" => Some(AtomOp::Min),
                "max" => Some(AtomOp::Max),
                "and" => Some(AtomOp::And),
                "or" => Some(AtomOp::Or),
                "xor" => Some(AtomOp::Xor),
                "exch" => Some(AtomOp::Exch),
                _ => None,
            };
            if let Some(op) = op {
                return Ok(Modifier::AtomOp(op));
            }
        }
        if opcode == Opcode::Setp {
            let op = match word {
                "and" => Some(BoolOp::And),
                "or" => Some(BoolOp::Or),
                "xor" => Some(BoolOp::Xor),
                _ => None,
            };
            if let Some(op) = op {
                return Ok(Modifier::Bool(op));
            }
        }
        let m = match word {
            "global" => Modifier::Space(StateSpace::Global),
            "local" => Modifier::Space(StateSpace::Local),
            "shared" => Modifier::Space(StateSpace::Shared),
            "param" => Modifier::Space(StateSpace::Param),
            "const" => Modifier::Space(StateSpace::Const),
            "v2" => Modifier::Vector(2),
            "v4" => Modifier::Vector(4),
            "eq" => Modifier::Cmp(CmpOp::Eq),
            "ne" => Modifier::Cmp(CmpOp::Ne),
            "lt" => Modifier::Cmp(CmpOp::Lt),
            "le" => Modifier::Cmp(CmpOp::Le),
            "gt" => Modifier::Cmp(CmpOp::Gt),
            "ge" => Modifier::Cmp(CmpOp::Ge),
            "lo" => Modifier::Half(MulHalf::Lo),
            "hi" => Modifier::Half(MulHalf::Hi),
            "wide" => Modifier::Half(MulHalf::Wide),
            "rn" => Modifier::Round(RoundMode::Rn),
            "rz" => Modifier::Round(RoundMode::Rz),
            "rm" => Modifier::Round(RoundMode::Rm),
            "rp" => Modifier::Round(RoundMode::Rp),
            "to" => Modifier::To,
            "sync" => Modifier::Sync,
            "uni" => Modifier::Uni,
            other => match ScalarType::from_keyword(other) {
                Some(t) => Modifier::Ty(t),
                None => return self.unsupported(format!("modifier .{other}")),
            },
        };
        Ok(m)
    }

    fn operand(&mut self, opcode: Opcode) -> Result<Operand, PtxError> {
        match self.peek() {
            Some(Tok::Reg(r)) => {
                let r = r.clone();
                self.pos += 1;
                Ok(Operand::Reg(r))
            }
            Some(Tok::Special(s)) => {
                let s = *s;
                self.pos += 1;
                Ok(Operand::Special(s))
            }
            Some(Tok::Int(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(Operand::Imm(Immediate::Int(v)))
            }
            Some(Tok::F32(bits)) => {
                let bits = *bits;
                self.pos += 1;
                Ok(Operand::Imm(Immediate::F32Bits(bits)))
            }
            Some(Tok::F64(bits)) => {
                let bits = *bits;
                self.pos += 1;
                Ok(Operand::Imm(Immediate::F64Bits(bits)))
            }
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(Operand::LabelRef(w))
            }
            Some(Tok::LBrack) => {
                self.pos += 1;
                let base = match self.peek() {
                    Some(Tok::Reg(r)) => {
                        let r = r.clone();
                        self.pos += 1;
                        AddrBase::Reg(r)
                    }
                    Some(Tok::Word(w)) => {
                        let w = w.clone();
                        self.pos += 1;
                        AddrBase::Sym(w)
                    }
                    _ => return self.err("expected register or symbol in address operand"),
                };
                let mut offset: i64 = 0;
                match self.peek() {
                    Some(Tok::Plus) => {
                        self.pos += 1;
                        let v = self.expect_int()?;
                        offset = self.offset_in_range(v)?;
                    }
                    Some(Tok::Int(v)) if *v < 0 => {
                        let v = *v;
                        self.pos += 1;
                        offset = self.offset_in_range(v)?;
                    }
                    _ => {}
                }
                self.expect(&Tok::RBrack)?;
                Ok(Operand::Addr(AddrOperand { base, offset }))
            }
            Some(Tok::LBrace) => {
                self.pos += 1;
                if opcode == Opcode::BrxIdx {
                    let mut labels = Vec::new();
                    loop {
                        labels.push(self.expect_word()?);
                        match self.peek() {
                            Some(Tok::Comma) => self.pos += 1,
                            Some(Tok::RBrace) => {
                                self.pos += 1;
                                break;
                            }
                            _ => return self.err("expected ',' or '}' in label array"),
                        }
                    }
                    Ok(Operand::LabelArray(labels))
                } else {
                    let mut regs = Vec::new();
                    loop {
                        regs.push(self.expect_reg()?);
                        match self.peek() {
                            Some(Tok::Comma) => self.pos += 1,
                            Some(Tok::RBrace) => {
                                self.pos += 1;
                                break;
                            }
                            _ => return self.err("expected ',' or '}' in vector group"),
                        }
                    }
                    Ok(Operand::VecGroup(regs))
                }
            }
            Some(t) => {
                let got = t.describe();
                self.err(format!("unexpected operand {got}"))
            }
            None => self.err("expected operand, found end of file"),
        }
    }

    fn offset_in_range(&self, v: i128) -> Result<i64, PtxError> {
        if v > i32::MAX as i128 || v < i32::MIN as i128 {
            return Err(PtxError::Syntax {
                line: self.line(),
                msg: format!("address offset {v} does not fit in signed 32 bits"),
            });
        }
        Ok(v as i64)
    }

    fn check_shape(&self, i: &Instruction) -> Result<(), PtxError> {
        use Opcode::*;
        let n = i.operands.len();
        let bad = |msg: &str| -> Result<(), PtxError> {
            self.err(format!("{}: {msg}", i.opcode.mnemonic()))
        };
        let is_addr = |k: usize| matches!(i.operands.get(k), Some(Operand::Addr(_)));
        let addr_count = i
            .operands
            .iter()
            .filter(|o| matches!(o, Operand::Addr(_)))
            .count();
        match i.opcode {
            Ld => {
                if n != 2 || !is_addr(1) {
                    return bad("expects destination and one address operand");
                }
            }
            St => {
                if n != 2 || !is_addr(0) {
                    return bad("expects one address operand and a source");
                }
            }
            Atom => {
                if n != 3 || !is_addr(1) {
                    return bad("expects destination, address, and source");
                }
            }
            Red => {
                if n != 2 || !is_addr(0) {
                    return bad("expects address and source");
                }
            }
            Mov | Not | Cvt | Cvta => {
                if n != 2 {
                    return bad("expects two operands");
                }
            }
            Add | Sub | Mul | Div | Rem | And | Or | Xor | Shl | Shr | Min | Max => {
                if n != 3 {
                    return bad("expects three operands");
                }
            }
            Mad => {
                if n != 4 {
                    return bad("expects four operands");
                }
            }
            Setp => {
                let combines = i.modifiers.iter().any(|m| matches!(m, Modifier::Bool(_)));
                if n != if combines { 4 } else { 3 } {
                    return bad("expects three operands, or four with a combine qualifier");
                }
            }
            Selp => {
                if n != 4 {
                    return bad("expects four operands");
                }
            }
            Bra => {
                if n != 1 || !matches!(i.operands[0], Operand::LabelRef(_)) {
                    return bad("expects one label");
                }
            }
            BrxIdx => {
                if n != 2
                    || !matches!(i.operands[0], Operand::Reg(_))
                    || !matches!(i.operands[1], Operand::LabelArray(_))
                {
                    return bad("expects an index register and a label array");
                }
            }
            Call => {
                if n == 0 || !matches!(i.operands[0], Operand::LabelRef(_)) {
                    return bad("expects a callee name");
                }
            }
            Ret => {
                if n != 0 {
                    return bad("takes no operands");
                }
            }
            Bar => {
                if n > 1 {
                    return bad("takes at most a barrier id");
                }
            }
        }
        if i.is_memory_class() && addr_count != 1 {
            return bad("memory instructions take exactly one address operand");
        }
        Ok(())
    }
}

fn render_tokens(parts: &[String]) -> String {
    let mut out = String::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 && !matches!(p.as_str(), ";" | "," | ")" | "]" | ">") {
            let prev = parts[i - 1].as_str();
            if !matches!(prev, "(" | "[" | "<" | "@" | "!") && !p.starts_with('.') {
                out.push(' ');
            }
        }
        out.push_str(p);
    }
    out
}

/// Structural validation run after parsing.
fn validate(m: &PtxModule) -> Result<(), PtxError> {
    let mut names: HashSet<&str> = HashSet::new();
    for k in m.kernels() {
        if !names.insert(&k.name) {
            return Err(PtxError::Syntax {
                line: 1,
                msg: format!("duplicate kernel name {}", k.name),
            });
        }
    }
    let func_names: HashSet<&str> = m.funcs.iter().map(|k| k.name.as_str()).collect();

    for k in m.kernels() {
        let labels: HashSet<&str> = k
            .body
            .iter()
            .filter_map(|s| match s {
                Statement::Label { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect();
        let covered = |reg: &str| k.reg_decls.iter().any(|d| d.covers(reg));
        let reg_err = |r: &str| {
            Err(PtxError::Syntax {
                line: 1,
                msg: format!(
                    "register {r} in kernel {} is not declared by any bank",
                    k.name
                ),
            })
        };

        for stmt in &k.body {
            let Statement::Instr(i) = stmt else { continue };
            if let Some(g) = &i.guard {
                if !covered(&g.reg) {
                    return reg_err(&g.reg);
                }
            }
            for (oi, op) in i.operands.iter().enumerate() {
                match op {
                    Operand::Reg(r) => {
                        if !covered(r) {
                            return reg_err(r);
                        }
                    }
                    Operand::VecGroup(regs) => {
                        for r in regs {
                            if !covered(r) {
                                return reg_err(r);
                            }
                        }
                    }
                    Operand::Addr(a) => {
                        if let AddrBase::Reg(r) = &a.base {
                            if !covered(r) {
                                return reg_err(r);
                            }
                        }
                    }
                    Operand::LabelRef(l) => {
                        if i.opcode == Opcode::Bra && !labels.contains(l.as_str()) {
                            return Err(PtxError::Syntax {
                                line: 1,
                                msg: format!("branch target {l} not found in kernel {}", k.name),
                            });
                        }
                        if i.opcode == Opcode::Call && oi == 0 && !func_names.contains(l.as_str()) {
                            return Err(PtxError::Syntax {
                                line: 1,
                                msg: format!("call target {l} is not a .func in this module"),
                            });
                        }
                    }
                    Operand::LabelArray(ls) => {
                        for l in ls {
                            if !labels.contains(l.as_str()) {
                                return Err(PtxError::Syntax {
                                    line: 1,
                                    msg: format!(
                                        "indirect branch target {l} not found in kernel {}",
                                        k.name
                                    ),
                                });
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(())
}
