//! Canonical printer: one statement per line, a single tab of indentation
//! inside bodies, `.func` definitions before `.entry` kernels.

use std::fmt::Write;

use super::*;

pub(crate) fn emit_module(m: &PtxModule) -> String {
    let mut out = String::new();
    let _ = writeln!(out, ".version {}.{}", m.version.0, m.version.1);
    let _ = writeln!(out, ".target {}", m.target);
    let _ = writeln!(out, ".address_size {}", m.address_size);

    if !m.passthrough.is_empty() {
        out.push('\n');
        for line in &m.passthrough {
            out.push_str(line);
            out.push('\n');
        }
    }

    for k in m.kernels() {
        out.push('\n');
        emit_kernel(&mut out, k);
    }
    out
}

fn emit_kernel(out: &mut String, k: &KernelDef) {
    if k.visible {
        out.push_str(".visible ");
    }
    out.push_str(match k.kind {
        KernelKind::Entry => ".entry ",
        KernelKind::Func => ".func ",
    });
    out.push_str(&k.name);
    if k.params.is_empty() {
        out.push_str("()\n");
    } else {
        out.push_str("(\n");
        for (i, p) in k.params.iter().enumerate() {
            out.push('\t');
            out.push_str(".param ");
            if let Some(align) = p.align {
                let _ = write!(out, ".align {align} ");
            }
            let _ = write!(out, ".{} {}", p.ty.keyword(), p.name);
            if i + 1 < k.params.len() {
                out.push(',');
            }
            out.push('\n');
        }
        out.push_str(")\n");
    }
    out.push_str("{\n");
    for d in &k.reg_decls {
        let _ = writeln!(out, "\t.reg .{} {}<{}>;", d.ty.keyword(), d.prefix, d.count);
    }
    for stmt in &k.body {
        emit_statement(out, stmt);
    }
    for c in &k.trailing_comments {
        let _ = writeln!(out, "\t// {c}");
    }
    out.push_str("}\n");
}

fn emit_statement(out: &mut String, stmt: &Statement) {
    for c in stmt.comments() {
        let _ = writeln!(out, "\t// {c}");
    }
    match stmt {
        Statement::Label { name, .. } => {
            let _ = writeln!(out, "{name}:");
        }
        Statement::Verbatim { text, .. } => {
            let _ = writeln!(out, "\t{text}");
        }
        Statement::Instr(i) => {
            out.push('\t');
            out.push_str(&instruction_text(i));
            out.push('\n');
        }
    }
}

pub(crate) fn instruction_text(i: &Instruction) -> String {
    let mut s = String::new();
    if let Some(g) = &i.guard {
        let _ = write!(s, "@{}{} ", if g.negated { "!" } else { "" }, g.reg);
    }
    s.push_str(i.opcode.mnemonic());
    for m in &i.modifiers {
        s.push('.');
        s.push_str(&m.keyword());
    }
    if i.opcode == Opcode::Call {
        emit_call_operands(&mut s, &i.operands);
    } else {
        for (idx, op) in i.operands.iter().enumerate() {
            s.push_str(if idx == 0 { " " } else { ", " });
            s.push_str(&operand_text(op));
        }
    }
    s.push(';');
    s
}

fn emit_call_operands(s: &mut String, operands: &[Operand]) {
    let mut iter = operands.iter();
    if let Some(callee) = iter.next() {
        s.push(' ');
        s.push_str(&operand_text(callee));
    }
    let args: Vec<String> = iter.map(operand_text).collect();
    if !args.is_empty() {
        s.push_str(", (");
        s.push_str(&args.join(", "));
        s.push(')');
    }
}

fn operand_text(op: &Operand) -> String {
    match op {
        Operand::Reg(r) => r.clone(),
        Operand::Special(sp) => sp.text().to_string(),
        Operand::Imm(Immediate::Int(v)) => v.to_string(),
        Operand::Imm(Immediate::F32Bits(bits)) => format!("0f{bits:08X}"),
        Operand::Imm(Immediate::F64Bits(bits)) => format!("0d{bits:016X}"),
        Operand::Addr(a) => {
            let base = match &a.base {
                AddrBase::Reg(r) => r.clone(),
                AddrBase::Sym(s) => s.clone(),
            };
            if a.offset == 0 {
                format!("[{base}]")
            } else if a.offset > 0 {
                format!("[{base}+{}]", a.offset)
            } else {
                format!("[{base}{}]", a.offset)
            }
        }
        Operand::VecGroup(regs) => format!("{{{}}}", regs.join(", ")),
        Operand::LabelRef(l) => l.clone(),
        Operand::LabelArray(ls) => format!("{{{}}}", ls.join(", ")),
    }
}

#[cfg(test)]
mod tests {
    use crate::ptx::{parse_module, parse_module_opts, ParseOptions};

    const LISTING1: &str = include_str!("../../tests/fixtures/listing1.ptx");
    const GOLDEN: &str = include_str!("../../tests/fixtures/listing1_fenced.golden.ptx");

    #[test]
    fn empty_module_emits_three_directive_lines() {
        let m = parse_module(".version 7.7\n.target sm_86\n.address_size 64\n").unwrap();
        assert_eq!(m.emit(), ".version 7.7\n.target sm_86\n.address_size 64\n");
    }

    #[test]
    fn listing1_emit_is_byte_stable() {
        // The fixture is already in canonical form.
        let m = parse_module(LISTING1).unwrap();
        assert_eq!(m.emit(), LISTING1);
        let again = parse_module(&m.emit()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn sandboxed_listing1_round_trips() {
        let m = parse_module(GOLDEN).unwrap();
        assert_eq!(m.emit(), GOLDEN);
        assert_eq!(m.entries[0].params.len(), 4);
    }

    #[test]
    fn lenient_verbatim_lines_survive_reprinting() {
        let src = ".version 7.7\n.target sm_86\n.address_size 64\n\
                   .visible .entry k()\n{\n\t.reg .f32 %f<4>;\n\tsqrt.approx.f32 %f1, %f2;\n\tret;\n}\n";
        let opts = ParseOptions { strict: false };
        let m1 = parse_module_opts(src, opts).unwrap().module;
        let printed = m1.emit();
        assert!(printed.contains("sqrt.approx.f32 %f1, %f2;"));
        let m2 = parse_module_opts(&printed, opts).unwrap().module;
        assert_eq!(m1, m2);
    }

    #[test]
    fn funcs_print_before_entries() {
        let src = ".version 7.7\n.target sm_86\n.address_size 64\n\
                   .visible .entry k()\n{\n\tcall.uni h;\n\tret;\n}\n\
                   .func h()\n{\n\tret;\n}\n";
        let m = parse_module(src).unwrap();
        let printed = m.emit();
        let func_at = printed.find(".func h").unwrap();
        let entry_at = printed.find(".entry k").unwrap();
        assert!(func_at < entry_at);
        assert_eq!(parse_module(&printed).unwrap(), m);
    }
}
