//! Tokenizer for the PTX subset.

use super::{PtxError, SpecialReg};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    /// `.word` directive or qualifier, stored without the dot.
    Dot(String),
    /// Bare identifier: opcodes, kernel and label names, `sm_86`.
    Word(String),
    /// `%`-prefixed register name.
    Reg(String),
    Special(SpecialReg),
    Int(i128),
    /// `7.7`-style version literal.
    Version(u32, u32),
    F32(u32),
    F64(u64),
    /// `//` comment text, without the slashes, trimmed.
    Comment(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    LBrack,
    RBrack,
    Lt,
    Gt,
    Comma,
    Semi,
    Colon,
    At,
    Bang,
    Plus,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        match self {
            Tok::Dot(w) => format!(".{w}"),
            Tok::Word(w) => w.clone(),
            Tok::Reg(r) => r.clone(),
            Tok::Special(s) => s.text().to_string(),
            Tok::Int(v) => v.to_string(),
            Tok::Version(a, b) => format!("{a}.{b}"),
            Tok::F32(bits) => format!("0f{bits:08X}"),
            Tok::F64(bits) => format!("0d{bits:016X}"),
            Tok::Comment(_) => "comment".to_string(),
            Tok::LBrace => "{".to_string(),
            Tok::RBrace => "}".to_string(),
            Tok::LParen => "(".to_string(),
            Tok::RParen => ")".to_string(),
            Tok::LBrack => "[".to_string(),
            Tok::RBrack => "]".to_string(),
            Tok::Lt => "<".to_string(),
            Tok::Gt => ">".to_string(),
            Tok::Comma => ",".to_string(),
            Tok::Semi => ";".to_string(),
            Tok::Colon => ":".to_string(),
            Tok::At => "@".to_string(),
            Tok::Bang => "!".to_string(),
            Tok::Plus => "+".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct SpTok {
    pub tok: Tok,
    pub line: u32,
}

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || c == b'$'
}

fn is_ident_continue(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'$'
}

pub(crate) fn lex(text: &str) -> Result<Vec<SpTok>, PtxError> {
    let bytes = text.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0usize;
    let mut line = 1u32;

    let err = |line: u32, msg: String| PtxError::Syntax { line, msg };

    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'\n' => {
                line += 1;
                i += 1;
            }
            b' ' | b'\t' | b'\r' => i += 1,
            b'/' => {
                if bytes.get(i + 1) == Some(&b'/') {
                    let start = i + 2;
                    let mut end = start;
                    while end < bytes.len() && bytes[end] != b'\n' {
                        end += 1;
                    }
                    let body = text[start..end].trim().to_string();
                    toks.push(SpTok {
                        tok: Tok::Comment(body),
                        line,
                    });
                    i = end;
                } else {
                    return Err(err(line, "unexpected '/'".into()));
                }
            }
            b'.' => {
                let start = i + 1;
                let mut end = start;
                while end < bytes.len() && is_ident_continue(bytes[end]) {
                    end += 1;
                }
                if end == start {
                    return Err(err(line, "expected identifier after '.'".into()));
                }
                toks.push(SpTok {
                    tok: Tok::Dot(text[start..end].to_string()),
                    line,
                });
                i = end;
            }
            b'%' => {
                let start = i + 1;
                let mut end = start;
                while end < bytes.len() && is_ident_continue(bytes[end]) {
                    end += 1;
                }
                if end == start {
                    return Err(err(line, "expected register name after '%'".into()));
                }
                let name = &text[start..end];
                // Special registers carry an axis suffix: %tid.x and friends.
                if matches!(name, "tid" | "ntid" | "ctaid" | "nctaid") {
                    if bytes.get(end) != Some(&b'.') {
                        return Err(err(line, format!("%{name} requires an axis suffix")));
                    }
                    let axis = bytes.get(end + 1).copied();
                    if axis != Some(b'x') {
                        return Err(PtxError::Unsupported {
                            line,
                            feature: format!("%{name} axis other than .x"),
                        });
                    }
                    let special = match name {
                        "tid" => SpecialReg::TidX,
                        "ntid" => SpecialReg::NtidX,
                        "ctaid" => SpecialReg::CtaidX,
                        _ => SpecialReg::NctaidX,
                    };
                    toks.push(SpTok {
                        tok: Tok::Special(special),
                        line,
                    });
                    i = end + 2;
                } else {
                    toks.push(SpTok {
                        tok: Tok::Reg(format!("%{name}")),
                        line,
                    });
                    i = end;
                }
            }
            b'-' => {
                if bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
                    let (tok, next) = lex_number(text, i + 1, true, line)?;
                    toks.push(SpTok { tok, line });
                    i = next;
                } else {
                    return Err(err(line, "unexpected '-'".into()));
                }
            }
            b'0'..=b'9' => {
                let (tok, next) = lex_number(text, i, false, line)?;
                toks.push(SpTok { tok, line });
                i = next;
            }
            _ if is_ident_start(c) => {
                let start = i;
                let mut end = i;
                while end < bytes.len() && is_ident_continue(bytes[end]) {
                    end += 1;
                }
                toks.push(SpTok {
                    tok: Tok::Word(text[start..end].to_string()),
                    line,
                });
                i = end;
            }
            _ => {
                let tok = match c {
                    b'{' => Tok::LBrace,
                    b'}' => Tok::RBrace,
                    b'(' => Tok::LParen,
                    b')' => Tok::RParen,
                    b'[' => Tok::LBrack,
                    b']' => Tok::RBrack,
                    b'<' => Tok::Lt,
                    b'>' => Tok::Gt,
                    b',' => Tok::Comma,
                    b';' => Tok::Semi,
                    b':' => Tok::Colon,
                    b'@' => Tok::At,
                    b'!' => Tok::Bang,
                    b'+' => Tok::Plus,
                    other => {
                        return Err(err(
                            line,
                            format!("unexpected character {:?}", other as char),
                        ))
                    }
                };
                toks.push(SpTok { tok, line });
                i += 1;
            }
        }
    }
    Ok(toks)
}

fn lex_number(
    text: &str,
    start: usize,
    negative: bool,
    line: u32,
) -> Result<(Tok, usize), PtxError> {
    let bytes = text.as_bytes();
    let err = |msg: String| PtxError::Syntax { line, msg };

    // Float literals: 0fXXXXXXXX / 0dXXXXXXXXXXXXXXXX (hex-encoded bits).
    if !negative && bytes[start] == b'0' {
        match bytes.get(start + 1) {
            Some(b'f') | Some(b'F') => {
                let hex = text
                    .get(start + 2..start + 10)
                    .ok_or_else(|| err("truncated 0f float literal".into()))?;
                let bits = u32::from_str_radix(hex, 16)
                    .map_err(|_| err("invalid 0f float literal".into()))?;
                return Ok((Tok::F32(bits), start + 10));
            }
            Some(b'd') | Some(b'D') => {
                let hex = text
                    .get(start + 2..start + 18)
                    .ok_or_else(|| err("truncated 0d float literal".into()))?;
                let bits = u64::from_str_radix(hex, 16)
                    .map_err(|_| err("invalid 0d float literal".into()))?;
                return Ok((Tok::F64(bits), start + 18));
            }
            _ => {}
        }
    }

    // Hex integer.
    if !negative && bytes[start] == b'0' && matches!(bytes.get(start + 1), Some(b'x') | Some(b'X'))
    {
        let mut end = start + 2;
        while end < bytes.len() && bytes[end].is_ascii_hexdigit() {
            end += 1;
        }
        if end == start + 2 {
            return Err(err("expected hex digits after 0x".into()));
        }
        let value = i128::from_str_radix(&text[start + 2..end], 16)
            .map_err(|_| err("hex literal out of range".into()))?;
        if value >= (1i128 << 64) {
            return Err(err("integer literal exceeds 64 bits".into()));
        }
        return Ok((Tok::Int(value), end));
    }

    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    // `7.7` version literal: digits '.' digits.
    if !negative
        && bytes.get(end) == Some(&b'.')
        && bytes.get(end + 1).is_some_and(u8::is_ascii_digit)
    {
        let mut end2 = end + 1;
        while end2 < bytes.len() && bytes[end2].is_ascii_digit() {
            end2 += 1;
        }
        let major: u32 = text[start..end]
            .parse()
            .map_err(|_| err("version major out of range".into()))?;
        let minor: u32 = text[end + 1..end2]
            .parse()
            .map_err(|_| err("version minor out of range".into()))?;
        return Ok((Tok::Version(major, minor), end2));
    }
    let magnitude: i128 = text[start..end]
        .parse()
        .map_err(|_| err("integer literal out of range".into()))?;
    let value = if negative { -magnitude } else { magnitude };
    if !(-(1i128 << 63)..(1i128 << 64)).contains(&value) {
        return Err(err("integer literal exceeds 64 bits".into()));
    }
    Ok((Tok::Int(value), end))
}
