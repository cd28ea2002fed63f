//! Length-prefixed binary framing between clients and the manager.
//!
//! Every frame is `u32` little-endian payload length, a `u16` code (message
//! type on requests, status on responses), then the payload. All integers
//! are little-endian. The payload length counts payload bytes only.

use std::io::{self, Read, Write};

use crate::interp::ArgValue;

pub const TYPE_INIT: u16 = 1;
pub const TYPE_MALLOC: u16 = 2;
pub const TYPE_FREE: u16 = 3;
pub const TYPE_MEMCPY_H2D: u16 = 4;
pub const TYPE_MEMCPY_D2H: u16 = 5;
pub const TYPE_MEMCPY_D2D: u16 = 6;
pub const TYPE_LOAD_MODULE: u16 = 7;
pub const TYPE_LAUNCH: u16 = 8;
pub const TYPE_SYNC: u16 = 9;
pub const TYPE_SHUTDOWN: u16 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum Status {
    Ok = 0,
    BadMessage = 1,
    NoPartition = 2,
    OobTransfer = 3,
    UnknownKernel = 4,
    DeviceOom = 5,
    PartitionOom = 6,
    UnknownAlloc = 7,
    SyntaxError = 8,
    LaunchFault = 9,
    DuplicateInit = 10,
    Unsupported = 11,
    InvalidSize = 12,
}

impl Status {
    pub fn code(&self) -> u16 {
        *self as u16
    }

    pub fn from_code(code: u16) -> Option<Status> {
        Some(match code {
            0 => Status::Ok,
            1 => Status::BadMessage,
            2 => Status::NoPartition,
            3 => Status::OobTransfer,
            4 => Status::UnknownKernel,
            5 => Status::DeviceOom,
            6 => Status::PartitionOom,
            7 => Status::UnknownAlloc,
            8 => Status::SyntaxError,
            9 => Status::LaunchFault,
            10 => Status::DuplicateInit,
            11 => Status::Unsupported,
            12 => Status::InvalidSize,
            _ => return None,
        })
    }
}

/// A decoded client request.
#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Init {
        req_bytes: u64,
    },
    Malloc {
        size: u64,
    },
    Free {
        addr: u64,
    },
    MemcpyH2d {
        dst: u64,
        bytes: Vec<u8>,
    },
    MemcpyD2h {
        src: u64,
        len: u64,
    },
    MemcpyD2d {
        dst: u64,
        src: u64,
        len: u64,
    },
    LoadModule {
        text: String,
    },
    Launch {
        name: String,
        grid: u32,
        block: u32,
        args: Vec<ArgValue>,
    },
    Sync,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: Status,
    pub payload: Vec<u8>,
}

impl Response {
    pub fn ok(payload: Vec<u8>) -> Response {
        Response {
            status: Status::Ok,
            payload,
        }
    }

    pub fn err(status: Status, msg: impl Into<String>) -> Response {
        Response {
            status,
            payload: msg.into().into_bytes(),
        }
    }

    pub fn message(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }
}

const ARG_SCALAR64: u8 = 0;
const ARG_SCALAR32: u8 = 1;
const ARG_F32: u8 = 2;
const ARG_DEVADDR: u8 = 3;

/// Serializes a request into its payload bytes and type code.
pub fn encode_request(msg: &WireMessage) -> (u16, Vec<u8>) {
    let mut p = Vec::new();
    let ty = match msg {
        WireMessage::Init { req_bytes } => {
            p.extend_from_slice(&req_bytes.to_le_bytes());
            TYPE_INIT
        }
        WireMessage::Malloc { size } => {
            p.extend_from_slice(&size.to_le_bytes());
            TYPE_MALLOC
        }
        WireMessage::Free { addr } => {
            p.extend_from_slice(&addr.to_le_bytes());
            TYPE_FREE
        }
        WireMessage::MemcpyH2d { dst, bytes } => {
            p.extend_from_slice(&dst.to_le_bytes());
            p.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            p.extend_from_slice(bytes);
            TYPE_MEMCPY_H2D
        }
        WireMessage::MemcpyD2h { src, len } => {
            p.extend_from_slice(&src.to_le_bytes());
            p.extend_from_slice(&len.to_le_bytes());
            TYPE_MEMCPY_D2H
        }
        WireMessage::MemcpyD2d { dst, src, len } => {
            p.extend_from_slice(&dst.to_le_bytes());
            p.extend_from_slice(&src.to_le_bytes());
            p.extend_from_slice(&len.to_le_bytes());
            TYPE_MEMCPY_D2D
        }
        WireMessage::LoadModule { text } => {
            p.extend_from_slice(text.as_bytes());
            TYPE_LOAD_MODULE
        }
        WireMessage::Launch {
            name,
            grid,
            block,
            args,
        } => {
            p.extend_from_slice(&(name.len() as u16).to_le_bytes());
            p.extend_from_slice(name.as_bytes());
            p.extend_from_slice(&grid.to_le_bytes());
            p.extend_from_slice(&block.to_le_bytes());
            p.extend_from_slice(&(args.len() as u16).to_le_bytes());
            for a in args {
                match a {
                    ArgValue::Scalar64(v) => {
                        p.push(ARG_SCALAR64);
                        p.extend_from_slice(&v.to_le_bytes());
                    }
                    ArgValue::Scalar32(v) => {
                        p.push(ARG_SCALAR32);
                        p.extend_from_slice(&v.to_le_bytes());
                    }
                    ArgValue::F32(v) => {
                        p.push(ARG_F32);
                        p.extend_from_slice(&v.to_bits().to_le_bytes());
                    }
                    ArgValue::DevAddr(v) => {
                        p.push(ARG_DEVADDR);
                        p.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            TYPE_LAUNCH
        }
        WireMessage::Sync => TYPE_SYNC,
        WireMessage::Shutdown => TYPE_SHUTDOWN,
    };
    (ty, p)
}

/// Decodes a request payload. `Err` carries a diagnostic for BAD_MESSAGE.
pub fn decode_request(ty: u16, p: &[u8]) -> Result<WireMessage, String> {
    let mut c = Cursor { p, at: 0 };
    let msg = match ty {
        TYPE_INIT => WireMessage::Init {
            req_bytes: c.u64()?,
        },
        TYPE_MALLOC => WireMessage::Malloc { size: c.u64()? },
        TYPE_FREE => WireMessage::Free { addr: c.u64()? },
        TYPE_MEMCPY_H2D => {
            let dst = c.u64()?;
            let len = c.u64()?;
            let bytes = c.take(len as usize)?.to_vec();
            WireMessage::MemcpyH2d { dst, bytes }
        }
        TYPE_MEMCPY_D2H => WireMessage::MemcpyD2h {
            src: c.u64()?,
            len: c.u64()?,
        },
        TYPE_MEMCPY_D2D => WireMessage::MemcpyD2d {
            dst: c.u64()?,
            src: c.u64()?,
            len: c.u64()?,
        },
        TYPE_LOAD_MODULE => WireMessage::LoadModule {
            text: String::from_utf8(p.to_vec()).map_err(|_| "module text is not UTF-8")?,
        },
        TYPE_LAUNCH => {
            let name_len = c.u16()? as usize;
            let name = String::from_utf8(c.take(name_len)?.to_vec())
                .map_err(|_| "kernel name is not UTF-8")?;
            let grid = c.u32()?;
            let block = c.u32()?;
            let argc = c.u16()?;
            let mut args = Vec::with_capacity(argc as usize);
            for _ in 0..argc {
                let tag = c.u8()?;
                let arg = match tag {
                    ARG_SCALAR64 => ArgValue::Scalar64(c.u64()?),
                    ARG_SCALAR32 => ArgValue::Scalar32(c.u32()?),
                    ARG_F32 => ArgValue::F32(f32::from_bits(c.u32()?)),
                    ARG_DEVADDR => ArgValue::DevAddr(c.u64()?),
                    other => return Err(format!("unknown argument tag {other}")),
                };
                args.push(arg);
            }
            WireMessage::Launch {
                name,
                grid,
                block,
                args,
            }
        }
        TYPE_SYNC => WireMessage::Sync,
        TYPE_SHUTDOWN => WireMessage::Shutdown,
        other => return Err(format!("unknown message type {other}")),
    };
    if ty != TYPE_LOAD_MODULE && c.at != p.len() {
        return Err(format!("{} trailing bytes in message", p.len() - c.at));
    }
    Ok(msg)
}

struct Cursor<'a> {
    p: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.at + n > self.p.len() {
            return Err("message truncated".into());
        }
        let s = &self.p[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<(u16, Vec<u8>)>> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    let mut code_buf = [0u8; 2];
    r.read_exact(&mut code_buf)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some((u16::from_le_bytes(code_buf), payload)))
}

pub fn write_frame(w: &mut impl Write, code: u16, payload: &[u8]) -> io::Result<()> {
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(&code.to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Payload helpers shared by the manager and clients.
pub mod payload {
    pub fn u64_at(p: &[u8], index: usize) -> Option<u64> {
        let at = index * 8;
        p.get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn triple(a: u64, b: u64, c: u64) -> Vec<u8> {
        let mut v = Vec::with_capacity(24);
        v.extend_from_slice(&a.to_le_bytes());
        v.extend_from_slice(&b.to_le_bytes());
        v.extend_from_slice(&c.to_le_bytes());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let msgs = vec![
            WireMessage::Init {
                req_bytes: 16 << 20,
            },
            WireMessage::Malloc { size: 1024 },
            WireMessage::Free {
                addr: 0x7fa2_c000_0000,
            },
            WireMessage::MemcpyH2d {
                dst: 0x10,
                bytes: vec![1, 2, 3],
            },
            WireMessage::MemcpyD2h { src: 0x20, len: 64 },
            WireMessage::MemcpyD2d {
                dst: 1,
                src: 2,
                len: 3,
            },
            WireMessage::LoadModule {
                text: ".version 7.7".into(),
            },
            WireMessage::Launch {
                name: "kernel".into(),
                grid: 2,
                block: 64,
                args: vec![
                    ArgValue::DevAddr(0x7fa2_c000_0000),
                    ArgValue::Scalar32(4),
                    ArgValue::Scalar64(9),
                    ArgValue::F32(1.5),
                ],
            },
            WireMessage::Sync,
            WireMessage::Shutdown,
        ];
        for msg in msgs {
            let (ty, payload) = encode_request(&msg);
            let mut buf = Vec::new();
            write_frame(&mut buf, ty, &payload).unwrap();
            // Length prefix equals payload byte count.
            assert_eq!(
                u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize,
                payload.len()
            );
            let (ty2, payload2) = read_frame(&mut buf.as_slice()).unwrap().unwrap();
            assert_eq!(ty2, ty);
            assert_eq!(decode_request(ty2, &payload2).unwrap(), msg);
        }
    }

    #[test]
    fn truncated_and_trailing_payloads_are_rejected() {
        assert!(decode_request(TYPE_INIT, &[1, 2]).is_err());
        let (ty, mut p) = encode_request(&WireMessage::Malloc { size: 8 });
        p.push(0);
        assert!(decode_request(ty, &p).is_err());
    }

    #[test]
    fn eof_reads_as_none() {
        let empty: &[u8] = &[];
        assert!(read_frame(&mut &*empty).unwrap().is_none());
    }
}
