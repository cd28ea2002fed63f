//! Blocking client over the framed socket protocol.
//!
//! Responses on a connection arrive in request order, so a client that
//! pipelines launches simply reads the same number of responses back later.

use std::io;
use std::os::unix::net::UnixStream;
use std::path::Path;

use super::wire::{self, Response, Status, WireMessage};

pub struct Client {
    stream: UnixStream,
    outstanding: usize,
}

impl Client {
    pub fn connect(path: impl AsRef<Path>) -> io::Result<Client> {
        Ok(Client {
            stream: UnixStream::connect(path)?,
            outstanding: 0,
        })
    }

    /// Sends without waiting; pair with [`Client::recv`].
    pub fn send(&mut self, msg: &WireMessage) -> io::Result<()> {
        let (ty, payload) = wire::encode_request(msg);
        wire::write_frame(&mut self.stream, ty, &payload)?;
        self.outstanding += 1;
        Ok(())
    }

    /// Receives the next in-order response.
    pub fn recv(&mut self) -> io::Result<Response> {
        let Some((code, payload)) = wire::read_frame(&mut self.stream)? else {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "manager closed the stream",
            ));
        };
        self.outstanding -= 1;
        let status = Status::from_code(code).ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unknown status code {code}"),
            )
        })?;
        Ok(Response { status, payload })
    }

    /// Send one request and wait for its response; requires no pipelined
    /// requests outstanding.
    pub fn call(&mut self, msg: &WireMessage) -> io::Result<Response> {
        assert_eq!(
            self.outstanding, 0,
            "call with pipelined requests outstanding"
        );
        self.send(msg)?;
        self.recv()
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    /// Convenience for INIT: returns (app id, partition base, size).
    pub fn init(&mut self, req_bytes: u64) -> io::Result<(u64, u64, u64)> {
        let r = self.call(&WireMessage::Init { req_bytes })?;
        if r.status != Status::Ok {
            return Err(io::Error::other(format!("INIT failed: {}", r.message())));
        }
        let get = |i| wire::payload::u64_at(&r.payload, i).ok_or(io::ErrorKind::InvalidData);
        Ok((get(0)?, get(1)?, get(2)?))
    }
}
