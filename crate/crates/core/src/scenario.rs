//! Line-oriented multi-client scenario scripts.
//!
//! A script declares clients with partition sizes, then interleaves
//! per-client operations in file order:
//!
//! ```text
//! # two clients, one buffer each
//! client A partition 16777216
//! client B partition 4096
//! A malloc buf 1024
//! A h2d buf 0 deadbeef
//! B load kernels/store_tid.ptx
//! B launch store_tid grid 1 block 8 args buf 0
//! B sync
//! A d2h buf 0 4 expect deadbeef
//! ```
//!
//! Submission follows file order; execution order of queued tasks is the
//! manager's round-robin. Host-initiated copies are immediate, so a `sync`
//! must precede any `d2h` that reads kernel output. Runs are fully
//! deterministic for a fixed script and configuration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::interp::ArgValue;
use crate::manager::client::Client;
use crate::manager::wire::{self, Response, Status, WireMessage};
use crate::manager::{ConnId, DispatchEvent, Manager, ManagerConfig};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: u32, msg: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("manager setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioScript {
    pub clients: Vec<ClientDecl>,
    pub ops: Vec<ScriptOp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDecl {
    pub id: String,
    pub partition_bytes: u64,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptOp {
    pub client: String,
    pub line: u32,
    pub kind: OpKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Malloc {
        var: String,
        bytes: u64,
    },
    Free {
        var: String,
    },
    H2d {
        var: String,
        offset: u64,
        bytes: Vec<u8>,
    },
    D2h {
        var: String,
        offset: u64,
        len: u64,
        expect: Expect,
    },
    Load {
        path: String,
    },
    Launch {
        kernel: String,
        grid: u32,
        block: u32,
        args: Vec<ScriptArg>,
    },
    Sync,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptArg {
    Var(String),
    Int(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expect {
    Bytes(Vec<u8>),
    Any,
}

pub fn parse_scenario(text: &str) -> Result<ScenarioScript, ScenarioError> {
    let mut clients: Vec<ClientDecl> = Vec::new();
    let mut ops: Vec<ScriptOp> = Vec::new();
    // Variables defined so far, per client; forward references are errors.
    let mut vars: HashMap<String, Vec<String>> = HashMap::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i as u32 + 1;
        let err = |msg: String| ScenarioError::Parse { line, msg };
        let content = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        };
        let words: Vec<&str> = content.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }

        if words[0] == "client" {
            let [_, id, kw, bytes] = words[..] else {
                return Err(err("expected: client <id> partition <bytes>".into()));
            };
            if kw != "partition" {
                return Err(err(format!("expected 'partition', found '{kw}'")));
            }
            if clients.iter().any(|c| c.id == id) {
                return Err(err(format!("client {id} declared twice")));
            }
            let partition_bytes =
                parse_int(bytes).ok_or_else(|| err(format!("bad byte count '{bytes}'")))?;
            vars.insert(id.to_string(), Vec::new());
            clients.push(ClientDecl {
                id: id.to_string(),
                partition_bytes,
                line,
            });
            continue;
        }

        let client = words[0].to_string();
        if !vars.contains_key(&client) {
            return Err(err(format!("unknown client '{client}' (declare it first)")));
        }
        let known = vars.get_mut(&client).expect("checked");
        let require_var = |known: &[String], v: &str| -> Result<(), ScenarioError> {
            if known.iter().any(|k| k == v) {
                Ok(())
            } else {
                Err(ScenarioError::Parse {
                    line,
                    msg: format!("variable '{v}' is not defined by a prior malloc"),
                })
            }
        };

        let kind = match words.get(1).copied() {
            Some("malloc") => {
                let [_, _, var, bytes] = words[..] else {
                    return Err(err("expected: <id> malloc <var> <bytes>".into()));
                };
                let bytes =
                    parse_int(bytes).ok_or_else(|| err(format!("bad byte count '{bytes}'")))?;
                known.push(var.to_string());
                OpKind::Malloc {
                    var: var.to_string(),
                    bytes,
                }
            }
            Some("free") => {
                let [_, _, var] = words[..] else {
                    return Err(err("expected: <id> free <var>".into()));
                };
                require_var(known, var)?;
                OpKind::Free {
                    var: var.to_string(),
                }
            }
            Some("h2d") => {
                let [_, _, var, offset, hex] = words[..] else {
                    return Err(err("expected: <id> h2d <var> <offset> <hexbytes>".into()));
                };
                require_var(known, var)?;
                let offset =
                    parse_int(offset).ok_or_else(|| err(format!("bad offset '{offset}'")))?;
                let bytes =
                    parse_hex(hex).ok_or_else(|| err(format!("bad hex payload '{hex}'")))?;
                OpKind::H2d {
                    var: var.to_string(),
                    offset,
                    bytes,
                }
            }
            Some("d2h") => {
                let [_, _, var, offset, len, kw, what] = words[..] else {
                    return Err(err(
                        "expected: <id> d2h <var> <offset> <len> expect <hexbytes|*>".into(),
                    ));
                };
                require_var(known, var)?;
                if kw != "expect" {
                    return Err(err(format!("expected 'expect', found '{kw}'")));
                }
                let offset =
                    parse_int(offset).ok_or_else(|| err(format!("bad offset '{offset}'")))?;
                let len = parse_int(len).ok_or_else(|| err(format!("bad length '{len}'")))?;
                let expect = if what == "*" {
                    Expect::Any
                } else {
                    let bytes = parse_hex(what)
                        .ok_or_else(|| err(format!("bad hex expectation '{what}'")))?;
                    if bytes.len() as u64 != len {
                        return Err(err(format!(
                            "expectation is {} bytes but the read is {len}",
                            bytes.len()
                        )));
                    }
                    Expect::Bytes(bytes)
                };
                OpKind::D2h {
                    var: var.to_string(),
                    offset,
                    len,
                    expect,
                }
            }
            Some("load") => {
                let [_, _, path] = words[..] else {
                    return Err(err("expected: <id> load <path.ptx>".into()));
                };
                OpKind::Load {
                    path: path.to_string(),
                }
            }
            Some("launch") => {
                // <id> launch <kernel> grid <g> block <b> [args <var|int>...]
                if words.len() < 7 || words[3] != "grid" || words[5] != "block" {
                    return Err(err(
                        "expected: <id> launch <kernel> grid <g> block <b> [args ...]".into(),
                    ));
                }
                let kernel = words[2].to_string();
                let grid = parse_int(words[4]).ok_or_else(|| err("bad grid".into()))? as u32;
                let block = parse_int(words[6]).ok_or_else(|| err("bad block".into()))? as u32;
                let mut args = Vec::new();
                if words.len() > 7 {
                    if words[7] != "args" {
                        return Err(err(format!("expected 'args', found '{}'", words[7])));
                    }
                    for w in &words[8..] {
                        let arg = match parse_int(w) {
                            Some(v) => ScriptArg::Int(v),
                            None => {
                                require_var(known, w)?;
                                ScriptArg::Var(w.to_string())
                            }
                        };
                        args.push(arg);
                    }
                }
                OpKind::Launch {
                    kernel,
                    grid,
                    block,
                    args,
                }
            }
            Some("sync") => {
                if words.len() != 2 {
                    return Err(err("expected: <id> sync".into()));
                }
                OpKind::Sync
            }
            Some(other) => return Err(err(format!("unknown operation '{other}'"))),
            None => return Err(err("missing operation".into())),
        };
        ops.push(ScriptOp { client, line, kind });
    }

    if clients.is_empty() {
        return Err(ScenarioError::Parse {
            line: 1,
            msg: "script declares no clients".into(),
        });
    }
    Ok(ScenarioScript { clients, ops })
}

fn parse_int(s: &str) -> Option<u64> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

fn parse_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}

/// One failed expectation or unexpected protocol error.
#[derive(Debug, Clone)]
pub struct Failure {
    pub line: u32,
    pub client: String,
    pub message: String,
}

/// Everything observable from one scenario run.
#[derive(Debug, Default)]
pub struct RunReport {
    pub expectations_checked: usize,
    pub failures: Vec<Failure>,
    /// Bytes returned by every d2h, in script order.
    pub d2h_log: Vec<(String, u32, Vec<u8>)>,
    pub dispatch: Vec<DispatchEvent>,
    pub events: Vec<String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manager: ManagerConfig,
    /// Directory `load` paths resolve against.
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn new(manager: ManagerConfig, base_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            manager,
            base_dir: base_dir.into(),
        }
    }
}

struct PendingResponse {
    line: u32,
    client_idx: usize,
    kind: PendingKind,
}

enum PendingKind {
    Malloc { var: String },
    D2h { expect: Expect },
    Other { what: &'static str },
}

enum Transport {
    InProcess {
        manager: Box<Manager>,
        conns: Vec<ConnId>,
    },
    Socket {
        clients: Vec<Client>,
    },
}

/// Drives a parsed script. In-process mode spins a manager in this thread
/// (the same state machine the socket server drives) and is fully
/// deterministic; socket mode connects to an external manager instead.
pub struct ScenarioRunner {
    script: ScenarioScript,
    base_dir: PathBuf,
    transport: Transport,
    /// Per-client queues of not-yet-matched responses, in request order.
    pending: Vec<std::collections::VecDeque<PendingResponse>>,
    vars: Vec<HashMap<String, u64>>,
    report: RunReport,
}

impl ScenarioRunner {
    pub fn in_process(
        script: ScenarioScript,
        cfg: RunConfig,
    ) -> Result<ScenarioRunner, ScenarioError> {
        let manager =
            Manager::new(cfg.manager.clone()).map_err(|e| ScenarioError::Setup(e.to_string()))?;
        Ok(ScenarioRunner::new(
            script,
            cfg.base_dir,
            Transport::InProcess {
                manager: Box::new(manager),
                conns: Vec::new(),
            },
        ))
    }

    pub fn over_socket(
        script: ScenarioScript,
        base_dir: PathBuf,
        socket: impl AsRef<Path>,
    ) -> Result<ScenarioRunner, ScenarioError> {
        let mut clients = Vec::new();
        for _ in &script.clients {
            clients.push(Client::connect(socket.as_ref())?);
        }
        Ok(ScenarioRunner::new(
            script,
            base_dir,
            Transport::Socket { clients },
        ))
    }

    fn new(script: ScenarioScript, base_dir: PathBuf, transport: Transport) -> ScenarioRunner {
        let n = script.clients.len();
        ScenarioRunner {
            script,
            base_dir,
            transport,
            pending: (0..n).map(|_| Default::default()).collect(),
            vars: (0..n).map(|_| HashMap::new()).collect(),
            report: RunReport::default(),
        }
    }

    pub fn run(mut self) -> Result<RunReport, ScenarioError> {
        if let Transport::InProcess { manager, conns } = &mut self.transport {
            for (i, _) in self.script.clients.iter().enumerate() {
                let conn = ConnId(i as u64 + 1);
                manager.connect(conn);
                conns.push(conn);
            }
        }

        // INIT every client in declaration order.
        let clients = self.script.clients.clone();
        for (idx, decl) in clients.iter().enumerate() {
            self.submit(
                idx,
                decl.line,
                WireMessage::Init {
                    req_bytes: decl.partition_bytes,
                },
                PendingKind::Other { what: "init" },
            )?;
            self.wait_for_all(idx)?;
        }

        let ops = self.script.ops.clone();
        for op in &ops {
            self.run_op(op)?;
        }

        // Drain every outstanding response.
        for idx in 0..self.script.clients.len() {
            self.wait_for_all(idx)?;
        }

        if let Transport::InProcess { manager, .. } = &mut self.transport {
            let leftover = manager.dispatch_until_idle();
            debug_assert!(leftover.is_empty(), "all responses were consumed");
            self.report.dispatch = manager.dispatch_log().to_vec();
            self.report.events = manager.take_events();
        }
        Ok(self.report)
    }

    fn client_index(&self, id: &str) -> usize {
        self.script
            .clients
            .iter()
            .position(|c| c.id == id)
            .expect("validated at parse")
    }

    fn run_op(&mut self, op: &ScriptOp) -> Result<(), ScenarioError> {
        let idx = self.client_index(&op.client);
        let line = op.line;
        match &op.kind {
            OpKind::Malloc { var, bytes } => {
                self.submit(
                    idx,
                    line,
                    WireMessage::Malloc { size: *bytes },
                    PendingKind::Malloc { var: var.clone() },
                )?;
                self.wait_for_all(idx)?;
            }
            OpKind::Free { var } => {
                let addr = self.var_addr(idx, line, var)?;
                self.vars[idx].remove(var);
                self.submit(
                    idx,
                    line,
                    WireMessage::Free { addr },
                    PendingKind::Other { what: "free" },
                )?;
                self.wait_for_all(idx)?;
            }
            OpKind::H2d { var, offset, bytes } => {
                let addr = self.var_addr(idx, line, var)?;
                self.submit(
                    idx,
                    line,
                    WireMessage::MemcpyH2d {
                        dst: addr + offset,
                        bytes: bytes.clone(),
                    },
                    PendingKind::Other { what: "h2d" },
                )?;
                self.wait_for_all(idx)?;
            }
            OpKind::D2h {
                var,
                offset,
                len,
                expect,
            } => {
                let addr = self.var_addr(idx, line, var)?;
                self.submit(
                    idx,
                    line,
                    WireMessage::MemcpyD2h {
                        src: addr + offset,
                        len: *len,
                    },
                    PendingKind::D2h {
                        expect: expect.clone(),
                    },
                )?;
                self.wait_for_all(idx)?;
            }
            OpKind::Load { path } => {
                let full = self.base_dir.join(path);
                let text = std::fs::read_to_string(&full).map_err(|e| ScenarioError::Parse {
                    line,
                    msg: format!("cannot read {}: {e}", full.display()),
                })?;
                self.submit(
                    idx,
                    line,
                    WireMessage::LoadModule { text },
                    PendingKind::Other { what: "load" },
                )?;
                self.wait_for_all(idx)?;
            }
            OpKind::Launch {
                kernel,
                grid,
                block,
                args,
            } => {
                let mut values = Vec::with_capacity(args.len());
                for a in args {
                    values.push(match a {
                        ScriptArg::Int(v) => ArgValue::Scalar64(*v),
                        ScriptArg::Var(v) => ArgValue::DevAddr(self.var_addr(idx, line, v)?),
                    });
                }
                // Pipelined: the response arrives at the next sync.
                self.submit(
                    idx,
                    line,
                    WireMessage::Launch {
                        name: kernel.clone(),
                        grid: *grid,
                        block: *block,
                        args: values,
                    },
                    PendingKind::Other { what: "launch" },
                )?;
            }
            OpKind::Sync => {
                self.submit(
                    idx,
                    line,
                    WireMessage::Sync,
                    PendingKind::Other { what: "sync" },
                )?;
                self.wait_for_all(idx)?;
            }
        }
        Ok(())
    }

    fn var_addr(&self, idx: usize, line: u32, var: &str) -> Result<u64, ScenarioError> {
        self.vars[idx]
            .get(var)
            .copied()
            .ok_or_else(|| ScenarioError::Parse {
                line,
                msg: format!("variable '{var}' has no live allocation"),
            })
    }

    fn submit(
        &mut self,
        idx: usize,
        line: u32,
        msg: WireMessage,
        kind: PendingKind,
    ) -> Result<(), ScenarioError> {
        self.pending[idx].push_back(PendingResponse {
            line,
            client_idx: idx,
            kind,
        });
        match &mut self.transport {
            Transport::InProcess { manager, conns } => {
                // Round-trip through the wire codec so in-process runs
                // exercise the same encoding the socket server sees.
                let (ty, payload) = wire::encode_request(&msg);
                let decoded = wire::decode_request(ty, &payload)
                    .expect("encoder and decoder agree on well-formed messages");
                let responses = manager.submit(conns[idx], decoded);
                self.accept_responses(responses);
            }
            Transport::Socket { clients } => {
                clients[idx].send(&msg)?;
            }
        }
        Ok(())
    }

    fn accept_responses(&mut self, responses: Vec<(ConnId, Response)>) {
        for (conn, r) in responses {
            let idx = conn.0 as usize - 1;
            let pending = self.pending[idx]
                .pop_front()
                .expect("response matches a request");
            self.settle(pending, r);
        }
    }

    /// Blocks (or pumps the in-process dispatch loop) until every pending
    /// response for client `idx` has arrived.
    fn wait_for_all(&mut self, idx: usize) -> Result<(), ScenarioError> {
        loop {
            if self.pending[idx].is_empty() {
                return Ok(());
            }
            match &mut self.transport {
                Transport::InProcess { manager, .. } => {
                    match manager.dispatch_step() {
                        Some(responses) => self.accept_responses(responses),
                        None => {
                            // Nothing left to execute; any still-pending
                            // response would be a bookkeeping bug.
                            assert!(
                                self.pending[idx].is_empty(),
                                "pending response with an idle manager"
                            );
                            return Ok(());
                        }
                    }
                }
                Transport::Socket { clients } => {
                    let r = clients[idx].recv()?;
                    let pending = self.pending[idx]
                        .pop_front()
                        .expect("response matches a request");
                    self.settle(pending, r);
                }
            }
        }
    }

    fn settle(&mut self, pending: PendingResponse, r: Response) {
        let client = self.script.clients[pending.client_idx].id.clone();
        match pending.kind {
            PendingKind::Malloc { var } => {
                if r.status == Status::Ok {
                    let addr =
                        wire::payload::u64_at(&r.payload, 0).expect("malloc returns an address");
                    self.vars[pending.client_idx].insert(var, addr);
                } else {
                    self.fail(
                        pending.line,
                        &client,
                        format!("malloc failed: {}", r.message()),
                    );
                }
            }
            PendingKind::D2h { expect } => {
                if r.status != Status::Ok {
                    self.fail(
                        pending.line,
                        &client,
                        format!("d2h failed: {}", r.message()),
                    );
                    return;
                }
                self.report
                    .d2h_log
                    .push((client.clone(), pending.line, r.payload.clone()));
                self.report.expectations_checked += 1;
                if let Expect::Bytes(want) = expect {
                    if want != r.payload {
                        self.fail(
                            pending.line,
                            &client,
                            format!("expected {}, got {}", hex(&want), hex(&r.payload)),
                        );
                    }
                }
            }
            PendingKind::Other { what } => {
                if r.status != Status::Ok {
                    self.fail(
                        pending.line,
                        &client,
                        format!("{what} failed: {}", r.message()),
                    );
                }
            }
        }
    }

    fn fail(&mut self, line: u32, client: &str, message: String) {
        self.report.failures.push(Failure {
            line,
            client: client.to_string(),
            message,
        });
    }
}

fn hex(bytes: &[u8]) -> String {
    if bytes.is_empty() {
        return "(empty)".into();
    }
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
