//! The device manager: the only entity that touches simulated device memory.
//!
//! Clients speak the framed protocol in [`wire`]. The manager validates
//! every transfer against the partition bounds table, patches modules on
//! ingest so only sandboxed kernels are ever registered, appends fence
//! argument values at launch, and schedules one task per client visit in a
//! fixed round-robin over connections. Host-initiated copies execute
//! immediately at receipt; kernels and device-to-device copies queue per
//! client and complete in submission order.
//!
//! Responses on a connection are delivered in request order: a request's
//! response is held until every earlier request on that connection has one.

pub mod client;
pub mod server;
pub mod wire;

use std::collections::{HashMap, VecDeque};

use crate::interp::{self, ArgValue, Executable, LaunchConfig, SimMemory, DEFAULT_STEP_LIMIT};
use crate::palloc::{
    AllocError, AppId, PartitionBoundsTable, DEFAULT_DEVICE_BASE, DEFAULT_DEVICE_SIZE,
};
use crate::patch::{sandbox_module, FenceParams, PatchOptions, SandboxMode};
use crate::ptx::{parse_module_opts, ParseOptions, PtxError, ScalarType};

use std::sync::Arc;
use wire::{payload, Response, Status, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConnId(pub u64);

impl std::fmt::Display for ConnId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "conn{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct ManagerConfig {
    pub device_base: u64,
    pub device_size: u64,
    pub mode: SandboxMode,
    pub strict_parse: bool,
    pub inline_reciprocal: bool,
    /// Launch the native handle when exactly one client is connected.
    pub native_when_solo: bool,
    /// With protection off, modules are not patched and launches use the
    /// native handle with unmodified arguments. Transfers are still
    /// validated.
    pub protected: bool,
    pub step_limit: u64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            device_base: DEFAULT_DEVICE_BASE,
            device_size: DEFAULT_DEVICE_SIZE,
            mode: SandboxMode::FenceBitwise,
            strict_parse: true,
            inline_reciprocal: false,
            native_when_solo: false,
            protected: true,
            step_limit: DEFAULT_STEP_LIMIT,
        }
    }
}

/// Kernel-name lookup: every registered name resolves to the sandboxed
/// handle produced on ingest plus the native handle for the solo fast path.
#[derive(Default)]
pub struct SymbolTable {
    entries: HashMap<String, SymbolEntry>,
}

#[derive(Clone)]
struct SymbolEntry {
    native: Arc<Executable>,
    sandboxed: Arc<Executable>,
    mode: SandboxMode,
}

impl SymbolTable {
    fn lookup(&self, name: &str) -> Option<&SymbolEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskKind {
    Launch { kernel: String },
    CopyD2d { dst: u64, src: u64, len: u64 },
}

/// One scheduler decision, recorded for fairness assertions and `--trace`.
#[derive(Debug, Clone)]
pub struct DispatchEvent {
    pub seq: u64,
    pub conn: ConnId,
    pub app: AppId,
    /// Zero-based index of this task in its client's submission order.
    pub client_task_index: u64,
    pub kind: TaskKind,
    /// Apps with a non-empty task queue at selection time.
    pub pending_before: Vec<AppId>,
    pub outcome: TaskOutcome,
}

#[derive(Debug, Clone)]
pub enum TaskOutcome {
    Completed { trace: Option<interp::AccessTrace> },
    Failed { error: String },
}

enum Task {
    Launch {
        slot: u64,
        index: u64,
        name: String,
        grid: u32,
        block: u32,
        args: Vec<ArgValue>,
    },
    CopyD2d {
        slot: u64,
        index: u64,
        dst: u64,
        src: u64,
        len: u64,
    },
    /// Completes when it reaches the queue front: everything submitted
    /// before it has finished.
    Sync { slot: u64 },
}

impl Task {
    fn is_sync(&self) -> bool {
        matches!(self, Task::Sync { .. })
    }
}

struct ClientState {
    app: Option<AppId>,
    queue: VecDeque<Task>,
    /// Count of launch/d2d tasks this client has submitted.
    submitted_tasks: u64,
    /// In-order response slots; `None` marks a request still in flight.
    slots: VecDeque<Option<Response>>,
    first_slot: u64,
    next_slot: u64,
}

impl ClientState {
    fn new() -> Self {
        ClientState {
            app: None,
            queue: VecDeque::new(),
            submitted_tasks: 0,
            slots: VecDeque::new(),
            first_slot: 0,
            next_slot: 0,
        }
    }

    fn alloc_slot(&mut self) -> u64 {
        let seq = self.next_slot;
        self.next_slot += 1;
        self.slots.push_back(None);
        seq
    }

    fn fill(&mut self, slot: u64, r: Response) {
        let idx = (slot - self.first_slot) as usize;
        let cell = self
            .slots
            .get_mut(idx)
            .expect("slot exists until delivered");
        debug_assert!(cell.is_none(), "slot filled twice");
        *cell = Some(r);
    }

    fn drain_ready(&mut self) -> Vec<Response> {
        let mut out = Vec::new();
        while matches!(self.slots.front(), Some(Some(_))) {
            out.push(self.slots.pop_front().flatten().expect("front is filled"));
            self.first_slot += 1;
        }
        out
    }

    fn real_tasks_pending(&self) -> bool {
        self.queue.iter().any(|t| !t.is_sync())
    }
}

/// The grdManager state machine, transport-agnostic. The socket server and
/// the in-process scenario runner both drive it through [`Manager::submit`]
/// and [`Manager::dispatch_step`].
pub struct Manager {
    cfg: ManagerConfig,
    table: PartitionBoundsTable,
    mem: SimMemory,
    symtab: SymbolTable,
    clients: HashMap<ConnId, ClientState>,
    /// Round-robin order: connection arrival order.
    conn_order: Vec<ConnId>,
    rr_cursor: usize,
    next_app: u64,
    next_dispatch_seq: u64,
    dispatch_log: Vec<DispatchEvent>,
    events: Vec<String>,
    shutdown: bool,
}

impl Manager {
    pub fn new(cfg: ManagerConfig) -> Result<Manager, AllocError> {
        let table = PartitionBoundsTable::new(cfg.device_base, cfg.device_size)?;
        let mem = SimMemory::new(cfg.device_base, cfg.device_size);
        Ok(Manager {
            cfg,
            table,
            mem,
            symtab: SymbolTable::default(),
            clients: HashMap::new(),
            conn_order: Vec::new(),
            rr_cursor: 0,
            next_app: 1,
            next_dispatch_seq: 0,
            dispatch_log: Vec::new(),
            events: Vec::new(),
            shutdown: false,
        })
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.cfg
    }

    pub fn symbols(&self) -> &SymbolTable {
        &self.symtab
    }

    pub fn dispatch_log(&self) -> &[DispatchEvent] {
        &self.dispatch_log
    }

    /// Replacement logs and other noteworthy events, drained by the server
    /// for its log output.
    pub fn take_events(&mut self) -> Vec<String> {
        std::mem::take(&mut self.events)
    }

    pub fn shutdown_requested(&self) -> bool {
        self.shutdown
    }

    pub fn has_pending_tasks(&self) -> bool {
        self.clients.values().any(|c| !c.queue.is_empty())
    }

    pub fn partition_of(&self, conn: ConnId) -> Option<(u64, u64)> {
        let app = self.clients.get(&conn)?.app?;
        self.table.record(app).map(|r| (r.base, r.size))
    }

    pub fn connect(&mut self, conn: ConnId) {
        self.clients.insert(conn, ClientState::new());
        self.conn_order.push(conn);
    }

    /// Client teardown: its partition is destroyed and queued work dropped.
    /// Other clients are unaffected.
    pub fn disconnect(&mut self, conn: ConnId) {
        if let Some(state) = self.clients.remove(&conn) {
            if let Some(app) = state.app {
                let _ = self.table.destroy_partition(app);
                self.events.push(format!(
                    "{conn}: disconnected, partition of {app} destroyed"
                ));
            }
        }
        if let Some(pos) = self.conn_order.iter().position(|c| *c == conn) {
            self.conn_order.remove(pos);
            if self.rr_cursor > pos {
                self.rr_cursor -= 1;
            }
        }
    }

    /// Registers every kernel of `text` under its own name, patched with
    /// the manager's configured mode. Used for `--modules-dir` preloading
    /// and by LOAD_MODULE.
    pub fn load_module_text(&mut self, text: &str) -> Result<Vec<String>, String> {
        let opts = ParseOptions {
            strict: self.cfg.strict_parse,
        };
        let parsed = parse_module_opts(text, opts).map_err(render_ptx_error)?;
        for w in &parsed.warnings {
            self.events.push(format!("parse: {w}"));
        }
        let module = parsed.module;
        let native = Arc::new(interp::compile_module(&module));

        let sandboxed = if self.cfg.protected {
            let popts = PatchOptions {
                mode: self.cfg.mode,
                inline_reciprocal: self.cfg.inline_reciprocal,
            };
            let (patched, _report) = sandbox_module(&module, &popts).map_err(|e| e.to_string())?;
            Arc::new(interp::compile_module(&patched))
        } else {
            native.clone()
        };

        let mut registered = Vec::new();
        for k in &module.entries {
            let entry = SymbolEntry {
                native: native.clone(),
                sandboxed: sandboxed.clone(),
                mode: self.cfg.mode,
            };
            if self.symtab.entries.insert(k.name.clone(), entry).is_some() {
                self.events
                    .push(format!("symbol {} replaced by newer module", k.name));
            }
            registered.push(k.name.clone());
        }
        Ok(registered)
    }

    /// Handles one request. Returns the responses that became deliverable
    /// on that connection (possibly none, when the request queued behind an
    /// in-flight task).
    pub fn submit(&mut self, conn: ConnId, msg: WireMessage) -> Vec<(ConnId, Response)> {
        debug_assert!(
            self.clients.contains_key(&conn),
            "submit from unknown connection"
        );
        let slot = {
            let state = self.clients.get_mut(&conn).expect("connected");
            state.alloc_slot()
        };
        let immediate: Option<Response> = match msg {
            WireMessage::Init { req_bytes } => Some(self.handle_init(conn, req_bytes)),
            WireMessage::Malloc { size } => {
                Some(
                    self.with_app(conn, |m, app| match m.table.device_malloc(app, size) {
                        Ok(addr) => Response::ok(addr.to_le_bytes().to_vec()),
                        Err(e) => alloc_error_response(e),
                    }),
                )
            }
            WireMessage::Free { addr } => {
                Some(
                    self.with_app(conn, |m, app| match m.table.device_free(app, addr) {
                        Ok(()) => Response::ok(Vec::new()),
                        Err(e) => alloc_error_response(e),
                    }),
                )
            }
            WireMessage::MemcpyH2d { dst, bytes } => Some(self.with_app(conn, |m, app| {
                match m.table.check_range(app, dst, bytes.len() as u64) {
                    Ok(check) if check.is_ok() => {
                        m.mem
                            .write_bytes(dst, &bytes)
                            .expect("validated range is in device");
                        Response::ok(Vec::new())
                    }
                    Ok(_) => Response::err(Status::OobTransfer, "destination outside partition"),
                    Err(e) => alloc_error_response(e),
                }
            })),
            WireMessage::MemcpyD2h { src, len } => {
                Some(
                    self.with_app(conn, |m, app| match m.table.check_range(app, src, len) {
                        Ok(check) if check.is_ok() => {
                            let bytes = m
                                .mem
                                .read_bytes(src, len)
                                .expect("validated range is in device");
                            Response::ok(bytes.to_vec())
                        }
                        Ok(_) => Response::err(Status::OobTransfer, "source outside partition"),
                        Err(e) => alloc_error_response(e),
                    }),
                )
            }
            WireMessage::MemcpyD2d { dst, src, len } => match self.require_app(conn) {
                Err(r) => Some(r),
                Ok(_) => {
                    let state = self.clients.get_mut(&conn).expect("connected");
                    let index = state.submitted_tasks;
                    state.submitted_tasks += 1;
                    state.queue.push_back(Task::CopyD2d {
                        slot,
                        index,
                        dst,
                        src,
                        len,
                    });
                    None
                }
            },
            WireMessage::LoadModule { text } => Some(match self.load_module_text(&text) {
                Ok(names) => Response::ok(names.join(",").into_bytes()),
                Err(msg) => Response::err(Status::SyntaxError, msg),
            }),
            WireMessage::Launch {
                name,
                grid,
                block,
                args,
            } => match self.validate_launch(conn, &name, grid, block, args) {
                Err(r) => Some(r),
                Ok(coerced) => {
                    let state = self.clients.get_mut(&conn).expect("connected");
                    let index = state.submitted_tasks;
                    state.submitted_tasks += 1;
                    state.queue.push_back(Task::Launch {
                        slot,
                        index,
                        name,
                        grid,
                        block,
                        args: coerced,
                    });
                    None
                }
            },
            WireMessage::Sync => {
                let state = self.clients.get_mut(&conn).expect("connected");
                state.queue.push_back(Task::Sync { slot });
                None
            }
            WireMessage::Shutdown => {
                self.shutdown = true;
                Some(Response::ok(Vec::new()))
            }
        };

        if let Some(r) = immediate {
            let state = self.clients.get_mut(&conn).expect("connected");
            state.fill(slot, r);
        }
        self.settle_syncs();
        self.deliver(conn)
    }

    fn handle_init(&mut self, conn: ConnId, req_bytes: u64) -> Response {
        let state = self.clients.get_mut(&conn).expect("connected");
        if state.app.is_some() {
            return Response::err(Status::DuplicateInit, "client already initialized");
        }
        let app = AppId(self.next_app);
        match self.table.create_partition(app, req_bytes) {
            Ok(record) => {
                let payload = payload::triple(app.0, record.base, record.size);
                self.next_app += 1;
                self.clients.get_mut(&conn).expect("connected").app = Some(app);
                Response::ok(payload)
            }
            Err(e) => alloc_error_response(e),
        }
    }

    fn require_app(&self, conn: ConnId) -> Result<AppId, Response> {
        self.clients
            .get(&conn)
            .and_then(|c| c.app)
            .ok_or_else(|| Response::err(Status::NoPartition, "client has not initialized"))
    }

    fn with_app(
        &mut self,
        conn: ConnId,
        f: impl FnOnce(&mut Manager, AppId) -> Response,
    ) -> Response {
        match self.require_app(conn) {
            Ok(app) => f(self, app),
            Err(r) => r,
        }
    }

    /// Arity and width validation against the native (unaugmented) kernel
    /// signature. Integer scalars are coerced to the declared parameter
    /// width when the value fits.
    fn validate_launch(
        &self,
        conn: ConnId,
        name: &str,
        grid: u32,
        block: u32,
        args: Vec<ArgValue>,
    ) -> Result<Vec<ArgValue>, Response> {
        self.require_app(conn)?;
        let Some(entry) = self.symtab.lookup(name) else {
            return Err(Response::err(
                Status::UnknownKernel,
                format!("no kernel named {name}"),
            ));
        };
        if grid == 0 || block == 0 {
            return Err(Response::err(
                Status::BadMessage,
                "grid and block must be positive",
            ));
        }
        let threads = grid as u64 * block as u64;
        if threads > interp::MAX_THREADS {
            return Err(Response::err(
                Status::BadMessage,
                format!("launch of {threads} threads exceeds the bound"),
            ));
        }
        let kernel = entry
            .native
            .kernel(name)
            .expect("symbol table entries resolve in their executable");
        let params = kernel.param_types();
        if args.len() != params.len() {
            return Err(Response::err(
                Status::BadMessage,
                format!(
                    "kernel {name} expects {} arguments, got {}",
                    params.len(),
                    args.len()
                ),
            ));
        }
        let mut coerced = Vec::with_capacity(args.len());
        for (index, (arg, ty)) in args.into_iter().zip(params).enumerate() {
            let fitted = match (arg, ty) {
                (
                    a @ (ArgValue::Scalar64(_) | ArgValue::DevAddr(_)),
                    ScalarType::U64 | ScalarType::B64 | ScalarType::S64 | ScalarType::F64,
                ) => a,
                (ArgValue::Scalar64(v), ScalarType::U32 | ScalarType::B32 | ScalarType::S32)
                    if v <= u32::MAX as u64 =>
                {
                    ArgValue::Scalar32(v as u32)
                }
                (ArgValue::Scalar64(v), ScalarType::U16 | ScalarType::B16)
                    if v <= u16::MAX as u64 =>
                {
                    ArgValue::Scalar32(v as u32)
                }
                (
                    a @ ArgValue::Scalar32(_),
                    ScalarType::U32 | ScalarType::B32 | ScalarType::S32,
                ) => a,
                (a @ ArgValue::Scalar32(_), ScalarType::U16 | ScalarType::B16) => a,
                (a @ ArgValue::F32(_), ScalarType::F32) => a,
                _ => {
                    return Err(Response::err(
                        Status::BadMessage,
                        format!(
                            "argument {index} does not fit a .{} parameter",
                            ty.keyword()
                        ),
                    ));
                }
            };
            coerced.push(fitted);
        }
        Ok(coerced)
    }

    /// Completes Sync tasks sitting at queue fronts.
    fn settle_syncs(&mut self) {
        for state in self.clients.values_mut() {
            while matches!(state.queue.front(), Some(Task::Sync { .. })) {
                let Some(Task::Sync { slot }) = state.queue.pop_front() else {
                    unreachable!()
                };
                state.fill(slot, Response::ok(Vec::new()));
            }
        }
    }

    fn deliver(&mut self, conn: ConnId) -> Vec<(ConnId, Response)> {
        let state = self.clients.get_mut(&conn).expect("connected");
        state.drain_ready().into_iter().map(|r| (conn, r)).collect()
    }

    fn deliver_all(&mut self) -> Vec<(ConnId, Response)> {
        let conns: Vec<ConnId> = self.conn_order.clone();
        let mut out = Vec::new();
        for conn in conns {
            if self.clients.contains_key(&conn) {
                out.extend(self.deliver(conn));
            }
        }
        out
    }

    /// Executes at most one task: the next client in cyclic order with work
    /// queued, one task per visit. Returns `None` when every queue is empty.
    pub fn dispatch_step(&mut self) -> Option<Vec<(ConnId, Response)>> {
        self.settle_syncs();
        // Sync tasks settled above may have unblocked held responses even
        // when no real task is runnable.
        let early = self.deliver_all();
        let n = self.conn_order.len();
        let mut chosen = None;
        for i in 0..n {
            let idx = (self.rr_cursor + i) % n;
            let conn = self.conn_order[idx];
            if self
                .clients
                .get(&conn)
                .is_some_and(|c| c.real_tasks_pending())
            {
                chosen = Some((idx, conn));
                break;
            }
        }
        let Some((idx, conn)) = chosen else {
            return if early.is_empty() { None } else { Some(early) };
        };
        let mut early = early;

        let pending_before: Vec<AppId> = self
            .conn_order
            .iter()
            .filter_map(|c| {
                let s = self.clients.get(c)?;
                if s.real_tasks_pending() {
                    s.app
                } else {
                    None
                }
            })
            .collect();

        let state = self.clients.get_mut(&conn).expect("connected");
        let app = state.app.expect("queued tasks require a partition");
        let task = state.queue.pop_front().expect("queue is non-empty");
        let client_task_index = match &task {
            Task::Launch { index, .. } | Task::CopyD2d { index, .. } => *index,
            Task::Sync { .. } => unreachable!("sync tasks settle without dispatch"),
        };
        let (slot, kind, outcome, response) = self.execute(conn, app, task);

        let state = self.clients.get_mut(&conn).expect("connected");
        state.fill(slot, response);

        self.dispatch_log.push(DispatchEvent {
            seq: self.next_dispatch_seq,
            conn,
            app,
            client_task_index,
            kind,
            pending_before,
            outcome,
        });
        self.next_dispatch_seq += 1;

        // One task per visit: continue the cycle after this client.
        self.rr_cursor = (idx + 1) % n;

        self.settle_syncs();
        early.extend(self.deliver_all());
        Some(early)
    }

    pub fn dispatch_until_idle(&mut self) -> Vec<(ConnId, Response)> {
        let mut out = Vec::new();
        while let Some(r) = self.dispatch_step() {
            out.extend(r);
        }
        out.extend(self.deliver_all());
        out
    }

    fn execute(
        &mut self,
        _conn: ConnId,
        app: AppId,
        task: Task,
    ) -> (u64, TaskKind, TaskOutcome, Response) {
        match task {
            Task::Sync { .. } => unreachable!("sync tasks settle without dispatch"),
            Task::CopyD2d {
                slot,
                index: _,
                dst,
                src,
                len,
            } => {
                let kind = TaskKind::CopyD2d { dst, src, len };
                let src_ok = self
                    .table
                    .check_range(app, src, len)
                    .map(|c| c.is_ok())
                    .unwrap_or(false);
                let dst_ok = self
                    .table
                    .check_range(app, dst, len)
                    .map(|c| c.is_ok())
                    .unwrap_or(false);
                if !src_ok || !dst_ok {
                    let r = Response::err(Status::OobTransfer, "range outside partition");
                    let outcome = TaskOutcome::Failed {
                        error: "oob transfer".into(),
                    };
                    return (slot, kind, outcome, r);
                }
                let bytes = self.mem.read_bytes(src, len).expect("validated").to_vec();
                self.mem.write_bytes(dst, &bytes).expect("validated");
                (
                    slot,
                    kind,
                    TaskOutcome::Completed { trace: None },
                    Response::ok(Vec::new()),
                )
            }
            Task::Launch {
                slot,
                index: _,
                name,
                grid,
                block,
                args,
            } => {
                let kind = TaskKind::Launch {
                    kernel: name.clone(),
                };
                let entry = self
                    .symtab
                    .lookup(&name)
                    .expect("validated at submit")
                    .clone();
                let record = self.table.record(app).expect("partition exists");

                // Solo fast path and unprotected mode run the native handle
                // with unmodified arguments.
                let solo = self.cfg.native_when_solo && self.clients.len() == 1;
                let (exe, cfg) = if !self.cfg.protected || solo {
                    (entry.native.clone(), LaunchConfig::new(grid, block, args))
                } else {
                    let fence =
                        match FenceParams::for_partition(entry.mode, record.base, record.size) {
                            Ok(f) => f,
                            Err(e) => {
                                let r = Response::err(Status::LaunchFault, e.to_string());
                                return (
                                    slot,
                                    kind,
                                    TaskOutcome::Failed {
                                        error: e.to_string(),
                                    },
                                    r,
                                );
                            }
                        };
                    let cfg = LaunchConfig::new(grid, block, args).with_fence_args(&fence);
                    (entry.sandboxed.clone(), cfg)
                };
                let mut cfg = cfg;
                cfg.step_limit = self.cfg.step_limit;

                match interp::launch(&exe, &name, &cfg, &mut self.mem) {
                    Ok(trace) => {
                        let r = Response::ok(trace.oob_exits.to_le_bytes().to_vec());
                        (slot, kind, TaskOutcome::Completed { trace: Some(trace) }, r)
                    }
                    Err(e) => {
                        let msg = e.to_string();
                        let r = Response::err(Status::LaunchFault, &msg);
                        (slot, kind, TaskOutcome::Failed { error: msg }, r)
                    }
                }
            }
        }
    }
}

fn render_ptx_error(e: PtxError) -> String {
    e.to_string()
}

fn alloc_error_response(e: AllocError) -> Response {
    let status = match &e {
        AllocError::DeviceOom { .. } => Status::DeviceOom,
        AllocError::DuplicateApp { .. } => Status::DuplicateInit,
        AllocError::UnknownApp { .. } => Status::NoPartition,
        AllocError::PartitionOom { .. } => Status::PartitionOom,
        AllocError::UnknownAlloc { .. } => Status::UnknownAlloc,
        AllocError::InvalidSize => Status::InvalidSize,
        AllocError::BadDeviceGeometry { .. } => Status::BadMessage,
    };
    Response::err(status, e.to_string())
}
