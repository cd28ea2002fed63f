//! Protected spatial sharing of a simulated GPU:
//!
//! * [`ptx`] — parser and printer for a defined PTX text subset;
//! * [`patch`] — the offline sandboxing pass that fences or checks every
//!   instrumentable memory access and indirect branch;
//! * [`palloc`] — power-of-two partition allocator and bounds table for the
//!   simulated device;
//! * [`interp`] — a deterministic interpreter that executes the subset over
//!   simulated device memory and records every access;
//! * [`manager`] — the multi-client device manager: validates transfers,
//!   augments and launches sandboxed kernels, schedules clients round-robin;
//! * [`scenario`] — a line-oriented script format driving multi-client runs.
//!
//! See the guide under `book/` for concept chapters, and `docs/` for the
//! grammar, scenario, and report references.

pub mod interp;
pub mod manager;
pub mod palloc;
pub mod patch;
pub mod ptx;
pub mod scenario;

mod doctests;
