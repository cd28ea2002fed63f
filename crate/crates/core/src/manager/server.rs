//! Unix-socket front end for the manager.
//!
//! Connection readers run on their own threads and funnel decoded frames
//! into one channel; all device state is mutated only by the dispatch loop
//! on the serving thread. One client's failure (malformed frames, faulting
//! kernels, disconnects) never affects another client's session.

use std::io;
use std::os::unix::net::{UnixListener, UnixStream};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use log::{info, warn};

use super::wire::{self, Response, Status};
use super::{ConnId, Manager, ManagerConfig};

enum Event {
    Connected(ConnId, UnixStream),
    Frame(ConnId, u16, Vec<u8>),
    Disconnected(ConnId),
}

/// Runs the manager over `listener` until a client requests SHUTDOWN and
/// queues drain.
pub fn serve(
    listener: UnixListener,
    cfg: ManagerConfig,
    preload: Vec<(String, String)>,
) -> io::Result<()> {
    let mut manager = Manager::new(cfg)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    for (name, text) in preload {
        match manager.load_module_text(&text) {
            Ok(kernels) => info!("preloaded {name}: {}", kernels.join(", ")),
            Err(e) => warn!("preload of {name} failed: {e}"),
        }
    }

    let (tx, rx) = mpsc::channel::<Event>();

    let accept_tx = tx.clone();
    thread::spawn(move || {
        for (next_conn, stream) in (1u64..).zip(listener.incoming()) {
            let Ok(stream) = stream else { break };
            let conn = ConnId(next_conn);
            let reader = match stream.try_clone() {
                Ok(r) => r,
                Err(e) => {
                    warn!("{conn}: cannot clone stream: {e}");
                    continue;
                }
            };
            if accept_tx.send(Event::Connected(conn, stream)).is_err() {
                break;
            }
            let frame_tx = accept_tx.clone();
            thread::spawn(move || {
                let mut reader = reader;
                loop {
                    match wire::read_frame(&mut reader) {
                        Ok(Some((ty, payload))) => {
                            if frame_tx.send(Event::Frame(conn, ty, payload)).is_err() {
                                return;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            warn!("{conn}: read error: {e}");
                            break;
                        }
                    }
                }
                let _ = frame_tx.send(Event::Disconnected(conn));
            });
        }
    });

    let mut writers: std::collections::HashMap<ConnId, UnixStream> = Default::default();
    let send = |writers: &mut std::collections::HashMap<ConnId, UnixStream>,
                responses: Vec<(ConnId, Response)>| {
        for (conn, r) in responses {
            if let Some(w) = writers.get_mut(&conn) {
                if let Err(e) = wire::write_frame(w, r.status.code(), &r.payload) {
                    warn!("{conn}: write error: {e}");
                }
            }
        }
    };

    loop {
        // Prefer incoming messages; run one dispatch step when idle.
        let event = if manager.has_pending_tasks() {
            rx.try_recv().ok()
        } else {
            match rx.recv_timeout(Duration::from_millis(50)) {
                Ok(ev) => Some(ev),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => break,
            }
        };

        match event {
            Some(Event::Connected(conn, stream)) => {
                info!("{conn}: connected");
                writers.insert(conn, stream);
                manager.connect(conn);
            }
            Some(Event::Frame(conn, ty, payload)) => {
                let responses = match wire::decode_request(ty, &payload) {
                    Ok(msg) => manager.submit(conn, msg),
                    // Unknown or malformed frames get BAD_MESSAGE; the
                    // connection survives.
                    Err(msg) => vec![(conn, Response::err(Status::BadMessage, msg))],
                };
                send(&mut writers, responses);
            }
            Some(Event::Disconnected(conn)) => {
                info!("{conn}: disconnected");
                manager.disconnect(conn);
                writers.remove(&conn);
            }
            None => {}
        }

        if manager.has_pending_tasks() {
            if let Some(responses) = manager.dispatch_step() {
                send(&mut writers, responses);
            }
        }
        for line in manager.take_events() {
            info!("{line}");
        }

        if manager.shutdown_requested() && !manager.has_pending_tasks() {
            let rest = manager.dispatch_until_idle();
            send(&mut writers, rest);
            info!("shutdown requested; draining complete");
            break;
        }
    }
    Ok(())
}
