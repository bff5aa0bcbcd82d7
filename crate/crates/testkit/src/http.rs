//! Static file server for remote tests.
//!
//! Serves a directory over HTTP on 127.0.0.1, counts GET requests, and can
//! stall a chosen request halfway through its body to simulate a transfer
//! that is killed mid-flight.

use std::fs;
use std::io::{self, Read};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use tiny_http::{Header, Response, Server};

#[derive(Default)]
struct Shared {
    requests: AtomicUsize,
    object_requests: AtomicUsize,
    log: Mutex<Vec<String>>,
    stall_at: Mutex<Option<usize>>,
    stalled: Mutex<bool>,
    stalled_cv: Condvar,
    released: Mutex<bool>,
    released_cv: Condvar,
}

pub struct StaticServer {
    server: Arc<Server>,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
    port: u16,
}

impl StaticServer {
    pub fn serve(root: &Path) -> io::Result<Self> {
        let server = Server::http("127.0.0.1:0").map_err(io::Error::other)?;
        let port = server.server_addr().to_ip().expect("tcp listener").port();
        let server = Arc::new(server);
        let shared = Arc::new(Shared::default());
        let root = root.to_path_buf();
        let thread = {
            let server = Arc::clone(&server);
            let shared = Arc::clone(&shared);
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    let shared = Arc::clone(&shared);
                    let root = root.clone();
                    std::thread::spawn(move || handle(request, &root, &shared));
                }
            })
        };
        Ok(StaticServer {
            server,
            shared,
            thread: Some(thread),
            port,
        })
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    pub fn requests(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    /// GETs under `objects/`.
    pub fn object_requests(&self) -> usize {
        self.shared.object_requests.load(Ordering::SeqCst)
    }

    pub fn request_log(&self) -> Vec<String> {
        self.shared.log.lock().unwrap().clone()
    }

    pub fn reset_counters(&self) {
        self.shared.requests.store(0, Ordering::SeqCst);
        self.shared.object_requests.store(0, Ordering::SeqCst);
        self.shared.log.lock().unwrap().clear();
    }

    /// Stall the `n`th request (1-based, counted from now) after sending half
    /// of its body.
    pub fn stall_request(&self, n: usize) {
        self.reset_counters();
        *self.shared.stalled.lock().unwrap() = false;
        *self.shared.released.lock().unwrap() = false;
        *self.shared.stall_at.lock().unwrap() = Some(n);
    }

    /// Block until the stalled request has been reached.
    pub fn wait_for_stall(&self, timeout: Duration) -> bool {
        let guard = self.shared.stalled.lock().unwrap();
        let (guard, _) = self
            .shared
            .stalled_cv
            .wait_timeout_while(guard, timeout, |stalled| !*stalled)
            .unwrap();
        *guard
    }

    /// Let a stalled request fail by dropping its connection.
    pub fn release_stall(&self) {
        *self.shared.stall_at.lock().unwrap() = None;
        *self.shared.released.lock().unwrap() = true;
        self.shared.released_cv.notify_all();
    }
}

impl Drop for StaticServer {
    fn drop(&mut self) {
        self.release_stall();
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn resolve(root: &Path, url: &str) -> Option<PathBuf> {
    let rel = url.split('?').next()?.trim_start_matches('/');
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

/// Yields the first half of `data`, then blocks until released and errors.
struct StallingReader {
    data: Vec<u8>,
    pos: usize,
    shared: Arc<Shared>,
}

impl Read for StallingReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let half = self.data.len() / 2;
        if self.pos < half {
            let n = buf.len().min(half - self.pos);
            buf[..n].copy_from_slice(&self.data[self.pos..self.pos + n]);
            self.pos += n;
            return Ok(n);
        }
        *self.shared.stalled.lock().unwrap() = true;
        self.shared.stalled_cv.notify_all();
        let released = self.shared.released.lock().unwrap();
        let _released = self.shared.released_cv.wait_while(released, |r| !*r).unwrap();
        Err(io::Error::new(
            io::ErrorKind::ConnectionAborted,
            "stalled request released",
        ))
    }
}

fn handle(request: tiny_http::Request, root: &Path, shared: &Arc<Shared>) {
    let url = request.url().to_string();
    let index = shared.requests.fetch_add(1, Ordering::SeqCst) + 1;
    if url.trim_start_matches('/').starts_with("objects/") {
        shared.object_requests.fetch_add(1, Ordering::SeqCst);
    }
    shared.log.lock().unwrap().push(url.clone());

    let body = resolve(root, &url).and_then(|p| fs::read(p).ok());
    let Some(body) = body else {
        let _ = request.respond(Response::from_string("not found").with_status_code(404));
        return;
    };
    let content_type = Header::from_bytes("Content-Type", "application/octet-stream").unwrap();
    let stall = *shared.stall_at.lock().unwrap() == Some(index);
    if stall {
        let len = body.len();
        let reader = StallingReader {
            data: body,
            pos: 0,
            shared: Arc::clone(shared),
        };
        let response = Response::new(200.into(), vec![content_type], reader, Some(len), None);
        let _ = request.respond(response);
    } else {
        let _ = request.respond(Response::from_data(body).with_header(content_type));
    }
}
