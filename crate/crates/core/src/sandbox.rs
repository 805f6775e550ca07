//! Client side of the code-execution worker protocol.
//!
//! Workers speak newline-delimited JSON over stdio: a hello line carrying
//! `"version": "v1"` at startup, then one [`ExecResponse`] line for every
//! [`ExecRequest`] line. A [`WorkerPool`] hands each worker to one caller at
//! a time.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: &str = "v1";
pub const MAX_CODE_BYTES: usize = 1 << 20;
pub const MAX_TIMEOUT_MS: u64 = 600_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecKind {
    Run,
    SyntaxCheck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecRequest {
    pub id: String,
    pub kind: ExecKind,
    pub code: String,
    pub stdin: String,
    pub timeout_ms: u64,
    pub memory_mb: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecResponse {
    pub id: String,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub traceback: Option<String>,
    #[serde(default)]
    pub exit_status: i32,
    #[serde(default)]
    pub timed_out: bool,
    #[serde(default)]
    pub duration_ms: u64,
    #[serde(default)]
    pub syntax_ok: Option<bool>,
    /// Set by the worker for protocol or resource errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExecResponse {
    /// Ran to completion without a traceback, timeout or worker error.
    pub fn succeeded(&self) -> bool {
        !self.timed_out && self.traceback.is_none() && self.exit_status == 0 && self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecLimits {
    pub timeout_ms: u64,
    pub memory_mb: u64,
}

impl Default for ExecLimits {
    fn default() -> Self {
        ExecLimits { timeout_ms: 10_000, memory_mb: 512 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("sandbox unavailable: {0}")]
    Unavailable(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("response id {got} does not match request {expected}")]
    IdMismatch { expected: String, got: String },
    #[error("worker error: {0}")]
    Worker(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExecRequest {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.timeout_ms == 0 || self.timeout_ms > MAX_TIMEOUT_MS {
            return Err(SandboxError::InvalidRequest(format!(
                "timeout_ms {} outside [1, {MAX_TIMEOUT_MS}]",
                self.timeout_ms
            )));
        }
        if self.code.len() > MAX_CODE_BYTES {
            return Err(SandboxError::InvalidRequest(format!("code is {} bytes", self.code.len())));
        }
        Ok(())
    }
}

/// Executes or compiles code in isolation.
pub trait Sandbox: Send + Sync {
    fn execute(&self, request: ExecRequest) -> Result<ExecResponse, SandboxError>;
}

static REQUEST_IDS: AtomicU64 = AtomicU64::new(0);

fn next_id() -> String {
    format!("r{}", REQUEST_IDS.fetch_add(1, Ordering::Relaxed))
}

pub fn run_code(
    sandbox: &dyn Sandbox,
    code: &str,
    stdin: &str,
    limits: ExecLimits,
) -> Result<ExecResponse, SandboxError> {
    sandbox.execute(ExecRequest {
        id: next_id(),
        kind: ExecKind::Run,
        code: code.to_string(),
        stdin: stdin.to_string(),
        timeout_ms: limits.timeout_ms,
        memory_mb: limits.memory_mb,
    })
}

/// Compile-only check. An unreachable sandbox is an error, never `false`.
pub fn syntax_check(sandbox: &dyn Sandbox, code: &str) -> Result<bool, SandboxError> {
    let response = sandbox.execute(ExecRequest {
        id: next_id(),
        kind: ExecKind::SyntaxCheck,
        code: code.to_string(),
        stdin: String::new(),
        timeout_ms: ExecLimits::default().timeout_ms,
        memory_mb: ExecLimits::default().memory_mb,
    })?;
    if let Some(err) = response.error {
        return Err(SandboxError::Worker(err));
    }
    response
        .syntax_ok
        .ok_or_else(|| SandboxError::Protocol("syntax check response without syntax_ok".into()))
}

/// One serial request stream over a reader/writer pair.
pub struct StdioWorker<R, W> {
    reader: R,
    writer: W,
}

impl<R: BufRead, W: Write> StdioWorker<R, W> {
    /// Reads the hello line and checks the protocol version.
    pub fn connect(mut reader: R, writer: W) -> Result<Self, SandboxError> {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(SandboxError::Unavailable("worker closed before hello".into()));
        }
        let hello: serde_json::Value = serde_json::from_str(line.trim())
            .map_err(|e| SandboxError::Protocol(format!("bad hello: {e}")))?;
        match hello.get("version").and_then(|v| v.as_str()) {
            Some(PROTOCOL_VERSION) => Ok(StdioWorker { reader, writer }),
            other => Err(SandboxError::Protocol(format!("unsupported worker version {other:?}"))),
        }
    }

    pub fn call(&mut self, request: &ExecRequest) -> Result<ExecResponse, SandboxError> {
        request.validate()?;
        let mut line = serde_json::to_string(request).map_err(|e| SandboxError::Protocol(e.to_string()))?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(SandboxError::Unavailable("worker closed its output".into()));
        }
        let response: ExecResponse =
            serde_json::from_str(reply.trim()).map_err(|e| SandboxError::Protocol(e.to_string()))?;
        if response.id != request.id {
            return Err(SandboxError::IdMismatch { expected: request.id.clone(), got: response.id });
        }
        Ok(response)
    }
}

/// A worker subprocess, killed when dropped.
pub struct ProcessWorker {
    child: Child,
    conn: StdioWorker<BufReader<ChildStdout>, ChildStdin>,
}

impl ProcessWorker {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, SandboxError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| SandboxError::Unavailable(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let conn = StdioWorker::connect(BufReader::new(stdout), stdin)?;
        Ok(ProcessWorker { child, conn })
    }

    pub fn call(&mut self, request: &ExecRequest) -> Result<ExecResponse, SandboxError> {
        self.conn.call(request)
    }
}

impl Drop for ProcessWorker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Fixed-size pool of worker processes.
///
/// A worker that fails at the transport level is discarded and replaced on
/// the next checkout.
pub struct WorkerPool {
    program: String,
    args: Vec<String>,
    size: usize,
    idle: Mutex<PoolState>,
    available: Condvar,
}

struct PoolState {
    workers: Vec<ProcessWorker>,
    live: usize,
}

impl WorkerPool {
    pub fn new(program: impl Into<String>, args: Vec<String>, size: usize) -> Self {
        WorkerPool {
            program: program.into(),
            args,
            size: size.max(1),
            idle: Mutex::new(PoolState { workers: Vec::new(), live: 0 }),
            available: Condvar::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn checkout(&self) -> Result<ProcessWorker, SandboxError> {
        let mut state = self.idle.lock().expect("pool lock");
        loop {
            if let Some(worker) = state.workers.pop() {
                return Ok(worker);
            }
            if state.live < self.size {
                state.live += 1;
                drop(state);
                return ProcessWorker::spawn(&self.program, &self.args).inspect_err(|_| {
                    self.idle.lock().expect("pool lock").live -= 1;
                    self.available.notify_one();
                });
            }
            state = self.available.wait(state).expect("pool lock");
        }
    }

    fn release(&self, worker: Option<ProcessWorker>) {
        let mut state = self.idle.lock().expect("pool lock");
        match worker {
            Some(w) => state.workers.push(w),
            None => state.live -= 1,
        }
        self.available.notify_one();
    }
}

impl Sandbox for WorkerPool {
    fn execute(&self, request: ExecRequest) -> Result<ExecResponse, SandboxError> {
        request.validate()?;
        let mut worker = self.checkout()?;
        match worker.call(&request) {
            Ok(response) => {
                self.release(Some(worker));
                Ok(response)
            }
            Err(e) => {
                self.release(None);
                Err(e)
            }
        }
    }
}

type Handler = dyn Fn(&ExecRequest) -> Result<ExecResponse, SandboxError> + Send + Sync;

/// In-process sandbox answering from a closure.
pub struct StubSandbox {
    handler: Box<Handler>,
    calls: AtomicU64,
}

impl StubSandbox {
    pub fn new<F>(handler: F) -> Self
    where
        F: Fn(&ExecRequest) -> Result<ExecResponse, SandboxError> + Send + Sync + 'static,
    {
        StubSandbox { handler: Box::new(handler), calls: AtomicU64::new(0) }
    }

    /// Accepts every syntax check and runs nothing: programs print nothing.
    pub fn inert() -> Self {
        Self::new(|req| {
            Ok(ExecResponse {
                id: req.id.clone(),
                syntax_ok: (req.kind == ExecKind::SyntaxCheck).then_some(true),
                ..Default::default()
            })
        })
    }

    /// A sandbox that is never reachable.
    pub fn unavailable() -> Self {
        Self::new(|_| Err(SandboxError::Unavailable("stub sandbox is offline".into())))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Sandbox for StubSandbox {
    fn execute(&self, request: ExecRequest) -> Result<ExecResponse, SandboxError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.handler)(&request)
    }
}
