use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::Value;

use super::{BackendErrorKind, Request};

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// Long-lived child process speaking JSON lines. The process is started on
/// first use and restarted after a timeout or exit.
pub struct SubprocessTransport {
    command: Vec<String>,
    timeout: Duration,
    running: Mutex<Option<Running>>,
}

impl SubprocessTransport {
    pub fn new(command: Vec<String>, timeout_ms: u64) -> Self {
        Self {
            command,
            timeout: Duration::from_millis(timeout_ms),
            running: Mutex::new(None),
        }
    }

    fn spawn(&self) -> Result<Running, BackendErrorKind> {
        let (prog, args) = self
            .command
            .split_first()
            .ok_or_else(|| BackendErrorKind::Transport("empty subprocess command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendErrorKind::Transport(format!("spawning {prog}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Running {
            child,
            stdin,
            lines: rx,
        })
    }

    pub(crate) fn request(&self, req: &Request) -> Result<Value, BackendErrorKind> {
        let mut guard = self.running.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let mut body = req.to_json();
        body["op"] = Value::from(req.role().path().trim_start_matches('/'));
        let running = guard.as_mut().expect("just spawned");
        let sent = writeln!(running.stdin, "{body}").and_then(|_| running.stdin.flush());
        let reply = match sent {
            Err(_) => Err(RecvTimeoutError::Disconnected),
            Ok(()) => running.lines.recv_timeout(self.timeout),
        };
        match reply {
            Ok(Ok(line)) => serde_json::from_str(&line).map_err(|e| BackendErrorKind::Malformed(format!("invalid JSON line: {e}"))),
            Ok(Err(e)) => {
                let mut dead = guard.take().expect("running");
                let _ = dead.child.kill();
                let _ = dead.child.wait();
                Err(BackendErrorKind::Transport(format!("reading stdout: {e}")))
            }
            Err(RecvTimeoutError::Timeout) => {
                let mut dead = guard.take().expect("running");
                let _ = dead.child.kill();
                let _ = dead.child.wait();
                Err(BackendErrorKind::Timeout)
            }
            Err(RecvTimeoutError::Disconnected) => {
                let mut dead = guard.take().expect("running");
                drop(dead.stdin);
                let status = dead.child.wait().ok().and_then(|s| s.code());
                Err(BackendErrorKind::Exited(status))
            }
        }
    }
}

impl Drop for SubprocessTransport {
    fn drop(&mut self) {
        if let Some(mut r) = self.running.get_mut().ok().and_then(Option::take) {
            let _ = r.child.kill();
            let _ = r.child.wait();
        }
    }
}
