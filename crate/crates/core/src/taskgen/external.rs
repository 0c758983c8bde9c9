//! Objectives hosted by an external process. The child reads one JSON
//! request per line on stdin ({"theta": [...]}) and answers one JSON
//! object per line on stdout ({"z": <real>}). Anything else a child does
//! (dying, timing out, printing garbage) surfaces as an evaluation error.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use crate::error::{Error, Result};

#[derive(serde::Serialize)]
struct Request<'a> {
    theta: &'a [f64],
}

#[derive(serde::Deserialize)]
struct Response {
    z: f64,
}

/// A running external objective process, reusable across evaluations.
/// The reader channel sits behind a mutex only so the handle can live
/// inside types shared across worker threads; evaluation itself is
/// exclusive through `&mut self`.
pub struct ExternalObjective {
    child: Child,
    stdin: ChildStdin,
    lines: Mutex<Receiver<std::io::Result<String>>>,
    timeout: Duration,
    command: String,
}

impl ExternalObjective {
    /// Start `command` through the shell with piped stdin/stdout.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("/bin/sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Evaluation(format!("could not start {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = child.stdout.take().expect("stdout was piped");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { child, stdin, lines: Mutex::new(lines), timeout, command: command.to_string() })
    }

    /// Evaluate one configuration, waiting at most the configured timeout
    /// for the answer line.
    pub fn eval(&mut self, theta: &[f64]) -> Result<f64> {
        let mut msg = serde_json::to_string(&Request { theta })
            .expect("a float slice always serializes");
        msg.push('\n');
        self.stdin.write_all(msg.as_bytes()).map_err(|e| {
            Error::Evaluation(format!("{:?} closed its stdin: {e}", self.command))
        })?;
        self.stdin.flush().map_err(|e| {
            Error::Evaluation(format!("{:?} closed its stdin: {e}", self.command))
        })?;

        let lines = self.lines.get_mut().expect("reader thread never panics holding the lock");
        let line = match lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => {
                return Err(Error::Evaluation(format!(
                    "reading from {:?} failed: {e}",
                    self.command
                )))
            }
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Evaluation(format!(
                    "{:?} did not answer within {:?}",
                    self.command, self.timeout
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Evaluation(format!(
                    "{:?} exited without answering",
                    self.command
                )))
            }
        };
        let response: Response = serde_json::from_str(&line).map_err(|e| {
            Error::Evaluation(format!(
                "{:?} answered {line:?}, not a z object: {e}",
                self.command
            ))
        })?;
        if !response.z.is_finite() {
            return Err(Error::Evaluation(format!(
                "{:?} answered a non-finite value {}",
                self.command, response.z
            )));
        }
        Ok(response.z)
    }
}

impl Drop for ExternalObjective {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Spawn, evaluate once, and tear down. For repeated evaluations keep an
/// [`ExternalObjective`] alive instead.
pub fn external_objective_eval(command: &str, theta: &[f64], timeout: Duration) -> Result<f64> {
    ExternalObjective::spawn(command, timeout)?.eval(theta)
}
