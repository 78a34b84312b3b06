//! Subprocess plumbing for external providers (tools, metrics, policies).
//!
//! Line-oriented providers are long-lived: one JSON request per line on
//! stdin, one JSON response per line on stdout. A dead or hung provider is
//! killed and respawned on the next request.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Splits a command line into argv, honouring single and double quotes.
pub fn split_command(cmd: &str) -> Vec<String> {
    let mut args = Vec::new();
    let mut cur = String::new();
    let mut quote: Option<char> = None;
    let mut in_word = false;
    for ch in cmd.chars() {
        match quote {
            Some(q) if ch == q => quote = None,
            Some(_) => cur.push(ch),
            None if ch == '"' || ch == '\'' => {
                quote = Some(ch);
                in_word = true;
            }
            None if ch.is_whitespace() => {
                if in_word {
                    args.push(std::mem::take(&mut cur));
                    in_word = false;
                }
            }
            None => {
                cur.push(ch);
                in_word = true;
            }
        }
    }
    if in_word {
        args.push(cur);
    }
    args
}

/// Runs a one-shot command to completion with a timeout. Returns the exit
/// status and captured stderr.
pub fn run_with_timeout(argv: &[String], timeout: Duration) -> Result<(ExitStatus, String), String> {
    let (prog, rest) = argv.split_first().ok_or("empty command")?;
    let mut child = Command::new(prog)
        .args(rest)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| format!("spawn {prog}: {e}"))?;
    let stderr = child.stderr.take();
    let err_reader = thread::spawn(move || {
        let mut s = String::new();
        if let Some(mut e) = stderr {
            let _ = std::io::Read::read_to_string(&mut e, &mut s);
        }
        s
    });
    let start = Instant::now();
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                let err = err_reader.join().unwrap_or_default();
                return Ok((status, err));
            }
            Ok(None) if start.elapsed() > timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!("timed out after {:?}", timeout));
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(e.to_string()),
        }
    }
}

/// A persistent line-delimited JSON subprocess.
pub struct LineProcess {
    argv: Vec<String>,
    timeout: Duration,
    live: Option<Live>,
}

struct Live {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Drop for Live {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl LineProcess {
    pub fn new(argv: Vec<String>, timeout: Duration) -> Self {
        LineProcess { argv, timeout, live: None }
    }

    pub fn command(&self) -> &[String] {
        &self.argv
    }

    fn spawn(&self) -> Result<Live, String> {
        let (prog, rest) = self.argv.split_first().ok_or("empty command")?;
        let mut child = Command::new(prog)
            .args(rest)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("spawn {prog}: {e}"))?;
        let stdin = child.stdin.take().ok_or("no stdin")?;
        let stdout = child.stdout.take().ok_or("no stdout")?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(Live { child, stdin, lines: rx })
    }

    /// Sends one request line and waits for one response line.
    pub fn request(&mut self, line: &str) -> Result<String, String> {
        if self.live.is_none() {
            self.live = Some(self.spawn()?);
        }
        let live = self.live.as_mut().expect("spawned");
        let sent = writeln!(live.stdin, "{line}").and_then(|_| live.stdin.flush());
        if let Err(e) = sent {
            self.live = None;
            return Err(format!("provider stdin closed: {e}"));
        }
        match live.lines.recv_timeout(self.timeout) {
            Ok(resp) => Ok(resp),
            Err(RecvTimeoutError::Timeout) => {
                self.live = None;
                Err(format!("provider timed out after {:?}", self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.live = None;
                Err("provider exited without responding".into())
            }
        }
    }

    /// Kills the running process, if any; the next request respawns it.
    pub fn reset(&mut self) {
        self.live = None;
    }
}
