//! A target evaluated by an external process.
//!
//! Protocol: one JSON object per line on the child's stdin, one reply per line
//! on its stdout. `{"x":[…]}` is answered by `{"logp":r,"score":[…]}`;
//! `{"batch":[[…],…]}` by `{"results":[{"logp":…,"score":[…]},…]}`.
//! A reply may instead carry `{"error":"…"}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::target::TargetDistribution;

#[derive(Deserialize)]
struct Reply {
    logp: Option<f64>,
    score: Option<Vec<f64>>,
    error: Option<String>,
}

#[derive(Deserialize)]
struct BatchReply {
    results: Option<Vec<Reply>>,
    error: Option<String>,
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    /// Last evaluated point, so `log_density` and `score` share one request.
    last: Option<(Vec<f64>, f64, Vec<f64>)>,
}

pub struct OracleTarget {
    dim: usize,
    pipe: Mutex<Pipe>,
    failure: Mutex<Option<String>>,
}

impl OracleTarget {
    /// Spawns the oracle and checks one evaluation at the origin.
    pub fn spawn(command: &[String], dim: usize) -> Result<Self> {
        let (prog, args) = command.split_first().ok_or_else(|| Error::Config("empty oracle command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Oracle(format!("cannot start {prog:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let t = Self { dim, pipe: Mutex::new(Pipe { child, stdin, stdout, last: None }), failure: Mutex::new(None) };
        t.evaluate(&vec![0.0; dim])?;
        Ok(t)
    }

    /// The first protocol error seen, if any.
    pub fn failure(&self) -> Option<String> {
        self.failure.lock().unwrap().clone()
    }

    fn exchange(pipe: &mut Pipe, request: &serde_json::Value) -> Result<String> {
        let io = |e: std::io::Error| Error::Oracle(format!("pipe error: {e}"));
        writeln!(pipe.stdin, "{request}").map_err(io)?;
        pipe.stdin.flush().map_err(io)?;
        let mut line = String::new();
        if pipe.stdout.read_line(&mut line).map_err(io)? == 0 {
            return Err(Error::Oracle("oracle closed its output".into()));
        }
        Ok(line)
    }

    fn check(&self, r: Reply) -> Result<(f64, Vec<f64>)> {
        if let Some(e) = r.error {
            return Err(Error::Oracle(e));
        }
        let (Some(lp), Some(s)) = (r.logp, r.score) else {
            return Err(Error::Oracle("reply lacks logp or score".into()));
        };
        if s.len() != self.dim {
            return Err(Error::Oracle(format!("score has length {}, expected {}", s.len(), self.dim)));
        }
        Ok((lp, s))
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut pipe = self.pipe.lock().unwrap();
        if let Some((lx, lp, s)) = &pipe.last {
            if lx.as_slice() == x {
                return Ok((*lp, s.clone()));
            }
        }
        let line = Self::exchange(&mut pipe, &json!({ "x": x }))?;
        let reply: Reply = serde_json::from_str(&line).map_err(|e| Error::Oracle(format!("bad reply {line:?}: {e}")))?;
        let (lp, s) = self.check(reply)?;
        pipe.last = Some((x.to_vec(), lp, s.clone()));
        Ok((lp, s))
    }

    pub fn evaluate_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<(f64, Vec<f64>)>> {
        let mut pipe = self.pipe.lock().unwrap();
        let line = Self::exchange(&mut pipe, &json!({ "batch": xs }))?;
        let reply: BatchReply = serde_json::from_str(&line).map_err(|e| Error::Oracle(format!("bad reply {line:?}: {e}")))?;
        if let Some(e) = reply.error {
            return Err(Error::Oracle(e));
        }
        let results = reply.results.ok_or_else(|| Error::Oracle("batch reply lacks results".into()))?;
        if results.len() != xs.len() {
            return Err(Error::Oracle("batch reply has the wrong length".into()));
        }
        results.into_iter().map(|r| self.check(r)).collect()
    }

    fn eval_or_flag(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.evaluate(x) {
            Ok(v) => v,
            Err(e) => {
                let mut f = self.failure.lock().unwrap();
                if f.is_none() {
                    *f = Some(e.to_string());
                }
                (f64::NAN, vec![f64::NAN; self.dim])
            }
        }
    }
}

impl TargetDistribution for OracleTarget {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.eval_or_flag(x).0
    }
    fn score_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.eval_or_flag(x).1);
    }
    fn log_density_and_score(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let (lp, s) = self.eval_or_flag(x);
        out.copy_from_slice(&s);
        lp
    }
}

impl Drop for OracleTarget {
    fn drop(&mut self) {
        if let Ok(p) = self.pipe.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}
