//! Scoring merged checkpoints: the in-process proxy and external commands.
//!
//! An external evaluator is invoked as `<cmd> --model <path>` and must print a
//! single JSON object `{"domain_score": x, "general_score": y}` with both
//! scores in `[0, 1]`.

use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("cannot start evaluator `{program}`: {reason}")]
    Spawn { program: String, reason: String },
    #[error("evaluator exited with {status}: {stderr}")]
    Failed { status: String, stderr: String },
    #[error("evaluator timed out after {0:?}")]
    Timeout(Duration),
    #[error("malformed evaluator output: {0}")]
    Malformed(String),
    #[error("empty evaluator command")]
    EmptyCommand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub domain_score: f64,
    pub general_score: f64,
}

impl EvalScores {
    fn validated(self) -> Result<Self, EvalError> {
        for (what, v) in [("domain_score", self.domain_score), ("general_score", self.general_score)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(EvalError::Malformed(format!("{what} = {v} is outside [0, 1]")));
            }
        }
        Ok(self)
    }
}

pub trait Evaluator {
    /// Score a merged checkpoint. `path` points at the same checkpoint
    /// written to disk when [`Evaluator::needs_file`] is true.
    fn evaluate(&self, merged: &Checkpoint, path: Option<&Path>) -> Result<EvalScores, EvalError>;

    fn needs_file(&self) -> bool {
        false
    }
}

/// Aggregate Frobenius distance `sqrt(Σ ‖x_i − y_i‖²)` over `names`.
fn aggregate_distance<'a>(
    x: &Checkpoint,
    y: &Checkpoint,
    names: impl IntoIterator<Item = &'a String>,
) -> f64 {
    names
        .into_iter()
        .filter_map(|n| Some((x.get(n)?, y.get(n)?)))
        .map(|(a, b)| {
            a.data
                .iter()
                .zip(&b.data)
                .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Parameter-space stand-in for held-out evaluation.
///
/// `general = 1 − d(merged, base) / d(adapted, base)` and
/// `domain = 1 − d(merged, adapted) / d(adapted, base)`, both clamped to
/// `[0, 1]`, with `d` the aggregate Frobenius distance over aligned tensors.
/// When base and adapted coincide both scores are 1.
pub struct ProxyEvaluator<'a> {
    base: &'a Checkpoint,
    adapted: &'a Checkpoint,
    names: Vec<String>,
    reference: f64,
}

impl<'a> ProxyEvaluator<'a> {
    pub fn new(base: &'a Checkpoint, adapted: &'a Checkpoint) -> Self {
        let names: Vec<String> = base
            .tensors
            .iter()
            .filter(|(n, b)| adapted.get(n).is_some_and(|a| a.shape == b.shape))
            .map(|(n, _)| n.clone())
            .collect();
        let reference = aggregate_distance(adapted, base, &names);
        Self {
            base,
            adapted,
            names,
            reference,
        }
    }

    pub fn reference_distance(&self) -> f64 {
        self.reference
    }
}

impl Evaluator for ProxyEvaluator<'_> {
    fn evaluate(&self, merged: &Checkpoint, _path: Option<&Path>) -> Result<EvalScores, EvalError> {
        if self.reference == 0.0 {
            return Ok(EvalScores {
                domain_score: 1.0,
                general_score: 1.0,
            });
        }
        let to_base = aggregate_distance(merged, self.base, &self.names);
        let to_adapted = aggregate_distance(merged, self.adapted, &self.names);
        Ok(EvalScores {
            domain_score: (1.0 - to_adapted / self.reference).clamp(0.0, 1.0),
            general_score: (1.0 - to_base / self.reference).clamp(0.0, 1.0),
        })
    }
}

/// External process evaluator. The template is split on whitespace; the
/// first word is the program.
#[derive(Debug, Clone)]
pub struct CommandEvaluator {
    program: String,
    args: Vec<String>,
    timeout: Duration,
}

impl CommandEvaluator {
    pub fn new(template: &str, timeout: Duration) -> Result<Self, EvalError> {
        let mut words = template.split_whitespace().map(str::to_string);
        let program = words.next().ok_or(EvalError::EmptyCommand)?;
        Ok(Self {
            program,
            args: words.collect(),
            timeout,
        })
    }

    pub fn run(&self, model: &Path) -> Result<EvalScores, EvalError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .arg("--model")
            .arg(model)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| EvalError::Spawn {
                program: self.program.clone(),
                reason: e.to_string(),
            })?;

        // Drain pipes on threads so a chatty child cannot block on a full pipe.
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = thread::spawn(move || {
            let mut buf = String::new();
            let _ = stdout.read_to_string(&mut buf);
            buf
        });
        let err_reader = thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });

        let start = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(EvalError::Timeout(self.timeout));
                }
                Ok(None) => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    return Err(EvalError::Failed {
                        status: "wait error".into(),
                        stderr: e.to_string(),
                    })
                }
            }
        };
        let out = out_reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(EvalError::Failed {
                status: status.to_string(),
                stderr: err.trim().to_string(),
            });
        }
        parse_scores(&out)
    }
}

impl Evaluator for CommandEvaluator {
    fn evaluate(&self, _merged: &Checkpoint, path: Option<&Path>) -> Result<EvalScores, EvalError> {
        let path = path.ok_or_else(|| EvalError::Malformed("no checkpoint path supplied".into()))?;
        self.run(path)
    }

    fn needs_file(&self) -> bool {
        true
    }
}

/// Parse the evaluator's standard output: exactly one JSON object.
pub fn parse_scores(text: &str) -> Result<EvalScores, EvalError> {
    let scores: EvalScores =
        serde_json::from_str(text.trim()).map_err(|e| EvalError::Malformed(e.to_string()))?;
    scores.validated()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{DType, TensorRecord};

    fn ck(v: &[f32]) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(TensorRecord::new("w", vec![v.len()], DType::F32, v.to_vec()).unwrap())
            .unwrap();
        c
    }

    #[test]
    fn proxy_endpoints() {
        let base = ck(&[0.0, 0.0]);
        let adapted = ck(&[3.0, 4.0]);
        let proxy = ProxyEvaluator::new(&base, &adapted);
        assert_eq!(proxy.reference_distance(), 5.0);
        let at_adapted = proxy.evaluate(&adapted, None).unwrap();
        assert_eq!((at_adapted.domain_score, at_adapted.general_score), (1.0, 0.0));
        let at_base = proxy.evaluate(&base, None).unwrap();
        assert_eq!((at_base.domain_score, at_base.general_score), (0.0, 1.0));
        let mid = proxy.evaluate(&ck(&[1.5, 2.0]), None).unwrap();
        assert!((mid.domain_score - 0.5).abs() < 1e-12);
        assert!((mid.general_score - 0.5).abs() < 1e-12);
        let same = ProxyEvaluator::new(&base, &base).evaluate(&base, None).unwrap();
        assert_eq!((same.domain_score, same.general_score), (1.0, 1.0));
    }

    #[test]
    fn score_parsing() {
        let s = parse_scores(" {\"domain_score\": 0.25, \"general_score\": 1}\n").unwrap();
        assert_eq!((s.domain_score, s.general_score), (0.25, 1.0));
        assert!(matches!(parse_scores("nope"), Err(EvalError::Malformed(_))));
        assert!(matches!(
            parse_scores("{\"domain_score\": 2, \"general_score\": 0}"),
            Err(EvalError::Malformed(_))
        ));
        assert!(matches!(CommandEvaluator::new("  ", DEFAULT_TIMEOUT), Err(EvalError::EmptyCommand)));
    }

    #[cfg(unix)]
    fn script(dir: &Path, name: &str, body: &str) -> String {
        use std::os::unix::fs::PermissionsExt;
        let path = dir.join(name);
        std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        path.display().to_string()
    }

    #[cfg(unix)]
    #[test]
    fn command_outcomes() {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("model.safetensors");
        let ok = script(
            dir.path(),
            "ok.sh",
            r#"[ "$1" = "--model" ] || exit 3; echo '{"domain_score": 0.5, "general_score": 0.75}'"#,
        );
        let s = CommandEvaluator::new(&ok, DEFAULT_TIMEOUT).unwrap().run(&model).unwrap();
        assert_eq!((s.domain_score, s.general_score), (0.5, 0.75));

        let fail = script(dir.path(), "fail.sh", "echo boom >&2; exit 1");
        match CommandEvaluator::new(&fail, DEFAULT_TIMEOUT).unwrap().run(&model) {
            Err(EvalError::Failed { stderr, .. }) => assert_eq!(stderr, "boom"),
            other => panic!("{other:?}"),
        }
        let garbage = script(dir.path(), "garbage.sh", "echo not-json");
        assert!(matches!(
            CommandEvaluator::new(&garbage, DEFAULT_TIMEOUT).unwrap().run(&model),
            Err(EvalError::Malformed(_))
        ));
        let slow = script(dir.path(), "slow.sh", "exec sleep 5");
        assert!(matches!(
            CommandEvaluator::new(&slow, Duration::from_millis(100)).unwrap().run(&model),
            Err(EvalError::Timeout(_))
        ));
        let missing = CommandEvaluator::new("/no/such/binary", DEFAULT_TIMEOUT).unwrap();
        assert!(matches!(missing.run(&model), Err(EvalError::Spawn { .. })));
    }
}
