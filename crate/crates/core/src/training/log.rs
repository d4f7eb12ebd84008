use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Columns of the training log. `kind` is `step` or `eval`; columns that do not
/// apply to a row are left empty.
pub const TRAIN_LOG_HEADER: &str = "kind,step,lr,tolerance,total,frame,stop,guided,classifier,grad_norm,val_loss,val_cer";

/// Columns of the tab-separated wall-clock side file. Timing is kept out of
/// the CSV log so that identical runs produce identical CSV files.
pub const TIMING_HEADER: &str = "step\twall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Number of updates applied before this one.
    pub step: u64,
    pub lr: f64,
    pub tolerance: f64,
    pub total: f64,
    pub frame: f64,
    pub stop: f64,
    pub guided: f64,
    pub classifier: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    /// Updates applied when the validation ran.
    pub step: u64,
    pub val_loss: f64,
    pub val_cer: Option<f64>,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// `(step, milliseconds)` per update.
    pub wall_ms: Vec<(u64, f64)>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub fn push_step(&mut self, r: StepRecord, wall_ms: f64) {
        if let Some(last) = self.steps.last() {
            assert!(r.step > last.step, "step records must be appended in order");
        }
        self.wall_ms.push((r.step, wall_ms));
        self.steps.push(r);
    }

    pub fn push_eval(&mut self, r: EvalRecord) {
        if let Some(last) = self.evals.last() {
            assert!(r.step > last.step, "eval records must be appended in order");
        }
        self.evals.push(r);
    }

    /// Rows merged in step order, each eval after the step records it follows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            while let Some(e) = evals.next_if(|e| e.step <= s.step) {
                write_eval(&mut out, e);
            }
            writeln!(
                out,
                "step,{},{},{},{},{},{},{},{},{},,",
                s.step,
                s.lr,
                s.tolerance,
                s.total,
                s.frame,
                s.stop,
                s.guided,
                opt(s.classifier),
                s.grad_norm
            )
            .expect("string write");
        }
        for e in evals {
            write_eval(&mut out, e);
        }
        out
    }

    /// The log truncated to its first `n` step rows (and the evals among them).
    pub fn head(&self, n: usize) -> TrainLog {
        let steps: Vec<StepRecord> = self.steps.iter().take(n).cloned().collect();
        let limit = steps.last().map_or(0, |s| s.step + 1);
        TrainLog {
            evals: self.evals.iter().filter(|e| e.step <= limit).cloned().collect(),
            wall_ms: self.wall_ms.iter().take(n).copied().collect(),
            steps,
        }
    }

    pub fn timing_tsv(&self) -> String {
        let mut out = String::from(TIMING_HEADER);
        out.push('\n');
        for (step, ms) in &self.wall_ms {
            writeln!(out, "{step}\t{ms:.3}").expect("string write");
        }
        out
    }

    pub fn write(&self, log_path: &Path, timing_path: &Path) -> Result<()> {
        std::fs::write(log_path, self.to_csv()).map_err(|e| Error::file(log_path, e))?;
        std::fs::write(timing_path, self.timing_tsv()).map_err(|e| Error::file(timing_path, e))
    }

    /// Mean total loss over the step records with `lo <= step < hi`.
    pub fn mean_total(&self, lo: u64, hi: u64) -> Option<f64> {
        let xs: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| (lo..hi).contains(&s.step))
            .map(|s| s.total)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn write_eval(out: &mut String, e: &EvalRecord) {
    writeln!(out, "eval,{},,,,,,,,,{},{}", e.step, e.val_loss, opt(e.val_cer)).expect("string write");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> StepRecord {
        StepRecord {
            step,
            lr: 1e-3,
            tolerance: 0.2,
            total: 1.5,
            frame: 1.0,
            stop: 0.25,
            guided: 0.25,
            classifier: None,
            grad_norm: 3.0,
        }
    }

    #[test]
    fn csv_columns_line_up() {
        let mut log = TrainLog::default();
        log.push_step(rec(0), 1.0);
        log.push_step(rec(1), 1.0);
        log.push_eval(EvalRecord { step: 2, val_loss: 0.5, val_cer: Some(0.1) });
        let csv = log.to_csv();
        let cols = TRAIN_LOG_HEADER.split(',').count();
        for line in csv.lines() {
            assert_eq!(line.split(',').count(), cols, "{line}");
        }
        assert!(csv.ends_with("eval,2,,,,,,,,,0.5,0.1\n"));
    }

    #[test]
    #[should_panic]
    fn steps_are_append_only() {
        let mut log = TrainLog::default();
        log.push_step(rec(3), 1.0);
        log.push_step(rec(3), 1.0);
    }
}
