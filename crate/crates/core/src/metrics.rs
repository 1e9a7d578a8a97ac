//! Per-step loss log and evaluation rows, stored as CSV.

use std::fs;
use std::path::Path;

use crate::causalhead::{total_loss, LossTerm, LossWeights};
use crate::error::{Error, Result};

pub const STEP_HEADER: &str = "step,L_I,L_C,L_IC,L_IR,L_IY,L_Y,total";

#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub terms: [f64; 6],
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub split: String,
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub weights: LossWeights,
    pub classes: Vec<String>,
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        msg: msg.into(),
    }
}

impl MetricsLog {
    pub fn new(weights: LossWeights, classes: Vec<String>) -> Self {
        Self {
            weights,
            classes,
            steps: Vec::new(),
            evals: Vec::new(),
        }
    }

    /// Appends a row; the total is recomputed from the terms.
    pub fn push_step(&mut self, step: u64, terms: [f64; 6]) -> Result<f64> {
        let total = total_loss(terms, &self.weights)?;
        self.steps.push(StepRow { step, terms, total });
        Ok(total)
    }

    pub fn term_mean(&self, term: LossTerm, steps: std::ops::RangeInclusive<u64>) -> f64 {
        let i = LossTerm::ALL.iter().position(|&t| t == term).unwrap_or(0);
        let vals: Vec<f64> = self.steps.iter().filter(|r| steps.contains(&r.step)).map(|r| r.terms[i]).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from(STEP_HEADER);
        s.push('\n');
        for r in &self.steps {
            s.push_str(&r.step.to_string());
            for t in r.terms {
                s.push_str(&format!(",{t}"));
            }
            s.push_str(&format!(",{}\n", r.total));
        }
        s
    }

    pub fn eval_header(&self) -> String {
        let mut h = String::from("step,split");
        for c in &self.classes {
            h.push_str(&format!(",auc_{c}"));
        }
        h.push_str(",mean_auc");
        h
    }

    pub fn evals_csv(&self) -> String {
        let mut s = self.eval_header();
        s.push('\n');
        for r in &self.evals {
            s.push_str(&format!("{},{}", r.step, r.split));
            for a in &r.per_class {
                match a {
                    Some(v) => s.push_str(&format!(",{v}")),
                    None => s.push_str(",skipped"),
                }
            }
            s.push_str(&format!(",{}\n", r.mean));
        }
        s
    }

    /// Writes `metrics.csv` and `eval.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, text) in [("metrics.csv", self.steps_csv()), ("eval.csv", self.evals_csv())] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Reads step rows back and re-checks that every total is the weighted sum
    /// of its terms.
    pub fn read_steps(path: &Path, weights: LossWeights) -> Result<Vec<StepRow>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(STEP_HEADER) {
            return Err(parse_err(path, 1, "unexpected header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let no = i + 2;
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(parse_err(path, no, format!("expected 8 columns, found {}", cols.len())));
            }
            let step = cols[0].parse().map_err(|_| parse_err(path, no, "bad step"))?;
            let mut vals = [0.0; 7];
            for (v, c) in vals.iter_mut().zip(&cols[1..]) {
                *v = c.parse().map_err(|_| parse_err(path, no, format!("bad number {c:?}")))?;
            }
            let terms: [f64; 6] = vals[..6].try_into().expect("six terms");
            let expect = total_loss(terms, &weights)?;
            if expect != vals[6] {
                return Err(parse_err(path, no, format!("total {} is not the weighted sum {expect}", vals[6])));
            }
            rows.push(StepRow {
                step,
                terms,
                total: vals[6],
            });
        }
        Ok(rows)
    }
}
