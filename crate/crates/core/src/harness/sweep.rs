//! Penalty-weight sweep: one full train + eval per `alpha` under a shared seed.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{evaluate, Which};
use super::train::{LogLine, Trainer};
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::lg::check_alpha;
use crate::objective::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub oa: f64,
    pub iou: f64,
}

pub const CSV_HEADER: &str = "alpha,f1,precision,recall,oa,iou";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.alpha, self.f1, self.precision, self.recall, self.oa, self.iou
        )
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Same mode with the label-gated penalty removed.
pub fn without_penalty(mode: Mode) -> Mode {
    match mode {
        Mode::TranswcdDl | Mode::TranswcdD => Mode::TranswcdD,
        Mode::TranswcdL | Mode::Transwcd => Mode::Transwcd,
    }
}

/// Train and evaluate once; returns the metrics row for `alpha`.
pub fn train_and_score(run: &RunConfig, alpha: f64, train: &[ImagePair], eval: &[ImagePair]) -> Result<SweepRow> {
    let mut trainer = Trainer::new(run, train)?;
    trainer.run(None, &mut |_: &LogLine| {})?;
    let which = if trainer.model.has_decoder() { Which::Final } else { Which::Initial };
    let m = evaluate(&trainer.model, eval, which)?.metrics;
    Ok(SweepRow {
        alpha,
        f1: m.f1,
        precision: m.precision,
        recall: m.recall,
        oa: m.oa,
        iou: m.iou,
    })
}

/// Rows in ascending `alpha`. All values are validated before any training starts.
pub fn sweep_alpha(run: &RunConfig, alphas: &[f64], train: &[ImagePair], eval: &[ImagePair]) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::Config("no alpha values given".into()));
    }
    if !run.model.mode.uses_lg() {
        return Err(Error::Config(format!("mode {} has no penalty to sweep", run.model.mode)));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|alpha| {
            let mut r = run.clone();
            r.model.lg.alpha = alpha;
            train_and_score(&r, alpha, train, eval)
        })
        .collect()
}
