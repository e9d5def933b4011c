//! Evaluation over a split: micro-averaged pixel metrics plus image-level accuracy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cam::ChangeMask;
use crate::data::{stack_pairs, ImagePair};
use crate::error::{Error, Result};
use crate::metrics::{accumulate, finalize, ConfusionCounts, Metrics};
use crate::model::Model;

const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    /// Thresholded multi-scale CAM.
    Initial,
    /// Decoder prediction.
    Final,
}

impl FromStr for Which {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial" => Ok(Which::Initial),
            "final" => Ok(Which::Final),
            _ => Err(Error::Config(format!("expected initial or final, got `{s}`"))),
        }
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::Initial => "initial",
            Which::Final => "final",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub which: Which,
    pub num_pairs: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub image_accuracy: f64,
    pub counts: ConfusionCounts,
}

/// Consecutive runs of equally sized pairs, at most `EVAL_BATCH` long.
fn chunks(pairs: &[ImagePair]) -> Vec<&[ImagePair]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=pairs.len() {
        if i == pairs.len() || i - start == EVAL_BATCH || pairs[i].dims() != pairs[start].dims() {
            out.push(&pairs[start..i]);
            start = i;
        }
    }
    out
}

/// Confusion counts of given predictions against the pairs' ground truth.
pub fn score_masks(preds: &[ChangeMask], pairs: &[ImagePair]) -> Result<ConfusionCounts> {
    if preds.len() != pairs.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} pairs", preds.len(), pairs.len())));
    }
    preds.iter().zip(pairs).try_fold(ConfusionCounts::default(), |c, (p, pair)| {
        let gt = pair.gt.as_ref().ok_or_else(|| Error::MissingGt(pair.id.clone()))?;
        accumulate(p, gt, c)
    })
}

pub fn evaluate(model: &Model, pairs: &[ImagePair], which: Which) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCounts);
    }
    if let Some(p) = pairs.iter().find(|p| p.gt.is_none()) {
        return Err(Error::MissingGt(p.id.clone()));
    }
    if which == Which::Final && !model.has_decoder() {
        return Err(Error::Config(format!("mode {} has no decoder output", model.config.mode)));
    }
    let mut preds = Vec::with_capacity(pairs.len());
    let mut correct = 0usize;
    for chunk in chunks(pairs) {
        let (pre, post) = stack_pairs(chunk);
        let p = model.predict(&pre, &post)?;
        for (logit, pair) in p.p_cls.iter().zip(chunk) {
            if (*logit >= 0.0) == pair.y_cls.is_changed() {
                correct += 1;
            }
        }
        match which {
            Which::Initial => preds.extend(p.pred_init),
            Which::Final => preds.extend(p.pred_final.expect("decoder present")),
        }
    }
    let counts = score_masks(&preds, pairs)?;
    Ok(EvalReport {
        which,
        num_pairs: pairs.len(),
        metrics: finalize(&counts)?,
        image_accuracy: correct as f64 / pairs.len() as f64,
        counts,
    })
}
