//! Total training loss for the four ablation modes.
//!
//! The pixel term only joins the loss from `dp_start` on; before that it is
//! left out of the graph entirely, so decoder parameters receive no gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON_CP: f64 = 0.1;
pub const DEFAULT_DP_START: u64 = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Transwcd,
    TranswcdL,
    TranswcdD,
    TranswcdDl,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Transwcd, Mode::TranswcdD, Mode::TranswcdL, Mode::TranswcdDl];

    pub fn uses_dp(self) -> bool {
        matches!(self, Mode::TranswcdD | Mode::TranswcdDl)
    }

    pub fn uses_lg(self) -> bool {
        matches!(self, Mode::TranswcdL | Mode::TranswcdDl)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Transwcd => "transwcd",
            Mode::TranswcdL => "transwcd_l",
            Mode::TranswcdD => "transwcd_d",
            Mode::TranswcdDl => "transwcd_dl",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model.mode `{s}`")))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_cc: f64,
    pub l_cp: Option<f64>,
    pub l_lg: Option<f64>,
    pub epsilon_cp: f64,
    pub iteration: u64,
    pub dp_start: u64,
}

impl LossParts {
    pub fn new(l_cc: f64) -> Self {
        Self {
            l_cc,
            l_cp: None,
            l_lg: None,
            epsilon_cp: DEFAULT_EPSILON_CP,
            iteration: 0,
            dp_start: DEFAULT_DP_START,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.epsilon_cp >= 0.0) {
            return Err(Error::Config(format!("epsilon_cp {} must be >= 0", self.epsilon_cp)));
        }
        let finite = |v: Option<f64>| v.is_none_or(f64::is_finite);
        if !self.l_cc.is_finite() || !finite(self.l_cp) || !finite(self.l_lg) {
            return Err(Error::NonFinite {
                iteration: self.iteration,
                detail: format!("{self:?}"),
            });
        }
        Ok(())
    }
}

/// Weight applied to the pixel term at `iteration`.
pub fn cp_weight(epsilon_cp: f64, iteration: u64, dp_start: u64) -> f64 {
    if iteration >= dp_start {
        epsilon_cp
    } else {
        0.0
    }
}

fn require(part: Option<f64>, name: &str, mode: Mode) -> Result<f64> {
    part.ok_or_else(|| Error::Config(format!("mode {mode} needs loss part {name}")))
}

pub fn total_loss(parts: &LossParts, mode: Mode) -> Result<f64> {
    parts.check()?;
    let mut total = parts.l_cc;
    if mode.uses_dp() {
        let l_cp = require(parts.l_cp, "l_cp", mode)?;
        let w = cp_weight(parts.epsilon_cp, parts.iteration, parts.dp_start);
        if w != 0.0 {
            total += w * l_cp;
        }
    }
    if mode.uses_lg() {
        total += require(parts.l_lg, "l_lg", mode)?;
    }
    Ok(total)
}

/// Graph terms of one step. `l_cp` is `None` when the decoder was not run or
/// the gate is still closed.
pub struct LossVars<'t> {
    pub l_cc: Var<'t>,
    pub l_cp: Option<Var<'t>>,
    pub l_lg: Option<Var<'t>>,
}

/// Compose the loss on the tape, mirroring [`total_loss`].
pub fn compose<'t>(
    vars: &LossVars<'t>,
    mode: Mode,
    epsilon_cp: f64,
    iteration: u64,
    dp_start: u64,
) -> Result<Var<'t>> {
    let mut total = vars.l_cc;
    let w = cp_weight(epsilon_cp, iteration, dp_start);
    if mode.uses_dp() && w != 0.0 {
        let l_cp = vars
            .l_cp
            .ok_or_else(|| Error::Config(format!("mode {mode} needs loss part l_cp")))?;
        total = total.add(l_cp.scale(w));
    }
    if mode.uses_lg() {
        let l_lg = vars
            .l_lg
            .ok_or_else(|| Error::Config(format!("mode {mode} needs loss part l_lg")))?;
        total = total.add(l_lg);
    }
    Ok(total)
}
