//! Multiple-instance training objectives on clip score vectors.
//!
//! The DMIL term averages binary cross-entropy over the `k = max(1, ⌊t/α⌋)`
//! highest clip scores of a video. The center term is the population
//! variance of a normal video's scores and vanishes for anomalous videos.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bce, population_variance, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// k-max divisor.
    pub alpha: usize,
    /// DMIL weight.
    pub theta: f64,
    /// Center-loss weight.
    pub lambda: f64,
    /// Clamp for log arguments.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 16,
            theta: 10.0,
            lambda: 1.0,
            epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 1 {
            return Err(Error::Parameter("alpha must be at least 1".into()));
        }
        if !(self.theta >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Parameter(format!(
                "loss weights must be non-negative (theta {}, lambda {})",
                self.theta, self.lambda
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Parameter(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dmil: f64,
    pub center: f64,
    pub total: f64,
    pub k_used: usize,
}

pub fn k_for(t: usize, alpha: usize) -> usize {
    (t / alpha.max(1)).max(1)
}

fn check_label(y: u8) -> Result<f64> {
    match y {
        0 => Ok(0.0),
        1 => Ok(1.0),
        other => Err(Error::Contract(format!("label must be 0 or 1, got {other}"))),
    }
}

fn check_scores(s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Contract("empty score vector".into()));
    }
    if let Some((j, v)) = s.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("score {v} at clip {j} outside [0, 1]")));
    }
    Ok(())
}

/// Clip indices of the k largest scores, highest first; equal scores keep
/// clip order.
pub fn kmax_indices(s: &[f64], alpha: usize) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Err(Error::Contract("k-max selection on an empty score vector".into()));
    }
    if let Some(j) = s.iter().position(|v| v.is_nan()) {
        return Err(Error::Contract(format!("NaN score at clip {j}")));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    order.truncate(k_for(s.len(), alpha));
    Ok(order)
}

pub fn kmax_select(s: &[f64], alpha: usize) -> Result<Vec<f64>> {
    Ok(kmax_indices(s, alpha)?.into_iter().map(|j| s[j]).collect())
}

pub fn dmil_loss(s: &[f64], y: u8, alpha: usize, epsilon: f64) -> Result<f64> {
    let target = check_label(y)?;
    check_scores(s)?;
    let picked = kmax_indices(s, alpha)?;
    let total: f64 = picked.iter().map(|&j| bce(s[j], target, epsilon)).sum();
    Ok(total / picked.len() as f64)
}

pub fn center_loss(s: &[f64], y: u8) -> Result<f64> {
    check_label(y)?;
    check_scores(s)?;
    Ok(if y == 1 { 0.0 } else { population_variance(s) })
}

pub fn total_loss(s: &[f64], y: u8, config: &LossConfig) -> Result<LossBreakdown> {
    config.validate()?;
    let dmil = dmil_loss(s, y, config.alpha, config.epsilon)?;
    let center = center_loss(s, y)?;
    Ok(LossBreakdown {
        dmil,
        center,
        total: config.theta * dmil + config.lambda * center,
        k_used: k_for(s.len(), config.alpha),
    })
}

/// Builds the weighted objective on a tape from a length-t score variable.
/// Returns the scalar root together with its breakdown.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    scores: Var,
    y: u8,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    let target = check_label(y)?;
    let s = tape.value(scores).data().to_vec();
    check_scores(&s)?;

    let picked = kmax_indices(&s, config.alpha)?;
    let top = tape.gather(scores, &picked)?;
    let ce = tape.bce(top, target, config.epsilon);
    let dmil = tape.mean(ce);
    let weighted = tape.scale(dmil, config.theta);

    let dmil_value = tape.value(dmil).data()[0];
    let (root, center_value) = if y == 0 {
        let var = tape.variance(scores);
        let center_value = tape.value(var).data()[0];
        let weighted_center = tape.scale(var, config.lambda);
        (tape.add(weighted, weighted_center)?, center_value)
    } else {
        let zero = tape.scale(dmil, 0.0);
        (tape.add(weighted, zero)?, 0.0)
    };
    let breakdown = LossBreakdown {
        dmil: dmil_value,
        center: center_value,
        total: tape.value(root).data()[0],
        k_used: picked.len(),
    };
    Ok((root, breakdown))
}
