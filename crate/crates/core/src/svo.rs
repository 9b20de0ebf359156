//! Social Value Orientation from longitudinal-displacement utilities.
//!
//! A vehicle's utility over a window is how far it advanced along the road.
//! Its SVO angle compares the mean utility of its neighbors with its own:
//! 0° is purely egoistic, 45° prosocial, 90° altruistic. Only the first
//! quadrant of the ring is used; everything else is clamped into it.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default utility window in seconds (10 frames at 0.1 s).
pub const DEFAULT_WINDOW_S: f64 = 1.0;

/// Two timestamps closer than this are the same sample.
const TIME_EPS: f64 = 1e-6;

/// Displacement utilities of a subject vehicle and its neighbors over one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityDelta {
    pub ego_delta: f64,
    pub others_deltas: Vec<f64>,
}

impl UtilityDelta {
    pub fn angle(&self) -> Result<SvoAngle> {
        let mean = neighbor_mean_delta(&self.others_deltas)?;
        Ok(svo_angle(self.ego_delta, mean))
    }
}

/// An SVO angle in degrees, always within `[0, 90]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SvoAngle(f64);

impl SvoAngle {
    pub const EGOISTIC: SvoAngle = SvoAngle(0.0);
    pub const PROSOCIAL: SvoAngle = SvoAngle(45.0);
    pub const ALTRUISTIC: SvoAngle = SvoAngle(90.0);

    pub fn degrees(self) -> f64 {
        self.0
    }
}

/// One timestep of utilities together with the resulting angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvoSample {
    pub time: f64,
    pub deltas: UtilityDelta,
    pub angle: SvoAngle,
}

/// `position(t) − position(t − window)` over a time-sorted `(time, position)` series.
pub fn displacement_delta(traj: &[(f64, f64)], t: f64, window: f64) -> Result<f64> {
    let now = position_at(traj, t).ok_or(Error::InsufficientHistory { needed: t })?;
    let then = position_at(traj, t - window)
        .ok_or(Error::InsufficientHistory { needed: t - window })?;
    Ok(now - then)
}

fn position_at(traj: &[(f64, f64)], t: f64) -> Option<f64> {
    let idx = traj.partition_point(|&(ts, _)| ts < t - TIME_EPS);
    traj.get(idx)
        .filter(|&&(ts, _)| (ts - t).abs() <= TIME_EPS)
        .map(|&(_, x)| x)
}

/// Arithmetic mean of the neighbors' utilities.
pub fn neighbor_mean_delta(others_deltas: &[f64]) -> Result<f64> {
    if others_deltas.is_empty() {
        return Err(Error::NoNeighbors);
    }
    Ok(others_deltas.iter().sum::<f64>() / others_deltas.len() as f64)
}

/// `atan2(neighbor_mean, ego_delta)` in degrees, clamped to `[0, 90]`.
///
/// When both vehicles are stationary the angle is the neutral 45°.
pub fn svo_angle(ego_delta: f64, neighbor_mean: f64) -> SvoAngle {
    if ego_delta == 0.0 && neighbor_mean == 0.0 {
        return SvoAngle::PROSOCIAL;
    }
    let deg = neighbor_mean.atan2(ego_delta).to_degrees();
    if deg.is_nan() {
        return SvoAngle::PROSOCIAL;
    }
    SvoAngle(deg.clamp(0.0, 90.0))
}

/// SVO of `subject` with `neighbor` as its only neighbor, both sampled on the
/// same clock.
pub fn pairwise_svo(
    subject: &[(f64, f64)],
    neighbor: &[(f64, f64)],
    t: f64,
    window: f64,
) -> Result<SvoAngle> {
    let ego = displacement_delta(subject, t, window)?;
    let other = displacement_delta(neighbor, t, window)?;
    Ok(svo_angle(ego, other))
}
