//! Background-vehicle behaviour: IDM car-following and MOBIL lane changes.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Maximum acceleration, m/s².
    pub a_max: f64,
    /// Comfortable deceleration, m/s² (positive).
    pub b: f64,
    /// Jam distance, m.
    pub s0: f64,
    /// Time headway, s.
    #[serde(rename = "T")]
    pub time_headway: f64,
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 30.0,
            a_max: 3.0,
            b: 3.0,
            s0: 2.0,
            time_headway: 1.5,
            delta: 4.0,
        }
    }
}

impl IdmParams {
    pub fn with_v0(self, v0: f64) -> Self {
        Self { v0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.v0, self.a_max, self.b, self.s0, self.time_headway];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) || !(self.delta >= 1.0) {
            return Err(Error::Config(format!("invalid IDM parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilParams {
    pub politeness: f64,
    /// Switching threshold, m/s².
    pub a_thr: f64,
    /// Safe braking limit for the new follower, m/s² (positive).
    pub b_safe: f64,
}

impl Default for MobilParams {
    fn default() -> Self {
        Self {
            politeness: 0.3,
            a_thr: 0.2,
            b_safe: 4.0,
        }
    }
}

impl MobilParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_safe > 0.0) || !(0.0..=1.0).contains(&self.politeness) {
            return Err(Error::Config(format!("invalid MOBIL parameters {self:?}")));
        }
        Ok(())
    }
}

/// Desired dynamical gap `s* = s0 + v·T + v·Δv / (2√(a_max·b))`, never below `s0`.
///
/// `dv` is the approach rate `v − v_leader`.
pub fn idm_desired_gap(v: f64, dv: f64, params: &IdmParams) -> f64 {
    let s = params.s0
        + v * params.time_headway
        + v * dv / (2.0 * (params.a_max * params.b).sqrt());
    s.max(params.s0)
}

/// IDM acceleration, clamped to `[−2b, a_max]`.
///
/// A missing leader is `gap = +∞`. A non-positive gap returns the emergency
/// value `−2b`.
pub fn idm_accel(v: f64, gap: f64, dv: f64, params: &IdmParams) -> f64 {
    let floor = -2.0 * params.b;
    if gap <= 0.0 {
        return floor;
    }
    let free = 1.0 - (v.max(0.0) / params.v0).powf(params.delta);
    let interaction = if gap.is_infinite() {
        0.0
    } else {
        (idm_desired_gap(v, dv, params) / gap).powi(2)
    };
    (params.a_max * (free - interaction)).clamp(floor, params.a_max)
}

/// Accelerations before (`a_*`) and after (`*_new`) a candidate lane change.
///
/// `c` is the changing vehicle, `n` the new follower in the target lane and
/// `o` the old follower in the current lane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MobilContext {
    pub c_new: f64,
    pub c: f64,
    pub n_new: f64,
    pub n: f64,
    pub o_new: f64,
    pub o: f64,
}

/// Safety criterion `ã_n > −b_safe` and incentive criterion
/// `ã_c − a_c > p·(a_n + ã_o − a_o) + a_thr`.
pub fn mobil_accept(ctx: &MobilContext, params: &MobilParams) -> bool {
    let safe = ctx.n_new > -params.b_safe;
    let incentive =
        ctx.c_new - ctx.c > params.politeness * (ctx.n + ctx.o_new - ctx.o) + params.a_thr;
    safe && incentive
}

/// A single-lane vehicle for closed-loop simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneVehicle {
    /// Front-bumper-independent center position, m.
    pub x: f64,
    pub v: f64,
    pub length: f64,
}

/// Bumper-to-bumper gap from `follower` to `leader`.
pub fn bumper_gap(follower: &LaneVehicle, leader: &LaneVehicle) -> f64 {
    leader.x - follower.x - 0.5 * (leader.length + follower.length)
}

/// IDM acceleration of `follower` behind an optional `leader`.
pub fn follow_accel(follower: &LaneVehicle, leader: Option<&LaneVehicle>, params: &IdmParams) -> f64 {
    match leader {
        Some(l) => idm_accel(follower.v, bumper_gap(follower, l), follower.v - l.v, params),
        None => idm_accel(follower.v, f64::INFINITY, 0.0, params),
    }
}

/// IDM-driven followers behind a constant-speed leader, integrated with
/// semi-implicit Euler. `vehicles[0]` is the leader.
#[derive(Debug, Clone)]
pub struct Platoon {
    pub vehicles: Vec<LaneVehicle>,
    pub params: IdmParams,
}

impl Platoon {
    pub fn step(&mut self, dt: f64) {
        let accels: Vec<f64> = (0..self.vehicles.len())
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    follow_accel(&self.vehicles[i], Some(&self.vehicles[i - 1]), &self.params)
                }
            })
            .collect();
        for (veh, a) in self.vehicles.iter_mut().zip(accels) {
            veh.v = (veh.v + a * dt).max(0.0);
            veh.x += veh.v * dt;
        }
    }

    pub fn gaps(&self) -> Vec<f64> {
        self.vehicles
            .windows(2)
            .map(|w| bumper_gap(&w[1], &w[0]))
            .collect()
    }
}

/// Evaluates MOBIL for `changer` moving between two lanes, given the
/// leaders/followers around it in both lanes.
#[derive(Debug, Clone, Copy)]
pub struct LaneChangeNeighbors<'a> {
    pub current_leader: Option<&'a LaneVehicle>,
    pub current_follower: Option<&'a LaneVehicle>,
    pub target_leader: Option<&'a LaneVehicle>,
    pub target_follower: Option<&'a LaneVehicle>,
}

pub fn mobil_context(
    changer: &LaneVehicle,
    around: &LaneChangeNeighbors<'_>,
    params: &IdmParams,
) -> MobilContext {
    let c = follow_accel(changer, around.current_leader, params);
    let c_new = follow_accel(changer, around.target_leader, params);
    let (n, n_new) = match around.target_follower {
        Some(f) => (
            follow_accel(f, around.target_leader, params),
            follow_accel(f, Some(changer), params),
        ),
        None => (0.0, 0.0),
    };
    let (o, o_new) = match around.current_follower {
        Some(f) => (
            follow_accel(f, Some(changer), params),
            follow_accel(f, around.current_leader, params),
        ),
        None => (0.0, 0.0),
    };
    MobilContext {
        c_new,
        c,
        n_new,
        n,
        o_new,
        o,
    }
}
