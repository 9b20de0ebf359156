//! Three-lane highway lane-change MDP.
//!
//! The AV starts in the middle lane behind a slower forward vehicle (FV). A
//! target vehicle (TV) approaches from behind in the left-adjacent lane and
//! either yields to an AV that starts moving over, or ignores it and passes.
//! The AV is driven by five discrete actions; the TV by IDM; the FV holds a
//! constant speed.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::intent_bn::{EvidenceVector, Intent, IntentModel};
use crate::rng::{self, SimRng};
use crate::svo;
use crate::traffic::{self, IdmParams, LaneChangeNeighbors, LaneVehicle, MobilParams};
use crate::{Error, Result};

pub const VEHICLE_LENGTH: f64 = 5.0;
pub const VEHICLE_WIDTH: f64 = 2.0;
pub const MAX_SPEED: f64 = 45.0;
/// Overlaps thinner than this are numerical contact, not collision.
pub const CONTACT_EPS: f64 = 1e-9;
pub const SCENARIO_SCHEMA: &str = "svo-lc/scenario@1";

/// Observation normalization.
pub const NORM_VX: f64 = 45.0;
pub const NORM_VY: f64 = 5.0;
/// Longitudinal range over which other vehicles' relative position is resolved.
pub const NORM_REL_X: f64 = 100.0;

pub const OBS_ROWS: usize = 3;
pub const OBS_COLS: usize = 4;
pub const PLAIN_OBS_LEN: usize = OBS_ROWS * OBS_COLS;
pub const AUGMENTED_OBS_LEN: usize = PLAIN_OBS_LEN + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    LaneLeft = 0,
    LaneRight = 1,
    Idle = 2,
    Faster = 3,
    Slower = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::LaneLeft,
        Action::LaneRight,
        Action::Idle,
        Action::Faster,
        Action::Slower,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub lane: usize,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    fn new(x: f64, y: f64, vx: f64, lane: usize) -> Self {
        Self {
            x,
            y,
            vx,
            vy: 0.0,
            ax: 0.0,
            lane,
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
        }
    }

    fn as_lane_vehicle(&self) -> LaneVehicle {
        LaneVehicle {
            x: self.x,
            v: self.vx,
            length: self.length,
        }
    }
}

/// Axis-aligned rectangle overlap; touching edges do not count.
pub fn collision_check(a: &VehicleState, b: &VehicleState) -> bool {
    let dx = (a.x - b.x).abs();
    let dy = (a.y - b.y).abs();
    dx < 0.5 * (a.length + b.length) - CONTACT_EPS && dy < 0.5 * (a.width + b.width) - CONTACT_EPS
}

/// Step reward `r_or · (r_c + r_rl + r_e)` with unit weights.
pub fn total_reward(
    collided: bool,
    on_road: bool,
    lane_index: usize,
    num_lanes: usize,
    v_forward: f64,
) -> f64 {
    let r_or = if on_road { 1.5 } else { 0.0 };
    let r_c = if collided { -1.0 } else { 0.0 };
    let r_rl = lane_index as f64 / (num_lanes.saturating_sub(1).max(1)) as f64;
    let r_e = ((v_forward - 20.0) / (30.0 - 20.0)).clamp(0.0, 1.0);
    r_or * (r_c + r_rl + r_e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnSpec {
    pub x: f64,
    pub lane: usize,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvSpawn {
    pub x: f64,
    pub lane: usize,
    pub yield_speed: f64,
    pub pass_speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TvMode {
    Yield,
    Pass,
    Random,
}

/// Uniform `±amplitude` perturbations of the spawn state, drawn per episode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SpawnJitter {
    pub tv_x: f64,
    pub tv_speed: f64,
    pub fv_x: f64,
    pub fv_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvControl {
    pub min_speed: f64,
    pub max_speed: f64,
    pub speed_step: f64,
    /// Proportional speed-tracking gain, 1/s.
    pub speed_gain: f64,
    pub accel_limit: f64,
    pub lateral_speed: f64,
    pub snap: f64,
}

impl Default for AvControl {
    fn default() -> Self {
        Self {
            min_speed: 20.0,
            max_speed: 30.0,
            speed_step: 5.0,
            speed_gain: 0.5,
            accel_limit: 5.0,
            lateral_speed: 2.0,
            snap: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub schema: String,
    pub num_lanes: usize,
    pub lane_width: f64,
    pub road_length: f64,
    pub av_init: SpawnSpec,
    pub fv_init: SpawnSpec,
    pub tv_init: TvSpawn,
    pub tv_mode: TvMode,
    pub seed: u64,
    pub sim_dt: f64,
    /// Simulation steps per policy decision.
    pub policy_period: u32,
    /// Policy steps per episode.
    pub horizon: u32,
    /// Lane the AV is expected to reach; defaults to the TV's lane.
    pub target_lane: Option<usize>,
    pub jitter: SpawnJitter,
    pub tv_idm: IdmParams,
    /// Desired-speed increment of a passing TV over its spawn speed.
    pub pass_speed_gain: f64,
    /// AV lateral deviation toward the TV lane that makes a yielding TV react.
    pub yield_trigger: f64,
    /// Lets the TV re-assign lanes through MOBIL at each decision step.
    pub background_lane_changes: bool,
    pub mobil: MobilParams,
    pub av_control: AvControl,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            schema: SCENARIO_SCHEMA.to_string(),
            num_lanes: 3,
            lane_width: 4.0,
            road_length: 2000.0,
            av_init: SpawnSpec {
                x: 80.0,
                lane: 1,
                speed: 30.0,
            },
            fv_init: SpawnSpec {
                x: 130.0,
                lane: 1,
                speed: 25.0,
            },
            tv_init: TvSpawn {
                x: 70.0,
                lane: 2,
                yield_speed: 42.0,
                pass_speed: 40.0,
            },
            tv_mode: TvMode::Random,
            seed: 0,
            sim_dt: 0.1,
            policy_period: 10,
            horizon: 40,
            target_lane: None,
            jitter: SpawnJitter::default(),
            tv_idm: IdmParams::default(),
            pass_speed_gain: 2.0,
            yield_trigger: 0.5,
            background_lane_changes: false,
            mobil: MobilParams::default(),
            av_control: AvControl::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn with_mode(mut self, mode: TvMode) -> Self {
        self.tv_mode = mode;
        self
    }

    pub fn lane_center(&self, lane: i64) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    pub fn road_width(&self) -> f64 {
        self.num_lanes as f64 * self.lane_width
    }

    pub fn target_lane(&self) -> usize {
        self.target_lane.unwrap_or(self.tv_init.lane)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        if cfg.schema != SCENARIO_SCHEMA {
            return Err(Error::Schema(format!(
                "expected schema {SCENARIO_SCHEMA:?}, found {:?}",
                cfg.schema
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_lanes < 2 {
            return bad(format!("num_lanes must be >= 2 (got {})", self.num_lanes));
        }
        if !(self.lane_width > VEHICLE_WIDTH) {
            return bad(format!("lane_width must exceed vehicle width (got {})", self.lane_width));
        }
        if !(self.sim_dt > 0.0) || self.policy_period == 0 || self.horizon == 0 {
            return bad("sim_dt, policy_period and horizon must be positive".into());
        }
        let lanes = [self.av_init.lane, self.fv_init.lane, self.tv_init.lane, self.target_lane()];
        if lanes.iter().any(|&l| l >= self.num_lanes) {
            return bad(format!("spawn lane out of range for {} lanes", self.num_lanes));
        }
        if self.tv_init.lane.abs_diff(self.av_init.lane) != 1 {
            return bad("the TV must spawn in a lane adjacent to the AV".into());
        }
        let j = &self.jitter;
        if [j.tv_x, j.tv_speed, j.fv_x, j.fv_speed].iter().any(|a| !(*a >= 0.0)) {
            return bad("jitter amplitudes must be non-negative".into());
        }
        let speed_sets = [
            (self.av_init.speed, 0.0),
            (self.fv_init.speed, j.fv_speed),
            (self.tv_init.yield_speed, j.tv_speed),
            (self.tv_init.pass_speed, j.tv_speed),
        ];
        for (s, amp) in speed_sets {
            if !(s - amp >= 0.0 && s + amp <= MAX_SPEED) {
                return bad(format!("spawn speed {s}±{amp} outside [0, {MAX_SPEED}] m/s"));
            }
        }
        let xs = [
            (self.av_init.x, 0.0),
            (self.fv_init.x, j.fv_x),
            (self.tv_init.x, j.tv_x),
        ];
        for (x, amp) in xs {
            if !(x - amp >= 0.0 && x + amp <= self.road_length) {
                return bad(format!("spawn x {x}±{amp} outside the road"));
            }
        }
        self.tv_idm.validate()?;
        self.mobil.validate()?;
        let c = &self.av_control;
        if !(c.min_speed <= self.av_init.speed && self.av_init.speed <= c.max_speed) {
            return bad("AV spawn speed must lie within its speed setpoint range".into());
        }
        if !(c.speed_gain > 0.0 && c.accel_limit > 0.0 && c.lateral_speed > 0.0 && c.snap >= 0.0) {
            return bad(format!("invalid AV control parameters {c:?}"));
        }
        Ok(())
    }
}

/// Flattened, normalized features; AV row first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn av_row(&self) -> &[f64] {
        &self.features[..OBS_COLS]
    }

    pub fn p_yield(&self) -> Option<f64> {
        (self.features.len() == AUGMENTED_OBS_LEN).then(|| self.features[PLAIN_OBS_LEN])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub collided: bool,
    pub off_road: bool,
    pub success: bool,
    pub horizon_reached: bool,
    pub av_speed: f64,
    pub p_yield: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One vehicle at one simulation frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub frame: u64,
    pub vehicle_id: u32,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub ax: f64,
    pub svo: Option<f64>,
    pub p_yield: Option<f64>,
}

pub const AV_ID: u32 = 0;
pub const TV_ID: u32 = 1;
pub const FV_ID: u32 = 2;

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["frame", "vehicle_id", "x", "y", "vx", "ax", "svo", "p_yield"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.frame.to_string(),
            r.vehicle_id.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.vx.to_string(),
            r.ax.to_string(),
            opt(r.svo),
            opt(r.p_yield),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    av_x: f64,
    tv_x: f64,
}

/// Builds environments that share a scenario and (optionally) an intent model.
#[derive(Debug, Clone)]
pub struct EnvFactory {
    pub scenario: ScenarioConfig,
    pub model: Option<Arc<IntentModel>>,
}

impl EnvFactory {
    pub fn new(scenario: ScenarioConfig, model: Option<Arc<IntentModel>>) -> Result<Self> {
        scenario.validate()?;
        Ok(Self { scenario, model })
    }

    pub fn make(&self) -> Result<LaneChangeEnv> {
        LaneChangeEnv::new(self.scenario.clone(), self.model.clone())
    }

    pub fn augmented(&self) -> bool {
        self.model.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct LaneChangeEnv {
    config: ScenarioConfig,
    model: Option<Arc<IntentModel>>,
    av: VehicleState,
    tv: VehicleState,
    fv: VehicleState,
    av_target_speed: f64,
    av_target_lane: i64,
    tv_intent: Intent,
    tv_idm: IdmParams,
    tv_yielding: bool,
    frame: u64,
    policy_steps: u32,
    history: VecDeque<Frame>,
    collided: bool,
    off_road: bool,
    done: bool,
    started: bool,
    trace: Option<Vec<TraceRow>>,
}

impl LaneChangeEnv {
    pub fn new(config: ScenarioConfig, model: Option<Arc<IntentModel>>) -> Result<Self> {
        config.validate()?;
        let av = VehicleState::new(0.0, 0.0, 0.0, 0);
        Ok(Self {
            tv_idm: config.tv_idm,
            config,
            model,
            av,
            tv: av,
            fv: av,
            av_target_speed: 0.0,
            av_target_lane: 0,
            tv_intent: Intent::Pass,
            tv_yielding: false,
            frame: 0,
            policy_steps: 0,
            history: VecDeque::new(),
            collided: false,
            off_road: false,
            done: true,
            started: false,
            trace: None,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn augmented(&self) -> bool {
        self.model.is_some()
    }

    pub fn observation_len(&self) -> usize {
        if self.augmented() {
            AUGMENTED_OBS_LEN
        } else {
            PLAIN_OBS_LEN
        }
    }

    /// Records every simulation frame from the next reset on.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn av(&self) -> &VehicleState {
        &self.av
    }

    pub fn tv(&self) -> &VehicleState {
        &self.tv
    }

    pub fn fv(&self) -> &VehicleState {
        &self.fv
    }

    pub fn tv_intent(&self) -> Intent {
        self.tv_intent
    }

    pub fn tv_yielding(&self) -> bool {
        self.tv_yielding
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn elapsed(&self) -> f64 {
        self.frame as f64 * self.config.sim_dt
    }

    pub fn av_target_lane(&self) -> i64 {
        self.av_target_lane
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Resets with the scenario's own seed.
    pub fn reset(&mut self) -> Result<Observation> {
        self.reset_with_seed(self.config.seed)
    }

    pub fn reset_with_seed(&mut self, seed: u64) -> Result<Observation> {
        let cfg = &self.config;
        let mut rng: SimRng = rng::seeded(seed);
        let intent = match cfg.tv_mode {
            TvMode::Yield => Intent::Yield,
            TvMode::Pass => Intent::Pass,
            TvMode::Random => {
                if rng.gen_bool(0.5) {
                    Intent::Yield
                } else {
                    Intent::Pass
                }
            }
        };
        let mut jitter = |amp: f64| if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
        let tv_dx = jitter(cfg.jitter.tv_x);
        let tv_dv = jitter(cfg.jitter.tv_speed);
        let fv_dx = jitter(cfg.jitter.fv_x);
        let fv_dv = jitter(cfg.jitter.fv_speed);

        let lane_y = |l: usize| cfg.lane_center(l as i64);
        let av = VehicleState::new(cfg.av_init.x, lane_y(cfg.av_init.lane), cfg.av_init.speed, cfg.av_init.lane);
        let fv = VehicleState::new(
            cfg.fv_init.x + fv_dx,
            lane_y(cfg.fv_init.lane),
            cfg.fv_init.speed + fv_dv,
            cfg.fv_init.lane,
        );
        let tv_speed = match intent {
            Intent::Yield => cfg.tv_init.yield_speed,
            Intent::Pass => cfg.tv_init.pass_speed,
        } + tv_dv;
        let tv = VehicleState::new(cfg.tv_init.x + tv_dx, lane_y(cfg.tv_init.lane), tv_speed, cfg.tv_init.lane);

        for (a, b, what) in [(&av, &tv, "AV/TV"), (&av, &fv, "AV/FV"), (&tv, &fv, "TV/FV")] {
            if collision_check(a, b) {
                return Err(Error::Config(format!("{what} spawn positions overlap")));
            }
        }

        let desired = match intent {
            Intent::Yield => tv_speed,
            Intent::Pass => (tv_speed + cfg.pass_speed_gain).min(MAX_SPEED),
        };
        self.tv_idm = cfg.tv_idm.with_v0(desired.max(1e-3));
        self.av_target_speed = cfg.av_init.speed;
        self.av_target_lane = cfg.av_init.lane as i64;
        self.av = av;
        self.tv = tv;
        self.fv = fv;
        self.tv_intent = intent;
        self.tv_yielding = false;
        self.frame = 0;
        self.policy_steps = 0;
        self.collided = false;
        self.off_road = false;
        self.done = false;
        self.started = true;
        self.history.clear();
        self.push_history();
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        self.record_trace();
        Ok(self.observe())
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if !self.started {
            return Err(Error::Usage("step called before reset".into()));
        }
        if self.done {
            return Err(Error::Usage("step called after the episode finished".into()));
        }
        self.apply_action(action);
        if self.config.background_lane_changes {
            self.tv_lane_change();
        }
        for _ in 0..self.config.policy_period {
            self.sim_step();
            if self.collided || self.off_road {
                break;
            }
        }
        self.policy_steps += 1;
        let horizon_reached = self.policy_steps >= self.config.horizon;
        self.done = self.collided || self.off_road || horizon_reached;
        let success = self.done
            && !self.collided
            && !self.off_road
            && (self.av.y - self.config.lane_center(self.config.target_lane() as i64)).abs() <= 0.5;
        let reward = total_reward(
            self.collided,
            !self.off_road,
            self.av.lane,
            self.config.num_lanes,
            self.av.vx,
        );
        let obs = self.observe();
        let info = StepInfo {
            collided: self.collided,
            off_road: self.off_road,
            success,
            horizon_reached,
            av_speed: self.av.vx,
            p_yield: obs.p_yield(),
        };
        Ok(StepResult {
            obs,
            reward,
            done: self.done,
            info,
        })
    }

    fn apply_action(&mut self, action: Action) {
        let c = &self.config.av_control;
        match action {
            Action::LaneLeft => self.av_target_lane = (self.av_target_lane + 1).min(self.config.num_lanes as i64),
            Action::LaneRight => self.av_target_lane = (self.av_target_lane - 1).max(-1),
            Action::Idle => {}
            Action::Faster => {
                self.av_target_speed = (self.av_target_speed + c.speed_step).min(c.max_speed)
            }
            Action::Slower => {
                self.av_target_speed = (self.av_target_speed - c.speed_step).max(c.min_speed)
            }
        }
    }

    fn sim_step(&mut self) {
        let dt = self.config.sim_dt;
        let c = self.config.av_control.clone();

        // AV: proportional speed tracking, constant-rate lateral motion.
        let ax = (c.speed_gain * (self.av_target_speed - self.av.vx)).clamp(-c.accel_limit, c.accel_limit);
        self.av.ax = ax;
        self.av.vx = (self.av.vx + ax * dt).max(0.0);
        self.av.x += self.av.vx * dt;
        let target_y = self.config.lane_center(self.av_target_lane);
        let dy = target_y - self.av.y;
        if dy.abs() <= c.snap {
            self.av.y = target_y;
            self.av.vy = 0.0;
        } else {
            let step = (c.lateral_speed * dt).min(dy.abs());
            self.av.vy = c.lateral_speed * dy.signum();
            self.av.y += step * dy.signum();
            if (target_y - self.av.y).abs() <= c.snap {
                self.av.y = target_y;
            }
        }
        self.av.lane = self.lane_of(self.av.y);

        // TV: IDM, optionally following the AV's projection once it yields.
        let toward = (self.tv.lane as f64 - self.config.av_init.lane as f64).signum();
        let deviation = (self.av.y - self.config.lane_center(self.config.av_init.lane as i64)) * toward;
        if self.tv_intent == Intent::Yield && !self.tv_yielding && deviation > self.config.yield_trigger {
            self.tv_yielding = true;
        }
        let tv_lv = self.tv.as_lane_vehicle();
        let leader = if self.tv_yielding && self.av.x > self.tv.x {
            Some(self.av.as_lane_vehicle())
        } else {
            None
        };
        let fv_leader = (self.fv.lane == self.tv.lane && self.fv.x > self.tv.x).then(|| self.fv.as_lane_vehicle());
        let leader = match (leader, fv_leader) {
            (Some(a), Some(f)) => Some(if a.x < f.x { a } else { f }),
            (a, f) => a.or(f),
        };
        let tv_ax = traffic::follow_accel(&tv_lv, leader.as_ref(), &self.tv_idm);
        self.tv.ax = tv_ax;
        self.tv.vx = (self.tv.vx + tv_ax * dt).max(0.0);
        self.tv.x += self.tv.vx * dt;

        // FV: constant speed.
        self.fv.ax = 0.0;
        self.fv.x += self.fv.vx * dt;

        self.frame += 1;
        self.push_history();

        if collision_check(&self.av, &self.tv) || collision_check(&self.av, &self.fv) {
            self.collided = true;
        }
        let half_w = 0.5 * self.av.width;
        if self.av.y - half_w < 0.0 || self.av.y + half_w > self.config.road_width() {
            self.off_road = true;
        }
        self.record_trace();
    }

    /// Instantaneous TV lane re-assignment when MOBIL accepts it.
    fn tv_lane_change(&mut self) {
        let lanes = self.config.num_lanes as i64;
        let cur = self.tv.lane as i64;
        let me = self.tv.as_lane_vehicle();
        let others = [(self.av.lane, self.av.as_lane_vehicle()), (self.fv.lane, self.fv.as_lane_vehicle())];
        let leader_in = |lane: usize| {
            others
                .iter()
                .filter(|(l, v)| *l == lane && v.x > me.x)
                .min_by(|a, b| a.1.x.total_cmp(&b.1.x))
                .map(|(_, v)| *v)
        };
        let follower_in = |lane: usize| {
            others
                .iter()
                .filter(|(l, v)| *l == lane && v.x <= me.x)
                .max_by(|a, b| a.1.x.total_cmp(&b.1.x))
                .map(|(_, v)| *v)
        };
        for target in [cur + 1, cur - 1] {
            if target < 0 || target >= lanes {
                continue;
            }
            let target = target as usize;
            let cl = leader_in(self.tv.lane);
            let cf = follower_in(self.tv.lane);
            let tl = leader_in(target);
            let tf = follower_in(target);
            let around = LaneChangeNeighbors {
                current_leader: cl.as_ref(),
                current_follower: cf.as_ref(),
                target_leader: tl.as_ref(),
                target_follower: tf.as_ref(),
            };
            let ctx = traffic::mobil_context(&me, &around, &self.tv_idm);
            let mut probe = self.tv;
            probe.y = self.config.lane_center(target as i64);
            let clear = !collision_check(&probe, &self.av) && !collision_check(&probe, &self.fv);
            if clear && traffic::mobil_accept(&ctx, &self.config.mobil) {
                self.tv.lane = target;
                self.tv.y = probe.y;
                return;
            }
        }
    }

    fn lane_of(&self, y: f64) -> usize {
        let idx = (y / self.config.lane_width).floor();
        idx.clamp(0.0, (self.config.num_lanes - 1) as f64) as usize
    }

    fn push_history(&mut self) {
        let window = self.window_frames();
        self.history.push_back(Frame {
            av_x: self.av.x,
            tv_x: self.tv.x,
        });
        while self.history.len() > window + 1 {
            self.history.pop_front();
        }
    }

    fn window_frames(&self) -> usize {
        (svo::DEFAULT_WINDOW_S / self.config.sim_dt).round() as usize
    }

    /// TV's SVO angle with the AV as its only neighbor, once a full window of
    /// history exists.
    pub fn tv_svo(&self) -> Option<f64> {
        self.pair_deltas().map(|(av_d, tv_d)| svo::svo_angle(tv_d, av_d).degrees())
    }

    /// AV's SVO angle with the TV as its only neighbor.
    pub fn av_svo(&self) -> Option<f64> {
        self.pair_deltas().map(|(av_d, tv_d)| svo::svo_angle(av_d, tv_d).degrees())
    }

    fn pair_deltas(&self) -> Option<(f64, f64)> {
        if self.history.len() < self.window_frames() + 1 {
            return None;
        }
        let first = self.history.front()?;
        let last = self.history.back()?;
        Some((last.av_x - first.av_x, last.tv_x - first.tv_x))
    }

    /// Evidence about the TV given the current state, if history allows.
    pub fn evidence(&self) -> Option<EvidenceVector> {
        let svo = self.tv_svo()?;
        Some(EvidenceVector {
            svo,
            ra: self.av.ax - self.tv.ax,
            rv: self.av.vx - self.tv.vx,
            rd: self.av.x - self.tv.x,
        })
    }

    /// Posterior yielding probability; 0.5 during the warm-up window or when
    /// no model is attached.
    pub fn p_yield(&self) -> f64 {
        match (&self.model, self.evidence()) {
            (Some(model), Some(e)) => model.posterior(&e).p_yield,
            _ => 0.5,
        }
    }

    pub fn observe(&self) -> Observation {
        let cfg = &self.config;
        let width = cfg.road_width();
        let av = &self.av;
        let mut features = Vec::with_capacity(self.observation_len());
        features.extend([
            (av.x / cfg.road_length).clamp(-1.0, 1.0),
            (av.y / width).clamp(-1.0, 1.0),
            (av.vx / NORM_VX).clamp(-1.0, 1.0),
            (av.vy / NORM_VY).clamp(-1.0, 1.0),
        ]);
        for other in [&self.tv, &self.fv] {
            features.extend([
                ((other.x - av.x) / NORM_REL_X).clamp(-1.0, 1.0),
                ((other.y - av.y) / width).clamp(-1.0, 1.0),
                ((other.vx - av.vx) / NORM_VX).clamp(-1.0, 1.0),
                ((other.vy - av.vy) / NORM_VY).clamp(-1.0, 1.0),
            ]);
        }
        if self.augmented() {
            features.push(self.p_yield());
        }
        Observation { features }
    }

    fn record_trace(&mut self) {
        if self.trace.is_none() {
            return;
        }
        let p = self.model.as_ref().map(|_| self.p_yield());
        let tv_svo = self.tv_svo();
        let av_svo = self.av_svo();
        let frame = self.frame;
        let rows = [
            (AV_ID, self.av, av_svo),
            (TV_ID, self.tv, tv_svo),
            (FV_ID, self.fv, None),
        ];
        if let Some(trace) = self.trace.as_mut() {
            for (id, v, svo) in rows {
                trace.push(TraceRow {
                    frame,
                    vehicle_id: id,
                    x: v.x,
                    y: v.y,
                    vx: v.vx,
                    ax: v.ax,
                    svo,
                    p_yield: p,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn veh(x: f64, y: f64) -> VehicleState {
        VehicleState::new(x, y, 0.0, 0)
    }

    #[test]
    fn collision_boundaries() {
        assert!(collision_check(&veh(0.0, 0.0), &veh(0.0, 0.0)));
        assert!(!collision_check(&veh(0.0, 0.0), &veh(5.0, 0.0)));
        assert!(!collision_check(&veh(0.0, 0.0), &veh(0.0, 2.0)));
        assert!(collision_check(&veh(0.0, 0.0), &veh(4.9, 1.9)));
    }

    proptest! {
        #[test]
        fn collision_matches_interval_oracle(
            x1 in -20f64..20.0, y1 in -5f64..5.0, x2 in -20f64..20.0, y2 in -5f64..5.0
        ) {
            let a = veh(x1, y1);
            let b = veh(x2, y2);
            let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| lo1 < hi2 && lo2 < hi1;
            let ox = overlap(x1 - 2.5, x1 + 2.5, x2 - 2.5, x2 + 2.5);
            let oy = overlap(y1 - 1.0, y1 + 1.0, y2 - 1.0, y2 + 1.0);
            // Skip razor-thin contact, where the tolerance decides.
            let margin = ((x1 - x2).abs() - 5.0).abs().min(((y1 - y2).abs() - 2.0).abs());
            prop_assume!(margin > 1e-6);
            prop_assert_eq!(collision_check(&a, &b), ox && oy);
        }

        #[test]
        fn reward_bounds(c in any::<bool>(), r in any::<bool>(), lane in 0usize..3, v in -5f64..50.0) {
            let rew = total_reward(c, r, lane, 3, v);
            prop_assert!((-1.5..=3.0).contains(&rew));
        }
    }

    #[test]
    fn reward_cases() {
        assert_eq!(total_reward(true, false, 2, 3, 30.0), 0.0);
        assert_eq!(total_reward(false, true, 2, 3, 30.0), 3.0);
        assert!((total_reward(true, true, 0, 3, 25.0) + 0.75).abs() < 1e-12);
        assert_eq!(total_reward(false, true, 0, 1, 40.0), 1.5);
    }

    fn env(mode: TvMode) -> LaneChangeEnv {
        LaneChangeEnv::new(ScenarioConfig::default().with_mode(mode), None).unwrap()
    }

    #[test]
    fn default_reset_geometry() {
        let mut e = env(TvMode::Yield);
        e.reset().unwrap();
        assert_eq!(e.av().x, 80.0);
        assert_eq!(e.av().y, 6.0);
        assert_eq!(e.av().vx, 30.0);
        assert_eq!(e.fv().x, 130.0);
        assert_eq!(e.fv().vx, 25.0);
        assert_eq!(e.tv().x - e.av().x, -10.0);
        assert_eq!(e.tv().vx, 42.0);
        assert_eq!(e.tv().y, 10.0);

        let mut e = env(TvMode::Pass);
        e.reset().unwrap();
        assert_eq!(e.tv().vx, 40.0);
    }

    #[test]
    fn random_mode_draws_both() {
        let mut e = env(TvMode::Random);
        let mut seen = [false; 2];
        for s in 0..64 {
            e.reset_with_seed(s).unwrap();
            seen[e.tv_intent().index()] = true;
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn reset_is_deterministic() {
        let mut cfg = ScenarioConfig::default();
        cfg.jitter = SpawnJitter {
            tv_x: 5.0,
            tv_speed: 1.0,
            fv_x: 5.0,
            fv_speed: 1.0,
        };
        let mut a = LaneChangeEnv::new(cfg.clone(), None).unwrap();
        let mut b = LaneChangeEnv::new(cfg, None).unwrap();
        let oa = a.reset_with_seed(17).unwrap();
        let ob = b.reset_with_seed(17).unwrap();
        assert_eq!(
            oa.features.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            ob.features.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ScenarioConfig::default();
        cfg.tv_init.x = 80.0;
        cfg.tv_init.lane = 1;
        assert!(LaneChangeEnv::new(cfg, None).is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.tv_init.yield_speed = 50.0;
        assert!(LaneChangeEnv::new(cfg, None).is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.av_init.lane = 1;
        cfg.tv_init.lane = 1;
        cfg.tv_init.x = 40.0;
        assert!(matches!(LaneChangeEnv::new(cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn overlapping_spawn_rejected_at_reset() {
        let mut cfg = ScenarioConfig::default();
        cfg.fv_init.x = 83.0;
        let mut e = LaneChangeEnv::new(cfg, None).unwrap();
        assert!(matches!(e.reset(), Err(Error::Config(_))));
    }

    #[test]
    fn idle_far_apart_reward() {
        let mut cfg = ScenarioConfig::default().with_mode(TvMode::Pass);
        cfg.tv_init.x = 10.0;
        cfg.fv_init.x = 600.0;
        let mut e = LaneChangeEnv::new(cfg, None).unwrap();
        e.reset().unwrap();
        let r = e.step(Action::Idle).unwrap();
        assert!(!r.info.collided && !r.done);
        let expected = 1.5 * (0.5 + 1.0);
        assert!((r.reward - expected).abs() < 1e-12, "{}", r.reward);
    }

    #[test]
    fn driving_off_the_road() {
        let mut cfg = ScenarioConfig::default().with_mode(TvMode::Pass);
        cfg.av_init.lane = 0;
        cfg.fv_init.lane = 0;
        cfg.tv_init.lane = 1;
        let mut e = LaneChangeEnv::new(cfg, None).unwrap();
        e.reset().unwrap();
        let r = e.step(Action::LaneRight).unwrap();
        assert!(r.done && r.info.off_road && !r.info.collided);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn forced_overlap_collides() {
        // TV alongside the AV in the left lane; moving left overlaps it.
        let mut cfg = ScenarioConfig::default().with_mode(TvMode::Pass);
        cfg.tv_init.x = 80.0;
        cfg.tv_init.pass_speed = 30.0;
        cfg.pass_speed_gain = 0.0;
        let mut e = LaneChangeEnv::new(cfg, None).unwrap();
        e.reset().unwrap();
        let r1 = e.step(Action::LaneLeft).unwrap();
        assert!(!r1.done, "still touching only after one decision");
        let r2 = e.step(Action::Idle).unwrap();
        assert!(r2.done && r2.info.collided);
        let av = e.av();
        let lane_term = av.lane as f64 / 2.0;
        let speed_term = ((av.vx - 20.0) / 10.0).clamp(0.0, 1.0);
        assert!((r2.reward - 1.5 * (-1.0 + lane_term + speed_term)).abs() < 1e-12);
        assert!(matches!(e.step(Action::Idle), Err(Error::Usage(_))));
    }

    #[test]
    fn observation_shape_and_order() {
        let mut e = env(TvMode::Yield);
        let obs = e.reset().unwrap();
        assert_eq!(obs.len(), PLAIN_OBS_LEN);
        assert_eq!(obs.av_row(), &[80.0 / 2000.0, 0.5, 30.0 / 45.0, 0.0]);
        assert!(obs.features.iter().all(|f| (-1.0..=1.0).contains(f)));
        assert!(obs.p_yield().is_none());
    }

    #[test]
    fn speed_setpoint_bounds() {
        let mut cfg = ScenarioConfig::default();
        cfg.fv_init.x = 1500.0;
        let mut e = LaneChangeEnv::new(cfg.with_mode(TvMode::Pass), None).unwrap();
        e.reset().unwrap();
        e.step(Action::Faster).unwrap();
        assert!(e.av().vx <= 30.0 + 1e-12);
        for _ in 0..12 {
            e.step(Action::Slower).unwrap();
        }
        assert!(e.av().vx >= 20.0 && e.av().vx < 20.1, "{}", e.av().vx);
    }

    #[test]
    fn step_before_reset_errors() {
        let mut e = env(TvMode::Yield);
        assert!(matches!(e.step(Action::Idle), Err(Error::Usage(_))));
    }

    #[test]
    fn yielding_tv_brakes_only_after_deviation() {
        let mut cfg = ScenarioConfig::default().with_mode(TvMode::Yield);
        cfg.tv_init.x = 40.0;
        let mut e = LaneChangeEnv::new(cfg, None).unwrap();
        e.reset().unwrap();
        e.step(Action::Idle).unwrap();
        assert!(!e.tv_yielding());
        assert_eq!(e.tv().ax, 0.0);
        e.step(Action::LaneLeft).unwrap();
        assert!(e.tv_yielding());
        assert!(e.tv().ax < 0.0);
    }

    #[test]
    fn passing_tv_ignores_deviation() {
        let mut cfg = ScenarioConfig::default().with_mode(TvMode::Pass);
        cfg.tv_init.x = 40.0;
        let mut e = LaneChangeEnv::new(cfg, None).unwrap();
        e.reset().unwrap();
        e.step(Action::LaneLeft).unwrap();
        assert!(!e.tv_yielding());
        assert!(e.tv().ax >= 0.0);
    }

    #[test]
    fn trace_has_three_rows_per_frame() {
        let mut e = env(TvMode::Pass);
        e.enable_trace();
        e.reset().unwrap();
        e.step(Action::Idle).unwrap();
        let rows = e.take_trace();
        assert_eq!(rows.len(), 3 * 11);
        assert!(rows[..3].iter().all(|r| r.svo.is_none()));
        assert!(rows[30..].iter().filter(|r| r.vehicle_id != FV_ID).all(|r| r.svo.is_some()));
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("frame,vehicle_id,x,y,vx,ax,svo,p_yield\n"));
        assert_eq!(text.lines().count(), 34);
    }

    #[test]
    fn scenario_json_round_trip() {
        let cfg = ScenarioConfig::default();
        let back = ScenarioConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
        let bad = cfg.to_json().unwrap().replace(SCENARIO_SCHEMA, "nope");
        assert!(ScenarioConfig::from_json(&bad).is_err());
    }

    #[test]
    fn background_mobil_moves_blocked_tv() {
        // A TV stuck behind a slow FV in its own lane moves to the free lane.
        let mut cfg = ScenarioConfig::default().with_mode(TvMode::Pass);
        cfg.background_lane_changes = true;
        cfg.fv_init = SpawnSpec { x: 100.0, lane: 2, speed: 20.0 };
        cfg.tv_init.x = 70.0;
        cfg.av_init.x = 20.0;
        let mut e = LaneChangeEnv::new(cfg, None).unwrap();
        e.reset().unwrap();
        e.step(Action::Idle).unwrap();
        assert_ne!(e.tv().lane, 2);
    }
}
