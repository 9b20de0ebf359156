//! Scripted yield/pass interactions that produce labeled evidence without any
//! recorded data.
//!
//! Each episode runs the highway scenario with the TV mode fixed (even
//! episodes yield, odd episodes pass) and an AV driven by a scripted policy
//! that knows the mode: it always starts drifting toward the TV's lane, keeps
//! going when the TV yields, and aborts back to its own lane when the TV
//! passes, easing off and re-merging once the TV is clear ahead.

use serde::{Deserialize, Serialize};

use crate::env::{Action, LaneChangeEnv, ScenarioConfig, SpawnJitter, TvMode, AV_ID, TV_ID};
use crate::intent_bn::{EvidenceVector, Intent};
use crate::ngsim::LabeledSample;
use crate::rng;
use crate::{Error, Result};

pub const SYNTH_SCHEMA: &str = "svo-lc/synth-config@1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub schema: String,
    pub episodes: u32,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    /// Frames per interaction window, counted from the episode start.
    pub window_frames: u32,
    /// Longitudinal lead the TV must have before a passing-case re-merge.
    pub remerge_gap: f64,
    /// Bumper gap to the FV below which the AV slows down.
    pub fv_gap: f64,
}

/// Scenario used for synthetic data: the TV starts 25–45 m behind the AV and
/// spawn speeds are jittered so that no single feature gives the mode away.
pub fn synth_scenario() -> ScenarioConfig {
    let mut s = ScenarioConfig::default();
    s.tv_init.x = 45.0;
    s.jitter = SpawnJitter {
        tv_x: 10.0,
        tv_speed: 1.5,
        fv_x: 10.0,
        fv_speed: 1.0,
    };
    s
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            schema: SYNTH_SCHEMA.to_string(),
            episodes: 400,
            seed: 0,
            scenario: synth_scenario(),
            window_frames: 60,
            remerge_gap: 10.0,
            fv_gap: 20.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_frames == 0 {
            return Err(Error::Config("window_frames must be positive".into()));
        }
        if !(self.remerge_gap >= 0.0 && self.fv_gap >= 0.0) {
            return Err(Error::Config("gaps must be non-negative".into()));
        }
        self.scenario.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(text)?;
        if cfg.schema != SYNTH_SCHEMA {
            return Err(Error::Schema(format!(
                "expected schema {SYNTH_SCHEMA:?}, found {:?}",
                cfg.schema
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEpisode {
    pub episode: u32,
    pub intent: Intent,
    pub samples: Vec<LabeledSample>,
    /// Window frames without a full SVO history.
    pub skipped: usize,
    pub collided: bool,
}

impl SynthEpisode {
    pub fn mean_svo(&self) -> Option<f64> {
        let n = self.samples.len();
        (n > 0).then(|| self.samples.iter().map(|s| s.evidence.svo).sum::<f64>() / n as f64)
    }
}

pub fn episode_intent(episode: u32) -> Intent {
    if episode % 2 == 0 {
        Intent::Yield
    } else {
        Intent::Pass
    }
}

pub fn ego_id(episode: u32) -> u32 {
    2 * episode
}

pub fn conflict_id(episode: u32) -> u32 {
    2 * episode + 1
}

/// Episode index encoded in a synthetic sample's ids.
pub fn episode_of(sample: &LabeledSample) -> u32 {
    sample.ego_id / 2
}

/// Scripted AV decision with privileged knowledge of the TV mode.
pub fn scripted_action(env: &LaneChangeEnv, cfg: &SynthConfig, decision: u32) -> Action {
    let sc = env.config();
    let source = sc.av_init.lane as i64;
    let target = sc.tv_init.lane as i64;
    let toward = if target > source { Action::LaneLeft } else { Action::LaneRight };
    let away = if target > source { Action::LaneRight } else { Action::LaneLeft };
    let av = env.av();
    let tv = env.tv();
    let fv = env.fv();
    let fv_close = fv.lane == av.lane && fv.x > av.x && fv.x - av.x - fv.length < cfg.fv_gap;

    if decision == 0 {
        return toward;
    }
    let heading_to_target = env.av_target_lane() == target;
    match env.tv_intent() {
        Intent::Yield => {
            if heading_to_target {
                Action::Idle
            } else {
                toward
            }
        }
        Intent::Pass => {
            let clear = tv.x - av.x > cfg.remerge_gap;
            if heading_to_target && !clear {
                away
            } else if !heading_to_target && !clear {
                // Ease off so the passing TV clears and the AV can fall in behind.
                Action::Slower
            } else if !heading_to_target {
                toward
            } else if fv_close {
                Action::Slower
            } else {
                Action::Idle
            }
        }
    }
}

pub fn run_episode(cfg: &SynthConfig, episode: u32) -> Result<SynthEpisode> {
    let intent = episode_intent(episode);
    let mode = match intent {
        Intent::Yield => TvMode::Yield,
        Intent::Pass => TvMode::Pass,
    };
    let mut env = LaneChangeEnv::new(cfg.scenario.clone().with_mode(mode), None)?;
    env.enable_trace();
    env.reset_with_seed(rng::mix(cfg.seed, episode as u64))?;
    let mut decision = 0;
    let mut collided = false;
    while env.frame() < cfg.window_frames as u64 && !env.is_done() {
        let action = scripted_action(&env, cfg, decision);
        let r = env.step(action)?;
        collided |= r.info.collided;
        decision += 1;
    }
    let trace = env.take_trace();
    let mut samples = Vec::new();
    let mut skipped = 0;
    for frame in trace.chunks(3) {
        let (av, tv) = (frame[AV_ID as usize], frame[TV_ID as usize]);
        if av.frame > cfg.window_frames as u64 {
            break;
        }
        let Some(svo) = tv.svo else {
            skipped += 1;
            continue;
        };
        samples.push(LabeledSample {
            evidence: EvidenceVector {
                svo,
                ra: av.ax - tv.ax,
                rv: av.vx - tv.vx,
                rd: av.x - tv.x,
            },
            label: intent,
            ego_id: ego_id(episode),
            conflict_id: conflict_id(episode),
            frame: av.frame as u32,
        });
    }
    Ok(SynthEpisode {
        episode,
        intent,
        samples,
        skipped,
        collided,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthEpisode>> {
    cfg.validate()?;
    (0..cfg.episodes).map(|e| run_episode(cfg, e)).collect()
}

pub fn flatten(episodes: &[SynthEpisode]) -> Vec<LabeledSample> {
    episodes.iter().flat_map(|e| e.samples.iter().copied()).collect()
}

/// Mean over episodes of `intent` of each episode's mean conflict-vehicle SVO.
pub fn class_mean_svo(episodes: &[SynthEpisode], intent: Intent) -> Option<f64> {
    let means: Vec<f64> = episodes
        .iter()
        .filter(|e| e.intent == intent)
        .filter_map(|e| e.mean_svo())
        .collect();
    (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            episodes: 20,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn alternating_labels_and_ids() {
        let eps = generate(&small()).unwrap();
        assert_eq!(eps.len(), 20);
        for e in &eps {
            assert_eq!(e.intent, episode_intent(e.episode));
            assert!(e.samples.iter().all(|s| s.label == e.intent && episode_of(s) == e.episode));
            assert!(e.samples.iter().all(|s| s.frame >= 10 && s.frame <= 60));
            assert_eq!(e.skipped, 10);
            assert_eq!(e.samples.len(), 51);
        }
    }

    #[test]
    fn scripted_episodes_are_collision_free() {
        let eps = generate(&small()).unwrap();
        assert!(eps.iter().all(|e| !e.collided));
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn yielding_tv_is_more_prosocial() {
        let eps = generate(&small()).unwrap();
        let y = class_mean_svo(&eps, Intent::Yield).unwrap();
        let p = class_mean_svo(&eps, Intent::Pass).unwrap();
        assert!(y > p, "{y} vs {p}");
    }

    #[test]
    fn config_json_round_trip() {
        let c = SynthConfig::default();
        assert_eq!(SynthConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }
}
