use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use svo_lc_core::dqn::{ReplayBuffer, Transition};
use svo_lc_core::env::{Action, LaneChangeEnv, ScenarioConfig, TvMode};
use svo_lc_core::intent_bn::{
    ClassGaussians, DiscretizationConfig, EvidenceVector, GaussianParams, Intent, IntentModel,
};
use svo_lc_core::ngsim::{self, PipelineConfig, TrajectoryRecord, FRAME_DT};
use svo_lc_core::rng;
use svo_lc_core::synth::{self, SynthConfig};

fn synthetic_model() -> &'static IntentModel {
    static MODEL: OnceLock<IntentModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let eps = synth::generate(&SynthConfig::default()).unwrap();
        let samples: Vec<_> = synth::flatten(&eps).iter().map(|s| s.labeled_evidence()).collect();
        IntentModel::fit(&samples, DiscretizationConfig::default()).unwrap()
    })
}

fn evidence() -> impl Strategy<Value = EvidenceVector> {
    (0f64..90.0, -8f64..8.0, -20f64..20.0, -60f64..60.0).prop_map(|(svo, ra, rv, rd)| EvidenceVector { svo, ra, rv, rd })
}

fn corpus_box() -> impl Strategy<Value = EvidenceVector> {
    let eps = synth::generate(&SynthConfig::default()).unwrap();
    let samples = synth::flatten(&eps);
    let range = |f: fn(&EvidenceVector) -> f64| {
        let lo = samples.iter().map(|s| f(&s.evidence)).fold(f64::INFINITY, f64::min);
        let hi = samples.iter().map(|s| f(&s.evidence)).fold(f64::NEG_INFINITY, f64::max);
        lo..=hi
    };
    (range(|e| e.svo), range(|e| e.ra), range(|e| e.rv), range(|e| e.rd))
        .prop_map(|(svo, ra, rv, rd)| EvidenceVector { svo, ra, rv, rd })
}

/// Classes differ only in SVO (pass mean 30, yield mean 50).
fn svo_only_model(k: usize) -> IntentModel {
    let same = GaussianParams::new(0.0, 3.0).unwrap();
    let g = ClassGaussians {
        prior: [0.5, 0.5],
        pooled: [GaussianParams::new(40.0, 125f64.sqrt()).unwrap(), same, same, same],
        classes: [
            [GaussianParams::new(30.0, 5.0).unwrap(), same, same, same],
            [GaussianParams::new(50.0, 5.0).unwrap(), same, same, same],
        ],
    };
    IntentModel::build(&g, DiscretizationConfig { k, p1: 0.001, p2: 0.999 }).unwrap()
}

proptest! {
    #[test]
    fn posterior_is_normalized(e in evidence()) {
        let p = synthetic_model().posterior(&e);
        prop_assert!((p.p_yield + p.p_pass - 1.0).abs() < 1e-12);
        prop_assert!(p.p_yield >= 0.0 && p.p_pass >= 0.0);
    }

    #[test]
    fn label_swap_is_exact(e in evidence()) {
        let m = synthetic_model();
        let (p, s) = (m.posterior(&e), m.swapped().posterior(&e));
        prop_assert_eq!(s.p_yield, p.p_pass);
        prop_assert_eq!(s.p_pass, p.p_yield);
    }

    #[test]
    fn svo_toward_yield_mean_never_lowers_p_yield(
        k in 2usize..24, a in 30f64..50.0, b in 30f64..50.0, ra in -3f64..3.0, rv in -3f64..3.0, rd in -3f64..3.0
    ) {
        let m = svo_only_model(k);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let p = |svo| m.posterior(&EvidenceVector { svo, ra, rv, rd }).p_yield;
        prop_assert!(p(hi) >= p(lo), "k={} {}->{} gave {} -> {}", k, lo, hi, p(lo), p(hi));
    }

    /// Any evidence inside the synthetic corpus's bounding box.
    #[test]
    fn refinement_keeps_masses_and_moves_posterior_little(e in corpus_box()) {
        let m16 = synthetic_model().rebinned(DiscretizationConfig { k: 16, ..Default::default() }).unwrap();
        let m32 = synthetic_model().rebinned(DiscretizationConfig { k: 32, ..Default::default() }).unwrap();
        for m in [&m16, &m32] {
            for intent in Intent::ALL {
                for f in svo_lc_core::intent_bn::Feature::ALL {
                    let s: f64 = m.cpt(intent, f).scheme.masses.iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
        let d = (m16.posterior(&e).p_yield - m32.posterior(&e).p_yield).abs();
        prop_assert!(d < 0.05, "|dp| = {}", d);
    }
}

#[test]
fn refinement_on_synthetic_corpus_evidence() {
    let m = synthetic_model();
    let m16 = m.rebinned(DiscretizationConfig { k: 16, ..Default::default() }).unwrap();
    let m32 = m.rebinned(DiscretizationConfig { k: 32, ..Default::default() }).unwrap();
    let cfg = SynthConfig { seed: 77, episodes: 100, ..Default::default() };
    let samples = synth::flatten(&synth::generate(&cfg).unwrap());
    let worst = samples
        .iter()
        .map(|s| (m16.posterior(&s.evidence).p_yield - m32.posterior(&s.evidence).p_yield).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.05, "max |dp| = {worst} over {} frames", samples.len());
}

fn actions() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..Action::COUNT, 1..40)
}

fn run(scenario: &ScenarioConfig, seed: u64, acts: &[usize]) -> (Vec<f64>, Vec<String>, LaneChangeEnv) {
    let mut env = LaneChangeEnv::new(scenario.clone(), Some(Arc::new(synthetic_model().clone()))).unwrap();
    env.enable_trace();
    env.reset_with_seed(seed).unwrap();
    let mut rewards = Vec::new();
    let mut infos = Vec::new();
    for &a in acts {
        if env.is_done() {
            break;
        }
        let r = env.step(Action::from_index(a).unwrap()).unwrap();
        rewards.push(r.reward);
        infos.push(format!("{:?}", r.info));
    }
    (rewards, infos, env)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn episodes_are_deterministic(seed in any::<u64>(), acts in actions()) {
        let sc = synth::synth_scenario().with_mode(TvMode::Random);
        let (r1, i1, mut e1) = run(&sc, seed, &acts);
        let (r2, i2, mut e2) = run(&sc, seed, &acts);
        prop_assert_eq!(r1, r2);
        prop_assert_eq!(i1, i2);
        let (t1, t2) = (e1.take_trace(), e2.take_trace());
        prop_assert_eq!(t1.len(), t2.len());
        for (a, b) in t1.iter().zip(&t2) {
            prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }
    }

    #[test]
    fn step_rewards_and_success(seed in any::<u64>(), acts in actions()) {
        let mut acts = acts;
        acts.resize(40, Action::Idle.index());
        let sc = synth::synth_scenario().with_mode(TvMode::Random);
        let mut env = LaneChangeEnv::new(sc.clone(), None).unwrap();
        env.reset_with_seed(seed).unwrap();
        for &a in &acts {
            if env.is_done() {
                break;
            }
            let r = env.step(Action::from_index(a).unwrap()).unwrap();
            prop_assert!((-1.5..=3.0).contains(&r.reward), "reward {}", r.reward);
            if r.info.success {
                prop_assert!(r.done && !r.info.collided);
                let center = sc.lane_center(sc.target_lane() as i64);
                prop_assert!((env.av().y - center).abs() <= 0.5);
            }
        }
        prop_assert!(env.is_done());
    }

    #[test]
    fn replay_buffer_is_bounded_fifo(cap in 1usize..40, n in 0usize..120, seed in any::<u64>()) {
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..n {
            buf.push(Transition {
                state: vec![i as f64],
                action: Action::Idle,
                reward: i as f64,
                next_state: vec![],
                terminal: false,
            });
            prop_assert!(buf.len() <= cap);
        }
        let kept: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        let expected: Vec<f64> = (n.saturating_sub(cap)..n).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expected);
        if n > 0 {
            let draw = |s| buf.sample(16, &mut rng::seeded(s)).iter().map(|t| t.reward).collect::<Vec<_>>();
            prop_assert_eq!(draw(seed), draw(seed));
        }
    }
}

fn rec(vehicle_id: u32, frame_id: u32, y: f64, speed: f64, lane_id: u32, class: u32) -> TrajectoryRecord {
    TrajectoryRecord {
        vehicle_id,
        frame_id,
        local_x: lane_id as f64 * 3.7,
        local_y: y,
        speed,
        accel: 0.0,
        lane_id,
        vehicle_class: class,
    }
}

/// Random road: lane-changing egos with leaders and conflict vehicles, plus
/// vehicles that the filter should drop.
fn road() -> impl Strategy<Value = Vec<TrajectoryRecord>> {
    let pair = (35u32..165, 14f64..30.0, 0f64..70.0, 1u32..4, 0usize..3);
    prop::collection::vec(pair, 1..4).prop_map(|pairs| {
        let mut recs = Vec::new();
        for (i, (lc, cv, gap, class, lane_kind)) in pairs.into_iter().enumerate() {
            let base = 1000.0 * i as f64;
            let id = 10 * i as u32;
            let (src, dst) = [(2, 3), (4, 5), (5, 7)][lane_kind];
            for f in 0..=200u32 {
                let t = f as f64 * FRAME_DT;
                recs.push(rec(id + 1, f, base + 20.0 * t, 20.0, if f < lc { src } else { dst }, class));
                recs.push(rec(id + 2, f, base + 50.0 + 20.0 * t, 20.0, src, 2));
                recs.push(rec(id + 3, f, base - gap + cv * t, cv, dst, 2));
            }
        }
        recs
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pipeline_invariants(recs in road()) {
        let cfg = PipelineConfig::default();
        let kept = ngsim::filter_records(&recs, &cfg);
        prop_assert_eq!(ngsim::filter_records(&kept, &cfg), kept.clone());

        let out = ngsim::label_dataset(&recs, &cfg);
        for s in &out.samples {
            let ev = out.events.iter().find(|e| e.ego_id == s.ego_id && e.conflict_id == Some(s.conflict_id)).unwrap();
            prop_assert!((ev.start_frame..=ev.end_frame).contains(&s.frame));
        }
        let r = &out.report;
        prop_assert_eq!(r.yield_events + r.pass_events + r.ambiguous_events, r.events_detected - r.events_without_conflict);
        prop_assert_eq!(r.yield_frames + r.pass_frames, out.samples.len());
    }
}

#[test]
fn scripted_tv_svo_signature() {
    // 200 yield-mode and 200 pass-mode episodes: even indices yield.
    let cfg = SynthConfig::default();
    let eps = synth::generate(&cfg).unwrap();
    assert_eq!(eps.iter().filter(|e| e.intent == Intent::Yield).count(), 200);
    let y = synth::class_mean_svo(&eps, Intent::Yield).unwrap();
    let p = synth::class_mean_svo(&eps, Intent::Pass).unwrap();
    assert!(y > p, "yield {y} vs pass {p}");
}
