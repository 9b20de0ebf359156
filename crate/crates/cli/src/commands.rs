use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use svo_lc_core::dqn::{self, QNetwork, TrainConfig};
use svo_lc_core::env::{self, Action, EnvFactory, ScenarioConfig, AUGMENTED_OBS_LEN};
use svo_lc_core::intent_bn::{DiscretizationConfig, EvidenceVector, Intent, IntentModel};
use svo_lc_core::ngsim::{self, PipelineConfig};
use svo_lc_core::synth::{self, SynthConfig};
use svo_lc_core::{Error, Result};

use crate::args::*;
use crate::output::{read_text, OutputDir, RunManifest, MANIFEST_FILE, MANIFEST_SCHEMA};

pub const PIPELINE_SCHEMA: &str = "svo-lc/pipeline-config@1";
pub const DISCRETIZATION_SCHEMA: &str = "svo-lc/discretization@1";

#[derive(Debug, Serialize, Deserialize)]
struct PipelineFile {
    schema: String,
    #[serde(flatten)]
    pipeline: PipelineConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct DiscretizationFile {
    schema: String,
    #[serde(flatten)]
    discretization: DiscretizationConfig,
}

fn check_schema(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Schema(format!("expected schema {expected:?}, found {found:?}")));
    }
    Ok(())
}

/// What a finished run reports for its manifest.
struct RunRecord {
    config: Option<PathBuf>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<&'static str>,
}

pub fn dispatch(command: Command) -> Result<()> {
    let command = match command {
        Command::Replay(r) => {
            let manifest = RunManifest::load(&r.manifest)?;
            let mut cmd = manifest.command;
            *cmd.output_mut() = r.output.clone();
            cmd
        }
        mut cmd => {
            absolutize(&mut cmd);
            cmd
        }
    };
    run(command)
}

fn run(command: Command) -> Result<()> {
    let start = Instant::now();
    let record = match &command {
        Command::Label(a) => label(a)?,
        Command::Fit(a) => fit(a)?,
        Command::Infer(a) => infer(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Rollout(a) => rollout(a)?,
        Command::Synth(a) => run_synth(a)?,
        Command::Replay(_) => return Err(Error::Usage("a manifest cannot record a replay".into())),
    };
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        subcommand: command.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: record.config,
        seed: record.seed,
        inputs: record.inputs,
        outputs: record.outputs.iter().map(|s| s.to_string()).collect(),
        duration_s: start.elapsed().as_secs_f64(),
        command: command.clone(),
    };
    let out = command.output();
    let path = out.out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|source| Error::Io { path, source })
}

fn absolutize(cmd: &mut Command) {
    fn abs(p: &mut PathBuf) {
        if let Ok(a) = std::path::absolute(&*p) {
            *p = a;
        }
    }
    fn abs_opt(p: &mut Option<PathBuf>) {
        if let Some(p) = p {
            abs(p);
        }
    }
    match cmd {
        Command::Label(a) => {
            abs(&mut a.input);
            abs_opt(&mut a.config);
        }
        Command::Fit(a) => {
            abs(&mut a.samples);
            abs_opt(&mut a.config);
        }
        Command::Infer(a) => abs(&mut a.model),
        Command::Train(a) => {
            abs_opt(&mut a.scenario);
            abs_opt(&mut a.config);
            abs_opt(&mut a.model);
        }
        Command::Eval(a) => {
            abs(&mut a.network);
            abs_opt(&mut a.scenario);
            abs_opt(&mut a.model);
        }
        Command::Rollout(a) => {
            abs(&mut a.network);
            abs_opt(&mut a.scenario);
            abs_opt(&mut a.model);
        }
        Command::Synth(a) => abs_opt(&mut a.config),
        Command::Replay(a) => abs(&mut a.manifest),
    }
    abs(&mut cmd.output_mut().out);
}

fn json_line<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn load_scenario(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::from_json(&read_text(p)?),
        None => Ok(ScenarioConfig::default()),
    }
}

fn load_model(path: &Path) -> Result<Arc<IntentModel>> {
    Ok(Arc::new(IntentModel::from_json(&read_text(path)?)?))
}

fn load_network(path: &Path) -> Result<QNetwork> {
    QNetwork::from_json(&read_text(path)?)
}

fn inputs(paths: &[Option<&PathBuf>]) -> Vec<PathBuf> {
    paths.iter().flatten().map(|p| (*p).clone()).collect()
}

fn label(a: &LabelArgs) -> Result<RunRecord> {
    let cfg = match &a.config {
        Some(p) => {
            let f: PipelineFile = serde_json::from_str(&read_text(p)?)?;
            check_schema(&f.schema, PIPELINE_SCHEMA)?;
            f.pipeline
        }
        None => PipelineConfig::default(),
    };
    let outputs = vec!["samples.csv", "events.json", "report.json"];
    let out = OutputDir::prepare(&a.output, &outputs)?;
    let records = ngsim::load_trajectories(&a.input)?;
    let result = ngsim::label_dataset(&records, &cfg);
    let mut buf = Vec::new();
    ngsim::write_samples(&result.samples, &mut buf)?;
    out.write("samples.csv", &buf)?;
    out.write("events.json", json_line(&result.events)?.as_bytes())?;
    out.write("report.json", json_line(&result.report)?.as_bytes())?;
    Ok(RunRecord {
        config: a.config.clone(),
        seed: None,
        inputs: inputs(&[Some(&a.input), a.config.as_ref()]),
        outputs,
    })
}

fn fit(a: &FitArgs) -> Result<RunRecord> {
    let cfg = match &a.config {
        Some(p) => {
            let f: DiscretizationFile = serde_json::from_str(&read_text(p)?)?;
            check_schema(&f.schema, DISCRETIZATION_SCHEMA)?;
            f.discretization
        }
        None => DiscretizationConfig::default(),
    };
    cfg.validate()?;
    let outputs = vec!["model.json"];
    let out = OutputDir::prepare(&a.output, &outputs)?;
    let samples: Vec<_> = ngsim::load_samples(&a.samples)?
        .iter()
        .map(|s| s.labeled_evidence())
        .collect();
    let model = IntentModel::fit(&samples, cfg)?;
    out.write("model.json", model.to_json()?.as_bytes())?;
    Ok(RunRecord {
        config: a.config.clone(),
        seed: None,
        inputs: inputs(&[Some(&a.samples), a.config.as_ref()]),
        outputs,
    })
}

#[derive(Serialize)]
struct PosteriorReport {
    p_yield: f64,
    p_pass: f64,
    most_likely: Intent,
}

fn infer(a: &InferArgs) -> Result<RunRecord> {
    let evidence = EvidenceVector {
        svo: a.svo,
        ra: a.ra,
        rv: a.rv,
        rd: a.rd,
    };
    if !evidence.is_finite() {
        return Err(Error::Usage("evidence values must be finite".into()));
    }
    let outputs = vec!["posterior.json"];
    let out = OutputDir::prepare(&a.output, &outputs)?;
    let model = load_model(&a.model)?;
    let post = model.posterior(&evidence);
    let report = PosteriorReport {
        p_yield: post.p_yield,
        p_pass: post.p_pass,
        most_likely: post.most_likely(),
    };
    let text = json_line(&report)?;
    out.write("posterior.json", text.as_bytes())?;
    print!("{text}");
    Ok(RunRecord {
        config: None,
        seed: None,
        inputs: vec![a.model.clone()],
        outputs,
    })
}

fn train(a: &TrainArgs) -> Result<RunRecord> {
    let augmented = a.agent == Agent::DqnYi;
    match (augmented, &a.model) {
        (true, None) => return Err(Error::Config("--agent dqn-yi requires --model".into())),
        (false, Some(_)) => return Err(Error::Config("--model is only used by --agent dqn-yi".into())),
        _ => {}
    }
    let scenario = load_scenario(a.scenario.as_deref())?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.episodes {
        cfg.episodes = e;
    }
    cfg.validate()?;
    let outputs = vec!["network.json", "rewards.csv", "train-config.json"];
    let out = OutputDir::prepare(&a.output, &outputs)?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    let factory = EnvFactory::new(scenario, model)?;
    let outcome = dqn::train(&factory, &cfg, augmented)?;
    out.write("network.json", outcome.network.to_json()?.as_bytes())?;
    let mut buf = Vec::new();
    dqn::write_reward_curve(&outcome.reward_curve, &mut buf)?;
    out.write("rewards.csv", &buf)?;
    out.write("train-config.json", cfg.to_json()?.as_bytes())?;
    Ok(RunRecord {
        config: a.config.clone(),
        seed: Some(cfg.seed),
        inputs: inputs(&[a.scenario.as_ref(), a.config.as_ref(), a.model.as_ref()]),
        outputs,
    })
}

/// Environment factory matching the network's input width.
fn factory_for(net: &QNetwork, scenario: Option<&Path>, model: Option<&Path>) -> Result<EnvFactory> {
    let scenario = load_scenario(scenario)?;
    let wants_model = net.input_size() == AUGMENTED_OBS_LEN;
    let model = match (wants_model, model) {
        (true, Some(p)) => Some(load_model(p)?),
        (true, None) => {
            return Err(Error::Config("network takes p_yield; pass --model".into()));
        }
        (false, Some(_)) => {
            return Err(Error::Config("network has no p_yield input; drop --model".into()));
        }
        (false, None) => None,
    };
    EnvFactory::new(scenario, model)
}

fn eval(a: &EvalArgs) -> Result<RunRecord> {
    if a.parallel == 0 {
        return Err(Error::Usage("--parallel must be at least 1".into()));
    }
    let outputs = vec!["metrics.json"];
    let out = OutputDir::prepare(&a.output, &outputs)?;
    let net = load_network(&a.network)?;
    let factory = factory_for(&net, a.scenario.as_deref(), a.model.as_deref())?;
    let metrics = dqn::evaluate(&net, &factory, a.episodes, a.seed, a.parallel)?;
    let text = json_line(&metrics)?;
    out.write("metrics.json", text.as_bytes())?;
    print!("{text}");
    Ok(RunRecord {
        config: a.scenario.clone(),
        seed: Some(a.seed),
        inputs: inputs(&[Some(&a.network), a.scenario.as_ref(), a.model.as_ref()]),
        outputs,
    })
}

fn rollout(a: &RolloutArgs) -> Result<RunRecord> {
    let outputs = vec!["trajectory.csv"];
    let out = OutputDir::prepare(&a.output, &outputs)?;
    let net = load_network(&a.network)?;
    let factory = factory_for(&net, a.scenario.as_deref(), a.model.as_deref())?;
    let mut env = factory.make()?;
    env.enable_trace();
    let mut obs = env.reset_with_seed(a.seed)?;
    loop {
        let q = net.forward(&obs.features)?;
        let action = Action::from_index(dqn::argmax(&q)).expect("network has one output per action");
        let r = env.step(action)?;
        if r.done {
            break;
        }
        obs = r.obs;
    }
    let mut buf = Vec::new();
    env::write_trace_csv(&env.take_trace(), &mut buf)?;
    out.write("trajectory.csv", &buf)?;
    Ok(RunRecord {
        config: a.scenario.clone(),
        seed: Some(a.seed),
        inputs: inputs(&[Some(&a.network), a.scenario.as_ref(), a.model.as_ref()]),
        outputs,
    })
}

#[derive(Serialize)]
struct SynthSummary {
    episodes: u32,
    samples: usize,
    skipped_frames: usize,
    collisions: usize,
    mean_svo_yield: Option<f64>,
    mean_svo_pass: Option<f64>,
}

fn run_synth(a: &SynthArgs) -> Result<RunRecord> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_json(&read_text(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(e) = a.episodes {
        cfg.episodes = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let outputs = vec!["samples.csv", "summary.json", "synth-config.json"];
    let out = OutputDir::prepare(&a.output, &outputs)?;
    let episodes = synth::generate(&cfg)?;
    let samples = synth::flatten(&episodes);
    let mut buf = Vec::new();
    ngsim::write_samples(&samples, &mut buf)?;
    out.write("samples.csv", &buf)?;
    let summary = SynthSummary {
        episodes: cfg.episodes,
        samples: samples.len(),
        skipped_frames: episodes.iter().map(|e| e.skipped).sum(),
        collisions: episodes.iter().filter(|e| e.collided).count(),
        mean_svo_yield: synth::class_mean_svo(&episodes, Intent::Yield),
        mean_svo_pass: synth::class_mean_svo(&episodes, Intent::Pass),
    };
    out.write("summary.json", json_line(&summary)?.as_bytes())?;
    out.write("synth-config.json", cfg.to_json()?.as_bytes())?;
    Ok(RunRecord {
        config: a.config.clone(),
        seed: Some(cfg.seed),
        inputs: inputs(&[a.config.as_ref()]),
        outputs,
    })
}
