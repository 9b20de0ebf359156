//! Deep Q-learning with a small fully connected network and hand-written
//! backpropagation.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvFactory, LaneChangeEnv, Observation};
use crate::rng::{self, SimRng};
use crate::{Error, Result};

pub const NETWORK_SCHEMA: &str = "svo-lc/qnetwork@1";
pub const TRAIN_SCHEMA: &str = "svo-lc/train-config@1";

/// Stream tags for seed derivation, so that training, exploration, replay
/// sampling and evaluation never share a random sequence.
const STREAM_INIT: u64 = 0x11;
const STREAM_EXPLORE: u64 = 0x22;
const STREAM_REPLAY: u64 = 0x33;
const STREAM_EPISODE: u64 = 0x44;
const STREAM_EVAL: u64 = 0x55;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            out.push(dot + self.biases[o]);
        }
    }
}

/// Feedforward Q-network: ReLU on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    layers: Vec<Layer>,
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    schema: String,
    sizes: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-parameter gradient, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases))
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }
}

impl QNetwork {
    /// He-uniform initialization with zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let mut rng: SimRng = rng::stream(seed, STREAM_INIT);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let mut l = Layer::zeros(w[0], w[1]);
                let limit = (6.0 / w[0] as f64).sqrt();
                for v in &mut l.weights {
                    *v = rng.gen_range(-limit..limit);
                }
                l
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        Ok(Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::Config(format!("layer {i} parameter shapes do not match")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::Config(format!("layer {i} input size does not chain")));
            }
        }
        if layers.last().map(|l| l.outputs) != Some(Action::COUNT) {
            return Err(Error::Config(format!("network must output {} action values", Action::COUNT)));
        }
        let net = Self { layers };
        if !net.is_finite() {
            return Err(Error::Config("network parameters must be finite".into()));
        }
        Ok(net)
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        if sizes.last() != Some(&Action::COUNT) {
            return Err(Error::Config(format!("network must output {} action values", Action::COUNT)));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_size() {
            return Err(Error::Usage(format!(
                "observation has {} features, network expects {}",
                x.len(),
                self.input_size()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Activations of every layer, input first; hidden entries are post-ReLU.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.affine(acts.last().unwrap(), &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    /// Plain gradient descent step `θ ← θ − η·∇`.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
            l.biases.iter_mut().zip(&g.biases).for_each(|(b, d)| *b -= lr * d);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = NetworkDoc {
            schema: NETWORK_SCHEMA.to_string(),
            sizes: self.sizes(),
            layers: self.layers.clone(),
        };
        Ok(serde_json::to_string(&doc)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDoc = serde_json::from_str(text)?;
        if doc.schema != NETWORK_SCHEMA {
            return Err(Error::Schema(format!(
                "expected schema {NETWORK_SCHEMA:?}, found {:?}",
                doc.schema
            )));
        }
        let net = Self::from_layers(doc.layers)?;
        if net.sizes() != doc.sizes {
            return Err(Error::Schema("declared sizes do not match the layers".into()));
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn td_targets(batch: &[&Transition], target: &QNetwork, gamma: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            if t.terminal {
                return Ok(t.reward);
            }
            let q = target.forward(&t.next_state)?;
            Ok(t.reward + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

/// Mean squared TD error over the batch and its gradient; only the taken
/// action's output carries error.
pub fn loss_and_grad(net: &QNetwork, batch: &[&Transition], targets: &[f64]) -> Result<(f64, Gradients)> {
    if batch.len() != targets.len() {
        return Err(Error::Usage(format!(
            "{} targets for a batch of {}",
            targets.len(),
            batch.len()
        )));
    }
    let mut grads = net.zero_gradients();
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for (t, &y) in batch.iter().zip(targets) {
        net.check_input(&t.state)?;
        let acts = net.forward_trace(&t.state);
        let out = acts.last().unwrap();
        let a = t.action.index();
        let err = y - out[a];
        loss += err * err;

        let mut delta = vec![0.0; out.len()];
        delta[a] = -2.0 * err / n;
        for li in (0..net.layers.len()).rev() {
            let layer = &net.layers[li];
            let input = &acts[li];
            let g = &mut grads.layers[li];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
            }
            // ReLU derivative; a unit at exactly zero is treated as inactive.
            for (p, x) in prev.iter_mut().zip(input) {
                if *x <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    Ok((loss / n, grads))
}

pub fn select_action<R: Rng>(net: &QNetwork, obs: &[f64], epsilon: f64, rng: &mut R) -> Result<Action> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Usage(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(Action::ALL[rng.gen_range(0..Action::COUNT)]);
    }
    let q = net.forward(obs)?;
    Ok(Action::ALL[argmax(&q)])
}

/// Fixed-capacity FIFO experience store.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sampling with replacement.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schema: String,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    /// Gradient steps between target-network copies.
    pub target_update_every: u64,
    pub episodes: u32,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// When non-zero, ε decays linearly from 1 to `epsilon` over this many
    /// episodes before holding constant.
    pub epsilon_warmup_episodes: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema: TRAIN_SCHEMA.to_string(),
            gamma: 0.9,
            replay_capacity: 2000,
            minibatch: 32,
            learning_rate: 0.001,
            epsilon: 0.1,
            target_update_every: 1000,
            episodes: 3000,
            seed: 0,
            hidden: vec![64, 64],
            epsilon_warmup_episodes: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1) (got {})", self.gamma));
        }
        if self.minibatch == 0 || self.replay_capacity < self.minibatch {
            return bad(format!(
                "replay capacity {} must be at least the minibatch {} (> 0)",
                self.replay_capacity, self.minibatch
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive (got {})", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1] (got {})", self.epsilon));
        }
        if self.target_update_every == 0 {
            return bad("target_update_every must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        if cfg.schema != TRAIN_SCHEMA {
            return Err(Error::Schema(format!(
                "expected schema {TRAIN_SCHEMA:?}, found {:?}",
                cfg.schema
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    fn epsilon_at(&self, episode: u32) -> f64 {
        let n = self.epsilon_warmup_episodes;
        if n == 0 || episode >= n {
            return self.epsilon;
        }
        let frac = episode as f64 / n as f64;
        1.0 + (self.epsilon - 1.0) * frac
    }
}

/// Seed of the `i`-th training episode.
pub fn train_episode_seed(seed: u64, episode: u32) -> u64 {
    rng::mix(rng::mix(seed, STREAM_EPISODE), episode as u64)
}

/// Seed of the `i`-th evaluation episode.
pub fn eval_episode_seed(seed: u64, episode: u32) -> u64 {
    rng::mix(rng::mix(seed, STREAM_EVAL), episode as u64)
}

/// Episode-by-episode training driver.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    env: LaneChangeEnv,
    online: QNetwork,
    target: QNetwork,
    buffer: ReplayBuffer,
    explore_rng: SimRng,
    replay_rng: SimRng,
    episode: u32,
    gradient_steps: u64,
    target_syncs: u64,
    last_loss: f64,
}

impl Trainer {
    /// `augmented` selects DQN-YI; it requires the factory to carry a model.
    pub fn new(factory: &EnvFactory, cfg: TrainConfig, augmented: bool) -> Result<Self> {
        cfg.validate()?;
        if augmented && factory.model.is_none() {
            return Err(Error::Config("the intention-augmented agent requires an intent model".into()));
        }
        let plain;
        let factory = if augmented {
            factory
        } else {
            plain = EnvFactory {
                scenario: factory.scenario.clone(),
                model: None,
            };
            &plain
        };
        let env = factory.make()?;
        let mut sizes = vec![env.observation_len()];
        sizes.extend(&cfg.hidden);
        sizes.push(Action::COUNT);
        let online = QNetwork::new(&sizes, cfg.seed)?;
        Ok(Self {
            target: online.clone(),
            online,
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            explore_rng: rng::stream(cfg.seed, STREAM_EXPLORE),
            replay_rng: rng::stream(cfg.seed, STREAM_REPLAY),
            env,
            cfg,
            episode: 0,
            gradient_steps: 0,
            target_syncs: 0,
            last_loss: 0.0,
        })
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn gradient_steps(&self) -> u64 {
        self.gradient_steps
    }

    pub fn target_syncs(&self) -> u64 {
        self.target_syncs
    }

    pub fn episodes_done(&self) -> u32 {
        self.episode
    }

    pub fn last_loss(&self) -> f64 {
        self.last_loss
    }

    /// Runs one episode, learning after every policy step; returns its
    /// cumulative reward.
    pub fn run_episode(&mut self) -> Result<f64> {
        let epsilon = self.cfg.epsilon_at(self.episode);
        let mut obs = self
            .env
            .reset_with_seed(train_episode_seed(self.cfg.seed, self.episode))?;
        let mut total = 0.0;
        loop {
            let action = select_action(&self.online, &obs.features, epsilon, &mut self.explore_rng)?;
            let r = self.env.step(action)?;
            total += r.reward;
            self.buffer.push(Transition {
                state: obs.features,
                action,
                reward: r.reward,
                next_state: r.obs.features.clone(),
                terminal: r.done,
            });
            if self.buffer.len() >= self.cfg.minibatch {
                self.learn()?;
            }
            obs = r.obs;
            if r.done {
                break;
            }
        }
        self.episode += 1;
        Ok(total)
    }

    fn learn(&mut self) -> Result<()> {
        let batch = self.buffer.sample(self.cfg.minibatch, &mut self.replay_rng);
        let targets = td_targets(&batch, &self.target, self.cfg.gamma)?;
        let (loss, grads) = loss_and_grad(&self.online, &batch, &targets)?;
        self.online.apply_sgd(&grads, self.cfg.learning_rate);
        if !self.online.is_finite() {
            return Err(Error::Usage(format!(
                "network diverged at gradient step {}",
                self.gradient_steps + 1
            )));
        }
        self.last_loss = loss;
        self.gradient_steps += 1;
        if self.gradient_steps % self.cfg.target_update_every == 0 {
            self.target = self.online.clone();
            self.target_syncs += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub network: QNetwork,
    pub reward_curve: Vec<f64>,
    pub gradient_steps: u64,
}

pub fn train(factory: &EnvFactory, cfg: &TrainConfig, augmented: bool) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(factory, cfg.clone(), augmented)?;
    let mut curve = Vec::with_capacity(cfg.episodes as usize);
    for _ in 0..cfg.episodes {
        curve.push(trainer.run_episode()?);
    }
    Ok(TrainOutcome {
        gradient_steps: trainer.gradient_steps,
        network: trainer.online,
        reward_curve: curve,
    })
}

/// Trailing moving average; entry `i` averages episodes `max(0, i+1-w)..=i`.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for i in 0..series.len() {
        sum += series[i];
        if i >= w {
            sum -= series[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

pub fn write_reward_curve<W: Write>(curve: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "reward"])?;
    for (i, r) in curve.iter().enumerate() {
        w.write_record([i.to_string(), r.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<reward curve>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: u32,
    /// Percent of episodes ending in a collision.
    pub collision_rate: f64,
    /// Percent of episodes counted as successful.
    pub success_rate: f64,
    pub avg_reward: f64,
    /// Mean AV speed over every policy step of every episode, m/s.
    pub avg_speed: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct EpisodeStats {
    collided: bool,
    success: bool,
    reward: f64,
    speed_sum: f64,
    steps: u64,
}

fn run_eval_episode<P>(factory: &EnvFactory, seed: u64, policy: &P) -> Result<EpisodeStats>
where
    P: Fn(&Observation) -> Result<Action>,
{
    let mut env = factory.make()?;
    let mut obs = env.reset_with_seed(seed)?;
    let mut s = EpisodeStats::default();
    loop {
        let r = env.step(policy(&obs)?)?;
        s.reward += r.reward;
        s.speed_sum += r.info.av_speed;
        s.steps += 1;
        if r.done {
            s.collided = r.info.collided;
            s.success = r.info.success;
            break;
        }
        obs = r.obs;
    }
    Ok(s)
}

/// Runs `policy` over seeded episodes. With `threads > 1` episodes fan out
/// over a thread pool; per-episode results are merged in episode order, so
/// the metrics do not depend on the thread count.
pub fn evaluate_policy<P>(
    factory: &EnvFactory,
    episodes: u32,
    seed: u64,
    threads: usize,
    policy: P,
) -> Result<EvalMetrics>
where
    P: Fn(&Observation) -> Result<Action> + Sync,
{
    if episodes == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let run = |i: u32| run_eval_episode(factory, eval_episode_seed(seed, i), &policy);
    let stats: Vec<EpisodeStats> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
        pool.install(|| (0..episodes).into_par_iter().map(run).collect::<Result<_>>())?
    } else {
        (0..episodes).map(run).collect::<Result<_>>()?
    };
    let n = episodes as f64;
    let collisions = stats.iter().filter(|s| s.collided).count() as f64;
    let successes = stats.iter().filter(|s| s.success).count() as f64;
    let reward: f64 = stats.iter().map(|s| s.reward).sum();
    let speed: f64 = stats.iter().map(|s| s.speed_sum).sum();
    let steps: u64 = stats.iter().map(|s| s.steps).sum();
    Ok(EvalMetrics {
        episodes,
        collision_rate: 100.0 * collisions / n,
        success_rate: 100.0 * successes / n,
        avg_reward: reward / n,
        avg_speed: speed / steps as f64,
    })
}

/// Greedy evaluation of a trained network.
pub fn evaluate(net: &QNetwork, factory: &EnvFactory, episodes: u32, seed: u64, threads: usize) -> Result<EvalMetrics> {
    let expected = factory.make()?.observation_len();
    if net.input_size() != expected {
        return Err(Error::Config(format!(
            "network expects {} inputs but the environment produces {expected}",
            net.input_size()
        )));
    }
    evaluate_policy(factory, episodes, seed, threads, |obs| {
        Ok(Action::ALL[argmax(&net.forward(&obs.features)?)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ScenarioConfig, TvMode};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_net(sizes: &[usize], seed: u64) -> QNetwork {
        let mut net = QNetwork::new(sizes, seed).unwrap();
        let mut rng = rng::seeded(seed ^ 0xb1a5);
        for l in net.layers_mut() {
            for b in &mut l.biases {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        net
    }

    fn random_vec(n: usize, rng: &mut SimRng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Triple-loop forward pass written independently of `Layer::affine`.
    fn naive_forward(net: &QNetwork, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = net.layers().len();
        for (li, l) in net.layers().iter().enumerate() {
            let mut z = vec![0.0; l.outputs];
            for o in 0..l.outputs {
                let mut acc = l.biases[o];
                for i in 0..l.inputs {
                    acc += l.weights[o * l.inputs + i] * a[i];
                }
                z[o] = if li + 1 < n { acc.max(0.0) } else { acc };
            }
            a = z;
        }
        a
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = QNetwork::zeros(&[12, 64, 64, 5]).unwrap();
        assert_eq!(net.forward(&[0.3; 12]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn identity_fixture_passes_input_through() {
        let mut l = Layer::zeros(5, 5);
        for i in 0..5 {
            l.weights[i * 5 + i] = 1.0;
        }
        let net = QNetwork::from_layers(vec![l]).unwrap();
        let x = [0.1, -0.2, 0.3, -0.4, 0.5];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let net = QNetwork::new(&[13, 64, 64, 5], 1).unwrap();
        assert!(matches!(net.forward(&[0.0; 12]), Err(Error::Usage(_))));
        assert!(QNetwork::new(&[13, 64, 4], 1).is_err());
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = rng::seeded(9);
        for s in 0..20 {
            let net = random_net(&[13, 64, 64, 5], s);
            let x = random_vec(13, &mut rng);
            let got = net.forward(&x).unwrap();
            let want = naive_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-10);
            }
        }
    }

    fn transition(state: Vec<f64>, action: usize, reward: f64, next: Vec<f64>, terminal: bool) -> Transition {
        Transition {
            state,
            action: Action::ALL[action],
            reward,
            next_state: next,
            terminal,
        }
    }

    #[test]
    fn td_target_cases() {
        let net = random_net(&[4, 8, 5], 3);
        let t = transition(vec![0.0; 4], 0, -1.5, vec![0.5; 4], true);
        assert_eq!(td_targets(&[&t], &net, 0.9).unwrap(), vec![-1.5]);
        let t = transition(vec![0.0; 4], 0, 2.0, vec![0.5; 4], false);
        assert_eq!(td_targets(&[&t], &net, 0.0).unwrap(), vec![2.0]);

        let mut rng = rng::seeded(4);
        let batch: Vec<Transition> = (0..16)
            .map(|i| transition(random_vec(4, &mut rng), i % 5, rng.gen_range(-1.0..3.0), random_vec(4, &mut rng), i % 4 == 0))
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let ys = td_targets(&refs, &net, 0.9).unwrap();
        for (t, y) in batch.iter().zip(&ys) {
            let q = naive_forward(&net, &t.next_state);
            let best = q.iter().cloned().fold(f64::MIN, f64::max);
            let want = if t.terminal { t.reward } else { t.reward + 0.9 * best };
            assert!((y - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_zero_at_targets() {
        let net = random_net(&[6, 16, 5], 5);
        let mut rng = rng::seeded(6);
        let batch: Vec<Transition> = (0..8)
            .map(|i| transition(random_vec(6, &mut rng), i % 5, 0.0, random_vec(6, &mut rng), false))
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let ys: Vec<f64> = batch.iter().map(|t| net.forward(&t.state).unwrap()[t.action.index()]).collect();
        let (loss, g) = loss_and_grad(&net, &refs, &ys).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn single_parameter_chain_rule() {
        // One linear layer: q_a = w·x + b, so ∂L/∂w = −2(y − q)·x.
        let mut l = Layer::zeros(1, 5);
        l.weights[2] = 0.7;
        l.biases[2] = 0.1;
        let net = QNetwork::from_layers(vec![l]).unwrap();
        let t = transition(vec![2.0], 2, 0.0, vec![0.0], true);
        let q = 0.7 * 2.0 + 0.1;
        let y = 3.0;
        let (loss, g) = loss_and_grad(&net, &[&t], &[y]).unwrap();
        assert!((loss - (y - q) * (y - q)).abs() < 1e-12);
        assert!((g.layers[0].weights[2] - (-2.0 * (y - q) * 2.0)).abs() < 1e-12);
        assert!((g.layers[0].biases[2] - (-2.0 * (y - q))).abs() < 1e-12);
        assert_eq!(g.layers[0].weights[0], 0.0);
    }

    #[test]
    fn greedy_and_tie_break() {
        let mut l = Layer::zeros(1, 5);
        l.biases = vec![0.0, 2.0, 1.0, 2.0, -1.0];
        let net = QNetwork::from_layers(vec![l]).unwrap();
        let mut rng = rng::seeded(0);
        assert_eq!(select_action(&net, &[0.0], 0.0, &mut rng).unwrap(), Action::LaneRight);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert!(select_action(&net, &[0.0], 1.5, &mut rng).is_err());
    }

    #[test]
    fn full_exploration_is_uniform() {
        let net = QNetwork::zeros(&[1, 5]).unwrap();
        let mut rng = rng::seeded(77);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[select_action(&net, &[0.0], 1.0, &mut rng).unwrap().index()] += 1;
        }
        let p = 0.2;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn replay_buffer_is_fifo_and_bounded() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(transition(vec![i as f64], 0, i as f64, vec![0.0], false));
            assert!(buf.len() <= 3);
        }
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        let a: Vec<f64> = buf.sample(10, &mut rng::seeded(1)).iter().map(|t| t.reward).collect();
        let b: Vec<f64> = buf.sample(10, &mut rng::seeded(1)).iter().map(|t| t.reward).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn network_json_round_trip() {
        let net = random_net(&[13, 64, 64, 5], 8);
        let back = QNetwork::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(net, back);
        let bad = net.to_json().unwrap().replace(NETWORK_SCHEMA, "x");
        assert!(matches!(QNetwork::from_json(&bad), Err(Error::Schema(_))));
    }

    #[test]
    fn moving_average_oracle() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(moving_average(&s, 2), vec![1.0, 1.5, 2.5, 3.5, 4.5]);
        assert_eq!(moving_average(&s, 10)[4], 3.0);
    }

    #[test]
    fn train_config_validation() {
        let mut c = TrainConfig::default();
        c.gamma = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.replay_capacity = 16;
        assert!(c.validate().is_err());
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn epsilon_warmup_schedule() {
        let mut c = TrainConfig::default();
        assert_eq!(c.epsilon_at(0), 0.1);
        c.epsilon_warmup_episodes = 10;
        assert_eq!(c.epsilon_at(0), 1.0);
        assert!((c.epsilon_at(5) - 0.55).abs() < 1e-12);
        assert_eq!(c.epsilon_at(10), 0.1);
    }

    fn factory() -> EnvFactory {
        EnvFactory::new(ScenarioConfig::default().with_mode(TvMode::Random), None).unwrap()
    }

    #[test]
    fn augmented_without_model_is_config_error() {
        let err = Trainer::new(&factory(), TrainConfig::default(), true).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_episodes_leaves_network_untouched() {
        let mut cfg = TrainConfig::default();
        cfg.episodes = 0;
        cfg.seed = 3;
        let out = train(&factory(), &cfg, false).unwrap();
        assert!(out.reward_curve.is_empty());
        assert_eq!(out.network, QNetwork::new(&[12, 64, 64, 5], 3).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let mut cfg = TrainConfig::default();
        cfg.episodes = 6;
        cfg.seed = 21;
        let a = train(&factory(), &cfg, false).unwrap();
        let b = train(&factory(), &cfg, false).unwrap();
        assert_eq!(a.reward_curve, b.reward_curve);
        assert_eq!(a.network, b.network);
        assert!(a.gradient_steps > 0);
    }

    #[test]
    fn target_network_constant_between_syncs() {
        let mut cfg = TrainConfig::default();
        cfg.target_update_every = 10;
        cfg.minibatch = 8;
        cfg.replay_capacity = 64;
        cfg.seed = 4;
        let mut tr = Trainer::new(&factory(), cfg, false).unwrap();
        let mut snapshot = tr.target().clone();
        let mut syncs = tr.target_syncs();
        for _ in 0..30 {
            tr.run_episode().unwrap();
            if tr.target_syncs() == syncs {
                assert_eq!(tr.target(), &snapshot);
            } else {
                assert_eq!(tr.target_syncs(), tr.gradient_steps() / 10);
                snapshot = tr.target().clone();
                syncs = tr.target_syncs();
            }
        }
        assert!(syncs > 0);
    }

    #[test]
    fn empty_evaluation_errors() {
        let net = QNetwork::zeros(&[12, 5]).unwrap();
        assert!(matches!(evaluate(&net, &factory(), 0, 0, 1), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn off_road_policy_metrics() {
        let mut cfg = ScenarioConfig::default().with_mode(TvMode::Random);
        cfg.av_init.lane = 0;
        cfg.fv_init.lane = 0;
        cfg.tv_init.lane = 1;
        let f = EnvFactory::new(cfg, None).unwrap();
        let m = evaluate_policy(&f, 10, 0, 1, |_| Ok(Action::LaneRight)).unwrap();
        assert_eq!(m.collision_rate, 0.0);
        assert_eq!(m.success_rate, 0.0);
        assert!(m.avg_reward.abs() < 1e-9);
    }

    #[test]
    fn parallel_evaluation_matches_sequential() {
        let net = QNetwork::new(&[12, 64, 64, 5], 2).unwrap();
        let a = evaluate(&net, &factory(), 24, 5, 1).unwrap();
        let b = evaluate(&net, &factory(), 24, 5, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.collision_rate + a.success_rate <= 100.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn sgd_keeps_parameters_finite(seed in 0u64..1000, lr in 1e-4f64..1e-2) {
            let mut net = random_net(&[13, 64, 64, 5], seed);
            let mut rng = rng::seeded(seed);
            let batch: Vec<Transition> = (0..32)
                .map(|i| transition(random_vec(13, &mut rng), i % 5, rng.gen_range(-1.5..3.0), random_vec(13, &mut rng), i % 7 == 0))
                .collect();
            let refs: Vec<&Transition> = batch.iter().collect();
            let target = net.clone();
            for _ in 0..5 {
                let ys = td_targets(&refs, &target, 0.9).unwrap();
                let (_, g) = loss_and_grad(&net, &refs, &ys).unwrap();
                net.apply_sgd(&g, lr);
                prop_assert!(net.is_finite());
            }
        }
    }
}
