//! Yield/pass intention inference over discretized Gaussian evidence.
//!
//! Each of the four evidence features (SVO, relative acceleration, relative
//! velocity, relative distance) is modeled per intention class as a Gaussian.
//! The real line is cut into `k` contiguous bins between two truncation
//! percentiles and each class gets a probability table over those bins. The
//! posterior is the normalized product of the per-feature bin probabilities
//! and the class prior.
//!
//! Bin edges for a feature are placed at equal quantiles of the feature's
//! pooled Gaussian and shared by both classes; each class then carries its
//! own masses over those edges. Evidence is binned per class with that
//! class's scheme, so models whose classes carry different edges (hand-built
//! or loaded from disk) are evaluated the same way.

use serde::{Deserialize, Serialize};

use crate::normal;
use crate::{Error, Result};

/// Smoothing floor applied to empty bins before normalization.
pub const MASS_EPS: f64 = 1e-9;
/// Class standard deviations are floored at this fraction of the pooled one.
pub const STD_FLOOR_FRACTION: f64 = 1e-3;
/// Absolute floor, scaled by `1 + |mean|`, for features with no spread at all.
pub const STD_FLOOR_ABS: f64 = 1e-6;
pub const MODEL_SCHEMA: &str = "svo-lc/intent-model@1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Pass = 0,
    Yield = 1,
}

impl Intent {
    pub const ALL: [Intent; 2] = [Intent::Pass, Intent::Yield];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Intent::Pass => "pass",
            Intent::Yield => "yield",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    Svo,
    Ra,
    Rv,
    Rd,
}

impl Feature {
    pub const ALL: [Feature; 4] = [Feature::Svo, Feature::Ra, Feature::Rv, Feature::Rd];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Svo => "svo",
            Feature::Ra => "ra",
            Feature::Rv => "rv",
            Feature::Rd => "rd",
        }
    }
}

/// Observed evidence about the AV/TV pair. Differences are AV minus TV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceVector {
    /// TV's SVO angle, degrees.
    pub svo: f64,
    /// Relative acceleration, m/s².
    pub ra: f64,
    /// Relative velocity, m/s.
    pub rv: f64,
    /// Relative longitudinal distance, m.
    pub rd: f64,
}

impl EvidenceVector {
    pub fn get(&self, f: Feature) -> f64 {
        match f {
            Feature::Svo => self.svo,
            Feature::Ra => self.ra,
            Feature::Rv => self.rv,
            Feature::Rd => self.rd,
        }
    }

    pub fn is_finite(&self) -> bool {
        Feature::ALL.iter().all(|&f| self.get(f).is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: f64,
    pub std: f64,
}

impl GaussianParams {
    pub const STANDARD: GaussianParams = GaussianParams {
        mean: 0.0,
        std: 1.0,
    };

    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !mean.is_finite() || !(std > 0.0 && std.is_finite()) {
            return Err(Error::Config(format!(
                "gaussian requires finite mean and positive std (got mean={mean}, std={std})"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn ppf(&self, p: f64) -> f64 {
        normal::ppf(p, self.mean, self.std)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        normal::cdf(x, self.mean, self.std)
    }

    /// `F(hi) − F(lo)`, evaluated on whichever tail keeps precision.
    pub fn interval_mass(&self, lo: f64, hi: f64) -> f64 {
        if lo >= self.mean {
            let sf = |x: f64| normal::std_cdf(-(x - self.mean) / self.std);
            sf(lo) - sf(hi)
        } else {
            self.cdf(hi) - self.cdf(lo)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationConfig {
    pub k: usize,
    pub p1: f64,
    pub p2: f64,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        Self {
            k: 10,
            p1: 0.001,
            p2: 0.999,
        }
    }
}

impl DiscretizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("bin count k must be >= 2 (got {})", self.k)));
        }
        let ok = self.p1 > 0.0 && self.p1 < self.p2 && self.p2 < 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "percentiles must satisfy 0 < p1 < p2 < 1 (got p1={}, p2={})",
                self.p1, self.p2
            )));
        }
        Ok(())
    }
}

/// `k` contiguous bins `[edges[i], edges[i+1]]` and their normalized masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationScheme {
    pub k: usize,
    pub p1: f64,
    pub p2: f64,
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
}

/// Bins between `PPF(p1)` and `PPF(p2)` at equal quantile spacing of `params`,
/// with masses `F(u_i) − F(l_i)` renormalized to one.
pub fn build_discretization(
    params: GaussianParams,
    k: usize,
    p1: f64,
    p2: f64,
) -> Result<DiscretizationScheme> {
    DiscretizationConfig { k, p1, p2 }.validate()?;
    let edges: Vec<f64> = (0..=k)
        .map(|i| params.ppf(p1 + (p2 - p1) * i as f64 / k as f64))
        .collect();
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!(
            "degenerate bin edges for mean={} std={}",
            params.mean, params.std
        )));
    }
    let masses = masses_over(&edges, params);
    Ok(DiscretizationScheme {
        k,
        p1,
        p2,
        edges,
        masses,
    })
}

fn masses_over(edges: &[f64], params: GaussianParams) -> Vec<f64> {
    let raw: Vec<f64> = edges
        .windows(2)
        .map(|w| params.interval_mass(w[0], w[1]).max(MASS_EPS))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|m| m / total).collect()
}

impl DiscretizationScheme {
    /// The same edges with masses recomputed under another Gaussian.
    pub fn reweighted(&self, params: GaussianParams) -> DiscretizationScheme {
        DiscretizationScheme {
            masses: masses_over(&self.edges, params),
            ..self.clone()
        }
    }

    /// Index of the bin containing `value`; out-of-range values clamp to the
    /// end bins.
    pub fn bin_index(&self, value: f64) -> usize {
        let above = self.edges.partition_point(|&e| e <= value);
        above.saturating_sub(1).min(self.k - 1)
    }

    pub fn mass_of(&self, value: f64) -> f64 {
        self.masses[self.bin_index(value)]
    }

    pub fn validate(&self) -> Result<()> {
        DiscretizationConfig {
            k: self.k,
            p1: self.p1,
            p2: self.p2,
        }
        .validate()?;
        if self.edges.len() != self.k + 1 || self.masses.len() != self.k {
            return Err(Error::Schema(format!(
                "scheme with k={} needs {} edges and {} masses (got {} and {})",
                self.k,
                self.k + 1,
                self.k,
                self.edges.len(),
                self.masses.len()
            )));
        }
        if self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Schema("bin edges must be strictly increasing".into()));
        }
        if self.masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::Schema("bin masses must be finite and non-negative".into()));
        }
        let total: f64 = self.masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Schema(format!("bin masses sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Evidence with its ground-truth intention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledEvidence {
    pub evidence: EvidenceVector,
    pub intent: Intent,
}

/// Per-class Gaussians and prior, before discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGaussians {
    /// `[P(pass), P(yield)]`.
    pub prior: [f64; 2],
    /// Gaussian of each feature over all samples; sets the shared bin edges.
    pub pooled: [GaussianParams; 4],
    /// `classes[intent][feature]`.
    pub classes: [[GaussianParams; 4]; 2],
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sample mean and population standard deviation per class and feature;
/// prior = class frequency.
pub fn fit_class_gaussians(samples: &[LabeledEvidence]) -> Result<ClassGaussians> {
    let mut counts = [0usize; 2];
    for s in samples {
        if !s.evidence.is_finite() {
            return Err(Error::Config(format!(
                "non-finite evidence in training data: {:?}",
                s.evidence
            )));
        }
        counts[s.intent.index()] += 1;
    }
    for intent in Intent::ALL {
        if counts[intent.index()] < 2 {
            return Err(Error::InsufficientClassData {
                class: intent.name(),
                count: counts[intent.index()],
            });
        }
    }

    let total = samples.len() as f64;
    let mut pooled = [GaussianParams::STANDARD; 4];
    let mut classes = [[GaussianParams::STANDARD; 4]; 2];
    for (fi, &feature) in Feature::ALL.iter().enumerate() {
        let (gmean, gstd) = mean_std(samples.iter().map(|s| s.evidence.get(feature)));
        let floor = (gstd * STD_FLOOR_FRACTION).max(STD_FLOOR_ABS * (1.0 + gmean.abs()));
        pooled[fi] = GaussianParams {
            mean: gmean,
            std: gstd.max(floor),
        };
        for intent in Intent::ALL {
            let (mean, std) = mean_std(
                samples
                    .iter()
                    .filter(|s| s.intent == intent)
                    .map(|s| s.evidence.get(feature)),
            );
            classes[intent.index()][fi] = GaussianParams {
                mean,
                std: std.max(floor),
            };
        }
    }
    Ok(ClassGaussians {
        prior: [
            counts[0] as f64 / total,
            counts[1] as f64 / total,
        ],
        pooled,
        classes,
    })
}

/// One class/feature conditional probability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCpt {
    pub mean: f64,
    pub std: f64,
    #[serde(flatten)]
    pub scheme: DiscretizationScheme,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentPosterior {
    pub p_yield: f64,
    pub p_pass: f64,
}

impl IntentPosterior {
    pub fn most_likely(&self) -> Intent {
        if self.p_yield > self.p_pass {
            Intent::Yield
        } else {
            Intent::Pass
        }
    }
}

/// A fitted, discretized yield/pass model. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentModel {
    prior: [f64; 2],
    config: DiscretizationConfig,
    /// `cpts[intent][feature]`.
    cpts: [[FeatureCpt; 4]; 2],
}

impl IntentModel {
    /// Discretizes fitted Gaussians: edges from the pooled Gaussian of each
    /// feature, masses from each class Gaussian over those edges.
    pub fn build(gaussians: &ClassGaussians, config: DiscretizationConfig) -> Result<Self> {
        config.validate()?;
        let prior = normalized_prior(gaussians.prior)?;
        let mut shared = Vec::with_capacity(4);
        for pooled in gaussians.pooled {
            shared.push(build_discretization(pooled, config.k, config.p1, config.p2)?);
        }
        let cpts = Intent::ALL.map(|intent| {
            let mut fi = 0;
            [(); 4].map(|_| {
                let g = gaussians.classes[intent.index()][fi];
                let cpt = FeatureCpt {
                    mean: g.mean,
                    std: g.std,
                    scheme: shared[fi].reweighted(g),
                };
                fi += 1;
                cpt
            })
        });
        Ok(Self {
            prior,
            config,
            cpts,
        })
    }

    /// Fits and discretizes in one go.
    pub fn fit(samples: &[LabeledEvidence], config: DiscretizationConfig) -> Result<Self> {
        Self::build(&fit_class_gaussians(samples)?, config)
    }

    /// Assembles a model from explicit tables. `cpts[intent][feature]`.
    pub fn from_parts(prior_yield: f64, cpts: [[FeatureCpt; 4]; 2]) -> Result<Self> {
        let prior = normalized_prior([1.0 - prior_yield, prior_yield])?;
        let k = cpts[0][0].scheme.k;
        for cpt in cpts.iter().flatten() {
            cpt.scheme.validate()?;
            GaussianParams::new(cpt.mean, cpt.std)?;
            if cpt.scheme.k != k {
                return Err(Error::Schema("every class/feature scheme must share k".into()));
            }
        }
        let s = &cpts[0][0].scheme;
        Ok(Self {
            prior,
            config: DiscretizationConfig {
                k,
                p1: s.p1,
                p2: s.p2,
            },
            cpts,
        })
    }

    pub fn prior_yield(&self) -> f64 {
        self.prior[Intent::Yield.index()]
    }

    pub fn prior_pass(&self) -> f64 {
        self.prior[Intent::Pass.index()]
    }

    pub fn config(&self) -> DiscretizationConfig {
        self.config
    }

    pub fn cpt(&self, intent: Intent, feature: Feature) -> &FeatureCpt {
        &self.cpts[intent.index()][feature as usize]
    }

    /// `P(E, I) = P(I) · Π_f P(bin_f | I)`. Non-finite evidence entries are
    /// treated as unobserved and contribute no factor.
    pub fn joint(&self, intent: Intent, evidence: &EvidenceVector) -> f64 {
        let tables = &self.cpts[intent.index()];
        let mut p = self.prior[intent.index()];
        for (fi, &feature) in Feature::ALL.iter().enumerate() {
            let v = evidence.get(feature);
            if v.is_finite() {
                p *= tables[fi].scheme.mass_of(v);
            }
        }
        p
    }

    pub fn posterior(&self, evidence: &EvidenceVector) -> IntentPosterior {
        let j_pass = self.joint(Intent::Pass, evidence);
        let j_yield = self.joint(Intent::Yield, evidence);
        let total = j_pass + j_yield;
        if total == 0.0 || !total.is_finite() {
            return IntentPosterior {
                p_yield: self.prior_yield(),
                p_pass: self.prior_pass(),
            };
        }
        IntentPosterior {
            p_yield: j_yield / total,
            p_pass: j_pass / total,
        }
    }

    /// The model with class labels and priors exchanged.
    pub fn swapped(&self) -> IntentModel {
        let [pass, yield_] = self.cpts.clone();
        IntentModel {
            prior: [self.prior[1], self.prior[0]],
            config: self.config,
            cpts: [yield_, pass],
        }
    }

    /// Re-discretizes with a different bin layout, keeping the Gaussians.
    /// Shared edges come from the moment-matched mixture of the two classes.
    pub fn rebinned(&self, config: DiscretizationConfig) -> Result<IntentModel> {
        let mut pooled = [GaussianParams::STANDARD; 4];
        let mut classes = [[GaussianParams::STANDARD; 4]; 2];
        for fi in 0..4 {
            let mut mean = 0.0;
            let mut second = 0.0;
            for intent in Intent::ALL {
                let c = &self.cpts[intent.index()][fi];
                let w = self.prior[intent.index()];
                mean += w * c.mean;
                second += w * (c.std * c.std + c.mean * c.mean);
                classes[intent.index()][fi] = GaussianParams {
                    mean: c.mean,
                    std: c.std,
                };
            }
            pooled[fi] = GaussianParams::new(mean, (second - mean * mean).max(0.0).sqrt())?;
        }
        IntentModel::build(
            &ClassGaussians {
                prior: self.prior,
                pooled,
                classes,
            },
            config,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument::from(self);
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        doc.into_model()
    }
}

fn normalized_prior(prior: [f64; 2]) -> Result<[f64; 2]> {
    let total = prior[0] + prior[1];
    if !(prior.iter().all(|p| p.is_finite() && *p >= 0.0) && total > 0.0) {
        return Err(Error::Config(format!("invalid class prior {prior:?}")));
    }
    Ok([prior[0] / total, prior[1] / total])
}

#[derive(Serialize, Deserialize)]
struct FeatureTables {
    svo: FeatureCpt,
    ra: FeatureCpt,
    rv: FeatureCpt,
    rd: FeatureCpt,
}

impl FeatureTables {
    fn from_array(a: &[FeatureCpt; 4]) -> Self {
        let [svo, ra, rv, rd] = a.clone();
        Self { svo, ra, rv, rd }
    }

    fn into_array(self) -> [FeatureCpt; 4] {
        [self.svo, self.ra, self.rv, self.rd]
    }
}

#[derive(Serialize, Deserialize)]
struct ClassTables {
    pass: FeatureTables,
    #[serde(rename = "yield")]
    yield_: FeatureTables,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    schema: String,
    prior_yield: f64,
    prior_pass: f64,
    classes: ClassTables,
}

impl From<&IntentModel> for ModelDocument {
    fn from(m: &IntentModel) -> Self {
        ModelDocument {
            schema: MODEL_SCHEMA.to_string(),
            prior_yield: m.prior_yield(),
            prior_pass: m.prior_pass(),
            classes: ClassTables {
                pass: FeatureTables::from_array(&m.cpts[0]),
                yield_: FeatureTables::from_array(&m.cpts[1]),
            },
        }
    }
}

impl ModelDocument {
    fn into_model(self) -> Result<IntentModel> {
        if self.schema != MODEL_SCHEMA {
            return Err(Error::Schema(format!(
                "expected schema {MODEL_SCHEMA:?}, found {:?}",
                self.schema
            )));
        }
        if ((self.prior_yield + self.prior_pass) - 1.0).abs() > 1e-9 {
            return Err(Error::Schema("class priors must sum to 1".into()));
        }
        let mut model = IntentModel::from_parts(
            self.prior_yield,
            [self.classes.pass.into_array(), self.classes.yield_.into_array()],
        )?;
        model.prior = [self.prior_pass, self.prior_yield];
        Ok(model)
    }
}
