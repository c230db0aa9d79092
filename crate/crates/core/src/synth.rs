//! Synthetic context/activity data with a known generative model.
//!
//! Every label owns a unit prototype in feature space. An instance draws one
//! context `c`, then an activity set `A` by the anchor scheme: pick an
//! anchor activity `a` (or none) with probability `q_a`, then add every other
//! activity `b` independently with probability `M[a][b]`. Anchor
//! probabilities are solved from the requested marginal rates `r` through
//! `r = q + Mᵀq`. Features are
//!
//! `x = normalize(Σ_{j∈A} p_j) + context_scale·p_c + N(0, σ²I)`.
//!
//! Because the hypothesis space is small, [`bayes_oracle`] enumerates it
//! exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::align::PredictionSet;
use crate::dataio::{write_feature_dataset, Dataset, Instance, LabelSchema};
use crate::error::{Error, Result};
use crate::labels::{EmbeddingRow, LabelEmbeddingTable, TemplateTable};
use crate::nn::Matrix;
use crate::rng::{rng_for, rng_indexed, SeededRng};
use crate::signal::{FeatureVector, LabelTrack, Recording};

/// Largest activity count the oracle will enumerate.
pub const MAX_ORACLE_ACTIVITIES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoOccurrence {
    pub anchor: String,
    pub with: String,
    pub prob: f64,
}

/// Prototype of `second` is built at the given cosine to `first`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarPair {
    pub first: String,
    pub second: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbeddingMode {
    /// Prototypes mapped isometrically into `dim` coordinates plus
    /// per-coordinate Gaussian noise, then normalized.
    Informative { dim: usize, noise: f64 },
    /// Fresh random unit vectors.
    Uninformative { dim: usize },
}

impl EmbeddingMode {
    pub fn dim(&self) -> usize {
        match *self {
            EmbeddingMode::Informative { dim, .. } | EmbeddingMode::Uninformative { dim } => dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub contexts: Vec<String>,
    pub activities: Vec<String>,
    pub feature_dim: usize,
    pub n: usize,
    pub users: usize,
    pub sigma: f64,
    pub context_scale: f64,
    /// Context probabilities; empty means uniform.
    #[serde(default)]
    pub context_weights: Vec<f64>,
    /// Marginal positive rate of each activity.
    pub activity_rates: Vec<f64>,
    #[serde(default)]
    pub co_occurrence: Vec<CoOccurrence>,
    #[serde(default)]
    pub similar_pairs: Vec<SimilarPair>,
    pub embedding: EmbeddingMode,
    pub seed: u64,
}

impl SynthSpec {
    /// Labels named `Context {i}` / `Activity {i}`, equal rates `min(0.3, 0.9/k)`,
    /// no structure.
    pub fn basic(n_ctx: usize, n_act: usize, feature_dim: usize, n: usize, sigma: f64, seed: u64) -> Self {
        SynthSpec {
            contexts: (0..n_ctx).map(|i| format!("Context {i}")).collect(),
            activities: (0..n_act).map(|i| format!("Activity {i}")).collect(),
            feature_dim,
            n,
            users: 4,
            sigma,
            context_scale: 1.0,
            context_weights: Vec::new(),
            activity_rates: vec![0.3f64.min(0.9 / n_act as f64); n_act],
            co_occurrence: Vec::new(),
            similar_pairs: Vec::new(),
            embedding: EmbeddingMode::Informative {
                dim: feature_dim,
                noise: 0.02,
            },
            seed,
        }
    }

    pub fn schema(&self) -> Result<LabelSchema> {
        LabelSchema::new(self.contexts.clone(), self.activities.clone(), Vec::new())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    fn label_index(&self, label: &str) -> Option<usize> {
        self.contexts.iter().chain(&self.activities).position(|l| l == label)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema()?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.feature_dim == 0 || self.n == 0 || self.users == 0 {
            return bad("feature_dim, n and users must be positive".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !self.context_scale.is_finite() {
            return bad("context_scale must be finite".into());
        }
        if self.activity_rates.len() != self.activities.len() {
            return bad(format!(
                "{} activity rates for {} activities",
                self.activity_rates.len(),
                self.activities.len()
            ));
        }
        if let Some(r) = self.activity_rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("positive rates must lie in (0, 1], got {r}"));
        }
        if !self.context_weights.is_empty()
            && (self.context_weights.len() != self.contexts.len()
                || self.context_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
                || self.context_weights.iter().sum::<f64>() <= 0.0)
        {
            return bad("context_weights must be one non-negative weight per context".into());
        }
        for c in &self.co_occurrence {
            let (Some(_), Some(_)) = (
                self.activities.iter().position(|l| *l == c.anchor),
                self.activities.iter().position(|l| *l == c.with),
            ) else {
                return bad(format!("co-occurrence `{}` → `{}` names unknown activities", c.anchor, c.with));
            };
            if c.anchor == c.with || !(0.0..=1.0).contains(&c.prob) {
                return bad(format!("invalid co-occurrence `{}` → `{}` ({})", c.anchor, c.with, c.prob));
            }
        }
        for p in &self.similar_pairs {
            if self.label_index(&p.first).is_none() || self.label_index(&p.second).is_none() || p.first == p.second {
                return bad(format!("similar pair `{}` / `{}` is invalid", p.first, p.second));
            }
            if !(-1.0..=1.0).contains(&p.cosine) {
                return bad(format!("cosine {} outside [-1, 1]", p.cosine));
            }
        }
        if self.feature_dim < 2 && !self.similar_pairs.is_empty() {
            return bad("similar pairs need feature_dim ≥ 2".into());
        }
        match self.embedding {
            EmbeddingMode::Informative { dim, noise } => {
                if dim < self.feature_dim || !(noise >= 0.0 && noise.is_finite()) {
                    return bad("informative embedding dim must be ≥ feature_dim and noise ≥ 0".into());
                }
            }
            EmbeddingMode::Uninformative { dim } => {
                if dim == 0 {
                    return bad("embedding dim must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// `M[a][b]` over activity indices.
    fn co_occurrence_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.activities.len();
        let mut m = vec![vec![0.0; k]; k];
        for c in &self.co_occurrence {
            let a = self.activities.iter().position(|l| *l == c.anchor).unwrap();
            let b = self.activities.iter().position(|l| *l == c.with).unwrap();
            m[a][b] = c.prob;
        }
        m
    }
}

/// Generative parameters plus each instance's latent draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `C×d`, contexts first, unit rows.
    pub prototypes: Matrix,
    pub n_contexts: usize,
    pub context_probs: Vec<f64>,
    /// Probability that activity `a` is the anchor.
    pub anchor_probs: Vec<f64>,
    /// Probability of drawing no anchor (empty activity set).
    pub none_prob: f64,
    pub co_occurrence: Vec<Vec<f64>>,
    pub sigma: f64,
    pub context_scale: f64,
    pub contexts: Vec<usize>,
    pub anchors: Vec<Option<usize>>,
    pub activity_sets: Vec<Vec<bool>>,
}

impl GroundTruth {
    pub fn n_activities(&self) -> usize {
        self.anchor_probs.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Noise-free feature mean of a hypothesis.
    pub fn mean(&self, context: usize, activities: &[bool]) -> Vec<f64> {
        let d = self.feature_dim();
        let mut sum = vec![0.0; d];
        for (j, _) in activities.iter().enumerate().filter(|(_, a)| **a) {
            add_scaled(&mut sum, self.prototypes.row(self.n_contexts + j), 1.0);
        }
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            sum.iter_mut().for_each(|v| *v /= norm);
        }
        add_scaled(&mut sum, self.prototypes.row(context), self.context_scale);
        sum
    }

    /// Prior probability of an activity set under the anchor scheme.
    pub fn set_prior(&self, activities: &[bool]) -> f64 {
        if activities.iter().all(|a| !a) {
            return self.none_prob;
        }
        let mut total = 0.0;
        for (a, &q) in self.anchor_probs.iter().enumerate() {
            if !activities[a] || q == 0.0 {
                continue;
            }
            let mut p = q;
            for (b, &on) in activities.iter().enumerate() {
                if b != a {
                    let m = self.co_occurrence[a][b];
                    p *= if on { m } else { 1.0 - m };
                }
            }
            total += p;
        }
        total
    }
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += s * b);
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn random_unit(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) > 1e-9 {
            return v;
        }
    }
}

/// Solves `A·x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Anchor probabilities `q = (I + Mᵀ)⁻¹ r` and the no-anchor mass.
pub fn anchor_probabilities(rates: &[f64], co_occurrence: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let k = rates.len();
    let a: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { co_occurrence[j][i] }).collect())
        .collect();
    let q = solve(a, rates.to_vec())
        .ok_or_else(|| Error::InvalidArgument("co-occurrence system is singular".into()))?;
    let none = 1.0 - q.iter().sum::<f64>();
    if q.iter().any(|&v| v < -1e-12) || none < -1e-12 {
        return Err(Error::InvalidArgument(format!(
            "positive rates are infeasible under the co-occurrence matrix (anchor probabilities {q:?}, none {none})"
        )));
    }
    Ok((q.into_iter().map(|v| v.max(0.0)).collect(), none.max(0.0)))
}

fn prototypes(spec: &SynthSpec) -> Matrix {
    let c = spec.contexts.len() + spec.activities.len();
    let d = spec.feature_dim;
    let mut rng = rng_for(spec.seed, "synth/prototypes");
    let mut rows: Vec<Vec<f64>> = (0..c).map(|_| random_unit(d, &mut rng)).collect();
    for pair in &spec.similar_pairs {
        let i = spec.label_index(&pair.first).unwrap();
        let j = spec.label_index(&pair.second).unwrap();
        let base = rows[i].clone();
        let mut u = random_unit(d, &mut rng);
        loop {
            let proj = crate::nn::dot(&u, &base);
            add_scaled(&mut u, &base, -proj);
            if normalize(&mut u) > 1e-6 {
                break;
            }
            u = random_unit(d, &mut rng);
        }
        let s = (1.0 - pair.cosine * pair.cosine).max(0.0).sqrt();
        rows[j] = base.iter().zip(&u).map(|(b, u)| pair.cosine * b + s * u).collect();
    }
    Matrix::from_rows(&rows).unwrap()
}

fn categorical(weights: &[f64], rng: &mut SeededRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Embedding rows for every label, in schema order.
pub fn embedding_table(spec: &SynthSpec, prototypes: &Matrix) -> Result<LabelEmbeddingTable> {
    let schema = spec.schema()?;
    let templates = TemplateTable::for_schema(&schema)?;
    let mut rng = rng_for(spec.seed, "synth/embeddings");
    let d = spec.feature_dim;
    let vectors: Vec<Vec<f64>> = match spec.embedding {
        EmbeddingMode::Informative { dim, noise } => {
            // isometric embedding: d orthonormal columns in `dim` coordinates
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
            while basis.len() < d {
                let mut v = random_unit(dim, &mut rng);
                for b in &basis {
                    let p = crate::nn::dot(&v, b);
                    add_scaled(&mut v, b, -p);
                }
                if normalize(&mut v) > 1e-6 {
                    basis.push(v);
                }
            }
            (0..prototypes.rows())
                .map(|r| {
                    let mut e = vec![0.0; dim];
                    for (coef, b) in prototypes.row(r).iter().zip(&basis) {
                        add_scaled(&mut e, b, *coef);
                    }
                    e.iter_mut().for_each(|v| *v += noise * rng.sample::<f64, _>(StandardNormal));
                    normalize(&mut e);
                    e
                })
                .collect()
        }
        EmbeddingMode::Uninformative { dim } => (0..prototypes.rows()).map(|_| random_unit(dim, &mut rng)).collect(),
    };
    let mode = match spec.embedding {
        EmbeddingMode::Informative { .. } => "informative",
        EmbeddingMode::Uninformative { .. } => "uninformative",
    };
    let rows = schema
        .labels()
        .zip(vectors)
        .map(|(label, embedding)| {
            Ok(EmbeddingRow {
                label: label.to_string(),
                sentence: templates.get(label).unwrap_or(label).to_string(),
                embedding,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabelEmbeddingTable::new(rows, format!("synth-{mode}(seed={})", spec.seed))
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub embeddings: LabelEmbeddingTable,
    pub truth: GroundTruth,
}

impl SynthOutput {
    /// Writes `features.csv`, `schema.json` and `embeddings.jsonl` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_feature_dataset(&self.dataset, dir.join("features.csv"))?;
        self.dataset.schema.to_json_file(dir.join("schema.json"))?;
        self.embeddings.save(dir.join("embeddings.jsonl"))
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let schema = spec.schema()?;
    let n_ctx = spec.contexts.len();
    let co = spec.co_occurrence_matrix();
    let (anchor_probs, none_prob) = anchor_probabilities(&spec.activity_rates, &co)?;
    let context_probs = if spec.context_weights.is_empty() {
        vec![1.0 / n_ctx as f64; n_ctx]
    } else {
        let total: f64 = spec.context_weights.iter().sum();
        spec.context_weights.iter().map(|w| w / total).collect()
    };
    let protos = prototypes(spec);
    let mut truth = GroundTruth {
        prototypes: protos,
        n_contexts: n_ctx,
        context_probs,
        anchor_probs,
        none_prob,
        co_occurrence: co,
        sigma: spec.sigma,
        context_scale: spec.context_scale,
        contexts: Vec::with_capacity(spec.n),
        anchors: Vec::with_capacity(spec.n),
        activity_sets: Vec::with_capacity(spec.n),
    };
    let mut anchor_weights = truth.anchor_probs.clone();
    anchor_weights.push(truth.none_prob);

    let mut instances = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = rng_indexed(spec.seed, "synth/instance", i as u64);
        let context = categorical(&truth.context_probs, &mut rng);
        let drawn = categorical(&anchor_weights, &mut rng);
        let anchor = (drawn < spec.activities.len()).then_some(drawn);
        let mut active = vec![false; spec.activities.len()];
        if let Some(a) = anchor {
            active[a] = true;
            for (b, on) in active.iter_mut().enumerate() {
                if b != a && rng.random::<f64>() < truth.co_occurrence[a][b] {
                    *on = true;
                }
            }
        }
        let mut x = truth.mean(context, &active);
        if spec.sigma > 0.0 {
            x.iter_mut()
                .for_each(|v| *v += spec.sigma * rng.sample::<f64, _>(StandardNormal));
        }
        let mut targets: std::collections::BTreeSet<String> = [spec.contexts[context].clone()].into();
        targets.extend(
            active
                .iter()
                .zip(&spec.activities)
                .filter(|(on, _)| **on)
                .map(|(_, l)| l.clone()),
        );
        instances.push(Instance {
            instance_id: format!("s{i:06}"),
            user_id: format!("user{}", i % spec.users),
            features: FeatureVector::from_values(x),
            targets,
        });
        truth.contexts.push(context);
        truth.anchors.push(anchor);
        truth.activity_sets.push(active);
    }
    let embeddings = embedding_table(spec, &truth.prototypes)?;
    let dataset = Dataset {
        schema,
        feature_names: (0..spec.feature_dim).map(|j| format!("x{j}")).collect(),
        instances,
        provenance: format!("synth(seed={}, n={}, sigma={})", spec.seed, spec.n, spec.sigma),
    };
    Ok(SynthOutput {
        dataset,
        embeddings,
        truth,
    })
}

/// Exact posterior marginals and the resulting decisions.
#[derive(Debug, Clone)]
pub struct OracleOutput {
    /// `n×C_ctx` context posteriors.
    pub context_posteriors: Matrix,
    /// `n×C_act` activity marginal posteriors.
    pub activity_posteriors: Matrix,
    /// Context = posterior argmax; activity positive iff posterior ≥ 0.5.
    /// `scores` holds the posteriors, contexts first.
    pub predictions: PredictionSet,
}

pub fn bayes_oracle(truth: &GroundTruth, features: &Matrix) -> Result<OracleOutput> {
    let k = truth.n_activities();
    let n_ctx = truth.n_contexts;
    if features.cols() != truth.feature_dim() {
        return Err(Error::Dimension(format!(
            "oracle was generated for {} features, got {}",
            truth.feature_dim(),
            features.cols()
        )));
    }
    if k > MAX_ORACLE_ACTIVITIES {
        return Err(Error::InvalidArgument(format!(
            "oracle enumeration supports at most {MAX_ORACLE_ACTIVITIES} activities"
        )));
    }
    struct Hypothesis {
        context: usize,
        set: Vec<bool>,
        log_prior: f64,
        mean: Vec<f64>,
    }
    let mut hyps = Vec::new();
    for mask in 0u32..(1 << k) {
        let set: Vec<bool> = (0..k).map(|j| mask & (1 << j) != 0).collect();
        let set_prior = truth.set_prior(&set);
        for (context, &pc) in truth.context_probs.iter().enumerate() {
            let prior = pc * set_prior;
            if prior > 0.0 {
                hyps.push(Hypothesis {
                    context,
                    mean: truth.mean(context, &set),
                    set: set.clone(),
                    log_prior: prior.ln(),
                });
            }
        }
    }

    let n = features.rows();
    let mut ctx_post = Matrix::zeros(n, n_ctx);
    let mut act_post = Matrix::zeros(n, k);
    let mut dist = vec![0.0; hyps.len()];
    for r in 0..n {
        let x = features.row(r);
        for (h, d) in hyps.iter().zip(dist.iter_mut()) {
            *d = x.iter().zip(&h.mean).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        let log_w: Vec<f64> = if truth.sigma > 0.0 {
            let s2 = 2.0 * truth.sigma * truth.sigma;
            hyps.iter().zip(&dist).map(|(h, d)| h.log_prior - d / s2).collect()
        } else {
            // σ = 0: only the nearest means have non-zero likelihood
            let best = dist.iter().cloned().fold(f64::INFINITY, f64::min);
            hyps.iter()
                .zip(&dist)
                .map(|(h, d)| if *d <= best + 1e-12 { h.log_prior } else { f64::NEG_INFINITY })
                .collect()
        };
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (h, w) in hyps.iter().zip(&weights) {
            let p = w / total;
            let row = ctx_post.row_mut(r);
            row[h.context] += p;
            for (j, on) in h.set.iter().enumerate() {
                if *on {
                    act_post.row_mut(r)[j] += p;
                }
            }
        }
    }

    let mut scores = Matrix::zeros(n, n_ctx + k);
    let mut context = Vec::with_capacity(n);
    let mut activities = Vec::with_capacity(n);
    for r in 0..n {
        let row = scores.row_mut(r);
        row[..n_ctx].copy_from_slice(ctx_post.row(r));
        row[n_ctx..].copy_from_slice(act_post.row(r));
        let cp = ctx_post.row(r);
        let mut arg = 0;
        for c in 1..n_ctx {
            if cp[c] > cp[arg] {
                arg = c;
            }
        }
        context.push(arg);
        activities.push(act_post.row(r).iter().map(|&p| p >= 0.5).collect());
    }
    Ok(OracleOutput {
        context_posteriors: ctx_post,
        activity_posteriors: act_post,
        predictions: PredictionSet {
            context,
            activities,
            scores,
        },
    })
}

/// A raw multi-channel recording for exercising the windowing pipeline:
/// consecutive segments, each with a context and activity set drawn from the
/// spec, where every active activity adds a sinusoid (own frequency, per
/// channel phase) and the context adds a per-channel offset.
pub fn generate_recording(
    spec: &SynthSpec,
    channels: usize,
    sample_rate_hz: f64,
    segment_s: f64,
    segments: usize,
) -> Result<(Recording, Vec<(usize, Vec<bool>)>)> {
    spec.validate()?;
    if channels == 0 || !(sample_rate_hz > 0.0) || !(segment_s > 0.0) || segments == 0 {
        return Err(Error::InvalidArgument("invalid recording shape".into()));
    }
    let k = spec.activities.len();
    let n_ctx = spec.contexts.len();
    let (anchor_probs, none_prob) = anchor_probabilities(&spec.activity_rates, &spec.co_occurrence_matrix())?;
    let mut anchor_weights = anchor_probs;
    anchor_weights.push(none_prob);
    let co = spec.co_occurrence_matrix();
    let mut rng = rng_for(spec.seed, "synth/recording");
    let nyquist = sample_rate_hz / 2.0;
    let freqs: Vec<f64> = (0..k).map(|j| nyquist * (0.05 + 0.4 * (j as f64 + 0.5) / k as f64)).collect();
    let phases: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..channels).map(|_| rng.random_range(0.0..2.0 * PI)).collect())
        .collect();
    let offsets: Vec<Vec<f64>> = (0..n_ctx)
        .map(|_| (0..channels).map(|_| spec.context_scale * rng.random_range(-1.0..1.0)).collect())
        .collect();
    let seg_len = (segment_s * sample_rate_hz).round().max(1.0) as usize;
    let total = seg_len * segments;
    let mut samples = vec![0.0; total * channels];
    let mut tracks: Vec<Vec<bool>> = vec![vec![false; total]; n_ctx + k];
    let mut draws = Vec::with_capacity(segments);
    for s in 0..segments {
        let ctx = categorical(&spec.context_weights_or_uniform(), &mut rng);
        let drawn = categorical(&anchor_weights, &mut rng);
        let mut active = vec![false; k];
        if drawn < k {
            active[drawn] = true;
            for (b, on) in active.iter_mut().enumerate() {
                if b != drawn && rng.random::<f64>() < co[drawn][b] {
                    *on = true;
                }
            }
        }
        for t in s * seg_len..(s + 1) * seg_len {
            let time = t as f64 / sample_rate_hz;
            tracks[ctx][t] = true;
            for (j, _) in active.iter().enumerate().filter(|(_, a)| **a) {
                tracks[n_ctx + j][t] = true;
            }
            for ch in 0..channels {
                let mut v = offsets[ctx][ch];
                for (j, _) in active.iter().enumerate().filter(|(_, a)| **a) {
                    v += (2.0 * PI * freqs[j] * time + phases[j][ch]).sin();
                }
                if spec.sigma > 0.0 {
                    v += spec.sigma * rng.sample::<f64, _>(StandardNormal);
                }
                samples[t * channels + ch] = v;
            }
        }
        draws.push((ctx, active));
    }
    let labels = spec
        .contexts
        .iter()
        .chain(&spec.activities)
        .zip(tracks)
        .map(|(name, active)| LabelTrack {
            name: name.clone(),
            active,
        })
        .collect();
    let names = (0..channels).map(|c| format!("ch{c}")).collect();
    let rec = Recording::new(sample_rate_hz, names, samples, labels)?;
    Ok((rec, draws))
}

impl SynthSpec {
    fn context_weights_or_uniform(&self) -> Vec<f64> {
        if self.context_weights.is_empty() {
            vec![1.0; self.contexts.len()]
        } else {
            self.context_weights.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::feature_matrix;
    use crate::labels::encode_targets;
    use crate::metrics::report;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::basic(2, 3, 8, 50, 0.1, 4);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.embeddings, b.embeddings);
        let c = generate(&SynthSpec { seed: 5, ..spec }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn noiseless_single_labels_hit_prototypes() {
        let mut spec = SynthSpec::basic(2, 3, 6, 40, 0.0, 1);
        spec.context_scale = 0.0;
        spec.activity_rates = vec![0.3, 0.3, 0.3];
        let out = generate(&spec).unwrap();
        for (i, inst) in out.dataset.instances.iter().enumerate() {
            match out.truth.anchors[i] {
                Some(a) => {
                    let p = out.truth.prototypes.row(2 + a);
                    assert!(inst.features.values.iter().zip(p).all(|(x, p)| (x - p).abs() < 1e-15));
                }
                None => assert!(inst.features.values.iter().all(|&v| v == 0.0)),
            }
        }
    }

    #[test]
    fn similar_pair_cosine_is_exact() {
        let mut spec = SynthSpec::basic(2, 3, 10, 5, 0.1, 2);
        spec.similar_pairs = vec![SimilarPair {
            first: "Activity 0".into(),
            second: "Activity 2".into(),
            cosine: 0.9,
        }];
        let p = generate(&spec).unwrap().truth.prototypes;
        assert!((crate::nn::dot(p.row(2), p.row(4)) - 0.9).abs() < 1e-12);
        for r in 0..p.rows() {
            assert!((crate::nn::dot(p.row(r), p.row(r)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rare_label_count_is_binomial() {
        let mut spec = SynthSpec::basic(2, 3, 4, 5000, 0.1, 3);
        spec.activity_rates = vec![0.01, 0.3, 0.2];
        let out = generate(&spec).unwrap();
        let positives = out.truth.activity_sets.iter().filter(|s| s[0]).count();
        assert!((35..=65).contains(&positives), "{positives}");
    }

    #[test]
    fn co_occurrence_marginals() {
        let mut spec = SynthSpec::basic(1, 3, 4, 20_000, 0.1, 6);
        spec.activity_rates = vec![0.4, 0.3, 0.2];
        spec.co_occurrence = vec![CoOccurrence {
            anchor: "Activity 0".into(),
            with: "Activity 1".into(),
            prob: 0.5,
        }];
        let out = generate(&spec).unwrap();
        let (q, none) = (&out.truth.anchor_probs, out.truth.none_prob);
        // r1 = q1 + 0.5·q0
        assert!((q[1] + 0.5 * q[0] - 0.3).abs() < 1e-12);
        assert!((q.iter().sum::<f64>() + none - 1.0).abs() < 1e-12);
        for (j, &r) in [0.4, 0.3, 0.2].iter().enumerate() {
            let rate = out.truth.activity_sets.iter().filter(|s| s[j]).count() as f64 / 20_000.0;
            assert!((rate - r).abs() < 4.0 * (r * (1.0 - r) / 20_000.0f64).sqrt(), "{j}: {rate}");
        }
        // set priors sum to one over all subsets
        let total: f64 = (0u32..8)
            .map(|m| out.truth.set_prior(&(0..3).map(|j| m & (1 << j) != 0).collect::<Vec<_>>()))
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_rates_are_rejected() {
        let mut spec = SynthSpec::basic(1, 2, 4, 10, 0.1, 0);
        spec.activity_rates = vec![0.7, 0.6];
        assert!(generate(&spec).unwrap_err().to_string().contains("infeasible"));
        spec.activity_rates = vec![0.1, 0.1];
        spec.co_occurrence = vec![CoOccurrence {
            anchor: "Activity 0".into(),
            with: "Activity 1".into(),
            prob: 1.0,
        }];
        // r1 = q1 + q0 forces q1 = 0, still feasible
        assert!(generate(&spec).is_ok());
        spec.activity_rates = vec![0.2, 0.1];
        assert!(generate(&spec).is_err());
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
            let mut r = vec![0.0; v.len()];
            for (pos, &i) in idx.iter().enumerate() {
                r[i] = pos as f64;
            }
            r
        };
        let (ra, rb) = (rank(a), rank(b));
        let n = a.len() as f64;
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    #[test]
    fn informative_embeddings_track_prototype_geometry() {
        let mut spec = SynthSpec::basic(3, 6, 16, 10, 0.1, 8);
        spec.embedding = EmbeddingMode::Informative { dim: 48, noise: 0.02 };
        let out = generate(&spec).unwrap();
        let schema = spec.schema().unwrap();
        let e = out.embeddings.matrix_for(&schema).unwrap();
        let c = schema.num_labels();
        let (mut pc, mut ec) = (Vec::new(), Vec::new());
        for i in 0..c {
            for j in i + 1..c {
                pc.push(crate::nn::dot(out.truth.prototypes.row(i), out.truth.prototypes.row(j)));
                ec.push(crate::nn::dot(&e[i * 48..(i + 1) * 48], &e[j * 48..(j + 1) * 48]));
            }
        }
        assert!(spearman(&pc, &ec) >= 0.9, "{}", spearman(&pc, &ec));
        for r in 0..c {
            let row = &e[r * 48..(r + 1) * 48];
            assert!((crate::nn::dot(row, row) - 1.0).abs() < 1e-12);
        }
    }

    fn oracle_report(spec: &SynthSpec) -> crate::metrics::MetricsReport {
        let out = generate(spec).unwrap();
        let x = feature_matrix(&out.dataset);
        let oracle = bayes_oracle(&out.truth, &x).unwrap();
        let targets: Vec<_> = out
            .dataset
            .instances
            .iter()
            .map(|i| encode_targets(i, &out.dataset.schema).unwrap())
            .collect();
        report(&oracle.predictions, &targets, &out.dataset.schema).unwrap()
    }

    #[test]
    fn oracle_is_exact_without_noise() {
        let spec = SynthSpec::basic(3, 4, 12, 300, 0.0, 9);
        let r = oracle_report(&spec);
        assert_eq!(r.context_accuracy, Some(1.0));
        assert!(r.per_label.iter().all(|l| l.counts.fp == 0 && l.counts.fn_ == 0));
    }

    #[test]
    fn oracle_is_uninformative_under_huge_noise() {
        let spec = SynthSpec::basic(2, 3, 4, 4000, 1e6, 10);
        let r = oracle_report(&spec);
        for l in &r.per_label {
            assert!(l.mcc.abs() < 0.05, "{}: {}", l.label, l.mcc);
        }
    }

    #[test]
    fn oracle_posteriors_normalise() {
        let mut spec = SynthSpec::basic(3, 4, 6, 50, 0.4, 11);
        spec.co_occurrence = vec![CoOccurrence {
            anchor: "Activity 1".into(),
            with: "Activity 3".into(),
            prob: 0.6,
        }];
        let out = generate(&spec).unwrap();
        let o = bayes_oracle(&out.truth, &feature_matrix(&out.dataset)).unwrap();
        for r in 0..50 {
            assert!((o.context_posteriors.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(o.activity_posteriors.row(r).iter().all(|p| (0.0..=1.0 + 1e-12).contains(p)));
        }
        assert!(bayes_oracle(&out.truth, &Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn recording_mode_labels_segments() {
        let spec = SynthSpec::basic(2, 3, 4, 10, 0.05, 12);
        let (rec, draws) = generate_recording(&spec, 12, 40.0, 3.0, 4).unwrap();
        assert_eq!(rec.num_samples(), 480);
        assert_eq!(rec.num_channels(), 12);
        for (s, (ctx, acts)) in draws.iter().enumerate() {
            assert!(rec.labels[*ctx].active[s * 120]);
            for (j, on) in acts.iter().enumerate() {
                assert_eq!(rec.labels[2 + j].active[s * 120 + 60], *on);
            }
        }
        let w = crate::signal::sliding_windows(&rec, 3.0, 3.0).unwrap();
        assert_eq!(w.windows.len(), 4);
    }

    #[test]
    fn spec_json_round_trip() {
        let mut spec = SynthSpec::basic(2, 2, 3, 7, 0.2, 1);
        spec.embedding = EmbeddingMode::Uninformative { dim: 5 };
        let f = tempfile::NamedTempFile::new().unwrap();
        spec.to_json_file(f.path()).unwrap();
        assert_eq!(SynthSpec::from_json_file(f.path()).unwrap(), spec);
    }
}
