//! The alignment model, its losses and training, plus a binary-head baseline.
//!
//! Scores are `S = D·Lᵀ` with `D = proj_data(encoder(X))` (`n×h`) and
//! `L = proj_label(V)` (`C×h`), where `V` holds the frozen label embeddings
//! in schema order (contexts first). Context columns are trained with
//! softmax cross-entropy, activity columns with sigmoid BCE:
//! `L = L_ce + λ·L_bce`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, LabelSchema, SplitSpec};
use crate::error::{Error, Result};
use crate::labels::{encode_targets, EmbeddingRow, LabelEmbeddingTable, TargetEncoding};
use crate::nn::{Activation, ForwardCache, LrSchedule, Matrix, MlpNet, RAdamState};
use crate::rng::{rng_for, SeededRng};
use crate::signal::Normalizer;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeightMode {
    Uniform,
    /// Positives of activity `c` weighted `min(N_neg/N_pos, 10)` on the training set.
    InverseFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    /// Probability 0.5, i.e. raw score 0.
    Fixed,
    /// Per-label MCC-maximising sweep on validation scores.
    Tuned,
}

impl std::str::FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ThresholdPolicy::Fixed),
            "tuned" => Ok(ThresholdPolicy::Tuned),
            other => Err(Error::InvalidArgument(format!(
                "threshold policy must be `fixed` or `tuned`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Per-epoch decay of the exponential schedule.
    pub gamma: f64,
    pub epochs: u32,
    pub h2_prime: usize,
    pub h2: usize,
    pub h: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub class_weights: ClassWeightMode,
    pub threshold_policy: ThresholdPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            gamma: 0.99,
            epochs: 100,
            h2_prime: 128,
            h2: 64,
            h: 64,
            dropout: 0.1,
            batch_size: 64,
            lambda: 1.0,
            class_weights: ClassWeightMode::Uniform,
            threshold_policy: ThresholdPolicy::Fixed,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if self.h2_prime == 0 || self.h2 == 0 || self.h == 0 {
            return bad("hidden sizes must be at least 1".into());
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 0.5], got {}", self.dropout));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Activity decision thresholds on raw scores; probability `p` corresponds
/// to the logit `ln(p/(1−p))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub logits: Vec<f64>,
}

impl Thresholds {
    pub fn fixed(num_activities: usize) -> Self {
        Thresholds {
            logits: vec![0.0; num_activities],
        }
    }

    pub fn from_probabilities(p: &[f64]) -> Result<Self> {
        if let Some(bad) = p.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::InvalidArgument(format!("threshold {bad} outside (0, 1)")));
        }
        Ok(Thresholds {
            logits: p.iter().map(|v| (v / (1.0 - v)).ln()).collect(),
        })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&s| sigmoid(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Index into the schema's context list.
    pub context: Vec<usize>,
    /// Per instance, one decision per schema activity.
    pub activities: Vec<Vec<bool>>,
    /// Raw `n×C` scores, contexts first.
    pub scores: Matrix,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean softmax cross-entropy over rows with a context label. All-zero
/// target rows are skipped and do not count towards the mean.
pub fn ce_loss(scores: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if scores.shape() != targets.shape() {
        return Err(Error::Dimension(format!(
            "scores {:?} vs targets {:?}",
            scores.shape(),
            targets.shape()
        )));
    }
    let mut grad = Matrix::zeros(scores.rows(), scores.cols());
    let labelled: Vec<usize> = (0..scores.rows())
        .filter(|&r| targets.row(r).iter().any(|&t| t != 0.0))
        .collect();
    if labelled.is_empty() {
        return Ok((0.0, grad));
    }
    let n = labelled.len() as f64;
    let mut loss = 0.0;
    for &r in &labelled {
        let s = scores.row(r);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = s.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let t = targets.row(r);
        loss += t.iter().zip(s).map(|(ti, si)| ti * (lse - si)).sum::<f64>();
        for (g, (si, ti)) in grad.row_mut(r).iter_mut().zip(s.iter().zip(t)) {
            *g = (((si - max).exp() / sum) - ti) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Weighted sigmoid BCE, summed over labels and averaged over rows.
pub fn bce_loss(scores: &Matrix, targets: &Matrix, weights: &Matrix) -> Result<(f64, Matrix)> {
    if scores.shape() != targets.shape() || scores.shape() != weights.shape() {
        return Err(Error::Dimension(format!(
            "scores {:?}, targets {:?}, weights {:?}",
            scores.shape(),
            targets.shape(),
            weights.shape()
        )));
    }
    if weights.data().iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument("BCE weights must be finite and non-negative".into()));
    }
    let mut grad = Matrix::zeros(scores.rows(), scores.cols());
    if scores.rows() == 0 {
        return Ok((0.0, grad));
    }
    let n = scores.rows() as f64;
    let mut loss = 0.0;
    for ((g, &s), (&y, &w)) in grad
        .data_mut()
        .iter_mut()
        .zip(scores.data())
        .zip(targets.data().iter().zip(weights.data()))
    {
        if w == 0.0 {
            continue;
        }
        loss += w * (softplus(s) - y * s);
        *g = w * (sigmoid(s) - y) / n;
    }
    Ok((loss / n, grad))
}

/// Encoded targets of a dataset as dense matrices.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub encodings: Vec<TargetEncoding>,
    pub context: Matrix,
    pub activities: Matrix,
}

impl TargetBatch {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let encodings = dataset
            .instances
            .iter()
            .map(|i| encode_targets(i, &dataset.schema))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_encodings(
            encodings,
            dataset.schema.contexts.len(),
            dataset.schema.activities.len(),
        ))
    }

    pub fn from_encodings(encodings: Vec<TargetEncoding>, n_ctx: usize, n_act: usize) -> Self {
        let n = encodings.len();
        let context = Matrix::from_vec(n, n_ctx, encodings.iter().flat_map(|e| e.context.clone()).collect())
            .expect("context width");
        let activities = Matrix::from_vec(n, n_act, encodings.iter().flat_map(|e| e.activities.clone()).collect())
            .expect("activity width");
        TargetBatch {
            encodings,
            context,
            activities,
        }
    }

    pub fn len(&self) -> usize {
        self.encodings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encodings.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> TargetBatch {
        TargetBatch {
            encodings: rows.iter().map(|&i| self.encodings[i].clone()).collect(),
            context: self.context.select_rows(rows),
            activities: self.activities.select_rows(rows),
        }
    }
}

/// Feature values as an `n×d` matrix; missing entries become 0.
pub fn feature_matrix(dataset: &Dataset) -> Matrix {
    let d = dataset.feature_dim();
    let mut data = Vec::with_capacity(dataset.len() * d);
    for inst in &dataset.instances {
        data.extend(
            inst.features
                .values
                .iter()
                .zip(&inst.features.missing)
                .map(|(&v, &m)| if m || !v.is_finite() { 0.0 } else { v }),
        );
    }
    Matrix::from_vec(dataset.len(), d, data).expect("uniform feature dimension")
}

/// Per-activity BCE weights as described by `mode`, from training targets.
pub fn class_weights(activities: &Matrix, mode: ClassWeightMode) -> Vec<(f64, f64)> {
    (0..activities.cols())
        .map(|c| match mode {
            ClassWeightMode::Uniform => (1.0, 1.0),
            ClassWeightMode::InverseFrequency => {
                let pos = (0..activities.rows()).filter(|&r| activities.get(r, c) == 1.0).count() as f64;
                let neg = activities.rows() as f64 - pos;
                let w = if pos == 0.0 { 1.0 } else { (neg / pos).clamp(1.0, 10.0) };
                (w, 1.0)
            }
        })
        .collect()
}

fn weight_matrix(activities: &Matrix, per_class: &[(f64, f64)]) -> Matrix {
    let mut w = Matrix::zeros(activities.rows(), activities.cols());
    for r in 0..activities.rows() {
        for (c, &(pos, neg)) in per_class.iter().enumerate() {
            w.set(r, c, if activities.get(r, c) == 1.0 { pos } else { neg });
        }
    }
    w
}

/// `L_ce + λ·L_bce` on an `n×C` score matrix and its gradient.
pub fn combined_loss(
    scores: &Matrix,
    targets: &TargetBatch,
    weights: &Matrix,
    lambda: f64,
) -> Result<(f64, Matrix)> {
    let n_ctx = targets.context.cols();
    let c = scores.cols();
    if c != n_ctx + targets.activities.cols() || scores.rows() != targets.len() {
        return Err(Error::Dimension(format!(
            "scores {:?} do not match {} targets with {} labels",
            scores.shape(),
            targets.len(),
            n_ctx + targets.activities.cols()
        )));
    }
    let (ce, g_ce) = ce_loss(&scores.column_block(0, n_ctx), &targets.context)?;
    let (bce, g_bce) = bce_loss(&scores.column_block(n_ctx, c), &targets.activities, weights)?;
    let mut grad = Matrix::zeros(scores.rows(), c);
    for r in 0..scores.rows() {
        let row = grad.row_mut(r);
        row[..n_ctx].copy_from_slice(g_ce.row(r));
        for (g, b) in row[n_ctx..].iter_mut().zip(g_bce.row(r)) {
            *g = lambda * b;
        }
    }
    Ok((ce + lambda * bce, grad))
}

/// A model mapping features to `n×C` label scores, trainable by [`fit`].
pub trait ScoringModel: Clone {
    type Cache;

    fn schema(&self) -> &LabelSchema;
    fn input_dim(&self) -> usize;
    fn scores_forward(&self, x: &Matrix, train_mode: bool, rng: &mut SeededRng) -> Result<(Matrix, Self::Cache)>;
    /// Parameter gradients for upstream score gradient `d_scores`, in
    /// [`ScoringModel::params_mut`] order.
    fn scores_backward(&self, cache: &Self::Cache, d_scores: &Matrix) -> Result<Vec<Vec<f64>>>;
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    fn thresholds(&self) -> &Thresholds;
    fn set_thresholds(&mut self, thresholds: Thresholds);

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn scores(&self, x: &Matrix) -> Result<Matrix> {
        let mut rng = rng_for(0, "eval");
        self.scores_forward(x, false, &mut rng).map(|(s, _)| s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SealModel {
    /// `d → h₂′ → h₂`, ReLU, dropout between the two layers.
    pub data_encoder: MlpNet,
    /// Linear `h₂ → h`.
    pub proj_data: MlpNet,
    /// Linear `e → h`.
    pub proj_label: MlpNet,
    pub label_table: LabelEmbeddingTable,
    pub schema: LabelSchema,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone)]
pub struct SealCache {
    encoder: ForwardCache,
    proj_data: ForwardCache,
    proj_label: ForwardCache,
    data: Matrix,
    labels: Matrix,
}

impl SealModel {
    pub fn new(schema: &LabelSchema, table: LabelEmbeddingTable, input_dim: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        table.check_covers(schema)?;
        let seed = config.seed;
        let data_encoder = MlpNet::new(
            &[input_dim, config.h2_prime, config.h2],
            Activation::Relu,
            Activation::Relu,
            config.dropout,
            &mut rng_for(seed, "init/encoder"),
        )?;
        let proj_data = MlpNet::new(
            &[config.h2, config.h],
            Activation::Identity,
            Activation::Identity,
            0.0,
            &mut rng_for(seed, "init/proj-data"),
        )?;
        let proj_label = MlpNet::new(
            &[table.dim, config.h],
            Activation::Identity,
            Activation::Identity,
            0.0,
            &mut rng_for(seed, "init/proj-label"),
        )?;
        Ok(SealModel {
            data_encoder,
            proj_data,
            proj_label,
            label_table: table,
            schema: schema.clone(),
            thresholds: Thresholds::fixed(schema.activities.len()),
        })
    }

    /// Frozen label embeddings `V` as a `C×e` matrix in schema order.
    pub fn label_matrix(&self) -> Result<Matrix> {
        Matrix::from_vec(
            self.schema.num_labels(),
            self.label_table.dim,
            self.label_table.matrix_for(&self.schema)?,
        )
    }

    /// Projected label embeddings `V'_label` (`C×h`).
    pub fn projected_labels(&self) -> Result<Matrix> {
        self.proj_label.predict(&self.label_matrix()?)
    }

    /// Projected data embeddings `V'_data` (`n×h`), eval mode.
    pub fn projected_data(&self, x: &Matrix) -> Result<Matrix> {
        self.proj_data.predict(&self.data_encoder.predict(x)?)
    }
}

impl ScoringModel for SealModel {
    type Cache = SealCache;

    fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    fn input_dim(&self) -> usize {
        self.data_encoder.input_dim()
    }

    fn scores_forward(&self, x: &Matrix, train_mode: bool, rng: &mut SeededRng) -> Result<(Matrix, SealCache)> {
        let (encoded, encoder) = self.data_encoder.forward(x, train_mode, rng)?;
        let (data, proj_data) = self.proj_data.forward(&encoded, train_mode, rng)?;
        let (labels, proj_label) = self.proj_label.forward(&self.label_matrix()?, train_mode, rng)?;
        let scores = data.matmul_t(&labels);
        Ok((
            scores,
            SealCache {
                encoder,
                proj_data,
                proj_label,
                data,
                labels,
            },
        ))
    }

    fn scores_backward(&self, cache: &SealCache, d_scores: &Matrix) -> Result<Vec<Vec<f64>>> {
        if d_scores.shape() != (cache.data.rows(), cache.labels.rows()) {
            return Err(Error::Dimension("score gradient does not match cache".into()));
        }
        let d_data = d_scores.matmul(&cache.labels);
        let d_labels = d_scores.t_matmul(&cache.data);
        let (g_pd, d_encoded) = self.proj_data.backward(&cache.proj_data, &d_data)?;
        let (g_enc, _) = self.data_encoder.backward(&cache.encoder, &d_encoded)?;
        let (g_pl, _) = self.proj_label.backward(&cache.proj_label, &d_labels)?;
        Ok([g_enc.tensors, g_pd.tensors, g_pl.tensors].concat())
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.data_encoder.params();
        p.extend(self.proj_data.params());
        p.extend(self.proj_label.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.data_encoder.params_mut();
        p.extend(self.proj_data.params_mut());
        p.extend(self.proj_label.params_mut());
        p
    }

    fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    fn set_thresholds(&mut self, thresholds: Thresholds) {
        self.thresholds = thresholds;
    }
}

/// Same encoder as [`SealModel`] followed by a linear `h₂ → C` head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub data_encoder: MlpNet,
    pub head: MlpNet,
    pub schema: LabelSchema,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone)]
pub struct BaselineCache {
    encoder: ForwardCache,
    head: ForwardCache,
}

impl BaselineModel {
    pub fn new(schema: &LabelSchema, input_dim: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        schema.validate()?;
        let seed = config.seed;
        let data_encoder = MlpNet::new(
            &[input_dim, config.h2_prime, config.h2],
            Activation::Relu,
            Activation::Relu,
            config.dropout,
            &mut rng_for(seed, "init/encoder"),
        )?;
        let head = MlpNet::new(
            &[config.h2, schema.num_labels()],
            Activation::Identity,
            Activation::Identity,
            0.0,
            &mut rng_for(seed, "init/head"),
        )?;
        Ok(BaselineModel {
            data_encoder,
            head,
            schema: schema.clone(),
            thresholds: Thresholds::fixed(schema.activities.len()),
        })
    }
}

impl ScoringModel for BaselineModel {
    type Cache = BaselineCache;

    fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    fn input_dim(&self) -> usize {
        self.data_encoder.input_dim()
    }

    fn scores_forward(&self, x: &Matrix, train_mode: bool, rng: &mut SeededRng) -> Result<(Matrix, BaselineCache)> {
        let (encoded, encoder) = self.data_encoder.forward(x, train_mode, rng)?;
        let (scores, head) = self.head.forward(&encoded, train_mode, rng)?;
        Ok((scores, BaselineCache { encoder, head }))
    }

    fn scores_backward(&self, cache: &BaselineCache, d_scores: &Matrix) -> Result<Vec<Vec<f64>>> {
        let (g_head, d_encoded) = self.head.backward(&cache.head, d_scores)?;
        let (g_enc, _) = self.data_encoder.backward(&cache.encoder, &d_encoded)?;
        Ok([g_enc.tensors, g_head.tensors].concat())
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.data_encoder.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.data_encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    fn set_thresholds(&mut self, thresholds: Thresholds) {
        self.thresholds = thresholds;
    }
}

pub fn forward_scores<M: ScoringModel>(model: &M, features: &Matrix) -> Result<Matrix> {
    if features.cols() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "model expects {} features, got {}",
            model.input_dim(),
            features.cols()
        )));
    }
    model.scores(features)
}

/// Loss and parameter gradients of `L_ce + λ·L_bce` on one batch.
pub fn loss_and_gradients<M: ScoringModel>(
    model: &M,
    x: &Matrix,
    targets: &TargetBatch,
    weights: &Matrix,
    lambda: f64,
    train_mode: bool,
    rng: &mut SeededRng,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (scores, cache) = model.scores_forward(x, train_mode, rng)?;
    let (loss, d_scores) = combined_loss(&scores, targets, weights, lambda)?;
    let grads = model.scores_backward(&cache, &d_scores)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    /// Eval-mode loss on the full training set after the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: u32,
    pub optimizer: RAdamState,
}

impl History {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch as usize].val_loss
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_loss));
        }
        out
    }
}

/// Minimises `L_ce + λ·L_bce` with RAdam and an exponential schedule, then
/// restores the parameters of the best validation epoch. With an empty
/// validation set the training loss selects the epoch. Thresholds are set
/// according to the configured policy.
pub fn fit<M: ScoringModel>(model: &mut M, train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<History> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    for ds in [train, val] {
        if ds.schema != *model.schema() {
            return Err(Error::SchemaMismatch("dataset schema differs from the model's".into()));
        }
        if !ds.is_empty() && ds.feature_dim() != model.input_dim() {
            return Err(Error::Dimension(format!(
                "model expects {} features, dataset has {}",
                model.input_dim(),
                ds.feature_dim()
            )));
        }
    }
    let x_train = feature_matrix(train);
    let t_train = TargetBatch::from_dataset(train)?;
    let per_class = class_weights(&t_train.activities, config.class_weights);
    let w_train = weight_matrix(&t_train.activities, &per_class);
    let (x_val, t_val) = if val.is_empty() {
        (x_train.clone(), t_train.clone())
    } else {
        (feature_matrix(val), TargetBatch::from_dataset(val)?)
    };
    let w_val = weight_matrix(&t_val.activities, &per_class);

    let schedule = LrSchedule::new(config.lr, config.gamma)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut opt = RAdamState::new(&sizes, config.lr);
    let mut shuffle_rng = rng_for(config.seed, "train/shuffle");
    let mut dropout_rng = rng_for(config.seed, "train/dropout");
    let mut order: Vec<usize> = (0..train.len()).collect();

    let eval_loss = |m: &M, x: &Matrix, t: &TargetBatch, w: &Matrix| -> Result<f64> {
        let (s, _) = m.scores_forward(x, false, &mut rng_for(0, "eval"))?;
        Ok(combined_loss(&s, t, w, config.lambda)?.0)
    };

    let mut records = Vec::with_capacity(config.epochs as usize);
    let mut best: Option<(f64, u32, M)> = None;
    for epoch in 0..config.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let xb = x_train.select_rows(batch);
            let tb = t_train.select(batch);
            let wb = w_train.select_rows(batch);
            let (loss, grads) = loss_and_gradients(model, &xb, &tb, &wb, config.lambda, true, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            opt.step_with_lr(&mut model.params_mut(), &grad_refs, lr)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
        }
        let train_loss = eval_loss(model, &x_train, &t_train, &w_train)?;
        let val_loss = eval_loss(model, &x_val, &t_val, &w_val)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss after epoch {epoch}")));
        }
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    *model = best_model;

    let thresholds = match config.threshold_policy {
        ThresholdPolicy::Fixed => Thresholds::fixed(model.schema().activities.len()),
        ThresholdPolicy::Tuned => {
            let scores = model.scores(&x_val)?;
            let n_ctx = model.schema().contexts.len();
            tune_thresholds(&scores.column_block(n_ctx, scores.cols()), &t_val.activities)
        }
    };
    model.set_thresholds(thresholds);
    Ok(History {
        epochs: records,
        best_epoch,
        optimizer: opt,
    })
}

pub fn train(
    mut model: SealModel,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<(SealModel, History)> {
    let history = fit(&mut model, train, val, config)?;
    Ok((model, history))
}

pub fn train_baseline(train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<(BaselineModel, History)> {
    let mut model = BaselineModel::new(&train.schema, train.feature_dim(), config)?;
    let history = fit(&mut model, train, val, config)?;
    Ok((model, history))
}

fn label_mcc(scores: &[f64], truth: &[bool], threshold: f64) -> f64 {
    let predicted: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    crate::metrics::mcc(&crate::metrics::ConfusionCounts::from_pairs(&predicted, truth))
}

/// Raw-score threshold maximising MCC. Candidates are 0 and the midpoints
/// of consecutive distinct scores (plus one below and one above the range);
/// 0 is kept unless another candidate is strictly better.
pub fn best_mcc_threshold(scores: &[f64], truth: &[bool]) -> f64 {
    let mut sorted: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = Vec::with_capacity(sorted.len() + 1);
    if let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) {
        candidates.push(lo - 1.0);
        candidates.extend(sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        candidates.push(hi + 1.0);
    }
    let mut best = (label_mcc(scores, truth, 0.0), 0.0);
    for t in candidates {
        let m = label_mcc(scores, truth, t);
        if m > best.0 {
            best = (m, t);
        }
    }
    best.1
}

/// Per-column [`best_mcc_threshold`] on activity scores.
pub fn tune_thresholds(activity_scores: &Matrix, activity_targets: &Matrix) -> Thresholds {
    let logits = (0..activity_scores.cols())
        .map(|c| {
            let s: Vec<f64> = (0..activity_scores.rows()).map(|r| activity_scores.get(r, c)).collect();
            let t: Vec<bool> = (0..activity_scores.rows()).map(|r| activity_targets.get(r, c) == 1.0).collect();
            best_mcc_threshold(&s, &t)
        })
        .collect();
    Thresholds { logits }
}

/// Context = argmax of the context scores (first on ties); activity `c` is
/// positive iff its score reaches `thresholds.logits[c]`, i.e.
/// `sigmoid(score) ≥ sigmoid(logit)`.
pub fn decide(scores: Matrix, n_ctx: usize, thresholds: &Thresholds) -> Result<PredictionSet> {
    if n_ctx == 0 || scores.cols() != n_ctx + thresholds.logits.len() {
        return Err(Error::Dimension(format!(
            "{} score columns for {n_ctx} contexts and {} thresholds",
            scores.cols(),
            thresholds.logits.len()
        )));
    }
    let mut context = Vec::with_capacity(scores.rows());
    let mut activities = Vec::with_capacity(scores.rows());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let mut arg = 0;
        for c in 1..n_ctx {
            if row[c] > row[arg] {
                arg = c;
            }
        }
        context.push(arg);
        activities.push(row[n_ctx..].iter().zip(&thresholds.logits).map(|(s, t)| s >= t).collect());
    }
    Ok(PredictionSet {
        context,
        activities,
        scores,
    })
}

pub fn predict<M: ScoringModel>(model: &M, features: &Matrix, thresholds: &Thresholds) -> Result<PredictionSet> {
    let scores = forward_scores(model, features)?;
    decide(scores, model.schema().contexts.len(), thresholds)
}

/// Writes `V'_label` rows to the embedding-file format, tagged `projected`.
pub fn export_label_embeddings(model: &SealModel, path: impl AsRef<Path>) -> Result<LabelEmbeddingTable> {
    let projected = model.projected_labels()?;
    let rows = model
        .schema
        .labels()
        .enumerate()
        .map(|(i, label)| EmbeddingRow {
            label: label.to_string(),
            sentence: model.label_table.get(label).map(|r| r.sentence.clone()).unwrap_or_default(),
            embedding: projected.row(i).to_vec(),
        })
        .collect();
    let table = LabelEmbeddingTable::new(rows, "projected")?;
    table.save(path)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrainedModel {
    Seal(SealModel),
    Baseline(BaselineModel),
}

impl TrainedModel {
    pub fn schema(&self) -> &LabelSchema {
        match self {
            TrainedModel::Seal(m) => &m.schema,
            TrainedModel::Baseline(m) => &m.schema,
        }
    }

    pub fn thresholds(&self) -> &Thresholds {
        match self {
            TrainedModel::Seal(m) => &m.thresholds,
            TrainedModel::Baseline(m) => &m.thresholds,
        }
    }

    pub fn predict(&self, features: &Matrix, thresholds: &Thresholds) -> Result<PredictionSet> {
        match self {
            TrainedModel::Seal(m) => predict(m, features, thresholds),
            TrainedModel::Baseline(m) => predict(m, features, thresholds),
        }
    }
}

/// Everything needed to reuse a trained model on new feature files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: TrainedModel,
    pub optimizer: Option<RAdamState>,
    pub normalizer: Option<Normalizer>,
    /// Raw feature names the normalizer was fitted on.
    pub feature_names: Vec<String>,
    pub split: Option<SplitSpec>,
    pub config: TrainConfig,
    pub best_epoch: Option<u32>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string(self)? + "\n";
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let probe: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::format(path, format!("not JSON: {e}")))?;
        match probe.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::format(path, format!("unsupported checkpoint format version {v}")));
            }
            None => return Err(Error::format(path, "missing format_version")),
        }
        serde_json::from_value(probe).map_err(|e| Error::format(path, e.to_string()))
    }
}
