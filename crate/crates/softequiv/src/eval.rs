//! Measurements: equivariance scores, linear/kNN/MLP probes,
//! transformation-prediction probes, ablation sweeps, and the analytic
//! training-cost estimator.

use std::fmt;
use std::path::Path;

use crate::augment::TAG_EVAL;
use crate::config::Config;
use crate::data::Dataset;
use crate::group::{self, act_tokens, relative, GeoPolicy, GroupElement, Ratio};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::train::{lr_schedule, Trainer};

#[derive(Debug)]
pub enum EvalError {
    EmptyFamily(String),
    Degenerate(String),
    BadParam(String),
    Train(crate::train::TrainError),
    Io(String),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyFamily(s) => write!(f, "transform family unavailable: {s}"),
            EvalError::Degenerate(s) => write!(f, "degenerate probe setup: {s}"),
            EvalError::BadParam(s) => write!(f, "bad parameter: {s}"),
            EvalError::Train(e) => write!(f, "{e}"),
            EvalError::Io(s) => write!(f, "{s}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<crate::train::TrainError> for EvalError {
    fn from(e: crate::train::TrainError) -> Self {
        EvalError::Train(e)
    }
}

/// Transform families the equivariance score can isolate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Rot90,
    Hflip,
    Scale,
}

impl Family {
    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "rot90" | "rotation" => Some(Family::Rot90),
            "hflip" | "flip" => Some(Family::Hflip),
            "scale" => Some(Family::Scale),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Rot90 => "rot90",
            Family::Hflip => "hflip",
            Family::Scale => "scale",
        }
    }

    /// Restriction of a geometric policy to this family alone.
    pub fn restrict(&self, geo: &GeoPolicy) -> Result<GeoPolicy, EvalError> {
        let restricted = match self {
            Family::Rot90 => GeoPolicy {
                rot90: true,
                hflip: false,
                scales: vec![Ratio::ONE],
            },
            Family::Hflip => GeoPolicy {
                rot90: false,
                hflip: true,
                scales: vec![Ratio::ONE],
            },
            Family::Scale => GeoPolicy {
                rot90: false,
                hflip: false,
                scales: geo.scales.clone(),
            },
        };
        let enabled = match self {
            Family::Rot90 => geo.rot90,
            Family::Hflip => geo.hflip,
            Family::Scale => geo.scales.iter().any(|s| *s != Ratio::ONE),
        };
        if !enabled {
            return Err(EvalError::EmptyFamily(format!(
                "{} is disabled under the current geometric policy",
                self.name()
            )));
        }
        Ok(restricted)
    }
}

/// Per-family equivariance scores of one layer.
#[derive(Debug, Clone)]
pub struct EquivScoreReport {
    pub layer: usize,
    pub samples: usize,
    pub rotation: Option<f64>,
    pub hflip: Option<f64>,
    pub scale: Option<f64>,
    /// Interpretation note carried into every serialized report.
    pub note: &'static str,
}

pub const SCORE_NOTE: &str =
    "score evaluated on spatial tokens (CLS excluded); photometric jitter disabled";

fn cosine_f64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine between action-transported features of one view and features
/// of the other view, over samples of the restricted family. Photometric
/// jitter is disabled so the measurement isolates geometry.
pub fn equivariance_score<S: Scalar>(
    trainer: &Trainer<S>,
    ds: &Dataset,
    family: Family,
    layer: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let policy = family.restrict(&trainer.cfg.geo)?;
    let mut rng = Rng::stream(seed, &[TAG_EVAL, 1, layer as u64]);
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let idx = rng.below(ds.len());
        let img = ds.image_as::<S>(idx);
        let g1 = group::sample(&mut rng, &policy).map_err(|e| EvalError::BadParam(e.to_string()))?;
        let g2 = group::sample(&mut rng, &policy).map_err(|e| EvalError::BadParam(e.to_string()))?;
        let v1 = group::act_image(g1, &img).map_err(|e| EvalError::BadParam(e.to_string()))?;
        let v2 = group::act_image(g2, &img).map_err(|e| EvalError::BadParam(e.to_string()))?;
        let g = relative(g1, g2);
        let tape = crate::tensor::Tape::new();
        let bound = trainer
            .vit
            .bind(&tape, &trainer.store)
            .map_err(|e| EvalError::BadParam(e.to_string()))?;
        let (f1, _) = bound.forward_features_at(&v1, layer)?;
        let (f2, _) = bound.forward_features_at(&v2, layer)?;
        let moved = act_tokens(g, f1.feat, f1.grid, f2.grid)
            .map_err(|e| EvalError::BadParam(e.to_string()))?;
        let a: Vec<f64> = moved.value().iter().map(|v| v.to_f64()).collect();
        let b: Vec<f64> = f2.feat.value().iter().map(|v| v.to_f64()).collect();
        acc += cosine_f64(&a, &b);
    }
    Ok(acc / n_samples as f64)
}

impl From<crate::model::ModelError> for EvalError {
    fn from(e: crate::model::ModelError) -> Self {
        EvalError::BadParam(e.to_string())
    }
}

/// Which frozen representation feeds a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReprKind {
    /// Concatenated CLS outputs of the last (up to) 4 head blocks.
    ClsConcat,
    /// Flattened spatial token map after `layer` blocks.
    TokensFlat(usize),
    /// Mean-pooled spatial tokens after `layer` blocks.
    TokensPooled(usize),
}

impl ReprKind {
    pub fn describe(&self) -> String {
        match self {
            ReprKind::ClsConcat => "cls-concat".to_string(),
            ReprKind::TokensFlat(l) => format!("tokens-flat@{l}"),
            ReprKind::TokensPooled(l) => format!("tokens-pooled@{l}"),
        }
    }
}

/// Frozen feature matrix with labels and a deterministic train/val split.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub provenance: String,
}

impl ProbeDataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        n_classes: usize,
        seed: u64,
        provenance: String,
    ) -> Result<Self, EvalError> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(EvalError::Degenerate("empty probe dataset".into()));
        }
        let mut order: Vec<usize> = (0..features.len()).collect();
        let mut rng = Rng::stream(seed, &[TAG_EVAL, 2]);
        rng.shuffle(&mut order);
        let n_val = (features.len() / 5).max(1);
        let val_idx = order[..n_val].to_vec();
        let train_idx = order[n_val..].to_vec();
        Ok(ProbeDataset {
            features,
            labels,
            n_classes,
            train_idx,
            val_idx,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    /// Sanity-check variant: labels replaced by a seeded shuffle.
    pub fn with_shuffled_labels(&self, seed: u64) -> ProbeDataset {
        let mut labels = self.labels.clone();
        let mut rng = Rng::stream(seed, &[TAG_EVAL, 3]);
        rng.shuffle(&mut labels);
        ProbeDataset {
            labels,
            ..self.clone()
        }
    }
}

/// Extract frozen features for every dataset image (evaluation mode: the
/// tape is dropped without a backward pass).
pub fn extract_features<S: Scalar>(
    trainer: &Trainer<S>,
    ds: &Dataset,
    repr: ReprKind,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let img = ds.image_as::<S>(i);
        out.push(features_of_image(trainer, &img, repr)?);
    }
    Ok(out)
}

pub fn features_of_image<S: Scalar>(
    trainer: &Trainer<S>,
    img: &crate::tensor::io::RawTensor<S>,
    repr: ReprKind,
) -> Result<Vec<f64>, EvalError> {
    let tape = crate::tensor::Tape::new();
    let bound = trainer
        .vit
        .bind(&tape, &trainer.store)
        .map_err(|e| EvalError::BadParam(e.to_string()))?;
    let to64 = |v: Vec<S>| -> Vec<f64> { v.iter().map(|x| x.to_f64()).collect() };
    match repr {
        ReprKind::ClsConcat => {
            let tm = bound.forward_prefix(img)?;
            let (emb, cache) = bound.forward_head(tm)?;
            if cache.is_empty() {
                // cls_layer == depth leaves no per-block CLS outputs; the
                // final embedding is the only CLS-side feature available
                return Ok(to64(emb.value()));
            }
            let take = cache.len().min(4);
            let mut feat = Vec::new();
            for t in &cache[cache.len() - take..] {
                feat.extend(to64(t.value()));
            }
            Ok(feat)
        }
        ReprKind::TokensFlat(layer) => {
            let (tm, _) = bound.forward_features_at(img, layer)?;
            Ok(to64(tm.feat.value()))
        }
        ReprKind::TokensPooled(layer) => {
            let (tm, _) = bound.forward_features_at(img, layer)?;
            Ok(to64(tm.feat.mean_rows().map_err(|e| EvalError::BadParam(e.to_string()))?.value()))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeResult {
    pub top1: f64,
    /// Defined only when the label set has at least 5 classes.
    pub top5: Option<f64>,
}

/// Multinomial logistic regression on frozen features: full-batch gradient
/// descent with cosine-decayed learning rate, features standardized by
/// train-split statistics.
pub fn linear_probe(pd: &ProbeDataset, epochs: usize, base_lr: f64) -> Result<ProbeResult, EvalError> {
    probe_train_eval(pd, epochs, base_lr, None)
}

/// Nonlinear probe: one hidden GELU layer of `hidden` units trained the same
/// way as the linear probe.
pub fn mlp_probe(
    pd: &ProbeDataset,
    hidden: usize,
    epochs: usize,
    base_lr: f64,
) -> Result<ProbeResult, EvalError> {
    probe_train_eval(pd, epochs, base_lr, Some(hidden))
}

fn standardization(pd: &ProbeDataset) -> (Vec<f64>, Vec<f64>) {
    let d = pd.dim();
    let n = pd.train_idx.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &pd.train_idx {
        for (m, v) in mean.iter_mut().zip(&pd.features[i]) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut std = vec![0.0; d];
    for &i in &pd.train_idx {
        for j in 0..d {
            let c = pd.features[i][j] - mean[j];
            std[j] += c * c;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n + 1e-8).sqrt();
    }
    (mean, std)
}

fn probe_train_eval(
    pd: &ProbeDataset,
    epochs: usize,
    base_lr: f64,
    hidden: Option<usize>,
) -> Result<ProbeResult, EvalError> {
    let classes = pd.n_classes;
    let d = pd.dim();
    let train_classes: std::collections::BTreeSet<usize> =
        pd.train_idx.iter().map(|&i| pd.labels[i]).collect();
    if train_classes.len() < 2 {
        return Err(EvalError::Degenerate(
            "train split holds fewer than 2 classes".into(),
        ));
    }
    let (mean, std) = standardization(pd);
    let norm = |row: &[f64]| -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - mean[j]) / std[j])
            .collect()
    };
    let xs: Vec<Vec<f64>> = pd.train_idx.iter().map(|&i| norm(&pd.features[i])).collect();
    let ys: Vec<usize> = pd.train_idx.iter().map(|&i| pd.labels[i]).collect();

    // parameters: either a single linear map or a GELU MLP with one hidden
    // layer, trained by full-batch gradient descent (no momentum).
    let mut rng = Rng::stream(17, &[TAG_EVAL, 4, d as u64]);
    let h = hidden.unwrap_or(0);
    let mut w1: Vec<f64>;
    let mut b1: Vec<f64>;
    let mut w2: Vec<f64> = Vec::new();
    let mut b2: Vec<f64> = Vec::new();
    if h > 0 {
        w1 = (0..d * h).map(|_| rng.normal() * (1.0 / (d as f64).sqrt())).collect();
        b1 = vec![0.0; h];
        w2 = (0..h * classes).map(|_| rng.normal() * (1.0 / (h as f64).sqrt())).collect();
        b2 = vec![0.0; classes];
    } else {
        w1 = vec![0.0; d * classes];
        b1 = vec![0.0; classes];
    }

    let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh());
    let gelu_grad = |v: f64| {
        let c0 = (2.0 / std::f64::consts::PI).sqrt();
        let inner = c0 * (v + 0.044715 * v * v * v);
        let t = inner.tanh();
        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c0 * (1.0 + 3.0 * 0.044715 * v * v)
    };

    let n = xs.len() as f64;
    for epoch in 0..epochs {
        let lr = lr_schedule(epoch as u64, epochs as u64, 0, base_lr);
        if h == 0 {
            let mut gw = vec![0.0; d * classes];
            let mut gb = vec![0.0; classes];
            for (x, &y) in xs.iter().zip(&ys) {
                let mut logits = b1.clone();
                for (j, xv) in x.iter().enumerate() {
                    for k in 0..classes {
                        logits[k] += xv * w1[j * classes + k];
                    }
                }
                let p = softmax64(&logits);
                for k in 0..classes {
                    let err = p[k] - if k == y { 1.0 } else { 0.0 };
                    gb[k] += err / n;
                    for (j, xv) in x.iter().enumerate() {
                        gw[j * classes + k] += xv * err / n;
                    }
                }
            }
            for (w, g) in w1.iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            for (b, g) in b1.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        } else {
            let mut gw1 = vec![0.0; d * h];
            let mut gb1 = vec![0.0; h];
            let mut gw2 = vec![0.0; h * classes];
            let mut gb2 = vec![0.0; classes];
            for (x, &y) in xs.iter().zip(&ys) {
                let mut pre = b1.clone();
                for (j, xv) in x.iter().enumerate() {
                    for k in 0..h {
                        pre[k] += xv * w1[j * h + k];
                    }
                }
                let act: Vec<f64> = pre.iter().map(|v| gelu(*v)).collect();
                let mut logits = b2.clone();
                for (k, av) in act.iter().enumerate() {
                    for c in 0..classes {
                        logits[c] += av * w2[k * classes + c];
                    }
                }
                let p = softmax64(&logits);
                let mut dact = vec![0.0; h];
                for c in 0..classes {
                    let err = (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
                    gb2[c] += err;
                    for k in 0..h {
                        gw2[k * classes + c] += act[k] * err;
                        dact[k] += w2[k * classes + c] * err;
                    }
                }
                for k in 0..h {
                    let dpre = dact[k] * gelu_grad(pre[k]);
                    gb1[k] += dpre;
                    for (j, xv) in x.iter().enumerate() {
                        gw1[j * h + k] += xv * dpre;
                    }
                }
            }
            for (w, g) in w1.iter_mut().zip(&gw1) {
                *w -= lr * g;
            }
            for (b, g) in b1.iter_mut().zip(&gb1) {
                *b -= lr * g;
            }
            for (w, g) in w2.iter_mut().zip(&gw2) {
                *w -= lr * g;
            }
            for (b, g) in b2.iter_mut().zip(&gb2) {
                *b -= lr * g;
            }
        }
        let _ = epoch;
    }

    // validation accuracy
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    for &i in &pd.val_idx {
        let x = norm(&pd.features[i]);
        let logits = if h == 0 {
            let mut logits = b1.clone();
            for (j, xv) in x.iter().enumerate() {
                for k in 0..classes {
                    logits[k] += xv * w1[j * classes + k];
                }
            }
            logits
        } else {
            let mut pre = b1.clone();
            for (j, xv) in x.iter().enumerate() {
                for k in 0..h {
                    pre[k] += xv * w1[j * h + k];
                }
            }
            let act: Vec<f64> = pre.iter().map(|v| gelu(*v)).collect();
            let mut logits = b2.clone();
            for (k, av) in act.iter().enumerate() {
                for c in 0..classes {
                    logits[c] += av * w2[k * classes + c];
                }
            }
            logits
        };
        let y = pd.labels[i];
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
        if order[0] == y {
            top1_hits += 1;
        }
        if order.iter().take(5).any(|&k| k == y) {
            top5_hits += 1;
        }
    }
    let nv = pd.val_idx.len() as f64;
    Ok(ProbeResult {
        top1: top1_hits as f64 / nv,
        top5: if classes >= 5 {
            Some(top5_hits as f64 / nv)
        } else {
            None
        },
    })
}

fn softmax64(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Majority vote among the k nearest train features by cosine similarity.
/// Ties break toward the smaller mean distance, then the smaller class id.
pub fn knn_probe(pd: &ProbeDataset, k: usize) -> Result<f64, EvalError> {
    if k < 1 {
        return Err(EvalError::BadParam("k must be at least 1".into()));
    }
    if k > pd.train_idx.len() {
        return Err(EvalError::BadParam(format!(
            "k {k} exceeds train size {}",
            pd.train_idx.len()
        )));
    }
    let mut hits = 0usize;
    for &vi in &pd.val_idx {
        let query = &pd.features[vi];
        let mut sims: Vec<(f64, usize)> = pd
            .train_idx
            .iter()
            .map(|&ti| (cosine_f64(query, &pd.features[ti]), pd.labels[ti]))
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let top = &sims[..k];
        let mut votes = vec![0usize; pd.n_classes];
        let mut dist_sum = vec![0.0f64; pd.n_classes];
        for (s, class) in top {
            votes[*class] += 1;
            dist_sum[*class] += 1.0 - s;
        }
        let mut best = 0usize;
        for c in 1..pd.n_classes {
            let better = votes[c] > votes[best]
                || (votes[c] == votes[best] && votes[c] > 0 && {
                    let mc = dist_sum[c] / votes[c] as f64;
                    let mb = dist_sum[best] / votes[best].max(1) as f64;
                    mc < mb
                });
            if better {
                best = c;
            }
        }
        if best == pd.labels[vi] {
            hits += 1;
        }
    }
    Ok(hits as f64 / pd.val_idx.len() as f64)
}

/// Default k per the probe protocol: 20 for reasonably sized train splits,
/// else 5.
pub fn default_knn_k(n_train: usize) -> usize {
    if n_train >= 400 {
        20
    } else {
        5
    }
}

/// Project features onto their top two principal components (power
/// iteration with deflation), for external 2-D scatter plotting.
pub fn pca_scatter(features: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = features.len();
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut rng = Rng::stream(515, &[TAG_EVAL, 6]);
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..50 {
            // w = X^T X v, deflated against found components
            let mut w = vec![0.0; d];
            for row in &centered {
                let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (wi, ri) in w.iter_mut().zip(row) {
                    *wi += dot * ri;
                }
            }
            for c in &components {
                let dot: f64 = w.iter().zip(c).map(|(a, b)| a * b).sum();
                for (wi, ci) in w.iter_mut().zip(c) {
                    *wi -= dot * ci;
                }
            }
            let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                break;
            }
            v = w.iter().map(|x| x / norm).collect();
        }
        components.push(v);
    }
    centered
        .iter()
        .map(|row| {
            let x: f64 = row.iter().zip(&components[0]).map(|(a, b)| a * b).sum();
            let y: f64 = row.iter().zip(&components[1]).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformTask {
    Rotation4,
    Hflip2,
}

impl TransformTask {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rotation4" | "rotation" => Some(TransformTask::Rotation4),
            "hflip2" | "hflip" => Some(TransformTask::Hflip2),
            _ => None,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            TransformTask::Rotation4 => 4,
            TransformTask::Hflip2 => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransformTask::Rotation4 => "rotation4",
            TransformTask::Hflip2 => "hflip2",
        }
    }
}

/// Build the (pooled features of a transformed view, transform label) probe
/// set and train a linear classifier on it.
pub fn transform_probe<S: Scalar>(
    trainer: &Trainer<S>,
    ds: &Dataset,
    task: TransformTask,
    layer: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let pd = transform_probe_dataset(trainer, ds, task, layer, seed)?;
    let res = linear_probe(&pd, 50, 0.5)?;
    Ok(res.top1)
}

pub fn transform_probe_dataset<S: Scalar>(
    trainer: &Trainer<S>,
    ds: &Dataset,
    task: TransformTask,
    layer: usize,
    seed: u64,
) -> Result<ProbeDataset, EvalError> {
    match task {
        TransformTask::Rotation4 => {
            if !trainer.cfg.geo.rot90 {
                return Err(EvalError::EmptyFamily("rot90 disabled".into()));
            }
        }
        TransformTask::Hflip2 => {
            if !trainer.cfg.geo.hflip {
                return Err(EvalError::EmptyFamily("hflip disabled".into()));
            }
        }
    }
    let mut rng = Rng::stream(seed, &[TAG_EVAL, 5]);
    let mut features = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let img = ds.image_as::<S>(i);
        let (g, label) = match task {
            TransformTask::Rotation4 => {
                let k = rng.below(4);
                (GroupElement::dihedral(k as u8, false), k)
            }
            TransformTask::Hflip2 => {
                let f = rng.below(2);
                (GroupElement::dihedral(0, f == 1), f)
            }
        };
        let view = group::act_image(g, &img).map_err(|e| EvalError::BadParam(e.to_string()))?;
        features.push(features_of_image(trainer, &view, ReprKind::TokensPooled(layer))?);
        labels.push(label);
    }
    ProbeDataset::new(
        features,
        labels,
        task.classes(),
        seed,
        format!("transform-{}@{layer}", task.name()),
    )
}

// ── analytic cost model ───────────────────────────────────────────────────
//
// FLOP conventions, used consistently for the baseline and the regularized
// variant: a fused multiply-add counts 2; linear(n, din, dout) costs
// 2*n*din*dout + n*dout; attention matmuls cost 4*n^2*d per block; layernorm
// 8 per element; GELU 14 per element; softmax/exp-normalize 6 per element.
// Backward is charged as 2x forward. The equivariant sub-batch is charged
// conservatively: ceil(r*|B|) images, every view at the largest
// patch-aligned grid the scale set admits.

#[derive(Debug, Clone)]
pub struct CostModel {
    pub image: usize,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub batch: usize,
    pub r: f64,
    /// Largest admissible scale factor of the geometric policy.
    pub max_scale: Ratio,
    pub backward_mult: f64,
}

impl CostModel {
    pub fn from_config(cfg: &Config) -> Self {
        CostModel {
            image: cfg.model.image,
            patch: cfg.model.patch,
            channels: cfg.model.channels,
            dim: cfg.model.dim,
            depth: cfg.model.depth,
            heads: cfg.model.heads,
            mlp_ratio: cfg.model.mlp_ratio,
            proj_hidden: cfg.proj_hidden,
            proj_dim: cfg.proj_dim,
            batch: cfg.batch_size,
            r: cfg.r,
            max_scale: cfg.geo.max_scale(),
            backward_mult: 2.0,
        }
    }

    /// Reference-scale preset: ViT-S/16 at 224 pixels, batch 2048, r = 0.01,
    /// a 512-dimensional equivariance projection with the 4096-wide hidden
    /// layer reference SSL stacks use, scaling range [0.7, 1.3] aligned to
    /// the 16-pixel grid.
    pub fn vit_s16() -> Self {
        CostModel {
            image: 224,
            patch: 16,
            channels: 3,
            dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            proj_hidden: 4096,
            proj_dim: 512,
            batch: 2048,
            r: 0.01,
            max_scale: Ratio::new(18, 14), // 224 -> 288, the largest <= 1.3
            backward_mult: 2.0,
        }
    }

    fn linear(n: f64, din: f64, dout: f64) -> f64 {
        2.0 * n * din * dout + n * dout
    }

    /// Forward cost of the encoder on `tokens` spatial tokens (+1 CLS for
    /// the head blocks).
    fn encoder_forward(&self, tokens: f64) -> f64 {
        let d = self.dim as f64;
        let m = (self.mlp_ratio * self.dim) as f64;
        let p2c = (self.patch * self.patch * self.channels) as f64;
        let mut total = Self::linear(tokens, p2c, d) + tokens * d; // embed + positions
        let block = |n: f64| -> f64 {
            let ln = 2.0 * 8.0 * n * d;
            let qkvo = 4.0 * Self::linear(n, d, d);
            let attn = 4.0 * n * n * d + 6.0 * (self.heads as f64) * n * n;
            let mlp = Self::linear(n, d, m) + 14.0 * n * m + Self::linear(n, m, d);
            ln + qkvo + attn + mlp
        };
        // the CLS token joins at cls_layer; the estimator charges every
        // block at tokens+1, a wash at these sizes
        for _ in 0..self.depth {
            total += block(tokens + 1.0);
        }
        total += 8.0 * d; // final layernorm on the embedding
        total
    }

    fn base_grid_tokens(&self) -> f64 {
        let side = self.image / self.patch;
        (side * side) as f64
    }

    /// Largest patch-aligned grid a scaled view can occupy.
    fn max_grid_tokens(&self) -> f64 {
        let side = self.image / self.patch;
        let scaled = self
            .max_scale
            .scale_len(side)
            .unwrap_or_else(|| ((side as f64) * self.max_scale.to_f64()).floor() as usize);
        (scaled * scaled) as f64
    }

    /// Baseline forward cost of one mini-batch: two views per image plus the
    /// invariance projection head and loss.
    fn baseline_forward_batch(&self) -> f64 {
        let b = self.batch as f64;
        let tokens = self.base_grid_tokens();
        let d = self.dim as f64;
        let h = self.proj_hidden as f64;
        let p = self.proj_dim as f64;
        let per_view = self.encoder_forward(tokens)
            + Self::linear(1.0, d, h)
            + 14.0 * h
            + Self::linear(1.0, h, p);
        // invariance loss: 3 similarity matrices over the batch + normalize
        let inv_loss = 3.0 * (2.0 * b) * b * p + 2.0 * b * (3.0 * p + 10.0);
        2.0 * b * per_view + inv_loss
    }

    /// Forward cost the regularizer adds: per-token projection over both
    /// pools, row normalization, two full similarity matrices, the masked
    /// per-anchor log-sum-exp, and the feature-space alignment resample.
    fn ser_extra_forward_batch(&self) -> f64 {
        let b2 = (self.r * self.batch as f64).ceil();
        if b2 == 0.0 {
            return 0.0;
        }
        let t = self.max_grid_tokens();
        let d = self.dim as f64;
        let h = self.proj_hidden as f64;
        let p = self.proj_dim as f64;
        let tokens = 2.0 * b2 * t;
        let proj = tokens * (2.0 * d * h + h + 14.0 * h + 2.0 * h * p + p);
        let normalize = tokens * (3.0 * p + 10.0);
        let anchors = b2 * t;
        let sims = 2.0 * anchors * anchors * 2.0 * p;
        let cand = 1.0 + 2.0 * (anchors - t);
        let lse = anchors * cand * 6.0;
        let align = b2 * t * d * 12.0;
        proj + normalize + sims + lse + align
    }

    /// Per-image forward+backward FLOPs and the ratio to the baseline.
    pub fn estimate(&self, with_ser: bool) -> FlopsReport {
        let fwd_base = self.baseline_forward_batch();
        let fwd = if with_ser {
            fwd_base + self.ser_extra_forward_batch()
        } else {
            fwd_base
        };
        let mult = 1.0 + self.backward_mult;
        let per_image = fwd * mult / self.batch as f64;
        let ratio = fwd / fwd_base;
        FlopsReport { per_image, ratio }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlopsReport {
    /// Forward+backward FLOPs per image.
    pub per_image: f64,
    /// Cost relative to the same model without the regularizer.
    pub ratio: f64,
}

// ── ablation sweeps ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Layer,
    Cls,
    Lambda,
    Ratio,
    GroupElements,
    AllLayers,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "layer" => Some(SweepAxis::Layer),
            "cls" => Some(SweepAxis::Cls),
            "lambda" => Some(SweepAxis::Lambda),
            "ratio" | "r" => Some(SweepAxis::Ratio),
            "group-elements" | "group" => Some(SweepAxis::GroupElements),
            "all-layers" => Some(SweepAxis::AllLayers),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Layer => "layer",
            SweepAxis::Cls => "cls",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Ratio => "ratio",
            SweepAxis::GroupElements => "group-elements",
            SweepAxis::AllLayers => "all-layers",
        }
    }
}

/// Apply one sweep value to a config. Layer sweeps drag the CLS insertion
/// up when it would otherwise precede the regularized layer.
pub fn apply_axis(cfg: &mut Config, axis: SweepAxis, value: &str) -> Result<(), EvalError> {
    let bad = |detail: String| EvalError::BadParam(detail);
    match axis {
        SweepAxis::Layer => {
            let l: usize = value.parse().map_err(|_| bad(format!("bad layer `{value}`")))?;
            cfg.model.split_layer = l;
            cfg.model.cls_layer = cfg.model.cls_layer.max(l);
        }
        SweepAxis::Cls => {
            let l: usize = value.parse().map_err(|_| bad(format!("bad cls layer `{value}`")))?;
            cfg.model.cls_layer = l;
        }
        SweepAxis::Lambda => {
            cfg.lambda = value.parse().map_err(|_| bad(format!("bad lambda `{value}`")))?;
        }
        SweepAxis::Ratio => {
            cfg.r = value.parse().map_err(|_| bad(format!("bad ratio `{value}`")))?;
        }
        SweepAxis::GroupElements => {
            let mut geo = GeoPolicy {
                rot90: false,
                hflip: false,
                scales: vec![Ratio::ONE],
            };
            for token in value.split('+').filter(|t| !t.is_empty()) {
                match token {
                    "rot90" => geo.rot90 = true,
                    "hflip" => geo.hflip = true,
                    "scale" => geo.scales = Config::default().geo.scales.clone(),
                    other => return Err(bad(format!("unknown generator `{other}`"))),
                }
            }
            cfg.geo = geo;
        }
        SweepAxis::AllLayers => {
            cfg.all_layers = match value {
                "true" | "all" | "1" => true,
                "false" | "single" | "0" => false,
                _ => return Err(bad(format!("bad all-layers value `{value}`"))),
            };
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub status: String,
    pub class_top1: Option<f64>,
    pub orient_top1: Option<f64>,
    pub score_rot: Option<f64>,
    pub score_hflip: Option<f64>,
    pub score_scale: Option<f64>,
}

pub const SWEEP_CSV_HEADER: &str =
    "axis,value,seed,status,class_top1,orient_top1,score_rot,score_hflip,score_scale";

impl SweepRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.axis,
            self.value,
            self.seed,
            self.status,
            opt(&self.class_top1),
            opt(&self.orient_top1),
            opt(&self.score_rot),
            opt(&self.score_hflip),
            opt(&self.score_scale)
        )
    }
}

/// Full post-training evaluation of one run: class probe on concatenated CLS
/// features, orientation probe on the flattened final spatial map, and the
/// three per-family equivariance scores at the final layer.
pub fn evaluate_run<S: Scalar>(
    trainer: &Trainer<S>,
    ds: &Dataset,
    seed: u64,
    score_samples: usize,
) -> Result<SweepRow, EvalError> {
    let depth = trainer.cfg.model.depth;
    let class_feat = extract_features(trainer, ds, ReprKind::ClsConcat)?;
    let class_labels: Vec<usize> = (0..ds.len()).map(|i| ds.class_of(i)).collect();
    let class_pd = ProbeDataset::new(
        class_feat,
        class_labels,
        ds.labels.iter().map(|l| l[0]).max().unwrap() as usize + 1,
        seed,
        "class/cls-concat".into(),
    )?;
    let class_top1 = linear_probe(&class_pd, 50, 0.5)?.top1;

    let orient_feat = extract_features(trainer, ds, ReprKind::TokensFlat(depth))?;
    let orient_labels: Vec<usize> = (0..ds.len()).map(|i| ds.orientation_of(i)).collect();
    let orient_pd = ProbeDataset::new(
        orient_feat,
        orient_labels,
        4,
        seed,
        format!("orientation/tokens-flat@{depth}"),
    )?;
    let orient_top1 = linear_probe(&orient_pd, 50, 0.5)?.top1;

    let score = |family: Family| -> Option<f64> {
        equivariance_score(trainer, ds, family, depth, score_samples, seed).ok()
    };
    Ok(SweepRow {
        axis: String::new(),
        value: String::new(),
        seed,
        status: "ok".into(),
        class_top1: Some(class_top1),
        orient_top1: Some(orient_top1),
        score_rot: score(Family::Rot90),
        score_hflip: score(Family::Hflip),
        score_scale: score(Family::Scale),
    })
}

/// Train one run per (value, seed) with everything else held fixed and
/// evaluate each; failures are recorded as rows and the sweep continues.
pub fn ablation_sweep<S: Scalar>(
    base: &Config,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    ds: &Dataset,
    out_dir: &Path,
    score_samples: usize,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::new();
    for value in values {
        for &seed in seeds {
            let row = run_sweep_cell::<S>(base, axis, value, seed, ds, out_dir, score_samples)
                .unwrap_or_else(|e| SweepRow {
                    axis: axis.name().into(),
                    value: value.clone(),
                    seed,
                    status: format!("error: {e}").replace(',', ";"),
                    class_top1: None,
                    orient_top1: None,
                    score_rot: None,
                    score_hflip: None,
                    score_scale: None,
                });
            rows.push(row);
        }
    }
    Ok(rows)
}

fn run_sweep_cell<S: Scalar>(
    base: &Config,
    axis: SweepAxis,
    value: &str,
    seed: u64,
    ds: &Dataset,
    out_dir: &Path,
    score_samples: usize,
) -> Result<SweepRow, EvalError> {
    let mut cfg = base.clone();
    apply_axis(&mut cfg, axis, value)?;
    cfg.seed = seed;
    cfg.validate()
        .map_err(|e| EvalError::BadParam(e.to_string()))?;
    let mut trainer = Trainer::<S>::new(cfg)?;
    let run_dir = out_dir.join(format!("{}_{}_seed{}", axis.name(), value.replace('/', "-"), seed));
    trainer.run(ds, &run_dir)?;
    let mut row = evaluate_run(&trainer, ds, seed, score_samples)?;
    row.axis = axis.name().into();
    row.value = value.into();
    Ok(row)
}
