//! The pretraining loop: partition, view sampling, split forward, feature
//! alignment, losses, one backward, one AdamW update per step; plus
//! checkpointing with bitwise-deterministic resumption.
//!
//! Every random decision derives from (seed, epoch, indices), so a resumed
//! run replays exactly the steps an uninterrupted run would have taken.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::augment::{
    self, partition, sample_view_t, sample_view_teq, view_stream, BatchPartition, View, ViewPair,
    TAG_EPOCH_ORDER,
};
use crate::config::Config;
use crate::data::Dataset;
use crate::group::{act_tokens, relative, GroupError};
use crate::loss::{
    augself_aux, equiv_nt_xent, inv_contrastive, inv_redundancy, total_loss, InvKind, LossError,
};
use crate::model::{
    BoundViT, ModelError, ParamStore, ProjectionHead, SplitViT, TokenMap,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::io::{
    read_container_file, write_container_file, Container, IoError, RawTensor,
};
use crate::tensor::{concat_rows, Tape, Tensor, TensorError};

#[derive(Debug)]
pub enum TrainError {
    NonFinite {
        epoch: usize,
        batch: usize,
        value: f64,
        indices: Vec<usize>,
        seed: u64,
    },
    ResumeMismatch(String),
    Io(String),
    Model(ModelError),
    Loss(LossError),
    Tensor(TensorError),
    Group(GroupError),
    Augment(augment::AugmentError),
    Data(crate::data::DataError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFinite {
                epoch,
                batch,
                value,
                indices,
                seed,
            } => write!(
                f,
                "non-finite loss {value} at epoch {epoch}, batch {batch}; image indices {indices:?}; \
                 view rng streams derive from (seed={seed}, epoch={epoch}, index, view)"
            ),
            TrainError::ResumeMismatch(s) => write!(f, "resume refused: {s}"),
            TrainError::Io(s) => write!(f, "{s}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Group(e) => write!(f, "{e}"),
            TrainError::Augment(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}
impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}
impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}
impl From<GroupError> for TrainError {
    fn from(e: GroupError) -> Self {
        TrainError::Group(e)
    }
}
impl From<augment::AugmentError> for TrainError {
    fn from(e: augment::AugmentError) -> Self {
        TrainError::Augment(e)
    }
}
impl From<IoError> for TrainError {
    fn from(e: IoError) -> Self {
        TrainError::Io(e.to_string())
    }
}
impl From<crate::data::DataError> for TrainError {
    fn from(e: crate::data::DataError) -> Self {
        TrainError::Data(e)
    }
}

/// Linear warmup from 0 to base over the warmup steps, then cosine to 0 at
/// the final step.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW state: first/second moments per parameter, shared step counter,
/// decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Optimizer<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub step: u64,
    pub weight_decay: f64,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(store: &ParamStore<S>, weight_decay: f64) -> Self {
        Optimizer {
            m: (0..store.len()).map(|i| vec![S::ZERO; store.data(i).len()]).collect(),
            v: (0..store.len()).map(|i| vec![S::ZERO; store.data(i).len()]).collect(),
            step: 0,
            weight_decay,
        }
    }

    /// One decoupled-weight-decay adaptive update over every parameter, in
    /// slot order.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Vec<S>], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64(ADAM_BETA1);
        let b2 = S::from_f64(ADAM_BETA2);
        let one_m_b1 = S::from_f64(1.0 - ADAM_BETA1);
        let one_m_b2 = S::from_f64(1.0 - ADAM_BETA2);
        let bc1 = S::from_f64(1.0 - ADAM_BETA1.powi(t));
        let bc2 = S::from_f64(1.0 - ADAM_BETA2.powi(t));
        let eps = S::from_f64(ADAM_EPS);
        let lr_s = S::from_f64(lr);
        let decay = S::from_f64(lr * self.weight_decay);
        for slot in 0..store.len() {
            let g = &grads[slot];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = store.data_mut(slot);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - decay * p[i] - lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Observation points for every labeled stage of a training step; default
/// methods make hooks opt-in.
pub trait StepHook<S: Scalar> {
    fn on_partition(&mut self, _p: &BatchPartition) {}
    fn on_views(&mut self, _source: usize, _pair: &ViewPair<S>) {}
    fn on_token_maps(&mut self, _source: usize, _grid1: (usize, usize), _grid2: (usize, usize)) {}
    fn on_aligned(&mut self, _source: usize, _aligned_grid: (usize, usize)) {}
    fn on_losses(&mut self, _inv1: f64, _inv2: f64, _equiv: f64, _total: f64) {}
}

/// The no-op hook.
pub struct NoHook;
impl<S: Scalar> StepHook<S> for NoHook {}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepMetrics {
    pub l_inv1: f64,
    pub l_inv2: f64,
    pub l_equiv: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub l_inv1: f64,
    pub l_inv2: f64,
    pub l_equiv: f64,
    pub l_total: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct Trainer<S: Scalar> {
    pub cfg: Config,
    pub vit: SplitViT,
    pub equiv_proj: ProjectionHead,
    pub inv_proj: ProjectionHead,
    pub augself_head: Option<ProjectionHead>,
    pub store: ParamStore<S>,
    pub opt: Optimizer<S>,
    /// Next epoch to run.
    pub epoch: usize,
    pub global_step: u64,
    /// Test hook: compute the regularizer but block its gradients.
    pub zero_equiv_grad: bool,
    warned_small_b2: bool,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: Config) -> Result<Self, TrainError> {
        let mut store = ParamStore::new();
        let vit = SplitViT::init(cfg.model.clone(), &mut store, cfg.seed)?;
        let d = cfg.model.dim;
        let equiv_proj = ProjectionHead::init(
            "equiv_proj",
            d,
            cfg.proj_hidden,
            cfg.proj_dim,
            &mut store,
            cfg.seed,
        );
        let inv_proj = ProjectionHead::init(
            "inv_proj",
            d,
            cfg.proj_hidden,
            cfg.proj_dim,
            &mut store,
            cfg.seed,
        );
        let augself_head = if cfg.augself_weight > 0.0 {
            Some(ProjectionHead::init(
                "augself",
                2 * d,
                cfg.proj_hidden,
                6,
                &mut store,
                cfg.seed,
            ))
        } else {
            None
        };
        let opt = Optimizer::new(&store, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            vit,
            equiv_proj,
            inv_proj,
            augself_head,
            store,
            opt,
            epoch: 0,
            global_step: 0,
            zero_equiv_grad: false,
            warned_small_b2: false,
        })
    }

    pub fn steps_per_epoch(&self, ds: &Dataset) -> usize {
        ds.len() / self.cfg.batch_size
    }

    pub fn total_steps(&self, ds: &Dataset) -> u64 {
        (self.steps_per_epoch(ds) * self.cfg.epochs) as u64
    }

    pub fn warmup_steps(&self, ds: &Dataset) -> u64 {
        (self.steps_per_epoch(ds) * self.cfg.warmup_epochs) as u64
    }

    /// Sample both views of one image under the policy its sub-batch uses.
    fn make_pair(
        &self,
        ds: &Dataset,
        index: usize,
        epoch: usize,
        equivariant: bool,
    ) -> Result<ViewPair<S>, TrainError> {
        sample_pair(&self.cfg, ds, index, epoch, equivariant)
    }

    /// View pairs for a whole sub-batch. Sampling runs across threads when
    /// `SER_THREADS` (or the machine) allows; results keep batch order and
    /// are bitwise independent of the thread count because every view draws
    /// from its own derived stream.
    fn make_pairs(
        &self,
        ds: &Dataset,
        indices: &[usize],
        epoch: usize,
        equivariant: bool,
    ) -> Result<Vec<ViewPair<S>>, TrainError> {
        let threads = augment_threads().min(indices.len().max(1));
        if threads <= 1 {
            return indices
                .iter()
                .map(|&i| self.make_pair(ds, i, epoch, equivariant))
                .collect();
        }
        let cfg = &self.cfg;
        let mut out: Vec<Option<Result<ViewPair<S>, TrainError>>> =
            (0..indices.len()).map(|_| None).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut out);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let at = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if at >= indices.len() {
                        break;
                    }
                    let pair = sample_pair(cfg, ds, indices[at], epoch, equivariant);
                    slots.lock().unwrap()[at] = Some(pair);
                });
            }
        });
        out.into_iter().map(|slot| slot.expect("filled above")).collect()
    }

    /// One optimizer step over one mini-batch, following the labeled stages:
    /// partition, views, invariance losses, token maps, alignment,
    /// equivariance loss, combination, backward, update.
    pub fn train_step<H: StepHook<S>>(
        &mut self,
        ds: &Dataset,
        batch: &[usize],
        epoch: usize,
        batch_ordinal: usize,
        hook: &mut H,
    ) -> Result<StepMetrics, TrainError> {
        let cfg = &self.cfg;
        // Baseline mode forces an all-b1 split but still draws the partition
        // shuffle, so enabling the regularizer with r = 0 is bitwise inert.
        let r = if cfg.baseline { 0.0 } else { cfg.r };
        let part = partition(batch, r, epoch as u64, cfg.seed)?;
        hook.on_partition(&part);

        let tape: Tape<S> = Tape::new();
        let bound = self.vit.bind(&tape, &self.store)?;

        let collect_all = cfg.all_layers
            || (cfg.augself_weight > 0.0 && cfg.augself_layer < cfg.model.depth);

        // embeddings of every pair, b1 first
        let b1_pairs = self.make_pairs(ds, &part.b1, epoch, false)?;
        let b2_pairs = self.make_pairs(ds, &part.b2, epoch, true)?;
        let mut b1_emb = Vec::new();
        for pair in &b1_pairs {
            hook.on_views(pair.source_index, pair);
            let f1 = forward_view(&bound, &pair.x1, false)?;
            let f2 = forward_view(&bound, &pair.x2, false)?;
            b1_emb.push((f1.emb, f2.emb));
        }
        let mut b2_emb = Vec::new();
        let mut b2_aligned: Vec<Vec<(TokenMap<'_, S>, TokenMap<'_, S>)>> = Vec::new();
        let mut b2_pairs_meta = Vec::new();
        for pair in &b2_pairs {
            let i = pair.source_index;
            hook.on_views(i, pair);
            let f1 = forward_view(&bound, &pair.x1, collect_all)?;
            let f2 = forward_view(&bound, &pair.x2, collect_all)?;
            hook.on_token_maps(
                i,
                (f1.prefix.grid.h, f1.prefix.grid.w),
                (f2.prefix.grid.h, f2.prefix.grid.w),
            );
            let g = relative(pair.x1.geom, pair.x2.geom);
            // one aligned/partner pair per regularized layer
            let mut layer_pairs = Vec::new();
            if cfg.all_layers {
                let a1 = f1.all_spatial.as_ref().expect("collected above");
                let a2 = f2.all_spatial.as_ref().expect("collected above");
                for l in 1..=cfg.model.depth {
                    let aligned = act_tokens(g, a1[l].feat, a1[l].grid, a2[l].grid)?;
                    layer_pairs.push((
                        TokenMap {
                            feat: aligned,
                            grid: a2[l].grid,
                        },
                        a2[l],
                    ));
                }
            } else {
                let aligned = act_tokens(g, f1.prefix.feat, f1.prefix.grid, f2.prefix.grid)?;
                layer_pairs.push((
                    TokenMap {
                        feat: aligned,
                        grid: f2.prefix.grid,
                    },
                    f2.prefix,
                ));
            }
            hook.on_aligned(i, (f2.prefix.grid.h, f2.prefix.grid.w));
            b2_aligned.push(layer_pairs);
            b2_pairs_meta.push((pair.x1.geom, pair.x2.geom, f1.pooled_at(cfg.augself_layer), f2.pooled_at(cfg.augself_layer)));
            b2_emb.push((f1.emb, f2.emb));
        }

        let zero = tape.scalar(S::ZERO);
        let l_inv1 = invariance_loss(&b1_emb, &self.inv_proj, &bound, cfg)?.unwrap_or(zero);
        let l_inv2 = invariance_loss(&b2_emb, &self.inv_proj, &bound, cfg)?.unwrap_or(zero);

        let l_equiv = if b2_aligned.len() >= 2 {
            let layers = b2_aligned[0].len();
            let mut per_layer = Vec::with_capacity(layers);
            for l in 0..layers {
                let z: Vec<TokenMap<'_, S>> = b2_aligned.iter().map(|v| v[l].0).collect();
                let zp: Vec<TokenMap<'_, S>> = b2_aligned.iter().map(|v| v[l].1).collect();
                per_layer.push(equiv_nt_xent(&z, &zp, &self.equiv_proj, &bound, cfg.tau_eq)?);
            }
            // even split of the weight across regularized layers
            let mut acc = per_layer[0].scale(1.0 / layers as f64);
            for t in &per_layer[1..] {
                acc = acc.add(t.scale(1.0 / layers as f64))?;
            }
            acc
        } else {
            if !part.b2.is_empty() && !self.warned_small_b2 && !cfg.baseline {
                eprintln!(
                    "warning: |b2| = {} leaves the equivariance loss without negatives; skipping it for such batches",
                    part.b2.len()
                );
                self.warned_small_b2 = true;
            }
            zero
        };

        let equiv_term = if self.zero_equiv_grad {
            l_equiv.stop_grad()
        } else {
            l_equiv
        };
        let mut total = total_loss(l_inv1, l_inv2, equiv_term, cfg.lambda)?;

        if let Some(head) = &self.augself_head {
            if b2_pairs_meta.len() >= 1 {
                let pairs: Vec<_> = b2_pairs_meta
                    .iter()
                    .map(|(g1, g2, e1, e2)| (*e1, *e2, *g1, *g2))
                    .collect();
                let aux = augself_aux(&pairs, head, &bound)?;
                total = total.add(aux.scale(cfg.augself_weight))?;
            }
        }

        let metrics_raw = (
            l_inv1.item().to_f64(),
            l_inv2.item().to_f64(),
            l_equiv.item().to_f64(),
            total.item().to_f64(),
        );
        hook.on_losses(metrics_raw.0, metrics_raw.1, metrics_raw.2, metrics_raw.3);
        if !metrics_raw.3.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: batch_ordinal,
                value: metrics_raw.3,
                indices: batch.to_vec(),
                seed: cfg.seed,
            });
        }

        tape.backward(total)?;
        let grads: Vec<Vec<S>> = (0..self.store.len())
            .map(|slot| {
                tape.slot_grad(slot)
                    .unwrap_or_else(|| vec![S::ZERO; self.store.data(slot).len()])
            })
            .collect();
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt();
        let lr = lr_schedule(
            self.global_step,
            self.total_steps(ds),
            self.warmup_steps(ds),
            cfg.base_lr,
        );
        self.opt.update(&mut self.store, &grads, lr);
        self.global_step += 1;

        Ok(StepMetrics {
            l_inv1: metrics_raw.0,
            l_inv2: metrics_raw.1,
            l_equiv: metrics_raw.2,
            l_total: metrics_raw.3,
            grad_norm,
            lr,
        })
    }

    /// Deterministic image order for one epoch.
    pub fn epoch_order(&self, ds: &Dataset, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        let mut rng = Rng::stream(self.cfg.seed, &[TAG_EPOCH_ORDER, epoch as u64]);
        rng.shuffle(&mut order);
        order
    }

    pub fn train_epoch<H: StepHook<S>>(
        &mut self,
        ds: &Dataset,
        hook: &mut H,
    ) -> Result<EpochMetrics, TrainError> {
        let epoch = self.epoch;
        let started = Instant::now();
        let order = self.epoch_order(ds, epoch);
        let bs = self.cfg.batch_size;
        let steps = self.steps_per_epoch(ds);
        let mut sums = StepMetrics::default();
        let mut last_lr = 0.0;
        for b in 0..steps {
            let batch = &order[b * bs..(b + 1) * bs];
            let m = self.train_step(ds, batch, epoch, b, hook)?;
            sums.l_inv1 += m.l_inv1;
            sums.l_inv2 += m.l_inv2;
            sums.l_equiv += m.l_equiv;
            sums.l_total += m.l_total;
            last_lr = m.lr;
        }
        self.epoch += 1;
        let n = steps.max(1) as f64;
        Ok(EpochMetrics {
            epoch,
            step: self.global_step,
            l_inv1: sums.l_inv1 / n,
            l_inv2: sums.l_inv2 / n,
            l_equiv: sums.l_equiv / n,
            l_total: sums.l_total / n,
            lr: last_lr,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Full pretraining run with per-epoch CSV rows and checkpoints at the
    /// configured cadence. Returns the final checkpoint path.
    pub fn run(&mut self, ds: &Dataset, out_dir: &Path) -> Result<PathBuf, TrainError> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| TrainError::Io(format!("{}: {e}", out_dir.display())))?;
        let csv_path = out_dir.join("metrics.csv");
        let fresh = self.epoch == 0 || !csv_path.exists();
        let mut csv = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv_path)
            .map_err(|e| TrainError::Io(format!("{}: {e}", csv_path.display())))?;
        if fresh {
            writeln!(csv, "epoch,step,l_inv1,l_inv2,l_equiv,l_total,lr,seconds")
                .map_err(|e| TrainError::Io(format!("{}: {e}", csv_path.display())))?;
        }
        while self.epoch < self.cfg.epochs {
            let m = self.train_epoch(ds, &mut NoHook)?;
            writeln!(
                csv,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.3}",
                m.epoch, m.step, m.l_inv1, m.l_inv2, m.l_equiv, m.l_total, m.lr, m.seconds
            )
            .map_err(|e| TrainError::Io(format!("{}: {e}", csv_path.display())))?;
            let done = self.epoch;
            if done == self.cfg.epochs
                || (self.cfg.ckpt_every > 0 && done % self.cfg.ckpt_every == 0)
            {
                let path = out_dir.join(format!("ckpt_{done:04}.serc"));
                self.save_checkpoint(&path)?;
            }
        }
        let final_path = out_dir.join("final.serc");
        self.save_checkpoint(&final_path)?;
        Ok(final_path)
    }

    pub fn manifest(&self) -> String {
        format!
            ("[config]\n{}[state]\nnext_epoch = {}\nglobal_step = {}\nopt_step = {}\nrng = stateless(seed={}, per-epoch derivation)\n",
            self.cfg.echo(),
            self.epoch,
            self.global_step,
            self.opt.step,
            self.cfg.seed
        )
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut tensors = self.store.export();
        for slot in 0..self.store.len() {
            tensors.push((
                format!("opt.m.{}", self.store.name(slot)),
                RawTensor::new(self.store.shape(slot).to_vec(), self.opt.m[slot].clone()),
            ));
            tensors.push((
                format!("opt.v.{}", self.store.name(slot)),
                RawTensor::new(self.store.shape(slot).to_vec(), self.opt.v[slot].clone()),
            ));
        }
        let c = Container {
            manifest: self.manifest(),
            tensors,
        };
        write_container_file(path, &c)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint; the stored config echo must match
    /// the requested config exactly.
    pub fn resume(cfg: Config, path: &Path) -> Result<Self, TrainError> {
        let container: Container<S> = read_container_file(path)?;
        let manifest = container.manifest.clone();
        let stored_cfg = section(&manifest, "[config]")
            .ok_or_else(|| TrainError::ResumeMismatch("checkpoint has no [config] section".into()))?;
        if stored_cfg.trim() != cfg.echo().trim() {
            return Err(TrainError::ResumeMismatch(
                "checkpoint config does not match the requested config".into(),
            ));
        }
        let state = section(&manifest, "[state]")
            .ok_or_else(|| TrainError::ResumeMismatch("checkpoint has no [state] section".into()))?;
        let mut trainer = Trainer::new(cfg)?;
        let mut params = Vec::new();
        for (name, t) in &container.tensors {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                let slot = trainer.store.slot_of(rest).ok_or_else(|| {
                    TrainError::ResumeMismatch(format!("unknown optimizer tensor {name}"))
                })?;
                trainer.opt.m[slot] = t.data.clone();
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                let slot = trainer.store.slot_of(rest).ok_or_else(|| {
                    TrainError::ResumeMismatch(format!("unknown optimizer tensor {name}"))
                })?;
                trainer.opt.v[slot] = t.data.clone();
            } else {
                params.push((name.clone(), t.clone()));
            }
        }
        trainer.store.import(&params)?;
        for line in state.lines() {
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "next_epoch" => {
                        trainer.epoch = v.trim().parse().map_err(|_| {
                            TrainError::ResumeMismatch("bad next_epoch in manifest".into())
                        })?
                    }
                    "global_step" => {
                        trainer.global_step = v.trim().parse().map_err(|_| {
                            TrainError::ResumeMismatch("bad global_step in manifest".into())
                        })?
                    }
                    "opt_step" => {
                        trainer.opt.step = v.trim().parse().map_err(|_| {
                            TrainError::ResumeMismatch("bad opt_step in manifest".into())
                        })?
                    }
                    _ => {}
                }
            }
        }
        Ok(trainer)
    }
}

/// Recover the config a checkpoint was trained with.
pub fn checkpoint_config(path: &Path) -> Result<Config, TrainError> {
    let manifest = crate::tensor::io::read_container_manifest(path)?;
    let body = section(&manifest, "[config]")
        .ok_or_else(|| TrainError::ResumeMismatch("checkpoint has no [config] section".into()))?;
    Config::parse_str(body, Config::default())
        .map_err(|e| TrainError::ResumeMismatch(format!("bad checkpoint config: {e}")))
}

impl<S: Scalar> Trainer<S> {
    /// Rebuild a trainer straight from a checkpoint, taking the config from
    /// its manifest.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let cfg = checkpoint_config(path)?;
        Trainer::resume(cfg, path)
    }
}

fn section<'a>(manifest: &'a str, header: &str) -> Option<&'a str> {
    let start = manifest.find(header)? + header.len();
    let rest = &manifest[start..];
    match rest.find("\n[") {
        Some(end) => Some(&rest[..end + 1]),
        None => Some(rest),
    }
}

/// Both views of one image under one policy; a pure function of
/// (config, dataset, index, epoch).
fn sample_pair<S: Scalar>(
    cfg: &Config,
    ds: &Dataset,
    index: usize,
    epoch: usize,
    equivariant: bool,
) -> Result<ViewPair<S>, TrainError> {
    let img = ds.image_as::<S>(index);
    let make = |view_index: usize| -> Result<View<S>, TrainError> {
        let mut rng = view_stream(cfg.seed, epoch as u64, index, view_index);
        let v = if equivariant {
            sample_view_teq(&img, &mut rng, &cfg.geo, &cfg.photo)?
        } else {
            sample_view_t(&img, &mut rng, &cfg.effective_crop(), &cfg.photo)?
        };
        Ok(v)
    };
    Ok(ViewPair {
        x1: make(0)?,
        x2: make(1)?,
        source_index: index,
    })
}

/// Augmentation thread cap: `SER_THREADS` when set, else the machine's
/// parallelism.
pub fn augment_threads() -> usize {
    match std::env::var("SER_THREADS") {
        Ok(v) => v.parse().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism()
            .map(|p| p.get())
            .unwrap_or(1),
    }
}

/// Invariance loss over a sub-batch's projected view-pair embeddings; `None`
/// when the sub-batch is too small to provide negatives.
fn invariance_loss<'m, 't, S: Scalar>(
    pairs: &[(Tensor<'t, S>, Tensor<'t, S>)],
    inv_proj: &ProjectionHead,
    bound: &BoundViT<'m, 't, S>,
    cfg: &Config,
) -> Result<Option<Tensor<'t, S>>, TrainError> {
    if pairs.len() < 2 {
        return Ok(None);
    }
    let d = cfg.model.dim;
    let e1 = concat_rows(
        &pairs
            .iter()
            .map(|(a, _)| a.reshape(&[1, d]))
            .collect::<Result<Vec<_>, _>>()?,
    )?;
    let e2 = concat_rows(
        &pairs
            .iter()
            .map(|(_, b)| b.reshape(&[1, d]))
            .collect::<Result<Vec<_>, _>>()?,
    )?;
    let p1 = inv_proj.apply(bound, e1)?;
    let p2 = inv_proj.apply(bound, e2)?;
    let loss = match cfg.inv_kind {
        InvKind::Contrastive => inv_contrastive(p1, p2, cfg.tau_inv)?,
        InvKind::Redundancy => inv_redundancy(p1, p2, cfg.off_diag_weight)?,
    };
    Ok(Some(loss))
}

/// One view's forward products.
struct ForwardView<'t, S: Scalar> {
    emb: Tensor<'t, S>,
    prefix: TokenMap<'t, S>,
    all_spatial: Option<Vec<TokenMap<'t, S>>>,
    pooled: Vec<Option<Tensor<'t, S>>>,
}

impl<'t, S: Scalar> ForwardView<'t, S> {
    /// Representation for the auxiliary transformation-prediction loss at a
    /// layer: the final embedding at `depth`, mean-pooled spatial tokens at
    /// intermediate layers (when collected).
    fn pooled_at(&self, layer: usize) -> Tensor<'t, S> {
        match self.pooled.get(layer) {
            Some(Some(t)) => *t,
            _ => self.emb,
        }
    }
}

fn forward_view<'m, 't, S: Scalar>(
    bound: &BoundViT<'m, 't, S>,
    view: &View<S>,
    collect_all: bool,
) -> Result<ForwardView<'t, S>, TrainError> {
    let cfg = bound.cfg().clone();
    if collect_all {
        let maps = bound.forward_all_spatial(&view.image)?;
        // rebuild the head path from the prefix map to get the embedding
        let prefix = maps[cfg.split_layer];
        let (emb, _cache) = bound.forward_head(prefix)?;
        let mut pooled: Vec<Option<Tensor<'t, S>>> = Vec::with_capacity(cfg.depth + 1);
        for m in &maps {
            pooled.push(Some(m.feat.mean_rows()?));
        }
        Ok(ForwardView {
            emb,
            prefix,
            all_spatial: Some(maps),
            pooled,
        })
    } else {
        let prefix = bound.forward_prefix(&view.image)?;
        let (emb, _cache) = bound.forward_head(prefix)?;
        Ok(ForwardView {
            emb,
            prefix,
            all_spatial: None,
            pooled: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.model.image = 32;
        cfg.model.patch = 8;
        cfg.model.dim = 16;
        cfg.model.depth = 2;
        cfg.model.heads = 2;
        cfg.model.split_layer = 1;
        cfg.model.cls_layer = 1;
        cfg.epochs = 2;
        cfg.batch_size = 8;
        cfg.warmup_epochs = 1;
        cfg.proj_dim = 8;
        cfg.proj_hidden = 16;
        cfg.ckpt_every = 1;
        cfg
    }

    fn tiny_dataset() -> Dataset {
        generate(
            &SyntheticSpec {
                n_images: 16,
                ..SyntheticSpec::default()
            },
            77,
        )
        .unwrap()
    }

    #[test]
    fn lr_schedule_endpoints() {
        let base = 1e-3;
        assert_eq!(lr_schedule(0, 100, 10, base), 0.0);
        assert_eq!(lr_schedule(10, 100, 10, base), base);
        let end = lr_schedule(100, 100, 10, base);
        assert!(end.abs() < 1e-18, "cosine endpoint {end}");
    }

    #[test]
    fn adamw_zero_grad_behaviour() {
        let mut store = ParamStore::<f64>::new();
        store.register("p", vec![2], vec![1.0, -2.0]);
        let mut opt = Optimizer::new(&store, 0.0);
        opt.update(&mut store, &[vec![0.0, 0.0]], 0.1);
        assert_eq!(store.data(0), &[1.0, -2.0]);

        // decoupled decay only: shrink by (1 - lr*wd) per step
        let mut store = ParamStore::<f64>::new();
        store.register("p", vec![1], vec![2.0]);
        let mut opt = Optimizer::new(&store, 0.5);
        opt.update(&mut store, &[vec![0.0]], 0.1);
        assert!((store.data(0)[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn adamw_two_steps_match_hand_computation() {
        let mut store = ParamStore::<f64>::new();
        store.register("p", vec![1], vec![0.5]);
        let mut opt = Optimizer::new(&store, 0.0);
        let (b1, b2, eps, lr) = (ADAM_BETA1, ADAM_BETA2, ADAM_EPS, 0.01);
        let (g1, g2) = (0.3, -0.2);

        let mut m = 0.0;
        let mut v = 0.0;
        let mut p = 0.5;
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            p -= lr * mhat / (vhat.sqrt() + eps);
        }

        opt.update(&mut store, &[vec![g1]], lr);
        opt.update(&mut store, &[vec![g2]], lr);
        assert!((store.data(0)[0] - p).abs() < 1e-12, "{} vs {p}", store.data(0)[0]);
    }

    #[test]
    fn r_zero_matches_pure_baseline_bitwise() {
        let ds = tiny_dataset();
        let mut cfg_r0 = tiny_config();
        cfg_r0.r = 0.0;
        let mut cfg_base = tiny_config();
        cfg_base.baseline = true;

        let mut t1 = Trainer::<f32>::new(cfg_r0).unwrap();
        let mut t2 = Trainer::<f32>::new(cfg_base).unwrap();
        for _ in 0..2 {
            t1.train_epoch(&ds, &mut NoHook).unwrap();
            t2.train_epoch(&ds, &mut NoHook).unwrap();
        }
        for slot in 0..t1.store.len() {
            assert_eq!(
                t1.store.data(slot),
                t2.store.data(slot),
                "{}",
                t1.store.name(slot)
            );
        }
    }

    #[test]
    fn lambda_zero_equals_gradient_zeroing_bitwise() {
        let ds = tiny_dataset();
        let mut cfg_l0 = tiny_config();
        cfg_l0.lambda = 0.0;
        let cfg_lpos = tiny_config(); // lambda 0.5 default

        let mut t1 = Trainer::<f32>::new(cfg_l0).unwrap();
        let mut t2 = Trainer::<f32>::new(cfg_lpos).unwrap();
        t2.zero_equiv_grad = true;
        for _ in 0..2 {
            let m1 = t1.train_epoch(&ds, &mut NoHook).unwrap();
            let m2 = t2.train_epoch(&ds, &mut NoHook).unwrap();
            // the regularizer is still computed in both runs
            assert!(m1.l_equiv > 0.0 && m2.l_equiv > 0.0);
        }
        for slot in 0..t1.store.len() {
            assert_eq!(
                t1.store.data(slot),
                t2.store.data(slot),
                "{}",
                t1.store.name(slot)
            );
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let t = Trainer::<f64>::new(cfg).unwrap();
        let batch: Vec<usize> = (0..8).collect();

        // capture gradients via a bespoke step: run the pieces by hand
        let tape: Tape<f64> = Tape::new();
        let bound = t.vit.bind(&tape, &t.store).unwrap();
        let part = partition(&batch, t.cfg.r, 0, t.cfg.seed).unwrap();
        let mut b1_emb = Vec::new();
        for &i in &part.b1 {
            let pair = t.make_pair(&ds, i, 0, false).unwrap();
            let f1 = forward_view(&bound, &pair.x1, false).unwrap();
            let f2 = forward_view(&bound, &pair.x2, false).unwrap();
            b1_emb.push((f1.emb, f2.emb));
        }
        let mut maps = Vec::new();
        let mut b2_emb = Vec::new();
        for &i in &part.b2 {
            let pair = t.make_pair(&ds, i, 0, true).unwrap();
            let f1 = forward_view(&bound, &pair.x1, false).unwrap();
            let f2 = forward_view(&bound, &pair.x2, false).unwrap();
            let g = relative(pair.x1.geom, pair.x2.geom);
            let aligned = act_tokens(g, f1.prefix.feat, f1.prefix.grid, f2.prefix.grid).unwrap();
            maps.push((
                TokenMap {
                    feat: aligned,
                    grid: f2.prefix.grid,
                },
                f2.prefix,
            ));
            b2_emb.push((f1.emb, f2.emb));
        }
        fn stack<'t>(
            pairs: &[(Tensor<'t, f64>, Tensor<'t, f64>)],
            first: bool,
            d: usize,
        ) -> Tensor<'t, f64> {
            concat_rows(
                &pairs
                    .iter()
                    .map(|(a, b)| if first { *a } else { *b }.reshape(&[1, d]).unwrap())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        }
        let d = t.cfg.model.dim;
        let p11 = t.inv_proj.apply(&bound, stack(&b1_emb, true, d)).unwrap();
        let p12 = t.inv_proj.apply(&bound, stack(&b1_emb, false, d)).unwrap();
        let p21 = t.inv_proj.apply(&bound, stack(&b2_emb, true, d)).unwrap();
        let p22 = t.inv_proj.apply(&bound, stack(&b2_emb, false, d)).unwrap();
        let inv1 = inv_contrastive(p11, p12, t.cfg.tau_inv).unwrap();
        let inv2 = inv_contrastive(p21, p22, t.cfg.tau_inv).unwrap();
        let z: Vec<_> = maps.iter().map(|(a, _)| *a).collect();
        let zp: Vec<_> = maps.iter().map(|(_, b)| *b).collect();
        let equiv = equiv_nt_xent(&z, &zp, &t.equiv_proj, &bound, t.cfg.tau_eq).unwrap();
        let total = total_loss(inv1, inv2, equiv, t.cfg.lambda).unwrap();
        tape.backward(total).unwrap();

        for slot in 0..t.store.len() {
            let g = tape.slot_grad(slot).unwrap();
            let nonzero = g.iter().any(|v| *v != 0.0);
            assert!(nonzero, "parameter {} received no gradient", t.store.name(slot));
        }
    }

    #[test]
    fn step_hook_observes_every_labeled_stage() {
        #[derive(Default)]
        struct Recorder {
            stages: Vec<&'static str>,
            b2: usize,
        }
        impl StepHook<f32> for Recorder {
            fn on_partition(&mut self, p: &BatchPartition) {
                self.stages.push("partition");
                self.b2 = p.b2.len();
            }
            fn on_views(&mut self, _i: usize, _pair: &ViewPair<f32>) {
                self.stages.push("views");
            }
            fn on_token_maps(&mut self, _i: usize, _g1: (usize, usize), _g2: (usize, usize)) {
                self.stages.push("token_maps");
            }
            fn on_aligned(&mut self, _i: usize, _g: (usize, usize)) {
                self.stages.push("aligned");
            }
            fn on_losses(&mut self, _i1: f64, _i2: f64, _e: f64, _t: f64) {
                self.stages.push("losses");
            }
        }
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        let mut hook = Recorder::default();
        t.train_step(&ds, &batch, 0, 0, &mut hook).unwrap();
        assert_eq!(hook.stages[0], "partition");
        assert_eq!(hook.stages.iter().filter(|s| **s == "views").count(), 8);
        assert_eq!(
            hook.stages.iter().filter(|s| **s == "token_maps").count(),
            hook.b2
        );
        assert_eq!(
            hook.stages.iter().filter(|s| **s == "aligned").count(),
            hook.b2
        );
        assert_eq!(*hook.stages.last().unwrap(), "losses");
    }

    #[test]
    fn all_layers_variant_trains_and_differs_from_single_layer() {
        let ds = tiny_dataset();
        let mut cfg_all = tiny_config();
        cfg_all.epochs = 1;
        cfg_all.all_layers = true;
        let mut cfg_single = tiny_config();
        cfg_single.epochs = 1;

        let mut t_all = Trainer::<f32>::new(cfg_all).unwrap();
        let m_all = t_all.train_epoch(&ds, &mut NoHook).unwrap();
        assert!(m_all.l_equiv > 0.0 && m_all.l_total.is_finite());

        let mut t_single = Trainer::<f32>::new(cfg_single).unwrap();
        let m_single = t_single.train_epoch(&ds, &mut NoHook).unwrap();
        // regularizing every block changes the objective value
        assert_ne!(m_all.l_equiv, m_single.l_equiv);
    }

    #[test]
    fn augself_head_joins_the_objective_when_enabled() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.epochs = 1;
        cfg.augself_weight = 0.5;
        cfg.augself_layer = 1; // pooled intermediate tokens
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        assert!(t.augself_head.is_some());
        let m = t.train_epoch(&ds, &mut NoHook).unwrap();
        assert!(m.l_total.is_finite());
        // the head's parameters moved, so it received gradient
        let slot = t.store.slot_of("augself.w2").unwrap();
        let moved = t.store.data(slot).iter().any(|v| *v != 0.0);
        assert!(moved);
    }

    #[test]
    fn view_sampling_is_thread_count_invariant() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let t = Trainer::<f32>::new(cfg).unwrap();
        let indices: Vec<usize> = (0..8).collect();
        let sequential: Vec<_> = indices
            .iter()
            .map(|&i| t.make_pair(&ds, i, 0, true).unwrap())
            .collect();
        let threaded = t.make_pairs(&ds, &indices, 0, true).unwrap();
        for (a, b) in sequential.iter().zip(&threaded) {
            assert_eq!(a.source_index, b.source_index);
            assert_eq!(a.x1.image, b.x1.image);
            assert_eq!(a.x2.image, b.x2.image);
            assert_eq!(a.x1.geom, b.x1.geom);
        }
    }

    #[test]
    fn checkpoint_resume_is_bitwise() {
        let ds = tiny_dataset();
        let dir = std::env::temp_dir().join("softequiv_train_test_resume");
        let _ = std::fs::remove_dir_all(&dir);

        let mut cfg = tiny_config();
        cfg.epochs = 4;
        cfg.ckpt_every = 2;

        let mut full = Trainer::<f32>::new(cfg.clone()).unwrap();
        let out_full = dir.join("full");
        let final_full = full.run(&ds, &out_full).unwrap();

        // interrupted run: first two epochs in one trainer, then resume
        let out_half = dir.join("half");
        let mut half = Trainer::<f32>::new(cfg.clone()).unwrap();
        std::fs::create_dir_all(&out_half).unwrap();
        half.train_epoch(&ds, &mut NoHook).unwrap();
        half.train_epoch(&ds, &mut NoHook).unwrap();
        let mid = out_half.join("ckpt_0002.serc");
        half.save_checkpoint(&mid).unwrap();
        drop(half);
        let mut resumed = Trainer::<f32>::resume(cfg.clone(), &mid).unwrap();
        assert_eq!(resumed.epoch, 2);
        let final_resumed = resumed.run(&ds, &out_half).unwrap();

        let a = std::fs::read(&final_full).unwrap();
        let b = std::fs::read(&final_resumed).unwrap();
        assert_eq!(a, b, "resumed checkpoint must equal the uninterrupted one bitwise");

        // mismatched config refuses to resume
        let mut other = cfg;
        other.lambda = 0.9;
        assert!(matches!(
            Trainer::<f32>::resume(other, &mid),
            Err(TrainError::ResumeMismatch(_))
        ));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.base_lr = 1e18; // blows the parameters up within a few steps
        cfg.warmup_epochs = 0;
        cfg.epochs = 50;
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let mut aborted = None;
        'outer: for _ in 0..50 {
            match t.train_epoch(&ds, &mut NoHook) {
                Ok(_) => continue,
                Err(e) => {
                    aborted = Some(e);
                    break 'outer;
                }
            }
        }
        match aborted {
            Some(TrainError::NonFinite { indices, .. }) => {
                assert!(!indices.is_empty(), "diagnostic must carry batch indices");
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn identical_seeds_identical_checkpoints() {
        let ds = tiny_dataset();
        let dir = std::env::temp_dir().join("softequiv_train_test_det");
        let _ = std::fs::remove_dir_all(&dir);
        let mut cfg = tiny_config();
        cfg.epochs = 1;
        let p1 = {
            let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
            t.run(&ds, &dir.join("a")).unwrap()
        };
        let p2 = {
            let mut t = Trainer::<f32>::new(cfg).unwrap();
            t.run(&ds, &dir.join("b")).unwrap()
        };
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
