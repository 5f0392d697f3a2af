//! The split vision transformer and its projection heads.
//!
//! The encoder decomposes as prefix [blocks 0..split_layer) over spatial
//! tokens only, then head [split_layer..depth) with a learned CLS token
//! prepended at the input of block `cls_layer` (cls_layer >= split_layer).
//! Positional embeddings are learned on the base grid and bilinearly
//! interpolated for the variable grids produced by uncropped scaled views.
//!
//! Layer indices count completed blocks: layer 0 is patch embedding plus
//! positions, layer `depth` is the output of the last block. The final
//! layernorm applies only on the embedding path, never to cached or probed
//! block outputs.

use std::fmt;

use crate::group::TokenGrid;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::io::RawTensor;
use crate::tensor::{concat_cols, concat_rows, Result as TResult, Tape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    BadConfig(String),
    Misaligned { image: usize, patch: usize },
    BadLayer { layer: usize, depth: usize },
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadConfig(s) => write!(f, "bad model config: {s}"),
            ModelError::Misaligned { image, patch } => {
                write!(f, "image side {image} not divisible by patch {patch}")
            }
            ModelError::BadLayer { layer, depth } => {
                write!(f, "layer {layer} out of range 0..={depth}")
            }
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Flat named parameter storage shared by the encoder and all heads, so the
/// optimizer, checkpoints, and gradient checks see one deterministic list.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    buffers: Vec<Vec<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<S>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.buffers.push(data);
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn shape(&self, slot: usize) -> &[usize] {
        &self.shapes[slot]
    }

    pub fn data(&self, slot: usize) -> &[S] {
        &self.buffers[slot]
    }

    pub fn data_mut(&mut self, slot: usize) -> &mut Vec<S> {
        &mut self.buffers[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_params(&self) -> usize {
        self.buffers.iter().map(|b| b.len()).sum()
    }

    /// Export as named raw tensors (checkpointing).
    pub fn export(&self) -> Vec<(String, RawTensor<S>)> {
        (0..self.len())
            .map(|i| {
                (
                    self.names[i].clone(),
                    RawTensor::new(self.shapes[i].clone(), self.buffers[i].clone()),
                )
            })
            .collect()
    }

    pub fn import(&mut self, tensors: &[(String, RawTensor<S>)]) -> Result<(), ModelError> {
        for (name, t) in tensors {
            let slot = self.slot_of(name).ok_or_else(|| {
                ModelError::BadConfig(format!("checkpoint tensor {name} has no matching parameter"))
            })?;
            if self.shapes[slot] != t.shape {
                return Err(ModelError::BadConfig(format!(
                    "checkpoint tensor {name} shape {:?} does not match parameter shape {:?}",
                    t.shape, self.shapes[slot]
                )));
            }
            self.buffers[slot] = t.data.clone();
        }
        Ok(())
    }

    /// Bind every slot onto a tape, in slot order.
    pub fn bind_all<'t>(&self, tape: &'t Tape<S>) -> TResult<Vec<Tensor<'t, S>>> {
        (0..self.len())
            .map(|i| tape.bind(i, &self.buffers[i], &self.shapes[i]))
            .collect()
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn init_normal<S: Scalar>(rng: &mut Rng, n: usize, std: f64) -> Vec<S> {
    (0..n).map(|_| S::from_f64(rng.normal() * std)).collect()
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image: usize,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Index of the first head block; the prefix is blocks [0, split_layer).
    pub split_layer: usize,
    /// Block index at whose input the CLS token is prepended.
    pub cls_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image: 32,
            patch: 8,
            channels: 3,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            split_layer: 1,
            cls_layer: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image % self.patch != 0 {
            return Err(ModelError::Misaligned {
                image: self.image,
                patch: self.patch,
            });
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.split_layer > self.depth {
            return Err(ModelError::BadConfig(format!(
                "split_layer {} exceeds depth {}",
                self.split_layer, self.depth
            )));
        }
        if self.cls_layer < self.split_layer || self.cls_layer > self.depth {
            return Err(ModelError::BadConfig(format!(
                "cls_layer {} must lie in [split_layer {}, depth {}]",
                self.cls_layer, self.split_layer, self.depth
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image / self.patch
    }

    pub fn base_grid(&self) -> TokenGrid {
        TokenGrid::new(self.grid_side(), self.grid_side(), self.patch)
    }

    /// Closed-form parameter count of the encoder:
    ///   embed (p^2 c + 1) d + positions (g^2 + 1) d + cls d
    ///   + depth * (4d^2 + 2m d^2 + (m + 9) d)   [attention, MLP, two LNs]
    ///   + final LN 2d
    pub fn encoder_param_count(&self) -> usize {
        let d = self.dim;
        let g2 = self.grid_side() * self.grid_side();
        let p2c = self.patch * self.patch * self.channels;
        let m = self.mlp_ratio;
        let per_block = 4 * d * d + 2 * m * d * d + (m + 9) * d;
        (p2c + 1) * d + (g2 + 1) * d + d + self.depth * per_block + 2 * d
    }
}

struct BlockSlots {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Encoder slots into the shared parameter store.
pub struct SplitViT {
    pub cfg: ModelConfig,
    patch_w: usize,
    patch_b: usize,
    pos_grid: usize,
    pos_cls: usize,
    cls_token: usize,
    blocks: Vec<BlockSlots>,
    final_g: usize,
    final_b: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl SplitViT {
    /// Register encoder parameters; weights are seeded per-slot so layout
    /// changes elsewhere never shift the init stream.
    pub fn init<S: Scalar>(
        cfg: ModelConfig,
        store: &mut ParamStore<S>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.dim;
        let p2c = cfg.patch * cfg.patch * cfg.channels;
        let g2 = cfg.grid_side() * cfg.grid_side();
        let slot_rng = |tag: u64, n: usize, std: f64| -> Vec<S> {
            let mut r = Rng::stream(seed, &[crate::augment::TAG_INIT, tag]);
            init_normal(&mut r, n, std)
        };
        let patch_w = store.register("encoder.patch_embed.w", vec![p2c, d], slot_rng(0, p2c * d, INIT_STD));
        let patch_b = store.register("encoder.patch_embed.b", vec![d], vec![S::ZERO; d]);
        let pos_grid = store.register("encoder.pos.grid", vec![g2, d], slot_rng(1, g2 * d, INIT_STD));
        let pos_cls = store.register("encoder.pos.cls", vec![d], slot_rng(2, d, INIT_STD));
        let cls_token = store.register("encoder.cls.token", vec![d], slot_rng(3, d, INIT_STD));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let base = 100 + i as u64 * 20;
            let m = cfg.mlp_ratio * d;
            blocks.push(BlockSlots {
                ln1_g: store.register(&format!("encoder.block{i}.ln1.g"), vec![d], vec![S::ONE; d]),
                ln1_b: store.register(&format!("encoder.block{i}.ln1.b"), vec![d], vec![S::ZERO; d]),
                wq: store.register(&format!("encoder.block{i}.attn.wq"), vec![d, d], slot_rng(base, d * d, INIT_STD)),
                bq: store.register(&format!("encoder.block{i}.attn.bq"), vec![d], vec![S::ZERO; d]),
                wk: store.register(&format!("encoder.block{i}.attn.wk"), vec![d, d], slot_rng(base + 1, d * d, INIT_STD)),
                bk: store.register(&format!("encoder.block{i}.attn.bk"), vec![d], vec![S::ZERO; d]),
                wv: store.register(&format!("encoder.block{i}.attn.wv"), vec![d, d], slot_rng(base + 2, d * d, INIT_STD)),
                bv: store.register(&format!("encoder.block{i}.attn.bv"), vec![d], vec![S::ZERO; d]),
                wo: store.register(&format!("encoder.block{i}.attn.wo"), vec![d, d], slot_rng(base + 3, d * d, INIT_STD)),
                bo: store.register(&format!("encoder.block{i}.attn.bo"), vec![d], vec![S::ZERO; d]),
                ln2_g: store.register(&format!("encoder.block{i}.ln2.g"), vec![d], vec![S::ONE; d]),
                ln2_b: store.register(&format!("encoder.block{i}.ln2.b"), vec![d], vec![S::ZERO; d]),
                w1: store.register(&format!("encoder.block{i}.mlp.w1"), vec![d, m], slot_rng(base + 4, d * m, INIT_STD)),
                b1: store.register(&format!("encoder.block{i}.mlp.b1"), vec![m], vec![S::ZERO; m]),
                w2: store.register(&format!("encoder.block{i}.mlp.w2"), vec![m, d], slot_rng(base + 5, m * d, INIT_STD)),
                b2: store.register(&format!("encoder.block{i}.mlp.b2"), vec![d], vec![S::ZERO; d]),
            });
        }
        let final_g = store.register("encoder.final_ln.g", vec![d], vec![S::ONE; d]);
        let final_b = store.register("encoder.final_ln.b", vec![d], vec![S::ZERO; d]);
        Ok(SplitViT {
            cfg,
            patch_w,
            patch_b,
            pos_grid,
            pos_cls,
            cls_token,
            blocks,
            final_g,
            final_b,
        })
    }
}

/// Patchify an (h, w, c) image into [tokens, patch*patch*c] rows, row-major
/// tokens, row-major pixels within each patch. Pure data movement.
pub fn patchify<S: Scalar>(img: &RawTensor<S>, patch: usize) -> Result<(RawTensor<S>, TokenGrid), ModelError> {
    let (h, w) = (img.shape[0], img.shape[1]);
    let c = if img.shape.len() == 3 { img.shape[2] } else { 1 };
    if h % patch != 0 || w % patch != 0 {
        return Err(ModelError::Misaligned {
            image: if h % patch != 0 { h } else { w },
            patch,
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let fdim = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * fdim);
    for ty in 0..gh {
        for tx in 0..gw {
            for py in 0..patch {
                let y = ty * patch + py;
                let xs = tx * patch;
                out.extend_from_slice(&img.data[(y * w + xs) * c..(y * w + xs + patch) * c]);
            }
        }
    }
    Ok((
        RawTensor::new(vec![gh * gw, fdim], out),
        TokenGrid::new(gh, gw, patch),
    ))
}

/// Mean color per patch: the oracle-side patchify used by the
/// permutation-equivalence checks.
pub fn patch_means<S: Scalar>(img: &RawTensor<S>, patch: usize) -> Result<(RawTensor<S>, TokenGrid), ModelError> {
    let (tokens, grid) = patchify(img, patch)?;
    let c = if img.shape.len() == 3 { img.shape[2] } else { 1 };
    let per = patch * patch;
    let inv = S::ONE / S::from_usize(per);
    let mut out = Vec::with_capacity(grid.tokens() * c);
    for row in tokens.data.chunks(per * c) {
        for ch in 0..c {
            let mut acc = S::ZERO;
            for p in 0..per {
                acc += row[p * c + ch];
            }
            out.push(acc * inv);
        }
    }
    Ok((RawTensor::new(vec![grid.tokens(), c], out), grid))
}

/// A spatial token map on a tape.
#[derive(Clone, Copy)]
pub struct TokenMap<'t, S: Scalar> {
    pub feat: Tensor<'t, S>,
    pub grid: TokenGrid,
}

/// Encoder parameters bound onto one tape for a training step or evaluation.
pub struct BoundViT<'m, 't, S: Scalar> {
    vit: &'m SplitViT,
    params: Vec<Tensor<'t, S>>,
}

impl SplitViT {
    pub fn bind<'m, 't, S: Scalar>(
        &'m self,
        tape: &'t Tape<S>,
        store: &ParamStore<S>,
    ) -> TResult<BoundViT<'m, 't, S>> {
        // binds every slot (heads included) so one call serves the whole step
        let params = store.bind_all(tape)?;
        Ok(BoundViT { vit: self, params })
    }
}

impl<'m, 't, S: Scalar> BoundViT<'m, 't, S> {
    pub fn cfg(&self) -> &ModelConfig {
        &self.vit.cfg
    }

    pub fn param(&self, slot: usize) -> Tensor<'t, S> {
        self.params[slot]
    }

    fn linear(&self, x: Tensor<'t, S>, w: usize, b: usize) -> TResult<Tensor<'t, S>> {
        x.matmul(self.params[w])?.add_bias(self.params[b])
    }

    /// Patch embedding plus interpolated positional embeddings (layer 0).
    pub fn embed(&self, img: &RawTensor<S>) -> Result<TokenMap<'t, S>, ModelError> {
        let cfg = &self.vit.cfg;
        let (tokens, grid) = patchify(img, cfg.patch)?;
        let tape = self.params[0];
        let x = tape_of(tape).leaf(tokens.data, &tokens.shape)?;
        let emb = self.linear(x, self.vit.patch_w, self.vit.patch_b)?;
        let side = cfg.grid_side();
        let pos = self.params[self.vit.pos_grid]
            .resize_bilinear(side, side, grid.h, grid.w)?;
        let feat = emb.add(pos)?;
        Ok(TokenMap { feat, grid })
    }

    fn block(&self, i: usize, x: Tensor<'t, S>) -> TResult<Tensor<'t, S>> {
        let cfg = &self.vit.cfg;
        let s = &self.vit.blocks[i];
        let d = cfg.dim;
        let dh = d / cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let a = x.layernorm(self.params[s.ln1_g], self.params[s.ln1_b], LN_EPS)?;
        let q = self.linear(a, s.wq, s.bq)?;
        let k = self.linear(a, s.wk, s.bk)?;
        let v = self.linear(a, s.wv, s.bv)?;
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let scores = qh.matmul(kh.transpose2()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            head_outs.push(attn.matmul(vh)?);
        }
        let merged = concat_cols(&head_outs)?;
        let attn_out = self.linear(merged, s.wo, s.bo)?;
        let x = x.add(attn_out)?;
        let m = x.layernorm(self.params[s.ln2_g], self.params[s.ln2_b], LN_EPS)?;
        let hid = self.linear(m, s.w1, s.b1)?.gelu();
        let mlp = self.linear(hid, s.w2, s.b2)?;
        x.add(mlp)
    }

    /// Prefix pass: blocks [0, split_layer) over spatial tokens only.
    pub fn forward_prefix(&self, img: &RawTensor<S>) -> Result<TokenMap<'t, S>, ModelError> {
        let mut tm = self.embed(img)?;
        for i in 0..self.vit.cfg.split_layer {
            tm.feat = self.block(i, tm.feat)?;
        }
        Ok(tm)
    }

    fn cls_row(&self) -> TResult<Tensor<'t, S>> {
        let d = self.vit.cfg.dim;
        self.params[self.vit.cls_token]
            .add(self.params[self.vit.pos_cls])?
            .reshape(&[1, d])
    }

    /// Head pass from a prefix token map: remaining spatial-only blocks, CLS
    /// prepended at `cls_layer`, then the rest. Returns the final embedding
    /// (layernormed last CLS) and the raw CLS output of every block from
    /// `cls_layer` on.
    pub fn forward_head(
        &self,
        tm: TokenMap<'t, S>,
    ) -> Result<(Tensor<'t, S>, Vec<Tensor<'t, S>>), ModelError> {
        let cfg = &self.vit.cfg;
        let mut x = tm.feat;
        for i in cfg.split_layer..cfg.cls_layer {
            x = self.block(i, x)?;
        }
        let mut with_cls = concat_rows(&[self.cls_row()?, x])?;
        let mut cache = Vec::new();
        for i in cfg.cls_layer..cfg.depth {
            with_cls = self.block(i, with_cls)?;
            cache.push(with_cls.slice_rows(0, 1)?.reshape(&[cfg.dim])?);
        }
        let last = with_cls.slice_rows(0, 1)?;
        let emb = last
            .layernorm(self.params[self.vit.final_g], self.params[self.vit.final_b], LN_EPS)?
            .reshape(&[cfg.dim])?;
        Ok((emb, cache))
    }

    /// Representation after `layer` completed blocks: the spatial token map
    /// plus the CLS vector once `layer >= cls_layer` (at equality the CLS has
    /// been prepended but not yet processed).
    #[allow(clippy::type_complexity)]
    pub fn forward_features_at(
        &self,
        img: &RawTensor<S>,
        layer: usize,
    ) -> Result<(TokenMap<'t, S>, Option<Tensor<'t, S>>), ModelError> {
        let cfg = &self.vit.cfg;
        if layer > cfg.depth {
            return Err(ModelError::BadLayer {
                layer,
                depth: cfg.depth,
            });
        }
        let mut tm = self.embed(img)?;
        let mut done = 0;
        while done < layer && done < cfg.cls_layer {
            tm.feat = self.block(done, tm.feat)?;
            done += 1;
        }
        if layer < cfg.cls_layer {
            return Ok((tm, None));
        }
        if layer == cfg.cls_layer && layer == done {
            // CLS prepended but no block has processed it yet
            let cls = self.cls_row()?.reshape(&[cfg.dim])?;
            return Ok((tm, Some(cls)));
        }
        let mut x = concat_rows(&[self.cls_row()?, tm.feat])?;
        while done < layer {
            x = self.block(done, x)?;
            done += 1;
        }
        let cls = x.slice_rows(0, 1)?.reshape(&[cfg.dim])?;
        let spatial = x.slice_rows(1, tm.grid.tokens())?;
        Ok((
            TokenMap {
                feat: spatial,
                grid: tm.grid,
            },
            Some(cls),
        ))
    }

    /// Spatial token map after every block (plus layer 0), for the all-layers
    /// regularizer variant. CLS rows are stripped once present.
    pub fn forward_all_spatial(
        &self,
        img: &RawTensor<S>,
    ) -> Result<Vec<TokenMap<'t, S>>, ModelError> {
        let cfg = &self.vit.cfg;
        let tm = self.embed(img)?;
        let grid = tm.grid;
        let mut maps = Vec::with_capacity(cfg.depth + 1);
        let mut x = tm.feat;
        maps.push(TokenMap { feat: x, grid });
        let mut has_cls = false;
        for i in 0..cfg.depth {
            if i == cfg.cls_layer {
                x = concat_rows(&[self.cls_row()?, x])?;
                has_cls = true;
            }
            x = self.block(i, x)?;
            let spatial = if has_cls {
                x.slice_rows(1, grid.tokens())?
            } else {
                x
            };
            maps.push(TokenMap { feat: spatial, grid });
        }
        Ok(maps)
    }
}

// Small helper so `embed` can reach the tape through any bound parameter
// handle without storing a second reference.
fn tape_of<'t, S: Scalar>(t: Tensor<'t, S>) -> &'t Tape<S> {
    t.tape()
}

/// Two linear layers with GELU between, applied per row (weight sharing
/// across the grid).
pub struct ProjectionHead {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl ProjectionHead {
    pub fn init<S: Scalar>(
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        store: &mut ParamStore<S>,
        seed: u64,
    ) -> Self {
        // name folded into the stream so two heads with one seed differ
        let tag = name.bytes().fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
        let mut r1 = Rng::stream(seed, &[crate::augment::TAG_INIT, 900, tag]);
        let mut r2 = Rng::stream(seed, &[crate::augment::TAG_INIT, 901, tag]);
        // fan-in scaled init keeps projected norms O(1), which the cosine
        // normalization needs for well-conditioned gradients
        let std1 = 1.0 / (input_dim as f64).sqrt();
        let std2 = 1.0 / (hidden_dim as f64).sqrt();
        let w1 = store.register(
            &format!("{name}.w1"),
            vec![input_dim, hidden_dim],
            init_normal::<S>(&mut r1, input_dim * hidden_dim, std1),
        );
        let b1 = store.register(&format!("{name}.b1"), vec![hidden_dim], vec![S::ZERO; hidden_dim]);
        let w2 = store.register(
            &format!("{name}.w2"),
            vec![hidden_dim, output_dim],
            init_normal::<S>(&mut r2, hidden_dim * output_dim, std2),
        );
        let b2 = store.register(&format!("{name}.b2"), vec![output_dim], vec![S::ZERO; output_dim]);
        ProjectionHead {
            input_dim,
            hidden_dim,
            output_dim,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.output_dim
            + self.output_dim
    }

    pub fn apply<'t, S: Scalar>(
        &self,
        bound: &BoundViT<'_, 't, S>,
        x: Tensor<'t, S>,
    ) -> TResult<Tensor<'t, S>> {
        let h = x
            .matmul(bound.param(self.w1))?
            .add_bias(bound.param(self.b1))?
            .gelu();
        h.matmul(bound.param(self.w2))?.add_bias(bound.param(self.b2))
    }
}
