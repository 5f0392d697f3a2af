//! softequiv: a desk-scale laboratory for layer-decoupled soft equivariance
//! regularization of invariant self-supervised vision transformers.
//!
//! The encoder is split into a spatial prefix (no CLS token) and an
//! invariance head (CLS prepended at its input). The final embedding trains
//! with an unchanged invariance objective while the prefix's spatial token
//! map is softly regularized toward equivariance under an exact geometric
//! group (90-degree rotations, horizontal flips, patch-aligned anisotropic
//! scaling) acting in feature space by token permutation and grid resampling.
//!
//! Everything runs on a hand-rolled deterministic tensor engine with
//! reverse-mode autodiff, compiled for both f32 (training) and f64
//! (verification) from the same source.
//!
//! ## Runnable examples
//!
//! One example per capability; start with `autodiff` and `group_actions`:
//!
//! ```text
//! cargo run -p softequiv --example autodiff            # tape engine + FD check
//! cargo run -p softequiv --example group_actions       # group algebra and actions
//! cargo run -p softequiv --example gen_dataset         # synthetic shape data
//! cargo run -p softequiv --example pretrain_small      # short training run
//! cargo run -p softequiv --example equivariance_score  # per-layer scores
//! cargo run -p softequiv --example probes              # linear/kNN/MLP/transform
//! cargo run -p softequiv --example ablate_layers       # miniature layer sweep
//! cargo run -p softequiv --example flops_overhead      # analytic cost model
//! cargo run -p softequiv --example verify              # self-check suites
//! ```
//!
//! The `ser` binary wraps the same functionality as subcommands
//! (`gen-data`, `pretrain`, `probe`, `equiscore`, `ablate`, `flops`,
//! `check`); see the README.

pub mod augment;
pub mod loss;
pub mod model;
pub mod check;
pub mod config;
pub mod data;
pub mod eval;
pub mod group;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
