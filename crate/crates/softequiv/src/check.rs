//! Self-verification suites behind the `check` subcommand: group axioms,
//! permutation oracles, finite-difference gradients, brute-force loss
//! equivalence, and determinism. Each suite reports its first counterexample
//! on failure.

use std::time::Instant;

use crate::config::Config;
use crate::data::{generate, Dataset, SyntheticSpec};
use crate::group::{
    self, act_tokens, compose, inverse, GeoPolicy, GroupElement, TokenGrid,
};
use crate::loss::{equiv_nt_xent, inv_contrastive, inv_redundancy, oracle};
use crate::model::{patch_means, ModelConfig, ParamStore, ProjectionHead, SplitViT, TokenMap};
use crate::rng::Rng;
use crate::tensor::io::RawTensor;
use crate::tensor::{Tape, Tensor};
use crate::train::{NoHook, Trainer};

pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub seconds: f64,
    pub detail: String,
}

/// Run every suite; returns the reports and whether all passed.
pub fn run_all() -> (Vec<SuiteReport>, bool) {
    let suites: Vec<(&'static str, fn() -> Result<String, String>)> = vec![
        ("group-axioms", suite_group_axioms),
        ("permutation-oracle", suite_permutation_oracle),
        ("gradient-fd", suite_gradient_fd),
        ("loss-oracles", suite_loss_oracles),
        ("determinism", suite_determinism),
    ];
    let mut reports = Vec::new();
    let mut all = true;
    for (name, f) in suites {
        let start = Instant::now();
        let (passed, detail) = match f() {
            Ok(d) => (true, d),
            Err(e) => (false, e),
        };
        all &= passed;
        reports.push(SuiteReport {
            name,
            passed,
            seconds: start.elapsed().as_secs_f64(),
            detail,
        });
    }
    (reports, all)
}

fn suite_group_axioms() -> Result<String, String> {
    let mut rng = Rng::from_seed(1001);
    let policy = GeoPolicy::default();
    let n = 10_000;
    for i in 0..n {
        let a = group::sample(&mut rng, &policy).map_err(|e| e.to_string())?;
        let b = group::sample(&mut rng, &policy).map_err(|e| e.to_string())?;
        let c = group::sample(&mut rng, &policy).map_err(|e| e.to_string())?;
        if compose(compose(a, b), c) != compose(a, compose(b, c)) {
            return Err(format!(
                "associativity failed: a={} b={} c={}",
                a.to_log_string(),
                b.to_log_string(),
                c.to_log_string()
            ));
        }
        if compose(a, GroupElement::IDENTITY) != a || compose(GroupElement::IDENTITY, a) != a {
            return Err(format!("identity law failed: a={}", a.to_log_string()));
        }
        if compose(inverse(a), a) != GroupElement::IDENTITY
            || compose(a, inverse(a)) != GroupElement::IDENTITY
        {
            return Err(format!("inverse law failed: a={}", a.to_log_string()));
        }
        let _ = i;
    }
    Ok(format!("{n} random triples"))
}

/// All 8 dihedral elements on every grid from 2x2 to 6x6: the feature-space
/// action on patchified per-patch-constant images must equal patchifying the
/// pixel-space action, bitwise. The token action is injectable so a
/// sabotaged action is caught (mutation coverage of the checker itself).
pub fn permutation_oracle_check<F>(token_action: F) -> Result<usize, String>
where
    F: for<'t> Fn(
        GroupElement,
        Tensor<'t, f64>,
        TokenGrid,
        TokenGrid,
    ) -> Result<Tensor<'t, f64>, group::GroupError>,
{
    let patch = 4;
    let mut rng = Rng::from_seed(2002);
    let mut cases = 0;
    for side in 2..=6usize {
        // random per-patch-constant image
        let img_side = side * patch;
        let mut data = vec![0.0f64; img_side * img_side * 3];
        for ty in 0..side {
            for tx in 0..side {
                let color = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
                for py in 0..patch {
                    for px in 0..patch {
                        let at = ((ty * patch + py) * img_side + tx * patch + px) * 3;
                        data[at..at + 3].copy_from_slice(&color);
                    }
                }
            }
        }
        let img = RawTensor::new(vec![img_side, img_side, 3], data);
        for rot in 0..4u8 {
            for flip in [false, true] {
                let g = GroupElement::dihedral(rot, flip);
                let (tokens, grid) = patch_means(&img, patch).map_err(|e| e.to_string())?;
                let timg = group::act_image(g, &img).map_err(|e| e.to_string())?;
                let (expect, tgrid) = patch_means(&timg, patch).map_err(|e| e.to_string())?;
                let tape: Tape<f64> = Tape::new();
                let feat = tape
                    .leaf(tokens.data.clone(), &tokens.shape)
                    .map_err(|e| e.to_string())?;
                let moved =
                    token_action(g, feat, grid, tgrid).map_err(|e| e.to_string())?;
                if moved.value() != expect.data {
                    return Err(format!(
                        "act_tokens != patchify(act_image) for g={} on grid {side}x{side}",
                        g.to_log_string()
                    ));
                }
                cases += 1;
            }
        }
    }
    Ok(cases)
}

fn suite_permutation_oracle() -> Result<String, String> {
    let cases = permutation_oracle_check(act_tokens::<f64>)?;
    Ok(format!("{cases} dihedral/grid cases, bitwise"))
}

fn suite_gradient_fd() -> Result<String, String> {
    // full objective on a 4-image micro-batch of a miniature model, f64
    let (cfg, ds) = micro_setup(4);
    let report = objective_fd_check(&cfg, &ds, &[0, 1, 2, 3], 24)?;
    Ok(report)
}

/// Micro configuration for gradient checks: image 24, patch 8, dim 8,
/// depth 2, scales {2/3, 1, 4/3} so scaled grids stay integral.
pub fn micro_setup(n_images: usize) -> (Config, Dataset) {
    let mut cfg = Config::default();
    cfg.model = ModelConfig {
        image: 24,
        patch: 8,
        channels: 3,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        split_layer: 1,
        cls_layer: 1,
    };
    cfg.crop.out_size = 24;
    cfg.geo.scales = vec![
        group::Ratio::new(2, 3),
        group::Ratio::ONE,
        group::Ratio::new(4, 3),
    ];
    cfg.proj_dim = 6;
    cfg.proj_hidden = 8;
    cfg.batch_size = n_images;
    cfg.r = 0.5;
    cfg.seed = 7;
    let ds = generate(
        &SyntheticSpec {
            n_images: n_images.max(4),
            side: 24,
            patch: 8,
            n_classes: 3,
        },
        23,
    )
    .expect("micro dataset");
    (cfg, ds)
}

/// Central finite differences of the full objective over a parameter subset
/// (`sample_per_slot` entries per parameter tensor; 0 means every entry).
/// Relative error must stay within 1e-4 at h = 1e-5.
pub fn objective_fd_check(
    cfg: &Config,
    ds: &Dataset,
    batch: &[usize],
    sample_per_slot: usize,
) -> Result<String, String> {
    let trainer = Trainer::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let loss_of = |store: &ParamStore<f64>| -> f64 {
        step_loss_value(&trainer, store, ds, batch).expect("objective evaluation")
    };

    // analytic gradients
    let (grads, _) = step_loss_grads(&trainer, &trainer.store, ds, batch)
        .map_err(|e| e.to_string())?;

    let h = 1e-5;
    let mut store = trainer.store.clone();
    let mut checked = 0usize;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut pick_rng = Rng::from_seed(3003);
    for slot in 0..store.len() {
        let len = store.data(slot).len();
        let picks: Vec<usize> = if sample_per_slot == 0 || sample_per_slot >= len {
            (0..len).collect()
        } else {
            (0..sample_per_slot).map(|_| pick_rng.below(len)).collect()
        };
        for i in picks {
            let orig = store.data(slot)[i];
            store.data_mut(slot)[i] = orig + h;
            let up = loss_of(&store);
            store.data_mut(slot)[i] = orig - h;
            let down = loss_of(&store);
            store.data_mut(slot)[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let analytic = grads[slot][i];
            let rel = (analytic - fd).abs() / analytic.abs().max(1.0);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]", store.name(slot)));
            }
            if rel > 1e-4 {
                return Err(format!(
                    "gradient mismatch at {}[{i}]: analytic {analytic:.9e}, fd {fd:.9e}, rel {rel:.3e}",
                    store.name(slot)
                ));
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} parameter entries, worst rel err {:.2e} at {}",
        worst.0, worst.1
    ))
}

/// Deterministic objective value for gradient checking: fixed epoch-0 views,
/// full pipeline, scalar out.
pub fn step_loss_value(
    trainer: &Trainer<f64>,
    store: &ParamStore<f64>,
    ds: &Dataset,
    batch: &[usize],
) -> Result<f64, String> {
    let (_, v) = step_loss_grads_inner(trainer, store, ds, batch, false)?;
    Ok(v)
}

pub fn step_loss_grads(
    trainer: &Trainer<f64>,
    store: &ParamStore<f64>,
    ds: &Dataset,
    batch: &[usize],
) -> Result<(Vec<Vec<f64>>, f64), String> {
    let (g, v) = step_loss_grads_inner(trainer, store, ds, batch, true)?;
    Ok((g.expect("gradients requested"), v))
}

#[allow(clippy::type_complexity)]
fn step_loss_grads_inner(
    trainer: &Trainer<f64>,
    store: &ParamStore<f64>,
    ds: &Dataset,
    batch: &[usize],
    want_grads: bool,
) -> Result<(Option<Vec<Vec<f64>>>, f64), String> {
    use crate::augment::partition;
    use crate::group::relative;
    use crate::tensor::concat_rows;

    let cfg = &trainer.cfg;
    let tape: Tape<f64> = Tape::new();
    let bound = trainer.vit.bind(&tape, store).map_err(|e| e.to_string())?;
    let part = partition(batch, cfg.r, 0, cfg.seed).map_err(|e| e.to_string())?;

    let forward_pair = |idx: usize, equivariant: bool| -> Result<_, String> {
        let img = ds.image_as::<f64>(idx);
        let mut views = Vec::new();
        for view_index in 0..2 {
            let mut rng = crate::augment::view_stream(cfg.seed, 0, idx, view_index);
            let v = if equivariant {
                crate::augment::sample_view_teq(&img, &mut rng, &cfg.geo, &cfg.photo)
                    .map_err(|e| e.to_string())?
            } else {
                crate::augment::sample_view_t(&img, &mut rng, &cfg.effective_crop(), &cfg.photo)
                    .map_err(|e| e.to_string())?
            };
            views.push(v);
        }
        let x2 = views.pop().unwrap();
        let x1 = views.pop().unwrap();
        let p1 = bound.forward_prefix(&x1.image).map_err(|e| e.to_string())?;
        let (e1, _) = bound.forward_head(p1).map_err(|e| e.to_string())?;
        let p2 = bound.forward_prefix(&x2.image).map_err(|e| e.to_string())?;
        let (e2, _) = bound.forward_head(p2).map_err(|e| e.to_string())?;
        Ok((x1, x2, p1, p2, e1, e2))
    };

    let d = cfg.model.dim;
    fn stack<'t>(embs: &[Tensor<'t, f64>], d: usize) -> Tensor<'t, f64> {
        concat_rows(
            &embs
                .iter()
                .map(|e| e.reshape(&[1, d]).unwrap())
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    let mut b1_e1 = Vec::new();
    let mut b1_e2 = Vec::new();
    for &i in &part.b1 {
        let (_, _, _, _, e1, e2) = forward_pair(i, false)?;
        b1_e1.push(e1);
        b1_e2.push(e2);
    }
    let mut b2_e1 = Vec::new();
    let mut b2_e2 = Vec::new();
    let mut aligned = Vec::new();
    for &i in &part.b2 {
        let (x1, x2, p1, p2, e1, e2) = forward_pair(i, true)?;
        let g = relative(x1.geom, x2.geom);
        let moved = act_tokens(g, p1.feat, p1.grid, p2.grid).map_err(|e| e.to_string())?;
        aligned.push((
            TokenMap {
                feat: moved,
                grid: p2.grid,
            },
            p2,
        ));
        b2_e1.push(e1);
        b2_e2.push(e2);
    }

    fn inv_of<'m, 't>(
        e1: &[Tensor<'t, f64>],
        e2: &[Tensor<'t, f64>],
        zero: Tensor<'t, f64>,
        trainer: &Trainer<f64>,
        bound: &crate::model::BoundViT<'m, 't, f64>,
        d: usize,
    ) -> Result<Tensor<'t, f64>, String> {
        if e1.len() < 2 {
            return Ok(zero);
        }
        let q1 = trainer
            .inv_proj
            .apply(bound, stack(e1, d))
            .map_err(|e| e.to_string())?;
        let q2 = trainer
            .inv_proj
            .apply(bound, stack(e2, d))
            .map_err(|e| e.to_string())?;
        match trainer.cfg.inv_kind {
            crate::loss::InvKind::Contrastive => {
                inv_contrastive(q1, q2, trainer.cfg.tau_inv).map_err(|e| e.to_string())
            }
            crate::loss::InvKind::Redundancy => {
                inv_redundancy(q1, q2, trainer.cfg.off_diag_weight).map_err(|e| e.to_string())
            }
        }
    }
    let zero = tape.scalar(0.0);
    let l1 = inv_of(&b1_e1, &b1_e2, zero, trainer, &bound, d)?;
    let l2 = inv_of(&b2_e1, &b2_e2, zero, trainer, &bound, d)?;
    let le = if aligned.len() >= 2 {
        let z: Vec<_> = aligned.iter().map(|(a, _)| *a).collect();
        let zp: Vec<_> = aligned.iter().map(|(_, b)| *b).collect();
        equiv_nt_xent(&z, &zp, &trainer.equiv_proj, &bound, cfg.tau_eq)
            .map_err(|e| e.to_string())?
    } else {
        zero
    };
    let total = crate::loss::total_loss(l1, l2, le, cfg.lambda).map_err(|e| e.to_string())?;
    let value = total.item();
    if !want_grads {
        return Ok((None, value));
    }
    tape.backward(total).map_err(|e| e.to_string())?;
    let grads = (0..store.len())
        .map(|slot| {
            tape.slot_grad(slot)
                .unwrap_or_else(|| vec![0.0; store.data(slot).len()])
        })
        .collect();
    Ok((Some(grads), value))
}

fn suite_loss_oracles() -> Result<String, String> {
    let mut rng = Rng::from_seed(4004);
    let mut store = ParamStore::<f64>::new();
    let _vit = SplitViT::init(
        ModelConfig {
            image: 16,
            patch: 8,
            dim: 8,
            depth: 1,
            heads: 2,
            split_layer: 0,
            cls_layer: 0,
            ..ModelConfig::default()
        },
        &mut store,
        55,
    )
    .map_err(|e| e.to_string())?;
    let proj = ProjectionHead::init("equiv_proj", 3, 5, 4, &mut store, 56);
    let vit = _vit;
    let mut cases = 0;
    for trial in 0..10 {
        let images = 2 + rng.below(2);
        let grid = TokenGrid::new(1 + rng.below(2), 1 + rng.below(2), 8);
        let d = 3;
        let tape = Tape::new();
        let bound = vit.bind(&tape, &store).map_err(|e| e.to_string())?;
        let mut z = Vec::new();
        let mut zp = Vec::new();
        let mut z_raw = Vec::new();
        let mut zp_raw = Vec::new();
        for _ in 0..images {
            let a: Vec<f64> = (0..grid.tokens() * d).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..grid.tokens() * d).map(|_| rng.normal()).collect();
            z.push(TokenMap {
                feat: tape.leaf(a.clone(), &[grid.tokens(), d]).map_err(|e| e.to_string())?,
                grid,
            });
            zp.push(TokenMap {
                feat: tape.leaf(b.clone(), &[grid.tokens(), d]).map_err(|e| e.to_string())?,
                grid,
            });
            z_raw.push(a);
            zp_raw.push(b);
        }
        let got = equiv_nt_xent(&z, &zp, &proj, &bound, 0.3)
            .map_err(|e| e.to_string())?
            .item();
        let w1 = store.data(store.slot_of("equiv_proj.w1").unwrap()).to_vec();
        let b1 = store.data(store.slot_of("equiv_proj.b1").unwrap()).to_vec();
        let w2 = store.data(store.slot_of("equiv_proj.w2").unwrap()).to_vec();
        let b2 = store.data(store.slot_of("equiv_proj.b2").unwrap()).to_vec();
        let project = |raw: &Vec<f64>| -> Vec<Vec<f64>> {
            raw.chunks(d)
                .map(|x| oracle::project(x, &w1, &b1, &w2, &b2, d, 5, 4))
                .collect()
        };
        let zo: Vec<_> = z_raw.iter().map(project).collect();
        let zpo: Vec<_> = zp_raw.iter().map(project).collect();
        let want = oracle::equiv_nt_xent(&zo, &zpo, 0.3);
        if (got - want).abs() > 1e-10 {
            return Err(format!(
                "equiv_nt_xent trial {trial}: engine {got:.12e} vs oracle {want:.12e}"
            ));
        }
        cases += 1;
    }
    // invariance losses
    for trial in 0..10 {
        let n = 2 + rng.below(4);
        let d = 3 + rng.below(3);
        let e1: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let e2: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        let tape: Tape<f64> = Tape::new();
        let t1 = tape.leaf(e1.concat(), &[n, d]).map_err(|e| e.to_string())?;
        let t2 = tape.leaf(e2.concat(), &[n, d]).map_err(|e| e.to_string())?;
        let got_c = inv_contrastive(t1, t2, 0.2).map_err(|e| e.to_string())?.item();
        let want_c = oracle::inv_contrastive(&e1, &e2, 0.2);
        if (got_c - want_c).abs() > 1e-10 {
            return Err(format!(
                "inv_contrastive trial {trial}: engine {got_c:.12e} vs oracle {want_c:.12e}"
            ));
        }
        let got_r = inv_redundancy(t1, t2, 0.005).map_err(|e| e.to_string())?.item();
        let want_r = oracle::inv_redundancy(&e1, &e2, 0.005);
        if (got_r - want_r).abs() > 1e-10 {
            return Err(format!(
                "inv_redundancy trial {trial}: engine {got_r:.12e} vs oracle {want_r:.12e}"
            ));
        }
        cases += 2;
    }
    Ok(format!("{cases} oracle comparisons at 1e-10"))
}

fn suite_determinism() -> Result<String, String> {
    let (mut cfg, ds) = micro_setup(4);
    cfg.epochs = 1;
    cfg.batch_size = 4;
    let run = || -> Result<Vec<Vec<f64>>, String> {
        let mut t = Trainer::<f64>::new(cfg.clone()).map_err(|e| e.to_string())?;
        t.train_epoch(&ds, &mut NoHook).map_err(|e| e.to_string())?;
        Ok((0..t.store.len()).map(|s| t.store.data(s).to_vec()).collect())
    };
    let a = run()?;
    let b = run()?;
    for (slot, (x, y)) in a.iter().zip(&b).enumerate() {
        if x != y {
            return Err(format!("parameter slot {slot} diverged between identical runs"));
        }
    }
    Ok("two identical runs, bitwise-equal parameters".into())
}
