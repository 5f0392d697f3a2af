//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one pass/fail line (visible with `cargo test --test acceptance --
//! --nocapture`, or on failure).

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Instant;

use softequiv::augment::partition;
use softequiv::check::{micro_setup, objective_fd_check};
use softequiv::config::Config;
use softequiv::data::{generate, Dataset, SyntheticSpec};
use softequiv::eval::{
    evaluate_run, linear_probe, transform_probe_dataset, CostModel, ProbeDataset, SweepRow,
    TransformTask,
};
use softequiv::group::{
    self, act_tokens, compose, inverse, GeoPolicy, GroupElement,
};
use softequiv::loss::{equiv_nt_xent, inv_contrastive, inv_redundancy, oracle};
use softequiv::model::{patch_means, ModelConfig, ParamStore, ProjectionHead, SplitViT, TokenMap};
use softequiv::rng::Rng;
use softequiv::tensor::io::RawTensor;
use softequiv::tensor::Tape;
use softequiv::train::{EpochMetrics, NoHook, Trainer};

fn pass(criterion: &str, detail: String) {
    println!("PASS {criterion}: {detail}");
}

// ── criterion 1: group correctness ───────────────────────────────────────

#[test]
fn criterion_01_group_axioms() {
    let start = Instant::now();
    let mut rng = Rng::from_seed(101);
    let policy = GeoPolicy::default();
    let n = 10_000;
    for _ in 0..n {
        let a = group::sample(&mut rng, &policy).unwrap();
        let b = group::sample(&mut rng, &policy).unwrap();
        let c = group::sample(&mut rng, &policy).unwrap();
        assert_eq!(
            compose(compose(a, b), c),
            compose(a, compose(b, c)),
            "associativity: {} {} {}",
            a.to_log_string(),
            b.to_log_string(),
            c.to_log_string()
        );
        assert_eq!(compose(a, GroupElement::IDENTITY), a);
        assert_eq!(compose(GroupElement::IDENTITY, a), a);
        assert_eq!(compose(inverse(a), a), GroupElement::IDENTITY);
        assert_eq!(compose(a, inverse(a)), GroupElement::IDENTITY);
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "group axiom suite took {secs:.1}s, budget 10s");
    pass(
        "criterion 1 (group correctness)",
        format!("{n} random triples, exact, {secs:.2}s"),
    );
}

// ── criterion 2: permutation-oracle equivalence ───────────────────────────

#[test]
fn criterion_02_permutation_oracle() {
    let start = Instant::now();
    let patch = 4usize;
    let mut rng = Rng::from_seed(202);
    let mut cases = 0;
    for side in 2..=6usize {
        let img_side = side * patch;
        // random image constant within each patch
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
                // oracle: act in pixel space, then patchify
                let moved_img = group::act_image(g, &img).unwrap();
                let (expect, tgrid) = patch_means(&moved_img, patch).unwrap();
                // implementation: patchify, then act on tokens
                let (tokens, grid) = patch_means(&img, patch).unwrap();
                let tape: Tape<f64> = Tape::new();
                let feat = tape.leaf(tokens.data, &tokens.shape).unwrap();
                let moved = act_tokens(g, feat, grid, tgrid).unwrap();
                assert_eq!(
                    moved.value(),
                    expect.data,
                    "bitwise mismatch for g={} on {side}x{side}",
                    g.to_log_string()
                );
                cases += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "permutation oracle took {secs:.1}s, budget 5s");
    pass(
        "criterion 2 (permutation-oracle equivalence)",
        format!("{cases} dihedral/grid cases bitwise, {secs:.2}s"),
    );
}

// ── criterion 3: gradient fidelity ────────────────────────────────────────

#[test]
fn criterion_03_gradient_fidelity() {
    let start = Instant::now();
    let (cfg, ds) = micro_setup(4);
    // every parameter entry (sample_per_slot = 0), 64-bit, h = 1e-5,
    // relative error <= 1e-4
    let report = objective_fd_check(&cfg, &ds, &[0, 1, 2, 3], 0)
        .expect("full-objective finite differences");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient check took {secs:.1}s, budget 2min");
    pass(
        "criterion 3 (gradient fidelity)",
        format!("{report}, {secs:.1}s"),
    );
}

// ── criterion 4: loss-oracle equivalence ──────────────────────────────────

#[test]
fn criterion_04_loss_oracles() {
    let start = Instant::now();
    let mut rng = Rng::from_seed(404);
    let tol = 1e-10;

    // shared projection head for the patch-wise loss
    let mut store = ParamStore::<f64>::new();
    let vit = SplitViT::init(
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
        41,
    )
    .unwrap();
    let d = 3;
    let (hidden, out) = (5, 4);
    let proj = ProjectionHead::init("equiv_proj", d, hidden, out, &mut store, 42);
    let w1 = store.data(store.slot_of("equiv_proj.w1").unwrap()).to_vec();
    let b1 = store.data(store.slot_of("equiv_proj.b1").unwrap()).to_vec();
    let w2 = store.data(store.slot_of("equiv_proj.w2").unwrap()).to_vec();
    let b2 = store.data(store.slot_of("equiv_proj.b2").unwrap()).to_vec();

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        // |b2| * h * w <= 64
        let images = 2 + rng.below(3);
        let grid = group::TokenGrid::new(1 + rng.below(3), 1 + rng.below(3), 8);
        let tau = 0.3;
        let tape = Tape::new();
        let bound = vit.bind(&tape, &store).unwrap();
        let mut z = Vec::new();
        let mut zp = Vec::new();
        let mut z_raw = Vec::new();
        let mut zp_raw = Vec::new();
        for _ in 0..images {
            let a: Vec<f64> = (0..grid.tokens() * d).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..grid.tokens() * d).map(|_| rng.normal()).collect();
            z.push(TokenMap {
                feat: tape.leaf(a.clone(), &[grid.tokens(), d]).unwrap(),
                grid,
            });
            zp.push(TokenMap {
                feat: tape.leaf(b.clone(), &[grid.tokens(), d]).unwrap(),
                grid,
            });
            z_raw.push(a);
            zp_raw.push(b);
        }
        let got = equiv_nt_xent(&z, &zp, &proj, &bound, tau).unwrap().item();
        let project = |raw: &Vec<f64>| -> Vec<Vec<f64>> {
            raw.chunks(d)
                .map(|x| oracle::project(x, &w1, &b1, &w2, &b2, d, hidden, out))
                .collect()
        };
        let zo: Vec<_> = z_raw.iter().map(project).collect();
        let zpo: Vec<_> = zp_raw.iter().map(project).collect();
        let want = oracle::equiv_nt_xent(&zo, &zpo, tau);
        let err = (got - want).abs();
        worst = worst.max(err);
        assert!(err < tol, "equiv_nt_xent: engine {got:.14e} vs oracle {want:.14e}");
    }

    for _ in 0..50 {
        let n = 2 + rng.below(6);
        let dd = 2 + rng.below(5);
        let e1: Vec<Vec<f64>> = (0..n).map(|_| (0..dd).map(|_| rng.normal()).collect()).collect();
        let e2: Vec<Vec<f64>> = (0..n).map(|_| (0..dd).map(|_| rng.normal()).collect()).collect();
        let tape: Tape<f64> = Tape::new();
        let t1 = tape.leaf(e1.concat(), &[n, dd]).unwrap();
        let t2 = tape.leaf(e2.concat(), &[n, dd]).unwrap();
        let gc = inv_contrastive(t1, t2, 0.2).unwrap().item();
        let wc = oracle::inv_contrastive(&e1, &e2, 0.2);
        assert!((gc - wc).abs() < tol, "inv_contrastive {gc:.14e} vs {wc:.14e}");
        worst = worst.max((gc - wc).abs());
        let gr = inv_redundancy(t1, t2, 0.005).unwrap().item();
        let wr = oracle::inv_redundancy(&e1, &e2, 0.005);
        assert!((gr - wr).abs() < tol, "inv_redundancy {gr:.14e} vs {wr:.14e}");
        worst = worst.max((gr - wr).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "loss oracles took {secs:.1}s, budget 30s");
    pass(
        "criterion 4 (loss-oracle equivalence)",
        format!("150 instances, worst abs err {worst:.2e}, {secs:.1}s"),
    );
}

// ── criterion 5: lambda = 0 and r = 0 controls ────────────────────────────

fn control_config() -> Config {
    let mut cfg = Config::default();
    cfg.epochs = 3;
    cfg.batch_size = 32;
    cfg.warmup_epochs = 1;
    cfg.data_path = String::new();
    cfg
}

#[test]
fn criterion_05_controls() {
    let start = Instant::now();
    let ds = generate(
        &SyntheticSpec {
            n_images: 256,
            ..SyntheticSpec::default()
        },
        505,
    )
    .unwrap();

    // r = 0 versus the pure baseline: bitwise-equal parameters, 3 epochs
    let mut cfg_r0 = control_config();
    cfg_r0.r = 0.0;
    let mut cfg_base = control_config();
    cfg_base.baseline = true;
    let mut t_r0 = Trainer::<f32>::new(cfg_r0).unwrap();
    let mut t_base = Trainer::<f32>::new(cfg_base).unwrap();
    for _ in 0..3 {
        t_r0.train_epoch(&ds, &mut NoHook).unwrap();
        t_base.train_epoch(&ds, &mut NoHook).unwrap();
    }
    for slot in 0..t_r0.store.len() {
        assert_eq!(
            t_r0.store.data(slot),
            t_base.store.data(slot),
            "r=0 diverges from the baseline at {}",
            t_r0.store.name(slot)
        );
    }

    // lambda = 0 versus lambda > 0 with the regularizer gradient zeroed
    let mut cfg_l0 = control_config();
    cfg_l0.lambda = 0.0;
    let cfg_lpos = control_config(); // lambda = 0.5
    let mut t_l0 = Trainer::<f32>::new(cfg_l0).unwrap();
    let mut t_zg = Trainer::<f32>::new(cfg_lpos).unwrap();
    t_zg.zero_equiv_grad = true;
    let mut l_equiv_seen = 0.0;
    for _ in 0..3 {
        let m0 = t_l0.train_epoch(&ds, &mut NoHook).unwrap();
        let mz = t_zg.train_epoch(&ds, &mut NoHook).unwrap();
        l_equiv_seen = m0.l_equiv.max(mz.l_equiv);
    }
    assert!(
        l_equiv_seen > 0.0,
        "the regularizer must still be computed in both control runs"
    );
    for slot in 0..t_l0.store.len() {
        assert_eq!(
            t_l0.store.data(slot),
            t_zg.store.data(slot),
            "lambda=0 differs from gradient-zeroed lambda>0 at {}",
            t_l0.store.name(slot)
        );
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "controls took {secs:.1}s, budget 5min");
    pass(
        "criterion 5 (lambda=0 / r=0 controls)",
        format!("both trajectories bitwise over 3 epochs, {secs:.1}s"),
    );
}

// ── criteria 6 and 7: desk-scale trends (shared runs) ─────────────────────

fn desk_config() -> Config {
    Config::default() // 2000-image dataset paired below; depth-4 ViT, 30 epochs
}

#[derive(Debug, Clone)]
struct RunOutcome {
    variant: &'static str,
    seed: u64,
    row: SweepRow,
    first_epoch_loss: f64,
    last_epoch_loss: f64,
}

fn desk_run(variant: &'static str, seed: u64, ds: &Dataset) -> RunOutcome {
    let mut cfg = desk_config();
    cfg.seed = seed;
    match variant {
        "baseline" => cfg.baseline = true,
        "ser_l1" => {
            cfg.model.split_layer = 1;
            cfg.model.cls_layer = 1;
        }
        "ser_l4" => {
            cfg.model.split_layer = 4;
            cfg.model.cls_layer = 4;
        }
        other => panic!("unknown variant {other}"),
    }
    let mut trainer = Trainer::<f32>::new(cfg).unwrap();
    let mut epochs: Vec<EpochMetrics> = Vec::new();
    for _ in 0..trainer.cfg.epochs {
        epochs.push(trainer.train_epoch(ds, &mut NoHook).unwrap());
    }
    let row = evaluate_run(&trainer, ds, seed, 200).unwrap();
    RunOutcome {
        variant,
        seed,
        row,
        first_epoch_loss: epochs.first().unwrap().l_total,
        last_epoch_loss: epochs.last().unwrap().l_total,
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn criteria_06_07_desk_scale_trends() {
    let start = Instant::now();
    let ds = generate(&SyntheticSpec::default(), 2024).unwrap();
    let seeds = [1u64, 2, 3];
    let mut jobs: VecDeque<(&'static str, u64)> = VecDeque::new();
    for variant in ["baseline", "ser_l1", "ser_l4"] {
        for &seed in &seeds {
            jobs.push_back((variant, seed));
        }
    }
    let jobs = Mutex::new(jobs);
    let results = Mutex::new(Vec::<RunOutcome>::new());
    let workers = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(4);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = jobs.lock().unwrap().pop_front();
                match job {
                    Some((variant, seed)) => {
                        let outcome = desk_run(variant, seed, &ds);
                        results.lock().unwrap().push(outcome);
                    }
                    None => break,
                }
            });
        }
    });
    let results = results.into_inner().unwrap();
    let collect = |variant: &str, f: &dyn Fn(&RunOutcome) -> f64| -> Vec<f64> {
        results
            .iter()
            .filter(|r| r.variant == variant)
            .map(f)
            .collect()
    };

    for r in &results {
        println!(
            "  run {}/seed{}: class {:.3} orient {:.3} rot-score {:.3}",
            r.variant,
            r.seed,
            r.row.class_top1.unwrap(),
            r.row.orient_top1.unwrap(),
            r.row.score_rot.unwrap()
        );
    }

    // training smoke property: mean epoch loss decreases over the run
    let first = mean(&collect("ser_l1", &|r| r.first_epoch_loss));
    let last = mean(&collect("ser_l1", &|r| r.last_epoch_loss));
    assert!(
        last < first,
        "epoch-mean total loss should fall over training: {last:.3} vs {first:.3}"
    );

    // criterion 6: final-layer rotation equivariance score non-decreasing in
    // the regularized layer with margin >= 0.01; class accuracy at layer 4
    // no better than at layer 1
    let score_l1 = mean(&collect("ser_l1", &|r| r.row.score_rot.unwrap()));
    let score_l4 = mean(&collect("ser_l4", &|r| r.row.score_rot.unwrap()));
    assert!(
        score_l4 >= score_l1 + 0.01,
        "criterion 6a: rotation score at layer 4 ({score_l4:.4}) must exceed layer 1 ({score_l1:.4}) by 0.01"
    );
    let class_l1 = mean(&collect("ser_l1", &|r| r.row.class_top1.unwrap()));
    let class_l4 = mean(&collect("ser_l4", &|r| r.row.class_top1.unwrap()));
    assert!(
        class_l4 <= class_l1,
        "criterion 6b: class accuracy at layer 4 ({class_l4:.4}) must not exceed layer 1 ({class_l1:.4})"
    );
    pass(
        "criterion 6 (trade-off trend)",
        format!(
            "rot score {score_l1:.3} -> {score_l4:.3} (margin {:.3}), class {class_l1:.3} -> {class_l4:.3}",
            score_l4 - score_l1
        ),
    );

    // criterion 7: interior-layer regularization versus the baseline
    let score_base = mean(&collect("baseline", &|r| r.row.score_rot.unwrap()));
    let orient_base = mean(&collect("baseline", &|r| r.row.orient_top1.unwrap()));
    let class_base = mean(&collect("baseline", &|r| r.row.class_top1.unwrap()));
    let orient_l1 = mean(&collect("ser_l1", &|r| r.row.orient_top1.unwrap()));
    assert!(
        score_l1 >= score_base + 0.01,
        "criterion 7a: rotation score {score_l1:.4} must exceed baseline {score_base:.4} by 0.01"
    );
    assert!(
        orient_l1 >= orient_base + 0.02,
        "criterion 7b: orientation accuracy {orient_l1:.4} must exceed baseline {orient_base:.4} by 2 points"
    );
    assert!(
        class_l1 >= class_base - 0.01,
        "criterion 7c: class accuracy {class_l1:.4} must stay within 1 point of baseline {class_base:.4}"
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 3.0 * 3600.0, "desk runs took {secs:.0}s, budget 3h");
    pass(
        "criterion 7 (desk-scale benefit)",
        format!(
            "rot +{:.3}, orientation +{:.3}, class {:+.3} vs baseline; total {:.0}s",
            score_l1 - score_base,
            orient_l1 - orient_base,
            class_l1 - class_base,
            secs
        ),
    );
}

// ── criterion 8: training-cost overhead ───────────────────────────────────

#[test]
fn criterion_08_flops_overhead() {
    let start = Instant::now();
    let mut desk = CostModel::from_config(&desk_config());
    desk.r = 0.0;
    assert_eq!(desk.estimate(true).ratio, 1.0, "ratio must be exactly 1 at r=0");
    desk.r = desk_config().r;
    let desk_ratio = desk.estimate(true).ratio;
    assert!(desk_ratio <= 1.10, "desk ratio {desk_ratio}");
    let reference = CostModel::vit_s16().estimate(true).ratio;
    assert!(
        (1.005..=1.02).contains(&reference),
        "reference-config ratio {reference} outside [1.005, 1.02]"
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 1.0, "flops estimate took {secs:.2}s, budget 1s");
    pass(
        "criterion 8 (cost overhead)",
        format!("r=0 exactly 1.0, desk {desk_ratio:.4}, reference {reference:.4}"),
    );
}

// ── criterion 9: probe sanity ─────────────────────────────────────────────

#[test]
fn criterion_09_probe_sanity() {
    let start = Instant::now();

    // separable synthetic features reach 100%
    let mut rng = Rng::from_seed(909);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..300 {
        let class = i % 2;
        let center = if class == 0 { -4.0 } else { 4.0 };
        features.push(vec![center + rng.normal() * 0.3, rng.normal()]);
        labels.push(class);
    }
    let pd = ProbeDataset::new(features, labels, 2, 9, "separable".into()).unwrap();
    let acc = linear_probe(&pd, 50, 0.5).unwrap().top1;
    assert_eq!(acc, 1.0, "separable features must reach 100%");

    // shuffled labels sit at chance within 3 binomial sigma
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..800 {
        features.push(vec![rng.normal(), rng.normal(), rng.normal(), rng.normal()]);
        labels.push(i % 4);
    }
    let pd = ProbeDataset::new(features, labels, 4, 10, "noise".into()).unwrap();
    let shuffled = pd.with_shuffled_labels(11);
    let acc = linear_probe(&shuffled, 40, 0.5).unwrap().top1;
    let n_val = shuffled.val_idx.len() as f64;
    let sigma = (0.25 * 0.75 / n_val).sqrt();
    assert!(
        (acc - 0.25).abs() <= 3.0 * sigma + 0.05,
        "shuffled-label accuracy {acc} should sit at 0.25"
    );

    // transformation probes hit their chance floors on shuffled labels
    let ds = generate(
        &SyntheticSpec {
            n_images: 400,
            ..SyntheticSpec::default()
        },
        912,
    )
    .unwrap();
    let mut cfg = desk_config();
    cfg.model.dim = 16;
    cfg.model.depth = 2;
    cfg.model.heads = 2;
    let trainer = Trainer::<f32>::new(cfg).unwrap();
    for (task, floor) in [(TransformTask::Rotation4, 0.25), (TransformTask::Hflip2, 0.5)] {
        let tpd = transform_probe_dataset(&trainer, &ds, task, 1, 13).unwrap();
        let shuffled = tpd.with_shuffled_labels(14);
        let acc = linear_probe(&shuffled, 40, 0.5).unwrap().top1;
        let sigma = (floor * (1.0 - floor) / shuffled.val_idx.len() as f64).sqrt();
        assert!(
            (acc - floor).abs() <= 3.0 * sigma + 0.08,
            "{} floor: accuracy {acc} vs {floor}",
            task.name()
        );
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "probe sanity took {secs:.1}s, budget 1min");
    pass(
        "criterion 9 (probe sanity)",
        format!("separable 100%, chance floors within 3 sigma, {secs:.1}s"),
    );
}

// ── criterion 10: determinism and resumption ──────────────────────────────

#[test]
fn criterion_10_determinism_resumption() {
    let start = Instant::now();
    let ds = generate(
        &SyntheticSpec {
            n_images: 128,
            ..SyntheticSpec::default()
        },
        1001,
    )
    .unwrap();
    let mut cfg = Config::default();
    cfg.epochs = 4;
    cfg.batch_size = 32;
    cfg.warmup_epochs = 1;
    cfg.ckpt_every = 2;
    cfg.model.dim = 32;
    cfg.model.depth = 2;
    cfg.model.heads = 2;
    cfg.model.split_layer = 1;
    cfg.model.cls_layer = 1;

    let dir = std::env::temp_dir().join("softequiv_acceptance_c10");
    let _ = std::fs::remove_dir_all(&dir);

    // identical seeds, bitwise-identical checkpoints
    let p1 = Trainer::<f32>::new(cfg.clone())
        .unwrap()
        .run(&ds, &dir.join("a"))
        .unwrap();
    let p2 = Trainer::<f32>::new(cfg.clone())
        .unwrap()
        .run(&ds, &dir.join("b"))
        .unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "identical seeds must produce bitwise-identical checkpoints"
    );

    // resume at the midpoint equals the uninterrupted run
    let mid = dir.join("a").join("ckpt_0002.serc");
    assert!(mid.exists(), "cadence checkpoint missing");
    let resumed_final = Trainer::<f32>::resume(cfg, &mid)
        .unwrap()
        .run(&ds, &dir.join("resumed"))
        .unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&resumed_final).unwrap(),
        "midpoint resume must match the uninterrupted run bitwise"
    );
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "determinism suite took {secs:.1}s, budget 10min");
    pass(
        "criterion 10 (determinism & resumption)",
        format!("checkpoints bitwise identical, {secs:.1}s"),
    );
}

// ── supporting invariant: partition determinism across the lattice ────────

#[test]
fn partition_ratio_examples() {
    let indices: Vec<usize> = (0..2048).collect();
    let p = partition(&indices, 0.01, 0, 7).unwrap();
    assert_eq!(p.b2.len(), 20, "r = 0.01 at |B| = 2048 gives |b2| = 20");
}
