//! Linear, kNN, MLP, and transformation-prediction probes on frozen features
//! of a briefly trained model.
//!
//!     cargo run -p softequiv --example probes

use softequiv::config::Config;
use softequiv::data::{generate, SyntheticSpec};
use softequiv::eval::{
    default_knn_k, extract_features, knn_probe, linear_probe, mlp_probe, transform_probe,
    ProbeDataset, ReprKind, TransformTask,
};
use softequiv::train::{NoHook, Trainer};

fn main() {
    let ds = generate(
        &SyntheticSpec {
            n_images: 512,
            ..SyntheticSpec::default()
        },
        9,
    )
    .expect("dataset");

    let mut cfg = Config::default();
    cfg.epochs = 8;
    cfg.batch_size = 32;
    cfg.warmup_epochs = 1;
    let mut trainer = Trainer::<f32>::new(cfg).expect("trainer");
    for _ in 0..trainer.cfg.epochs {
        trainer.train_epoch(&ds, &mut NoHook).expect("epoch");
    }
    let depth = trainer.cfg.model.depth;

    // class probe on concatenated CLS features (the invariant task)
    let cls_features = extract_features(&trainer, &ds, ReprKind::ClsConcat).expect("features");
    let class_labels: Vec<usize> = (0..ds.len()).map(|i| ds.class_of(i)).collect();
    let pd = ProbeDataset::new(cls_features, class_labels, 5, 1, "class/cls-concat".into())
        .expect("probe dataset");
    let lin = linear_probe(&pd, 50, 0.5).expect("linear probe");
    println!("class  linear    top1 {:.3}  top5 {:?}", lin.top1, lin.top5);
    let k = default_knn_k(pd.train_idx.len());
    println!(
        "class  {k}-nn     top1 {:.3}",
        knn_probe(&pd, k).expect("knn")
    );
    let mlp = mlp_probe(&pd, 64, 50, 0.5).expect("mlp probe");
    println!("class  mlp       top1 {:.3}", mlp.top1);

    // orientation probe on the flattened final spatial map (the covariant
    // task: does the representation still know how the shape is turned?)
    let tok_features =
        extract_features(&trainer, &ds, ReprKind::TokensFlat(depth)).expect("features");
    let orient_labels: Vec<usize> = (0..ds.len()).map(|i| ds.orientation_of(i)).collect();
    let opd = ProbeDataset::new(tok_features, orient_labels, 4, 2, "orientation".into())
        .expect("probe dataset");
    println!(
        "orient linear    top1 {:.3}",
        linear_probe(&opd, 50, 0.5).expect("probe").top1
    );

    // transformation prediction from pooled features, layer by layer
    println!("\ntransform prediction accuracy by layer (pooled tokens):");
    println!("layer  rotation4  hflip2");
    for layer in 1..=depth {
        let rot = transform_probe(&trainer, &ds, TransformTask::Rotation4, layer, 5)
            .expect("rotation probe");
        let flip = transform_probe(&trainer, &ds, TransformTask::Hflip2, layer, 5)
            .expect("hflip probe");
        println!("{layer:>5}  {rot:>9.3}  {flip:>6.3}");
    }
}
