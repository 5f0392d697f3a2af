use softequiv::config::Config;
use softequiv::data::{generate, SyntheticSpec};
use softequiv::eval::{equivariance_score, extract_features, linear_probe, Family, ProbeDataset, ReprKind};
use softequiv::train::{NoHook, Trainer};
use std::sync::Mutex;

fn orient_probe(t: &Trainer<f32>, ds: &softequiv::data::Dataset, layer: usize) -> f64 {
    let feats = extract_features(t, ds, ReprKind::TokensFlat(layer)).unwrap();
    let labels: Vec<usize> = (0..ds.len()).map(|i| ds.orientation_of(i)).collect();
    let pd = ProbeDataset::new(feats, labels, 4, 1, "o".into()).unwrap();
    linear_probe(&pd, 50, 0.5).unwrap().top1
}

fn class_probe(t: &Trainer<f32>, ds: &softequiv::data::Dataset) -> f64 {
    let feats = extract_features(t, ds, ReprKind::ClsConcat).unwrap();
    let labels: Vec<usize> = (0..ds.len()).map(|i| ds.class_of(i)).collect();
    let pd = ProbeDataset::new(feats, labels, 5, 1, "c".into()).unwrap();
    linear_probe(&pd, 50, 0.5).unwrap().top1
}

fn main() {
    let ds = generate(&SyntheticSpec::default(), 2024).unwrap();
    let variants: Vec<(String, bool, f64)> = vec![
        ("baseline".into(), true, 0.0),
        ("ser_r.25".into(), false, 0.25),
        ("ser_r.125".into(), false, 0.125),
        ("ser_r.0625".into(), false, 0.0625),
    ];
    let results = Mutex::new(Vec::new());
    let queue = Mutex::new(variants.into_iter().collect::<std::collections::VecDeque<_>>());
    std::thread::scope(|s| {
        for _ in 0..2 {
            s.spawn(|| loop {
                let job = queue.lock().unwrap().pop_front();
                let Some((name, baseline, r)) = job else { break };
                let mut cfg = Config::default();
                cfg.seed = 1;
                cfg.baseline = baseline;
                if !baseline { cfg.r = r; }
                let mut t = Trainer::<f32>::new(cfg).unwrap();
                for _ in 0..30 { t.train_epoch(&ds, &mut NoHook).unwrap(); }
                let o: Vec<f64> = (1..=4).map(|l| orient_probe(&t, &ds, l)).collect();
                let c = class_probe(&t, &ds);
                let rot = equivariance_score(&t, &ds, Family::Rot90, 4, 200, 1).unwrap();
                results.lock().unwrap().push((name, c, o, rot));
            });
        }
    });
    let mut rows = results.into_inner().unwrap();
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    println!("{:<11} class  o@1    o@2    o@3    o@4    rot@4", "variant");
    for (name, c, o, rot) in rows {
        println!("{name:<11} {c:.3}  {:.3}  {:.3}  {:.3}  {:.3}  {rot:.3}", o[0], o[1], o[2], o[3]);
    }
}
