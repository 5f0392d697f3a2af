//! Measure per-family equivariance scores of a briefly trained model at every
//! layer, showing how the regularized layer stands out.
//!
//!     cargo run -p softequiv --example equivariance_score

use softequiv::config::Config;
use softequiv::data::{generate, SyntheticSpec};
use softequiv::eval::{equivariance_score, Family};
use softequiv::train::{NoHook, Trainer};

fn main() {
    let ds = generate(
        &SyntheticSpec {
            n_images: 384,
            ..SyntheticSpec::default()
        },
        3,
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

    println!("scores are mean cosine similarities in [-1, 1], 200 samples each");
    println!("layer  rot90   hflip   scale");
    for layer in 0..=trainer.cfg.model.depth {
        let s = |family: Family| {
            equivariance_score(&trainer, &ds, family, layer, 200, 17)
                .map(|v| format!("{v:+.3}"))
                .unwrap_or_else(|_| "  n/a".into())
        };
        println!(
            "{layer:>5}  {}  {}  {}",
            s(Family::Rot90),
            s(Family::Hflip),
            s(Family::Scale)
        );
    }
}
