//! Miniature layer-placement ablation: trains one short run per regularized
//! layer and tabulates probes plus equivariance scores.
//!
//!     cargo run -p softequiv --example ablate_layers
//!
//! (Desk-scale numbers need the full configuration; this example keeps runs
//! short so it finishes in about a minute.)

use softequiv::config::Config;
use softequiv::data::{generate, SyntheticSpec};
use softequiv::eval::{ablation_sweep, SweepAxis, SWEEP_CSV_HEADER};

fn main() {
    let ds = generate(
        &SyntheticSpec {
            n_images: 256,
            ..SyntheticSpec::default()
        },
        21,
    )
    .expect("dataset");

    let mut base = Config::default();
    base.epochs = 4;
    base.batch_size = 32;
    base.warmup_epochs = 1;
    base.model.dim = 32;

    let out = std::env::temp_dir().join("softequiv_ablate_example");
    let _ = std::fs::remove_dir_all(&out);
    std::fs::create_dir_all(&out).unwrap();

    let values: Vec<String> = ["1", "2", "3", "4"].iter().map(|s| s.to_string()).collect();
    let rows = ablation_sweep::<f32>(&base, SweepAxis::Layer, &values, &[1], &ds, &out, 100)
        .expect("sweep");

    println!("{SWEEP_CSV_HEADER}");
    for row in rows {
        println!("{}", row.to_csv());
    }
    println!("(per-run outputs under {})", out.display());
}
