//! Analytic training-cost accounting: absolute per-image FLOPs and the
//! overhead the regularizer adds, at desk scale and at the reference scale.
//!
//!     cargo run -p softequiv --example flops_overhead

use softequiv::config::Config;
use softequiv::eval::CostModel;

fn main() {
    println!("desk configuration (32px, depth-4, batch 64):");
    let mut desk = CostModel::from_config(&Config::default());
    for r in [0.0, 0.05, 0.25, 0.5, 1.0] {
        desk.r = r;
        let rep = desk.estimate(true);
        println!(
            "  r = {r:<4}  per-image {:>8.1} MFLOPs   ratio {:.4}",
            rep.per_image / 1e6,
            rep.ratio
        );
    }

    println!("\nreference configuration (ViT-S/16 dims, batch 2048, proj 512):");
    let reference = CostModel::vit_s16();
    let with = reference.estimate(true);
    let without = reference.estimate(false);
    println!("  baseline     per-image {:.2} GFLOPs", without.per_image / 1e9);
    println!(
        "  regularized  per-image {:.2} GFLOPs   ratio {:.4}",
        with.per_image / 1e9,
        with.ratio
    );
}
