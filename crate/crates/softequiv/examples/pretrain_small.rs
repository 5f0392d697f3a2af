//! Short pretraining run on a small synthetic set, printing per-epoch losses
//! and writing a resumable checkpoint.
//!
//!     cargo run -p softequiv --example pretrain_small

use softequiv::config::Config;
use softequiv::data::{generate, SyntheticSpec};
use softequiv::train::Trainer;

fn main() {
    let ds = generate(
        &SyntheticSpec {
            n_images: 512,
            ..SyntheticSpec::default()
        },
        7,
    )
    .expect("dataset");

    let mut cfg = Config::default();
    cfg.epochs = 6;
    cfg.batch_size = 32;
    cfg.warmup_epochs = 1;
    cfg.ckpt_every = 3;
    cfg.seed = 11;

    let out = std::env::temp_dir().join("softequiv_pretrain_small");
    let _ = std::fs::remove_dir_all(&out);
    let mut trainer = Trainer::<f32>::new(cfg).expect("trainer");
    println!("epoch  inv1    inv2    equiv   total");
    let final_ckpt = {
        // run epoch by epoch to print progress; `Trainer::run` does the same
        // loop plus CSV and checkpoint handling
        std::fs::create_dir_all(&out).unwrap();
        while trainer.epoch < trainer.cfg.epochs {
            let m = trainer
                .train_epoch(&ds, &mut softequiv::train::NoHook)
                .expect("epoch");
            println!(
                "{:>5}  {:.4}  {:.4}  {:.4}  {:.4}",
                m.epoch, m.l_inv1, m.l_inv2, m.l_equiv, m.l_total
            );
        }
        let path = out.join("final.serc");
        trainer.save_checkpoint(&path).expect("checkpoint");
        path
    };
    println!("checkpoint: {}", final_ckpt.display());

    // checkpoints resume bitwise: a fresh trainer loaded from the file picks
    // up at the recorded epoch with identical state
    let resumed = Trainer::<f32>::load(&final_ckpt).expect("load");
    println!(
        "resumed at epoch {} / step {}",
        resumed.epoch, resumed.global_step
    );
}
