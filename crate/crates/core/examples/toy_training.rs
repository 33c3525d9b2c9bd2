//! Train a small model on synthetic 2-D pairs and report validation Dice.
//!
//! `cargo run --release -p scfreg-core --example toy_training -- [epochs]`

use std::time::Instant;

use scfreg_core::embeddings::one_hot_embeddings;
use scfreg_core::nn::BackboneConfig;
use scfreg_core::scf::{ModelConfig, ScfModel};
use scfreg_core::synth::{generate_pairs, SynthConfig};
use scfreg_core::train::{evaluate_dice, foreground_labels, initial_dice, train_loop, TrainConfig};

fn main() -> scfreg_core::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let synth = SynthConfig {
        num_pairs: 25,
        seed: 1,
        ..Default::default()
    };
    let ds = generate_pairs(&synth)?;
    let n = ds.num_labels();
    let (train, val) = ds.split(20);
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            start_channels: 8,
            levels: 3,
            out_channels: 16,
            ..Default::default()
        },
        mlp_hidden: 64,
        ..Default::default()
    };
    let mut model = ScfModel::new(cfg, one_hot_embeddings(n)?, 1)?;
    let labels = foreground_labels(n);
    println!("initial dice {:.4}", initial_dice(&val, &labels)?);
    let tc = TrainConfig {
        epochs,
        lr0: std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(1e-4),
        seed: 1,
        validate_every: 5,
        ..Default::default()
    };
    let t = Instant::now();
    let hist = train_loop(&mut model, &train, &val, &tc, None)?;
    let secs = t.elapsed().as_secs_f64();
    for r in hist.iter().filter(|r| r.val_dice.is_some()) {
        println!("epoch {:>4} loss {:.5} val dice {:.4}", r.epoch, r.total, r.val_dice.unwrap());
    }
    println!("final dice {:.4}", evaluate_dice(&model, &val, &labels, None)?);
    println!("{:.3} s/step", secs / (epochs * train.len()) as f64);
    Ok(())
}
