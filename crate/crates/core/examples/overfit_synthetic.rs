//! Trains the three-layer network on a small synthetic dataset and scores it
//! on held-out sequences from the same generator.
//!
//! ```text
//! cargo run --release --example overfit_synthetic
//! ```

use tcnseg::layers::Alignment;
use tcnseg::network::{DecoderOutput, ModelConfig, TcnModel};
use tcnseg::synth::{synth_generate, SynthConfig};
use tcnseg::training::{train_with, validation_scores, TrainConfig};

fn main() -> tcnseg::Result<()> {
    let train_set = synth_generate(&SynthConfig::default())?;
    let test_set = synth_generate(&SynthConfig {
        num_sequences: 20,
        rng_seed: 99,
        ..SynthConfig::default()
    })?;

    let mc = ModelConfig {
        filter_duration: 4,
        num_classes: 5,
        input_dim: 8,
        decoder_output: DecoderOutput::FirstLayer,
        conv_alignment: Alignment::Centered,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        // full batch: one deterministic Adam step per epoch
        batch_size: 10,
        shuffle: false,
        ..TrainConfig::default()
    };
    let (params, history) = train_with(&train_set, Some(&test_set), &mc, &tc, |r| {
        if r.epoch % 20 == 0 {
            println!(
                "epoch {:>3}  loss {:.4}  train {:.2}%  held-out {:.2}%",
                r.epoch,
                r.loss,
                r.train_acc,
                r.val_acc.unwrap_or(f64::NAN)
            );
        }
    })?;
    let last = history.last().expect("at least one epoch");
    let model = TcnModel::new(mc, params)?;
    let (acc, edit) = validation_scores(&model, &test_set)?;
    println!("final loss {:.4}, train accuracy {:.2}%", last.loss, last.train_acc);
    println!("held-out accuracy {acc:.2}%, edit score {edit:.2}");
    Ok(())
}
