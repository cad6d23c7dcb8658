//! One forward pass through the encoder-decoder, printing the temporal
//! length and width of every stage.

use tcnseg::network::{forward, init_parameters, pad_matrix, ModelConfig};
use tcnseg::Matrix;

fn main() -> tcnseg::Result<()> {
    let config = ModelConfig {
        filter_duration: 5,
        num_classes: 4,
        input_dim: 6,
        ..ModelConfig::default()
    };
    let params = init_parameters(&config, 7)?;
    let x = Matrix::from_fn(6, 37, |c, t| ((c + 1) as f64 * t as f64 * 0.1).sin());
    let padded = pad_matrix(&x, &config);
    println!("input 6x37 padded to {}", padded.values);
    let (probs, tape) = forward(&params, &padded, &config)?;
    for (l, e) in tape.encoder.iter().enumerate() {
        println!("encoder {l}: {}", e.output.values);
    }
    for (l, d) in tape.decoder.iter().enumerate() {
        println!("decoder {l}: {}", d.output.values);
    }
    let probs = probs.truncate(padded.original_length);
    println!("probabilities: {}", probs.probs);
    let sums: Vec<f64> = (0..3).map(|t| probs.probs.column(t).iter().sum()).collect();
    println!("first column sums: {sums:?}");
    Ok(())
}
