//! Train, save, reload and predict: the model file round trip.

use tcnseg::layers::Alignment;
use tcnseg::network::{DecoderOutput, ModelConfig, TcnModel};
use tcnseg::serialize::{load_model, save_model};
use tcnseg::synth::{synth_generate, SynthConfig};
use tcnseg::training::{train, TrainConfig};

fn main() -> tcnseg::Result<()> {
    let data = synth_generate(&SynthConfig {
        num_sequences: 4,
        mean_sequence_length: 100,
        ..SynthConfig::default()
    })?;
    let mc = ModelConfig {
        num_layers: 2,
        filters_per_layer: vec![8, 16],
        filter_duration: 4,
        num_classes: 5,
        input_dim: 8,
        decoder_output: DecoderOutput::FirstLayer,
        conv_alignment: Alignment::Centered,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let (params, _) = train(&data, &mc, &tc)?;
    let model = TcnModel::new(mc, params)?;

    let path = std::env::temp_dir().join("tcnseg_example_model.tcn");
    save_model(&model, &path)?;
    let loaded = load_model(&path)?;
    assert_eq!(loaded, model, "model file round trip must be exact");
    println!("saved and reloaded {} ({} parameters)", path.display(), loaded.params.num_parameters());

    let seq = &data[0];
    let (probs, labels) = loaded.predict(&seq.features)?;
    println!("frame  true  pred  confidence");
    for t in (0..seq.len()).step_by(10) {
        let p = labels.labels[t];
        println!("{t:>5}  {:>4}  {p:>4}  {:.3}", seq.labels.labels[t], probs.probs.get(p - 1, t));
    }
    Ok(())
}
