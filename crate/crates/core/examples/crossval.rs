//! Leave-one-group-out cross-validation on a three-group synthetic dataset.

use tcnseg::data::{estimate_filter_duration, split_leave_one_group_out, LabeledSequence};
use tcnseg::metrics::{evaluate, EvalReport, MAP_THRESHOLDS};
use tcnseg::layers::Alignment;
use tcnseg::network::{DecoderOutput, ModelConfig, TcnModel};
use tcnseg::synth::{synth_generate, SynthConfig};
use tcnseg::training::{train, TrainConfig};

fn main() -> tcnseg::Result<()> {
    let dataset = synth_generate(&SynthConfig {
        num_sequences: 9,
        num_groups: 3,
        mean_sequence_length: 120,
        ..SynthConfig::default()
    })?;
    let folds = split_leave_one_group_out(&dataset)?;
    let mut fold_reports = Vec::new();
    for (i, fold) in folds.iter().enumerate() {
        let pick = |idx: &[usize]| -> Vec<LabeledSequence> { idx.iter().map(|&j| dataset[j].clone()).collect() };
        let (train_set, test_set) = (pick(&fold.train), pick(&fold.test));
        let labels: Vec<_> = train_set.iter().map(|s| s.labels.clone()).collect();
        let d = estimate_filter_duration(&labels, train_set[0].features.frame_period)?;
        let mc = ModelConfig {
            num_layers: 2,
            filters_per_layer: vec![16, 32],
            filter_duration: d.frames.min(4),
            num_classes: 5,
            input_dim: 8,
            decoder_output: DecoderOutput::FirstLayer,
            conv_alignment: Alignment::Centered,
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            epochs: 60,
            batch_size: 1,
            rng_seed: i as u64,
            ..TrainConfig::default()
        };
        let (params, _) = train(&train_set, &mc, &tc)?;
        let model = TcnModel::new(mc, params)?;
        let reports = test_set
            .iter()
            .map(|s| evaluate(&model.predict_proba(&s.features)?, &s.labels, &MAP_THRESHOLDS))
            .collect::<tcnseg::Result<Vec<_>>>()?;
        let mean = EvalReport::mean(&reports)?;
        println!("{}", mean.csv_row(&fold.name));
        fold_reports.push(mean);
    }
    let overall = EvalReport::mean(&fold_reports)?;
    println!("{}", overall.csv_row("mean"));
    Ok(())
}
