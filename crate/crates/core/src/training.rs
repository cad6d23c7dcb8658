//! Masked cross-entropy, Adam, and the minibatch training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{check_dataset, LabeledSequence};
use crate::error::{Result, TcnError};
use crate::metrics::{edit_score, frame_accuracy};
use crate::network::{
    backward, forward, init_parameters, pad_sequence, predict_labels, ModelConfig, ModelGradients,
    ModelParameters, PaddedSequence, ProbabilitySequence, TcnModel,
};
use crate::tensor::Matrix;

/// Floor applied to probabilities before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub rng_seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 200,
            batch_size: 8,
            rng_seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TcnError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0 && self.adam_epsilon.is_finite()) {
            return bad("adam_epsilon must be positive");
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// Mean masked cross-entropy and its gradient with respect to the logits.
///
/// `labels` are 1-based and only read where `mask` is true.
pub fn cross_entropy(probs: &ProbabilitySequence, labels: &[usize], mask: &[bool]) -> Result<(f64, Matrix)> {
    let (c, t_len) = probs.probs.shape();
    if labels.len() != t_len || mask.len() != t_len {
        return Err(TcnError::shape(
            "cross entropy labels/mask",
            t_len,
            format!("{}/{}", labels.len(), mask.len()),
        ));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(TcnError::Invalid("cross entropy over zero frames".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(c, t_len);
    for t in 0..t_len {
        if !mask[t] {
            continue;
        }
        let y = labels[t];
        if y == 0 || y > c {
            return Err(TcnError::Invalid(format!("label {y} at frame {t} outside 1..={c}")));
        }
        loss -= probs.probs.get(y - 1, t).max(LOG_FLOOR).ln();
        for k in 0..c {
            let onehot = if k + 1 == y { 1.0 } else { 0.0 };
            grad.set(k, t, (probs.probs.get(k, t) - onehot) * inv_n);
        }
    }
    Ok((loss * inv_n, grad))
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update, in place. Rejects non-finite gradients
/// before touching any state.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &ModelGradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    let names = grads.tensor_names();
    let g_tensors = grads.tensors();
    let shapes_ok = g_tensors.len() == state.first_moment.len()
        && g_tensors.len() == state.second_moment.len()
        && params.tensor_shapes() == grads.tensor_shapes()
        && g_tensors
            .iter()
            .zip(&state.first_moment)
            .zip(&state.second_moment)
            .all(|((g, m), v)| g.len() == m.len() && g.len() == v.len());
    if !shapes_ok {
        return Err(TcnError::shape(
            "adam parameters/gradients/state",
            format!("{:?}", params.tensor_shapes()),
            format!("{:?}", grads.tensor_shapes()),
        ));
    }
    for (name, g) in names.iter().zip(&g_tensors) {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(TcnError::NonFinite { tensor: name.clone() });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let corr1 = 1.0 - b1.powi(t);
    let corr2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let eps = config.adam_epsilon;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g_tensors)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over sequences of the frame-averaged loss, measured before each step.
    pub loss: f64,
    /// Frame accuracy over all training frames from the same forward passes.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub val_edit: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,loss,train_acc,val_acc,val_edit`, empty cells without validation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc,val_acc,val_edit\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                r.loss,
                r.train_acc,
                opt(r.val_acc),
                opt(r.val_edit)
            );
        }
        s
    }
}

struct Prepared {
    padded: PaddedSequence,
    labels: Vec<usize>,
    mask: Vec<bool>,
}

fn prepare(seq: &LabeledSequence, config: &ModelConfig) -> Result<Prepared> {
    let padded = pad_sequence(&seq.features, config)?;
    let t_pad = padded.padded_length();
    let mut labels = seq.labels.labels.clone();
    labels.resize(t_pad, 1);
    let mask = (0..t_pad)
        .map(|t| padded.mask[t] && seq.labels.is_valid(t))
        .collect();
    Ok(Prepared { padded, labels, mask })
}

/// Mean frame accuracy and edit score of `model` over `dataset`.
pub fn validation_scores(model: &TcnModel, dataset: &[LabeledSequence]) -> Result<(f64, f64)> {
    let mut acc = 0.0;
    let mut edit = 0.0;
    for seq in dataset {
        let (_, pred) = model.predict(&seq.features)?;
        acc += frame_accuracy(&pred.labels, &seq.labels.labels, seq.labels.mask.as_deref())?;
        edit += edit_score(&pred.labels, &seq.labels.labels)?;
    }
    let n = dataset.len() as f64;
    Ok((acc / n, edit / n))
}

pub fn train(
    dataset: &[LabeledSequence],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParameters, TrainHistory)> {
    train_with(dataset, None, model_config, train_config, |_| {})
}

/// Full training loop. `observer` sees every epoch record as it is produced.
pub fn train_with(
    dataset: &[LabeledSequence],
    validation: Option<&[LabeledSequence]>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<(ModelParameters, TrainHistory)> {
    model_config.validate()?;
    train_config.validate()?;
    let (dim, _) = check_dataset(dataset, Some(model_config.num_classes))?;
    if dim != model_config.input_dim {
        return Err(TcnError::shape("training feature dim", model_config.input_dim, dim));
    }
    if let Some(val) = validation {
        let (vdim, _) = check_dataset(val, Some(model_config.num_classes))?;
        if vdim != dim {
            return Err(TcnError::shape("validation feature dim", dim, vdim));
        }
    }

    let prepared = dataset
        .iter()
        .map(|s| prepare(s, model_config))
        .collect::<Result<Vec<_>>>()?;
    let mut params = init_parameters(model_config, train_config.rng_seed)?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.rng_seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 1..=train_config.epochs {
        if train_config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut frames = 0usize;
        for batch in order.chunks(train_config.batch_size) {
            let mut acc: Option<ModelGradients> = None;
            for &i in batch {
                let p = &prepared[i];
                let (probs, tape) = forward(&params, &p.padded, model_config)?;
                let (loss, grad_logits) = cross_entropy(&probs, &p.labels, &p.mask)?;
                loss_sum += loss;
                let pred = predict_labels(&probs, probs.len());
                for t in 0..p.mask.len() {
                    if p.mask[t] {
                        frames += 1;
                        correct += usize::from(pred.labels[t] == p.labels[t]);
                    }
                }
                let g = backward(&params, &tape, &grad_logits)?;
                match acc.as_mut() {
                    Some(a) => a.add_assign(&g),
                    None => acc = Some(g),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut params, &grads, &mut state, train_config)?;
        }

        let (val_acc, val_edit) = match validation {
            Some(val) if !val.is_empty() => {
                let model = TcnModel::new(model_config.clone(), params.clone())?;
                let (a, e) = validation_scores(&model, val)?;
                (Some(a), Some(e))
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / prepared.len() as f64,
            train_acc: 100.0 * correct as f64 / frames.max(1) as f64,
            val_acc,
            val_edit,
        };
        observer(&record);
        history.records.push(record);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::DecoderOutput;

    fn probs(rows: &[Vec<f64>]) -> ProbabilitySequence {
        ProbabilitySequence {
            probs: Matrix::from_rows(rows),
        }
    }

    #[test]
    fn loss_zero_on_correct_onehot() {
        let p = probs(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (loss, grad) = cross_entropy(&p, &[1, 2], &[true, true]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_uniform_is_ln_c() {
        let c = 4;
        let p = ProbabilitySequence {
            probs: Matrix::filled(c, 5, 0.25),
        };
        for labels in [[1, 1, 1, 1, 1], [4, 3, 2, 1, 2]] {
            let (loss, _) = cross_entropy(&p, &labels, &[true; 5]).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_matches_hand_sum() {
        let p = probs(&[
            vec![0.2, 0.5, 0.1, 0.6],
            vec![0.3, 0.25, 0.8, 0.3],
            vec![0.5, 0.25, 0.1, 0.1],
        ]);
        let labels = [3, 1, 2, 3];
        let mask = [true, true, true, false];
        let (loss, grad) = cross_entropy(&p, &labels, &mask).unwrap();
        let expected = -(0.5f64.ln() + 0.5f64.ln() + 0.8f64.ln()) / 3.0;
        assert!((loss - expected).abs() < 1e-15);
        assert!((grad.get(2, 0) - (0.5 - 1.0) / 3.0).abs() < 1e-15);
        assert!((grad.get(0, 0) - 0.2 / 3.0).abs() < 1e-15);
        assert_eq!(grad.column(3), vec![0.0; 3]);
    }

    #[test]
    fn loss_errors_and_floor() {
        let p = probs(&[vec![1.0], vec![0.0]]);
        assert!(cross_entropy(&p, &[1], &[false]).is_err());
        assert!(cross_entropy(&p, &[3], &[true]).is_err());
        assert!(cross_entropy(&p, &[1, 1], &[true, true]).is_err());
        let (loss, _) = cross_entropy(&p, &[2], &[true]).unwrap();
        assert!((loss + LOG_FLOOR.ln()).abs() < 1e-12);
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            filters_per_layer: vec![2],
            filter_duration: 2,
            num_classes: 2,
            input_dim: 2,
            leaky_slope: 0.01,
            decoder_output: DecoderOutput::InputDim,
            input_norm: true,
            conv_alignment: crate::layers::Alignment::Forward,
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let c = tiny_config();
        let mut params = init_parameters(&c, 1).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &ModelParameters::zeros(&c), &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let c = tiny_config();
        let mut params = init_parameters(&c, 1).unwrap();
        let before = params.clone();
        let mut grads = ModelParameters::zeros(&c);
        for (k, t) in grads.tensors_mut().into_iter().enumerate() {
            for (i, g) in t.iter_mut().enumerate() {
                *g = if (i + k) % 2 == 0 { 0.3 } else { -2.0 };
            }
        }
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        for ((a, b), g) in params.tensors().iter().zip(before.tensors()).zip(grads.tensors()) {
            for i in 0..a.len() {
                let delta = a[i] - b[i];
                // m_hat = g, v_hat = g^2 -> step = lr * |g| / (|g| + eps)
                let expected = -cfg.learning_rate * g[i] / (g[i].abs() + cfg.adam_epsilon);
                assert!((delta - expected).abs() < 1e-15);
                assert!((delta.abs() - cfg.learning_rate).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite_by_name() {
        let c = tiny_config();
        let mut params = init_parameters(&c, 1).unwrap();
        let before = params.clone();
        let mut grads = ModelParameters::zeros(&c);
        grads.decoder_convs[0].bias[0] = f64::NAN;
        let mut state = AdamState::new(&params);
        match adam_step(&mut params, &grads, &mut state, &TrainConfig::default()) {
            Err(TcnError::NonFinite { tensor }) => assert_eq!(tensor, "decoder.0.bias"),
            other => panic!("{other:?}"),
        }
        assert_eq!(params, before);
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn adam_tensors_update_independently() {
        let c = tiny_config();
        let mut params = init_parameters(&c, 2).unwrap();
        let before = params.clone();
        let mut grads = ModelParameters::zeros(&c);
        grads.classifier_bias[1] = 1.0;
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(params.encoder_convs, before.encoder_convs);
        assert_eq!(params.classifier_bias[0], before.classifier_bias[0]);
        assert!(params.classifier_bias[1] < before.classifier_bias[1]);
    }

    #[test]
    fn train_config_validation() {
        let mut t = TrainConfig::default();
        t.epochs = 0;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::default();
        t.adam_beta1 = 1.0;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::default();
        t.learning_rate = 0.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            records: vec![
                EpochRecord {
                    epoch: 1,
                    loss: 0.5,
                    train_acc: 75.0,
                    val_acc: None,
                    val_edit: None,
                },
                EpochRecord {
                    epoch: 2,
                    loss: 0.25,
                    train_acc: 80.0,
                    val_acc: Some(70.0),
                    val_edit: Some(66.5),
                },
            ],
        };
        assert_eq!(
            h.to_csv(),
            "epoch,loss,train_acc,val_acc,val_edit\n1,0.5,75,,\n2,0.25,80,70,66.5\n"
        );
    }
}
