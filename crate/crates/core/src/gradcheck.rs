//! Central finite-difference check of the full network gradient.
//!
//! A random instance (parameters, input, labels) is drawn from a seed; for
//! every sampled parameter coordinate the analytic gradient of the masked
//! cross-entropy is compared with `(L(θ+h) - L(θ-h)) / 2h`. Coordinates whose
//! perturbation changes a discrete forward decision (activation sign, pool
//! winner, normalization argmax) are skipped, since the loss is not
//! differentiable across those boundaries. Instances are redrawn until no
//! normalization column has a non-positive maximum and no probability sits
//! near the log floor of the loss.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TcnError};
use crate::network::{
    backward, forward, init_parameters, pad_matrix, DecoderOutput, ModelConfig, ModelGradients,
    ModelParameters, PaddedSequence, ProbabilitySequence, Tape,
};
use crate::tensor::Matrix;
use crate::training::cross_entropy;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    /// Real frames in the random instance (padded up as the network requires).
    pub seq_len: usize,
    /// Fraction of each tensor's coordinates to check, in `(0, 1]`. At least
    /// one coordinate per tensor is always checked.
    pub fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
            seq_len: 8,
            fraction: 1.0,
        }
    }
}

/// The small network used when no configuration is given.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        filters_per_layer: vec![3, 4],
        filter_duration: 2,
        num_classes: 3,
        input_dim: 2,
        leaky_slope: crate::layers::DEFAULT_LEAKY_SLOPE,
        decoder_output: DecoderOutput::InputDim,
        input_norm: false,
        conv_alignment: crate::layers::Alignment::Forward,
    }
}

/// Default layer widths `[32, 64, 96]` on a narrow input, for spot checks.
pub fn default_shape_config() -> ModelConfig {
    ModelConfig {
        filter_duration: 3,
        num_classes: 3,
        input_dim: 4,
        input_norm: false,
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tensor,checked,skipped,max_rel_error,result")?;
        for t in &self.tensors {
            writeln!(
                f,
                "{},{},{},{:.3e},{}",
                t.name,
                t.checked,
                t.skipped,
                t.max_rel_error,
                if t.passed { "PASS" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "overall,{},{},{:.3e},{}",
            self.tensors.iter().map(|t| t.checked).sum::<usize>(),
            self.tensors.iter().map(|t| t.skipped).sum::<usize>(),
            self.worst(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// `|a - b| / max(|a|, |b|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

struct Instance {
    params: ModelParameters,
    padded: PaddedSequence,
    labels: Vec<usize>,
}

/// Instances are redrawn until this many attempts have failed.
const MAX_DRAWS: u64 = 1000;

/// Smallest probability a usable instance may predict; below it the log
/// floor of the loss would be active.
const MIN_PROBABILITY: f64 = 1e-9;

fn draw_once(config: &ModelConfig, opts: &GradCheckOptions, attempt: u64) -> Result<Instance> {
    let seed = opts.seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut params = init_parameters(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2545_f491_4f6c_dd1d);
    for conv in params.encoder_convs.iter_mut().chain(params.decoder_convs.iter_mut()) {
        for b in &mut conv.bias {
            *b = rng.random_range(0.0..0.2);
        }
    }
    for b in &mut params.classifier_bias {
        *b = rng.random_range(-0.1..0.1);
    }
    let x = Matrix::from_fn(config.input_dim, opts.seq_len, |_, _| rng.random_range(-1.0..1.0));
    let padded = pad_matrix(&x, config);
    let labels = (0..padded.padded_length())
        .map(|_| rng.random_range(1..=config.num_classes))
        .collect();
    Ok(Instance {
        params,
        padded,
        labels,
    })
}

/// A point is usable when every normalized column has a positive maximum
/// (so the clamped `1/eps` branch is not hit) and no probability is near the
/// log floor.
fn is_regular(tape: &Tape, probs: &ProbabilitySequence) -> bool {
    let positive = |m: &[f64]| m.iter().all(|&v| v > 0.0);
    tape.encoder.iter().all(|e| positive(&e.norm_max))
        && tape.decoder.iter().all(|d| positive(&d.norm_max))
        && probs.probs.as_slice().iter().all(|&p| p > MIN_PROBABILITY)
}

fn draw_instance(config: &ModelConfig, opts: &GradCheckOptions) -> Result<Instance> {
    for attempt in 0..MAX_DRAWS {
        let inst = draw_once(config, opts, attempt)?;
        let (probs, tape) = forward(&inst.params, &inst.padded, config)?;
        if is_regular(&tape, &probs) {
            return Ok(inst);
        }
    }
    Err(TcnError::Invalid(format!(
        "no regular gradient-check instance in {MAX_DRAWS} draws"
    )))
}

fn loss_and_tape(config: &ModelConfig, inst: &Instance, params: &ModelParameters) -> Result<(f64, Matrix, Tape)> {
    let (probs, tape) = forward(params, &inst.padded, config)?;
    let (loss, grad) = cross_entropy(&probs, &inst.labels, &inst.padded.mask)?;
    Ok((loss, grad, tape))
}

pub fn gradient_check(config: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    gradient_check_with(config, opts, backward)
}

/// Same as [`gradient_check`] with a caller-supplied backward pass.
pub fn gradient_check_with<B>(config: &ModelConfig, opts: &GradCheckOptions, analytic: B) -> Result<GradCheckReport>
where
    B: Fn(&ModelParameters, &Tape, &Matrix) -> Result<ModelGradients>,
{
    config.validate()?;
    if !(opts.fraction > 0.0 && opts.fraction <= 1.0) {
        return Err(TcnError::Config(format!("fraction must lie in (0, 1], got {}", opts.fraction)));
    }
    if opts.seq_len == 0 {
        return Err(TcnError::Config("gradcheck seq_len must be >= 1".into()));
    }
    if !(opts.step > 0.0 && opts.tolerance > 0.0) {
        return Err(TcnError::Config("gradcheck step and tolerance must be positive".into()));
    }

    let inst = draw_instance(config, opts)?;
    let (_, grad_logits, tape) = loss_and_tape(config, &inst, &inst.params)?;
    let base_sig = tape.signature();
    let grads = analytic(&inst.params, &tape, &grad_logits)?;
    if grads.tensor_shapes() != inst.params.tensor_shapes() {
        return Err(TcnError::shape(
            "analytic gradient",
            format!("{:?}", inst.params.tensor_shapes()),
            format!("{:?}", grads.tensor_shapes()),
        ));
    }

    let names = inst.params.tensor_names();
    let sizes: Vec<usize> = inst.params.tensors().iter().map(|t| t.len()).collect();
    let mut pick_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5151));
    let mut tensors = Vec::with_capacity(names.len());
    let h = opts.step;

    for (k, name) in names.iter().enumerate() {
        let n = sizes[k];
        let amount = ((n as f64 * opts.fraction).ceil() as usize).clamp(1, n);
        let mut coords = if amount == n {
            (0..n).collect::<Vec<_>>()
        } else {
            sample(&mut pick_rng, n, amount).into_vec()
        };
        coords.sort_unstable();

        let mut checked = 0;
        let mut skipped = 0;
        let mut worst: f64 = 0.0;
        for i in coords {
            let mut plus = inst.params.clone();
            plus.tensors_mut()[k][i] += h;
            let mut minus = inst.params.clone();
            minus.tensors_mut()[k][i] -= h;
            let (lp, _, tp) = loss_and_tape(config, &inst, &plus)?;
            let (lm, _, tm) = loss_and_tape(config, &inst, &minus)?;
            if tp.signature() != base_sig || tm.signature() != base_sig {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(relative_error(grads.tensors()[k][i], numeric));
            checked += 1;
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            checked,
            skipped,
            max_rel_error: worst,
            passed: checked > 0 && worst < opts.tolerance,
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_network_passes() {
        let report = gradient_check(&small_config(), &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.tensors.len(), 10);
    }

    #[test]
    fn sign_flip_is_caught() {
        let report = gradient_check_with(&small_config(), &GradCheckOptions::default(), |p, t, g| {
            let mut grads = backward(p, t, g)?;
            for w in grads.decoder_convs[1].weights.as_mut_slice() {
                *w = -*w;
            }
            Ok(grads)
        })
        .unwrap();
        assert!(!report.passed());
        let bad: Vec<_> = report.tensors.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect();
        assert_eq!(bad, vec!["decoder.1.weights"]);
    }

    #[test]
    fn report_is_deterministic() {
        let opts = GradCheckOptions {
            seed: 3,
            ..GradCheckOptions::default()
        };
        let a = gradient_check(&small_config(), &opts).unwrap();
        assert_eq!(a, gradient_check(&small_config(), &opts).unwrap());
        assert_eq!(a.to_string(), gradient_check(&small_config(), &opts).unwrap().to_string());
    }

    #[test]
    fn absurd_tolerance_fails() {
        let opts = GradCheckOptions {
            tolerance: 1e-12,
            ..GradCheckOptions::default()
        };
        assert!(!gradient_check(&small_config(), &opts).unwrap().passed());
    }
}
