//! The encoder-decoder network.
//!
//! Encoder layer `l`: conv (`F_{l-1} -> F_l`), width-2 max pool, channel
//! normalization. Decoder layer: repeat-2 upsample, conv, channel
//! normalization. A per-frame softmax classifier reads the last decoder map.
//!
//! [`forward`] records a [`Tape`] holding every intermediate value that
//! [`backward`] needs, so the reverse pass never recomputes a layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{input_channel_norm, FeatureSequence, LabelSequence};
use crate::error::{Result, TcnError};
use crate::layers::{
    channel_norm_backward, channel_norm_forward, conv_backward_with_pre, conv_preactivation,
    leaky_relu, max_pool_backward, max_pool_forward, upsample_backward, upsample_forward,
    ActivationMap, Alignment, ConvParams, PoolTrace, Side, DEFAULT_LEAKY_SLOPE,
};
use crate::tensor::Matrix;

/// Width of the map the classifier reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderOutput {
    /// The last decoder conv emits `F_0` channels, so `U` is `C x F_0`.
    InputDim,
    /// Decoder convs mirror the encoder widths and end at `F_1`; `U` is `C x F_1`.
    FirstLayer,
}

impl DecoderOutput {
    pub fn code(self) -> u64 {
        match self {
            DecoderOutput::InputDim => 0,
            DecoderOutput::FirstLayer => 1,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(DecoderOutput::InputDim),
            1 => Some(DecoderOutput::FirstLayer),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecoderOutput::InputDim => "input_dim",
            DecoderOutput::FirstLayer => "first_layer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "input_dim" => Some(DecoderOutput::InputDim),
            "first_layer" => Some(DecoderOutput::FirstLayer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub filters_per_layer: Vec<usize>,
    /// Filter duration `d` in frames.
    pub filter_duration: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub leaky_slope: f64,
    pub decoder_output: DecoderOutput,
    /// Apply per-frame channel normalization to raw input features.
    pub input_norm: bool,
    pub conv_alignment: Alignment,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            filters_per_layer: vec![32, 64, 96],
            filter_duration: 10,
            num_classes: 2,
            input_dim: 1,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            decoder_output: DecoderOutput::InputDim,
            input_norm: true,
            conv_alignment: Alignment::Forward,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TcnError::Config(m));
        if self.num_layers < 1 {
            return bad("num_layers must be >= 1".into());
        }
        if self.filters_per_layer.len() != self.num_layers {
            return bad(format!(
                "filters lists {} widths for {} layers",
                self.filters_per_layer.len(),
                self.num_layers
            ));
        }
        if self.filters_per_layer.contains(&0) {
            return bad("every filter count must be >= 1".into());
        }
        if self.filter_duration < 1 {
            return bad("filter_duration must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if self.input_dim < 1 {
            return bad("input_dim must be >= 1".into());
        }
        if !self.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite".into());
        }
        if self.num_layers >= 32 {
            return bad("num_layers too large for padding".into());
        }
        Ok(())
    }

    /// Sequence lengths must be a multiple of this before entering the network.
    pub fn length_multiple(&self) -> usize {
        1 << self.num_layers
    }

    /// `(in, out)` channel widths of every encoder conv.
    pub fn encoder_widths(&self) -> Vec<(usize, usize)> {
        let mut prev = self.input_dim;
        self.filters_per_layer
            .iter()
            .map(|&f| {
                let w = (prev, f);
                prev = f;
                w
            })
            .collect()
    }

    /// `(in, out)` channel widths of every decoder conv, deepest first.
    pub fn decoder_widths(&self) -> Vec<(usize, usize)> {
        let l = self.num_layers;
        let f = &self.filters_per_layer;
        let mut prev = f[l - 1];
        (0..l)
            .map(|j| {
                let out = match self.decoder_output {
                    DecoderOutput::InputDim if j + 1 == l => self.input_dim,
                    DecoderOutput::InputDim => f[l - 2 - j],
                    DecoderOutput::FirstLayer => f[l - 1 - j],
                };
                let w = (prev, out);
                prev = out;
                w
            })
            .collect()
    }

    pub fn classifier_input_dim(&self) -> usize {
        match self.decoder_output {
            DecoderOutput::InputDim => self.input_dim,
            DecoderOutput::FirstLayer => self.filters_per_layer[0],
        }
    }
}

/// Learnable tensors. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub encoder_convs: Vec<ConvParams>,
    pub decoder_convs: Vec<ConvParams>,
    /// `C x F_dec`.
    pub classifier_weights: Matrix,
    pub classifier_bias: Vec<f64>,
}

pub type ModelGradients = ModelParameters;

impl ModelParameters {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.filter_duration;
        let slope = config.leaky_slope;
        let align = config.conv_alignment;
        let conv = |(i, o): (usize, usize)| ConvParams::zeros(o, d, i, slope).with_alignment(align);
        Self {
            encoder_convs: config.encoder_widths().into_iter().map(conv).collect(),
            decoder_convs: config.decoder_widths().into_iter().map(conv).collect(),
            classifier_weights: Matrix::zeros(config.num_classes, config.classifier_input_dim()),
            classifier_bias: vec![0.0; config.num_classes],
        }
    }

    /// Tensor names in serialization order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (side, convs) in [("encoder", &self.encoder_convs), ("decoder", &self.decoder_convs)] {
            for i in 0..convs.len() {
                names.push(format!("{side}.{i}.weights"));
                names.push(format!("{side}.{i}.bias"));
            }
        }
        names.push("classifier.weights".into());
        names.push("classifier.bias".into());
        names
    }

    /// Flat views of every tensor, in [`tensor_names`](Self::tensor_names) order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for conv in self.encoder_convs.iter().chain(&self.decoder_convs) {
            out.push(conv.weights.as_slice());
            out.push(&conv.bias);
        }
        out.push(self.classifier_weights.as_slice());
        out.push(&self.classifier_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for conv in self.encoder_convs.iter_mut().chain(self.decoder_convs.iter_mut()) {
            out.push(conv.weights.as_mut_slice());
            out.push(&mut conv.bias);
        }
        out.push(self.classifier_weights.as_mut_slice());
        out.push(&mut self.classifier_bias);
        out
    }

    /// Shapes of every tensor, in serialization order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for conv in self.encoder_convs.iter().chain(&self.decoder_convs) {
            out.push(conv.weights.dims().to_vec());
            out.push(vec![conv.bias.len()]);
        }
        let (r, c) = self.classifier_weights.shape();
        out.push(vec![r, c]);
        out.push(vec![self.classifier_bias.len()]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParameters::zeros(config).tensor_shapes();
        let actual = self.tensor_shapes();
        if expected != actual {
            return Err(TcnError::shape(
                "parameters vs config",
                format!("{expected:?}"),
                format!("{actual:?}"),
            ));
        }
        if !self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
            return Err(TcnError::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t {
                *v *= factor;
            }
        }
    }

    /// `self += other`, elementwise. Shapes must already agree.
    pub fn add_assign(&mut self, other: &ModelParameters) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

fn fill_uniform(rng: &mut ChaCha8Rng, values: &mut [f64], fan_in: usize, fan_out: usize) {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in values {
        *v = rng.random_range(-s..=s);
    }
}

/// Uniform `[-s, s]` weights with `s = sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParameters::zeros(config);
    for conv in params.encoder_convs.iter_mut().chain(params.decoder_convs.iter_mut()) {
        let [f_out, d, f_in] = conv.weights.dims();
        fill_uniform(&mut rng, conv.weights.as_mut_slice(), d * f_in, d * f_out);
    }
    let (c, f) = params.classifier_weights.shape();
    fill_uniform(&mut rng, params.classifier_weights.as_mut_slice(), f, c);
    Ok(params)
}

/// Features right-padded with zero frames to a multiple of `2^L`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSequence {
    pub values: Matrix,
    pub mask: Vec<bool>,
    pub original_length: usize,
}

impl PaddedSequence {
    pub fn padded_length(&self) -> usize {
        self.values.cols()
    }
}

pub fn padded_length(t: usize, config: &ModelConfig) -> usize {
    let m = config.length_multiple();
    t.div_ceil(m) * m
}

/// Pads `x` (after input normalization, when enabled) for the network.
pub fn pad_sequence(x: &FeatureSequence, config: &ModelConfig) -> Result<PaddedSequence> {
    if x.is_empty() {
        return Err(TcnError::Invalid("cannot pad an empty sequence".into()));
    }
    if x.feature_dim() != config.input_dim {
        return Err(TcnError::shape("input feature dim", config.input_dim, x.feature_dim()));
    }
    let normed;
    let values = if config.input_norm {
        normed = input_channel_norm(x);
        &normed.values
    } else {
        &x.values
    };
    Ok(pad_matrix(values, config))
}

/// Zero-pads a raw `F_0 x T` matrix, no normalization.
pub fn pad_matrix(values: &Matrix, config: &ModelConfig) -> PaddedSequence {
    let t = values.cols();
    let t_pad = padded_length(t, config);
    let padded = Matrix::from_fn(values.rows(), t_pad, |r, c| if c < t { values.get(r, c) } else { 0.0 });
    PaddedSequence {
        values: padded,
        mask: (0..t_pad).map(|c| c < t).collect(),
        original_length: t,
    }
}

/// Per-frame class probabilities, `C x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilitySequence {
    pub probs: Matrix,
}

impl ProbabilitySequence {
    pub fn num_classes(&self) -> usize {
        self.probs.rows()
    }

    pub fn len(&self) -> usize {
        self.probs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.cols() == 0
    }

    pub fn truncate(&self, len: usize) -> ProbabilitySequence {
        ProbabilitySequence {
            probs: self.probs.truncate_cols(len),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderRecord {
    pub pre: Matrix,
    pub pooled: Matrix,
    pub trace: PoolTrace,
    pub norm_max: Vec<f64>,
    pub norm_argmax: Vec<usize>,
    pub output: ActivationMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderRecord {
    pub upsampled: Matrix,
    pub pre: Matrix,
    pub activated: Matrix,
    pub norm_max: Vec<f64>,
    pub norm_argmax: Vec<usize>,
    pub output: ActivationMap,
}

/// Everything the reverse pass reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub input: ActivationMap,
    pub encoder: Vec<EncoderRecord>,
    pub decoder: Vec<DecoderRecord>,
    pub logits: Matrix,
}

impl Tape {
    /// Discrete choices made during the forward pass: activation signs,
    /// pooling winners, normalization argmaxes and clamp states. Two forward
    /// passes with equal signatures share one linear piece of the network.
    pub fn signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        let push_norm = |max: &[f64], arg: &[usize], sig: &mut Vec<u8>| {
            for (&m, &a) in max.iter().zip(arg) {
                sig.push(u8::from(m >= 0.0));
                sig.extend_from_slice(&(a as u32).to_le_bytes());
            }
        };
        for e in &self.encoder {
            sig.extend(e.pre.as_slice().iter().map(|&z| u8::from(z >= 0.0)));
            sig.extend_from_slice(e.trace.as_slice());
            push_norm(&e.norm_max, &e.norm_argmax, &mut sig);
        }
        for d in &self.decoder {
            sig.extend(d.pre.as_slice().iter().map(|&z| u8::from(z >= 0.0)));
            push_norm(&d.norm_max, &d.norm_argmax, &mut sig);
        }
        sig
    }
}

/// Column-wise softmax with max subtraction.
pub fn softmax_columns(logits: &Matrix) -> Matrix {
    let (c, t) = logits.shape();
    let mut out = Matrix::zeros(c, t);
    for col in 0..t {
        let m = (0..c).map(|r| logits.get(r, col)).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in 0..c {
            let e = (logits.get(r, col) - m).exp();
            out.set(r, col, e);
            z += e;
        }
        for r in 0..c {
            out.set(r, col, out.get(r, col) / z);
        }
    }
    out
}

/// Forward pass over a padded sequence.
pub fn forward(
    params: &ModelParameters,
    padded: &PaddedSequence,
    config: &ModelConfig,
) -> Result<(ProbabilitySequence, Tape)> {
    config.validate()?;
    params.check_compatible(config)?;
    let x = &padded.values;
    if x.rows() != config.input_dim {
        return Err(TcnError::shape("network input channels", config.input_dim, x.rows()));
    }
    if x.cols() == 0 || !x.cols().is_multiple_of(config.length_multiple()) {
        return Err(TcnError::shape(
            "network input length",
            format!("positive multiple of {}", config.length_multiple()),
            x.cols(),
        ));
    }

    let mut encoder = Vec::with_capacity(config.num_layers);
    let mut current = x.clone();
    for (l, conv) in params.encoder_convs.iter().enumerate() {
        let pre = conv_preactivation(&current, conv)?;
        let mut activated = pre.clone();
        for v in activated.as_mut_slice() {
            *v = leaky_relu(*v, conv.leaky_slope);
        }
        let (pooled, trace) = max_pool_forward(&activated)?;
        let norm = channel_norm_forward(&pooled)?;
        current = norm.output.clone();
        encoder.push(EncoderRecord {
            pre,
            pooled,
            trace,
            norm_max: norm.saved_max,
            norm_argmax: norm.saved_argmax,
            output: ActivationMap::new(norm.output, l + 1, Side::Encoder),
        });
    }

    let mut decoder = Vec::with_capacity(config.num_layers);
    for (j, conv) in params.decoder_convs.iter().enumerate() {
        let upsampled = upsample_forward(&current);
        let pre = conv_preactivation(&upsampled, conv)?;
        let mut activated = pre.clone();
        for v in activated.as_mut_slice() {
            *v = leaky_relu(*v, conv.leaky_slope);
        }
        let norm = channel_norm_forward(&activated)?;
        current = norm.output.clone();
        decoder.push(DecoderRecord {
            upsampled,
            pre,
            activated,
            norm_max: norm.saved_max,
            norm_argmax: norm.saved_argmax,
            output: ActivationMap::new(norm.output, config.num_layers - j, Side::Decoder),
        });
    }

    let u = &params.classifier_weights;
    let (n_classes, f_dec) = u.shape();
    let t_len = current.cols();
    let mut logits = Matrix::zeros(n_classes, t_len);
    for c in 0..n_classes {
        let row = logits.row_mut(c);
        row.fill(params.classifier_bias[c]);
        for f in 0..f_dec {
            let w = u.get(c, f);
            for (o, v) in row.iter_mut().zip(current.row(f)) {
                *o += w * v;
            }
        }
    }
    let probs = softmax_columns(&logits);
    Ok((
        ProbabilitySequence { probs },
        Tape {
            input: ActivationMap::new(x.clone(), 0, Side::Input),
            encoder,
            decoder,
            logits,
        },
    ))
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// gradient with respect to the classifier logits.
pub fn backward(params: &ModelParameters, tape: &Tape, grad_logits: &Matrix) -> Result<ModelGradients> {
    let l = params.encoder_convs.len();
    if tape.encoder.len() != l || tape.decoder.len() != params.decoder_convs.len() {
        return Err(TcnError::shape(
            "tape layers",
            l,
            format!("{}/{}", tape.encoder.len(), tape.decoder.len()),
        ));
    }
    if grad_logits.shape() != tape.logits.shape() {
        return Err(TcnError::shape("grad_logits", &tape.logits, grad_logits));
    }
    let dec_out = &tape
        .decoder
        .last()
        .ok_or_else(|| TcnError::Invalid("tape without decoder layers".into()))?
        .output
        .values;
    let u = &params.classifier_weights;
    if u.shape() != (grad_logits.rows(), dec_out.rows()) {
        return Err(TcnError::shape(
            "classifier weights vs tape",
            format!("{}x{}", grad_logits.rows(), dec_out.rows()),
            u,
        ));
    }

    let (n_classes, f_dec) = u.shape();
    let t_len = grad_logits.cols();
    let mut grad_u = Matrix::zeros(n_classes, f_dec);
    let mut grad_c = vec![0.0; n_classes];
    let mut grad = Matrix::zeros(f_dec, t_len);
    for c in 0..n_classes {
        let g = grad_logits.row(c);
        grad_c[c] = g.iter().sum();
        for f in 0..f_dec {
            let x = dec_out.row(f);
            grad_u.set(c, f, g.iter().zip(x).map(|(a, b)| a * b).sum());
            let w = u.get(c, f);
            for (o, gv) in grad.row_mut(f).iter_mut().zip(g) {
                *o += w * gv;
            }
        }
    }

    let mut decoder_grads = vec![None; params.decoder_convs.len()];
    for (j, (rec, conv)) in tape.decoder.iter().zip(&params.decoder_convs).enumerate().rev() {
        let g_act = channel_norm_backward(&rec.activated, &rec.norm_max, &rec.norm_argmax, &grad)?;
        let cg = conv_backward_with_pre(&rec.upsampled, &rec.pre, conv, &g_act)?;
        grad = upsample_backward(&cg.input)?;
        decoder_grads[j] = Some(ConvParams {
            weights: cg.weights,
            bias: cg.bias,
            leaky_slope: conv.leaky_slope,
            alignment: conv.alignment,
        });
    }

    let mut encoder_grads = vec![None; l];
    for (i, (rec, conv)) in tape.encoder.iter().zip(&params.encoder_convs).enumerate().rev() {
        let g_pooled = channel_norm_backward(&rec.pooled, &rec.norm_max, &rec.norm_argmax, &grad)?;
        let g_act = max_pool_backward(&rec.trace, &g_pooled)?;
        let input = if i == 0 {
            &tape.input.values
        } else {
            &tape.encoder[i - 1].output.values
        };
        let cg = conv_backward_with_pre(input, &rec.pre, conv, &g_act)?;
        grad = cg.input;
        encoder_grads[i] = Some(ConvParams {
            weights: cg.weights,
            bias: cg.bias,
            leaky_slope: conv.leaky_slope,
            alignment: conv.alignment,
        });
    }

    Ok(ModelParameters {
        encoder_convs: encoder_grads.into_iter().flatten().collect(),
        decoder_convs: decoder_grads.into_iter().flatten().collect(),
        classifier_weights: grad_u,
        classifier_bias: grad_c,
    })
}

/// Per-frame argmax (lowest class id on ties), 1-based, cut to `original_length`.
pub fn predict_labels(probs: &ProbabilitySequence, original_length: usize) -> LabelSequence {
    let p = &probs.probs;
    let t_len = original_length.min(p.cols());
    let labels = (0..t_len)
        .map(|t| {
            let mut best = 0;
            for c in 1..p.rows() {
                if p.get(c, t) > p.get(best, t) {
                    best = c;
                }
            }
            best + 1
        })
        .collect();
    LabelSequence::new(labels)
}

/// A configuration paired with parameters that fit it.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnModel {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl TcnModel {
    pub fn new(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        params.check_compatible(&config)?;
        Ok(Self { config, params })
    }

    /// Probabilities for the real frames of `x` (padding removed).
    pub fn predict_proba(&self, x: &FeatureSequence) -> Result<ProbabilitySequence> {
        let padded = pad_sequence(x, &self.config)?;
        let (probs, _) = forward(&self.params, &padded, &self.config)?;
        Ok(probs.truncate(padded.original_length))
    }

    pub fn predict(&self, x: &FeatureSequence) -> Result<(ProbabilitySequence, LabelSequence)> {
        let probs = self.predict_proba(x)?;
        let labels = predict_labels(&probs, probs.len());
        Ok((probs, labels))
    }
}

/// Shape helper for tests and diagnostics: temporal lengths after every stage.
pub fn stage_lengths(tape: &Tape) -> (Vec<usize>, Vec<usize>) {
    (
        tape.encoder.iter().map(|e| e.output.len()).collect(),
        tape.decoder.iter().map(|d| d.output.len()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            filters_per_layer: vec![3, 4],
            filter_duration: 2,
            num_classes: 3,
            input_dim: 2,
            leaky_slope: 0.01,
            decoder_output: DecoderOutput::InputDim,
            input_norm: false,
            conv_alignment: Alignment::Forward,
        }
    }

    fn features(rows: usize, t: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence::new(Matrix::from_fn(rows, t, |_, _| rng.random_range(0.0..1.0)), 1.0, "s").unwrap()
    }

    #[test]
    fn default_config_matches_reported_architecture() {
        let c = ModelConfig::default();
        assert_eq!(c.num_layers, 3);
        assert_eq!(c.filters_per_layer, vec![32, 64, 96]);
        let c = ModelConfig {
            input_dim: 8,
            filter_duration: 5,
            ..ModelConfig::default()
        };
        assert_eq!(c.decoder_widths(), vec![(96, 64), (64, 32), (32, 8)]);
        let p = init_parameters(&c, 0).unwrap();
        assert_eq!(p.encoder_convs[0].weights.dims(), [32, 5, 8]);
        assert_eq!(p.classifier_weights.shape(), (2, 8));

        let alt = ModelConfig {
            decoder_output: DecoderOutput::FirstLayer,
            ..c
        };
        assert_eq!(alt.decoder_widths(), vec![(96, 96), (96, 64), (64, 32)]);
        assert_eq!(alt.classifier_input_dim(), 32);
    }

    #[test]
    fn init_is_seeded() {
        let c = small_config();
        let a = init_parameters(&c, 7).unwrap();
        assert_eq!(a, init_parameters(&c, 7).unwrap());
        assert_ne!(a, init_parameters(&c, 8).unwrap());
        assert!(a.encoder_convs.iter().all(|p| p.bias.iter().all(|&b| b == 0.0)));
        let s = (6.0f64 / (2.0 * 2.0 + 2.0 * 3.0)).sqrt();
        assert!(a.encoder_convs[0].weights.as_slice().iter().all(|w| w.abs() <= s));
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.filters_per_layer = vec![3];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.filter_duration = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn padding_lengths() {
        let c = ModelConfig {
            input_dim: 2,
            input_norm: false,
            ..ModelConfig::default()
        };
        let p = pad_sequence(&features(2, 16, 0), &c).unwrap();
        assert_eq!(p.padded_length(), 16);
        assert!(p.mask.iter().all(|&m| m));
        let p = pad_sequence(&features(2, 17, 0), &c).unwrap();
        assert_eq!(p.padded_length(), 24);
        assert_eq!(p.mask.iter().filter(|&&m| !m).count(), 7);
        assert!(p.mask[..17].iter().all(|&m| m));
        assert!((0..2).all(|r| (17..24).all(|t| p.values.get(r, t) == 0.0)));
        assert_eq!(pad_sequence(&features(2, 1, 0), &c).unwrap().padded_length(), 8);
        assert!(pad_sequence(&features(3, 4, 0), &c).is_err());
    }

    #[test]
    fn stage_lengths_halve_then_double() {
        let c = ModelConfig {
            input_dim: 2,
            num_classes: 3,
            filter_duration: 3,
            input_norm: false,
            ..ModelConfig::default()
        };
        let params = init_parameters(&c, 1).unwrap();
        let padded = pad_sequence(&features(2, 20, 1), &c).unwrap();
        assert_eq!(padded.padded_length(), 24);
        let (probs, tape) = forward(&params, &padded, &c).unwrap();
        assert_eq!(stage_lengths(&tape), (vec![12, 6, 3], vec![6, 12, 24]));
        assert_eq!(probs.len(), 24);
        for t in 0..24 {
            let s: f64 = probs.probs.column(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_parameters_give_uniform_probabilities() {
        let c = small_config();
        let params = ModelParameters::zeros(&c);
        let padded = pad_sequence(&features(2, 8, 2), &c).unwrap();
        let (probs, _) = forward(&params, &padded, &c).unwrap();
        assert!(probs.probs.as_slice().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(predict_labels(&probs, 8).labels, vec![1; 8]);
    }

    #[test]
    fn forward_rejects_mismatch() {
        let c = small_config();
        let mut other = c.clone();
        other.filter_duration = 3;
        let params = init_parameters(&other, 0).unwrap();
        let padded = pad_sequence(&features(2, 8, 2), &c).unwrap();
        assert!(forward(&params, &padded, &c).is_err());
        let bad = pad_matrix(&Matrix::zeros(2, 6), &small_config());
        let mut unpadded = bad.clone();
        unpadded.values = Matrix::zeros(2, 6);
        assert!(forward(&init_parameters(&c, 0).unwrap(), &unpadded, &c).is_err());
    }

    #[test]
    fn backward_zero_grad_is_zero() {
        let c = small_config();
        let params = init_parameters(&c, 3).unwrap();
        let padded = pad_sequence(&features(2, 8, 3), &c).unwrap();
        let (_, tape) = forward(&params, &padded, &c).unwrap();
        let g = backward(&params, &tape, &Matrix::zeros(3, 8)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(backward(&params, &tape, &Matrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn single_layer_hand_chain_rule() {
        // L=1, F=[1], d=1, F_0=1, C=2, T=2. Input [a, b] with a > b > 0.
        // enc: z = w x, pool -> w a, norm -> w a / (w a + eps) =: e (w > 0)
        // dec: upsample [e, e], z2 = v e, norm -> v e / (v e + eps) =: q at both frames
        // logits: [u0 q + c0, u1 q + c1]
        let c = ModelConfig {
            num_layers: 1,
            filters_per_layer: vec![1],
            filter_duration: 1,
            num_classes: 2,
            input_dim: 1,
            leaky_slope: 0.01,
            decoder_output: DecoderOutput::InputDim,
            input_norm: false,
            conv_alignment: Alignment::Forward,
        };
        let mut params = ModelParameters::zeros(&c);
        let (w, v) = (0.8, 1.5);
        params.encoder_convs[0].weights.set(0, 0, 0, w);
        params.decoder_convs[0].weights.set(0, 0, 0, v);
        params.classifier_weights = Matrix::from_rows(&[vec![2.0], vec![-1.0]]);
        let (a, b) = (0.6, 0.2);
        let padded = pad_matrix(&Matrix::from_rows(&[vec![a, b]]), &c);
        let (_, tape) = forward(&params, &padded, &c).unwrap();
        let eps = crate::layers::NORM_EPSILON;
        let e = w * a / (w * a + eps);
        let q = v * e / (v * e + eps);
        assert!((tape.decoder[0].output.values.get(0, 0) - q).abs() < 1e-15);

        let g = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.25, 2.0]]);
        let grads = backward(&params, &tape, &g).unwrap();
        // dL/dq summed over frames: sum_t sum_c g[c,t] U[c]
        let dq: f64 = (0..2).map(|t| 2.0 * g.get(0, t) - 1.0 * g.get(1, t)).sum();
        let dq_dv = e * eps / ((v * e + eps) * (v * e + eps));
        let dq_de = v * eps / ((v * e + eps) * (v * e + eps));
        let de_dw = a * eps / ((w * a + eps) * (w * a + eps));
        assert!((grads.classifier_bias[0] - 1.5).abs() < 1e-15);
        assert!((grads.classifier_weights.get(1, 0) - q * 1.75).abs() < 1e-12);
        assert!((grads.decoder_convs[0].weights.get(0, 0, 0) - dq * dq_dv).abs() < 1e-12);
        let expected_w = dq * dq_de * de_dw;
        let got_w = grads.encoder_convs[0].weights.get(0, 0, 0);
        assert!((got_w - expected_w).abs() <= 1e-9 * expected_w.abs().max(1.0), "{got_w} vs {expected_w}");
    }

    #[test]
    fn predict_labels_rules() {
        let probs = ProbabilitySequence {
            probs: Matrix::from_rows(&[vec![0.0, 1.0, 0.5, 0.2], vec![1.0, 0.0, 0.5, 0.3], vec![0.0, 0.0, 0.0, 0.5]]),
        };
        assert_eq!(predict_labels(&probs, 4).labels, vec![2, 1, 1, 3]);
        assert_eq!(predict_labels(&probs, 2).labels, vec![2, 1]);
    }

    #[test]
    fn logit_shift_keeps_predictions() {
        let c = small_config();
        let mut params = init_parameters(&c, 9).unwrap();
        let padded = pad_sequence(&features(2, 13, 9), &c).unwrap();
        let (p1, _) = forward(&params, &padded, &c).unwrap();
        for b in &mut params.classifier_bias {
            *b += 3.25;
        }
        let (p2, _) = forward(&params, &padded, &c).unwrap();
        assert_eq!(predict_labels(&p1, 13), predict_labels(&p2, 13));
    }

    #[test]
    fn model_predict_strips_padding() {
        let c = ModelConfig {
            input_norm: true,
            ..small_config()
        };
        let m = TcnModel::new(c.clone(), init_parameters(&c, 4).unwrap()).unwrap();
        let (probs, labels) = m.predict(&features(2, 11, 4)).unwrap();
        assert_eq!(probs.len(), 11);
        assert_eq!(labels.len(), 11);
    }
}
