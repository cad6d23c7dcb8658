//! Primitive TCN layers with hand-written backward passes.
//!
//! Every activation is a [`Matrix`] with one row per channel and one column
//! per time step. Forward functions are pure; the values they save are
//! exactly what the matching backward function needs.

use crate::error::{Result, TcnError};
use crate::tensor::{Matrix, Tensor3};

/// Stabilizer added to the per-frame maximum in channel normalization.
pub const NORM_EPSILON: f64 = 1e-5;

/// Default negative slope of the Leaky ReLU.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Input,
    Encoder,
    Decoder,
}

/// Layer activations tagged with where in the network they were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub values: Matrix,
    pub layer_index: usize,
    pub side: Side,
}

impl ActivationMap {
    pub fn new(values: Matrix, layer_index: usize, side: Side) -> Self {
        Self {
            values,
            layer_index,
            side,
        }
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }
}

/// Which input columns feed output column `t`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Alignment {
    /// Columns `t..t+d`, the filter sum's index algebra taken literally.
    #[default]
    Forward,
    /// Columns `t-(d-1)/2 ..= t+d/2`.
    Centered,
}

impl Alignment {
    /// Columns of left context for a filter of duration `d`.
    pub fn left_context(self, d: usize) -> usize {
        match self {
            Alignment::Forward => 0,
            Alignment::Centered => (d - 1) / 2,
        }
    }

    pub fn code(self) -> u64 {
        match self {
            Alignment::Forward => 0,
            Alignment::Centered => 1,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(Alignment::Forward),
            1 => Some(Alignment::Centered),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Alignment::Forward => "forward",
            Alignment::Centered => "centered",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forward" => Some(Alignment::Forward),
            "centered" => Some(Alignment::Centered),
            _ => None,
        }
    }
}

/// Weights `F_out x d x F_in`, biases of length `F_out` and the activation slope.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Tensor3,
    pub bias: Vec<f64>,
    pub leaky_slope: f64,
    pub alignment: Alignment,
}

impl ConvParams {
    pub fn new(weights: Tensor3, bias: Vec<f64>, leaky_slope: f64) -> Result<Self> {
        let p = Self {
            weights,
            bias,
            leaky_slope,
            alignment: Alignment::Forward,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(out_channels: usize, duration: usize, in_channels: usize, leaky_slope: f64) -> Self {
        Self {
            weights: Tensor3::zeros(out_channels, duration, in_channels),
            bias: vec![0.0; out_channels],
            leaky_slope,
            alignment: Alignment::Forward,
        }
    }

    pub fn with_alignment(mut self, alignment: Alignment) -> Self {
        self.alignment = alignment;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn duration(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let [f_out, d, f_in] = self.weights.dims();
        if f_out == 0 || d == 0 || f_in == 0 {
            return Err(TcnError::Config(format!(
                "convolution dims must be positive, got {}",
                self.weights
            )));
        }
        if self.bias.len() != f_out {
            return Err(TcnError::shape("conv bias", f_out, self.bias.len()));
        }
        if !self.weights.as_slice().iter().chain(&self.bias).all(|v| v.is_finite())
            || !self.leaky_slope.is_finite()
        {
            return Err(TcnError::Invalid("non-finite convolution parameter".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Matrix,
    pub weights: Tensor3,
    pub bias: Vec<f64>,
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Output and input column ranges touched by one filter tap reading
/// `input[t + shift]`, or `None` when the tap never overlaps the sequence.
#[inline]
fn tap_ranges(shift: isize, t_len: usize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let a = shift.unsigned_abs();
    if a >= t_len {
        return None;
    }
    if shift >= 0 {
        Some((0..t_len - a, a..t_len))
    } else {
        Some((a..t_len, 0..t_len - a))
    }
}

#[inline]
fn tap_shift(params: &ConvParams, k: usize) -> isize {
    let d = params.duration();
    (d - 1 - k) as isize - params.alignment.left_context(d) as isize
}

fn check_conv_input(input: &Matrix, params: &ConvParams) -> Result<()> {
    if input.rows() != params.in_channels() {
        return Err(TcnError::shape(
            "conv input channels",
            params.in_channels(),
            input.rows(),
        ));
    }
    Ok(())
}

/// Pre-activation `b_i + sum_k <W[i,k,:], x[:, t + d-1-k - left]>` where
/// `left` is the alignment's left context. Columns outside the input read
/// as zero.
pub fn conv_preactivation(input: &Matrix, params: &ConvParams) -> Result<Matrix> {
    check_conv_input(input, params)?;
    let [f_out, d, f_in] = params.weights.dims();
    let t_len = input.cols();
    let w = params.weights.as_slice();
    let mut out = Matrix::zeros(f_out, t_len);
    for i in 0..f_out {
        let row = out.row_mut(i);
        row.fill(params.bias[i]);
        for k in 0..d {
            let Some((out_r, in_r)) = tap_ranges(tap_shift(params, k), t_len) else {
                continue;
            };
            for c in 0..f_in {
                let wv = w[(i * d + k) * f_in + c];
                if wv == 0.0 {
                    continue;
                }
                let src = &input.row(c)[in_r.clone()];
                for (o, x) in row[out_r.clone()].iter_mut().zip(src) {
                    *o += wv * x;
                }
            }
        }
    }
    Ok(out)
}

/// Temporal convolution followed by Leaky ReLU. Output length equals input length.
pub fn conv_forward(input: &Matrix, params: &ConvParams) -> Result<Matrix> {
    let mut out = conv_preactivation(input, params)?;
    let slope = params.leaky_slope;
    for v in out.as_mut_slice() {
        *v = leaky_relu(*v, slope);
    }
    Ok(out)
}

pub fn conv_backward(input: &Matrix, params: &ConvParams, grad_out: &Matrix) -> Result<ConvGrads> {
    let pre = conv_preactivation(input, params)?;
    conv_backward_with_pre(input, &pre, params, grad_out)
}

/// Backward pass reusing a saved pre-activation from [`conv_preactivation`].
pub fn conv_backward_with_pre(
    input: &Matrix,
    pre: &Matrix,
    params: &ConvParams,
    grad_out: &Matrix,
) -> Result<ConvGrads> {
    check_conv_input(input, params)?;
    let [f_out, d, f_in] = params.weights.dims();
    let t_len = input.cols();
    if grad_out.shape() != (f_out, t_len) {
        return Err(TcnError::shape(
            "conv grad_out",
            format!("{f_out}x{t_len}"),
            grad_out,
        ));
    }
    if pre.shape() != grad_out.shape() {
        return Err(TcnError::shape("conv pre-activation", grad_out, pre));
    }

    let slope = params.leaky_slope;
    let mut gz = grad_out.clone();
    for (g, z) in gz.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *g *= leaky_relu_grad(*z, slope);
    }

    let w = params.weights.as_slice();
    let mut grad_w = Tensor3::zeros(f_out, d, f_in);
    let mut grad_in = Matrix::zeros(f_in, t_len);
    let mut grad_b = vec![0.0; f_out];
    {
        let gw = grad_w.as_mut_slice();
        for i in 0..f_out {
            let g_row = gz.row(i);
            grad_b[i] = g_row.iter().sum();
            for k in 0..d {
                let Some((out_r, in_r)) = tap_ranges(tap_shift(params, k), t_len) else {
                    continue;
                };
                let g = &g_row[out_r];
                for c in 0..f_in {
                    let idx = (i * d + k) * f_in + c;
                    let x = &input.row(c)[in_r.clone()];
                    gw[idx] = g.iter().zip(x).map(|(a, b)| a * b).sum();
                    let wv = w[idx];
                    if wv != 0.0 {
                        let dst = &mut grad_in.row_mut(c)[in_r.clone()];
                        for (o, gv) in dst.iter_mut().zip(g) {
                            *o += wv * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: grad_b,
    })
}

/// Output of [`channel_norm_forward`] plus what its backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct NormOutput {
    pub output: Matrix,
    /// Raw per-column maximum, before clamping at zero.
    pub saved_max: Vec<f64>,
    /// Channel holding the maximum, lowest index on ties.
    pub saved_argmax: Vec<usize>,
}

/// Column-wise maximum and its lowest-index argmax.
pub fn column_max(input: &Matrix) -> (Vec<f64>, Vec<usize>) {
    let (rows, cols) = input.shape();
    let mut max = vec![f64::NEG_INFINITY; cols];
    let mut arg = vec![0usize; cols];
    for r in 0..rows {
        for (t, &v) in input.row(r).iter().enumerate() {
            if v > max[t] {
                max[t] = v;
                arg[t] = r;
            }
        }
    }
    (max, arg)
}

#[inline]
pub fn norm_denominator(max: f64) -> f64 {
    max.max(0.0) + NORM_EPSILON
}

/// Divides each column by `max(m_t, 0) + eps` where `m_t` is its largest entry.
pub fn channel_norm_forward(input: &Matrix) -> Result<NormOutput> {
    if input.rows() == 0 {
        return Err(TcnError::Invalid("channel norm on zero channels".into()));
    }
    let (saved_max, saved_argmax) = column_max(input);
    let denom: Vec<f64> = saved_max.iter().map(|&m| norm_denominator(m)).collect();
    let mut output = input.clone();
    for r in 0..output.rows() {
        for (v, s) in output.row_mut(r).iter_mut().zip(&denom) {
            *v /= s;
        }
    }
    Ok(NormOutput {
        output,
        saved_max,
        saved_argmax,
    })
}

/// Gradient of channel normalization. The max is differentiated as a
/// subgradient routed to `saved_argmax`; with a negative maximum the
/// denominator is the constant `eps`.
pub fn channel_norm_backward(
    input: &Matrix,
    saved_max: &[f64],
    saved_argmax: &[usize],
    grad_out: &Matrix,
) -> Result<Matrix> {
    let (rows, cols) = input.shape();
    if grad_out.shape() != input.shape() {
        return Err(TcnError::shape("channel norm grad_out", input, grad_out));
    }
    if saved_max.len() != cols || saved_argmax.len() != cols {
        return Err(TcnError::shape(
            "channel norm saved state",
            cols,
            format!("{}/{}", saved_max.len(), saved_argmax.len()),
        ));
    }
    if let Some(&bad) = saved_argmax.iter().find(|&&a| a >= rows) {
        return Err(TcnError::shape("channel norm argmax", rows, bad));
    }

    // dot_t = sum_j g_jt * x_jt
    let mut dot = vec![0.0; cols];
    for r in 0..rows {
        for ((acc, g), x) in dot.iter_mut().zip(grad_out.row(r)).zip(input.row(r)) {
            *acc += g * x;
        }
    }
    let mut grad_in = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let g_row = grad_out.row(r);
        for (t, dst) in grad_in.row_mut(r).iter_mut().enumerate() {
            let s = norm_denominator(saved_max[t]);
            *dst = g_row[t] / s;
        }
    }
    for t in 0..cols {
        if saved_max[t] >= 0.0 {
            let s = norm_denominator(saved_max[t]);
            let a = saved_argmax[t];
            let v = grad_in.get(a, t) - dot[t] / (s * s);
            grad_in.set(a, t, v);
        }
    }
    Ok(grad_in)
}

/// Which of the two pooled columns won, per output entry (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolTrace {
    channels: usize,
    len: usize,
    argmax: Vec<u8>,
}

impl PoolTrace {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, channel: usize, t: usize) -> u8 {
        self.argmax[channel * self.len + t]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.argmax
    }
}

/// Width-2, stride-2 max pooling over time. Ties go to the earlier column.
pub fn max_pool_forward(input: &Matrix) -> Result<(Matrix, PoolTrace)> {
    let (rows, cols) = input.shape();
    if cols % 2 != 0 {
        return Err(TcnError::shape("max pool length (must be even)", "even", cols));
    }
    let half = cols / 2;
    let mut out = Matrix::zeros(rows, half);
    let mut argmax = vec![0u8; rows * half];
    for r in 0..rows {
        let src = input.row(r);
        let dst = out.row_mut(r);
        for t in 0..half {
            let (a, b) = (src[2 * t], src[2 * t + 1]);
            if b > a {
                dst[t] = b;
                argmax[r * half + t] = 1;
            } else {
                dst[t] = a;
            }
        }
    }
    Ok((
        out,
        PoolTrace {
            channels: rows,
            len: half,
            argmax,
        },
    ))
}

pub fn max_pool_backward(trace: &PoolTrace, grad_out: &Matrix) -> Result<Matrix> {
    if grad_out.shape() != (trace.channels, trace.len) {
        return Err(TcnError::shape(
            "max pool grad_out",
            format!("{}x{}", trace.channels, trace.len),
            grad_out,
        ));
    }
    let mut grad_in = Matrix::zeros(trace.channels, trace.len * 2);
    for r in 0..trace.channels {
        let g = grad_out.row(r);
        let dst = grad_in.row_mut(r);
        for t in 0..trace.len {
            dst[2 * t + trace.argmax[r * trace.len + t] as usize] = g[t];
        }
    }
    Ok(grad_in)
}

/// Repeats every column twice.
pub fn upsample_forward(input: &Matrix) -> Matrix {
    let (rows, cols) = input.shape();
    let mut out = Matrix::zeros(rows, cols * 2);
    for r in 0..rows {
        let src = input.row(r);
        let dst = out.row_mut(r);
        for (t, &v) in src.iter().enumerate() {
            dst[2 * t] = v;
            dst[2 * t + 1] = v;
        }
    }
    out
}

pub fn upsample_backward(grad_out: &Matrix) -> Result<Matrix> {
    let (rows, cols) = grad_out.shape();
    if cols % 2 != 0 {
        return Err(TcnError::shape("upsample grad_out length (must be even)", "even", cols));
    }
    Ok(Matrix::from_fn(rows, cols / 2, |r, t| {
        grad_out.get(r, 2 * t) + grad_out.get(r, 2 * t + 1)
    }))
}
