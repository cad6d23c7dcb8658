//! Binary model files.
//!
//! All integers are little-endian `u64`, all reals little-endian IEEE-754
//! `f64`:
//!
//! ```text
//! offset  field
//! 0       magic "TCNSEG01" (8 bytes)
//! 8       num_layers L
//!         filters_per_layer[0..L]
//!         filter_duration d
//!         num_classes C
//!         input_dim F_0
//!         decoder_output (0 = input_dim, 1 = first_layer)
//!         input_norm (0 or 1)
//!         conv_alignment (0 = forward, 1 = centered)
//!         leaky_slope (f64)
//!         tensor_count N (= 4L + 2)
//! then N times:
//!         rank r
//!         dims[0..r]
//!         prod(dims) f64 values, row-major
//! ```
//!
//! Tensor order: encoder layer 0 weights (`F_1 x d x F_0`), its bias, ...,
//! decoder layer 0 (deepest) weights and bias, ..., classifier weights
//! (`C x F_dec`), classifier bias.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TcnError};
use crate::layers::Alignment;
use crate::network::{DecoderOutput, ModelConfig, ModelParameters, TcnModel};

pub const MAGIC: &[u8; 8] = b"TCNSEG01";

pub fn encode_model(model: &TcnModel) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let put = |v: u64, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
    put(c.num_layers as u64, &mut out);
    for &f in &c.filters_per_layer {
        put(f as u64, &mut out);
    }
    put(c.filter_duration as u64, &mut out);
    put(c.num_classes as u64, &mut out);
    put(c.input_dim as u64, &mut out);
    put(c.decoder_output.code(), &mut out);
    put(u64::from(c.input_norm), &mut out);
    put(c.conv_alignment.code(), &mut out);
    out.extend_from_slice(&c.leaky_slope.to_le_bytes());

    let shapes = model.params.tensor_shapes();
    let tensors = model.params.tensors();
    put(tensors.len() as u64, &mut out);
    for (shape, data) in shapes.iter().zip(tensors) {
        put(shape.len() as u64, &mut out);
        for &d in shape {
            put(d as u64, &mut out);
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TcnError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v < (1 << 40))
            .ok_or_else(|| TcnError::Format(format!("implausible {what}: {v}")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<TcnModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(TcnError::Format("bad magic, not a TCNSEG01 file".into()));
    }
    let num_layers = r.usize("num_layers")?;
    if num_layers == 0 || num_layers >= 32 {
        return Err(TcnError::Format(format!("implausible num_layers: {num_layers}")));
    }
    let filters_per_layer = (0..num_layers)
        .map(|_| r.usize("filter count"))
        .collect::<Result<Vec<_>>>()?;
    let filter_duration = r.usize("filter_duration")?;
    let num_classes = r.usize("num_classes")?;
    let input_dim = r.usize("input_dim")?;
    let code = r.u64()?;
    let decoder_output = DecoderOutput::from_code(code)
        .ok_or_else(|| TcnError::Format(format!("unknown decoder_output code {code}")))?;
    let input_norm = match r.u64()? {
        0 => false,
        1 => true,
        v => return Err(TcnError::Format(format!("input_norm flag {v}"))),
    };
    let code = r.u64()?;
    let conv_alignment = Alignment::from_code(code)
        .ok_or_else(|| TcnError::Format(format!("unknown conv_alignment code {code}")))?;
    let leaky_slope = r.f64()?;
    let config = ModelConfig {
        num_layers,
        filters_per_layer,
        filter_duration,
        num_classes,
        input_dim,
        leaky_slope,
        decoder_output,
        input_norm,
        conv_alignment,
    };
    config.validate().map_err(|e| TcnError::Format(e.to_string()))?;

    let mut params = ModelParameters::zeros(&config);
    let shapes = params.tensor_shapes();
    let names = params.tensor_names();
    let count = r.usize("tensor count")?;
    if count != shapes.len() {
        return Err(TcnError::Format(format!(
            "expected {} tensors, found {count}",
            shapes.len()
        )));
    }
    for ((tensor, shape), name) in params.tensors_mut().into_iter().zip(&shapes).zip(&names) {
        let rank = r.usize("rank")?;
        let dims = (0..rank).map(|_| r.usize("dim")).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(TcnError::Format(format!(
                "tensor {name}: expected shape {shape:?}, found {dims:?}"
            )));
        }
        for v in tensor.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(TcnError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    TcnModel::new(config, params).map_err(|e| TcnError::Format(e.to_string()))
}

/// Writes through a temporary sibling then renames, so a failed write never
/// leaves a partial model at `path`.
pub fn save_model(model: &TcnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp-write");
    let bytes = encode_model(model);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(TcnError::io(path, e));
    }
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TcnModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TcnError::io(path, e))?;
    decode_model(&bytes)
}
