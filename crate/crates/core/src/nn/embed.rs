use crate::error::{Error, Result};

/// Factor applied to `t in [0, 1]` before encoding, matching the integer
/// step range sinusoidal encodings are usually tuned for.
pub const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal encoding of `t`: `dim/2` sines followed by `dim/2` cosines at
/// frequencies `10000^(-i / (dim/2))`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let arg = t * TIME_SCALE;
    let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
    let mut out = vec![0.0; dim];
    for (i, f) in freqs.enumerate() {
        out[i] = (arg * f).sin();
        out[half + i] = (arg * f).cos();
    }
    Ok(out)
}
