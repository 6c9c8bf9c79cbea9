use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Interleaved sine/cosine positional encoding laid out `C × T`.
///
/// Channel `2i` holds `sin(t / 10000^(2i/C))`, channel `2i+1` the cosine.
pub fn sinusoidal_pos_encoding<T: Scalar>(frames: usize, channels: usize) -> Result<Tensor<T>> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs an even channel count, got {channels}"
        )));
    }
    if frames == 0 {
        return Err(Error::InvalidArgument("positional encoding needs T >= 1".into()));
    }
    let mut out = vec![T::zero(); channels * frames];
    for pair in 0..channels / 2 {
        let inv_freq = 10000f64.powf(-((2 * pair) as f64) / channels as f64);
        for t in 0..frames {
            let angle = t as f64 * inv_freq;
            out[(2 * pair) * frames + t] = T::of(angle.sin());
            out[(2 * pair + 1) * frames + t] = T::of(angle.cos());
        }
    }
    Tensor::new(&[channels, frames], out)
}
