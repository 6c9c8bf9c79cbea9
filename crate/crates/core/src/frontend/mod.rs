//! Audio ingestion, filterbank features and positional encoding.

mod fbank;
mod posenc;
mod wav;

pub use fbank::{hz_to_mel, log_mel_fbank, mel_to_hz, Fbank, FbankConfig, FeatureMatrix};
pub use posenc::sinusoidal_pos_encoding;
pub use wav::{read_wav, write_wav, WaveBuffer};

use std::path::Path;

use crate::container::Container;
use crate::error::Result;
use crate::scalar::Scalar;

/// Writes one feature matrix per utterance, keyed by utterance id.
pub fn save_features<T: Scalar>(path: &Path, feats: &[(String, FeatureMatrix<T>)]) -> Result<()> {
    let mut c = Container::new("features");
    if let Some((_, f)) = feats.first() {
        c.meta.insert("hop_ms".into(), f.frame_hop_ms.into());
        c.meta.insert("win_ms".into(), f.frame_win_ms.into());
    }
    for (id, f) in feats {
        let data = f.values.data().iter().map(|v| v.to_f32_lossy()).collect();
        c.push(id.clone(), f.values.shape(), data)?;
    }
    c.save(path)
}
