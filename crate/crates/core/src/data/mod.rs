//! Manifests, the synthetic corpus, and trial construction.

mod manifest;
mod synth;
mod trials;

pub use manifest::{load_manifest, manifest_text, parse_manifest, speakers, write_manifest, ManifestEntry};
pub use synth::{generate_corpus, speaker_id, Corpus, CorpusSpec, SyntheticSpeakerSpec};
pub use trials::{all_pairs, build_trials};
