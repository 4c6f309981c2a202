//! Video feature manifests, the synthetic encoder and the episode sampler.

mod episode;
pub(crate) mod manifest;
mod synth;

pub use episode::{episode_rng, sample_episode, EpisodeBatch, RngDomain};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, Split, VideoRecord, FORMAT};
pub use synth::{synth_encode, SyntheticConfig, SyntheticEncoder, TemporalMode};

/// SplitMix64 finalizer, used to derive independent seeds from tuples.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one seed.
pub fn derive_seed(words: &[u64]) -> u64 {
    words.iter().fold(0x5eed_u64, |acc, &w| mix64(acc ^ mix64(w)))
}
