use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Independent random streams drawn from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngDomain {
    TrainEpisodes,
    EvalEpisodes,
    Init,
    Gradcheck,
}

/// Sampling generator for episode `index` of `domain` under `seed`.
///
/// Each (seed, domain) pair keys a ChaCha8 instance and the episode index
/// selects its stream, so any episode can be regenerated on its own.
pub fn episode_rng(seed: u64, domain: RngDomain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xe915, domain as u64]));
    rng.set_stream(index);
    rng
}

/// One N-way K-shot P-query task.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// `support[c]` holds the K record indices of episode class `c`.
    pub support: Vec<Vec<usize>>,
    /// `queries[c]` holds the P record indices of episode class `c`.
    pub queries: Vec<Vec<usize>>,
    /// Global class id of each episode class.
    pub classes: Vec<u32>,
    /// Prompt embedding of each episode class.
    pub prompts: Vec<Tensor>,
}

impl EpisodeBatch {
    /// Support videos class by class, then queries class by class, each
    /// paired with its episode class index.
    pub fn videos(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.way * (self.shot + self.query));
        for group in [&self.support, &self.queries] {
            for (c, ids) in group.iter().enumerate() {
                out.extend(ids.iter().map(|&i| (i, c)));
            }
        }
        out
    }
}

/// Uniformly picks `way` classes of `split`, then `shot + query` distinct
/// videos of each class.
pub fn sample_episode<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    rng: &mut R,
    way: usize,
    shot: usize,
    query: usize,
    split: Split,
) -> Result<EpisodeBatch> {
    if way == 0 || shot == 0 || query == 0 {
        return Err(Error::Config(format!("episode needs positive way/shot/query, got {way}/{shot}/{query}")));
    }
    let per_class = shot + query;
    let eligible: Vec<(u32, &[usize])> = manifest
        .classes_in(split)
        .into_iter()
        .filter(|(_, v)| v.len() >= per_class)
        .collect();
    if eligible.len() < way {
        return Err(Error::Protocol(format!(
            "{way}-way {shot}-shot {query}-query needs {way} {split} classes with at least {per_class} videos, found {}",
            eligible.len()
        )));
    }
    let mut batch = EpisodeBatch {
        way,
        shot,
        query,
        support: Vec::with_capacity(way),
        queries: Vec::with_capacity(way),
        classes: Vec::with_capacity(way),
        prompts: Vec::with_capacity(way),
    };
    for ci in index::sample(rng, eligible.len(), way) {
        let (class, videos) = eligible[ci];
        let picked: Vec<usize> = index::sample(rng, videos.len(), per_class)
            .into_iter()
            .map(|k| videos[k])
            .collect();
        batch.support.push(picked[..shot].to_vec());
        batch.queries.push(picked[shot..].to_vec());
        batch.classes.push(class);
        batch.prompts.push(manifest.prompt_token(class)?.clone());
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticConfig, VideoRecord};
    use std::collections::{BTreeMap, HashSet};

    fn synthetic() -> DatasetManifest {
        SyntheticConfig {
            num_classes: 12,
            dim: 4,
            frames: 2,
            videos_per_class: 6,
            split_classes: [8, 2, 2],
            ..SyntheticConfig::default()
        }
        .build_manifest()
        .unwrap()
    }

    #[test]
    fn single_class_two_videos_splits_them() {
        let m = DatasetManifest::new(
            vec![
                VideoRecord::in_memory("a", 0, Split::Test, Tensor::ones([1, 2])).unwrap(),
                VideoRecord::in_memory("b", 0, Split::Test, Tensor::ones([1, 2])).unwrap(),
            ],
            BTreeMap::new(),
            BTreeMap::from([(0, Tensor::ones([2]))]),
        )
        .unwrap();
        let ep = sample_episode(&m, &mut episode_rng(0, RngDomain::EvalEpisodes, 0), 1, 1, 1, Split::Test).unwrap();
        let mut both = vec![ep.support[0][0], ep.queries[0][0]];
        both.sort();
        assert_eq!(both, vec![0, 1]);
    }

    #[test]
    fn insufficient_classes_is_a_protocol_error() {
        let m = synthetic();
        let err = sample_episode(&m, &mut episode_rng(0, RngDomain::EvalEpisodes, 0), 3, 1, 1, Split::Test).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert!(err.to_string().contains("found 2"), "{err}");
        let err = sample_episode(&m, &mut episode_rng(0, RngDomain::EvalEpisodes, 0), 2, 5, 2, Split::Test).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn same_seed_same_episodes() {
        let m = synthetic();
        let run = |seed| {
            (0..20)
                .map(|i| sample_episode(&m, &mut episode_rng(seed, RngDomain::TrainEpisodes, i), 5, 2, 1, Split::Train).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn episodes_are_disjoint_and_classes_uniform() {
        let m = synthetic();
        let (way, episodes) = (5usize, 10_000u64);
        let train = m.class_ids(Split::Train);
        let mut counts = BTreeMap::<u32, u64>::new();
        for i in 0..episodes {
            let ep = sample_episode(&m, &mut episode_rng(11, RngDomain::TrainEpisodes, i), way, 2, 2, Split::Train).unwrap();
            let vids: Vec<usize> = ep.videos().into_iter().map(|(v, _)| v).collect();
            assert_eq!(vids.iter().collect::<HashSet<_>>().len(), vids.len());
            for (c, ids) in ep.support.iter().chain(&ep.queries).enumerate() {
                for &v in ids {
                    assert_eq!(m.records[v].class_id, ep.classes[c % way]);
                }
            }
            for c in &ep.classes {
                *counts.entry(*c).or_default() += 1;
            }
        }
        let p = way as f64 / train.len() as f64;
        let mean = episodes as f64 * p;
        let sd = (episodes as f64 * p * (1.0 - p)).sqrt();
        assert_eq!(counts.len(), train.len());
        for (c, n) in counts {
            assert!((n as f64 - mean).abs() <= 3.0 * sd, "class {c}: {n} vs {mean} ± {sd}");
        }
    }
}
