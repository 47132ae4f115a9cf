//! Threshold-gated memory over reachability embeddings. An observation's
//! embedding is inserted iff its maximum comparator score against the stored
//! entries falls below the reachability threshold. Episodic buffers reset
//! every episode; long-term buffers persist for a fixed number of episodes
//! within one scene.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;
use crate::reach::ReachabilityNet;
use crate::sim::Observation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryScope {
    Episodic,
    LongTerm,
}

#[derive(Clone, Debug)]
pub struct MemoryEntry<R: Real> {
    pub embedding: Array1<R>,
    pub step: u64,
    pub episode: u64,
}

#[derive(Clone, Debug)]
pub struct MemoryBuffer<R: Real> {
    pub scope: MemoryScope,
    pub capacity: usize,
    pub tau: f64,
    pub ttl_episodes: u64,
    entries: VecDeque<MemoryEntry<R>>,
    episode_counter: u64,
    scene_id: Option<String>,
}

impl<R: Real> MemoryBuffer<R> {
    pub fn episodic(capacity: usize, tau: f64) -> Self {
        MemoryBuffer {
            scope: MemoryScope::Episodic,
            capacity,
            tau,
            ttl_episodes: 0,
            entries: VecDeque::new(),
            episode_counter: 0,
            scene_id: None,
        }
    }

    pub fn long_term(capacity: usize, tau: f64, ttl_episodes: u64) -> Self {
        MemoryBuffer {
            scope: MemoryScope::LongTerm,
            capacity,
            tau,
            ttl_episodes,
            entries: VecDeque::new(),
            episode_counter: 0,
            scene_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry<R>> {
        self.entries.iter()
    }

    pub fn episode(&self) -> u64 {
        self.episode_counter
    }

    /// Stored embeddings as an `len x E` matrix.
    pub fn as_matrix(&self, embed_dim: usize) -> Array2<R> {
        let mut m = Array2::zeros((self.entries.len(), embed_dim));
        for (r, e) in self.entries.iter().enumerate() {
            m.row_mut(r).assign(&e.embedding);
        }
        m
    }

    /// Max comparator score of an embedding against the stored entries;
    /// negative infinity for an empty buffer (forces the first insertion).
    pub fn score_embedding(&self, net: &ReachabilityNet<R>, e: &Array1<R>) -> Result<f64> {
        if self.entries.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        let set = self.as_matrix(e.len());
        let scores = net.comparator_scores(e, &set)?;
        Ok(scores
            .iter()
            .map(|s| s.as_f64())
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Insert iff the reachability score is below tau. At capacity the
    /// oldest entry is evicted first. Returns (inserted, score).
    pub fn maybe_insert_embedding(
        &mut self,
        net: &ReachabilityNet<R>,
        e: &Array1<R>,
        step: u64,
    ) -> Result<(bool, f64)> {
        let score = self.score_embedding(net, e)?;
        if score >= self.tau {
            return Ok((false, score));
        }
        if self.entries.len() >= self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(MemoryEntry {
            embedding: e.clone(),
            step,
            episode: self.episode_counter,
        });
        Ok((true, score))
    }

    /// Clear an episodic buffer at episode end.
    pub fn reset_episodic(&mut self) -> Result<()> {
        if self.scope != MemoryScope::Episodic {
            return Err(Error::Invalid(
                "reset_episodic called on a long-term buffer".into(),
            ));
        }
        self.entries.clear();
        Ok(())
    }

    /// Advance a long-term buffer to the next episode: drop entries older
    /// than the TTL and clear entirely on scene change.
    pub fn advance_episode(&mut self, scene_id: &str) -> Result<()> {
        if self.scope != MemoryScope::LongTerm {
            return Err(Error::Invalid(
                "advance_episode called on an episodic buffer".into(),
            ));
        }
        if self.scene_id.as_deref() != Some(scene_id) {
            self.entries.clear();
            self.episode_counter = 0;
            self.scene_id = Some(scene_id.to_string());
            return Ok(());
        }
        self.episode_counter += 1;
        let (counter, ttl) = (self.episode_counter, self.ttl_episodes);
        self.entries.retain(|e| counter - e.episode < ttl);
        Ok(())
    }
}

/// Convenience wrapper over [`MemoryBuffer::score_embedding`] taking a raw
/// observation.
pub fn reachability_score<R: Real>(
    net: &ReachabilityNet<R>,
    obs: &Observation,
    buffer: &MemoryBuffer<R>,
) -> Result<f64> {
    let e = net.embed(obs)?;
    buffer.score_embedding(net, &e)
}

/// Fixed-size attention input assembled from the buffers: episodic entries
/// first, then long-term, padded to `episodic_capacity + long_term_capacity
/// + 1` rows. The final row is a placeholder slot that is valid (and filled
/// with the learned placeholder by the policy) only when both buffers are
/// empty.
#[derive(Clone, Debug)]
pub struct MemoryView<R: Real> {
    pub rows: Array2<R>,
    pub keep: Vec<bool>,
    pub placeholder_used: bool,
    /// Monotone id so downstream caches can detect changes.
    pub version: u64,
}

pub fn attention_view<R: Real>(
    episodic: &MemoryBuffer<R>,
    long_term: Option<&MemoryBuffer<R>>,
    embed_dim: usize,
    version: u64,
) -> MemoryView<R> {
    let lt_cap = long_term.map_or(0, |b| b.capacity);
    let total = episodic.capacity + lt_cap + 1;
    let mut rows = Array2::zeros((total, embed_dim));
    let mut keep = vec![false; total];
    let mut r = 0;
    for e in episodic.entries() {
        rows.row_mut(r).assign(&e.embedding);
        keep[r] = true;
        r += 1;
    }
    if let Some(lt) = long_term {
        let mut lr = episodic.capacity;
        for e in lt.entries() {
            rows.row_mut(lr).assign(&e.embedding);
            keep[lr] = true;
            lr += 1;
        }
        r += lt.len();
    }
    let placeholder_used = r == 0;
    if placeholder_used {
        keep[total - 1] = true;
    }
    MemoryView {
        rows,
        keep,
        placeholder_used,
        version,
    }
}

/// One gate decision, for the insertion log and replay checks.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub step: u64,
    /// The empty-buffer sentinel (negative infinity) is stored as null.
    #[serde(with = "score_serde")]
    pub score: f64,
    pub inserted: bool,
    pub buffer_size: usize,
}

mod score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(score: &f64, s: S) -> Result<S::Ok, S::Error> {
        if score.is_finite() {
            s.serialize_some(score)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

pub fn write_insertion_log(path: &std::path::Path, records: &[InsertionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_insertion_log(path: &std::path::Path) -> Result<Vec<InsertionRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reach::ReachArch;

    fn net() -> ReachabilityNet<f32> {
        ReachabilityNet::init(ReachArch::default(), 11)
    }

    fn random_embedding(rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> Array1<f32> {
        Array1::from_shape_fn(dim, |_| rand::Rng::gen_range(rng, -1.0..1.0))
    }

    #[test]
    fn empty_buffer_scores_negative_infinity_and_always_inserts() {
        let net = net();
        let mut buf: MemoryBuffer<f32> = MemoryBuffer::episodic(20, 0.5);
        let mut rng = crate::rng::stream(1, "mem", 0);
        let e = random_embedding(&mut rng, 64);
        assert_eq!(buf.score_embedding(&net, &e).unwrap(), f64::NEG_INFINITY);
        let (inserted, score) = buf.maybe_insert_embedding(&net, &e, 0).unwrap();
        assert!(inserted && score == f64::NEG_INFINITY);
        assert_eq!(buf.len(), 1);
    }

    #[test]
    fn score_equals_brute_force_max_over_entries() {
        let net = net();
        let mut buf: MemoryBuffer<f32> = MemoryBuffer::episodic(20, 1.1);
        let mut rng = crate::rng::stream(2, "mem", 0);
        for s in 0..3 {
            let e = random_embedding(&mut rng, 64);
            buf.maybe_insert_embedding(&net, &e, s).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let probe = random_embedding(&mut rng, 64);
        let got = buf.score_embedding(&net, &probe).unwrap();
        let mut expect = f64::NEG_INFINITY;
        for entry in buf.entries() {
            let m = entry.embedding.clone().insert_axis(ndarray::Axis(0));
            let s = net.comparator_scores(&probe, &m).unwrap()[0];
            expect = expect.max(f64::from(s));
        }
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn high_score_is_rejected_and_buffer_unchanged() {
        let net = net();
        let mut buf: MemoryBuffer<f32> = MemoryBuffer::episodic(20, 0.5);
        let mut rng = crate::rng::stream(3, "mem", 0);
        let e = random_embedding(&mut rng, 64);
        buf.maybe_insert_embedding(&net, &e, 0).unwrap();
        // the same embedding scores high against itself on any sane net;
        // force the rejection branch by raising tau check directly
        let score = buf.score_embedding(&net, &e).unwrap();
        if score >= buf.tau {
            let (inserted, _) = buf.maybe_insert_embedding(&net, &e, 1).unwrap();
            assert!(!inserted);
            assert_eq!(buf.len(), 1);
        } else {
            // untrained nets can score low; emulate with a tau below score
            buf.tau = score - 0.1;
            let (inserted, _) = buf.maybe_insert_embedding(&net, &e, 1).unwrap();
            assert!(!inserted);
            assert_eq!(buf.len(), 1);
        }
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let net = net();
        // tau above 1 accepts everything
        let mut buf: MemoryBuffer<f32> = MemoryBuffer::episodic(3, 1.1);
        let mut rng = crate::rng::stream(4, "mem", 0);
        for s in 0..5 {
            let e = random_embedding(&mut rng, 64);
            let (inserted, _) = buf.maybe_insert_embedding(&net, &e, s).unwrap();
            assert!(inserted);
            assert!(buf.len() <= 3);
        }
        assert_eq!(buf.len(), 3);
        let steps: Vec<u64> = buf.entries().map(|e| e.step).collect();
        assert_eq!(steps, vec![2, 3, 4], "oldest entries evicted first");
    }

    #[test]
    fn reset_is_idempotent_and_only_for_episodic() {
        let net = net();
        let mut buf: MemoryBuffer<f32> = MemoryBuffer::episodic(5, 1.1);
        let mut rng = crate::rng::stream(5, "mem", 0);
        let e = random_embedding(&mut rng, 64);
        buf.maybe_insert_embedding(&net, &e, 0).unwrap();
        buf.reset_episodic().unwrap();
        assert!(buf.is_empty());
        buf.reset_episodic().unwrap();
        assert!(buf.is_empty());
        let (inserted, _) = buf.maybe_insert_embedding(&net, &e, 1).unwrap();
        assert!(inserted, "first insert after reset must succeed");

        let mut lt: MemoryBuffer<f32> = MemoryBuffer::long_term(5, 0.5, 100);
        assert!(lt.reset_episodic().is_err());
    }

    #[test]
    fn long_term_ttl_and_scene_change() {
        let net = net();
        let mut lt: MemoryBuffer<f32> = MemoryBuffer::long_term(10, 1.1, 100);
        lt.advance_episode("sceneA").unwrap(); // bind scene, counter 0
        let mut rng = crate::rng::stream(6, "mem", 0);
        let e = random_embedding(&mut rng, 64);
        lt.maybe_insert_embedding(&net, &e, 0).unwrap();
        assert_eq!(lt.len(), 1);
        for _ in 0..99 {
            lt.advance_episode("sceneA").unwrap();
        }
        assert_eq!(lt.len(), 1, "entry inside the 100-episode window");
        lt.advance_episode("sceneA").unwrap();
        assert_eq!(lt.len(), 0, "entry dropped after 100 episodes");

        lt.maybe_insert_embedding(&net, &e, 1).unwrap();
        lt.advance_episode("sceneB").unwrap();
        assert_eq!(lt.len(), 0, "scene change clears the buffer");

        // advancing an empty buffer is a no-op
        lt.advance_episode("sceneB").unwrap();
        assert_eq!(lt.len(), 0);

        let mut ep: MemoryBuffer<f32> = MemoryBuffer::episodic(5, 0.5);
        assert!(ep.advance_episode("sceneA").is_err());
    }

    #[test]
    fn attention_view_layout_and_placeholder() {
        let net = net();
        let mut ep: MemoryBuffer<f32> = MemoryBuffer::episodic(4, 1.1);
        let mut rng = crate::rng::stream(7, "mem", 0);

        // both empty: exactly one valid placeholder row (the last)
        let view = attention_view(&ep, None, 64, 0);
        assert_eq!(view.rows.nrows(), 5);
        assert!(view.placeholder_used);
        assert_eq!(view.keep.iter().filter(|&&k| k).count(), 1);
        assert!(view.keep[4]);

        for s in 0..3 {
            let e = random_embedding(&mut rng, 64);
            ep.maybe_insert_embedding(&net, &e, s).unwrap();
        }
        let view = attention_view(&ep, None, 64, 1);
        assert!(!view.placeholder_used);
        assert_eq!(view.keep, vec![true, true, true, false, false]);

        // with a long-term buffer the layout is episodic, then long-term
        let mut lt: MemoryBuffer<f32> = MemoryBuffer::long_term(3, 1.1, 100);
        lt.advance_episode("s").unwrap();
        let e = random_embedding(&mut rng, 64);
        lt.maybe_insert_embedding(&net, &e, 9).unwrap();
        let view = attention_view(&ep, Some(&lt), 64, 2);
        assert_eq!(view.rows.nrows(), 4 + 3 + 1);
        assert_eq!(
            view.keep,
            vec![true, true, true, false, true, false, false, false]
        );
        for c in 0..64 {
            assert_eq!(view.rows[[4, c]], e[c]);
        }
    }

    #[test]
    fn insertion_log_round_trips() {
        let records = vec![
            InsertionRecord {
                step: 0,
                score: f64::NEG_INFINITY,
                inserted: true,
                buffer_size: 1,
            },
            InsertionRecord {
                step: 1,
                score: 0.73,
                inserted: false,
                buffer_size: 1,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_insertion_log(&path, &records).unwrap();
        let back = read_insertion_log(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].inserted && back[0].score == f64::NEG_INFINITY);
        assert_eq!(back[1].buffer_size, 1);
    }
}
