//! Synthetic bipartite interaction streams with planted structure.
//!
//! Users and items belong to communities. A user mostly re-visits one of its
//! recent items, otherwise picks an item from its own community, otherwise a
//! uniformly random item. Edge features are the item community one-hot plus
//! uniform noise. Users of community 0 carry a positive dynamic label with
//! elevated probability, so labels are predictable from behaviour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeIdMap, RawEvent, TemporalGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub events: usize,
    pub communities: usize,
    pub edge_dim: usize,
    /// Probability of re-visiting one of the user's last `recent` items.
    pub repeat_prob: f64,
    pub recent: usize,
    /// Probability that a fresh pick stays inside the user's community.
    pub affinity: f64,
    /// Half-width of the uniform noise added to edge features.
    pub noise: f64,
    /// Positive label rate for users in community 0 and elsewhere.
    pub label_rate: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 50,
            events: 5000,
            communities: 5,
            edge_dim: 8,
            repeat_prob: 0.5,
            recent: 5,
            affinity: 0.8,
            noise: 0.1,
            label_rate: (0.3, 0.02),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Same sizes as the public Wikipedia edit stream.
    pub fn wikipedia_scale() -> Self {
        Self { users: 8227, items: 1000, events: 157_474, communities: 20, edge_dim: 172, ..Self::default() }
    }

    /// Builds the stream. Users are nodes `0..users`, items follow.
    pub fn generate(&self) -> Result<TemporalGraph> {
        if self.users == 0 || self.items == 0 || self.communities == 0 {
            return Err(Error::Config("synthetic stream needs users, items and communities".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let community_items: Vec<Vec<usize>> =
            (0..self.communities).map(|c| (0..self.items).filter(|i| i % self.communities == c).collect()).collect();
        let mut recent: Vec<Vec<usize>> = vec![Vec::new(); self.users];
        let mut raw = Vec::with_capacity(self.events);
        let mut feats = Vec::with_capacity(self.events * self.edge_dim);
        let mut t = 0.0;
        for _ in 0..self.events {
            t += rng.random_range(0.5..1.5f64);
            let u = rng.random_range(0..self.users);
            let c = u % self.communities;
            let hist = &mut recent[u];
            let item = if !hist.is_empty() && rng.random::<f64>() < self.repeat_prob {
                hist[rng.random_range(0..hist.len())]
            } else if !community_items[c].is_empty() && rng.random::<f64>() < self.affinity {
                community_items[c][rng.random_range(0..community_items[c].len())]
            } else {
                rng.random_range(0..self.items)
            };
            hist.retain(|&i| i != item);
            hist.push(item);
            if hist.len() > self.recent {
                hist.remove(0);
            }
            let rate = if c == 0 { self.label_rate.0 } else { self.label_rate.1 };
            let label = rng.random::<f64>() < rate;
            raw.push(RawEvent { src: u, dst: self.users + item, t, label: Some(label) });
            for k in 0..self.edge_dim {
                let hot = if k == (item % self.communities) % self.edge_dim { 1.0 } else { 0.0 };
                feats.push((hot + rng.random_range(-self.noise..=self.noise)) as f32);
            }
        }
        let g = TemporalGraph::new(self.users + self.items, raw, self.edge_dim, feats)?;
        let map = NodeIdMap { users: (0..self.users).map(|u| u.to_string()).collect(), items: (0..self.items).map(|i| i.to_string()).collect() };
        Ok(g.with_id_map(map))
    }
}
