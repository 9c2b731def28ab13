//! Chronological event store.
//!
//! A [`TemporalGraph`] is built once and never mutated. It owns the event
//! list (stably sorted by time), edge features, the per-node
//! [`NeighborIndex`], split boundaries, and the destination pool used for
//! negative sampling. All temporal queries are strict: asking about time `t`
//! never returns an event that happened at `t` or later.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    /// Rank in chronological order.
    pub idx: usize,
    pub src: NodeId,
    pub dst: NodeId,
    pub t: f64,
    /// State-change label attached to the source, when the dataset has one.
    pub label: Option<bool>,
}

impl Event {
    pub fn involves(&self, node: NodeId) -> bool {
        self.src == node || self.dst == node
    }

    /// The other endpoint, seen from `node`.
    pub fn counterpart(&self, node: NodeId) -> NodeId {
        if self.src == node {
            self.dst
        } else {
            self.src
        }
    }
}

/// One entry of a node's interaction history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub counterpart: NodeId,
    pub event_idx: usize,
    pub t: f64,
    /// Whether the indexed node was the source of the event.
    pub is_source: bool,
}

/// Per-node append-only histories in compressed-row layout, each sorted by time.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    offsets: Vec<usize>,
    entries: Vec<Neighbor>,
}

impl NeighborIndex {
    pub fn build(num_nodes: usize, events: &[Event]) -> Self {
        let mut counts = vec![0usize; num_nodes + 1];
        for e in events {
            counts[e.src + 1] += 1;
            if e.dst != e.src {
                counts[e.dst + 1] += 1;
            }
        }
        for i in 0..num_nodes {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let placeholder = Neighbor { counterpart: 0, event_idx: 0, t: 0.0, is_source: false };
        let mut entries = vec![placeholder; *offsets.last().unwrap_or(&0)];
        for e in events {
            entries[fill[e.src]] = Neighbor { counterpart: e.dst, event_idx: e.idx, t: e.t, is_source: true };
            fill[e.src] += 1;
            if e.dst != e.src {
                entries[fill[e.dst]] = Neighbor { counterpart: e.src, event_idx: e.idx, t: e.t, is_source: false };
                fill[e.dst] += 1;
            }
        }
        Self { offsets, entries }
    }

    pub fn history(&self, node: NodeId) -> &[Neighbor] {
        if node + 1 >= self.offsets.len() {
            return &[];
        }
        &self.entries[self.offsets[node]..self.offsets[node + 1]]
    }

    /// All entries of `node` strictly before `t`, oldest first.
    pub fn before(&self, node: NodeId, t: f64) -> &[Neighbor] {
        let h = self.history(node);
        &h[..h.partition_point(|e| e.t < t)]
    }

    /// Up to `n` most recent entries strictly before `t`, most recent first.
    pub fn recent(&self, node: NodeId, t: f64, n: usize) -> impl Iterator<Item = &Neighbor> + '_ {
        let h = self.before(node, t);
        h[h.len().saturating_sub(n)..].iter().rev()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPoints {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Original identifiers of remapped nodes: users occupy `0..users.len()`,
/// items follow.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeIdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    num_nodes: usize,
    events: Vec<Event>,
    edge_dim: usize,
    edge_feats: Vec<f32>,
    node_dim: usize,
    node_feats: Option<Vec<f32>>,
    static_labels: Option<Vec<Option<bool>>>,
    split: SplitPoints,
    id_map: NodeIdMap,
    neighbors: NeighborIndex,
}

/// An event before chronological sorting.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEvent {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: f64,
    pub label: Option<bool>,
}

impl TemporalGraph {
    /// Builds a graph from unsorted events. `edge_feats` is row-major with
    /// one row of width `edge_dim` per raw event. Ties keep input order.
    pub fn new(num_nodes: usize, raw: Vec<RawEvent>, edge_dim: usize, edge_feats: Vec<f32>) -> Result<Self> {
        if edge_feats.len() != raw.len() * edge_dim {
            return Err(Error::Shape(format!(
                "{} edge feature values for {} events of width {edge_dim}",
                edge_feats.len(),
                raw.len()
            )));
        }
        for (i, e) in raw.iter().enumerate() {
            if e.src >= num_nodes || e.dst >= num_nodes {
                return Err(Error::NodeOutOfRange { node: e.src.max(e.dst), num_nodes });
            }
            if !(e.t >= 0.0) || !e.t.is_finite() {
                return Err(Error::Config(format!("event {i} has invalid timestamp {}", e.t)));
            }
        }
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[a].t.total_cmp(&raw[b].t));
        let mut events = Vec::with_capacity(raw.len());
        let mut feats = Vec::with_capacity(edge_feats.len());
        for (idx, &o) in order.iter().enumerate() {
            let r = &raw[o];
            events.push(Event { idx, src: r.src, dst: r.dst, t: r.t, label: r.label });
            feats.extend_from_slice(&edge_feats[o * edge_dim..(o + 1) * edge_dim]);
        }
        let neighbors = NeighborIndex::build(num_nodes, &events);
        let n = events.len();
        Ok(Self {
            num_nodes,
            events,
            edge_dim,
            edge_feats: feats,
            node_dim: 0,
            node_feats: None,
            static_labels: None,
            split: SplitPoints { train_end: n, val_end: n },
            id_map: NodeIdMap::default(),
            neighbors,
        })
    }

    /// Convenience constructor for feature-less `(src, dst, t)` streams.
    pub fn from_tuples(num_nodes: usize, tuples: &[(NodeId, NodeId, f64)]) -> Result<Self> {
        let raw = tuples.iter().map(|&(src, dst, t)| RawEvent { src, dst, t, label: None }).collect();
        Self::new(num_nodes, raw, 0, Vec::new())
    }

    pub fn with_node_features(mut self, dim: usize, feats: Vec<f32>) -> Result<Self> {
        if feats.len() != dim * self.num_nodes {
            return Err(Error::Shape(format!("node features: expected {}x{dim}", self.num_nodes)));
        }
        self.node_dim = dim;
        self.node_feats = Some(feats);
        Ok(self)
    }

    pub fn with_static_labels(mut self, labels: Vec<Option<bool>>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(Error::Shape("static labels must cover every node".into()));
        }
        self.static_labels = Some(labels);
        Ok(self)
    }

    pub fn with_id_map(mut self, map: NodeIdMap) -> Self {
        self.id_map = map;
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn event(&self, idx: usize) -> &Event {
        &self.events[idx]
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_dim
    }

    pub fn edge_feat(&self, idx: usize) -> &[f32] {
        &self.edge_feats[idx * self.edge_dim..(idx + 1) * self.edge_dim]
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    pub fn node_feat(&self, node: NodeId) -> Option<&[f32]> {
        let d = self.node_dim;
        self.node_feats.as_ref().map(|f| &f[node * d..(node + 1) * d])
    }

    pub fn static_labels(&self) -> Option<&[Option<bool>]> {
        self.static_labels.as_deref()
    }

    pub fn has_dynamic_labels(&self) -> bool {
        self.events.iter().any(|e| e.label.is_some())
    }

    pub fn id_map(&self) -> &NodeIdMap {
        &self.id_map
    }

    pub fn neighbors(&self) -> &NeighborIndex {
        &self.neighbors
    }

    pub fn split_points(&self) -> SplitPoints {
        self.split
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.split.train_end,
            Split::Val => self.split.train_end..self.split.val_end,
            Split::Test => self.split.val_end..self.events.len(),
        }
    }

    /// Sets split boundaries at `floor(train_frac·|E|)` and
    /// `floor((train_frac + val_frac)·|E|)`.
    pub fn chronological_split(mut self, train_frac: f64, val_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
            return Err(Error::Config(format!(
                "split fractions must satisfy 0 < train, 0 < val, train + val < 1 (got {train_frac}, {val_frac})"
            )));
        }
        let n = self.events.len() as f64;
        self.split = SplitPoints {
            train_end: (train_frac * n).floor() as usize,
            val_end: ((train_frac + val_frac) * n).floor() as usize,
        };
        Ok(self)
    }

    pub fn with_split_points(mut self, split: SplitPoints) -> Result<Self> {
        if split.train_end > split.val_end || split.val_end > self.events.len() {
            return Err(Error::Config(format!("invalid split points {split:?}")));
        }
        self.split = split;
        Ok(self)
    }

    /// Up to `n` most recent interactions of `node` strictly before `t`, most
    /// recent first. Unknown nodes have no history.
    pub fn recent_neighbors(&self, node: NodeId, t: f64, n: usize) -> Vec<Neighbor> {
        self.neighbors.recent(node, t, n).copied().collect()
    }

    /// Up to `m` most recent events involving `node` strictly before `t`,
    /// oldest first.
    pub fn truncated_history(&self, node: NodeId, t: f64, m: usize) -> Vec<&Event> {
        let h = self.neighbors.before(node, t);
        h[h.len().saturating_sub(m)..].iter().map(|nb| &self.events[nb.event_idx]).collect()
    }

    /// Nodes that are the destination of at least one event.
    pub fn destination_nodes(&self) -> Vec<NodeId> {
        let set: BTreeSet<NodeId> = self.events.iter().map(|e| e.dst).collect();
        set.into_iter().collect()
    }

    /// Nodes with at least one event in `range`.
    pub fn active_nodes(&self, range: Range<usize>) -> Vec<NodeId> {
        let set: BTreeSet<NodeId> = self.events[range].iter().flat_map(|e| [e.src, e.dst]).collect();
        set.into_iter().collect()
    }

    /// Chooses `frac` of the nodes that appear in validation or test events
    /// to be withheld from training.
    pub fn pick_unseen_nodes(&self, frac: f64, seed: u64) -> Vec<NodeId> {
        let candidates = self.active_nodes(self.split.train_end..self.events.len());
        let k = (frac * candidates.len() as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = rand::seq::index::sample(&mut rng, candidates.len(), k);
        let mut out: Vec<NodeId> = picked.into_iter().map(|i| candidates[i]).collect();
        out.sort_unstable();
        out
    }

    /// Copy of the graph with every training-split event touching an unseen
    /// node removed. Node ids are kept; split points shift accordingly.
    pub fn mask_training_events(&self, unseen: &[NodeId]) -> Result<Self> {
        let mut is_unseen = vec![false; self.num_nodes];
        for &n in unseen {
            is_unseen[n] = true;
        }
        let mut raw = Vec::new();
        let mut feats = Vec::new();
        let mut removed = 0;
        for e in &self.events {
            if e.idx < self.split.train_end && (is_unseen[e.src] || is_unseen[e.dst]) {
                removed += 1;
                continue;
            }
            raw.push(RawEvent { src: e.src, dst: e.dst, t: e.t, label: e.label });
            feats.extend_from_slice(self.edge_feat(e.idx));
        }
        let mut g = TemporalGraph::new(self.num_nodes, raw, self.edge_dim, feats)?;
        g.node_dim = self.node_dim;
        g.node_feats = self.node_feats.clone();
        g.static_labels = self.static_labels.clone();
        g.id_map = self.id_map.clone();
        g.split = SplitPoints { train_end: self.split.train_end - removed, val_end: self.split.val_end - removed };
        Ok(g)
    }

    /// Reads a JODIE-style CSV: `user_id,item_id,timestamp,state_label,feat...`.
    pub fn ingest_csv(path: &Path, has_header: bool) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::ingest_reader(file, has_header, path)
    }

    pub fn ingest_reader<R: Read>(reader: R, has_header: bool, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(has_header).flexible(true).trim(csv::Trim::All).from_reader(reader);
        let mut users: HashMap<String, usize> = HashMap::new();
        let mut items: HashMap<String, usize> = HashMap::new();
        let mut user_names = Vec::new();
        let mut item_names = Vec::new();
        let mut rows: Vec<(usize, usize, f64, Option<bool>)> = Vec::new();
        let mut feats: Vec<f32> = Vec::new();
        let mut width: Option<usize> = None;
        let err = |line: u64, message: String| Error::Ingest { path: path.to_path_buf(), line, message };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() == 1 && rec.get(0) == Some("") {
                continue;
            }
            if rec.len() < 4 {
                return Err(err(line, format!("expected at least 4 fields, found {}", rec.len())));
            }
            match width {
                None => width = Some(rec.len()),
                Some(w) if w != rec.len() => {
                    return Err(err(line, format!("expected {w} fields, found {}", rec.len())));
                }
                _ => {}
            }
            let user = rec[0].to_string();
            let item = rec[1].to_string();
            let t: f64 = rec[2].parse().map_err(|_| err(line, format!("bad timestamp {:?}", &rec[2])))?;
            if !t.is_finite() {
                return Err(err(line, format!("bad timestamp {:?}", &rec[2])));
            }
            if t < 0.0 {
                return Err(err(line, format!("negative timestamp {t}")));
            }
            let label: f64 = rec[3].parse().map_err(|_| err(line, format!("bad state label {:?}", &rec[3])))?;
            for f in rec.iter().skip(4) {
                let v: f32 = f.parse().map_err(|_| err(line, format!("bad feature value {f:?}")))?;
                feats.push(v);
            }
            let u = *users.entry(user.clone()).or_insert_with(|| {
                user_names.push(user);
                user_names.len() - 1
            });
            let i = *items.entry(item.clone()).or_insert_with(|| {
                item_names.push(item);
                item_names.len() - 1
            });
            rows.push((u, i, t, Some(label != 0.0)));
        }
        if rows.is_empty() {
            return Err(Error::NoEvents(path.to_path_buf()));
        }
        let edge_dim = width.unwrap_or(4) - 4;
        let n_users = user_names.len();
        let raw = rows.into_iter().map(|(u, i, t, label)| RawEvent { src: u, dst: n_users + i, t, label }).collect();
        let g = Self::new(n_users + item_names.len(), raw, edge_dim, feats)?;
        Ok(g.with_id_map(NodeIdMap { users: user_names, items: item_names }))
    }

    /// Canonical binary form. Layout (little endian):
    ///
    /// ```text
    /// magic "TIGG" | version u32
    /// num_nodes u64 | num_events u64 | edge_dim u32 | node_dim u32
    /// train_end u64 | val_end u64
    /// src u32 × E | dst u32 × E | t f64 × E | label u8 × E (0, 1, 2 = none)
    /// edge features f32, column-major: edge_dim columns of E values
    /// node features flag u8, then f32 column-major node_dim × num_nodes
    /// static label flag u8, then u8 × num_nodes (0, 1, 2 = none)
    /// user id count u64, item id count u64, then each id as (u32 len, bytes)
    /// ```
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        let e = self.events.len();
        w.write_all(CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(CACHE_VERSION)?;
        w.write_u64::<LittleEndian>(self.num_nodes as u64)?;
        w.write_u64::<LittleEndian>(e as u64)?;
        w.write_u32::<LittleEndian>(self.edge_dim as u32)?;
        w.write_u32::<LittleEndian>(self.node_dim as u32)?;
        w.write_u64::<LittleEndian>(self.split.train_end as u64)?;
        w.write_u64::<LittleEndian>(self.split.val_end as u64)?;
        for ev in &self.events {
            w.write_u32::<LittleEndian>(ev.src as u32)?;
        }
        for ev in &self.events {
            w.write_u32::<LittleEndian>(ev.dst as u32)?;
        }
        for ev in &self.events {
            w.write_f64::<LittleEndian>(ev.t)?;
        }
        for ev in &self.events {
            w.write_u8(label_byte(ev.label))?;
        }
        for c in 0..self.edge_dim {
            for r in 0..e {
                w.write_f32::<LittleEndian>(self.edge_feats[r * self.edge_dim + c])?;
            }
        }
        match &self.node_feats {
            Some(f) => {
                w.write_u8(1)?;
                for c in 0..self.node_dim {
                    for r in 0..self.num_nodes {
                        w.write_f32::<LittleEndian>(f[r * self.node_dim + c])?;
                    }
                }
            }
            None => w.write_u8(0)?,
        }
        match &self.static_labels {
            Some(l) => {
                w.write_u8(1)?;
                for &x in l {
                    w.write_u8(label_byte(x))?;
                }
            }
            None => w.write_u8(0)?,
        }
        w.write_u64::<LittleEndian>(self.id_map.users.len() as u64)?;
        w.write_u64::<LittleEndian>(self.id_map.items.len() as u64)?;
        for s in self.id_map.users.iter().chain(&self.id_map.items) {
            w.write_u32::<LittleEndian>(s.len() as u32)?;
            w.write_all(s.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a graph cache file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let num_nodes = r.read_u64::<LittleEndian>()? as usize;
        let e = r.read_u64::<LittleEndian>()? as usize;
        let edge_dim = r.read_u32::<LittleEndian>()? as usize;
        let node_dim = r.read_u32::<LittleEndian>()? as usize;
        let split = SplitPoints {
            train_end: r.read_u64::<LittleEndian>()? as usize,
            val_end: r.read_u64::<LittleEndian>()? as usize,
        };
        let mut src = vec![0u32; e];
        r.read_u32_into::<LittleEndian>(&mut src)?;
        let mut dst = vec![0u32; e];
        r.read_u32_into::<LittleEndian>(&mut dst)?;
        let mut ts = vec![0f64; e];
        r.read_f64_into::<LittleEndian>(&mut ts)?;
        let mut labels = vec![0u8; e];
        r.read_exact(&mut labels)?;
        let mut cols = vec![0f32; e * edge_dim];
        r.read_f32_into::<LittleEndian>(&mut cols)?;
        let mut feats = vec![0f32; e * edge_dim];
        for c in 0..edge_dim {
            for row in 0..e {
                feats[row * edge_dim + c] = cols[c * e + row];
            }
        }
        let raw: Vec<RawEvent> = (0..e)
            .map(|i| RawEvent { src: src[i] as usize, dst: dst[i] as usize, t: ts[i], label: byte_label(labels[i]) })
            .collect();
        let mut g = TemporalGraph::new(num_nodes, raw, edge_dim, feats)?;
        if r.read_u8()? == 1 {
            let mut cols = vec![0f32; num_nodes * node_dim];
            r.read_f32_into::<LittleEndian>(&mut cols)?;
            let mut f = vec![0f32; num_nodes * node_dim];
            for c in 0..node_dim {
                for row in 0..num_nodes {
                    f[row * node_dim + c] = cols[c * num_nodes + row];
                }
            }
            g = g.with_node_features(node_dim, f)?;
        }
        if r.read_u8()? == 1 {
            let mut l = vec![0u8; num_nodes];
            r.read_exact(&mut l)?;
            g = g.with_static_labels(l.into_iter().map(byte_label).collect())?;
        }
        let nu = r.read_u64::<LittleEndian>()? as usize;
        let ni = r.read_u64::<LittleEndian>()? as usize;
        let read_str = |r: &mut R| -> Result<String> {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
        };
        let users = (0..nu).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
        let items = (0..ni).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
        g.with_id_map(NodeIdMap { users, items }).with_split_points(split)
    }

    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_cache(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        hex_digest(&self.to_cache_bytes())
    }
}

const CACHE_MAGIC: &[u8; 4] = b"TIGG";
const CACHE_VERSION: u32 = 1;

fn label_byte(l: Option<bool>) -> u8 {
    match l {
        Some(false) => 0,
        Some(true) => 1,
        None => 2,
    }
}

fn byte_label(b: u8) -> Option<bool> {
    match b {
        0 => Some(false),
        1 => Some(true),
        _ => None,
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Nodes that negatives are drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativePoolKind {
    /// Every node that is ever the destination of an event.
    #[default]
    Destinations,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativePool {
    nodes: Vec<NodeId>,
}

impl NegativePool {
    pub fn new(nodes: Vec<NodeId>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyNegativePool);
        }
        Ok(Self { nodes })
    }

    pub fn for_graph(g: &TemporalGraph, kind: NegativePoolKind) -> Result<Self> {
        match kind {
            NegativePoolKind::Destinations => Self::new(g.destination_nodes()),
            NegativePoolKind::All => Self::new((0..g.num_nodes()).collect()),
        }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// One uniform draw per event.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<NodeId> {
        (0..count).map(|_| self.nodes[rng.random_range(0..self.nodes.len())]).collect()
    }

    /// Fixed negatives for an evaluation range: the same seed and range always
    /// give the same draws, whatever model is being evaluated.
    pub fn fixed_for_range(&self, range: Range<usize>, seed: u64) -> Vec<NodeId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (range.start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.sample(range.len(), &mut rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub range: Range<usize>,
    pub neg_dst: Vec<NodeId>,
}

impl Batch {
    pub fn events<'g>(&self, g: &'g TemporalGraph) -> &'g [Event] {
        &g.events()[self.range.clone()]
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

/// Walks a split range in contiguous batches.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchCursor {
    pub pos: usize,
    pub end: usize,
    pub batch_size: usize,
}

impl BatchCursor {
    pub fn new(range: Range<usize>, batch_size: usize) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        Self { pos: range.start, end: range.end, batch_size }
    }

    /// Next contiguous range, or `None` at end of stream.
    pub fn next_range(&mut self) -> Option<Range<usize>> {
        if self.pos >= self.end {
            return None;
        }
        let r = self.pos..(self.pos + self.batch_size).min(self.end);
        self.pos = r.end;
        Some(r)
    }

    /// Next batch with freshly sampled negatives.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, pool: &NegativePool, rng: &mut R) -> Option<Batch> {
        let range = self.next_range()?;
        let neg_dst = pool.sample(range.len(), rng);
        Some(Batch { range, neg_dst })
    }

    pub fn num_batches(&self) -> usize {
        (self.end.saturating_sub(self.pos)).div_ceil(self.batch_size)
    }
}
