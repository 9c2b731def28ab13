//! Memory estimators used to warm-start the dual memory at arbitrary times.
//!
//! Both variants map a node (and, for the Transformer, its truncated recent
//! history) to an estimate of `(h(t−), h(t+))`. They are trained by
//! regressing onto the states the encoder produces while replaying events.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::encoder::{ReplayRecord, TimeEncoder};
use crate::error::{Error, Result};
use crate::graph::{Neighbor, NodeId, TemporalGraph};
use crate::memory::{DualMemory, MemoryUnit};
use crate::nn::{Dropout, LayerNorm, Linear, Mlp2, MultiHeadAttention};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Mat;

/// Numbers distinct ids by first appearance: `[7, 9, 7, 3] → [0, 1, 0, 2]`.
pub fn reindex(counterparts: &[NodeId], max_len: usize) -> Result<Vec<usize>> {
    if counterparts.len() > max_len {
        return Err(Error::HistoryTooLong { len: counterparts.len(), max: max_len });
    }
    let mut seen: Vec<NodeId> = Vec::with_capacity(counterparts.len());
    Ok(counterparts
        .iter()
        .map(|c| match seen.iter().position(|s| s == c) {
            Some(i) => i,
            None => {
                seen.push(*c);
                seen.len() - 1
            }
        })
        .collect())
}

/// What to estimate: the state of `node` around its event with
/// `counterpart` at time `t`, using only events whose index lies in
/// `available` for the history.
#[derive(Clone, Debug, PartialEq)]
pub struct RestartQuery {
    pub node: NodeId,
    pub counterpart: NodeId,
    pub event_idx: usize,
    pub t: f64,
    pub available: Range<usize>,
}

impl RestartQuery {
    pub fn from_replay(r: &ReplayRecord) -> Self {
        Self { node: r.node, counterpart: r.counterpart, event_idx: r.event_idx, t: r.event_t, available: 0..r.event_idx }
    }
}

/// Up to `len` most recent entries of `node` strictly before `t` whose event
/// index lies in `available`, oldest first.
pub fn history_in(g: &TemporalGraph, node: NodeId, t: f64, len: usize, available: &Range<usize>) -> Vec<Neighbor> {
    let before = g.neighbors().before(node, t);
    let lo = before.partition_point(|e| e.event_idx < available.start);
    let hi = before.partition_point(|e| e.event_idx < available.end);
    let window = &before[lo..hi.max(lo)];
    window[window.len().saturating_sub(len)..].to_vec()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp2,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerRestarter {
    pub dim: usize,
    pub edge_dim: usize,
    pub edge_slot: usize,
    pub width: usize,
    /// Truncation length `m`; `m − 1` history events plus the current one.
    pub history: usize,
    pub time: TimeEncoder,
    pub reindex_table: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub readout: Linear,
    pub jump: Mlp2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticRestarter {
    pub minus: ParamId,
    pub plus: ParamId,
    pub num_nodes: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Restarter {
    Transformer(TransformerRestarter),
    Static(StaticRestarter),
}

impl TransformerRestarter {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        edge_dim: usize,
        history: usize,
        layers: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Restarter;
        let edge_slot = if edge_dim > 0 { edge_dim } else { dim };
        let width = 4 * dim + edge_slot;
        if width % heads != 0 {
            return Err(Error::Config(format!("{heads} restarter heads do not divide token width {width}")));
        }
        let time = TimeEncoder::new(store, "restarter.time", g, dim);
        let reindex_table =
            store.add("restarter.reindex", g, crate::nn::uniform_init(rng, history, dim, dim));
        let layers = (0..layers)
            .map(|l| TransformerLayer {
                attention: MultiHeadAttention::new(
                    store,
                    &format!("restarter.layer{l}.attn"),
                    g,
                    width,
                    width,
                    width,
                    heads,
                    rng,
                ),
                norm1: LayerNorm::new(store, &format!("restarter.layer{l}.norm1"), g, width),
                ffn: Mlp2::new(store, &format!("restarter.layer{l}.ffn"), g, (width, width, width), rng),
                norm2: LayerNorm::new(store, &format!("restarter.layer{l}.norm2"), g, width),
            })
            .collect();
        Ok(Self {
            dim,
            edge_dim,
            edge_slot,
            width,
            history,
            time,
            reindex_table,
            layers,
            readout: Linear::new(store, "restarter.readout", g, width, dim, rng),
            jump: Mlp2::new(store, "restarter.jump", g, (dim + width, dim, dim), rng),
        })
    }

    /// Returns `(ĥ(t−), ĥ(t+))`, one row per query.
    pub fn estimate(
        &self,
        t: &mut Tape<'_>,
        g: &TemporalGraph,
        queries: &[RestartQuery],
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, Var)> {
        let d = self.dim;
        if g.node_dim() != 0 && g.node_dim() != d {
            return Err(Error::Shape(format!("node features have width {}, memory {d}", g.node_dim())));
        }
        // Token rows: every query's sequence [x'_0, x_1, ..., x_h] back to
        // back, then one current-event token x_0 per query.
        let mut starts = Vec::with_capacity(queries.len() + 1);
        let mut owner = Vec::new();
        let mut pair: Vec<Option<(NodeId, NodeId)>> = Vec::new();
        let mut edge_of: Vec<Option<usize>> = Vec::new();
        let mut deltas = Vec::new();
        let mut slot: Vec<Option<usize>> = Vec::new();
        let mut current = Vec::with_capacity(queries.len());
        for (b, q) in queries.iter().enumerate() {
            let hist = history_in(g, q.node, q.t, self.history - 1, &q.available);
            let mut cps: Vec<NodeId> = hist.iter().map(|h| h.counterpart).collect();
            cps.push(q.counterpart);
            let ids = reindex(&cps, self.history)?;
            starts.push(owner.len());
            owner.push(b);
            pair.push(None);
            edge_of.push(None);
            deltas.push(0.0);
            slot.push(None);
            for (h, &id) in hist.iter().zip(&ids) {
                owner.push(b);
                pair.push(Some((q.node, h.counterpart)));
                edge_of.push(Some(h.event_idx));
                deltas.push(q.t - h.t);
                slot.push(Some(id));
            }
            current.push((q.node, q.counterpart, q.event_idx, *ids.last().expect("current counterpart")));
        }
        let seq_rows = owner.len();
        starts.push(seq_rows);
        for &(node, cp, e, id) in &current {
            pair.push(Some((node, cp)));
            edge_of.push(Some(e));
            deltas.push(0.0);
            slot.push(Some(id));
        }
        let rows = pair.len();

        let mut nodes = Mat::zeros(rows, 2 * d);
        if g.node_dim() > 0 {
            for (r, p) in pair.iter().enumerate() {
                if let Some((a, c)) = p {
                    let row = nodes.row_mut(r);
                    for (o, &x) in row[..d].iter_mut().zip(g.node_feat(*a).unwrap()) {
                        *o = x as f64;
                    }
                    for (o, &x) in row[d..].iter_mut().zip(g.node_feat(*c).unwrap()) {
                        *o = x as f64;
                    }
                }
            }
        }
        let mut edge = Mat::zeros(rows, self.edge_slot);
        if self.edge_dim > 0 {
            for (r, e) in edge_of.iter().enumerate() {
                if let Some(e) = e {
                    for (o, &x) in edge.row_mut(r).iter_mut().zip(g.edge_feat(*e)) {
                        *o = x as f64;
                    }
                }
            }
        }
        let used: Vec<usize> = slot.iter().flatten().copied().collect();
        let table = t.param_rows(self.reindex_table, used.clone());
        let zero = t.constant(Mat::zeros(1, d));
        let padded = t.concat_rows(&[table, zero]);
        let mut k = 0;
        let map: Vec<usize> = slot
            .iter()
            .map(|s| match s {
                Some(_) => {
                    k += 1;
                    k - 1
                }
                None => used.len(),
            })
            .collect();
        let reidx = t.gather(padded, map);
        let nodes = t.constant(nodes);
        let edge = t.constant(edge);
        let time = self.time.encode(t, &deltas)?;
        let tokens = t.concat_cols(&[nodes, reidx, edge, time]);
        let mut x = t.gather(tokens, (0..seq_rows).collect());
        let x0 = t.gather(tokens, (seq_rows..rows).collect());

        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (queries_x, keys, offsets) = if l == last {
                let q = t.gather(x, starts[..queries.len()].to_vec());
                (q, x, starts.clone())
            } else {
                let mut key_idx = Vec::new();
                let mut offsets = vec![0];
                for r in 0..seq_rows {
                    let b = owner[r];
                    key_idx.extend(starts[b]..starts[b + 1]);
                    offsets.push(key_idx.len());
                }
                let keys = t.gather(x, key_idx);
                (x, keys, offsets)
            };
            let (att, _) = layer.attention.forward(t, queries_x, keys, offsets);
            let att = drop.apply(t, att);
            let y = t.add(queries_x, att);
            let y = layer.norm1.forward(t, y);
            let f = layer.ffn.forward(t, y, drop);
            let f = drop.apply(t, f);
            let y2 = t.add(y, f);
            x = layer.norm2.forward(t, y2);
        }
        let h_minus = self.readout.forward(t, x);
        let jump_in = t.concat_cols(&[h_minus, x0]);
        let h_plus = self.jump.forward(t, jump_in, drop);
        Ok((h_minus, h_plus))
    }
}

impl StaticRestarter {
    pub fn new(store: &mut ParamStore, num_nodes: usize, dim: usize) -> Self {
        Self {
            minus: store.add("restarter.static_minus", ParamGroup::Restarter, Mat::zeros(num_nodes, dim)),
            plus: store.add("restarter.static_plus", ParamGroup::Restarter, Mat::zeros(num_nodes, dim)),
            num_nodes,
            dim,
        }
    }

    /// Table rows; ids beyond the table read as zero.
    pub fn estimate(&self, t: &mut Tape<'_>, nodes: &[NodeId]) -> (Var, Var) {
        let known: Vec<usize> = nodes.iter().copied().filter(|&n| n < self.num_nodes).collect();
        let mut k = 0;
        let map: Vec<usize> = nodes
            .iter()
            .map(|&n| {
                if n < self.num_nodes {
                    k += 1;
                    k - 1
                } else {
                    known.len()
                }
            })
            .collect();
        let lookup = |id: ParamId, t: &mut Tape<'_>| {
            let rows = t.param_rows(id, known.clone());
            let zero = t.constant(Mat::zeros(1, self.dim));
            let padded = t.concat_rows(&[rows, zero]);
            t.gather(padded, map.clone())
        };
        let minus = lookup(self.minus, t);
        let plus = lookup(self.plus, t);
        (minus, plus)
    }
}

impl Restarter {
    pub fn estimate(
        &self,
        t: &mut Tape<'_>,
        g: &TemporalGraph,
        queries: &[RestartQuery],
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, Var)> {
        match self {
            Restarter::Transformer(r) => r.estimate(t, g, queries, drop),
            Restarter::Static(r) => {
                let nodes: Vec<NodeId> = queries.iter().map(|q| q.node).collect();
                Ok(r.estimate(t, &nodes))
            }
        }
    }

    pub fn estimate_values(&self, store: &ParamStore, g: &TemporalGraph, queries: &[RestartQuery]) -> Result<(Mat, Mat)> {
        let mut t = Tape::new(store);
        let (m, p) = self.estimate(&mut t, g, queries, &mut Dropout::off())?;
        Ok((t.value(m).clone(), t.value(p).clone()))
    }
}

/// `Σ ‖ĥ(t−) − h(t−)‖² + ‖ĥ(t+) − h(t+)‖²` over replay records, targets constant.
pub fn distill_loss(t: &mut Tape<'_>, est_minus: Var, est_plus: Var, targets: &[ReplayRecord]) -> Result<Var> {
    let (rows, cols) = t.shape(est_minus);
    if rows != targets.len() || t.shape(est_plus) != (rows, cols) {
        return Err(Error::Shape(format!("{rows} estimates for {} targets", targets.len())));
    }
    let tm = Mat::from_vec(rows, cols, targets.iter().flat_map(|r| r.h_minus.iter().copied()).collect());
    let tp = Mat::from_vec(rows, cols, targets.iter().flat_map(|r| r.h_plus.iter().copied()).collect());
    let a = t.sq_diff_sum(est_minus, tm);
    let b = t.sq_diff_sum(est_plus, tp);
    Ok(t.add(a, b))
}

/// How many nodes are estimated per tape during bulk re-initialisation.
const REINIT_CHUNK: usize = 256;

/// Rebuilds the memory from the events in `available`. Nodes active there
/// get restarter estimates at their last such event (zeros without a
/// restarter) and timestamps from their last two events; everything else,
/// including the pending store, is reset.
pub fn reinitialize(
    mem: &mut DualMemory,
    restarter: Option<&Restarter>,
    store: &ParamStore,
    g: &TemporalGraph,
    available: Range<usize>,
) -> Result<()> {
    mem.reset();
    let n = mem.num_nodes();
    let mut last: Vec<Option<(usize, f64)>> = vec![None; n];
    let mut prev = vec![0.0; n];
    for e in &g.events()[available.clone()] {
        for node in if e.src == e.dst { vec![e.src] } else { vec![e.src, e.dst] } {
            if let Some((_, lt)) = last[node] {
                prev[node] = lt;
            }
            last[node] = Some((e.idx, e.t));
        }
    }
    let active: Vec<NodeId> = (0..n).filter(|&i| last[i].is_some()).collect();
    for &node in &active {
        let (_, lt) = last[node].expect("active");
        mem.set_times(node, lt, prev[node]);
    }
    let Some(r) = restarter else {
        return Ok(());
    };
    for chunk in active.chunks(REINIT_CHUNK) {
        let queries: Vec<RestartQuery> = chunk
            .iter()
            .map(|&node| {
                let (idx, t) = last[node].expect("active");
                RestartQuery {
                    node,
                    counterpart: g.event(idx).counterpart(node),
                    event_idx: idx,
                    t,
                    available: available.start..idx,
                }
            })
            .collect();
        let (minus, plus) = r.estimate_values(store, g, &queries)?;
        mem.write_states(MemoryUnit::Minus, chunk, &minus, None)?;
        mem.write_states(MemoryUnit::Plus, chunk, &plus, None)?;
    }
    Ok(())
}
