//! Time encoding, message generation, recurrent state update and temporal
//! graph attention, plus the per-batch driver that ties them to memory.

use std::collections::{BTreeSet, HashMap};

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Batch, NodeId, TemporalGraph};
use crate::memory::{DualMemory, MemoryUnit, PendingMessage};
use crate::nn::{Dropout, GruCell, Mlp2, MultiHeadAttention};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Mat;

/// Learnable cosine features `Φ(Δt)_i = cos(ω_i Δt + φ_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoder {
    pub omega: ParamId,
    pub phi: ParamId,
    pub dim: usize,
}

impl TimeEncoder {
    /// Frequencies start geometric, `ω_i = 10^(-i·10/d)` for `i = 0..d`;
    /// phases start at zero.
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        let omega = (0..dim).map(|i| 1.0 / 10f64.powf(i as f64 * 10.0 / dim as f64)).collect();
        Self {
            omega: store.add(format!("{name}.omega"), group, Mat::row_vector(omega)),
            phi: store.add(format!("{name}.phi"), group, Mat::zeros(1, dim)),
            dim,
        }
    }

    /// One row per delta.
    pub fn encode(&self, t: &mut Tape<'_>, deltas: &[f64]) -> Result<Var> {
        if let Some(&bad) = deltas.iter().find(|d| !(**d >= 0.0)) {
            return Err(Error::NegativeDelta(bad));
        }
        let col = t.constant(Mat::column(deltas.to_vec()));
        let w = t.param(self.omega);
        let p = t.param(self.phi);
        let x = t.matmul(col, w);
        let x = t.add_row(x, p);
        Ok(t.cos(x))
    }

    pub fn encode_values(&self, store: &ParamStore, deltas: &[f64]) -> Result<Mat> {
        let mut t = Tape::new(store);
        let v = self.encode(&mut t, deltas)?;
        Ok(t.value(v).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub attention: MultiHeadAttention,
    pub merge: Mlp2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderSpec {
    pub dim: usize,
    pub edge_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub neighbors: usize,
    pub msg_source: MemoryUnit,
    pub upd_source: MemoryUnit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub time: TimeEncoder,
    pub gru: GruCell,
    pub layers: Vec<AttentionLayer>,
}

/// State pair produced when a parked event is replayed, kept as the
/// distillation target for the restarter.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayRecord {
    pub node: NodeId,
    pub counterpart: NodeId,
    pub event_idx: usize,
    pub event_t: f64,
    pub is_source: bool,
    /// `M−` row before this batch overwrote it: the state just before the event.
    pub h_minus: Vec<f64>,
    /// Freshly computed state just after the event.
    pub h_plus: Vec<f64>,
}

pub struct BatchOutput {
    pub src: Var,
    pub dst: Var,
    pub neg: Var,
    pub replay: Vec<ReplayRecord>,
}

/// Queries of one attention level and how their keys map to the level below.
#[derive(Clone, Debug, Default)]
struct Level {
    queries: Vec<(NodeId, f64)>,
    offsets: Vec<usize>,
    /// Row in the level below, or `None` for the all-zero fallback key.
    key_rows: Vec<Option<usize>>,
    key_events: Vec<Option<usize>>,
    key_dt: Vec<f64>,
}

/// Output of [`Encoder::embed`]: embeddings plus each layer's attention node.
pub struct Embedding {
    pub z: Var,
    pub attention: Vec<Var>,
    pub offsets: Vec<Vec<usize>>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, spec: EncoderSpec, rng: &mut ChaCha8Rng) -> Self {
        let d = spec.dim;
        let g = ParamGroup::Model;
        let time = TimeEncoder::new(store, "time", g, d);
        let gru = GruCell::new(store, "updater", g, 2 * d + spec.edge_dim + d, d, rng);
        let layers = (0..spec.layers)
            .map(|l| AttentionLayer {
                attention: MultiHeadAttention::new(
                    store,
                    &format!("attn{l}"),
                    g,
                    2 * d,
                    2 * d + spec.edge_dim,
                    2 * d,
                    spec.heads,
                    rng,
                ),
                merge: Mlp2::new(store, &format!("merge{l}"), g, (3 * d, d, d), rng),
            })
            .collect();
        Self { spec, time, gru, layers }
    }

    pub fn message_width(&self) -> usize {
        2 * self.spec.dim + self.spec.edge_dim + self.spec.dim
    }

    /// `[s_self ‖ s_counterpart ‖ edge_feat ‖ Φ(event_t − last_t[self])]`, one row per entry.
    pub fn compute_messages(
        &self,
        t: &mut Tape<'_>,
        mem: &DualMemory,
        g: &TemporalGraph,
        pending: &[PendingMessage],
    ) -> Result<Var> {
        let nodes: Vec<NodeId> = pending.iter().map(|p| p.node).collect();
        let cps: Vec<NodeId> = pending.iter().map(|p| p.counterpart).collect();
        let own = mem.read_states(self.spec.msg_source, &nodes)?;
        let other = mem.read_states(self.spec.msg_source, &cps)?;
        let de = self.spec.edge_dim;
        let mut edge = Mat::zeros(pending.len(), de);
        for (r, p) in pending.iter().enumerate() {
            for (o, &x) in edge.row_mut(r).iter_mut().zip(g.edge_feat(p.event_idx)) {
                *o = x as f64;
            }
        }
        let deltas: Vec<f64> = pending.iter().map(|p| p.event_t - mem.last_t(p.node)).collect();
        let head = t.constant(Mat::concat_cols(&[&own, &other, &edge]));
        let phi = self.time.encode(t, &deltas)?;
        Ok(t.concat_cols(&[head, phi]))
    }

    pub fn update_states(&self, t: &mut Tape<'_>, prior: Var, messages: Var) -> Result<Var> {
        let (pr, pc) = t.shape(prior);
        let (mr, mc) = t.shape(messages);
        if pr != mr || pc != self.spec.dim || mc != self.gru.input_dim {
            return Err(Error::Shape(format!("updater got prior {pr}x{pc} and messages {mr}x{mc}")));
        }
        Ok(self.gru.forward(t, messages, prior))
    }

    fn plan(&self, g: &TemporalGraph, queries: &[(NodeId, f64)]) -> Vec<Level> {
        let n = self.spec.neighbors;
        let mut levels = vec![Level::default(); self.spec.layers + 1];
        levels[self.spec.layers].queries = queries.to_vec();
        for l in (1..=self.spec.layers).rev() {
            let upper = std::mem::take(&mut levels[l]);
            let mut lower = upper.queries.clone();
            let mut cur = Level { queries: upper.queries, offsets: vec![0], ..Default::default() };
            for &(node, qt) in &cur.queries {
                let mut any = false;
                for nb in g.neighbors().recent(node, qt, n) {
                    cur.key_rows.push(Some(lower.len()));
                    cur.key_events.push(Some(nb.event_idx));
                    cur.key_dt.push(qt - nb.t);
                    lower.push((nb.counterpart, nb.t));
                    any = true;
                }
                if !any {
                    cur.key_rows.push(None);
                    cur.key_events.push(None);
                    cur.key_dt.push(0.0);
                }
                cur.offsets.push(cur.key_rows.len());
            }
            levels[l] = cur;
            levels[l - 1].queries = lower;
        }
        levels
    }

    /// Every node whose memory row the embedding of `queries` reads.
    pub fn receptive_field(&self, g: &TemporalGraph, queries: &[(NodeId, f64)]) -> Vec<NodeId> {
        let levels = self.plan(g, queries);
        let set: BTreeSet<NodeId> = levels[0].queries.iter().map(|q| q.0).collect();
        set.into_iter().collect()
    }

    /// Temporal attention embeddings reading `M+` as-is (no replay).
    pub fn embed(
        &self,
        t: &mut Tape<'_>,
        mem: &DualMemory,
        g: &TemporalGraph,
        queries: &[(NodeId, f64)],
        drop: &mut Dropout<'_>,
    ) -> Result<Embedding> {
        let nodes = self.receptive_field(g, queries);
        let rows = mem.read_states(MemoryUnit::Plus, &nodes)?;
        let table = t.constant(rows);
        let row_of: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        self.embed_with_table(t, g, queries, table, &row_of, drop)
    }

    fn embed_with_table(
        &self,
        t: &mut Tape<'_>,
        g: &TemporalGraph,
        queries: &[(NodeId, f64)],
        table: Var,
        row_of: &HashMap<NodeId, usize>,
        drop: &mut Dropout<'_>,
    ) -> Result<Embedding> {
        let d = self.spec.dim;
        let de = self.spec.edge_dim;
        let levels = self.plan(g, queries);
        let base = &levels[0].queries;
        let idx: Vec<usize> = base.iter().map(|q| row_of[&q.0]).collect();
        let mut z = t.gather(table, idx);
        if g.node_dim() > 0 {
            if g.node_dim() != d {
                return Err(Error::Shape(format!("node features have width {}, memory {d}", g.node_dim())));
            }
            let mut feats = Mat::zeros(base.len(), d);
            for (r, q) in base.iter().enumerate() {
                let f = g.node_feat(q.0).expect("node features present");
                for (o, &x) in feats.row_mut(r).iter_mut().zip(f) {
                    *o = x as f64;
                }
            }
            let f = t.constant(feats);
            z = t.add(z, f);
        }
        let mut attention = Vec::new();
        let mut offsets = Vec::new();
        for (layer, lv) in self.layers.iter().zip(&levels[1..]) {
            let q = lv.queries.len();
            let below = t.shape(z).0;
            let self_z = t.gather(z, (0..q).collect());
            let zero = t.constant(Mat::zeros(1, d));
            let padded = t.concat_rows(&[z, zero]);
            let key_idx: Vec<usize> = lv.key_rows.iter().map(|r| r.unwrap_or(below)).collect();
            let nbr_z = t.gather(padded, key_idx);
            let mut edge = Mat::zeros(lv.key_rows.len(), de);
            for (r, e) in lv.key_events.iter().enumerate() {
                if let Some(e) = e {
                    for (o, &x) in edge.row_mut(r).iter_mut().zip(g.edge_feat(*e)) {
                        *o = x as f64;
                    }
                }
            }
            let mut time = self.time.encode(t, &lv.key_dt)?;
            if lv.key_rows.iter().any(Option::is_none) {
                let mut mask = Mat::filled(lv.key_rows.len(), d, 1.0);
                for (r, k) in lv.key_rows.iter().enumerate() {
                    if k.is_none() {
                        mask.row_mut(r).fill(0.0);
                    }
                }
                let m = t.constant(mask);
                time = t.mul(time, m);
            }
            let edge = t.constant(edge);
            let keys = t.concat_cols(&[nbr_z, edge, time]);
            let zero_gap = self.time.encode(t, &vec![0.0; q])?;
            let query = t.concat_cols(&[self_z, zero_gap]);
            let (att_out, att) = layer.attention.forward(t, query, keys, lv.offsets.clone());
            let merged_in = t.concat_cols(&[self_z, att_out]);
            z = layer.merge.forward(t, merged_in, drop);
            attention.push(att);
            offsets.push(lv.offsets.clone());
        }
        Ok(Embedding { z, attention, offsets })
    }

    /// Replays parked events for the batch's receptive field, embeds sources,
    /// destinations and negatives at their event times, records `M−` for the
    /// real endpoints and parks the batch's events.
    pub fn process_batch(
        &self,
        t: &mut Tape<'_>,
        mem: &mut DualMemory,
        g: &TemporalGraph,
        batch: &Batch,
        drop: &mut Dropout<'_>,
    ) -> Result<BatchOutput> {
        let events = batch.events(g);
        if batch.neg_dst.len() != events.len() {
            return Err(Error::Shape(format!("{} negatives for {} events", batch.neg_dst.len(), events.len())));
        }
        for w in events.windows(2) {
            if w[1].t < w[0].t || w[1].idx != w[0].idx + 1 {
                return Err(Error::NotChronological(w[1].idx));
            }
        }
        let b = events.len();
        let mut queries = Vec::with_capacity(3 * b);
        queries.extend(events.iter().map(|e| (e.src, e.t)));
        queries.extend(events.iter().map(|e| (e.dst, e.t)));
        queries.extend(events.iter().zip(&batch.neg_dst).map(|(e, &n)| (n, e.t)));
        for &(n, _) in &queries {
            if n >= mem.num_nodes() {
                return Err(Error::NodeOutOfRange { node: n, num_nodes: mem.num_nodes() });
            }
        }

        let field = self.receptive_field(g, &queries);
        let pending = mem.take_pending(&field);
        let mut replay = Vec::with_capacity(pending.len());
        let mut parts = Vec::new();
        let mut row_of = HashMap::with_capacity(field.len());
        if !pending.is_empty() {
            let msgs = self.compute_messages(t, mem, g, &pending)?;
            let nodes: Vec<NodeId> = pending.iter().map(|p| p.node).collect();
            let prior = t.constant(mem.read_states(self.spec.upd_source, &nodes)?);
            let h_plus = self.update_states(t, prior, msgs)?;
            let values = t.value(h_plus).clone();
            for (r, p) in pending.iter().enumerate() {
                replay.push(ReplayRecord {
                    node: p.node,
                    counterpart: p.counterpart,
                    event_idx: p.event_idx,
                    event_t: p.event_t,
                    is_source: p.is_source,
                    h_minus: mem.row(MemoryUnit::Minus, p.node).to_vec(),
                    h_plus: values.row(r).to_vec(),
                });
                row_of.insert(p.node, r);
            }
            let times: Vec<f64> = pending.iter().map(|p| p.event_t).collect();
            mem.write_states(MemoryUnit::Plus, &nodes, &values, Some(&times))?;
            parts.push(h_plus);
        }
        let rest: Vec<NodeId> = field.iter().copied().filter(|n| !row_of.contains_key(n)).collect();
        if !rest.is_empty() {
            let offset = row_of.len();
            for (k, &n) in rest.iter().enumerate() {
                row_of.insert(n, offset + k);
            }
            parts.push(t.constant(mem.read_states(MemoryUnit::Plus, &rest)?));
        }
        let table = t.concat_rows(&parts);
        let emb = self.embed_with_table(t, g, &queries, table, &row_of, drop)?;
        let src = t.gather(emb.z, (0..b).collect());
        let dst = t.gather(emb.z, (b..2 * b).collect());
        let neg = t.gather(emb.z, (2 * b..3 * b).collect());

        let mut last: HashMap<NodeId, usize> = HashMap::new();
        let mut order = Vec::new();
        for (k, e) in events.iter().enumerate() {
            for (node, row) in [(e.src, k), (e.dst, b + k)] {
                if last.insert(node, row).is_none() {
                    order.push(node);
                }
            }
        }
        let zv = t.value(emb.z);
        let rows: Vec<usize> = order.iter().map(|n| last[n]).collect();
        mem.write_states(MemoryUnit::Minus, &order, &zv.gather_rows(&rows), None)?;
        mem.store_pending(events);
        Ok(BatchOutput { src, dst, neg, replay })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spec(dim: usize, edge_dim: usize) -> EncoderSpec {
        EncoderSpec {
            dim,
            edge_dim,
            layers: 1,
            heads: 1,
            neighbors: 10,
            msg_source: MemoryUnit::Minus,
            upd_source: MemoryUnit::Plus,
        }
    }

    #[test]
    fn time_encoding_examples() {
        let mut store = ParamStore::new();
        let te = TimeEncoder::new(&mut store, "t", ParamGroup::Model, 4);
        let zero = te.encode_values(&store, &[0.0]).unwrap();
        assert_eq!(zero.data(), &[1.0; 4]);

        let mut store = ParamStore::new();
        let te = TimeEncoder::new(&mut store, "t", ParamGroup::Model, 2);
        *store.get_mut(te.omega) = Mat::row_vector(vec![1.0, 2.0]);
        let v = te.encode_values(&store, &[std::f64::consts::PI]).unwrap();
        assert!((v.get(0, 0) + 1.0).abs() < 1e-12);
        assert!((v.get(0, 1) - 1.0).abs() < 1e-12);

        *store.get_mut(te.omega) = Mat::zeros(1, 2);
        let v = te.encode_values(&store, &[0.0, 3.0, 1e6]).unwrap();
        assert!(v.data().iter().all(|&x| x == 1.0));

        assert!(matches!(te.encode_values(&store, &[-1.0]), Err(Error::NegativeDelta(_))));
    }

    #[test]
    fn message_layout_on_zero_memory() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, spec(2, 3), &mut rng);
        assert_eq!(enc.message_width(), 2 * 2 + 3 + 2);
        let g = TemporalGraph::new(
            2,
            vec![crate::graph::RawEvent { src: 0, dst: 1, t: 0.0, label: None }],
            3,
            vec![0.0; 3],
        )
        .unwrap();
        let mem = DualMemory::init_zero(2, 2);
        let p = PendingMessage { node: 0, counterpart: 1, event_idx: 0, event_t: 0.0, is_source: true };
        let mut t = Tape::new(&store);
        let m = enc.compute_messages(&mut t, &mem, &g, &[p]).unwrap();
        assert_eq!(t.value(m).data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);

        let wide = Encoder::new(&mut ParamStore::new(), spec(100, 172), &mut rng);
        assert_eq!(wide.message_width(), 472);
    }

    #[test]
    fn zero_weight_updater_is_a_fixpoint_at_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(&mut store, spec(3, 0), &mut rng);
        for id in [enc.gru.w_input, enc.gru.w_hidden, enc.gru.b_input, enc.gru.b_hidden] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut t = Tape::new(&store);
        let prior = t.constant(Mat::zeros(2, 3));
        let msg = t.constant(Mat::filled(2, enc.message_width(), 0.7));
        let h = enc.update_states(&mut t, prior, msg).unwrap();
        assert!(t.value(h).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn isolated_node_with_zero_output_layer_embeds_to_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&mut store, spec(2, 0), &mut rng);
        enc.layers[0].merge.output.zero(&mut store);
        let g = TemporalGraph::from_tuples(3, &[(0, 1, 1.0)]).unwrap();
        let mem = DualMemory::init_zero(3, 2);
        let mut t = Tape::new(&store);
        let e = enc.embed(&mut t, &mem, &g, &[(2, 5.0)], &mut Dropout::off()).unwrap();
        assert!(t.value(e.z).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_neighbor_gets_all_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(&mut store, EncoderSpec { heads: 2, ..spec(4, 0) }, &mut rng);
        let g = TemporalGraph::from_tuples(3, &[(0, 1, 1.0)]).unwrap();
        let mut mem = DualMemory::init_zero(3, 4);
        mem.write_states(MemoryUnit::Plus, &[1], &Mat::row_vector(vec![0.3, -0.2, 0.9, 0.1]), None).unwrap();
        let mut t = Tape::new(&store);
        let e = enc.embed(&mut t, &mem, &g, &[(0, 2.0)], &mut Dropout::off()).unwrap();
        let (w, heads) = t.attention_weights(e.attention[0]).unwrap();
        assert_eq!(heads, 2);
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }
}
