//! Dual node memory and the deferred-update store.
//!
//! `M+` holds each node's state right after its most recent replayed event,
//! `M−` the state right before its most recent event. An event's effect on
//! `M+` is deferred: the raw event is parked in the pending store and
//! replayed the next time the node is needed, so the loss of that later batch
//! can reach the message and update functions.

use std::collections::HashSet;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::graph::{Event, NodeId};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryUnit {
    Plus,
    Minus,
}

/// A parked event, seen from one endpoint. Edge features are looked up in the
/// graph by `event_idx` at replay time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendingMessage {
    pub node: NodeId,
    pub counterpart: NodeId,
    pub event_idx: usize,
    pub event_t: f64,
    pub is_source: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualMemory {
    dim: usize,
    plus: Mat,
    minus: Mat,
    last_t: Vec<f64>,
    prev_t: Vec<f64>,
    pending: Vec<Option<PendingMessage>>,
}

/// Deep copy of a [`DualMemory`], pending store included.
#[derive(Clone, Debug, PartialEq)]
pub struct MemorySnapshot(DualMemory);

impl DualMemory {
    pub fn init_zero(num_nodes: usize, dim: usize) -> Self {
        Self {
            dim,
            plus: Mat::zeros(num_nodes, dim),
            minus: Mat::zeros(num_nodes, dim),
            last_t: vec![0.0; num_nodes],
            prev_t: vec![0.0; num_nodes],
            pending: vec![None; num_nodes],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.last_t.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Back to the freshly initialised state.
    pub fn reset(&mut self) {
        *self = Self::init_zero(self.num_nodes(), self.dim);
    }

    fn unit(&self, unit: MemoryUnit) -> &Mat {
        match unit {
            MemoryUnit::Plus => &self.plus,
            MemoryUnit::Minus => &self.minus,
        }
    }

    fn check(&self, node: NodeId) -> Result<()> {
        if node >= self.num_nodes() {
            return Err(Error::NodeOutOfRange { node, num_nodes: self.num_nodes() });
        }
        Ok(())
    }

    pub fn row(&self, unit: MemoryUnit, node: NodeId) -> &[f64] {
        self.unit(unit).row(node)
    }

    /// Rows of `unit` in request order.
    pub fn read_states(&self, unit: MemoryUnit, nodes: &[NodeId]) -> Result<Mat> {
        for &n in nodes {
            self.check(n)?;
        }
        Ok(self.unit(unit).gather_rows(nodes))
    }

    /// Overwrites rows of `unit`. With `new_t`, each written node's timestamps
    /// shift: `prev_t ← last_t`, `last_t ← new_t`.
    pub fn write_states(&mut self, unit: MemoryUnit, nodes: &[NodeId], values: &Mat, new_t: Option<&[f64]>) -> Result<()> {
        if values.rows() != nodes.len() || values.cols() != self.dim {
            return Err(Error::Shape(format!(
                "writing {}x{} values for {} nodes of width {}",
                values.rows(),
                values.cols(),
                nodes.len(),
                self.dim
            )));
        }
        if let Some(ts) = new_t {
            if ts.len() != nodes.len() {
                return Err(Error::Shape(format!("{} timestamps for {} nodes", ts.len(), nodes.len())));
            }
        }
        let mut seen = HashSet::with_capacity(nodes.len());
        for (k, &n) in nodes.iter().enumerate() {
            self.check(n)?;
            if !seen.insert(n) {
                return Err(Error::DuplicateNode(n));
            }
            if let Some(ts) = new_t {
                if ts[k] < self.last_t[n] {
                    return Err(Error::NegativeDelta(ts[k] - self.last_t[n]));
                }
            }
        }
        let target = match unit {
            MemoryUnit::Plus => &mut self.plus,
            MemoryUnit::Minus => &mut self.minus,
        };
        for (k, &n) in nodes.iter().enumerate() {
            target.row_mut(n).copy_from_slice(values.row(k));
        }
        if let Some(ts) = new_t {
            for (&n, &t) in nodes.iter().zip(ts) {
                self.prev_t[n] = self.last_t[n];
                self.last_t[n] = t;
            }
        }
        Ok(())
    }

    pub fn last_t(&self, node: NodeId) -> f64 {
        self.last_t[node]
    }

    pub fn prev_t(&self, node: NodeId) -> f64 {
        self.prev_t[node]
    }

    /// Sets both timestamps directly; used when re-initialising from estimates.
    pub fn set_times(&mut self, node: NodeId, last_t: f64, prev_t: f64) {
        debug_assert!(prev_t <= last_t);
        self.last_t[node] = last_t;
        self.prev_t[node] = prev_t;
    }

    /// Parks each event under both endpoints, newest kept.
    pub fn store_pending(&mut self, events: &[Event]) {
        for e in events {
            self.pending[e.src] =
                Some(PendingMessage { node: e.src, counterpart: e.dst, event_idx: e.idx, event_t: e.t, is_source: true });
            self.pending[e.dst] =
                Some(PendingMessage { node: e.dst, counterpart: e.src, event_idx: e.idx, event_t: e.t, is_source: false });
        }
    }

    /// Removes and returns pending entries of `nodes`, in request order.
    pub fn take_pending(&mut self, nodes: &[NodeId]) -> Vec<PendingMessage> {
        nodes.iter().filter_map(|&n| self.pending.get_mut(n).and_then(Option::take)).collect()
    }

    pub fn pending(&self, node: NodeId) -> Option<&PendingMessage> {
        self.pending.get(node).and_then(Option::as_ref)
    }

    pub fn num_pending(&self) -> usize {
        self.pending.iter().filter(|p| p.is_some()).count()
    }

    pub fn clear_pending(&mut self) {
        self.pending.iter_mut().for_each(|p| *p = None);
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot(self.clone())
    }

    pub fn restore(&mut self, snap: &MemorySnapshot) -> Result<()> {
        if snap.0.num_nodes() != self.num_nodes() || snap.0.dim != self.dim {
            return Err(Error::Shape(format!(
                "snapshot is {}x{}, memory is {}x{}",
                snap.0.num_nodes(),
                snap.0.dim,
                self.num_nodes(),
                self.dim
            )));
        }
        self.clone_from(&snap.0);
        Ok(())
    }

    /// Binary layout (little endian): `num_nodes u64, dim u64`, then `M+` and
    /// `M−` row-major f64, `last_t` and `prev_t` f64 arrays, pending count
    /// u64 and per entry `node u64, counterpart u64, event_idx u64, event_t
    /// f64, is_source u8`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_u64::<LittleEndian>(self.num_nodes() as u64)?;
        w.write_u64::<LittleEndian>(self.dim as u64)?;
        for v in self.plus.data().iter().chain(self.minus.data()).chain(&self.last_t).chain(&self.prev_t) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        let pend: Vec<&PendingMessage> = self.pending.iter().flatten().collect();
        w.write_u64::<LittleEndian>(pend.len() as u64)?;
        for p in pend {
            w.write_u64::<LittleEndian>(p.node as u64)?;
            w.write_u64::<LittleEndian>(p.counterpart as u64)?;
            w.write_u64::<LittleEndian>(p.event_idx as u64)?;
            w.write_f64::<LittleEndian>(p.event_t)?;
            w.write_u8(p.is_source as u8)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = r.read_u64::<LittleEndian>()? as usize;
        let dim = r.read_u64::<LittleEndian>()? as usize;
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            let mut v = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let plus = Mat::from_vec(n, dim, read_vec(n * dim)?);
        let minus = Mat::from_vec(n, dim, read_vec(n * dim)?);
        let last_t = read_vec(n)?;
        let prev_t = read_vec(n)?;
        let mut mem = Self { dim, plus, minus, last_t, prev_t, pending: vec![None; n] };
        let count = r.read_u64::<LittleEndian>()? as usize;
        for _ in 0..count {
            let node = r.read_u64::<LittleEndian>()? as usize;
            let counterpart = r.read_u64::<LittleEndian>()? as usize;
            let event_idx = r.read_u64::<LittleEndian>()? as usize;
            let event_t = r.read_f64::<LittleEndian>()?;
            let is_source = r.read_u8()? != 0;
            if node >= n {
                return Err(Error::Checkpoint(format!("pending entry for node {node} beyond {n} nodes")));
            }
            mem.pending[node] = Some(PendingMessage { node, counterpart, event_idx, event_t, is_source });
        }
        Ok(mem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(idx: usize, src: NodeId, dst: NodeId, t: f64) -> Event {
        Event { idx, src, dst, t, label: None }
    }

    #[test]
    fn fresh_memory_is_zero() {
        let m = DualMemory::init_zero(3, 2);
        assert_eq!(m.read_states(MemoryUnit::Plus, &[0, 1, 2]).unwrap(), Mat::zeros(3, 2));
        assert_eq!(m.read_states(MemoryUnit::Minus, &[2]).unwrap(), Mat::zeros(1, 2));
        assert_eq!(m.last_t(1), 0.0);
        assert_eq!(m.snapshot(), DualMemory::init_zero(3, 2).snapshot());
        assert!(matches!(m.read_states(MemoryUnit::Plus, &[3]), Err(Error::NodeOutOfRange { .. })));
    }

    #[test]
    fn writes_respect_units_and_bookkeeping() {
        let mut m = DualMemory::init_zero(6, 2);
        m.write_states(MemoryUnit::Plus, &[3], &Mat::row_vector(vec![1.0, 1.0]), Some(&[2.0])).unwrap();
        let v = Mat::row_vector(vec![0.5, -0.5]);
        m.write_states(MemoryUnit::Plus, &[3], &v, Some(&[7.0])).unwrap();
        assert_eq!((m.prev_t(3), m.last_t(3)), (2.0, 7.0));
        assert_eq!(m.read_states(MemoryUnit::Plus, &[3]).unwrap(), v);
        assert_eq!(m.read_states(MemoryUnit::Minus, &[3]).unwrap(), Mat::zeros(1, 2));
        m.write_states(MemoryUnit::Minus, &[3], &Mat::row_vector(vec![9.0, 9.0]), None).unwrap();
        assert_eq!((m.prev_t(3), m.last_t(3)), (2.0, 7.0));
        assert_eq!(m.read_states(MemoryUnit::Plus, &[3]).unwrap(), v);
        let two = Mat::zeros(2, 2);
        assert!(matches!(m.write_states(MemoryUnit::Minus, &[1, 1], &two, None), Err(Error::DuplicateNode(1))));
        assert!(m.write_states(MemoryUnit::Plus, &[3], &Mat::zeros(1, 2), Some(&[1.0])).is_err());
    }

    #[test]
    fn pending_keeps_most_recent() {
        let mut m = DualMemory::init_zero(4, 1);
        let evs = [ev(0, 1, 2, 5.0), ev(1, 1, 3, 6.0)];
        m.store_pending(&evs);
        assert_eq!(m.pending(1).unwrap().event_t, 6.0);
        assert_eq!(m.pending(2).unwrap().event_t, 5.0);
        assert_eq!(m.pending(3).unwrap().event_t, 6.0);
        let before = m.clone();
        m.store_pending(&evs);
        assert_eq!(m, before);
        m.store_pending(&[]);
        assert_eq!(m, before);

        assert!(m.take_pending(&[0]).is_empty());
        let got = m.take_pending(&[1, 0]);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].counterpart, 3);
        assert!(m.take_pending(&[1]).is_empty());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut m = DualMemory::init_zero(3, 2);
        m.write_states(MemoryUnit::Plus, &[0], &Mat::row_vector(vec![1.0, 2.0]), Some(&[1.0])).unwrap();
        let snap = m.snapshot();
        m.write_states(MemoryUnit::Plus, &[0], &Mat::row_vector(vec![5.0, 5.0]), Some(&[3.0])).unwrap();
        m.store_pending(&[ev(0, 0, 1, 3.0)]);
        m.restore(&snap).unwrap();
        assert_eq!(m.row(MemoryUnit::Plus, 0), &[1.0, 2.0]);
        assert_eq!(m.num_pending(), 0);
        m.restore(&snap).unwrap();
        assert_eq!(m.snapshot(), snap);
        let mut other = DualMemory::init_zero(4, 2);
        assert!(other.restore(&snap).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let mut m = DualMemory::init_zero(3, 2);
        m.write_states(MemoryUnit::Minus, &[2], &Mat::row_vector(vec![0.25, -1.0]), None).unwrap();
        m.write_states(MemoryUnit::Plus, &[1], &Mat::row_vector(vec![0.5, 0.75]), Some(&[4.0])).unwrap();
        m.store_pending(&[ev(9, 2, 0, 5.0)]);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = DualMemory::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }
}
