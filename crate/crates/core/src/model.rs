//! All learnable components together with the per-batch forward/backward step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{sigmoid, Tape};
use crate::config::{RestarterKind, TrainConfig};
use crate::decoder::{recurrence_bits, Decoder};
use crate::encoder::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::graph::{Batch, TemporalGraph};
use crate::memory::DualMemory;
use crate::nn::Dropout;
use crate::params::{Grads, ParamStore};
use crate::restarter::{distill_loss, Restarter, RestartQuery, StaticRestarter, TransformerRestarter};
use crate::tensor::Mat;

/// Parameter initialisation draws from its own stream so that changing
/// data-order randomness never changes the initial weights.
const INIT_STREAM: u64 = 0x1217;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub dim: usize,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub restarter: Option<Restarter>,
}

/// Result of one training step on one batch.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub model_grads: Grads,
    pub restarter_grads: Option<Grads>,
    /// Link loss, per-event mean.
    pub l1: f64,
    /// Distillation loss, per-record mean; `None` without restarter or replay.
    pub l2: Option<f64>,
    pub events: usize,
}

/// Link probabilities for one scored batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scores {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl Model {
    pub fn new(config: &TrainConfig, g: &TemporalGraph) -> Result<Self> {
        config.validate()?;
        let dim = config.dim_for(g);
        if g.node_dim() != 0 && g.node_dim() != dim {
            return Err(Error::Config(format!("node features have width {}, memory_dim is {dim}", g.node_dim())));
        }
        if (2 * dim) % config.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide attention width {}", config.heads, 2 * dim)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let mut store = ParamStore::new();
        let spec = EncoderSpec {
            dim,
            edge_dim: g.edge_dim(),
            layers: config.layers,
            heads: config.heads,
            neighbors: config.neighbors,
            msg_source: config.msg_source,
            upd_source: config.upd_source,
        };
        let encoder = Encoder::new(&mut store, spec, &mut rng);
        let decoder = Decoder::new(&mut store, dim, &mut rng);
        let restarter = match config.restarter {
            RestarterKind::None => None,
            RestarterKind::Static => Some(Restarter::Static(StaticRestarter::new(&mut store, g.num_nodes(), dim))),
            RestarterKind::Transformer => Some(Restarter::Transformer(TransformerRestarter::new(
                &mut store,
                dim,
                g.edge_dim(),
                config.history,
                config.restarter_layers,
                config.restarter_heads,
                &mut rng,
            )?)),
        };
        Ok(Self { config: config.clone(), dim, store, encoder, decoder, restarter })
    }

    pub fn new_memory(&self, g: &TemporalGraph) -> DualMemory {
        DualMemory::init_zero(g.num_nodes(), self.dim)
    }

    fn bits(&self, g: &TemporalGraph, batch: &Batch) -> (Vec<(bool, bool)>, Vec<(bool, bool)>) {
        let n = self.config.neighbors;
        let events = batch.events(g);
        let pos = events.iter().map(|e| recurrence_bits(g, e.src, e.dst, e.t, n)).collect();
        let neg = events.iter().zip(&batch.neg_dst).map(|(e, &k)| recurrence_bits(g, e.src, k, e.t, n)).collect();
        (pos, neg)
    }

    /// Forward pass, link loss, distillation loss and both gradients for one
    /// batch. Memory is advanced; parameters are not touched.
    pub fn train_batch(
        &self,
        mem: &mut DualMemory,
        g: &TemporalGraph,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutput> {
        let b = batch.len();
        let (bits_pos, bits_neg) = self.bits(g, batch);
        let mut t = Tape::new(&self.store);
        let mut drop = Dropout::train(self.config.dropout, rng);
        let out = self.encoder.process_batch(&mut t, mem, g, batch, &mut drop)?;
        let lp = self.decoder.logits(&mut t, out.src, out.dst, &bits_pos);
        let ln = self.decoder.logits(&mut t, out.src, out.neg, &bits_neg);
        let logits = t.concat_rows(&[lp, ln]);
        let targets: Vec<f64> = (0..2 * b).map(|i| if i < b { 1.0 } else { 0.0 }).collect();
        let l1_sum = t.bce_logits_sum(logits, targets);
        let l1 = t.scale(l1_sum, 1.0 / b as f64);
        let l1_value = t.value(l1).item();
        if !l1_value.is_finite() {
            return Err(Error::Diverged { batch: batch.range.start, loss: l1_value });
        }
        let model_grads = t.backward(l1);

        let mut l2 = None;
        let mut restarter_grads = None;
        if let (Some(r), false) = (&self.restarter, out.replay.is_empty()) {
            let queries: Vec<RestartQuery> = out.replay.iter().map(RestartQuery::from_replay).collect();
            let (em, ep) = r.estimate(&mut t, g, &queries, &mut drop)?;
            let sum = distill_loss(&mut t, em, ep, &out.replay)?;
            let mean = t.scale(sum, 1.0 / out.replay.len() as f64);
            let v = t.value(mean).item();
            if !v.is_finite() {
                return Err(Error::Diverged { batch: batch.range.start, loss: v });
            }
            l2 = Some(v);
            restarter_grads = Some(t.backward(mean));
        }
        Ok(StepOutput { model_grads, restarter_grads, l1: l1_value, l2, events: b })
    }

    /// Scores a batch with frozen parameters and no dropout, advancing memory.
    pub fn score_batch(&self, mem: &mut DualMemory, g: &TemporalGraph, batch: &Batch) -> Result<Scores> {
        let (bits_pos, bits_neg) = self.bits(g, batch);
        let mut t = Tape::new(&self.store);
        let out = self.encoder.process_batch(&mut t, mem, g, batch, &mut Dropout::off())?;
        let lp = self.decoder.logits(&mut t, out.src, out.dst, &bits_pos);
        let ln = self.decoder.logits(&mut t, out.src, out.neg, &bits_neg);
        let pos: Vec<f64> = t.value(lp).data().iter().map(|&x| sigmoid(x)).collect();
        let neg: Vec<f64> = t.value(ln).data().iter().map(|&x| sigmoid(x)).collect();
        if pos.iter().chain(&neg).any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("link probability in batch at event {}", batch.range.start)));
        }
        Ok(Scores { pos, neg })
    }

    /// Source and destination pre-event embeddings for a batch, advancing memory.
    pub fn embed_batch(&self, mem: &mut DualMemory, g: &TemporalGraph, batch: &Batch) -> Result<(Mat, Mat)> {
        let mut t = Tape::new(&self.store);
        let out = self.encoder.process_batch(&mut t, mem, g, batch, &mut Dropout::off())?;
        Ok((t.value(out.src).clone(), t.value(out.dst).clone()))
    }
}
