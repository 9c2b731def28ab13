//! Ranking metrics and the evaluation protocols built on them.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoder::NodeClassifier;
use crate::error::{Error, Result};
use crate::graph::{Batch, BatchCursor, NegativePool, NodeId, Split, TemporalGraph};
use crate::memory::DualMemory;
use crate::model::{Model, Scores};
use crate::params::{Adam, AdamConfig, ParamGroup};
use crate::restarter::reinitialize;
use crate::tensor::Mat;

/// Average precision: the mean, over positives, of the precision at each
/// positive's rank when items are sorted by descending score.
///
/// Tie rule: items with equal scores are treated as being in uniformly random
/// order and the expected value over those orderings is returned. This makes
/// the result independent of input order. Without ties it is the plain
/// rank-precision mean.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(Error::Metric("average precision needs at least one positive".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut sum = 0.0;
    let (mut seen, mut seen_pos) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let s = j - i;
        let a = order[i..j].iter().filter(|&&k| labels[k]).count();
        if a > 0 {
            // A slot j of the group holds a positive with probability a/s; the
            // other a−1 positives fill the remaining s−1 slots at random.
            for slot in 1..=s {
                let before = if s > 1 { (slot - 1) as f64 * (a - 1) as f64 / (s - 1) as f64 } else { 0.0 };
                sum += (a as f64 / s as f64) * (seen_pos as f64 + 1.0 + before) / (seen + slot) as f64;
            }
        }
        seen += s;
        seen_pos += a;
        i = j;
    }
    Ok(sum / total_pos as f64)
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half (rank-sum form with mid-ranks).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Transductive,
    Inductive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub negative_seed: u64,
    pub config_hash: String,
    pub data_fingerprint: String,
    pub wall_clock_s: f64,
    pub restart: Option<String>,
    pub count: usize,
}

/// Streams `split` through the model in order with the split's fixed
/// negatives, advancing `mem`. Returns the scores of every event.
pub fn stream_split(model: &Model, mem: &mut DualMemory, g: &TemporalGraph, split: Split) -> Result<Scores> {
    let range = g.split_range(split);
    let pool = NegativePool::for_graph(g, model.config.negative_pool)?;
    let negatives = pool.fixed_for_range(range.clone(), model.config.eval_seed);
    let mut cursor = BatchCursor::new(range.clone(), model.config.batch_size);
    let mut all = Scores::default();
    while let Some(r) = cursor.next_range() {
        let neg_dst = negatives[r.start - range.start..r.end - range.start].to_vec();
        let s = model.score_batch(mem, g, &Batch { range: r, neg_dst })?;
        all.pos.extend(s.pos);
        all.neg.extend(s.neg);
    }
    Ok(all)
}

/// AP over the given events' positive and negative scores; `keep` filters events.
pub fn link_ap(scores: &Scores, keep: impl Fn(usize) -> bool) -> Result<(f64, usize)> {
    let mut s = Vec::new();
    let mut l = Vec::new();
    for k in 0..scores.pos.len() {
        if keep(k) {
            s.push(scores.pos[k]);
            l.push(true);
            s.push(scores.neg[k]);
            l.push(false);
        }
    }
    if s.is_empty() {
        return Err(Error::Eval("no events qualify for evaluation".into()));
    }
    Ok((average_precision(&s, &l)?, s.len() / 2))
}

/// Link-prediction AP on `split`, streamed from `mem` (which is advanced).
/// Inductive mode keeps only events with an endpoint in `unseen`.
pub fn eval_link_prediction_in_place(
    model: &Model,
    mem: &mut DualMemory,
    g: &TemporalGraph,
    split: Split,
    mode: EvalMode,
    unseen: &[NodeId],
) -> Result<EvalReport> {
    let start = Instant::now();
    let range = g.split_range(split);
    let scores = stream_split(model, mem, g, split)?;
    let unseen: HashSet<NodeId> = unseen.iter().copied().collect();
    let (value, count) = match mode {
        EvalMode::Transductive => link_ap(&scores, |_| true)?,
        EvalMode::Inductive => {
            let events = &g.events()[range];
            link_ap(&scores, |k| unseen.contains(&events[k].src) || unseen.contains(&events[k].dst))
                .map_err(|_| Error::Eval("inductive evaluation found no events with an unseen endpoint".into()))?
        }
    };
    Ok(EvalReport {
        task: format!("link_prediction_{}", if mode == EvalMode::Transductive { "transductive" } else { "inductive" }),
        split: split.name().into(),
        metric: "ap".into(),
        value,
        negative_seed: model.config.eval_seed,
        config_hash: model.config.hash(),
        data_fingerprint: g.fingerprint(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        restart: None,
        count,
    })
}

/// Like [`eval_link_prediction_in_place`] but leaves `mem` untouched.
pub fn eval_link_prediction(
    model: &Model,
    mem: &DualMemory,
    g: &TemporalGraph,
    split: Split,
    mode: EvalMode,
    unseen: &[NodeId],
) -> Result<EvalReport> {
    let mut scratch = mem.clone();
    eval_link_prediction_in_place(model, &mut scratch, g, split, mode, unseen)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestartInit {
    /// Estimates from the trained restarter.
    Restarter,
    /// Zero states (timestamps still taken from the history).
    Zero,
}

/// Re-initialises memory at the validation boundary from every event before
/// it, then evaluates validation and test in order. Returns both reports.
pub fn eval_with_restart(model: &Model, g: &TemporalGraph, init: RestartInit) -> Result<(EvalReport, EvalReport)> {
    let restarter = match init {
        RestartInit::Restarter => {
            Some(model.restarter.as_ref().ok_or_else(|| Error::Eval("no restarter to warm-start from".into()))?)
        }
        RestartInit::Zero => None,
    };
    let mut mem = model.new_memory(g);
    let boundary = g.split_range(Split::Val).start;
    let start = Instant::now();
    reinitialize(&mut mem, restarter, &model.store, g, 0..boundary)?;
    let restart_s = start.elapsed().as_secs_f64();
    let tag = match init {
        RestartInit::Restarter => "restarter",
        RestartInit::Zero => "zero",
    };
    let mut val = eval_link_prediction_in_place(model, &mut mem, g, Split::Val, EvalMode::Transductive, &[])?;
    let mut test = eval_link_prediction_in_place(model, &mut mem, g, Split::Test, EvalMode::Transductive, &[])?;
    for r in [&mut val, &mut test] {
        r.restart = Some(tag.into());
        r.wall_clock_s += restart_s;
    }
    Ok((val, test))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 30, patience: 5, batch_size: 200, learning_rate: 1e-3, seed: 0 }
    }
}

/// Trains a node classifier on `train` rows and picks the epoch with the best
/// validation AUROC. Returns the classifier and that AUROC (or `None` when the
/// validation labels are single-class).
pub fn fit_classifier(
    dim: usize,
    train: (&Mat, &[bool]),
    val: (&Mat, &[bool]),
    cfg: ClassifierConfig,
) -> Result<(NodeClassifier, Option<f64>)> {
    let mut clf = NodeClassifier::new(dim, cfg.seed);
    let mut opt = Adam::new(AdamConfig { lr: cfg.learning_rate, ..Default::default() }, ParamGroup::Model, &clf.store);
    let (x, y) = train;
    if x.rows() == 0 {
        return Err(Error::Eval("no training rows for the node classifier".into()));
    }
    let mut best = (None, clf.store.clone());
    let mut stale = 0;
    for _ in 0..cfg.epochs {
        for lo in (0..x.rows()).step_by(cfg.batch_size) {
            let hi = (lo + cfg.batch_size).min(x.rows());
            let rows: Vec<usize> = (lo..hi).collect();
            let grads = {
                let mut t = crate::autograd::Tape::new(&clf.store);
                let xb = t.constant(x.gather_rows(&rows));
                let logits = clf.mlp.forward(&mut t, xb, &mut crate::nn::Dropout::off());
                let targets = rows.iter().map(|&r| if y[r] { 1.0 } else { 0.0 }).collect();
                let loss = t.bce_logits_sum(logits, targets);
                let loss = t.scale(loss, 1.0 / rows.len() as f64);
                t.backward(loss)
            };
            opt.step(&mut clf.store, &grads);
        }
        let score = auroc(&clf.probabilities(val.0), val.1).ok();
        match (score, best.0) {
            (Some(s), Some(b)) if s <= b => stale += 1,
            (None, _) => stale += 1,
            _ => {
                best = (score, clf.store.clone());
                stale = 0;
            }
        }
        if stale >= cfg.patience {
            break;
        }
    }
    if best.0.is_some() {
        clf.store = best.1;
    }
    Ok((clf, best.0))
}

/// Dynamic node classification: embeds every event's source just before the
/// event (streaming from zero memory with frozen parameters), trains a head on
/// train-split events and reports test AUROC. Static labels, when present,
/// use each node's mean embedding over its split events instead.
pub fn eval_node_classification(model: &Model, g: &TemporalGraph, cfg: ClassifierConfig) -> Result<EvalReport> {
    let start = Instant::now();
    let dynamic = g.has_dynamic_labels();
    if !dynamic && g.static_labels().is_none() {
        return Err(Error::Eval("dataset has no node labels".into()));
    }
    let d = model.dim;
    let mut mem = model.new_memory(g);
    let mut src = Mat::zeros(g.num_events(), d);
    let mut dst = Mat::zeros(g.num_events(), d);
    let mut cursor = BatchCursor::new(0..g.num_events(), model.config.batch_size);
    while let Some(r) = cursor.next_range() {
        let neg_dst = g.events()[r.clone()].iter().map(|e| e.dst).collect();
        let (hs, hd) = model.embed_batch(&mut mem, g, &Batch { range: r.clone(), neg_dst })?;
        for (k, i) in r.enumerate() {
            src.row_mut(i).copy_from_slice(hs.row(k));
            dst.row_mut(i).copy_from_slice(hd.row(k));
        }
    }
    let collect = |split: Split| -> (Mat, Vec<bool>) {
        let range = g.split_range(split);
        if dynamic {
            let rows: Vec<usize> = range.clone().filter(|&i| g.event(i).label.is_some()).collect();
            let labels = rows.iter().map(|&i| g.event(i).label.unwrap()).collect();
            (src.gather_rows(&rows), labels)
        } else {
            let labels = g.static_labels().unwrap();
            let mut sums: std::collections::BTreeMap<NodeId, (Vec<f64>, usize)> = Default::default();
            for i in range {
                let e = g.event(i);
                for (node, m) in [(e.src, &src), (e.dst, &dst)] {
                    if labels[node].is_none() {
                        continue;
                    }
                    let entry = sums.entry(node).or_insert_with(|| (vec![0.0; d], 0));
                    entry.0.iter_mut().zip(m.row(i)).for_each(|(a, b)| *a += b);
                    entry.1 += 1;
                }
            }
            let mut data = Vec::new();
            let mut ys = Vec::new();
            for (node, (sum, n)) in sums {
                data.extend(sum.iter().map(|v| v / n as f64));
                ys.push(labels[node].unwrap());
            }
            (Mat::from_vec(ys.len(), d, data), ys)
        }
    };
    let (xtr, ytr) = collect(Split::Train);
    let (xva, yva) = collect(Split::Val);
    let (xte, yte) = collect(Split::Test);
    let (clf, _) = fit_classifier(d, (&xtr, &ytr), (&xva, &yva), cfg)?;
    let value = auroc(&clf.probabilities(&xte), &yte)?;
    Ok(EvalReport {
        task: if dynamic { "node_classification_dynamic" } else { "node_classification_static" }.into(),
        split: "test".into(),
        metric: "auroc".into(),
        value,
        negative_seed: model.config.eval_seed,
        config_hash: model.config.hash(),
        data_fingerprint: g.fingerprint(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        restart: None,
        count: yte.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        // two tied items, one positive: orders (+,−) → 1 and (−,+) → 1/2
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 0.75);
        assert!(matches!(average_precision(&[0.1], &[false]), Err(Error::Metric(_))));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
    }
}
