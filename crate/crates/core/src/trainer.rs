//! Loss aggregation, hard example mining, and the training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledDoc;
use crate::doc_model::{labels_from_forest, Forest, RelationLabelSet, UnifiedLabels};
use crate::error::{Error, Result};
use crate::metrics::{corpus_eval, CorpusReport};
use crate::model::{Forward, Model, ModelConfig};
use crate::proposer::RelationProposal;
use crate::nn::{adam_step, AdamConfig, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub adam: AdamConfig,
    pub ohem_pos: usize,
    pub ohem_neg: usize,
    /// Documents per optimizer step.
    pub accum: usize,
    /// Rescales the averaged gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// Stops training after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_every: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 1,
            adam: AdamConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamConfig::FULL_SCALE
            },
            ohem_pos: 32,
            ohem_neg: 32,
            accum: 8,
            clip_norm: Some(1.0),
            max_steps: None,
            eval_every: 1,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 50,
            adam: AdamConfig::FULL_SCALE,
            model: ModelConfig::full_scale(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.ohem_pos == 0 || self.ohem_neg == 0 || self.accum == 0 || self.eval_every == 0 {
            return Err(Error::Config("ohem counts, accum and eval_every must be at least 1".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        self.model.validate()
    }
}

/// Indices of the `n_pos` highest-loss positives and `n_neg` highest-loss
/// negatives, ties to the lower index; positives first, each group by index.
pub fn ohem_sample(losses: &[f64], positive: &[bool], n_pos: usize, n_neg: usize) -> Vec<usize> {
    assert_eq!(losses.len(), positive.len(), "one flag per loss");
    let pick = |want: bool, n: usize| {
        let mut idx: Vec<usize> = (0..losses.len()).filter(|&i| positive[i] == want).collect();
        idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
        idx.truncate(n);
        idx.sort_unstable();
        idx
    };
    let mut out = pick(true, n_pos);
    out.extend(pick(false, n_neg));
    out
}

/// Per-row softmax cross-entropy, outside the tape.
pub fn row_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row: Vec<f64> = logits.row(r).iter().map(|x| x.to_f64().unwrap()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            lse - row[t]
        })
        .collect()
}

/// The pairs a child's ground truth needs scored by the type head that the
/// proposals do not already contain.
pub fn missing_gt_pairs(proposals: &[RelationProposal], gt: &UnifiedLabels) -> Vec<(usize, usize)> {
    let k = proposals.len() / gt.len().max(1);
    (0..gt.len())
        .filter(|&j| !proposals[j * k..(j + 1) * k].iter().any(|p| p.parent == gt.parent()[j]))
        .map(|j| (gt.parent()[j], j))
        .collect()
}

/// The four loss terms and their sum.
pub struct LossTerms {
    pub total: Var,
    /// Parent, proposal type, refinement, final type.
    pub parts: [f64; 4],
    /// Children whose ground-truth parent is among their proposals.
    pub covered: usize,
    pub units: usize,
}

/// Type targets and positivity of `(parent, child)` pairs: the ground-truth
/// type for the true parent, `root` otherwise.
fn pair_targets(pairs: &[(usize, usize)], gt: &UnifiedLabels, root: usize) -> (Vec<usize>, Vec<bool>) {
    pairs
        .iter()
        .map(|&(i, j)| {
            if gt.parent()[j] == i {
                (gt.rel_type()[j], true)
            } else {
                (root, false)
            }
        })
        .unzip()
}

fn ohem_term<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    targets: &[usize],
    positive: &[bool],
    cfg: &TrainConfig,
) -> Result<Option<Var>> {
    let losses = row_cross_entropy(tape.value(logits), targets);
    let idx = ohem_sample(&losses, positive, cfg.ohem_pos, cfg.ohem_neg);
    if idx.is_empty() {
        return Ok(None);
    }
    let rows = tape.gather_rows(logits, &idx)?;
    let t: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
    tape.cross_entropy(rows, &t).map(Some)
}

/// Sum of the parent, proposal-type, refinement and final-type
/// cross-entropies. The type head rows of `fwd.cls_pairs` beyond the
/// proposals are expected to be [`missing_gt_pairs`].
pub fn total_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    fwd: &Forward,
    gt: &UnifiedLabels,
    labels: &RelationLabelSet,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let n = gt.len();
    let root = labels.root();
    let k = fwd.k();
    let mut terms = Vec::with_capacity(4);
    let mut parts = [0.0; 4];

    let parent = tape.cross_entropy(fwd.parent_logits, gt.parent())?;
    terms.push((0, parent));

    let (t, pos) = pair_targets(&fwd.cls_pairs, gt, root);
    if let Some(v) = ohem_term(tape, fwd.cls_logits, &t, &pos, cfg)? {
        terms.push((1, v));
    }

    let mut covered = Vec::new();
    let mut ranks = Vec::new();
    for j in 0..n {
        if let Some(p) = fwd.proposals[j * k..(j + 1) * k].iter().find(|p| p.parent == gt.parent()[j]) {
            covered.push(j);
            ranks.push(p.rank);
        }
    }
    if !covered.is_empty() {
        let rows = tape.gather_rows(fwd.refine_logits, &covered)?;
        terms.push((2, tape.cross_entropy(rows, &ranks)?));
    }

    let pairs: Vec<(usize, usize)> = fwd.proposals.iter().map(|p| (p.parent, p.child)).collect();
    let (t, pos) = pair_targets(&pairs, gt, root);
    if let Some(v) = ohem_term(tape, fwd.final_logits, &t, &pos, cfg)? {
        terms.push((3, v));
    }

    let mut total = terms[0].1;
    for &(i, v) in &terms {
        parts[i] = tape.value(v).item().to_f64().unwrap();
        if i > 0 {
            total = tape.add(total, v)?;
        }
    }
    Ok(LossTerms {
        total,
        parts,
        covered: covered.len(),
        units: n,
    })
}

/// Learning rate of optimizer step `t` under linear warmup.
pub fn warmup_lr(lr: f64, t: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        lr
    } else {
        lr * ((t + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub f1_field: f64,
    pub f1_tree: f64,
    pub teds_kvp: f64,
    pub teds_cg: f64,
    pub proposal_coverage: f64,
}

/// Held-out metrics of both decoding routes.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub refined: CorpusReport,
    pub proposal_only: CorpusReport,
    /// Fraction of units whose ground-truth parent is among the proposals.
    pub proposal_coverage: f64,
    pub predictions: Vec<Forest>,
}

pub fn evaluate<T: Real>(model: &Model<T>, docs: &[LabeledDoc]) -> Result<Evaluation> {
    let k = model.cfg.proposer.k;
    let (mut hit, mut units) = (0usize, 0usize);
    let mut refined = Vec::with_capacity(docs.len());
    let mut raw = Vec::with_capacity(docs.len());
    for d in docs {
        let gt = labels_from_forest(&d.doc, &d.gt, &model.labels)?;
        let p = model.predict(&d.doc)?;
        let kk = k.min(d.doc.len());
        hit += (0..d.doc.len())
            .filter(|&j| p.proposals[j * kk..(j + 1) * kk].iter().any(|q| q.parent == gt.parent()[j]))
            .count();
        units += d.doc.len();
        refined.push(p.refined.forest);
        raw.push(p.proposal_only.forest);
    }
    let doc_list: Vec<_> = docs.iter().map(|d| d.doc.clone()).collect();
    let gts: Vec<Forest> = docs.iter().map(|d| d.gt.clone()).collect();
    Ok(Evaluation {
        refined: corpus_eval(&doc_list, &refined, &gts)?,
        proposal_only: corpus_eval(&doc_list, &raw, &gts)?,
        proposal_coverage: if units == 0 { 1.0 } else { hit as f64 / units as f64 },
        predictions: refined,
    })
}

pub struct TrainOutcome<T: Real> {
    pub model: Model<T>,
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

/// Trains on `train`, evaluating on `eval` (or `train` when empty) and
/// reporting every record to `on_epoch` as it is produced.
pub fn train<T: Real>(
    labels: &RelationLabelSet,
    train: &[LabeledDoc],
    eval: &[LabeledDoc],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let gts = train
        .iter()
        .map(|d| labels_from_forest(&d.doc, &d.gt, labels))
        .collect::<Result<Vec<_>>>()?;
    let eval = if eval.is_empty() { train } else { eval };

    let mut model = Model::<T>::new(cfg.model.clone(), labels.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0bde_u64);
    let steps_per_epoch = train.len().div_ceil(cfg.accum);
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.accum) {
            if step >= max_steps {
                break;
            }
            let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            for &di in chunk {
                let (doc, gt) = (&train[di].doc, &gts[di]);
                let mut tape = model.tape();
                let fwd = model.forward(&mut tape, doc, |p| missing_gt_pairs(p, gt))?;
                let terms = total_loss(&mut tape, &fwd, gt, labels, cfg)?;
                let loss = tape.value(terms.total).item().to_f64().unwrap();
                if !loss.is_finite() {
                    return Err(Error::NonFinite { what: "loss", step });
                }
                loss_sum += loss;
                seen += 1;
                for (name, g) in tape.backward(terms.total)?.into_params() {
                    match acc.get_mut(&name) {
                        Some(a) => a.add_assign(&g),
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            let mut scale = 1.0 / chunk.len() as f64;
            if let Some(max) = cfg.clip_norm {
                let sq: f64 = acc.values().flat_map(|g| g.data()).map(|x| x.to_f64().unwrap().powi(2)).sum();
                let norm = sq.sqrt() * scale;
                if norm > max {
                    scale *= max / norm;
                }
            }
            let scale = T::c(scale);
            for g in acc.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = *x * scale);
            }
            adam_step(&mut model.params, &acc, &cfg.adam, warmup_lr(cfg.adam.lr, step, warmup), step)?;
            step += 1;
        }
        let last = epoch == cfg.epochs || step >= max_steps;
        if epoch % cfg.eval_every == 0 || last {
            let ev = evaluate(&model, eval)?;
            let rec = EpochRecord {
                epoch,
                loss: if seen == 0 { 0.0 } else { loss_sum / seen as f64 },
                f1_field: ev.refined.field.micro().f1(),
                f1_tree: ev.refined.tree.micro().f1(),
                teds_kvp: ev.refined.teds_kvp(),
                teds_cg: ev.refined.teds_cg(),
                proposal_coverage: ev.proposal_coverage,
            };
            log::info!(
                "epoch {epoch} step {step} loss {:.4} tree-F1 {:.3} TEDS kvp {:.3} cg {:.3} coverage {:.3}",
                rec.loss,
                rec.f1_tree,
                rec.teds_kvp,
                rec.teds_cg,
                rec.proposal_coverage
            );
            on_epoch(&rec);
            log.push(rec);
        }
        if last {
            break;
        }
    }
    Ok(TrainOutcome { model, log, steps: step })
}
