use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use formtree_core::corpus::{
    generate_corpus, load_corpus, read_raw_corpus, save_corpus, save_raw_corpus,
};
use formtree_core::doc_model::assemble_forest;
use formtree_core::metrics::doc_eval;
use formtree_core::nn::{stored_dtype, Archive, Real, Tensor};
use formtree_core::trainer::{self, EpochRecord};
use formtree_core::{
    decode, CorpusReport, Document, Forest, Model, Prediction, RawCorpus, RelationLabelSet,
    UnifiedLabels,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{required, FileConfig, Precision, Route};
use crate::{Cli, Command, DecodeArgs, EvalArgs, GenArgs, InspectArgs, PredictArgs, TrainArgs};

struct Ctx {
    file: FileConfig,
    json: bool,
    jobs: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        json: cli.json || file.json,
        jobs: cli.jobs.unwrap_or(file.jobs),
        file,
    };
    match cli.cmd {
        Command::Gen(a) => gen(ctx, a),
        Command::Train(a) => train(ctx, a),
        Command::Predict(a) => predict(ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::Decode(a) => decode_scores(ctx, a),
        Command::Inspect(a) => inspect(ctx, a),
    }
}

impl Ctx {
    fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("{}", path.display()))
}

fn emit(out: Option<&Path>, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    match out {
        Some(p) => write_text(p, &s),
        None => {
            print!("{s}");
            Ok(())
        }
    }
}

fn gen(ctx: Ctx, a: GenArgs) -> Result<()> {
    let mut cfg = ctx.file.gen;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.n_docs = a.n_docs.unwrap_or(cfg.n_docs);
    let out = required(a.out, ctx.file.out, "out")?;
    let corpus = generate_corpus(&cfg)?;
    save_corpus(&corpus, &out)?;
    let stats = corpus.stats();
    if ctx.json {
        println!("{}", serde_json::to_string(&stats)?);
    } else {
        print!("{}", stats.to_table());
    }
    Ok(())
}

/// A model in whichever precision its checkpoint was written.
enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("{}", path.display()))?;
        let at = || format!("{}", path.display());
        Ok(match stored_dtype(&bytes).with_context(at)?.as_deref() {
            Some("f64") => AnyModel::F64(Model::from_archive(Archive::from_bytes(&bytes).with_context(at)?)?),
            _ => AnyModel::F32(Model::from_archive(Archive::from_bytes(&bytes).with_context(at)?)?),
        })
    }

    fn labels(&self) -> &RelationLabelSet {
        match self {
            AnyModel::F32(m) => &m.labels,
            AnyModel::F64(m) => &m.labels,
        }
    }

    fn predict(&self, doc: &Document) -> formtree_core::Result<Prediction> {
        match self {
            AnyModel::F32(m) => m.predict(doc),
            AnyModel::F64(m) => m.predict(doc),
        }
    }
}

fn train(ctx: Ctx, a: TrainArgs) -> Result<()> {
    let file = ctx.file;
    let mut cfg = file.train;
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.adam.lr = a.lr.unwrap_or(cfg.adam.lr);
    cfg.max_steps = a.max_steps.or(cfg.max_steps);
    let precision = a.precision.unwrap_or(file.precision);
    let corpus_path = required(a.corpus, file.corpus, "corpus")?;
    let out = required(a.out_ckpt, file.out_ckpt, "out-ckpt")?;
    let log_path = a.log.or(file.log).unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    if ctx.jobs > 1 {
        log::warn!("training is single-threaded; --jobs {} ignored", ctx.jobs);
    }
    let corpus = load_corpus(&corpus_path)?;
    let (tr, te) = corpus.split(a.test_docs.unwrap_or(file.test_docs));
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
    }
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("{}", log_path.display()))?);
    let mut log_err = None;
    let json = ctx.json;
    let on_epoch = |r: &EpochRecord| {
        if !json {
            eprintln!(
                "epoch {:>4}  loss {:.4}  field-F1 {:.4}  tree-F1 {:.4}  TEDS kvp {:.4} cg {:.4}  coverage {:.4}",
                r.epoch, r.loss, r.f1_field, r.f1_tree, r.teds_kvp, r.teds_cg, r.proposal_coverage
            );
        }
        let line = serde_json::to_string(r).expect("records serialize");
        if let Err(e) = writeln!(log, "{line}").and_then(|()| log.flush()) {
            log_err.get_or_insert(e);
        }
    };
    let mut extra = BTreeMap::new();
    extra.insert("train".to_string(), serde_json::to_value(&cfg)?);
    let (records, steps) = match precision {
        Precision::F32 => fit::<f32>(&tr.labels, &tr, &te, &cfg, on_epoch, &out, extra)?,
        Precision::F64 => fit::<f64>(&tr.labels, &tr, &te, &cfg, on_epoch, &out, extra)?,
    };
    if let Some(e) = log_err {
        return Err(anyhow!(e).context(format!("{}", log_path.display())));
    }
    let last = records.last().ok_or_else(|| anyhow!("training produced no evaluation"))?;
    let summary = json!({
        "checkpoint": out,
        "log": log_path,
        "steps": steps,
        "final": last,
    });
    if json {
        println!("{}", serde_json::to_string(&summary)?);
    } else {
        println!("wrote {} after {steps} steps (log {})", out.display(), log_path.display());
    }
    Ok(())
}

fn fit<T: Real>(
    labels: &RelationLabelSet,
    tr: &formtree_core::Corpus,
    te: &formtree_core::Corpus,
    cfg: &formtree_core::TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
    out: &Path,
    mut extra: BTreeMap<String, Value>,
) -> Result<(Vec<EpochRecord>, usize)> {
    let o = trainer::train::<T>(labels, &tr.docs, &te.docs, cfg, on_epoch)?;
    extra.insert("steps".into(), o.steps.into());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
    }
    o.model.save(out, extra)?;
    Ok((o.log, o.steps))
}

fn same_schema(a: &RelationLabelSet, b: &RelationLabelSet) -> bool {
    a.names().eq(b.names())
}

fn route_labels(p: &Prediction, route: Route, labels: &RelationLabelSet) -> formtree_core::Result<UnifiedLabels> {
    match route {
        Route::Refined => p.unified_labels(labels),
        Route::ProposalOnly => {
            let (parent, rel) = p.proposal_only.labels(&p.types, labels);
            UnifiedLabels::new(parent, rel, labels)
        }
    }
}

fn file_stem(i: usize, doc_id: &str) -> String {
    let clean: String = doc_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{i:05}_{clean}")
}

fn predict(ctx: Ctx, a: PredictArgs) -> Result<()> {
    let file = &ctx.file;
    let corpus_path = required(a.corpus, file.corpus.clone(), "corpus")?;
    let ckpt = required(a.ckpt, file.ckpt.clone(), "ckpt")?;
    let out = required(a.out, file.out.clone(), "out")?;
    let dot = a.dot.or(file.dot.clone());
    let route = a.route.unwrap_or(file.route);
    let raw = read_raw_corpus(&corpus_path)?;
    let model = AnyModel::load(&ckpt)?;
    let labels = model.labels().clone();
    if !same_schema(&raw.labels, &labels) {
        bail!(
            "{}: relation schema differs from checkpoint {}",
            corpus_path.display(),
            ckpt.display()
        );
    }
    let preds: Vec<(UnifiedLabels, Forest, usize)> = ctx.pool()?.install(|| {
        raw.docs
            .par_iter()
            .map(|(doc, _)| {
                let p = model.predict(doc)?;
                let ul = route_labels(&p, route, &labels)?;
                let (forest, diagnostics) = assemble_forest(ul.parent(), ul.rel_type(), &labels);
                Ok((ul, forest, diagnostics.len()))
            })
            .collect::<formtree_core::Result<_>>()
    })?;
    if let Some(dir) = &dot {
        std::fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
        for (i, ((doc, _), (_, forest, _))) in raw.docs.iter().zip(&preds).enumerate() {
            write_text(&dir.join(format!("{}.dot", file_stem(i, &doc.doc_id))), &forest.to_dot(doc))?;
        }
    }
    let malformed: usize = preds.iter().map(|p| p.1.trees.iter().filter(|t| t.malformed).count()).sum();
    let n = preds.len();
    let docs = raw.docs.into_iter().zip(preds).map(|((doc, _), (ul, _, _))| (doc, ul)).collect();
    save_raw_corpus(&RawCorpus { labels, docs }, &out)?;
    if ctx.json {
        println!("{}", json!({ "documents": n, "out": out, "malformed_trees": malformed }));
    } else {
        println!("predicted {n} documents into {} ({malformed} malformed trees)", out.display());
    }
    Ok(())
}

/// Re-expresses `ul` (over `from`) in the label space `to`.
fn relabel(ul: &UnifiedLabels, from: &RelationLabelSet, to: &RelationLabelSet) -> Result<Vec<usize>> {
    ul.rel_type()
        .iter()
        .map(|&r| {
            to.get(from.name(r))
                .ok_or_else(|| anyhow!("relation type {:?} is not in the ground-truth schema", from.name(r)))
        })
        .collect()
}

fn eval(ctx: Ctx, a: EvalArgs) -> Result<()> {
    let file = &ctx.file;
    let pred_path = required(a.pred, file.pred.clone(), "pred")?;
    let gt_path = required(a.gt, file.gt.clone(), "gt")?;
    let out = a.out.or(file.out.clone());
    let gt = load_corpus(&gt_path)?;
    let pred = read_raw_corpus(&pred_path)?;
    if pred.docs.len() != gt.docs.len() {
        bail!(
            "{} has {} documents, {} has {}",
            pred_path.display(),
            pred.docs.len(),
            gt_path.display(),
            gt.docs.len()
        );
    }
    for (i, ((pd, _), g)) in pred.docs.iter().zip(&gt.docs).enumerate() {
        if pd.doc_id != g.doc.doc_id || pd.len() != g.doc.len() {
            bail!(
                "document {i}: prediction {:?} ({} units) does not match ground truth {:?} ({} units)",
                pd.doc_id,
                pd.len(),
                g.doc.doc_id,
                g.doc.len()
            );
        }
    }
    let reports: Vec<CorpusReport> = ctx.pool()?.install(|| {
        pred.docs
            .par_iter()
            .zip(&gt.docs)
            .map(|((_, ul), g)| {
                let rel = relabel(ul, &pred.labels, &gt.labels)?;
                let (forest, _) = assemble_forest(ul.parent(), &rel, &gt.labels);
                Ok(doc_eval(&g.doc, &forest, &g.gt)?)
            })
            .collect::<Result<_>>()
    })?;
    let mut total = CorpusReport::default();
    for r in &reports {
        total.merge(r);
    }
    let report = total.to_json();
    if let Some(p) = &out {
        emit(Some(p), &report)?;
    }
    if ctx.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", total.to_table());
    }
    Ok(())
}

fn rows_of(t: &Tensor<f64>) -> Vec<&[f64]> {
    t.data().chunks(t.cols().max(1)).collect()
}

fn decode_scores(ctx: Ctx, a: DecodeArgs) -> Result<()> {
    let file = &ctx.file;
    let path = required(a.scores, file.scores.clone(), "scores")?;
    let out = a.out.or(file.out.clone());
    let mode = a.score_mode.unwrap_or(file.score_mode);
    let text = std::fs::read_to_string(&path).with_context(|| format!("{}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?;
    let bad = |m: String| anyhow!("{}: {m}", path.display());
    let labels = match v.get("schema") {
        Some(s) => RelationLabelSet::from_names(
            &serde_json::from_value::<Vec<String>>(s.clone()).map_err(|e| bad(format!("schema: {e}")))?,
        )?,
        None => RelationLabelSet::form_default(),
    };
    let r: Vec<Vec<f64>> = serde_json::from_value(v.get("R").cloned().ok_or_else(|| bad("missing \"R\"".into()))?)
        .map_err(|e| bad(format!("R: {e}")))?;
    let c: Vec<Vec<Value>> = serde_json::from_value(v.get("C").cloned().ok_or_else(|| bad("missing \"C\"".into()))?)
        .map_err(|e| bad(format!("C: {e}")))?;
    let n = r.len();
    if r.iter().any(|row| row.len() != n) || c.len() != n || c.iter().any(|row| row.len() != n) {
        return Err(bad(format!("R and C must both be {n} x {n}")));
    }
    let types = c
        .iter()
        .map(|row| {
            row.iter()
                .map(|x| match x {
                    Value::Number(k) => k
                        .as_u64()
                        .map(|k| k as usize)
                        .filter(|&k| k < labels.len())
                        .ok_or_else(|| bad(format!("relation id {k} out of range"))),
                    Value::String(s) => labels.get(s).ok_or_else(|| bad(format!("unknown relation type {s:?}"))),
                    other => Err(bad(format!("C entries must be ids or names, got {other}"))),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = Tensor::new(vec![n, n], r.into_iter().flatten().collect())?;
    let d = decode(&scores, &types, &labels, mode.into())?;
    let (parent, rel) = d.labels(&types, &labels);
    let result = json!({
        "parent": parent,
        "rel_type": rel.iter().map(|&t| labels.name(t)).collect::<Vec<_>>(),
        "score": d.score,
        "diagnostics": d.diagnostics,
        "forest": d.forest.to_json(None),
    });
    emit(out.as_deref(), &result)
}

fn inspect(ctx: Ctx, a: InspectArgs) -> Result<()> {
    let file = &ctx.file;
    let corpus_path = required(a.corpus, file.corpus.clone(), "corpus")?;
    let ckpt = required(a.ckpt, file.ckpt.clone(), "ckpt")?;
    let which = required(a.doc, file.doc.clone(), "doc")?;
    let out = a.out.or(file.out.clone());
    let raw = read_raw_corpus(&corpus_path)?;
    let doc = raw
        .docs
        .iter()
        .map(|(d, _)| d)
        .find(|d| d.doc_id == which)
        .or_else(|| which.parse::<usize>().ok().and_then(|i| raw.docs.get(i).map(|(d, _)| d)))
        .ok_or_else(|| anyhow!("{}: no document {which:?}", corpus_path.display()))?;
    let model = AnyModel::load(&ckpt)?;
    let labels = model.labels();
    let p = model.predict(doc)?;
    let ul = p.unified_labels(labels)?;
    let mask_rows = |m: &formtree_core::nn::Mask| -> Vec<String> {
        (0..m.rows)
            .map(|q| (0..m.cols).map(|k| if m.get(q, k) { '1' } else { '0' }).collect())
            .collect()
    };
    let result = json!({
        "doc_id": doc.doc_id,
        "schema": labels.names().collect::<Vec<_>>(),
        "R": rows_of(&p.r),
        "C": p.types,
        "proposals": p.proposals,
        "tree_proposals": p.tree_proposals,
        "levels": p.levels,
        "masks": {
            "self": mask_rows(&p.masks.self_mask),
            "cross": mask_rows(&p.masks.cross_mask),
        },
        "refine_probs": rows_of(&p.refine_probs),
        "prediction": {
            "parent": ul.parent(),
            "rel_type": ul.rel_names(labels),
            "forest": p.refined.forest.to_json(Some(doc)),
        },
    });
    emit(out.as_deref(), &result)
}
