use std::path::Path;

use anyhow::bail;
use serde_json::{json, Map, Value};

use incoforge_core::corpus::tokenize;
use incoforge_core::evalkit::{auc, auc_by_position, classification_report, generation_report, GenerationRecord, Prediction, PredictionRecord};

use super::read_jsonl;
use crate::flags::RunConfig;
use crate::manifest::record;
use crate::UsageError;

pub fn evaluate(cfg: &RunConfig) -> anyhow::Result<()> {
    let preds = cfg.opt_path("preds");
    let gens = cfg.opt_path("generations");
    if preds.is_none() && gens.is_none() {
        return Err(UsageError::new("--preds", "one of --preds or --generations is required").into());
    }
    let threshold: f64 = cfg.get("threshold")?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(UsageError::new("--threshold", "must lie in [0, 1]").into());
    }
    let mut report = Map::new();
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(p) = &preds {
        let recs: Vec<PredictionRecord> = read_jsonl(p)?;
        if recs.is_empty() {
            bail!("{} holds no predictions", p.display());
        }
        let flat: Vec<Prediction> = recs.iter().map(|r| Prediction { score: r.score, gold: r.gold }).collect();
        let cls = classification_report(&flat, threshold)?;
        let positives = flat.iter().filter(|p| p.gold == 1).count();
        let auc_value = if positives == 0 || positives == flat.len() { None } else { Some(auc(&flat)?.auc) };
        report.insert("classification".into(), serde_json::to_value(&cls)?);
        report.insert("auc".into(), json!(auc_value));
        report.insert("positions".into(), json!(flat.len()));
        report.insert("positives".into(), json!(positives));
        report.insert("threshold".into(), json!(threshold));
        if cfg.flag("by-position")? {
            let by: Map<String, Value> =
                auc_by_position(&recs).into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
            report.insert("auc_by_position".into(), Value::Object(by));
        }
        inputs.push(p);
    }
    if let Some(g) = &gens {
        let recs: Vec<GenerationRecord> = read_jsonl(g)?;
        if recs.is_empty() {
            bail!("{} holds no generations", g.display());
        }
        let hyps: Vec<Vec<String>> = recs.iter().map(|r| tokenize(&r.hyp)).collect();
        let refs: Vec<Vec<String>> = recs.iter().map(|r| tokenize(&r.reference)).collect();
        let exact = recs.iter().filter(|r| r.hyp == r.reference).count();
        report.insert("generation".into(), serde_json::to_value(generation_report(&hyps, &refs)?)?);
        report.insert("exact_match".into(), json!(exact as f64 / recs.len() as f64));
        inputs.push(g);
    }
    let text = serde_json::to_string_pretty(&Value::Object(report.clone()))?;
    println!("{text}");
    if let Some(out) = cfg.opt_path("output") {
        std::fs::write(&out, text + "\n")?;
        record(cfg, &out, &inputs, &[&out], Value::Object(report))?;
    }
    Ok(())
}
