use std::io::Write;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use serde_json::json;

use incoforge_annotation::service::{baseline_report, export_rows, load_state};
use incoforge_annotation::{candidates_for, AgreementPolicy, AnnotationService, Selection, ServiceConfig};

use super::{choice, read_instances, write_jsonl};
use crate::flags::RunConfig;
use crate::manifest::{record, Manifest};
use crate::UsageError;

fn selection(cfg: &RunConfig, name: &str) -> Result<Selection, UsageError> {
    Ok(match choice(cfg, name, &["all", "corrupted"])? {
        "all" => Selection::All,
        _ => Selection::Corrupted,
    })
}

pub fn serve(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = cfg.path("data-dir")?;
    let token = cfg.raw("admin-token").ok_or_else(|| UsageError::missing("admin-token"))?;
    let mut sc = ServiceConfig::new(token);
    sc.policy = AgreementPolicy::new(cfg.get("n-judges")?, cfg.get("required-agree")?)
        .map_err(|e| UsageError::new("--required-agree", e.to_string()))?;
    sc.baseline_per_instance = cfg.get("baseline-judges")?;
    sc.screening_threshold = cfg.get("screening-threshold")?;
    sc.snapshot_every = cfg.get("snapshot-every")?;
    if let Some(p) = cfg.opt_path("probes") {
        let sel = selection(cfg, "probe-selection")?;
        for inst in read_instances(&p)? {
            sc.probes.extend(candidates_for(&inst, sel)?);
        }
    }
    sc.validate().map_err(|e| UsageError::new("--admin-token", e.to_string()))?;
    let static_dir = cfg.opt_path("static");
    if let Some(s) = &static_dir {
        if !s.is_dir() {
            return Err(UsageError::new("--static", format!("{} is not a directory", s.display())).into());
        }
    }
    let svc = AnnotationService::open(&dir, sc).with_context(|| format!("opening journal in {}", dir.display()))?;
    if let Some(p) = cfg.opt_path("instances") {
        let r = svc.enqueue_instances(&read_instances(&p)?, selection(cfg, "selection")?)?;
        println!("enqueued {} candidates ({} already present, {} rejected)", r.accepted.len(), r.duplicates.len(), r.rejected.len());
    }
    let m = Manifest::build(cfg, &[], &[], json!({ "progress": svc.progress() }))?;
    m.write(cfg, &dir.join("serve"))?;

    let addr: String = cfg.get("addr")?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        let app = incoforge_annotation::http::router(Arc::new(svc), static_dir);
        incoforge_annotation::http::serve(listener, app).await?;
        Ok::<_, anyhow::Error>(())
    })
}

pub fn export_testset(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = cfg.path("data-dir")?;
    let output = cfg.path("output")?;
    let st = load_state(&dir)?;
    let rows = export_rows(&st)?;
    write_jsonl(&output, &rows)?;
    let f = st.filter.as_ref().ok_or_else(|| anyhow!("the agreement filter has not run"))?;
    record(
        cfg,
        &output,
        &[],
        &[&output],
        json!({ "kept": f.kept.len(), "candidates": f.tallies.len(), "retention": f.retention(), "policy": f.policy, "journal_seq": st.seq }),
    )?;
    println!("exported {} of {} candidates -> {}", f.kept.len(), f.tallies.len(), output.display());
    Ok(())
}

pub fn export_baseline(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = cfg.path("data-dir")?;
    let output = cfg.path("output")?;
    let st = load_state(&dir)?;
    let report = baseline_report(&st, cfg.get("baseline-judges")?)?;
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(&output, text.clone() + "\n")?;
    record(cfg, &output, &[], &[&output], json!({ "judges": report.judges.len(), "journal_seq": st.seq }))?;
    println!("{text}");
    Ok(())
}
