use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::seq::SliceRandom;
use serde_json::json;

use incoforge_core::corpus::read_corpus;
use incoforge_core::embedder::{EmbeddingProvider, ProviderSpec};
use incoforge_core::evalkit::GenerationRecord;
use incoforge_core::forge::Instance;
use incoforge_core::seed::{rng_for, sha256_hex};
use incoforge_core::Sentence;
use incoforge_detector::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use incoforge_detector::decode::{retrieve_sentence, PoolEntry};
use incoforge_detector::train::{predict as predict_one, score_examples, write_history_csv, Optimizer, TrainReport};
use incoforge_detector::{DetectorModel, Featurizer, InputMode, Scalar, TrainConfig, TransformerConfig, Vocab};

use super::{build_provider, choice, provider_spec, read_instances, write_jsonl};
use crate::flags::RunConfig;
use crate::manifest::{path_sha256, record, sibling};
use crate::UsageError;

struct Trained {
    report: TrainReport,
    params: usize,
    checkpoint_sha256: String,
}

fn featurizer<'a>(config: &TransformerConfig, provider: &'a EmbeddingProvider, vocab: Option<&'a Vocab>) -> anyhow::Result<Featurizer<'a>> {
    if provider.dim() != config.d_embed {
        bail!("embedding provider has dimension {} but the model expects {}", provider.dim(), config.d_embed);
    }
    Ok(match config.mode {
        InputMode::Sentence => Featurizer::sentence(provider, config.max_positions),
        InputMode::Token => Featurizer::token(
            provider,
            vocab.ok_or_else(|| anyhow!("token-mode checkpoint carries no vocabulary"))?,
            config.max_positions,
        ),
    })
}

fn parse_weights(raw: &str) -> Result<Vec<f64>, UsageError> {
    raw.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| UsageError::new("--sm-sweep", format!("{s:?}: {e}"))))
        .collect()
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let output = cfg.path("output")?;
    let train_path = cfg.path("train")?;
    let dev_path = cfg.opt_path("dev");
    let mut inputs: Vec<PathBuf> = vec![train_path.clone()];
    inputs.extend(dev_path.clone());
    inputs.extend(cfg.opt_path("init-from"));
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();

    let Some(raw) = cfg.raw("sm-sweep") else {
        let t = train_one(cfg, cfg.get("sm-weight")?, &output)?;
        let history = sibling(&output, "history.csv");
        let last = t.report.history.last().cloned();
        record(
            cfg,
            &output,
            &input_refs,
            &[&output, &history],
            json!({
                "params": t.params,
                "epochs_run": t.report.history.len(),
                "stopped_early": t.report.stopped_early,
                "zero_hhat": t.report.zero_hhat,
                "final": last,
            }),
        )?;
        if let Some(e) = last {
            let dev = e.dev_auc.map(|a| format!(", dev AUC {a:.4}")).unwrap_or_default();
            println!("epoch {}: bce {:.4}, sm {:.4}{dev}", e.epoch, e.bce, e.sm);
        }
        println!("checkpoint {} ({} params, sha256 {})", output.display(), t.params, t.checkpoint_sha256);
        return Ok(());
    };
    let weights = parse_weights(raw)?;
    let summary = sibling(&output, "sweep.csv");
    let mut w = BufWriter::new(File::create(&summary)?);
    writeln!(w, "sm_weight,checkpoint,epochs,bce,sm,dev_auc")?;
    let mut outputs = Vec::new();
    for wt in &weights {
        let path = sibling(&output, &format!("sm{wt}"));
        let t = train_one(cfg, *wt, &path)?;
        let e = t.report.history.last().ok_or_else(|| anyhow!("no epochs were run"))?;
        let dev = e.dev_auc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(w, "{wt},{},{},{},{},{dev}", path.display(), e.epoch, e.bce, e.sm)?;
        println!("sm_weight {wt}: bce {:.4}, sm {:.4}, dev AUC {dev}", e.bce, e.sm);
        outputs.push(path);
    }
    w.flush()?;
    drop(w);
    let mut out_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    out_refs.push(&summary);
    record(cfg, &summary, &input_refs, &out_refs, json!({ "weights": weights }))?;
    println!("sweep summary {}", summary.display());
    Ok(())
}

fn train_one(cfg: &RunConfig, sm_weight: f64, out: &Path) -> anyhow::Result<Trained> {
    match choice(cfg, "precision", &["f32", "f64"])? {
        "f32" => train_typed::<f32>(cfg, sm_weight, out),
        _ => train_typed::<f64>(cfg, sm_weight, out),
    }
}

fn train_config(cfg: &RunConfig, sm_weight: f64) -> anyhow::Result<TrainConfig> {
    let optimizer = match choice(cfg, "optimizer", &["adam", "sgd"])? {
        "adam" => Optimizer::default(),
        _ => Optimizer::Sgd { momentum: cfg.get("momentum")? },
    };
    let clip: f64 = cfg.get("grad-clip")?;
    let tc = TrainConfig {
        lr: cfg.get("lr")?,
        batch_size: cfg.get("batch-size")?,
        epochs: cfg.get("epochs")?,
        sm_weight,
        threshold: 0.5,
        seed: cfg.get("seed")?,
        optimizer,
        weight_decay: cfg.get("weight-decay")?,
        grad_clip: (clip > 0.0).then_some(clip),
        parallel: cfg.flag("parallel")?,
        target_dev_auc: cfg.opt("target-dev-auc")?,
    };
    tc.validate().map_err(|e| UsageError::new("--lr", e.to_string()))?;
    Ok(tc)
}

fn train_typed<T: Scalar>(cfg: &RunConfig, sm_weight: f64, out: &Path) -> anyhow::Result<Trained> {
    let tc = train_config(cfg, sm_weight)?;
    let train_inst = read_instances(&cfg.path("train")?)?;
    let dev_inst = cfg.opt_path("dev").map(|p| read_instances(&p)).transpose()?;
    let task = train_inst.first().ok_or_else(|| anyhow!("training set is empty"))?.mode();

    let (mut model, spec, vocab): (DetectorModel<T>, ProviderSpec, Option<Vocab>) = match cfg.opt_path("init-from") {
        Some(init) => {
            let (m, meta) = load_checkpoint::<T>(&init).with_context(|| format!("loading {}", init.display()))?;
            let spec = meta.provider.ok_or_else(|| anyhow!("{} records no embedding provider", init.display()))?;
            (m, spec, meta.vocab)
        }
        None => {
            let spec = provider_spec(cfg)?;
            let mode: InputMode = cfg.get("input-mode")?;
            let (min_count, max_size): (usize, usize) = (cfg.get("vocab-min-count")?, cfg.get("vocab-size")?);
            let vocab = (mode == InputMode::Token)
                .then(|| Vocab::build(train_inst.iter().flat_map(|i| i.sentences().iter()), min_count, Some(max_size)));
            let dim = build_provider(&spec)?.dim();
            let mut c = TransformerConfig::desk(mode, dim, vocab.as_ref().map_or(0, Vocab::len));
            c.n_layers = cfg.get("layers")?;
            c.n_heads = cfg.get("heads")?;
            c.d_model = cfg.get("d-model")?;
            c.d_ff = cfg.get("d-ff")?;
            c.dropout = cfg.get("dropout")?;
            let maxpos: usize = cfg.get("max-positions")?;
            if maxpos > 0 {
                c.max_positions = maxpos;
            }
            c.init_seed = tc.seed;
            c.validate().map_err(|e| UsageError::new("--d-model", e.to_string()))?;
            (DetectorModel::new(c)?, spec, vocab)
        }
    };
    let provider = build_provider(&spec)?;
    let feat = featurizer(model.config(), &provider, vocab.as_ref())?;
    let train_ex = feat.prepare_all::<T>(&train_inst)?;
    let dev_ex = dev_inst.as_ref().map(|d| feat.prepare_all::<T>(d)).transpose()?;
    let report = incoforge_detector::train(&mut model, &train_ex, dev_ex.as_deref(), &tc)?;

    let mut extra = BTreeMap::new();
    extra.insert("config_hash".to_string(), sha256_hex(cfg.canonical_without(EXECUTION_ONLY).as_bytes()));
    extra.insert("sm_weight".to_string(), sm_weight.to_string());
    let meta = CheckpointMeta { task: Some(task), vocab, provider: Some(spec), extra };
    save_checkpoint(out, &model, &meta)?;
    write_history_csv(BufWriter::new(File::create(sibling(out, "history.csv"))?), &report.history)?;
    Ok(Trained { report, params: model.num_params(), checkpoint_sha256: path_sha256(out)? })
}

// flags that change where or how fast training runs, never its result
const EXECUTION_ONLY: &[&str] = &["output", "parallel", "threads", "config"];

struct Loaded {
    model: DetectorModel<f32>,
    meta: CheckpointMeta,
    provider: EmbeddingProvider,
}

fn load(path: &Path) -> anyhow::Result<Loaded> {
    let (model, meta) = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
    let spec = meta.provider.clone().ok_or_else(|| anyhow!("{} records no embedding provider", path.display()))?;
    let provider = build_provider(&spec)?;
    Ok(Loaded { model, meta, provider })
}

fn check_task(meta: &CheckpointMeta, instances: &[Instance]) -> anyhow::Result<()> {
    if let Some(task) = meta.task {
        if let Some(bad) = instances.iter().find(|i| i.mode() != task) {
            bail!("checkpoint was trained on {task} but instance {} is {}", bad.id(), bad.mode());
        }
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = cfg.path("checkpoint")?;
    let input = cfg.path("input")?;
    let output = cfg.path("output")?;
    let l = load(&ckpt)?;
    let instances = read_instances(&input)?;
    check_task(&l.meta, &instances)?;
    let feat = featurizer(l.model.config(), &l.provider, l.meta.vocab.as_ref())?;
    let examples = feat.prepare_all::<f32>(&instances)?;
    let recs = score_examples(&l.model, &examples)?;
    write_jsonl(&output, &recs)?;
    let positives = recs.iter().filter(|r| r.gold == 1).count();
    record(
        cfg,
        &output,
        &[&ckpt, &input],
        &[&output],
        json!({ "instances": instances.len(), "positions": recs.len(), "gold_positives": positives }),
    )?;
    println!("scored {} positions of {} instances -> {}", recs.len(), instances.len(), output.display());
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> anyhow::Result<()> {
    let ckpt = cfg.path("checkpoint")?;
    let input = cfg.path("input")?;
    let output = cfg.path("output")?;
    let cap: usize = cfg.get("pool-size")?;
    let l = load(&ckpt)?;
    let instances = read_instances(&input)?;
    check_task(&l.meta, &instances)?;
    let feat = featurizer(l.model.config(), &l.provider, l.meta.vocab.as_ref())?;

    let mut hidden = BTreeSet::new();
    for inst in &instances {
        for (k, group) in inst.sm_targets() {
            if inst.labels()[k] == 1 {
                hidden.extend(group.iter().map(|s| s.text.clone()));
            }
        }
    }
    let mut extra: Vec<String> = Vec::new();
    let pool_path = cfg.opt_path("pool");
    if let Some(p) = &pool_path {
        let mut seen = BTreeSet::new();
        for n in read_corpus(p).with_context(|| format!("reading pool corpus {}", p.display()))? {
            for s in n.sentences {
                if !hidden.contains(&s.text) && seen.insert(s.text.clone()) {
                    extra.push(s.text);
                }
            }
        }
    }
    if cap > 0 && hidden.len() + extra.len() > cap {
        extra.shuffle(&mut rng_for(cfg.get("seed")?, "pool"));
        extra.truncate(cap.saturating_sub(hidden.len()));
    }
    let texts: BTreeSet<String> = hidden.into_iter().chain(extra).collect();
    let mut pool = Vec::with_capacity(texts.len());
    for (i, t) in texts.into_iter().enumerate() {
        let embedding = feat.embed(&Sentence::new(t.clone()))?;
        pool.push(PoolEntry { id: i as u32, text: t, embedding });
    }

    let mut recs = Vec::new();
    let mut exact = 0usize;
    for inst in &instances {
        let ex = feat.prepare::<f32>(inst)?;
        let p = predict_one(&l.model, &ex, 0.5)?;
        for (k, group) in inst.sm_targets() {
            if inst.labels()[k] != 1 {
                continue;
            }
            let r = retrieve_sentence(&p.hhat[k], &pool)?;
            exact += usize::from(group.iter().any(|s| s.text == r.text));
            recs.push(GenerationRecord {
                instance: inst.id().to_string(),
                position: k + 1,
                hyp: r.text,
                reference: group.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" "),
            });
        }
    }
    write_jsonl(&output, &recs)?;
    let rate = if recs.is_empty() { 0.0 } else { exact as f64 / recs.len() as f64 };
    let mut inputs: Vec<&Path> = vec![&ckpt, &input];
    if let Some(p) = pool_path.as_deref() {
        inputs.push(p);
    }
    record(
        cfg,
        &output,
        &inputs,
        &[&output],
        json!({ "records": recs.len(), "pool": pool.len(), "exact_match": exact, "exact_match_rate": rate }),
    )?;
    println!(
        "decoded {} positions from a pool of {} sentences; exact match {exact} ({:.1}%) -> {}",
        recs.len(),
        pool.len(),
        100.0 * rate,
        output.display()
    );
    Ok(())
}
