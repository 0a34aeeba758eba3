use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hcae::autoencoder::AeTrainOptions;
use hcae::classifier::evaluate_classifier;
use hcae::codec::{compress_file, decompress_file, export_split, CodecArtifact, QuantMode};
use hcae::{
    build_autoencoder, build_classifier, build_ensemble, evaluate_triplet, generate_synthetic_dataset, load_dataset, split,
    train_autoencoder, train_classifier, train_ensemble, ClfTrainOptions, EnsembleTrainOptions, EvalReport, LabeledDataset,
    ModelParameters, TrainingHistory,
};
use serde::Serialize;

use crate::config::{DataSource, RunConfig};
use crate::error::CliError;
use crate::workspace::{dataset_hash, sha256_hex, write_json, write_text, StageRecord, Workspace};

pub const CHECKPOINT: &str = "checkpoint";
pub const HISTORY: &str = "history.json";
pub const STAGE_RECORD: &str = "stage.json";

pub struct Context {
    pub cfg: RunConfig,
    pub ws: Workspace,
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodecSource {
    Supervised,
    Unsupervised,
}

fn config_hash<T: Serialize>(parts: &T) -> Result<String, CliError> {
    Ok(sha256_hex(serde_json::to_string(parts)?.as_bytes()))
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn history_line(h: &TrainingHistory) -> String {
    let first = h.first_train_loss().unwrap_or(f64::NAN);
    let last = h.last_train_loss().unwrap_or(f64::NAN);
    let best = h.best_epoch.unwrap_or(0);
    let best_val = h.records.iter().find(|r| r.epoch == best).map_or(f64::NAN, |r| r.val_loss);
    format!(
        "{} epochs, train loss {first:.5} -> {last:.5}, best epoch {best} (val loss {best_val:.5})",
        h.records.len()
    )
}

fn finish(ctx: &Context, dir: &Path, record: &StageRecord) -> Result<(), CliError> {
    write_json(&dir.join(STAGE_RECORD), record)?;
    ctx.ws.append(record)
}

impl Context {
    fn load_all(&self) -> Result<(LabeledDataset, String), CliError> {
        let d = &self.cfg.dataset;
        let mut data = match d.source {
            DataSource::Synthetic => {
                let manifest = Workspace::require(self.ws.data().join("manifest.tsv"), "synth-data", "synthetic dataset")?;
                load_dataset(&self.ws.data(), &manifest)?
            }
            DataSource::Disk => {
                let dir = d.path.clone().expect("validated when the config was loaded");
                let manifest = d.manifest.clone().unwrap_or_else(|| dir.join("manifest.tsv"));
                load_dataset(&dir, &manifest)?
            }
        };
        if data.len() < 2 {
            return Err(CliError::Config(format!("dataset: need at least 2 samples, found {}", data.len())));
        }
        data.seed = d.seed;
        let hash = dataset_hash(&data);
        Ok((data, hash))
    }

    fn splits(&self) -> Result<(LabeledDataset, LabeledDataset, String), CliError> {
        let (all, hash) = self.load_all()?;
        let (train, val) = split(&all, self.cfg.dataset.val_fraction, self.cfg.dataset.seed)?;
        Ok((train, val, hash))
    }

    fn ae(&self) -> Result<ModelParameters, CliError> {
        self.ws.load_checkpoint(self.ws.ae().join(CHECKPOINT), "train-ae", "autoencoder checkpoint")
    }

    fn clf(&self) -> Result<ModelParameters, CliError> {
        self.ws.load_checkpoint(self.ws.clf().join(CHECKPOINT), "train-clf", "classifier checkpoint")
    }

    fn sup(&self) -> Result<ModelParameters, CliError> {
        self.ws.load_checkpoint(self.ws.ensemble().join(CHECKPOINT), "train-ensemble", "supervised autoencoder checkpoint")
    }
}

pub fn synth_data(ctx: &Context) -> Result<String, CliError> {
    let d = &ctx.cfg.dataset;
    if d.source != DataSource::Synthetic {
        return Err(CliError::Config(
            "dataset.source: synth-data needs source = \"synthetic\"; disk datasets are read in place".into(),
        ));
    }
    let dir = ctx.ws.data();
    Workspace::check_writable(&dir, ctx.force)?;
    let n = d.n.expect("validated when the config was loaded");
    let data = generate_synthetic_dataset(n, d.seed, d.positive_fraction, ctx.cfg.synthetic_geometry())?;
    Workspace::reset_dir(&dir, ctx.force)?;
    data.save(&dir)?;
    let hash = dataset_hash(&data);
    let mut record = StageRecord::new("synth-data", config_hash(d)?);
    record.seeds.insert("dataset".into(), d.seed);
    record.outputs.insert("dataset".into(), hash.clone());
    finish(ctx, &dir, &record)?;
    Ok(format!(
        "wrote {} synthetic {} patches ({} positive) to {} [dataset {}]",
        data.len(),
        ctx.cfg.synthetic_geometry(),
        data.positives(),
        dir.display(),
        short(&hash)
    ))
}

pub fn train_ae(ctx: &Context) -> Result<String, CliError> {
    let dir = ctx.ws.ae();
    Workspace::check_writable(&dir, ctx.force)?;
    let (train, val, data_hash) = ctx.splits()?;
    let geometry = train.geometry().expect("non-empty split");
    let config = ctx.cfg.compression_config(geometry)?;
    let a = &ctx.cfg.ae;
    let params = build_autoencoder(config.clone(), a.seed)?;
    let options = AeTrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
    };
    let (params, history) = train_autoencoder(params, &train, &val, &options)?;

    Workspace::reset_dir(&dir, ctx.force)?;
    params.save(&dir.join(CHECKPOINT))?;
    write_json(&dir.join(HISTORY), &history)?;
    let hash = params.content_hash();
    let mut record = StageRecord::new("train-ae", config_hash(&(&ctx.cfg.dataset, a))?);
    record.seeds.insert("split".into(), ctx.cfg.dataset.seed);
    record.seeds.insert("ae".into(), a.seed);
    record.inputs.insert("dataset".into(), data_hash);
    record.outputs.insert("autoencoder".into(), hash.clone());
    finish(ctx, &dir, &record)?;
    let (h, w, c) = config.latent_shape();
    Ok(format!(
        "autoencoder {}: latent {h}x{w}x{c}, dimensionality ratio {:.4}; {} [checkpoint {}]",
        config.name,
        config.dimensionality_ratio(),
        history_line(&history),
        short(&hash)
    ))
}

pub fn train_clf(ctx: &Context) -> Result<String, CliError> {
    let dir = ctx.ws.clf();
    Workspace::check_writable(&dir, ctx.force)?;
    let (train, val, data_hash) = ctx.splits()?;
    let spec = ctx.cfg.classifier_spec(train.geometry().expect("non-empty split"))?;
    let c = &ctx.cfg.clf;
    let params = build_classifier(spec, c.seed)?;
    let schedule = ctx.cfg.schedule();
    let options = ClfTrainOptions {
        batch_size: c.batch_size,
        seed: c.seed,
    };
    let (params, history) = train_classifier(params, &train, &val, &schedule, &options)?;
    let (_, acc, auc) = evaluate_classifier(&params, &val)?;

    Workspace::reset_dir(&dir, ctx.force)?;
    params.save(&dir.join(CHECKPOINT))?;
    write_json(&dir.join(HISTORY), &history)?;
    let hash = params.content_hash();
    let mut record = StageRecord::new("train-clf", config_hash(&(&ctx.cfg.dataset, c))?);
    record.seeds.insert("split".into(), ctx.cfg.dataset.seed);
    record.seeds.insert("clf".into(), c.seed);
    record.inputs.insert("dataset".into(), data_hash);
    record.outputs.insert("classifier".into(), hash.clone());
    finish(ctx, &dir, &record)?;
    let auc = auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    Ok(format!(
        "classifier: {} stages; {}; val accuracy {acc:.4}, val AUC {auc} [checkpoint {}]",
        schedule.stages.len(),
        history_line(&history),
        short(&hash)
    ))
}

pub fn train_ensemble_stage(ctx: &Context) -> Result<String, CliError> {
    let dir = ctx.ws.ensemble();
    Workspace::check_writable(&dir, ctx.force)?;
    let ae = ctx.ae()?;
    let clf = ctx.clf()?;
    let (train, val, data_hash) = ctx.splits()?;
    let e = &ctx.cfg.ensemble;
    let ae_hash = ae.content_hash();
    let clf_hash = clf.content_hash();
    let mut ens = build_ensemble(ae, clf, ctx.cfg.loss_weights())?;
    let options = EnsembleTrainOptions {
        epochs: e.epochs,
        batch_size: e.batch_size,
        lr: e.lr,
        seed: e.seed,
    };
    let (sup, history) = train_ensemble(&mut ens, &train, &val, &options)?;
    let (_, clf_after) = ens.into_parts();
    let clf_after_hash = clf_after.content_hash();
    if clf_after_hash != clf_hash {
        return Err(hcae::Error::FrozenDrift("classifier".into()).into());
    }

    Workspace::reset_dir(&dir, ctx.force)?;
    sup.save(&dir.join(CHECKPOINT))?;
    write_json(&dir.join(HISTORY), &history)?;
    let hash = sup.content_hash();
    let mut record = StageRecord::new("train-ensemble", config_hash(&(&ctx.cfg.dataset, e))?);
    record.seeds.insert("split".into(), ctx.cfg.dataset.seed);
    record.seeds.insert("ensemble".into(), e.seed);
    record.inputs.insert("dataset".into(), data_hash);
    record.inputs.insert("autoencoder".into(), ae_hash.clone());
    record.inputs.insert("classifier".into(), clf_hash.clone());
    record.outputs.insert("supervised_autoencoder".into(), hash.clone());
    record.outputs.insert("classifier".into(), clf_after_hash);
    finish(ctx, &dir, &record)?;
    Ok(format!(
        "supervised autoencoder from {} under frozen classifier {} (weights {}, {}): {} [checkpoint {}]",
        short(&ae_hash),
        short(&clf_hash),
        e.supervised_weight,
        e.reconstruction_weight,
        history_line(&history),
        short(&hash)
    ))
}

pub fn export_codec(ctx: &Context, source: CodecSource) -> Result<String, CliError> {
    let dir = ctx.ws.codec();
    Workspace::check_writable(&dir, ctx.force)?;
    let (ae, name) = match source {
        CodecSource::Supervised => (ctx.sup()?, "supervised"),
        CodecSource::Unsupervised => (ctx.ae()?, "unsupervised"),
    };
    Workspace::reset_dir(&dir, ctx.force)?;
    let (enc, dec) = export_split(&ae, &dir)?;
    let mut record = StageRecord::new("export-codec", config_hash(&name)?);
    record.inputs.insert(format!("{name}_autoencoder"), ae.content_hash());
    record.outputs.insert("encoder".into(), enc.checksum.clone());
    record.outputs.insert("decoder".into(), dec.checksum.clone());
    finish(ctx, &dir, &record)?;
    Ok(format!(
        "exported {name} autoencoder to {} [encoder {}, decoder {}]",
        dir.display(),
        short(&enc.checksum),
        short(&dec.checksum)
    ))
}

fn artifact(codec: Option<PathBuf>, ws: Option<&Workspace>, role: &str) -> Result<CodecArtifact, CliError> {
    let dir = match (codec, ws) {
        (Some(dir), _) => dir,
        (None, Some(ws)) => ws.codec().join(role),
        (None, None) => return Err(CliError::Config("give --codec or a config whose workspace holds an exported codec".into())),
    };
    let dir = if dir.join(role).join("artifact.json").exists() { dir.join(role) } else { dir };
    Workspace::require(dir.join("artifact.json"), "export-codec", "codec artifact")?;
    Ok(CodecArtifact::load(&dir)?)
}

fn check_output(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    Ok(())
}

pub fn compress(
    ws: Option<&Workspace>,
    codec: Option<PathBuf>,
    input: &Path,
    output: &Path,
    mode: QuantMode,
    force: bool,
) -> Result<String, CliError> {
    let enc = artifact(codec, ws, "encoder")?;
    check_output(output, force)?;
    let s = compress_file(&enc, input, output, mode)?;
    Ok(format!(
        "{} -> {}: {} bytes -> {} bytes ({:?}), byte ratio {:.4}, dimensionality ratio {:.4}",
        input.display(),
        s.output.display(),
        s.bytes_in,
        s.bytes_out,
        s.mode,
        s.byte_ratio,
        s.dimensionality_ratio
    ))
}

pub fn decompress(ws: Option<&Workspace>, codec: Option<PathBuf>, input: &Path, output: &Path, force: bool) -> Result<String, CliError> {
    let dec = artifact(codec, ws, "decoder")?;
    check_output(output, force)?;
    let s = decompress_file(&dec, input, output)?;
    let (h, w, c) = s.geometry;
    Ok(format!(
        "{} -> {}: {h}x{w}x{c}{}",
        input.display(),
        s.output.display(),
        if s.quantized { " (from 8-bit latent)" } else { "" }
    ))
}

pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_TABLE: &str = "eval.txt";
pub const EVAL_CHART: &str = "auc.png";
pub const SUMMARY: &str = "summary.md";

pub fn evaluate(ctx: &Context) -> Result<String, CliError> {
    let dir = ctx.ws.reports();
    let json = dir.join(EVAL_JSON);
    check_output(&json, ctx.force)?;
    let clf = ctx.clf()?;
    let ae = ctx.ae()?;
    let sup = ctx.sup()?;
    let (_, val, data_hash) = ctx.splits()?;
    let report = evaluate_triplet(&clf, &ae, &sup, &val)?;
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let text = report.to_json()?;
    write_text(&json, &text)?;
    let table = report.to_table();
    write_text(&dir.join(EVAL_TABLE), &table)?;
    report.render_bar_chart(&dir.join(EVAL_CHART))?;
    let mut record = StageRecord::new("evaluate", config_hash(&ctx.cfg.dataset)?);
    record.seeds.insert("split".into(), ctx.cfg.dataset.seed);
    record.inputs.insert("dataset".into(), data_hash);
    record.inputs.insert("classifier".into(), clf.content_hash());
    record.inputs.insert("autoencoder".into(), ae.content_hash());
    record.inputs.insert("supervised_autoencoder".into(), sup.content_hash());
    record.outputs.insert("report".into(), sha256_hex(text.as_bytes()));
    ctx.ws.append(&record)?;
    Ok(table)
}

fn read_history(path: &Path) -> Option<TrainingHistory> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn report(ctx: &Context) -> Result<String, CliError> {
    let dir = ctx.ws.reports();
    let eval_path = Workspace::require(dir.join(EVAL_JSON), "evaluate", "evaluation report")?;
    let summary_path = dir.join(SUMMARY);
    check_output(&summary_path, ctx.force)?;
    let text = fs::read_to_string(&eval_path).map_err(|e| CliError::io(&eval_path, e))?;
    let eval: EvalReport = serde_json::from_str(&text)?;

    let mut out = String::from("# hcae run report\n\n");
    let _ = writeln!(out, "workspace: {}\n", ctx.ws.root.display());
    out.push_str("## Training\n\n");
    let _ = writeln!(
        out,
        "{:<12} {:>6} {:>12} {:>12} {:>5} {:>12} {:>8}",
        "stage", "epochs", "first_train", "last_train", "best", "best_val", "val_auc"
    );
    for (name, stage_dir) in [("autoencoder", ctx.ws.ae()), ("classifier", ctx.ws.clf()), ("ensemble", ctx.ws.ensemble())] {
        match read_history(&stage_dir.join(HISTORY)) {
            Some(h) => {
                let best = h.best_epoch.unwrap_or(0);
                let best_val = h.records.iter().find(|r| r.epoch == best).map_or(f64::NAN, |r| r.val_loss);
                let auc = h.records.last().and_then(|r| r.val_auc).map_or("-".to_string(), |a| format!("{a:.4}"));
                let _ = writeln!(
                    out,
                    "{name:<12} {:>6} {:>12.6} {:>12.6} {best:>5} {best_val:>12.6} {auc:>8}",
                    h.records.len(),
                    h.first_train_loss().unwrap_or(f64::NAN),
                    h.last_train_loss().unwrap_or(f64::NAN),
                );
            }
            None => {
                let _ = writeln!(out, "{name:<12} (no history)");
            }
        }
    }

    if let Ok(sup) = ctx.sup() {
        out.push_str("\n## Lineage\n\n");
        let p = &sup.provenance;
        let get = |k: &str| p.get(k).map(String::as_str).unwrap_or("?");
        let _ = writeln!(
            out,
            "supervised autoencoder {} was fine-tuned from autoencoder {} under classifier {} ({})",
            short(&sup.content_hash()),
            short(get("source_autoencoder")),
            short(get("supervising_classifier")),
            get("loss_weights")
        );
    }

    let _ = writeln!(out, "\n## Evaluation\n\n{}", eval.to_table());
    let chart = dir.join(EVAL_CHART);
    if chart.exists() {
        let _ = writeln!(out, "AUC chart: {}", chart.display());
    }
    let _ = writeln!(out, "manifest: {} ({} records)", ctx.ws.manifest().display(), ctx.ws.records()?.len());
    write_text(&summary_path, &out)?;
    Ok(out)
}
