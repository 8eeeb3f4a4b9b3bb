//! End-to-end runs: train, fine-tune, evaluate and analyze, each writing
//! its artifacts into the configured output directory.
//!
//! | file | written by |
//! |---|---|
//! | `config.txt` | every run (resolved configuration) |
//! | `init.ckpt`, `model.ckpt`, `metrics.csv` | train, finetune |
//! | `report.json` | eval |
//! | `layer_means_<tag>.csv`, `hist_<tag>_<source>_<which>.csv`, `param_accounting.csv`, `mean_shift.csv` | analyze |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    extract_histograms, mean_shift, param_accounting, per_layer_mean_m, HistSource, HistVariant, HistogramData,
};
use crate::attacks::{evaluate_robust_error, AttackReport};
use crate::checkpoint::{sha256_hex, Checkpoint, Provenance};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{gaussian_blobs, load_cifar10, load_mnist_idx, BlobSpec, DatasetSplit, SplitTag};
use crate::error::{Error, Result};
use crate::nn::{build, Model};
use crate::training::{make_freeze_mask, train_with_callback, EpochLog, TrainLog};

pub const CONFIG_FILE: &str = "config.txt";
pub const INIT_CHECKPOINT: &str = "init.ckpt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";

/// Train and test splits for the configured dataset. The training split
/// is truncated to `data.train_n` examples when that is non-zero.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Synthetic => {
            let spec = BlobSpec {
                num_classes: cfg.synthetic_classes,
                shape: cfg.synthetic_shape,
                separation: cfg.synthetic_separation,
                noise_std: cfg.synthetic_noise,
                center_seed: cfg.synthetic_seed,
            };
            (
                gaussian_blobs(&spec, cfg.synthetic_train_per_class, cfg.synthetic_seed.wrapping_add(1), SplitTag::Train)?,
                gaussian_blobs(&spec, cfg.synthetic_test_per_class, cfg.synthetic_seed.wrapping_add(2), SplitTag::Test)?,
            )
        }
        DatasetKind::Mnist | DatasetKind::Cifar10 => {
            let dir = cfg
                .data_dir
                .as_deref()
                .ok_or_else(|| Error::InvalidConfig(format!("dataset {} needs data.dir", cfg.dataset.as_str())))?;
            if !dir.is_dir() {
                return Err(Error::io(
                    dir,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
                ));
            }
            if cfg.dataset == DatasetKind::Mnist {
                load_mnist_idx(dir)?
            } else {
                load_cifar10(dir)?
            }
        }
    };
    let train = if cfg.train_n > 0 { train.take_first(cfg.train_n) } else { train };
    Ok((train, test))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// `epoch,split,loss,clean_err,robust_err_pgd10`; empty cells for metrics
/// that were not computed.
pub fn metrics_csv(rows: &[EpochLog]) -> Vec<u8> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                match r.split {
                    SplitTag::Train => "train".into(),
                    SplitTag::Test => "test".into(),
                },
                r.loss.to_string(),
                fmt_opt(r.clean_err),
                fmt_opt(r.robust_err_pgd10),
            ]
        })
        .collect();
    csv_bytes(&["epoch", "split", "loss", "clean_err", "robust_err_pgd10"], &rows)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub model: Model,
    pub log: TrainLog,
}

fn provenance(cfg: &ExperimentConfig, epochs: usize, adversarial: bool, base: Option<String>) -> Provenance {
    Provenance {
        config_name: cfg.config_name.to_string(),
        plus_logit: cfg.plus_logit,
        plus_conv1: cfg.plus_conv1,
        model_seed: cfg.model_seed,
        train_seed: cfg.train_seed,
        epochs,
        adversarial,
        base_sha256: base,
        extra: [
            ("dataset".to_string(), cfg.dataset.as_str().to_string()),
            ("epsilon".to_string(), cfg.epsilon.to_string()),
        ]
        .into_iter()
        .collect(),
    }
}

/// Shared tail of train and finetune: writes `init.ckpt`, then trains,
/// rewriting `model.ckpt` and `metrics.csv` after every epoch so an
/// aborted run leaves the last good state on disk.
fn run_training(
    cfg: &ExperimentConfig,
    mut model: Model,
    adversarial: bool,
    base_sha: Option<String>,
    data: (&DatasetSplit, &DatasetSplit),
) -> Result<RunOutput> {
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    Checkpoint::from_model(&model, provenance(cfg, 0, adversarial, base_sha.clone()))
        .save(&out.join(INIT_CHECKPOINT))?;

    let mut mask = make_freeze_mask(&model, cfg.config_name, cfg.plus_logit, cfg.plus_conv1);
    mask.reset_stats_first = cfg.reset_stats;
    let train_cfg = cfg.train_config();
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let (train, test) = data;
    let monitor = (cfg.monitor_n > 0).then_some(test);
    let log = train_with_callback(
        &mut model,
        train,
        &mask,
        &train_cfg,
        adversarial,
        monitor,
        &mut |m, rows| {
            let epoch = rows.last().map_or(0, |r| r.epoch);
            Checkpoint::from_model(m, provenance(cfg, epoch, adversarial, base_sha.clone())).save(&ckpt_path)?;
            write_file(&metrics_path, &metrics_csv(rows))
        },
    )?;
    Ok(RunOutput {
        out_dir: out,
        checkpoint: ckpt_path,
        model,
        log,
    })
}

/// Raw bytes and decoded checkpoint; any failure is a checkpoint error.
fn read_checkpoint(path: &Path) -> Result<(Vec<u8>, Checkpoint)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((bytes, ckpt))
}

/// Builds a fresh model and trains it under the configured freeze mask.
pub fn run_train(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_dataset(cfg)?;
    let arch = cfg.architecture(train.channels, train.num_classes, train.image_shape())?;
    let model = build(&arch, cfg.model_seed)?;
    run_training(cfg, model, cfg.is_adversarial(), None, (&train, &test))
}

/// Loads `base`, checks it matches the configured architecture and
/// fine-tunes it adversarially. Provenance records the base file's hash.
pub fn run_finetune(cfg: &ExperimentConfig, base: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let (bytes, ckpt) = read_checkpoint(base)?;
    let (train, test) = load_dataset(cfg)?;
    let arch = cfg.architecture(train.channels, train.num_classes, train.image_shape())?;
    if arch != ckpt.manifest.architecture {
        return Err(Error::ArchitectureMismatch(format!(
            "{} holds {:?} but the configuration describes {:?}",
            base.display(),
            ckpt.manifest.architecture,
            arch
        )));
    }
    let model = ckpt.to_model()?;
    run_training(cfg, model, true, Some(sha256_hex(&bytes)), (&train, &test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_sha256: String,
    pub epsilon: String,
    pub n: usize,
    pub clean_error: f64,
    pub robust_error: f64,
    pub per_attack: Vec<AttackReport>,
}

impl EvalReport {
    /// Plain-text table mirroring the JSON report.
    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>10}\n", "attack", "error %");
        s.push_str(&format!("{:<24} {:>10.2}\n", "clean", self.clean_error));
        for a in &self.per_attack {
            s.push_str(&format!("{:<24} {:>10.2}\n", a.name, a.error));
        }
        s.push_str(&format!("{:<24} {:>10.2}\n", "ensemble (worst case)", self.robust_error));
        s.push_str(&format!("n = {}, epsilon = {}\n", self.n, self.epsilon));
        s
    }
}

/// Robust error of a checkpoint on the first `eval.n` test examples;
/// writes `report.json`.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let (bytes, ckpt) = read_checkpoint(checkpoint)?;
    let model = ckpt.to_model()?;
    let (_, test) = load_dataset(cfg)?;
    let n = cfg.eval_n.min(test.len());
    let r = evaluate_robust_error(&model, &test, &cfg.eval_ensemble()?, n, cfg.eval_batch_size)?;
    let report = EvalReport {
        checkpoint_sha256: sha256_hex(&bytes),
        epsilon: cfg.epsilon.to_string(),
        n: r.n,
        clean_error: r.clean_error,
        robust_error: r.robust_error,
        per_attack: r.per_attack,
    };
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    write_file(&cfg.out_dir.join(REPORT_FILE), &json)?;
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOutput {
    pub files: Vec<PathBuf>,
    /// One message per checkpoint pair that could not be compared.
    pub warnings: Vec<String>,
}

fn tags_for(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            match p.parent().and_then(|d| d.file_name()) {
                Some(d) if stem == "model" || stem == "init" => format!("{}_{stem}", d.to_string_lossy()),
                _ => stem,
            }
        })
        .collect();
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if stems.iter().filter(|t| *t == s).count() > 1 {
                format!("{s}_{i}")
            } else {
                s.clone()
            }
        })
        .collect()
}

fn histogram_file_name(tag: &str, h: &HistogramData) -> String {
    let which = match (&h.layer_id, h.variant) {
        (Some(layer), _) => layer.clone(),
        (None, Some(HistVariant::Clean)) => "clean".into(),
        (None, Some(HistVariant::Adversarial)) => "adversarial".into(),
        (None, None) => "all".into(),
    };
    format!("hist_{tag}_{}_{which}.csv", h.source.as_str())
}

/// Per-layer means, histograms and parameter accounting for each
/// checkpoint, plus `mean_shift.csv` over all ordered pairs when more
/// than one is given. Logit and confidence histograms (clean and under the
/// training attack) are included when `with_data` is set.
pub fn run_analyze(cfg: &ExperimentConfig, checkpoints: &[PathBuf], with_data: bool) -> Result<AnalyzeOutput> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidConfig("analyze needs at least one checkpoint".into()));
    }
    let models: Vec<Model> = checkpoints
        .iter()
        .map(|p| read_checkpoint(p)?.1.to_model())
        .collect::<Result<_>>()?;
    let tags = tags_for(checkpoints);
    let out_dir = &cfg.out_dir;
    create_dir(out_dir)?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let mut out = AnalyzeOutput::default();
    let emit = |name: String, bytes: Vec<u8>, out: &mut AnalyzeOutput| -> Result<()> {
        let path = out_dir.join(name);
        write_file(&path, &bytes)?;
        out.files.push(path);
        Ok(())
    };

    let test = if with_data { Some(load_dataset(cfg)?.1) } else { None };
    let attack = cfg.inner_attack().with_seed(cfg.eval_seed);
    let mut accounting_rows = Vec::new();
    for (model, tag) in models.iter().zip(&tags) {
        let means = per_layer_mean_m(model).map(|means| {
            means
                .iter()
                .map(|l| vec![l.layer_id.clone(), l.mean_m.to_string(), l.mean_b.to_string()])
                .collect::<Vec<_>>()
        });
        match means {
            Ok(rows) => emit(
                format!("layer_means_{tag}.csv"),
                csv_bytes(&["layer_id", "mean_m", "mean_b"], &rows),
                &mut out,
            )?,
            Err(e) => out.warnings.push(format!("{tag}: {e}")),
        }

        let mut sources = vec![HistSource::BnGamma, HistSource::BnM, HistSource::BnB];
        if test.is_some() {
            sources.extend([HistSource::Logits, HistSource::Confidence]);
        }
        let hists = extract_histograms(
            model,
            tag,
            test.as_ref(),
            cfg.eval_n,
            test.as_ref().map(|_| &attack),
            &sources,
            cfg.eval_batch_size,
        )?;
        for h in &hists {
            let rows: Vec<Vec<String>> = h
                .counts
                .iter()
                .enumerate()
                .map(|(i, c)| vec![h.bin_edges[i].to_string(), h.bin_edges[i + 1].to_string(), c.to_string()])
                .collect();
            emit(
                histogram_file_name(tag, h),
                csv_bytes(&["bin_left", "bin_right", "count"], &rows),
                &mut out,
            )?;
        }

        let acc = param_accounting(model);
        accounting_rows.push(vec![tag.clone(), "total".into(), acc.total.to_string()]);
        for (k, v) in &acc.per_selector {
            accounting_rows.push(vec![tag.clone(), k.clone(), v.to_string()]);
        }
        accounting_rows.push(vec![tag.clone(), "bn_fraction_percent".into(), acc.bn_fraction.to_string()]);
    }
    emit(
        "param_accounting.csv".into(),
        csv_bytes(&["model", "quantity", "value"], &accounting_rows),
        &mut out,
    )?;

    if models.len() > 1 {
        let mut rows = Vec::new();
        for i in 0..models.len() {
            for j in 0..models.len() {
                if i == j {
                    continue;
                }
                match mean_shift(&models[i], &models[j]) {
                    Ok(s) => rows.push(vec![tags[i].clone(), tags[j].clone(), s.to_string()]),
                    Err(e) => out.warnings.push(format!("{} vs {}: {e}", tags[i], tags[j])),
                }
            }
        }
        emit("mean_shift.csv".into(), csv_bytes(&["model_a", "model_b", "mean_shift"], &rows), &mut out)?;
    }
    Ok(out)
}
