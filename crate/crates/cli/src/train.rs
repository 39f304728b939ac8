// SPDX-License-Identifier: Apache-2.0

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sgg_core::dataset::{manifest_bytes, sha256_hex, Dataset};
use sgg_core::decoder::Role;
use sgg_core::matching::class_weights;
use sgg_core::metrics::RecallReport;
use sgg_tensor::optim::{clip_grad_norm, Adam};
use sgg_tensor::{checkpoint, seeded_rng, Graph, ParamStore};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::eval::{predict_split, reports_from_predictions};
use crate::model::{split_index, Model};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentLoss {
    pub layer: usize,
    pub component: Role,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerVal {
    pub layer: usize,
    pub r: f64,
    pub mr: f64,
    pub hr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-scene loss.
    pub loss: f64,
    /// Mean per-scene loss of each layer.
    pub layer_loss: Vec<f64>,
    pub components: Vec<ComponentLoss>,
    /// Validation metrics at the largest K, one entry per layer.
    pub val: Vec<LayerVal>,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: serde_json::Value,
    pub manifest_sha256: String,
    pub class_weights: Vec<f64>,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_hr: Option<f64>,
    pub checkpoint: PathBuf,
}

pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub records: Vec<EpochRecord>,
    pub model: Model,
    /// Parameters of the selected checkpoint.
    pub store: ParamStore<f32>,
}

fn write_line(w: &mut impl Write, path: &Path, v: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Validation metrics of every layer at `k`.
fn layer_vals(reports: &[RecallReport], k: usize) -> Vec<LayerVal> {
    reports
        .iter()
        .filter_map(|r| r.at(k).map(|x| LayerVal { layer: r.layer, r: x.r, mr: x.mr, hr: x.hr }))
        .collect()
}

/// Trains on the `train` split, selecting the checkpoint with the best
/// validation hR at the largest K on the last layer.
pub fn train(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let manifest_sha256 = sha256_hex(&manifest_bytes(&ds.manifest)?);
    let weights = class_weights(&ds.manifest.frequency, cfg.alpha, cfg.beta)?;
    let (model, mut store) = Model::build(cfg)?;
    let echo = cfg.to_json();
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    write_line(
        &mut log,
        &log_path,
        &serde_json::json!({ "type": "config", "config": echo, "manifest_sha256": manifest_sha256, "class_weights": weights.w }),
    )?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let ckpt_echo = serde_json::json!({ "run": echo, "manifest_sha256": manifest_sha256 });
    checkpoint::save(&store, &ckpt, ckpt_echo.clone())?;

    let n_layers = model.n_layers();
    let k = cfg.max_k();
    let mut adam = Adam::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let mut shuffle_rng = seeded_rng(cfg.seed ^ 0x5f3c_a11e);
    let train_split = split_index("train");
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut final_loss = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.lr(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut layer_sum = vec![0.0; n_layers];
        let mut comp: Vec<ComponentLoss> = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let mut g = Graph::new();
                let (loss, parts) = model.scene_loss(&mut g, &store, &ds.train[i], train_split, i, &weights, cfg.joint_loss)?;
                loss_sum += g.value(loss).data()[0] as f64;
                let grads = g.backward(loss)?;
                store.accumulate(&grads, scale);
                for (t, v) in parts.steps.iter().enumerate() {
                    layer_sum[t] += v;
                }
                for e in parts.entries {
                    layer_sum[e.layer] += e.weighted();
                    match comp.iter_mut().find(|c| c.layer == e.layer && c.component == e.component) {
                        Some(c) => {
                            c.class += e.class;
                            c.l1 += e.l1;
                            c.giou += e.giou;
                        }
                        None => comp.push(ComponentLoss { layer: e.layer, component: e.component, class: e.class, l1: e.l1, giou: e.giou }),
                    }
                }
            }
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut store, cfg.grad_clip);
            }
            adam.step(&mut store, lr);
        }
        let n = ds.train.len() as f64;
        for c in &mut comp {
            c.class /= n;
            c.l1 /= n;
            c.giou /= n;
        }
        let loss = loss_sum / n;
        final_loss = Some(loss);
        let preds = predict_split(&model, &store, &ds.val, "val", &cfg.assembly)?;
        let layers: Vec<usize> = (0..n_layers).collect();
        let reports = reports_from_predictions(ds, &ds.val, &preds, &layers, cfg.assembly.top_m, &[k], &echo)?;
        let val = layer_vals(&reports, k);
        let score = val.last().map_or(0.0, |v| v.hr);
        let selected = best.as_ref().map_or(true, |b| score > b.1);
        if selected {
            best = Some((epoch, score, store.clone()));
            checkpoint::save(&store, &ckpt, ckpt_echo.clone())?;
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss,
            layer_loss: layer_sum.iter().map(|v| v / n).collect(),
            components: comp,
            val,
            selected,
        };
        write_line(&mut log, &log_path, &serde_json::json!({ "type": "epoch", "record": rec }))?;
        records.push(rec);
    }

    let (best_epoch, best_val_hr, store) = match best {
        Some((e, s, st)) => (Some(e), Some(s), st),
        None => (None, None, store),
    };
    let summary = TrainSummary {
        config: echo,
        manifest_sha256,
        class_weights: weights.w,
        epochs_run: cfg.epochs,
        final_loss,
        best_epoch,
        best_val_hr,
        checkpoint: ckpt,
    };
    let sp = out.join(SUMMARY_FILE);
    fs::write(&sp, serde_json::to_vec_pretty(&summary)?).map_err(|e| CliError::io(&sp, e))?;
    Ok(TrainOutcome { summary, records, model, store })
}

/// Rebuilds a model from a checkpoint directory written by [`train`].
pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, Model, ParamStore<f32>)> {
    let manifest = checkpoint::read_manifest(dir)?;
    let run = manifest.config.get("run").cloned().ok_or_else(|| CliError::Config("checkpoint lacks a run config".into()))?;
    let cfg: RunConfig = serde_json::from_value(run)?;
    let (model, mut store) = Model::build(&cfg)?;
    checkpoint::load_into(&mut store, dir)?;
    Ok((cfg, model, store))
}
