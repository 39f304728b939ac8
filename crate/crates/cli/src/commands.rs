// SPDX-License-Identifier: Apache-2.0

//! File-level entry points behind the `sgg` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use sgg_core::assembly::{assemble, AssembledGraph, Edge, Node};
use sgg_core::dataset::{build_dataset, load_dataset, manifest_bytes, predicate_name, sha256_hex, Dataset};
use sgg_core::metrics::{RankedTriplet, RecallReport};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::eval::{evaluate_model, LayerSel};
use crate::model::{split_index, Model};
use crate::train::{load_checkpoint, train, TrainOutcome};

/// Generates the dataset described by `cfg` under `out`; returns the manifest
/// path and its SHA-256.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, String)> {
    let d = &cfg.data;
    let (ds, path) = build_dataset(&d.world, d.n_train, d.n_val, d.n_test, out)?;
    Ok((path, sha256_hex(&manifest_bytes(&ds.manifest)?)))
}

/// Loads a dataset and checks that it was generated with this run's world.
pub fn load_matching(cfg: &RunConfig, data: &Path) -> Result<Dataset> {
    let ds = load_dataset(data)?;
    if ds.manifest.world != cfg.data.world {
        return Err(CliError::Config("dataset world differs from the run config".into()));
    }
    Ok(ds)
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    let ds = load_matching(cfg, data)?;
    train(cfg, &ds, out)
}

pub fn eval_cmd(ckpt: &Path, data: &Path, split: &str, layers: LayerSel, top_m: usize, ks: &[usize]) -> Result<Vec<RecallReport>> {
    let (cfg, model, store) = load_checkpoint(ckpt)?;
    let ds = load_matching(&cfg, data)?;
    evaluate_model(&cfg, &model, &store, &ds, split, layers, top_m, ks)
}

/// Rebuilds a graph from ranked triplets, merging identical entities.
pub fn graph_from_ranked(preds: &[RankedTriplet]) -> AssembledGraph {
    let mut nodes: Vec<Node> = Vec::new();
    let mut node_of = |class_id, bbox, score: f64| match nodes.iter().position(|n| n.class_id == class_id && n.bbox == bbox) {
        Some(k) => {
            nodes[k].score = nodes[k].score.max(score);
            k
        }
        None => {
            nodes.push(Node { class_id, bbox, score });
            nodes.len() - 1
        }
    };
    let edges: Vec<Edge> = preds
        .iter()
        .map(|p| Edge {
            subject: node_of(p.subject.class_id, p.subject.bbox, p.score),
            object: node_of(p.object.class_id, p.object.bbox, p.score),
            predicate: p.predicate,
            score: p.score,
        })
        .collect();
    AssembledGraph { nodes, edges }
}

/// Writes `<scene>_t<layer>.dot` and `.json` for every requested scene and
/// 1-based layer. Scenes are looked up in every split.
pub fn export_cmd(ckpt: &Path, data: &Path, scene_ids: &[String], layers: &[usize], out: &Path) -> Result<Vec<PathBuf>> {
    let (cfg, model, store) = load_checkpoint(ckpt)?;
    let ds = load_matching(&cfg, data)?;
    for &t in layers {
        LayerSel::One(t).resolve(model.n_layers())?;
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let world = &ds.manifest.world;
    let mut written = Vec::new();
    for id in scene_ids {
        let (split, idx, scene) = sgg_core::dataset::SPLITS
            .iter()
            .find_map(|name| {
                let scenes = ds.split(name)?;
                scenes.iter().position(|s| s.id() == id).map(|i| (*name, i, &scenes[i]))
            })
            .ok_or_else(|| CliError::UnknownScene(id.clone()))?;
        let graphs: Vec<AssembledGraph> = match &model {
            Model::Triple(_) => {
                let preds = model.hypotheses(&store, scene)?.expect("set-prediction family");
                preds.per_layer.iter().map(|h| assemble(h, &cfg.assembly)).collect()
            }
            Model::Motif { .. } => model
                .predict(&store, scene, split_index(split), idx, &cfg.assembly)?
                .iter()
                .map(|p| graph_from_ranked(p))
                .collect(),
        };
        for &t in layers {
            let g = &graphs[t - 1];
            let stem = format!("{id}_t{t}");
            let dot = g.to_dot(id, t, &|c| format!("entity{c}"), &|p| predicate_name(world, p));
            for (ext, bytes) in [("dot", dot.into_bytes()), ("json", serde_json::to_vec_pretty(g)?)] {
                let path = out.join(format!("{stem}.{ext}"));
                fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
