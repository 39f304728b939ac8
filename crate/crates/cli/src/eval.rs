// SPDX-License-Identifier: Apache-2.0

use std::str::FromStr;

use sgg_core::assembly::AssemblyConfig;
use sgg_core::dataset::{Dataset, Scene};
use sgg_core::detector::{freq_prior_predictions, SyntheticDetector};
use sgg_core::metrics::{evaluate, RankedTriplet, RecallReport};
use sgg_core::scene::Triplet;
use sgg_core::CoreError;
use sgg_tensor::ParamStore;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::model::{split_index, Model};

/// Which decoder layers to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSel {
    All,
    /// 1-based layer index.
    One(usize),
}

impl FromStr for LayerSel {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(LayerSel::All);
        }
        s.parse().map(LayerSel::One).map_err(|_| CliError::Arg(format!("layer must be `all` or a positive integer, got {s:?}")))
    }
}

impl LayerSel {
    /// 0-based layer indices, checked against the model depth.
    pub fn resolve(self, n_layers: usize) -> Result<Vec<usize>> {
        match self {
            LayerSel::All => Ok((0..n_layers).collect()),
            LayerSel::One(t) if t >= 1 && t <= n_layers => Ok(vec![t - 1]),
            LayerSel::One(t) => Err(CoreError::LayerOutOfRange { requested: t, available: n_layers }.into()),
        }
    }
}

/// Parses a comma-separated K list such as `10,20,50`.
pub fn parse_ks(s: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|_| CliError::Arg(format!("bad K value {x:?}"))))
        .collect::<Result<_>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Arg("K list must hold positive values".into()));
    }
    Ok(ks)
}

/// Ranked predictions `[scene][layer]` for a split.
pub fn predict_split(
    model: &Model,
    store: &ParamStore<f32>,
    scenes: &[Scene],
    split: &str,
    assembly: &AssemblyConfig,
) -> Result<Vec<Vec<Vec<RankedTriplet>>>> {
    let si = split_index(split);
    scenes.iter().enumerate().map(|(i, s)| model.predict(store, s, si, i, assembly)).collect()
}

/// One report per requested layer from precomputed predictions.
pub fn reports_from_predictions(
    ds: &Dataset,
    scenes: &[Scene],
    preds: &[Vec<Vec<RankedTriplet>>],
    layers: &[usize],
    top_m: usize,
    ks: &[usize],
    config: &serde_json::Value,
) -> Result<Vec<RecallReport>> {
    let gts: Vec<&[Triplet]> = scenes.iter().map(|s| s.graph.triplets.as_slice()).collect();
    let m = &ds.manifest;
    layers
        .iter()
        .map(|&t| {
            let layer: Vec<Vec<RankedTriplet>> = preds.iter().map(|p| p[t].clone()).collect();
            let per_k = evaluate(&gts, &layer, ks, m.world.upsilon, Some(&m.registry), &m.partition)?;
            Ok(RecallReport { layer: t + 1, top_m, per_k, config: config.clone() })
        })
        .collect()
}

pub fn evaluate_model(
    cfg: &RunConfig,
    model: &Model,
    store: &ParamStore<f32>,
    ds: &Dataset,
    split: &str,
    layers: LayerSel,
    top_m: usize,
    ks: &[usize],
) -> Result<Vec<RecallReport>> {
    let layers = layers.resolve(model.n_layers())?;
    let scenes = ds.split(split).ok_or_else(|| CliError::Arg(format!("unknown split {split:?}")))?;
    let assembly = AssemblyConfig { top_m, ..cfg.assembly.clone() };
    assembly.validate()?;
    let preds = predict_split(model, store, scenes, split, &assembly)?;
    let mut echo = cfg.to_json();
    echo["eval"] = serde_json::json!({ "split": split, "top_m": top_m, "ks": ks });
    reports_from_predictions(ds, scenes, &preds, &layers, top_m, ks, &echo)
}

/// The frequency baseline on synthetic detections of a split, reported as layer 1.
pub fn evaluate_freq_prior(cfg: &RunConfig, ds: &Dataset, split: &str, top_m: usize, ks: &[usize]) -> Result<RecallReport> {
    let scenes = ds.split(split).ok_or_else(|| CliError::Arg(format!("unknown split {split:?}")))?;
    let w = &cfg.data.world;
    let detector = SyntheticDetector::new(cfg.motif.detector.clone(), w.eta, w.channels());
    let prior = ds.freq_prior();
    let si = split_index(split);
    let preds: Vec<Vec<Vec<RankedTriplet>>> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| vec![freq_prior_predictions(&prior, &detector.detect(s, w.seed, si, i), top_m)])
        .collect();
    let mut echo = cfg.to_json();
    echo["eval"] = serde_json::json!({ "split": split, "top_m": top_m, "ks": ks, "baseline": "freq-prior" });
    Ok(reports_from_predictions(ds, scenes, &preds, &[0], top_m, ks, &echo)?.remove(0))
}
