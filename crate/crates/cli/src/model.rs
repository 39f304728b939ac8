// SPDX-License-Identifier: Apache-2.0

//! Uniform wrapper over the two model families.

use sgg_core::assembly::{assemble, AssemblyConfig};
use sgg_core::dataset::Scene;
use sgg_core::decoder::{PredictionSet, TripleDecoderModel};
use sgg_core::detector::{DetectorOutput, SyntheticDetector};
use sgg_core::matching::{joint_match, layer_loss_graph, per_layer_match, ClassWeights, LossEntry, PaddedTargets, EOS_COEF};
use sgg_core::metrics::{ranked_from_graph, RankedTriplet};
use sgg_core::motif::{motif_loss, motif_predictions, MotifModel, MotifTargets};
use sgg_tensor::{seeded_rng, Graph, ParamStore, Var};

use crate::config::{Family, RunConfig};
use crate::error::Result;

/// Position of a split in the dataset's split order, used to seed detections.
pub fn split_index(name: &str) -> usize {
    sgg_core::dataset::SPLITS.iter().position(|s| *s == name).unwrap_or(0)
}

#[derive(Clone, Debug)]
pub enum Model {
    Triple(TripleDecoderModel),
    Motif { model: MotifModel, detector: SyntheticDetector, world_seed: u64 },
}

/// Loss terms of one scene.
#[derive(Clone, Debug, Default)]
pub struct SceneLoss {
    pub entries: Vec<LossEntry>,
    /// Per-step totals for the recurrent family.
    pub steps: Vec<f64>,
}

impl Model {
    /// Builds the model and its freshly initialized parameters from `cfg.seed`.
    pub fn build(cfg: &RunConfig) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(cfg.seed);
        let model = match cfg.family {
            Family::TripleDecoder => Model::Triple(TripleDecoderModel::new(&cfg.model_config(), &mut store, &mut rng)?),
            Family::MotifAug => {
                let w = &cfg.data.world;
                Model::Motif {
                    model: MotifModel::new(&cfg.motif_config(), &mut store, &mut rng)?,
                    detector: SyntheticDetector::new(cfg.motif.detector.clone(), w.eta, w.channels()),
                    world_seed: w.seed,
                }
            }
        };
        Ok((model, store))
    }

    pub fn n_layers(&self) -> usize {
        match self {
            Model::Triple(m) => m.n_layers(),
            Model::Motif { model, .. } => model.cfg.n_steps,
        }
    }

    pub fn detect(&self, scene: &Scene, split: usize, index: usize) -> Option<DetectorOutput> {
        match self {
            Model::Triple(_) => None,
            Model::Motif { detector, world_seed, .. } => Some(detector.detect(scene, *world_seed, split, index)),
        }
    }

    /// Builds the differentiable loss of one training scene.
    pub fn scene_loss(
        &self,
        g: &mut Graph<f32>,
        store: &ParamStore<f32>,
        scene: &Scene,
        split: usize,
        index: usize,
        weights: &ClassWeights,
        joint: bool,
    ) -> Result<(Var, SceneLoss)> {
        match self {
            Model::Triple(m) => {
                let outs = m.forward(g, store, &scene.grid.tokens(), m.default_opts())?;
                let preds = PredictionSet::from_graph(g, &outs);
                let targets = PaddedTargets::new(&scene.graph.triplets, m.cfg.decoder.n_queries)?;
                let sigmas = if joint { vec![joint_match(&targets, &preds)?] } else { per_layer_match(&targets, &preds)? };
                let (eta, ups) = (m.cfg.eta, m.cfg.upsilon);
                let mut total: Option<Var> = None;
                let mut out = SceneLoss::default();
                for (t, layer) in outs.iter().enumerate() {
                    let sigma = &sigmas[t.min(sigmas.len() - 1)];
                    let (l, entries) = layer_loss_graph(g, t, layer, &targets, sigma, weights, EOS_COEF, eta, ups)?;
                    out.entries.extend(entries);
                    total = Some(match total {
                        Some(acc) => g.add(acc, l)?,
                        None => l,
                    });
                }
                Ok((total.expect("at least one layer"), out))
            }
            Model::Motif { model, detector, world_seed } => {
                let det = detector.detect(scene, *world_seed, split, index);
                let edges: Vec<(usize, usize, usize)> = scene_edges(scene);
                let targets = MotifTargets::new(&det, scene.entities(), &edges, model.cfg.upsilon);
                let steps = model.forward(g, store, &det, Some(&targets.labels))?;
                let (l, per_step) = motif_loss(g, &steps, &targets, weights)?;
                Ok((l, SceneLoss { entries: Vec::new(), steps: per_step }))
            }
        }
    }

    /// Ranked triplets of every layer for one scene.
    pub fn predict(
        &self,
        store: &ParamStore<f32>,
        scene: &Scene,
        split: usize,
        index: usize,
        assembly: &AssemblyConfig,
    ) -> Result<Vec<Vec<RankedTriplet>>> {
        match self {
            Model::Triple(m) => {
                let preds = m.predict(store, &scene.grid.tokens(), m.default_opts())?;
                Ok(preds.per_layer.iter().map(|hyps| ranked_from_graph(&assemble(hyps, assembly))).collect())
            }
            Model::Motif { model, detector, world_seed } => {
                let det = detector.detect(scene, *world_seed, split, index);
                let mut g = Graph::new();
                let steps = model.forward(&mut g, store, &det, None)?;
                Ok(motif_predictions(&g, &steps, &det, assembly.top_m))
            }
        }
    }

    /// Raw hypotheses of the set-prediction family, `None` for the recurrent one.
    pub fn hypotheses(&self, store: &ParamStore<f32>, scene: &Scene) -> Result<Option<PredictionSet>> {
        match self {
            Model::Triple(m) => Ok(Some(m.predict(store, &scene.grid.tokens(), m.default_opts())?)),
            Model::Motif { .. } => Ok(None),
        }
    }
}

/// `(subject, object, predicate)` entity-index edges of a scene.
pub fn scene_edges(scene: &Scene) -> Vec<(usize, usize, usize)> {
    let links = scene.graph.instances.as_ref().map_or(&[][..], |i| &i.links);
    links.iter().zip(&scene.graph.triplets).map(|(&(s, o), t)| (s, o, t.predicate_class)).collect()
}
