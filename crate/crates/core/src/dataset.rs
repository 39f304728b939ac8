// SPDX-License-Identifier: Apache-2.0

//! Synthetic long-tailed shapes world: scene generation, relation rules,
//! feature grids, on-disk shards and the training-split statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sgg_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::geometry::{BBox, Corners};
use crate::scene::{EntityRef, SceneGraph, Triplet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

const MIN_SIDE: f32 = 0.15;
const MAX_SIDE: f32 = 0.45;
const NEST_PROB: f64 = 0.25;
const NEAR_DIST: f64 = 0.3;
/// A shape dominates a cell's geometry channels only above this coverage.
const DOMINANCE_COVERAGE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub eta: usize,
    pub upsilon: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub max_entities: usize,
    pub tail_skew: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { eta: 6, upsilon: 8, grid_w: 8, grid_h: 8, max_entities: 4, tail_skew: 1.5, seed: 7 }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.eta < 2 {
            return bad("eta must be at least 2");
        }
        if self.upsilon < 4 {
            return bad("upsilon must be at least 4");
        }
        if !(2..=16).contains(&self.max_entities) {
            return bad("max_entities must lie in 2..=16");
        }
        if !(self.tail_skew >= 0.0) {
            return bad("tail_skew must be non-negative");
        }
        if self.grid_w == 0 || self.grid_h == 0 {
            return bad("grid must be non-empty");
        }
        Ok(())
    }

    /// Feature channels per cell.
    pub fn channels(&self) -> usize {
        self.eta + 4
    }

    pub fn max_triplets(&self) -> usize {
        self.max_entities * (self.max_entities - 1)
    }
}

/// Geometric tests between an ordered pair of boxes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Geo {
    Inside,
    Overlaps,
    LeftOf,
    Above,
    Near,
}

impl Geo {
    pub fn holds(self, a: BBox, b: BBox) -> bool {
        let (p, q) = (a.to_corners(), b.to_corners());
        match self {
            Geo::Inside => p.x1 >= q.x1 && p.x2 <= q.x2 && p.y1 >= q.y1 && p.y2 <= q.y2 && a.area() < b.area(),
            Geo::Overlaps => {
                let iw = p.x2.min(q.x2) - p.x1.max(q.x1);
                let ih = p.y2.min(q.y2) - p.y1.max(q.y1);
                iw > 0.0 && ih > 0.0
            }
            Geo::LeftOf => p.x2 < q.x1,
            Geo::Above => p.y2 < q.y1,
            Geo::Near => {
                let dx = (a.cx - b.cx) as f64;
                let dy = (a.cy - b.cy) as f64;
                (dx * dx + dy * dy).sqrt() < NEAR_DIST
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub predicate: usize,
    pub geo: Geo,
    /// Required `(subject class, object class)`, if the rule is class-gated.
    pub gate: Option<(usize, usize)>,
}

impl Rule {
    pub fn applies(&self, s: EntityRef, o: EntityRef) -> bool {
        self.gate.map_or(true, |(gs, go)| s.class_id == gs && o.class_id == go) && self.geo.holds(s.bbox, o.bbox)
    }
}

/// Plain geometric predicates in id order.
const GEOMETRIC: [Geo; 5] = [Geo::LeftOf, Geo::Above, Geo::Overlaps, Geo::Near, Geo::Inside];
/// Priority among the plain geometric predicates, highest first.
const GEO_PRIORITY: [Geo; 5] = [Geo::Inside, Geo::Overlaps, Geo::LeftOf, Geo::Above, Geo::Near];
const GATED_GEO: [Geo; 3] = [Geo::LeftOf, Geo::Above, Geo::Near];

/// Relation rules in priority order. Predicates past the geometric ones are
/// class-gated and outrank everything else.
pub fn rule_order(cfg: &WorldConfig) -> Vec<Rule> {
    let n_geo = cfg.upsilon.min(GEOMETRIC.len());
    let mut rules = Vec::with_capacity(cfg.upsilon);
    for j in 0..cfg.upsilon - n_geo {
        let gate = (j % cfg.eta, (j + 1) % cfg.eta);
        rules.push(Rule { predicate: n_geo + j, geo: GATED_GEO[j % GATED_GEO.len()], gate: Some(gate) });
    }
    for geo in GEO_PRIORITY {
        if let Some(p) = GEOMETRIC[..n_geo].iter().position(|&g| g == geo) {
            rules.push(Rule { predicate: p, geo, gate: None });
        }
    }
    rules
}

pub fn predicate_name(cfg: &WorldConfig, p: usize) -> String {
    let n_geo = cfg.upsilon.min(GEOMETRIC.len());
    match GEOMETRIC.get(p) {
        Some(g) if p < n_geo => format!("{g:?}").to_lowercase(),
        _ => format!("rare{}", p - n_geo),
    }
}

/// `(subject, object, predicate)` edges for every ordered pair with an
/// applicable rule, highest priority first.
pub fn derive_edges(entities: &[EntityRef], cfg: &WorldConfig) -> Vec<(usize, usize, usize)> {
    let rules = rule_order(cfg);
    let mut edges = Vec::new();
    for i in 0..entities.len() {
        for j in 0..entities.len() {
            if i == j {
                continue;
            }
            if let Some(r) = rules.iter().find(|r| r.applies(entities[i], entities[j])) {
                edges.push((i, j, r.predicate));
            }
        }
    }
    edges
}

pub fn derive_relations(entities: &[EntityRef], cfg: &WorldConfig) -> Vec<Triplet> {
    derive_edges(entities, cfg).into_iter().map(|(s, o, p)| Triplet::new(entities[s], entities[o], p)).collect()
}

/// Dense `(c, grid_h, grid_w)` feature map of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub cells: Tensor<f32>,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.cells.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.cells.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.cells.shape()[2]
    }

    /// Row-major `(h*w, c)` view: one feature row per cell.
    pub fn tokens(&self) -> Tensor<f32> {
        let (c, hw) = (self.channels(), self.height() * self.width());
        let src = self.cells.data();
        let mut data = vec![0.0; hw * c];
        for ch in 0..c {
            for cell in 0..hw {
                data[cell * c + ch] = src[ch * hw + cell];
            }
        }
        Tensor::matrix(hw, c, data).expect("token shape")
    }
}

fn cell_coverage(b: Corners, cell: Corners) -> f64 {
    let iw = (b.x2.min(cell.x2) - b.x1.max(cell.x1)).max(0.0) as f64;
    let ih = (b.y2.min(cell.y2) - b.y1.max(cell.y1)).max(0.0) as f64;
    let area = (cell.x2 - cell.x1) as f64 * (cell.y2 - cell.y1) as f64;
    iw * ih / area
}

/// Channels: per-class coverage, then center and size of the smallest shape
/// covering the cell beyond the dominance threshold.
pub fn render_grid(entities: &[EntityRef], cfg: &WorldConfig) -> FeatureGrid {
    let (gw, gh, c) = (cfg.grid_w, cfg.grid_h, cfg.channels());
    let hw = gw * gh;
    let mut data = vec![0.0f32; c * hw];
    for y in 0..gh {
        for x in 0..gw {
            let cell = Corners::new(
                x as f32 / gw as f32,
                y as f32 / gh as f32,
                (x + 1) as f32 / gw as f32,
                (y + 1) as f32 / gh as f32,
            );
            let idx = y * gw + x;
            let mut dominant: Option<(f64, usize)> = None;
            for (k, e) in entities.iter().enumerate() {
                let cov = cell_coverage(e.bbox.to_corners(), cell);
                let slot = &mut data[e.class_id * hw + idx];
                *slot = (*slot as f64 + cov).min(1.0) as f32;
                if cov > DOMINANCE_COVERAGE && dominant.map_or(true, |(a, _)| e.bbox.area() < a) {
                    dominant = Some((e.bbox.area(), k));
                }
            }
            if let Some((_, k)) = dominant {
                for (j, v) in entities[k].bbox.to_array().into_iter().enumerate() {
                    data[(cfg.eta + j) * hw + idx] = v;
                }
            }
        }
    }
    FeatureGrid { cells: Tensor::new(vec![c, gh, gw], data).expect("grid shape") }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub grid: FeatureGrid,
    pub graph: SceneGraph,
}

impl Scene {
    pub fn entities(&self) -> &[EntityRef] {
        self.graph.instances.as_ref().map_or(&[], |i| &i.nodes)
    }

    pub fn id(&self) -> &str {
        &self.graph.scene_id
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for one scene.
pub fn scene_rng(seed: u64, split: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed ^ mix64(split as u64)) ^ index as u64))
}

fn sample_entities(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<EntityRef> {
    let weights: Vec<f64> = (0..cfg.eta).map(|k| ((k + 1) as f64).powf(-cfg.tail_skew)).collect();
    let classes = WeightedIndex::new(&weights).expect("positive class weights");
    let count = rng.gen_range(2..=cfg.max_entities);
    let mut out: Vec<EntityRef> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = classes.sample(rng);
        let parents: Vec<BBox> =
            out.iter().map(|e| e.bbox).filter(|b| b.w >= 2.0 * MIN_SIDE && b.h >= 2.0 * MIN_SIDE).collect();
        let bbox = if !parents.is_empty() && rng.gen_bool(NEST_PROB) {
            let p = parents[rng.gen_range(0..parents.len())].to_corners();
            let w = rng.gen_range(MIN_SIDE..=0.7 * (p.x2 - p.x1));
            let h = rng.gen_range(MIN_SIDE..=0.7 * (p.y2 - p.y1));
            let x1 = rng.gen_range(p.x1..=p.x2 - w);
            let y1 = rng.gen_range(p.y1..=p.y2 - h);
            BBox::new(x1 + 0.5 * w, y1 + 0.5 * h, w, h)
        } else {
            let w = rng.gen_range(MIN_SIDE..=MAX_SIDE);
            let h = rng.gen_range(MIN_SIDE..=MAX_SIDE);
            BBox::new(rng.gen_range(0.5 * w..=1.0 - 0.5 * w), rng.gen_range(0.5 * h..=1.0 - 0.5 * h), w, h)
        };
        out.push(EntityRef { class_id, bbox });
    }
    out
}

pub fn generate_scene(cfg: &WorldConfig, scene_id: impl Into<String>, rng: &mut ChaCha8Rng) -> Scene {
    let entities = sample_entities(cfg, rng);
    let edges = derive_edges(&entities, cfg);
    let grid = render_grid(&entities, cfg);
    Scene { grid, graph: SceneGraph::from_nodes(scene_id, entities, &edges) }
}

pub fn generate_split(cfg: &WorldConfig, split: usize, count: usize) -> Vec<Scene> {
    (0..count)
        .map(|i| generate_scene(cfg, format!("{}-{i:05}", SPLITS[split]), &mut scene_rng(cfg.seed, split, i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
    pub fractions: Vec<f64>,
}

impl FrequencyTable {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let fractions =
            counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect();
        Self { counts, fractions }
    }

    pub fn from_scenes(scenes: &[Scene], upsilon: usize) -> Self {
        let mut counts = vec![0u64; upsilon];
        for s in scenes {
            for t in &s.graph.triplets {
                counts[t.predicate_class] += 1;
            }
        }
        Self::from_counts(counts)
    }
}

/// Class triples `(subject, predicate, object)` seen in training.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TripletRegistry {
    triples: BTreeSet<(usize, usize, usize)>,
}

impl TripletRegistry {
    pub fn from_scenes(scenes: &[Scene]) -> Self {
        Self::from_triples(scenes.iter().flat_map(|s| s.graph.triplets.iter().map(Triplet::class_triple)))
    }

    pub fn from_triples(it: impl IntoIterator<Item = (usize, usize, usize)>) -> Self {
        Self { triples: it.into_iter().collect() }
    }

    pub fn contains(&self, triple: (usize, usize, usize)) -> bool {
        self.triples.contains(&triple)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HbtPartition {
    pub head: Vec<usize>,
    pub body: Vec<usize>,
    pub tail: Vec<usize>,
}

pub const HEAD_FRACTION: f64 = 0.10;
pub const TAIL_FRACTION: f64 = 0.01;

pub fn hbt_partition(freq: &FrequencyTable) -> HbtPartition {
    hbt_partition_with(freq, HEAD_FRACTION, TAIL_FRACTION)
}

/// Splits classes by count relative to the most frequent class. Members of
/// each subset are listed by descending count.
pub fn hbt_partition_with(freq: &FrequencyTable, head_frac: f64, tail_frac: f64) -> HbtPartition {
    let max = freq.counts.iter().copied().max().unwrap_or(0) as f64;
    let mut order: Vec<usize> = (0..freq.counts.len()).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(freq.counts[c]), c));
    let mut part = HbtPartition { head: vec![], body: vec![], tail: vec![] };
    for c in order {
        let n = freq.counts[c] as f64;
        if n >= head_frac * max {
            part.head.push(c);
        } else if n < tail_frac * max {
            part.tail.push(c);
        } else {
            part.body.push(c);
        }
    }
    part
}

/// Empirical `P(predicate | subject class, object class)` with marginal backoff.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqPrior {
    pairs: BTreeMap<(usize, usize), Vec<u64>>,
    marginal: Vec<f64>,
}

impl FreqPrior {
    pub fn from_scenes(scenes: &[Scene], upsilon: usize) -> Self {
        let mut pairs: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
        for s in scenes {
            for t in &s.graph.triplets {
                pairs.entry((t.subject.class_id, t.object.class_id)).or_insert_with(|| vec![0; upsilon])
                    [t.predicate_class] += 1;
            }
        }
        let freq = FrequencyTable::from_scenes(scenes, upsilon);
        let marginal = if freq.counts.iter().all(|&c| c == 0) {
            vec![1.0 / upsilon as f64; upsilon]
        } else {
            freq.fractions
        };
        Self { pairs, marginal }
    }

    pub fn predict(&self, subject_class: usize, object_class: usize) -> Vec<f64> {
        match self.pairs.get(&(subject_class, object_class)) {
            Some(counts) => {
                let total: u64 = counts.iter().sum();
                counts.iter().map(|&c| c as f64 / total as f64).collect()
            }
            None => self.marginal.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GridRecord {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    s: usize,
    o: usize,
    p: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    grid: GridRecord,
    entities: Vec<EntityRef>,
    triplets: Vec<EdgeRecord>,
}

fn scene_to_record(s: &Scene) -> SceneRecord {
    let bytes: Vec<u8> = s.grid.cells.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let inst = s.graph.instances.as_ref().expect("generated scenes carry instances");
    SceneRecord {
        scene_id: s.graph.scene_id.clone(),
        grid: GridRecord { shape: s.grid.cells.shape().to_vec(), data: B64.encode(bytes) },
        entities: inst.nodes.clone(),
        triplets: inst
            .links
            .iter()
            .zip(&s.graph.triplets)
            .map(|(&(s, o), t)| EdgeRecord { s, o, p: t.predicate_class })
            .collect(),
    }
}

fn record_to_scene(r: SceneRecord) -> Result<Scene> {
    let bytes = B64.decode(&r.grid.data).map_err(|e| CoreError::Format(format!("{}: {e}", r.scene_id)))?;
    if bytes.len() % 4 != 0 {
        return Err(CoreError::Format(format!("{}: grid byte length {}", r.scene_id, bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let cells = Tensor::new(r.grid.shape, data).map_err(|e| CoreError::Format(format!("{}: {e}", r.scene_id)))?;
    for e in &r.triplets {
        if e.s >= r.entities.len() || e.o >= r.entities.len() {
            return Err(CoreError::Format(format!("{}: edge references missing node", r.scene_id)));
        }
    }
    let edges: Vec<_> = r.triplets.iter().map(|e| (e.s, e.o, e.p)).collect();
    Ok(Scene { grid: FeatureGrid { cells }, graph: SceneGraph::from_nodes(r.scene_id, r.entities, &edges) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub file: String,
    pub sha256: String,
    pub scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub world: WorldConfig,
    pub rules: Vec<Rule>,
    pub splits: BTreeMap<String, SplitInfo>,
    pub max_triplets: usize,
    pub frequency: FrequencyTable,
    pub registry: TripletRegistry,
    pub partition: HbtPartition,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[Scene]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn freq_prior(&self) -> FreqPrior {
        FreqPrior::from_scenes(&self.train, self.manifest.world.upsilon)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn shard_bytes(scenes: &[Scene]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in scenes {
        serde_json::to_writer(&mut out, &scene_to_record(s))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Generates all splits in memory.
pub fn generate_dataset(cfg: &WorldConfig, n_train: usize, n_val: usize, n_test: usize) -> Result<Dataset> {
    cfg.validate()?;
    let [train, val, test] = [n_train, n_val, n_test]
        .into_iter()
        .enumerate()
        .map(|(k, n)| generate_split(cfg, k, n))
        .collect::<Vec<_>>()
        .try_into()
        .expect("three splits");
    let frequency = FrequencyTable::from_scenes(&train, cfg.upsilon);
    let manifest = Manifest {
        world: cfg.clone(),
        rules: rule_order(cfg),
        splits: BTreeMap::new(),
        max_triplets: cfg.max_triplets(),
        partition: hbt_partition(&frequency),
        registry: TripletRegistry::from_scenes(&train),
        frequency,
    };
    Ok(Dataset { manifest, train, val, test })
}

/// Writes shards and manifest under `dir`; returns the manifest and its path.
pub fn write_dataset(ds: &mut Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    for name in SPLITS {
        let bytes = shard_bytes(ds.split(name).expect("known split"))?;
        let file = format!("{name}.jsonl");
        let path = dir.join(&file);
        fs::File::create(&path).and_then(|mut f| f.write_all(&bytes)).map_err(|e| CoreError::io(&path, e))?;
        let scenes = ds.split(name).expect("known split").len();
        ds.manifest.splits.insert(name.to_string(), SplitInfo { file, sha256: sha256_hex(&bytes), scenes });
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest_bytes(&ds.manifest)?).map_err(|e| CoreError::io(&path, e))?;
    Ok(path)
}

pub fn manifest_bytes(m: &Manifest) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(m)?;
    v.push(b'\n');
    Ok(v)
}

pub fn build_dataset(
    cfg: &WorldConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    dir: &Path,
) -> Result<(Dataset, PathBuf)> {
    let mut ds = generate_dataset(cfg, n_train, n_val, n_test)?;
    let path = write_dataset(&mut ds, dir)?;
    Ok((ds, path))
}

/// Accepts either the manifest file or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let dir = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read(&mpath).map_err(|e| CoreError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    manifest.world.validate()?;
    let mut splits = Vec::new();
    for name in SPLITS {
        let info = manifest.splits.get(name).ok_or_else(|| CoreError::Format(format!("manifest lacks split {name}")))?;
        let path = dir.join(&info.file);
        let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != info.sha256 {
            return Err(CoreError::HashMismatch { path, expected: info.sha256.clone(), actual });
        }
        let text = std::str::from_utf8(&bytes).map_err(|e| CoreError::Format(e.to_string()))?;
        let scenes =
            text.lines().map(|l| record_to_scene(serde_json::from_str(l)?)).collect::<Result<Vec<_>>>()?;
        if scenes.len() != info.scenes {
            return Err(CoreError::Format(format!("{name}: {} scenes, manifest says {}", scenes.len(), info.scenes)));
        }
        splits.push(scenes);
    }
    let test = splits.pop().expect("test");
    let val = splits.pop().expect("val");
    let train = splits.pop().expect("train");
    Ok(Dataset { manifest, train, val, test })
}
