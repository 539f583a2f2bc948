//! Deterministic synthetic scenes and a planted-relevance teacher.
//!
//! Scenes hold `n` objects with identifier, 3D-semantic and 2D-semantic
//! embeddings plus box geometry, a closed-vocabulary prompt asking for one
//! object, and a short generated answer. The teacher emits attention stacks
//! whose aggregated importance is known in closed form: with zero noise the
//! oracle equals `softmax(gain * relevance)` exactly, so rankings and masses
//! can be checked without a trained model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{build_oracle, AttentionStack, Segmentation, TOKENS_PER_OBJECT};
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::sap::PruneSchedule;

pub const SCHEMA_VERSION: u32 = 1;

/// Prompt and answer vocabulary. Ids stay below [`VOCAB_SIZE`].
pub mod vocab {
    pub const PAD: u16 = 0;
    pub const BOS: u16 = 1;
    pub const EOS: u16 = 2;
    pub const FIND: u16 = 3;
    pub const THE: u16 = 4;
    pub const WHICH: u16 = 5;
    pub const OBJECT: u16 = 6;
    pub const IS: u16 = 7;
    pub const HIGHEST: u16 = 8;
    pub const LOWEST: u16 = 9;
    pub const NEAREST: u16 = 10;
    pub const TO: u16 = 11;
    pub const ORIGIN: u16 = 12;
    pub const DOT: u16 = 13;
    /// First category word; category `k` is `CATEGORY_BASE + k`.
    pub const CATEGORY_BASE: u16 = 32;
    /// First object-identifier token; object `i` is `OBJECT_BASE + i`.
    pub const OBJECT_BASE: u16 = 128;
}

pub const VOCAB_SIZE: usize = 256;
pub const MAX_OBJECTS: usize = VOCAB_SIZE - vocab::OBJECT_BASE as usize;
pub const MAX_CATEGORIES: usize = (vocab::OBJECT_BASE - vocab::CATEGORY_BASE) as usize;
pub const MAX_GEN_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "category", rename_all = "snake_case")]
pub enum Query {
    /// The unique object of a category.
    Category(usize),
    /// Largest center height.
    Highest,
    /// Smallest center height.
    Lowest,
    /// Smallest Euclidean norm of the center.
    NearestOrigin,
}

impl Query {
    pub fn prompt(&self) -> Vec<u16> {
        use vocab::*;
        match *self {
            Query::Category(k) => vec![BOS, FIND, THE, CATEGORY_BASE + k as u16],
            Query::Highest => vec![BOS, WHICH, OBJECT, IS, HIGHEST],
            Query::Lowest => vec![BOS, WHICH, OBJECT, IS, LOWEST],
            Query::NearestOrigin => vec![BOS, WHICH, OBJECT, IS, NEAREST, TO, ORIGIN],
        }
    }

    /// Answer set computed from geometry and categories.
    pub fn answer(&self, objects: &[SceneObject]) -> Vec<usize> {
        let pick = |key: &dyn Fn(&SceneObject) -> f64| {
            let mut best = 0;
            for (i, o) in objects.iter().enumerate() {
                if key(o) > key(&objects[best]) {
                    best = i;
                }
            }
            vec![best]
        };
        match *self {
            Query::Category(k) => objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.category == k)
                .map(|(i, _)| i)
                .collect(),
            Query::Highest => pick(&|o| o.center[2]),
            Query::Lowest => pick(&|o| -o.center[2]),
            Query::NearestOrigin => pick(&|o| -norm(&o.center)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub identifier: Vec<f64>,
    pub semantic_3d: Vec<f64>,
    pub semantic_2d: Vec<f64>,
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// Latent category; not an input to the predictor.
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub schema: u32,
    pub index: u64,
    pub seed: u64,
    pub split: Split,
    pub objects: Vec<SceneObject>,
    pub query: Query,
    pub prompt: Vec<u16>,
    pub generated: Vec<u16>,
    /// 0-based object indices answering the query.
    pub targets: Vec<usize>,
}

impl SceneSample {
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn segmentation(&self) -> Segmentation {
        Segmentation::new(self.objects.len(), self.prompt.len(), self.generated.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "sample schema {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        let n = self.objects.len();
        if n == 0 || n > MAX_OBJECTS {
            return Err(Error::SchemaMismatch(format!("{n} objects")));
        }
        let first = &self.objects[0];
        for o in &self.objects {
            if o.identifier.len() != first.identifier.len()
                || o.semantic_3d.len() != first.semantic_3d.len()
                || o.semantic_2d.len() != first.semantic_2d.len()
            {
                return Err(Error::SchemaMismatch("ragged object embeddings".into()));
            }
            if o.size.iter().any(|z| !(*z > 0.0)) {
                return Err(Error::SchemaMismatch("non-positive box size".into()));
            }
        }
        if self.prompt.is_empty() || self.generated.is_empty() {
            return Err(Error::SchemaMismatch("empty prompt or answer".into()));
        }
        if self
            .prompt
            .iter()
            .chain(&self.generated)
            .any(|&t| t as usize >= VOCAB_SIZE)
        {
            return Err(Error::SchemaMismatch("token outside vocabulary".into()));
        }
        if self.targets.is_empty() || self.targets.iter().any(|&t| t >= n) {
            return Err(Error::SchemaMismatch("target ids outside object range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub id_dim: usize,
    pub sem3d_dim: usize,
    pub sem2d_dim: usize,
    pub n_categories: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Relative weights of category, highest, lowest, nearest-origin queries.
    pub query_weights: [f64; 4],
    /// Seed of the identifier and category-prototype tables shared by all scenes.
    pub table_seed: u64,
    pub semantic_noise: f64,
    /// Minimum lead of a geometric answer over the runner-up, in scene units.
    pub answer_margin: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            id_dim: 64,
            sem3d_dim: 32,
            sem2d_dim: 32,
            n_categories: 8,
            n_min: 8,
            n_max: 64,
            query_weights: [0.4, 0.2, 0.2, 0.2],
            table_seed: 0x5eed,
            semantic_noise: 0.3,
            answer_margin: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_min == 0 || self.n_min > self.n_max || self.n_max > MAX_OBJECTS {
            return Err(Error::InvalidConfig(format!(
                "object range [{}, {}] must lie in [1, {MAX_OBJECTS}]",
                self.n_min, self.n_max
            )));
        }
        if self.n_categories < 2 || self.n_categories > MAX_CATEGORIES {
            return Err(Error::InvalidConfig(format!(
                "n_categories {} outside [2, {MAX_CATEGORIES}]",
                self.n_categories
            )));
        }
        if self.id_dim == 0 || self.sem3d_dim == 0 || self.sem2d_dim == 0 {
            return Err(Error::InvalidConfig("embedding dims must be positive".into()));
        }
        if self.query_weights.iter().any(|w| !(*w >= 0.0))
            || self.query_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidConfig("query weights".into()));
        }
        if !(self.answer_margin >= 0.0 && self.answer_margin.is_finite()) {
            return Err(Error::InvalidConfig("answer_margin must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Tables shared by every scene of one configuration.
struct Tables {
    identifiers: Vec<Vec<f64>>,
    proto_3d: Vec<Vec<f64>>,
    proto_2d: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl Tables {
    fn new(cfg: &SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.table_seed);
        let id_scale = 1.0 / (cfg.id_dim as f64).sqrt();
        let identifiers = (0..MAX_OBJECTS)
            .map(|_| gaussian_vec(&mut rng, cfg.id_dim, id_scale))
            .collect();
        let proto_3d = (0..cfg.n_categories)
            .map(|_| gaussian_vec(&mut rng, cfg.sem3d_dim, 1.0))
            .collect();
        let proto_2d = (0..cfg.n_categories)
            .map(|_| gaussian_vec(&mut rng, cfg.sem2d_dim, 1.0))
            .collect();
        Self {
            identifiers,
            proto_3d,
            proto_2d,
        }
    }
}

/// Derives the per-sample seed for index `index` of a run seeded `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates scenes with a shared table set.
pub struct SceneGenerator {
    cfg: SceneConfig,
    tables: Tables,
}

impl SceneGenerator {
    pub fn new(cfg: SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let tables = Tables::new(&cfg);
        Ok(Self { cfg, tables })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    /// Scene with an object count drawn from the configured range.
    pub fn generate(&self, index: u64, seed: u64, split: Split) -> SceneSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(self.cfg.n_min..=self.cfg.n_max);
        self.generate_with(n, None, index, seed, split, &mut rng)
    }

    /// `count` scenes of one split; scene `i` is seeded from `(seed, split, i)`.
    pub fn generate_split(&self, count: usize, seed: u64, split: Split) -> Vec<SceneSample> {
        let base = sample_seed(seed, split as u64 + 1);
        (0..count as u64)
            .map(|i| self.generate(i, sample_seed(base, i), split))
            .collect()
    }

    /// Scene with exactly `n` objects, optionally forcing the query kind.
    pub fn generate_n(&self, n: usize, query: Option<Query>, seed: u64) -> Result<SceneSample> {
        if n == 0 || n > MAX_OBJECTS {
            return Err(Error::InvalidConfig(format!("n = {n}")));
        }
        if let Some(Query::Category(k)) = query {
            if k >= self.cfg.n_categories {
                return Err(Error::InvalidConfig(format!("category {k}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.generate_with(n, query, 0, seed, Split::Train, &mut rng))
    }

    fn generate_with(
        &self,
        n: usize,
        forced: Option<Query>,
        index: u64,
        seed: u64,
        split: Split,
        rng: &mut ChaCha8Rng,
    ) -> SceneSample {
        let cfg = &self.cfg;
        let mut objects: Vec<SceneObject> = (0..n)
            .map(|i| {
                let category = rng.random_range(0..cfg.n_categories);
                let center = [
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(0.0..2.5),
                ];
                let size = [
                    rng.random_range(0.2..1.5),
                    rng.random_range(0.2..1.5),
                    rng.random_range(0.2..1.5),
                ];
                SceneObject {
                    identifier: self.tables.identifiers[i].clone(),
                    semantic_3d: Vec::new(),
                    semantic_2d: Vec::new(),
                    center,
                    size,
                    category,
                }
            })
            .collect();

        let query = forced.unwrap_or_else(|| {
            let total: f64 = cfg.query_weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut kind = 3;
            for (k, w) in cfg.query_weights.iter().enumerate() {
                if u < *w {
                    kind = k;
                    break;
                }
                u -= w;
            }
            match kind {
                0 => {
                    let target = rng.random_range(0..n);
                    Query::Category(objects[target].category)
                }
                1 => Query::Highest,
                2 => Query::Lowest,
                _ => Query::NearestOrigin,
            }
        });

        // A category query names exactly one object.
        if let Query::Category(k) = query {
            let holders: Vec<usize> = (0..n).filter(|&i| objects[i].category == k).collect();
            let keep = if holders.is_empty() {
                let t = rng.random_range(0..n);
                objects[t].category = k;
                t
            } else {
                holders[rng.random_range(0..holders.len())]
            };
            for (i, o) in objects.iter_mut().enumerate() {
                if i != keep && o.category == k {
                    let shift = rng.random_range(1..cfg.n_categories);
                    o.category = (k + shift) % cfg.n_categories;
                }
            }
        }

        separate_answer(&mut objects, query, cfg.answer_margin);

        for o in &mut objects {
            let c = o.category;
            o.semantic_3d = self.tables.proto_3d[c]
                .iter()
                .map(|p| p + cfg.semantic_noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            o.semantic_2d = self.tables.proto_2d[c]
                .iter()
                .map(|p| p + cfg.semantic_noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
        }

        let targets = query.answer(&objects);
        let prompt = query.prompt();
        let t = rng.random_range(1..=MAX_GEN_LEN);
        let mut generated = vec![vocab::OBJECT_BASE + targets[0] as u16];
        while generated.len() < t {
            generated.push(if generated.len() + 1 == t {
                vocab::EOS
            } else {
                vocab::DOT
            });
        }

        SceneSample {
            schema: SCHEMA_VERSION,
            index,
            seed,
            split,
            objects,
            query,
            prompt,
            generated,
            targets,
        }
    }
}

/// Moves the winner of a geometric query so it leads the runner-up by `margin`.
fn separate_answer(objects: &mut [SceneObject], query: Query, margin: f64) {
    if objects.len() < 2 || margin == 0.0 || matches!(query, Query::Category(_)) {
        return;
    }
    let key = |o: &SceneObject| match query {
        Query::Highest => o.center[2],
        Query::Lowest => -o.center[2],
        _ => -norm(&o.center),
    };
    let best = query.answer(objects)[0];
    let runner_up = objects
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, o)| key(o))
        .fold(f64::NEG_INFINITY, f64::max);
    let lead = key(&objects[best]) - runner_up;
    if lead >= margin {
        return;
    }
    let c = &mut objects[best].center;
    match query {
        Query::Highest => c[2] = runner_up + margin,
        Query::Lowest => c[2] = -runner_up - margin,
        _ => {
            let target = (-runner_up - margin).max(-runner_up / 2.0);
            let r = norm(c);
            if r > 0.0 {
                let scale = target / r;
                c.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Ground-truth relevance the teacher embeds into its attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRelevance {
    pub relevance: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub layers: usize,
    pub heads: usize,
    /// Plant gain on the attention logits.
    pub gain: f64,
    pub noise_sigma: f64,
    /// Relevance mass shared by the target objects.
    pub target_mass: f64,
    /// Decay length of non-target relevance with distance to the nearest target.
    pub length_scale: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 2,
            gain: 4.0,
            noise_sigma: 0.25,
            target_mass: 0.6,
            length_scale: 2.0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig("teacher needs layers and heads".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.gain.is_finite() {
            return Err(Error::InvalidConfig("teacher noise/gain".into()));
        }
        if !(self.target_mass > 0.0 && self.target_mass <= 1.0) || !(self.length_scale > 0.0) {
            return Err(Error::InvalidConfig("teacher plant shape".into()));
        }
        Ok(())
    }
}

/// Relevance concentrated on the targets, decaying with distance elsewhere.
pub fn plant_for(sample: &SceneSample, cfg: &TeacherConfig) -> PlantedRelevance {
    let n = sample.n_objects();
    let seed = sample_seed(sample.seed, 0x7eac_4e12);
    if n == 1 {
        return PlantedRelevance {
            relevance: vec![1.0],
            noise_sigma: cfg.noise_sigma,
            seed,
        };
    }
    let mut relevance = vec![0.0; n];
    let others: Vec<usize> = (0..n).filter(|i| !sample.targets.contains(i)).collect();
    let target_share = if others.is_empty() {
        1.0
    } else {
        cfg.target_mass
    };
    for &t in &sample.targets {
        relevance[t] = target_share / sample.targets.len() as f64;
    }
    let weights: Vec<f64> = others
        .iter()
        .map(|&i| {
            let d = sample
                .targets
                .iter()
                .map(|&t| dist(&sample.objects[i].center, &sample.objects[t].center))
                .fold(f64::INFINITY, f64::min);
            (-d / cfg.length_scale).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    for (&i, w) in others.iter().zip(&weights) {
        relevance[i] = (1.0 - target_share) * w / total;
    }
    PlantedRelevance {
        relevance,
        noise_sigma: cfg.noise_sigma,
        seed,
    }
}

/// Closed-form noise-free oracle for a plant: `exp(gain * relevance)` lifted
/// by half its mean, then normalized.
pub fn expected_oracle(plant: &PlantedRelevance, gain: f64) -> ImportanceMap {
    ImportanceMap::normalize(&planted_levels(&plant.relevance, gain, LEVEL_FLOOR)).expect("positive weights")
}

/// Share of the mean level added to every object's level. Causal rows give
/// the first visual column a positional floor that pure exponential levels
/// cannot always undercut.
const LEVEL_FLOOR: f64 = 0.5;

fn planted_levels(relevance: &[f64], gain: f64, floor: f64) -> Vec<f64> {
    let max = relevance.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = relevance.iter().map(|r| (gain * (r - max)).exp()).collect();
    let lift = floor * e.iter().sum::<f64>() / e.len() as f64;
    e.iter().map(|x| x + lift).collect()
}

/// Visual column weights such that the summed noise-free aggregation
/// components of column `k` are proportional to `targets[k]`.
///
/// Causal rows see different prefixes, which biases raw column means by
/// position; the weights absorb that bias. Found by fixed-point iteration
/// with the visual weights normalized to mean one; non-visual columns have
/// weight one.
fn compensated_weights(
    targets: &[f64],
    seg: Segmentation,
    confidences: &[f64],
) -> Result<Vec<f64>> {
    let v = seg.visual_len();
    let m = seg.prompt_len;
    let total_conf: f64 = confidences.iter().sum();
    let mut w = targets.to_vec();
    let rescale = |w: &mut Vec<f64>| {
        let s: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x *= v as f64 / s;
        }
    };
    rescale(&mut w);
    let mut inv_z = vec![0.0; seg.seq_len()];
    let mut tail = vec![0.0; v];
    for _ in 0..5000 {
        let mut z = 0.0;
        for (i, iz) in inv_z.iter_mut().enumerate() {
            z += if i < v { w[i] } else { 1.0 };
            *iz = 1.0 / z;
        }
        let mut acc = 0.0;
        for k in (0..v).rev() {
            acc += inv_z[k];
            tail[k] = acc / (v - k) as f64;
        }
        let prompt = inv_z[v..v + m].iter().sum::<f64>() / m as f64;
        let text = inv_z[v + m..]
            .iter()
            .zip(confidences)
            .map(|(iz, s)| iz * s)
            .sum::<f64>()
            / total_conf;
        // geometric damping suppresses period-2 oscillation
        let mut next: Vec<f64> = (0..v)
            .map(|k| (w[k] * targets[k] / (tail[k] + prompt + text)).sqrt())
            .collect();
        rescale(&mut next);
        let change = next
            .iter()
            .zip(&w)
            .map(|(a, b)| (a / b - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        if change < 1e-14 {
            return Ok(w);
        }
    }
    Err(Error::InvalidStack("teacher compensation did not converge".into()))
}

/// Emits an `L x H` causal attention stack carrying the plant.
///
/// Every row is a softmax over its causal prefix with logits
/// `ln(weight(column)) + noise`. Visual weights are compensated for causal
/// position so that at zero noise the oracle equals [`expected_oracle`], a
/// strictly increasing function of relevance; prompt and generated columns
/// have logit zero. Noise is i.i.d. Gaussian per entry with the plant's sigma.
pub fn planted_teacher_stack(
    sample: &SceneSample,
    plant: &PlantedRelevance,
    gain: f64,
    layers: usize,
    heads: usize,
) -> Result<AttentionStack> {
    let seg = sample.segmentation();
    let n = seg.n_objects;
    if plant.relevance.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "plant over {} objects for a scene of {n}",
            plant.relevance.len()
        )));
    }
    ImportanceMap::new(plant.relevance.clone())?;
    if seg.prompt_len == 0 {
        return Err(Error::EmptyPrompt);
    }
    if seg.gen_len == 0 {
        return Err(Error::EmptyGeneration);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plant.seed);
    let confidences: Vec<f64> = (0..seg.gen_len)
        .map(|_| 1.0 - 0.5 * rng.random::<f64>())
        .collect();

    let per_token: Vec<f64> = planted_levels(&plant.relevance, gain, LEVEL_FLOOR)
        .into_iter()
        .flat_map(|l| std::iter::repeat_n(l, TOKENS_PER_OBJECT))
        .collect();
    let weights = compensated_weights(&per_token, seg, &confidences)?;
    let size = seg.seq_len();
    let base_logits: Vec<f64> = (0..size)
        .map(|j| if j < seg.visual_len() { weights[j].ln() } else { 0.0 })
        .collect();

    let noise = if plant.noise_sigma > 0.0 {
        Some(Normal::new(0.0, plant.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    } else {
        None
    };
    let mut matrices = vec![0.0; layers * heads * size * size];
    let mut logits = vec![0.0; size];
    for block in matrices.chunks_exact_mut(size * size) {
        for (i, row) in block.chunks_exact_mut(size).enumerate() {
            let prefix = &mut logits[..=i];
            for (j, l) in prefix.iter_mut().enumerate() {
                *l = base_logits[j]
                    + noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            }
            let peak = prefix.iter().cloned().fold(f64::MIN, f64::max);
            let mut z = 0.0;
            for (a, l) in row.iter_mut().zip(prefix.iter()) {
                *a = (l - peak).exp();
                z += *a;
            }
            for a in &mut row[..=i] {
                *a /= z;
            }
        }
    }
    AttentionStack::new(layers, heads, seg, confidences, matrices)
}

/// Plant, teacher stack and oracle for one sample under `cfg`.
pub fn teacher_oracle(sample: &SceneSample, cfg: &TeacherConfig) -> Result<(PlantedRelevance, ImportanceMap)> {
    let plant = plant_for(sample, cfg);
    let stack = planted_teacher_stack(sample, &plant, cfg.gain, cfg.layers, cfg.heads)?;
    Ok((plant, build_oracle(&stack)?))
}

/// End-task proxy: the answer survives iff every target is kept at the
/// deepest layer.
pub fn teacher_answer_under_pruning(sample: &SceneSample, schedule: &PruneSchedule) -> bool {
    match schedule.deepest() {
        Some(kept) => sample.targets.iter().all(|t| kept.contains(t)),
        None => true,
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        // Constant vectors: identical iff both constant.
        return if va == vb { 1.0 } else { 0.0 };
    }
    cov / (va * vb).sqrt()
}
