#![allow(dead_code)]

use objprune::gapnet::{finite_difference_check, FdOptions, GapConfig, GapNet, GapParams};
use objprune::scenesim::{teacher_oracle, SceneConfig, SceneGenerator, SceneSample, Split, TeacherConfig};
use objprune::ImportanceMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn shape_a() -> GapConfig {
    GapConfig {
        hidden_dim: 8,
        num_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_dim: 12,
        sem3d_dim: 4,
        sem2d_dim: 3,
        ..GapConfig::default()
    }
}

pub fn shape_b() -> GapConfig {
    GapConfig {
        hidden_dim: 12,
        num_heads: 3,
        encoder_layers: 2,
        decoder_layers: 2,
        ffn_dim: 20,
        sem3d_dim: 5,
        sem2d_dim: 6,
        lambda: 0.5,
        ..GapConfig::default()
    }
}

pub fn scene_generator_for(cfg: &GapConfig, n_min: usize, n_max: usize) -> SceneGenerator {
    SceneGenerator::new(SceneConfig {
        id_dim: cfg.hidden_dim,
        sem3d_dim: cfg.sem3d_dim,
        sem2d_dim: cfg.sem2d_dim,
        n_min,
        n_max,
        ..SceneConfig::default()
    })
    .unwrap()
}

/// Scenes paired with teacher oracles.
pub fn planted_set(
    gen: &SceneGenerator,
    teacher: &TeacherConfig,
    count: usize,
    seed: u64,
    split: Split,
) -> Vec<(SceneSample, ImportanceMap)> {
    gen.generate_split(count, seed, split)
        .into_iter()
        .map(|s| {
            let (_, oracle) = teacher_oracle(&s, teacher).unwrap();
            (s, oracle)
        })
        .collect()
}

/// Initial weights jittered so gains, biases and bucket offsets are generic.
pub fn jittered_params(net: &GapNet, seed: u64) -> GapParams {
    let mut p = net.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let noise = Normal::new(0.0, 0.1).unwrap();
    for v in &mut p.values {
        *v += noise.sample(&mut rng);
    }
    p
}

/// Worst per-segment relative error on a small planted scene.
pub fn gradient_check(net: &GapNet, seed: u64) -> (f64, String) {
    let gen = scene_generator_for(net.config(), 4, 7);
    let sample = gen.generate(seed, seed.wrapping_mul(31) + 7, Split::Train);
    let (_, oracle) = teacher_oracle(&sample, &TeacherConfig::default()).unwrap();
    let target = oracle.sharpen(net.config().temperature).unwrap();
    let params = jittered_params(net, seed);
    finite_difference_check(
        net,
        &params,
        &sample,
        &target,
        FdOptions {
            seed: seed + 99,
            ..FdOptions::default()
        },
    )
        .unwrap()
        .into_iter()
        .map(|c| (c.rel_error, c.name))
        .fold((0.0, String::new()), |w, c| if c.0 > w.0 { c } else { w })
}

/// Random causal row-stochastic stack with some exact zeros inside the prefix.
pub fn random_stack(rng: &mut ChaCha8Rng, layers: usize, heads: usize, n: usize, m: usize, t: usize) -> objprune::AttentionStack {
    let seg = objprune::Segmentation::new(n, m, t);
    let size = seg.seq_len();
    let mut data = vec![0.0; layers * heads * size * size];
    for block in data.chunks_exact_mut(size * size) {
        for (i, row) in block.chunks_exact_mut(size).enumerate() {
            let mut z = 0.0;
            for a in &mut row[..=i] {
                *a = if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random::<f64>().powi(3) };
                z += *a;
            }
            if z == 0.0 {
                row[i] = 1.0;
                z = 1.0;
            }
            for a in &mut row[..=i] {
                *a /= z;
            }
        }
    }
    let conf = (0..t).map(|_| 1.0 - 0.5 * rng.random::<f64>()).collect();
    objprune::AttentionStack::new(layers, heads, seg, conf, data).unwrap()
}
