use ndarray::{Array2, Axis};

use super::loss::{loss, loss_gradient, LossParts};
use super::ops::{
    attention, attention_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, softmax_in_place, AttnCache, AttnWeights, NormCache,
};
use super::params::{GapParams, Init, LayoutBuilder, ParamLayout};
use super::GapConfig;
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;
use crate::scenesim::SceneSample;

/// Pairwise-distance buckets of the spatial self-attention bias.
pub const DISTANCE_BUCKETS: usize = 8;

/// Bucket of a Euclidean center distance: bucket `b > 0` covers
/// `[0.25 * 2^(b-1), 0.25 * 2^b)`; bucket 0 is below 0.25 and the last
/// bucket is open-ended.
pub fn distance_bucket(distance: f64) -> usize {
    let mut edge = 0.25;
    let mut b = 0;
    while b + 1 < DISTANCE_BUCKETS && distance >= edge {
        edge *= 2.0;
        b += 1;
    }
    b
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    bucket_bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncoderIds {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
struct DecoderIds {
    ln1: NormIds,
    spatial: AttnIds,
    ln2: NormIds,
    cross: AttnIds,
    ln3: NormIds,
    ffn: FfnIds,
}

/// Network structure: config plus the segment ids of every weight.
#[derive(Debug, Clone)]
pub struct GapNet {
    config: GapConfig,
    layout: ParamLayout,
    inits: Vec<Init>,
    fuse_w1: usize,
    fuse_b1: usize,
    fuse_w2: usize,
    fuse_b2: usize,
    spatial_w: usize,
    token_emb: usize,
    pos_emb: usize,
    encoder: Vec<EncoderIds>,
    text_norm: NormIds,
    decoder: Vec<DecoderIds>,
    out_norm: NormIds,
    out_w: usize,
    zero_bias: ndarray::Array1<f64>,
}

/// Geometry input per object: center then box size.
const GEOMETRY_DIM: usize = 6;

fn norm_ids(b: &mut LayoutBuilder, prefix: &str, d: usize) -> NormIds {
    NormIds {
        gain: b.push(format!("{prefix}.gain"), &[d], Init::Ones),
        bias: Some(b.push(format!("{prefix}.bias"), &[d], Init::Zeros)),
    }
}

fn attn_ids(b: &mut LayoutBuilder, prefix: &str, d: usize, heads: usize, spatial: bool) -> AttnIds {
    let std = 1.0 / (d as f64).sqrt();
    AttnIds {
        wq: b.push(format!("{prefix}.wq"), &[d, d], Init::Normal(std)),
        wk: b.push(format!("{prefix}.wk"), &[d, d], Init::Normal(std)),
        wv: b.push(format!("{prefix}.wv"), &[d, d], Init::Normal(std)),
        wo: b.push(format!("{prefix}.wo"), &[d, d], Init::Normal(std)),
        bo: b.push(format!("{prefix}.bo"), &[d], Init::Zeros),
        bucket_bias: spatial
            .then(|| b.push(format!("{prefix}.bucket_bias"), &[heads, DISTANCE_BUCKETS], Init::Zeros)),
    }
}

fn ffn_ids(b: &mut LayoutBuilder, prefix: &str, d: usize, f: usize) -> FfnIds {
    FfnIds {
        w1: b.push(format!("{prefix}.w1"), &[d, f], Init::Normal(1.0 / (d as f64).sqrt())),
        b1: b.push(format!("{prefix}.b1"), &[f], Init::Zeros),
        w2: b.push(format!("{prefix}.w2"), &[f, d], Init::Normal(1.0 / (f as f64).sqrt())),
        b2: b.push(format!("{prefix}.b2"), &[d], Init::Zeros),
    }
}

struct FfnCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

struct EncoderCache {
    ln1: NormCache,
    attn: AttnCache,
    ln2: NormCache,
    ffn: FfnCache,
}

struct DecoderCache {
    ln1: NormCache,
    spatial: AttnCache,
    ln2: NormCache,
    cross: AttnCache,
    ln3: NormCache,
    ffn: FfnCache,
}

/// Activations of one forward pass, sufficient for exact backprop.
pub struct ForwardCache {
    n_objects: usize,
    param_count: usize,
    semantic: Array2<f64>,
    fuse_pre: Array2<f64>,
    fuse_act: Array2<f64>,
    geometry: Array2<f64>,
    prompt: Vec<usize>,
    encoder: Vec<EncoderCache>,
    text_norm: NormCache,
    buckets: Array2<usize>,
    decoder: Vec<DecoderCache>,
    out_norm: NormCache,
    hidden: Array2<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn prediction(&self) -> ImportanceMap {
        ImportanceMap::new(self.probs.clone()).expect("softmax output is a simplex")
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }
}

impl GapNet {
    pub fn new(config: GapConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let h = config.num_heads;
        let sem = config.sem3d_dim + config.sem2d_dim;
        let mut b = LayoutBuilder::default();
        let fuse_w1 = b.push("fuse.w1", &[sem, d], Init::Normal(1.0 / (sem as f64).sqrt()));
        let fuse_b1 = b.push("fuse.b1", &[d], Init::Zeros);
        let fuse_w2 = b.push("fuse.w2", &[d, d], Init::Normal(1.0 / (d as f64).sqrt()));
        let fuse_b2 = b.push("fuse.b2", &[d], Init::Zeros);
        let spatial_w = b.push("spatial.w", &[GEOMETRY_DIM, d], Init::Normal(0.2));
        let token_emb = b.push("text.token", &[config.vocab_size, d], Init::Normal(1.0));
        let pos_emb = b.push("text.position", &[config.max_prompt_len, d], Init::Normal(0.1));
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let p = format!("enc{i}");
                EncoderIds {
                    ln1: norm_ids(&mut b, &format!("{p}.ln1"), d),
                    attn: attn_ids(&mut b, &format!("{p}.attn"), d, h, false),
                    ln2: norm_ids(&mut b, &format!("{p}.ln2"), d),
                    ffn: ffn_ids(&mut b, &format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        let text_norm = norm_ids(&mut b, "text.norm", d);
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let p = format!("dec{i}");
                DecoderIds {
                    ln1: norm_ids(&mut b, &format!("{p}.ln1"), d),
                    spatial: attn_ids(&mut b, &format!("{p}.spatial"), d, h, true),
                    ln2: norm_ids(&mut b, &format!("{p}.ln2"), d),
                    cross: attn_ids(&mut b, &format!("{p}.cross"), d, h, false),
                    ln3: norm_ids(&mut b, &format!("{p}.ln3"), d),
                    ffn: ffn_ids(&mut b, &format!("{p}.ffn"), d, f),
                }
            })
            .collect();
        // a shift before the scoring vector moves all logits alike
        let out_norm = NormIds {
            gain: b.push("out.norm.gain", &[d], Init::Ones),
            bias: None,
        };
        let out_w = b.push("out.w", &[d, 1], Init::Normal(1.0 / (d as f64).sqrt()));
        let (layout, inits) = b.finish();
        Ok(Self {
            config,
            layout,
            inits,
            fuse_w1,
            fuse_b1,
            fuse_w2,
            fuse_b2,
            spatial_w,
            token_emb,
            pos_emb,
            encoder,
            text_norm,
            decoder,
            out_norm,
            out_w,
            zero_bias: ndarray::Array1::zeros(d),
        })
    }

    pub fn config(&self) -> &GapConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn init_params(&self, seed: u64) -> GapParams {
        GapParams {
            layout: self.layout.clone(),
            values: self.layout.initialize(&self.inits, seed),
        }
    }

    fn check_params(&self, params: &GapParams) -> Result<()> {
        if params.values.len() != self.layout.total() || params.layout != self.layout {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a network of {}",
                params.values.len(),
                self.layout.total()
            )));
        }
        Ok(())
    }

    fn check_sample(&self, sample: &SceneSample) -> Result<()> {
        let cfg = &self.config;
        if sample.objects.is_empty() {
            return Err(Error::DimensionMismatch("scene without objects".into()));
        }
        for o in &sample.objects {
            if o.identifier.len() != cfg.hidden_dim
                || o.semantic_3d.len() != cfg.sem3d_dim
                || o.semantic_2d.len() != cfg.sem2d_dim
            {
                return Err(Error::DimensionMismatch(format!(
                    "object embeddings {}/{}/{} vs network {}/{}/{}",
                    o.identifier.len(),
                    o.semantic_3d.len(),
                    o.semantic_2d.len(),
                    cfg.hidden_dim,
                    cfg.sem3d_dim,
                    cfg.sem2d_dim
                )));
            }
        }
        if sample.prompt.is_empty() || sample.prompt.len() > cfg.max_prompt_len {
            return Err(Error::DimensionMismatch(format!(
                "prompt of {} tokens (max {})",
                sample.prompt.len(),
                cfg.max_prompt_len
            )));
        }
        if let Some(t) = sample.prompt.iter().find(|t| **t as usize >= cfg.vocab_size) {
            return Err(Error::DimensionMismatch(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    fn attn_weights<'a>(&self, p: &'a [f64], ids: &AttnIds) -> AttnWeights<'a> {
        let l = &self.layout;
        AttnWeights {
            wq: l.mat(p, ids.wq),
            wk: l.mat(p, ids.wk),
            wv: l.mat(p, ids.wv),
            wo: l.mat(p, ids.wo),
            bo: l.vector(p, ids.bo),
            bucket_bias: ids.bucket_bias.map(|id| l.mat(p, id)),
        }
    }

    fn norm(&self, p: &[f64], ids: NormIds, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let bias = match ids.bias {
            Some(id) => self.layout.vector(p, id),
            None => self.zero_bias.view(),
        };
        layer_norm(x.view(), self.layout.vector(p, ids.gain), bias)
    }

    fn ffn(&self, p: &[f64], ids: FfnIds, x: Array2<f64>) -> (Array2<f64>, FfnCache) {
        let l = &self.layout;
        let pre = linear(x.view(), l.mat(p, ids.w1), Some(l.vector(p, ids.b1)));
        let act = gelu(&pre);
        let out = linear(act.view(), l.mat(p, ids.w2), Some(l.vector(p, ids.b2)));
        (out, FfnCache { input: x, pre, act })
    }

    /// Fused object embeddings: identifier + MLP(semantics) + W [center; size].
    pub fn fuse_embeddings(&self, sample: &SceneSample, params: &GapParams) -> Result<Array2<f64>> {
        self.check_params(params)?;
        self.check_sample(sample)?;
        Ok(self.fuse(sample, &params.values).0)
    }

    #[allow(clippy::type_complexity)]
    fn fuse(
        &self,
        sample: &SceneSample,
        p: &[f64],
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let l = &self.layout;
        let n = sample.objects.len();
        let cfg = &self.config;
        let sem_dim = cfg.sem3d_dim + cfg.sem2d_dim;
        let mut semantic = Array2::zeros((n, sem_dim));
        let mut geometry = Array2::zeros((n, GEOMETRY_DIM));
        let mut fused = Array2::zeros((n, cfg.hidden_dim));
        for (i, o) in sample.objects.iter().enumerate() {
            let mut row = semantic.row_mut(i);
            for (dst, src) in row.iter_mut().zip(o.semantic_3d.iter().chain(&o.semantic_2d)) {
                *dst = *src;
            }
            let mut g = geometry.row_mut(i);
            for (dst, src) in g.iter_mut().zip(o.center.iter().chain(&o.size)) {
                *dst = *src;
            }
            for (dst, src) in fused.row_mut(i).iter_mut().zip(&o.identifier) {
                *dst = *src;
            }
        }
        let pre = linear(semantic.view(), l.mat(p, self.fuse_w1), Some(l.vector(p, self.fuse_b1)));
        let act = gelu(&pre);
        fused += &linear(act.view(), l.mat(p, self.fuse_w2), Some(l.vector(p, self.fuse_b2)));
        fused += &geometry.dot(&l.mat(p, self.spatial_w));
        (fused, semantic, pre, act, geometry)
    }

    /// Predicted importance and the activation cache.
    pub fn forward(&self, sample: &SceneSample, params: &GapParams) -> Result<(ImportanceMap, ForwardCache)> {
        self.check_params(params)?;
        self.check_sample(sample)?;
        let p = &params.values;
        let l = &self.layout;
        let heads = self.config.num_heads;
        let n = sample.objects.len();

        let (fused, semantic, fuse_pre, fuse_act, geometry) = self.fuse(sample, p);

        // prompt encoder
        let prompt: Vec<usize> = sample.prompt.iter().map(|&t| t as usize).collect();
        let tok = l.mat(p, self.token_emb);
        let pos = l.mat(p, self.pos_emb);
        let mut x = Array2::zeros((prompt.len(), self.config.hidden_dim));
        for (i, &t) in prompt.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &tok.row(t);
            row += &pos.row(i);
        }
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for ids in &self.encoder {
            let (h, ln1) = self.norm(p, ids.ln1, &x);
            let (a, attn) = attention(&self.attn_weights(p, &ids.attn), heads, h.view(), h.view(), None);
            x += &a;
            let (h, ln2) = self.norm(p, ids.ln2, &x);
            let (f, ffn) = self.ffn(p, ids.ffn, h);
            x += &f;
            encoder.push(EncoderCache { ln1, attn, ln2, ffn });
        }
        let (text, text_norm) = self.norm(p, self.text_norm, &x);

        // object decoder
        let buckets = Array2::from_shape_fn((n, n), |(i, j)| {
            let a = &sample.objects[i].center;
            let b = &sample.objects[j].center;
            let d2: f64 = (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum();
            distance_bucket(d2.sqrt())
        });
        let mut y = fused;
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for ids in &self.decoder {
            let (h, ln1) = self.norm(p, ids.ln1, &y);
            let (a, spatial) = attention(
                &self.attn_weights(p, &ids.spatial),
                heads,
                h.view(),
                h.view(),
                Some(&buckets),
            );
            y += &a;
            let (h, ln2) = self.norm(p, ids.ln2, &y);
            let (c, cross) = attention(&self.attn_weights(p, &ids.cross), heads, h.view(), text.view(), None);
            y += &c;
            let (h, ln3) = self.norm(p, ids.ln3, &y);
            let (f, ffn) = self.ffn(p, ids.ffn, h);
            y += &f;
            decoder.push(DecoderCache {
                ln1,
                spatial,
                ln2,
                cross,
                ln3,
                ffn,
            });
        }
        let (hidden, out_norm) = self.norm(p, self.out_norm, &y);
        let logits = hidden.dot(&l.mat(p, self.out_w));
        let mut probs: Vec<f64> = logits.iter().cloned().collect();
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation("output logits"));
        }
        softmax_in_place(&mut probs);
        let cache = ForwardCache {
            n_objects: n,
            param_count: p.len(),
            semantic,
            fuse_pre,
            fuse_act,
            geometry,
            prompt,
            encoder,
            text_norm,
            buckets,
            decoder,
            out_norm,
            hidden,
            probs,
        };
        Ok((cache.prediction(), cache))
    }

    pub fn predict(&self, sample: &SceneSample, params: &GapParams) -> Result<ImportanceMap> {
        Ok(self.forward(sample, params)?.0)
    }

    /// Loss of the prediction against an (already sharpened) target and its
    /// exact gradient with respect to every parameter.
    pub fn backward(
        &self,
        params: &GapParams,
        cache: &ForwardCache,
        target: &ImportanceMap,
    ) -> Result<(LossParts, Vec<f64>)> {
        if target.len() != cache.n_objects {
            return Err(Error::StaleCache(format!(
                "target over {} objects, cache over {}",
                target.len(),
                cache.n_objects
            )));
        }
        let pred = cache.prediction();
        let parts = loss(target, &pred, self.config.lambda, self.config.margin);
        let dprob = loss_gradient(target, &pred, self.config.lambda, self.config.margin);
        let inner: f64 = dprob.iter().zip(&cache.probs).map(|(g, p)| g * p).sum();
        let dlogits: Vec<f64> = dprob
            .iter()
            .zip(&cache.probs)
            .map(|(g, p)| p * (g - inner))
            .collect();
        Ok((parts, self.backward_from_logits(params, cache, &dlogits)?))
    }

    /// Backpropagates an upstream gradient on the output logits.
    pub fn backward_from_logits(
        &self,
        params: &GapParams,
        cache: &ForwardCache,
        dlogits: &[f64],
    ) -> Result<Vec<f64>> {
        Ok(self.backprop(params, cache, dlogits)?.0)
    }

    /// Gradient with respect to the fused object embeddings, one row per object.
    pub fn embedding_gradient(
        &self,
        params: &GapParams,
        cache: &ForwardCache,
        dlogits: &[f64],
    ) -> Result<Array2<f64>> {
        Ok(self.backprop(params, cache, dlogits)?.1)
    }

    fn backprop(
        &self,
        params: &GapParams,
        cache: &ForwardCache,
        dlogits: &[f64],
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        self.check_params(params)?;
        if cache.param_count != params.values.len() || dlogits.len() != cache.n_objects {
            return Err(Error::StaleCache(format!(
                "cache built for {} params / {} objects, got {} / {}",
                cache.param_count,
                cache.n_objects,
                params.values.len(),
                dlogits.len()
            )));
        }
        let p = &params.values;
        let l = &self.layout;
        let heads = self.config.num_heads;
        let mut grads = vec![0.0; p.len()];

        // output head
        let dlog = Array2::from_shape_vec((cache.n_objects, 1), dlogits.to_vec()).expect("column");
        l.add_mat(&mut grads, self.out_w, &cache.hidden.t().dot(&dlog));
        let dhidden = dlog.dot(&l.mat(p, self.out_w).t());
        let mut dy = self.norm_backward(p, &mut grads, self.out_norm, &cache.out_norm, &dhidden);

        let mut dtext = Array2::<f64>::zeros((cache.prompt.len(), self.config.hidden_dim));
        for (ids, c) in self.decoder.iter().zip(&cache.decoder).rev() {
            let dh = self.ffn_backward(p, &mut grads, ids.ffn, &c.ffn, &dy);
            dy += &self.norm_backward(p, &mut grads, ids.ln3, &c.ln3, &dh);

            let w = self.attn_weights(p, &ids.cross);
            let g = attention_backward(&w, heads, &c.cross, dy.view(), None);
            self.add_attn(&mut grads, &ids.cross, &g);
            dtext += &g.dxkv;
            dy += &self.norm_backward(p, &mut grads, ids.ln2, &c.ln2, &g.dxq);

            let w = self.attn_weights(p, &ids.spatial);
            let g = attention_backward(&w, heads, &c.spatial, dy.view(), Some(&cache.buckets));
            self.add_attn(&mut grads, &ids.spatial, &g);
            let dh = &g.dxq + &g.dxkv;
            dy += &self.norm_backward(p, &mut grads, ids.ln1, &c.ln1, &dh);
        }

        // fusion; the identifier term is an input
        let (dact, dw2, db2) =
            linear_backward(cache.fuse_act.view(), l.mat(p, self.fuse_w2), dy.view());
        l.add_mat(&mut grads, self.fuse_w2, &dw2);
        l.add_vec(&mut grads, self.fuse_b2, &db2);
        let dpre = gelu_backward(&cache.fuse_pre, dact.view());
        l.add_mat(&mut grads, self.fuse_w1, &cache.semantic.t().dot(&dpre));
        l.add_vec(&mut grads, self.fuse_b1, &dpre.sum_axis(Axis(0)));
        l.add_mat(&mut grads, self.spatial_w, &cache.geometry.t().dot(&dy));

        // prompt encoder
        let mut dx = self.norm_backward(p, &mut grads, self.text_norm, &cache.text_norm, &dtext);
        for (ids, c) in self.encoder.iter().zip(&cache.encoder).rev() {
            let dh = self.ffn_backward(p, &mut grads, ids.ffn, &c.ffn, &dx);
            dx += &self.norm_backward(p, &mut grads, ids.ln2, &c.ln2, &dh);
            let w = self.attn_weights(p, &ids.attn);
            let g = attention_backward(&w, heads, &c.attn, dx.view(), None);
            self.add_attn(&mut grads, &ids.attn, &g);
            let dh = &g.dxq + &g.dxkv;
            dx += &self.norm_backward(p, &mut grads, ids.ln1, &c.ln1, &dh);
        }
        let d = self.config.hidden_dim;
        let tok = l.segment(self.token_emb).offset;
        let pos = l.segment(self.pos_emb).offset;
        for (i, &t) in cache.prompt.iter().enumerate() {
            for (k, g) in dx.row(i).iter().enumerate() {
                grads[tok + t * d + k] += g;
                grads[pos + i * d + k] += g;
            }
        }
        Ok((grads, dy))
    }

    fn norm_backward(
        &self,
        p: &[f64],
        grads: &mut [f64],
        ids: NormIds,
        cache: &NormCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let (dx, dg, db) = layer_norm_backward(cache, self.layout.vector(p, ids.gain), dy.view());
        self.layout.add_vec(grads, ids.gain, &dg);
        if let Some(id) = ids.bias {
            self.layout.add_vec(grads, id, &db);
        }
        dx
    }

    fn ffn_backward(
        &self,
        p: &[f64],
        grads: &mut [f64],
        ids: FfnIds,
        cache: &FfnCache,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let l = &self.layout;
        let (dact, dw2, db2) = linear_backward(cache.act.view(), l.mat(p, ids.w2), dy.view());
        l.add_mat(grads, ids.w2, &dw2);
        l.add_vec(grads, ids.b2, &db2);
        let dpre = gelu_backward(&cache.pre, dact.view());
        let (dx, dw1, db1) = linear_backward(cache.input.view(), l.mat(p, ids.w1), dpre.view());
        l.add_mat(grads, ids.w1, &dw1);
        l.add_vec(grads, ids.b1, &db1);
        dx
    }

    fn add_attn(&self, grads: &mut [f64], ids: &AttnIds, g: &super::ops::AttnGrads) {
        let l = &self.layout;
        l.add_mat(grads, ids.wq, &g.dwq);
        l.add_mat(grads, ids.wk, &g.dwk);
        l.add_mat(grads, ids.wv, &g.dwv);
        l.add_mat(grads, ids.wo, &g.dwo);
        l.add_vec(grads, ids.bo, &g.dbo);
        if let (Some(id), Some(db)) = (ids.bucket_bias, &g.dbucket) {
            l.add_mat(grads, id, db);
        }
    }

    /// Objective value only, used by finite-difference checks.
    pub fn objective(&self, sample: &SceneSample, params: &GapParams, target: &ImportanceMap) -> Result<f64> {
        let (pred, _) = self.forward(sample, params)?;
        Ok(loss(target, &pred, self.config.lambda, self.config.margin).total)
    }

    /// Forward FLOPs for `n` objects and `m` prompt tokens in the units of
    /// `ModelDims::layer_flops`: one per weight per row, `2 * q * k * d` for
    /// scores plus mixing.
    pub fn forward_flops(&self, n: usize, m: usize) -> f64 {
        let cfg = &self.config;
        let (n, m) = (n as f64, m as f64);
        let d = cfg.hidden_dim as f64;
        let f = cfg.ffn_dim as f64;
        let sem = (cfg.sem3d_dim + cfg.sem2d_dim) as f64;
        let fusion = n * (sem * d + d * d + GEOMETRY_DIM as f64 * d);
        let block = |rows: f64| 4.0 * rows * d * d + 2.0 * rows * rows * d + 2.0 * rows * d * f;
        let enc_layer = block(m);
        let cross = 2.0 * n * d * d + 2.0 * m * d * d + 2.0 * n * m * d;
        let dec_layer = block(n) + cross;
        let head = n * d;
        fusion
            + cfg.encoder_layers as f64 * enc_layer
            + cfg.decoder_layers as f64 * dec_layer
            + head
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }
}

/// Per-object mean of an activation; used by tests for symmetry checks.
#[cfg(test)]
pub(crate) fn row_means(x: &Array2<f64>) -> ndarray::Array1<f64> {
    x.mean_axis(Axis(1)).expect("non-empty rows")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{Query, SceneConfig, SceneGenerator};

    fn small_config() -> GapConfig {
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

    fn generator(cfg: &GapConfig) -> SceneGenerator {
        SceneGenerator::new(SceneConfig {
            id_dim: cfg.hidden_dim,
            sem3d_dim: cfg.sem3d_dim,
            sem2d_dim: cfg.sem2d_dim,
            n_min: 3,
            n_max: 9,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn buckets_are_log_spaced() {
        assert_eq!(distance_bucket(0.0), 0);
        assert_eq!(distance_bucket(0.24), 0);
        assert_eq!(distance_bucket(0.25), 1);
        assert_eq!(distance_bucket(0.6), 2);
        assert_eq!(distance_bucket(3.9), 4);
        assert_eq!(distance_bucket(16.0), 7);
        assert_eq!(distance_bucket(1e9), 7);
    }

    #[test]
    fn layout_partitions_parameters() {
        let net = GapNet::new(small_config()).unwrap();
        assert!(net.layout().is_partition());
        let params = net.init_params(3);
        assert_eq!(params.total_count(), net.param_count());
        assert!(params.all_finite());
    }

    #[test]
    fn fusion_reduces_to_identifier_with_zero_inputs() {
        let cfg = small_config();
        let net = GapNet::new(cfg.clone()).unwrap();
        let mut params = net.init_params(1);
        // zero biases are the default; zero the semantic and geometry inputs
        let mut s = generator(&cfg).generate_n(4, None, 2).unwrap();
        for o in &mut s.objects {
            o.semantic_3d.iter_mut().for_each(|v| *v = 0.0);
            o.semantic_2d.iter_mut().for_each(|v| *v = 0.0);
            o.center = [0.0; 3];
            o.size = [0.0; 3];
        }
        params.values[net.layout().find("fuse.b2").unwrap().range()].fill(0.0);
        let fused = net.fuse_embeddings(&s, &params).unwrap();
        for (i, o) in s.objects.iter().enumerate() {
            for (a, b) in fused.row(i).iter().zip(&o.identifier) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn fusion_by_hand_on_tiny_net() {
        // d=2, one 3D and one 2D feature.
        let cfg = GapConfig {
            hidden_dim: 2,
            num_heads: 1,
            encoder_layers: 0,
            decoder_layers: 0,
            ffn_dim: 2,
            sem3d_dim: 1,
            sem2d_dim: 1,
            ..GapConfig::default()
        };
        let net = GapNet::new(cfg.clone()).unwrap();
        let mut params = net.init_params(0);
        let mut set = |name: &str, v: &[f64]| {
            let r = net.layout().find(name).unwrap().range();
            params.values[r].copy_from_slice(v);
        };
        set("fuse.w1", &[1.0, 0.0, 0.0, 1.0]);
        set("fuse.b1", &[0.0, 0.0]);
        set("fuse.w2", &[2.0, 0.0, 0.0, -1.0]);
        set("fuse.b2", &[0.5, 0.5]);
        set("spatial.w", &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut s = generator(&GapConfig {
            hidden_dim: 2,
            sem3d_dim: 1,
            sem2d_dim: 1,
            ..cfg
        })
        .generate_n(1, Some(Query::Highest), 0)
        .unwrap();
        let o = &mut s.objects[0];
        o.identifier = vec![0.1, 0.2];
        o.semantic_3d = vec![1.0];
        o.semantic_2d = vec![-1.0];
        o.center = [3.0, 4.0, 0.0];
        o.size = [1.0, 1.0, 1.0];
        let fused = net.fuse_embeddings(&s, &params).unwrap();
        let g = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh());
        // hidden = gelu([1, -1]); E_s = [2 g(1) + 0.5, -g(-1) + 0.5]; l = [3, 4]
        let expected = [0.1 + 2.0 * g(1.0) + 0.5 + 3.0, 0.2 - g(-1.0) + 0.5 + 4.0];
        assert!((fused[[0, 0]] - expected[0]).abs() < 1e-12);
        assert!((fused[[0, 1]] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn output_is_simplex() {
        let cfg = small_config();
        let net = GapNet::new(cfg.clone()).unwrap();
        let params = net.init_params(5);
        let g = generator(&cfg);
        for seed in 0..10 {
            let s = g.generate(seed, seed, crate::scenesim::Split::Train);
            let a = net.predict(&s, &params).unwrap();
            assert_eq!(a.len(), s.n_objects());
            assert!((a.scores().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let cfg = small_config();
        let net = GapNet::new(cfg.clone()).unwrap();
        let params = net.init_params(5);
        let s = generator(&cfg).generate_n(5, None, 3).unwrap();
        let (_, cache) = net.forward(&s, &params).unwrap();
        let g = net.backward_from_logits(&params, &cache, &[0.0; 5]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = small_config();
        let net = GapNet::new(cfg.clone()).unwrap();
        let params = net.init_params(5);
        let s = generator(&cfg).generate_n(5, None, 3).unwrap();
        let (_, cache) = net.forward(&s, &params).unwrap();
        assert!(matches!(
            net.backward_from_logits(&params, &cache, &[0.0; 4]),
            Err(Error::StaleCache(_))
        ));
        assert!(matches!(
            net.backward(&params, &cache, &ImportanceMap::uniform(3)),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cfg = small_config();
        let net = GapNet::new(cfg.clone()).unwrap();
        let params = net.init_params(5);
        let mut s = generator(&cfg).generate_n(3, None, 3).unwrap();
        s.objects[1].semantic_3d.push(0.0);
        assert!(matches!(net.predict(&s, &params), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn twin_objects_share_activations() {
        let cfg = small_config();
        let net = GapNet::new(cfg.clone()).unwrap();
        let params = net.init_params(9);
        let mut s = generator(&cfg).generate_n(5, None, 3).unwrap();
        s.objects[4] = s.objects[1].clone();
        let fused = net.fuse_embeddings(&s, &params).unwrap();
        let means = row_means(&fused);
        assert_eq!(means[1], means[4]);
    }
}
