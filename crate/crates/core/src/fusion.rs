//! Dual-encoder network with channel-wise selective fusion of the bottleneck.
//!
//! A trainable dedicated encoder and a frozen adapted encoder run on the same
//! patch. Their deepest features are summed, globally pooled, squeezed through
//! a normalized fully connected layer, and turned into a per-channel two-way
//! softmax `(a, b)`. The decoder sees `H(a·x_de + b·x_ad)` at the bottleneck
//! and the mean of both encoders' features at every skip level.
//!
//! Fusion parameters live under `fusion/`:
//! `reduce/weight` (`C/r × C`), `reduce/norm/{gamma,beta}` (`C/r`),
//! `select_a`, `select_b` (`C × C/r`) and `block/…` for `H`.

use crate::backbone::{
    block_layout, decoder_backward, decoder_forward, decoder_layout, encoder_backward, encoder_forward,
    encoder_layout, DecoderCache, EncoderCache, LogitsPyramid, NetworkSpec,
};
use crate::error::{Error, Result};
use crate::layers::{
    conv_block_backward, conv_block_forward, leaky_relu, leaky_relu_grad, BlockCache, BlockParams, ConvGeom,
    NORM_EPS,
};
use crate::params::{Gradients, InitRule, ParamSpec, ParamStore};
use crate::tensor::Feature;

pub const DEDICATED: &str = "dedicated";
pub const ADAPTED: &str = "adapted";
pub const FUSION: &str = "fusion";

pub const DEFAULT_REDUCTION: usize = 16;

/// Reduction ratio actually used for `channels`: the requested ratio when it
/// divides `channels` and leaves at least two squeezed features, otherwise
/// `channels / 2`.
pub fn effective_reduction(channels: usize, requested: usize) -> usize {
    if requested > 0 && channels % requested == 0 && channels / requested >= 2 {
        requested
    } else {
        (channels / 2).max(1)
    }
}

/// Borrowed view of the fusion subtree.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams<'a> {
    pub channels: usize,
    pub reduced: usize,
    pub reduce_weight: &'a [f64],
    pub reduce_gamma: &'a [f64],
    pub reduce_beta: &'a [f64],
    pub select_a: &'a [f64],
    pub select_b: &'a [f64],
    pub block: BlockParams<'a>,
    pub block_geom: ConvGeom,
    pub slope: f64,
}

impl<'a> FusionParams<'a> {
    pub fn from_store(store: &'a ParamStore, spec: &NetworkSpec) -> Result<Self> {
        let w = store.get(&format!("{FUSION}/reduce/weight"))?;
        if w.shape.len() != 2 || w.shape[1] != spec.deepest_channels() {
            return Err(Error::SpecMismatch(format!(
                "fusion reduce weight {:?} does not match {} bottleneck channels",
                w.shape,
                spec.deepest_channels()
            )));
        }
        let (reduced, channels) = (w.shape[0], w.shape[1]);
        let select_a = store.get(&format!("{FUSION}/select_a"))?;
        let select_b = store.get(&format!("{FUSION}/select_b"))?;
        if select_a.shape != select_b.shape || select_a.shape != [channels, reduced] {
            return Err(Error::SpecMismatch(format!(
                "select matrices {:?} / {:?}, expected [{channels}, {reduced}]",
                select_a.shape, select_b.shape
            )));
        }
        Ok(FusionParams {
            channels,
            reduced,
            reduce_weight: &w.data,
            reduce_gamma: store.data(&format!("{FUSION}/reduce/norm/gamma"))?,
            reduce_beta: store.data(&format!("{FUSION}/reduce/norm/beta"))?,
            select_a: &select_a.data,
            select_b: &select_b.data,
            block: store.block(&format!("{FUSION}/block"))?,
            block_geom: fusion_block_geom(spec),
            slope: spec.leaky_slope,
        })
    }

    pub fn reduction_ratio(&self) -> usize {
        self.channels / self.reduced
    }
}

fn fusion_block_geom(spec: &NetworkSpec) -> ConvGeom {
    let c = spec.deepest_channels();
    ConvGeom {
        cin: c,
        cout: c,
        kernel: spec.kernel_size,
        stride: [1, 1, 1],
    }
}

pub fn fusion_layout(spec: &NetworkSpec, reduction: usize) -> Vec<ParamSpec> {
    let c = spec.deepest_channels();
    let reduced = c / effective_reduction(c, reduction);
    let mut out = vec![
        ParamSpec {
            name: format!("{FUSION}/reduce/weight"),
            shape: vec![reduced, c],
            init: InitRule::FanIn { fan_in: c },
        },
        ParamSpec {
            name: format!("{FUSION}/reduce/norm/gamma"),
            shape: vec![reduced],
            init: InitRule::Ones,
        },
        ParamSpec {
            name: format!("{FUSION}/reduce/norm/beta"),
            shape: vec![reduced],
            init: InitRule::Zeros,
        },
        ParamSpec {
            name: format!("{FUSION}/select_a"),
            shape: vec![c, reduced],
            init: InitRule::FanIn { fan_in: reduced },
        },
        ParamSpec {
            name: format!("{FUSION}/select_b"),
            shape: vec![c, reduced],
            init: InitRule::FanIn { fan_in: reduced },
        },
    ];
    block_layout(&mut out, &format!("{FUSION}/block"), &fusion_block_geom(spec));
    out
}

/// Layout of the full dual-encoder network.
pub fn hybrid_layout(spec: &NetworkSpec, reduction: usize) -> Vec<ParamSpec> {
    let mut out = encoder_layout(spec, DEDICATED);
    out.extend(encoder_layout(spec, ADAPTED));
    out.extend(fusion_layout(spec, reduction));
    out.extend(decoder_layout(spec));
    out
}

pub fn fuse_sum(x_de: &Feature, x_ad: &Feature) -> Result<Feature> {
    if !x_de.same_shape(x_ad) {
        return Err(Error::Shape(format!(
            "cannot fuse {}×{:?} with {}×{:?}",
            x_de.channels, x_de.dims, x_ad.channels, x_ad.dims
        )));
    }
    let mut out = x_de.clone();
    out.add_assign(x_ad);
    Ok(out)
}

/// Per-channel spatial mean.
pub fn global_pool(x: &Feature) -> Vec<f64> {
    let n = x.spatial() as f64;
    (0..x.channels).map(|c| x.channel(c).iter().sum::<f64>() / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReduceCache {
    pub s: Vec<f64>,
    pub uhat: Vec<f64>,
    pub inv_std: f64,
    pub pre_act: Vec<f64>,
}

/// `z = leaky_relu(norm(W s))`, with `norm` standardizing the squeezed vector
/// across its features before the affine terms.
pub fn reduce_fc(s: &[f64], p: &FusionParams<'_>) -> Result<(Vec<f64>, ReduceCache)> {
    if s.len() != p.channels {
        return Err(Error::Shape(format!(
            "pooled vector has {} entries, fusion expects {}",
            s.len(),
            p.channels
        )));
    }
    let u: Vec<f64> = (0..p.reduced)
        .map(|r| {
            p.reduce_weight[r * p.channels..(r + 1) * p.channels]
                .iter()
                .zip(s)
                .map(|(w, v)| w * v)
                .sum()
        })
        .collect();
    let n = p.reduced as f64;
    let mean = u.iter().sum::<f64>() / n;
    let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    let uhat: Vec<f64> = u.iter().map(|v| (v - mean) * inv_std).collect();
    let pre_act: Vec<f64> = uhat
        .iter()
        .enumerate()
        .map(|(r, h)| p.reduce_gamma[r] * h + p.reduce_beta[r])
        .collect();
    let z = pre_act.iter().map(|&v| leaky_relu(v, p.slope)).collect();
    Ok((
        z,
        ReduceCache {
            s: s.to_vec(),
            uhat,
            inv_std,
            pre_act,
        },
    ))
}

fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Channel-wise two-way softmax over `A z` and `B z`, evaluated after
/// subtracting the larger logit so large magnitudes cannot overflow.
pub fn soft_select(z: &[f64], p: &FusionParams<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.len() != p.reduced {
        return Err(Error::Shape(format!(
            "squeezed vector has {} entries, fusion expects {}",
            z.len(),
            p.reduced
        )));
    }
    let la = matvec(p.select_a, p.channels, p.reduced, z);
    let lb = matvec(p.select_b, p.channels, p.reduced, z);
    Ok(softmax_pair(&la, &lb))
}

pub fn softmax_pair(la: &[f64], lb: &[f64]) -> (Vec<f64>, Vec<f64>) {
    la.iter()
        .zip(lb)
        .map(|(&x, &y)| {
            let m = x.max(y);
            let (ex, ey) = ((x - m).exp(), (y - m).exp());
            let sum = ex + ey;
            (ex / sum, ey / sum)
        })
        .unzip()
}

/// `a·x_de + (1 − a)·x_ad`, evaluated as `x_ad + a·(x_de − x_ad)` so equal
/// inputs pass through unchanged.
pub fn weighted_aggregate(x_de: &Feature, x_ad: &Feature, a: &[f64]) -> Result<Feature> {
    if !x_de.same_shape(x_ad) || a.len() != x_de.channels {
        return Err(Error::Shape("aggregate inputs disagree".into()));
    }
    let mut out = x_ad.clone();
    for (c, &ac) in a.iter().enumerate() {
        for (o, d) in out.channel_mut(c).iter_mut().zip(x_de.channel(c)) {
            *o += ac * (d - *o);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    pub x_de: Feature,
    pub x_ad: Feature,
    pub reduce: ReduceCache,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub aggregate: Feature,
    block: BlockCache,
}

pub fn selective_fusion_forward(
    x_de: &Feature,
    x_ad: &Feature,
    p: &FusionParams<'_>,
) -> Result<(Feature, FusionCache)> {
    let fused = fuse_sum(x_de, x_ad)?;
    let s = global_pool(&fused);
    let (z, reduce) = reduce_fc(&s, p)?;
    let (a, b) = soft_select(&z, p)?;
    let aggregate = weighted_aggregate(x_de, x_ad, &a)?;
    let (out, block) = conv_block_forward(&aggregate, p.block, &p.block_geom, p.slope)?;
    Ok((
        out,
        FusionCache {
            x_de: x_de.clone(),
            x_ad: x_ad.clone(),
            reduce,
            z,
            a,
            b,
            aggregate,
            block,
        },
    ))
}

/// Gradients of the fusion unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub x_de: Feature,
    pub x_ad: Feature,
    pub reduce_weight: Vec<f64>,
    pub reduce_gamma: Vec<f64>,
    pub reduce_beta: Vec<f64>,
    pub select_a: Vec<f64>,
    pub select_b: Vec<f64>,
    pub block: crate::layers::BlockGrads,
}

impl FusionGrads {
    pub fn into_gradients(self, store: &ParamStore, grads: &mut Gradients) -> (Feature, Feature) {
        let entries = [
            ("reduce/weight", self.reduce_weight),
            ("reduce/norm/gamma", self.reduce_gamma),
            ("reduce/norm/beta", self.reduce_beta),
            ("select_a", self.select_a),
            ("select_b", self.select_b),
        ];
        for (suffix, g) in entries {
            grads.accumulate_if_trainable(store, format!("{FUSION}/{suffix}"), g);
        }
        grads.accumulate_block(store, &format!("{FUSION}/block"), self.block);
        (self.x_de, self.x_ad)
    }
}

pub fn selective_fusion_backward(cache: &FusionCache, dout: &Feature, p: &FusionParams<'_>) -> FusionGrads {
    let (dagg, block) = conv_block_backward(&cache.block, dout, p.block, &p.block_geom, p.slope, true, true);
    let dagg = dagg.expect("requested");
    let block = block.expect("requested");
    let (c_n, r_n) = (p.channels, p.reduced);

    let mut dx_de = Feature::zeros(c_n, cache.x_de.dims);
    let mut dx_ad = Feature::zeros(c_n, cache.x_de.dims);
    let mut da = vec![0.0; c_n];
    for c in 0..c_n {
        let ac = cache.a[c];
        let g = dagg.channel(c);
        let (de, ad) = (cache.x_de.channel(c), cache.x_ad.channel(c));
        da[c] = g.iter().zip(de.iter().zip(ad)).map(|(gv, (d, a))| gv * (d - a)).sum();
        for (o, gv) in dx_de.channel_mut(c).iter_mut().zip(g) {
            *o = ac * gv;
        }
        for (o, gv) in dx_ad.channel_mut(c).iter_mut().zip(g) {
            *o = (1.0 - ac) * gv;
        }
    }

    // a = σ(la − lb)
    let dla: Vec<f64> = (0..c_n).map(|c| da[c] * cache.a[c] * cache.b[c]).collect();
    let mut select_a = vec![0.0; c_n * r_n];
    let mut select_b = vec![0.0; c_n * r_n];
    let mut dz = vec![0.0; r_n];
    for c in 0..c_n {
        for r in 0..r_n {
            select_a[c * r_n + r] = dla[c] * cache.z[r];
            select_b[c * r_n + r] = -dla[c] * cache.z[r];
            dz[r] += p.select_a[c * r_n + r] * dla[c] - p.select_b[c * r_n + r] * dla[c];
        }
    }

    let rc = &cache.reduce;
    let dpre: Vec<f64> = dz
        .iter()
        .zip(&rc.pre_act)
        .map(|(d, &pre)| d * leaky_relu_grad(pre, p.slope))
        .collect();
    let reduce_beta = dpre.clone();
    let reduce_gamma: Vec<f64> = dpre.iter().zip(&rc.uhat).map(|(d, h)| d * h).collect();
    let n = r_n as f64;
    let sum_g: f64 = dpre.iter().zip(p.reduce_gamma).map(|(d, g)| d * g).sum();
    let sum_gx: f64 = dpre
        .iter()
        .zip(p.reduce_gamma)
        .zip(&rc.uhat)
        .map(|((d, g), h)| d * g * h)
        .sum();
    let du: Vec<f64> = (0..r_n)
        .map(|r| rc.inv_std / n * (n * dpre[r] * p.reduce_gamma[r] - sum_g - rc.uhat[r] * sum_gx))
        .collect();
    let mut reduce_weight = vec![0.0; r_n * c_n];
    let mut ds = vec![0.0; c_n];
    for r in 0..r_n {
        for c in 0..c_n {
            reduce_weight[r * c_n + c] = du[r] * rc.s[c];
            ds[c] += p.reduce_weight[r * c_n + c] * du[r];
        }
    }
    let spatial = cache.x_de.spatial() as f64;
    for c in 0..c_n {
        let share = ds[c] / spatial;
        for v in dx_de.channel_mut(c) {
            *v += share;
        }
        for v in dx_ad.channel_mut(c) {
            *v += share;
        }
    }
    FusionGrads {
        x_de: dx_de,
        x_ad: dx_ad,
        reduce_weight,
        reduce_gamma,
        reduce_beta,
        select_a,
        select_b,
        block,
    }
}

#[derive(Debug, Clone)]
pub struct HybridCache {
    dedicated: EncoderCache,
    adapted: Option<EncoderCache>,
    fusion: FusionCache,
    decoder: DecoderCache,
}

/// Both encoders, skip averaging, bottleneck fusion, shared decoder.
pub fn hybrid_forward(params: &ParamStore, spec: &NetworkSpec, patch: &Feature) -> Result<(LogitsPyramid, HybridCache)> {
    let (pyr_de, cache_de) = encoder_forward(params, DEDICATED, spec, patch)?;
    let (pyr_ad, cache_ad) = encoder_forward(params, ADAPTED, spec, patch)?;
    let deepest = spec.num_stages() - 1;
    let fp = FusionParams::from_store(params, spec)?;
    let (bottleneck, fusion) = selective_fusion_forward(&pyr_de[deepest], &pyr_ad[deepest], &fp)?;
    let mut pyramid: Vec<Feature> = pyr_de[..deepest]
        .iter()
        .zip(&pyr_ad[..deepest])
        .map(|(d, a)| {
            let mut m = fuse_sum(d, a)?;
            for v in &mut m.data {
                *v *= 0.5;
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    pyramid.push(bottleneck);
    let (logits, decoder) = decoder_forward(params, spec, &pyramid)?;
    let adapted = params.any_trainable(ADAPTED).then_some(cache_ad);
    Ok((
        logits,
        HybridCache {
            dedicated: cache_de,
            adapted,
            fusion,
            decoder,
        },
    ))
}

pub fn hybrid_backward(
    params: &ParamStore,
    spec: &NetworkSpec,
    cache: &HybridCache,
    d_logits: &[Feature],
    grads: &mut Gradients,
) -> Result<()> {
    let d_pyramid = decoder_backward(params, spec, &cache.decoder, d_logits, true, grads)?;
    let deepest = spec.num_stages() - 1;
    let fp = FusionParams::from_store(params, spec)?;
    let fg = selective_fusion_backward(&cache.fusion, &d_pyramid[deepest], &fp);
    let (d_de_bottom, d_ad_bottom) = fg.into_gradients(params, grads);
    let halves: Vec<Feature> = d_pyramid[..deepest].iter().map(|d| d.scaled(0.5)).collect();
    if params.any_trainable(DEDICATED) {
        let mut d_de = halves.clone();
        d_de.push(d_de_bottom);
        encoder_backward(params, DEDICATED, spec, &cache.dedicated, d_de, grads)?;
    }
    if let Some(ad_cache) = &cache.adapted {
        let mut d_ad = halves;
        d_ad.push(d_ad_bottom);
        encoder_backward(params, ADAPTED, spec, ad_cache, d_ad, grads)?;
    }
    Ok(())
}
