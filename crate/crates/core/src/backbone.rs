//! The 3D encoder-decoder: strided conv stages with instance normalization and
//! leaky ReLU, transposed-conv upsampling, skip concatenation, and one
//! segmentation head per decoder resolution.
//!
//! Parameter names:
//! - `{encoder}/stage{i}/block{j}/{conv,norm}/…`
//! - `decoder/up{i}/…` upsamples stage `i+1` to stage `i`
//! - `decoder/level{i}/block{j}/…`, `decoder/head{i}/…`
//! - `decoder/final_up/…` only when the first stage downsamples

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv3d_backward, conv3d_forward, conv_block_backward, conv_block_forward, conv_transpose_backward,
    conv_transpose_forward, BlockCache, ConvGeom, UpGeom,
};
use crate::params::{Gradients, InitRule, ParamSpec, ParamStore};
use crate::tensor::Feature;

/// One feature map per encoder stage, deepest last.
pub type FeaturePyramid = Vec<Feature>;
/// Logits per decoder resolution, full resolution first.
pub type LogitsPyramid = Vec<Feature>;

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default = "one")]
    pub in_channels: usize,
    pub channels_per_stage: Vec<usize>,
    pub strides_per_stage: Vec<[usize; 3]>,
    #[serde(default = "default_kernel")]
    pub kernel_size: [usize; 3],
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default = "two")]
    pub num_classes: usize,
    #[serde(default = "two")]
    pub blocks_per_stage: usize,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn default_kernel() -> [usize; 3] {
    [3, 3, 3]
}
fn default_slope() -> f64 {
    0.01
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkSpec {
    /// Three stages `(8, 16, 32)` for CPU-sized patches such as `(16, 32, 32)`.
    pub fn desk() -> Self {
        NetworkSpec {
            in_channels: 1,
            channels_per_stage: vec![8, 16, 32],
            strides_per_stage: vec![[1, 1, 1], [1, 2, 2], [2, 2, 2]],
            kernel_size: [3, 3, 3],
            leaky_slope: 0.01,
            num_classes: 2,
            blocks_per_stage: 2,
        }
    }

    /// Five stages `(32, 64, 128, 256, 320)` sized for `50×160×192` patches.
    pub fn paper_scale() -> Self {
        NetworkSpec {
            in_channels: 1,
            channels_per_stage: vec![32, 64, 128, 256, 320],
            strides_per_stage: vec![[1, 1, 1], [1, 2, 2], [2, 2, 2], [1, 2, 2], [1, 2, 2]],
            kernel_size: [3, 3, 3],
            leaky_slope: 0.01,
            num_classes: 2,
            blocks_per_stage: 2,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.channels_per_stage.len()
    }

    pub fn base_channels(&self) -> usize {
        self.channels_per_stage[0]
    }

    pub fn deepest_channels(&self) -> usize {
        *self.channels_per_stage.last().expect("validated spec has stages")
    }

    /// Number of logits tensors the decoder emits.
    pub fn pyramid_len(&self) -> usize {
        (self.num_stages() - 1).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages();
        if n == 0 {
            return Err(Error::Config("network needs at least one stage".into()));
        }
        if self.strides_per_stage.len() != n {
            return Err(Error::Config(format!(
                "{} strides for {n} stages",
                self.strides_per_stage.len()
            )));
        }
        if self.channels_per_stage.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("channels must be nondecreasing down the encoder".into()));
        }
        if self.channels_per_stage.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.strides_per_stage.iter().flatten().any(|&s| s == 0) {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.kernel_size.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be positive".into()));
        }
        Ok(())
    }

    /// Cumulative downsampling factor after stage `i`.
    pub fn cumulative_stride(&self, stage: usize) -> [usize; 3] {
        let mut acc = [1, 1, 1];
        for s in &self.strides_per_stage[..=stage] {
            for a in 0..3 {
                acc[a] *= s[a];
            }
        }
        acc
    }

    /// Every stage's extent must divide exactly.
    pub fn check_patch(&self, patch: [usize; 3]) -> Result<()> {
        let total = self.cumulative_stride(self.num_stages() - 1);
        for a in 0..3 {
            if patch[a] == 0 || patch[a] % total[a] != 0 {
                return Err(Error::Shape(format!(
                    "patch {patch:?} is not divisible by cumulative strides {total:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn stage_dims(&self, patch: [usize; 3], stage: usize) -> [usize; 3] {
        let c = self.cumulative_stride(stage);
        [patch[0] / c[0], patch[1] / c[1], patch[2] / c[2]]
    }

    fn first_stride_is_unit(&self) -> bool {
        self.strides_per_stage[0] == [1, 1, 1]
    }

    pub(crate) fn block_geom(&self, stage: usize, block: usize) -> ConvGeom {
        let cin = if block > 0 {
            self.channels_per_stage[stage]
        } else if stage == 0 {
            self.in_channels
        } else {
            self.channels_per_stage[stage - 1]
        };
        ConvGeom {
            cin,
            cout: self.channels_per_stage[stage],
            kernel: self.kernel_size,
            stride: if block == 0 {
                self.strides_per_stage[stage]
            } else {
                [1, 1, 1]
            },
        }
    }

    fn up_geom(&self, level: usize) -> UpGeom {
        UpGeom {
            cin: self.channels_per_stage[level + 1],
            cout: self.channels_per_stage[level],
            stride: self.strides_per_stage[level + 1],
        }
    }

    fn final_up_geom(&self) -> UpGeom {
        UpGeom {
            cin: self.channels_per_stage[0],
            cout: self.channels_per_stage[0],
            stride: self.strides_per_stage[0],
        }
    }

    fn level_geom(&self, level: usize, block: usize) -> ConvGeom {
        let c = self.channels_per_stage[level];
        ConvGeom {
            cin: if block == 0 { 2 * c } else { c },
            cout: c,
            kernel: self.kernel_size,
            stride: [1, 1, 1],
        }
    }

    fn head_geom(&self, level: usize) -> ConvGeom {
        ConvGeom {
            cin: self.channels_per_stage[level],
            cout: self.num_classes,
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
        }
    }
}

pub(crate) fn block_layout(out: &mut Vec<ParamSpec>, prefix: &str, geom: &ConvGeom) {
    let fan_in = geom.cin * geom.kernel.iter().product::<usize>();
    out.push(ParamSpec {
        name: format!("{prefix}/conv/weight"),
        shape: geom.weight_shape(),
        init: InitRule::FanIn { fan_in },
    });
    out.push(ParamSpec {
        name: format!("{prefix}/conv/bias"),
        shape: vec![geom.cout],
        init: InitRule::Zeros,
    });
    out.push(ParamSpec {
        name: format!("{prefix}/norm/gamma"),
        shape: vec![geom.cout],
        init: InitRule::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}/norm/beta"),
        shape: vec![geom.cout],
        init: InitRule::Zeros,
    });
}

fn up_layout(out: &mut Vec<ParamSpec>, prefix: &str, geom: &UpGeom) {
    out.push(ParamSpec {
        name: format!("{prefix}/weight"),
        shape: geom.weight_shape(),
        init: InitRule::FanIn { fan_in: geom.cin },
    });
    out.push(ParamSpec {
        name: format!("{prefix}/bias"),
        shape: vec![geom.cout],
        init: InitRule::Zeros,
    });
}

pub fn encoder_layout(spec: &NetworkSpec, prefix: &str) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for stage in 0..spec.num_stages() {
        for block in 0..spec.blocks_per_stage {
            block_layout(
                &mut out,
                &format!("{prefix}/stage{stage}/block{block}"),
                &spec.block_geom(stage, block),
            );
        }
    }
    out
}

pub fn decoder_layout(spec: &NetworkSpec) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let levels = spec.num_stages() - 1;
    for level in 0..levels {
        up_layout(&mut out, &format!("{DECODER}/up{level}"), &spec.up_geom(level));
        for block in 0..spec.blocks_per_stage {
            block_layout(
                &mut out,
                &format!("{DECODER}/level{level}/block{block}"),
                &spec.level_geom(level, block),
            );
        }
    }
    if !spec.first_stride_is_unit() {
        up_layout(&mut out, &format!("{DECODER}/final_up"), &spec.final_up_geom());
    }
    for level in 0..spec.pyramid_len() {
        let geom = spec.head_geom(level);
        out.push(ParamSpec {
            name: format!("{DECODER}/head{level}/weight"),
            shape: geom.weight_shape(),
            init: InitRule::FanIn { fan_in: geom.cin },
        });
        out.push(ParamSpec {
            name: format!("{DECODER}/head{level}/bias"),
            shape: vec![geom.cout],
            init: InitRule::Zeros,
        });
    }
    out
}

/// Full single-encoder network layout.
pub fn unet_layout(spec: &NetworkSpec) -> Vec<ParamSpec> {
    let mut out = encoder_layout(spec, ENCODER);
    out.extend(decoder_layout(spec));
    out
}

/// Fresh plain-network parameters. Biases and normalization offsets are zero,
/// normalization scales one, weights fan-in scaled normals.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    Ok(ParamStore::init(&unet_layout(spec), seed, spec.leaky_slope))
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    blocks: Vec<Vec<BlockCache>>,
}

pub fn encoder_forward(
    params: &ParamStore,
    prefix: &str,
    spec: &NetworkSpec,
    input: &Feature,
) -> Result<(FeaturePyramid, EncoderCache)> {
    spec.check_patch(input.dims)?;
    let mut pyramid = Vec::with_capacity(spec.num_stages());
    let mut caches = Vec::with_capacity(spec.num_stages());
    let mut cur = input.clone();
    for stage in 0..spec.num_stages() {
        let mut stage_caches = Vec::with_capacity(spec.blocks_per_stage);
        for block in 0..spec.blocks_per_stage {
            let p = params.block(&format!("{prefix}/stage{stage}/block{block}"))?;
            let (out, cache) = conv_block_forward(&cur, p, &spec.block_geom(stage, block), spec.leaky_slope)?;
            stage_caches.push(cache);
            cur = out;
        }
        caches.push(stage_caches);
        pyramid.push(cur.clone());
    }
    Ok((pyramid, EncoderCache { blocks: caches }))
}

/// Backpropagate per-stage output gradients into encoder parameter gradients.
pub fn encoder_backward(
    params: &ParamStore,
    prefix: &str,
    spec: &NetworkSpec,
    cache: &EncoderCache,
    mut d_pyramid: Vec<Feature>,
    grads: &mut Gradients,
) -> Result<()> {
    for stage in (0..spec.num_stages()).rev() {
        let mut g = std::mem::replace(&mut d_pyramid[stage], Feature::zeros(0, [0, 0, 0]));
        for block in (0..spec.blocks_per_stage).rev() {
            let name = format!("{prefix}/stage{stage}/block{block}");
            let p = params.block(&name)?;
            let want_input = !(stage == 0 && block == 0);
            let (dx, bg) = conv_block_backward(
                &cache.blocks[stage][block],
                &g,
                p,
                &spec.block_geom(stage, block),
                spec.leaky_slope,
                want_input,
                true,
            );
            if let Some(bg) = bg {
                grads.accumulate_block(params, &name, bg);
            }
            if let Some(dx) = dx {
                g = dx;
            }
        }
        if stage > 0 {
            d_pyramid[stage - 1].add_assign(&g);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct LevelCache {
    up_input: Feature,
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    levels: Vec<LevelCache>,
    level_out: Vec<Feature>,
    final_up_input: Option<Feature>,
    head_inputs: Vec<Feature>,
    bottleneck_dims: [usize; 3],
}

fn check_pyramid(spec: &NetworkSpec, pyramid: &[Feature]) -> Result<()> {
    if pyramid.len() != spec.num_stages() {
        return Err(Error::Shape(format!(
            "pyramid has {} levels, spec has {} stages",
            pyramid.len(),
            spec.num_stages()
        )));
    }
    for (i, f) in pyramid.iter().enumerate() {
        if f.channels != spec.channels_per_stage[i] {
            return Err(Error::Shape(format!(
                "pyramid level {i} has {} channels, expected {}",
                f.channels, spec.channels_per_stage[i]
            )));
        }
    }
    Ok(())
}

pub fn decoder_forward(
    params: &ParamStore,
    spec: &NetworkSpec,
    pyramid: &[Feature],
) -> Result<(LogitsPyramid, DecoderCache)> {
    check_pyramid(spec, pyramid)?;
    let levels = spec.num_stages() - 1;
    let mut level_out: Vec<Feature> = vec![Feature::zeros(0, [0, 0, 0]); levels.max(1)];
    let mut level_caches: Vec<Option<LevelCache>> = vec![None; levels];
    let mut cur = pyramid[levels].clone();
    for level in (0..levels).rev() {
        let up_p = params.data(&format!("{DECODER}/up{level}/weight"))?;
        let up_b = params.data(&format!("{DECODER}/up{level}/bias"))?;
        let up = conv_transpose_forward(&cur, up_p, up_b, &spec.up_geom(level))?;
        if up.dims != pyramid[level].dims {
            return Err(Error::Shape(format!(
                "upsampled {:?} does not match skip {:?} at level {level}",
                up.dims, pyramid[level].dims
            )));
        }
        let mut x = up.concat_channels(&pyramid[level])?;
        let mut blocks = Vec::with_capacity(spec.blocks_per_stage);
        for block in 0..spec.blocks_per_stage {
            let p = params.block(&format!("{DECODER}/level{level}/block{block}"))?;
            let (out, cache) = conv_block_forward(&x, p, &spec.level_geom(level, block), spec.leaky_slope)?;
            blocks.push(cache);
            x = out;
        }
        level_caches[level] = Some(LevelCache { up_input: cur, blocks });
        level_out[level] = x.clone();
        cur = x;
    }
    if levels == 0 {
        level_out[0] = pyramid[0].clone();
    }
    let mut final_up_input = None;
    let full = if spec.first_stride_is_unit() {
        level_out[0].clone()
    } else {
        let w = params.data(&format!("{DECODER}/final_up/weight"))?;
        let b = params.data(&format!("{DECODER}/final_up/bias"))?;
        final_up_input = Some(level_out[0].clone());
        conv_transpose_forward(&level_out[0], w, b, &spec.final_up_geom())?
    };
    let mut logits = Vec::with_capacity(spec.pyramid_len());
    let mut head_inputs = Vec::with_capacity(spec.pyramid_len());
    for level in 0..spec.pyramid_len() {
        let input = if level == 0 { &full } else { &level_out[level] };
        let w = params.data(&format!("{DECODER}/head{level}/weight"))?;
        let b = params.data(&format!("{DECODER}/head{level}/bias"))?;
        logits.push(conv3d_forward(input, w, b, &spec.head_geom(level))?);
        head_inputs.push(input.clone());
    }
    Ok((
        logits,
        DecoderCache {
            levels: level_caches.into_iter().map(|c| c.expect("every level visited")).collect(),
            level_out,
            final_up_input,
            head_inputs,
            bottleneck_dims: pyramid[levels].dims,
        },
    ))
}

/// Returns gradients w.r.t. every pyramid entry when `want_pyramid` is set
/// (otherwise an empty vector). Parameter gradients go into `grads`.
pub fn decoder_backward(
    params: &ParamStore,
    spec: &NetworkSpec,
    cache: &DecoderCache,
    d_logits: &[Feature],
    want_pyramid: bool,
    grads: &mut Gradients,
) -> Result<Vec<Feature>> {
    let levels = spec.num_stages() - 1;
    if d_logits.len() != spec.pyramid_len() {
        return Err(Error::Shape(format!(
            "{} logit gradients for a pyramid of {}",
            d_logits.len(),
            spec.pyramid_len()
        )));
    }
    let mut d_level: Vec<Option<Feature>> = vec![None; levels.max(1)];
    let mut d_full = None;
    for (level, dl) in d_logits.iter().enumerate() {
        let name = format!("{DECODER}/head{level}");
        let w = params.data(&format!("{name}/weight"))?;
        let (dx, g) = conv3d_backward(&cache.head_inputs[level], dl, w, &spec.head_geom(level), true, true);
        if let Some(g) = g {
            grads.accumulate_if_trainable(params, format!("{name}/weight"), g.weight);
            grads.accumulate_if_trainable(params, format!("{name}/bias"), g.bias);
        }
        let dx = dx.expect("requested");
        if level == 0 {
            d_full = Some(dx);
        } else {
            add_opt(&mut d_level[level], dx);
        }
    }
    let d_full = d_full.expect("pyramid has a level 0");
    let d0 = match &cache.final_up_input {
        None => d_full,
        Some(input) => {
            let w = params.data(&format!("{DECODER}/final_up/weight"))?;
            let (dx, g) = conv_transpose_backward(input, &d_full, w, &spec.final_up_geom(), true, true);
            if let Some(g) = g {
                grads.accumulate_if_trainable(params, format!("{DECODER}/final_up/weight"), g.weight);
                grads.accumulate_if_trainable(params, format!("{DECODER}/final_up/bias"), g.bias);
            }
            dx.expect("requested")
        }
    };
    add_opt(&mut d_level[0], d0);

    if levels == 0 {
        let d = d_level[0].take().expect("level 0 gradient");
        return Ok(if want_pyramid { vec![d] } else { Vec::new() });
    }

    let mut d_pyramid: Vec<Feature> = Vec::with_capacity(spec.num_stages());
    let mut d_bottleneck = None;
    for level in 0..levels {
        let lc = &cache.levels[level];
        let mut g = d_level[level].take().unwrap_or_else(|| Feature::zeros(spec.channels_per_stage[level], cache.level_out[level].dims));
        for block in (0..spec.blocks_per_stage).rev() {
            let name = format!("{DECODER}/level{level}/block{block}");
            let p = params.block(&name)?;
            let (dx, bg) = conv_block_backward(
                &lc.blocks[block],
                &g,
                p,
                &spec.level_geom(level, block),
                spec.leaky_slope,
                true,
                true,
            );
            if let Some(bg) = bg {
                grads.accumulate_block(params, &name, bg);
            }
            g = dx.expect("requested");
        }
        let (d_up, d_skip) = g.split_channels(spec.channels_per_stage[level]);
        d_pyramid.push(d_skip);
        let w = params.data(&format!("{DECODER}/up{level}/weight"))?;
        let deeper_needed = level + 1 < levels || want_pyramid;
        let (dx, ug) = conv_transpose_backward(&lc.up_input, &d_up, w, &spec.up_geom(level), deeper_needed, true);
        if let Some(ug) = ug {
            grads.accumulate_if_trainable(params, format!("{DECODER}/up{level}/weight"), ug.weight);
            grads.accumulate_if_trainable(params, format!("{DECODER}/up{level}/bias"), ug.bias);
        }
        if let Some(dx) = dx {
            if level + 1 < levels {
                add_opt(&mut d_level[level + 1], dx);
            } else {
                d_bottleneck = Some(dx);
            }
        }
    }
    if !want_pyramid {
        return Ok(Vec::new());
    }
    d_pyramid.push(d_bottleneck.unwrap_or_else(|| Feature::zeros(spec.deepest_channels(), cache.bottleneck_dims)));
    Ok(d_pyramid)
}

fn add_opt(slot: &mut Option<Feature>, value: Feature) {
    match slot {
        Some(existing) => existing.add_assign(&value),
        None => *slot = Some(value),
    }
}

/// Encoder then decoder; caches retained for [`backward`].
#[derive(Debug, Clone)]
pub struct UNetCache {
    encoder: EncoderCache,
    decoder: DecoderCache,
}

pub fn forward(params: &ParamStore, spec: &NetworkSpec, patch: &Feature) -> Result<(LogitsPyramid, UNetCache)> {
    let (pyramid, encoder) = encoder_forward(params, ENCODER, spec, patch)?;
    let (logits, decoder) = decoder_forward(params, spec, &pyramid)?;
    Ok((logits, UNetCache { encoder, decoder }))
}

/// Gradients for every unfrozen parameter. A fully frozen encoder is skipped.
pub fn backward(
    params: &ParamStore,
    spec: &NetworkSpec,
    cache: &UNetCache,
    d_logits: &[Feature],
    grads: &mut Gradients,
) -> Result<()> {
    let encoder_trainable = params.any_trainable(ENCODER);
    let d_pyramid = decoder_backward(params, spec, &cache.decoder, d_logits, encoder_trainable, grads)?;
    if encoder_trainable {
        encoder_backward(params, ENCODER, spec, &cache.encoder, d_pyramid, grads)?;
    }
    Ok(())
}
