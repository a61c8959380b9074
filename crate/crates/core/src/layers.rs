//! Convolution, transposed convolution, instance normalization and leaky ReLU,
//! each with an explicit backward pass.
//!
//! Weights use the layouts
//! `conv: [cout][cin][kz][ky][kx]` and `transposed: [cin][cout][sz][sy][sx]`.

use crate::error::{Error, Result};
use crate::tensor::{flat_index, Feature};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvGeom {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.cout,
            self.cin,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (input[a] - 1) / self.stride[a] + 1;
        }
        out
    }

    fn pad(&self) -> [usize; 3] {
        [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2]
    }
}

/// Output positions `o` for which `o * stride + k - pad` lands inside `[0, n_in)`.
fn valid_range(n_in: usize, n_out: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_input = n_in as isize - 1 + pad as isize - k as isize;
    if hi_input < 0 {
        return (0, 0);
    }
    let hi = ((hi_input as usize) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

/// Visit every (output row, input row, x-range) triple touched by kernel tap `(kz, ky, kx)`.
#[inline]
fn for_each_tap_row(
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    geom: &ConvGeom,
    tap: [usize; 3],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let pad = geom.pad();
    let s = geom.stride;
    let (z_lo, z_hi) = valid_range(in_dims[0], out_dims[0], s[0], tap[0], pad[0]);
    let (y_lo, y_hi) = valid_range(in_dims[1], out_dims[1], s[1], tap[1], pad[1]);
    let (x_lo, x_hi) = valid_range(in_dims[2], out_dims[2], s[2], tap[2], pad[2]);
    if x_lo >= x_hi {
        return;
    }
    for oz in z_lo..z_hi {
        let iz = oz * s[0] + tap[0] - pad[0];
        for oy in y_lo..y_hi {
            let iy = oy * s[1] + tap[1] - pad[1];
            let out_row = flat_index(out_dims, oz, oy, 0);
            let in_row = flat_index(in_dims, iz, iy, 0);
            let ix0 = x_lo * s[2] + tap[2] - pad[2];
            f(out_row + x_lo, in_row + ix0, x_hi - x_lo, s[2]);
        }
    }
}

fn check_channels(x: &Feature, expected: usize, what: &str) -> Result<()> {
    if x.channels != expected {
        return Err(Error::Shape(format!(
            "{what}: input has {} channels, parameters expect {expected}",
            x.channels
        )));
    }
    Ok(())
}

pub fn conv3d_forward(x: &Feature, weight: &[f64], bias: &[f64], geom: &ConvGeom) -> Result<Feature> {
    check_channels(x, geom.cin, "conv3d")?;
    let out_dims = geom.out_dims(x.dims);
    let mut out = Feature::zeros(geom.cout, out_dims);
    let [kz_n, ky_n, kx_n] = geom.kernel;
    let taps = kz_n * ky_n * kx_n;
    let in_n = x.spatial();
    let out_n = out.spatial();
    for co in 0..geom.cout {
        let out_c = &mut out.data[co * out_n..(co + 1) * out_n];
        out_c.fill(bias[co]);
        for ci in 0..geom.cin {
            let in_c = &x.data[ci * in_n..(ci + 1) * in_n];
            let wbase = (co * geom.cin + ci) * taps;
            for kz in 0..kz_n {
                for ky in 0..ky_n {
                    for kx in 0..kx_n {
                        let w = weight[wbase + (kz * ky_n + ky) * kx_n + kx];
                        for_each_tap_row(x.dims, out_dims, geom, [kz, ky, kx], |o, i, len, sx| {
                            let dst = &mut out_c[o..o + len];
                            if sx == 1 {
                                for (d, s) in dst.iter_mut().zip(&in_c[i..i + len]) {
                                    *d += w * s;
                                }
                            } else {
                                for (d, s) in dst.iter_mut().zip(in_c[i..].iter().step_by(sx)) {
                                    *d += w * s;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Returns `(d input, d params)`; either side is skipped when not requested.
pub fn conv3d_backward(
    x: &Feature,
    dout: &Feature,
    weight: &[f64],
    geom: &ConvGeom,
    want_input: bool,
    want_params: bool,
) -> (Option<Feature>, Option<ConvGrads>) {
    let out_dims = dout.dims;
    let [kz_n, ky_n, kx_n] = geom.kernel;
    let taps = kz_n * ky_n * kx_n;
    let in_n = x.spatial();
    let out_n = dout.spatial();
    let mut dx = want_input.then(|| Feature::zeros(geom.cin, x.dims));
    let mut grads = want_params.then(|| ConvGrads {
        weight: vec![0.0; geom.weight_len()],
        bias: vec![0.0; geom.cout],
    });
    for co in 0..geom.cout {
        let dout_c = &dout.data[co * out_n..(co + 1) * out_n];
        if let Some(g) = grads.as_mut() {
            g.bias[co] = dout_c.iter().sum();
        }
        for ci in 0..geom.cin {
            let in_c = &x.data[ci * in_n..(ci + 1) * in_n];
            let wbase = (co * geom.cin + ci) * taps;
            for kz in 0..kz_n {
                for ky in 0..ky_n {
                    for kx in 0..kx_n {
                        let widx = wbase + (kz * ky_n + ky) * kx_n + kx;
                        let w = weight[widx];
                        let mut acc = 0.0;
                        let mut dx_c = dx
                            .as_mut()
                            .map(|d| &mut d.data[ci * in_n..(ci + 1) * in_n]);
                        for_each_tap_row(x.dims, out_dims, geom, [kz, ky, kx], |o, i, len, sx| {
                            let g = &dout_c[o..o + len];
                            if want_params {
                                if sx == 1 {
                                    for (a, b) in g.iter().zip(&in_c[i..i + len]) {
                                        acc += a * b;
                                    }
                                } else {
                                    for (a, b) in g.iter().zip(in_c[i..].iter().step_by(sx)) {
                                        acc += a * b;
                                    }
                                }
                            }
                            if let Some(d) = dx_c.as_deref_mut() {
                                if sx == 1 {
                                    for (dst, gv) in d[i..i + len].iter_mut().zip(g) {
                                        *dst += w * gv;
                                    }
                                } else {
                                    for (dst, gv) in d[i..].iter_mut().step_by(sx).zip(g) {
                                        *dst += w * gv;
                                    }
                                }
                            }
                        });
                        if let Some(gr) = grads.as_mut() {
                            gr.weight[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, grads)
}

/// Geometry of a transposed convolution whose kernel equals its stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpGeom {
    pub cin: usize,
    pub cout: usize,
    pub stride: [usize; 3],
}

impl UpGeom {
    pub fn weight_len(&self) -> usize {
        self.cin * self.cout * self.stride.iter().product::<usize>()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.cin,
            self.cout,
            self.stride[0],
            self.stride[1],
            self.stride[2],
        ]
    }
}

pub fn conv_transpose_forward(x: &Feature, weight: &[f64], bias: &[f64], geom: &UpGeom) -> Result<Feature> {
    check_channels(x, geom.cin, "transposed conv")?;
    let s = geom.stride;
    let out_dims = [x.dims[0] * s[0], x.dims[1] * s[1], x.dims[2] * s[2]];
    let mut out = Feature::zeros(geom.cout, out_dims);
    let taps = s[0] * s[1] * s[2];
    let in_n = x.spatial();
    let out_n = out.spatial();
    for co in 0..geom.cout {
        let out_c = &mut out.data[co * out_n..(co + 1) * out_n];
        out_c.fill(bias[co]);
        for ci in 0..geom.cin {
            let in_c = &x.data[ci * in_n..(ci + 1) * in_n];
            let wbase = (ci * geom.cout + co) * taps;
            for a in 0..s[0] {
                for b in 0..s[1] {
                    for c in 0..s[2] {
                        let w = weight[wbase + (a * s[1] + b) * s[2] + c];
                        for iz in 0..x.dims[0] {
                            for iy in 0..x.dims[1] {
                                let src = &in_c[flat_index(x.dims, iz, iy, 0)..][..x.dims[2]];
                                let start = flat_index(out_dims, iz * s[0] + a, iy * s[1] + b, c);
                                for (d, v) in out_c[start..].iter_mut().step_by(s[2]).zip(src) {
                                    *d += w * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose_backward(
    x: &Feature,
    dout: &Feature,
    weight: &[f64],
    geom: &UpGeom,
    want_input: bool,
    want_params: bool,
) -> (Option<Feature>, Option<ConvGrads>) {
    let s = geom.stride;
    let taps = s[0] * s[1] * s[2];
    let in_n = x.spatial();
    let out_n = dout.spatial();
    let out_dims = dout.dims;
    let mut dx = want_input.then(|| Feature::zeros(geom.cin, x.dims));
    let mut grads = want_params.then(|| ConvGrads {
        weight: vec![0.0; geom.weight_len()],
        bias: vec![0.0; geom.cout],
    });
    for co in 0..geom.cout {
        let dout_c = &dout.data[co * out_n..(co + 1) * out_n];
        if let Some(g) = grads.as_mut() {
            g.bias[co] = dout_c.iter().sum();
        }
        for ci in 0..geom.cin {
            let in_c = &x.data[ci * in_n..(ci + 1) * in_n];
            let wbase = (ci * geom.cout + co) * taps;
            for a in 0..s[0] {
                for b in 0..s[1] {
                    for c in 0..s[2] {
                        let widx = wbase + (a * s[1] + b) * s[2] + c;
                        let w = weight[widx];
                        let mut acc = 0.0;
                        for iz in 0..x.dims[0] {
                            for iy in 0..x.dims[1] {
                                let row = flat_index(x.dims, iz, iy, 0);
                                let start = flat_index(out_dims, iz * s[0] + a, iy * s[1] + b, c);
                                let g = dout_c[start..].iter().step_by(s[2]).take(x.dims[2]);
                                if let Some(d) = dx.as_mut() {
                                    let d = &mut d.data[ci * in_n + row..][..x.dims[2]];
                                    for ((dst, gv), v) in d.iter_mut().zip(g).zip(&in_c[row..]) {
                                        *dst += w * gv;
                                        acc += gv * v;
                                    }
                                } else {
                                    for (gv, v) in g.zip(&in_c[row..]) {
                                        acc += gv * v;
                                    }
                                }
                            }
                        }
                        if let Some(gr) = grads.as_mut() {
                            gr.weight[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, grads)
}

/// Per-channel statistics retained by [`instance_norm_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    pub xhat: Feature,
    pub inv_std: Vec<f64>,
}

/// Standardize each channel over its spatial voxels, then apply `gamma`, `beta`.
pub fn instance_norm_forward(x: &Feature, gamma: &[f64], beta: &[f64]) -> (Feature, NormCache) {
    let n = x.spatial() as f64;
    let mut xhat = Feature::zeros(x.channels, x.dims);
    let mut out = Feature::zeros(x.channels, x.dims);
    let mut inv_std = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let src = x.channel(c);
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(istd);
        let xh = xhat.channel_mut(c);
        for (h, v) in xh.iter_mut().zip(src) {
            *h = (v - mean) * istd;
        }
        let (g, b) = (gamma[c], beta[c]);
        for (o, h) in out.channel_mut(c).iter_mut().zip(xhat.channel(c)) {
            *o = g * h + b;
        }
    }
    (out, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn instance_norm_backward(cache: &NormCache, dout: &Feature, gamma: &[f64]) -> (Feature, Vec<f64>, Vec<f64>) {
    let channels = dout.channels;
    let n = dout.spatial() as f64;
    let mut dx = Feature::zeros(channels, dout.dims);
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let xh = cache.xhat.channel(c);
        let g = dout.channel(c);
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for (gv, h) in g.iter().zip(xh) {
            sum_g += gv;
            sum_gx += gv * h;
        }
        dgamma[c] = sum_gx;
        dbeta[c] = sum_g;
        let scale = gamma[c] * cache.inv_std[c] / n;
        for ((d, gv), h) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
            *d = scale * (n * gv - sum_g - h * sum_gx);
        }
    }
    (dx, dgamma, dbeta)
}

#[inline]
pub fn leaky_relu(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

#[inline]
pub fn leaky_relu_grad(pre: f64, slope: f64) -> f64 {
    if pre >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Borrowed parameters of one convolution block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    pub input: Feature,
    pub norm: NormCache,
    pub pre_act: Feature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// `leaky_relu(instance_norm(conv3d(x)))`.
pub fn conv_block_forward(
    x: &Feature,
    p: BlockParams<'_>,
    geom: &ConvGeom,
    slope: f64,
) -> Result<(Feature, BlockCache)> {
    let conv = conv3d_forward(x, p.weight, p.bias, geom)?;
    let (pre_act, norm) = instance_norm_forward(&conv, p.gamma, p.beta);
    let mut out = pre_act.clone();
    for v in &mut out.data {
        *v = leaky_relu(*v, slope);
    }
    Ok((
        out,
        BlockCache {
            input: x.clone(),
            norm,
            pre_act,
        },
    ))
}

pub fn conv_block_backward(
    cache: &BlockCache,
    dout: &Feature,
    p: BlockParams<'_>,
    geom: &ConvGeom,
    slope: f64,
    want_input: bool,
    want_params: bool,
) -> (Option<Feature>, Option<BlockGrads>) {
    let mut dpre = dout.clone();
    for (d, pre) in dpre.data.iter_mut().zip(&cache.pre_act.data) {
        *d *= leaky_relu_grad(*pre, slope);
    }
    let (dconv, dgamma, dbeta) = instance_norm_backward(&cache.norm, &dpre, p.gamma);
    let (dx, conv_grads) = conv3d_backward(&cache.input, &dconv, p.weight, geom, want_input, want_params);
    let grads = conv_grads.map(|g| BlockGrads {
        weight: g.weight,
        bias: g.bias,
        gamma: dgamma,
        beta: dbeta,
    });
    (dx, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feature(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> Feature {
        let n = c * dims.iter().product::<usize>();
        Feature::from_vec(c, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct definition of a zero-padded strided convolution.
    fn conv_oracle(x: &Feature, w: &[f64], b: &[f64], g: &ConvGeom) -> Feature {
        let od = g.out_dims(x.dims);
        let pad = g.pad();
        let mut out = Feature::zeros(g.cout, od);
        for co in 0..g.cout {
            for oz in 0..od[0] {
                for oy in 0..od[1] {
                    for ox in 0..od[2] {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for kz in 0..g.kernel[0] {
                                for ky in 0..g.kernel[1] {
                                    for kx in 0..g.kernel[2] {
                                        let iz = (oz * g.stride[0] + kz) as isize - pad[0] as isize;
                                        let iy = (oy * g.stride[1] + ky) as isize - pad[1] as isize;
                                        let ix = (ox * g.stride[2] + kx) as isize - pad[2] as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= x.dims[0] as isize
                                            || iy >= x.dims[1] as isize
                                            || ix >= x.dims[2] as isize
                                        {
                                            continue;
                                        }
                                        let wi = ((((co * g.cin + ci) * g.kernel[0] + kz) * g.kernel[1] + ky)
                                            * g.kernel[2])
                                            + kx;
                                        let xi = ci * x.spatial()
                                            + flat_index(x.dims, iz as usize, iy as usize, ix as usize);
                                        acc += w[wi] * x.data[xi];
                                    }
                                }
                            }
                        }
                        let n = out.spatial();
                        out.data[co * n + flat_index(od, oz, oy, ox)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition_with_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [[1, 1, 1], [1, 2, 2], [2, 2, 2]] {
            let g = ConvGeom {
                cin: 2,
                cout: 3,
                kernel: [3, 3, 3],
                stride,
            };
            let x = random_feature(&mut rng, 2, [4, 4, 6]);
            let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv3d_forward(&x, &w, &b, &g).unwrap();
            let slow = conv_oracle(&x, &w, &b, &g);
            assert_eq!(fast.dims, slow.dims);
            for (a, e) in fast.data.iter().zip(&slow.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), y> = <x, conv^T(y)> for the bias-free part.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeom {
            cin: 2,
            cout: 2,
            kernel: [3, 3, 3],
            stride: [1, 2, 2],
        };
        let x = random_feature(&mut rng, 2, [3, 4, 4]);
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv3d_forward(&x, &w, &[0.0, 0.0], &g).unwrap();
        let probe = random_feature(&mut rng, 2, y.dims);
        let lhs: f64 = y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
        let (dx, _) = conv3d_backward(&x, &probe, &w, &g, true, false);
        let rhs: f64 = x.data.iter().zip(&dx.unwrap().data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transpose_backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = UpGeom {
            cin: 3,
            cout: 2,
            stride: [1, 2, 2],
        };
        let x = random_feature(&mut rng, 3, [2, 2, 3]);
        let w: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv_transpose_forward(&x, &w, &[0.0, 0.0], &g).unwrap();
        assert_eq!(y.dims, [2, 4, 6]);
        let probe = random_feature(&mut rng, 2, y.dims);
        let lhs: f64 = y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
        let (dx, _) = conv_transpose_backward(&x, &probe, &w, &g, true, false);
        let rhs: f64 = x.data.iter().zip(&dx.unwrap().data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_feature(&mut rng, 2, [4, 4, 4]).scaled(7.0);
        let (out, _) = instance_norm_forward(&x, &[1.0, 1.0], &[0.0, 0.0]);
        for c in 0..2 {
            let ch = out.channel(c);
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn leaky_relu_scales_negative_inputs_exactly() {
        assert_eq!(leaky_relu(-3.5, 0.01), 0.01 * -3.5);
        assert_eq!(leaky_relu(2.0, 0.01), 2.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let g = ConvGeom {
            cin: 2,
            cout: 1,
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
        };
        let x = Feature::zeros(3, [1, 1, 1]);
        assert!(conv3d_forward(&x, &[0.0, 0.0], &[0.0], &g).is_err());
    }
}
