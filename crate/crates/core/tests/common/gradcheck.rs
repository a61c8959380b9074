//! Central finite differences against the hand-written backward passes.
//! Each check returns the worst relative error it saw.

use lesionseg::backbone::NetworkSpec;
use lesionseg::fusion::{selective_fusion_backward, selective_fusion_forward, FusionParams, FUSION};
use lesionseg::layers::{conv_block_backward, conv_block_forward, BlockParams, ConvGeom};
use lesionseg::model::Model;
use lesionseg::optimization::{deep_supervision_loss, dice_ce_loss, LossConfig};
use lesionseg::params::Gradients;
use lesionseg::tensor::Feature;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
// Denominator floor for the relative error. The difference quotient carries
// about 1e-9 of round-off, which would read as a 100% error on gradients
// that are exactly zero (the conv bias ahead of instance norm, for one).
const SCALE_FLOOR: f64 = 1e-4;

fn feature(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> Feature {
    let n = c * dims.iter().product::<usize>();
    Feature::from_vec(c, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn vec_of(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn labels(rng: &mut ChaCha8Rng, dims: [usize; 3], k: u8) -> Array3<u8> {
    Array3::from_shape_fn((dims[0], dims[1], dims[2]), |_| rng.random_range(0..k))
}

fn dot(a: &Feature, b: &Feature) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Largest relative error over the checked coordinates.
#[derive(Default)]
struct Check {
    worst: f64,
    checked: usize,
}

impl Check {
    fn add(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR);
        self.worst = self.worst.max(rel);
    }

    fn merge(&mut self, other: &Check) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
    }

    fn result(&self) -> f64 {
        assert!(self.checked > 0, "nothing checked");
        self.worst
    }
}

fn numeric(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

pub fn conv_block() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut all = Check::default();
    for stride in [[1, 1, 1], [1, 2, 2], [2, 2, 2]] {
        let geom = ConvGeom {
            cin: 2,
            cout: 3,
            kernel: [3, 3, 3],
            stride,
        };
        let x = feature(&mut rng, 2, [4, 5, 6]);
        let w = vec_of(&mut rng, geom.weight_len(), -0.5, 0.5);
        let b = vec_of(&mut rng, 3, -0.1, 0.1);
        let g = vec_of(&mut rng, 3, 0.5, 1.5);
        let be = vec_of(&mut rng, 3, -0.2, 0.2);
        let slope = 0.01;
        let p = BlockParams {
            weight: &w,
            bias: &b,
            gamma: &g,
            beta: &be,
        };
        let (out, cache) = conv_block_forward(&x, p, &geom, slope).unwrap();
        let r = feature(&mut rng, out.channels, out.dims);
        let (dx, grads) = conv_block_backward(&cache, &r, p, &geom, slope, true, true);
        let (dx, grads) = (dx.unwrap(), grads.unwrap());

        let loss = |x: &Feature, w: &[f64], b: &[f64], g: &[f64], be: &[f64]| {
            let p = BlockParams {
                weight: w,
                bias: b,
                gamma: g,
                beta: be,
            };
            dot(&conv_block_forward(x, p, &geom, slope).unwrap().0, &r)
        };
        let mut check = Check::default();
        for i in (0..x.data.len()).step_by(7) {
            let mut f = |v: f64| {
                let mut xp = x.clone();
                xp.data[i] = v;
                loss(&xp, &w, &b, &g, &be)
            };
            check.add(dx.data[i], numeric(&mut f, x.data[i]));
        }
        for i in (0..w.len()).step_by(5) {
            let mut f = |v: f64| {
                let mut wp = w.clone();
                wp[i] = v;
                loss(&x, &wp, &b, &g, &be)
            };
            check.add(grads.weight[i], numeric(&mut f, w[i]));
        }
        for i in 0..3 {
            let mut fb = |v: f64| {
                let mut bp = b.clone();
                bp[i] = v;
                loss(&x, &w, &bp, &g, &be)
            };
            check.add(grads.bias[i], numeric(&mut fb, b[i]));
            let mut fg = |v: f64| {
                let mut gp = g.clone();
                gp[i] = v;
                loss(&x, &w, &b, &gp, &be)
            };
            check.add(grads.gamma[i], numeric(&mut fg, g[i]));
            let mut fbe = |v: f64| {
                let mut bp = be.clone();
                bp[i] = v;
                loss(&x, &w, &b, &g, &bp)
            };
            check.add(grads.beta[i], numeric(&mut fbe, be[i]));
        }
        all.merge(&check);
    }
    all.result()
}

pub fn dice_ce() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut all = Check::default();
    for k in [2usize, 3] {
        let dims = [2, 3, 4];
        let logits: Vec<Feature> = (0..2).map(|_| feature(&mut rng, k, dims).scaled(2.0)).collect();
        let t: Vec<Array3<u8>> = (0..2).map(|_| labels(&mut rng, dims, k as u8)).collect();
        let refs: Vec<&Array3<u8>> = t.iter().collect();
        for cfg in [
            LossConfig::geometric(1),
            LossConfig {
                class_weights: Some((0..k).map(|c| 0.5 + c as f64).collect()),
                ..LossConfig::geometric(1)
            },
        ] {
            let out = dice_ce_loss(&logits, &refs, &cfg).unwrap();
            let mut check = Check::default();
            for s in 0..2 {
                for i in 0..logits[s].data.len() {
                    let mut f = |v: f64| {
                        let mut lp = logits.clone();
                        lp[s].data[i] = v;
                        dice_ce_loss(&lp, &refs, &cfg).unwrap().total
                    };
                    check.add(out.grads[s].data[i], numeric(&mut f, logits[s].data[i]));
                }
            }
            all.merge(&check);
        }
    }
    all.result()
}

pub fn fusion_spec() -> NetworkSpec {
    NetworkSpec {
        channels_per_stage: vec![2, 4],
        strides_per_stage: vec![[1, 1, 1], [2, 2, 2]],
        blocks_per_stage: 1,
        ..NetworkSpec::desk()
    }
}

pub fn fusion_unit() -> f64 {
    let spec = fusion_spec();
    let mut model = Model::hybrid(spec.clone(), 2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // move the affine parameters off their identity initialization
    for name in [
        format!("{FUSION}/reduce/norm/gamma"),
        format!("{FUSION}/reduce/norm/beta"),
        format!("{FUSION}/block/norm/gamma"),
        format!("{FUSION}/block/norm/beta"),
    ] {
        for v in &mut model.params.get_mut(&name).unwrap().data {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let c = spec.deepest_channels();
    let x_de = feature(&mut rng, c, [2, 3, 3]);
    let x_ad = feature(&mut rng, c, [2, 3, 3]);
    let p = FusionParams::from_store(&model.params, &spec).unwrap();
    let (out, cache) = selective_fusion_forward(&x_de, &x_ad, &p).unwrap();
    let r = feature(&mut rng, out.channels, out.dims);
    let g = selective_fusion_backward(&cache, &r, &p);

    let loss_inputs = |de: &Feature, ad: &Feature| {
        let p = FusionParams::from_store(&model.params, &spec).unwrap();
        dot(&selective_fusion_forward(de, ad, &p).unwrap().0, &r)
    };
    let mut check = Check::default();
    for i in 0..x_de.data.len() {
        let mut f = |v: f64| {
            let mut xp = x_de.clone();
            xp.data[i] = v;
            loss_inputs(&xp, &x_ad)
        };
        check.add(g.x_de.data[i], numeric(&mut f, x_de.data[i]));
        let mut f = |v: f64| {
            let mut xp = x_ad.clone();
            xp.data[i] = v;
            loss_inputs(&x_de, &xp)
        };
        check.add(g.x_ad.data[i], numeric(&mut f, x_ad.data[i]));
    }
    let named = [
        ("reduce/weight", &g.reduce_weight),
        ("reduce/norm/gamma", &g.reduce_gamma),
        ("reduce/norm/beta", &g.reduce_beta),
        ("select_a", &g.select_a),
        ("select_b", &g.select_b),
        ("block/conv/weight", &g.block.weight),
        ("block/norm/gamma", &g.block.gamma),
    ];
    for (suffix, analytic) in named {
        let name = format!("{FUSION}/{suffix}");
        let base = model.params.data(&name).unwrap().to_vec();
        for i in (0..base.len()).step_by(3) {
            let mut f = |v: f64| {
                let mut m = model.clone();
                m.params.get_mut(&name).unwrap().data[i] = v;
                let p = FusionParams::from_store(&m.params, &spec).unwrap();
                dot(&selective_fusion_forward(&x_de, &x_ad, &p).unwrap().0, &r)
            };
            check.add(analytic[i], numeric(&mut f, base[i]));
        }
    }
    check.result()
}

/// Deep-supervised Dice + CE of a whole network against every parameter
/// tensor, sampled.
pub fn full_network(model: &Model) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let dims = [4, 6, 6];
    let x = feature(&mut rng, 1, dims);
    let t = labels(&mut rng, dims, 2);
    let cfg = LossConfig::geometric(model.spec.pyramid_len());
    let loss_of = |m: &Model| {
        let (pyr, _) = m.forward(&x).unwrap();
        deep_supervision_loss(&[pyr], &[&t], &cfg).unwrap().total
    };
    let (pyr, cache) = model.forward(&x).unwrap();
    let out = deep_supervision_loss(&[pyr], &[&t], &cfg).unwrap();
    let mut grads = Gradients::new();
    model.backward(&cache, &out.grads[0], &mut grads).unwrap();

    let mut check = Check::default();
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in &names {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}")).to_vec();
        let base = model.params.data(name).unwrap().to_vec();
        let step = (base.len() / 6).max(1);
        for i in (0..base.len()).step_by(step) {
            let mut f = |v: f64| {
                let mut m = model.clone();
                m.params.get_mut(name).unwrap().data[i] = v;
                loss_of(&m)
            };
            check.add(analytic[i], numeric(&mut f, base[i]));
        }
    }
    check.result()
}
