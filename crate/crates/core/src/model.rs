//! A network architecture bound to its spec and parameters.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, LogitsPyramid, NetworkSpec, UNetCache};
use crate::error::{Error, Result};
use crate::fusion::{self, HybridCache};
use crate::params::{Gradients, ParamSpec, ParamStore};
use crate::tensor::Feature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Unet,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub spec: NetworkSpec,
    pub params: ParamStore,
    /// Requested fusion reduction ratio; unused by plain networks.
    pub reduction: usize,
}

#[derive(Debug, Clone)]
pub enum ForwardCache {
    Unet(Box<UNetCache>),
    Hybrid(Box<HybridCache>),
}

impl Model {
    pub fn unet(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = backbone::init_params(&spec, seed)?;
        Ok(Model {
            arch: Architecture::Unet,
            spec,
            params,
            reduction: fusion::DEFAULT_REDUCTION,
        })
    }

    /// Fresh dual-encoder network with nothing frozen.
    pub fn hybrid(spec: NetworkSpec, reduction: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = ParamStore::init(&fusion::hybrid_layout(&spec, reduction), seed, spec.leaky_slope);
        Ok(Model {
            arch: Architecture::Hybrid,
            spec,
            params,
            reduction,
        })
    }

    /// Expected parameter names and shapes for this architecture and spec.
    pub fn layout(&self) -> Vec<ParamSpec> {
        match self.arch {
            Architecture::Unet => backbone::unet_layout(&self.spec),
            Architecture::Hybrid => fusion::hybrid_layout(&self.spec, self.reduction),
        }
    }

    /// The parameter store holds exactly the layout's names and shapes.
    pub fn check_layout(&self) -> Result<()> {
        let layout = self.layout();
        if layout.len() != self.params.len() {
            return Err(Error::SpecMismatch(format!(
                "{} parameters stored, layout expects {}",
                self.params.len(),
                layout.len()
            )));
        }
        for spec in &layout {
            let p = self
                .params
                .get(&spec.name)
                .map_err(|_| Error::SpecMismatch(format!("missing parameter {}", spec.name)))?;
            if p.shape != spec.shape {
                return Err(Error::SpecMismatch(format!(
                    "{}: shape {:?}, layout expects {:?}",
                    spec.name, p.shape, spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, patch: &Feature) -> Result<(LogitsPyramid, ForwardCache)> {
        if patch.channels != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "patch has {} channels, network expects {}",
                patch.channels, self.spec.in_channels
            )));
        }
        match self.arch {
            Architecture::Unet => {
                let (l, c) = backbone::forward(&self.params, &self.spec, patch)?;
                Ok((l, ForwardCache::Unet(Box::new(c))))
            }
            Architecture::Hybrid => {
                let (l, c) = fusion::hybrid_forward(&self.params, &self.spec, patch)?;
                Ok((l, ForwardCache::Hybrid(Box::new(c))))
            }
        }
    }

    pub fn backward(&self, cache: &ForwardCache, d_logits: &[Feature], grads: &mut Gradients) -> Result<()> {
        match cache {
            ForwardCache::Unet(c) => backbone::backward(&self.params, &self.spec, c, d_logits, grads),
            ForwardCache::Hybrid(c) => fusion::hybrid_backward(&self.params, &self.spec, c, d_logits, grads),
        }
    }

    /// Softmax probabilities of the full-resolution head.
    pub fn predict_probs(&self, patch: &Feature) -> Result<Feature> {
        let (mut logits, _) = self.forward(patch)?;
        let mut full = logits.swap_remove(0);
        softmax_in_place(&mut full);
        Ok(full)
    }
}

/// Channel softmax at each voxel.
pub fn softmax_in_place(logits: &mut Feature) {
    let n = logits.spatial();
    let k = logits.channels;
    for v in 0..n {
        let m = (0..k).map(|c| logits.data[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (logits.data[c * n + v] - m).exp();
            logits.data[c * n + v] = e;
            sum += e;
        }
        for c in 0..k {
            logits.data[c * n + v] /= sum;
        }
    }
}
