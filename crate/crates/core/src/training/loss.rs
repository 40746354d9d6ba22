//! Reconstruction, perceptual and adversarial losses.

use std::sync::Arc;

use crate::autograd::{Graph, Var};
use crate::correspond::FeatureExtractor;
use crate::error::Result;
use crate::image::Image;
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::{ConvGeometry, Tensor};

/// Pyramid level whose features drive the perceptual term.
pub const PERCEPTUAL_LEVEL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_per: f64,
    pub lambda_adv: f64,
    pub warmup_epochs: usize,
    pub adv_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_per: 1e-2,
            lambda_adv: 1e-4,
            warmup_epochs: 2,
            adv_enabled: true,
        }
    }
}

impl LossConfig {
    /// Weights applied to `(rec, per, adv)` at `epoch` (0-based).
    pub fn weights(&self, epoch: usize) -> (f64, f64, f64) {
        if epoch < self.warmup_epochs {
            (1.0, 0.0, 0.0)
        } else {
            (1.0, self.lambda_per, if self.adv_enabled { self.lambda_adv } else { 0.0 })
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub rec: f64,
    pub per: f64,
    pub adv: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn accumulate(&mut self, other: &LossTerms, k: f64) {
        self.rec += k * other.rec;
        self.per += k * other.per;
        self.adv += k * other.adv;
        self.total += k * other.total;
    }
}

const DISC_LAYERS: [(usize, usize); 4] = [(3, 16), (16, 32), (32, 64), (64, 1)];

/// Four-layer strided patch discriminator producing a logit map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        for (i, &(cin, cout)) in DISC_LAYERS.iter().enumerate() {
            let k = if i + 1 < DISC_LAYERS.len() { 4 } else { 3 };
            params.conv(&format!("disc{i}.weight"), cout, cin, k, 1.0, &mut rng);
            params.zeros(&format!("disc{i}.bias"), &[cout]);
        }
        Discriminator { params }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let mut h = x;
        for i in 0..DISC_LAYERS.len() {
            let last = i + 1 == DISC_LAYERS.len();
            let geo = if last {
                ConvGeometry::SAME3
            } else {
                ConvGeometry { kernel: 4, stride: 2, pad: 1 }
            };
            h = g.conv(h, b.at(2 * i), Some(b.at(2 * i + 1)), geo);
            if !last {
                h = g.leaky_relu(h, 0.2);
            }
        }
        h
    }

    /// Discriminator objective on a real and a (detached) generated batch
    /// element; returns the loss node.
    pub fn loss(&self, g: &mut Graph, b: &Bound, real: &Tensor, fake: &Tensor) -> Var {
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let lr = self.forward(g, b, r);
        let lf = self.forward(g, b, f);
        let a = g.mean_softplus(lr, -1.0);
        let c = g.mean_softplus(lf, 1.0);
        g.weighted_sum(&[(a, 1.0), (c, 1.0)])
    }
}

/// Graph nodes of the composite objective.
pub struct LossNodes {
    pub total: Var,
    pub rec: Var,
    pub per: Var,
    pub adv: Var,
}

impl LossNodes {
    pub fn terms(&self, g: &Graph) -> LossTerms {
        LossTerms {
            rec: g.scalar(self.rec),
            per: g.scalar(self.per),
            adv: g.scalar(self.adv),
            total: g.scalar(self.total),
        }
    }
}

/// `L1 + λ_per·MSE(features) + λ_adv·softplus(−D(sr))`, with the warmup
/// rule applied to the total. Every term is always evaluated.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss_nodes(
    g: &mut Graph,
    sr: Var,
    hr: &Arc<Tensor>,
    hr_features: &Arc<Tensor>,
    extractor: &FeatureExtractor,
    disc: &Discriminator,
    cfg: &LossConfig,
    epoch: usize,
) -> LossNodes {
    let rec = g.l1_to(sr, hr.clone());
    let feats = extractor.forward(g, sr, PERCEPTUAL_LEVEL + 1);
    let per = g.mse_to(feats[PERCEPTUAL_LEVEL], hr_features.clone());
    let db = disc.params.bind_frozen(g);
    let logits = disc.forward(g, &db, sr);
    let adv = g.mean_softplus(logits, -1.0);
    let (wr, wp, wa) = cfg.weights(epoch);
    let total = g.weighted_sum(&[(rec, wr), (per, wp), (adv, wa)]);
    LossNodes { total, rec, per, adv }
}

/// Perceptual target features of an HR tensor.
pub fn perceptual_features(extractor: &FeatureExtractor, hr: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(hr.clone());
    let f = extractor.forward(&mut g, x, PERCEPTUAL_LEVEL + 1);
    g.value(f[PERCEPTUAL_LEVEL]).clone()
}

/// Loss components of a finished SR image.
pub fn composite_loss(
    sr: &Image,
    hr: &Image,
    extractor: &FeatureExtractor,
    disc: &Discriminator,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<LossTerms> {
    sr.check_same_shape(hr, "composite_loss")?;
    let hr_t = Arc::new(Tensor::from_image(&hr.to_rgb()));
    let feats = Arc::new(perceptual_features(extractor, &hr_t));
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_image(&sr.to_rgb()));
    let nodes = composite_loss_nodes(&mut g, x, &hr_t, &feats, extractor, disc, cfg, epoch);
    Ok(nodes.terms(&g))
}
