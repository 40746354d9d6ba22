//! Confidence-gated deformable texture transfer and the multi-scale
//! aggregator that turns transferred textures into the SR output.

use std::sync::Arc;

use crate::autograd::{directional_check, DeformContext, Graph, Var};
use crate::correspond::{warp, CorrespondenceMap, FeatureExtractor, FeaturePyramid, LEVEL_CHANNELS, LEVEL_SCALES};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::{ConvGeometry, Tensor};

const LEVELS: usize = LEVEL_CHANNELS.len();

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Transferred texture channels per level, finest first.
    pub texture: [usize; LEVELS],
    /// Aggregator width per level, finest first.
    pub width: [usize; LEVELS],
    pub res_blocks: usize,
    /// Drop every nonlinearity (test configuration).
    pub linear: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            texture: [8, 8, 16],
            width: [8, 16, 16],
            res_blocks: 2,
            linear: false,
        }
    }
}

/// Per-level fixed inputs for one query image.
#[derive(Debug, Clone)]
pub struct LevelInputs {
    pub f_de: Tensor,
    pub f_ref: Arc<Tensor>,
    pub warped: Tensor,
    pub centers: Vec<[f64; 2]>,
    pub confidence: Arc<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TransferInputs {
    pub i_de: Tensor,
    pub levels: Vec<LevelInputs>,
}

impl TransferInputs {
    /// Assemble inputs from `I_DE`, its pyramid, the reference pyramid and
    /// the coarsest-level correspondence (carried down to finer levels).
    pub fn new(i_de: &Image, f_de: &FeaturePyramid, f_ref: &Arc<FeaturePyramid>, coarse: &CorrespondenceMap) -> Result<Self> {
        if f_de.extractor_id != f_ref.extractor_id {
            return Err(Error::InvalidArgument("pyramids come from different extractors".into()));
        }
        let top = LEVELS - 1;
        let mut levels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let factor = LEVEL_SCALES[top] / LEVEL_SCALES[l];
            let map = if factor == 1 { coarse.clone() } else { coarse.rescale(factor)? };
            let fr = &f_ref.levels[l];
            let (_, qh, qw) = f_de.levels[l].chw();
            if map.query_grid != (qh, qw) {
                return Err(Error::shape("correspondence grid", format!("{qh}x{qw}"), format!("{:?}", map.query_grid)));
            }
            levels.push(LevelInputs {
                f_de: f_de.levels[l].clone(),
                f_ref: Arc::new(fr.clone()),
                warped: warp(fr, &map)?,
                centers: map.centers(),
                confidence: Arc::new(map.confidence.clone()),
            });
        }
        Ok(TransferInputs {
            i_de: Tensor::from_image(&i_de.to_rgb()),
            levels,
        })
    }
}

struct LevelLayout {
    dcn_w: usize,
    off_w: usize,
    off_b: usize,
    plain_w: usize,
    fuse: (usize, usize),
    res: Vec<[(usize, usize); 2]>,
    up: Option<(usize, usize)>,
}

pub struct TransferModel {
    cfg: ModelConfig,
    params: ParamStore,
    layout: Vec<LevelLayout>,
    out: usize,
}

impl TransferModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut p = ParamStore::new();
        let mut layout = Vec::new();
        for l in 0..LEVELS {
            let c = LEVEL_CHANNELS[l];
            let (t, w) = (cfg.texture[l], cfg.width[l]);
            let plain_w = p.conv(&format!("plain{l}.weight"), t, c, 3, 1.0, &mut rng);
            // masks start at 1/2, so the deformable kernel starts at twice the plain one
            let dcn = p.tensors()[plain_w].scale(2.0);
            let dcn_w = p.insert(format!("dcn{l}.weight"), dcn);
            let off_w = p.zeros(&format!("dcn{l}.offset.weight"), &[27, 2 * c, 3, 3]);
            let off_b = p.zeros(&format!("dcn{l}.offset.bias"), &[27]);
            let fuse_in = t + c + if l + 1 < LEVELS { w } else { 0 };
            let fuse = (
                p.conv(&format!("agg{l}.fuse.weight"), w, fuse_in, 3, 1.0, &mut rng),
                p.zeros(&format!("agg{l}.fuse.bias"), &[w]),
            );
            let res = (0..cfg.res_blocks)
                .map(|b| {
                    [1, 2].map(|k| {
                        let gain = if k == 1 { 1.0 } else { 0.1 };
                        (
                            p.conv(&format!("agg{l}.res{b}.conv{k}.weight"), w, w, 3, gain, &mut rng),
                            p.zeros(&format!("agg{l}.res{b}.conv{k}.bias"), &[w]),
                        )
                    })
                })
                .collect();
            let up = (l > 0).then(|| {
                let wo = cfg.width[l - 1];
                (
                    p.conv(&format!("agg{l}.up.weight"), wo, w, 3, 1.0, &mut rng),
                    p.zeros(&format!("agg{l}.up.bias"), &[wo]),
                )
            });
            layout.push(LevelLayout {
                dcn_w,
                off_w,
                off_b,
                plain_w,
                fuse,
                res,
                up,
            });
        }
        // bias-free: the residual carries zero-mean detail on top of I_de
        let out = p.zeros("agg.out.weight", &[3, cfg.width[0], 3, 3]);
        TransferModel {
            cfg,
            params: p,
            layout,
            out,
        }
    }

    /// Model with the given configuration and every parameter from `params`.
    pub fn from_params(cfg: ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut m = TransferModel::new(cfg, 0);
        for name in m.params.names() {
            if params.get(name).is_none() {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
        }
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        if self.cfg.linear {
            x
        } else {
            g.relu(x)
        }
    }

    fn conv(g: &mut Graph, b: &Bound, x: Var, wb: (usize, usize)) -> Var {
        g.conv(x, b.at(wb.0), Some(b.at(wb.1)), ConvGeometry::SAME3)
    }

    /// Transferred texture `T_l` for every level.
    pub fn textures(&self, g: &mut Graph, b: &Bound, inp: &TransferInputs, f_de: &[Var], dcn: bool) -> Vec<Var> {
        inp.levels
            .iter()
            .zip(&self.layout)
            .zip(f_de)
            .map(|((lv, lay), &fde)| {
                let warped = g.constant(lv.warped.clone());
                if dcn {
                    crate::instrument::count_deform_pass();
                    let cat = g.concat(&[warped, fde]);
                    let om = g.conv(cat, b.at(lay.off_w), Some(b.at(lay.off_b)), ConvGeometry::SAME3);
                    let offsets = g.channels(om, 0, 18);
                    let logits = g.channels(om, 18, 9);
                    let masks = g.sigmoid(logits);
                    let (_, h, w) = lv.f_de.chw();
                    let ctx = Arc::new(DeformContext {
                        reference: lv.f_ref.clone(),
                        centers: lv.centers.clone(),
                        confidence: lv.confidence.to_vec(),
                        out_hw: (h, w),
                    });
                    g.deform(offsets, masks, b.at(lay.dcn_w), ctx)
                } else {
                    let t = g.conv(warped, b.at(lay.plain_w), None, ConvGeometry::SAME3);
                    g.mul_map(t, lv.confidence.clone())
                }
            })
            .collect()
    }

    /// Coarse-to-fine fusion; returns the pre-clamp `3 × H × W` output.
    pub fn aggregate(&self, g: &mut Graph, b: &Bound, textures: &[Var], f_de: &[Var], i_de: Var) -> Result<Var> {
        if textures.len() != LEVELS || f_de.len() != LEVELS {
            return Err(Error::shape("aggregate levels", LEVELS, textures.len().min(f_de.len())));
        }
        let mut up: Option<Var> = None;
        for l in (0..LEVELS).rev() {
            let lay = &self.layout[l];
            let mut parts = Vec::with_capacity(3);
            parts.extend(up);
            parts.push(textures[l]);
            parts.push(f_de[l]);
            let cat = g.concat(&parts);
            let fused = Self::conv(g, b, cat, lay.fuse);
            let mut h = self.act(g, fused);
            for [c1, c2] in &lay.res {
                let r = Self::conv(g, b, h, *c1);
                let r = self.act(g, r);
                let r = Self::conv(g, b, r, *c2);
                h = g.add(h, r);
            }
            if let Some(wb) = lay.up {
                let u = g.upsample2(h);
                let u = Self::conv(g, b, u, wb);
                up = Some(self.act(g, u));
            } else {
                let residual = g.conv(h, b.at(self.out), None, ConvGeometry::SAME3);
                return Ok(g.add(i_de, residual));
            }
        }
        unreachable!("level 0 returns")
    }

    /// Full transfer + aggregation; returns the pre-clamp output node.
    pub fn forward(&self, g: &mut Graph, b: &Bound, inp: &TransferInputs, dcn: bool) -> Result<Var> {
        if inp.levels.len() != LEVELS {
            return Err(Error::shape("pyramid levels", LEVELS, inp.levels.len()));
        }
        let f_de: Vec<Var> = inp.levels.iter().map(|lv| g.constant(lv.f_de.clone())).collect();
        let textures = self.textures(g, b, inp, &f_de, dcn);
        let i_de = g.constant(inp.i_de.clone());
        self.aggregate(g, b, &textures, &f_de, i_de)
    }

    /// Clamped SR image.
    pub fn infer(&self, inp: &TransferInputs, dcn: bool) -> Result<Image> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &b, inp, dcn)?;
        Ok(g.value(out).to_image()?.clamp01())
    }
}

/// Random inputs for gradient and shape tests: a `size × size` query, a
/// reference of the same size and a random coarse index map.
pub fn random_inputs(size: usize, rng: &mut Rng) -> Result<TransferInputs> {
    let ex = FeatureExtractor::new(rng.below(1 << 30) as u64);
    let i_de = rng.uniform_image(size, size, 3);
    let reference = rng.uniform_image(size, size, 3);
    let f_de = ex.extract(&i_de)?;
    let f_ref = Arc::new(ex.extract(&reference)?);
    let (_, ch, cw) = f_de.coarsest().chw();
    let mut coarse = CorrespondenceMap::identity(ch, cw);
    for (j, c) in coarse.index.iter_mut().zip(coarse.confidence.iter_mut()) {
        *j = rng.below(ch * cw);
        *c = rng.uniform_range(-1.0, 1.0);
    }
    TransferInputs::new(&i_de, &f_de, &f_ref, &coarse)
}

/// Finite-difference audit of every learnable tensor: worst relative error
/// per parameter over `projections` random directions, for a small model at
/// a random (non-zero) parameter point.
pub fn gradient_audit(seed: u64, projections: usize) -> Result<Vec<(String, f64)>> {
    let cfg = ModelConfig {
        texture: [2, 2, 3],
        width: [3, 3, 4],
        res_blocks: 2,
        linear: false,
    };
    let mut rng = Rng::new(seed);
    let mut model = TransferModel::new(cfg, seed);
    for (name, t) in model.params.names().to_vec().iter().zip(model.params.tensors_mut()) {
        let std = if name.contains("offset.bias") { 0.8 } else { 0.3 };
        *t = Tensor::randn(t.shape(), std, &mut rng);
    }
    let inp = random_inputs(8, &mut rng)?;
    let target = Arc::new(Tensor::randn(&[3, 8, 8], 0.5, &mut rng));
    let loss = |params: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut m = TransferModel::new(model.cfg.clone(), 0);
        m.params.tensors_mut().clone_from_slice(params);
        let mut g = Graph::new();
        let b = m.params.bind(&mut g);
        let a = m.forward(&mut g, &b, &inp, true)?;
        let p = m.forward(&mut g, &b, &inp, false)?;
        let la = g.mse_to(a, target.clone());
        let lp = g.mse_to(p, target.clone());
        let total = g.weighted_sum(&[(la, 1.0), (lp, 1.0)]);
        let mut grads = g.backward(total);
        Ok((g.scalar(total), m.params.collect_grads(&b, &mut grads)))
    };
    let params = model.params.tensors().to_vec();
    let (_, grads) = loss(&params)?;
    let f = |p: &[Tensor]| loss(p).map(|r| r.0).unwrap_or(f64::NAN);
    let mut report = Vec::new();
    for (k, name) in model.params.names().iter().enumerate() {
        let err = directional_check(&params, k, &grads[k], &f, projections, 1e-4, &mut rng);
        report.push((name.clone(), err));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(model: &TransferModel, inp: &TransferInputs, dcn: bool) -> Tensor {
        let mut g = Graph::new();
        let b = model.params.bind_frozen(&mut g);
        let out = model.forward(&mut g, &b, inp, dcn).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn untrained_model_returns_i_de() {
        let mut rng = Rng::new(1);
        let inp = random_inputs(16, &mut rng).unwrap();
        let model = TransferModel::new(ModelConfig::default(), 2);
        for dcn in [false, true] {
            assert_eq!(run(&model, &inp, dcn), inp.i_de);
        }
    }

    fn single_level_texture(model: &TransferModel, inp: &TransferInputs, l: usize) -> Tensor {
        let mut g = Graph::new();
        let b = model.params.bind_frozen(&mut g);
        let f_de: Vec<Var> = inp.levels.iter().map(|lv| g.constant(lv.f_de.clone())).collect();
        let t = model.textures(&mut g, &b, inp, &f_de, true);
        g.value(t[l]).clone()
    }

    #[test]
    fn delta_kernel_reduces_to_warp() {
        let mut rng = Rng::new(3);
        let mut inp = random_inputs(16, &mut rng).unwrap();
        for lv in &mut inp.levels {
            lv.confidence = Arc::new(vec![1.0; lv.confidence.len()]);
        }
        let cfg = ModelConfig {
            texture: LEVEL_CHANNELS,
            ..ModelConfig::default()
        };
        let mut model = TransferModel::new(cfg, 4);
        for l in 0..LEVELS {
            let c = LEVEL_CHANNELS[l];
            let mut w = Tensor::zeros(&[c, c, 3, 3]);
            for ch in 0..c {
                // centre tap, doubled to cancel the initial 1/2 mask
                w.data_mut()[(ch * c + ch) * 9 + 4] = 2.0;
            }
            *model.params.get_mut(&format!("dcn{l}.weight")).unwrap() = w;
            let t = single_level_texture(&model, &inp, l);
            assert!(t.max_abs_diff(&inp.levels[l].warped) < 1e-12, "level {l}");
        }
    }

    #[test]
    fn zero_confidence_zeroes_texture() {
        let mut rng = Rng::new(5);
        let mut inp = random_inputs(16, &mut rng).unwrap();
        for lv in &mut inp.levels {
            lv.confidence = Arc::new(vec![0.0; lv.confidence.len()]);
        }
        let mut model = TransferModel::new(ModelConfig::default(), 6);
        for (name, t) in model.params.names().to_vec().iter().zip(model.params.tensors_mut()) {
            if name.starts_with("dcn") {
                *t = Tensor::randn(t.shape(), 0.5, &mut rng);
            }
        }
        for l in 0..LEVELS {
            assert!(single_level_texture(&model, &inp, l).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_aggregator_is_homogeneous() {
        let mut rng = Rng::new(7);
        let cfg = ModelConfig {
            linear: true,
            ..ModelConfig::default()
        };
        let mut model = TransferModel::new(cfg, 8);
        for (name, t) in model.params.names().to_vec().iter().zip(model.params.tensors_mut()) {
            *t = if name.ends_with("bias") {
                Tensor::zeros(t.shape())
            } else {
                Tensor::randn(t.shape(), 0.3, &mut rng)
            };
        }
        let inp = random_inputs(16, &mut rng).unwrap();
        let doubled = TransferInputs {
            i_de: inp.i_de.scale(2.0),
            levels: inp
                .levels
                .iter()
                .map(|lv| LevelInputs {
                    f_de: lv.f_de.scale(2.0),
                    f_ref: Arc::new(lv.f_ref.scale(2.0)),
                    warped: lv.warped.scale(2.0),
                    ..lv.clone()
                })
                .collect(),
        };
        // the plain transfer is linear in the warped features, so the whole
        // path is homogeneous once the aggregator is
        let a = run(&model, &inp, false);
        let b = run(&model, &doubled, false);
        let peak = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(b.max_abs_diff(&a.scale(2.0)) < 1e-12 * (1.0 + peak));
    }

    #[test]
    fn every_parameter_passes_gradient_audit() {
        let report = gradient_audit(11, 20).unwrap();
        assert!(report.len() > 20);
        for (name, err) in report {
            assert!(err <= 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn from_params_round_trip_and_missing() {
        let model = TransferModel::new(ModelConfig::default(), 12);
        let copy = TransferModel::from_params(ModelConfig::default(), model.params()).unwrap();
        assert_eq!(copy.params(), model.params());
        let bad = ModelConfig {
            width: [4, 16, 16],
            ..ModelConfig::default()
        };
        assert!(TransferModel::from_params(bad, model.params()).is_err());
        assert!(TransferModel::from_params(ModelConfig::default(), &ParamStore::new()).is_err());
    }
}
