//! Desk-scale training loop for the transfer and aggregation parameters
//! (and optionally the learned denoiser).

use std::io::Write;
use std::sync::{Arc, OnceLock};

use crate::autograd::Graph;
use crate::config::Config;
use crate::correspond::{match_features, CorrespondenceMap, FeatureExtractor, FeaturePyramid, DEFAULT_EXTRACTOR_SEED};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::psnr_y;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::transfer::{gradient_audit, ModelConfig, TransferInputs, TransferModel};

use super::adam::{AdamConfig, AdamState};
use super::augment::Transform;
use super::checkpoint::Checkpoint;
use super::denoiser_net::LearnedTinyDenoiser;
use super::loss::{composite_loss_nodes, perceptual_features, Discriminator, LossConfig, LossTerms};

/// Context kept around a training crop when extracting its features, so
/// crop features equal full-image features.
const FEATURE_MARGIN: usize = 16;
const COARSE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Random crops drawn from every pair per epoch.
    pub crops_per_pair: usize,
    pub crop: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub augment: bool,
    pub seed: u64,
    pub dcn: bool,
    pub model: ModelConfig,
    pub extractor_seed: u64,
    pub validation_crops: usize,
    pub train_denoiser: bool,
    pub denoiser_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 9,
            crops_per_pair: 1,
            crop: 48,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            augment: true,
            seed: 0,
            dcn: true,
            model: ModelConfig::default(),
            extractor_seed: DEFAULT_EXTRACTOR_SEED,
            validation_crops: 9,
            train_denoiser: false,
            denoiser_width: 16,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "crops_per_pair",
    "crop",
    "lr",
    "lambda_per",
    "lambda_adv",
    "warmup_epochs",
    "adv_enabled",
    "augment",
    "seed",
    "dcn",
    "texture",
    "width",
    "res_blocks",
    "extractor_seed",
    "validation_crops",
    "train_denoiser",
    "denoiser_width",
];

fn triple(c: &Config, key: &str, default: [usize; 3]) -> Result<[usize; 3]> {
    let v: Vec<usize> = c.get_list(key, default.to_vec())?;
    v.try_into().map_err(|v: Vec<usize>| Error::InvalidArgument(format!("`{key}` needs 3 values, got {}", v.len())))
}

impl TrainConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: c.get("epochs", d.epochs)?,
            batch_size: c.get("batch_size", d.batch_size)?,
            crops_per_pair: c.get("crops_per_pair", d.crops_per_pair)?,
            crop: c.get("crop", d.crop)?,
            adam: AdamConfig {
                lr: c.get("lr", d.adam.lr)?,
                ..d.adam
            },
            loss: LossConfig {
                lambda_per: c.get("lambda_per", d.loss.lambda_per)?,
                lambda_adv: c.get("lambda_adv", d.loss.lambda_adv)?,
                warmup_epochs: c.get("warmup_epochs", d.loss.warmup_epochs)?,
                adv_enabled: c.get_bool("adv_enabled", d.loss.adv_enabled)?,
            },
            augment: c.get_bool("augment", d.augment)?,
            seed: c.get("seed", d.seed)?,
            dcn: c.get_bool("dcn", d.dcn)?,
            model: ModelConfig {
                texture: triple(c, "texture", d.model.texture)?,
                width: triple(c, "width", d.model.width)?,
                res_blocks: c.get("res_blocks", d.model.res_blocks)?,
                linear: false,
            },
            extractor_seed: c.get("extractor_seed", d.extractor_seed)?,
            validation_crops: c.get("validation_crops", d.validation_crops)?,
            train_denoiser: c.get_bool("train_denoiser", d.train_denoiser)?,
            denoiser_width: c.get("denoiser_width", d.denoiser_width)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crops_per_pair == 0 {
            return Err(Error::InvalidArgument("batch_size and crops_per_pair must be positive".into()));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(COARSE) {
            return Err(Error::NotDivisible { dim: self.crop, divisor: COARSE });
        }
        if self.loss.lambda_per < 0.0 || self.loss.lambda_adv < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        let join = |a: [usize; 3]| a.map(|v| v.to_string()).join(",");
        c.set("epochs", self.epochs);
        c.set("batch_size", self.batch_size);
        c.set("crops_per_pair", self.crops_per_pair);
        c.set("crop", self.crop);
        c.set("lr", self.adam.lr);
        c.set("lambda_per", self.loss.lambda_per);
        c.set("lambda_adv", self.loss.lambda_adv);
        c.set("warmup_epochs", self.loss.warmup_epochs);
        c.set("adv_enabled", self.loss.adv_enabled);
        c.set("augment", self.augment);
        c.set("seed", self.seed);
        c.set("dcn", self.dcn);
        c.set("texture", join(self.model.texture));
        c.set("width", join(self.model.width));
        c.set("res_blocks", self.model.res_blocks);
        c.set("extractor_seed", self.extractor_seed);
        c.set("validation_crops", self.validation_crops);
        c.set("train_denoiser", self.train_denoiser);
        c.set("denoiser_width", self.denoiser_width);
        c
    }
}

/// A corpus pair with its enhanced input, reference pyramid and
/// coarsest-level correspondence precomputed.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub id: String,
    pub i_de: Image,
    pub hr: Image,
    pub reference: Image,
    pub ref_pyramid: Arc<FeaturePyramid>,
    pub coarse: CorrespondenceMap,
}

pub fn prepare_pair(id: &str, i_de: Image, reference: Image, hr: Image, extractor: &FeatureExtractor) -> Result<PreparedPair> {
    i_de.check_same_shape(&hr, "prepare_pair")?;
    let f_de = extractor.extract(&i_de)?;
    let ref_pyramid = Arc::new(extractor.extract(&reference)?);
    let coarse = match_features(f_de.coarsest(), ref_pyramid.coarsest())?;
    Ok(PreparedPair {
        id: id.to_string(),
        i_de,
        hr: hr.to_rgb(),
        reference,
        ref_pyramid,
        coarse,
    })
}

impl PreparedPair {
    /// Whole-image transfer inputs.
    pub fn full_inputs(&self, extractor: &FeatureExtractor) -> Result<TransferInputs> {
        let f_de = extractor.extract(&self.i_de)?;
        TransferInputs::new(&self.i_de, &f_de, &self.ref_pyramid, &self.coarse)
    }

    /// Inputs and HR target for a `size²` crop at `(row, col)` after the
    /// query-side transform `tq` and reference transform `tr`.
    pub fn crop_inputs(
        &self,
        extractor: &FeatureExtractor,
        row: usize,
        col: usize,
        size: usize,
        tq: Transform,
        tr: Transform,
    ) -> Result<(TransferInputs, Tensor)> {
        let (i_de, hr) = if tq.is_identity() {
            (self.i_de.clone(), self.hr.clone())
        } else {
            (tq.apply(&self.i_de)?, tq.apply(&self.hr)?)
        };
        let (h, w, _) = i_de.dims();
        if size > h || size > w || row + size > h || col + size > w || !row.is_multiple_of(COARSE) || !col.is_multiple_of(COARSE) {
            return Err(Error::InvalidArgument(format!("crop {size} at ({row}, {col}) does not fit {h}x{w}")));
        }
        let r0 = row.saturating_sub(FEATURE_MARGIN);
        let c0 = col.saturating_sub(FEATURE_MARGIN);
        let r1 = (row + size + FEATURE_MARGIN).min(h);
        let c1 = (col + size + FEATURE_MARGIN).min(w);
        let window = i_de.crop(r0, c0, r1 - r0, c1 - c0)?;
        let f_crop = extractor.extract(&window)?.crop(row - r0, col - c0, size, size);
        let i_de_crop = i_de.crop(row, col, size, size)?;
        let hr_crop = Tensor::from_image(&hr.crop(row, col, size, size)?);
        let inputs = if tq.is_identity() && tr.is_identity() {
            let coarse = self.coarse.crop(row / COARSE, col / COARSE, size / COARSE, size / COARSE);
            TransferInputs::new(&i_de_crop, &f_crop, &self.ref_pyramid, &coarse)?
        } else {
            let ref_pyr = if tr.is_identity() {
                self.ref_pyramid.clone()
            } else {
                Arc::new(extractor.extract(&tr.apply(&self.reference)?)?)
            };
            let coarse = match_features(f_crop.coarsest(), ref_pyr.coarsest())?;
            TransferInputs::new(&i_de_crop, &f_crop, &ref_pyr, &coarse)?
        };
        Ok((inputs, hr_crop))
    }
}

/// A training or validation example.
pub struct Example {
    pub inputs: TransferInputs,
    pub hr: Arc<Tensor>,
    pub hr_features: Arc<Tensor>,
}

fn random_crop(p: &PreparedPair, size: usize, rng: &mut Rng) -> (usize, usize) {
    let (h, w, _) = p.i_de.dims();
    let pick = |n: usize, rng: &mut Rng| COARSE * rng.below((n - size) / COARSE + 1);
    let r = pick(h, rng);
    (r, pick(w, rng))
}

/// Fixed validation crops, drawn once per seed.
pub struct ValidationSet {
    examples: Vec<Example>,
}

impl ValidationSet {
    pub fn new(pairs: &[PreparedPair], cfg: &TrainConfig, extractor: &FeatureExtractor) -> Result<Self> {
        let mut rng = Rng::keyed(cfg.seed, &[u64::MAX]);
        let n = cfg.validation_crops.min(pairs.len());
        let examples = (0..n)
            .map(|k| {
                let p = &pairs[k * pairs.len() / n];
                let (r, c) = random_crop(p, cfg.crop, &mut rng);
                let (inputs, hr) = p.crop_inputs(extractor, r, c, cfg.crop, Transform::IDENTITY, Transform::IDENTITY)?;
                let hr_features = Arc::new(perceptual_features(extractor, &hr));
                Ok(Example {
                    inputs,
                    hr: Arc::new(hr),
                    hr_features,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ValidationSet { examples })
    }

    /// Mean reconstruction loss and mean Y-PSNR (clamped output).
    pub fn evaluate(&self, model: &TransferModel, dcn: bool) -> Result<(f64, f64)> {
        if self.examples.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let (mut rec, mut psnr) = (0.0, 0.0);
        for ex in &self.examples {
            let mut g = Graph::new();
            let b = model.params().bind_frozen(&mut g);
            let out = model.forward(&mut g, &b, &ex.inputs, dcn)?;
            let l = g.l1_to(out, ex.hr.clone());
            rec += g.scalar(l);
            let sr = g.value(out).to_image()?.clamp01();
            psnr += psnr_y(&sr, &ex.hr.to_image()?)?;
        }
        let n = self.examples.len() as f64;
        Ok((rec / n, psnr / n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub terms: LossTerms,
    pub psnr: f64,
}

pub fn write_log_csv(log: &[EpochLog], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,rec,per,adv,total,psnr")?;
    for e in log {
        let t = e.terms;
        writeln!(out, "{},{:.8},{:.8},{:.8},{:.8},{:.6}", e.epoch, t.rec, t.per, t.adv, t.total, e.psnr)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: TransferModel,
    pub disc: Discriminator,
    pub denoiser: Option<LearnedTinyDenoiser>,
    pub log: Vec<EpochLog>,
    /// Validation reconstruction loss before training and after each epoch.
    pub val_rec: Vec<f64>,
}

/// Parameters and configuration echo for a trained model.
pub fn make_checkpoint(
    cfg: &TrainConfig,
    model: &TransferModel,
    disc: &Discriminator,
    denoiser: Option<&LearnedTinyDenoiser>,
    extractor: &FeatureExtractor,
) -> Checkpoint {
    let mut params = model.params().clone();
    for (n, t) in disc.params.iter().chain(denoiser.into_iter().flat_map(|d| d.params.iter())) {
        params.insert(n, t.clone());
    }
    let mut config = cfg.to_config();
    config.set("extractor_id", extractor.id());
    Checkpoint { params, config }
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        make_checkpoint(cfg, &self.model, &self.disc, self.denoiser.as_ref(), &FeatureExtractor::new(cfg.extractor_seed))
    }
}

static AUDIT: OnceLock<std::result::Result<(), String>> = OnceLock::new();

/// Run the transfer gradient audit once per process; training refuses to
/// start if any parameter fails it.
pub fn ensure_gradients_verified() -> Result<()> {
    AUDIT
        .get_or_init(|| {
            let report = gradient_audit(0x6AD, 3).map_err(|e| e.to_string())?;
            match report.iter().find(|(_, err)| !(*err <= 1e-3)) {
                Some((name, err)) => Err(format!("{name}: relative error {err:.3e}")),
                None => Ok(()),
            }
        })
        .clone()
        .map_err(Error::GradientCheck)
}

/// Train on prepared pairs. `on_epoch` sees the model after every completed
/// epoch (e.g. to write the last good checkpoint).
pub fn train(
    pairs: &[PreparedPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &TransferModel, &Discriminator, Option<&LearnedTinyDenoiser>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_gradients_verified()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one pair".into()));
    }
    let extractor = FeatureExtractor::new(cfg.extractor_seed);
    for p in pairs {
        if p.ref_pyramid.extractor_id != extractor.id() {
            return Err(Error::InvalidArgument(format!("pair {} was prepared with another extractor", p.id)));
        }
    }
    let mut model = TransferModel::new(cfg.model.clone(), cfg.seed);
    let mut disc = Discriminator::new(cfg.seed ^ 0xD15C);
    let mut denoiser = cfg.train_denoiser.then(|| LearnedTinyDenoiser::new(cfg.denoiser_width, cfg.seed ^ 0xDE05));
    let mut adam = AdamState::new(model.params(), cfg.adam);
    let mut disc_adam = AdamState::new(&disc.params, cfg.adam);
    let mut den_adam = denoiser.as_ref().map(|d| AdamState::new(&d.params, cfg.adam));
    let schedule = NoiseSchedule::standard();
    let validation = ValidationSet::new(pairs, cfg, &extractor)?;
    let mut val_rec = vec![validation.evaluate(&model, cfg.dcn)?.0];
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len() * cfg.crops_per_pair).map(|i| i % pairs.len()).collect();
        let mut shuffle = Rng::keyed(cfg.seed, &[epoch as u64, u64::MAX - 1]);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.below(i + 1));
        }
        let mut epoch_terms = LossTerms::default();
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let k = 1.0 / batch.len() as f64;
            let mut grads: Option<Vec<Tensor>> = None;
            let mut den_grads: Option<Vec<Tensor>> = None;
            let mut fakes = Vec::new();
            let mut batch_terms = LossTerms::default();
            for (ei, &pi) in batch.iter().enumerate() {
                let p = &pairs[pi];
                let mut rng = Rng::keyed(cfg.seed, &[epoch as u64, bi as u64, ei as u64]);
                let (tq, tr) = if cfg.augment {
                    (Transform::draw(&mut rng), Transform::draw(&mut rng))
                } else {
                    (Transform::IDENTITY, Transform::IDENTITY)
                };
                let (r, c) = random_crop(p, cfg.crop, &mut rng);
                let (inputs, hr) = p.crop_inputs(&extractor, r, c, cfg.crop, tq, tr)?;
                let hr = Arc::new(hr);
                let hr_features = Arc::new(perceptual_features(&extractor, &hr));
                let mut g = Graph::new();
                let b = model.params().bind(&mut g);
                let sr = model.forward(&mut g, &b, &inputs, cfg.dcn)?;
                let nodes = composite_loss_nodes(&mut g, sr, &hr, &hr_features, &extractor, &disc, &cfg.loss, epoch);
                let terms = nodes.terms(&g);
                if !terms.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi });
                }
                batch_terms.accumulate(&terms, k);
                let mut gr = g.backward(nodes.total);
                let sample = model.params().collect_grads(&b, &mut gr);
                accumulate(&mut grads, sample, k);
                if cfg.loss.adv_enabled && epoch >= cfg.loss.warmup_epochs {
                    fakes.push((hr.clone(), g.value(sr).clone()));
                }
                if let Some(d) = &denoiser {
                    let x0 = p.hr.crop(r, c, cfg.crop, cfg.crop)?;
                    let (_, dg) = d.loss_and_grads(&x0, &schedule, &mut rng)?;
                    accumulate(&mut den_grads, dg, k);
                }
            }
            adam.step(model.params_mut(), &grads.expect("non-empty batch"))?;
            if !fakes.is_empty() {
                let mut dgrads = None;
                let kk = 1.0 / fakes.len() as f64;
                for (real, fake) in &fakes {
                    let mut g = Graph::new();
                    let b = disc.params.bind(&mut g);
                    let l = disc.loss(&mut g, &b, real, fake);
                    let mut gr = g.backward(l);
                    accumulate(&mut dgrads, disc.params.collect_grads(&b, &mut gr), kk);
                }
                disc_adam.step(&mut disc.params, &dgrads.expect("non-empty"))?;
            }
            if let (Some(d), Some(st), Some(dg)) = (denoiser.as_mut(), den_adam.as_mut(), den_grads) {
                st.step(&mut d.params, &dg)?;
            }
            epoch_terms.accumulate(&batch_terms, 1.0 / batches.len() as f64);
        }
        let (rec, psnr) = validation.evaluate(&model, cfg.dcn)?;
        val_rec.push(rec);
        let entry = EpochLog {
            epoch,
            terms: epoch_terms,
            psnr,
        };
        on_epoch(&entry, &model, &disc, denoiser.as_ref())?;
        log.push(entry);
    }
    Ok(TrainOutcome {
        model,
        disc,
        denoiser,
        log,
        val_rec,
    })
}

fn accumulate(acc: &mut Option<Vec<Tensor>>, sample: Vec<Tensor>, k: f64) {
    match acc {
        None => *acc = Some(sample.into_iter().map(|t| t.scale(k)).collect()),
        Some(a) => {
            for (x, s) in a.iter_mut().zip(sample) {
                x.add_assign(&s.scale(k));
            }
        }
    }
}
