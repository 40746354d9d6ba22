//! End-to-end composition (enhance, extract, match, transfer, aggregate),
//! corpus evaluation and the four-way ablation.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::config::Config;
use crate::correspond::{match_features, FeatureExtractor, DEFAULT_EXTRACTOR_SEED};
use crate::diffusion::{Denoiser, GaussianPriorDenoiser, NoiseSchedule, OracleDenoiser, PriorMean, SamplerConfig, ZeroDenoiser};
use crate::error::{Error, Result};
use crate::image::{bicubic_resize, Image};
use crate::linop::OperatorKind;
use crate::metrics::{psnr_y, ssim_y, MetricReport};
use crate::tiling::sample_tiled;
use crate::training::checkpoint::Checkpoint;
use crate::training::corpus::{make_corpus, CorpusSpec, Triplet, CORPUS_KEYS};
use crate::training::denoiser_net::{LearnedTinyDenoiser, DENOISER_PREFIX};
use crate::training::trainer::{prepare_pair, train, PreparedPair, TrainConfig, TRAIN_KEYS};
use crate::transfer::{ModelConfig, TransferInputs, TransferModel};

pub const SCALE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserChoice {
    Zero,
    /// Gaussian prior centred on the bicubic upsample of the input.
    Gaussian,
    Learned,
    /// Ground-truth target; only meaningful when the HR image is known.
    Oracle,
}

impl FromStr for DenoiserChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(DenoiserChoice::Zero),
            "gaussian" => Ok(DenoiserChoice::Gaussian),
            "learned" => Ok(DenoiserChoice::Learned),
            "oracle" => Ok(DenoiserChoice::Oracle),
            other => Err(Error::InvalidArgument(format!(
                "unknown denoiser `{other}` (zero, gaussian, learned, oracle)"
            ))),
        }
    }
}

impl std::fmt::Display for DenoiserChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DenoiserChoice::Zero => "zero",
            DenoiserChoice::Gaussian => "gaussian",
            DenoiserChoice::Learned => "learned",
            DenoiserChoice::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub denoiser: DenoiserChoice,
    pub prior_variance: f64,
    pub steps: usize,
    pub tile: usize,
    pub seed: u64,
    pub def_enabled: bool,
    pub dcn_enabled: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            denoiser: DenoiserChoice::Gaussian,
            prior_variance: 1e-6,
            steps: 50,
            tile: 64,
            seed: 0,
            def_enabled: true,
            dcn_enabled: true,
        }
    }
}

pub const PIPELINE_KEYS: &[&str] = &["denoiser", "prior_variance", "steps", "tile", "sample_seed"];

impl PipelineConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let d = PipelineConfig::default();
        Ok(PipelineConfig {
            denoiser: c.get("denoiser", d.denoiser.to_string())?.parse()?,
            prior_variance: c.get("prior_variance", d.prior_variance)?,
            steps: c.get("steps", d.steps)?,
            tile: c.get("tile", d.tile)?,
            seed: c.get("sample_seed", d.seed)?,
            ..d
        })
    }

    fn sampler(&self) -> Result<SamplerConfig> {
        SamplerConfig::new(NoiseSchedule::standard(), self.steps, self.seed)
    }
}

/// Trained (or fresh) parameters plus the frozen extractor they expect.
pub struct Model {
    pub transfer: TransferModel,
    pub extractor: FeatureExtractor,
    pub denoiser: Option<LearnedTinyDenoiser>,
}

impl Model {
    /// Zero-residual model: the output equals `I_DE`.
    pub fn untrained() -> Self {
        Model {
            transfer: TransferModel::new(ModelConfig::default(), 0),
            extractor: FeatureExtractor::new(DEFAULT_EXTRACTOR_SEED),
            denoiser: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut cfg = ck.config.clone();
        let stored_id = cfg.raw("extractor_id").map(str::to_string);
        cfg.entries_without(&["extractor_id"]);
        let tc = TrainConfig::from_config(&cfg)?;
        let extractor = FeatureExtractor::new(tc.extractor_seed);
        if let Some(id) = stored_id {
            if id != extractor.id() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint expects extractor {id}, seed {} gives {}",
                    tc.extractor_seed,
                    extractor.id()
                )));
            }
        }
        let transfer = TransferModel::from_params(tc.model.clone(), &ck.params)?;
        let den = ck.with_prefix(DENOISER_PREFIX);
        let denoiser = if den.is_empty() {
            None
        } else {
            Some(LearnedTinyDenoiser::from_params(&den)?)
        };
        Ok(Model {
            transfer,
            extractor,
            denoiser,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// The detail-enhanced input `I_DE` (unclamped) at `SCALE×` the input size.
/// With DEF disabled this is exactly the bicubic upsample.
pub fn enhance(lr: &Image, cfg: &PipelineConfig, learned: Option<&LearnedTinyDenoiser>, oracle: Option<&Image>) -> Result<Image> {
    let lr = lr.to_rgb();
    let (h, w) = (lr.height() * SCALE, lr.width() * SCALE);
    let bicubic = bicubic_resize(&lr, h, w)?;
    if !cfg.def_enabled {
        return Ok(bicubic);
    }
    let denoiser: Box<dyn Denoiser + '_> = match cfg.denoiser {
        DenoiserChoice::Zero => Box::new(ZeroDenoiser),
        DenoiserChoice::Gaussian => Box::new(GaussianPriorDenoiser::new(PriorMean::Image(bicubic), cfg.prior_variance)?),
        DenoiserChoice::Learned => crate::diffusion::borrowed(learned.ok_or_else(|| {
            Error::InvalidArgument("the learned denoiser needs a checkpoint that contains one".into())
        })?),
        DenoiserChoice::Oracle => {
            let target = oracle.ok_or_else(|| Error::InvalidArgument("the oracle denoiser needs the HR image".into()))?;
            if (target.height(), target.width()) != (h, w) {
                return Err(Error::shape("oracle target", format!("{h}x{w}"), format!("{}x{}", target.height(), target.width())));
            }
            Box::new(OracleDenoiser::new(target.to_rgb()))
        }
    };
    // the window must fit the image; shrink it to a multiple of 2·SCALE
    let tile = cfg.tile.min(h).min(w) / (2 * SCALE) * (2 * SCALE);
    if tile == 0 {
        return Err(Error::ImageDimensions(format!("{h}x{w} is too small to tile")));
    }
    sample_tiled(&lr, OperatorKind::BicubicDown, SCALE, tile, denoiser.as_ref(), &cfg.sampler()?)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub i_de: Image,
    pub sr: Image,
}

/// Full super-resolution of `lr` guided by `reference`.
pub fn run_pipeline(lr: &Image, reference: &Image, cfg: &PipelineConfig, model: &Model, oracle: Option<&Image>) -> Result<PipelineOutput> {
    let i_de = enhance(lr, cfg, model.denoiser.as_ref(), oracle)?;
    let sr = transfer_stage(&i_de, reference, cfg.dcn_enabled, model)?;
    Ok(PipelineOutput { i_de, sr })
}

/// Extract, match, transfer and aggregate for a given `I_DE`.
pub fn transfer_stage(i_de: &Image, reference: &Image, dcn: bool, model: &Model) -> Result<Image> {
    let f_de = model.extractor.extract(i_de)?;
    let f_ref = Arc::new(model.extractor.extract(&reference.to_rgb())?);
    let coarse = match_features(f_de.coarsest(), f_ref.coarsest())?;
    let inputs = TransferInputs::new(i_de, &f_de, &f_ref, &coarse)?;
    model.transfer.infer(&inputs, dcn)
}

/// Metrics of the pipeline output against each triplet's HR image. With
/// the oracle denoiser, the HR image also drives enhancement.
pub fn evaluate(triplets: &[Triplet], cfg: &PipelineConfig, model: &Model) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for t in triplets {
        let oracle = (cfg.denoiser == DenoiserChoice::Oracle).then_some(&t.hr);
        let out = run_pipeline(&t.lr, &t.reference, cfg, model, oracle)?;
        report.push(&t.id, &out.sr, &t.hr.to_rgb())?;
    }
    Ok(report)
}

pub const VARIANTS: [(&str, bool, bool); 4] = [
    ("Base", false, false),
    ("Base+DEF", true, false),
    ("Base+DCN", false, true),
    ("Base+DCN+DEF", true, true),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        // desk budget: five epochs of batch-3 steps over one crop per pair
        let mut train = TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        };
        train.loss.adv_enabled = false;
        AblationConfig {
            corpus: CorpusSpec::default(),
            train,
            pipeline: PipelineConfig::default(),
            seeds: (0..5).collect(),
        }
    }
}

impl AblationConfig {
    /// Corpus, training and pipeline keys plus `seeds`. The adversarial
    /// term is off unless the file turns it on.
    pub fn from_config(c: &Config) -> Result<Self> {
        let known: Vec<&str> = CORPUS_KEYS.iter().chain(TRAIN_KEYS).chain(PIPELINE_KEYS).chain(&["seeds"]).copied().collect();
        c.check_known(&known)?;
        let mut tc = c.clone();
        if tc.raw("adv_enabled").is_none() {
            tc.set("adv_enabled", false);
        }
        let cfg = AblationConfig {
            corpus: CorpusSpec::from_config(c)?,
            train: TrainConfig::from_config(&tc)?,
            pipeline: PipelineConfig::from_config(c)?,
            seeds: c.get_list("seeds", (0..5).collect())?,
        };
        if cfg.seeds.is_empty() {
            return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
        }
        if matches!(cfg.pipeline.denoiser, DenoiserChoice::Learned | DenoiserChoice::Oracle) {
            return Err(Error::InvalidArgument("the ablation enhances with the zero or gaussian denoiser".into()));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    /// Mean corpus PSNR / SSIM per seed.
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl AblationRow {
    pub fn mean_psnr(&self) -> f64 {
        self.psnr.iter().sum::<f64>() / self.psnr.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.ssim.iter().sum::<f64>() / self.ssim.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// In [`VARIANTS`] order.
    pub rows: Vec<AblationRow>,
}

/// Slack allowed for a single addition against the baseline.
pub const SINGLE_ADDITION_SLACK_DB: f64 = 0.05;

impl AblationReport {
    fn psnr(&self, variant: usize, seed: usize) -> f64 {
        self.rows[variant].psnr[seed]
    }

    /// Whether seed index `s` shows the expected ordering: the full model
    /// beats each single addition, and each single addition stays within
    /// the slack of the baseline.
    pub fn trend_holds(&self, s: usize) -> bool {
        let (base, def, dcn, both) = (self.psnr(0, s), self.psnr(1, s), self.psnr(2, s), self.psnr(3, s));
        both >= def && both >= dcn && def >= base - SINGLE_ADDITION_SLACK_DB && dcn >= base - SINGLE_ADDITION_SLACK_DB
    }

    pub fn seeds_with_trend(&self) -> usize {
        (0..self.seeds.len()).filter(|&s| self.trend_holds(s)).count()
    }

    /// `config,psnr,ssim` means followed by per-seed PSNR columns.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        write!(out, "config,psnr,ssim")?;
        for s in &self.seeds {
            write!(out, ",psnr_seed{s}")?;
        }
        writeln!(out)?;
        for r in &self.rows {
            write!(out, "{},{:.6},{:.6}", r.name, r.mean_psnr(), r.mean_ssim())?;
            for p in &r.psnr {
                write!(out, ",{p:.6}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Mean PSNR / SSIM of the trained model over prepared pairs.
pub fn corpus_scores(pairs: &[PreparedPair], model: &TransferModel, extractor: &FeatureExtractor, dcn: bool) -> Result<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for pair in pairs {
        let sr = model.infer(&pair.full_inputs(extractor)?, dcn)?;
        p += psnr_y(&sr, &pair.hr)?;
        s += ssim_y(&sr, &pair.hr)?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, s / n))
}

/// Train and score the four configurations for every seed. The corpus
/// seed is offset by the run seed, so each run sees its own corpus;
/// training and evaluation are in-sample.
pub fn run_ablation(cfg: &AblationConfig, mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    let extractor = FeatureExtractor::new(cfg.train.extractor_seed);
    let mut rows: Vec<AblationRow> = VARIANTS
        .iter()
        .map(|(name, _, _)| AblationRow {
            name,
            psnr: Vec::new(),
            ssim: Vec::new(),
        })
        .collect();
    for &seed in &cfg.seeds {
        let spec = CorpusSpec {
            seed: cfg.corpus.seed.wrapping_add(seed),
            ..cfg.corpus.clone()
        };
        let corpus = make_corpus(&spec)?;
        for def in [false, true] {
            let pcfg = PipelineConfig {
                def_enabled: def,
                seed: cfg.pipeline.seed.wrapping_add(seed),
                ..cfg.pipeline.clone()
            };
            let pairs = corpus
                .iter()
                .map(|p| {
                    let i_de = enhance(&p.lr, &pcfg, None, None)?;
                    prepare_pair(&p.id, i_de, p.reference.clone(), p.hr.clone(), &extractor)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut floor = 0.0;
            for pair in &pairs {
                floor += psnr_y(&pair.i_de, &pair.hr)?;
            }
            progress(&format!("seed {seed} def={def}: I_de psnr {:.4}", floor / pairs.len() as f64));
            for (v, (name, vdef, dcn)) in VARIANTS.iter().enumerate() {
                if *vdef != def {
                    continue;
                }
                let tcfg = TrainConfig {
                    seed,
                    dcn: *dcn,
                    ..cfg.train.clone()
                };
                let out = train(&pairs, &tcfg, |_, _, _, _| Ok(()))?;
                let (p, s) = corpus_scores(&pairs, &out.model, &extractor, *dcn)?;
                progress(&format!("seed {seed} {name}: psnr {p:.4} ssim {s:.4}"));
                rows[v].psnr.push(p);
                rows[v].ssim.push(s);
            }
        }
    }
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        rows,
    })
}
