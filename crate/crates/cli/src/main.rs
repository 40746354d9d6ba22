use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use defsr::config::Config;
use defsr::correspond::FeatureExtractor;
use defsr::pipeline::{
    enhance, evaluate, run_ablation, run_pipeline, AblationConfig, DenoiserChoice, Model, PipelineConfig, PIPELINE_KEYS,
};
use defsr::training::corpus::{read_triplets, write_corpus, CORPUS_KEYS};
use defsr::training::trainer::{make_checkpoint, write_log_csv, TRAIN_KEYS};
use defsr::training::{make_corpus, prepare_pair, train, CorpusSpec, TrainConfig};
use defsr::{load_image, save_image};

#[derive(Parser)]
#[command(name = "defsr", version, about = "Reference-based ×4 super-resolution with diffusion detail enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run only the detail-enhancement stage (×4).
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        /// Checkpoint holding a learned denoiser (for `--denoiser learned`).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Full pipeline: enhance, match against the reference, transfer, aggregate.
    Srun {
        #[arg(long)]
        lr: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        toggles: Toggles,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// PSNR/SSIM (Y channel) over a directory of `<id>_lr/_ref/_hr.png` triplets.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        toggles: Toggles,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Train the transfer and aggregation networks on a generated corpus.
    Train {
        /// Config with corpus, training and sampling keys.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch log; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Train on bicubic inputs instead of enhanced ones.
        #[arg(long)]
        no_def: bool,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and score Base, Base+DEF, Base+DCN and Base+DCN+DEF.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write a synthetic corpus of LR/reference/HR triplets.
    GenCorpus {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Sampling {
    /// zero, gaussian, learned or oracle (oracle needs HR and only works in eval).
    #[arg(long)]
    denoiser: Option<DenoiserChoice>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tile: Option<usize>,
}

#[derive(Args)]
struct Toggles {
    /// Bicubic upsampling instead of diffusion enhancement.
    #[arg(long)]
    no_def: bool,
    /// Plain 3×3 convolution transfer instead of the deformable one.
    #[arg(long)]
    no_dcn: bool,
}

impl Sampling {
    fn pipeline(&self, toggles: Option<&Toggles>) -> PipelineConfig {
        let d = PipelineConfig::default();
        PipelineConfig {
            denoiser: self.denoiser.unwrap_or(d.denoiser),
            steps: self.steps.unwrap_or(d.steps),
            seed: self.seed.unwrap_or(d.seed),
            tile: self.tile.unwrap_or(d.tile),
            def_enabled: toggles.is_none_or(|t| !t.no_def),
            dcn_enabled: toggles.is_none_or(|t| !t.no_dcn),
            ..d
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_config(path: &Path, known: &[&[&str]]) -> Result<Config> {
    let cfg = Config::load(path).with_context(|| format!("reading config {}", path.display()))?;
    let keys: Vec<&str> = known.iter().flat_map(|k| k.iter().copied()).collect();
    cfg.check_known(&keys).with_context(|| format!("in {}", path.display()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Enhance {
            input,
            out,
            sampling,
            ckpt,
        } => {
            let cfg = sampling.pipeline(None);
            if cfg.denoiser == DenoiserChoice::Oracle {
                bail!("the oracle denoiser needs ground truth; use it through `eval`");
            }
            let model = ckpt.map(Model::load).transpose()?;
            let lr = load_image(&input)?;
            let de = enhance(&lr, &cfg, model.as_ref().and_then(|m| m.denoiser.as_ref()), None)?;
            save_image(&de.clamp01(), &out)?;
        }
        Command::Srun {
            lr,
            reference,
            ckpt,
            out,
            toggles,
            sampling,
        } => {
            let cfg = sampling.pipeline(Some(&toggles));
            if cfg.denoiser == DenoiserChoice::Oracle {
                bail!("the oracle denoiser needs ground truth; use it through `eval`");
            }
            let model = Model::load(&ckpt)?;
            let result = run_pipeline(&load_image(&lr)?, &load_image(&reference)?, &cfg, &model, None)?;
            save_image(&result.sr.clamp01(), &out)?;
        }
        Command::Eval {
            pairs,
            ckpt,
            report,
            toggles,
            sampling,
        } => {
            let cfg = sampling.pipeline(Some(&toggles));
            let model = Model::load(&ckpt)?;
            let triplets = read_triplets(&pairs)?;
            let scores = evaluate(&triplets, &cfg, &model)?;
            scores.write_csv(create(&report)?)?;
            eprintln!(
                "{} images: psnr {:.4} dB, ssim {:.4}",
                scores.n_images(),
                scores.mean_psnr(),
                scores.mean_ssim()
            );
        }
        Command::Train {
            corpus,
            out,
            log,
            no_def,
            seed,
        } => {
            let c = load_config(&corpus, &[CORPUS_KEYS, TRAIN_KEYS, PIPELINE_KEYS])?;
            let spec = CorpusSpec::from_config(&c)?;
            let mut tcfg = TrainConfig::from_config(&c)?;
            if let Some(s) = seed {
                tcfg.seed = s;
            }
            let pcfg = PipelineConfig {
                def_enabled: !no_def,
                ..PipelineConfig::from_config(&c)?
            };
            if matches!(pcfg.denoiser, DenoiserChoice::Learned | DenoiserChoice::Oracle) {
                bail!("training inputs are enhanced with the zero or gaussian denoiser");
            }
            let extractor = FeatureExtractor::new(tcfg.extractor_seed);
            eprintln!("preparing {} pairs", spec.pairs);
            let pairs = make_corpus(&spec)?
                .into_iter()
                .map(|p| {
                    let i_de = enhance(&p.lr, &pcfg, None, None)?;
                    prepare_pair(&p.id, i_de, p.reference, p.hr, &extractor)
                })
                .collect::<defsr::Result<Vec<_>>>()?;
            let outcome = train(&pairs, &tcfg, |entry, model, disc, den| {
                eprintln!(
                    "epoch {}: total {:.6} rec {:.6} psnr {:.4}",
                    entry.epoch, entry.terms.total, entry.terms.rec, entry.psnr
                );
                // keep the last completed epoch on disk
                make_checkpoint(&tcfg, model, disc, den, &extractor).save(&out)
            })?;
            outcome.checkpoint(&tcfg).save(&out)?;
            let log = log.unwrap_or_else(|| {
                let mut name = out.clone().into_os_string();
                name.push(".log.csv");
                name.into()
            });
            write_log_csv(&outcome.log, create(&log)?)?;
        }
        Command::Ablate { corpus, report } => {
            let c = Config::load(&corpus).with_context(|| format!("reading config {}", corpus.display()))?;
            let cfg = AblationConfig::from_config(&c)?;
            let result = run_ablation(&cfg, |line| eprintln!("{line}"))?;
            result.write_csv(create(&report)?)?;
            eprintln!(
                "trend holds in {} of {} seeds",
                result.seeds_with_trend(),
                result.seeds.len()
            );
        }
        Command::GenCorpus { spec, out } => {
            // the same file usually drives training too
            let c = load_config(&spec, &[CORPUS_KEYS, TRAIN_KEYS, PIPELINE_KEYS, &["seeds"]])?;
            let pairs = make_corpus(&CorpusSpec::from_config(&c)?)?;
            write_corpus(&pairs, &out)?;
            eprintln!("wrote {} triplets to {}", pairs.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
