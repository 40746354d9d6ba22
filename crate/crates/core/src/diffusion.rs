//! Null-space guided DDPM sampling.
//!
//! At each reverse step the denoiser proposes a clean estimate `x_{0|t}`;
//! its range-space component is replaced by the observation,
//! `x̂_{0|t} = A†y + (I − A†A) x_{0|t}`, and the next state is drawn from the
//! DDPM posterior `q(x_{t−1} | x_t, x̂_{0|t})`. The last step returns the
//! rectified estimate itself, so every sample satisfies `A x̂ = y`.

use crate::error::{Error, Result};
use crate::image::{fmt_dims, reflect_index, Image};
use crate::linop::LinearOperator;
use crate::rng::Rng;

/// `beta_1` of the linear schedule used throughout (`1 − α` at the first step).
pub const DEFAULT_BETA_START: f64 = 1e-6;
/// `beta_T` of the linear schedule.
pub const DEFAULT_BETA_END: f64 = 1e-2;
pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;

/// Linear beta schedule over steps `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_1 <= beta_T < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            (0..timesteps)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                })
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// The 1000-step linear schedule from `1e-6` to `1e-2`.
    pub fn standard() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("constants are valid")
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            Err(Error::IndexOutOfRange {
                index: t,
                limit: self.timesteps(),
            })
        } else {
            Ok(())
        }
    }

    /// `beta[t]`, `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ[t]`, with `ᾱ[0] = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Descending step sequence of `count` roughly evenly spaced indices that
    /// always contains `T` and `1`.
    pub fn strided_steps(&self, count: usize) -> Vec<usize> {
        let t_max = self.timesteps();
        if t_max == 1 {
            return vec![1];
        }
        let count = count.clamp(2, t_max);
        let mut steps: Vec<usize> = (0..count)
            .map(|i| 1 + ((t_max - 1) as f64 * i as f64 / (count - 1) as f64).round() as usize)
            .collect();
        steps.dedup();
        steps.reverse();
        steps
    }
}

/// `√ᾱ[t]·x0 + √(1−ᾱ[t])·noise`.
pub fn forward_diffuse(x0: &Image, t: usize, noise: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    schedule.check(t)?;
    x0.check_same_shape(noise, "forward_diffuse")?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(noise, |x, n| a * x + b * n))
}

/// Predicts the clean image `x_{0|t}` from a noisy state.
pub trait Denoiser: Send + Sync {
    fn estimate(&self, x_t: &Image, t: usize, schedule: &NoiseSchedule) -> Result<Image>;

    /// The denoiser restricted to a window of the full canvas. Window
    /// coordinates may extend past the canvas; image-valued state is then
    /// read with reflection. Position-independent denoisers return themselves.
    fn for_window(&self, row: usize, col: usize, h: usize, w: usize) -> Box<dyn Denoiser + '_>;

    fn name(&self) -> &str;
}

struct Borrowed<'a, D: Denoiser + ?Sized>(&'a D);

impl<D: Denoiser + ?Sized> Denoiser for Borrowed<'_, D> {
    fn estimate(&self, x_t: &Image, t: usize, schedule: &NoiseSchedule) -> Result<Image> {
        self.0.estimate(x_t, t, schedule)
    }

    fn for_window(&self, row: usize, col: usize, h: usize, w: usize) -> Box<dyn Denoiser + '_> {
        self.0.for_window(row, col, h, w)
    }

    fn name(&self) -> &str {
        self.0.name()
    }
}

/// Box a borrowed, position-independent denoiser.
pub fn borrowed<D: Denoiser + ?Sized>(d: &D) -> Box<dyn Denoiser + '_> {
    Box::new(Borrowed(d))
}

/// Window of `img` starting at `(row, col)`, reflecting past the far edges.
pub(crate) fn reflect_crop(img: &Image, row: usize, col: usize, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, img.channels(), |r, c, ch| {
        img.get(
            reflect_index((row + r) as isize, img.height()),
            reflect_index((col + c) as isize, img.width()),
            ch,
        )
    })
}

/// Always returns zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn estimate(&self, x_t: &Image, _t: usize, _schedule: &NoiseSchedule) -> Result<Image> {
        let (h, w, c) = x_t.dims();
        Ok(Image::zeros(h, w, c))
    }

    fn for_window(&self, _: usize, _: usize, _: usize, _: usize) -> Box<dyn Denoiser + '_> {
        borrowed(self)
    }

    fn name(&self) -> &str {
        "zero"
    }
}

/// Always returns a fixed target image (the ideal denoiser for that target).
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    target: Image,
}

impl OracleDenoiser {
    pub fn new(target: Image) -> Self {
        OracleDenoiser { target }
    }

    pub fn target(&self) -> &Image {
        &self.target
    }
}

impl Denoiser for OracleDenoiser {
    fn estimate(&self, x_t: &Image, _t: usize, _schedule: &NoiseSchedule) -> Result<Image> {
        x_t.check_same_shape(&self.target, "oracle denoiser")?;
        Ok(self.target.clone())
    }

    fn for_window(&self, row: usize, col: usize, h: usize, w: usize) -> Box<dyn Denoiser + '_> {
        Box::new(OracleDenoiser::new(reflect_crop(&self.target, row, col, h, w)))
    }

    fn name(&self) -> &str {
        "oracle"
    }
}

#[derive(Debug, Clone)]
pub enum PriorMean {
    Constant(f64),
    Image(Image),
}

/// Exact posterior mean under an isotropic Gaussian prior `x0 ~ N(μ, σ0² I)`:
/// `(√ᾱ σ0² x_t + (1 − ᾱ) μ) / (ᾱ σ0² + 1 − ᾱ)`.
#[derive(Debug, Clone)]
pub struct GaussianPriorDenoiser {
    mean: PriorMean,
    variance: f64,
}

impl GaussianPriorDenoiser {
    pub fn new(mean: PriorMean, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "prior variance must be positive, got {variance}"
            )));
        }
        Ok(GaussianPriorDenoiser { mean, variance })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn mean(&self) -> &PriorMean {
        &self.mean
    }
}

impl Denoiser for GaussianPriorDenoiser {
    fn estimate(&self, x_t: &Image, t: usize, schedule: &NoiseSchedule) -> Result<Image> {
        schedule.check(t)?;
        let ab = schedule.alpha_bar(t);
        let v = self.variance;
        let denom = ab * v + (1.0 - ab);
        let (kx, km) = (ab.sqrt() * v / denom, (1.0 - ab) / denom);
        Ok(match &self.mean {
            PriorMean::Constant(m) => x_t.map(|x| kx * x + km * m),
            PriorMean::Image(mu) => {
                x_t.check_same_shape(mu, "gaussian prior mean")?;
                x_t.zip_map(mu, |x, m| kx * x + km * m)
            }
        })
    }

    fn for_window(&self, row: usize, col: usize, h: usize, w: usize) -> Box<dyn Denoiser + '_> {
        match &self.mean {
            PriorMean::Constant(_) => borrowed(self),
            PriorMean::Image(mu) => Box::new(GaussianPriorDenoiser {
                mean: PriorMean::Image(reflect_crop(mu, row, col, h, w)),
                variance: self.variance,
            }),
        }
    }

    fn name(&self) -> &str {
        "gaussian"
    }
}

/// Result of one guided reverse step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `x_{t_prev}`; equals `rectified` when `t_prev = 0`.
    pub next: Image,
    /// `A†y + (I − A†A) x_{0|t}`.
    pub rectified: Image,
}

/// One reverse step from `t` to `t_prev < t` (`t_prev = 0` ends the chain).
///
/// For `t_prev = t − 1` the posterior coefficients are the textbook DDPM ones;
/// for strided chains the same formulas are used with the effective
/// `β = 1 − ᾱ[t]/ᾱ[t_prev]`.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step(
    x_t: &Image,
    t: usize,
    t_prev: usize,
    y: &Image,
    op: &LinearOperator,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<StepOutput> {
    schedule.check(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "reverse step must decrease t ({t} -> {t_prev})"
        )));
    }
    if y.channels() != x_t.channels() {
        return Err(Error::shape("guided step observation", fmt_dims(x_t.dims()), fmt_dims(y.dims())));
    }
    let x0 = denoiser.estimate(x_t, t, schedule)?;
    x0.check_same_shape(x_t, "denoiser output")?;
    let rectified = op.rectify(&x0, y)?;
    if t_prev == 0 {
        return Ok(StepOutput {
            next: rectified.clone(),
            rectified,
        });
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let alpha = ab_t / ab_prev;
    let beta = 1.0 - alpha;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt();
    let (h, w, c) = x_t.dims();
    let noise = rng.normal_image(h, w, c);
    let next = Image::from_vec(
        h,
        w,
        c,
        rectified
            .data()
            .iter()
            .zip(x_t.data())
            .zip(noise.data())
            .map(|((x0, xt), n)| c0 * x0 + ct * xt + sigma * n)
            .collect(),
    )?;
    Ok(StepOutput { next, rectified })
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub steps: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(schedule: NoiseSchedule, steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("steps_used must be at least 1".into()));
        }
        Ok(SamplerConfig {
            schedule,
            steps,
            seed,
        })
    }

    /// The standard 1000-step schedule, sampled with 50 strided steps.
    pub fn desk(seed: u64) -> Self {
        SamplerConfig {
            schedule: NoiseSchedule::standard(),
            steps: DEFAULT_SAMPLING_STEPS,
            seed,
        }
    }

    pub fn step_sequence(&self) -> Vec<usize> {
        self.schedule.strided_steps(self.steps)
    }
}

/// Output of a full guided sampling run.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `A†y + (I − A†A) x`, exactly consistent with `y` up to round-off.
    pub unclamped: Image,
}

impl Sample {
    /// The presentation image on `[0,1]` (clamping may break exact consistency).
    pub fn clamped(&self) -> Image {
        self.unclamped.clamp01()
    }
}

/// Run the guided reverse chain from pure noise, drawing from `Rng::new(cfg.seed)`.
pub fn sample(
    y: &Image,
    op: &LinearOperator,
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
) -> Result<Sample> {
    let mut rng = Rng::new(cfg.seed);
    sample_with_rng(y, op, denoiser, cfg, &mut rng, |_, _| {})
}

/// Like [`sample`] with an explicit generator and a per-step observer
/// receiving `(t, x_t)` before each step.
pub fn sample_with_rng(
    y: &Image,
    op: &LinearOperator,
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
    rng: &mut Rng,
    mut observe: impl FnMut(usize, &Image),
) -> Result<Sample> {
    let (oh, ow) = op.out_shape();
    if (y.height(), y.width()) != (oh, ow) {
        return Err(Error::shape(
            "sample observation",
            format!("{oh}x{ow}"),
            fmt_dims(y.dims()),
        ));
    }
    crate::instrument::count_sampler_run();
    let (h, w) = op.in_shape();
    let mut x = rng.normal_image(h, w, y.channels());
    let steps = cfg.step_sequence();
    for (i, &t) in steps.iter().enumerate() {
        observe(t, &x);
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        x = guided_reverse_step(&x, t, t_prev, y, op, denoiser, &cfg.schedule, rng)?.next;
    }
    Ok(Sample { unclamped: x })
}
