//! PSNR and SSIM on the luminance channel.

use std::io::Write;

use crate::error::{Error, Result};
use crate::image::{to_y_channel, Image};

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn luma(img: &Image) -> Result<Image> {
    if img.channels() == 1 {
        Ok(img.clone())
    } else {
        to_y_channel(img)
    }
}

fn y_pair(a: &Image, b: &Image) -> Result<(Image, Image)> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            "metric inputs",
            format!("{}x{}", a.height(), a.width()),
            format!("{}x{}", b.height(), b.width()),
        ));
    }
    Ok((luma(a)?, luma(b)?))
}

/// `10 log10(1 / MSE)` over Y in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr_y(a: &Image, b: &Image) -> Result<f64> {
    let (ya, yb) = y_pair(a, b)?;
    let n = ya.data().len() as f64;
    let mse = ya.data().iter().zip(yb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Gaussian-weighted filter over valid window positions (separable).
fn filter_valid(x: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..k).map(|i| win[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..k).map(|i| win[i] * rows[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Single-scale SSIM on Y: 11×11 Gaussian window (σ 1.5), K1 0.01,
/// K2 0.03, dynamic range 1, averaged over valid window positions.
pub fn ssim_y(a: &Image, b: &Image) -> Result<f64> {
    let (ya, yb) = y_pair(a, b)?;
    let (h, w) = (ya.height(), ya.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageDimensions(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let (x, y) = (ya.data(), yb.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let mu_x = filter_valid(x, h, w, &win);
    let mu_y = filter_valid(y, h, w, &win);
    let xx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &win);
    let yy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &win);
    let xy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &win);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<ImageScore>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, sr: &Image, hr: &Image) -> Result<()> {
        let row = ImageScore {
            id: id.into(),
            psnr_db: psnr_y(sr, hr)?,
            ssim: ssim_y(sr, hr)?,
        };
        self.rows.push(row);
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.rows.len()
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// `id,psnr,ssim` rows followed by a `mean` summary row.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "id,psnr,ssim")?;
        for r in &self.rows {
            writeln!(out, "{},{:.6},{:.6}", r.id, r.psnr_db, r.ssim)?;
        }
        writeln!(out, "mean,{:.6},{:.6}", self.mean_psnr(), self.mean_ssim())?;
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    #[test]
    fn psnr_examples() {
        let mut rng = Rng::new(1);
        let a = rng.uniform_image(16, 16, 3).map(|v| 0.8 * v);
        assert_eq!(psnr_y(&a, &a).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr_y(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr_y(&a, &Image::zeros(8, 16, 3)).is_err());
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let mut rng = Rng::new(2);
        let a = rng.uniform_image(9, 13, 3);
        let b = rng.uniform_image(9, 13, 3);
        let mut se = 0.0;
        for r in 0..9 {
            for c in 0..13 {
                let ya = 0.299 * a.get(r, c, 0) + 0.587 * a.get(r, c, 1) + 0.114 * a.get(r, c, 2);
                let yb = 0.299 * b.get(r, c, 0) + 0.587 * b.get(r, c, 1) + 0.114 * b.get(r, c, 2);
                se += (ya - yb).powi(2);
            }
        }
        let direct = -10.0 * (se / 117.0).log10();
        assert!((psnr_y(&a, &b).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let mut rng = Rng::new(3);
        let a = rng.uniform_image(20, 24, 3);
        assert!((ssim_y(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let half = Image::filled(16, 16, 1, 0.5);
        assert!((ssim_y(&half, &half).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim_y(&Image::zeros(10, 20, 1), &Image::zeros(10, 20, 1)).is_err());
    }

    #[test]
    fn ssim_constant_vs_noise_is_low() {
        let mut rng = Rng::new(4);
        let flat = Image::filled(64, 64, 1, 0.5);
        let noise = rng.uniform_image(64, 64, 1).map(|v| 0.25 + 0.5 * v);
        let s = ssim_y(&flat, &noise).unwrap();
        assert!(s < 0.1, "{s}");
    }

    #[test]
    fn ssim_matches_single_window_by_hand() {
        // an 11×11 image has exactly one window: evaluate it directly
        let mut rng = Rng::new(5);
        let a = rng.uniform_image(11, 11, 1);
        let b = rng.uniform_image(11, 11, 1);
        let g = gaussian_window();
        let wt = |r: usize, c: usize| g[r] * g[c];
        let (mut mx, mut my) = (0.0, 0.0);
        for r in 0..11 {
            for c in 0..11 {
                mx += wt(r, c) * a.get(r, c, 0);
                my += wt(r, c) * b.get(r, c, 0);
            }
        }
        let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
        for r in 0..11 {
            for c in 0..11 {
                let (dx, dy) = (a.get(r, c, 0) - mx, b.get(r, c, 0) - my);
                vx += wt(r, c) * dx * dx;
                vy += wt(r, c) * dy * dy;
                cov += wt(r, c) * dx * dy;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let expect = (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        assert!((ssim_y(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn report_csv() {
        let a = Image::filled(12, 12, 3, 0.2);
        let mut r = MetricReport::default();
        r.push("x", &a, &a).unwrap();
        r.push("y", &a, &a.map(|v| v + 0.1)).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,psnr,ssim");
        assert!(lines[1].starts_with("x,99.000000,1.000000"));
        assert!(lines[3].starts_with("mean,59.5"));
        assert_eq!(r.n_images(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn symmetric(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = rng.uniform_image(12, 14, 3);
            let b = rng.uniform_image(12, 14, 3);
            prop_assert_eq!(psnr_y(&a, &b).unwrap(), psnr_y(&b, &a).unwrap());
            prop_assert!((ssim_y(&a, &b).unwrap() - ssim_y(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!(ssim_y(&a, &b).unwrap() <= 1.0);
        }

        #[test]
        fn psnr_ignores_shared_pixel_permutation(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = rng.uniform_image(1, 40, 1);
            let b = rng.uniform_image(1, 40, 1);
            let perm: Vec<usize> = {
                let mut p: Vec<usize> = (0..40).collect();
                for i in (1..40).rev() {
                    p.swap(i, rng.below(i + 1));
                }
                p
            };
            let pa = Image::from_fn(1, 40, 1, |_, c, _| a.get(0, perm[c], 0));
            let pb = Image::from_fn(1, 40, 1, |_, c, _| b.get(0, perm[c], 0));
            prop_assert!((psnr_y(&a, &b).unwrap() - psnr_y(&pa, &pb).unwrap()).abs() < 1e-9);
        }
    }
}
