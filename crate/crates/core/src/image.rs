//! The pixel container shared by every stage, plus colour conversion and
//! classical bicubic resampling.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided};

/// `height × width × channels` grid of `f64`, row-major by (row, column, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ImageDimensions(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image::from_vec(height, width, channels, vec![value; height * width * channels])
            .expect("invalid image shape")
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image::filled(height, width, channels, 0.0)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Image::from_vec(height, width, channels, data).expect("invalid image shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_shape(&self, other: &Image, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(context, fmt_dims(self.dims()), fmt_dims(other.dims())))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Element-wise combination; panics on shape mismatch (internal use with checked shapes).
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        assert!(self.same_shape(other), "zip_map on mismatched shapes");
        Image {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        }
    }

    pub fn add(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Image {
        self.map(|v| k * v)
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// One channel as a single-channel image.
    pub fn channel(&self, ch: usize) -> Image {
        Image::from_fn(self.height, self.width, 1, |r, c, _| self.get(r, c, ch))
    }

    /// Reorder channels: output channel `i` is input channel `order[i]`.
    pub fn permute_channels(&self, order: &[usize]) -> Result<Image> {
        if order.len() != self.channels || order.iter().any(|&o| o >= self.channels) {
            return Err(Error::InvalidArgument(format!(
                "channel order {order:?} invalid for {} channels",
                self.channels
            )));
        }
        Ok(Image::from_fn(self.height, self.width, self.channels, |r, c, ch| {
            self.get(r, c, order[ch])
        }))
    }

    /// `h × w` window with top-left corner `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Image> {
        if row + h > self.height || col + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({row},{col}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(h, w, self.channels, |r, c, ch| {
            self.get(row + r, col + c, ch)
        }))
    }

    /// Write `src` into `self` with its top-left corner at `(row, col)`.
    pub fn paste(&mut self, src: &Image, row: usize, col: usize) -> Result<()> {
        if src.channels != self.channels
            || row + src.height > self.height
            || col + src.width > self.width
        {
            return Err(Error::shape(
                "paste",
                fmt_dims(self.dims()),
                format!("{} at ({row},{col})", fmt_dims(src.dims())),
            ));
        }
        for r in 0..src.height {
            let dst = ((row + r) * self.width + col) * self.channels;
            let s = r * src.width * src.channels;
            let n = src.width * src.channels;
            self.data[dst..dst + n].copy_from_slice(&src.data[s..s + n]);
        }
        Ok(())
    }

    /// Extend to `height + pad_bottom` by `width + pad_right` mirroring about
    /// the last row/column (reflect without edge repeat, periodically folded).
    pub fn reflect_pad(&self, pad_bottom: usize, pad_right: usize) -> Image {
        let (h, w) = (self.height, self.width);
        Image::from_fn(h + pad_bottom, w + pad_right, self.channels, |r, c, ch| {
            self.get(reflect_index(r as isize, h), reflect_index(c as isize, w), ch)
        })
    }

    /// Rotate counter-clockwise by `quarter_turns × 90°`.
    pub fn rot90(&self, quarter_turns: usize) -> Image {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Image::from_fn(w, h, self.channels, |r, c, ch| self.get(c, w - 1 - r, ch)),
            2 => Image::from_fn(h, w, self.channels, |r, c, ch| {
                self.get(h - 1 - r, w - 1 - c, ch)
            }),
            _ => Image::from_fn(w, h, self.channels, |r, c, ch| self.get(h - 1 - c, r, ch)),
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let w = self.width;
        Image::from_fn(self.height, w, self.channels, |r, c, ch| self.get(r, w - 1 - c, ch))
    }

    pub fn flip_vertical(&self) -> Image {
        let h = self.height;
        Image::from_fn(h, self.width, self.channels, |r, c, ch| self.get(h - 1 - r, c, ch))
    }

    /// Replicate a single-channel image into three channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image::from_fn(self.height, self.width, 3, |r, c, _| self.get(r, c, 0))
    }
}

pub(crate) fn fmt_dims((h, w, c): (usize, usize, usize)) -> String {
    format!("{h}x{w}x{c}")
}

/// Mirror an index into `0..n` (`-1 → 1`, `n → n-2`), folding repeatedly.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub const Y_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Full-range BT.601 luma of a 3-channel image on `[0,1]` data.
pub fn to_y_channel(img: &Image) -> Result<Image> {
    if img.channels() != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            got: img.channels(),
        });
    }
    Ok(Image::from_fn(img.height(), img.width(), 1, |r, c, _| {
        Y_WEIGHTS[0] * img.get(r, c, 0) + Y_WEIGHTS[1] * img.get(r, c, 1) + Y_WEIGHTS[2] * img.get(r, c, 2)
    }))
}

/// Keys cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Dense `out × input` matrix of 1-D bicubic resampling weights.
///
/// Output sample `o` sits at source coordinate `(o + 0.5)·in/out − 0.5`. When
/// shrinking, the kernel is stretched by the scale factor (antialiasing).
/// Taps falling outside the signal are folded onto the nearest edge sample,
/// and every row is normalised to sum to one.
pub fn resize_matrix(input: usize, out: usize) -> Vec<Vec<f64>> {
    let ratio = input as f64 / out as f64;
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..out)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let mut row = vec![0.0; input];
            let first = (center - support).floor() as isize + 1;
            let last = (center + support).ceil() as isize - 1;
            let mut total = 0.0;
            for i in first..=last {
                let w = cubic_kernel((center - i as f64) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, input as isize - 1) as usize;
                row[idx] += w;
                total += w;
            }
            for v in &mut row {
                *v /= total;
            }
            row
        })
        .collect()
}

fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// `out[o] = Σ m[o][i] · src[i]` over rows of `stride` contiguous values.
fn vertical(src: &[f64], rows_in: usize, stride: usize, m: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; m.len() * stride];
    gemm(m.len(), rows_in, stride, 1.0, &flatten(m), (rows_in as isize, 1), src, (stride as isize, 1), 0.0, &mut out);
    out
}

/// Mix the columns of each of `h` rows (`w` columns, `ch` interleaved
/// channels); one strided GEMM per channel.
fn horizontal(src: &[f64], h: usize, w: usize, ch: usize, m: &[Vec<f64>]) -> Vec<f64> {
    let out_w = m.len();
    let flat = flatten(m);
    let mut out = vec![0.0; h * out_w * ch];
    for k in 0..ch {
        gemm_strided(
            h,
            w,
            out_w,
            1.0,
            &src[k..],
            ((w * ch) as isize, ch as isize),
            &flat,
            (1, w as isize),
            0.0,
            &mut out[k..],
            ((out_w * ch) as isize, ch as isize),
        );
    }
    out
}

/// Apply `rows × X × colsᵀ` to every channel without clamping, in whichever
/// pass order is cheaper.
pub(crate) fn separable_apply(img: &Image, rows: &[Vec<f64>], cols: &[Vec<f64>]) -> Image {
    let (h, w, ch) = img.dims();
    let (out_h, out_w) = (rows.len(), cols.len());
    let out = if out_h * h * w + out_h * w * out_w <= h * w * out_w + out_h * h * out_w {
        let tmp = vertical(img.data(), h, w * ch, rows);
        horizontal(&tmp, out_h, w, ch, cols)
    } else {
        let tmp = horizontal(img.data(), h, w, ch, cols);
        vertical(&tmp, h, out_w * ch, rows)
    };
    Image::from_vec(out_h, out_w, ch, out).expect("output dims derived from matrices")
}

/// Bicubic (Catmull-Rom, replicate border) resize, clamped to `[0,1]`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size must be positive, got {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let rows = resize_matrix(img.height(), out_h);
    let cols = resize_matrix(img.width(), out_w);
    Ok(separable_apply(img, &rows, &cols).clamp01())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_apply_matches_naive_sum() {
        let mut rng = crate::Rng::new(3);
        for (h, w, oh, ow) in [(40, 36, 160, 144), (64, 64, 16, 16), (5, 9, 7, 3)] {
            let img = rng.uniform_image(h, w, 3);
            let rows: Vec<Vec<f64>> = (0..oh).map(|_| rng.normal_vec(h)).collect();
            let cols: Vec<Vec<f64>> = (0..ow).map(|_| rng.normal_vec(w)).collect();
            let got = separable_apply(&img, &rows, &cols);
            for r in 0..oh {
                for c in 0..ow {
                    for k in 0..3 {
                        let mut acc = 0.0;
                        for i in 0..h {
                            for j in 0..w {
                                acc += rows[r][i] * cols[c][j] * img.get(i, j, k);
                            }
                        }
                        assert!((got.get(r, c, k) - acc).abs() < 1e-9, "{h}x{w}->{oh}x{ow} at {r},{c},{k}");
                    }
                }
            }
        }
    }
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn y_channel_examples() {
        let white = Image::filled(1, 1, 3, 1.0);
        assert!((to_y_channel(&white).unwrap().get(0, 0, 0) - 1.0).abs() < 1e-15);
        let black = Image::zeros(1, 1, 3);
        assert_eq!(to_y_channel(&black).unwrap().get(0, 0, 0), 0.0);
        let red = Image::from_vec(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(to_y_channel(&red).unwrap().get(0, 0, 0), 0.299);
    }

    #[test]
    fn y_channel_rejects_gray() {
        let g = Image::zeros(2, 2, 1);
        assert!(matches!(
            to_y_channel(&g),
            Err(Error::ChannelCount { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert!((cubic_kernel(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_kernel(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn identity_resize_is_bit_exact() {
        let img = Rng::new(3).uniform_image(5, 7, 3);
        assert_eq!(bicubic_resize(&img, 5, 7).unwrap(), img);
    }

    #[test]
    fn constant_resize() {
        let img = Image::filled(9, 13, 3, 0.37);
        for &(h, w) in &[(4, 4), (18, 26), (1, 1), (30, 5)] {
            let out = bicubic_resize(&img, h, w).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    /// Direct 2-D evaluation of the resampling sum, independent of the
    /// separable matrix path.
    fn oracle_resize(img: &Image, out_h: usize, out_w: usize) -> Image {
        let taps = |input: usize, out: usize, o: usize| -> Vec<(usize, f64)> {
            let ratio = input as f64 / out as f64;
            let stretch = if ratio > 1.0 { ratio } else { 1.0 };
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let mut v = Vec::new();
            let mut i = (center - 2.0 * stretch).floor() as isize - 1;
            while (i as f64) <= center + 2.0 * stretch + 1.0 {
                let w = cubic_kernel((center - i as f64) / stretch);
                v.push((i.max(0).min(input as isize - 1) as usize, w));
                i += 1;
            }
            let s: f64 = v.iter().map(|t| t.1).sum();
            v.into_iter().map(|(i, w)| (i, w / s)).collect()
        };
        Image::from_fn(out_h, out_w, img.channels(), |r, c, ch| {
            let mut acc = 0.0;
            for (ri, rw) in taps(img.height(), out_h, r) {
                for (ci, cw) in taps(img.width(), out_w, c) {
                    acc += rw * cw * img.get(ri, ci, ch);
                }
            }
            acc
        })
    }

    #[test]
    fn ramp_downsize_matches_oracle() {
        let ramp = Image::from_fn(8, 8, 1, |_, c, _| c as f64 / 7.0);
        let out = bicubic_resize(&ramp, 4, 4).unwrap();
        let expected = oracle_resize(&ramp, 4, 4).clamp01();
        assert!(out.max_abs_diff(&expected) < 1e-9);
        // Rows are identical since the ramp is constant down each column.
        for r in 1..4 {
            for c in 0..4 {
                assert!((out.get(r, c, 0) - out.get(0, c, 0)).abs() < 1e-12);
            }
        }
        // Away from the border the kernel reproduces the ramp at the pixel centre.
        let wide = Image::from_fn(4, 32, 1, |_, c, _| c as f64 / 31.0);
        let out = bicubic_resize(&wide, 2, 16).unwrap();
        for c in 3..13 {
            let centre = 2.0 * c as f64 + 0.5;
            assert!((out.get(0, c, 0) - centre / 31.0).abs() < 1e-9);
        }
    }

    #[test]
    fn upsize_matches_oracle() {
        let img = Rng::new(11).uniform_image(5, 6, 3);
        let out = bicubic_resize(&img, 20, 24).unwrap();
        let expected = oracle_resize(&img, 20, 24).clamp01();
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn reflect_index_folds() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(9, 5), 1);
        assert_eq!(reflect_index(0, 1), 0);
    }

    #[test]
    fn rotations_compose() {
        let img = Rng::new(5).uniform_image(3, 4, 3);
        assert_eq!(img.rot90(2).rot90(2), img);
        assert_eq!(img.rot90(1).rot90(3), img);
        assert_eq!(img.rot90(1).dims(), (4, 3, 3));
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    proptest! {
        #[test]
        fn y_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = Rng::new(seed);
            let x = rng.uniform_image(4, 5, 3);
            let y = rng.uniform_image(4, 5, 3);
            let combo = x.scale(a).add(&y.scale(b));
            let lhs = to_y_channel(&combo).unwrap();
            let rhs = to_y_channel(&x).unwrap().scale(a).add(&to_y_channel(&y).unwrap().scale(b));
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn resize_commutes_with_channel_permutation(seed in 0u64..1000, h in 1usize..12, w in 1usize..12) {
            let img = Rng::new(seed).uniform_image(7, 9, 3);
            let order = [2, 0, 1];
            let a = bicubic_resize(&img.permute_channels(&order).unwrap(), h, w).unwrap();
            let b = bicubic_resize(&img, h, w).unwrap().permute_channels(&order).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
