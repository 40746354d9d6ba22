//! Dense `f64` tensors and the convolution kernels behind the network layers.
//!
//! Feature maps are `C × H × W` (channel-major), convolution weights are
//! `out × in × k × k`.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("{shape:?} ({n} values)"), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| std * rng.normal()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a C×H×W tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map on mismatched tensors");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign on mismatched tensors");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| k * v)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot on mismatched tensors");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-major view of an image.
    pub fn from_image(img: &Image) -> Tensor {
        let (h, w, c) = img.dims();
        let mut data = vec![0.0; c * h * w];
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    data[(ch * h + r) * w + col] = img.get(r, col, ch);
                }
            }
        }
        Tensor {
            shape: vec![c, h, w],
            data,
        }
    }

    pub fn to_image(&self) -> Result<Image> {
        let (c, h, w) = self.chw();
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    data[(r * w + col) * c + ch] = self.data[(ch * h + r) * w + col];
                }
            }
        }
        Image::from_vec(h, w, c, data)
    }

    /// `C × h × w` window at `(row, col)` of a feature map.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Tensor {
        let (c, hh, ww) = self.chw();
        assert!(row + h <= hh && col + w <= ww, "tensor crop out of range");
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for r in 0..h {
                let start = (ch * hh + row + r) * ww + col;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Tensor {
            shape: vec![c, h, w],
            data,
        }
    }
}

/// `C[m×n] = alpha·A[m×k]·B[k×n] + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    gemm_strided(m, k, n, alpha, a, sa, b, sb, beta, c, (n as isize, 1));
}

/// `C ← α A B + β C` with explicit strides for every operand. Offsets are
/// expressed by slicing; the slices must cover the strided extents.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cc: usize, rs: isize, cs: isize| (r as isize - 1) * rs + (cc as isize - 1) * cs;
    assert!(k == 0 || (last(m, k, rsa, csa) as usize) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || (last(k, n, rsb, csb) as usize) < b.len(), "gemm: B out of bounds");
    assert!((last(m, n, rsc, csc) as usize) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above keep every strided access inside its slice
    // (all strides are non-negative).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const SAME3: ConvGeometry = ConvGeometry {
        kernel: 3,
        stride: 1,
        pad: 1,
    };

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Unfold zero-padded `C × H × W` input into `(C·k·k) × (Ho·Wo)` columns.
pub(crate) fn im2col(x: &Tensor, g: ConvGeometry) -> Vec<f64> {
    let (c, h, w) = x.chw();
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let n = ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        // Contiguous run of valid columns.
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (w + g.pad - kx).min(wo);
                        if lo < hi {
                            let start = lo + kx - g.pad;
                            out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `C × H × W` buffer.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry) -> Tensor {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let n = ho * wo;
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let plane = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward convolution. Returns the output and the unfolded input columns.
/// Zero-padded copy of a `C × H × W` tensor, `pad` on every side.
fn pad_zero(x: &Tensor, pad: usize) -> (Vec<f64>, usize, usize) {
    let (c, h, w) = x.chw();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for r in 0..h {
            let src = &x.data[(ch * h + r) * w..(ch * h + r + 1) * w];
            let dst = (ch * hp + r + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    (out, hp, wp)
}

/// Geometry of the tap-wise formulation: outputs live on a grid of row
/// pitch `wp` (the padded width); the last `wp − wo` columns of each row are
/// scratch.
struct TapGrid {
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
    /// Columns touched per tap GEMM.
    span: usize,
}

impl TapGrid {
    fn new(h: usize, w: usize, g: ConvGeometry) -> Self {
        let (hp, wp) = (h + 2 * g.pad, w + 2 * g.pad);
        let (ho, wo) = g.output_size(h, w);
        TapGrid {
            hp,
            wp,
            ho,
            wo,
            span: (ho - 1) * wp + wo,
        }
    }
}

/// Stride-1 convolution as one GEMM per kernel tap over the padded input,
/// avoiding a column buffer.
pub(crate) fn conv2d_taps(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Tensor {
    debug_assert_eq!(g.stride, 1);
    let (c, h, w) = x.chw();
    let (cout, k) = (weight.shape[0], g.kernel);
    assert_eq!(weight.shape[1], c, "conv input channels");
    assert_eq!(weight.shape[2], k, "conv kernel size");
    let (xp, _, _) = pad_zero(x, g.pad);
    let t = TapGrid::new(h, w, g);
    let plane = t.hp * t.wp;
    let pitch = t.ho * t.wp;
    let mut wide = vec![0.0; cout * pitch];
    let kk = c * k * k;
    for ky in 0..k {
        for kx in 0..k {
            let tap = ky * k + kx;
            let off = ky * t.wp + kx;
            gemm_strided(
                cout,
                c,
                t.span,
                1.0,
                &weight.data[tap..],
                (kk as isize, (k * k) as isize),
                &xp[off..],
                (plane as isize, 1),
                1.0,
                &mut wide,
                (pitch as isize, 1),
            );
        }
    }
    let mut out = vec![0.0; cout * t.ho * t.wo];
    for o in 0..cout {
        let b = bias.map_or(0.0, |b| b.data[o]);
        for r in 0..t.ho {
            let src = &wide[o * pitch + r * t.wp..o * pitch + r * t.wp + t.wo];
            let dst = &mut out[(o * t.ho + r) * t.wo..(o * t.ho + r + 1) * t.wo];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    Tensor {
        shape: vec![cout, t.ho, t.wo],
        data: out,
    }
}

/// Weight and input gradients of [`conv2d_taps`] given the output gradient.
pub(crate) fn conv2d_taps_backward(
    x: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    g: ConvGeometry,
    want_w: bool,
    want_x: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, h, w) = x.chw();
    let (cout, k) = (weight.shape[0], g.kernel);
    let t = TapGrid::new(h, w, g);
    let plane = t.hp * t.wp;
    let pitch = t.ho * t.wp;
    // output gradient on the wide grid, zero in the scratch columns
    let mut gw = vec![0.0; cout * pitch];
    for o in 0..cout {
        for r in 0..t.ho {
            let src = &gout.data[(o * t.ho + r) * t.wo..(o * t.ho + r + 1) * t.wo];
            gw[o * pitch + r * t.wp..o * pitch + r * t.wp + t.wo].copy_from_slice(src);
        }
    }
    let kk = c * k * k;
    let dw = want_w.then(|| {
        let (xp, _, _) = pad_zero(x, g.pad);
        let mut dw = vec![0.0; cout * kk];
        for tap in 0..k * k {
            let off = (tap / k) * t.wp + tap % k;
            gemm_strided(
                cout,
                t.span,
                c,
                1.0,
                &gw,
                (pitch as isize, 1),
                &xp[off..],
                (1, plane as isize),
                0.0,
                &mut dw[tap..],
                (kk as isize, (k * k) as isize),
            );
        }
        Tensor {
            shape: weight.shape.clone(),
            data: dw,
        }
    });
    let dx = want_x.then(|| {
        let mut dxp = vec![0.0; c * plane];
        for tap in 0..k * k {
            let off = (tap / k) * t.wp + tap % k;
            gemm_strided(
                c,
                cout,
                t.span,
                1.0,
                &weight.data[tap..],
                ((k * k) as isize, kk as isize),
                &gw,
                (pitch as isize, 1),
                1.0,
                &mut dxp[off..],
                (plane as isize, 1),
            );
        }
        let mut dx = vec![0.0; c * h * w];
        for ch in 0..c {
            for r in 0..h {
                let src = (ch * t.hp + r + g.pad) * t.wp + g.pad;
                dx[(ch * h + r) * w..(ch * h + r + 1) * w].copy_from_slice(&dxp[src..src + w]);
            }
        }
        Tensor {
            shape: vec![c, h, w],
            data: dx,
        }
    });
    (dw, dx)
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeometry,
) -> (Tensor, Vec<f64>) {
    let (c, h, w) = x.chw();
    let (cout, cin, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    assert_eq!(cin, c, "conv input channels");
    assert_eq!(k, g.kernel, "conv kernel size");
    let (ho, wo) = g.output_size(h, w);
    let n = ho * wo;
    let kk = cin * k * k;
    let cols = im2col(x, g);
    let mut out = vec![0.0; cout * n];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b.data[o]);
        }
    }
    gemm(
        cout,
        kk,
        n,
        1.0,
        &weight.data,
        (kk as isize, 1),
        &cols,
        (n as isize, 1),
        1.0,
        &mut out,
    );
    (
        Tensor {
            shape: vec![cout, ho, wo],
            data: out,
        },
        cols,
    )
}
