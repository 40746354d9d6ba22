//! Sampling images larger than the denoiser's fixed window.
//!
//! Each axis is cut into half-window strips; turn `i` runs the sampler on the
//! window made of strips `i` and `i + 1`, and when two turns overlap the later
//! turn's pixels replace the earlier ones. Two-dimensional images are handled
//! one axis at a time: windows in a row band are stitched along columns, then
//! the bands are stitched along rows. Far edges are reflect-padded so the
//! strip count is an integer, and the padding is cropped at the end.

use crate::diffusion::{sample_with_rng, Denoiser, SamplerConfig};
use crate::error::{Error, Result};
use crate::image::{fmt_dims, Image};
use crate::linop::{window_operator, OperatorKind};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisPlan {
    pub len: usize,
    pub padded_len: usize,
    pub pad: usize,
    /// Number of half-window strips (divisions).
    pub strips: usize,
}

impl AxisPlan {
    fn new(len: usize, tile: usize) -> Result<Self> {
        let half = tile / 2;
        if len < half {
            return Err(Error::InvalidArgument(format!(
                "axis of {len} px is smaller than half a {tile} px tile"
            )));
        }
        let strips = len.div_ceil(half).max(2);
        let padded_len = strips * half;
        Ok(AxisPlan {
            len,
            padded_len,
            pad: padded_len - len,
            strips,
        })
    }

    /// Turns as `(i, i + 1)` strip pairs.
    pub fn turns(&self) -> Vec<(usize, usize)> {
        (0..self.strips - 1).map(|i| (i, i + 1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub tile: usize,
    pub rows: AxisPlan,
    pub cols: AxisPlan,
}

/// A tile-sized window in padded canvas coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub row_turn: usize,
    pub col_turn: usize,
    pub top: usize,
    pub left: usize,
}

pub fn plan_tiles(h: usize, w: usize, tile: usize) -> Result<TilePlan> {
    if tile < 2 || !tile.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("tile size must be even and >= 2, got {tile}")));
    }
    Ok(TilePlan {
        tile,
        rows: AxisPlan::new(h, tile)?,
        cols: AxisPlan::new(w, tile)?,
    })
}

impl TilePlan {
    pub fn half(&self) -> usize {
        self.tile / 2
    }

    /// Windows in execution order: row turns outer, column turns inner.
    pub fn windows(&self) -> Vec<Window> {
        let half = self.half();
        let mut out = Vec::new();
        for (row_turn, _) in self.rows.turns() {
            for (col_turn, _) in self.cols.turns() {
                out.push(Window {
                    row_turn,
                    col_turn,
                    top: row_turn * half,
                    left: col_turn * half,
                });
            }
        }
        out
    }

    pub fn turn_count(&self) -> usize {
        (self.rows.strips - 1) * (self.cols.strips - 1)
    }
}

/// Stitch per-window results (in [`TilePlan::windows`] order) into the
/// unpadded canvas.
pub fn stitch(outputs: &[Image], plan: &TilePlan) -> Result<Image> {
    stitch_with_owners(outputs, plan).map(|(img, _)| img)
}

/// [`stitch`] plus, for every output pixel, the index of the window whose
/// value survived.
pub fn stitch_with_owners(outputs: &[Image], plan: &TilePlan) -> Result<(Image, Vec<usize>)> {
    let windows = plan.windows();
    if outputs.len() != windows.len() {
        return Err(Error::shape("stitch", windows.len(), outputs.len()));
    }
    let channels = outputs[0].channels();
    for out in outputs {
        if out.dims() != (plan.tile, plan.tile, channels) {
            return Err(Error::shape(
                "stitch window",
                fmt_dims((plan.tile, plan.tile, channels)),
                fmt_dims(out.dims()),
            ));
        }
    }
    let (ph, pw) = (plan.rows.padded_len, plan.cols.padded_len);
    let col_turns = plan.cols.strips - 1;
    let mut canvas = Image::zeros(ph, pw, channels);
    let mut owners = vec![usize::MAX; ph * pw];
    for (band_idx, band_windows) in windows.chunks(col_turns).enumerate() {
        // Column pass within the band: later turns overwrite the shared strip.
        let mut band = Image::zeros(plan.tile, pw, channels);
        let mut band_owner = vec![usize::MAX; plan.tile * pw];
        for (k, win) in band_windows.iter().enumerate() {
            let idx = band_idx * col_turns + k;
            band.paste(&outputs[idx], 0, win.left)?;
            for r in 0..plan.tile {
                for c in win.left..win.left + plan.tile {
                    band_owner[r * pw + c] = idx;
                }
            }
        }
        // Row pass: this band replaces the lower half of the previous band.
        let top = band_windows[0].top;
        canvas.paste(&band, top, 0)?;
        owners[top * pw..(top + plan.tile) * pw].copy_from_slice(&band_owner);
    }
    let (h, w) = (plan.rows.len, plan.cols.len);
    let cropped = canvas.crop(0, 0, h, w)?;
    let owners = (0..h)
        .flat_map(|r| owners[r * pw..r * pw + w].iter().copied())
        .collect();
    Ok((cropped, owners))
}

/// Guided sampling of a `scale×` image from `y` through tile-sized windows.
///
/// Each window is constrained by the observations of the reflect-padded `y`
/// whose footprint it fully contains; window `k` draws from `Rng::stream(cfg.seed, k)`, so results do not
/// depend on execution order. Returns the unclamped stitched canvas.
pub fn sample_tiled(
    y: &Image,
    kind: OperatorKind,
    scale: usize,
    tile: usize,
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
) -> Result<Image> {
    let scale = if kind == OperatorKind::Identity { 1 } else { scale };
    if !tile.is_multiple_of(2 * scale) {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} must be a multiple of twice the scale {scale}"
        )));
    }
    let (h, w) = (y.height() * scale, y.width() * scale);
    let plan = plan_tiles(h, w, tile)?;
    let y_padded = y.reflect_pad(plan.rows.pad / scale, plan.cols.pad / scale);
    let canvas = (plan.rows.padded_len, plan.cols.padded_len);
    let outputs = plan
        .windows()
        .iter()
        .enumerate()
        .map(|(k, win)| {
            let (op, [r, c, oh, ow]) = window_operator(kind, scale, canvas, win.top, win.left, (tile, tile))?;
            let y_win = y_padded.crop(r, c, oh, ow)?;
            let d = denoiser.for_window(win.top, win.left, tile, tile);
            let mut rng = Rng::stream(cfg.seed, k as u64);
            Ok(sample_with_rng(&y_win, &op, d.as_ref(), cfg, &mut rng, |_, _| {})?.unclamped)
        })
        .collect::<Result<Vec<_>>>()?;
    stitch(&outputs, &plan)
}

/// Largest absolute jump between adjacent pixels straddling any boundary
/// where ownership passes from one window to the next; a regression
/// statistic for seam visibility.
pub fn seam_jump(img: &Image, plan: &TilePlan) -> f64 {
    let half = plan.half();
    let mut worst: f64 = 0.0;
    for s in 1..plan.cols.strips - 1 {
        let c = s * half;
        for r in 0..img.height().min(plan.rows.len) {
            for ch in 0..img.channels() {
                if c < img.width() {
                    worst = worst.max((img.get(r, c, ch) - img.get(r, c - 1, ch)).abs());
                }
            }
        }
    }
    for s in 1..plan.rows.strips - 1 {
        let r = s * half;
        if r >= img.height() {
            break;
        }
        for c in 0..img.width() {
            for ch in 0..img.channels() {
                worst = worst.max((img.get(r, c, ch) - img.get(r - 1, c, ch)).abs());
            }
        }
    }
    worst
}
