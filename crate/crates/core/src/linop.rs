//! Linear degradation operators `A`, their Moore–Penrose pseudo-inverses
//! `A†`, and the range/null-space split `x = A†A x + (I − A†A) x`.
//!
//! Operators act on each channel independently. The bicubic decimator is
//! stored in separable form `Y = R X Cᵀ`; its pseudo-inverse is
//! `X = R† Y C†ᵀ`, since the pseudo-inverse of a Kronecker product is the
//! Kronecker product of the factor pseudo-inverses.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::image::{fmt_dims, resize_matrix, separable_apply, Image};

/// Relative singular value cutoff used when inverting the bicubic factors.
pub const SVD_RELATIVE_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperatorKind {
    Identity,
    AveragePool,
    BicubicDown,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Identity => "identity",
            OperatorKind::AveragePool => "average-pool",
            OperatorKind::BicubicDown => "bicubic-down",
        }
    }
}

impl std::str::FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(OperatorKind::Identity),
            "average-pool" | "avgpool" => Ok(OperatorKind::AveragePool),
            "bicubic-down" | "bicubic" => Ok(OperatorKind::BicubicDown),
            other => Err(Error::InvalidArgument(format!("unknown operator kind `{other}`"))),
        }
    }
}

/// What to do when the input size is not a multiple of the scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadPolicy {
    #[default]
    Reject,
    /// Operate on the reflect-padded size; callers use [`LinearOperator::pad_input`]
    /// and [`LinearOperator::crop_to_source`] at the boundaries.
    ReflectPad,
}

#[derive(Debug, Clone)]
enum Action {
    Identity,
    AveragePool,
    Separable {
        rows: Vec<Vec<f64>>,
        cols: Vec<Vec<f64>>,
        rows_pinv: Vec<Vec<f64>>,
        cols_pinv: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone)]
pub struct LinearOperator {
    kind: OperatorKind,
    scale: usize,
    source_shape: (usize, usize),
    in_shape: (usize, usize),
    out_shape: (usize, usize),
    action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// `A†A x`
    pub range_part: Image,
    /// `(I − A†A) x`
    pub null_part: Image,
}

impl LinearOperator {
    pub fn build(kind: OperatorKind, scale: usize, in_shape: (usize, usize)) -> Result<Self> {
        Self::build_with_policy(kind, scale, in_shape, PadPolicy::Reject)
    }

    pub fn build_with_policy(
        kind: OperatorKind,
        scale: usize,
        source_shape: (usize, usize),
        policy: PadPolicy,
    ) -> Result<Self> {
        if scale == 0 {
            return Err(Error::InvalidArgument("scale must be positive".into()));
        }
        let (h, w) = source_shape;
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument("operator shape must be positive".into()));
        }
        let scale = if kind == OperatorKind::Identity { 1 } else { scale };
        let in_shape = match policy {
            PadPolicy::Reject => {
                for dim in [h, w] {
                    if dim % scale != 0 {
                        return Err(Error::NotDivisible { dim, divisor: scale });
                    }
                }
                source_shape
            }
            PadPolicy::ReflectPad => (h.div_ceil(scale) * scale, w.div_ceil(scale) * scale),
        };
        let out_shape = (in_shape.0 / scale, in_shape.1 / scale);
        let action = match kind {
            OperatorKind::Identity => Action::Identity,
            OperatorKind::AveragePool => Action::AveragePool,
            OperatorKind::BicubicDown => {
                let rows = resize_matrix(in_shape.0, out_shape.0);
                let cols = resize_matrix(in_shape.1, out_shape.1);
                let rows_pinv = pinv(&rows);
                let cols_pinv = pinv(&cols);
                Action::Separable {
                    rows,
                    cols,
                    rows_pinv,
                    cols_pinv,
                }
            }
        };
        Ok(LinearOperator {
            kind,
            scale,
            source_shape,
            in_shape,
            out_shape,
            action,
        })
    }

    pub fn identity(shape: (usize, usize)) -> Self {
        Self::build(OperatorKind::Identity, 1, shape).expect("identity is always valid")
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn in_shape(&self) -> (usize, usize) {
        self.in_shape
    }

    pub fn out_shape(&self) -> (usize, usize) {
        self.out_shape
    }

    /// Reflect-pad an image of the source shape up to `in_shape`.
    pub fn pad_input(&self, x: &Image) -> Result<Image> {
        check_hw(x, self.source_shape, "pad_input")?;
        Ok(x.reflect_pad(
            self.in_shape.0 - self.source_shape.0,
            self.in_shape.1 - self.source_shape.1,
        ))
    }

    /// Crop an `in_shape` image back to the unpadded source shape.
    pub fn crop_to_source(&self, x: &Image) -> Result<Image> {
        check_hw(x, self.in_shape, "crop_to_source")?;
        x.crop(0, 0, self.source_shape.0, self.source_shape.1)
    }

    /// `A x`, no clamping.
    pub fn apply(&self, x: &Image) -> Result<Image> {
        check_hw(x, self.in_shape, "apply")?;
        Ok(match &self.action {
            Action::Identity => x.clone(),
            Action::AveragePool => {
                let s = self.scale;
                let norm = 1.0 / (s * s) as f64;
                let (oh, ow) = self.out_shape;
                Image::from_fn(oh, ow, x.channels(), |r, c, ch| {
                    let mut acc = 0.0;
                    for i in 0..s {
                        for j in 0..s {
                            acc += x.get(r * s + i, c * s + j, ch);
                        }
                    }
                    acc * norm
                })
            }
            Action::Separable { rows, cols, .. } => separable_apply(x, rows, cols),
        })
    }

    /// `A† y`, no clamping.
    pub fn pinv_apply(&self, y: &Image) -> Result<Image> {
        check_hw(y, self.out_shape, "pinv_apply")?;
        Ok(match &self.action {
            Action::Identity => y.clone(),
            Action::AveragePool => {
                // A† = s²·Aᵀ: replicate each observation over its block.
                let s = self.scale;
                let (h, w) = self.in_shape;
                Image::from_fn(h, w, y.channels(), |r, c, ch| y.get(r / s, c / s, ch))
            }
            Action::Separable {
                rows_pinv,
                cols_pinv,
                ..
            } => separable_apply(y, rows_pinv, cols_pinv),
        })
    }

    /// `Aᵀ y` (used by tests of the Moore–Penrose conditions).
    pub fn transpose_apply(&self, y: &Image) -> Result<Image> {
        check_hw(y, self.out_shape, "transpose_apply")?;
        Ok(match &self.action {
            Action::Identity => y.clone(),
            Action::AveragePool => {
                let s = self.scale;
                let norm = 1.0 / (s * s) as f64;
                let (h, w) = self.in_shape;
                Image::from_fn(h, w, y.channels(), |r, c, ch| norm * y.get(r / s, c / s, ch))
            }
            Action::Separable { rows, cols, .. } => {
                separable_apply(y, &transpose(rows), &transpose(cols))
            }
        })
    }

    /// Orthogonal projection onto the row space, `A†A x`.
    pub fn project_range(&self, x: &Image) -> Result<Image> {
        self.pinv_apply(&self.apply(x)?)
    }

    pub fn decompose(&self, x: &Image) -> Result<Decomposition> {
        let range_part = self.project_range(x)?;
        let null_part = x.sub(&range_part);
        Ok(Decomposition {
            range_part,
            null_part,
        })
    }

    /// `A†y + (I − A†A) x`: keep the null-space content of `x`, take the
    /// range-space content from the observation.
    pub fn rectify(&self, x: &Image, y: &Image) -> Result<Image> {
        let ay = self.pinv_apply(y)?;
        let ax = self.project_range(x)?;
        Image::from_vec(
            x.height(),
            x.width(),
            x.channels(),
            ay.data()
                .iter()
                .zip(x.data())
                .zip(ax.data())
                .map(|((a, x), p)| a + (x - p))
                .collect(),
        )
    }
}

fn check_hw(img: &Image, shape: (usize, usize), context: &'static str) -> Result<()> {
    if (img.height(), img.width()) == shape {
        Ok(())
    } else {
        Err(Error::shape(
            context,
            format!("{}x{}", shape.0, shape.1),
            fmt_dims(img.dims()),
        ))
    }
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|j| m.iter().map(|row| row[j]).collect()).collect()
}

/// Row indices of `m` whose nonzero support lies inside `[lo, hi)`, with the
/// rows cut down to those columns.
fn rows_inside(m: &[Vec<f64>], lo: usize, hi: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    m.iter()
        .enumerate()
        .filter(|(_, row)| row.iter().enumerate().all(|(j, &v)| v == 0.0 || (lo..hi).contains(&j)))
        .map(|(i, row)| (i, row[lo..hi].to_vec()))
        .unzip()
}

/// The operator seen by an `h × w` window at `(top, left)` of a `canvas`
/// image: only observations whose footprint lies entirely inside the window
/// are kept, so `A_win x_win` equals the matching crop of `A x` exactly.
/// Returns the operator and the observation crop `[row, col, rows, cols]`.
pub fn window_operator(
    kind: OperatorKind,
    scale: usize,
    canvas: (usize, usize),
    top: usize,
    left: usize,
    (h, w): (usize, usize),
) -> Result<(LinearOperator, [usize; 4])> {
    if top + h > canvas.0 || left + w > canvas.1 {
        return Err(Error::InvalidArgument(format!(
            "window {h}x{w} at ({top}, {left}) leaves the {}x{} canvas",
            canvas.0, canvas.1
        )));
    }
    match kind {
        OperatorKind::Identity => Ok((LinearOperator::identity((h, w)), [top, left, h, w])),
        OperatorKind::AveragePool => {
            if !top.is_multiple_of(scale) || !left.is_multiple_of(scale) {
                return Err(Error::NotDivisible {
                    dim: if !top.is_multiple_of(scale) { top } else { left },
                    divisor: scale,
                });
            }
            let op = LinearOperator::build(kind, scale, (h, w))?;
            Ok((op, [top / scale, left / scale, h / scale, w / scale]))
        }
        OperatorKind::BicubicDown => {
            let (ri, rows) = rows_inside(&resize_matrix(canvas.0, canvas.0 / scale), top, top + h);
            let (ci, cols) = rows_inside(&resize_matrix(canvas.1, canvas.1 / scale), left, left + w);
            if rows.is_empty() || cols.is_empty() {
                return Err(Error::InvalidArgument(format!("a {h}x{w} window holds no complete observation")));
            }
            // footprints move monotonically, so the kept observations are contiguous
            debug_assert!(ri.windows(2).chain(ci.windows(2)).all(|p| p[1] == p[0] + 1));
            let rect = [ri[0], ci[0], ri.len(), ci.len()];
            let op = LinearOperator {
                kind,
                scale,
                source_shape: (h, w),
                in_shape: (h, w),
                out_shape: (rows.len(), cols.len()),
                action: Action::Separable {
                    rows_pinv: pinv(&rows),
                    cols_pinv: pinv(&cols),
                    rows,
                    cols,
                },
            };
            Ok((op, rect))
        }
    }
}

/// Moore–Penrose pseudo-inverse by SVD, zeroing singular values below
/// `SVD_RELATIVE_CUTOFF · σ_max`.
fn pinv(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (r, c) = (m.len(), m[0].len());
    let mat = DMatrix::from_fn(r, c, |i, j| m[i][j]);
    let svd = mat.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let inv = svd
        .pseudo_inverse(SVD_RELATIVE_CUTOFF * sigma_max)
        .expect("both factors were computed");
    (0..c).map(|i| (0..r).map(|j| inv[(i, j)]).collect()).collect()
}
