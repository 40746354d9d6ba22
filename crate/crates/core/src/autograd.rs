//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse. Leaves are either parameters (gradients
//! tracked) or constants (no gradients flow into them). Every operation
//! here has a finite-difference test.

use std::sync::Arc;

use crate::tensor::{col2im, conv2d_forward, conv2d_taps, conv2d_taps_backward, gemm, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Fixed data for deformable sampling: reference features, per-query
/// sampling centres (`[row, col]` in reference coordinates) and the
/// per-query confidence gate.
#[derive(Debug, Clone)]
pub struct DeformContext {
    pub reference: Arc<Tensor>,
    pub centers: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
    pub out_hw: (usize, usize),
}

/// The 3×3 neighbourhood `p_c`, row-major from `(-1,-1)` to `(1,1)`.
pub const TAPS: [[f64; 2]; 9] = [
    [-1.0, -1.0],
    [-1.0, 0.0],
    [-1.0, 1.0],
    [0.0, -1.0],
    [0.0, 0.0],
    [0.0, 1.0],
    [1.0, -1.0],
    [1.0, 0.0],
    [1.0, 1.0],
];

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeometry,
        cols: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Channels(Var, usize, usize),
    AvgPool2(Var),
    Upsample2(Var),
    MulMap(Var, Arc<Vec<f64>>),
    Deform {
        offsets: Var,
        masks: Var,
        weight: Var,
        ctx: Arc<DeformContext>,
        /// Unmasked bilinear samples, `(C·9) × N`.
        raw: Vec<f64>,
        /// Clamped sample coordinates per (tap, position), and whether the
        /// clamp was active on each axis.
        coords: Vec<([f64; 2], [bool; 2])>,
    },
    L1Target(Var, Arc<Tensor>),
    Mse(Var, Var),
    MseTarget(Var, Arc<Tensor>),
    MeanSoftplus(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a rank-0/1-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeometry) -> Var {
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let bias = b.map(|b| self.value(b));
        // stride-1 convs go tap by tap and keep no column buffer
        let (out, cols) = if g.stride == 1 {
            (conv2d_taps(self.value(x), self.value(w), bias, g), Vec::new())
        } else {
            let (out, cols) = conv2d_forward(self.value(x), self.value(w), bias, g);
            (out, if needs { cols } else { Vec::new() })
        };
        self.push(out, Op::Conv { x, w, b, g, cols }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        let needs = self.ng(a);
        self.push(v, Op::Scale(a, k), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let needs = self.ng(a);
        self.push(v, Op::Relu(a), needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let needs = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let needs = self.ng(a);
        self.push(v, Op::Sigmoid(a), needs)
    }

    /// Concatenate `C × H × W` tensors along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut data = Vec::new();
        let mut c = 0;
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            data.extend_from_slice(self.value(p).data());
            c += pc;
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        let v = Tensor::new(vec![c, h, w], data).expect("sizes summed above");
        self.push(v, Op::Concat(parts.to_vec()), needs)
    }

    /// Channels `start..start + len` of a `C × H × W` node.
    pub fn channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = self.value(a).chw();
        assert!(start + len <= c, "channel slice out of range");
        let data = self.value(a).data()[start * h * w..(start + len) * h * w].to_vec();
        let needs = self.ng(a);
        let v = Tensor::new(vec![len, h, w], data).expect("slice dims");
        self.push(v, Op::Channels(a, start, len), needs)
    }

    /// 2×2 mean pooling with stride 2.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(a).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for r in 0..ho {
                for col in 0..wo {
                    let base = (ch * h + 2 * r) * w + 2 * col;
                    out[(ch * ho + r) * wo + col] =
                        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                }
            }
        }
        let needs = self.ng(a);
        let v = Tensor::new(vec![c, ho, wo], out).expect("pooled dims");
        self.push(v, Op::AvgPool2(a), needs)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let (c, h, w) = self.value(a).chw();
        let x = self.value(a).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for r in 0..ho {
                for col in 0..wo {
                    out[(ch * ho + r) * wo + col] = x[(ch * h + r / 2) * w + col / 2];
                }
            }
        }
        let needs = self.ng(a);
        let v = Tensor::new(vec![c, ho, wo], out).expect("upsampled dims");
        self.push(v, Op::Upsample2(a), needs)
    }

    /// Multiply every channel by a fixed `H × W` map.
    pub fn mul_map(&mut self, a: Var, map: Arc<Vec<f64>>) -> Var {
        let (c, h, w) = self.value(a).chw();
        assert_eq!(map.len(), h * w, "mul_map size");
        let mut v = self.value(a).clone();
        for ch in 0..c {
            for (x, m) in v.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().zip(map.iter()) {
                *x *= m;
            }
        }
        let needs = self.ng(a);
        self.push(v, Op::MulMap(a, map), needs)
    }

    /// Confidence-gated modulated deformable sampling:
    /// `out[o, i] = c_i Σ_{ch, j} W[o, ch, j] · F[ch](p_i + p_j + Δp_{j,i}) · m_{j,i}`.
    ///
    /// `offsets` is `18 × H × W` (`Δrow_j`, `Δcol_j` interleaved per tap),
    /// `masks` is `9 × H × W`, `weight` is `out × C × 3 × 3`. Offsets are
    /// clamped to the reference extent and sample coordinates to the
    /// reference grid (replicate border).
    pub fn deform(&mut self, offsets: Var, masks: Var, weight: Var, ctx: Arc<DeformContext>) -> Var {
        let (c, rh, rw) = ctx.reference.chw();
        let (h, w) = ctx.out_hw;
        let n = h * w;
        assert_eq!(self.value(offsets).shape(), &[18, h, w], "offset shape");
        assert_eq!(self.value(masks).shape(), &[9, h, w], "mask shape");
        assert_eq!(ctx.centers.len(), n);
        assert_eq!(ctx.confidence.len(), n);
        let wshape = self.value(weight).shape().to_vec();
        assert_eq!(&wshape[1..], &[c, 3, 3], "deform weight shape");
        let cout = wshape[0];
        let off = self.value(offsets).data();
        let msk = self.value(masks).data();
        let limit = [rh as f64, rw as f64];
        let mut coords = Vec::with_capacity(9 * n);
        for (j, tap) in TAPS.iter().enumerate() {
            for i in 0..n {
                let mut pos = [0.0; 2];
                let mut clamped = [false; 2];
                for a in 0..2 {
                    let d = off[(2 * j + a) * n + i].clamp(-limit[a], limit[a]);
                    let p = ctx.centers[i][a] + tap[a] + d;
                    let hi = limit[a] - 1.0;
                    pos[a] = p.clamp(0.0, hi);
                    clamped[a] = p < 0.0 || p > hi || off[(2 * j + a) * n + i].abs() > limit[a];
                }
                coords.push((pos, clamped));
            }
        }
        let reference = ctx.reference.data();
        let mut raw = vec![0.0; c * 9 * n];
        let mut cols = vec![0.0; c * 9 * n];
        for ch in 0..c {
            let plane = &reference[ch * rh * rw..(ch + 1) * rh * rw];
            for j in 0..9 {
                let row = ch * 9 + j;
                for i in 0..n {
                    let (pos, _) = coords[j * n + i];
                    let v = bilinear(plane, rh, rw, pos).0;
                    raw[row * n + i] = v;
                    cols[row * n + i] = v * msk[j * n + i];
                }
            }
        }
        let mut out = vec![0.0; cout * n];
        gemm(
            cout,
            c * 9,
            n,
            1.0,
            self.value(weight).data(),
            ((c * 9) as isize, 1),
            &cols,
            (n as isize, 1),
            0.0,
            &mut out,
        );
        for o in 0..cout {
            for (v, conf) in out[o * n..(o + 1) * n].iter_mut().zip(&ctx.confidence) {
                *v *= conf;
            }
        }
        let needs = self.ng(offsets) || self.ng(masks) || self.ng(weight);
        let v = Tensor::new(vec![cout, h, w], out).expect("deform output dims");
        self.push(
            v,
            Op::Deform {
                offsets,
                masks,
                weight,
                ctx,
                raw,
                coords,
            },
            needs,
        )
    }

    /// `mean |a − target|`.
    pub fn l1_to(&mut self, a: Var, target: Arc<Tensor>) -> Var {
        let v = self.value(a).data().iter().zip(target.data()).map(|(x, t)| (x - t).abs()).sum::<f64>()
            / target.len() as f64;
        let needs = self.ng(a);
        self.push(Tensor::filled(&[1], v), Op::L1Target(a, target), needs)
    }

    /// `mean (a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
            / self.value(a).len() as f64;
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::filled(&[1], v), Op::Mse(a, b), needs)
    }

    /// `mean (a − target)²`.
    pub fn mse_to(&mut self, a: Var, target: Arc<Tensor>) -> Var {
        let v = self.value(a).data().iter().zip(target.data()).map(|(x, t)| (x - t) * (x - t)).sum::<f64>()
            / target.len() as f64;
        let needs = self.ng(a);
        self.push(Tensor::filled(&[1], v), Op::MseTarget(a, target), needs)
    }

    /// `mean softplus(sign · a)`.
    pub fn mean_softplus(&mut self, a: Var, sign: f64) -> Var {
        let x = self.value(a);
        let v = x.data().iter().map(|&z| softplus(sign * z)).sum::<f64>() / x.len() as f64;
        let needs = self.ng(a);
        self.push(Tensor::filled(&[1], v), Op::MeanSoftplus(a, sign), needs)
    }

    /// `Σ k_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(s, k)| k * self.scalar(s)).sum();
        let needs = terms.iter().any(|&(s, _)| self.ng(s));
        self.push(Tensor::filled(&[1], v), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Reverse pass from the scalar `loss` (seed gradient 1).
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, g: geo, cols } => {
                let (cout, ho, wo) = g.chw();
                let n = ho * wo;
                let wt = self.value(*w);
                let (c, h, wd) = self.value(*x).chw();
                let kk = c * geo.kernel * geo.kernel;
                if geo.stride == 1 {
                    let (dw, dx) = conv2d_taps_backward(self.value(*x), wt, g, *geo, self.ng(*w), self.ng(*x));
                    if let Some(dw) = dw {
                        self.accumulate(grads, *w, dw);
                    }
                    if let Some(dx) = dx {
                        self.accumulate(grads, *x, dx);
                    }
                } else if self.ng(*w) {
                    let mut dw = vec![0.0; cout * kk];
                    gemm(cout, n, kk, 1.0, g.data(), (n as isize, 1), cols, (1, n as isize), 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(wt.shape().to_vec(), dw).expect("weight dims"));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let db: Vec<f64> = g.data().chunks(n).map(|r| r.iter().sum()).collect();
                        self.accumulate(grads, *b, Tensor::new(vec![cout], db).expect("bias dims"));
                    }
                }
                if geo.stride != 1 && self.ng(*x) {
                    let mut dcols = vec![0.0; kk * n];
                    gemm(kk, cout, n, 1.0, wt.data(), (1, kk as isize), g.data(), (n as isize, 1), 0.0, &mut dcols);
                    self.accumulate(grads, *x, col2im(&dcols, c, h, wd, *geo));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::Relu(a) => {
                let d = self.value(*a).zip_map(g, |x, g| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = self.value(*a).zip_map(g, |x, g| if x > 0.0 { g } else { slope * g });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = node.value.zip_map(g, |s, g| g * s * (1.0 - s));
                self.accumulate(grads, *a, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let shape = self.value(p).shape().to_vec();
                    let slice = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    self.accumulate(grads, p, Tensor::new(shape, slice).expect("concat part"));
                }
            }
            Op::Channels(a, start, len) => {
                let (c, h, w) = self.value(*a).chw();
                let mut d = Tensor::zeros(&[c, h, w]);
                d.data_mut()[start * h * w..(start + len) * h * w].copy_from_slice(g.data());
                self.accumulate(grads, *a, d);
            }
            Op::AvgPool2(a) => {
                let (c, h, w) = self.value(*a).chw();
                let (ho, wo) = (h / 2, w / 2);
                let mut d = Tensor::zeros(&[c, h, w]);
                let dd = d.data_mut();
                for ch in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            dd[(ch * h + r) * w + col] = 0.25 * g.data()[(ch * ho + r / 2) * wo + col / 2];
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Upsample2(a) => {
                let (c, h, w) = self.value(*a).chw();
                let (ho, wo) = (2 * h, 2 * w);
                let mut d = Tensor::zeros(&[c, h, w]);
                let dd = d.data_mut();
                for ch in 0..c {
                    for r in 0..ho {
                        for col in 0..wo {
                            dd[(ch * h + r / 2) * w + col / 2] += g.data()[(ch * ho + r) * wo + col];
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MulMap(a, map) => {
                let (c, h, w) = g.chw();
                let mut d = g.clone();
                for ch in 0..c {
                    for (x, m) in d.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().zip(map.iter()) {
                        *x *= m;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Deform {
                offsets,
                masks,
                weight,
                ctx,
                raw,
                coords,
            } => self.deform_backward(g, *offsets, *masks, *weight, ctx, raw, coords, grads),
            Op::L1Target(a, t) => {
                let k = g.data()[0] / t.len() as f64;
                let d = self.value(*a).zip_map(t, |x, t| k * sign(x - t));
                self.accumulate(grads, *a, d);
            }
            Op::Mse(a, b) => {
                let k = 2.0 * g.data()[0] / self.value(*a).len() as f64;
                let d = self.value(*a).zip_map(self.value(*b), |x, y| k * (x - y));
                self.accumulate(grads, *b, d.scale(-1.0));
                self.accumulate(grads, *a, d);
            }
            Op::MseTarget(a, t) => {
                let k = 2.0 * g.data()[0] / t.len() as f64;
                let d = self.value(*a).zip_map(t, |x, t| k * (x - t));
                self.accumulate(grads, *a, d);
            }
            Op::MeanSoftplus(a, s) => {
                let x = self.value(*a);
                let k = g.data()[0] / x.len() as f64;
                let d = x.map(|z| k * s * sigmoid(s * z));
                self.accumulate(grads, *a, d);
            }
            Op::WeightedSum(terms) => {
                for &(s, k) in terms {
                    self.accumulate(grads, s, Tensor::filled(&[1], k * g.data()[0]));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deform_backward(
        &self,
        g: &Tensor,
        offsets: Var,
        masks: Var,
        weight: Var,
        ctx: &DeformContext,
        raw: &[f64],
        coords: &[([f64; 2], [bool; 2])],
        grads: &mut [Option<Tensor>],
    ) {
        let (c, rh, rw) = ctx.reference.chw();
        let (h, w) = ctx.out_hw;
        let n = h * w;
        let wt = self.value(weight);
        let cout = wt.shape()[0];
        let msk = self.value(masks).data();
        // Gate by confidence first: dY_c = dY ⊙ c.
        let mut gc = g.data().to_vec();
        for o in 0..cout {
            for (v, conf) in gc[o * n..(o + 1) * n].iter_mut().zip(&ctx.confidence) {
                *v *= conf;
            }
        }
        if self.ng(weight) {
            let mut cols = vec![0.0; c * 9 * n];
            for row in 0..c * 9 {
                let j = row % 9;
                for i in 0..n {
                    cols[row * n + i] = raw[row * n + i] * msk[j * n + i];
                }
            }
            let mut dw = vec![0.0; cout * c * 9];
            gemm(cout, n, c * 9, 1.0, &gc, (n as isize, 1), &cols, (1, n as isize), 0.0, &mut dw);
            self.accumulate(grads, weight, Tensor::new(wt.shape().to_vec(), dw).expect("weight dims"));
        }
        if !(self.ng(masks) || self.ng(offsets)) {
            return;
        }
        // dS = Wᵀ · dY_c, S[row, i] = raw · m
        let mut ds = vec![0.0; c * 9 * n];
        gemm(c * 9, cout, n, 1.0, wt.data(), (1, (c * 9) as isize), &gc, (n as isize, 1), 0.0, &mut ds);
        let mut dmask = vec![0.0; 9 * n];
        let mut doff = vec![0.0; 18 * n];
        let reference = ctx.reference.data();
        for ch in 0..c {
            let plane = &reference[ch * rh * rw..(ch + 1) * rh * rw];
            for j in 0..9 {
                let row = ch * 9 + j;
                for i in 0..n {
                    let d = ds[row * n + i];
                    if d == 0.0 {
                        continue;
                    }
                    dmask[j * n + i] += d * raw[row * n + i];
                    let (pos, clamped) = coords[j * n + i];
                    let (_, grad) = bilinear(plane, rh, rw, pos);
                    let m = msk[j * n + i];
                    for a in 0..2 {
                        if !clamped[a] {
                            doff[(2 * j + a) * n + i] += d * m * grad[a];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, masks, Tensor::new(vec![9, h, w], dmask).expect("mask dims"));
        self.accumulate(grads, offsets, Tensor::new(vec![18, h, w], doff).expect("offset dims"));
    }
}

/// Bilinear sample of a `rh × rw` plane at an in-range `[row, col]`, with
/// its partial derivatives.
#[inline]
pub(crate) fn bilinear(plane: &[f64], rh: usize, rw: usize, pos: [f64; 2]) -> (f64, [f64; 2]) {
    let (y, x) = (pos[0], pos[1]);
    let y0 = (y.floor() as usize).min(rh.saturating_sub(2));
    let x0 = (x.floor() as usize).min(rw.saturating_sub(2));
    let y1 = (y0 + 1).min(rh - 1);
    let x1 = (x0 + 1).min(rw - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let f00 = plane[y0 * rw + x0];
    let f01 = plane[y0 * rw + x1];
    let f10 = plane[y1 * rw + x0];
    let f11 = plane[y1 * rw + x1];
    let top = f00 + fx * (f01 - f00);
    let bottom = f10 + fx * (f11 - f10);
    let value = top + fy * (bottom - top);
    let dy = if rh > 1 { bottom - top } else { 0.0 };
    let dx = if rw > 1 {
        (1.0 - fy) * (f01 - f00) + fy * (f11 - f10)
    } else {
        0.0
    };
    (value, [dy, dx])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Directional finite-difference check of `f` at `params[which]`.
///
/// Compares `⟨∇f, v⟩` against `(f(θ + h v) − f(θ − h v)) / 2h` for
/// `projections` random unit directions `v`; returns the worst relative error
/// `|fd − an| / max(|fd|, |an|, floor)`. Directions that disagree are
/// re-measured once at a tenth of the step.
pub fn directional_check(
    params: &[Tensor],
    which: usize,
    analytic: &Tensor,
    f: &dyn Fn(&[Tensor]) -> f64,
    projections: usize,
    step: f64,
    rng: &mut crate::rng::Rng,
) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..projections {
        let mut dir = Tensor::randn(params[which].shape(), 1.0, rng);
        let norm = dir.dot(&dir).sqrt();
        dir = dir.scale(1.0 / norm);
        let an = analytic.dot(&dir);
        let err_at = |h: f64| {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            for ((p, m), d) in plus[which].data_mut().iter_mut().zip(minus[which].data_mut()).zip(dir.data()) {
                *p += h * d;
                *m -= h * d;
            }
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8)
        };
        // a disagreement can come from straddling a kink (relu, bilinear
        // cell boundary, clamp); a real gradient bug survives a smaller step
        let mut err = err_at(step);
        if err > 1e-3 {
            err = err.min(err_at(step / 10.0));
        }
        worst = worst.max(err);
    }
    worst
}
