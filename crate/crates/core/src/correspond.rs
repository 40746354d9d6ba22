//! Frozen feature pyramid, patch unfolding and cosine patch matching.

use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;
use crate::tensor::{gemm, ConvGeometry, Tensor};

pub const LEVEL_CHANNELS: [usize; 3] = [16, 32, 64];
pub const LEVEL_SCALES: [usize; 3] = [1, 2, 4];
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5EED_F00D;
const ZERO_NORM: f64 = 1e-12;

/// Seeded, frozen convolutional pyramid: per level a bias-free 3×3
/// convolution and ReLU, with 2× average pooling between levels.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    weights: Vec<Tensor>,
    id: String,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut cin = 3;
        let mut weights = Vec::new();
        for &cout in &LEVEL_CHANNELS {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            weights.push(Tensor::randn(&[cout, cin, 3, 3], std, &mut rng));
            cin = cout;
        }
        let mut hasher = Sha256::new();
        for w in &weights {
            for v in w.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let id = hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
        FeatureExtractor { weights, id }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Pyramid levels for a `3 × H × W` node; the weights enter as constants.
    pub fn forward(&self, g: &mut Graph, x: Var, levels: usize) -> Vec<Var> {
        let mut out = Vec::with_capacity(levels);
        let mut h = x;
        for (l, w) in self.weights.iter().take(levels).enumerate() {
            if l > 0 {
                h = g.avg_pool2(h);
            }
            let wv = g.constant(w.clone());
            let c = g.conv(h, wv, None, ConvGeometry::SAME3);
            h = g.relu(c);
            out.push(h);
        }
        out
    }

    pub fn extract(&self, img: &Image) -> Result<FeaturePyramid> {
        let (h, w, _) = img.dims();
        if h % 4 != 0 {
            return Err(Error::NotDivisible { dim: h, divisor: 4 });
        }
        if w % 4 != 0 {
            return Err(Error::NotDivisible { dim: w, divisor: 4 });
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_image(&img.to_rgb()));
        let vars = self.forward(&mut g, x, LEVEL_CHANNELS.len());
        Ok(FeaturePyramid {
            levels: vars.iter().map(|&v| g.value(v).clone()).collect(),
            extractor_id: self.id.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub extractor_id: String,
}

impl FeaturePyramid {
    pub fn coarsest(&self) -> &Tensor {
        self.levels.last().expect("pyramid has levels")
    }

    /// Spatial window of every level; `row`, `col`, `h`, `w` are full-scale
    /// and must be multiples of the coarsest stride.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> FeaturePyramid {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .zip(LEVEL_SCALES)
                .map(|(t, s)| t.crop(row / s, col / s, h / s, w / s))
                .collect(),
            extractor_id: self.extractor_id.clone(),
        }
    }
}

/// Unfolded patches, one row per patch in row-major patch-grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub grid: (usize, usize),
    pub dim: usize,
    pub data: Vec<f64>,
    pub geometry: PatchGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub k: usize,
    pub stride: usize,
    /// Replicate padding added on every side before unfolding.
    pub pad: usize,
}

impl PatchGeometry {
    /// Feature-map position at the centre of patch `(pr, pc)`.
    pub fn center(&self, pr: usize, pc: usize) -> (isize, isize) {
        let off = (self.k / 2) as isize - self.pad as isize;
        ((pr * self.stride) as isize + off, (pc * self.stride) as isize + off)
    }
}

impl Patches {
    pub fn count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn scale_patch(&mut self, i: usize, k: f64) {
        for v in &mut self.data[i * self.dim..(i + 1) * self.dim] {
            *v *= k;
        }
    }
}

/// `k × k × C` patches at the given stride, flattened tap-major.
pub fn unfold(f: &Tensor, k: usize, stride: usize) -> Result<Patches> {
    unfold_padded(f, k, stride, 0)
}

/// [`unfold`] after replicate-padding every side by `pad`.
pub fn unfold_padded(f: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Patches> {
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be at least 1".into()));
    }
    let (c, h, w) = f.chw();
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    if k > hp || k > wp {
        return Err(Error::InvalidArgument(format!("patch size {k} exceeds {hp}x{wp} map")));
    }
    let grid = ((hp - k) / stride + 1, (wp - k) / stride + 1);
    let dim = k * k * c;
    let mut data = Vec::with_capacity(grid.0 * grid.1 * dim);
    let x = f.data();
    let at = |p: usize, n: usize| (p as isize - pad as isize).clamp(0, n as isize - 1) as usize;
    for pr in 0..grid.0 {
        for pc in 0..grid.1 {
            for ky in 0..k {
                let r = at(pr * stride + ky, h);
                for kx in 0..k {
                    let col = at(pc * stride + kx, w);
                    for ch in 0..c {
                        data.push(x[(ch * h + r) * w + col]);
                    }
                }
            }
        }
    }
    Ok(Patches {
        grid,
        dim,
        data,
        geometry: PatchGeometry { k, stride, pad },
    })
}

/// Index and confidence maps over a query patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub index: Vec<usize>,
    pub confidence: Vec<f64>,
    pub query_grid: (usize, usize),
    pub ref_grid: (usize, usize),
    pub geometry: PatchGeometry,
}

impl CorrespondenceMap {
    /// Identity map on a `h × w` grid of one-per-position patches.
    pub fn identity(h: usize, w: usize) -> Self {
        CorrespondenceMap {
            index: (0..h * w).collect(),
            confidence: vec![1.0; h * w],
            query_grid: (h, w),
            ref_grid: (h, w),
            geometry: PatchGeometry { k: 3, stride: 1, pad: 1 },
        }
    }

    /// Reference feature-map position each query patch points at.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        self.index
            .iter()
            .map(|&j| {
                let (r, c) = self.geometry.center(j / self.ref_grid.1, j % self.ref_grid.1);
                [r as f64, c as f64]
            })
            .collect()
    }

    /// Carry a one-per-position map to a level `factor` times finer: query
    /// `(y, x)` takes its coarse parent's match, offset by `(y mod f, x mod f)`.
    pub fn rescale(&self, factor: usize) -> Result<CorrespondenceMap> {
        let g = self.geometry;
        if g.stride != 1 || 2 * g.pad + 1 != g.k {
            return Err(Error::InvalidArgument("rescale needs a one-patch-per-position map".into()));
        }
        let (qh, qw) = (self.query_grid.0 * factor, self.query_grid.1 * factor);
        let (rh, rw) = (self.ref_grid.0 * factor, self.ref_grid.1 * factor);
        let mut index = Vec::with_capacity(qh * qw);
        let mut confidence = Vec::with_capacity(qh * qw);
        for y in 0..qh {
            for x in 0..qw {
                let parent = (y / factor) * self.query_grid.1 + x / factor;
                let j = self.index[parent];
                let (cr, cc) = (j / self.ref_grid.1, j % self.ref_grid.1);
                let fr = cr * factor + y % factor;
                let fc = cc * factor + x % factor;
                index.push(fr * rw + fc);
                confidence.push(self.confidence[parent]);
            }
        }
        Ok(CorrespondenceMap {
            index,
            confidence,
            query_grid: (qh, qw),
            ref_grid: (rh, rw),
            geometry: g,
        })
    }

    /// Sub-map for a query window, in query-grid units.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> CorrespondenceMap {
        let mut index = Vec::with_capacity(h * w);
        let mut confidence = Vec::with_capacity(h * w);
        for r in row..row + h {
            let start = r * self.query_grid.1 + col;
            index.extend_from_slice(&self.index[start..start + w]);
            confidence.extend_from_slice(&self.confidence[start..start + w]);
        }
        CorrespondenceMap {
            index,
            confidence,
            query_grid: (h, w),
            ..self.clone()
        }
    }
}

fn normalized(p: &Patches) -> (Vec<f64>, Vec<bool>) {
    let mut out = p.data.clone();
    let mut live = Vec::with_capacity(p.count());
    for row in out.chunks_mut(p.dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            row.iter_mut().for_each(|v| *v = 0.0);
            live.push(false);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
            live.push(true);
        }
    }
    (out, live)
}

/// Reference patches scored per GEMM tile.
const KEY_TILE: usize = 256;

/// Cosine relevance argmax over all reference patches; ties go to the
/// smallest index.
pub fn match_patches(q: &Patches, k: &Patches) -> Result<CorrespondenceMap> {
    match_patches_blocked(q, k, k.count().max(1))
}

/// [`match_patches`] evaluated over reference blocks of `block` patches with
/// a running maximum. Bit-identical to the unblocked form.
pub fn match_patches_blocked(q: &Patches, k: &Patches, block: usize) -> Result<CorrespondenceMap> {
    if q.count() == 0 || k.count() == 0 {
        return Err(Error::InvalidArgument("empty patch set".into()));
    }
    if q.dim != k.dim {
        return Err(Error::shape("match", q.dim, k.dim));
    }
    let block = block.max(1);
    let (qn, qlive) = normalized(q);
    let (kn, klive) = normalized(k);
    let d = q.dim;
    let mut best = vec![(0usize, f64::NEG_INFINITY); q.count()];
    let nq = q.count();
    let mut scores = vec![0.0; nq * KEY_TILE.min(block)];
    for start in (0..k.count()).step_by(block) {
        let end = (start + block).min(k.count());
        for tile in (start..end).step_by(KEY_TILE) {
            let nk = (tile + KEY_TILE).min(end) - tile;
            let s = &mut scores[..nq * nk];
            gemm(nq, d, nk, 1.0, &qn, (d as isize, 1), &kn[tile * d..], (1, d as isize), 0.0, s);
            for (i, slot) in best.iter_mut().enumerate() {
                for (o, &r) in s[i * nk..(i + 1) * nk].iter().enumerate() {
                    let j = tile + o;
                    let r = if qlive[i] && klive[j] { r } else { 0.0 };
                    if r > slot.1 {
                        *slot = (j, r);
                    }
                }
            }
        }
    }
    Ok(CorrespondenceMap {
        index: best.iter().map(|b| b.0).collect(),
        confidence: best.iter().map(|b| b.1.clamp(-1.0, 1.0)).collect(),
        query_grid: q.grid,
        ref_grid: k.grid,
        geometry: k.geometry,
    })
}

/// Match one-per-position 3×3 patches of two feature maps.
pub fn match_features(query: &Tensor, reference: &Tensor) -> Result<CorrespondenceMap> {
    let q = unfold_padded(query, 3, 1, 1)?;
    let k = unfold_padded(reference, 3, 1, 1)?;
    match_patches(&q, &k)
}

/// Coarsest-level match carried to every pyramid level, finest first.
pub fn match_pyramids(query: &FeaturePyramid, reference: &FeaturePyramid) -> Result<Vec<CorrespondenceMap>> {
    if query.extractor_id != reference.extractor_id {
        return Err(Error::InvalidArgument("pyramids come from different extractors".into()));
    }
    let coarse = match_features(query.coarsest(), reference.coarsest())?;
    let top = LEVEL_SCALES.len() - 1;
    (0..=top)
        .map(|l| {
            let f = LEVEL_SCALES[top] / LEVEL_SCALES[l];
            if f == 1 {
                Ok(coarse.clone())
            } else {
                coarse.rescale(f)
            }
        })
        .collect()
}

/// Centre-pixel gather of reference features along the index map.
pub fn warp(f_ref: &Tensor, cmap: &CorrespondenceMap) -> Result<Tensor> {
    let (c, rh, rw) = f_ref.chw();
    let limit = cmap.ref_grid.0 * cmap.ref_grid.1;
    let (qh, qw) = cmap.query_grid;
    let n = qh * qw;
    let mut out = vec![0.0; c * n];
    for (i, &j) in cmap.index.iter().enumerate() {
        if j >= limit {
            return Err(Error::IndexOutOfRange { index: j, limit });
        }
        let (r, col) = cmap.geometry.center(j / cmap.ref_grid.1, j % cmap.ref_grid.1);
        let r = r.clamp(0, rh as isize - 1) as usize;
        let col = col.clamp(0, rw as isize - 1) as usize;
        for ch in 0..c {
            out[ch * n + i] = f_ref.data()[(ch * rh + r) * rw + col];
        }
    }
    Tensor::new(vec![c, qh, qw], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn random_patches(rng: &mut Rng, count: usize, dim: usize) -> Patches {
        Patches {
            grid: (1, count),
            dim,
            data: rng.normal_vec(count * dim),
            geometry: PatchGeometry { k: 1, stride: 1, pad: 0 },
        }
    }

    #[test]
    fn pyramid_shapes_and_determinism() {
        let ex = FeatureExtractor::new(1);
        let img = Rng::new(2).uniform_image(16, 24, 3);
        let a = ex.extract(&img).unwrap();
        let b = FeatureExtractor::new(1).extract(&img).unwrap();
        assert_eq!(a, b);
        let shapes: Vec<_> = a.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 16, 24], vec![32, 8, 12], vec![64, 4, 6]]);
        assert_ne!(FeatureExtractor::new(3).id(), ex.id());
        assert!(matches!(ex.extract(&Image::zeros(10, 8, 3)), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn zero_image_zero_features() {
        let p = FeatureExtractor::new(1).extract(&Image::zeros(8, 8, 3)).unwrap();
        assert!(p.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn shift_equivariance_in_interior() {
        let ex = FeatureExtractor::new(4);
        let big = Rng::new(5).uniform_image(48, 48, 3);
        let a = ex.extract(&big.crop(0, 0, 40, 40).unwrap()).unwrap();
        let b = ex.extract(&big.crop(4, 8, 40, 40).unwrap()).unwrap();
        for (l, s) in LEVEL_SCALES.iter().enumerate() {
            let (c, h, w) = a.levels[l].chw();
            let (dy, dx) = (4 / s, 8 / s);
            // receptive field grows by 1 per level and 1 per pooled level
            let margin = 3 * (l + 1);
            for ch in 0..c {
                for r in margin..h - dy - margin {
                    for col in margin..w - dx - margin {
                        let va = a.levels[l].data()[(ch * h + r + dy) * w + col + dx];
                        let vb = b.levels[l].data()[(ch * h + r) * w + col];
                        assert!((va - vb).abs() < 1e-12, "level {l}");
                    }
                }
            }
        }
    }

    #[test]
    fn unfold_examples() {
        let f = Tensor::new(vec![2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let p = unfold(&f, 1, 1).unwrap();
        assert_eq!(p.count(), 9);
        assert_eq!(p.patch(4), &[4.0, 13.0]);
        let whole = unfold(&f, 3, 1).unwrap();
        assert_eq!(whole.count(), 1);
        assert_eq!(whole.dim, 18);

        let g = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = unfold(&g, 2, 2).unwrap();
        assert_eq!(p.grid, (2, 2));
        let expected = [[0.0, 1.0, 4.0, 5.0], [2.0, 3.0, 6.0, 7.0], [8.0, 9.0, 12.0, 13.0], [10.0, 11.0, 14.0, 15.0]];
        for (i, e) in expected.iter().enumerate() {
            assert_eq!(p.patch(i), e);
        }
        assert!(unfold(&g, 5, 1).is_err());
        assert!(unfold(&g, 2, 0).is_err());
    }

    #[test]
    fn unfold_count_formula() {
        for (h, w, k, s) in [(7, 9, 3, 2), (10, 10, 4, 3), (5, 8, 1, 3)] {
            let p = unfold(&Tensor::zeros(&[1, h, w]), k, s).unwrap();
            assert_eq!(p.count(), ((h - k) / s + 1) * ((w - k) / s + 1));
        }
    }

    #[test]
    fn self_match_is_identity() {
        let mut rng = Rng::new(6);
        let p = random_patches(&mut rng, 30, 7);
        let m = match_patches(&p, &p).unwrap();
        assert_eq!(m.index, (0..30).collect::<Vec<_>>());
        assert!(m.confidence.iter().all(|c| (c - 1.0).abs() < 1e-9));
    }

    #[test]
    fn scaled_query_finds_its_source() {
        let mut k = Patches {
            grid: (1, 8),
            dim: 8,
            data: vec![0.0; 64],
            geometry: PatchGeometry { k: 1, stride: 1, pad: 0 },
        };
        for j in 0..8 {
            k.data[j * 8 + j] = 1.0 + j as f64;
        }
        let mut q = k.clone();
        q.data.truncate(8);
        q.grid = (1, 1);
        q.data.iter_mut().for_each(|v| *v = 0.0);
        q.data[5] = 2.0 * k.data[5 * 8 + 5];
        let m = match_patches(&q, &k).unwrap();
        assert_eq!(m.index, vec![5]);
        assert!((m.confidence[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_patches_get_zero_relevance() {
        let mut rng = Rng::new(7);
        let mut q = random_patches(&mut rng, 3, 4);
        q.scale_patch(1, 0.0);
        let k = random_patches(&mut rng, 5, 4);
        let m = match_patches(&q, &k).unwrap();
        assert_eq!((m.index[1], m.confidence[1]), (0, 0.0));
    }

    #[test]
    fn match_errors() {
        let mut rng = Rng::new(8);
        let a = random_patches(&mut rng, 3, 4);
        let b = random_patches(&mut rng, 3, 5);
        assert!(match_patches(&a, &b).is_err());
        let empty = Patches { grid: (0, 0), data: vec![], ..a.clone() };
        assert!(match_patches(&empty, &a).is_err());
    }

    #[test]
    fn warp_examples() {
        let mut rng = Rng::new(9);
        let f = Tensor::randn(&[3, 5, 6], 1.0, &mut rng);
        let id = CorrespondenceMap::identity(5, 6);
        assert_eq!(warp(&f, &id).unwrap(), f);

        let constant = Tensor::filled(&[2, 5, 6], 0.25);
        let mut m = id.clone();
        for j in m.index.iter_mut() {
            *j = rng.below(30);
        }
        assert!(warp(&constant, &m).unwrap().data().iter().all(|&v| v == 0.25));

        let single = CorrespondenceMap {
            index: vec![13],
            confidence: vec![1.0],
            query_grid: (1, 1),
            ..id.clone()
        };
        let out = warp(&f, &single).unwrap();
        let (r, c) = (13 / 6, 13 % 6);
        for ch in 0..3 {
            assert_eq!(out.data()[ch], f.data()[(ch * 5 + r) * 6 + c]);
        }
        let bad = CorrespondenceMap { index: vec![30], ..single };
        assert!(matches!(warp(&f, &bad), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn rescale_keeps_subpixel_phase() {
        let mut m = CorrespondenceMap::identity(2, 3);
        m.index = vec![5, 4, 3, 2, 1, 0];
        let fine = m.rescale(2).unwrap();
        assert_eq!(fine.query_grid, (4, 6));
        // query (1, 3) has parent (0, 1) -> coarse ref 4 = (1, 1) -> fine (3, 3)
        assert_eq!(fine.index[6 + 3], 3 * 6 + 3);
        let id = CorrespondenceMap::identity(3, 4).rescale(4).unwrap();
        assert_eq!(id.index, (0..12 * 16).collect::<Vec<_>>());
    }

    #[test]
    fn pyramid_self_match_is_identity_dominant() {
        let ex = FeatureExtractor::new(10);
        let img = Rng::new(11).uniform_image(32, 32, 3);
        let p = ex.extract(&img).unwrap();
        let maps = match_pyramids(&p, &p).unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].index, (0..32 * 32).collect::<Vec<_>>());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn blocked_equals_brute_force(seed in any::<u64>(), nq in 1usize..12, nk in 1usize..12, block in 1usize..6) {
            let mut rng = Rng::new(seed);
            let q = random_patches(&mut rng, nq, 6);
            let k = random_patches(&mut rng, nk, 6);
            prop_assert_eq!(match_patches(&q, &k).unwrap(), match_patches_blocked(&q, &k, block).unwrap());
        }

        #[test]
        fn tiled_scan_matches_plain_loop(seed in any::<u64>(), nq in 1usize..11, nk in 60usize..150, d in 1usize..10) {
            let mut rng = Rng::new(seed);
            let q = random_patches(&mut rng, nq, d);
            let k = random_patches(&mut rng, nk, d);
            let got = match_patches(&q, &k).unwrap();
            let (qn, _) = normalized(&q);
            let (kn, _) = normalized(&k);
            for i in 0..nq {
                let (mut bj, mut br) = (0, f64::NEG_INFINITY);
                for j in 0..nk {
                    let r = qn[i * d..(i + 1) * d].iter().zip(&kn[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                    if r > br {
                        (bj, br) = (j, r);
                    }
                }
                // summation order differs, so near-ties may resolve either way
                let j = got.index[i];
                let chosen = qn[i * d..(i + 1) * d].iter().zip(&kn[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                prop_assert!((chosen - br).abs() < 1e-12, "query {} picked {} ({}) over {} ({})", i, j, chosen, bj, br);
                prop_assert!((got.confidence[i] - br.clamp(-1.0, 1.0)).abs() < 1e-12);
            }
        }

        #[test]
        fn positive_scaling_is_invisible(seed in any::<u64>(), s in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let mut q = random_patches(&mut rng, 6, 5);
            let k = random_patches(&mut rng, 9, 5);
            let before = match_patches(&q, &k).unwrap();
            q.scale_patch(2, s);
            let after = match_patches(&q, &k).unwrap();
            prop_assert_eq!(before.index, after.index);
            for (a, b) in before.confidence.iter().zip(&after.confidence) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn permuting_references_permutes_indices(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let q = random_patches(&mut rng, 5, 4);
            let k = random_patches(&mut rng, 7, 4);
            let perm: Vec<usize> = {
                let mut p: Vec<usize> = (0..7).collect();
                for i in (1..7).rev() {
                    p.swap(i, rng.below(i + 1));
                }
                p
            };
            let mut kp = k.clone();
            for (new, &old) in perm.iter().enumerate() {
                kp.data[new * 4..(new + 1) * 4].copy_from_slice(k.patch(old));
            }
            let a = match_patches(&q, &k).unwrap();
            let b = match_patches(&q, &kp).unwrap();
            for i in 0..5 {
                prop_assert_eq!(perm[b.index[i]], a.index[i]);
                prop_assert_eq!(a.confidence[i], b.confidence[i]);
            }
        }

        #[test]
        fn confidence_in_unit_interval(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let q = random_patches(&mut rng, 4, 3);
            let k = random_patches(&mut rng, 6, 3);
            let m = match_patches(&q, &k).unwrap();
            prop_assert!(m.confidence.iter().all(|c| (-1.0..=1.0).contains(c)));
        }
    }
}
