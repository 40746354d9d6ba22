//! Seeded synthetic Ref-SR corpus: pattern families rendered on a canvas
//! larger than the HR frame so references can be shifted or rotated crops.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{load_image, save_image};
use crate::linop::{LinearOperator, OperatorKind};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Checkerboard,
    Gradient,
    Blobs,
    Strokes,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Checkerboard, Family::Gradient, Family::Blobs, Family::Strokes];

    pub fn name(self) -> &'static str {
        match self {
            Family::Checkerboard => "checkerboard",
            Family::Gradient => "gradient",
            Family::Blobs => "blobs",
            Family::Strokes => "strokes",
        }
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pattern family `{s}`")))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefPolicy {
    Translated,
    Rotated,
    /// Unrelated sample: the undermatch case.
    Unrelated,
}

impl RefPolicy {
    pub fn name(self) -> &'static str {
        match self {
            RefPolicy::Translated => "translated",
            RefPolicy::Rotated => "rotated",
            RefPolicy::Unrelated => "unrelated",
        }
    }

    pub fn is_matched(self) -> bool {
        self != RefPolicy::Unrelated
    }
}

impl FromStr for RefPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [RefPolicy::Translated, RefPolicy::Rotated, RefPolicy::Unrelated]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown reference policy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub pairs: usize,
    pub lr_size: usize,
    pub scale: usize,
    pub seed: u64,
    pub families: Vec<Family>,
    pub rotated_fraction: f64,
    pub unrelated_fraction: f64,
    /// Largest reference shift, in HR pixels.
    pub max_shift: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            pairs: 100,
            lr_size: 40,
            scale: 4,
            seed: 1,
            families: Family::ALL.to_vec(),
            rotated_fraction: 0.2,
            unrelated_fraction: 0.2,
            max_shift: 24,
        }
    }
}

pub const CORPUS_KEYS: &[&str] = &[
    "pairs",
    "lr_size",
    "scale",
    "corpus_seed",
    "families",
    "rotated_fraction",
    "unrelated_fraction",
    "max_shift",
];

impl CorpusSpec {
    pub fn from_config(c: &Config) -> Result<Self> {
        let d = CorpusSpec::default();
        let spec = CorpusSpec {
            pairs: c.get("pairs", d.pairs)?,
            lr_size: c.get("lr_size", d.lr_size)?,
            scale: c.get("scale", d.scale)?,
            seed: c.get("corpus_seed", d.seed)?,
            families: c.get_list("families", d.families)?,
            rotated_fraction: c.get("rotated_fraction", d.rotated_fraction)?,
            unrelated_fraction: c.get("unrelated_fraction", d.unrelated_fraction)?,
            max_shift: c.get("max_shift", d.max_shift)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale != 4 {
            return Err(Error::InvalidArgument(format!("corpus scale must be 4, got {}", self.scale)));
        }
        if self.lr_size == 0 || self.families.is_empty() {
            return Err(Error::InvalidArgument("corpus needs a positive size and at least one family".into()));
        }
        let f = self.rotated_fraction + self.unrelated_fraction;
        if !(0.0..=1.0).contains(&self.rotated_fraction) || !(0.0..=1.0).contains(&self.unrelated_fraction) || f > 1.0 {
            return Err(Error::InvalidArgument("reference policy fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }

    pub fn hr_size(&self) -> usize {
        self.lr_size * self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPair {
    pub id: String,
    pub family: Family,
    pub policy: RefPolicy,
    pub lr: Image,
    pub hr: Image,
    pub reference: Image,
}

fn color(rng: &mut Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.uniform_range(0.05, 0.95))
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Render one pattern of `family` on a `size × size` canvas.
pub fn render(family: Family, size: usize, rng: &mut Rng) -> Image {
    let theta = rng.uniform_range(0.0, std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let (a, b) = (color(rng), color(rng));
    let rot = move |r: f64, c: f64| (c * ct + r * st, -c * st + r * ct);
    let mut img = Image::zeros(size, size, 3);
    let mut put = |f: &dyn Fn(f64, f64) -> [f64; 3]| {
        for r in 0..size {
            for c in 0..size {
                let v = f(r as f64, c as f64);
                for (ch, x) in v.iter().enumerate() {
                    img.set(r, c, ch, x.clamp(0.0, 1.0));
                }
            }
        }
    };
    match family {
        Family::Checkerboard => {
            let period = rng.uniform_range(6.0, 20.0);
            let sharp = rng.uniform_range(2.0, 6.0);
            put(&|r, c| {
                let (u, v) = rot(r, c);
                let s = (std::f64::consts::PI * u / period).sin() * (std::f64::consts::PI * v / period).sin();
                mix(a, b, 0.5 + 0.5 * (sharp * s).tanh())
            });
        }
        Family::Gradient => {
            let period = rng.uniform_range(5.0, 16.0);
            let amp = rng.uniform_range(0.2, 0.5);
            let ramp = rng.uniform_range(-0.5, 0.5) / size as f64;
            put(&|r, c| {
                let (u, v) = rot(r, c);
                let t = 0.5 + amp * (2.0 * std::f64::consts::PI * u / period).sin() + ramp * v;
                mix(a, b, t)
            });
        }
        Family::Blobs => {
            let n = 8 + rng.below(13);
            let blobs: Vec<_> = (0..n)
                .map(|_| {
                    let (y, x) = (rng.uniform_range(0.0, size as f64), rng.uniform_range(0.0, size as f64));
                    let s = rng.uniform_range(3.0, 12.0);
                    (y, x, s, color(rng))
                })
                .collect();
            put(&|r, c| {
                let mut v = a;
                for &(y, x, s, col) in &blobs {
                    let w = (-((r - y).powi(2) + (c - x).powi(2)) / (2.0 * s * s)).exp();
                    v = mix(v, col, w);
                }
                v
            });
        }
        Family::Strokes => {
            let n = 6 + rng.below(9);
            let strokes: Vec<_> = (0..n)
                .map(|_| {
                    let p0 = (rng.uniform_range(0.0, size as f64), rng.uniform_range(0.0, size as f64));
                    let len = rng.uniform_range(10.0, 50.0);
                    let ang = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
                    let p1 = (p0.0 + len * ang.sin(), p0.1 + len * ang.cos());
                    (p0, p1, rng.uniform_range(1.5, 3.5), color(rng))
                })
                .collect();
            put(&|r, c| {
                let mut v = a;
                for &((y0, x0), (y1, x1), width, col) in &strokes {
                    let (dy, dx) = (y1 - y0, x1 - x0);
                    let t = (((r - y0) * dy + (c - x0) * dx) / (dy * dy + dx * dx)).clamp(0.0, 1.0);
                    let d = ((r - y0 - t * dy).powi(2) + (c - x0 - t * dx).powi(2)).sqrt();
                    v = mix(v, col, 1.0 - smoothstep(d - width + 0.5));
                }
                v
            });
        }
    }
    img
}

/// Deterministic corpus for `spec`.
pub fn make_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusPair>> {
    spec.validate()?;
    let hr_size = spec.hr_size();
    let m = spec.max_shift;
    let canvas = hr_size + 2 * m;
    let op = LinearOperator::build(OperatorKind::BicubicDown, spec.scale, (hr_size, hr_size))?;
    (0..spec.pairs)
        .map(|i| {
            let mut rng = Rng::keyed(spec.seed, &[i as u64]);
            let family = spec.families[i % spec.families.len()];
            let u = rng.uniform();
            let policy = if u < spec.unrelated_fraction {
                RefPolicy::Unrelated
            } else if u < spec.unrelated_fraction + spec.rotated_fraction {
                RefPolicy::Rotated
            } else {
                RefPolicy::Translated
            };
            let source = render(family, canvas, &mut rng);
            let hr = source.crop(m, m, hr_size, hr_size)?;
            let reference = match policy {
                RefPolicy::Unrelated => {
                    let other = spec.families[(i + 1) % spec.families.len()];
                    render(other, hr_size, &mut rng)
                }
                _ => {
                    let dy = rng.below(2 * m + 1);
                    let dx = rng.below(2 * m + 1);
                    let crop = source.crop(dy, dx, hr_size, hr_size)?;
                    if policy == RefPolicy::Rotated {
                        crop.rot90(1 + rng.below(3))
                    } else {
                        crop
                    }
                }
            };
            let lr = op.apply(&hr)?;
            Ok(CorpusPair {
                id: format!("{i:04}"),
                family,
                policy,
                lr,
                hr,
                reference,
            })
        })
        .collect()
}

/// Write `<id>_lr.png`, `<id>_ref.png`, `<id>_hr.png` and a `corpus.csv`
/// manifest.
pub fn write_corpus(pairs: &[CorpusPair], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut manifest = String::from("id,family,policy\n");
    for p in pairs {
        save_image(&p.lr, dir.join(format!("{}_lr.png", p.id)))?;
        save_image(&p.reference, dir.join(format!("{}_ref.png", p.id)))?;
        save_image(&p.hr, dir.join(format!("{}_hr.png", p.id)))?;
        manifest.push_str(&format!("{},{},{}\n", p.id, p.family, p.policy.name()));
    }
    let path = dir.join("corpus.csv");
    std::fs::write(&path, manifest).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

/// One `<id>_lr.png` / `<id>_ref.png` / `<id>_hr.png` triplet on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub lr: Image,
    pub reference: Image,
    pub hr: Image,
}

/// Every complete triplet in `dir`, sorted by id.
pub fn read_triplets(dir: &Path) -> Result<Vec<Triplet>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_lr.png")).map(String::from))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!("no <id>_lr.png files in {}", dir.display())));
    }
    ids.into_iter()
        .map(|id| {
            Ok(Triplet {
                lr: load_image(dir.join(format!("{id}_lr.png")))?,
                reference: load_image(dir.join(format!("{id}_ref.png")))?,
                hr: load_image(dir.join(format!("{id}_hr.png")))?,
                id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspond::{match_features, FeatureExtractor};

    fn small(pairs: usize) -> CorpusSpec {
        CorpusSpec {
            pairs,
            lr_size: 12,
            max_shift: 8,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn deterministic_and_consistent() {
        let spec = small(6);
        let a = make_corpus(&spec).unwrap();
        assert_eq!(a, make_corpus(&spec).unwrap());
        let op = LinearOperator::build(OperatorKind::BicubicDown, 4, (48, 48)).unwrap();
        for p in &a {
            assert_eq!(p.hr.dims(), (48, 48, 3));
            assert_eq!(p.reference.dims(), (48, 48, 3));
            assert!(op.apply(&p.hr).unwrap().max_abs_diff(&p.lr) < 1e-12);
        }
        let families: Vec<_> = a.iter().map(|p| p.family).collect();
        assert_eq!(&families[..4], &Family::ALL);
        let other = make_corpus(&CorpusSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn policies_follow_fractions() {
        let pairs = make_corpus(&CorpusSpec {
            lr_size: 4,
            max_shift: 2,
            ..CorpusSpec::default()
        })
        .unwrap();
        let unrelated = pairs.iter().filter(|p| p.policy == RefPolicy::Unrelated).count();
        assert!((8..=35).contains(&unrelated), "{unrelated}");
    }

    #[test]
    fn matched_references_are_more_relevant() {
        let ex = FeatureExtractor::new(3);
        let pairs = make_corpus(&CorpusSpec {
            pairs: 24,
            rotated_fraction: 0.0,
            unrelated_fraction: 0.5,
            ..small(24)
        })
        .unwrap();
        let mut matched = Vec::new();
        let mut unrelated = Vec::new();
        for p in &pairs {
            let q = ex.extract(&p.hr).unwrap();
            let r = ex.extract(&p.reference).unwrap();
            let m = match_features(q.coarsest(), r.coarsest()).unwrap();
            let best = m.confidence.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if p.policy.is_matched() { matched.push(best) } else { unrelated.push(best) }
        }
        unrelated.sort_by(f64::total_cmp);
        let median = unrelated[unrelated.len() / 2];
        let above = matched.iter().filter(|&&c| c > median).count();
        assert!(above * 4 >= matched.len() * 3, "{above} of {} above {median}", matched.len());
    }

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = make_corpus(&small(2)).unwrap();
        write_corpus(&pairs, dir.path()).unwrap();
        let back = read_triplets(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].id, "0001");
        assert!(back[0].hr.max_abs_diff(&pairs[0].hr) <= 0.5 / 255.0 + 1e-12);
        let manifest = std::fs::read_to_string(dir.path().join("corpus.csv")).unwrap();
        assert!(manifest.starts_with("id,family,policy\n0000,checkerboard,"));
    }

    #[test]
    fn config_and_validation() {
        let c = Config::parse("pairs = 3\nfamilies = blobs, strokes\ncorpus_seed = 9\n").unwrap();
        let s = CorpusSpec::from_config(&c).unwrap();
        assert_eq!((s.pairs, s.seed), (3, 9));
        assert_eq!(s.families, vec![Family::Blobs, Family::Strokes]);
        assert!(CorpusSpec::from_config(&Config::parse("scale = 2").unwrap()).is_err());
        assert!(CorpusSpec::from_config(&Config::parse("families = dots").unwrap()).is_err());
        assert!(CorpusSpec::from_config(&Config::parse("unrelated_fraction = 0.7\nrotated_fraction = 0.5").unwrap()).is_err());
    }
}
