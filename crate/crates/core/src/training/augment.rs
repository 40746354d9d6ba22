//! Dihedral augmentation: quarter-turn rotations and independent flips.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    /// Counter-clockwise quarter turns, `0..4`.
    pub quarter_turns: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        quarter_turns: 0,
        flip_h: false,
        flip_v: false,
    };

    pub fn draw(rng: &mut Rng) -> Self {
        Transform {
            quarter_turns: rng.below(4),
            flip_h: rng.coin(),
            flip_v: rng.coin(),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Rotate, then flip.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        if self.quarter_turns % 2 == 1 && img.height() != img.width() {
            return Err(Error::ImageDimensions(format!(
                "a {}-degree rotation needs a square image, got {}x{}",
                90 * self.quarter_turns,
                img.height(),
                img.width()
            )));
        }
        let mut out = img.rot90(self.quarter_turns);
        if self.flip_h {
            out = out.flip_horizontal();
        }
        if self.flip_v {
            out = out.flip_vertical();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub lr: Image,
    pub hr: Image,
    pub reference: Image,
}

/// LR and HR share one transform; the reference draws its own.
pub fn augment(pair: &AugmentedPair, rng: &mut Rng) -> Result<AugmentedPair> {
    let shared = Transform::draw(rng);
    let own = Transform::draw(rng);
    Ok(AugmentedPair {
        lr: shared.apply(&pair.lr)?,
        hr: shared.apply(&pair.hr)?,
        reference: own.apply(&pair.reference)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_involutions() {
        let img = Rng::new(1).uniform_image(6, 6, 3);
        assert_eq!(Transform::IDENTITY.apply(&img).unwrap(), img);
        let half = Transform {
            quarter_turns: 2,
            ..Transform::IDENTITY
        };
        assert_eq!(half.apply(&half.apply(&img).unwrap()).unwrap(), img);
        let flip = Transform {
            flip_h: true,
            flip_v: true,
            ..Transform::IDENTITY
        };
        assert_eq!(flip.apply(&img).unwrap(), half.apply(&img).unwrap());
    }

    #[test]
    fn non_square_rotation_rejected() {
        let img = Image::zeros(4, 6, 1);
        let quarter = Transform {
            quarter_turns: 1,
            ..Transform::IDENTITY
        };
        assert!(matches!(quarter.apply(&img), Err(Error::ImageDimensions(_))));
        let half = Transform {
            quarter_turns: 2,
            ..Transform::IDENTITY
        };
        assert!(half.apply(&img).is_ok());
    }

    #[test]
    fn rotation_frequencies_are_uniform() {
        // 4000 draws, p = 1/4: sd of a frequency is sqrt(p(1-p)/n) ≈ 0.0068,
        // so ±2% is about 3 sd
        let mut rng = Rng::new(2);
        let mut counts = [0usize; 4];
        let mut flips = 0;
        for _ in 0..4000 {
            let t = Transform::draw(&mut rng);
            counts[t.quarter_turns] += 1;
            flips += t.flip_h as usize;
        }
        for c in counts {
            assert!((c as f64 / 4000.0 - 0.25).abs() <= 0.02, "{counts:?}");
        }
        assert!((flips as f64 / 4000.0 - 0.5).abs() <= 0.025);
    }

    #[test]
    fn shared_transform_keeps_pairs_aligned() {
        let mut rng = Rng::new(3);
        let hr = rng.uniform_image(8, 8, 3);
        let lr = hr.clone();
        let pair = AugmentedPair {
            lr,
            hr,
            reference: rng.uniform_image(8, 8, 3),
        };
        for s in 0..16 {
            let out = augment(&pair, &mut Rng::new(s)).unwrap();
            assert_eq!(out.lr, out.hr);
        }
    }
}
