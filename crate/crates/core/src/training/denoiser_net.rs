//! Six-layer convolutional x0-predictor with the timestep as an extra
//! input channel, trained on the forward-diffusion objective.

use std::sync::Arc;

use crate::autograd::{Graph, Var};
use crate::diffusion::{borrowed, forward_diffuse, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::{ConvGeometry, Tensor};

pub const DENOISER_PREFIX: &str = "den.";
const LAYERS: usize = 6;

#[derive(Debug, Clone)]
pub struct LearnedTinyDenoiser {
    pub params: ParamStore,
    width: usize,
}

impl LearnedTinyDenoiser {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        for i in 0..LAYERS {
            let cin = if i == 0 { 4 } else { width };
            let cout = if i + 1 == LAYERS { 3 } else { width };
            let gain = if i + 1 == LAYERS { 0.1 } else { 1.0 };
            params.conv(&format!("{DENOISER_PREFIX}{i}.weight"), cout, cin, 3, gain, &mut rng);
            params.zeros(&format!("{DENOISER_PREFIX}{i}.bias"), &[cout]);
        }
        LearnedTinyDenoiser { params, width }
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let first = params
            .get(&format!("{DENOISER_PREFIX}0.weight"))
            .ok_or_else(|| Error::Checkpoint("checkpoint has no learned denoiser".into()))?;
        let mut d = LearnedTinyDenoiser::new(first.shape()[0], 0);
        for name in d.params.names() {
            if params.get(name).is_none() {
                return Err(Error::Checkpoint(format!("missing parameter {name}")));
            }
        }
        d.params.load_from(params)?;
        Ok(d)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `x_t + net([x_t, t/T])`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x_t: &Tensor, t: usize, timesteps: usize) -> Var {
        let (_, h, w) = x_t.chw();
        let x = g.constant(x_t.clone());
        let tc = g.constant(Tensor::filled(&[1, h, w], t as f64 / timesteps as f64));
        let mut hdn = g.concat(&[x, tc]);
        for i in 0..LAYERS {
            hdn = g.conv(hdn, b.at(2 * i), Some(b.at(2 * i + 1)), ConvGeometry::SAME3);
            if i + 1 < LAYERS {
                hdn = g.relu(hdn);
            }
        }
        g.add(x, hdn)
    }

    /// Denoising loss on one clean image at a random timestep, with
    /// gradients for every parameter.
    pub fn loss_and_grads(&self, x0: &Image, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<(f64, Vec<Tensor>)> {
        let t = 1 + rng.below(schedule.timesteps());
        let (h, w, c) = x0.dims();
        let noise = rng.normal_image(h, w, c);
        let x_t = forward_diffuse(x0, t, &noise, schedule)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let out = self.forward(&mut g, &b, &Tensor::from_image(&x_t.to_rgb()), t, schedule.timesteps());
        let loss = g.mse_to(out, Arc::new(Tensor::from_image(&x0.to_rgb())));
        let mut grads = g.backward(loss);
        Ok((g.scalar(loss), self.params.collect_grads(&b, &mut grads)))
    }
}

impl Denoiser for LearnedTinyDenoiser {
    fn estimate(&self, x_t: &Image, t: usize, schedule: &NoiseSchedule) -> Result<Image> {
        if t == 0 || t > schedule.timesteps() {
            return Err(Error::IndexOutOfRange {
                index: t,
                limit: schedule.timesteps() + 1,
            });
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &b, &Tensor::from_image(&x_t.to_rgb()), t, schedule.timesteps());
        let img = g.value(out).to_image()?;
        Ok(if x_t.channels() == 1 { img.channel(0) } else { img })
    }

    fn for_window(&self, _: usize, _: usize, _: usize, _: usize) -> Box<dyn Denoiser + '_> {
        borrowed(self)
    }

    fn name(&self) -> &str {
        "learned"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::directional_check;
    use crate::training::adam::{AdamConfig, AdamState};

    #[test]
    fn shapes_and_round_trip() {
        let d = LearnedTinyDenoiser::new(8, 1);
        assert_eq!(d.params.len(), 12);
        let x = Rng::new(2).uniform_image(8, 8, 3);
        let s = NoiseSchedule::standard();
        let e = d.estimate(&x, 10, &s).unwrap();
        assert_eq!(e.dims(), (8, 8, 3));
        assert!(d.estimate(&x, 0, &s).is_err());
        let back = LearnedTinyDenoiser::from_params(&d.params).unwrap();
        assert_eq!(back.estimate(&x, 10, &s).unwrap(), e);
        assert!(LearnedTinyDenoiser::from_params(&ParamStore::new()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = LearnedTinyDenoiser::new(3, 3);
        let x0 = Rng::new(4).uniform_image(6, 6, 3);
        let s = NoiseSchedule::standard();
        let (_, grads) = d.loss_and_grads(&x0, &s, &mut Rng::new(5)).unwrap();
        let f = |p: &[Tensor]| {
            let mut m = d.clone();
            m.params.tensors_mut().clone_from_slice(p);
            m.loss_and_grads(&x0, &s, &mut Rng::new(5)).unwrap().0
        };
        let params = d.params.tensors().to_vec();
        let mut rng = Rng::new(6);
        for k in 0..params.len() {
            let err = directional_check(&params, k, &grads[k], &f, 5, 1e-5, &mut rng);
            assert!(err < 1e-4, "{}: {err}", d.params.names()[k]);
        }
    }

    #[test]
    fn training_reduces_denoising_loss() {
        let mut d = LearnedTinyDenoiser::new(8, 7);
        let x0 = Image::from_fn(8, 8, 3, |r, c, ch| 0.2 + 0.05 * ((r + c + ch) % 4) as f64);
        let s = NoiseSchedule::standard();
        let eval = |d: &LearnedTinyDenoiser| -> f64 {
            (0..16).map(|k| d.loss_and_grads(&x0, &s, &mut Rng::new(100 + k)).unwrap().0).sum::<f64>()
        };
        let before = eval(&d);
        let mut adam = AdamState::new(&d.params, AdamConfig { lr: 3e-3, ..AdamConfig::default() });
        for k in 0..60 {
            let (_, grads) = d.loss_and_grads(&x0, &s, &mut Rng::new(k)).unwrap();
            adam.step(&mut d.params, &grads).unwrap();
        }
        assert!(eval(&d) < before);
    }
}
