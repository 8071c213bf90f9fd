use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::eval::pad_frame;
use super::loss::rd_loss;
use crate::error::{Error, Result};
use crate::model::{CodecModel, LatentRelaxation, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalConfig {
    pub model: ModelConfig,
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    /// Learning rate after 90% of the steps.
    pub final_lr: f64,
    pub crop: usize,
    pub seed: u64,
    /// Gradients with a larger global L2 norm are rescaled to this norm.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
}

fn default_clip_norm() -> f64 {
    1.0
}

impl GlobalConfig {
    pub fn new(beta: f64, steps: usize) -> Self {
        Self {
            model: ModelConfig::default(),
            beta,
            steps,
            lr: 1e-4,
            final_lr: 1e-5,
            crop: 64,
            seed: 0,
            clip_norm: default_clip_norm(),
        }
    }

    /// Learning rate applied at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step * 10 >= self.steps * 9 {
            self.final_lr
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalStep {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub rate_bpp: f64,
    pub mse: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Rescales `grads` in place so their joint L2 norm is at most `max`; returns
/// the norm before rescaling.
pub fn clip_grad_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max && max > 0.0 {
        let s = max / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

fn random_crop(img: &Tensor, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let [_, c, h, w] = img.dims4("random_crop")?;
    if h < size || w < size {
        let padded = crate::model::pad_replicate(img, size)?;
        return random_crop(&padded, size, rng);
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    let mut out = Vec::with_capacity(c * size * size);
    for plane in img.data().chunks(h * w) {
        for y in y0..y0 + size {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + size]);
        }
    }
    Tensor::new(vec![1, c, size, size], out)
}

/// Trains a model from scratch on random crops of `images`.
pub fn train_global(images: &[Tensor], cfg: &GlobalConfig) -> Result<(CodecModel, Vec<GlobalStep>)> {
    if images.is_empty() {
        return Err(Error::Dataset("no usable training images".into()));
    }
    if cfg.crop == 0 || cfg.crop % ModelConfig::pad_multiple() != 0 {
        return Err(Error::Config(format!(
            "crop size {} must be a positive multiple of {}",
            cfg.crop,
            ModelConfig::pad_multiple()
        )));
    }
    let mut model = CodecModel::new(cfg.model, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0FF_EE00);
    let mut opt = Adam::new(cfg.lr, model.params());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let img = &images[rng.gen_range(0..images.len())];
        let x = pad_frame(&random_crop(img, cfg.crop, &mut rng)?)?;
        let (terms, mut grads) = rd_loss(&model, &x, cfg.beta, LatentRelaxation::Mixed, rng.gen())?;
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        opt.set_lr(cfg.lr_at(step));
        opt.step(model.params_mut(), &grads);
        curve.push(GlobalStep {
            step,
            lr: opt.lr(),
            loss: terms.loss,
            rate_bpp: terms.rate_bpp,
            mse: terms.mse,
            grad_norm,
        });
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_drops_at_ninety_percent() {
        let cfg = GlobalConfig::new(1e-3, 1000);
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(899), 1e-4);
        assert_eq!(cfg.lr_at(900), 1e-5);
        assert_eq!(cfg.lr_at(999), 1e-5);
    }

    #[test]
    fn crop_is_a_window_of_the_source() {
        let img = Tensor::new(vec![1, 1, 4, 5], (0..20).map(f64::from).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_crop(&img, 2, &mut rng).unwrap();
        let d = c.data();
        assert_eq!(d[1] - d[0], 1.0);
        assert_eq!(d[2] - d[0], 5.0);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Tensor::from_vec(vec![3.0, 0.0]), Tensor::from_vec(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(g[0].data()[1], 0.0);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::from_vec(vec![0.1])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }

    #[test]
    fn empty_dataset_fails() {
        assert!(matches!(
            train_global(&[], &GlobalConfig::new(1e-3, 1)),
            Err(Error::Dataset(_))
        ));
    }
}
