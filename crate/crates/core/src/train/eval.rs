use crate::error::{Error, Result};
use crate::model::{crop, pad_replicate, CodecModel, LatentPair, ModelConfig};
use crate::tensor::Tensor;

/// Discrete (as-coded) performance on an instance set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub beta: f64,
    pub pixels: usize,
    /// Latent bits summed over all frames.
    pub rate_bits: f64,
    /// Discrete model-rate bits of the transmitted update.
    pub model_bits: f64,
    /// Bits of the all-zero update.
    pub zero_model_bits: f64,
    pub mse: f64,
}

impl Evaluation {
    pub fn rate_bpp(&self) -> f64 {
        self.rate_bits / self.pixels as f64
    }

    pub fn model_rate_bpp(&self) -> f64 {
        self.model_bits / self.pixels as f64
    }

    pub fn zero_model_rate_bpp(&self) -> f64 {
        self.zero_model_bits / self.pixels as f64
    }

    pub fn total_rate_bpp(&self) -> f64 {
        self.rate_bpp() + self.model_rate_bpp()
    }

    /// PSNR in dB for signals in `[0, 1]`.
    pub fn psnr(&self) -> f64 {
        psnr(self.mse)
    }

    /// `beta * R + D`, update bits excluded.
    pub fn rd(&self) -> f64 {
        self.beta * self.rate_bpp() + self.mse
    }

    /// `beta * (R + M) + D`.
    pub fn rdm(&self) -> f64 {
        self.rd() + self.beta * self.model_rate_bpp()
    }

    pub fn with_model_bits(self, model_bits: f64, zero_model_bits: f64) -> Self {
        Self {
            model_bits,
            zero_model_bits,
            ..self
        }
    }
}

pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

/// Squared error summed over the pixels of `a` and `b` after clamping `a` to `[0, 1]`.
fn clamped_squared_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.clamp(0.0, 1.0) - y).powi(2))
        .sum()
}

fn frame_hw(x: &Tensor) -> Result<(usize, usize)> {
    let [_, _, h, w] = x.dims4("evaluate")?;
    Ok((h, w))
}

/// Decoder output of coded latents, cropped to `h x w` and clamped to `[0, 1]`.
pub fn decode_frame(model: &CodecModel, latents: &LatentPair, h: usize, w: usize) -> Result<Tensor> {
    let full = model.reconstruct(latents)?;
    Ok(crop(&full, h, w)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Pads a frame for the codec.
pub fn pad_frame(x: &Tensor) -> Result<Tensor> {
    pad_replicate(x, ModelConfig::pad_multiple())
}

/// Rate and distortion of coding `frames` with `model`.
pub fn evaluate(model: &CodecModel, frames: &[Tensor], beta: f64) -> Result<Evaluation> {
    let latents = frames
        .iter()
        .map(|f| model.coded_latents(&pad_frame(f)?))
        .collect::<Result<Vec<_>>>()?;
    evaluate_latents(model, frames, &latents, beta)
}

/// Same as [`evaluate`] for latents chosen by the caller (already integral and in support).
pub fn evaluate_latents(
    model: &CodecModel,
    frames: &[Tensor],
    latents: &[LatentPair],
    beta: f64,
) -> Result<Evaluation> {
    if frames.is_empty() {
        return Err(Error::Dataset("empty instance".into()));
    }
    if frames.len() != latents.len() {
        return Err(Error::Config("one latent pair per frame required".into()));
    }
    let mut rate_bits = 0.0;
    let mut recon = Vec::with_capacity(frames.len());
    for (f, z) in frames.iter().zip(latents) {
        let (h, w) = frame_hw(f)?;
        rate_bits += model.latent_rate(z)?;
        recon.push(decode_frame(model, z, h, w)?);
    }
    Ok(Evaluation {
        rate_bits,
        ..reconstruction_evaluation(beta, &recon, frames)?
    })
}

/// Distortion of decoded frames against the originals; rates are left at zero.
pub fn reconstruction_evaluation(beta: f64, recon: &[Tensor], frames: &[Tensor]) -> Result<Evaluation> {
    if recon.len() != frames.len() {
        return Err(Error::Config("one reconstruction per frame required".into()));
    }
    let mut sq = 0.0;
    let mut values = 0usize;
    let mut pixels = 0usize;
    for (r, f) in recon.iter().zip(frames) {
        if r.shape() != f.shape() {
            return Err(crate::error::shape_err("evaluate", format!("{:?} vs {:?}", r.shape(), f.shape())));
        }
        let (h, w) = frame_hw(f)?;
        sq += clamped_squared_error(r, f);
        values += f.len();
        pixels += h * w;
    }
    Ok(Evaluation {
        beta,
        pixels,
        rate_bits: 0.0,
        model_bits: 0.0,
        zero_model_bits: 0.0,
        mse: sq / values as f64,
    })
}

/// Total pixel count of a frame set.
pub fn instance_pixels(frames: &[Tensor]) -> Result<usize> {
    frames.iter().map(|f| frame_hw(f).map(|(h, w)| h * w)).sum()
}
