//! Scaled-down mean-scale hyperprior codec.
//!
//! ```text
//! x --enc--> z2 --henc--> z1            (transmitter, phi)
//! z1 ~ hyperprior                        (receiver, theta)
//! (mean, scale) = hdec(z1);  z2 ~ N(mean, scale) in unit bins
//! x_hat = dec(z2)
//! ```
//!
//! Parameters live in one flat list: transmitter entries first, then receiver
//! entries, each in construction order. The receiver slice, flattened
//! row-major, is the order in which parameter updates are serialized.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inverse, Graph, Var};
use crate::entropy::LatentTable;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound of every predicted scale.
pub const SCALE_FLOOR: f64 = 1e-2;
/// Per-element probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;
const GDN_BETA_FLOOR: f64 = 1e-6;
const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub hidden: usize,
    pub latent: usize,
    pub hyper_hidden: usize,
    pub hyper_latent: usize,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            hidden: 32,
            latent: 32,
            hyper_hidden: 32,
            hyper_latent: 16,
            kernel: 5,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks and fuzzing.
    pub fn tiny() -> Self {
        Self {
            image_channels: 3,
            hidden: 4,
            latent: 4,
            hyper_hidden: 4,
            hyper_latent: 2,
            kernel: 3,
        }
    }

    /// Downsampling of the main encoder.
    pub const fn codec_stride() -> usize {
        8
    }

    /// Downsampling of the hyper-encoder.
    pub const fn hyper_stride() -> usize {
        4
    }

    /// Frames are padded to multiples of this.
    pub const fn pad_multiple() -> usize {
        Self::codec_stride() * Self::hyper_stride()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Transmitter,
    Receiver,
}

/// Grouping used when reporting update statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    HyperEncoder,
    Hyperprior,
    HyperDecoder,
    DecoderWeights,
    DecoderBiases,
    Igdn,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::HyperEncoder => "hyper_encoder",
            ParamGroup::Hyperprior => "hyperprior",
            ParamGroup::HyperDecoder => "hyper_decoder",
            ParamGroup::DecoderWeights => "decoder_weights",
            ParamGroup::DecoderBiases => "decoder_biases",
            ParamGroup::Igdn => "decoder_igdn",
        }
    }

    pub const RECEIVER: [ParamGroup; 5] = [
        ParamGroup::DecoderWeights,
        ParamGroup::DecoderBiases,
        ParamGroup::Igdn,
        ParamGroup::HyperDecoder,
        ParamGroup::Hyperprior,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub side: Side,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Gdn {
    beta: usize,
    gamma: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: [Conv; 3],
    enc_gdn: [Gdn; 2],
    henc: [Conv; 2],
    prior_mean: usize,
    prior_scale: usize,
    hdec: [Conv; 3],
    dec: [Conv; 3],
    dec_igdn: [Gdn; 2],
}

struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn add(&mut self, name: &str, shape: &[usize], side: Side, group: ParamGroup) -> usize {
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            side,
            group,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, w: [usize; 4], bias: usize, side: Side, wg: ParamGroup, bg: ParamGroup) -> Conv {
        Conv {
            w: self.add(&format!("{name}.weight"), &w, side, wg),
            b: self.add(&format!("{name}.bias"), &[bias], side, bg),
        }
    }

    fn gdn(&mut self, name: &str, c: usize, side: Side, group: ParamGroup) -> Gdn {
        Gdn {
            beta: self.add(&format!("{name}.beta"), &[c], side, group),
            gamma: self.add(&format!("{name}.gamma"), &[c, c], side, group),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, Layout) {
    use ParamGroup as G;
    use Side::{Receiver as R, Transmitter as T};
    let k = cfg.kernel;
    let mut b = SpecBuilder { specs: Vec::new() };
    let e0 = b.conv("enc.0", [cfg.hidden, cfg.image_channels, k, k], cfg.hidden, T, G::Encoder, G::Encoder);
    let eg0 = b.gdn("enc.gdn0", cfg.hidden, T, G::Encoder);
    let e1 = b.conv("enc.1", [cfg.hidden, cfg.hidden, k, k], cfg.hidden, T, G::Encoder, G::Encoder);
    let eg1 = b.gdn("enc.gdn1", cfg.hidden, T, G::Encoder);
    let e2 = b.conv("enc.2", [cfg.latent, cfg.hidden, k, k], cfg.latent, T, G::Encoder, G::Encoder);
    let h0 = b.conv("henc.0", [cfg.hyper_hidden, cfg.latent, k, k], cfg.hyper_hidden, T, G::HyperEncoder, G::HyperEncoder);
    let h1 = b.conv("henc.1", [cfg.hyper_latent, cfg.hyper_hidden, k, k], cfg.hyper_latent, T, G::HyperEncoder, G::HyperEncoder);

    let prior_mean = b.add("prior.mean", &[cfg.hyper_latent], R, G::Hyperprior);
    let prior_scale = b.add("prior.scale", &[cfg.hyper_latent], R, G::Hyperprior);
    let hd0 = b.conv("hdec.0", [cfg.hyper_latent, cfg.hyper_hidden, k, k], cfg.hyper_hidden, R, G::HyperDecoder, G::HyperDecoder);
    let hd1 = b.conv("hdec.1", [cfg.hyper_hidden, cfg.hyper_hidden, k, k], cfg.hyper_hidden, R, G::HyperDecoder, G::HyperDecoder);
    let hd2 = b.conv("hdec.2", [2 * cfg.latent, cfg.hyper_hidden, 3, 3], 2 * cfg.latent, R, G::HyperDecoder, G::HyperDecoder);
    let d0 = b.conv("dec.0", [cfg.latent, cfg.hidden, k, k], cfg.hidden, R, G::DecoderWeights, G::DecoderBiases);
    let dg0 = b.gdn("dec.igdn0", cfg.hidden, R, G::Igdn);
    let d1 = b.conv("dec.1", [cfg.hidden, cfg.hidden, k, k], cfg.hidden, R, G::DecoderWeights, G::DecoderBiases);
    let dg1 = b.gdn("dec.igdn1", cfg.hidden, R, G::Igdn);
    let d2 = b.conv("dec.2", [cfg.hidden, cfg.image_channels, k, k], cfg.image_channels, R, G::DecoderWeights, G::DecoderBiases);

    let layout = Layout {
        enc: [e0, e1, e2],
        enc_gdn: [eg0, eg1],
        henc: [h0, h1],
        prior_mean,
        prior_scale,
        hdec: [hd0, hd1, hd2],
        dec: [d0, d1, d2],
        dec_igdn: [dg0, dg1],
    };
    (b.specs, layout)
}

/// How latents are relaxed when building a training graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentRelaxation {
    /// Rate on noisy latents; distortion and hyper-decoder on straight-through
    /// rounded latents.
    Mixed,
    /// Additive uniform noise everywhere; fully differentiable.
    Noise,
}

/// How [`CodecModel::encode_latents`] treats encoder outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Noisy { seed: u64 },
    Rounded,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    /// Hyper-latent, `[1, hyper_latent, H/32, W/32]`.
    pub z1: Tensor,
    /// Latent, `[1, latent, H/8, W/8]`.
    pub z2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanScale {
    pub mean: Tensor,
    pub scale: Tensor,
}

/// Graph handles for the mean and scale of a latent prior.
#[derive(Clone, Copy, Debug)]
pub struct MeanScaleVars {
    pub mean: Var,
    pub scale: Var,
}

#[derive(Clone, Debug)]
pub struct CodecModel {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    layout: Layout,
    params: Vec<Tensor>,
}

impl PartialEq for CodecModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl CodecModel {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let (specs, layout) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta0 = softplus_inverse(1.0);
        let gamma_diag = softplus_inverse(0.1);
        let gamma_off = softplus_inverse(1e-3);
        let params = specs
            .iter()
            .map(|s| {
                let n = s.numel();
                let name = s.name.as_str();
                let data: Vec<f64> = if name.ends_with(".beta") {
                    vec![beta0; n]
                } else if name.ends_with(".gamma") {
                    let c = s.shape[0];
                    (0..n)
                        .map(|i| if i / c == i % c { gamma_diag } else { gamma_off })
                        .collect()
                } else if name == "prior.scale" {
                    vec![softplus_inverse(1.0); n]
                } else if name.ends_with(".bias") || name == "prior.mean" {
                    vec![0.0; n]
                } else {
                    // weights: uniform with variance 1 / fan_in
                    let fan_in = if name.starts_with("hdec.0") || name.starts_with("hdec.1") || name.starts_with("dec.") {
                        s.shape[0] * s.shape[2] * s.shape[3]
                    } else {
                        s.shape[1] * s.shape[2] * s.shape[3]
                    };
                    let bound = (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                Tensor::new(s.shape.clone(), data).expect("spec shape")
            })
            .collect();
        Self {
            config,
            specs,
            layout,
            params,
        }
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let (specs, layout) = build_layout(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::Config(format!(
                    "{}: expected shape {:?}, got {:?}",
                    s.name,
                    s.shape,
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            specs,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn indices(&self, side: Side) -> impl Iterator<Item = usize> + '_ {
        self.specs
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.side == side)
            .map(|(i, _)| i)
    }

    pub fn transmitter_parameter_count(&self) -> usize {
        self.indices(Side::Transmitter).map(|i| self.specs[i].numel()).sum()
    }

    pub fn receiver_parameter_count(&self) -> usize {
        self.indices(Side::Receiver).map(|i| self.specs[i].numel()).sum()
    }

    /// Receiver parameters flattened in serialization order.
    pub fn receiver_flat(&self) -> Vec<f64> {
        self.indices(Side::Receiver)
            .flat_map(|i| self.params[i].data().iter().copied())
            .collect()
    }

    /// Group of every receiver scalar, aligned with [`receiver_flat`](Self::receiver_flat).
    pub fn receiver_groups(&self) -> Vec<ParamGroup> {
        self.indices(Side::Receiver)
            .flat_map(|i| std::iter::repeat_n(self.specs[i].group, self.specs[i].numel()))
            .collect()
    }

    /// Copy of the model with `update` added to the receiver parameters.
    pub fn with_receiver_update(&self, update: &[f64]) -> Result<Self> {
        if update.len() != self.receiver_parameter_count() {
            return Err(Error::UpdateMismatch(format!(
                "{} values for {} receiver parameters",
                update.len(),
                self.receiver_parameter_count()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        let idx: Vec<usize> = self.indices(Side::Receiver).collect();
        for i in idx {
            let t = &mut out.params[i];
            let n = t.len();
            for (p, d) in t.data_mut().iter_mut().zip(&update[offset..offset + n]) {
                *p += d;
            }
            offset += n;
        }
        Ok(out)
    }

    /// Replace the transmitter parameters.
    pub fn with_transmitter(&self, tensors: &[Tensor]) -> Result<Self> {
        let idx: Vec<usize> = self.indices(Side::Transmitter).collect();
        if idx.len() != tensors.len() {
            return Err(Error::Config("transmitter tensor count mismatch".into()));
        }
        let mut out = self.clone();
        for (i, t) in idx.into_iter().zip(tensors) {
            if t.shape() != out.params[i].shape() {
                return Err(Error::Config(format!("{}: shape mismatch", out.specs[i].name)));
            }
            out.params[i] = t.clone();
        }
        Ok(out)
    }

    pub fn transmitter_params(&self) -> Vec<Tensor> {
        self.indices(Side::Transmitter).map(|i| self.params[i].clone()).collect()
    }

    /// Places every parameter on `g` as a constant.
    pub fn bind_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    fn conv(&self, g: &mut Graph, p: &[Var], x: Var, c: Conv, stride: usize) -> Result<Var> {
        let k = g.value(p[c.w]).shape()[2];
        let y = g.conv2d(x, p[c.w], stride, k / 2)?;
        g.bias_add(y, p[c.b])
    }

    fn deconv(&self, g: &mut Graph, p: &[Var], x: Var, c: Conv) -> Result<Var> {
        let k = g.value(p[c.w]).shape()[2];
        let y = g.conv_transpose2d(x, p[c.w], 2, k / 2, 1)?;
        g.bias_add(y, p[c.b])
    }

    fn gdn(&self, g: &mut Graph, p: &[Var], x: Var, n: Gdn, inverse: bool) -> Result<Var> {
        let beta = g.softplus(p[n.beta]);
        let beta = g.affine(beta, 1.0, GDN_BETA_FLOOR);
        let gamma = g.softplus(p[n.gamma]);
        g.gdn(x, beta, gamma, inverse)
    }

    /// Encoder `x -> z2` (continuous).
    pub fn analysis(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let l = &self.layout;
        let mut h = self.conv(g, p, x, l.enc[0], 2)?;
        h = self.gdn(g, p, h, l.enc_gdn[0], false)?;
        h = self.conv(g, p, h, l.enc[1], 2)?;
        h = self.gdn(g, p, h, l.enc_gdn[1], false)?;
        self.conv(g, p, h, l.enc[2], 2)
    }

    /// Hyper-encoder `z2 -> z1` (continuous).
    pub fn hyper_analysis(&self, g: &mut Graph, p: &[Var], z2: Var) -> Result<Var> {
        let l = &self.layout;
        let h = self.conv(g, p, z2, l.henc[0], 2)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.conv(g, p, h, l.henc[1], 2)
    }

    fn scale_from_raw(&self, g: &mut Graph, raw: Var) -> Var {
        let s = g.softplus(raw);
        g.affine(s, 1.0, SCALE_FLOOR)
    }

    /// Per-channel hyperprior broadcast to the hyper-latent shape.
    pub fn hyperprior(&self, g: &mut Graph, p: &[Var], shape: [usize; 4]) -> Result<MeanScaleVars> {
        let mean = g.broadcast_channels(p[self.layout.prior_mean], shape)?;
        let raw = g.broadcast_channels(p[self.layout.prior_scale], shape)?;
        let scale = self.scale_from_raw(g, raw);
        Ok(MeanScaleVars { mean, scale })
    }

    /// Hyper-decoder `z1 -> (mean, scale)` of the latent prior.
    pub fn hyper_synthesis(&self, g: &mut Graph, p: &[Var], z1: Var) -> Result<MeanScaleVars> {
        let l = &self.layout;
        let mut h = self.deconv(g, p, z1, l.hdec[0])?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        h = self.deconv(g, p, h, l.hdec[1])?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
        let out = self.conv(g, p, h, l.hdec[2], 1)?;
        let c = self.config.latent;
        let mean = g.slice_channels(out, 0, c)?;
        let raw = g.slice_channels(out, c, c)?;
        let scale = self.scale_from_raw(g, raw);
        Ok(MeanScaleVars { mean, scale })
    }

    /// Decoder `z2 -> x_hat` (linear output).
    pub fn synthesis(&self, g: &mut Graph, p: &[Var], z2: Var) -> Result<Var> {
        let l = &self.layout;
        let mut h = self.deconv(g, p, z2, l.dec[0])?;
        h = self.gdn(g, p, h, l.dec_igdn[0], true)?;
        h = self.deconv(g, p, h, l.dec[1])?;
        h = self.gdn(g, p, h, l.dec_igdn[1], true)?;
        self.deconv(g, p, h, l.dec[2])
    }

    /// Rate in bits of `values` under unit-bin Gaussian masses.
    pub fn rate_bits(g: &mut Graph, values: Var, prior: MeanScaleVars) -> Result<Var> {
        let diff = g.sub(values, prior.mean)?;
        let a = g.abs(diff);
        let up = g.affine(a, -1.0, 0.5);
        let up = g.div(up, prior.scale)?;
        let up = g.normal_cdf(up);
        let lo = g.affine(a, -1.0, -0.5);
        let lo = g.div(lo, prior.scale)?;
        let lo = g.normal_cdf(lo);
        let mass = g.sub(up, lo)?;
        let mass = g.lower_bound(mass, PROB_FLOOR);
        let logs = g.log(mass);
        let total = g.sum(logs);
        Ok(g.scale(total, -1.0 / LN_2))
    }

    fn check_dims(&self, shape: &[usize]) -> Result<()> {
        let f = ModelConfig::pad_multiple();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::NotDivisible {
                height: h,
                width: w,
                factor: f,
            });
        }
        Ok(())
    }

    /// Latents of a padded `[1, C, H, W]` frame.
    pub fn encode_latents(&self, x: &Tensor, mode: EncodeMode) -> Result<LatentPair> {
        self.check_dims(x.shape())?;
        let mut g = Graph::new();
        let p = self.bind_constants(&mut g);
        let xv = g.constant(x.clone());
        let z2 = self.analysis(&mut g, &p, xv)?;
        let z1 = self.hyper_analysis(&mut g, &p, z2)?;
        let (z1, z2) = match mode {
            EncodeMode::Deterministic => (z1, z2),
            EncodeMode::Rounded => (g.ste_round(z1), g.ste_round(z2)),
            EncodeMode::Noisy { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n1 = g.add_uniform_noise(z1, 1.0, &mut rng)?;
                let n2 = g.add_uniform_noise(z2, 1.0, &mut rng)?;
                (n1, n2)
            }
        };
        Ok(LatentPair {
            z1: g.value(z1).clone(),
            z2: g.value(z2).clone(),
        })
    }

    /// Integer latents exactly as they are entropy coded: rounded, then
    /// clamped into the coder's support under their priors.
    pub fn coded_latents(&self, x: &Tensor) -> Result<LatentPair> {
        let raw = self.encode_latents(x, EncodeMode::Deterministic)?;
        self.clamp_latents(LatentPair {
            z1: raw.z1.map(f64::round),
            z2: raw.z2.map(f64::round),
        })
    }

    /// Rounds real-valued latents and clamps them into the coder's support.
    pub fn clamp_latents(&self, latents: LatentPair) -> Result<LatentPair> {
        let z1 = latents.z1.map(f64::round);
        let hp = self.hyper_latent_prior(z1.dims4("clamp_latents")?)?;
        let z1 = clamp_to_support(&z1, &hp);
        let ms = self.latent_prior(&z1)?;
        let z2 = clamp_to_support(&latents.z2.map(f64::round), &ms);
        Ok(LatentPair { z1, z2 })
    }

    /// Mean and scale of the latent prior for a given hyper-latent.
    pub fn latent_prior(&self, z1: &Tensor) -> Result<MeanScale> {
        let mut g = Graph::new();
        let p = self.bind_constants(&mut g);
        let z = g.constant(z1.clone());
        let ms = self.hyper_synthesis(&mut g, &p, z)?;
        Ok(MeanScale {
            mean: g.value(ms.mean).clone(),
            scale: g.value(ms.scale).clone(),
        })
    }

    /// Hyperprior mean and scale broadcast over `shape`.
    pub fn hyper_latent_prior(&self, shape: [usize; 4]) -> Result<MeanScale> {
        let mut g = Graph::new();
        let p = self.bind_constants(&mut g);
        let ms = self.hyperprior(&mut g, &p, shape)?;
        Ok(MeanScale {
            mean: g.value(ms.mean).clone(),
            scale: g.value(ms.scale).clone(),
        })
    }

    /// `-sum log2 P[bin]` of both latents; the latent prior is computed from `z1`.
    pub fn latent_rate(&self, latents: &LatentPair) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.bind_constants(&mut g);
        let z1 = g.constant(latents.z1.clone());
        let z2 = g.constant(latents.z2.clone());
        let hp = self.hyperprior(&mut g, &p, latents.z1.dims4("latent_rate")?)?;
        let r1 = Self::rate_bits(&mut g, z1, hp)?;
        let ms = self.hyper_synthesis(&mut g, &p, z1)?;
        let r2 = Self::rate_bits(&mut g, z2, ms)?;
        Ok(g.value(r1).item() + g.value(r2).item())
    }

    /// Decoder output for the given latents (unclamped).
    pub fn reconstruct(&self, latents: &LatentPair) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind_constants(&mut g);
        let z2 = g.constant(latents.z2.clone());
        let x = self.synthesis(&mut g, &p, z2)?;
        Ok(g.value(x).clone())
    }
}

fn clamp_to_support(values: &Tensor, prior: &MeanScale) -> Tensor {
    let data = values
        .data()
        .iter()
        .zip(prior.mean.data().iter().zip(prior.scale.data()))
        .map(|(&v, (&m, &s))| {
            let (lo, hi) = LatentTable::support(m, s);
            v.clamp(lo as f64, hi as f64)
        })
        .collect();
    Tensor::new(values.shape().to_vec(), data).expect("same shape")
}

/// Replicate-pads `[N, C, H, W]` on the right and bottom to multiples of `multiple`.
pub fn pad_replicate(x: &Tensor, multiple: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("pad_replicate")?;
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in x.data().chunks(h * w) {
        for y in 0..ph {
            let row = &plane[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[w - 1], pw - w));
        }
    }
    Tensor::new(vec![n, c, ph, pw], out)
}

/// Top-left `height x width` crop of `[N, C, H, W]`.
pub fn crop(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("crop")?;
    if height > h || width > w {
        return Err(crate::error::shape_err("crop", format!("{height}x{width} from {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * c * height * width);
    for plane in x.data().chunks(h * w) {
        for y in 0..height {
            out.extend_from_slice(&plane[y * w..y * w + width]);
        }
    }
    Tensor::new(vec![n, c, height, width], out)
}
