#![allow(dead_code)]

use iac::autodiff::{Graph, Var};
use iac::model::{CodecModel, LatentRelaxation, ModelConfig};
use iac::prior::SpikeSlabPrior;
use iac::train::{rd_loss, rdm_loss, zero_delta, RdmOptions};
use iac::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-8;

/// Builds a scalar or tensor output from input nodes.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

#[derive(Clone, Copy, Debug, Default)]
pub struct Worst {
    pub rel: f64,
    pub analytic: f64,
    pub numeric: f64,
}

impl Worst {
    fn offer(&mut self, analytic: f64, numeric: f64) {
        let diff = (analytic - numeric).abs();
        if diff <= ABS_TOL {
            return;
        }
        let rel = diff / analytic.abs().max(numeric.abs());
        if rel > self.rel {
            *self = Worst { rel, analytic, numeric };
        }
    }

    pub fn merge(self, other: Worst) -> Worst {
        if other.rel > self.rel {
            other
        } else {
            self
        }
    }

    pub fn ok(&self) -> bool {
        self.rel <= REL_TOL
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi]` kept at least `gap` away from every point in `kinks`.
pub fn values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), values(rng, n, lo, hi, kinks, 0.05)).unwrap()
}

fn weighted_value(build: &Build, inputs: &[Tensor], weights: &Tensor) -> Result<(f64, Option<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let w = g.constant(weights.clone().reshape(g.value(out).shape())?);
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, Some(gs)))
}

/// Compares reverse-mode gradients of `sum(w * build(inputs))` against central
/// differences on up to `samples` coordinates per input.
pub fn check_op(build: &Build, inputs: &[Tensor], seed: u64, samples: usize) -> Result<Worst> {
    let mut r = rng(seed ^ 0x5eed);
    let out_len = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).len()
    };
    let weights = Tensor::from_vec((0..out_len).map(|_| r.gen_range(-1.0..1.0)).collect());
    let (_, grads) = weighted_value(build, inputs, &weights)?;
    let grads = grads.unwrap();
    let mut worst = Worst::default();
    for (k, t) in inputs.iter().enumerate() {
        for _ in 0..samples.min(t.len()) {
            let i = r.gen_range(0..t.len());
            let mut probe = inputs.to_vec();
            probe[k].data_mut()[i] = t.data()[i] + FD_STEP;
            let up = weighted_value(build, &probe, &weights)?.0;
            probe[k].data_mut()[i] = t.data()[i] - FD_STEP;
            let down = weighted_value(build, &probe, &weights)?.0;
            worst.offer(grads[k].data()[i], (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(worst)
}

/// Tiny model and a 32x32 frame for whole-loss checks.
pub fn tiny_setup(seed: u64) -> (CodecModel, Tensor) {
    let model = CodecModel::new(ModelConfig::tiny(), seed);
    let frame = iac::synth::instance(seed, 1, 32, 32).remove(0);
    (model, frame)
}

/// Central-difference check of the RD loss (all-noise relaxation) with
/// respect to `samples` coordinates of every parameter tensor.
pub fn check_rd(seed: u64, samples: usize) -> Result<Worst> {
    let (model, x) = tiny_setup(seed);
    let beta = 0.01;
    let noise = seed.wrapping_mul(31) + 7;
    let relax = LatentRelaxation::Noise;
    let (_, grads) = rd_loss(&model, &x, beta, relax, noise)?;
    let mut r = rng(seed);
    let mut worst = Worst::default();
    for k in 0..model.params().len() {
        let n = model.params()[k].len();
        for _ in 0..samples.min(n) {
            let i = r.gen_range(0..n);
            let at = |d: f64| -> Result<f64> {
                let mut m = model.clone();
                m.params_mut()[k].data_mut()[i] += d;
                Ok(rd_loss(&m, &x, beta, relax, noise)?.0.loss)
            };
            let num = (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP);
            worst.offer(grads[k].data()[i], num);
        }
    }
    Ok(worst)
}

/// Central-difference check of the RDM loss with the model-rate term on and
/// unquantized updates, with respect to the update and the transmitter.
pub fn check_rdm(seed: u64, samples: usize) -> Result<Worst> {
    let (model, x) = tiny_setup(seed);
    let prior = SpikeSlabPrior::standard();
    let opts = RdmOptions {
        beta: 0.01,
        quantization_aware: false,
        model_rate_loss: true,
        relaxation: LatentRelaxation::Noise,
        instance_pixels: 32 * 32,
        prior: &prior,
    };
    let mut r = rng(seed ^ 0xde17a);
    let mut delta = zero_delta(&model);
    for t in &mut delta {
        for v in t.data_mut() {
            *v = r.gen_range(-0.03..0.03);
        }
    }
    let tx = model.transmitter_params();
    let noise = seed + 11;
    let (_, grads) = rdm_loss(&model, &tx, &delta, &x, &opts, noise)?;
    let mut worst = Worst::default();
    for k in 0..delta.len() {
        let n = delta[k].len();
        for _ in 0..samples.min(n) {
            let i = r.gen_range(0..n);
            let at = |d: f64| -> Result<f64> {
                let mut dd = delta.clone();
                dd[k].data_mut()[i] += d;
                Ok(rdm_loss(&model, &tx, &dd, &x, &opts, noise)?.0.loss)
            };
            let num = (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP);
            worst.offer(grads.delta[k].data()[i], num);
        }
    }
    for k in 0..tx.len() {
        let n = tx[k].len();
        for _ in 0..samples.min(n) {
            let i = r.gen_range(0..n);
            let at = |d: f64| -> Result<f64> {
                let mut tt = tx.clone();
                tt[k].data_mut()[i] += d;
                Ok(rdm_loss(&model, &tt, &delta, &x, &opts, noise)?.0.loss)
            };
            let num = (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP);
            worst.offer(grads.transmitter[k].data()[i], num);
        }
    }
    Ok(worst)
}

/// Every primitive check as `(name, worst)` for one seed.
pub fn check_primitives(seed: u64) -> Result<Vec<(&'static str, Worst)>> {
    let mut r = rng(seed);
    let s = 6;
    let shape4 = [2, 3, 5, 4];
    let a = tensor(&mut r, &[7], -2.0, 2.0, &[]);
    let b = tensor(&mut r, &[7], -2.0, 2.0, &[]);
    let pos = tensor(&mut r, &[7], 0.2, 3.0, &[]);
    let kinked = tensor(&mut r, &[7], -2.0, 2.0, &[0.0, -0.5, 0.5]);
    let x4 = tensor(&mut r, &shape4, -1.0, 1.0, &[]);
    let bias = tensor(&mut r, &[3], -1.0, 1.0, &[]);
    let mut out: Vec<(&'static str, Worst)> = Vec::new();
    let mut push = |name, build: &Build, inputs: &[Tensor]| -> Result<()> {
        out.push((name, check_op(build, inputs, seed, s)?));
        Ok(())
    };
    push("add", &|g, v| g.add(v[0], v[1]), &[a.clone(), b.clone()])?;
    push("sub", &|g, v| g.sub(v[0], v[1]), &[a.clone(), b.clone()])?;
    push("mul", &|g, v| g.mul(v[0], v[1]), &[a.clone(), b.clone()])?;
    push("div", &|g, v| g.div(v[0], v[1]), &[a.clone(), pos.clone()])?;
    push("affine", &|g, v| Ok(g.affine(v[0], -1.7, 0.3)), &[a.clone()])?;
    push("scale", &|g, v| Ok(g.scale(v[0], 2.5)), &[a.clone()])?;
    push("sqrt", &|g, v| Ok(g.sqrt(v[0])), &[pos.clone()])?;
    push("abs", &|g, v| Ok(g.abs(v[0])), &[kinked.clone()])?;
    push("exp", &|g, v| Ok(g.exp(v[0])), &[a.clone()])?;
    push("log", &|g, v| Ok(g.log(v[0])), &[pos.clone()])?;
    push("leaky_relu", &|g, v| Ok(g.leaky_relu(v[0], 0.01)), &[kinked.clone()])?;
    push("softplus", &|g, v| Ok(g.softplus(v[0])), &[a.clone()])?;
    push("clamp", &|g, v| Ok(g.clamp(v[0], -0.5, 0.5)), &[kinked.clone()])?;
    // Below the bound the gradient passes by design, so only the smooth side is probed.
    let above = tensor(&mut r, &[7], 0.6, 3.0, &[]);
    push("lower_bound", &|g, v| Ok(g.lower_bound(v[0], 0.5)), &[above])?;
    push("sum", &|g, v| Ok(g.sum(v[0])), &[a.clone()])?;
    push("mean", &|g, v| Ok(g.mean(v[0])), &[a.clone()])?;
    push("normal_cdf", &|g, v| Ok(g.normal_cdf(v[0])), &[a.clone()])?;
    push("reshape", &|g, v| g.reshape(v[0], &[3, 2, 20]), &[x4.clone()])?;
    push("bias_add", &|g, v| g.bias_add(v[0], v[1]), &[x4.clone(), bias.clone()])?;
    push("broadcast_channels", &|g, v| g.broadcast_channels(v[0], shape4), &[bias.clone()])?;
    push("slice_channels", &|g, v| g.slice_channels(v[0], 1, 2), &[x4.clone()])?;
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 2, 5)] {
        let x = tensor(&mut r, &[2, 3, 9, 8], -1.0, 1.0, &[]);
        let w = tensor(&mut r, &[4, 3, k, k], -0.5, 0.5, &[]);
        push("conv2d", &move |g, v| g.conv2d(v[0], v[1], stride, pad), &[x, w])?;
    }
    for (stride, pad, k, opad) in [(1, 1, 3, 0), (2, 1, 3, 1), (2, 2, 5, 1), (2, 0, 3, 0)] {
        let x = tensor(&mut r, &[2, 3, 4, 5], -1.0, 1.0, &[]);
        let w = tensor(&mut r, &[3, 2, k, k], -0.5, 0.5, &[]);
        push("conv_transpose2d", &move |g, v| g.conv_transpose2d(v[0], v[1], stride, pad, opad), &[x, w])?;
    }
    let beta = tensor(&mut r, &[3], 0.5, 1.5, &[]);
    let gamma = tensor(&mut r, &[3, 3], 0.05, 0.5, &[]);
    push("gdn", &|g, v| g.gdn(v[0], v[1], v[2], false), &[x4.clone(), beta.clone(), gamma.clone()])?;
    push("igdn", &|g, v| g.gdn(v[0], v[1], v[2], true), &[x4.clone(), beta, gamma])?;
    Ok(out)
}

/// Backward of the straight-through and noise ops must be the identity.
pub fn identity_backward_ops(seed: u64) -> Result<bool> {
    let mut r = rng(seed);
    let x = tensor(&mut r, &[11], -3.0, 3.0, &[]);
    let w = tensor(&mut r, &[11], -1.0, 1.0, &[]);
    let mut ok = true;
    for op in 0..3 {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = match op {
            0 => g.ste_round(xv),
            1 => g.straight_through(xv, |v| (v * 4.0).floor() / 4.0),
            _ => {
                let mut nr = rng(seed + 1);
                g.add_uniform_noise(xv, 1.0, &mut nr)?
            }
        };
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        let l = g.sum(p);
        let grads = g.backward(l)?;
        ok &= grads.get(xv).map(|t| t == &w).unwrap_or(false);
    }
    Ok(ok)
}
