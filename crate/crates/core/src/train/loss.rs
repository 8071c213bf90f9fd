use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{CodecModel, LatentRelaxation, Side};
use crate::prior::SpikeSlabPrior;
use crate::quant::QuantGrid;
use crate::tensor::Tensor;

/// Value of a rate-distortion objective on one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdTerms {
    pub loss: f64,
    /// Latent rate in bits per pixel.
    pub rate_bpp: f64,
    pub mse: f64,
}

/// [`RdTerms`] plus the model-rate term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdmTerms {
    pub loss: f64,
    pub rate_bpp: f64,
    pub mse: f64,
    /// Continuous model rate in bits per pixel of the instance set.
    pub model_rate_bpp: f64,
}

/// Graph nodes of a frame's RD objective.
#[derive(Clone, Copy, Debug)]
pub struct RdVars {
    pub loss: Var,
    pub rate_bpp: Var,
    pub mse: Var,
}

/// Adds `beta * R + D` for frame `x` to `g`, with `params` holding one node
/// per model parameter.
pub fn rd_graph(
    g: &mut Graph,
    model: &CodecModel,
    params: &[Var],
    x: &Tensor,
    beta: f64,
    relaxation: LatentRelaxation,
    noise_seed: u64,
) -> Result<RdVars> {
    let xv = g.constant(x.clone());
    let z2 = model.analysis(g, params, xv)?;
    let z1 = model.hyper_analysis(g, params, z2)?;
    latent_rd_graph(g, model, params, xv, z1, z2, beta, relaxation, noise_seed)
}

/// RD objective for given continuous latent nodes.
#[allow(clippy::too_many_arguments)]
pub fn latent_rd_graph(
    g: &mut Graph,
    model: &CodecModel,
    params: &[Var],
    x: Var,
    z1: Var,
    z2: Var,
    beta: f64,
    relaxation: LatentRelaxation,
    noise_seed: u64,
) -> Result<RdVars> {
    let [_, _, h, w] = g.value(x).dims4("rd_loss")?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let n1 = g.add_uniform_noise(z1, 1.0, &mut rng)?;
    let n2 = g.add_uniform_noise(z2, 1.0, &mut rng)?;
    let (h1, h2) = match relaxation {
        LatentRelaxation::Mixed => (g.ste_round(z1), g.ste_round(z2)),
        LatentRelaxation::Noise => (n1, n2),
    };
    let hp = model.hyperprior(g, params, g.value(z1).dims4("rd_loss")?)?;
    let r1 = CodecModel::rate_bits(g, n1, hp)?;
    let ms = model.hyper_synthesis(g, params, h1)?;
    let r2 = CodecModel::rate_bits(g, n2, ms)?;
    let bits = g.add(r1, r2)?;
    let rate_bpp = g.scale(bits, 1.0 / (h * w) as f64);
    let xh = model.synthesis(g, params, h2)?;
    let diff = g.sub(xh, x)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean(sq);
    let weighted = g.scale(rate_bpp, beta);
    let loss = g.add(weighted, mse)?;
    Ok(RdVars { loss, rate_bpp, mse })
}

fn terms(g: &Graph, v: RdVars) -> RdTerms {
    RdTerms {
        loss: g.value(v.loss).item(),
        rate_bpp: g.value(v.rate_bpp).item(),
        mse: g.value(v.mse).item(),
    }
}

/// `beta * R + D` of one frame and its gradient with respect to every model
/// parameter.
pub fn rd_loss(
    model: &CodecModel,
    x: &Tensor,
    beta: f64,
    relaxation: LatentRelaxation,
    noise_seed: u64,
) -> Result<(RdTerms, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p: Vec<Var> = model.params().iter().map(|t| g.param(t.clone())).collect();
    let v = rd_graph(&mut g, model, &p, x, beta, relaxation, noise_seed)?;
    let mut grads = g.backward(v.loss)?;
    let out = p.iter().map(|&pv| grads.take(pv).expect("parameter gradient")).collect();
    Ok((terms(&g, v), out))
}

/// Settings of the instance-adaptive objective.
#[derive(Clone, Debug)]
pub struct RdmOptions<'a> {
    pub beta: f64,
    pub quantization_aware: bool,
    pub model_rate_loss: bool,
    pub relaxation: LatentRelaxation,
    /// Pixels of the whole instance set; the model rate is amortized over them.
    pub instance_pixels: usize,
    pub prior: &'a SpikeSlabPrior,
}

/// Gradients of [`rdm_loss`].
#[derive(Clone, Debug)]
pub struct RdmGrads {
    pub transmitter: Vec<Tensor>,
    pub delta: Vec<Tensor>,
}

/// Checks that `delta` has exactly the receiver-side tensor shapes.
pub fn check_delta(global: &CodecModel, delta: &[Tensor]) -> Result<()> {
    let shapes: Vec<&[usize]> = global
        .indices(Side::Receiver)
        .map(|i| global.specs()[i].shape.as_slice())
        .collect();
    if shapes.len() != delta.len() || shapes.iter().zip(delta).any(|(s, d)| *s != d.shape()) {
        return Err(Error::UpdateMismatch(
            "update tensors must match the receiver parameter shapes".into(),
        ));
    }
    Ok(())
}

/// Full-model objective on frame `x`: the RD loss at receiver weights
/// `theta_D + Q_t(delta)` (or `theta_D + delta`) plus `beta * M(delta)`
/// per instance pixel.
pub fn rdm_loss(
    global: &CodecModel,
    transmitter: &[Tensor],
    delta: &[Tensor],
    x: &Tensor,
    opts: &RdmOptions,
    noise_seed: u64,
) -> Result<(RdmTerms, RdmGrads)> {
    check_delta(global, delta)?;
    let grid: QuantGrid = opts.prior.grid();
    let mut g = Graph::new();
    let mut p: Vec<Option<Var>> = vec![None; global.params().len()];
    let tx_vars: Vec<Var> = global
        .indices(Side::Transmitter)
        .zip(transmitter)
        .map(|(i, t)| {
            let v = g.param(t.clone());
            p[i] = Some(v);
            v
        })
        .collect();
    if tx_vars.len() != global.indices(Side::Transmitter).count() {
        return Err(Error::UpdateMismatch("wrong number of transmitter tensors".into()));
    }
    let mut delta_vars = Vec::with_capacity(delta.len());
    for (i, d) in global.indices(Side::Receiver).zip(delta) {
        let base = g.constant(global.params()[i].clone());
        let dv = g.param(d.clone());
        delta_vars.push(dv);
        let applied = if opts.quantization_aware {
            g.straight_through(dv, |v| grid.quantize(v))
        } else {
            dv
        };
        p[i] = Some(g.add(base, applied)?);
    }
    let p: Vec<Var> = p.into_iter().map(|v| v.expect("every parameter bound")).collect();
    let rd = rd_graph(&mut g, global, &p, x, opts.beta, opts.relaxation, noise_seed)?;
    let mut grads = g.backward(rd.loss)?;
    let rd_terms = terms(&g, rd);

    let mut delta_grads: Vec<Tensor> = delta_vars.iter().map(|&v| grads.take(v).expect("delta gradient")).collect();
    let mut model_rate_bpp = 0.0;
    let mut loss = rd_terms.loss;
    if opts.model_rate_loss {
        let px = opts.instance_pixels as f64;
        let mut bits = 0.0;
        for (d, gr) in delta.iter().zip(&mut delta_grads) {
            bits += opts.prior.model_rate_continuous(d.data());
            let dm = opts.prior.grad_model_rate_continuous(d.data());
            for (gi, m) in gr.data_mut().iter_mut().zip(dm) {
                *gi += opts.beta * m / px;
            }
        }
        model_rate_bpp = bits / px;
        loss += opts.beta * model_rate_bpp;
    }
    let transmitter_grads = tx_vars.iter().map(|&v| grads.take(v).expect("transmitter gradient")).collect();
    Ok((
        RdmTerms {
            loss,
            rate_bpp: rd_terms.rate_bpp,
            mse: rd_terms.mse,
            model_rate_bpp,
        },
        RdmGrads {
            transmitter: transmitter_grads,
            delta: delta_grads,
        },
    ))
}

/// Zero update with the receiver tensor shapes.
pub fn zero_delta(global: &CodecModel) -> Vec<Tensor> {
    global
        .indices(Side::Receiver)
        .map(|i| Tensor::zeros(&global.specs()[i].shape))
        .collect()
}

/// Concatenates update tensors in serialization order.
pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}
