use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::eval::{evaluate, evaluate_latents, instance_pixels, pad_frame, Evaluation};
use super::loss::{flatten, latent_rd_graph, rd_loss, rdm_loss, zero_delta, RdmOptions};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{CodecModel, EncodeMode, LatentPair, LatentRelaxation};
use crate::prior::SpikeSlabPrior;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FullModel,
    EncoderOnly,
    DirectLatent,
}

impl Regime {
    pub fn default_lr(self) -> f64 {
        match self {
            Regime::FullModel => 1e-4,
            Regime::EncoderOnly => 1e-6,
            Regime::DirectLatent => 1e-3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::FullModel => "full_model",
            Regime::EncoderOnly => "encoder_only",
            Regime::DirectLatent => "direct_latent",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full_model" => Ok(Regime::FullModel),
            "encoder_only" => Ok(Regime::EncoderOnly),
            "direct_latent" => Ok(Regime::DirectLatent),
            _ => Err(Error::Config(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub regime: Regime,
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    pub quantization_aware: bool,
    pub model_rate_loss: bool,
    pub eval_interval: usize,
    pub seed: u64,
    /// Quantization bin width `t`.
    pub step_size: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl FinetuneConfig {
    pub fn new(regime: Regime, beta: f64) -> Self {
        Self {
            regime,
            beta,
            steps: 5000,
            lr: regime.default_lr(),
            quantization_aware: true,
            model_rate_loss: true,
            eval_interval: 250,
            seed: 0,
            step_size: 0.005,
            sigma: 0.05,
            alpha: 1000.0,
        }
    }

    pub fn prior(&self) -> Result<SpikeSlabPrior> {
        SpikeSlabPrior::new(self.sigma, self.step_size, self.alpha)
    }

    /// Whether evaluations should be ranked on unquantized updates.
    fn selects_unquantized(&self) -> bool {
        self.regime == Regime::FullModel && !self.quantization_aware && !self.model_rate_loss
    }
}

/// Loss of one optimization step (relaxed, on one frame).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub frame: usize,
    pub lr: f64,
    pub loss: f64,
    pub rate_bpp: f64,
    pub mse: f64,
    pub model_rate_bpp: f64,
}

/// Evaluation of the whole set after `step` updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    /// At the transmitted (quantized) update, model bits counted.
    pub coded: Evaluation,
    /// At the unquantized update; only for full-model runs trained without quantization.
    pub unquantized: Option<Evaluation>,
    /// Value the best snapshot is selected on.
    pub key: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub config: FinetuneConfig,
    /// Best transmitter parameters.
    pub transmitter: Vec<Tensor>,
    /// Best quantized receiver update, flattened (all zero unless full-model).
    pub update: Vec<f64>,
    /// Best unquantized receiver update, flattened.
    pub raw_update: Vec<f64>,
    /// Coded latents per frame (direct-latent only).
    pub latents: Option<Vec<LatentPair>>,
    pub best: EvalRecord,
    pub evals: Vec<EvalRecord>,
    pub steps: Vec<StepRecord>,
}

impl FinetuneResult {
    pub fn nonzero_updates(&self) -> usize {
        self.update.iter().filter(|v| **v != 0.0).count()
    }
}

fn quantized(prior: &SpikeSlabPrior, delta: &[Tensor]) -> Vec<f64> {
    prior.grid().quantize_all(&flatten(delta))
}

struct Tracker {
    best: Option<EvalRecord>,
    best_state: (Vec<Tensor>, Vec<f64>, Vec<f64>, Option<Vec<LatentPair>>),
    evals: Vec<EvalRecord>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            best: None,
            best_state: (Vec::new(), Vec::new(), Vec::new(), None),
            evals: Vec::new(),
        }
    }

    fn offer(&mut self, rec: EvalRecord, state: impl FnOnce() -> (Vec<Tensor>, Vec<f64>, Vec<f64>, Option<Vec<LatentPair>>)) {
        self.evals.push(rec);
        if self.best.is_none_or(|b| rec.key < b.key) {
            self.best = Some(rec);
            self.best_state = state();
        }
    }
}

fn is_eval_step(step: usize, cfg: &FinetuneConfig) -> bool {
    step == 0 || step == cfg.steps || (cfg.eval_interval > 0 && step % cfg.eval_interval == 0)
}

/// Finetunes `global` on `frames` under `cfg`. Frames are visited round-robin,
/// one per step; the whole set is evaluated every `eval_interval` steps and
/// the best evaluation is kept.
pub fn finetune(global: &CodecModel, frames: &[Tensor], cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    if frames.is_empty() {
        return Err(Error::Dataset("instance has no frames".into()));
    }
    let padded: Vec<Tensor> = frames.iter().map(pad_frame).collect::<Result<_>>()?;
    match cfg.regime {
        Regime::FullModel => finetune_full(global, frames, &padded, cfg),
        Regime::EncoderOnly => finetune_encoder(global, frames, &padded, cfg),
        Regime::DirectLatent => finetune_latents(global, frames, &padded, cfg),
    }
}

fn step_seed(cfg: &FinetuneConfig, step: usize) -> u64 {
    cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64
}

fn finetune_full(global: &CodecModel, frames: &[Tensor], padded: &[Tensor], cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    let prior = cfg.prior()?;
    let pixels = instance_pixels(frames)?;
    let zero_bits = prior.initial_cost_bits(global.receiver_parameter_count());
    let opts = RdmOptions {
        beta: cfg.beta,
        quantization_aware: cfg.quantization_aware,
        model_rate_loss: cfg.model_rate_loss,
        relaxation: LatentRelaxation::Mixed,
        instance_pixels: pixels,
        prior: &prior,
    };
    let n_tx = global.transmitter_params().len();
    let mut params: Vec<Tensor> = global.transmitter_params();
    params.extend(zero_delta(global));
    let mut opt = Adam::new(cfg.lr, &params);
    let mut tracker = Tracker::new();
    let mut steps = Vec::with_capacity(cfg.steps);

    let evaluate_state = |params: &[Tensor], step: usize| -> Result<EvalRecord> {
        let (tx, delta) = params.split_at(n_tx);
        let q = quantized(&prior, delta);
        let model = global.with_transmitter(tx)?.with_receiver_update(&q)?;
        let coded = evaluate(&model, frames, cfg.beta)?.with_model_bits(prior.model_rate_discrete(&q)?, zero_bits);
        let unquantized = if cfg.quantization_aware {
            None
        } else {
            let raw = global.with_transmitter(tx)?.with_receiver_update(&flatten(delta))?;
            Some(evaluate(&raw, frames, cfg.beta)?)
        };
        let key = if cfg.model_rate_loss {
            coded.rdm()
        } else if cfg.selects_unquantized() {
            unquantized.expect("unquantized evaluation").rd()
        } else {
            coded.rd()
        };
        Ok(EvalRecord {
            step,
            coded,
            unquantized,
            key,
        })
    };
    let snapshot = |params: &[Tensor]| {
        let (tx, delta) = params.split_at(n_tx);
        (tx.to_vec(), quantized(&prior, delta), flatten(delta), None)
    };

    for step in 0..=cfg.steps {
        if is_eval_step(step, cfg) {
            let rec = evaluate_state(&params, step)?;
            tracker.offer(rec, || snapshot(&params));
        }
        if step == cfg.steps {
            break;
        }
        let frame = step % frames.len();
        let (tx, delta) = params.split_at(n_tx);
        let (terms, grads) = rdm_loss(global, tx, delta, &padded[frame], &opts, step_seed(cfg, step))?;
        let mut all = grads.transmitter;
        all.extend(grads.delta);
        opt.step(&mut params, &all);
        steps.push(StepRecord {
            step,
            frame,
            lr: opt.lr(),
            loss: terms.loss,
            rate_bpp: terms.rate_bpp,
            mse: terms.mse,
            model_rate_bpp: terms.model_rate_bpp,
        });
    }
    let (transmitter, update, raw_update, latents) = tracker.best_state;
    Ok(FinetuneResult {
        config: cfg.clone(),
        transmitter,
        update,
        raw_update,
        latents,
        best: tracker.best.expect("evaluated at step 0"),
        evals: tracker.evals,
        steps,
    })
}

fn finetune_encoder(global: &CodecModel, frames: &[Tensor], padded: &[Tensor], cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    let receiver_len = global.receiver_parameter_count();
    let mut params = global.transmitter_params();
    let mut opt = Adam::new(cfg.lr, &params);
    let tx_idx: Vec<usize> = global.indices(crate::model::Side::Transmitter).collect();
    let mut tracker = Tracker::new();
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..=cfg.steps {
        if is_eval_step(step, cfg) {
            let model = global.with_transmitter(&params)?;
            let coded = evaluate(&model, frames, cfg.beta)?;
            let rec = EvalRecord {
                step,
                coded,
                unquantized: None,
                key: coded.rd(),
            };
            tracker.offer(rec, || (params.clone(), vec![0.0; receiver_len], vec![0.0; receiver_len], None));
        }
        if step == cfg.steps {
            break;
        }
        let frame = step % frames.len();
        let model = global.with_transmitter(&params)?;
        let (terms, grads) = rd_loss(&model, &padded[frame], cfg.beta, LatentRelaxation::Mixed, step_seed(cfg, step))?;
        let tx_grads: Vec<Tensor> = tx_idx.iter().map(|&i| grads[i].clone()).collect();
        opt.step(&mut params, &tx_grads);
        steps.push(StepRecord {
            step,
            frame,
            lr: opt.lr(),
            loss: terms.loss,
            rate_bpp: terms.rate_bpp,
            mse: terms.mse,
            model_rate_bpp: 0.0,
        });
    }
    let (transmitter, update, raw_update, latents) = tracker.best_state;
    Ok(FinetuneResult {
        config: cfg.clone(),
        transmitter,
        update,
        raw_update,
        latents,
        best: tracker.best.expect("evaluated at step 0"),
        evals: tracker.evals,
        steps,
    })
}

fn finetune_latents(global: &CodecModel, frames: &[Tensor], padded: &[Tensor], cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    let receiver_len = global.receiver_parameter_count();
    // one (z1, z2) pair per frame, initialized by the encoder
    let mut latents: Vec<Vec<Tensor>> = padded
        .iter()
        .map(|x| global.encode_latents(x, EncodeMode::Deterministic).map(|z| vec![z.z1, z.z2]))
        .collect::<Result<_>>()?;
    let mut opts: Vec<Adam> = latents.iter().map(|z| Adam::new(cfg.lr, z)).collect();
    let coded_of = |latents: &[Vec<Tensor>]| -> Result<Vec<LatentPair>> {
        latents
            .iter()
            .map(|z| {
                global.clamp_latents(LatentPair {
                    z1: z[0].clone(),
                    z2: z[1].clone(),
                })
            })
            .collect()
    };
    let mut tracker = Tracker::new();
    let mut steps = Vec::with_capacity(cfg.steps);
    let tx = global.transmitter_params();
    for step in 0..=cfg.steps {
        if is_eval_step(step, cfg) {
            let coded_latents = coded_of(&latents)?;
            let coded = evaluate_latents(global, frames, &coded_latents, cfg.beta)?;
            let rec = EvalRecord {
                step,
                coded,
                unquantized: None,
                key: coded.rd(),
            };
            tracker.offer(rec, || (tx.clone(), vec![0.0; receiver_len], vec![0.0; receiver_len], Some(coded_latents)));
        }
        if step == cfg.steps {
            break;
        }
        let frame = step % frames.len();
        let mut g = Graph::new();
        let p = global.bind_constants(&mut g);
        let xv = g.constant(padded[frame].clone());
        let z1 = g.param(latents[frame][0].clone());
        let z2 = g.param(latents[frame][1].clone());
        let v = latent_rd_graph(&mut g, global, &p, xv, z1, z2, cfg.beta, LatentRelaxation::Mixed, step_seed(cfg, step))?;
        let mut grads = g.backward(v.loss)?;
        let gz = vec![grads.take(z1).expect("z1 gradient"), grads.take(z2).expect("z2 gradient")];
        opts[frame].step(&mut latents[frame], &gz);
        steps.push(StepRecord {
            step,
            frame,
            lr: cfg.lr,
            loss: g.value(v.loss).item(),
            rate_bpp: g.value(v.rate_bpp).item(),
            mse: g.value(v.mse).item(),
            model_rate_bpp: 0.0,
        });
    }
    let (transmitter, update, raw_update, latents) = tracker.best_state;
    Ok(FinetuneResult {
        config: cfg.clone(),
        transmitter,
        update,
        raw_update,
        latents,
        best: tracker.best.expect("evaluated at step 0"),
        evals: tracker.evals,
        steps,
    })
}
