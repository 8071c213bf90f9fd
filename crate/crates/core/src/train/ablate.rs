use std::collections::BTreeMap;

use super::eval::Evaluation;
use super::finetune::{finetune, FinetuneConfig, FinetuneResult, Regime};
use crate::error::{Error, Result};
use crate::model::CodecModel;
use crate::tensor::Tensor;

/// Switch settings compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Case {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl Case {
    pub const ALL: [Case; 6] = [Case::I, Case::II, Case::III, Case::IV, Case::V, Case::VI];

    /// `(quantization_aware, model_rate_loss, model bits counted)`.
    pub fn switches(self) -> (bool, bool, bool) {
        match self {
            Case::I => (true, true, true),
            Case::II => (false, true, true),
            Case::III => (true, false, true),
            Case::IV => (false, false, true),
            Case::V => (true, false, false),
            Case::VI => (false, false, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Case::I => "I",
            Case::II => "II",
            Case::III => "III",
            Case::IV => "IV",
            Case::V => "V",
            Case::VI => "VI",
        }
    }
}

impl std::str::FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Case::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation case {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub case: Case,
    /// Latent rate plus model rate when counted.
    pub rate_bpp: f64,
    pub model_rate_bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    /// `beta * rate_bpp + mse`.
    pub loss: f64,
    pub nonzero_updates: usize,
}

fn row(case: Case, e: &Evaluation, counted: bool, nonzero: usize) -> AblationRow {
    let model_rate_bpp = if counted { e.model_rate_bpp() } else { 0.0 };
    let rate_bpp = e.rate_bpp() + model_rate_bpp;
    AblationRow {
        case,
        rate_bpp,
        model_rate_bpp,
        mse: e.mse,
        psnr: e.psnr(),
        loss: e.beta * rate_bpp + e.mse,
        nonzero_updates: nonzero,
    }
}

/// Row for `case` from the run trained with its switches.
pub fn case_row(case: Case, run: &FinetuneResult) -> AblationRow {
    let (_, _, counted) = case.switches();
    let e = match (counted, run.best.unquantized) {
        (false, Some(u)) => u,
        _ => run.best.coded,
    };
    row(case, &e, counted, run.nonzero_updates())
}

/// Runs the distinct finetuning configurations behind `cases` (V and VI reuse
/// the runs of III and IV) on up to `threads` threads.
pub fn ablate(
    global: &CodecModel,
    frames: &[Tensor],
    base: &FinetuneConfig,
    cases: &[Case],
    threads: usize,
) -> Result<(Vec<AblationRow>, BTreeMap<(bool, bool), FinetuneResult>)> {
    let mut configs: Vec<(bool, bool)> = cases.iter().map(|c| (c.switches().0, c.switches().1)).collect();
    configs.sort();
    configs.dedup();
    let run_one = |(qa, mrl): (bool, bool)| {
        let cfg = FinetuneConfig {
            regime: Regime::FullModel,
            quantization_aware: qa,
            model_rate_loss: mrl,
            ..base.clone()
        };
        finetune(global, frames, &cfg).map(|r| ((qa, mrl), r))
    };
    let mut runs = BTreeMap::new();
    for chunk in configs.chunks(threads.max(1)) {
        let results: Vec<Result<_>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&c| s.spawn(move || run_one(c))).collect();
            handles.into_iter().map(|h| h.join().expect("finetune thread panicked")).collect()
        });
        for r in results {
            let (k, v) = r?;
            runs.insert(k, v);
        }
    }
    let rows = cases
        .iter()
        .map(|&c| {
            let (qa, mrl, _) = c.switches();
            case_row(c, &runs[&(qa, mrl)])
        })
        .collect();
    Ok((rows, runs))
}

/// `f` equispaced frame indices of `count`, starting at 0.
pub fn equispaced(count: usize, f: usize) -> Vec<usize> {
    (0..f).map(|i| i * count / f).collect()
}

/// Default frame-count grid clipped to `available`.
pub fn default_frame_grid(available: usize) -> Vec<usize> {
    [1, 2, 5, 10, 25, 50, 100, 250, 500]
        .into_iter()
        .filter(|&f| f <= available)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemporalRow {
    pub frames: usize,
    pub beta: f64,
    pub regime: Regime,
    pub rate_bpp: f64,
    pub model_rate_bpp: f64,
    pub zero_model_rate_bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub loss: f64,
}

/// Full-model and encoder-only finetuning on `f` equispaced frames for every
/// `(f, beta)` pair.
pub fn temporal_ablation(
    global: &CodecModel,
    frames: &[Tensor],
    fs: &[usize],
    betas: &[f64],
    base: &FinetuneConfig,
) -> Result<Vec<TemporalRow>> {
    let mut out = Vec::new();
    for &f in fs {
        if f == 0 || f > frames.len() {
            return Err(Error::Config(format!("f = {f} outside 1..={}", frames.len())));
        }
        let subset: Vec<Tensor> = equispaced(frames.len(), f).into_iter().map(|i| frames[i].clone()).collect();
        for &beta in betas {
            for regime in [Regime::FullModel, Regime::EncoderOnly] {
                let cfg = FinetuneConfig {
                    regime,
                    beta,
                    lr: if regime == base.regime { base.lr } else { regime.default_lr() },
                    ..base.clone()
                };
                let r = finetune(global, &subset, &cfg)?;
                let e = r.best.coded;
                out.push(TemporalRow {
                    frames: f,
                    beta,
                    regime,
                    rate_bpp: e.rate_bpp(),
                    model_rate_bpp: e.model_rate_bpp(),
                    zero_model_rate_bpp: e.zero_model_rate_bpp(),
                    mse: e.mse,
                    psnr: e.psnr(),
                    loss: e.rdm(),
                });
            }
        }
    }
    Ok(out)
}
