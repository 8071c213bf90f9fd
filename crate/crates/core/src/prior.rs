//! Spike-and-slab prior over receiver-parameter updates.
//!
//! The continuous density is a two-component zero-mean Gaussian mixture,
//!
//! ```text
//! p(d) = (N(d; 0, sigma) + alpha * N(d; 0, t / 6)) / (1 + alpha)
//! ```
//!
//! where `t` is the quantization bin width. The spike's standard deviation is
//! pinned to `t / 6` so that almost all of its mass lands in the centre bin.
//! Quantized updates are coded under the pushforward of `p` through the
//! quantizer: the mass of each bin, renormalized by the mass the grid covers.

use std::f64::consts::LN_2;
use std::io::Write;

use crate::error::{Error, Result};
use crate::gauss::{normal_interval_mass, std_normal_cdf};
use crate::quant::QuantGrid;

/// Maximum probability mass the quantization grid may leave uncovered.
pub const TAIL_MASS: f64 = 1.0 / 256.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeSlabPrior {
    sigma: f64,
    alpha: f64,
    grid: QuantGrid,
    renorm: f64,
}

/// Discrete pmf over the quantization grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PmfTable {
    pub centers: Vec<f64>,
    pub masses: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl PmfTable {
    /// `-log2` of each bin's mass.
    pub fn bits(&self) -> Vec<f64> {
        self.masses.iter().map(|m| -m.log2()).collect()
    }

    /// Diagnostic dump: `bin,center,mass,bits`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin,center,mass,bits")?;
        for (i, (c, m)) in self.centers.iter().zip(&self.masses).enumerate() {
            writeln!(out, "{i},{c},{m},{}", -m.log2())?;
        }
        Ok(())
    }
}

/// Smallest odd `N` whose clip interval `[-(N-1)t/2, (N-1)t/2]` holds at least
/// `1 - 2^-8` of the slab's mass.
pub fn compute_bin_count(sigma: f64, step: f64) -> Result<usize> {
    if !(sigma > 0.0 && step > 0.0) || !sigma.is_finite() || !step.is_finite() {
        return Err(Error::InvalidPrior(format!(
            "sigma {sigma} and t {step} must be positive"
        )));
    }
    let mut half = 0usize;
    // uncovered slab mass = erfc(half * t / (sigma * sqrt 2))
    while 2.0 * std_normal_cdf(-(half as f64) * step / sigma) > TAIL_MASS {
        half += 1;
    }
    Ok(2 * half + 1)
}

impl SpikeSlabPrior {
    pub fn new(sigma: f64, step: f64, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidPrior(format!("alpha {alpha} must be >= 0")));
        }
        if !(sigma >= step) {
            return Err(Error::InvalidPrior(format!(
                "slab std {sigma} must be at least the bin width {step}"
            )));
        }
        let bins = compute_bin_count(sigma, step)?;
        let grid = QuantGrid::new(step, bins)?;
        let mut prior = Self {
            sigma,
            alpha,
            grid,
            renorm: 1.0,
        };
        prior.renorm = (0..bins).map(|i| prior.bin_mass_raw(grid.value(i))).sum();
        debug_assert!(1.0 - prior.renorm <= TAIL_MASS);
        Ok(prior)
    }

    /// Prior used for finetuning: `t = 0.005`, `sigma = 0.05`, `alpha = 1000`.
    pub fn standard() -> Self {
        Self::new(0.05, 0.005, 1000.0).expect("valid default prior")
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn step(&self) -> f64 {
        self.grid.step()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn spike_std(&self) -> f64 {
        self.grid.step() / 6.0
    }

    pub fn bins(&self) -> usize {
        self.grid.bins()
    }

    pub fn grid(&self) -> QuantGrid {
        self.grid
    }

    /// Total unnormalized mass of the `N` bins.
    pub fn renorm(&self) -> f64 {
        self.renorm
    }

    pub fn density(&self, delta: f64) -> f64 {
        self.log_density(delta).exp()
    }

    /// `ln p(delta)`, evaluated as a log-sum-exp so far tails stay finite.
    pub fn log_density(&self, delta: f64) -> f64 {
        let (ls, lk) = self.component_log_densities(delta);
        let lk = lk + self.alpha.ln();
        let m = ls.max(lk);
        m + ((ls - m).exp() + (lk - m).exp()).ln() - self.alpha.ln_1p()
    }

    fn component_log_densities(&self, delta: f64) -> (f64, f64) {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_n = |s: f64| -0.5 * (delta / s).powi(2) - s.ln() - half_ln_2pi;
        (log_n(self.sigma), log_n(self.spike_std()))
    }

    /// `d/d delta` of `-log2 p(delta)`.
    pub fn grad_neg_log2_density(&self, delta: f64) -> f64 {
        if self.alpha == 0.0 {
            return delta / (self.sigma * self.sigma) / LN_2;
        }
        let (ls, lk) = self.component_log_densities(delta);
        let lk = lk + self.alpha.ln();
        let m = ls.max(lk);
        let (ws, wk) = ((ls - m).exp(), (lk - m).exp());
        let total = ws + wk;
        let k = self.spike_std();
        let score = (ws * delta / (self.sigma * self.sigma) + wk * delta / (k * k)) / total;
        score / LN_2
    }

    /// Mixture CDF `P(delta' < delta)`.
    pub fn cdf(&self, delta: f64) -> f64 {
        (std_normal_cdf(delta / self.sigma) + self.alpha * std_normal_cdf(delta / self.spike_std()))
            / (1.0 + self.alpha)
    }

    /// Unnormalized mass of the bin centred on `center`.
    fn bin_mass_raw(&self, center: f64) -> f64 {
        let (lo, hi) = (center - self.step() / 2.0, center + self.step() / 2.0);
        let slab = normal_interval_mass(lo, hi, 0.0, self.sigma);
        let spike = normal_interval_mass(lo, hi, 0.0, self.spike_std());
        (slab + self.alpha * spike) / (1.0 + self.alpha)
    }

    /// Unnormalized centre-bin mass, `P(|delta| < t/2)`.
    pub fn center_mass_unnormalized(&self) -> f64 {
        self.bin_mass_raw(0.0)
    }

    pub fn build_pmf(&self) -> PmfTable {
        let centers = self.grid.centers();
        let masses: Vec<f64> = centers
            .iter()
            .map(|&c| self.bin_mass_raw(c) / self.renorm)
            .collect();
        let mut cumulative = Vec::with_capacity(masses.len() + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for m in &masses {
            acc += m;
            cumulative.push(acc);
        }
        PmfTable {
            centers,
            masses,
            cumulative,
        }
    }

    /// Continuous model-rate proxy `M = sum_i -log2 p(delta_i)`.
    pub fn model_rate_continuous(&self, deltas: &[f64]) -> f64 {
        -deltas.iter().map(|&d| self.log_density(d)).sum::<f64>() / LN_2
    }

    /// Gradient of [`model_rate_continuous`](Self::model_rate_continuous).
    pub fn grad_model_rate_continuous(&self, deltas: &[f64]) -> Vec<f64> {
        deltas
            .iter()
            .map(|&d| self.grad_neg_log2_density(d))
            .collect()
    }

    /// `-log2 p[0]`: cost of one zero update.
    pub fn zero_update_bits(&self) -> f64 {
        -(self.center_mass_unnormalized() / self.renorm).log2()
    }

    /// `M0`: cost of the all-zero update vector of length `count`.
    pub fn initial_cost_bits(&self, count: usize) -> f64 {
        count as f64 * self.zero_update_bits()
    }

    /// Discrete model rate `sum_i -log2 p[delta_bar_i]` of on-grid updates.
    ///
    /// Summed per bin as `count * bits`, so `N` zeros cost exactly
    /// [`initial_cost_bits`](Self::initial_cost_bits)`(N)`.
    pub fn model_rate_discrete(&self, quantized: &[f64]) -> Result<f64> {
        Ok(self.rate_from_counts(&self.bin_counts(quantized)?))
    }

    /// Number of updates falling in each bin.
    pub fn bin_counts(&self, quantized: &[f64]) -> Result<Vec<u64>> {
        let mut counts = vec![0u64; self.bins()];
        for &v in quantized {
            counts[self.grid.bin_index(v)?] += 1;
        }
        Ok(counts)
    }

    pub fn rate_from_counts(&self, counts: &[u64]) -> f64 {
        let bits = self.build_pmf().bits();
        counts
            .iter()
            .zip(&bits)
            .filter(|(&c, _)| c > 0)
            .map(|(&c, &b)| c as f64 * b)
            .sum()
    }

    /// Closed-form gradient of `-log2 p[Q_t(delta)]` with a straight-through
    /// quantizer: minus the density difference across the bin edges over the
    /// bin's mass.
    pub fn grad_model_rate_discrete(&self, delta: f64) -> f64 {
        let c = self.grid.quantize(delta);
        let (lo, hi) = (c - self.step() / 2.0, c + self.step() / 2.0);
        let num = (self.density(hi) - self.density(lo)) * (1.0 + self.alpha);
        let den = normal_interval_mass(lo, hi, 0.0, self.sigma)
            + self.alpha * normal_interval_mass(lo, hi, 0.0, self.spike_std());
        -num / den / LN_2
    }

    /// The same expression with the spike terms dropped.
    pub fn grad_model_rate_discrete_slab_only(&self, delta: f64) -> f64 {
        let c = self.grid.quantize(delta);
        let (lo, hi) = (c - self.step() / 2.0, c + self.step() / 2.0);
        let pdf = |x: f64| crate::gauss::normal_pdf(x, 0.0, self.sigma);
        let num = pdf(hi) - pdf(lo);
        let den = normal_interval_mass(lo, hi, 0.0, self.sigma);
        -num / den / LN_2
    }
}
