use crate::error::{Error, Result};

/// How the noise scale of the final reverse step (t = 1) is chosen.
///
/// The DDPM posterior standard deviation vanishes at t = 1. With a zero
/// final noise scale the last step cannot absorb the denoiser's error, so
/// edit-friendly inversion is exact only for `FirstBeta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalSigma {
    /// `σ_1 = √β_1`.
    FirstBeta,
    /// `σ_1 = 0`: deterministic final step, `z_1` stored as zero.
    Zero,
}

impl FinalSigma {
    pub fn code(self) -> u64 {
        match self {
            FinalSigma::FirstBeta => 0,
            FinalSigma::Zero => 1,
        }
    }

    pub fn from_code(code: u64) -> Result<Self> {
        match code {
            0 => Ok(FinalSigma::FirstBeta),
            1 => Ok(FinalSigma::Zero),
            other => Err(Error::invalid(format!("unknown final-sigma code {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FinalSigma::FirstBeta => "first-beta",
            FinalSigma::Zero => "zero",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first-beta" => Ok(FinalSigma::FirstBeta),
            "zero" => Ok(FinalSigma::Zero),
            other => Err(Error::invalid(format!(
                "final sigma `{other}` (expected first-beta|zero)"
            ))),
        }
    }
}

/// Per-timestep coefficients of a linear-β DDPM. Timesteps are 1-based;
/// `alpha_bar(0)` is defined as 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    final_sigma: FinalSigma,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::linear_with(steps, beta_start, beta_end, FinalSigma::FirstBeta)
    }

    pub fn linear_with(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        final_sigma: FinalSigma,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "beta range must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                let posterior = ((1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]).sqrt();
                match (i, final_sigma) {
                    (0, FinalSigma::FirstBeta) => betas[0].sqrt(),
                    _ => posterior,
                }
            })
            .collect();
        Ok(NoiseSchedule {
            beta_start,
            beta_end,
            final_sigma,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Linear schedule whose endpoints are the classic 1000-step range
    /// `(1e-4, 0.02)` rescaled by `1000 / steps`, so the terminal `ᾱ_T` stays
    /// near pure noise for short chains.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let (b0, b1) = Self::scaled_range(steps);
        Self::linear(steps, b0, b1)
    }

    pub fn scaled_range(steps: usize) -> (f64, f64) {
        let scale = 1000.0 / steps.max(1) as f64;
        ((1e-4 * scale).min(0.999), (0.02 * scale).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn final_sigma(&self) -> FinalSigma {
        self.final_sigma
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// `(a, b)` with `x̂_0 = a·x_t − b·ε̂`.
    pub fn x0_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        if ab < 1e-12 {
            return Err(Error::invalid(format!(
                "alpha_bar({t}) = {ab:e} is too small to invert"
            )));
        }
        let s = ab.sqrt();
        Ok((1.0 / s, (1.0 - ab).sqrt() / s))
    }

    /// `(c0, ct)` with `μ̂_t = c0·x̂_0 + ct·x_t`.
    pub fn posterior_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        let prev = self.alpha_bar(t - 1);
        let denom = 1.0 - ab;
        Ok((
            prev.sqrt() * self.beta(t) / denom,
            self.alpha(t).sqrt() * (1.0 - prev) / denom,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert!((s.alpha_bar(1) - 0.7).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn hundred_steps_reach_near_pure_noise() {
        // The unscaled 1000-step range leaves a lot of signal after 100 steps.
        let direct = |b0: f64, b1: f64| -> f64 {
            (0..100)
                .map(|i| 1.0 - (b0 + (b1 - b0) * i as f64 / 99.0))
                .product()
        };
        let raw = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert!((raw.alpha_bar(100) - direct(1e-4, 0.02)).abs() < 1e-14);
        assert!((raw.alpha_bar(100) - 0.363_563_248).abs() < 1e-8);

        let s = NoiseSchedule::scaled_linear(100).unwrap();
        assert_eq!(s.beta_range(), (1e-3, 0.2));
        assert!((s.alpha_bar(100) - direct(1e-3, 0.2)).abs() < 1e-15);
        assert!(s.alpha_bar(100) < 0.01, "{}", s.alpha_bar(100));
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.sigma(t) > 0.0);
        }
    }

    #[test]
    fn posterior_sigma_formula() {
        let s = NoiseSchedule::linear_with(10, 1e-3, 0.2, FinalSigma::Zero).unwrap();
        assert_eq!(s.sigma(1), 0.0);
        for t in 2..=10 {
            let expect = ((1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t)).sqrt();
            assert!((s.sigma(t) - expect).abs() < 1e-15);
        }
        let f = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        assert!((f.sigma(1) - 1e-3f64.sqrt()).abs() < 1e-15);
        assert_eq!(f.sigma(5), s.sigma(5));
    }

    #[test]
    fn rejects_invalid_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }
}
