use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grad::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    same_shape("forward_sample", x0, eps)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_with(eps, |x, e| a * x + b * e)
}

/// Closed-form clean-latent estimate from a noisy latent and a noise prediction.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape("predict_x0", x_t, eps_hat)?;
    let (a, b) = s.x0_coeffs(t)?;
    x_t.zip_with(eps_hat, |x, e| a * x - b * e)
}

/// DDPM posterior mean `μ̂_t(x_t)` built on [`predict_x0`].
pub fn posterior_mean(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let x0 = predict_x0(x_t, eps_hat, t, s)?;
    let (c0, ct) = s.posterior_coeffs(t)?;
    x0.zip_with(x_t, |a, b| c0 * a + ct * b)
}

/// `x_{t−1} = μ̂_t(x_t) + σ_t·z_t`, no clamping.
pub fn reverse_step(
    x_t: &Tensor,
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape("reverse_step", x_t, z_t)?;
    let mu = posterior_mean(x_t, eps_hat, t, s)?;
    let sigma = s.sigma(t);
    mu.zip_with(z_t, |m, z| m + sigma * z)
}
