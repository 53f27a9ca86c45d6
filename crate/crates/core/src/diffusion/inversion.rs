//! Edit-friendly inversion: per-timestep independently noised latents plus
//! the noise maps that make the stochastic reverse chain land exactly on them.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{FinalSigma, NoiseSchedule};
use super::steps::{forward_sample, posterior_mean, reverse_step};
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::io::{read_file, ByteReader, ByteWriter};

/// Noise predictor used by the reverse process.
pub trait Denoiser {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;

    /// Stable identifier of the weights; trajectories remember it.
    fn fingerprint(&self) -> u64;
}

/// Wraps a closure as a [`Denoiser`].
pub struct FnDenoiser<F> {
    pub f: F,
    pub id: u64,
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        (self.f)(x_t, t)
    }

    fn fingerprint(&self) -> u64 {
        self.id
    }
}

/// Standard-normal tensor from the counter-based stream `(seed, stream)`.
pub fn gaussian(shape: &[usize], seed: u64, stream: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

pub(crate) fn eps_checked(d: &dyn Denoiser, x: &Tensor, t: usize) -> Result<Tensor> {
    let eps = d.predict_eps(x, t)?;
    if eps.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "denoiser output",
            left: x.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    Ok(eps)
}

/// Benign latents `x[0..=T]` and consistent noise maps `z[1..=T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrajectory {
    schedule: NoiseSchedule,
    xs: Vec<Tensor>,
    zs: Vec<Tensor>,
    denoiser: u64,
    seed: u64,
}

const TRAJ_MAGIC: &[u8; 8] = b"ADVTRAJ\0";
const TRAJ_VERSION: u32 = 1;

impl DiffusionTrajectory {
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// Benign latent at `t` (0 is the clean latent).
    pub fn x(&self, t: usize) -> &Tensor {
        &self.xs[t]
    }

    /// Noise map for the step `t → t−1`, `1 ≤ t ≤ T`.
    pub fn z(&self, t: usize) -> &Tensor {
        &self.zs[t - 1]
    }

    pub fn denoiser_fingerprint(&self) -> u64 {
        self.denoiser
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn check_denoiser(&self, d: &dyn Denoiser) -> Result<()> {
        if d.fingerprint() != self.denoiser {
            return Err(Error::invalid(format!(
                "trajectory was inverted with denoiser {:016x}, got {:016x}",
                self.denoiser,
                d.fingerprint()
            )));
        }
        Ok(())
    }

    /// Layout after the 16-byte header, all little-endian:
    /// `T: u64, beta_start: f64, beta_end: f64, final_sigma: u64,
    /// denoiser: u64, seed: u64, rank: u64, dims: rank×u64`, then the
    /// `T+1` latents `x[0..=T]` and the `T` maps `z[1..=T]` as raw `f64`
    /// arrays of `product(dims)` values each.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(TRAJ_MAGIC, TRAJ_VERSION);
        let (b0, b1) = self.schedule.beta_range();
        w.u64(self.steps() as u64)
            .f64(b0)
            .f64(b1)
            .u64(self.schedule.final_sigma().code())
            .u64(self.denoiser)
            .u64(self.seed);
        let shape = self.xs[0].shape();
        w.u64(shape.len() as u64);
        for &d in shape {
            w.u64(d as u64);
        }
        for x in &self.xs {
            w.f64s(x.data());
        }
        for z in &self.zs {
            w.f64s(z.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open("trajectory", bytes, TRAJ_MAGIC, TRAJ_VERSION)?;
        let steps = r.usize()?;
        let (b0, b1) = (r.f64()?, r.f64()?);
        let final_sigma = FinalSigma::from_code(r.u64()?)?;
        let schedule = NoiseSchedule::linear_with(steps, b0, b1, final_sigma)?;
        let denoiser = r.u64()?;
        let seed = r.u64()?;
        let rank = r.usize()?;
        if rank == 0 || rank > 8 {
            return Err(Error::format("trajectory", format!("bad rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut read = || -> Result<Tensor> { Tensor::new(&shape, r.f64s(n)?) };
        let xs = (0..=steps).map(|_| read()).collect::<Result<Vec<_>>>()?;
        let zs = (0..steps).map(|_| read()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(DiffusionTrajectory {
            schedule,
            xs,
            zs,
            denoiser,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Builds the benign trajectory of `x0`: `x_t` from independent noise
/// `ε̃_t = N(seed, stream t)`, then `z_t = (x_{t−1} − μ̂_t(x_t)) / σ_t`.
pub fn edit_friendly_invert(
    x0: &Tensor,
    s: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    seed: u64,
) -> Result<DiffusionTrajectory> {
    let steps = s.steps();
    let mut xs = Vec::with_capacity(steps + 1);
    xs.push(x0.clone());
    for t in 1..=steps {
        let eps = gaussian(x0.shape(), seed, t as u64);
        xs.push(forward_sample(x0, t, &eps, s)?);
    }
    let mut zs = Vec::with_capacity(steps);
    for t in 1..=steps {
        let sigma = s.sigma(t);
        if sigma == 0.0 {
            if t >= 2 {
                return Err(Error::invalid(format!("sigma({t}) is zero")));
            }
            zs.push(Tensor::zeros(x0.shape()));
            continue;
        }
        let eps = eps_checked(denoiser, &xs[t], t)?;
        let mu = posterior_mean(&xs[t], &eps, t, s)?;
        zs.push(xs[t - 1].zip_with(&mu, |prev, m| (prev - m) / sigma)?);
    }
    Ok(DiffusionTrajectory {
        schedule: s.clone(),
        xs,
        zs,
        denoiser: denoiser.fingerprint(),
        seed,
    })
}

/// Runs the reverse chain from `x[T]` with the stored noise maps.
pub fn reconstruct(traj: &DiffusionTrajectory, denoiser: &dyn Denoiser) -> Result<Tensor> {
    reconstruct_from(traj, traj.steps(), denoiser)
}

/// Runs the reverse chain from the stored `x[start]` down to `t = 0`.
pub fn reconstruct_from(
    traj: &DiffusionTrajectory,
    start: usize,
    denoiser: &dyn Denoiser,
) -> Result<Tensor> {
    traj.check_denoiser(denoiser)?;
    if start > traj.steps() {
        return Err(Error::TimestepOutOfRange {
            t: start,
            max: traj.steps(),
        });
    }
    let s = traj.schedule();
    let mut x = traj.x(start).clone();
    for t in (1..=start).rev() {
        let eps = eps_checked(denoiser, &x, t)?;
        x = reverse_step(&x, traj.z(t), &eps, t, s)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_denoiser() -> FnDenoiser<impl Fn(&Tensor, usize) -> Result<Tensor>> {
        FnDenoiser {
            f: |x: &Tensor, t: usize| Ok(x.map(|v| (v * 0.7 + t as f64 * 0.01).sin())),
            id: 7,
        }
    }

    fn image(seed: u64) -> Tensor {
        gaussian(&[4, 4], seed, 0).map(|v| 0.5 + 0.2 * v)
    }

    fn tol(x0: &Tensor) -> f64 {
        1e-5 * (1.0 + x0.max_abs())
    }

    #[test]
    fn reconstruction_is_exact() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let d = toy_denoiser();
        let x0 = image(1);
        let traj = edit_friendly_invert(&x0, &s, &d, 99).unwrap();
        let rec = reconstruct(&traj, &d).unwrap();
        assert!(rec.max_abs_diff(&x0).unwrap() <= tol(&x0));
        for start in [1, 20, 57] {
            let rec = reconstruct_from(&traj, start, &d).unwrap();
            assert!(rec.max_abs_diff(&x0).unwrap() <= tol(&x0), "start {start}");
        }
        assert_eq!(reconstruct_from(&traj, 0, &d).unwrap(), x0);
        for t in 0..=100 {
            assert_eq!(traj.x(t).shape(), x0.shape());
        }
    }

    #[test]
    fn inversion_is_deterministic_and_uses_independent_noise() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let d = toy_denoiser();
        let a = edit_friendly_invert(&image(3), &s, &d, 5).unwrap();
        let b = edit_friendly_invert(&image(3), &s, &d, 5).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        // noise recovered from x_t differs across t
        let eps = |t: usize| {
            let ab = s.alpha_bar(t);
            a.x(t)
                .zip_with(a.x(0), |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .unwrap()
        };
        assert!(eps(3).max_abs_diff(&eps(4)).unwrap() > 1e-3);
        let c = edit_friendly_invert(&image(3), &s, &d, 6).unwrap();
        assert_ne!(a.x(5), c.x(5));
    }

    #[test]
    fn single_step_scalar_noise_map() {
        let s = NoiseSchedule::linear(1, 0.36, 0.36).unwrap();
        let d = FnDenoiser {
            f: |x: &Tensor, _| Ok(x.map(|v| 0.5 * v)),
            id: 1,
        };
        let x0 = Tensor::vector(vec![0.4]);
        let traj = edit_friendly_invert(&x0, &s, &d, 11).unwrap();
        let x1 = traj.x(1).data()[0];
        // σ_1 = √0.36 = 0.6, ᾱ_1 = 0.64; μ̂_1 = x̂_0 = (x1 − 0.6·0.5·x1)/0.8
        let mu = (x1 - 0.6 * 0.5 * x1) / 0.8;
        let z = (0.4 - mu) / 0.6;
        assert!((traj.z(1).data()[0] - z).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_errors_and_zero_final_sigma_stores_zero_map() {
        let s = NoiseSchedule::linear_with(5, 1e-3, 0.1, FinalSigma::Zero).unwrap();
        let d = toy_denoiser();
        let traj = edit_friendly_invert(&image(2), &s, &d, 1).unwrap();
        assert_eq!(traj.z(1).max_abs(), 0.0);
    }

    #[test]
    fn denoiser_shape_and_identity_are_checked() {
        let s = NoiseSchedule::linear(5, 1e-3, 0.1).unwrap();
        let bad = FnDenoiser {
            f: |_: &Tensor, _| Ok(Tensor::zeros(&[3])),
            id: 2,
        };
        assert!(matches!(
            edit_friendly_invert(&image(2), &s, &bad, 1),
            Err(Error::ShapeMismatch { .. })
        ));
        let d = toy_denoiser();
        let traj = edit_friendly_invert(&image(2), &s, &d, 1).unwrap();
        let other = FnDenoiser {
            f: |x: &Tensor, _| Ok(x.clone()),
            id: 8,
        };
        assert!(reconstruct(&traj, &other).is_err());
    }

    #[test]
    fn changing_a_noise_map_changes_the_output() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let d = toy_denoiser();
        let x0 = image(4);
        let traj = edit_friendly_invert(&x0, &s, &d, 3).unwrap();
        for t in [1, 7, 20] {
            let mut bumped = traj.clone();
            bumped.zs[t - 1].data_mut()[5] += 0.1;
            let rec = reconstruct(&bumped, &d).unwrap();
            assert!(rec.max_abs_diff(&x0).unwrap() > 1e-6, "t={t}");
        }
    }

    #[test]
    fn serialization_round_trip_and_header() {
        let s = NoiseSchedule::linear(6, 1e-3, 0.1).unwrap();
        let d = toy_denoiser();
        let traj = edit_friendly_invert(&image(9), &s, &d, 4).unwrap();
        let bytes = traj.to_bytes();
        assert_eq!(&bytes[..8], b"ADVTRAJ\0");
        // header + 6 scalars + rank + 2 dims + (7 + 6) arrays of 16 values
        assert_eq!(bytes.len(), 16 + 6 * 8 + 8 + 16 + 13 * 16 * 8);
        assert_eq!(DiffusionTrajectory::from_bytes(&bytes).unwrap(), traj);
        assert!(DiffusionTrajectory::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
