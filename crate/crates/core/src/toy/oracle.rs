//! Analytic oracle denoisers with closed-form posteriors. They make the
//! samplers exactly testable: a point-mass data distribution is recovered in
//! one trailing step, and a Gaussian data distribution has a known posterior
//! mean at every noise level.

use crate::error::{Error, Result};
use crate::grid::FieldStack;
use crate::schedule::{DiffusionSchedule, Parameterization};
use crate::tiling::{ChannelSignature, Denoiser};

/// Oracle for a point-mass data distribution at `x_star`: emits
/// `eps_hat = (x_t - sqrt(abar) x_star) / sqrt(1 - abar)`, whose implied
/// clean sample is exactly `x_star` for any input.
pub struct PointMassDenoiser {
    x_star: FieldStack,
    schedule: DiffusionSchedule,
    conditioning_channels: usize,
}

impl PointMassDenoiser {
    pub fn new(
        x_star: FieldStack,
        schedule: DiffusionSchedule,
        conditioning_channels: usize,
    ) -> Self {
        Self {
            x_star,
            schedule,
            conditioning_channels,
        }
    }

    pub fn target(&self) -> &FieldStack {
        &self.x_star
    }
}

impl Denoiser for PointMassDenoiser {
    fn parameterization(&self) -> Parameterization {
        Parameterization::Epsilon
    }

    fn signature(&self) -> ChannelSignature {
        ChannelSignature {
            latent: self.x_star.channels(),
            conditioning: self.conditioning_channels,
        }
    }

    fn denoise(
        &self,
        noisy: &FieldStack,
        _conditioning: &FieldStack,
        t: usize,
    ) -> Result<FieldStack> {
        if !noisy.same_shape(&self.x_star) {
            return Err(Error::DimensionMismatch(
                "point-mass oracle expects canvas-shaped inputs".into(),
            ));
        }
        let abar = self.schedule.alpha_cumprod(t);
        let sn = (1.0 - abar).sqrt();
        if sn == 0.0 {
            return Err(Error::InvalidParameter(
                "point-mass oracle undefined at a noiseless timestep".into(),
            ));
        }
        let sa = abar.sqrt();
        noisy.zip_map(&self.x_star, |x, star| (x - sa * star) / sn)
    }
}

/// Posterior mean of a Gaussian data distribution `N(mean, var I)` at noise
/// level `abar`.
pub(crate) fn gaussian_posterior_x0(x_t: f64, mean: f64, var: f64, abar: f64) -> f64 {
    let sa = abar.sqrt();
    (sa * var * x_t + (1.0 - abar) * mean) / (abar * var + (1.0 - abar))
}

/// Oracle for data `~ N(mean, var I)`: emits the noise estimate implied by
/// the exact posterior mean.
pub struct GaussianDenoiser {
    mean: FieldStack,
    var: f64,
    schedule: DiffusionSchedule,
    conditioning_channels: usize,
}

impl GaussianDenoiser {
    pub fn new(
        mean: FieldStack,
        var: f64,
        schedule: DiffusionSchedule,
        conditioning_channels: usize,
    ) -> Result<Self> {
        if var <= 0.0 {
            return Err(Error::InvalidParameter("variance must be positive".into()));
        }
        Ok(Self {
            mean,
            var,
            schedule,
            conditioning_channels,
        })
    }
}

impl Denoiser for GaussianDenoiser {
    fn parameterization(&self) -> Parameterization {
        Parameterization::Epsilon
    }

    fn signature(&self) -> ChannelSignature {
        ChannelSignature {
            latent: self.mean.channels(),
            conditioning: self.conditioning_channels,
        }
    }

    fn denoise(
        &self,
        noisy: &FieldStack,
        _conditioning: &FieldStack,
        t: usize,
    ) -> Result<FieldStack> {
        if !noisy.same_shape(&self.mean) {
            return Err(Error::DimensionMismatch(
                "gaussian oracle expects canvas-shaped inputs".into(),
            ));
        }
        let abar = self.schedule.alpha_cumprod(t);
        let sn = (1.0 - abar).sqrt();
        if sn == 0.0 {
            return Err(Error::InvalidParameter(
                "gaussian oracle undefined at a noiseless timestep".into(),
            ));
        }
        let sa = abar.sqrt();
        let var = self.var;
        noisy.zip_map(&self.mean, |x, m| {
            let x0 = gaussian_posterior_x0(x, m, var, abar);
            (x - sa * x0) / sn
        })
    }
}

/// Oracle refiner that declares the clean sample to be a slice of its
/// conditioning channels; position-independent, so it works on tiles.
pub struct PassthroughDenoiser {
    latent: usize,
    conditioning: usize,
    offset: usize,
}

impl PassthroughDenoiser {
    /// Copies `latent` channels starting at `offset` within the conditioning.
    pub fn new(latent: usize, conditioning: usize, offset: usize) -> Result<Self> {
        if offset + latent > conditioning {
            return Err(Error::SignatureMismatch(format!(
                "cannot copy channels {offset}..{} from {conditioning} conditioning channels",
                offset + latent
            )));
        }
        Ok(Self {
            latent,
            conditioning,
            offset,
        })
    }
}

impl Denoiser for PassthroughDenoiser {
    fn parameterization(&self) -> Parameterization {
        Parameterization::X0
    }

    fn signature(&self) -> ChannelSignature {
        ChannelSignature {
            latent: self.latent,
            conditioning: self.conditioning,
        }
    }

    fn denoise(
        &self,
        noisy: &FieldStack,
        conditioning: &FieldStack,
        _t: usize,
    ) -> Result<FieldStack> {
        if conditioning.height() != noisy.height() || conditioning.width() != noisy.width() {
            return Err(Error::DimensionMismatch(
                "conditioning does not match the noisy latent".into(),
            ));
        }
        conditioning.slice_channels(self.offset, self.offset + self.latent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Field2D;
    use crate::schedule::{make_schedule, make_spacing, BetaKind, SpacingMode};
    use crate::tiling::{sample_ddim, seeded_noise_stack};

    fn sd() -> DiffusionSchedule {
        make_schedule(1000, 0.00085, 0.012, BetaKind::ScaledLinear).unwrap()
    }

    fn target_stack() -> FieldStack {
        FieldStack::from_planes(vec![Field2D::from_fn(6, 7, |r, c| {
            ((r * 7 + c) as f64 * 0.17).sin()
        })])
        .unwrap()
    }

    #[test]
    fn one_trailing_step_recovers_the_point_mass() {
        let schedule = sd();
        let star = target_stack();
        let oracle = PointMassDenoiser::new(star.clone(), schedule.clone(), 1);
        let spacing = make_spacing(1000, 1, SpacingMode::Trailing).unwrap();
        let cond = FieldStack::constant(1, 6, 7, 0.0);
        for seed in [0u64, 9, 1234] {
            let out = sample_ddim(&cond, &oracle, &spacing, &schedule, seed).unwrap();
            for (a, b) in out.plane(0).values().iter().zip(star.plane(0).values()) {
                assert!((a - b).abs() <= 1e-9, "seed {seed}");
            }
        }
    }

    #[test]
    fn implied_clean_sample_is_independent_of_input() {
        let schedule = sd();
        let star = target_stack();
        let oracle = PointMassDenoiser::new(star.clone(), schedule.clone(), 1);
        let cond = FieldStack::constant(1, 6, 7, 0.0);
        let t = 450;
        let abar = schedule.alpha_cumprod(t);
        for seed in [3u64, 4] {
            let x_t = seeded_noise_stack(1, 6, 7, seed);
            let eps_hat = oracle.denoise(&x_t, &cond, t).unwrap();
            let x0 = x_t
                .zip_map(&eps_hat, |x, e| (x - (1.0 - abar).sqrt() * e) / abar.sqrt())
                .unwrap();
            for (a, b) in x0.plane(0).values().iter().zip(star.plane(0).values()) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn fifty_step_ddim_also_recovers_the_point_mass() {
        let schedule = sd();
        let star = target_stack();
        let oracle = PointMassDenoiser::new(star.clone(), schedule.clone(), 1);
        let spacing = make_spacing(1000, 50, SpacingMode::Trailing).unwrap();
        let cond = FieldStack::constant(1, 6, 7, 0.0);
        let out = sample_ddim(&cond, &oracle, &spacing, &schedule, 5).unwrap();
        let max_err = out
            .plane(0)
            .values()
            .iter()
            .zip(star.plane(0).values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-6, "max err {max_err}");
    }

    #[test]
    fn gaussian_posterior_limits() {
        // Full signal: the posterior mean is the sample itself.
        assert_eq!(gaussian_posterior_x0(0.7, -0.3, 0.5, 1.0), 0.7);
        // Pure noise: the posterior mean is the prior mean.
        assert_eq!(gaussian_posterior_x0(0.7, -0.3, 0.5, 0.0), -0.3);
    }

    #[test]
    fn vanishing_variance_approaches_the_point_mass_oracle() {
        let schedule = sd();
        let star = target_stack();
        let pm = PointMassDenoiser::new(star.clone(), schedule.clone(), 1);
        let tiny = GaussianDenoiser::new(star.clone(), 1e-12, schedule.clone(), 1).unwrap();
        let cond = FieldStack::constant(1, 6, 7, 0.0);
        let x_t = seeded_noise_stack(1, 6, 7, 8);
        for t in [100usize, 500, 999] {
            let a = pm.denoise(&x_t, &cond, t).unwrap();
            let b = tiny.denoise(&x_t, &cond, t).unwrap();
            for (x, y) in a.plane(0).values().iter().zip(b.plane(0).values()) {
                assert!((x - y).abs() <= 1e-6, "t = {t}");
            }
        }
    }

    #[test]
    fn passthrough_copies_the_requested_channels() {
        let oracle = PassthroughDenoiser::new(1, 3, 1).unwrap();
        let cond = FieldStack::from_planes(vec![
            Field2D::constant(2, 2, 1.0),
            Field2D::constant(2, 2, 2.0),
            Field2D::constant(2, 2, 3.0),
        ])
        .unwrap();
        let noisy = FieldStack::constant(1, 2, 2, 0.0);
        let out = oracle.denoise(&noisy, &cond, 10).unwrap();
        assert!(out.plane(0).values().iter().all(|v| *v == 2.0));
        assert!(PassthroughDenoiser::new(2, 2, 1).is_err());
    }
}
