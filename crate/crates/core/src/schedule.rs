//! Diffusion schedules and sampler/distillation math: the forward process,
//! parameterization conversions, deterministic DDIM stepping with leading or
//! trailing timestep spacing, zero-terminal-SNR rescaling, consistency-model
//! boundary coefficients, the Pseudo-Huber loss, and EMA updates.
//!
//! A schedule stores the variance sequence `beta_t` and the cumulative
//! products `abar_t = prod_s (1 - beta_s)` that weight signal against noise:
//! `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`.

use crate::error::{Error, Result};
use crate::grid::FieldStack;

/// Beta interpolation used when constructing a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaKind {
    /// Linear interpolation from `beta_start` to `beta_end`.
    Linear,
    /// Linear interpolation in sqrt space, then squared.
    ScaledLinear,
}

/// How a model head is to be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// Predicts the added noise.
    Epsilon,
    /// Predicts `v = sqrt(abar) eps - sqrt(1 - abar) x0`.
    V,
    /// Predicts the clean sample directly.
    X0,
}

/// Training-time noise schedule.
///
/// `alphas_cumprod` is strictly decreasing; every entry lies in `[0, 1)`.
/// After [`rescale_zero_snr`] the terminal entry is exactly zero (and the
/// terminal beta is exactly one).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl DiffusionSchedule {
    /// Number of training steps T.
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// `abar_t`; panics if `t >= T`.
    pub fn alpha_cumprod(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.train_steps() {
            return Err(Error::InvalidParameter(format!(
                "timestep {t} out of range for {} training steps",
                self.train_steps()
            )));
        }
        Ok(())
    }
}

/// Builds a schedule with `t_steps` betas interpolated over
/// `[beta_start, beta_end]`.
pub fn make_schedule(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: BetaKind,
) -> Result<DiffusionSchedule> {
    if t_steps == 0 {
        return Err(Error::InvalidParameter("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if t_steps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (t_steps - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..t_steps)
        .map(|i| match kind {
            BetaKind::Linear => lerp(beta_start, beta_end, i),
            BetaKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
        })
        .collect();
    let mut alphas_cumprod = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for beta in &betas {
        acc *= 1.0 - beta;
        alphas_cumprod.push(acc);
    }
    Ok(DiffusionSchedule {
        betas,
        alphas_cumprod,
    })
}

/// Rescales `sqrt(abar)` affinely so the first entry is unchanged and the
/// terminal entry becomes exactly zero, then recomputes betas consistently
/// (the terminal beta becomes exactly one). Idempotent: a schedule whose
/// terminal SNR is already zero is returned as-is.
pub fn rescale_zero_snr(schedule: &DiffusionSchedule) -> Result<DiffusionSchedule> {
    let t_steps = schedule.train_steps();
    let abar = schedule.alphas_cumprod();
    if abar[t_steps - 1] == 0.0 {
        return Ok(schedule.clone());
    }
    if t_steps == 1 {
        return Err(Error::InvalidParameter(
            "cannot zero the terminal SNR of a single-step schedule".into(),
        ));
    }
    let s0 = abar[0].sqrt();
    let s_last = abar[t_steps - 1].sqrt();
    let span = s0 - s_last;
    if span <= 0.0 {
        return Err(Error::InvalidParameter(
            "schedule is not strictly decreasing".into(),
        ));
    }
    let mut rescaled = Vec::with_capacity(t_steps);
    for (i, a) in abar.iter().enumerate() {
        if i == 0 {
            // The affine map fixes the anchor analytically; copy to keep the
            // first entry bit-identical.
            rescaled.push(abar[0]);
        } else if i == t_steps - 1 {
            rescaled.push(0.0);
        } else {
            let s = (a.sqrt() - s_last) / span * s0;
            rescaled.push(s * s);
        }
    }
    let mut betas = Vec::with_capacity(t_steps);
    betas.push(1.0 - rescaled[0]);
    for i in 1..t_steps {
        betas.push(1.0 - rescaled[i] / rescaled[i - 1]);
    }
    Ok(DiffusionSchedule {
        betas,
        alphas_cumprod: rescaled,
    })
}

/// Mixes signal and noise with an explicit coefficient; the schedule-indexed
/// entry point is [`forward_diffuse`].
pub fn forward_diffuse_with(
    x0: &FieldStack,
    eps: &FieldStack,
    alpha_cumprod: f64,
) -> Result<FieldStack> {
    let sa = alpha_cumprod.sqrt();
    let sn = (1.0 - alpha_cumprod).sqrt();
    x0.zip_map(eps, |x, e| sa * x + sn * e)
}

/// Forward diffusion `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(
    x0: &FieldStack,
    eps: &FieldStack,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<FieldStack> {
    schedule.check_t(t)?;
    forward_diffuse_with(x0, eps, schedule.alpha_cumprod(t))
}

/// The clean-sample and noise estimates implied by a model output under a
/// given parameterization at noise level `abar`.
///
/// Epsilon outputs cannot recover `x0` at `abar = 0` (a zero-SNR terminal
/// step) and X0 outputs cannot recover the noise at `abar = 1`; both cases
/// error rather than dividing by zero.
pub(crate) fn to_x0_eps(
    model_out: &FieldStack,
    x_t: &FieldStack,
    abar: f64,
    from: Parameterization,
) -> Result<(FieldStack, FieldStack)> {
    let sa = abar.sqrt();
    let sn = (1.0 - abar).sqrt();
    match from {
        Parameterization::Epsilon => {
            if sa == 0.0 {
                return Err(Error::InvalidParameter(
                    "epsilon output cannot recover x0 at a zero-SNR timestep".into(),
                ));
            }
            let x0 = x_t.zip_map(model_out, |x, e| (x - sn * e) / sa)?;
            Ok((x0, model_out.clone()))
        }
        Parameterization::X0 => {
            if sn == 0.0 {
                return Err(Error::InvalidParameter(
                    "x0 output cannot recover the noise at a noiseless timestep".into(),
                ));
            }
            let eps = x_t.zip_map(model_out, |x, x0| (x - sa * x0) / sn)?;
            Ok((model_out.clone(), eps))
        }
        Parameterization::V => {
            let x0 = x_t.zip_map(model_out, |x, v| sa * x - sn * v)?;
            let eps = x_t.zip_map(model_out, |x, v| sn * x + sa * v)?;
            Ok((x0, eps))
        }
    }
}

fn from_x0_eps(
    x0: &FieldStack,
    eps: &FieldStack,
    abar: f64,
    to: Parameterization,
) -> Result<FieldStack> {
    let sa = abar.sqrt();
    let sn = (1.0 - abar).sqrt();
    match to {
        Parameterization::Epsilon => Ok(eps.clone()),
        Parameterization::X0 => Ok(x0.clone()),
        Parameterization::V => eps.zip_map(x0, |e, x| sa * e - sn * x),
    }
}

/// Converts a model output between parameterizations at timestep `t`.
/// Round trips are identities up to rounding.
pub fn convert_parameterization(
    model_out: &FieldStack,
    x_t: &FieldStack,
    t: usize,
    schedule: &DiffusionSchedule,
    from: Parameterization,
    to: Parameterization,
) -> Result<FieldStack> {
    if from == to {
        return Err(Error::InvalidParameter(
            "parameterization conversion requires distinct kinds".into(),
        ));
    }
    schedule.check_t(t)?;
    let abar = schedule.alpha_cumprod(t);
    let (x0, eps) = to_x0_eps(model_out, x_t, abar, from)?;
    from_x0_eps(&x0, &eps, abar, to)
}

/// Where inference timesteps are placed within the training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpacingMode {
    /// Anchored at t = 0; with one step the sampler degenerates to t = 0.
    Leading,
    /// Anchored at t = T-1; enables one-step inference from pure noise.
    Trailing,
}

/// Strictly decreasing inference timesteps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepSpacing {
    mode: SpacingMode,
    steps: Vec<usize>,
}

impl TimestepSpacing {
    pub fn mode(&self) -> SpacingMode {
        self.mode
    }

    /// Timesteps in descending order.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// The timestep after `steps()[i]`, or `None` at the final step.
    pub fn next_step(&self, i: usize) -> Option<usize> {
        self.steps.get(i + 1).copied()
    }
}

/// Places `n_steps` inference timesteps within a `t_steps` training schedule.
///
/// Trailing: `round(T - 1 - i*T/n)`, clamped and deduplicated, so the first
/// step is always `T - 1`. Leading: `(n - 1 - i) * floor(T/n)`, so the last
/// step is always 0.
pub fn make_spacing(t_steps: usize, n_steps: usize, mode: SpacingMode) -> Result<TimestepSpacing> {
    if n_steps == 0 || n_steps > t_steps {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= n_steps <= T, got n_steps = {n_steps}, T = {t_steps}"
        )));
    }
    let steps = match mode {
        SpacingMode::Trailing => {
            let mut steps: Vec<usize> = Vec::with_capacity(n_steps);
            for i in 0..n_steps {
                let raw = (t_steps as f64 - 1.0 - i as f64 * t_steps as f64 / n_steps as f64)
                    .round()
                    .max(0.0) as usize;
                let clamped = raw.min(t_steps - 1);
                if steps.last().map_or(true, |last| clamped < *last) {
                    steps.push(clamped);
                }
            }
            steps
        }
        SpacingMode::Leading => {
            let stride = t_steps / n_steps;
            (0..n_steps).map(|i| (n_steps - 1 - i) * stride).collect()
        }
    };
    Ok(TimestepSpacing { mode, steps })
}

/// One deterministic DDIM step from `t` down to `t_prev` (`None` denotes the
/// final step, where `abar` is taken as 1 and the output is the clean
/// estimate itself).
pub fn ddim_step(
    x_t: &FieldStack,
    model_out: &FieldStack,
    param: Parameterization,
    t: usize,
    t_prev: Option<usize>,
    schedule: &DiffusionSchedule,
) -> Result<FieldStack> {
    schedule.check_t(t)?;
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::InvalidParameter(format!(
                "DDIM step requires t_prev < t, got {tp} >= {t}"
            )));
        }
    }
    let (x0, eps) = to_x0_eps(model_out, x_t, schedule.alpha_cumprod(t), param)?;
    match t_prev {
        None => Ok(x0),
        Some(tp) => {
            let abar_prev = schedule.alpha_cumprod(tp);
            let sa = abar_prev.sqrt();
            let sn = (1.0 - abar_prev).sqrt();
            x0.zip_map(&eps, |x, e| sa * x + sn * e)
        }
    }
}

/// Consistency-distillation knobs. `skip_k`, `huber_c`, and `ema_mu` default
/// to 200, 0.001, and 0.95.
#[derive(Debug, Clone, PartialEq)]
pub struct LcmConfig {
    pub sigma_data: f64,
    pub epsilon_boundary: f64,
    pub skip_k: usize,
    pub huber_c: f64,
    pub ema_mu: f64,
}

impl Default for LcmConfig {
    fn default() -> Self {
        Self {
            sigma_data: 0.5,
            epsilon_boundary: 0.0,
            skip_k: 200,
            huber_c: 0.001,
            ema_mu: 0.95,
        }
    }
}

impl LcmConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.sigma_data <= 0.0 {
            return Err(Error::InvalidParameter(
                "sigma_data must be positive".into(),
            ));
        }
        if self.huber_c <= 0.0 {
            return Err(Error::InvalidParameter("huber_c must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_mu) {
            return Err(Error::InvalidParameter("ema_mu must lie in [0, 1)".into()));
        }
        if self.skip_k == 0 || self.skip_k >= schedule.train_steps() {
            return Err(Error::InvalidParameter(format!(
                "skip_k must satisfy 0 < k < T, got {}",
                self.skip_k
            )));
        }
        Ok(())
    }
}

/// Boundary coefficients of the consistency function at timestep `t`.
///
/// Timesteps are first rescaled to the unit range, then
/// `c_skip = sigma_d^2 / (d^2 + sigma_d^2)` and
/// `c_out = d / sqrt(d^2 + sigma_d^2)` with `d = t' - epsilon_boundary`, so
/// `(c_skip, c_out) = (1, 0)` holds at the boundary.
pub fn lcm_boundary_coeffs(t: usize, cfg: &LcmConfig, schedule: &DiffusionSchedule) -> (f64, f64) {
    let t_steps = schedule.train_steps();
    let unit_t = if t_steps > 1 {
        t as f64 / (t_steps - 1) as f64
    } else {
        0.0
    };
    let d = unit_t - cfg.epsilon_boundary;
    let s2 = cfg.sigma_data * cfg.sigma_data;
    let c_skip = s2 / (d * d + s2);
    let c_out = d / (d * d + s2).sqrt();
    (c_skip, c_out)
}

/// Consistency function `f = c_skip(t) x_t + c_out(t) x0_pred`.
pub fn consistency_apply(
    x_t: &FieldStack,
    x0_pred: &FieldStack,
    t: usize,
    cfg: &LcmConfig,
    schedule: &DiffusionSchedule,
) -> Result<FieldStack> {
    schedule.check_t(t)?;
    let (c_skip, c_out) = lcm_boundary_coeffs(t, cfg, schedule);
    x_t.zip_map(x0_pred, |x, p| c_skip * x + c_out * p)
}

/// Pseudo-Huber distance `sqrt(||x - y||^2 + c^2) - c` with a single global
/// Euclidean norm over all channels and pixels.
pub fn pseudo_huber(x: &FieldStack, y: &FieldStack, c: f64) -> Result<f64> {
    if c <= 0.0 {
        return Err(Error::InvalidParameter(
            "pseudo-Huber constant must be positive".into(),
        ));
    }
    if !x.same_shape(y) {
        return Err(Error::DimensionMismatch(
            "pseudo-Huber operands differ in shape".into(),
        ));
    }
    let mut sq = 0.0;
    for (px, py) in x.planes().iter().zip(y.planes()) {
        for (a, b) in px.values().iter().zip(py.values()) {
            let d = a - b;
            sq += d * d;
        }
    }
    Ok((sq + c * c).sqrt() - c)
}

/// EMA update `mu * target + (1 - mu) * student`, elementwise over parameter
/// vectors. A pure value computation; nothing propagates back to the inputs.
pub fn ema_update(target: &[f64], student: &[f64], mu: f64) -> Result<Vec<f64>> {
    if target.len() != student.len() {
        return Err(Error::DimensionMismatch(format!(
            "parameter vectors differ in length: {} vs {}",
            target.len(),
            student.len()
        )));
    }
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::InvalidParameter("mu must lie in [0, 1)".into()));
    }
    Ok(target
        .iter()
        .zip(student)
        .map(|(t, s)| mu * t + (1.0 - mu) * s)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Field2D;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn sd() -> DiffusionSchedule {
        make_schedule(1000, 0.00085, 0.012, BetaKind::ScaledLinear).unwrap()
    }

    fn stack1(values: &[f64]) -> FieldStack {
        FieldStack::from_planes(vec![Field2D::new(1, values.len(), values.to_vec()).unwrap()])
            .unwrap()
    }

    fn random_stack(rng: &mut ChaCha12Rng, h: usize, w: usize) -> FieldStack {
        FieldStack::from_planes(vec![Field2D::from_fn(h, w, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        })])
        .unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5, BetaKind::Linear).unwrap();
        assert_eq!(s.alphas_cumprod(), &[0.5]);
    }

    #[test]
    fn two_step_linear_schedule() {
        let s = make_schedule(2, 0.1, 0.2, BetaKind::Linear).unwrap();
        assert!((s.alphas_cumprod()[0] - 0.9).abs() < 1e-15);
        assert!((s.alphas_cumprod()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn scaled_linear_matches_cumprod_oracle() {
        let s = sd();
        // Recompute the product from the linspace definition independently.
        let mut acc = 1.0;
        let (b0, b1) = (0.00085f64.sqrt(), 0.012f64.sqrt());
        for (t, abar) in s.alphas_cumprod().iter().enumerate() {
            let beta = (b0 + (b1 - b0) * t as f64 / 999.0).powi(2);
            acc *= 1.0 - beta;
            assert!((abar - acc).abs() < 1e-12, "t = {t}");
        }
        // Strictly decreasing.
        for t in 1..1000 {
            assert!(s.alphas_cumprod()[t] < s.alphas_cumprod()[t - 1]);
        }
    }

    #[test]
    fn invalid_beta_ranges_rejected() {
        assert!(make_schedule(10, 0.0, 0.1, BetaKind::Linear).is_err());
        assert!(make_schedule(10, 0.2, 0.1, BetaKind::Linear).is_err());
        assert!(make_schedule(10, 0.2, 1.0, BetaKind::Linear).is_err());
        assert!(make_schedule(0, 0.1, 0.2, BetaKind::Linear).is_err());
    }

    #[test]
    fn zero_snr_anchors_and_terminal() {
        let s = sd();
        let r = rescale_zero_snr(&s).unwrap();
        assert_eq!(r.alphas_cumprod()[999], 0.0);
        assert_eq!(r.alphas_cumprod()[0], s.alphas_cumprod()[0]);
        for t in 1..1000 {
            assert!(
                r.alphas_cumprod()[t] < r.alphas_cumprod()[t - 1],
                "monotonicity broken at t = {t}"
            );
        }
        // Betas stay consistent with the rescaled cumulative products.
        let mut acc = 1.0;
        for t in 0..1000 {
            acc *= 1.0 - r.betas()[t];
            assert!((acc - r.alphas_cumprod()[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_snr_is_idempotent() {
        let r = rescale_zero_snr(&sd()).unwrap();
        let rr = rescale_zero_snr(&r).unwrap();
        assert_eq!(r, rr);
    }

    #[test]
    fn zero_snr_single_step_errors() {
        let s = make_schedule(1, 0.5, 0.5, BetaKind::Linear).unwrap();
        assert!(rescale_zero_snr(&s).is_err());
    }

    #[test]
    fn forward_diffuse_endpoints() {
        let x0 = stack1(&[1.0, -2.0]);
        let eps = stack1(&[3.0, 4.0]);
        // Hypothetical noiseless limit.
        let out = forward_diffuse_with(&x0, &eps, 1.0).unwrap();
        assert_eq!(out.plane(0).values(), x0.plane(0).values());
        // abar = 0.25, x0 = 1, eps = 0.
        let out = forward_diffuse_with(&stack1(&[1.0]), &stack1(&[0.0]), 0.25).unwrap();
        assert!((out.plane(0).values()[0] - 0.5).abs() < 1e-15);
        // abar = 0.25, x0 = 0, eps = 2 -> sqrt(0.75) * 2.
        let out = forward_diffuse_with(&stack1(&[0.0]), &stack1(&[2.0]), 0.25).unwrap();
        assert!((out.plane(0).values()[0] - 0.75f64.sqrt() * 2.0).abs() < 1e-12);
    }

    #[test]
    fn forward_diffuse_shape_mismatch_errors() {
        let a = stack1(&[0.0, 1.0]);
        let b = stack1(&[0.0]);
        assert!(forward_diffuse(&a, &b, 10, &sd()).is_err());
    }

    #[test]
    fn forward_diffuse_sample_variance() {
        // Sample variance approaches (1 - abar) + abar * var(x0) over 1e5
        // samples; checked at 5%.
        let s = sd();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 100_000usize;
        let var_x0 = 0.49;
        let x0 = FieldStack::from_planes(vec![Field2D::from_fn(100, 1000, |_, _| {
            0.7 * rng.sample::<f64, _>(StandardNormal)
        })])
        .unwrap();
        let eps = FieldStack::from_planes(vec![Field2D::from_fn(100, 1000, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        })])
        .unwrap();
        for t in [100, 500, 999] {
            let xt = forward_diffuse(&x0, &eps, t, &s).unwrap();
            let vals = xt.plane(0).values();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let abar = s.alpha_cumprod(t);
            let expected = (1.0 - abar) + abar * var_x0;
            assert!(
                (var - expected).abs() / expected < 0.05,
                "t = {t}: {var} vs {expected}"
            );
        }
    }

    #[test]
    fn conversion_rejects_same_kind() {
        let x = stack1(&[1.0]);
        assert!(convert_parameterization(
            &x,
            &x,
            10,
            &sd(),
            Parameterization::Epsilon,
            Parameterization::Epsilon
        )
        .is_err());
    }

    #[test]
    fn conversion_eps_to_x0_at_full_signal() {
        // At abar = 1 the sample is the clean input.
        let x_t = stack1(&[0.3, -0.7]);
        let eps = stack1(&[0.9, 0.1]);
        let (x0, _) = to_x0_eps(&eps, &x_t, 1.0, Parameterization::Epsilon).unwrap();
        assert_eq!(x0.plane(0).values(), x_t.plane(0).values());
    }

    #[test]
    fn conversion_v_to_eps_matches_linear_solve() {
        // Solve { x_t = sa*x0 + sn*eps ; v = sa*eps - sn*x0 } for eps by
        // Cramer's rule and compare against the closed form.
        let s = sd();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for &t in &[5usize, 250, 999] {
            let x_t = random_stack(&mut rng, 4, 4);
            let v = random_stack(&mut rng, 4, 4);
            let eps = convert_parameterization(
                &v,
                &x_t,
                t,
                &s,
                Parameterization::V,
                Parameterization::Epsilon,
            )
            .unwrap();
            let abar = s.alpha_cumprod(t);
            let (sa, sn) = (abar.sqrt(), (1.0 - abar).sqrt());
            for i in 0..16 {
                let xt = x_t.plane(0).values()[i];
                let vv = v.plane(0).values()[i];
                // det of [[sa, sn], [-sn, sa]] = sa^2 + sn^2 = 1.
                let eps_solved = (sa * vv + sn * xt) / (sa * sa + sn * sn);
                assert!((eps.plane(0).values()[i] - eps_solved).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conversion_round_trips_are_identity() {
        let s = sd();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x_t = random_stack(&mut rng, 3, 5);
        let out = random_stack(&mut rng, 3, 5);
        use Parameterization::*;
        for (a, b) in [(Epsilon, X0), (Epsilon, V), (X0, V), (V, Epsilon)] {
            for &t in &[0usize, 123, 999] {
                let there = convert_parameterization(&out, &x_t, t, &s, a, b).unwrap();
                let back = convert_parameterization(&there, &x_t, t, &s, b, a).unwrap();
                for (got, want) in back.plane(0).values().iter().zip(out.plane(0).values()) {
                    assert!(
                        (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                        "{a:?}<->{b:?} at t = {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn spacing_examples() {
        let tr = make_spacing(1000, 1, SpacingMode::Trailing).unwrap();
        assert_eq!(tr.steps(), &[999]);
        let le = make_spacing(1000, 1, SpacingMode::Leading).unwrap();
        assert_eq!(le.steps(), &[0]);
        let tr4 = make_spacing(1000, 4, SpacingMode::Trailing).unwrap();
        assert_eq!(tr4.steps(), &[999, 749, 499, 249]);
        let le4 = make_spacing(1000, 4, SpacingMode::Leading).unwrap();
        assert_eq!(le4.steps(), &[750, 500, 250, 0]);
        assert!(make_spacing(10, 11, SpacingMode::Trailing).is_err());
        assert!(make_spacing(10, 0, SpacingMode::Trailing).is_err());
    }

    #[test]
    fn spacing_is_strictly_decreasing_without_duplicates() {
        for n in [1usize, 3, 7, 50, 999, 1000] {
            for mode in [SpacingMode::Trailing, SpacingMode::Leading] {
                let sp = make_spacing(1000, n, mode).unwrap();
                for w in sp.steps().windows(2) {
                    assert!(w[0] > w[1], "{mode:?} n = {n}");
                }
                if mode == SpacingMode::Trailing {
                    assert_eq!(sp.steps()[0], 999);
                }
            }
        }
    }

    #[test]
    fn ddim_final_step_returns_clean_estimate() {
        let s = sd();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x_t = random_stack(&mut rng, 2, 2);
        let x0 = random_stack(&mut rng, 2, 2);
        let out = ddim_step(&x_t, &x0, Parameterization::X0, 999, None, &s).unwrap();
        assert_eq!(out.plane(0).values(), x0.plane(0).values());
    }

    #[test]
    fn ddim_rejects_non_decreasing_steps() {
        let s = sd();
        let x = stack1(&[0.0]);
        assert!(ddim_step(&x, &x, Parameterization::X0, 10, Some(10), &s).is_err());
        assert!(ddim_step(&x, &x, Parameterization::X0, 10, Some(11), &s).is_err());
    }

    #[test]
    fn ddim_full_schedule_with_exact_noise_recovers_x0() {
        // Exact-noise oracle: feeding the true eps back at every step must
        // walk the forward trajectory backwards to x0.
        let s = sd();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let x0 = random_stack(&mut rng, 4, 4);
        let eps = random_stack(&mut rng, 4, 4);
        let spacing = make_spacing(1000, 1000, SpacingMode::Trailing).unwrap();
        let mut x = forward_diffuse(&x0, &eps, spacing.steps()[0], &s).unwrap();
        for (i, &t) in spacing.steps().iter().enumerate() {
            x = ddim_step(
                &x,
                &eps,
                Parameterization::Epsilon,
                t,
                spacing.next_step(i),
                &s,
            )
            .unwrap();
        }
        let max_err = x
            .plane(0)
            .values()
            .iter()
            .zip(x0.plane(0).values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-6, "max abs err {max_err}");
    }

    #[test]
    fn lcm_boundary_condition_and_monotonicity() {
        let s = sd();
        let cfg = LcmConfig::default();
        let (c_skip, c_out) = lcm_boundary_coeffs(0, &cfg, &s);
        assert_eq!((c_skip, c_out), (1.0, 0.0));
        let mut prev = lcm_boundary_coeffs(0, &cfg, &s);
        for t in 1..1000 {
            let cur = lcm_boundary_coeffs(t, &cfg, &s);
            assert!(cur.0 < prev.0, "c_skip not decreasing at {t}");
            assert!(cur.1 > prev.1, "c_out not increasing at {t}");
            prev = cur;
        }
    }

    #[test]
    fn lcm_coeffs_match_formula_at_random_timesteps() {
        let s = sd();
        let cfg = LcmConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..10 {
            let t = rng.random_range(0..1000usize);
            let (c_skip, c_out) = lcm_boundary_coeffs(t, &cfg, &s);
            let d = t as f64 / 999.0;
            let s2 = 0.25;
            assert!((c_skip - s2 / (d * d + s2)).abs() < 1e-15);
            assert!((c_out - d / (d * d + s2).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn consistency_apply_blends() {
        let s = sd();
        let cfg = LcmConfig::default();
        // At the boundary x_t passes through unchanged.
        let x_t = stack1(&[2.0, -1.0]);
        let pred = stack1(&[0.5, 0.5]);
        let out = consistency_apply(&x_t, &pred, 0, &cfg, &s).unwrap();
        assert_eq!(out.plane(0).values(), x_t.plane(0).values());
        // Random fields match the elementwise formula.
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let x_t = random_stack(&mut rng, 3, 3);
        let pred = random_stack(&mut rng, 3, 3);
        let t = 700;
        let out = consistency_apply(&x_t, &pred, t, &cfg, &s).unwrap();
        let (c_skip, c_out) = lcm_boundary_coeffs(t, &cfg, &s);
        for i in 0..9 {
            let want = c_skip * x_t.plane(0).values()[i] + c_out * pred.plane(0).values()[i];
            assert!((out.plane(0).values()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_huber_values() {
        let x = stack1(&[1.0, 2.0]);
        assert_eq!(pseudo_huber(&x, &x, 0.001).unwrap(), 0.0);
        // ||x - y|| = 1.
        let y = stack1(&[0.0, 2.0]);
        let got = pseudo_huber(&x, &y, 0.001).unwrap();
        assert!((got - ((1.0f64 + 1e-6).sqrt() - 0.001)).abs() < 1e-15);
        assert!((got - 0.9990005).abs() < 1e-7);
        // c -> 0 approaches the plain norm.
        assert!((pseudo_huber(&x, &y, 1e-12).unwrap() - 1.0).abs() < 1e-9);
        assert!(pseudo_huber(&x, &y, 0.0).is_err());
    }

    #[test]
    fn ema_update_examples() {
        let out = ema_update(&[0.0], &[1.0], 0.95).unwrap();
        assert!((out[0] - 0.05).abs() < 1e-15);
        assert_eq!(ema_update(&[0.7], &[1.0], 0.0).unwrap(), vec![1.0]);
        assert!(ema_update(&[0.0], &[1.0, 2.0], 0.5).is_err());
        assert!(ema_update(&[0.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let student = [1.0, -2.0];
        let initial = [5.0, 3.0];
        let mut target = initial.to_vec();
        let mu = 0.95f64;
        for n in 1..=200 {
            target = ema_update(&target, &student, mu).unwrap();
            let factor = mu.powi(n);
            for (i, t) in target.iter().enumerate() {
                let expected = student[i] + factor * (initial[i] - student[i]);
                assert!((t - expected).abs() < 1e-9, "n = {n}");
            }
        }
    }

    proptest! {
        #[test]
        fn forward_then_exact_step_recovers_x0(
            seed in 0u64..1000,
            t in 1usize..1000,
        ) {
            let s = sd();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let x0 = random_stack(&mut rng, 2, 3);
            let eps = random_stack(&mut rng, 2, 3);
            let x_t = forward_diffuse(&x0, &eps, t, &s).unwrap();
            let back = ddim_step(&x_t, &eps, Parameterization::Epsilon, t, None, &s).unwrap();
            for (a, b) in back.plane(0).values().iter().zip(x0.plane(0).values()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
