//! Consistency distillation of a trained denoiser into a one-step student.
//!
//! Per iteration: diffuse a scene latent to a random `t >= k`, let the frozen
//! teacher take one DDIM solver step of size `k`, apply the consistency
//! function to the student output at `t` and the EMA-target output at
//! `t - k`, and descend the Pseudo-Huber distance between the two. The target
//! network trails the student by an exponential moving average.

use crate::error::{Error, Result};
use crate::grid::FieldStack;
use crate::schedule::{
    consistency_apply, ddim_step, ema_update, forward_diffuse, lcm_boundary_coeffs, to_x0_eps,
    DiffusionSchedule, LcmConfig, Parameterization,
};
use crate::tiling::{noise_stack, seeded_noise_stack, Denoiser};
use crate::toy::net::ToyDenoiser;
use crate::toy::scene::ToyScene;
use crate::toy::train::{prepare_scenes, Adam};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Distillation hyperparameters; the consistency constants live in
/// [`LcmConfig`] (skip 200, Pseudo-Huber c 0.001, EMA decay 0.95).
#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub lcm: LcmConfig,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lcm: LcmConfig::default(),
            iterations: 1200,
            batch: 2,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Distilled student plus the per-iteration loss trace.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: ToyDenoiser,
    pub loss_trace: Vec<f64>,
}

/// Derivative of the implied clean sample with respect to the raw model
/// output under a parameterization (the conversion is affine in the output).
fn x0_output_coefficient(param: Parameterization, abar: f64) -> f64 {
    let sa = abar.sqrt();
    let sn = (1.0 - abar).sqrt();
    match param {
        Parameterization::Epsilon => -sn / sa,
        Parameterization::V => -sn,
        Parameterization::X0 => 1.0,
    }
}

fn flatten(stack: &FieldStack) -> Vec<f64> {
    let mut out = Vec::with_capacity(stack.channels() * stack.height() * stack.width());
    for p in stack.planes() {
        out.extend_from_slice(p.values());
    }
    out
}

/// Runs consistency distillation. Student and target start as copies of the
/// teacher; the teacher stays frozen. Draws with `t < k` are resampled. RNG
/// streams split from the seed: stream 2 drives the distillation draws
/// (streams 0/1 belong to initialization and training).
pub fn distill_lcm(
    teacher: &ToyDenoiser,
    cfg: &DistillConfig,
    scenes: &[ToyScene],
    schedule: &DiffusionSchedule,
) -> Result<DistillOutcome> {
    cfg.lcm.validate(schedule)?;
    if cfg.batch == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    let samples = prepare_scenes(scenes)?;
    let mut student = teacher.clone();
    let mut target_net = teacher.clone();
    let param = teacher.parameterization();

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let t_steps = schedule.train_steps();
    let k = cfg.lcm.skip_k;

    let mut adam = Adam::new(student.param_count(), cfg.lr);
    let mut grads = vec![0.0f64; student.param_count()];
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        // Linear decay to 10% of the base rate settles the late iterations.
        adam.set_lr(cfg.lr * (1.0 - 0.9 * iter as f64 / cfg.iterations as f64));
        grads.fill(0.0);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let sample = &samples[rng.random_range(0..samples.len())];
            // Resample draws that would step below the schedule start.
            let t = loop {
                let t = rng.random_range(0..t_steps);
                if t >= k {
                    break t;
                }
            };
            let t_prev = t - k;
            let (h, w) = (sample.x0.height(), sample.x0.width());
            let eps = noise_stack(&mut rng, 3, h, w);
            let x_t = forward_diffuse(&sample.x0, &eps, t, schedule)?;

            // Frozen teacher: one DDIM solver step of size k.
            let teacher_out = teacher.denoise(&x_t, &sample.conditioning, t)?;
            let z_prev = ddim_step(&x_t, &teacher_out, param, t, Some(t_prev), schedule)?;

            // Student consistency output at t.
            let abar_t = schedule.alpha_cumprod(t);
            let input = student.concat_input(&x_t, &sample.conditioning)?;
            let cache = student.forward_cached(input, h, w, t);
            let raw = student.output_stack(&cache);
            let (x0_student, _) = to_x0_eps(&raw, &x_t, abar_t, param)?;
            let f_student = consistency_apply(&x_t, &x0_student, t, &cfg.lcm, schedule)?;

            // Target consistency output at t - k; no gradient flows here.
            let target_out = target_net.denoise(&z_prev, &sample.conditioning, t_prev)?;
            let (x0_target, _) =
                to_x0_eps(&target_out, &z_prev, schedule.alpha_cumprod(t_prev), param)?;
            let f_target = consistency_apply(&z_prev, &x0_target, t_prev, &cfg.lcm, schedule)?;

            // Pseudo-Huber loss and its gradient through the student path.
            let fs = flatten(&f_student);
            let ft = flatten(&f_target);
            let sq: f64 = fs.iter().zip(&ft).map(|(a, b)| (a - b) * (a - b)).sum();
            let c = cfg.lcm.huber_c;
            let loss = (sq + c * c).sqrt() - c;
            batch_loss += loss;

            let (_, c_out) = lcm_boundary_coeffs(t, &cfg.lcm, schedule);
            let chain = c_out * x0_output_coefficient(param, abar_t) / (sq + c * c).sqrt()
                / cfg.batch as f64;
            let dout: Vec<f64> = fs.iter().zip(&ft).map(|(a, b)| chain * (a - b)).collect();
            student.backward(&cache, &dout, &mut grads);
        }
        trace.push(batch_loss / cfg.batch as f64);

        let mut params = student.params().to_vec();
        adam.update(&mut params, &grads);
        student.set_params(params)?;
        let new_target = ema_update(target_net.params(), student.params(), cfg.lcm.ema_mu)?;
        target_net.set_params(new_target)?;
    }
    Ok(DistillOutcome {
        student,
        loss_trace: trace,
    })
}

/// One-step consistency inference: apply the consistency function to pure
/// noise at the terminal timestep.
pub fn consistency_one_step(
    student: &ToyDenoiser,
    conditioning: &FieldStack,
    lcm: &LcmConfig,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<FieldStack> {
    let t = schedule.train_steps() - 1;
    let sig = student.signature();
    let z = seeded_noise_stack(sig.latent, conditioning.height(), conditioning.width(), seed);
    let raw = student.denoise(&z, conditioning, t)?;
    let (x0, _) = to_x0_eps(&raw, &z, schedule.alpha_cumprod(t), student.parameterization())?;
    consistency_apply(&z, &x0, t, lcm, schedule)
}
