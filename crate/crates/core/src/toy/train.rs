//! Denoiser training: minibatch Monte-Carlo minimization of the noise
//! objective `E ||target - net(x_t, cond, t)||^2` with the target expressed
//! in the declared parameterization.

use crate::error::{Error, Result};
use crate::grid::FieldStack;
use crate::normalize::{normalize_depth, replicate_channels};
use crate::schedule::{forward_diffuse, DiffusionSchedule, Parameterization};
use crate::tiling::noise_stack;
use crate::toy::net::{ToyArch, ToyDenoiser};
use crate::toy::scene::ToyScene;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Training hyperparameters. Optimization uses Adam with the standard
/// moment decays.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch: 2,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Trained network plus the per-iteration loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub denoiser: ToyDenoiser,
    pub loss_trace: Vec<f64>,
}

/// Minimal Adam state shared by training and distillation.
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
        }
    }

    pub(crate) fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub(crate) fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// A scene prepared for the denoising objective: image conditioning plus the
/// normalized, channel-replicated target latent.
pub(crate) struct TrainingSample {
    pub(crate) conditioning: FieldStack,
    pub(crate) x0: FieldStack,
}

pub(crate) fn prepare_scenes(scenes: &[ToyScene]) -> Result<Vec<TrainingSample>> {
    if scenes.is_empty() {
        return Err(Error::InvalidParameter(
            "training needs at least one scene".into(),
        ));
    }
    scenes
        .iter()
        .map(|s| {
            let (normalized, _) = normalize_depth(&s.depth)?;
            Ok(TrainingSample {
                conditioning: s.rgb.clone(),
                x0: replicate_channels(&normalized),
            })
        })
        .collect()
}

/// The regression target for one diffusion draw under a parameterization.
pub(crate) fn training_target(
    param: Parameterization,
    x0: &FieldStack,
    eps: &FieldStack,
    abar: f64,
) -> Result<FieldStack> {
    match param {
        Parameterization::Epsilon => Ok(eps.clone()),
        Parameterization::X0 => Ok(x0.clone()),
        Parameterization::V => {
            let sa = abar.sqrt();
            let sn = (1.0 - abar).sqrt();
            eps.zip_map(x0, |e, x| sa * e - sn * x)
        }
    }
}

fn flatten(stack: &FieldStack) -> Vec<f64> {
    let mut out = Vec::with_capacity(stack.channels() * stack.height() * stack.width());
    for p in stack.planes() {
        out.extend_from_slice(p.values());
    }
    out
}

/// How many consecutive iterations may exceed 10x the initial loss before
/// training aborts.
const DIVERGENCE_PATIENCE: usize = 100;

/// Trains a fresh denoiser on the scenes by stochastic gradient descent
/// (Adam) over the Monte-Carlo noise objective. RNG streams are split from
/// the seed: stream 0 initializes the parameters (inside `ToyDenoiser::new`),
/// stream 1 drives scene/timestep/noise draws.
pub fn train_denoiser(
    scenes: &[ToyScene],
    param: Parameterization,
    cfg: &TrainConfig,
    schedule: &DiffusionSchedule,
) -> Result<TrainOutcome> {
    let samples = prepare_scenes(scenes)?;
    if cfg.batch == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    let mut net = ToyDenoiser::new(ToyArch::standard(3, 3), param, cfg.seed);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let t_steps = schedule.train_steps();
    let mut adam = Adam::new(net.param_count(), cfg.lr);
    let mut grads = vec![0.0f64; net.param_count()];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut over_initial = 0usize;

    for _ in 0..cfg.iterations {
        grads.fill(0.0);
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let sample = &samples[rng.random_range(0..samples.len())];
            let t = rng.random_range(0..t_steps);
            let (h, w) = (sample.x0.height(), sample.x0.width());
            let eps = noise_stack(&mut rng, 3, h, w);
            let x_t = forward_diffuse(&sample.x0, &eps, t, schedule)?;
            let target = training_target(param, &sample.x0, &eps, schedule.alpha_cumprod(t))?;
            let target_flat = flatten(&target);
            let input = net.concat_input(&x_t, &sample.conditioning)?;
            let cache = net.forward_cached(input, h, w, t);
            let numel = target_flat.len() as f64;
            let mut loss = 0.0;
            let dout: Vec<f64> = cache
                .output
                .iter()
                .zip(&target_flat)
                .map(|(o, t)| {
                    let d = o - t;
                    loss += d * d;
                    2.0 * d / (numel * cfg.batch as f64)
                })
                .collect();
            batch_loss += loss / numel;
            net.backward(&cache, &dout, &mut grads);
        }
        batch_loss /= cfg.batch as f64;
        trace.push(batch_loss);

        if batch_loss > 10.0 * trace[0] {
            over_initial += 1;
            if over_initial >= DIVERGENCE_PATIENCE {
                return Err(Error::TrainingDiverged { trace });
            }
        } else {
            over_initial = 0;
        }

        let mut params = net.params().to_vec();
        adam.update(&mut params, &grads);
        net.set_params(params)?;
    }
    Ok(TrainOutcome {
        denoiser: net,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, BetaKind};
    use crate::toy::scene::gen_scene;

    fn sd() -> DiffusionSchedule {
        make_schedule(1000, 0.00085, 0.012, BetaKind::ScaledLinear).unwrap()
    }

    #[test]
    fn zero_iterations_leave_parameters_untouched() {
        let scenes = [gen_scene(1, 16, 16).unwrap()];
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let out = train_denoiser(&scenes, Parameterization::Epsilon, &cfg, &sd()).unwrap();
        let fresh = ToyDenoiser::new(ToyArch::standard(3, 3), Parameterization::Epsilon, cfg.seed);
        assert_eq!(out.denoiser.params(), fresh.params());
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let scenes = [gen_scene(2, 16, 16).unwrap()];
        let cfg = TrainConfig {
            iterations: 5,
            batch: 1,
            lr: 1e-3,
            seed: 3,
        };
        let a = train_denoiser(&scenes, Parameterization::Epsilon, &cfg, &sd()).unwrap();
        let b = train_denoiser(&scenes, Parameterization::Epsilon, &cfg, &sd()).unwrap();
        assert_eq!(a.denoiser.params(), b.denoiser.params());
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn short_run_reduces_the_loss() {
        let scenes = [gen_scene(3, 16, 16).unwrap()];
        let cfg = TrainConfig {
            iterations: 120,
            batch: 2,
            lr: 3e-3,
            seed: 0,
        };
        let out = train_denoiser(&scenes, Parameterization::Epsilon, &cfg, &sd()).unwrap();
        let head: f64 = out.loss_trace[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = out.loss_trace[out.loss_trace.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < 0.7 * head,
            "loss did not drop: head {head}, tail {tail}"
        );
    }
}
