use densediff_core::grid::FieldStack;
use densediff_core::normalize::{normalize_depth, replicate_channels};
use densediff_core::schedule::{make_schedule, make_spacing, BetaKind, Parameterization, SpacingMode};
use densediff_core::tiling::sample_ddim;
use densediff_core::toy::{
    consistency_one_step, distill_lcm, gen_scene, train_denoiser, DistillConfig, TrainConfig,
};
use std::time::Instant;

fn mse(a: &FieldStack, b: &FieldStack) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pa, pb) in a.planes().iter().zip(b.planes()) {
        for (x, y) in pa.values().iter().zip(pb.values()) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    sum / n as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(24);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let param = match args.get(3).map(|s| s.as_str()).unwrap_or("eps") {
        "v" => Parameterization::V,
        "x0" => Parameterization::X0,
        _ => Parameterization::Epsilon,
    };
    let distill_iters: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1000);

    let schedule = make_schedule(1000, 0.00085, 0.012, BetaKind::ScaledLinear).unwrap();
    let scene = gen_scene(42, size, size).unwrap();
    let scenes = [scene.clone()];

    let t0 = Instant::now();
    let cfg = TrainConfig {
        iterations: iters,
        batch: 2,
        lr: 3e-3,
        seed: 0,
    };
    let out = train_denoiser(&scenes, param, &cfg, &schedule).unwrap();
    let train_time = t0.elapsed();
    let head: f64 = out.loss_trace[..20.min(out.loss_trace.len())].iter().sum::<f64>()
        / 20.0f64.min(out.loss_trace.len() as f64);
    let initial = out.loss_trace[0];
    let tail_start = out.loss_trace.len().saturating_sub(50);
    let tail: f64 =
        out.loss_trace[tail_start..].iter().sum::<f64>() / (out.loss_trace.len() - tail_start) as f64;
    println!(
        "train[{size}x{size}, {iters} it, {param:?}]: {:.1}s initial={initial:.4} head20={head:.4} tail50={tail:.4} ratio={:.4}",
        train_time.as_secs_f64(),
        tail / initial
    );
    // Where does it cross 10%?
    let mut crossed = None;
    let window = 25usize;
    for i in window..out.loss_trace.len() {
        let avg: f64 = out.loss_trace[i - window..i].iter().sum::<f64>() / window as f64;
        if avg < 0.1 * initial {
            crossed = Some(i);
            break;
        }
    }
    println!("  10% crossing (25-it avg): {crossed:?}");

    // Teacher reconstruction quality: 50-step DDIM.
    let (norm_depth, _) = normalize_depth(&scene.depth).unwrap();
    let x0_true = replicate_channels(&norm_depth);
    let spacing50 = make_spacing(1000, 50, SpacingMode::Trailing).unwrap();
    let mut teacher_mse = 0.0;
    for seed in 0..5u64 {
        let rec = sample_ddim(&scene.rgb, &out.denoiser, &spacing50, &schedule, 100 + seed).unwrap();
        teacher_mse += mse(&rec, &x0_true);
    }
    teacher_mse /= 5.0;
    println!("  teacher 50-step DDIM MSE (5 seeds): {teacher_mse:.6}");

    // Distillation.
    let t1 = Instant::now();
    let dlr: f64 = std::env::args().nth(5).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let dbatch: usize = std::env::args().nth(6).map(|s| s.parse().unwrap()).unwrap_or(2);
    let dcfg = DistillConfig {
        iterations: distill_iters,
        batch: dbatch,
        lr: dlr,
        seed: 0,
        ..Default::default()
    };
    let dout = distill_lcm(&out.denoiser, &dcfg, &scenes, &schedule).unwrap();
    let distill_time = t1.elapsed();
    let mut student_mse = 0.0;
    for seed in 0..5u64 {
        let one =
            consistency_one_step(&dout.student, &scene.rgb, &dcfg.lcm, &schedule, 100 + seed)
                .unwrap();
        student_mse += mse(&one, &x0_true);
    }
    student_mse /= 5.0;
    println!(
        "distill[{distill_iters} it]: {:.1}s student 1-step MSE: {student_mse:.6} ratio vs teacher: {:.3}",
        distill_time.as_secs_f64(),
        student_mse / teacher_mse
    );
    let smooth = |tr: &[f64], w: usize| -> Vec<f64> {
        (w..=tr.len())
            .map(|i| tr[i - w..i].iter().sum::<f64>() / w as f64)
            .collect()
    };
    let sm = smooth(&dout.loss_trace, 100.min(dout.loss_trace.len()));
    if sm.len() >= 2 {
        println!(
            "  distill loss smoothed: first={:.5} last={:.5} max_increase={:.6}",
            sm[0],
            sm[sm.len() - 1],
            sm.windows(2).map(|w| w[1] - w[0]).fold(f64::MIN, f64::max)
        );
    }
}
