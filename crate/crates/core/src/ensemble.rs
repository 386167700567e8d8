//! Test-time ensembling of affine-invariant predictions.
//!
//! N stochastic predictions of the same scene differ by unknown per-member
//! scale and shift. The ensembler jointly estimates `(s_i, t_i)` by
//! minimizing the pairwise distances between the aligned members plus a
//! regularizer `R = |min m| + |1 - max m|` that pins the merged map `m`
//! (the pixel-wise median of the aligned members) to the unit range and rules
//! out the all-constant collapse. The objective is non-smooth because of the
//! median, so minimization uses derivative-free Nelder-Mead over the 2N
//! parameters.
//!
//! Normal maps ensemble differently: the per-pixel output is the member
//! vector closest in cosine to the unit-normalized mean map, so the result is
//! always one of the inputs, never a blend.

use crate::error::{Error, Result};
use crate::grid::{median_scratch, pixelwise_median, Field2D, FieldStack};
use crate::normalize::normalize_normals;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Result of [`optimize_ensemble`].
#[derive(Debug, Clone)]
pub struct EnsembleSolution {
    /// Per-member scale estimates.
    pub scales: Vec<f64>,
    /// Per-member shift estimates.
    pub shifts: Vec<f64>,
    /// Pixel-wise median of the aligned members at the optimum.
    pub merged: Field2D,
    /// Objective value at the optimum (0 for a single member).
    pub objective_value: f64,
    /// Optimizer iterations consumed.
    pub iterations_used: usize,
    /// Per-pixel median absolute deviation across aligned members;
    /// `None` for a single member.
    pub uncertainty: Option<Field2D>,
    /// Best objective value after each optimizer iteration; non-increasing.
    pub trace: Vec<f64>,
}

fn validate_members(members: &[Field2D]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidParameter("ensemble of zero members".into()))?;
    for m in &members[1..] {
        if !first.same_shape(m) {
            return Err(Error::DimensionMismatch(
                "ensemble members differ in size".into(),
            ));
        }
        if !first.same_mask(m) {
            return Err(Error::MaskMismatch(
                "ensemble members differ in mask".into(),
            ));
        }
    }
    Ok(())
}

/// Pairwise alignment objective:
/// `sqrt(sum_{i<j} ||d'_i - d'_j||^2 / binom(N, 2)) + lambda * R` with
/// `d'_i = s_i d_i + t_i` and `R = |min m| + |1 - max m|` over the pixel-wise
/// median `m`, all restricted to valid pixels.
pub fn ensemble_objective(
    members: &[Field2D],
    scales: &[f64],
    shifts: &[f64],
    lambda: f64,
) -> Result<f64> {
    validate_members(members)?;
    let n = members.len();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "the pairwise objective needs at least two members".into(),
        ));
    }
    if scales.len() != n || shifts.len() != n {
        return Err(Error::DimensionMismatch(
            "scale/shift vectors must match the member count".into(),
        ));
    }
    let mut params = Vec::with_capacity(2 * n);
    params.extend_from_slice(scales);
    params.extend_from_slice(shifts);
    Ok(objective_from_params(members, &params, lambda))
}

/// Shared objective kernel over the packed parameter vector
/// `[s_1..s_N, t_1..t_N]`. Uses the identity
/// `sum_{i<j} (v_i - v_j)^2 = N sum v^2 - (sum v)^2` per pixel.
fn objective_from_params(members: &[Field2D], params: &[f64], lambda: f64) -> f64 {
    let n = members.len();
    let (scales, shifts) = params.split_at(n);
    let first = &members[0];
    let pairs = (n * (n - 1) / 2) as f64;

    let mut pairwise = 0.0;
    let mut min_m = f64::INFINITY;
    let mut max_m = f64::NEG_INFINITY;
    let mut scratch = vec![0.0f64; n];
    for p in 0..first.len() {
        if !first.is_valid(p) {
            continue;
        }
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let v = scales[i] * members[i].values()[p] + shifts[i];
            scratch[i] = v;
            sum += v;
            sum_sq += v * v;
        }
        pairwise += n as f64 * sum_sq - sum * sum;
        let med = median_scratch(&mut scratch);
        min_m = min_m.min(med);
        max_m = max_m.max(med);
    }
    let regularizer = min_m.abs() + (1.0 - max_m).abs();
    (pairwise.max(0.0) / pairs).sqrt() + lambda * regularizer
}

/// Min-max initialization of one member: the scale/shift mapping its valid
/// range onto [0, 1].
fn min_max_init(member: &Field2D) -> Result<(f64, f64)> {
    let (lo, hi) = member.min_max()?;
    if hi <= lo {
        return Err(Error::DegenerateMember);
    }
    let s = 1.0 / (hi - lo);
    Ok((s, -lo * s))
}

fn aligned_members(members: &[Field2D], scales: &[f64], shifts: &[f64]) -> Vec<Field2D> {
    members
        .iter()
        .zip(scales.iter().zip(shifts))
        .map(|(m, (s, t))| m.map(|v| s * v + t).expect("affine map of finite field"))
        .collect()
}

/// Per-pixel median absolute deviation of the aligned members around the
/// merged map.
fn median_absolute_deviation(aligned: &[Field2D], merged: &Field2D) -> Field2D {
    let n = merged.len();
    let mut out = Vec::with_capacity(n);
    let mut scratch = vec![0.0f64; aligned.len()];
    for p in 0..n {
        if merged.is_valid(p) {
            for (k, a) in aligned.iter().enumerate() {
                scratch[k] = (a.values()[p] - merged.values()[p]).abs();
            }
            out.push(median_scratch(&mut scratch));
        } else {
            out.push(0.0);
        }
    }
    match merged.mask() {
        Some(m) => Field2D::with_mask(merged.height(), merged.width(), out, m.to_vec()),
        None => Field2D::new(merged.height(), merged.width(), out),
    }
    .expect("finite deviations")
}

/// Jointly aligns and merges ensemble members.
///
/// A single member is min-max rescaled to [0, 1]. With two or more members,
/// per-member min-max initialization seeds a Nelder-Mead run over the 2N
/// scale/shift parameters, which stops once an iteration improves the best
/// objective by less than `tol` or after `max_iters` iterations. The `seed`
/// perturbs only the initial simplex spread; results are deterministic given
/// `(inputs, seed)`.
pub fn optimize_ensemble(
    members: &[Field2D],
    lambda: f64,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<EnsembleSolution> {
    validate_members(members)?;
    let n = members.len();
    let mut init = Vec::with_capacity(2 * n);
    let mut shifts_init = Vec::with_capacity(n);
    for m in members {
        let (s, t) = min_max_init(m)?;
        init.push(s);
        shifts_init.push(t);
    }
    init.extend_from_slice(&shifts_init);

    if n == 1 {
        let merged = aligned_members(members, &init[..1], &init[1..]).remove(0);
        return Ok(EnsembleSolution {
            scales: vec![init[0]],
            shifts: vec![init[1]],
            merged,
            objective_value: 0.0,
            iterations_used: 0,
            uncertainty: None,
            trace: Vec::new(),
        });
    }

    let objective = |p: &[f64]| objective_from_params(members, p, lambda);
    let (params, objective_value, iterations_used, trace) =
        nelder_mead(&objective, &init, max_iters, tol, seed);

    let (scales, shifts) = params.split_at(n);
    let aligned = aligned_members(members, scales, shifts);
    let merged = pixelwise_median(&aligned)?;
    let uncertainty = median_absolute_deviation(&aligned, &merged);
    Ok(EnsembleSolution {
        scales: scales.to_vec(),
        shifts: shifts.to_vec(),
        merged,
        objective_value,
        iterations_used,
        uncertainty: Some(uncertainty),
        trace,
    })
}

/// Standard Nelder-Mead (reflection 1, expansion 2, contraction 0.5, shrink
/// 0.5). Returns the best vertex, its value, iterations used, and the
/// per-iteration best-value trace.
fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> (Vec<f64>, f64, usize, Vec<f64>) {
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;

    let dim = x0.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    for j in 0..dim {
        let mut v = x0.to_vec();
        let base = if v[j] != 0.0 { 0.05 * v[j].abs() } else { 2.5e-4 };
        // Seeded jitter of the simplex spread; keeps restarts distinct while
        // remaining reproducible.
        let h = base * (1.0 + 0.1 * (rng.random::<f64>() - 0.5));
        v[j] += h;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    let mut trace = Vec::new();
    let mut iterations = 0usize;
    let mut best_prev = values.iter().cloned().fold(f64::INFINITY, f64::min);

    for iter in 0..max_iters {
        iterations = iter + 1;
        // Order vertices by objective value.
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|a, b| values[*a].partial_cmp(&values[*b]).expect("finite objective"));
        let best = order[0];
        let second_worst = order[dim - 1];
        let worst = order[dim];

        let mut centroid = vec![0.0; dim];
        for &idx in &order[..dim] {
            for (c, x) in centroid.iter_mut().zip(&simplex[idx]) {
                *c += x;
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let lerp = |a: &[f64], b: &[f64], w: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
        };
        // reflected = centroid + ALPHA * (centroid - worst)
        let reflected = lerp(&centroid, &simplex[worst], -ALPHA);
        let f_reflected = f(&reflected);

        if f_reflected < values[best] {
            let expanded = lerp(&centroid, &reflected, GAMMA);
            let f_expanded = f(&expanded);
            if f_expanded < f_reflected {
                simplex[worst] = expanded;
                values[worst] = f_expanded;
            } else {
                simplex[worst] = reflected;
                values[worst] = f_reflected;
            }
        } else if f_reflected < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = f_reflected;
        } else {
            let contracted = if f_reflected < values[worst] {
                lerp(&centroid, &reflected, RHO)
            } else {
                lerp(&centroid, &simplex[worst], RHO)
            };
            let f_contracted = f(&contracted);
            if f_contracted < values[worst].min(f_reflected) {
                simplex[worst] = contracted;
                values[worst] = f_contracted;
            } else {
                // Shrink every vertex toward the best.
                let anchor = simplex[best].clone();
                for idx in 0..=dim {
                    if idx == best {
                        continue;
                    }
                    simplex[idx] = lerp(&anchor, &simplex[idx], SIGMA);
                    values[idx] = f(&simplex[idx]);
                }
            }
        }

        let best_now = values.iter().cloned().fold(f64::INFINITY, f64::min);
        trace.push(best_now);
        if best_prev - best_now < tol {
            break;
        }
        best_prev = best_now;
    }

    let best_idx = (0..values.len())
        .min_by(|a, b| values[*a].partial_cmp(&values[*b]).expect("finite"))
        .expect("non-empty simplex");
    (
        simplex[best_idx].clone(),
        values[best_idx],
        iterations,
        trace,
    )
}

/// Per-pixel nearest-to-mean selection for unit normal maps: the mean map is
/// unit-normalized, then each output pixel takes the member vector with the
/// largest dot product against it. Ties go to the lowest member index.
pub fn ensemble_normals(members: &[FieldStack]) -> Result<FieldStack> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidParameter("ensemble of zero members".into()))?;
    for m in members {
        if m.channels() != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                got: m.channels(),
            });
        }
        if !first.same_shape(m) {
            return Err(Error::DimensionMismatch(
                "normal maps differ in size".into(),
            ));
        }
        if !first.plane(0).same_mask(m.plane(0)) {
            return Err(Error::MaskMismatch("normal maps differ in mask".into()));
        }
    }
    if members.len() == 1 {
        return Ok(first.clone());
    }

    let len = first.plane(0).len();
    let inv_n = 1.0 / members.len() as f64;
    let mut mean_planes = vec![vec![0.0f64; len]; 3];
    for m in members {
        for c in 0..3 {
            for (acc, v) in mean_planes[c].iter_mut().zip(m.plane(c).values()) {
                *acc += v * inv_n;
            }
        }
    }
    let ref_plane = first.plane(0);
    let mask = ref_plane.mask().map(<[bool]>::to_vec);
    let build = |values: Vec<f64>| match &mask {
        Some(m) => Field2D::with_mask(ref_plane.height(), ref_plane.width(), values, m.clone()),
        None => Field2D::new(ref_plane.height(), ref_plane.width(), values),
    };
    let mean_stack = FieldStack::from_planes(
        mean_planes
            .into_iter()
            .map(&build)
            .collect::<Result<Vec<_>>>()?,
    )?;
    let (mean_unit, _) = normalize_normals(&mean_stack)?;

    let mut out = vec![vec![0.0f64; len]; 3];
    for p in 0..len {
        if !ref_plane.is_valid(p) {
            for (c, plane) in out.iter_mut().enumerate() {
                plane[p] = first.plane(c).values()[p];
            }
            continue;
        }
        let mx = mean_unit.plane(0).values()[p];
        let my = mean_unit.plane(1).values()[p];
        let mz = mean_unit.plane(2).values()[p];
        let mut best = 0usize;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, m) in members.iter().enumerate() {
            let dot = m.plane(0).values()[p] * mx
                + m.plane(1).values()[p] * my
                + m.plane(2).values()[p] * mz;
            if dot > best_dot {
                best_dot = dot;
                best = i;
            }
        }
        for (c, plane) in out.iter_mut().enumerate() {
            plane[p] = members[best].plane(c).values()[p];
        }
    }
    FieldStack::from_planes(out.into_iter().map(&build).collect::<Result<Vec<_>>>()?)
}
