//! Evaluation metrics: affine-invariant depth (AbsRel, delta1 with
//! least-squares alignment), angular normals errors, depth-boundary and edge
//! precision/recall metrics over distance transforms, and PSNR/SSIM for
//! image-valued predictions.

use crate::error::{Error, Result};
use crate::grid::{least_squares_affine, Field2D, FieldStack};

/// Named scalar metrics plus the configuration they were computed under.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    entries: Vec<(String, f64)>,
    config: Vec<(String, String)>,
    /// Number of pixels that entered the metrics.
    pub pixel_count: usize,
}

impl MetricsReport {
    /// Records a metric value; every reported value must be finite.
    pub fn insert(&mut self, key: &str, value: f64) {
        assert!(value.is_finite(), "metric {key} is not finite");
        self.entries.push((key.to_string(), value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
    }

    /// Metrics in insertion order.
    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn record_config(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn config(&self) -> &[(String, String)] {
        &self.config
    }
}

fn count_overlap(a: &Field2D, b: &Field2D) -> Result<usize> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(
            "metric operands differ in size".into(),
        ));
    }
    Ok((0..a.len())
        .filter(|&i| a.is_valid(i) && b.is_valid(i))
        .count())
}

/// Mean relative absolute error `|a - d| / d` over valid pixels, in percent.
/// Ground truth must be strictly positive wherever valid.
pub fn absrel(aligned: &Field2D, gt: &Field2D) -> Result<f64> {
    let n = count_overlap(aligned, gt)?;
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let mut sum = 0.0;
    for i in 0..gt.len() {
        if aligned.is_valid(i) && gt.is_valid(i) {
            let d = gt.values()[i];
            if d <= 0.0 {
                return Err(Error::NonPositiveDepth { value: d });
            }
            sum += (aligned.values()[i] - d).abs() / d;
        }
    }
    Ok(sum / n as f64 * 100.0)
}

/// Percentage of valid pixels with `max(a/d, d/a) < 1.25`. Both maps must be
/// strictly positive wherever valid.
pub fn delta1(aligned: &Field2D, gt: &Field2D) -> Result<f64> {
    let n = count_overlap(aligned, gt)?;
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let mut pass = 0usize;
    for i in 0..gt.len() {
        if aligned.is_valid(i) && gt.is_valid(i) {
            let (a, d) = (aligned.values()[i], gt.values()[i]);
            if a <= 0.0 {
                return Err(Error::NonPositiveDepth { value: a });
            }
            if d <= 0.0 {
                return Err(Error::NonPositiveDepth { value: d });
            }
            if (a / d).max(d / a) < 1.25 {
                pass += 1;
            }
        }
    }
    Ok(pass as f64 / n as f64 * 100.0)
}

/// Protocol evaluation of an affine-invariant depth prediction: least-squares
/// alignment to the ground truth, then AbsRel and delta1 on the aligned map.
/// The fitted scale and shift are recorded in the report config.
pub fn evaluate_depth(pred: &Field2D, gt: &Field2D) -> Result<MetricsReport> {
    let (s, t) = least_squares_affine(pred, gt)?;
    let aligned = pred.map(|v| s * v + t)?;
    let mut report = MetricsReport {
        pixel_count: count_overlap(pred, gt)?,
        ..Default::default()
    };
    report.insert("absrel", absrel(&aligned, gt)?);
    report.insert("delta1", delta1(&aligned, gt)?);
    report.record_config("align_scale", s);
    report.record_config("align_shift", t);
    Ok(report)
}

const UNIT_NORM_TOL: f64 = 1e-3;

fn check_unit(stack: &FieldStack) -> Result<()> {
    if stack.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            got: stack.channels(),
        });
    }
    let mut max_dev = 0.0f64;
    let p0 = stack.plane(0);
    for i in 0..p0.len() {
        if !p0.is_valid(i) {
            continue;
        }
        let norm = (0..3)
            .map(|c| stack.plane(c).values()[i])
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        max_dev = max_dev.max((norm - 1.0).abs());
    }
    if max_dev > UNIT_NORM_TOL {
        return Err(Error::NonUnitNormals { max_dev });
    }
    Ok(())
}

/// Mean angular error in degrees and the percentage of valid pixels below
/// 11.25 degrees. Both stacks must hold unit vectors (within 1e-3).
pub fn angular_metrics(pred: &FieldStack, gt: &FieldStack) -> Result<(f64, f64)> {
    check_unit(pred)?;
    check_unit(gt)?;
    if !pred.same_shape(gt) {
        return Err(Error::DimensionMismatch(
            "normal stacks differ in size".into(),
        ));
    }
    let p0 = pred.plane(0);
    let g0 = gt.plane(0);
    let mut n = 0usize;
    let mut sum_deg = 0.0;
    let mut below = 0usize;
    for i in 0..p0.len() {
        if !(p0.is_valid(i) && g0.is_valid(i)) {
            continue;
        }
        let dot: f64 = (0..3)
            .map(|c| pred.plane(c).values()[i] * gt.plane(c).values()[i])
            .sum();
        let angle = dot.clamp(-1.0, 1.0).acos().to_degrees();
        sum_deg += angle;
        if angle < 11.25 {
            below += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok((sum_deg / n as f64, below as f64 / n as f64 * 100.0))
}

/// Which depth map an edge map was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeSource {
    Pred,
    Gt,
}

/// Binary edge mask with the threshold it was extracted at.
#[derive(Debug, Clone)]
pub struct EdgeMap {
    edges: Vec<bool>,
    height: usize,
    width: usize,
    pub threshold: f64,
    pub source: EdgeSource,
}

impl EdgeMap {
    /// Wraps an explicit binary mask (used by tests and synthetic fixtures).
    pub fn from_bools(
        height: usize,
        width: usize,
        edges: Vec<bool>,
        threshold: f64,
        source: EdgeSource,
    ) -> Result<Self> {
        if edges.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "edge mask length {} does not match {height}x{width}",
                edges.len()
            )));
        }
        Ok(Self {
            edges,
            height,
            width,
            threshold,
            source,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_edge(&self, index: usize) -> bool {
        self.edges[index]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|b| **b).count()
    }

    /// The mask as a 0/1 field.
    pub fn as_field(&self) -> Field2D {
        Field2D::new(
            self.height,
            self.width,
            self.edges
                .iter()
                .map(|b| if *b { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("binary values")
    }

    fn same_shape(&self, other: &EdgeMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Sobel gradient magnitude of a field with replicated borders. The kernels
/// are the raw [-1 0 1; -2 0 2; -1 0 1] pair without normalization.
fn sobel_magnitude(d: &Field2D) -> Vec<f64> {
    let (h, w) = (d.height(), d.width());
    let at = |r: isize, c: isize| -> f64 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        d.values()[r * w + c]
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = -at(r - 1, c - 1) + at(r - 1, c + 1) - 2.0 * at(r, c - 1)
                + 2.0 * at(r, c + 1)
                - at(r + 1, c - 1)
                + at(r + 1, c + 1);
            let gy = -at(r - 1, c - 1) - 2.0 * at(r - 1, c) - at(r - 1, c + 1)
                + at(r + 1, c - 1)
                + 2.0 * at(r + 1, c)
                + at(r + 1, c + 1);
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Marks pixels whose Sobel gradient magnitude of the min-max-normalized
/// depth exceeds `threshold`. A constant map yields no edges.
pub fn extract_depth_edges(d: &Field2D, threshold: f64, source: EdgeSource) -> Result<EdgeMap> {
    let (lo, hi) = d.min_max()?;
    let normalized = if hi > lo {
        d.map(|v| (v - lo) / (hi - lo))?
    } else {
        Field2D::constant(d.height(), d.width(), 0.0)
    };
    let magnitude = sobel_magnitude(&normalized);
    Ok(EdgeMap {
        edges: magnitude.iter().map(|m| *m > threshold).collect(),
        height: d.height(),
        width: d.width(),
        threshold,
        source,
    })
}

const DT_INF: f64 = 1e20;

/// One-dimensional squared-distance transform by lower parabola envelopes.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -DT_INF;
    z[1] = DT_INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = DT_INF;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Exact Euclidean distance to the nearest marked pixel; unmarked-everywhere
/// inputs yield `DT_INF.sqrt()`-scale values which callers truncate.
fn euclidean_distance_transform(marked: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = marked.iter().map(|m| if *m { 0.0 } else { DT_INF }).collect();
    // Columns, then rows.
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = grid[r * w + c];
        }
        edt_1d(&col_in, &mut col_out);
        for r in 0..h {
            grid[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0f64; w];
    for r in 0..h {
        edt_1d(&grid[r * w..(r + 1) * w].to_vec(), &mut row_out);
        grid[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    grid.iter().map(|d| d.sqrt()).collect()
}

/// Exact chessboard (Chebyshev) distance to the nearest marked pixel via a
/// two-pass 8-neighborhood chamfer sweep.
fn chebyshev_distance_transform(marked: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut d: Vec<f64> = marked.iter().map(|m| if *m { 0.0 } else { DT_INF }).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut best = d[i];
            if r > 0 {
                best = best.min(d[(r - 1) * w + c] + 1.0);
                if c > 0 {
                    best = best.min(d[(r - 1) * w + c - 1] + 1.0);
                }
                if c + 1 < w {
                    best = best.min(d[(r - 1) * w + c + 1] + 1.0);
                }
            }
            if c > 0 {
                best = best.min(d[r * w + c - 1] + 1.0);
            }
            d[i] = best;
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let i = r * w + c;
            let mut best = d[i];
            if r + 1 < h {
                best = best.min(d[(r + 1) * w + c] + 1.0);
                if c > 0 {
                    best = best.min(d[(r + 1) * w + c - 1] + 1.0);
                }
                if c + 1 < w {
                    best = best.min(d[(r + 1) * w + c + 1] + 1.0);
                }
            }
            if c + 1 < w {
                best = best.min(d[r * w + c + 1] + 1.0);
            }
            d[i] = best;
        }
    }
    d
}

/// Depth-boundary error: `acc` averages the truncated Euclidean distance from
/// predicted-edge pixels to the nearest ground-truth edge, `comp` the
/// symmetric quantity from ground-truth edges to predicted ones. An empty
/// edge set makes its component the worst-case `trunc_px`.
pub fn dbe(pred_edges: &EdgeMap, gt_edges: &EdgeMap, trunc_px: f64) -> Result<(f64, f64)> {
    if !pred_edges.same_shape(gt_edges) {
        return Err(Error::DimensionMismatch(
            "edge maps differ in size".into(),
        ));
    }
    if trunc_px <= 0.0 {
        return Err(Error::InvalidParameter("trunc_px must be positive".into()));
    }
    let (h, w) = (pred_edges.height, pred_edges.width);
    let directed = |from: &EdgeMap, to: &EdgeMap| -> f64 {
        if from.edge_count() == 0 {
            return trunc_px;
        }
        let dist = euclidean_distance_transform(&to.edges, h, w);
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..h * w {
            if from.edges[i] {
                sum += dist[i].min(trunc_px);
                n += 1;
            }
        }
        sum / n as f64
    };
    Ok((directed(pred_edges, gt_edges), directed(gt_edges, pred_edges)))
}

/// Edge precision and recall with a Chebyshev matching tolerance. Empty sets
/// follow the vacuous convention: both empty scores 1, one-sided empty
/// scores 0 for the side whose reference is missing.
pub fn edge_pr(pred_edges: &EdgeMap, gt_edges: &EdgeMap, match_px: usize) -> Result<(f64, f64)> {
    if !pred_edges.same_shape(gt_edges) {
        return Err(Error::DimensionMismatch(
            "edge maps differ in size".into(),
        ));
    }
    let (h, w) = (pred_edges.height, pred_edges.width);
    let matched_fraction = |from: &EdgeMap, to: &EdgeMap| -> f64 {
        if from.edge_count() == 0 {
            return if to.edge_count() == 0 { 1.0 } else { 0.0 };
        }
        let dist = chebyshev_distance_transform(&to.edges, h, w);
        let mut hit = 0usize;
        let mut n = 0usize;
        for i in 0..h * w {
            if from.edges[i] {
                n += 1;
                if dist[i] <= match_px as f64 {
                    hit += 1;
                }
            }
        }
        hit as f64 / n as f64
    };
    Ok((
        matched_fraction(pred_edges, gt_edges),
        matched_fraction(gt_edges, pred_edges),
    ))
}

/// Reports above this value (including exact-zero MSE) are capped, keeping
/// them finite and monotone.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio `10 log10(peak^2 / MSE)` over all channels and
/// valid pixels, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &FieldStack, gt: &FieldStack, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(Error::InvalidParameter("peak must be positive".into()));
    }
    if !pred.same_shape(gt) {
        return Err(Error::DimensionMismatch(
            "PSNR operands differ in shape".into(),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (pp, pg) in pred.planes().iter().zip(gt.planes()) {
        for i in 0..pp.len() {
            if pp.is_valid(i) && pg.is_valid(i) {
                let d = pp.values()[i] - pg.values()[i];
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean local SSIM over all fully-interior 11x11 Gaussian windows
/// (sigma 1.5, k1 = 0.01, k2 = 0.03, unit peak). Inputs are expected in
/// [0, 1]; images smaller than the window error.
pub fn ssim(pred: &Field2D, gt: &Field2D) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::DimensionMismatch(
            "SSIM operands differ in size".into(),
        ));
    }
    let (h, w) = (pred.height(), pred.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    // Separable normalized Gaussian weights.
    let half = (SSIM_WINDOW / 2) as isize;
    let mut kernel = [0.0f64; SSIM_WINDOW];
    let mut ksum = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let x = i as isize - half;
        *k = (-(x * x) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        ksum += *k;
    }
    for k in kernel.iter_mut() {
        *k /= ksum;
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    let mut windows = 0usize;
    for r0 in 0..=(h - SSIM_WINDOW) {
        for c0 in 0..=(w - SSIM_WINDOW) {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            for (dr, kr) in kernel.iter().enumerate() {
                for (dc, kc) in kernel.iter().enumerate() {
                    let wgt = kr * kc;
                    let i = (r0 + dr) * w + c0 + dc;
                    mu_x += wgt * pred.values()[i];
                    mu_y += wgt * gt.values()[i];
                }
            }
            let mut var_x = 0.0;
            let mut var_y = 0.0;
            let mut cov = 0.0;
            for (dr, kr) in kernel.iter().enumerate() {
                for (dc, kc) in kernel.iter().enumerate() {
                    let wgt = kr * kc;
                    let i = (r0 + dr) * w + c0 + dc;
                    let dx = pred.values()[i] - mu_x;
                    let dy = gt.values()[i] - mu_y;
                    var_x += wgt * dx * dx;
                    var_y += wgt * dy * dy;
                    cov += wgt * dx * dy;
                }
            }
            let num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
            let den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn field(values: &[f64]) -> Field2D {
        Field2D::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn absrel_hand_values() {
        let gt = field(&[1.0, 2.0, 4.0]);
        assert_eq!(absrel(&gt, &gt).unwrap(), 0.0);
        let a = field(&[1.0, 2.0, 3.0]);
        assert!((absrel(&a, &gt).unwrap() - 25.0 / 3.0).abs() < 1e-12);
        let scaled = gt.map(|v| 1.1 * v).unwrap();
        assert!((absrel(&scaled, &gt).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn absrel_rejects_nonpositive_gt() {
        let gt = field(&[1.0, 0.0]);
        let a = field(&[1.0, 1.0]);
        assert!(matches!(
            absrel(&a, &gt),
            Err(Error::NonPositiveDepth { .. })
        ));
    }

    #[test]
    fn delta1_hand_values() {
        let gt = field(&[1.0, 2.0, 4.0]);
        assert_eq!(delta1(&gt, &gt).unwrap(), 100.0);
        let a = field(&[1.0, 2.0, 3.0]);
        assert!((delta1(&a, &gt).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let off = gt.map(|v| 1.3 * v).unwrap();
        assert_eq!(delta1(&off, &gt).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_depth_removes_affine_transforms() {
        let gt = Field2D::from_fn(8, 8, |r, c| 1.0 + (r * 8 + c) as f64 * 0.1);
        let report = evaluate_depth(&gt, &gt).unwrap();
        assert_eq!(report.get("absrel").unwrap(), 0.0);
        assert_eq!(report.get("delta1").unwrap(), 100.0);
        let pred = gt.map(|v| 3.0 * v - 0.5).unwrap();
        let report = evaluate_depth(&pred, &gt).unwrap();
        assert!(report.get("absrel").unwrap().abs() < 1e-9);
        assert_eq!(report.get("delta1").unwrap(), 100.0);
    }

    #[test]
    fn evaluate_depth_matches_two_stage_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(60);
        let gt = Field2D::from_fn(8, 8, |_, _| 1.0 + rng.random::<f64>());
        let pred = gt
            .map(|v| 2.0 * v + 1.0 + 0.01 * rng.random::<f64>())
            .unwrap();
        let report = evaluate_depth(&pred, &gt).unwrap();
        // Oracle: run the two stages separately, expect identical arithmetic.
        let (s, t) = least_squares_affine(&pred, &gt).unwrap();
        let aligned = pred.map(|v| s * v + t).unwrap();
        assert_eq!(report.get("absrel").unwrap(), absrel(&aligned, &gt).unwrap());
        assert_eq!(report.get("delta1").unwrap(), delta1(&aligned, &gt).unwrap());
    }

    fn const_normals(h: usize, w: usize, v: [f64; 3]) -> FieldStack {
        FieldStack::from_planes(vec![
            Field2D::constant(h, w, v[0]),
            Field2D::constant(h, w, v[1]),
            Field2D::constant(h, w, v[2]),
        ])
        .unwrap()
    }

    #[test]
    fn angular_identity_and_orthogonal() {
        let up = const_normals(2, 2, [0.0, 0.0, 1.0]);
        let (mean, pct) = angular_metrics(&up, &up).unwrap();
        assert_eq!((mean, pct), (0.0, 100.0));

        let side = const_normals(2, 2, [1.0, 0.0, 0.0]);
        let (mean, pct) = angular_metrics(&side, &up).unwrap();
        assert!((mean - 90.0).abs() < 1e-12);
        assert_eq!(pct, 0.0);
    }

    #[test]
    fn angular_half_split_means_fifteen_degrees() {
        // Rotate about the x-axis by 10 degrees on the left half and 20 on
        // the right; gt is camera-facing.
        let h = 4;
        let w = 8;
        let rot = |deg: f64| {
            let r = deg.to_radians();
            [0.0, r.sin(), r.cos()]
        };
        let make_plane = |c: usize| {
            Field2D::from_fn(h, w, |_, col| {
                if col < w / 2 {
                    rot(10.0)[c]
                } else {
                    rot(20.0)[c]
                }
            })
        };
        let pred =
            FieldStack::from_planes(vec![make_plane(0), make_plane(1), make_plane(2)]).unwrap();
        let gt = const_normals(h, w, [0.0, 0.0, 1.0]);
        let (mean, pct) = angular_metrics(&pred, &gt).unwrap();
        assert!((mean - 15.0).abs() < 1e-9);
        assert!((pct - 50.0).abs() < 1e-12);
    }

    #[test]
    fn angular_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let raw = |rng: &mut ChaCha12Rng| {
            let stack = FieldStack::from_planes(
                (0..3)
                    .map(|_| Field2D::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5))
                    .collect(),
            )
            .unwrap();
            crate::normalize::normalize_normals(&stack).unwrap().0
        };
        let a = raw(&mut rng);
        let b = raw(&mut rng);
        let (m1, _) = angular_metrics(&a, &b).unwrap();
        let (m2, _) = angular_metrics(&b, &a).unwrap();
        assert!((m1 - m2).abs() < 1e-12);
    }

    #[test]
    fn angular_rejects_non_unit_inputs() {
        let bad = const_normals(2, 2, [0.0, 0.0, 1.01]);
        let up = const_normals(2, 2, [0.0, 0.0, 1.0]);
        assert!(matches!(
            angular_metrics(&bad, &up),
            Err(Error::NonUnitNormals { .. })
        ));
    }

    #[test]
    fn edges_constant_field_is_empty() {
        let d = Field2D::constant(8, 8, 3.0);
        let e = extract_depth_edges(&d, 0.1, EdgeSource::Gt).unwrap();
        assert_eq!(e.edge_count(), 0);
    }

    #[test]
    fn edges_vertical_step_confined_to_adjacent_columns() {
        // Step 0 -> 1 at column 4: Sobel support marks columns 3 and 4 only.
        let d = Field2D::from_fn(6, 8, |_, c| if c >= 4 { 1.0 } else { 0.0 });
        let e = extract_depth_edges(&d, 0.1, EdgeSource::Gt).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                let expected = c == 3 || c == 4;
                assert_eq!(e.is_edge(r * 8 + c), expected, "({r}, {c})");
            }
        }
    }

    #[test]
    fn edges_zero_threshold_marks_any_gradient() {
        let d = Field2D::from_fn(4, 4, |r, c| (r + c) as f64);
        let e = extract_depth_edges(&d, 0.0, EdgeSource::Pred).unwrap();
        assert_eq!(e.edge_count(), 16);
    }

    fn line_map(h: usize, w: usize, row: usize) -> EdgeMap {
        let mut edges = vec![false; h * w];
        for c in 0..w {
            edges[row * w + c] = true;
        }
        EdgeMap::from_bools(h, w, edges, 0.1, EdgeSource::Gt).unwrap()
    }

    #[test]
    fn dbe_identical_maps_are_zero() {
        let e = line_map(8, 8, 3);
        assert_eq!(dbe(&e, &e, 10.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn dbe_two_pixel_shift_is_exactly_two() {
        let pred = line_map(16, 16, 5);
        let gt = line_map(16, 16, 7);
        let (acc, comp) = dbe(&pred, &gt, 10.0).unwrap();
        assert_eq!(acc, 2.0);
        assert_eq!(comp, 2.0);
    }

    #[test]
    fn dbe_empty_set_conventions() {
        let empty = EdgeMap::from_bools(8, 8, vec![false; 64], 0.1, EdgeSource::Pred).unwrap();
        let gt = line_map(8, 8, 2);
        let (acc, comp) = dbe(&empty, &gt, 10.0).unwrap();
        assert_eq!((acc, comp), (10.0, 10.0));
    }

    #[test]
    fn dbe_matches_brute_force_distances() {
        let mut rng = ChaCha12Rng::seed_from_u64(62);
        let random_edges = |rng: &mut ChaCha12Rng| {
            let edges: Vec<bool> = (0..64).map(|_| rng.random::<f64>() < 0.2).collect();
            EdgeMap::from_bools(8, 8, edges, 0.1, EdgeSource::Pred).unwrap()
        };
        let pred = random_edges(&mut rng);
        let gt = random_edges(&mut rng);
        if pred.edge_count() == 0 || gt.edge_count() == 0 {
            return;
        }
        let brute = |from: &EdgeMap, to: &EdgeMap| -> f64 {
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..64 {
                if !from.is_edge(i) {
                    continue;
                }
                let (r, c) = (i / 8, i % 8);
                let mut best = f64::INFINITY;
                for j in 0..64 {
                    if to.is_edge(j) {
                        let (rr, cc) = (j / 8, j % 8);
                        let dist = (((r as f64 - rr as f64).powi(2)
                            + (c as f64 - cc as f64).powi(2)) as f64)
                            .sqrt();
                        best = best.min(dist);
                    }
                }
                sum += best.min(10.0);
                n += 1;
            }
            sum / n as f64
        };
        let (acc, comp) = dbe(&pred, &gt, 10.0).unwrap();
        assert!((acc - brute(&pred, &gt)).abs() < 1e-9);
        assert!((comp - brute(&gt, &pred)).abs() < 1e-9);
    }

    #[test]
    fn edge_pr_identical_and_disjoint() {
        let e = line_map(8, 8, 3);
        assert_eq!(edge_pr(&e, &e, 1).unwrap(), (1.0, 1.0));
        let far = line_map(8, 8, 7);
        assert_eq!(edge_pr(&line_map(8, 8, 0), &far, 1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn edge_pr_dilated_prediction_within_tolerance() {
        // pred = gt dilated by 1 px vertically; match_px = 1 keeps both
        // precision and recall at 1.
        let gt = line_map(8, 8, 3);
        let mut edges = vec![false; 64];
        for row in 2..=4 {
            for c in 0..8 {
                edges[row * 8 + c] = true;
            }
        }
        let pred = EdgeMap::from_bools(8, 8, edges, 0.1, EdgeSource::Pred).unwrap();
        let (precision, recall) = edge_pr(&pred, &gt, 1).unwrap();
        assert_eq!((precision, recall), (1.0, 1.0));
        // With zero tolerance precision drops: only 1 of 3 rows overlaps.
        let (precision, recall) = edge_pr(&pred, &gt, 0).unwrap();
        assert!((precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall, 1.0);
    }

    #[test]
    fn edge_pr_empty_conventions_and_swap() {
        let empty = EdgeMap::from_bools(4, 4, vec![false; 16], 0.1, EdgeSource::Pred).unwrap();
        let some = line_map(4, 4, 1);
        assert_eq!(edge_pr(&empty, &empty, 1).unwrap(), (1.0, 1.0));
        assert_eq!(edge_pr(&empty, &some, 1).unwrap(), (0.0, 0.0));
        // Precision and recall swap when the maps swap.
        let other = line_map(4, 4, 2);
        let (p1, r1) = edge_pr(&some, &other, 0).unwrap();
        let (p2, r2) = edge_pr(&other, &some, 0).unwrap();
        assert_eq!((p1, r1), (r2, p2));
    }

    fn stack_of(f: Field2D) -> FieldStack {
        FieldStack::from_planes(vec![f]).unwrap()
    }

    #[test]
    fn psnr_values() {
        // MSE 0.01 with unit peak: 20 dB.
        let a = stack_of(Field2D::constant(2, 2, 0.0));
        let b = stack_of(Field2D::constant(2, 2, 0.1));
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        // Random pair against the direct formula.
        let mut rng = ChaCha12Rng::seed_from_u64(63);
        let x = Field2D::from_fn(4, 4, |_, _| rng.random::<f64>());
        let y = Field2D::from_fn(4, 4, |_, _| rng.random::<f64>());
        let mse = x
            .values()
            .iter()
            .zip(y.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 16.0;
        let want = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&stack_of(x), &stack_of(y), 1.0).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_images_score_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(64);
        let img = Field2D::from_fn(16, 16, |_, _| rng.random::<f64>());
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_negated_checkerboard_is_negative() {
        let img = Field2D::from_fn(32, 32, |r, c| if (r + c) % 2 == 0 { 0.0 } else { 1.0 });
        let neg = img.map(|v| 1.0 - v).unwrap();
        let score = ssim(&img, &neg).unwrap();
        assert!(score < 0.0, "got {score}");
    }

    #[test]
    fn ssim_constant_offset_matches_closed_form() {
        // All windows identical: sigma terms vanish, leaving
        // (2 mu1 mu2 + C1) / (mu1^2 + mu2^2 + C1).
        let a = Field2D::constant(12, 12, 0.3);
        let b = Field2D::constant(12, 12, 0.4);
        let c1 = 0.01f64.powi(2);
        let want = (2.0 * 0.3 * 0.4 + c1) / (0.3f64.powi(2) + 0.4f64.powi(2) + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let small = Field2D::constant(8, 8, 0.5);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_never_exceeds_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(65);
        for _ in 0..5 {
            let a = Field2D::from_fn(14, 14, |_, _| rng.random::<f64>());
            let b = Field2D::from_fn(14, 14, |_, _| rng.random::<f64>());
            assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
        }
    }
}
