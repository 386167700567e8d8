//! Dense 2D scalar and per-pixel vector fields with validity masks, plus the
//! order statistics, resampling, and least-squares fits used everywhere else.
//!
//! A [`Field2D`] stores one scalar per pixel in row-major order together with
//! an optional validity mask; a [`FieldStack`] is an ordered list of planes of
//! identical geometry (RGB images, normal maps, latent codes). All functions
//! here are pure and safe to call concurrently.

use crate::error::{Error, Result};

/// Dense scalar field with an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl Field2D {
    /// Builds an unmasked field. Every value must be finite.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::build(height, width, values, None)
    }

    /// Builds a masked field. Values at masked-out positions may be anything;
    /// values at valid positions must be finite.
    pub fn with_mask(
        height: usize,
        width: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        Self::build(height, width, values, Some(mask))
    }

    fn build(
        height: usize,
        width: usize,
        values: Vec<f64>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "field dimensions must be positive, got {height}x{width}"
            )));
        }
        let n = height * width;
        if values.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "expected {n} values for {height}x{width}, got {}",
                values.len()
            )));
        }
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(Error::MaskMismatch(format!(
                    "mask length {} does not match {n} pixels",
                    m.len()
                )));
            }
        }
        for i in 0..n {
            let valid = mask.as_ref().map_or(true, |m| m[i]);
            if valid && !values[i].is_finite() {
                return Err(Error::NonFinite { index: i });
            }
        }
        Ok(Self {
            height,
            width,
            values,
            mask,
        })
    }

    /// Constant unmasked field.
    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("finite constant")
    }

    /// Builds an unmasked field from a per-pixel function of (row, col).
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values).expect("finite generator")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // height*width >= 1 by construction
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    /// Value at (row, col); panics on out-of-range indices.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.height && col < self.width);
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, index: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[index])
    }

    pub fn same_shape(&self, other: &Field2D) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn same_mask(&self, other: &Field2D) -> bool {
        self.mask == other.mask
    }

    /// Iterator over values at valid positions.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_valid(*i))
            .map(|(_, v)| *v)
    }

    pub fn valid_count(&self) -> usize {
        match &self.mask {
            None => self.values.len(),
            Some(m) => m.iter().filter(|b| **b).count(),
        }
    }

    /// Elementwise map; the mask is carried over unchanged. Masked-out
    /// positions are mapped too but never validated.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Field2D> {
        let values = self.values.iter().map(|v| f(*v)).collect();
        Self::build(self.height, self.width, values, self.mask.clone())
    }

    /// Elementwise combination of two fields of identical shape and mask.
    pub fn zip_map(&self, other: &Field2D, f: impl Fn(f64, f64) -> f64) -> Result<Field2D> {
        if !self.same_shape(other) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        if !self.same_mask(other) {
            return Err(Error::MaskMismatch("fields carry different masks".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Self::build(self.height, self.width, values, self.mask.clone())
    }

    /// Minimum and maximum over valid pixels.
    pub fn min_max(&self) -> Result<(f64, f64)> {
        let mut it = self.valid_values();
        let first = it.next().ok_or(Error::NoValidPixels)?;
        let mut lo = first;
        let mut hi = first;
        for v in it {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        Ok((lo, hi))
    }

    /// Mean over valid pixels.
    pub fn mean(&self) -> Result<f64> {
        let n = self.valid_count();
        if n == 0 {
            return Err(Error::NoValidPixels);
        }
        Ok(self.valid_values().sum::<f64>() / n as f64)
    }
}

/// Ordered list of [`Field2D`] planes of identical geometry and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack {
    planes: Vec<Field2D>,
}

impl FieldStack {
    pub fn from_planes(planes: Vec<Field2D>) -> Result<Self> {
        let first = planes.first().ok_or_else(|| {
            Error::InvalidParameter("a stack needs at least one plane".into())
        })?;
        for p in &planes[1..] {
            if !first.same_shape(p) {
                return Err(Error::DimensionMismatch(
                    "stack planes differ in size".into(),
                ));
            }
            if !first.same_mask(p) {
                return Err(Error::MaskMismatch("stack planes differ in mask".into()));
            }
        }
        Ok(Self { planes })
    }

    /// Constant unmasked stack.
    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        let planes = (0..channels)
            .map(|_| Field2D::constant(height, width, value))
            .collect();
        Self { planes }
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    pub fn height(&self) -> usize {
        self.planes[0].height()
    }

    pub fn width(&self) -> usize {
        self.planes[0].width()
    }

    pub fn planes(&self) -> &[Field2D] {
        &self.planes
    }

    pub fn plane(&self, c: usize) -> &Field2D {
        &self.planes[c]
    }

    pub fn same_shape(&self, other: &FieldStack) -> bool {
        self.channels() == other.channels() && self.planes[0].same_shape(&other.planes[0])
    }

    /// Concatenates the planes of several stacks of identical geometry.
    pub fn concat(stacks: &[&FieldStack]) -> Result<FieldStack> {
        let mut planes = Vec::new();
        for s in stacks {
            planes.extend(s.planes.iter().cloned());
        }
        FieldStack::from_planes(planes)
    }

    /// A new stack holding a contiguous channel range of this one.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<FieldStack> {
        if start >= end || end > self.channels() {
            return Err(Error::InvalidParameter(format!(
                "channel slice {start}..{end} out of range for {} channels",
                self.channels()
            )));
        }
        FieldStack::from_planes(self.planes[start..end].to_vec())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> Result<FieldStack> {
        let planes = self
            .planes
            .iter()
            .map(|p| p.map(f))
            .collect::<Result<Vec<_>>>()?;
        FieldStack::from_planes(planes)
    }

    pub fn zip_map(
        &self,
        other: &FieldStack,
        f: impl Fn(f64, f64) -> f64 + Copy,
    ) -> Result<FieldStack> {
        if self.channels() != other.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                got: other.channels(),
            });
        }
        let planes = self
            .planes
            .iter()
            .zip(&other.planes)
            .map(|(a, b)| a.zip_map(b, f))
            .collect::<Result<Vec<_>>>()?;
        FieldStack::from_planes(planes)
    }
}

/// Linearly-interpolated q-th percentile over valid pixels.
///
/// Uses rank `r = q/100 * (n-1)` between closest order statistics, so `q = 0`
/// is the minimum and `q = 100` the maximum.
pub fn percentile(field: &Field2D, q: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidParameter(format!(
            "percentile q must be in [0, 100], got {q}"
        )));
    }
    let mut vals: Vec<f64> = field.valid_values().collect();
    if vals.is_empty() {
        return Err(Error::NoValidPixels);
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok(percentile_sorted(&vals, q))
}

/// Percentile of an already-sorted slice; shared with the percentile tests.
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Median of a small scratch buffer; even counts average the two middle
/// order statistics.
pub(crate) fn median_scratch(scratch: &mut [f64]) -> f64 {
    scratch.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = scratch.len();
    if n % 2 == 1 {
        scratch[n / 2]
    } else {
        0.5 * (scratch[n / 2 - 1] + scratch[n / 2])
    }
}

/// Per-pixel median across members of identical shape and mask.
pub fn pixelwise_median(members: &[Field2D]) -> Result<Field2D> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidParameter("median of zero members".into()))?;
    for m in &members[1..] {
        if !first.same_shape(m) {
            return Err(Error::DimensionMismatch(
                "median members differ in size".into(),
            ));
        }
        if !first.same_mask(m) {
            return Err(Error::MaskMismatch("median members differ in mask".into()));
        }
    }
    let n = first.len();
    let mut out = Vec::with_capacity(n);
    let mut scratch = vec![0.0; members.len()];
    for i in 0..n {
        if first.is_valid(i) {
            for (k, m) in members.iter().enumerate() {
                scratch[k] = m.values()[i];
            }
            out.push(median_scratch(&mut scratch));
        } else {
            out.push(first.values()[i]);
        }
    }
    Field2D::build(first.height(), first.width(), out, first.mask.clone())
}

/// Source coordinate of an output pixel center under align-corners-false
/// sampling, plus the two tap indices and the interpolation fraction.
fn bilinear_taps(out_idx: usize, scale: f64, in_len: usize) -> (usize, usize, f64) {
    let x = (out_idx as f64 + 0.5) * scale - 0.5;
    let lo = x.floor();
    let frac = x - lo;
    let i0 = (lo.max(0.0) as usize).min(in_len - 1);
    let i1 = ((lo + 1.0).max(0.0) as usize).min(in_len - 1);
    (i0, i1, frac)
}

/// Bilinear resampling at pixel centers (align-corners = false), taps clamped
/// to the field borders. The input must be unmasked; resample masks separately
/// with [`resample_mask`].
pub fn resample_bilinear(field: &Field2D, new_h: usize, new_w: usize) -> Result<Field2D> {
    if field.mask.is_some() {
        return Err(Error::MaskMismatch(
            "resample_bilinear expects an unmasked field".into(),
        ));
    }
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidParameter(
            "resampled dimensions must be positive".into(),
        ));
    }
    let sy = field.height() as f64 / new_h as f64;
    let sx = field.width() as f64 / new_w as f64;
    let w = field.width();
    let mut out = Vec::with_capacity(new_h * new_w);
    for r in 0..new_h {
        let (r0, r1, fy) = bilinear_taps(r, sy, field.height());
        for c in 0..new_w {
            let (c0, c1, fx) = bilinear_taps(c, sx, field.width());
            let v00 = field.values[r0 * w + c0];
            let v01 = field.values[r0 * w + c1];
            let v10 = field.values[r1 * w + c0];
            let v11 = field.values[r1 * w + c1];
            let top = v00 + fx * (v01 - v00);
            let bot = v10 + fx * (v11 - v10);
            out.push(top + fy * (bot - top));
        }
    }
    Field2D::new(new_h, new_w, out)
}

/// Conservative mask resampling: an output pixel is valid only if all four
/// bilinear source taps are valid. Unmasked fields yield an all-true mask.
pub fn resample_mask(field: &Field2D, new_h: usize, new_w: usize) -> Result<Vec<bool>> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidParameter(
            "resampled dimensions must be positive".into(),
        ));
    }
    let Some(mask) = field.mask() else {
        return Ok(vec![true; new_h * new_w]);
    };
    let sy = field.height() as f64 / new_h as f64;
    let sx = field.width() as f64 / new_w as f64;
    let w = field.width();
    let mut out = Vec::with_capacity(new_h * new_w);
    for r in 0..new_h {
        let (r0, r1, _) = bilinear_taps(r, sy, field.height());
        for c in 0..new_w {
            let (c0, c1, _) = bilinear_taps(c, sx, field.width());
            out.push(mask[r0 * w + c0] && mask[r0 * w + c1] && mask[r1 * w + c0] && mask[r1 * w + c1]);
        }
    }
    Ok(out)
}

/// Closed-form least-squares fit of `scale * pred + shift ~ gt` over pixels
/// valid in both fields. Errors with [`Error::DegenerateFit`] when fewer than
/// two pixels overlap or `pred` is constant over the overlap.
pub fn least_squares_affine(pred: &Field2D, gt: &Field2D) -> Result<(f64, f64)> {
    if !pred.same_shape(gt) {
        return Err(Error::DimensionMismatch(
            "fit fields differ in size".into(),
        ));
    }
    let mut n = 0usize;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for i in 0..pred.len() {
        if pred.is_valid(i) && gt.is_valid(i) {
            n += 1;
            sum_p += pred.values()[i];
            sum_g += gt.values()[i];
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    if n < 2 {
        return Err(Error::DegenerateFit);
    }
    let mean_p = sum_p / n as f64;
    let mean_g = sum_g / n as f64;
    // Mean-centered normal equations for numerical stability.
    let mut var_p = 0.0;
    let mut cov = 0.0;
    for i in 0..pred.len() {
        if pred.is_valid(i) && gt.is_valid(i) {
            let dp = pred.values()[i] - mean_p;
            cov += dp * (gt.values()[i] - mean_g);
            var_p += dp * dp;
        }
    }
    if var_p <= 0.0 {
        return Err(Error::DegenerateFit);
    }
    let scale = cov / var_p;
    let shift = mean_g - scale * mean_p;
    Ok((scale, shift))
}

/// Least-squares scale with the shift fixed at zero:
/// `s = sum(pred * gt) / sum(pred^2)` over pixels valid in both fields.
pub fn scale_align(pred: &Field2D, gt: &Field2D) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::DimensionMismatch(
            "fit fields differ in size".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut any = false;
    for i in 0..pred.len() {
        if pred.is_valid(i) && gt.is_valid(i) {
            any = true;
            num += pred.values()[i] * gt.values()[i];
            den += pred.values()[i] * pred.values()[i];
        }
    }
    if !any {
        return Err(Error::NoValidPixels);
    }
    if den <= 0.0 {
        return Err(Error::DegenerateFit);
    }
    Ok(num / den)
}
