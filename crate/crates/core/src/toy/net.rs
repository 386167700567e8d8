//! The trainable toy denoiser: three hidden 3x3 convolution layers of width
//! 32 with SiLU activations, a sinusoidal timestep embedding added per
//! channel after the first convolution, and a linear 3x3 output layer.
//! Forward and backward passes are written by hand and verified against
//! central finite differences.

use crate::error::{Error, Result};
use crate::grid::{Field2D, FieldStack};
use crate::schedule::Parameterization;
use crate::tiling::{ChannelSignature, Denoiser};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::ops::Range;

/// Layer widths of the toy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyArch {
    /// Channels of the concatenated (noisy latent, conditioning) input.
    pub in_channels: usize,
    /// Channels the network denoises (the latent width).
    pub latent_channels: usize,
    /// Hidden width.
    pub hidden: usize,
    /// Sinusoidal timestep feature count (even).
    pub time_features: usize,
}

impl ToyArch {
    /// The stock architecture: hidden width 32, 16 timestep features.
    pub fn standard(latent_channels: usize, conditioning_channels: usize) -> Self {
        Self {
            in_channels: latent_channels + conditioning_channels,
            latent_channels,
            hidden: 32,
            time_features: 16,
        }
    }

    pub fn conditioning_channels(&self) -> usize {
        self.in_channels - self.latent_channels
    }
}

/// Flat-parameter offsets for one architecture.
#[derive(Debug, Clone)]
struct ParamLayout {
    conv1_w: Range<usize>,
    conv1_b: Range<usize>,
    temb_w: Range<usize>,
    temb_b: Range<usize>,
    conv2_w: Range<usize>,
    conv2_b: Range<usize>,
    conv3_w: Range<usize>,
    conv3_b: Range<usize>,
    conv4_w: Range<usize>,
    conv4_b: Range<usize>,
    total: usize,
}

impl ParamLayout {
    fn new(arch: &ToyArch) -> Self {
        let mut cursor = 0usize;
        let mut take = |len: usize| -> Range<usize> {
            let r = cursor..cursor + len;
            cursor += len;
            r
        };
        let h = arch.hidden;
        let conv1_w = take(h * arch.in_channels * 9);
        let conv1_b = take(h);
        let temb_w = take(h * arch.time_features);
        let temb_b = take(h);
        let conv2_w = take(h * h * 9);
        let conv2_b = take(h);
        let conv3_w = take(h * h * 9);
        let conv3_b = take(h);
        let conv4_w = take(arch.latent_channels * h * 9);
        let conv4_b = take(arch.latent_channels);
        ParamLayout {
            conv1_w,
            conv1_b,
            temb_w,
            temb_b,
            conv2_w,
            conv2_b,
            conv3_w,
            conv3_b,
            conv4_w,
            conv4_b,
            total: cursor,
        }
    }
}

/// Adds `weight * shifted(input)` into `out`, where the input plane is read
/// with offset (dy, dx) and zero padding.
fn add_shifted(
    out: &mut [f64],
    input: &[f64],
    weight: f64,
    dy: isize,
    dx: isize,
    h: usize,
    w: usize,
) {
    let r_lo = (-dy).max(0) as usize;
    let r_hi = (h as isize - dy.max(0)) as usize;
    let c_lo = (-dx).max(0) as usize;
    let c_hi = (w as isize - dx.max(0)) as usize;
    for r in r_lo..r_hi {
        let src_row = ((r as isize + dy) as usize) * w;
        let dst_row = r * w;
        let src = &input[src_row + ((c_lo as isize + dx) as usize)
            ..src_row + ((c_hi as isize + dx) as usize)];
        let dst = &mut out[dst_row + c_lo..dst_row + c_hi];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += weight * s;
        }
    }
}

/// Dot product of the (dy, dx)-shifted input plane against `grad`, the weight
/// gradient of one kernel tap.
fn dot_shifted(input: &[f64], grad: &[f64], dy: isize, dx: isize, h: usize, w: usize) -> f64 {
    let r_lo = (-dy).max(0) as usize;
    let r_hi = (h as isize - dy.max(0)) as usize;
    let c_lo = (-dx).max(0) as usize;
    let c_hi = (w as isize - dx.max(0)) as usize;
    let mut acc = 0.0;
    for r in r_lo..r_hi {
        let src_row = ((r as isize + dy) as usize) * w;
        let dst_row = r * w;
        let src = &input[src_row + ((c_lo as isize + dx) as usize)
            ..src_row + ((c_hi as isize + dx) as usize)];
        let g = &grad[dst_row + c_lo..dst_row + c_hi];
        for (a, b) in src.iter().zip(g) {
            acc += a * b;
        }
    }
    acc
}

/// 3x3 same-padding cross-correlation; `weights` is laid out
/// `[out_c][in_c][3][3]`.
fn conv3x3_forward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    out_c: usize,
    out: &mut [f64],
) {
    let plane = h * w;
    for o in 0..out_c {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..in_c {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let base = (o * in_c + i) * 9;
            for dy in 0..3isize {
                for dx in 0..3isize {
                    let wv = weights[base as usize + (dy * 3 + dx) as usize];
                    add_shifted(out_plane, in_plane, wv, dy - 1, dx - 1, h, w);
                }
            }
        }
    }
}

/// Backward of [`conv3x3_forward`]: accumulates weight/bias gradients and
/// (optionally) the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    out_c: usize,
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let plane = h * w;
    for o in 0..out_c {
        let dout_plane = &dout[o * plane..(o + 1) * plane];
        dbias[o] += dout_plane.iter().sum::<f64>();
        for i in 0..in_c {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let base = (o * in_c + i) * 9;
            for dy in 0..3isize {
                for dx in 0..3isize {
                    dweights[base as usize + (dy * 3 + dx) as usize] +=
                        dot_shifted(in_plane, dout_plane, dy - 1, dx - 1, h, w);
                }
            }
        }
    }
    if let Some(dinput) = dinput {
        for i in 0..in_c {
            let din_plane = &mut dinput[i * plane..(i + 1) * plane];
            for o in 0..out_c {
                let dout_plane = &dout[o * plane..(o + 1) * plane];
                let base = (o * in_c + i) * 9;
                for dy in 0..3isize {
                    for dx in 0..3isize {
                        let wv = weights[base as usize + (dy * 3 + dx) as usize];
                        // The adjoint of reading at (dy-1, dx-1) is writing at
                        // the opposite shift.
                        add_shifted(din_plane, dout_plane, wv, 1 - dy, 1 - dx, h, w);
                    }
                }
            }
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_derivative(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal features of an integer timestep, interleaved sin/cos over
/// geometrically spaced frequencies.
fn timestep_features(t: usize, n: usize) -> Vec<f64> {
    let half = n / 2;
    let mut out = Vec::with_capacity(n);
    for k in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = 10000f64.powf(-(k as f64) / denom);
        let x = t as f64 * freq;
        out.push(x.sin());
        out.push(x.cos());
    }
    out
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct ForwardCache {
    h: usize,
    w: usize,
    input: Vec<f64>,
    features: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    pre3: Vec<f64>,
    act3: Vec<f64>,
    pub(crate) output: Vec<f64>,
}

/// Small convolutional denoiser with explicit parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    arch: ToyArch,
    parameterization: Parameterization,
    params: Vec<f64>,
}

impl ToyDenoiser {
    /// Randomly initialized network: weights scaled by inverse fan-in,
    /// biases zero. Deterministic given the seed.
    pub fn new(arch: ToyArch, parameterization: Parameterization, seed: u64) -> Self {
        assert!(arch.time_features % 2 == 0, "time_features must be even");
        assert!(
            arch.in_channels > arch.latent_channels,
            "input must include at least one conditioning channel"
        );
        let layout = ParamLayout::new(&arch);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = vec![0.0f64; layout.total];
        let mut init_conv = |range: Range<usize>, fan_in: usize, rng: &mut ChaCha12Rng| {
            let scale = (1.0 / fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        init_conv(layout.conv1_w.clone(), arch.in_channels * 9, &mut rng);
        init_conv(layout.temb_w.clone(), arch.time_features, &mut rng);
        init_conv(layout.conv2_w.clone(), arch.hidden * 9, &mut rng);
        init_conv(layout.conv3_w.clone(), arch.hidden * 9, &mut rng);
        init_conv(layout.conv4_w.clone(), arch.hidden * 9, &mut rng);
        Self {
            arch,
            parameterization,
            params,
        }
    }

    pub fn arch(&self) -> &ToyArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.arch)
    }

    /// Flattens a stack to channel-major storage.
    fn flatten(stack: &FieldStack) -> Vec<f64> {
        let mut out = Vec::with_capacity(stack.channels() * stack.height() * stack.width());
        for p in stack.planes() {
            out.extend_from_slice(p.values());
        }
        out
    }

    fn unflatten(&self, data: &[f64], h: usize, w: usize) -> FieldStack {
        let plane = h * w;
        FieldStack::from_planes(
            (0..self.arch.latent_channels)
                .map(|c| Field2D::new(h, w, data[c * plane..(c + 1) * plane].to_vec()))
                .collect::<Result<Vec<_>>>()
                .expect("finite network output"),
        )
        .expect("identical planes")
    }

    /// Runs the network on a channel-major input buffer, caching every
    /// intermediate needed by [`Self::backward`].
    pub(crate) fn forward_cached(&self, input: Vec<f64>, h: usize, w: usize, t: usize) -> ForwardCache {
        let arch = &self.arch;
        let layout = self.layout();
        let plane = h * w;
        debug_assert_eq!(input.len(), arch.in_channels * plane);

        let features = timestep_features(t, arch.time_features);
        let mut pre1 = vec![0.0f64; arch.hidden * plane];
        conv3x3_forward(
            &input,
            arch.in_channels,
            h,
            w,
            &self.params[layout.conv1_w.clone()],
            &self.params[layout.conv1_b.clone()],
            arch.hidden,
            &mut pre1,
        );
        // Per-channel additive timestep embedding.
        let temb_w = &self.params[layout.temb_w.clone()];
        let temb_b = &self.params[layout.temb_b.clone()];
        for c in 0..arch.hidden {
            let mut e = temb_b[c];
            for (k, f) in features.iter().enumerate() {
                e += temb_w[c * arch.time_features + k] * f;
            }
            for v in &mut pre1[c * plane..(c + 1) * plane] {
                *v += e;
            }
        }
        let act1: Vec<f64> = pre1.iter().map(|v| silu(*v)).collect();

        let mut pre2 = vec![0.0f64; arch.hidden * plane];
        conv3x3_forward(
            &act1,
            arch.hidden,
            h,
            w,
            &self.params[layout.conv2_w.clone()],
            &self.params[layout.conv2_b.clone()],
            arch.hidden,
            &mut pre2,
        );
        let act2: Vec<f64> = pre2.iter().map(|v| silu(*v)).collect();

        let mut pre3 = vec![0.0f64; arch.hidden * plane];
        conv3x3_forward(
            &act2,
            arch.hidden,
            h,
            w,
            &self.params[layout.conv3_w.clone()],
            &self.params[layout.conv3_b.clone()],
            arch.hidden,
            &mut pre3,
        );
        let act3: Vec<f64> = pre3.iter().map(|v| silu(*v)).collect();

        let mut output = vec![0.0f64; arch.latent_channels * plane];
        conv3x3_forward(
            &act3,
            arch.hidden,
            h,
            w,
            &self.params[layout.conv4_w.clone()],
            &self.params[layout.conv4_b.clone()],
            arch.latent_channels,
            &mut output,
        );
        ForwardCache {
            h,
            w,
            input,
            features,
            pre1,
            act1,
            pre2,
            act2,
            pre3,
            act3,
            output,
        }
    }

    /// Parameter gradient for an upstream output gradient, accumulated into
    /// `grads` (length `param_count`).
    pub(crate) fn backward(&self, cache: &ForwardCache, dout: &[f64], grads: &mut [f64]) {
        let arch = &self.arch;
        let layout = self.layout();
        let (h, w) = (cache.h, cache.w);
        let plane = h * w;
        debug_assert_eq!(dout.len(), arch.latent_channels * plane);
        debug_assert_eq!(grads.len(), layout.total);

        // conv4
        let mut dact3 = vec![0.0f64; arch.hidden * plane];
        {
            let (dw, db) = (layout.conv4_w.clone(), layout.conv4_b.clone());
            let weights = &self.params[dw.clone()];
            let mut dweights = vec![0.0f64; dw.len()];
            let mut dbias = vec![0.0f64; db.len()];
            conv3x3_backward(
                &cache.act3,
                arch.hidden,
                h,
                w,
                weights,
                arch.latent_channels,
                dout,
                &mut dweights,
                &mut dbias,
                Some(&mut dact3),
            );
            for (g, d) in grads[dw].iter_mut().zip(&dweights) {
                *g += d;
            }
            for (g, d) in grads[db].iter_mut().zip(&dbias) {
                *g += d;
            }
        }

        let dpre3: Vec<f64> = dact3
            .iter()
            .zip(&cache.pre3)
            .map(|(g, x)| g * silu_derivative(*x))
            .collect();

        // conv3
        let mut dact2 = vec![0.0f64; arch.hidden * plane];
        {
            let (dw, db) = (layout.conv3_w.clone(), layout.conv3_b.clone());
            let weights = &self.params[dw.clone()];
            let mut dweights = vec![0.0f64; dw.len()];
            let mut dbias = vec![0.0f64; db.len()];
            conv3x3_backward(
                &cache.act2,
                arch.hidden,
                h,
                w,
                weights,
                arch.hidden,
                &dpre3,
                &mut dweights,
                &mut dbias,
                Some(&mut dact2),
            );
            for (g, d) in grads[dw].iter_mut().zip(&dweights) {
                *g += d;
            }
            for (g, d) in grads[db].iter_mut().zip(&dbias) {
                *g += d;
            }
        }

        let dpre2: Vec<f64> = dact2
            .iter()
            .zip(&cache.pre2)
            .map(|(g, x)| g * silu_derivative(*x))
            .collect();

        // conv2
        let mut dact1 = vec![0.0f64; arch.hidden * plane];
        {
            let (dw, db) = (layout.conv2_w.clone(), layout.conv2_b.clone());
            let weights = &self.params[dw.clone()];
            let mut dweights = vec![0.0f64; dw.len()];
            let mut dbias = vec![0.0f64; db.len()];
            conv3x3_backward(
                &cache.act1,
                arch.hidden,
                h,
                w,
                weights,
                arch.hidden,
                &dpre2,
                &mut dweights,
                &mut dbias,
                Some(&mut dact1),
            );
            for (g, d) in grads[dw].iter_mut().zip(&dweights) {
                *g += d;
            }
            for (g, d) in grads[db].iter_mut().zip(&dbias) {
                *g += d;
            }
        }

        let dpre1: Vec<f64> = dact1
            .iter()
            .zip(&cache.pre1)
            .map(|(g, x)| g * silu_derivative(*x))
            .collect();

        // Timestep embedding: the per-channel spatial sum of dpre1.
        {
            let temb_w = layout.temb_w.clone();
            let temb_b = layout.temb_b.clone();
            for c in 0..arch.hidden {
                let channel_sum: f64 = dpre1[c * plane..(c + 1) * plane].iter().sum();
                grads[temb_b.start + c] += channel_sum;
                for (k, f) in cache.features.iter().enumerate() {
                    grads[temb_w.start + c * arch.time_features + k] += channel_sum * f;
                }
            }
        }

        // conv1 (no input gradient needed).
        {
            let (dw, db) = (layout.conv1_w.clone(), layout.conv1_b.clone());
            let weights = &self.params[dw.clone()];
            let mut dweights = vec![0.0f64; dw.len()];
            let mut dbias = vec![0.0f64; db.len()];
            conv3x3_backward(
                &cache.input,
                arch.in_channels,
                h,
                w,
                weights,
                arch.hidden,
                &dpre1,
                &mut dweights,
                &mut dbias,
                None,
            );
            for (g, d) in grads[dw].iter_mut().zip(&dweights) {
                *g += d;
            }
            for (g, d) in grads[db].iter_mut().zip(&dbias) {
                *g += d;
            }
        }
    }

    /// Network output on the concatenated (noisy, conditioning) input.
    pub fn forward(&self, noisy: &FieldStack, conditioning: &FieldStack, t: usize) -> Result<FieldStack> {
        let input = self.concat_input(noisy, conditioning)?;
        let cache = self.forward_cached(input, noisy.height(), noisy.width(), t);
        Ok(self.unflatten(&cache.output, noisy.height(), noisy.width()))
    }

    pub(crate) fn concat_input(
        &self,
        noisy: &FieldStack,
        conditioning: &FieldStack,
    ) -> Result<Vec<f64>> {
        if noisy.channels() != self.arch.latent_channels {
            return Err(Error::SignatureMismatch(format!(
                "expected {} latent channels, got {}",
                self.arch.latent_channels,
                noisy.channels()
            )));
        }
        if conditioning.channels() != self.arch.conditioning_channels() {
            return Err(Error::SignatureMismatch(format!(
                "expected {} conditioning channels, got {}",
                self.arch.conditioning_channels(),
                conditioning.channels()
            )));
        }
        if noisy.height() != conditioning.height() || noisy.width() != conditioning.width() {
            return Err(Error::DimensionMismatch(
                "noisy latent and conditioning differ in size".into(),
            ));
        }
        let mut input = Self::flatten(noisy);
        input.extend(Self::flatten(conditioning));
        Ok(input)
    }

    pub(crate) fn output_stack(&self, cache: &ForwardCache) -> FieldStack {
        self.unflatten(&cache.output, cache.h, cache.w)
    }

    /// Doubles the input channels by duplicating the first-layer weight
    /// tensor and halving its values, preserving activation magnitudes when
    /// the new channels duplicate the old input.
    pub fn widen_input(&self) -> ToyDenoiser {
        let old_layout = self.layout();
        let new_arch = ToyArch {
            in_channels: self.arch.in_channels * 2,
            ..self.arch
        };
        let new_layout = ParamLayout::new(&new_arch);
        let mut params = vec![0.0f64; new_layout.total];

        let old_w = &self.params[old_layout.conv1_w.clone()];
        let new_w = &mut params[new_layout.conv1_w.clone()];
        let per_out_old = self.arch.in_channels * 9;
        for o in 0..self.arch.hidden {
            for idx in 0..per_out_old {
                let half = old_w[o * per_out_old + idx] / 2.0;
                new_w[o * per_out_old * 2 + idx] = half;
                new_w[o * per_out_old * 2 + per_out_old + idx] = half;
            }
        }
        params[new_layout.conv1_b.clone()]
            .copy_from_slice(&self.params[old_layout.conv1_b.clone()]);
        for (new_r, old_r) in [
            (new_layout.temb_w.clone(), old_layout.temb_w.clone()),
            (new_layout.temb_b.clone(), old_layout.temb_b.clone()),
            (new_layout.conv2_w.clone(), old_layout.conv2_w.clone()),
            (new_layout.conv2_b.clone(), old_layout.conv2_b.clone()),
            (new_layout.conv3_w.clone(), old_layout.conv3_w.clone()),
            (new_layout.conv3_b.clone(), old_layout.conv3_b.clone()),
            (new_layout.conv4_w.clone(), old_layout.conv4_w.clone()),
            (new_layout.conv4_b.clone(), old_layout.conv4_b.clone()),
        ] {
            params[new_r].copy_from_slice(&self.params[old_r]);
        }
        ToyDenoiser {
            arch: new_arch,
            parameterization: self.parameterization,
            params,
        }
    }
}

impl Denoiser for ToyDenoiser {
    fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    fn signature(&self) -> ChannelSignature {
        ChannelSignature {
            latent: self.arch.latent_channels,
            conditioning: self.arch.conditioning_channels(),
        }
    }

    fn denoise(&self, noisy: &FieldStack, conditioning: &FieldStack, t: usize) -> Result<FieldStack> {
        self.forward(noisy, conditioning, t)
    }
}

const FILE_MAGIC: &[u8; 4] = b"TDNZ";
const FILE_VERSION: u8 = 1;

fn parameterization_tag(p: Parameterization) -> u8 {
    match p {
        Parameterization::Epsilon => 0,
        Parameterization::V => 1,
        Parameterization::X0 => 2,
    }
}

fn tag_parameterization(tag: u8) -> Result<Parameterization> {
    match tag {
        0 => Ok(Parameterization::Epsilon),
        1 => Ok(Parameterization::V),
        2 => Ok(Parameterization::X0),
        other => Err(Error::MalformedFile(format!(
            "unknown parameterization tag {other}"
        ))),
    }
}

impl ToyDenoiser {
    /// Serializes to the versioned flat binary: magic, version, architecture
    /// descriptor, parameterization tag, then the little-endian f32
    /// parameter vector.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(FILE_MAGIC)?;
        w.write_all(&[FILE_VERSION])?;
        for field in [
            self.arch.in_channels,
            self.arch.latent_channels,
            self.arch.hidden,
            self.arch.time_features,
        ] {
            w.write_all(&(field as u32).to_le_bytes())?;
        }
        w.write_all(&[parameterization_tag(self.parameterization)])?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(*p as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FILE_MAGIC {
            return Err(Error::MalformedFile("bad magic bytes".into()));
        }
        let mut version = [0u8; 1];
        r.read_exact(&mut version)?;
        if version[0] != FILE_VERSION {
            return Err(Error::MalformedFile(format!(
                "unsupported version {}",
                version[0]
            )));
        }
        let read_u32 = |r: &mut dyn Read| -> Result<usize> {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            Ok(u32::from_le_bytes(buf) as usize)
        };
        let in_channels = read_u32(&mut r)?;
        let latent_channels = read_u32(&mut r)?;
        let hidden = read_u32(&mut r)?;
        let time_features = read_u32(&mut r)?;
        let arch = ToyArch {
            in_channels,
            latent_channels,
            hidden,
            time_features,
        };
        if latent_channels == 0 || in_channels <= latent_channels || hidden == 0 {
            return Err(Error::MalformedFile("inconsistent architecture".into()));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let parameterization = tag_parameterization(tag[0])?;
        let mut count_buf = [0u8; 8];
        r.read_exact(&mut count_buf)?;
        let count = u64::from_le_bytes(count_buf) as usize;
        let expected = ParamLayout::new(&arch).total;
        if count != expected {
            return Err(Error::MalformedFile(format!(
                "parameter count {count} does not match architecture ({expected})"
            )));
        }
        let mut params = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            params.push(f32::from_le_bytes(buf) as f64);
        }
        Ok(Self {
            arch,
            parameterization,
            params,
        })
    }
}
