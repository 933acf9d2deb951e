//! Temporal feature fusion: hybrid temporal shift, dynamic multi-resolution
//! contrast with cosine masking, and contrast-aware fusion.
//!
//! Per-frame maps are flattened to channel vectors ([B, C, T] with C = A*A),
//! a parameter-free circular shift redistributes channel groups across
//! adjacent frames, and a depthwise+pointwise conv pair fuses them back with
//! a residual. Multi-resolution pooled/rolled/upsampled copies expose motion
//! contrasts, binary cosine masks keep the locations more similar than the
//! scale mean, and a 1x1x1 conv fuses the original and difference tensors.

use rand::Rng;

use crate::tensor::tape::{Tape, Var};
use crate::tensor::{kernels, Real, Result, Tensor, TensorError};

/// Channel-group layout of the hybrid temporal shift.
#[derive(Debug, Clone)]
pub struct TemporalShiftConfig {
    /// Fraction of channels given to each shifted group.
    pub rho: f64,
    /// Channel count after flattening a frame (C = A*A).
    pub channels: usize,
}

impl TemporalShiftConfig {
    pub fn new(rho: f64, channels: usize) -> Result<Self> {
        let cfg = TemporalShiftConfig { rho, channels };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0 / 3.0) {
            return Err(TensorError::InvalidArg(format!(
                "rho {} outside (0, 1/3]",
                self.rho
            )));
        }
        if self.shift_group() == 0 {
            return Err(TensorError::InvalidArg(format!(
                "floor(rho * C) = 0 for C = {}",
                self.channels
            )));
        }
        Ok(())
    }

    fn shift_group(&self) -> usize {
        (self.rho * self.channels as f64).floor() as usize
    }

    /// Contiguous slice sizes (forward, backward, bidirectional, residual).
    pub fn group_sizes(&self) -> (usize, usize, usize, usize) {
        let g = self.shift_group();
        (g, g, g, self.channels - 3 * g)
    }
}

/// Cosine-mask channel convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CosineMode {
    /// Similarity of the (single-channel) values at each (t, i, j); with one
    /// channel the cosine degenerates to the sign of the product.
    PerLocation,
    /// Similarity of whole A*A frame vectors, one value per (t), broadcast
    /// over the frame.
    PerFrame,
}

/// Multi-resolution contrast pyramid.
#[derive(Debug, Clone)]
pub struct MultiResConfig {
    /// Number of scales K.
    pub num_scales: usize,
    /// Spatial extent A of the frames.
    pub spatial_extent: usize,
    /// Sequence length T (including any appended goal slot).
    pub seq_len: usize,
    pub cosine_mode: CosineMode,
}

impl MultiResConfig {
    pub fn new(num_scales: usize, spatial_extent: usize, seq_len: usize) -> Result<Self> {
        let cfg = MultiResConfig {
            num_scales,
            spatial_extent,
            seq_len,
            cosine_mode: CosineMode::PerLocation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// a_k = max(A / 2^(k-1), 4) for 1-based k.
    pub fn scale_extent(&self, k: usize) -> usize {
        (self.spatial_extent >> (k - 1)).max(4)
    }

    /// Every a_k must be even so the (a_k/2, a_k/2) roll is integral.
    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 {
            return Err(TensorError::InvalidArg("num_scales must be >= 1".into()));
        }
        if self.spatial_extent < 4 {
            return Err(TensorError::InvalidArg(
                "spatial extent must be >= 4".into(),
            ));
        }
        for k in 1..=self.num_scales {
            let a = self.scale_extent(k);
            if a % 2 != 0 {
                return Err(TensorError::InvalidArg(format!(
                    "scale extent a_{k} = {a} is odd for A = {}",
                    self.spatial_extent
                )));
            }
        }
        Ok(())
    }
}

/// Learnable parameters of the fusion block.
#[derive(Debug, Clone)]
pub struct TemporalFusionParams<T: Real> {
    /// Depthwise 3x1x1 temporal kernel, [C, 3].
    pub dw_temporal_kernel: Tensor<T>,
    /// Pointwise channel-fusion conv, [C, C] + [C].
    pub pw_weight: Tensor<T>,
    pub pw_bias: Tensor<T>,
    pub gn_gamma: Tensor<T>,
    pub gn_beta: Tensor<T>,
    /// Per-scale coefficients beta_k, each a single-element tensor.
    pub betas: Vec<Tensor<T>>,
    /// Final 1x1x1 fusion conv over the concatenated [tsm, diff] channels.
    pub fusion_weight: Tensor<T>,
    pub fusion_bias: Tensor<T>,
}

impl<T: Real> TemporalFusionParams<T> {
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        num_scales: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let dw_b = T::from_f64(1.0 / (3.0f64).sqrt());
        let pw_b = T::from_f64(1.0 / (channels as f64).sqrt());
        let fu_b = T::from_f64(1.0 / (2.0f64).sqrt());
        TemporalFusionParams {
            dw_temporal_kernel: Tensor::rand_uniform(&[channels, 3], -dw_b, dw_b, rng)
                .with_grad(),
            pw_weight: Tensor::rand_uniform(&[channels, channels], -pw_b, pw_b, rng).with_grad(),
            pw_bias: Tensor::zeros(&[channels]).with_grad(),
            gn_gamma: Tensor::full(&[channels], T::one()).with_grad(),
            gn_beta: Tensor::zeros(&[channels]).with_grad(),
            betas: (0..num_scales)
                .map(|_| Tensor::full(&[1], T::one()).with_grad())
                .collect(),
            fusion_weight: Tensor::rand_uniform(&[out_channels, 2], -fu_b, fu_b, rng).with_grad(),
            fusion_bias: Tensor::zeros(&[out_channels]).with_grad(),
        }
    }

    pub fn param_count(channels: usize, num_scales: usize, out_channels: usize) -> usize {
        channels * 3 + channels * channels + channels * 3 + num_scales + out_channels * 2
            + out_channels
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        f("temporal.dw_temporal_kernel".into(), &self.dw_temporal_kernel);
        f("temporal.pw_weight".into(), &self.pw_weight);
        f("temporal.pw_bias".into(), &self.pw_bias);
        f("temporal.gn_gamma".into(), &self.gn_gamma);
        f("temporal.gn_beta".into(), &self.gn_beta);
        for (k, b) in self.betas.iter().enumerate() {
            f(format!("temporal.beta.{k}"), b);
        }
        f("temporal.fusion_weight".into(), &self.fusion_weight);
        f("temporal.fusion_bias".into(), &self.fusion_bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f("temporal.dw_temporal_kernel".into(), &mut self.dw_temporal_kernel);
        f("temporal.pw_weight".into(), &mut self.pw_weight);
        f("temporal.pw_bias".into(), &mut self.pw_bias);
        f("temporal.gn_gamma".into(), &mut self.gn_gamma);
        f("temporal.gn_beta".into(), &mut self.gn_beta);
        for (k, b) in self.betas.iter_mut().enumerate() {
            f(format!("temporal.beta.{k}"), b);
        }
        f("temporal.fusion_weight".into(), &mut self.fusion_weight);
        f("temporal.fusion_bias".into(), &mut self.fusion_bias);
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> TemporalFusionVars {
        TemporalFusionVars {
            dw_temporal_kernel: tape.leaf(self.dw_temporal_kernel.clone()),
            pw_weight: tape.leaf(self.pw_weight.clone()),
            pw_bias: tape.leaf(self.pw_bias.clone()),
            gn_gamma: tape.leaf(self.gn_gamma.clone()),
            gn_beta: tape.leaf(self.gn_beta.clone()),
            betas: self.betas.iter().map(|b| tape.leaf(b.clone())).collect(),
            fusion_weight: tape.leaf(self.fusion_weight.clone()),
            fusion_bias: tape.leaf(self.fusion_bias.clone()),
        }
    }
}

pub struct TemporalFusionVars {
    pub dw_temporal_kernel: Var,
    pub pw_weight: Var,
    pub pw_bias: Var,
    pub gn_gamma: Var,
    pub gn_beta: Var,
    pub betas: Vec<Var>,
    pub fusion_weight: Var,
    pub fusion_bias: Var,
}

fn check_bct<T: Real>(x: &Tensor<T>, cfg: &TemporalShiftConfig) -> Result<()> {
    if x.rank() != 3 || x.shape()[1] != cfg.channels {
        return Err(TensorError::InvalidArg(format!(
            "expected [B, {}, T], got {:?}",
            cfg.channels,
            x.shape()
        )));
    }
    Ok(())
}

/// Splits the channel axis of [B, C, T] into the four contiguous shift groups.
/// The residual slice is `None` when 3*floor(rho*C) == C.
pub fn channel_partition_t<T: Real>(
    tape: &mut Tape<T>,
    x_bar: Var,
    cfg: &TemporalShiftConfig,
) -> Result<(Var, Var, Var, Option<Var>)> {
    cfg.validate()?;
    check_bct(tape.value(x_bar), cfg)?;
    let (cf, cb, cbi, cr) = cfg.group_sizes();
    let f = tape.slice_axis(x_bar, 1, 0, cf)?;
    let b = tape.slice_axis(x_bar, 1, cf, cb)?;
    let bi = tape.slice_axis(x_bar, 1, cf + cb, cbi)?;
    let r = if cr > 0 {
        Some(tape.slice_axis(x_bar, 1, cf + cb + cbi, cr)?)
    } else {
        None
    };
    Ok((f, b, bi, r))
}

/// Pure-value form of [`channel_partition_t`].
pub fn channel_partition<T: Real>(
    x_bar: &Tensor<T>,
    cfg: &TemporalShiftConfig,
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x_bar.clone());
    let (f, b, bi, r) = channel_partition_t(&mut tape, xv, cfg)?;
    let mut out = vec![
        tape.value(f).clone(),
        tape.value(b).clone(),
        tape.value(bi).clone(),
    ];
    if let Some(r) = r {
        out.push(tape.value(r).clone());
    }
    Ok(out)
}

/// Parameter-free hybrid temporal shift on [B, C, T]: the forward group takes
/// its value from t-1, the backward group from t+1, the bidirectional group
/// averages both, and the residual group is unchanged. Shifts wrap circularly
/// at both sequence ends.
pub fn hybrid_temporal_shift_t<T: Real>(
    tape: &mut Tape<T>,
    x_bar: Var,
    cfg: &TemporalShiftConfig,
) -> Result<Var> {
    check_bct(tape.value(x_bar), cfg)?;
    let t_len = tape.value(x_bar).shape()[2];
    if t_len < 2 {
        return Err(TensorError::InvalidArg(format!(
            "temporal shift needs T >= 2, got {t_len}"
        )));
    }
    let (f, b, bi, r) = channel_partition_t(tape, x_bar, cfg)?;
    let f_shift = tape.circular_roll(f, 2, 1)?;
    let b_shift = tape.circular_roll(b, 2, -1)?;
    let bi_prev = tape.circular_roll(bi, 2, 1)?;
    let bi_next = tape.circular_roll(bi, 2, -1)?;
    let bi_sum = tape.add(bi_prev, bi_next)?;
    let bi_avg = tape.scale(bi_sum, 0.5)?;
    let mut parts = vec![f_shift, b_shift, bi_avg];
    if let Some(r) = r {
        parts.push(r);
    }
    tape.concat(&parts, 1)
}

pub fn hybrid_temporal_shift<T: Real>(
    x_bar: &Tensor<T>,
    cfg: &TemporalShiftConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x_bar.clone());
    let out = hybrid_temporal_shift_t(&mut tape, xv, cfg)?;
    Ok(tape.value(out).clone())
}

/// Depthwise 3x1x1 temporal conv, group norm + GELU, pointwise 1x1x1 conv,
/// added residually to the unshifted tensor, reshaped to [B, 1, T, A, A].
pub fn tsm_fuse_t<T: Real>(
    tape: &mut Tape<T>,
    x_bar: Var,
    x_shifted: Var,
    vars: &TemporalFusionVars,
    spatial_extent: usize,
) -> Result<Var> {
    let shape = tape.value(x_bar).shape().to_vec();
    if shape != tape.value(x_shifted).shape() {
        return Err(TensorError::ShapeMismatch {
            expected: shape,
            got: tape.value(x_shifted).shape().to_vec(),
        });
    }
    let (batch, channels, t_len) = (shape[0], shape[1], shape[2]);
    if channels != spatial_extent * spatial_extent {
        return Err(TensorError::InvalidArg(format!(
            "channels {channels} != A*A for A = {spatial_extent}"
        )));
    }
    let y = tape.depthwise_conv1d(x_shifted, vars.dw_temporal_kernel)?;
    let y = tape.group_norm(y, 1, vars.gn_gamma, vars.gn_beta)?;
    let y = tape.gelu(y)?;
    let y = tape.pointwise_conv(y, vars.pw_weight, vars.pw_bias)?;
    let fused = tape.add(x_bar, y)?;
    // [B, C, T] -> [B, T, C] -> [B, 1, T, A, A]
    let btc = tape.permute(fused, &[0, 2, 1])?;
    tape.reshape(
        btc,
        &[batch, 1, t_len, spatial_extent, spatial_extent],
    )
}

/// The scale-k rearranged copy and its residual:
/// x_tilde_k = upsample(roll(pool_k(x_tsm), (a_k/2, a_k/2))),
/// delta_k   = x_tilde_k - x_tsm.
fn multires_pair_t<T: Real>(
    tape: &mut Tape<T>,
    x_tsm: Var,
    k: usize,
    cfg: &MultiResConfig,
) -> Result<(Var, Var)> {
    if k == 0 || k > cfg.num_scales {
        return Err(TensorError::InvalidArg(format!(
            "scale index {k} outside 1..={}",
            cfg.num_scales
        )));
    }
    let a = cfg.spatial_extent;
    let ak = cfg.scale_extent(k);
    let pooled = tape.adaptive_avg_pool2d(x_tsm, ak, ak)?;
    let rolled_h = tape.circular_roll(pooled, 3, (ak / 2) as i64)?;
    let rolled = tape.circular_roll(rolled_h, 4, (ak / 2) as i64)?;
    let x_tilde = tape.upsample_nearest(rolled, a, a)?;
    let delta = tape.sub(x_tilde, x_tsm)?;
    Ok((x_tilde, delta))
}

/// Scale-k contrast residual of x_tsm [B, 1, T, A, A].
pub fn multires_residual_t<T: Real>(
    tape: &mut Tape<T>,
    x_tsm: Var,
    k: usize,
    cfg: &MultiResConfig,
) -> Result<Var> {
    multires_pair_t(tape, x_tsm, k, cfg).map(|(_, d)| d)
}

pub fn multires_residual<T: Real>(
    x_tsm: &Tensor<T>,
    k: usize,
    cfg: &MultiResConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x_tsm.clone());
    let out = multires_residual_t(&mut tape, xv, k, cfg)?;
    Ok(tape.value(out).clone())
}

/// Binary cosine mask: 1 at the locations whose similarity between
/// x_tilde_k and x_tsm strictly exceeds its per-sample mean.
///
/// The mask is a hard indicator, so it is treated as a constant by the tape.
pub fn cosine_mask<T: Real>(
    x_tilde_k: &Tensor<T>,
    x_tsm: &Tensor<T>,
    mode: CosineMode,
) -> Result<Tensor<T>> {
    if x_tilde_k.shape() != x_tsm.shape() {
        return Err(TensorError::ShapeMismatch {
            expected: x_tilde_k.shape().to_vec(),
            got: x_tsm.shape().to_vec(),
        });
    }
    let shape = x_tsm.shape();
    if shape.len() != 5 {
        return Err(TensorError::InvalidArg(format!(
            "cosine_mask expects [B, C, T, A, A], got {shape:?}"
        )));
    }
    let (b, c, t, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let mut mask = Tensor::zeros(shape);
    match mode {
        CosineMode::PerLocation => {
            // channel axis 1 (extent c); sigma has shape [B, T, A, A]
            let sigma = kernels::cosine_similarity_channels(x_tilde_k, x_tsm, 1)?;
            let per = t * h * w;
            for n in 0..b {
                let vals = &sigma.data()[n * per..(n + 1) * per];
                let mut mean = T::zero();
                for &v in vals {
                    mean += v;
                }
                mean /= T::from_f64(per as f64);
                for (i, &v) in vals.iter().enumerate() {
                    if v > mean {
                        for ch in 0..c {
                            mask.data_mut()[(n * c + ch) * per + i] = T::one();
                        }
                    }
                }
            }
        }
        CosineMode::PerFrame => {
            // one similarity per (b, t) over the whole C*A*A frame vector
            let frame = c * h * w;
            let eps = T::from_f64(kernels::EPS_NORM);
            for n in 0..b {
                let mut sims = Vec::with_capacity(t);
                for ti in 0..t {
                    let mut dot = T::zero();
                    let mut na = T::zero();
                    let mut nb = T::zero();
                    for ch in 0..c {
                        for s in 0..h * w {
                            let idx = ((n * c + ch) * t + ti) * h * w + s;
                            let (av, bv) = (x_tilde_k.data()[idx], x_tsm.data()[idx]);
                            dot += av * bv;
                            na += av * av;
                            nb += bv * bv;
                        }
                    }
                    let (na, nb) = (na.sqrt(), nb.sqrt());
                    sims.push(if na < eps || nb < eps {
                        T::zero()
                    } else {
                        dot / (na * nb)
                    });
                }
                let mut mean = T::zero();
                for &s in &sims {
                    mean += s;
                }
                mean /= T::from_f64(t as f64);
                for (ti, &s) in sims.iter().enumerate() {
                    if s > mean {
                        for ch in 0..c {
                            let base = ((n * c + ch) * t + ti) * h * w;
                            for i in 0..h * w {
                                mask.data_mut()[base + i] = T::one();
                            }
                        }
                    }
                }
            }
            let _ = frame;
        }
    }
    Ok(mask)
}

/// Masked, beta-weighted sum over scales: sum_k beta_k * (m_k .* delta_k).
pub fn contrast_aggregate_t<T: Real>(
    tape: &mut Tape<T>,
    deltas: &[Var],
    masks: &[Tensor<T>],
    betas: &[Var],
) -> Result<Var> {
    if deltas.len() != masks.len() || deltas.len() != betas.len() || deltas.is_empty() {
        return Err(TensorError::InvalidArg(format!(
            "scale list length mismatch: {} deltas, {} masks, {} betas",
            deltas.len(),
            masks.len(),
            betas.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for ((&d, m), &b) in deltas.iter().zip(masks).zip(betas) {
        let mv = tape.constant(m.clone());
        let masked = tape.mul(d, mv)?;
        let weighted = tape.scale_by(masked, b)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.unwrap())
}

/// Channel-concatenates [x_tsm, x_diff] and fuses them with a pointwise conv.
pub fn contrast_aware_fusion_t<T: Real>(
    tape: &mut Tape<T>,
    x_tsm: Var,
    x_diff: Var,
    vars: &TemporalFusionVars,
) -> Result<Var> {
    if tape.value(x_tsm).shape() != tape.value(x_diff).shape() {
        return Err(TensorError::ShapeMismatch {
            expected: tape.value(x_tsm).shape().to_vec(),
            got: tape.value(x_diff).shape().to_vec(),
        });
    }
    let cat = tape.concat(&[x_tsm, x_diff], 1)?;
    tape.pointwise_conv(cat, vars.fusion_weight, vars.fusion_bias)
}

/// Full temporal block on stacked per-frame features [B, T, 1, A, A]:
/// flatten to channel vectors, hybrid shift, conv fusion, K-scale contrast
/// with cosine masks, and the final contrast-aware fusion.
/// Output shape is [B, C_out, T, A, A].
pub fn temporal_block_forward_t<T: Real>(
    tape: &mut Tape<T>,
    stacked: Var,
    vars: &TemporalFusionVars,
    shift_cfg: &TemporalShiftConfig,
    multires_cfg: &MultiResConfig,
) -> Result<Var> {
    let shape = tape.value(stacked).shape().to_vec();
    if shape.len() != 5 || shape[2] != 1 {
        return Err(TensorError::InvalidArg(format!(
            "expected [B, T, 1, A, A], got {shape:?}"
        )));
    }
    let (batch, t_len, a) = (shape[0], shape[1], shape[3]);
    if a != shape[4] || a != multires_cfg.spatial_extent {
        return Err(TensorError::InvalidArg(format!(
            "frame extent mismatch: {shape:?} vs A = {}",
            multires_cfg.spatial_extent
        )));
    }
    if a < 8 {
        return Err(TensorError::InvalidArg(
            "temporal block needs A >= 8".into(),
        ));
    }
    multires_cfg.validate()?;
    let c = a * a;

    let flat = tape.reshape(stacked, &[batch, t_len, c])?;
    let x_bar = tape.permute(flat, &[0, 2, 1])?; // [B, C, T]
    let shifted = hybrid_temporal_shift_t(tape, x_bar, shift_cfg)?;
    let x_tsm = tsm_fuse_t(tape, x_bar, shifted, vars, a)?;

    let mut deltas = Vec::with_capacity(multires_cfg.num_scales);
    let mut masks = Vec::with_capacity(multires_cfg.num_scales);
    for k in 1..=multires_cfg.num_scales {
        let (x_tilde, delta) = multires_pair_t(tape, x_tsm, k, multires_cfg)?;
        let mask = cosine_mask(
            tape.value(x_tilde),
            tape.value(x_tsm),
            multires_cfg.cosine_mode,
        )?;
        deltas.push(delta);
        masks.push(mask);
    }
    let x_diff = contrast_aggregate_t(tape, &deltas, &masks, &vars.betas)?;
    contrast_aware_fusion_t(tape, x_tsm, x_diff, vars)
}

/// Pure-value form of [`temporal_block_forward_t`].
pub fn temporal_block_forward<T: Real>(
    stacked: &Tensor<T>,
    params: &TemporalFusionParams<T>,
    shift_cfg: &TemporalShiftConfig,
    multires_cfg: &MultiResConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(stacked.clone());
    let vars = params.bind(&mut tape);
    let out = temporal_block_forward_t(&mut tape, xv, &vars, shift_cfg, multires_cfg)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partition_sizes_follow_ratio_rule() {
        for (c, expect) in [
            (64, (8, 8, 8, 40)),
            (16, (2, 2, 2, 10)),
            (8, (1, 1, 1, 5)),
        ] {
            let cfg = TemporalShiftConfig::new(0.125, c).unwrap();
            assert_eq!(cfg.group_sizes(), expect);
        }
    }

    #[test]
    fn partition_rejects_zero_group() {
        assert!(TemporalShiftConfig::new(0.125, 4).is_err());
        assert!(TemporalShiftConfig::new(0.4, 64).is_err());
    }

    #[test]
    fn partition_slices_are_contiguous() {
        let cfg = TemporalShiftConfig::new(0.125, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::rand_uniform(&[2, 16, 3], -1.0, 1.0, &mut rng);
        let parts = channel_partition(&x, &cfg).unwrap();
        assert_eq!(parts.len(), 4);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        assert_eq!(sizes, vec![2, 2, 2, 10]);
        let total: usize = sizes.iter().sum();
        assert_eq!(total, 16);
        assert_eq!(parts[0].get(&[1, 1, 2]), x.get(&[1, 1, 2]));
        assert_eq!(parts[3].get(&[0, 9, 0]), x.get(&[0, 15, 0]));
    }

    fn channel_series(x: &Tensor<f64>, b: usize, c: usize) -> Vec<f64> {
        (0..x.shape()[2]).map(|t| x.get(&[b, c, t])).collect()
    }

    #[test]
    fn shift_moves_groups_as_specified() {
        // C = 8, rho = 0.125 -> groups (1, 1, 1, 5)
        let cfg = TemporalShiftConfig::new(0.125, 8).unwrap();
        let mut x = Tensor::<f64>::zeros(&[1, 8, 4]);
        for c in 0..8 {
            for t in 0..4 {
                x.set(&[0, c, t], (t + 1) as f64 + 100.0 * c as f64);
            }
        }
        let y = hybrid_temporal_shift(&x, &cfg).unwrap();
        // forward channel 0: [1,2,3,4] -> [4,1,2,3] (+ offset 0)
        assert_eq!(channel_series(&y, 0, 0), vec![4.0, 1.0, 2.0, 3.0]);
        // backward channel 1: [1,2,3,4] -> [2,3,4,1]
        let base = 100.0;
        assert_eq!(
            channel_series(&y, 0, 1),
            vec![base + 2.0, base + 3.0, base + 4.0, base + 1.0]
        );
        // bidirectional channel 2: -> [3,2,3,2]
        let base = 200.0;
        assert_eq!(
            channel_series(&y, 0, 2),
            vec![base + 3.0, base + 2.0, base + 3.0, base + 2.0]
        );
        // residual channels unchanged
        for c in 3..8 {
            assert_eq!(channel_series(&y, 0, c), channel_series(&x, 0, c));
        }
    }

    #[test]
    fn time_constant_input_is_fixed_point() {
        let cfg = TemporalShiftConfig::new(0.125, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let profile = Tensor::<f64>::rand_uniform(&[2, 16, 1], -1.0, 1.0, &mut rng);
        let mut x = Tensor::<f64>::zeros(&[2, 16, 5]);
        for b in 0..2 {
            for c in 0..16 {
                for t in 0..5 {
                    x.set(&[b, c, t], profile.get(&[b, c, 0]));
                }
            }
        }
        let y = hybrid_temporal_shift(&x, &cfg).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn shift_is_linear() {
        let cfg = TemporalShiftConfig::new(0.125, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::rand_uniform(&[1, 8, 4], -1.0, 1.0, &mut rng);
        let y = Tensor::<f64>::rand_uniform(&[1, 8, 4], -1.0, 1.0, &mut rng);
        let (a, b) = (1.7, -0.3);
        let combo = x.zip_map(&y, |xv, yv| a * xv + b * yv).unwrap();
        let lhs = hybrid_temporal_shift(&combo, &cfg).unwrap();
        let sx = hybrid_temporal_shift(&x, &cfg).unwrap();
        let sy = hybrid_temporal_shift(&y, &cfg).unwrap();
        let rhs = sx.zip_map(&sy, |xv, yv| a * xv + b * yv).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn shift_rejects_short_sequences() {
        let cfg = TemporalShiftConfig::new(0.125, 8).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 8, 1]);
        assert!(hybrid_temporal_shift(&x, &cfg).is_err());
    }

    #[test]
    fn tsm_fuse_zero_convs_is_residual_only() {
        let a = 4usize;
        let c = a * a;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = TemporalFusionParams::<f64>::init(c, 3, 1, &mut rng);
        params.pw_weight = Tensor::zeros(&[c, c]).with_grad();
        params.pw_bias = Tensor::zeros(&[c]).with_grad();
        let x_bar = Tensor::<f64>::rand_uniform(&[2, c, 3], -1.0, 1.0, &mut rng);
        let shift_cfg = TemporalShiftConfig::new(0.125, c).unwrap();
        let mut tape = Tape::no_grad();
        let xv = tape.leaf(x_bar.clone());
        let vars = params.bind(&mut tape);
        let sh = hybrid_temporal_shift_t(&mut tape, xv, &shift_cfg).unwrap();
        let out = tsm_fuse_t(&mut tape, xv, sh, &vars, a).unwrap();
        let out_t = tape.value(out);
        assert_eq!(out_t.shape(), &[2, 1, 3, a, a]);
        // out[b, 0, t, i, j] == x_bar[b, i*a+j, t]
        for b in 0..2 {
            for t in 0..3 {
                for i in 0..a {
                    for j in 0..a {
                        assert_eq!(
                            out_t.get(&[b, 0, t, i, j]),
                            x_bar.get(&[b, i * a + j, t])
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn scale_ladder_clamps_at_four() {
        let cfg = MultiResConfig {
            num_scales: 4,
            spatial_extent: 16,
            seq_len: 3,
            cosine_mode: CosineMode::PerLocation,
        };
        assert_eq!(cfg.scale_extent(1), 16);
        assert_eq!(cfg.scale_extent(2), 8);
        assert_eq!(cfg.scale_extent(3), 4);
        assert_eq!(cfg.scale_extent(4), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn multires_uniform_frames_have_zero_residual() {
        let cfg = MultiResConfig::new(3, 8, 2).unwrap();
        let x = Tensor::<f64>::full(&[1, 1, 2, 8, 8], 0.37);
        for k in 1..=3 {
            let d = multires_residual(&x, k, &cfg).unwrap();
            assert!(d.data().iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn multires_quadrant_example() {
        // A=4, k=1: pool is identity, roll by (2,2) swaps quadrants diagonally
        let cfg = MultiResConfig::new(1, 4, 1).unwrap();
        let mut x = Tensor::<f64>::zeros(&[1, 1, 1, 4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                let q = match (i < 2, j < 2) {
                    (true, true) => 1.0,
                    (true, false) => 2.0,
                    (false, true) => 3.0,
                    (false, false) => 4.0,
                };
                x.set(&[0, 0, 0, i, j], q);
            }
        }
        let d = multires_residual(&x, 1, &cfg).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = match (i < 2, j < 2) {
                    (true, true) => 3.0,  // 4 - 1
                    (true, false) => 1.0, // 3 - 2
                    (false, true) => -1.0,
                    (false, false) => -3.0,
                };
                assert_eq!(d.get(&[0, 0, 0, i, j]), expect);
            }
        }
    }

    #[test]
    fn multires_rejects_bad_scale_index() {
        let cfg = MultiResConfig::new(2, 8, 2).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 8, 8]);
        assert!(multires_residual(&x, 0, &cfg).is_err());
        assert!(multires_residual(&x, 3, &cfg).is_err());
    }

    #[test]
    fn odd_scale_extent_rejected() {
        assert!(MultiResConfig::new(2, 10, 2).is_err()); // a_2 = 5
        assert!(MultiResConfig::new(2, 12, 2).is_ok()); // a_2 = 6
    }

    #[test]
    fn cosine_mask_identical_inputs_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 2, 4, 4], 0.5, 1.5, &mut rng);
        let m = cosine_mask(&x, &x, CosineMode::PerLocation).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_mask_half_and_half() {
        // sigma = sign(a*b): +1 on the first half, -1 on the second
        let mut a = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 1.0);
        let b = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 1.0);
        for i in 4..8 {
            a.data_mut()[i] = -1.0;
        }
        let m = cosine_mask(&a, &b, CosineMode::PerLocation).unwrap();
        for i in 0..4 {
            assert_eq!(m.data()[i], 1.0);
        }
        for i in 4..8 {
            assert_eq!(m.data()[i], 0.0);
        }
    }

    #[test]
    fn cosine_mask_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::rand_uniform(&[2, 1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[2, 1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let m = cosine_mask(&a, &b, CosineMode::PerLocation).unwrap();
        // oracle: compute all sigma, then mean, then compare
        let per = 3 * 4 * 4;
        for n in 0..2 {
            let mut sigmas = Vec::new();
            for i in 0..per {
                let (av, bv) = (a.data()[n * per + i], b.data()[n * per + i]);
                let (na, nb) = (av.abs(), bv.abs());
                sigmas.push(if na < 1e-8 || nb < 1e-8 {
                    0.0
                } else {
                    av * bv / (na * nb)
                });
            }
            let mean: f64 = sigmas.iter().sum::<f64>() / per as f64;
            for i in 0..per {
                let expect = if sigmas[i] > mean { 1.0 } else { 0.0 };
                assert_eq!(m.data()[n * per + i], expect);
            }
            // recomputed mean agrees with the masking threshold used
            let recomputed: f64 = sigmas.iter().sum::<f64>() / per as f64;
            assert!((recomputed - mean).abs() < 1e-6);
        }
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn contrast_aggregate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = [1usize, 1, 2, 4, 4];
        let d1 = Tensor::<f64>::rand_uniform(&shape, -1.0, 1.0, &mut rng);

        // all masks zero -> zero output
        let mut tape = Tape::<f64>::no_grad();
        let dv = tape.leaf(d1.clone());
        let beta = tape.leaf(Tensor::scalar(1.0));
        let zero_mask = Tensor::zeros(&shape);
        let out = contrast_aggregate_t(&mut tape, &[dv], &[zero_mask], &[beta]).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

        // K=1, beta=2, full mask -> 2 * delta
        let mut tape = Tape::<f64>::no_grad();
        let dv = tape.leaf(d1.clone());
        let beta = tape.leaf(Tensor::scalar(2.0));
        let ones = Tensor::full(&shape, 1.0);
        let out = contrast_aggregate_t(&mut tape, &[dv], &[ones], &[beta]).unwrap();
        let expect = d1.map(|v| 2.0 * v);
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);

        // K=3 random matches term-wise accumulation
        let deltas: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng))
            .collect();
        let masks: Vec<Tensor<f64>> = (0..3)
            .map(|_| {
                Tensor::rand_uniform(&shape, 0.0, 1.0, &mut rng)
                    .map(|v| if v > 0.5 { 1.0 } else { 0.0 })
            })
            .collect();
        let betas = [0.5, 1.5, -0.7];
        let mut tape = Tape::<f64>::no_grad();
        let dvs: Vec<_> = deltas.iter().map(|d| tape.leaf(d.clone())).collect();
        let bvs: Vec<_> = betas.iter().map(|&b| tape.leaf(Tensor::scalar(b))).collect();
        let out = contrast_aggregate_t(&mut tape, &dvs, &masks, &bvs).unwrap();
        let mut expect = Tensor::<f64>::zeros(&shape);
        for k in 0..3 {
            for i in 0..expect.numel() {
                expect.data_mut()[i] += betas[k] * masks[k].data()[i] * deltas[k].data()[i];
            }
        }
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);

        // length mismatch
        let mut tape = Tape::<f64>::no_grad();
        let dv = tape.leaf(d1.clone());
        let beta = tape.leaf(Tensor::scalar(1.0));
        assert!(contrast_aggregate_t(&mut tape, &[dv], &[], &[beta]).is_err());
    }

    #[test]
    fn fusion_weight_selects_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = 4usize;
        let c = a * a;
        let mut params = TemporalFusionParams::<f64>::init(c, 3, 1, &mut rng);
        let x_tsm = Tensor::<f64>::rand_uniform(&[2, 1, 3, a, a], -1.0, 1.0, &mut rng);
        let x_diff = Tensor::<f64>::rand_uniform(&[2, 1, 3, a, a], -1.0, 1.0, &mut rng);

        params.fusion_weight = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap().with_grad();
        params.fusion_bias = Tensor::zeros(&[1]).with_grad();
        let mut tape = Tape::no_grad();
        let (xa, xb) = (tape.leaf(x_tsm.clone()), tape.leaf(x_diff.clone()));
        let vars = params.bind(&mut tape);
        let out = contrast_aware_fusion_t(&mut tape, xa, xb, &vars).unwrap();
        assert!(tape.value(out).max_abs_diff(&x_tsm) < 1e-15);

        params.fusion_weight = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap().with_grad();
        let mut tape = Tape::no_grad();
        let (xa, xb) = (tape.leaf(x_tsm.clone()), tape.leaf(x_diff.clone()));
        let vars = params.bind(&mut tape);
        let out = contrast_aware_fusion_t(&mut tape, xa, xb, &vars).unwrap();
        assert!(tape.value(out).max_abs_diff(&x_diff) < 1e-15);
    }

    fn block_cfgs(a: usize, t: usize) -> (TemporalShiftConfig, MultiResConfig) {
        (
            TemporalShiftConfig::new(0.125, a * a).unwrap(),
            MultiResConfig::new(3, a, t).unwrap(),
        )
    }

    #[test]
    fn block_output_shape_contract() {
        let (a, t) = (8usize, 3usize);
        let (shift_cfg, mr_cfg) = block_cfgs(a, t);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = TemporalFusionParams::<f64>::init(a * a, 3, 1, &mut rng);
        let x = Tensor::<f64>::rand_uniform(&[2, t, 1, a, a], -1.0, 1.0, &mut rng);
        let y = temporal_block_forward(&x, &params, &shift_cfg, &mr_cfg).unwrap();
        assert_eq!(y.shape(), &[2, 1, t, a, a]);
    }

    #[test]
    fn block_constant_input_reduces_to_conv_residual_path() {
        let (a, t) = (8usize, 3usize);
        let (shift_cfg, mr_cfg) = block_cfgs(a, t);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = TemporalFusionParams::<f64>::init(a * a, 3, 1, &mut rng);
        // The constant dominates the conv-path magnitude, so every sign
        // agrees, sigma is identically 1, and the strict mask comparison
        // zeroes X_diff.
        let x = Tensor::<f64>::full(&[1, t, 1, a, a], 5.0);
        let y = temporal_block_forward(&x, &params, &shift_cfg, &mr_cfg).unwrap();

        let mut tape = Tape::<f64>::no_grad();
        let xv = tape.leaf(x.clone());
        let vars = params.bind(&mut tape);
        let flat = tape.reshape(xv, &[1, t, a * a]).unwrap();
        let x_bar = tape.permute(flat, &[0, 2, 1]).unwrap();
        let shifted = hybrid_temporal_shift_t(&mut tape, x_bar, &shift_cfg).unwrap();
        // time-constant input: the shift must be the identity
        assert_eq!(tape.value(shifted).data(), tape.value(x_bar).data());
        let x_tsm = tsm_fuse_t(&mut tape, x_bar, shifted, &vars, a).unwrap();
        let zero = tape.leaf(Tensor::zeros(&[1, 1, t, a, a]));
        let manual = contrast_aware_fusion_t(&mut tape, x_tsm, zero, &vars).unwrap();
        assert!(y.max_abs_diff(tape.value(manual)) < 1e-9);
    }

    #[test]
    fn block_batch_permutation_equivariance() {
        let (a, t) = (8usize, 3usize);
        let (shift_cfg, mr_cfg) = block_cfgs(a, t);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = TemporalFusionParams::<f64>::init(a * a, 3, 1, &mut rng);
        let x = Tensor::<f64>::rand_uniform(&[3, t, 1, a, a], -1.0, 1.0, &mut rng);
        let y = temporal_block_forward(&x, &params, &shift_cfg, &mr_cfg).unwrap();

        let per = t * a * a;
        let order = [1usize, 2, 0];
        let mut xp = Tensor::<f64>::zeros(x.shape());
        for (dst, &src) in order.iter().enumerate() {
            xp.data_mut()[dst * per..(dst + 1) * per]
                .copy_from_slice(&x.data()[src * per..(src + 1) * per]);
        }
        let yp = temporal_block_forward(&xp, &params, &shift_cfg, &mr_cfg).unwrap();
        for (dst, &src) in order.iter().enumerate() {
            assert_eq!(
                &yp.data()[dst * per..(dst + 1) * per],
                &y.data()[src * per..(src + 1) * per]
            );
        }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let (a, t) = (8usize, 3usize);
        let (shift_cfg, mr_cfg) = block_cfgs(a, t);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = TemporalFusionParams::<f64>::init(a * a, 3, 1, &mut rng);
        let x = Tensor::<f64>::rand_uniform(&[1, t, 1, a, a], -1.0, 1.0, &mut rng);
        let f = move |tp: &mut Tape<f64>, v: Var| {
            let vars = params.bind(tp);
            let y = temporal_block_forward_t(tp, v, &vars, &shift_cfg, &mr_cfg)?;
            tp.mean_all(y)
        };
        let report = finite_diff_check(&f, &x, 1e-4).unwrap();
        assert!(
            report.passes(1e-4),
            "err {} (a {}, n {})",
            report.max_rel_err,
            report.worst_analytic,
            report.worst_numeric
        );
    }

    #[test]
    fn beta_gradients_match_finite_differences() {
        // check d loss / d beta_k through the masked aggregation
        let (a, t) = (8usize, 3usize);
        let (shift_cfg, mr_cfg) = block_cfgs(a, t);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = TemporalFusionParams::<f64>::init(a * a, 3, 1, &mut rng);
        let x = Tensor::<f64>::rand_uniform(&[1, t, 1, a, a], -1.0, 1.0, &mut rng);
        // loss as a function of the beta vector (3 coords)
        let f = move |tp: &mut Tape<f64>, betas_in: Var| {
            let mut p = params.clone();
            // neutralize the stored betas; rebuild vars with slices of betas_in
            let mut vars = p.bind(tp);
            let mut new_betas = Vec::new();
            for k in 0..3 {
                new_betas.push(tp.slice_axis(betas_in, 0, k, 1)?);
            }
            vars.betas = new_betas;
            let xv = tp.leaf(x.clone());
            let y = temporal_block_forward_t(tp, xv, &vars, &shift_cfg, &mr_cfg)?;
            p.visit_mut(&mut |_, _| {});
            tp.mean_all(y)
        };
        let betas0 = Tensor::<f64>::from_vec(&[3], vec![1.0, 0.8, 1.2]).unwrap();
        let report = finite_diff_check(&f, &betas0, 1e-4).unwrap();
        assert!(report.passes(1e-4), "err {}", report.max_rel_err);
    }
}
