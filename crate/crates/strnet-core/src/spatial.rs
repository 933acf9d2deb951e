//! Spatial feature aggregation: a dynamic axial graph over each frame.
//!
//! Every location of a [B, 1, H, W] feature map is a node; circular shifts
//! along the height or width axis propose neighbors, and soft edge weights
//! exp(-L1 contrast / temperature) keep edges implicitly — no hard threshold
//! and no k-NN search. Weighted shift residuals are aggregated per axis over
//! a set of strides, the two axes are combined by an elementwise max, and a
//! residual transformation (pointwise conv + group norm + skip) closes each
//! layer.

use rand::Rng;

use crate::tensor::tape::{Tape, Var};
use crate::tensor::{kernels, Real, Result, Tensor, TensorError};

/// Shift axis of the axial graph for a [B, 1, H, W] map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftAxis {
    Height,
    Width,
}

impl ShiftAxis {
    fn dim(self) -> usize {
        match self {
            ShiftAxis::Height => 2,
            ShiftAxis::Width => 3,
        }
    }
}

/// Configuration of the axial graph aggregation.
#[derive(Debug, Clone)]
pub struct AxialGraphConfig {
    /// Shift strides per layer, largest first.
    pub strides: Vec<usize>,
    /// Temperature of the soft edge weights.
    pub temperature: f64,
    /// Denominator guard of the weighted aggregation.
    pub epsilon: f64,
    /// How many aggregation layers are stacked.
    pub num_layers: usize,
    /// Select the axis residual by magnitude instead of signed value.
    pub magnitude_max: bool,
}

impl Default for AxialGraphConfig {
    fn default() -> Self {
        AxialGraphConfig {
            strides: vec![8, 4, 2],
            temperature: 0.1,
            epsilon: 1e-6,
            num_layers: 2,
            magnitude_max: false,
        }
    }
}

impl AxialGraphConfig {
    /// Validates the configuration against the feature extent `a`.
    pub fn validate(&self, a: usize) -> Result<()> {
        if self.strides.is_empty() {
            return Err(TensorError::InvalidArg("empty stride list".into()));
        }
        if self.temperature <= 0.0 || self.epsilon <= 0.0 {
            return Err(TensorError::InvalidArg(
                "temperature and epsilon must be positive".into(),
            ));
        }
        if self.num_layers == 0 {
            return Err(TensorError::InvalidArg("num_layers must be >= 1".into()));
        }
        for &s in &self.strides {
            if s == 0 || s >= a {
                return Err(TensorError::InvalidArg(format!(
                    "stride {s} invalid for extent {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Learnable parameters of one aggregation layer.
#[derive(Debug, Clone)]
pub struct SpatialLayerParams<T: Real> {
    /// Depthwise 3x3 kernel of the positional-encoding offset map.
    pub pos_enc_kernel: Tensor<T>,
    /// Pointwise conv of the residual transformation.
    pub transform_weight: Tensor<T>,
    pub transform_bias: Tensor<T>,
    /// Group-norm affine (single channel, one group).
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
}

/// Parameters of the stacked spatial block.
#[derive(Debug, Clone)]
pub struct SpatialBlockParams<T: Real> {
    pub layers: Vec<SpatialLayerParams<T>>,
}

impl<T: Real> SpatialBlockParams<T> {
    /// Fan-in scaled uniform kernels; gamma 1, beta 0.
    pub fn init<R: Rng + ?Sized>(cfg: &AxialGraphConfig, rng: &mut R) -> Self {
        let layers = (0..cfg.num_layers)
            .map(|_| {
                let kb = T::from_f64(1.0 / 3.0); // 3x3 depthwise: fan-in 9
                SpatialLayerParams {
                    pos_enc_kernel: Tensor::rand_uniform(&[1, 3, 3], -kb, kb, rng).with_grad(),
                    transform_weight: Tensor::rand_uniform(
                        &[1, 1],
                        T::from_f64(-1.0),
                        T::from_f64(1.0),
                        rng,
                    )
                    .with_grad(),
                    transform_bias: Tensor::zeros(&[1]).with_grad(),
                    norm_gamma: Tensor::full(&[1], T::one()).with_grad(),
                    norm_beta: Tensor::zeros(&[1]).with_grad(),
                }
            })
            .collect();
        SpatialBlockParams { layers }
    }

    /// Deterministic parameter count for this configuration.
    pub fn param_count(cfg: &AxialGraphConfig) -> usize {
        cfg.num_layers * (9 + 1 + 1 + 1 + 1)
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("spatial.{i}.pos_enc_kernel"), &l.pos_enc_kernel);
            f(format!("spatial.{i}.transform_weight"), &l.transform_weight);
            f(format!("spatial.{i}.transform_bias"), &l.transform_bias);
            f(format!("spatial.{i}.norm_gamma"), &l.norm_gamma);
            f(format!("spatial.{i}.norm_beta"), &l.norm_beta);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("spatial.{i}.pos_enc_kernel"), &mut l.pos_enc_kernel);
            f(format!("spatial.{i}.transform_weight"), &mut l.transform_weight);
            f(format!("spatial.{i}.transform_bias"), &mut l.transform_bias);
            f(format!("spatial.{i}.norm_gamma"), &mut l.norm_gamma);
            f(format!("spatial.{i}.norm_beta"), &mut l.norm_beta);
        }
    }
}

/// One layer's parameters registered on a tape.
#[derive(Clone, Copy)]
pub struct SpatialLayerVars {
    pub pos_enc_kernel: Var,
    pub transform_weight: Var,
    pub transform_bias: Var,
    pub norm_gamma: Var,
    pub norm_beta: Var,
}

pub struct SpatialBlockVars {
    pub layers: Vec<SpatialLayerVars>,
}

impl<T: Real> SpatialBlockParams<T> {
    pub fn bind(&self, tape: &mut Tape<T>) -> SpatialBlockVars {
        SpatialBlockVars {
            layers: self
                .layers
                .iter()
                .map(|l| SpatialLayerVars {
                    pos_enc_kernel: tape.leaf(l.pos_enc_kernel.clone()),
                    transform_weight: tape.leaf(l.transform_weight.clone()),
                    transform_bias: tape.leaf(l.transform_bias.clone()),
                    norm_gamma: tape.leaf(l.norm_gamma.clone()),
                    norm_beta: tape.leaf(l.norm_beta.clone()),
                })
                .collect(),
        }
    }
}

fn check_single_channel<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.rank() != 4 || x.shape()[1] != 1 {
        return Err(TensorError::InvalidArg(format!(
            "spatial ops expect [B, 1, H, W], got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Shift residual and soft edge weight for one stride along one axis:
/// residual = R(x, s) - x, weight = exp(-|residual| / temperature).
///
/// The stride must be strictly smaller than the extent of the shifted axis.
pub fn axial_contrast_weights_t<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    stride: usize,
    axis: ShiftAxis,
    temperature: f64,
) -> Result<(Var, Var)> {
    check_single_channel(tape.value(x))?;
    let extent = tape.value(x).shape()[axis.dim()];
    if stride == 0 || stride >= extent {
        return Err(TensorError::InvalidArg(format!(
            "stride {stride} out of range for extent {extent}"
        )));
    }
    axial_pair(tape, x, stride, axis, temperature)
}

/// The residual/weight pair with the stride taken modulo the axis extent
/// (a full-period shift degenerates to residual 0, weight 1).
fn axial_pair<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    stride: usize,
    axis: ShiftAxis,
    temperature: f64,
) -> Result<(Var, Var)> {
    let rolled = tape.circular_roll(x, axis.dim(), stride as i64)?;
    let residual = tape.sub(rolled, x)?;
    let contrast = tape.abs(residual)?;
    let scaled = tape.scale(contrast, -1.0 / temperature)?;
    let weight = tape.exp(scaled)?;
    Ok((residual, weight))
}

/// Pure-value form of [`axial_contrast_weights_t`].
pub fn axial_contrast_weights<T: Real>(
    x: &Tensor<T>,
    stride: usize,
    axis: ShiftAxis,
    temperature: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x.clone());
    let (r, w) = axial_contrast_weights_t(&mut tape, xv, stride, axis, temperature)?;
    Ok((tape.value(r).clone(), tape.value(w).clone()))
}

/// Positional encoding: x + depthwise 3x3 offset map.
pub fn positional_encoding_t<T: Real>(tape: &mut Tape<T>, x: Var, kernel: Var) -> Result<Var> {
    let offsets = tape.depthwise_conv2d(x, kernel)?;
    tape.add(x, offsets)
}

pub fn positional_encoding<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x.clone());
    let kv = tape.leaf(kernel.clone());
    let out = positional_encoding_t(&mut tape, xv, kv)?;
    Ok(tape.value(out).clone())
}

/// Weighted multi-stride aggregation per axis, combined across axes:
///
/// delta_axis = sum_s w_s * (R(x, s) - x) / (sum_s w_s + epsilon),
/// delta      = max(delta_height, delta_width) elementwise.
///
/// Strides wrap modulo each axis extent, so a stride that equals the extent
/// contributes a zero residual with weight one.
pub fn directional_aggregate_t<T: Real>(
    tape: &mut Tape<T>,
    x_tilde: Var,
    cfg: &AxialGraphConfig,
) -> Result<Var> {
    check_single_channel(tape.value(x_tilde))?;
    if cfg.strides.is_empty() {
        return Err(TensorError::InvalidArg("empty stride list".into()));
    }
    let mut per_axis = Vec::with_capacity(2);
    for axis in [ShiftAxis::Height, ShiftAxis::Width] {
        let mut num: Option<Var> = None;
        let mut den: Option<Var> = None;
        for &s in &cfg.strides {
            let (residual, weight) = axial_pair(tape, x_tilde, s, axis, cfg.temperature)?;
            let term = tape.mul(weight, residual)?;
            num = Some(match num {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
            den = Some(match den {
                Some(acc) => tape.add(acc, weight)?,
                None => weight,
            });
        }
        let den = tape.add_scalar(den.unwrap(), cfg.epsilon)?;
        per_axis.push(tape.div(num.unwrap(), den)?);
    }
    let (h, w) = (per_axis[0], per_axis[1]);
    if cfg.magnitude_max {
        // Hard selection by |delta|; the mask is a constant of the forward values.
        let pick_h = tape
            .value(h)
            .zip_map(tape.value(w), |a, b| {
                if a.abs() >= b.abs() {
                    T::one()
                } else {
                    T::zero()
                }
            })?;
        let inv = pick_h.map(|m| T::one() - m);
        let mh = tape.constant(pick_h);
        let mw = tape.constant(inv);
        let th = tape.mul(h, mh)?;
        let tw = tape.mul(w, mw)?;
        tape.add(th, tw)
    } else {
        tape.max_elem(h, w)
    }
}

pub fn directional_aggregate<T: Real>(
    x_tilde: &Tensor<T>,
    cfg: &AxialGraphConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x_tilde.clone());
    let out = directional_aggregate_t(&mut tape, xv, cfg)?;
    Ok(tape.value(out).clone())
}

/// One full aggregation layer: X_hat = T(A(P(X)) + X_tilde) where T is a
/// pointwise conv, group norm, and a residual connection back to X.
fn spatial_layer_t<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &SpatialLayerVars,
    cfg: &AxialGraphConfig,
) -> Result<Var> {
    let x_tilde = positional_encoding_t(tape, x, vars.pos_enc_kernel)?;
    let delta = directional_aggregate_t(tape, x_tilde, cfg)?;
    let summed = tape.add(delta, x_tilde)?;
    let projected = tape.pointwise_conv(summed, vars.transform_weight, vars.transform_bias)?;
    let normed = tape.group_norm(projected, 1, vars.norm_gamma, vars.norm_beta)?;
    tape.add(normed, x)
}

/// The stacked spatial block; each layer feeds the next. Shape-preserving.
pub fn spatial_block_forward_t<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &SpatialBlockVars,
    cfg: &AxialGraphConfig,
) -> Result<Var> {
    let mut cur = x;
    for layer in &vars.layers {
        cur = spatial_layer_t(tape, cur, layer, cfg)?;
    }
    Ok(cur)
}

pub fn spatial_block_forward<T: Real>(
    x: &Tensor<T>,
    params: &SpatialBlockParams<T>,
    cfg: &AxialGraphConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x.clone());
    let vars = params.bind(&mut tape);
    let out = spatial_block_forward_t(&mut tape, xv, &vars, cfg)?;
    Ok(tape.value(out).clone())
}
