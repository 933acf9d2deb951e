//! Wengert tape: reverse-mode differentiation by recording primitive ops.
//!
//! The tape owns every tensor produced while recording. Ops compute their
//! forward value through [`super::kernels`] and push a backward step that maps
//! the output adjoint to input adjoint contributions. [`Tape::backward`]
//! replays those steps in reverse op order and accumulates gradients into the
//! `grad` slot of every `requires_grad` tensor reachable from the loss.
//!
//! Gradients add across repeated `backward` calls; [`Tape::zero_grad`] resets
//! them. A tape is confined to one logical thread of execution.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{axis_split, Real, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

type BackwardFn<T> = Box<dyn Fn(&[Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct OpRecord<T: Real> {
    out: usize,
    inputs: Vec<usize>,
    backward: BackwardFn<T>,
}

/// Ordered record of executed primitive ops plus their values.
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Tensor<T>>,
    needs: Vec<bool>,
    records: Vec<OpRecord<T>>,
    grad_enabled: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_grad_enabled(true)
    }

    /// A tape that stores forward values but records no backward steps.
    pub fn no_grad() -> Self {
        Self::with_grad_enabled(false)
    }

    fn with_grad_enabled(grad_enabled: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            needs: Vec::new(),
            records: Vec::new(),
            grad_enabled,
        }
    }

    pub fn num_ops(&self) -> usize {
        self.records.len()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides whether
    /// backward will populate its gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = self.grad_enabled && t.requires_grad();
        self.push(t, needs)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false)
    }

    fn push(&mut self, t: Tensor<T>, needs: bool) -> Var {
        self.nodes.push(t);
        self.needs.push(needs);
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx]
    }

    /// Gradient of a tensor after `backward`, if one was populated.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        self.nodes[v.idx].grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.zero_grad();
        }
    }

    fn record(&mut self, out: usize, inputs: Vec<usize>, backward: BackwardFn<T>) {
        self.records.push(OpRecord {
            out,
            inputs,
            backward,
        });
    }

    /// Pushes the op output and, when any input tracks gradients, the
    /// backward step for it.
    fn emit(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<usize>,
        backward: impl Fn(&[Tensor<T>], &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let needs = self.grad_enabled && inputs.iter().any(|&i| self.needs[i]);
        let v = self.push(value, needs);
        if needs {
            self.record(v.idx, inputs, Box::new(backward));
        }
        v
    }

    /// Populates gradients of every `requires_grad` tensor reachable from
    /// `loss`, which must be a scalar produced on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_idx = self.check(loss)?;
        if self.nodes[loss_idx].numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[loss_idx].shape().to_vec(),
            ));
        }
        let mut adjoints: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adjoints[loss_idx] = Some(Tensor::full(self.nodes[loss_idx].shape(), T::one()));

        for rec in self.records.iter().rev() {
            let dy = match &adjoints[rec.out] {
                Some(d) => d.clone(),
                None => continue,
            };
            let wants: Vec<bool> = rec.inputs.iter().map(|&i| self.needs[i]).collect();
            let contribs = (rec.backward)(&self.nodes, &dy, &wants);
            debug_assert_eq!(contribs.len(), rec.inputs.len());
            for (&input, contrib) in rec.inputs.iter().zip(contribs) {
                if let Some(c) = contrib {
                    match &mut adjoints[input] {
                        Some(acc) => {
                            debug_assert_eq!(acc.shape(), c.shape());
                            for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                                *a += *b;
                            }
                        }
                        None => adjoints[input] = Some(c),
                    }
                }
            }
        }

        for (i, adj) in adjoints.into_iter().enumerate() {
            if let Some(adj) = adj {
                if self.nodes[i].requires_grad() {
                    self.nodes[i].accumulate_grad(adj.data());
                }
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ai].zip_map(&self.nodes[bi], |x, y| x + y)?;
        Ok(self.emit(out, vec![ai, bi], move |_, dy, wants| {
            vec![
                wants[0].then(|| dy.clone()),
                wants[1].then(|| dy.clone()),
            ]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ai].zip_map(&self.nodes[bi], |x, y| x - y)?;
        Ok(self.emit(out, vec![ai, bi], move |_, dy, wants| {
            vec![
                wants[0].then(|| dy.clone()),
                wants[1].then(|| dy.map(|v| -v)),
            ]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ai].zip_map(&self.nodes[bi], |x, y| x * y)?;
        Ok(self.emit(out, vec![ai, bi], move |nodes, dy, wants| {
            vec![
                wants[0].then(|| dy.zip_map(&nodes[bi], |d, y| d * y).unwrap()),
                wants[1].then(|| dy.zip_map(&nodes[ai], |d, x| d * x).unwrap()),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ai].zip_map(&self.nodes[bi], |x, y| x / y)?;
        Ok(self.emit(out, vec![ai, bi], move |nodes, dy, wants| {
            let da = wants[0].then(|| dy.zip_map(&nodes[bi], |d, y| d / y).unwrap());
            let db = wants[1].then(|| {
                let mut g = dy.zip_map(&nodes[ai], |d, x| d * x).unwrap();
                for (gi, &y) in g.data_mut().iter_mut().zip(nodes[bi].data()) {
                    *gi = -*gi / (y * y);
                }
                g
            });
            vec![da, db]
        }))
    }

    /// Elementwise max; ties route the gradient to the first argument.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ai].zip_map(&self.nodes[bi], |x, y| if x >= y { x } else { y })?;
        Ok(self.emit(out, vec![ai, bi], move |nodes, dy, wants| {
            let pick_a = |x: T, y: T| x >= y;
            let da = wants[0].then(|| {
                let mut g = dy.clone();
                for ((gi, &x), &y) in g
                    .data_mut()
                    .iter_mut()
                    .zip(nodes[ai].data())
                    .zip(nodes[bi].data())
                {
                    if !pick_a(x, y) {
                        *gi = T::zero();
                    }
                }
                g
            });
            let db = wants[1].then(|| {
                let mut g = dy.clone();
                for ((gi, &x), &y) in g
                    .data_mut()
                    .iter_mut()
                    .zip(nodes[ai].data())
                    .zip(nodes[bi].data())
                {
                    if pick_a(x, y) {
                        *gi = T::zero();
                    }
                }
                g
            });
            vec![da, db]
        }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let cf = T::from_f64(c);
        let out = self.nodes[xi].map(|v| v * cf);
        Ok(self.emit(out, vec![xi], move |_, dy, wants| {
            vec![wants[0].then(|| dy.map(|d| d * cf))]
        }))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let cf = T::from_f64(c);
        let out = self.nodes[xi].map(|v| v + cf);
        Ok(self.emit(out, vec![xi], move |_, dy, wants| {
            vec![wants[0].then(|| dy.clone())]
        }))
    }

    /// Multiplies every element by a single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.check(x)?, self.check(s)?);
        if self.nodes[si].numel() != 1 {
            return Err(TensorError::InvalidArg("scale_by expects scalar".into()));
        }
        let sv = self.nodes[si].data()[0];
        let out = self.nodes[xi].map(|v| v * sv);
        Ok(self.emit(out, vec![xi, si], move |nodes, dy, wants| {
            let sv = nodes[si].data()[0];
            let dx = wants[0].then(|| dy.map(|d| d * sv));
            let ds = wants[1].then(|| {
                let mut acc = T::zero();
                for (d, &x) in dy.data().iter().zip(nodes[xi].data()) {
                    acc += *d * x;
                }
                Tensor::scalar(acc)
            });
            vec![dx, ds]
        }))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].map(|v| v.exp());
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| {
                dy.zip_map(&nodes[xi], |d, v| d * v.exp()).unwrap()
            })]
        }))
    }

    /// |x|; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].map(|v| v.abs());
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| {
                dy.zip_map(&nodes[xi], |d, v| {
                    if v > T::zero() {
                        d
                    } else if v < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                })
                .unwrap()
            })]
        }))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].map(kernels::gelu);
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| {
                dy.zip_map(&nodes[xi], |d, v| d * kernels::gelu_prime(v))
                    .unwrap()
            })]
        }))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].map(kernels::softplus);
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| {
                dy.zip_map(&nodes[xi], |d, v| d * kernels::sigmoid(v))
                    .unwrap()
            })]
        }))
    }

    // ---- structure ----

    pub fn circular_roll(&mut self, x: Var, axis: usize, shift: i64) -> Result<Var> {
        let xi = self.check(x)?;
        let out = kernels::circular_roll(&self.nodes[xi], axis, shift)?;
        Ok(self.emit(out, vec![xi], move |_, dy, wants| {
            vec![wants[0].then(|| kernels::circular_roll(dy, axis, -shift).unwrap())]
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let out = self.nodes[xi].reshape(shape)?;
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| dy.reshape(nodes[xi].shape()).unwrap())]
        }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let out = kernels::permute(&self.nodes[xi], perm)?;
        let perm_owned = perm.to_vec();
        let mut inverse = vec![0usize; perm.len()];
        for (d, &p) in perm.iter().enumerate() {
            inverse[p] = d;
        }
        let _ = perm_owned;
        Ok(self.emit(out, vec![xi], move |_, dy, wants| {
            vec![wants[0].then(|| kernels::permute(dy, &inverse).unwrap())]
        }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let idxs: Vec<usize> = xs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = idxs.iter().map(|&i| &self.nodes[i]).collect();
        let out = kernels::concat(&refs, axis)?;
        let extents: Vec<usize> = idxs.iter().map(|&i| self.nodes[i].shape()[axis]).collect();
        Ok(self.emit(out, idxs, move |_, dy, wants| {
            let mut parts = Vec::with_capacity(extents.len());
            let mut offset = 0usize;
            for (k, &ext) in extents.iter().enumerate() {
                parts.push(
                    wants[k].then(|| kernels::slice_axis(dy, axis, offset, ext).unwrap()),
                );
                offset += ext;
            }
            parts
        }))
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = kernels::slice_axis(&self.nodes[xi], axis, start, len)?;
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| {
                let mut dx = Tensor::zeros(nodes[xi].shape());
                let (outer, extent, inner) = axis_split(nodes[xi].shape(), axis);
                let src = dy.data();
                let dst = dx.data_mut();
                for o in 0..outer {
                    let d = (o * extent + start) * inner;
                    let s = o * len * inner;
                    dst[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
                }
                dx
            })]
        }))
    }

    pub fn mean_axis_keepdim(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = kernels::mean_axis_keepdim(&self.nodes[xi], axis)?;
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| {
                let shape = nodes[xi].shape();
                let (outer, extent, inner) = axis_split(shape, axis);
                let nf = T::from_f64(extent as f64);
                let mut dx = Tensor::zeros(shape);
                let src = dy.data();
                let dst = dx.data_mut();
                for o in 0..outer {
                    for e in 0..extent {
                        for i in 0..inner {
                            dst[(o * extent + e) * inner + i] = src[o * inner + i] / nf;
                        }
                    }
                }
                dx
            })]
        }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let mut acc = T::zero();
        for &v in self.nodes[xi].data() {
            acc += v;
        }
        let out = Tensor::scalar(acc);
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| Tensor::full(nodes[xi].shape(), dy.data()[0]))]
        }))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let n = self.nodes[xi].numel();
        let nf = T::from_f64(n as f64);
        let mut acc = T::zero();
        for &v in self.nodes[xi].data() {
            acc += v;
        }
        let out = Tensor::scalar(acc / nf);
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| Tensor::full(nodes[xi].shape(), dy.data()[0] / nf))]
        }))
    }

    // ---- pooling / sampling ----

    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = kernels::adaptive_avg_pool2d(&self.nodes[xi], out_h, out_w)?;
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| {
                let shape = nodes[xi].shape();
                let rank = shape.len();
                let (h, w) = (shape[rank - 2], shape[rank - 1]);
                let lead = nodes[xi].numel() / (h * w);
                let mut dx = Tensor::zeros(shape);
                let src = dy.data();
                let dst = dx.data_mut();
                for l in 0..lead {
                    let in_base = l * h * w;
                    let out_base = l * out_h * out_w;
                    for i in 0..out_h {
                        let h0 = i * h / out_h;
                        let h1 = ((i + 1) * h + out_h - 1) / out_h;
                        for j in 0..out_w {
                            let w0 = j * w / out_w;
                            let w1 = ((j + 1) * w + out_w - 1) / out_w;
                            let n = T::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                            let g = src[out_base + i * out_w + j] / n;
                            for r in h0..h1 {
                                for c in w0..w1 {
                                    dst[in_base + r * w + c] += g;
                                }
                            }
                        }
                    }
                }
                dx
            })]
        }))
    }

    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let out = kernels::upsample_nearest(&self.nodes[xi], out_h, out_w)?;
        Ok(self.emit(out, vec![xi], move |nodes, dy, wants| {
            vec![wants[0].then(|| {
                let shape = nodes[xi].shape();
                let rank = shape.len();
                let (h, w) = (shape[rank - 2], shape[rank - 1]);
                let lead = nodes[xi].numel() / (h * w);
                let mut dx = Tensor::zeros(shape);
                let src = dy.data();
                let dst = dx.data_mut();
                for l in 0..lead {
                    let in_base = l * h * w;
                    let out_base = l * out_h * out_w;
                    for i in 0..out_h {
                        let si = i * h / out_h;
                        for j in 0..out_w {
                            let sj = j * w / out_w;
                            dst[in_base + si * w + sj] += src[out_base + i * out_w + j];
                        }
                    }
                }
                dx
            })]
        }))
    }

    // ---- convolutions / normalization ----

    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let out = kernels::pointwise_conv(&self.nodes[xi], &self.nodes[wi], &self.nodes[bi])?;
        Ok(self.emit(out, vec![xi, wi, bi], move |nodes, dy, wants| {
            let x = &nodes[xi];
            let w = &nodes[wi];
            let batch = x.shape()[0];
            let c_in = x.shape()[1];
            let c_out = w.shape()[0];
            let spatial = x.numel() / (batch * c_in);
            let xs = x.data();
            let ws = w.data();
            let dys = dy.data();

            let dx = wants[0].then(|| {
                let mut dx = Tensor::zeros(x.shape());
                let dst = dx.data_mut();
                for n in 0..batch {
                    for co in 0..c_out {
                        let dy_base = (n * c_out + co) * spatial;
                        for ci in 0..c_in {
                            let wv = ws[co * c_in + ci];
                            let x_base = (n * c_in + ci) * spatial;
                            for s in 0..spatial {
                                dst[x_base + s] += wv * dys[dy_base + s];
                            }
                        }
                    }
                }
                dx
            });
            let dw = wants[1].then(|| {
                let mut dw = Tensor::zeros(w.shape());
                let dst = dw.data_mut();
                for n in 0..batch {
                    for co in 0..c_out {
                        let dy_base = (n * c_out + co) * spatial;
                        for ci in 0..c_in {
                            let x_base = (n * c_in + ci) * spatial;
                            let mut acc = T::zero();
                            for s in 0..spatial {
                                acc += dys[dy_base + s] * xs[x_base + s];
                            }
                            dst[co * c_in + ci] += acc;
                        }
                    }
                }
                dw
            });
            let db = wants[2].then(|| {
                let mut db = Tensor::zeros(&[c_out]);
                let dst = db.data_mut();
                for n in 0..batch {
                    for co in 0..c_out {
                        let dy_base = (n * c_out + co) * spatial;
                        let mut acc = T::zero();
                        for s in 0..spatial {
                            acc += dys[dy_base + s];
                        }
                        dst[co] += acc;
                    }
                }
                db
            });
            vec![dx, dw, db]
        }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let out = kernels::conv2d(&self.nodes[xi], &self.nodes[wi], &self.nodes[bi], stride)?;
        Ok(self.emit(out, vec![xi, wi, bi], move |nodes, dy, wants| {
            let x = &nodes[xi];
            let w = &nodes[wi];
            let (batch, c_in, h, wd) =
                (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (c_out, _, kh, kw) =
                (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
            let (ph, pw) = (kh / 2, kw / 2);
            let xs = x.data();
            let ws = w.data();
            let dys = dy.data();

            let mut dx = wants[0].then(|| Tensor::zeros(x.shape()));
            let mut dw = wants[1].then(|| Tensor::zeros(w.shape()));
            if dx.is_some() || dw.is_some() {
                for n in 0..batch {
                    for co in 0..c_out {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let g = dys[((n * c_out + co) * oh + oi) * ow + oj];
                                for ci in 0..c_in {
                                    let x_base = (n * c_in + ci) * h * wd;
                                    let w_base = (co * c_in + ci) * kh * kw;
                                    for u in 0..kh {
                                        let ii = (oi * stride + u) as i64 - ph as i64;
                                        if ii < 0 || ii >= h as i64 {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let jj = (oj * stride + v) as i64 - pw as i64;
                                            if jj < 0 || jj >= wd as i64 {
                                                continue;
                                            }
                                            let x_idx =
                                                x_base + ii as usize * wd + jj as usize;
                                            if let Some(dx) = dx.as_mut() {
                                                dx.data_mut()[x_idx] +=
                                                    ws[w_base + u * kw + v] * g;
                                            }
                                            if let Some(dw) = dw.as_mut() {
                                                dw.data_mut()[w_base + u * kw + v] +=
                                                    xs[x_idx] * g;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let db = wants[2].then(|| {
                let mut db = Tensor::zeros(&[c_out]);
                let dst = db.data_mut();
                for n in 0..batch {
                    for co in 0..c_out {
                        let base = (n * c_out + co) * oh * ow;
                        let mut acc = T::zero();
                        for s in 0..oh * ow {
                            acc += dys[base + s];
                        }
                        dst[co] += acc;
                    }
                }
                db
            });
            vec![dx, dw, db]
        }))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xi, ki) = (self.check(x)?, self.check(k)?);
        let out = kernels::depthwise_conv2d(&self.nodes[xi], &self.nodes[ki])?;
        Ok(self.emit(out, vec![xi, ki], move |nodes, dy, wants| {
            let x = &nodes[xi];
            let k = &nodes[ki];
            let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (kh, kw) = (k.shape()[1], k.shape()[2]);
            let (ph, pw) = (kh as i64 / 2, kw as i64 / 2);
            let xs = x.data();
            let ks = k.data();
            let dys = dy.data();
            let mut dx = wants[0].then(|| Tensor::zeros(x.shape()));
            let mut dk = wants[1].then(|| Tensor::zeros(k.shape()));
            for n in 0..batch {
                for ci in 0..c {
                    let base = (n * c + ci) * h * w;
                    let k_base = ci * kh * kw;
                    for i in 0..h {
                        for j in 0..w {
                            let g = dys[base + i * w + j];
                            for u in 0..kh {
                                let ii = i as i64 + u as i64 - ph;
                                if ii < 0 || ii >= h as i64 {
                                    continue;
                                }
                                for v in 0..kw {
                                    let jj = j as i64 + v as i64 - pw;
                                    if jj < 0 || jj >= w as i64 {
                                        continue;
                                    }
                                    let x_idx = base + ii as usize * w + jj as usize;
                                    if let Some(dx) = dx.as_mut() {
                                        dx.data_mut()[x_idx] += ks[k_base + u * kw + v] * g;
                                    }
                                    if let Some(dk) = dk.as_mut() {
                                        dk.data_mut()[k_base + u * kw + v] += xs[x_idx] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![dx, dk]
        }))
    }

    pub fn depthwise_conv1d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xi, ki) = (self.check(x)?, self.check(k)?);
        let out = kernels::depthwise_conv1d(&self.nodes[xi], &self.nodes[ki])?;
        Ok(self.emit(out, vec![xi, ki], move |nodes, dy, wants| {
            let x = &nodes[xi];
            let k = &nodes[ki];
            let (batch, c, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let kl = k.shape()[1];
            let p = kl as i64 / 2;
            let xs = x.data();
            let ks = k.data();
            let dys = dy.data();
            let mut dx = wants[0].then(|| Tensor::zeros(x.shape()));
            let mut dk = wants[1].then(|| Tensor::zeros(k.shape()));
            for n in 0..batch {
                for ci in 0..c {
                    let base = (n * c + ci) * len;
                    let k_base = ci * kl;
                    for t in 0..len {
                        let g = dys[base + t];
                        for u in 0..kl {
                            let tt = t as i64 + u as i64 - p;
                            if tt < 0 || tt >= len as i64 {
                                continue;
                            }
                            let x_idx = base + tt as usize;
                            if let Some(dx) = dx.as_mut() {
                                dx.data_mut()[x_idx] += ks[k_base + u] * g;
                            }
                            if let Some(dk) = dk.as_mut() {
                                dk.data_mut()[k_base + u] += xs[x_idx] * g;
                            }
                        }
                    }
                }
            }
            vec![dx, dk]
        }))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (out, saved) = kernels::group_norm_with_saved(
            &self.nodes[xi],
            groups,
            &self.nodes[gi],
            &self.nodes[bi],
        )?;
        Ok(self.emit(out, vec![xi, gi, bi], move |nodes, dy, wants| {
            let x = &nodes[xi];
            let gamma = &nodes[gi];
            let batch = x.shape()[0];
            let c = x.shape()[1];
            let spatial = x.numel() / (batch * c);
            let cg = c / groups;
            let group_len = cg * spatial;
            let gs = gamma.data();
            let dys = dy.data();
            let xhat = &saved.xhat;
            let invstd = &saved.invstd;

            let dx = wants[0].then(|| {
                let mut dx = Tensor::zeros(x.shape());
                let dst = dx.data_mut();
                let nf = T::from_f64(group_len as f64);
                for n in 0..batch {
                    for g in 0..groups {
                        let start = (n * c + g * cg) * spatial;
                        // dxhat = dy * gamma(channel)
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for lc in 0..cg {
                            let ch = g * cg + lc;
                            for s in 0..spatial {
                                let idx = start + lc * spatial + s;
                                let dxh = dys[idx] * gs[ch];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xhat[idx];
                            }
                        }
                        let istd = invstd[n * groups + g];
                        for lc in 0..cg {
                            let ch = g * cg + lc;
                            for s in 0..spatial {
                                let idx = start + lc * spatial + s;
                                let dxh = dys[idx] * gs[ch];
                                dst[idx] = istd
                                    * (dxh
                                        - sum_dxhat / nf
                                        - xhat[idx] * (sum_dxhat_xhat / nf));
                            }
                        }
                    }
                }
                dx
            });
            let dgamma = wants[1].then(|| {
                let mut dg = Tensor::zeros(&[c]);
                let dst = dg.data_mut();
                for n in 0..batch {
                    for ch in 0..c {
                        let base = (n * c + ch) * spatial;
                        let mut acc = T::zero();
                        for s in 0..spatial {
                            acc += dys[base + s] * xhat[base + s];
                        }
                        dst[ch] += acc;
                    }
                }
                dg
            });
            let dbeta = wants[2].then(|| {
                let mut db = Tensor::zeros(&[c]);
                let dst = db.data_mut();
                for n in 0..batch {
                    for ch in 0..c {
                        let base = (n * c + ch) * spatial;
                        let mut acc = T::zero();
                        for s in 0..spatial {
                            acc += dys[base + s];
                        }
                        dst[ch] += acc;
                    }
                }
                db
            });
            vec![dx, dgamma, dbeta]
        }))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad(),
        );
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_sum_squares_is_x() {
        let mut tape = Tape::<f64>::new();
        let data = vec![1.0, -2.0, 0.5, 3.0];
        let x = tape.leaf(Tensor::from_vec(&[4], data.clone()).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), data.as_slice());
    }

    #[test]
    fn grads_accumulate_until_reset() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn empty_tape_yields_zero_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        let loss = tape.leaf(Tensor::scalar(5.0));
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf(Tensor::scalar(1.0));
        let _ = b.leaf(Tensor::scalar(2.0));
        assert!(matches!(b.backward(x), Err(TensorError::NotOnTape)));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        let y = tape.mul(x, x).unwrap();
        let _ = tape.sum_all(y).unwrap();
        assert_eq!(tape.num_ops(), 0);
    }

    #[test]
    fn branching_graph_accumulates_adjoints() {
        // loss = sum(x*x) + sum(x)  =>  dloss/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, -1.0]).unwrap().with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum_all(sq).unwrap();
        let s2 = tape.sum_all(x).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 5.0, -1.0]);
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::rand_uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let k = Tensor::<f32>::rand_uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
        let a = kernels::depthwise_conv2d(&x, &k).unwrap();
        let b = kernels::depthwise_conv2d(&x, &k).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
