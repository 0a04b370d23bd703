//! Forward primitives and their backward rules.
//!
//! Shapes are validated up front; values are computed eagerly and cached on
//! the output node. Backward rules accumulate into input grad slots.

use super::{DiffError, Tensor};

pub(crate) enum Op {
    Matmul {
        a: Tensor,
        b: Tensor,
    },
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Tensor,
        /// Input flat index chosen per output element (first maximal wins).
        argmax: Vec<usize>,
    },
    Relu {
        input: Tensor,
    },
    Sigmoid {
        input: Tensor,
    },
    /// Softmax over the last axis (rows of a matrix, or a whole vector).
    Softmax {
        input: Tensor,
    },
    Ln {
        input: Tensor,
    },
    Clamp {
        input: Tensor,
        lo: f64,
        hi: f64,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Sub {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        input: Tensor,
        factor: f64,
    },
    AddScalar {
        input: Tensor,
    },
    Concat {
        inputs: Vec<Tensor>,
        axis: usize,
    },
    /// Sum of a matrix along one axis, producing a vector.
    SumAxis {
        input: Tensor,
        axis: usize,
    },
    SumAll {
        input: Tensor,
    },
    Mean {
        input: Tensor,
    },
    Reshape {
        input: Tensor,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Tensor> {
        match self {
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![a.clone(), b.clone()]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![input.clone(), weight.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Op::MaxPool2d { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Softmax { input }
            | Op::Ln { input }
            | Op::Clamp { input, .. }
            | Op::Scale { input, .. }
            | Op::AddScalar { input }
            | Op::SumAxis { input, .. }
            | Op::SumAll { input }
            | Op::Mean { input }
            | Op::Reshape { input } => vec![input.clone()],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }

    pub(crate) fn backward(&self, out: &Tensor, grad: &[f64]) {
        match self {
            Op::Matmul { a, b } => backward_matmul(a, b, grad),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => backward_conv2d(input, weight, bias.as_ref(), *stride, *padding, out, grad),
            Op::MaxPool2d { input, argmax, .. } => {
                if input.inner.needs_grad {
                    let mut dx = vec![0.0; input.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += grad[o];
                    }
                    input.accumulate_grad(&dx);
                }
            }
            Op::Relu { input } => {
                if input.inner.needs_grad {
                    let x = input.values();
                    let dx: Vec<f64> = x
                        .iter()
                        .zip(grad)
                        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    drop(x);
                    input.accumulate_grad(&dx);
                }
            }
            Op::Sigmoid { input } => {
                if input.inner.needs_grad {
                    let y = out.values();
                    let dx: Vec<f64> = y.iter().zip(grad).map(|(&yi, &gi)| gi * yi * (1.0 - yi)).collect();
                    drop(y);
                    input.accumulate_grad(&dx);
                }
            }
            Op::Softmax { input } => {
                if input.inner.needs_grad {
                    let y = out.values();
                    let cols = *out.shape().last().unwrap();
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let row = &y[r * cols..(r + 1) * cols];
                        let grow = &grad[r * cols..(r + 1) * cols];
                        let dot: f64 = row.iter().zip(grow).map(|(&yi, &gi)| yi * gi).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = row[c] * (grow[c] - dot);
                        }
                    }
                    drop(y);
                    input.accumulate_grad(&dx);
                }
            }
            Op::Ln { input } => {
                if input.inner.needs_grad {
                    let x = input.values();
                    let dx: Vec<f64> = x.iter().zip(grad).map(|(&xi, &gi)| gi / xi).collect();
                    drop(x);
                    input.accumulate_grad(&dx);
                }
            }
            Op::Clamp { input, lo, hi } => {
                if input.inner.needs_grad {
                    let x = input.values();
                    let dx: Vec<f64> = x
                        .iter()
                        .zip(grad)
                        .map(|(&xi, &gi)| if xi > *lo && xi < *hi { gi } else { 0.0 })
                        .collect();
                    drop(x);
                    input.accumulate_grad(&dx);
                }
            }
            Op::Add { a, b } => {
                if a.inner.needs_grad {
                    a.accumulate_grad(grad);
                }
                if b.inner.needs_grad {
                    b.accumulate_grad(grad);
                }
            }
            Op::Sub { a, b } => {
                if a.inner.needs_grad {
                    a.accumulate_grad(grad);
                }
                if b.inner.needs_grad {
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    b.accumulate_grad(&neg);
                }
            }
            Op::Mul { a, b } => {
                if a.inner.needs_grad {
                    let bv = b.values();
                    let dx: Vec<f64> = bv.iter().zip(grad).map(|(&bi, &gi)| bi * gi).collect();
                    drop(bv);
                    a.accumulate_grad(&dx);
                }
                if b.inner.needs_grad {
                    let av = a.values();
                    let dx: Vec<f64> = av.iter().zip(grad).map(|(&ai, &gi)| ai * gi).collect();
                    drop(av);
                    b.accumulate_grad(&dx);
                }
            }
            Op::Scale { input, factor } => {
                if input.inner.needs_grad {
                    let dx: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                    input.accumulate_grad(&dx);
                }
            }
            Op::AddScalar { input } | Op::Reshape { input } => {
                if input.inner.needs_grad {
                    input.accumulate_grad(grad);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total_axis = shape[*axis];
                let mut offset = 0;
                for t in inputs {
                    let extent = t.shape()[*axis];
                    if t.inner.needs_grad {
                        let mut dx = vec![0.0; t.numel()];
                        for o in 0..outer {
                            for e in 0..extent {
                                let src = (o * total_axis + offset + e) * inner;
                                let dst = (o * extent + e) * inner;
                                dx[dst..dst + inner].copy_from_slice(&grad[src..src + inner]);
                            }
                        }
                        t.accumulate_grad(&dx);
                    }
                    offset += extent;
                }
            }
            Op::SumAxis { input, axis } => {
                if input.inner.needs_grad {
                    let (rows, cols) = (input.shape()[0], input.shape()[1]);
                    let mut dx = vec![0.0; rows * cols];
                    match axis {
                        0 => {
                            for r in 0..rows {
                                dx[r * cols..(r + 1) * cols].copy_from_slice(grad);
                            }
                        }
                        _ => {
                            for r in 0..rows {
                                for c in 0..cols {
                                    dx[r * cols + c] = grad[r];
                                }
                            }
                        }
                    }
                    input.accumulate_grad(&dx);
                }
            }
            Op::SumAll { input } => {
                if input.inner.needs_grad {
                    let dx = vec![grad[0]; input.numel()];
                    input.accumulate_grad(&dx);
                }
            }
            Op::Mean { input } => {
                if input.inner.needs_grad {
                    let n = input.numel() as f64;
                    let dx = vec![grad[0] / n; input.numel()];
                    input.accumulate_grad(&dx);
                }
            }
        }
    }
}

fn backward_matmul(a: &Tensor, b: &Tensor, grad: &[f64]) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    if a.inner.needs_grad {
        // dA[i][l] = sum_j grad[i][j] * B[l][j]
        let bv = b.values();
        let mut da = vec![0.0; m * k];
        for i in 0..m {
            let grow = &grad[i * n..(i + 1) * n];
            let darow = &mut da[i * k..(i + 1) * k];
            for (l, dal) in darow.iter_mut().enumerate() {
                let brow = &bv[l * n..(l + 1) * n];
                let mut acc = 0.0;
                for (g, bb) in grow.iter().zip(brow) {
                    acc += g * bb;
                }
                *dal += acc;
            }
        }
        drop(bv);
        a.accumulate_grad(&da);
    }
    if b.inner.needs_grad {
        // dB[l][j] = sum_i A[i][l] * grad[i][j]
        let av = a.values();
        let mut db = vec![0.0; k * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let grow = &grad[i * n..(i + 1) * n];
            for (l, &ail) in arow.iter().enumerate() {
                if ail == 0.0 {
                    continue;
                }
                let dbrow = &mut db[l * n..(l + 1) * n];
                for (d, g) in dbrow.iter_mut().zip(grow) {
                    *d += ail * g;
                }
            }
        }
        drop(av);
        b.accumulate_grad(&db);
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    out: &Tensor,
    grad: &[f64],
) {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let (oh, ow) = (out.shape()[1], out.shape()[2]);

    let need_dx = input.inner.needs_grad;
    let need_dw = weight.inner.needs_grad;
    if need_dx || need_dw {
        let xv = input.values();
        let wv = weight.values();
        let mut dx = vec![0.0; cin * h * w];
        let mut dw = vec![0.0; cout * cin * kh * kw];
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad[(oc * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let base_y = oy * stride;
                    let base_x = ox * stride;
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = base_y + ky;
                            if iy < padding || iy >= h + padding {
                                continue;
                            }
                            let iy = iy - padding;
                            for kx in 0..kw {
                                let ix = base_x + kx;
                                if ix < padding || ix >= w + padding {
                                    continue;
                                }
                                let ix = ix - padding;
                                let xi = (ic * h + iy) * w + ix;
                                let wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                if need_dx {
                                    dx[xi] += g * wv[wi];
                                }
                                if need_dw {
                                    dw[wi] += g * xv[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(xv);
        drop(wv);
        if need_dx {
            input.accumulate_grad(&dx);
        }
        if need_dw {
            weight.accumulate_grad(&dw);
        }
    }
    if let Some(b) = bias {
        if b.inner.needs_grad {
            let mut db = vec![0.0; cout];
            for (oc, dbo) in db.iter_mut().enumerate() {
                *dbo = grad[oc * oh * ow..(oc + 1) * oh * ow].iter().sum();
            }
            b.accumulate_grad(&db);
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

impl Tensor {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(shape_err(
                "matmul",
                format!("expects rank-2 inputs, got {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let a = self.values();
        let b = other.values();
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (l, &al) in arow.iter().enumerate() {
                if al == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += al * bv;
                }
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![m, n],
            c,
            Op::Matmul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// 2-D convolution of a (C_in, H, W) input with an
    /// (C_out, C_in, KH, KW) kernel, zero padding, square stride.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, DiffError> {
        if self.shape().len() != 3 || weight.shape().len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!(
                    "expects (C,H,W) input and (O,C,KH,KW) weight, got {:?} / {:?}",
                    self.shape(),
                    weight.shape()
                ),
            ));
        }
        let (cin, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (cout, wcin, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if cin != wcin {
            return Err(shape_err(
                "conv2d",
                format!("input channels {cin} != weight channels {wcin}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?} != ({cout},)", b.shape()),
                ));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let x = self.values();
        let wt = weight.values();
        let mut out = vec![0.0; cout * oh * ow];
        for oc in 0..cout {
            let bias_v = bias.map(|b| b.values()[oc]).unwrap_or(0.0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias_v;
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < padding || iy >= h + padding {
                                continue;
                            }
                            let iy = iy - padding;
                            let xrow = &x[(ic * h + iy) * w..(ic * h + iy + 1) * w];
                            let wrow = &wt[((oc * cin + ic) * kh + ky) * kw
                                ..((oc * cin + ic) * kh + ky + 1) * kw];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let ix = ox * stride + kx;
                                if ix < padding || ix >= w + padding {
                                    continue;
                                }
                                acc += xrow[ix - padding] * wv;
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        drop(x);
        drop(wt);
        Ok(Tensor::from_op(
            vec![cout, oh, ow],
            out,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                padding,
            },
        ))
    }

    /// Non-overlapping max pooling over (C, H, W); ties break toward the
    /// first (lowest-index) maximal element.
    pub fn max_pool2d(&self, kernel: usize) -> Result<Tensor, DiffError> {
        if self.shape().len() != 3 {
            return Err(shape_err(
                "max_pool2d",
                format!("expects (C,H,W) input, got {:?}", self.shape()),
            ));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if kernel == 0 || h < kernel || w < kernel {
            return Err(shape_err(
                "max_pool2d",
                format!("kernel {kernel} does not fit input {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / kernel, w / kernel);
        let x = self.values();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = (ch * h + oy * kernel + ky) * w + ox * kernel + kx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            out,
            Op::MaxPool2d {
                input: self.clone(),
                argmax,
            },
        ))
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Relu {
                input: self.clone(),
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .values()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Sigmoid {
                input: self.clone(),
            },
        )
    }

    /// Softmax over the last axis of a vector or matrix.
    pub fn softmax(&self) -> Result<Tensor, DiffError> {
        if self.shape().is_empty() || self.shape().len() > 2 {
            return Err(shape_err(
                "softmax",
                format!("expects rank 1 or 2, got {:?}", self.shape()),
            ));
        }
        let cols = *self.shape().last().unwrap();
        let x = self.values();
        let mut out = vec![0.0; x.len()];
        for r in 0..x.len() / cols {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= sum;
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Softmax {
                input: self.clone(),
            },
        ))
    }

    /// Natural logarithm, elementwise.
    pub fn ln(&self) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|&x| x.ln()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Ln {
                input: self.clone(),
            },
        )
    }

    /// Clamp into [lo, hi]; gradient passes through strictly inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|&x| x.clamp(lo, hi)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Clamp {
                input: self.clone(),
                lo,
                hi,
            },
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        self.zip_elementwise(other, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        self.zip_elementwise(other, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, DiffError> {
        self.zip_elementwise(other, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    fn zip_elementwise(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Tensor, Tensor) -> Op,
    ) -> Result<Tensor, DiffError> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let out: Vec<f64> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            make(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|&x| x * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Scale {
                input: self.clone(),
                factor,
            },
        )
    }

    pub fn add_scalar(&self, offset: f64) -> Tensor {
        let out: Vec<f64> = self.values().iter().map(|&x| x + offset).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::AddScalar {
                input: self.clone(),
            },
        )
    }

    /// Concatenate tensors of equal rank along `axis`; all other extents must
    /// agree.
    pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor, DiffError> {
        if inputs.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let rank = inputs[0].shape().len();
        if axis >= rank {
            return Err(shape_err(
                "concat",
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        let mut axis_total = 0;
        for t in inputs {
            if t.shape().len() != rank {
                return Err(shape_err("concat", "inputs differ in rank".into()));
            }
            for (d, (&a, &b)) in inputs[0].shape().iter().zip(t.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(shape_err(
                        "concat",
                        format!("extent mismatch at axis {d}: {:?} vs {:?}", inputs[0].shape(), t.shape()),
                    ));
                }
            }
            axis_total += t.shape()[axis];
        }
        let mut shape = inputs[0].shape().to_vec();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for t in inputs {
            let extent = t.shape()[axis];
            let data = t.values();
            for o in 0..outer {
                for e in 0..extent {
                    let dst = (o * axis_total + offset + e) * inner;
                    let src = (o * extent + e) * inner;
                    out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
                }
            }
            offset += extent;
        }
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Sum a matrix along `axis` (0: over rows, 1: over columns).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, DiffError> {
        if self.shape().len() != 2 || axis > 1 {
            return Err(shape_err(
                "sum_axis",
                format!("expects rank-2 input and axis 0/1, got {:?} axis {axis}", self.shape()),
            ));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let x = self.values();
        let (shape, out) = match axis {
            0 => {
                let mut acc = vec![0.0; cols];
                for r in 0..rows {
                    for (a, &v) in acc.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
                        *a += v;
                    }
                }
                (vec![cols], acc)
            }
            _ => {
                let acc: Vec<f64> = (0..rows)
                    .map(|r| x[r * cols..(r + 1) * cols].iter().sum())
                    .collect();
                (vec![rows], acc)
            }
        };
        drop(x);
        Ok(Tensor::from_op(
            shape,
            out,
            Op::SumAxis {
                input: self.clone(),
                axis,
            },
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.values().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![total],
            Op::SumAll {
                input: self.clone(),
            },
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let total: f64 = self.values().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![total / n],
            Op::Mean {
                input: self.clone(),
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, DiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} ({} elems) -> {:?} ({} elems)", self.shape(), self.numel(), shape, numel),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape {
                input: self.clone(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let x = Tensor::constant(&[1], vec![0.0]);
        assert_eq!(x.sigmoid().item(), 0.5);
    }

    #[test]
    fn matmul_identity_preserves() {
        let eye = Tensor::constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = Tensor::constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.to_vec(), a.to_vec());
        assert_eq!(out.shape(), &[3, 2]);
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let x = Tensor::constant(&[5], vec![1.3; 5]);
        let p = x.softmax().unwrap();
        for v in p.to_vec() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_shape_error_names_op_and_extents() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn max_pool_tie_goes_to_first_index() {
        let x = Tensor::param(&[1, 2, 2], vec![7.0, 7.0, 1.0, 7.0]);
        let y = x.max_pool2d(2).unwrap();
        assert_eq!(y.to_vec(), vec![7.0]);
        let s = y.sum_all();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv2d_matches_hand_case() {
        // 1x3x3 input, 1x1x2x2 kernel, stride 1, no padding.
        let x = Tensor::constant(&[1, 3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = Tensor::constant(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.to_vec(), vec![6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn conv2d_padding_keeps_extent() {
        let x = Tensor::constant(&[1, 4, 4], (0..16).map(|v| v as f64).collect());
        let w = Tensor::constant(&[2, 1, 3, 3], vec![0.1; 18]);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4]);
    }

    #[test]
    fn concat_axis1_stacks_columns() {
        let a = Tensor::constant(&[2, 1], vec![1.0, 2.0]);
        let b = Tensor::constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn sum_axis_directions() {
        let m = Tensor::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.sum_axis(0).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(m.sum_axis(1).unwrap().to_vec(), vec![6.0, 15.0]);
    }
}
