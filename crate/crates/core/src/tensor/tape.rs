use super::kernels::{self, ConvDims};
use super::{dim_err, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Unit stride with padding that preserves spatial size for odd kernels.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    WeightedSquares(Var, Vec<f64>),
    AddBias {
        x: Var,
        bias: Var,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    PixelShuffle {
        x: Var,
        dims: (usize, usize, usize, usize),
        r: usize,
    },
    Upsample {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        r: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf, true)
    }

    /// Copies a parameter onto the tape as a differentiable input.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(Tensor {
            shape: value.shape.clone(),
            data: value.data.clone(),
            grad: None,
        })
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(dim_err("matmul", format!("expected rank-2 operands, got {sa:?} and {sb:?}"))),
        };
        if k != k2 {
            return Err(dim_err("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let data = kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = match *self.shape(a) {
            [r, c] => (r, c),
            ref s => return Err(dim_err("transpose", format!("expected rank 2, got {s:?}"))),
        };
        let data = kernels::transpose(r, c, self.value(a).data());
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), rg))
    }

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean squared error between two same-shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mse", format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let s = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len().max(1) as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// `Σ_i coeffs[i] · x[i]²`.
    pub fn weighted_squares(&mut self, x: Var, coeffs: Vec<f64>) -> Result<Var, TensorError> {
        if coeffs.len() != self.value(x).len() {
            return Err(dim_err(
                "weighted_squares",
                format!("{} coefficients for {} elements", coeffs.len(), self.value(x).len()),
            ));
        }
        let s = self.value(x).data().iter().zip(&coeffs).map(|(w, c)| c * w * w).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSquares(x, coeffs), rg))
    }

    /// Adds a per-channel bias: axis 1 of a rank-2/3/4 value (axis 0 for rank 3).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (channels, inner) = match shape.as_slice() {
            [_, c] => (*c, 1),
            [c, h, w] => (*c, h * w),
            [_, c, h, w] => (*c, h * w),
            s => return Err(dim_err("add_bias", format!("unsupported shape {s:?}"))),
        };
        if self.shape(bias) != [channels] {
            return Err(dim_err(
                "add_bias",
                format!("bias shape {:?} does not match {channels} channels", self.shape(bias)),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { x, bias, inner }, rg))
    }

    /// 2-D convolution lowered to im2col + GEMM.
    ///
    /// `x` is `[C,H,W]` or `[B,C,H,W]`; `w` is `[N,C,kh,kw]` with odd kernel dims.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        let rank3 = self.value(x).rank() == 3;
        let (batch, in_ch, h, wd) = kernels::split_image_shape(self.shape(x), "conv2d")?;
        let (n, wc, kh, kw) = match *self.shape(w) {
            [n, c, kh, kw] => (n, c, kh, kw),
            ref s => return Err(dim_err("conv2d", format!("weight must be rank 4, got {s:?}"))),
        };
        if wc != in_ch {
            return Err(dim_err("conv2d", format!("input has {in_ch} channels, weight expects {wc}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(dim_err("conv2d", format!("kernel {kh}x{kw} must have odd dims")));
        }
        if geom.stride == 0 || h + 2 * geom.pad < kh || wd + 2 * geom.pad < kw {
            return Err(dim_err("conv2d", "kernel larger than padded input or zero stride"));
        }
        let dims = ConvDims {
            batch,
            in_ch,
            h,
            w: wd,
            kh,
            kw,
            stride: geom.stride,
            pad: geom.pad,
            out_h: (h + 2 * geom.pad - kh) / geom.stride + 1,
            out_w: (wd + 2 * geom.pad - kw) / geom.stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &dims);
        let out = kernels::gemm(n, dims.patch(), dims.columns(), self.value(w).data(), &cols);
        let plane = dims.out_h * dims.out_w;
        let data = kernels::columns_to_images(&out, n, batch, plane);
        let shape = if rank3 {
            vec![n, dims.out_h, dims.out_w]
        } else {
            vec![batch, n, dims.out_h, dims.out_w]
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, data)?, Op::Conv2d { x, w, dims, cols }, rg))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let t = self.value(x).pixel_shuffle(r)?;
        let dims = kernels::split_image_shape(self.shape(x), "pixel_shuffle")?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::PixelShuffle { x, dims, r }, rg))
    }

    /// Nearest-neighbour upsampling of the two trailing axes by `r`.
    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || r == 0 {
            return Err(dim_err("upsample_nearest", format!("bad shape {shape:?} or factor {r}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = shape[..shape.len() - 2].iter().product();
        let data = kernels::upsample_nearest(self.value(x).data(), planes, h, w, r);
        let mut out_shape = shape.clone();
        let rank = out_shape.len();
        out_shape[rank - 2] *= r;
        out_shape[rank - 1] *= r;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Upsample { x, planes, h, w, r }, rg))
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bt = kernels::transpose(k, n, val(*b));
                    self.accumulate(grads, *a, kernels::gemm(m, n, k, g, &bt));
                }
                if self.rg(*b) {
                    let at = kernels::transpose(m, k, val(*a));
                    self.accumulate(grads, *b, kernels::gemm(k, m, n, &at, g));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, kernels::transpose(c, r, g));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::Relu(a) => {
                let d = g.iter().zip(val(*a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.iter().zip(val(*a)).map(|(g, x)| g * sign(*x)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = 2.0 * g[0] / va.len().max(1) as f64;
                let d: Vec<f64> = va.iter().zip(vb).map(|(x, y)| c * (x - y)).collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, d);
            }
            Op::WeightedSquares(x, coeffs) => {
                let d = val(*x).iter().zip(coeffs).map(|(w, c)| 2.0 * c * w * g[0]).collect();
                self.accumulate(grads, *x, d);
            }
            Op::AddBias { x, bias, inner } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.rg(*bias) {
                    let channels = self.value(*bias).len();
                    let mut db = vec![0.0; channels];
                    for (i, gv) in g.iter().enumerate() {
                        db[(i / inner) % channels] += gv;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Conv2d { x, w, dims, cols } => {
                let n = self.shape(*w)[0];
                let plane = dims.out_h * dims.out_w;
                let gm = kernels::images_to_columns(g, n, dims.batch, plane);
                let (patch, ncols) = (dims.patch(), dims.columns());
                if self.rg(*w) {
                    let ct = kernels::transpose(patch, ncols, cols);
                    self.accumulate(grads, *w, kernels::gemm(n, ncols, patch, &gm, &ct));
                }
                if self.rg(*x) {
                    let wt = kernels::transpose(n, patch, val(*w));
                    let dcols = kernels::gemm(patch, n, ncols, &wt, &gm);
                    self.accumulate(grads, *x, kernels::col2im(&dcols, dims));
                }
            }
            Op::PixelShuffle { x, dims, r } => {
                let (b, c, h, w) = *dims;
                self.accumulate(grads, *x, kernels::pixel_unshuffle(g, b, c / (r * r), h, w, *r));
            }
            Op::Upsample { x, planes, h, w, r } => {
                self.accumulate(grads, *x, kernels::upsample_nearest_adjoint(g, *planes, *h, *w, *r));
            }
        }
        debug_assert_eq!(out.len(), g.len());
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct nested-loop convolution, independent of im2col.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (n, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * oh * ow];
        for o in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[(ci * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let q = tape.matmul(m, ones).unwrap();
        assert_eq!(tape.value(q).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn conv_one_by_one_ones_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[1, 5, 6], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(xv, w, ConvGeom { stride: 1, pad: 0 }).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn delta_kernel_same_pad_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 7, 7], -1.0, 1.0, &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(k);
        let y = tape.conv2d(xv, w, ConvGeom::same(3)).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(stride, pad, k) in &[(1, 1, 3), (1, 0, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1)] {
            let x = Tensor::uniform(&[3, 8, 8], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[4, 3, k, k], -1.0, 1.0, &mut rng);
            let expect = naive_conv(&x, &w, stride, pad);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let wv = tape.constant(w);
            let y = tape.conv2d(xv, wv, ConvGeom { stride, pad }).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_and_even_kernel_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(tape.conv2d(x, w, ConvGeom::same(3)).is_err());
        let w2 = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.conv2d(x, w2, ConvGeom { stride: 1, pad: 0 }).is_err());
    }

    #[test]
    fn batched_conv_equals_per_image_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xb = Tensor::uniform(&[3, 2, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(xb.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, ConvGeom::same(3)).unwrap();
        let yb = tape.value(y).clone();
        for b in 0..3 {
            let xi = xb.select_rows(&[b]).reshape(&[2, 5, 5]).unwrap();
            let expect = naive_conv(&xi, &w, 1, 1);
            assert_eq!(&yb.data()[b * 100..(b + 1) * 100], expect.as_slice());
        }
    }

    #[test]
    fn add_bias_ranks() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let x4 = tape.constant(Tensor::zeros(&[1, 3, 1, 2]));
        let y4 = tape.add_bias(x4, b).unwrap();
        assert_eq!(tape.value(y4).data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_skips_constants() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let m = tape.mul(a, c).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s);
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }
}
