use crate::error::{DilError, Result};

use super::{ensure_finite, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    generation: u64,
}

/// How a batch-norm node obtains its normalization statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with the batch's own mean and population variance.
    Train { eps: T },
    /// Normalize with externally stored running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel statistics of the batch seen by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Population (biased) variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Relu(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool2d {
        input: usize,
        size: usize,
    },
    GlobalPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GatherCols {
        input: usize,
        map: Vec<Option<usize>>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BinaryCrossEntropy {
        logits: usize,
        targets: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients of a scalar with respect to the leaves of one forward pass.
pub struct Gradients<T> {
    generation: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` if the leaf did not require grad or
    /// did not influence the loss.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `var` into the tensor's grad buffer, zeros if
    /// the loss did not depend on it.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor<T>) -> Result<()> {
        let g = match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); tensor.numel()],
        };
        tensor.set_grad(g)
    }
}

/// Record of the operations of one forward pass, consumed by
/// [`Tape::backward`].
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    generation: u64,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c {
            for kh in 0..self.kh {
                for kw in 0..self.kw {
                    let row = ((c * self.kh + kh) * self.kw + kw) * p;
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + kh) as isize - self.padding as isize;
                        let dst = &mut cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + ih as usize) * self.w..][..self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kw) as isize - self.padding as isize;
                            *d = if iw < 0 || iw >= self.w as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c {
            for kh in 0..self.kh {
                for kw in 0..self.kw {
                    let row = ((c * self.kh + kh) * self.kw + kw) * p;
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + kh) as isize - self.padding as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ih as usize) * self.w..][..self.w];
                        let src = &cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        for (ow, &s) in src.iter().enumerate() {
                            let iw = (ow * self.stride + kw) as isize - self.padding as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `log(1 + exp(-|z|)) + max(z, 0) - z * y`.
pub(crate) fn bce_with_logit<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            generation: 0,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(
            v.generation, self.generation,
            "variable belongs to a cleared graph"
        );
        v.index
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.consumed = false;
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        ensure_finite(name, &value)?;
        Ok(self.push(shape, value, requires_grad, op))
    }

    /// Records a leaf. Gradients are tracked iff the tensor requires grad.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            false,
            Op::Leaf,
        )
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v)].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[self.idx(v)];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    /// Drops every recorded node; outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(DilError::shape(
                op,
                format!(
                    "operands have shapes {:?} and {:?}",
                    self.nodes[a].shape, self.nodes[b].shape
                ),
            ));
        }
        Ok(())
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a), self.idx(b));
        self.same_shape("add", a, b)?;
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.rg(&[a, b]);
        self.checked("add", shape, value, rg, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a), self.idx(b));
        self.same_shape("mul", a, b)?;
        let value = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.rg(&[a, b]);
        self.checked("mul", shape, value, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let a = self.idx(a);
        let value = self.nodes[a].value.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.rg(&[a]);
        self.checked("scale", shape, value, rg, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a);
        let total: T = self.nodes[a].value.iter().copied().sum();
        let rg = self.rg(&[a]);
        self.checked("sum", vec![1], vec![total], rg, Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a);
        let value = self.nodes[a]
            .value
            .iter()
            .map(|&x| x.max(T::zero()))
            .collect();
        let shape = self.nodes[a].shape.clone();
        let rg = self.rg(&[a]);
        self.checked("relu", shape, value, rg, Op::Relu(a))
    }

    fn conv_geom(
        &self,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<(usize, usize, ConvGeom)> {
        let xs = &self.nodes[input].shape;
        let ks = &self.nodes[kernel].shape;
        if xs.len() != 4 || ks.len() != 4 {
            return Err(DilError::shape(
                "conv2d",
                format!("expected NCHW input and OIKhKw kernel, got {xs:?} and {ks:?}"),
            ));
        }
        if stride == 0 {
            return Err(DilError::InvalidArgument(
                "conv2d stride must be >= 1".into(),
            ));
        }
        if xs[1] != ks[1] {
            return Err(DilError::shape(
                "conv2d",
                format!("input has {} channels but kernel expects {}", xs[1], ks[1]),
            ));
        }
        let (ho, wo) = match (
            conv_out(xs[2], ks[2], stride, padding),
            conv_out(xs[3], ks[3], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(DilError::shape(
                    "conv2d",
                    format!(
                        "kernel {}x{} larger than padded input {}x{}",
                        ks[2],
                        ks[3],
                        xs[2] + 2 * padding,
                        xs[3] + 2 * padding
                    ),
                ))
            }
        };
        Ok((
            xs[0],
            ks[0],
            ConvGeom {
                c: xs[1],
                h: xs[2],
                w: xs[3],
                kh: ks[2],
                kw: ks[3],
                ho,
                wo,
                stride,
                padding,
            },
        ))
    }

    /// 2-D cross-correlation of an NCHW input with an OIKhKw kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, k) = (self.idx(input), self.idx(kernel));
        let (n, o, g) = self.conv_geom(x, k, stride, padding)?;
        let (kd, p) = (g.patch(), g.positions());
        let in_stride = g.c * g.h * g.w;
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = vec![T::zero(); kd * p];
        let kv = &self.nodes[k].value;
        for s in 0..n {
            g.im2col(&self.nodes[x].value[s * in_stride..], &mut cols);
            T::gemm(
                o,
                kd,
                p,
                kv,
                false,
                &cols,
                false,
                T::zero(),
                &mut out[s * o * p..],
            );
        }
        let rg = self.rg(&[x, k]);
        self.checked(
            "conv2d",
            vec![n, o, g.ho, g.wo],
            out,
            rg,
            Op::Conv2d {
                input: x,
                kernel: k,
                stride,
                padding,
            },
        )
    }

    /// Non-overlapping `size`×`size` average pooling; trailing rows and
    /// columns that do not fill a window are dropped.
    pub fn avg_pool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let x = self.idx(input);
        let s = &self.nodes[x].shape;
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(DilError::shape(
                "avg_pool2d",
                format!("cannot pool {s:?} with window {size}"),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / size, w / size);
        let norm = T::one() / T::lit((size * size) as f64);
        let xv = &self.nodes[x].value;
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..][..h * w];
            let dst = &mut out[plane * ho * wo..][..ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = T::zero();
                    for di in 0..size {
                        for dj in 0..size {
                            acc += src[(i * size + di) * w + j * size + dj];
                        }
                    }
                    dst[i * wo + j] = acc * norm;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.checked(
            "avg_pool2d",
            vec![n, c, ho, wo],
            out,
            rg,
            Op::AvgPool2d { input: x, size },
        )
    }

    /// Per channel: mean over H×W plus max over H×W. Output is N×C.
    pub fn global_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.idx(input);
        let s = &self.nodes[x].shape;
        if s.len() != 4 {
            return Err(DilError::shape(
                "global_pool",
                format!("expected NCHW input, got {s:?}"),
            ));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let norm = T::lit(hw as f64);
        let xv = &self.nodes[x].value;
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let src = &xv[plane * hw..][..hw];
            let mut best = 0;
            let mut total = T::zero();
            for (i, &v) in src.iter().enumerate() {
                total += v;
                if v > src[best] {
                    best = i;
                }
            }
            out.push(total / norm + src[best]);
            argmax.push(best);
        }
        let rg = self.rg(&[x]);
        self.checked(
            "global_pool",
            vec![n, c],
            out,
            rg,
            Op::GlobalPool { input: x, argmax },
        )
    }

    /// `input · weightᵀ + bias` for an N×I input and O×I weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.idx(input), self.idx(weight), self.idx(bias));
        let (xs, ws, bs) = (
            &self.nodes[x].shape,
            &self.nodes[w].shape,
            &self.nodes[b].shape,
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs.iter().product::<usize>() != ws[0]
        {
            return Err(DilError::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            i,
            o,
            &self.nodes[x].value,
            false,
            &self.nodes[w].value,
            true,
            T::zero(),
            &mut out,
        );
        let bv = &self.nodes[b].value;
        for row in out.chunks_mut(o) {
            row.iter_mut().zip(bv).for_each(|(y, &bb)| *y += bb);
        }
        let rg = self.rg(&[x, w, b]);
        self.checked(
            "linear",
            vec![n, o],
            out,
            rg,
            Op::Linear {
                input: x,
                weight: w,
                bias: b,
            },
        )
    }

    /// Per-channel normalization followed by the `gamma`/`beta` affine.
    /// Accepts N×C or N×C×H×W inputs. In training mode the batch statistics
    /// are returned so the caller can fold them into running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        let (x, g, b) = (self.idx(input), self.idx(gamma), self.idx(beta));
        let s = self.nodes[x].shape.clone();
        if s.len() != 2 && s.len() != 4 {
            return Err(DilError::shape(
                "batch_norm",
                format!("expected NC or NCHW input, got {s:?}"),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        let count = n * hw;
        if self.nodes[g].value.len() != c || self.nodes[b].value.len() != c {
            return Err(DilError::shape(
                "batch_norm",
                format!(
                    "input has {c} channels but parameters have {} and {}",
                    self.nodes[g].value.len(),
                    self.nodes[b].value.len()
                ),
            ));
        }
        let xv = &self.nodes[x].value;
        let channel = |ch: usize| {
            (0..n).flat_map(move |s| {
                let start = (s * c + ch) * hw;
                start..start + hw
            })
        };
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                if count < 2 {
                    return Err(DilError::InvalidArgument(format!(
                        "training-mode batch norm needs at least 2 values per channel, got {count}"
                    )));
                }
                let inv = T::one() / T::lit(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let m = channel(ch).map(|i| xv[i]).sum::<T>() * inv;
                    let v = channel(ch).map(|i| (xv[i] - m) * (xv[i] - m)).sum::<T>() * inv;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean, var, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(DilError::shape(
                        "batch_norm",
                        format!(
                            "input has {c} channels but running statistics have {} and {}",
                            mean.len(),
                            var.len()
                        ),
                    ));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        if eps <= T::zero() {
            return Err(DilError::InvalidArgument(
                "batch norm eps must be > 0".into(),
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let (gv, bv) = (&self.nodes[g].value, &self.nodes[b].value);
        for ch in 0..c {
            for i in channel(ch) {
                let h = (xv[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gv[ch] * h + bv[ch];
            }
        }
        let rg = self.rg(&[x, g, b]);
        let stats = train.then(|| BnBatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let op = Op::BatchNorm {
            input: x,
            gamma: g,
            beta: b,
            xhat: if rg { xhat } else { Vec::new() },
            inv_std,
            train,
        };
        let v = self.checked("batch_norm", s, out, rg, op)?;
        Ok((v, stats))
    }

    /// Selects columns of an N×K input: output column `j` is input column
    /// `map[j]`, or zero where the map has no entry.
    pub fn gather_cols(&mut self, input: Var, map: &[Option<usize>]) -> Result<Var> {
        let x = self.idx(input);
        let s = &self.nodes[x].shape;
        if s.len() != 2 {
            return Err(DilError::shape(
                "gather_cols",
                format!("expected N×K input, got {s:?}"),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(bad) = map.iter().flatten().find(|&&j| j >= k) {
            return Err(DilError::shape(
                "gather_cols",
                format!("column {bad} out of range for width {k}"),
            ));
        }
        if map.is_empty() {
            return Err(DilError::shape("gather_cols", "empty column map"));
        }
        let xv = &self.nodes[x].value;
        let mut out = Vec::with_capacity(n * map.len());
        for row in xv.chunks(k) {
            out.extend(map.iter().map(|m| m.map_or(T::zero(), |j| row[j])));
        }
        let rg = self.rg(&[x]);
        let c = map.len();
        self.checked(
            "gather_cols",
            vec![n, c],
            out,
            rg,
            Op::GatherCols {
                input: x,
                map: map.to_vec(),
            },
        )
    }

    /// Mean softmax cross-entropy of N×C logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.idx(logits);
        let s = &self.nodes[z].shape;
        if s.len() != 2 || s[0] != labels.len() {
            return Err(DilError::shape(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(DilError::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let zv = &self.nodes[z].value;
        let mut probs = vec![T::zero(); zv.len()];
        let mut total = T::zero();
        for (r, (row, &label)) in zv.chunks(c).zip(labels).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * c + j] = e;
                denom += e;
            }
            probs[r * c..(r + 1) * c]
                .iter_mut()
                .for_each(|p| *p = *p / denom);
            total += denom.ln() - (row[label] - max);
        }
        let loss = total / T::lit(labels.len() as f64);
        let rg = self.rg(&[z]);
        self.checked(
            "cross_entropy",
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits: z,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean logit-space binary cross-entropy over all N×C entries.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.idx(logits);
        let zv = &self.nodes[z].value;
        if zv.len() != targets.len() || self.nodes[z].shape.len() != 2 {
            return Err(DilError::shape(
                "binary_cross_entropy",
                format!(
                    "logits {:?} with {} targets",
                    self.nodes[z].shape,
                    targets.len()
                ),
            ));
        }
        if targets.iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(DilError::InvalidArgument(
                "binary cross-entropy targets must be 0 or 1".into(),
            ));
        }
        let total: T = zv
            .iter()
            .zip(targets)
            .map(|(&v, &t)| bce_with_logit(v, t))
            .sum();
        let loss = total / T::lit(zv.len() as f64);
        let rg = self.rg(&[z]);
        self.checked(
            "binary_cross_entropy",
            vec![1],
            vec![loss],
            rg,
            Op::BinaryCrossEntropy {
                logits: z,
                targets: targets.to_vec(),
            },
        )
    }

    /// Back-propagates from a scalar and clears the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if loss.generation != self.generation || self.consumed {
            return Err(DilError::Graph(
                "backward called on a graph that was already consumed; run a new forward pass"
                    .into(),
            ));
        }
        let root = loss.index;
        if self.nodes[root].value.len() != 1 {
            return Err(DilError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => leaves[i] = Some(gy),
                op => self.backprop(op, i, &gy, &mut grads)?,
            }
        }
        let result = Gradients {
            generation: self.generation,
            grads: leaves,
        };
        self.clear();
        self.consumed = true;
        Ok(result)
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop(
        &self,
        op: &Op<T>,
        out: usize,
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(p) {
                        add_into(&mut grads[p], gy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                if self.wants(a) {
                    let g: Vec<T> = gy.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    add_into(&mut grads[a], &g);
                }
                if self.wants(b) {
                    let g: Vec<T> = gy.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    add_into(&mut grads[b], &g);
                }
            }
            Op::Scale(a, f) => {
                if self.wants(a) {
                    let g: Vec<T> = gy.iter().map(|&g| g * f).collect();
                    add_into(&mut grads[a], &g);
                }
            }
            Op::Sum(a) => {
                if self.wants(a) {
                    let g = vec![gy[0]; self.nodes[a].value.len()];
                    add_into(&mut grads[a], &g);
                }
            }
            Op::Relu(a) => {
                if self.wants(a) {
                    let g: Vec<T> = gy
                        .iter()
                        .zip(&self.nodes[a].value)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    add_into(&mut grads[a], &g);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (n, o, geo) = self.conv_geom(input, kernel, stride, padding)?;
                let (kd, p) = (geo.patch(), geo.positions());
                let in_stride = geo.c * geo.h * geo.w;
                let xv = &self.nodes[input].value;
                let kv = &self.nodes[kernel].value;
                let mut cols = vec![T::zero(); kd * p];
                if self.wants(kernel) {
                    let mut dk = vec![T::zero(); o * kd];
                    for s in 0..n {
                        geo.im2col(&xv[s * in_stride..], &mut cols);
                        T::gemm(
                            o,
                            p,
                            kd,
                            &gy[s * o * p..],
                            false,
                            &cols,
                            true,
                            T::one(),
                            &mut dk,
                        );
                    }
                    add_into(&mut grads[kernel], &dk);
                }
                if self.wants(input) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for s in 0..n {
                        T::gemm(
                            kd,
                            o,
                            p,
                            kv,
                            true,
                            &gy[s * o * p..],
                            false,
                            T::zero(),
                            &mut cols,
                        );
                        geo.col2im_add(&cols, &mut dx[s * in_stride..]);
                    }
                    add_into(&mut grads[input], &dx);
                }
            }
            Op::AvgPool2d { input, size } => {
                if self.wants(input) {
                    let s = &self.nodes[input].shape;
                    let (h, w) = (s[2], s[3]);
                    let (ho, wo) = (h / size, w / size);
                    let norm = T::one() / T::lit((size * size) as f64);
                    let mut dx = vec![T::zero(); self.nodes[input].value.len()];
                    for plane in 0..s[0] * s[1] {
                        let src = &gy[plane * ho * wo..][..ho * wo];
                        let dst = &mut dx[plane * h * w..][..h * w];
                        for i in 0..ho {
                            for j in 0..wo {
                                let g = src[i * wo + j] * norm;
                                for di in 0..size {
                                    for dj in 0..size {
                                        dst[(i * size + di) * w + j * size + dj] += g;
                                    }
                                }
                            }
                        }
                    }
                    add_into(&mut grads[input], &dx);
                }
            }
            Op::GlobalPool { input, ref argmax } => {
                if self.wants(input) {
                    let s = &self.nodes[input].shape;
                    let hw = s[2] * s[3];
                    let norm = T::one() / T::lit(hw as f64);
                    let mut dx = vec![T::zero(); self.nodes[input].value.len()];
                    for (plane, (&g, &best)) in gy.iter().zip(argmax).enumerate() {
                        let dst = &mut dx[plane * hw..][..hw];
                        dst.iter_mut().for_each(|d| *d = g * norm);
                        dst[best] += g;
                    }
                    add_into(&mut grads[input], &dx);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, o) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                let i = self.nodes[input].shape[1];
                if self.wants(input) {
                    let mut dx = vec![T::zero(); n * i];
                    T::gemm(
                        n,
                        o,
                        i,
                        gy,
                        false,
                        &self.nodes[weight].value,
                        false,
                        T::zero(),
                        &mut dx,
                    );
                    add_into(&mut grads[input], &dx);
                }
                if self.wants(weight) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(
                        o,
                        n,
                        i,
                        gy,
                        true,
                        &self.nodes[input].value,
                        false,
                        T::zero(),
                        &mut dw,
                    );
                    add_into(&mut grads[weight], &dw);
                }
                if self.wants(bias) {
                    let mut db = vec![T::zero(); o];
                    for row in gy.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    add_into(&mut grads[bias], &db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
                train,
            } => {
                let s = &self.nodes[out].shape;
                let (n, c) = (s[0], s[1]);
                let hw: usize = s[2..].iter().product();
                let count = T::lit((n * hw) as f64);
                let channel = |ch: usize| {
                    (0..n).flat_map(move |smp| {
                        let start = (smp * c + ch) * hw;
                        start..start + hw
                    })
                };
                let gv = &self.nodes[gamma].value;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for i in channel(ch) {
                        dgamma[ch] += gy[i] * xhat[i];
                        dbeta[ch] += gy[i];
                    }
                }
                if self.wants(input) {
                    let mut dx = vec![T::zero(); gy.len()];
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        if train {
                            // dxhat = gy * gamma; sums below are over the channel.
                            let (sum_d, sum_dx) = (dbeta[ch], dgamma[ch]);
                            for i in channel(ch) {
                                dx[i] = scale / count * (count * gy[i] - sum_d - xhat[i] * sum_dx);
                            }
                        } else {
                            for i in channel(ch) {
                                dx[i] = scale * gy[i];
                            }
                        }
                    }
                    add_into(&mut grads[input], &dx);
                }
                if self.wants(gamma) {
                    add_into(&mut grads[gamma], &dgamma);
                }
                if self.wants(beta) {
                    add_into(&mut grads[beta], &dbeta);
                }
            }
            Op::GatherCols { input, ref map } => {
                if self.wants(input) {
                    let k = self.nodes[input].shape[1];
                    let mut dx = vec![T::zero(); self.nodes[input].value.len()];
                    for (row, grow) in dx.chunks_mut(k).zip(gy.chunks(map.len())) {
                        for (m, &g) in map.iter().zip(grow) {
                            if let Some(j) = *m {
                                row[j] += g;
                            }
                        }
                    }
                    add_into(&mut grads[input], &dx);
                }
            }
            Op::CrossEntropy {
                logits,
                ref labels,
                ref probs,
            } => {
                if self.wants(logits) {
                    let c = self.nodes[logits].shape[1];
                    let scale = gy[0] / T::lit(labels.len() as f64);
                    let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dz[r * c + l] = dz[r * c + l] - scale;
                    }
                    add_into(&mut grads[logits], &dz);
                }
            }
            Op::BinaryCrossEntropy {
                logits,
                ref targets,
            } => {
                if self.wants(logits) {
                    let scale = gy[0] / T::lit(targets.len() as f64);
                    let dz: Vec<T> = self.nodes[logits]
                        .value
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                        .collect();
                    add_into(&mut grads[logits], &dz);
                }
            }
        }
        Ok(())
    }
}
