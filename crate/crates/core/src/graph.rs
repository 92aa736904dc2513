//! Reverse-mode automatic differentiation on a per-step compute graph.
//!
//! A [`Graph`] is a tape of nodes in topological (creation) order. Leaves
//! hold inputs and parameters; every operation appends a node recording its
//! inputs. [`Graph::backward`] walks the tape once in reverse, accumulating
//! gradients; a tensor consumed by several operations receives the sum of
//! all path contributions.
//!
//! Broadcasting is restricted to singleton axes of equal-rank operands.
//! Convolution uses cross-correlation semantics (no kernel flip) with zero
//! same-padding. One graph belongs to one training/eval step; independent
//! graphs are independent contexts.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
        /// `mask[i] == false` excludes index `i` of `axis` from the
        /// normalization; excluded outputs are exactly zero.
        mask: Option<Vec<bool>>,
    },
    L2Norm {
        x: Var,
        axis: usize,
        eps: T,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        dilation: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScalarMul {
        x: Var,
        c: T,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axes: Vec<usize>,
    },
    Bce {
        p: Var,
        y: Var,
    },
    Broadcast {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Upsample {
        x: Var,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Clamp applied to predictions inside the binary cross-entropy loss.
pub const BCE_CLAMP: f64 = 1e-7;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. Only leaves with `requires_grad` (and nodes
    /// depending on them) participate in backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v` after [`Graph::backward`], if any was
    /// accumulated. Shape matches `value(v)`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires)
    }

    // ── Matrix multiply ─────────────────────────────────────────────

    /// Standard matrix product of rank-2 tensors: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                sa, sb
            )));
        }
        let data = matmul_nn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push_op(out, Op::MatMul { a, b }, &[a, b]))
    }

    // ── Softmax and normalization ───────────────────────────────────

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax over the subset of `axis` where `mask` is true; masked
    /// entries produce exactly zero.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        self.softmax_impl(x, axis, Some(mask.to_vec()))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                shape
            )));
        }
        if let Some(m) = &mask {
            if m.len() != shape[axis] {
                return Err(Error::Shape(format!(
                    "softmax mask length {} != axis extent {}",
                    m.len(),
                    shape[axis]
                )));
            }
            if !m.iter().any(|&k| k) {
                return Err(Error::Input("softmax mask excludes every entry".into()));
            }
        }
        let data = softmax_forward(
            self.nodes[x.0].value.data(),
            &shape,
            axis,
            mask.as_deref(),
        );
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(out, Op::Softmax { x, axis, mask }, &[x]))
    }

    /// Divide each slice along `axis` by max(its L2 norm, eps).
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "l2_normalize axis {axis} out of range for shape {:?}",
                shape
            )));
        }
        if eps <= T::zero() {
            return Err(Error::Usage("l2_normalize eps must be positive".into()));
        }
        let xd = self.nodes[x.0].value.data();
        let (outer, extent, inner) = axis_split(&shape, axis);
        let mut data = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut sq = T::zero();
                for j in 0..extent {
                    let v = xd[base + j * inner];
                    sq += v * v;
                }
                let denom = sq.sqrt().max(eps);
                for j in 0..extent {
                    data[base + j * inner] = xd[base + j * inner] / denom;
                }
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(out, Op::L2Norm { x, axis, eps }, &[x]))
    }

    // ── Convolution and resampling ──────────────────────────────────

    /// 2-D cross-correlation with zero same-padding.
    ///
    /// `x` is [C_in, H, W], `kernel` is [C_out, C_in, k, k] with k in {1, 3}.
    /// Padding is `dilation * (k - 1) / 2` per side, so stride 1 preserves
    /// H x W.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, dilation: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects x [C,H,W] and kernel [Co,Ci,k,k], got {:?} and {:?}",
                sx, sk
            )));
        }
        if sk[2] != sk[3] || !(sk[2] == 1 || sk[2] == 3) {
            return Err(Error::Shape(format!(
                "conv2d kernel must be square with size 1 or 3, got {:?}",
                sk
            )));
        }
        if sx[0] != sk[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                sx[0], sk[1]
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Usage("conv2d stride/dilation must be >= 1".into()));
        }
        let geom = ConvGeom::new(sx[1], sx[2], sk[2], stride, dilation);
        let cout = sk[0];
        let cin = sk[1];
        let mut out = vec![T::zero(); cout * geom.h_out * geom.w_out];
        conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[kernel.0].value.data(),
            &mut out,
            cin,
            cout,
            &geom,
        );
        let out = Tensor::new(vec![cout, geom.h_out, geom.w_out], out)?;
        Ok(self.push_op(
            out,
            Op::Conv2d {
                x,
                kernel,
                stride,
                dilation,
            },
            &[x, kernel],
        ))
    }

    /// Bilinear resize of [C, h, w] to [C, out_h, out_w] using half-pixel
    /// centers with edge clamping. Constant maps stay constant.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Shape(format!(
                "upsample expects [C,H,W], got {:?}",
                sx
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Usage("upsample target size must be positive".into()));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let ys = bilinear_taps(h, out_h);
        let xs = bilinear_taps(w, out_w);
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let src = &xd[ch * h * w..(ch + 1) * h * w];
            let dst = &mut data[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let ty = T::from_f64(ty);
                    let tx = T::from_f64(tx);
                    let one = T::one();
                    let v = (one - ty) * ((one - tx) * src[y0 * w + x0] + tx * src[y0 * w + x1])
                        + ty * ((one - tx) * src[y1 * w + x0] + tx * src[y1 * w + x1]);
                    dst[oy * out_w + ox] = v;
                }
            }
        }
        let out = Tensor::new(vec![c, out_h, out_w], data)?;
        Ok(self.push_op(out, Op::Upsample { x }, &[x]))
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, BinKind::Sub)
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, BinKind::Mul)
    }

    pub fn scalar_mul(&mut self, x: Var, c: T) -> Result<Var> {
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.nodes[x.0].value.data().iter().map(|&v| v * c).collect(),
        )?;
        Ok(self.push_op(out, Op::ScalarMul { x, c }, &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.nodes[x.0].value.data().iter().map(|v| v.tanh()).collect(),
        )?;
        Ok(self.push_op(out, Op::Tanh { x }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let one = T::one();
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.nodes[x.0]
                .value
                .data()
                .iter()
                .map(|&v| one / (one + (-v).exp()))
                .collect(),
        )?;
        Ok(self.push_op(out, Op::Sigmoid { x }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::new(
            self.shape(x).to_vec(),
            self.nodes[x.0]
                .value
                .data()
                .iter()
                .map(|&v| v.max(T::zero()))
                .collect(),
        )?;
        Ok(self.push_op(out, Op::Relu { x }, &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, kind: BinKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let data = if sa == sb {
            ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let plan = BcPlan::new(&out_shape, &sa, &sb);
            let mut data = vec![T::zero(); out_shape.iter().product()];
            plan.forward(ad, bd, &mut data, f);
            data
        };
        let out = Tensor::new(out_shape, data)?;
        let op = match kind {
            BinKind::Add => Op::Add { a, b },
            BinKind::Sub => Op::Sub { a, b },
            BinKind::Mul => Op::Mul { a, b },
        };
        Ok(self.push_op(out, op, &[a, b]))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes, keep_dims)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes, keep_dims)
    }

    pub fn max_reduce(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axes, keep_dims)
    }

    /// Sum over every axis, producing a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false)
    }

    pub fn reduce(
        &mut self,
        kind: ReduceKind,
        x: Var,
        axes: &[usize],
        keep_dims: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::Shape(format!(
                    "reduce axis {a} out of range for shape {:?}",
                    shape
                )));
            }
            if seen[a] {
                return Err(Error::Usage(format!("reduce axis {a} given twice")));
            }
            seen[a] = true;
        }
        let out_shape = reduced_shape(&shape, &seen, keep_dims);
        let out_numel: usize = out_shape.iter().product();
        let count: usize = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| seen[*d])
            .map(|(_, &e)| e)
            .product();
        let xd = self.nodes[x.0].value.data();
        let map = reduce_index_map(&shape, &seen);
        let mut data = match kind {
            ReduceKind::Max => vec![T::neg_infinity(); out_numel],
            _ => vec![T::zero(); out_numel],
        };
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for_each_reduce_index(&shape, &map, |flat, o| data[o] += xd[flat]);
            }
            ReduceKind::Max => {
                for_each_reduce_index(&shape, &map, |flat, o| {
                    if xd[flat] > data[o] {
                        data[o] = xd[flat]
                    }
                });
            }
        }
        if kind == ReduceKind::Mean {
            let c = T::from_f64(count as f64);
            for v in data.iter_mut() {
                *v = *v / c;
            }
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            out,
            Op::Reduce {
                kind,
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    // ── Loss ────────────────────────────────────────────────────────

    /// Binary cross-entropy averaged over all elements; `p` is clamped to
    /// [1e-7, 1 - 1e-7] before the logs.
    pub fn bce_loss(&mut self, p: Var, y: Var) -> Result<Var> {
        if self.shape(p) != self.shape(y) {
            return Err(Error::Shape(format!(
                "bce_loss shapes differ: {:?} vs {:?}",
                self.shape(p),
                self.shape(y)
            )));
        }
        let pd = self.nodes[p.0].value.data();
        let yd = self.nodes[y.0].value.data();
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::one() - lo;
        let mut acc = 0.0f64;
        for (&pv, &yv) in pd.iter().zip(yd.iter()) {
            let pc = pv.max(lo).min(hi).as_f64();
            let yv = yv.as_f64();
            acc += yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln();
        }
        let loss = T::from_f64(-acc / pd.len() as f64);
        let out = Tensor::scalar(loss);
        Ok(self.push_op(out, Op::Bce { p, y }, &[p, y]))
    }

    // ── Shape manipulation ──────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push_op(out, Op::Reshape { x }, &[x]))
    }

    /// Expand singleton axes of `x` to `shape` (ranks must match).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != shape.len() {
            return Err(Error::Shape(format!(
                "broadcast_to rank mismatch: {:?} vs {:?}",
                sx, shape
            )));
        }
        for (d, (&i, &o)) in sx.iter().zip(shape.iter()).enumerate() {
            if i != o && i != 1 {
                return Err(Error::Shape(format!(
                    "cannot broadcast axis {d} from {i} to {o}"
                )));
            }
        }
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![T::zero(); shape.iter().product()];
        copy_broadcast(xd, &sx, &mut data, shape);
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push_op(out, Op::Broadcast { x }, &[x]))
    }

    /// Reorder axes; `axes` is a permutation of 0..rank.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if !is_permutation(axes, sx.len()) {
            return Err(Error::Shape(format!(
                "invalid permutation {:?} for rank {}",
                axes,
                sx.len()
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let data = permute_data(self.nodes[x.0].value.data(), &sx, axes);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat needs at least one operand".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for {:?}",
                first
            )));
        }
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat operand {:?} incompatible with {:?} along axis {axis}",
                    s, first
                )));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let row = total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let extent = self.shape(p)[axis];
            let block = extent * inner;
            let pd = self.nodes[p.0].value.data();
            for o in 0..outer {
                let dst = o * row + offset;
                data[dst..dst + block].copy_from_slice(&pd[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Select rows of a [V, C] table; gradients scatter-add into the table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Shape(format!(
                "gather_rows expects a rank-2 table, got {:?}",
                st
            )));
        }
        if rows.is_empty() {
            return Err(Error::Usage("gather_rows with empty index list".into()));
        }
        let (v, c) = (st[0], st[1]);
        for &r in rows {
            if r >= v {
                return Err(Error::Data(format!(
                    "gather_rows index {r} out of range for table with {v} rows"
                )));
            }
        }
        let td = self.nodes[table.0].value.data();
        let mut data = vec![T::zero(); rows.len() * c];
        for (i, &r) in rows.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&td[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push_op(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate gradients of every tracked tensor reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.op_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, delta) in contribs {
                self.add_grad(v, delta);
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn op_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        // The op is cloned to release the borrow on self.nodes[i].
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let sa = self.shape(a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    // dA = G * B^T
                    let da = matmul_nt(g, self.nodes[b.0].value.data(), m, n, k);
                    out.push((a, da));
                }
                if self.needs(b) {
                    // dB = A^T * G
                    let db = matmul_tn(self.nodes[a.0].value.data(), g, m, k, n);
                    out.push((b, db));
                }
            }

            Op::Softmax { x, axis, mask } => {
                if self.needs(x) {
                    let s = self.nodes[i].value.data();
                    let shape = self.nodes[i].value.shape();
                    let (outer, extent, inner) = axis_split(shape, axis);
                    let mut dx = vec![T::zero(); s.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * extent * inner + ii;
                            let mut dot = T::zero();
                            for j in 0..extent {
                                let idx = base + j * inner;
                                dot += g[idx] * s[idx];
                            }
                            for j in 0..extent {
                                if let Some(m) = &mask {
                                    if !m[j] {
                                        continue;
                                    }
                                }
                                let idx = base + j * inner;
                                dx[idx] = s[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    out.push((x, dx));
                }
            }

            Op::L2Norm { x, axis, eps } => {
                if self.needs(x) {
                    let xd = self.nodes[x.0].value.data();
                    let yd = self.nodes[i].value.data();
                    let shape = self.nodes[x.0].value.shape();
                    let (outer, extent, inner) = axis_split(shape, axis);
                    let mut dx = vec![T::zero(); xd.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * extent * inner + ii;
                            let mut sq = T::zero();
                            for j in 0..extent {
                                let v = xd[base + j * inner];
                                sq += v * v;
                            }
                            let r = sq.sqrt();
                            if r > eps {
                                let mut dot = T::zero();
                                for j in 0..extent {
                                    let idx = base + j * inner;
                                    dot += g[idx] * yd[idx];
                                }
                                for j in 0..extent {
                                    let idx = base + j * inner;
                                    dx[idx] = (g[idx] - yd[idx] * dot) / r;
                                }
                            } else {
                                for j in 0..extent {
                                    let idx = base + j * inner;
                                    dx[idx] = g[idx] / eps;
                                }
                            }
                        }
                    }
                    out.push((x, dx));
                }
            }

            Op::Conv2d {
                x,
                kernel,
                stride,
                dilation,
            } => {
                let sx = self.shape(x);
                let sk = self.shape(kernel);
                let geom = ConvGeom::new(sx[1], sx[2], sk[2], stride, dilation);
                let (cin, cout) = (sk[1], sk[0]);
                if self.needs(x) {
                    let mut dx = vec![T::zero(); sx.iter().product()];
                    conv2d_backward_input(
                        g,
                        self.nodes[kernel.0].value.data(),
                        &mut dx,
                        cin,
                        cout,
                        &geom,
                    );
                    out.push((x, dx));
                }
                if self.needs(kernel) {
                    let mut dk = vec![T::zero(); sk.iter().product()];
                    conv2d_backward_kernel(
                        g,
                        self.nodes[x.0].value.data(),
                        &mut dk,
                        cin,
                        cout,
                        &geom,
                    );
                    out.push((kernel, dk));
                }
            }

            Op::Add { a, b } => {
                let os = self.nodes[i].value.shape();
                if self.needs(a) {
                    out.push((a, reduce_to_shape(g, os, self.shape(a))));
                }
                if self.needs(b) {
                    out.push((b, reduce_to_shape(g, os, self.shape(b))));
                }
            }

            Op::Sub { a, b } => {
                let os = self.nodes[i].value.shape();
                if self.needs(a) {
                    out.push((a, reduce_to_shape(g, os, self.shape(a))));
                }
                if self.needs(b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    out.push((b, reduce_to_shape(&neg, os, self.shape(b))));
                }
            }

            Op::Mul { a, b } => {
                let os = self.nodes[i].value.shape().to_vec();
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                let plan = BcPlan::new(&os, &sa, &sb);
                if self.needs(a) {
                    let mut da = vec![T::zero(); ad.len()];
                    plan.backward_into_a(g, bd, &mut da);
                    out.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); bd.len()];
                    plan.swapped().backward_into_a(g, ad, &mut db);
                    out.push((b, db));
                }
            }

            Op::ScalarMul { x, c } => {
                if self.needs(x) {
                    out.push((x, g.iter().map(|&v| v * c).collect()));
                }
            }

            Op::Tanh { x } => {
                if self.needs(x) {
                    let yd = self.nodes[i].value.data();
                    out.push((
                        x,
                        g.iter()
                            .zip(yd.iter())
                            .map(|(&gv, &y)| gv * (T::one() - y * y))
                            .collect(),
                    ));
                }
            }

            Op::Sigmoid { x } => {
                if self.needs(x) {
                    let yd = self.nodes[i].value.data();
                    out.push((
                        x,
                        g.iter()
                            .zip(yd.iter())
                            .map(|(&gv, &y)| gv * y * (T::one() - y))
                            .collect(),
                    ));
                }
            }

            Op::Relu { x } => {
                if self.needs(x) {
                    let xd = self.nodes[x.0].value.data();
                    out.push((
                        x,
                        g.iter()
                            .zip(xd.iter())
                            .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                            .collect(),
                    ));
                }
            }

            Op::Reduce { kind, x, axes } => {
                if self.needs(x) {
                    let shape = self.shape(x).to_vec();
                    let mut seen = vec![false; shape.len()];
                    for &a in &axes {
                        seen[a] = true;
                    }
                    let map = reduce_index_map(&shape, &seen);
                    let numel: usize = shape.iter().product();
                    let mut dx = vec![T::zero(); numel];
                    match kind {
                        ReduceKind::Sum => {
                            for_each_reduce_index(&shape, &map, |flat, o| dx[flat] = g[o]);
                        }
                        ReduceKind::Mean => {
                            let count: usize = shape
                                .iter()
                                .enumerate()
                                .filter(|(d, _)| seen[*d])
                                .map(|(_, &e)| e)
                                .product();
                            let c = T::from_f64(count as f64);
                            for_each_reduce_index(&shape, &map, |flat, o| dx[flat] = g[o] / c);
                        }
                        ReduceKind::Max => {
                            // Route the gradient to the first maximum of each slice.
                            let xd = self.nodes[x.0].value.data();
                            let out_numel = self.nodes[i].value.numel();
                            let mut best: Vec<Option<usize>> = vec![None; out_numel];
                            for_each_reduce_index(&shape, &map, |flat, o| match best[o] {
                                None => best[o] = Some(flat),
                                Some(b) => {
                                    if xd[flat] > xd[b] {
                                        best[o] = Some(flat)
                                    }
                                }
                            });
                            for (o, b) in best.iter().enumerate() {
                                if let Some(b) = b {
                                    dx[*b] = g[o];
                                }
                            }
                        }
                    }
                    out.push((x, dx));
                }
            }

            Op::Bce { p, y } => {
                let pd = self.nodes[p.0].value.data();
                let yd = self.nodes[y.0].value.data();
                let lo = T::from_f64(BCE_CLAMP);
                let hi = T::one() - lo;
                let inv_n = T::from_f64(1.0 / pd.len() as f64);
                let gv = g[0];
                if self.needs(p) {
                    let dp: Vec<T> = pd
                        .iter()
                        .zip(yd.iter())
                        .map(|(&pv, &yv)| {
                            if pv <= lo || pv >= hi {
                                // Clamp is active: the loss is locally constant in p.
                                T::zero()
                            } else {
                                -gv * inv_n * (yv / pv - (T::one() - yv) / (T::one() - pv))
                            }
                        })
                        .collect();
                    out.push((p, dp));
                }
                if self.needs(y) {
                    let dy: Vec<T> = pd
                        .iter()
                        .map(|&pv| {
                            let pc = pv.max(lo).min(hi);
                            -gv * inv_n * (pc.ln() - (T::one() - pc).ln())
                        })
                        .collect();
                    out.push((y, dy));
                }
            }

            Op::Broadcast { x } => {
                if self.needs(x) {
                    out.push((
                        x,
                        reduce_to_shape(g, self.nodes[i].value.shape(), self.shape(x)),
                    ));
                }
            }

            Op::Reshape { x } => {
                if self.needs(x) {
                    out.push((x, g.to_vec()));
                }
            }

            Op::Permute { x, axes } => {
                if self.needs(x) {
                    let inverse = invert_permutation(&axes);
                    let os = self.nodes[i].value.shape();
                    out.push((x, permute_data(g, os, &inverse)));
                }
            }

            Op::Concat { parts, axis } => {
                let os = self.nodes[i].value.shape();
                let outer: usize = os[..axis].iter().product();
                let inner: usize = os[axis + 1..].iter().product();
                let row = os[axis] * inner;
                let mut offset = 0usize;
                for &p in &parts {
                    let extent = self.shape(p)[axis];
                    let block = extent * inner;
                    if self.needs(p) {
                        let mut dp = vec![T::zero(); outer * block];
                        for o in 0..outer {
                            let src = o * row + offset;
                            dp[o * block..(o + 1) * block]
                                .copy_from_slice(&g[src..src + block]);
                        }
                        out.push((p, dp));
                    }
                    offset += block;
                }
            }

            Op::Gather { table, rows } => {
                if self.needs(table) {
                    let st = self.shape(table);
                    let c = st[1];
                    let mut dt = vec![T::zero(); st[0] * c];
                    for (i_row, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            dt[r * c + j] += g[i_row * c + j];
                        }
                    }
                    out.push((table, dt));
                }
            }

            Op::Upsample { x } => {
                if self.needs(x) {
                    let sx = self.shape(x);
                    let os = self.nodes[i].value.shape();
                    let (c, h, w) = (sx[0], sx[1], sx[2]);
                    let (oh, ow) = (os[1], os[2]);
                    let ys = bilinear_taps(h, oh);
                    let xs = bilinear_taps(w, ow);
                    let mut dx = vec![T::zero(); c * h * w];
                    for ch in 0..c {
                        let gsrc = &g[ch * oh * ow..(ch + 1) * oh * ow];
                        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                                let gv = gsrc[oy * ow + ox];
                                let ty = T::from_f64(ty);
                                let tx = T::from_f64(tx);
                                let one = T::one();
                                dst[y0 * w + x0] += gv * (one - ty) * (one - tx);
                                dst[y0 * w + x1] += gv * (one - ty) * tx;
                                dst[y1 * w + x0] += gv * ty * (one - tx);
                                dst[y1 * w + x1] += gv * ty * tx;
                            }
                        }
                    }
                    out.push((x, dx));
                }
            }
        }
        out
    }
}

enum BinKind {
    Add,
    Sub,
    Mul,
}

// ── Shape helpers ───────────────────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "rank mismatch {:?} vs {:?} (broadcasting requires equal rank)",
            a, b
        )));
    }
    a.iter()
        .zip(b.iter())
        .enumerate()
        .map(|(d, (&x, &y))| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::Shape(format!(
                    "axis {d} extents {x} and {y} are not broadcast-compatible"
                )))
            }
        })
        .collect()
}

/// Execution plan for a broadcast binary op: a maximal contiguous suffix
/// of the output shape in which each operand is either fully present
/// (contiguous chunk) or fully broadcast (one scalar per chunk) is run as
/// a tight inner loop; the remaining outer dims advance by odometer.
struct BcPlan {
    outer_shape: Vec<usize>,
    a_step: Vec<usize>,
    b_step: Vec<usize>,
    chunk: usize,
    a_full: bool,
    b_full: bool,
}

impl BcPlan {
    fn new(out_shape: &[usize], a_shape: &[usize], b_shape: &[usize]) -> BcPlan {
        let rank = out_shape.len();
        // Grow the suffix while each operand stays uniformly full or
        // uniformly broadcast across it.
        let mut suffix = 0usize;
        let (mut a_full, mut b_full) = (true, true);
        while suffix < rank {
            let d = rank - 1 - suffix;
            if out_shape[d] == 1 {
                suffix += 1;
                continue;
            }
            let a_here = a_shape[d] == out_shape[d];
            let b_here = b_shape[d] == out_shape[d];
            if suffix == 0 || (a_here == a_full && b_here == b_full) {
                a_full = a_here;
                b_full = b_here;
                suffix += 1;
            } else {
                break;
            }
        }
        let split = rank - suffix;
        let chunk: usize = out_shape[split..].iter().product();
        let a_strides = strides_of(a_shape);
        let b_strides = strides_of(b_shape);
        let a_step: Vec<usize> = (0..split)
            .map(|d| if a_shape[d] == 1 { 0 } else { a_strides[d] })
            .collect();
        let b_step: Vec<usize> = (0..split)
            .map(|d| if b_shape[d] == 1 { 0 } else { b_strides[d] })
            .collect();
        BcPlan {
            outer_shape: out_shape[..split].to_vec(),
            a_step,
            b_step,
            chunk,
            a_full,
            b_full,
        }
    }

    /// The same plan with the operand roles exchanged.
    fn swapped(&self) -> BcPlan {
        BcPlan {
            outer_shape: self.outer_shape.clone(),
            a_step: self.b_step.clone(),
            b_step: self.a_step.clone(),
            chunk: self.chunk,
            a_full: self.b_full,
            b_full: self.a_full,
        }
    }

    fn for_each_outer(&self, mut body: impl FnMut(usize, usize, usize)) {
        let rank = self.outer_shape.len();
        let outer: usize = self.outer_shape.iter().product();
        let mut coords = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..outer {
            body(o, ia, ib);
            for d in (0..rank).rev() {
                coords[d] += 1;
                ia += self.a_step[d];
                ib += self.b_step[d];
                if coords[d] < self.outer_shape[d] {
                    break;
                }
                coords[d] = 0;
                ia -= self.a_step[d] * self.outer_shape[d];
                ib -= self.b_step[d] * self.outer_shape[d];
            }
        }
    }

    fn forward<T: Scalar>(&self, a: &[T], b: &[T], out: &mut [T], f: impl Fn(T, T) -> T) {
        let chunk = self.chunk;
        self.for_each_outer(|o, ia, ib| {
            let dst = &mut out[o * chunk..(o + 1) * chunk];
            match (self.a_full, self.b_full) {
                (true, true) => {
                    let av = &a[ia..ia + chunk];
                    let bv = &b[ib..ib + chunk];
                    for ((d, &x), &y) in dst.iter_mut().zip(av).zip(bv) {
                        *d = f(x, y);
                    }
                }
                (true, false) => {
                    let av = &a[ia..ia + chunk];
                    let y = b[ib];
                    for (d, &x) in dst.iter_mut().zip(av) {
                        *d = f(x, y);
                    }
                }
                (false, true) => {
                    let x = a[ia];
                    let bv = &b[ib..ib + chunk];
                    for (d, &y) in dst.iter_mut().zip(bv) {
                        *d = f(x, y);
                    }
                }
                (false, false) => {
                    let v = f(a[ia], b[ib]);
                    for d in dst.iter_mut() {
                        *d = v;
                    }
                }
            }
        });
    }

    /// Accumulate d(out)/d(a) of a product: da += g * b, reduced over a's
    /// broadcast axes.
    fn backward_into_a<T: Scalar>(&self, g: &[T], b: &[T], da: &mut [T]) {
        let chunk = self.chunk;
        self.for_each_outer(|o, ia, ib| {
            let gv = &g[o * chunk..(o + 1) * chunk];
            match (self.a_full, self.b_full) {
                (true, true) => {
                    let bv = &b[ib..ib + chunk];
                    let dst = &mut da[ia..ia + chunk];
                    for ((d, &gg), &bb) in dst.iter_mut().zip(gv).zip(bv) {
                        *d += gg * bb;
                    }
                }
                (true, false) => {
                    let bb = b[ib];
                    let dst = &mut da[ia..ia + chunk];
                    for (d, &gg) in dst.iter_mut().zip(gv) {
                        *d += gg * bb;
                    }
                }
                (false, true) => {
                    let bv = &b[ib..ib + chunk];
                    let mut acc = T::zero();
                    for (&gg, &bb) in gv.iter().zip(bv) {
                        acc += gg * bb;
                    }
                    da[ia] += acc;
                }
                (false, false) => {
                    let bb = b[ib];
                    let mut acc = T::zero();
                    for &gg in gv {
                        acc += gg * bb;
                    }
                    da[ia] += acc;
                }
            }
        });
    }

    /// Accumulate g into `to` (shaped like operand a): to += g summed over
    /// a's broadcast axes.
    fn reduce_grad_into_a<T: Scalar>(&self, g: &[T], to: &mut [T]) {
        let chunk = self.chunk;
        self.for_each_outer(|o, ia, _| {
            let gv = &g[o * chunk..(o + 1) * chunk];
            if self.a_full {
                let dst = &mut to[ia..ia + chunk];
                for (d, &gg) in dst.iter_mut().zip(gv) {
                    *d += gg;
                }
            } else {
                let mut acc = T::zero();
                for &gg in gv {
                    acc += gg;
                }
                to[ia] += acc;
            }
        });
    }
}

fn copy_broadcast<T: Scalar>(src: &[T], src_shape: &[usize], dst: &mut [T], dst_shape: &[usize]) {
    // Longest contiguous suffix shared by both shapes is copied as a chunk.
    let rank = dst_shape.len();
    let mut suffix = rank;
    let mut chunk = 1usize;
    while suffix > 0 && src_shape[suffix - 1] == dst_shape[suffix - 1] {
        suffix -= 1;
        chunk *= dst_shape[suffix];
    }
    let src_strides = strides_of(src_shape);
    let step: Vec<usize> = (0..suffix)
        .map(|d| if src_shape[d] == 1 { 0 } else { src_strides[d] })
        .collect();
    let outer_shape = &dst_shape[..suffix];
    let outer: usize = outer_shape.iter().product();
    let mut coords = vec![0usize; suffix];
    let mut s = 0usize;
    for o in 0..outer {
        dst[o * chunk..(o + 1) * chunk].copy_from_slice(&src[s..s + chunk]);
        for d in (0..suffix).rev() {
            coords[d] += 1;
            s += step[d];
            if coords[d] < outer_shape[d] {
                break;
            }
            coords[d] = 0;
            s -= step[d] * outer_shape[d];
        }
    }
}

/// Sum `g` (shaped `from`) down to `to`, which differs only on singleton axes.
fn reduce_to_shape<T: Scalar>(g: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); to.iter().product()];
    BcPlan::new(from, to, from).reduce_grad_into_a(g, &mut out);
    out
}

fn reduced_shape(shape: &[usize], reduced: &[bool], keep_dims: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for (d, &e) in shape.iter().enumerate() {
        if reduced[d] {
            if keep_dims {
                out.push(1);
            }
        } else {
            out.push(e);
        }
    }
    out
}

/// Visit (input flat index, output flat index) pairs of a reduction in
/// row-major input order, advancing the output index incrementally.
fn for_each_reduce_index(shape: &[usize], map: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let numel: usize = shape.iter().product();
    let mut coords = vec![0usize; rank];
    let mut o = 0usize;
    for flat in 0..numel {
        f(flat, o);
        for d in (0..rank).rev() {
            coords[d] += 1;
            o += map[d];
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
            o -= map[d] * shape[d];
        }
    }
}

/// Per-input-dimension stride into the reduced output buffer (0 on reduced
/// axes). Valid for both keep_dims variants since extents match.
fn reduce_index_map(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let mut map = vec![0usize; shape.len()];
    let mut stride = 1usize;
    for d in (0..shape.len()).rev() {
        if !reduced[d] {
            map[d] = stride;
            stride *= shape[d];
        }
    }
    map
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::zero(); data.len()];
    let rank = shape.len();
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += perm_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= perm_strides[d] * out_shape[d];
        }
    }
    out
}

// ── Matmul kernels ──────────────────────────────────────────────────

/// C[m,n] = A[m,k] * B[k,n].
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T (contiguous row dot products).
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n].
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
    c
}

// ── Softmax kernel ──────────────────────────────────────────────────

fn softmax_forward<T: Scalar>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    mask: Option<&[bool]>,
) -> Vec<T> {
    let (outer, extent, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    if inner == 1 && mask.is_none() {
        // Contiguous slices, no masking: tight three-pass row kernel.
        for o in 0..outer {
            let src = &x[o * extent..(o + 1) * extent];
            let dst = &mut out[o * extent..(o + 1) * extent];
            let mut max = T::neg_infinity();
            for &v in src {
                if v > max {
                    max = v;
                }
            }
            let mut denom = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                let e = (v - max).exp();
                *d = e;
                denom += e;
            }
            for d in dst.iter_mut() {
                *d = *d / denom;
            }
        }
        return out;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..extent {
                if mask.map_or(true, |m| m[j]) {
                    let v = x[base + j * inner];
                    if v > max {
                        max = v;
                    }
                }
            }
            let mut denom = T::zero();
            for j in 0..extent {
                if mask.map_or(true, |m| m[j]) {
                    let e = (x[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    denom += e;
                }
            }
            for j in 0..extent {
                if mask.map_or(true, |m| m[j]) {
                    out[base + j * inner] = out[base + j * inner] / denom;
                }
            }
        }
    }
    out
}

// ── Convolution kernels ─────────────────────────────────────────────

pub(crate) struct ConvGeom {
    h: usize,
    w: usize,
    ks: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub(crate) fn new(h: usize, w: usize, ks: usize, stride: usize, dilation: usize) -> Self {
        let pad = dilation * (ks - 1) / 2;
        let h_out = (h + 2 * pad - dilation * (ks - 1) - 1) / stride + 1;
        let w_out = (w + 2 * pad - dilation * (ks - 1) - 1) / stride + 1;
        ConvGeom {
            h,
            w,
            ks,
            stride,
            dilation,
            pad,
            h_out,
            w_out,
        }
    }

    /// Valid output index range [lo, hi) for a tap offset along a dimension.
    fn valid_range(&self, off: isize, in_extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if off >= 0 {
            0
        } else {
            ((-off + s - 1) / s) as usize
        };
        let max_in = in_extent as isize - 1 - off;
        if max_in < 0 {
            return (0, 0);
        }
        let hi = ((max_in / s) as usize + 1).min(out_extent);
        (lo.min(hi), hi)
    }
}

fn conv2d_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    out: &mut [T],
    cin: usize,
    cout: usize,
    geom: &ConvGeom,
) {
    let (h, w, ks) = (geom.h, geom.w, geom.ks);
    let (ho, wo, s) = (geom.h_out, geom.w_out, geom.stride);
    for co in 0..cout {
        let out_base = co * ho * wo;
        for ci in 0..cin {
            let x_base = ci * h * w;
            for ky in 0..ks {
                let off_y = (ky * geom.dilation) as isize - geom.pad as isize;
                let (oy_lo, oy_hi) = geom.valid_range(off_y, h, ho);
                for kx in 0..ks {
                    let off_x = (kx * geom.dilation) as isize - geom.pad as isize;
                    let (ox_lo, ox_hi) = geom.valid_range(off_x, w, wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = kernel[((co * cin + ci) * ks + ky) * ks + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = (oy as isize * s as isize + off_y) as usize;
                        let xrow = x_base + iy * w;
                        let orow = out_base + oy * wo;
                        if s == 1 {
                            let ix0 = (ox_lo as isize + off_x) as usize;
                            let len = ox_hi - ox_lo;
                            let src = &x[xrow + ix0..xrow + ix0 + len];
                            let dst = &mut out[orow + ox_lo..orow + ox_lo + len];
                            for (d, &xv) in dst.iter_mut().zip(src) {
                                *d += wv * xv;
                            }
                        } else {
                            let mut ix = (ox_lo as isize * s as isize + off_x) as usize;
                            for ox in ox_lo..ox_hi {
                                out[orow + ox] += wv * x[xrow + ix];
                                ix += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input<T: Scalar>(
    g: &[T],
    kernel: &[T],
    dx: &mut [T],
    cin: usize,
    cout: usize,
    geom: &ConvGeom,
) {
    let (h, w, ks) = (geom.h, geom.w, geom.ks);
    let (ho, wo, s) = (geom.h_out, geom.w_out, geom.stride);
    for co in 0..cout {
        let g_base = co * ho * wo;
        for ci in 0..cin {
            let x_base = ci * h * w;
            for ky in 0..ks {
                let off_y = (ky * geom.dilation) as isize - geom.pad as isize;
                let (oy_lo, oy_hi) = geom.valid_range(off_y, h, ho);
                for kx in 0..ks {
                    let off_x = (kx * geom.dilation) as isize - geom.pad as isize;
                    let (ox_lo, ox_hi) = geom.valid_range(off_x, w, wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let wv = kernel[((co * cin + ci) * ks + ky) * ks + kx];
                    for oy in oy_lo..oy_hi {
                        let iy = (oy as isize * s as isize + off_y) as usize;
                        let xrow = x_base + iy * w;
                        let grow = g_base + oy * wo;
                        if s == 1 {
                            let ix0 = (ox_lo as isize + off_x) as usize;
                            let len = ox_hi - ox_lo;
                            let dst = &mut dx[xrow + ix0..xrow + ix0 + len];
                            let gsrc = &g[grow + ox_lo..grow + ox_lo + len];
                            for (d, &gv) in dst.iter_mut().zip(gsrc) {
                                *d += wv * gv;
                            }
                        } else {
                            let mut ix = (ox_lo as isize * s as isize + off_x) as usize;
                            for ox in ox_lo..ox_hi {
                                dx[xrow + ix] += wv * g[grow + ox];
                                ix += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel<T: Scalar>(
    g: &[T],
    x: &[T],
    dk: &mut [T],
    cin: usize,
    cout: usize,
    geom: &ConvGeom,
) {
    let (h, w, ks) = (geom.h, geom.w, geom.ks);
    let (ho, wo, s) = (geom.h_out, geom.w_out, geom.stride);
    for co in 0..cout {
        let g_base = co * ho * wo;
        for ci in 0..cin {
            let x_base = ci * h * w;
            for ky in 0..ks {
                let off_y = (ky * geom.dilation) as isize - geom.pad as isize;
                let (oy_lo, oy_hi) = geom.valid_range(off_y, h, ho);
                for kx in 0..ks {
                    let off_x = (kx * geom.dilation) as isize - geom.pad as isize;
                    let (ox_lo, ox_hi) = geom.valid_range(off_x, w, wo);
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = (oy as isize * s as isize + off_y) as usize;
                        let xrow = x_base + iy * w;
                        let grow = g_base + oy * wo;
                        if s == 1 {
                            let ix0 = (ox_lo as isize + off_x) as usize;
                            let len = ox_hi - ox_lo;
                            let xs = &x[xrow + ix0..xrow + ix0 + len];
                            let gs = &g[grow + ox_lo..grow + ox_lo + len];
                            for (&gv, &xv) in gs.iter().zip(xs) {
                                acc += gv * xv;
                            }
                        } else {
                            let mut ix = (ox_lo as isize * s as isize + off_x) as usize;
                            for ox in ox_lo..ox_hi {
                                acc += g[grow + ox] * x[xrow + ix];
                                ix += s;
                            }
                        }
                    }
                    dk[((co * cin + ci) * ks + ky) * ks + kx] += acc;
                }
            }
        }
    }
}

// ── Bilinear taps ───────────────────────────────────────────────────

/// For each output index: (low source index, high source index, blend t),
/// using half-pixel centers with edge clamping.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            let s = (o as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = s.floor() as usize;
                if i0 >= src - 1 {
                    (src - 1, src - 1, 0.0)
                } else {
                    (i0, i0 + 1, s - i0 as f64)
                }
            }
        })
        .collect()
}
