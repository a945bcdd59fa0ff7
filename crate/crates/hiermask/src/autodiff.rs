//! Reverse-mode automatic differentiation over dynamically-shaped `f64`
//! tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough information to push gradients back to its inputs.
//! [`Graph::backward`] walks the tape in reverse from a scalar loss and
//! accumulates gradients for every node flagged as requiring them.
//!
//! The op set is exactly what the model needs — dense linear algebra,
//! 3×3×3 convolution via im2col, pooling/upsampling, normalizations,
//! softmax and the two loss terms — all in `f64` so gradients can be
//! verified against central finite differences at tight tolerances.

use ndarray::{Array2, Array4, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix4, IxDyn, Slice};

use crate::error::{Error, Result};

/// Dynamic-dimensional `f64` tensor.
pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// 3D resampling factor `(z, y, x)`.
pub type Factor3 = [usize; 3];

#[derive(Debug)]
enum Op {
    /// Leaf (constant or parameter); no inputs.
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    /// Elementwise natural log; inputs are clamped below at `f64::MIN_POSITIVE`.
    Ln(Var),
    /// `a × b` with optional transposes, both 2D.
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `x + b[i]` broadcast over columns; x is `(r, c)`, b is `(r,)`.
    AddBiasRow(Var, Var),
    /// `x + b[j]` broadcast over rows; x is `(r, c)`, b is `(c,)`.
    AddBiasCol(Var, Var),
    /// Concatenate along axis 0 (any rank ≥ 1).
    ConcatAxis0(Vec<Var>),
    /// Rows `start..start+len` along axis 0.
    SliceAxis0 { x: Var, start: usize },
    /// Concatenate 2D arrays along axis 1.
    ConcatAxis1(Vec<Var>),
    /// Columns `start..start+len` of a 2D array.
    SliceAxis1 { x: Var, start: usize },
    Reshape(Var),
    SumAll(Var),
    /// Log-softmax along `axis` of a 2D array.
    LogSoftmax { x: Var, axis: usize },
    /// Per-row layer norm of `(r, c)` with per-column gamma/beta `(c,)`.
    LayerNormRows { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// Per-channel instance norm of `(c, z, y, x)` with per-channel
    /// gamma/beta `(c,)`.
    InstanceNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// Smooth L2 column normalization: `x / sqrt(‖x‖² + eps)`.
    L2NormCols { x: Var, eps: f64 },
    /// 3×3×3 convolution, stride 1, zero padding 1.
    /// weight is `(c_out, c_in, 3, 3, 3)`, bias `(c_out,)`.
    Conv3 { x: Var, weight: Var, bias: Var },
    AvgPool(Var, Factor3),
    UpsampleNearest(Var, Factor3),
    /// Mean negative log-likelihood: x is log-probabilities `(classes, n)`,
    /// one target per column.
    NllMean { x: Var, targets: Vec<u8> },
    /// One minus mean soft-Dice over `present` classes; x is probabilities
    /// `(classes, n)` with one target per column.
    SoftDice { x: Var, targets: Vec<u8>, present: Vec<u8>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    // Gradients live outside the nodes so backprop can borrow the tape
    // immutably while mutating them; filled by `backward`.
    grads: Vec<Option<Tensor>>,
}

fn as2(v: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("expected a 2D tensor")
}

fn as4(v: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("expected a 4D tensor")
}

fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> (usize, usize, usize) {
    let (m, ka) = if ta { (a[1], a[0]) } else { (a[0], a[1]) };
    let (kb, n) = if tb { (b[1], b[0]) } else { (b[0], b[1]) };
    assert_eq!(ka, kb, "matmul inner dims differ: {a:?} (ta={ta}) × {b:?} (tb={tb})");
    (m, ka, n)
}

/// `out += alpha * op(a) × op(b)` for 2D views.
fn gemm_into(
    alpha: f64,
    a: &ndarray::ArrayView2<'_, f64>,
    ta: bool,
    b: &ndarray::ArrayView2<'_, f64>,
    tb: bool,
    beta: f64,
    out: &mut ndarray::ArrayViewMut2<'_, f64>,
) {
    let av = if ta { a.t() } else { a.view() };
    let bv = if tb { b.t() } else { b.view() };
    ndarray::linalg::general_mat_mul(alpha, &av, &bv, beta, out);
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 0-dimensional node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.ndim(), 0, "scalar() on a non-0d tensor");
        *t.iter().next().unwrap()
    }

    /// Insert a leaf that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a leaf that accumulates gradients (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).mapv(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// Elementwise natural log of a positive tensor. Inputs are clamped
    /// below at `f64::MIN_POSITIVE` so exact zeros (e.g. underflowed
    /// probabilities) yield a large negative value instead of `-inf`.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(f64::MIN_POSITIVE).ln());
        let ng = self.needs(a);
        self.push(v, Op::Ln(a), ng)
    }

    /// 2D matrix product with optional operand transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (m, _, n) = matmul_dims(self.value(a).shape(), self.value(b).shape(), ta, tb);
        let mut out = Array2::<f64>::zeros((m, n));
        gemm_into(1.0, &as2(self.value(a)), ta, &as2(self.value(b)), tb, 0.0, &mut out.view_mut());
        let ng = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::MatMul { a, b, ta, tb }, ng)
    }

    /// Add a per-row bias vector to a 2D tensor.
    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(self.value(x)).to_owned();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("bias must be 1D");
        assert_eq!(xv.nrows(), bv.len(), "row bias length mismatch");
        let v = &xv + &bv.insert_axis(Axis(1));
        let ng = self.needs(x) || self.needs(b);
        self.push(v.into_dyn(), Op::AddBiasRow(x, b), ng)
    }

    /// Add a per-column bias vector to a 2D tensor.
    pub fn add_bias_col(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(self.value(x)).to_owned();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("bias must be 1D");
        assert_eq!(xv.ncols(), bv.len(), "column bias length mismatch");
        let v = &xv + &bv.insert_axis(Axis(0));
        let ng = self.needs(x) || self.needs(b);
        self.push(v.into_dyn(), Op::AddBiasCol(x, b), ng)
    }

    /// Concatenate along axis 0.
    pub fn concat_axis0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<'_, f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_axis0 shape mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatAxis0(parts.to_vec()), ng)
    }

    /// Slice `start..start+len` along axis 0.
    pub fn slice_axis0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(x)
            .slice_axis(Axis(0), Slice::from(start..start + len))
            .to_owned();
        let ng = self.needs(x);
        self.push(v, Op::SliceAxis0 { x, start }, ng)
    }

    /// Concatenate 2D tensors along axis 1.
    pub fn concat_axis1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<'_, f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_axis1 shape mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatAxis1(parts.to_vec()), ng)
    }

    /// Slice columns `start..start+len` of a 2D tensor.
    pub fn slice_axis1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(x)
            .slice_axis(Axis(1), Slice::from(start..start + len))
            .to_owned();
        let ng = self.needs(x);
        self.push(v, Op::SliceAxis1 { x, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Sum of all elements, as a 0-dimensional tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(ndarray::arr0(s).into_dyn(), Op::SumAll(x), ng)
    }

    /// Log-softmax along `axis` (0 or 1) of a 2D tensor.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        assert!(axis < 2, "log_softmax axis must be 0 or 1");
        let xv = as2(self.value(x));
        let mut out = xv.to_owned();
        // Iterate over lanes along `axis`.
        let lane_axis = Axis(1 - axis);
        for mut lane in out.axis_iter_mut(lane_axis) {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in lane.iter() {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            for v in lane.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::LogSoftmax { x, axis }, ng)
    }

    /// Softmax along `axis` of a 2D tensor (exp of log-softmax).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let l = self.log_softmax(x, axis);
        self.exp(l)
    }

    /// Layer norm across each row of `(r, c)`, then scale/shift by
    /// per-column `gamma`/`beta`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = as2(self.value(x));
        let g = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let b = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        assert_eq!(xv.ncols(), g.len());
        assert_eq!(xv.ncols(), b.len());
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out.into_dyn(), Op::LayerNormRows { x, gamma, beta, eps }, ng)
    }

    /// Instance norm over the spatial axes of `(c, z, y, x)`, then
    /// per-channel scale/shift.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = as4(self.value(x));
        let g = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let b = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        assert_eq!(xv.dim().0, g.len());
        assert_eq!(xv.dim().0, b.len());
        let mut out = xv.to_owned();
        for (ci, mut ch) in out.axis_iter_mut(Axis(0)).enumerate() {
            let n = ch.len() as f64;
            let mean = ch.sum() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            ch.mapv_inplace(|v| (v - mean) * inv * g[ci] + b[ci]);
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out.into_dyn(), Op::InstanceNorm { x, gamma, beta, eps }, ng)
    }

    /// L2-normalize each column of a 2D tensor, dividing by
    /// `sqrt(‖x‖² + eps)`. The additive `eps` keeps the map smooth through
    /// zero columns (which a hard norm clamp would not), so gradients stay
    /// bounded by `1/√eps` even at voxels whose features are exactly zero.
    pub fn l2_normalize_cols(&mut self, x: Var, eps: f64) -> Var {
        let xv = as2(self.value(x));
        let mut out = xv.to_owned();
        for mut col in out.columns_mut() {
            let norm = (col.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            col.mapv_inplace(|v| v / norm);
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::L2NormCols { x, eps }, ng)
    }

    /// 3×3×3 convolution with stride 1 and zero padding 1, preserving the
    /// spatial extent. `x` is `(c_in, z, y, x)`, `weight`
    /// `(c_out, c_in, 3, 3, 3)`, `bias` `(c_out,)`.
    pub fn conv3(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let xv = as4(self.value(x));
        let w = self.value(weight);
        let ws = w.shape();
        assert_eq!(ws.len(), 5, "conv weight must be 5D");
        assert_eq!(&ws[2..], &[3, 3, 3], "conv kernel must be 3x3x3");
        assert_eq!(ws[1], xv.dim().0, "conv in-channel mismatch");
        let b = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(b.len(), ws[0], "conv bias length mismatch");
        let (c_out, c_in) = (ws[0], ws[1]);
        let (_, d, h, wd) = xv.dim();
        let n = d * h * wd;

        let cols = im2col(&xv);
        let w2d = w
            .view()
            .into_shape_with_order((c_out, c_in * 27))
            .expect("conv weight not contiguous");
        let mut out2d = Array2::<f64>::zeros((c_out, n));
        ndarray::linalg::general_mat_mul(1.0, &w2d, &cols.view(), 0.0, &mut out2d.view_mut());
        for (i, mut row) in out2d.rows_mut().into_iter().enumerate() {
            let bi = b[i];
            row.mapv_inplace(|v| v + bi);
        }
        let out = out2d.into_shape_with_order((c_out, d, h, wd)).unwrap();
        let ng = self.needs(x) || self.needs(weight) || self.needs(bias);
        self.push(out.into_dyn(), Op::Conv3 { x, weight, bias }, ng)
    }

    /// Average pooling by integer factors; spatial dims must divide evenly.
    pub fn avg_pool(&mut self, x: Var, f: Factor3) -> Var {
        let xv = as4(self.value(x));
        let (c, d, h, w) = xv.dim();
        assert!(
            d % f[0] == 0 && h % f[1] == 0 && w % f[2] == 0,
            "avg_pool dims {:?} not divisible by factors {f:?}",
            (d, h, w)
        );
        let (od, oh, ow) = (d / f[0], h / f[1], w / f[2]);
        let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
        let mut out = Array4::<f64>::zeros((c, od, oh, ow));
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        out[[ci, z / f[0], y / f[1], xx / f[2]]] += xv[[ci, z, y, xx]];
                    }
                }
            }
        }
        out.mapv_inplace(|v| v * inv);
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::AvgPool(x, f), ng)
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample_nearest(&mut self, x: Var, f: Factor3) -> Var {
        let xv = as4(self.value(x));
        let (c, d, h, w) = xv.dim();
        let (od, oh, ow) = (d * f[0], h * f[1], w * f[2]);
        let mut out = Array4::<f64>::zeros((c, od, oh, ow));
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[[ci, z, y, xx]] = xv[[ci, z / f[0], y / f[1], xx / f[2]]];
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::UpsampleNearest(x, f), ng)
    }

    /// Mean negative log-likelihood over columns of log-probabilities
    /// `(classes, n)` with one target class per column.
    pub fn nll_mean(&mut self, logp: Var, targets: &[u8]) -> Var {
        let lp = as2(self.value(logp));
        assert_eq!(lp.ncols(), targets.len(), "one target per column required");
        assert!(!targets.is_empty());
        let c = lp.nrows();
        let mut total = 0.0;
        for (j, &t) in targets.iter().enumerate() {
            assert!((t as usize) < c, "target {t} out of range for {c} classes");
            total -= lp[[t as usize, j]];
        }
        let v = ndarray::arr0(total / targets.len() as f64).into_dyn();
        let ng = self.needs(logp);
        self.push(v, Op::NllMean { x: logp, targets: targets.to_vec() }, ng)
    }

    /// One minus the mean soft-Dice coefficient over `present` classes.
    ///
    /// `p` is class probabilities `(classes, n)`; `targets` holds one class
    /// per column. For class `c`,
    /// `dice_c = (2·Σ_j p[c,j]·[t_j=c] + eps) / (Σ_j p[c,j] + Σ_j [t_j=c] + eps)`.
    pub fn soft_dice(&mut self, p: Var, targets: &[u8], present: &[u8], eps: f64) -> Var {
        let pv = as2(self.value(p));
        assert_eq!(pv.ncols(), targets.len(), "one target per column required");
        assert!(!present.is_empty(), "soft_dice needs at least one present class");
        assert!(eps > 0.0);
        let c = pv.nrows();
        let mut mean_dice = 0.0;
        for &cls in present {
            assert!((cls as usize) < c, "present class {cls} out of range");
            let row = pv.row(cls as usize);
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for (j, &t) in targets.iter().enumerate() {
                let pj = row[j];
                psum += pj;
                if t == cls {
                    inter += pj;
                    gsum += 1.0;
                }
            }
            mean_dice += (2.0 * inter + eps) / (psum + gsum + eps);
        }
        mean_dice /= present.len() as f64;
        let v = ndarray::arr0(1.0 - mean_dice).into_dyn();
        let ng = self.needs(p);
        self.push(
            v,
            Op::SoftDice { x: p, targets: targets.to_vec(), present: present.to_vec(), eps },
            ng,
        )
    }

    /// Run reverse-mode accumulation from a scalar `loss` node.
    ///
    /// Errors if the loss is non-finite. After this returns, [`Graph::grad`]
    /// yields gradients for every parameter that influenced the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        assert_eq!(lt.ndim(), 0, "backward needs a scalar loss");
        let lv = *lt.iter().next().unwrap();
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("loss is {lv}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ndarray::arr0(1.0).into_dyn());

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            // Only leaf gradients are retrievable afterwards; dropping the
            // rest as soon as they are consumed halves peak memory.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. a **leaf** node `v`,
    /// if any gradient reached it. Interior-node gradients are discarded
    /// during the backward sweep to bound peak memory.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let accum = |grads: &mut Vec<Option<Tensor>>, v: Var, delta: Tensor, needed: bool| {
            if !needed {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.clone(), self.needs(*a));
                accum(grads, *b, g.clone(), self.needs(*b));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g * self.value(*b), true);
                }
                if self.needs(*b) {
                    accum(grads, *b, g * self.value(*a), true);
                }
            }
            Op::Scale(a, s) => accum(grads, *a, g.mapv(|v| v * s), self.needs(*a)),
            Op::Relu(a) => {
                if self.needs(*a) {
                    let mask = self.value(*a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accum(grads, *a, g * &mask, true);
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    accum(grads, *a, g * &self.nodes[i].value, true);
                }
            }
            Op::Ln(a) => {
                if self.needs(*a) {
                    let inv = self.value(*a).mapv(|x| 1.0 / x.max(f64::MIN_POSITIVE));
                    accum(grads, *a, g * &inv, true);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let g2 = as2(g);
                // y = A' B' where ' applies the transpose flag.
                // dA' = g B'^T, dB' = A'^T g; undo the flags per case.
                if self.needs(*a) {
                    let av = self.value(*a);
                    let mut da = Array2::<f64>::zeros((av.shape()[0], av.shape()[1]));
                    let bv = as2(self.value(*b));
                    match (ta, tb) {
                        (false, false) => gemm_into(1.0, &g2, false, &bv, true, 0.0, &mut da.view_mut()),
                        (false, true) => gemm_into(1.0, &g2, false, &bv, false, 0.0, &mut da.view_mut()),
                        (true, false) => gemm_into(1.0, &bv, false, &g2, true, 0.0, &mut da.view_mut()),
                        (true, true) => gemm_into(1.0, &bv, true, &g2, true, 0.0, &mut da.view_mut()),
                    }
                    accum(grads, *a, da.into_dyn(), true);
                }
                if self.needs(*b) {
                    let bv = self.value(*b);
                    let mut db = Array2::<f64>::zeros((bv.shape()[0], bv.shape()[1]));
                    let av = as2(self.value(*a));
                    match (ta, tb) {
                        (false, false) => gemm_into(1.0, &av, true, &g2, false, 0.0, &mut db.view_mut()),
                        (false, true) => gemm_into(1.0, &g2, true, &av, false, 0.0, &mut db.view_mut()),
                        (true, false) => gemm_into(1.0, &av, false, &g2, false, 0.0, &mut db.view_mut()),
                        (true, true) => gemm_into(1.0, &g2, true, &av, true, 0.0, &mut db.view_mut()),
                    }
                    accum(grads, *b, db.into_dyn(), true);
                }
            }
            Op::AddBiasRow(x, b) => {
                accum(grads, *x, g.clone(), self.needs(*x));
                if self.needs(*b) {
                    let db = as2(g).sum_axis(Axis(1));
                    accum(grads, *b, db.into_dyn(), true);
                }
            }
            Op::AddBiasCol(x, b) => {
                accum(grads, *x, g.clone(), self.needs(*x));
                if self.needs(*b) {
                    let db = as2(g).sum_axis(Axis(0));
                    accum(grads, *b, db.into_dyn(), true);
                }
            }
            Op::ConcatAxis0(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[0];
                    if self.needs(p) {
                        let gp = g
                            .slice_axis(Axis(0), Slice::from(start..start + len))
                            .to_owned();
                        accum(grads, p, gp, true);
                    }
                    start += len;
                }
            }
            Op::SliceAxis0 { x, start } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).raw_dim());
                    let len = self.nodes[i].value.shape()[0];
                    dx.slice_axis_mut(Axis(0), Slice::from(*start..*start + len))
                        .assign(g);
                    accum(grads, *x, dx, true);
                }
            }
            Op::ConcatAxis1(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[1];
                    if self.needs(p) {
                        let gp = g
                            .slice_axis(Axis(1), Slice::from(start..start + len))
                            .to_owned();
                        accum(grads, p, gp, true);
                    }
                    start += len;
                }
            }
            Op::SliceAxis1 { x, start } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).raw_dim());
                    let len = self.nodes[i].value.shape()[1];
                    dx.slice_axis_mut(Axis(1), Slice::from(*start..*start + len))
                        .assign(g);
                    accum(grads, *x, dx, true);
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let dx = g
                        .to_owned()
                        .into_shape_with_order(self.value(*x).raw_dim())
                        .expect("reshape backward");
                    accum(grads, *x, dx, true);
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let gv = *g.iter().next().unwrap();
                    let dx = Tensor::from_elem(self.value(*x).raw_dim(), gv);
                    accum(grads, *x, dx, true);
                }
            }
            Op::LogSoftmax { x, axis } => {
                if self.needs(*x) {
                    let y = as2(&self.nodes[i].value);
                    let g2 = as2(g);
                    let mut dx = g2.to_owned();
                    let lane_axis = Axis(1 - *axis);
                    for (mut dl, yl) in dx.axis_iter_mut(lane_axis).zip(y.axis_iter(lane_axis)) {
                        let s: f64 = dl.sum();
                        for (d, &yv) in dl.iter_mut().zip(yl.iter()) {
                            *d -= yv.exp() * s;
                        }
                    }
                    accum(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let xv = as2(self.value(*x));
                let gm = self.value(*gamma).view().into_dimensionality::<Ix1>().unwrap();
                let g2 = as2(g);
                let (r, c) = xv.dim();
                let cn = c as f64;
                let mut dx = Array2::<f64>::zeros((r, c));
                let mut dgamma = ndarray::Array1::<f64>::zeros(c);
                let mut dbeta = ndarray::Array1::<f64>::zeros(c);
                for ri in 0..r {
                    let row = xv.row(ri);
                    let grow = g2.row(ri);
                    let mean = row.sum() / cn;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cn;
                    let inv = 1.0 / (var + eps).sqrt();
                    // dgamma/dbeta and the three row statistics in one pass.
                    let mut s1 = 0.0; // Σ dxhat
                    let mut s2 = 0.0; // Σ dxhat ⊙ xhat
                    let mut dxhat = vec![0.0; c];
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        let dh = grow[j] * gm[j];
                        dxhat[j] = dh;
                        s1 += dh;
                        s2 += dh * xhat;
                    }
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        dx[[ri, j]] = inv * (dxhat[j] - s1 / cn - xhat * s2 / cn);
                    }
                }
                accum(grads, *x, dx.into_dyn(), self.needs(*x));
                accum(grads, *gamma, dgamma.into_dyn(), self.needs(*gamma));
                accum(grads, *beta, dbeta.into_dyn(), self.needs(*beta));
            }
            Op::InstanceNorm { x, gamma, beta, eps } => {
                let xv = as4(self.value(*x));
                let gm = self.value(*gamma).view().into_dimensionality::<Ix1>().unwrap();
                let g4 = as4(g);
                let (c, d, h, w) = xv.dim();
                let n = (d * h * w) as f64;
                let mut dx = Array4::<f64>::zeros((c, d, h, w));
                let mut dgamma = ndarray::Array1::<f64>::zeros(c);
                let mut dbeta = ndarray::Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let ch = xv.index_axis(Axis(0), ci);
                    let gch = g4.index_axis(Axis(0), ci);
                    let mean = ch.sum() / n;
                    let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for (gv, xv_) in gch.iter().zip(ch.iter()) {
                        let xhat = (xv_ - mean) * inv;
                        dgamma[ci] += gv * xhat;
                        dbeta[ci] += gv;
                        let dh = gv * gm[ci];
                        s1 += dh;
                        s2 += dh * xhat;
                    }
                    let mut dch = dx.index_axis_mut(Axis(0), ci);
                    for ((dv, gv), xv_) in dch.iter_mut().zip(gch.iter()).zip(ch.iter()) {
                        let xhat = (xv_ - mean) * inv;
                        let dh = gv * gm[ci];
                        *dv = inv * (dh - s1 / n - xhat * s2 / n);
                    }
                }
                accum(grads, *x, dx.into_dyn(), self.needs(*x));
                accum(grads, *gamma, dgamma.into_dyn(), self.needs(*gamma));
                accum(grads, *beta, dbeta.into_dyn(), self.needs(*beta));
            }
            Op::L2NormCols { x, eps } => {
                if self.needs(*x) {
                    let xv = as2(self.value(*x));
                    let g2 = as2(g);
                    let mut dx = Array2::<f64>::zeros(xv.dim());
                    for j in 0..xv.ncols() {
                        let col = xv.column(j);
                        let gcol = g2.column(j);
                        // y = x·s with s = (‖x‖² + eps)^{-1/2}:
                        // dx = s·g − s³·(x·g)·x.
                        let sq: f64 = col.iter().map(|v| v * v).sum();
                        let s = 1.0 / (sq + *eps).sqrt();
                        let dot: f64 =
                            col.iter().zip(gcol.iter()).map(|(x_, g_)| x_ * g_).sum();
                        let s3d = s * s * s * dot;
                        for i_ in 0..col.len() {
                            dx[[i_, j]] = s * gcol[i_] - s3d * col[i_];
                        }
                    }
                    accum(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::Conv3 { x, weight, bias } => {
                let xv = as4(self.value(*x));
                let ws = self.value(*weight).shape().to_vec();
                let (c_out, c_in) = (ws[0], ws[1]);
                let (_, d, h, w) = xv.dim();
                let n = d * h * w;
                let g2 = g
                    .view()
                    .into_shape_with_order((c_out, n))
                    .expect("conv grad not contiguous");
                if self.needs(*bias) {
                    let db = g2.sum_axis(Axis(1));
                    accum(grads, *bias, db.into_dyn(), true);
                }
                if self.needs(*weight) {
                    // Recompute cols rather than caching them: a fresh
                    // buffer per node would dominate peak memory.
                    let cols = im2col(&xv);
                    let mut dw = Array2::<f64>::zeros((c_out, c_in * 27));
                    gemm_into(1.0, &g2, false, &cols.view(), true, 0.0, &mut dw.view_mut());
                    let dw = dw.into_shape_with_order(IxDyn(&ws)).unwrap();
                    accum(grads, *weight, dw, true);
                }
                if self.needs(*x) {
                    let w2d = self
                        .value(*weight)
                        .view()
                        .into_shape_with_order((c_out, c_in * 27))
                        .unwrap();
                    let mut dcols = Array2::<f64>::zeros((c_in * 27, n));
                    gemm_into(1.0, &w2d, true, &g2, false, 0.0, &mut dcols.view_mut());
                    let dx = col2im(&dcols, c_in, d, h, w);
                    accum(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::AvgPool(x, f) => {
                if self.needs(*x) {
                    let g4 = as4(g);
                    let (c, od, oh, ow) = g4.dim();
                    let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
                    let (d, h, w) = (od * f[0], oh * f[1], ow * f[2]);
                    let mut dx = Array4::<f64>::zeros((c, d, h, w));
                    for ci in 0..c {
                        for z in 0..d {
                            for y in 0..h {
                                for xx in 0..w {
                                    dx[[ci, z, y, xx]] =
                                        g4[[ci, z / f[0], y / f[1], xx / f[2]]] * inv;
                                }
                            }
                        }
                    }
                    accum(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::UpsampleNearest(x, f) => {
                if self.needs(*x) {
                    let g4 = as4(g);
                    let (c, od, oh, ow) = g4.dim();
                    let (d, h, w) = (od / f[0], oh / f[1], ow / f[2]);
                    let mut dx = Array4::<f64>::zeros((c, d, h, w));
                    for ci in 0..c {
                        for z in 0..od {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    dx[[ci, z / f[0], y / f[1], xx / f[2]]] +=
                                        g4[[ci, z, y, xx]];
                                }
                            }
                        }
                    }
                    accum(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::NllMean { x, targets } => {
                if self.needs(*x) {
                    let gv = *g.iter().next().unwrap();
                    let shape = self.value(*x).shape().to_vec();
                    let mut dx = Array2::<f64>::zeros((shape[0], shape[1]));
                    let scale = -gv / targets.len() as f64;
                    for (j, &t) in targets.iter().enumerate() {
                        dx[[t as usize, j]] = scale;
                    }
                    accum(grads, *x, dx.into_dyn(), true);
                }
            }
            Op::SoftDice { x, targets, present, eps } => {
                if self.needs(*x) {
                    let gv = *g.iter().next().unwrap();
                    let pv = as2(self.value(*x));
                    let mut dx = Array2::<f64>::zeros(pv.dim());
                    let scale = -gv / present.len() as f64;
                    for &cls in present {
                        let row = pv.row(cls as usize);
                        let mut inter = 0.0;
                        let mut psum = 0.0;
                        let mut gsum = 0.0;
                        for (j, &t) in targets.iter().enumerate() {
                            psum += row[j];
                            if t == cls {
                                inter += row[j];
                                gsum += 1.0;
                            }
                        }
                        let num = 2.0 * inter + eps;
                        let den = psum + gsum + eps;
                        // d dice_c / d p[c,j] = (2·[t_j=c]·den − num) / den².
                        let den2 = den * den;
                        for (j, &t) in targets.iter().enumerate() {
                            let ind = if t == cls { 2.0 } else { 0.0 };
                            dx[[cls as usize, j]] += scale * (ind * den - num) / den2;
                        }
                    }
                    accum(grads, *x, dx.into_dyn(), true);
                }
            }
        }
    }
}

/// Lower a zero-padded `(c, z, y, x)` view into im2col layout
/// `(c·27, z·y·x)` for a 3×3×3 kernel with padding 1.
fn im2col(x: &ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (c, d, h, w) = x.dim();
    let (pd, ph, pw) = (d + 2, h + 2, w + 2);
    let mut padded = vec![0.0f64; c * pd * ph * pw];
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let base = ((ci * pd + z + 1) * ph + y + 1) * pw + 1;
                let row = x.slice(ndarray::s![ci, z, y, ..]);
                let row = row.as_standard_layout();
                let src = row.as_slice().unwrap();
                padded[base..base + w].copy_from_slice(src);
            }
        }
    }
    let n = d * h * w;
    let mut cols = Array2::<f64>::zeros((c * 27, n));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ((ci * 3 + kz) * 3 + ky) * 3 + kx;
                    let row_base = row * n;
                    for z in 0..d {
                        for y in 0..h {
                            let src = ((ci * pd + z + kz) * ph + y + ky) * pw + kx;
                            let dst = row_base + (z * h + y) * w;
                            cs[dst..dst + w].copy_from_slice(&padded[src..src + w]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter column gradients back to input layout.
fn col2im(dcols: &Array2<f64>, c: usize, d: usize, h: usize, w: usize) -> Array4<f64> {
    let (pd, ph, pw) = (d + 2, h + 2, w + 2);
    let mut padded = vec![0.0f64; c * pd * ph * pw];
    let n = d * h * w;
    let ds = dcols.as_slice().expect("dcols must be contiguous");
    for ci in 0..c {
        for kz in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ((ci * 3 + kz) * 3 + ky) * 3 + kx;
                    let row_base = row * n;
                    for z in 0..d {
                        for y in 0..h {
                            let dst = ((ci * pd + z + kz) * ph + y + ky) * pw + kx;
                            let src = row_base + (z * h + y) * w;
                            for xx in 0..w {
                                padded[dst + xx] += ds[src + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    let mut out = Array4::<f64>::zeros((c, d, h, w));
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let base = ((ci * pd + z + 1) * ph + y + 1) * pw + 1;
                for xx in 0..w {
                    out[[ci, z, y, xx]] = padded[base + xx];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array1, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let dist = Normal::new(0.0, 1.0).unwrap();
        let n: usize = shape.iter().product();
        Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
    }

    /// Finite-difference check of `build` (a scalar-valued graph function)
    /// against the tape gradients, for every entry of every input.
    fn fd_check<F>(inputs: &[Tensor], build: F, step: f64, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = vars
            .iter()
            .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).raw_dim())))
            .collect();

        let eval = |inputs: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let loss = build(&mut g, &vars);
            g.scalar(loss)
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for i in 0..inputs.len() {
            for j in 0..inputs[i].len() {
                let orig = work[i].as_slice().unwrap()[j];
                work[i].as_slice_mut().unwrap()[j] = orig + step;
                let plus = eval(&work);
                work[i].as_slice_mut().unwrap()[j] = orig - step;
                let minus = eval(&work);
                work[i].as_slice_mut().unwrap()[j] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic[i].as_slice().unwrap()[j];
                let denom = a.abs().max(numeric.abs());
                let rel = if denom < 1e-7 { 0.0 } else { (a - numeric).abs() / denom };
                assert!(
                    rel < tol,
                    "input {i} entry {j}: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    // To make a scalar out of any output we take a weighted sum with fixed
    // pseudo-random weights; a plain sum can hide sign/permutation errors.
    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(randn(&mut rng, g.value(x).shape()));
        let prod = g.mul(x, w);
        g.sum_all(prod)
    }

    #[test]
    fn elementwise_ops_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]);
        fd_check(&[a.clone(), b.clone()], |g, v| {
            let s = g.add(v[0], v[1]);
            let m = g.mul(s, v[0]);
            let sc = g.scale(m, 1.7);
            weighted_sum(g, sc, 11)
        }, 1e-6, 1e-6);
        // ReLU with entries bounded away from the kink.
        let c = a.mapv(|v| if v.abs() < 0.2 { v + 0.5 } else { v });
        fd_check(&[c], |g, v| {
            let r = g.relu(v[0]);
            weighted_sum(g, r, 12)
        }, 1e-6, 1e-6);
        fd_check(&[b], |g, v| {
            let e = g.exp(v[0]);
            weighted_sum(g, e, 13)
        }, 1e-6, 1e-6);
    }

    #[test]
    fn matmul_matches_dot_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[5, 2]);
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let vb = g.constant(b.clone());
        let y = g.matmul(va, vb, false, false);
        let expect = as2(&a).dot(&as2(&b));
        assert!(as2(g.value(y)).iter().zip(expect.iter()).all(|(x, e)| (x - e).abs() < 1e-12));

        // All four transpose combinations, gradient-checked.
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let sa = if ta { [5, 3] } else { [3, 5] };
            let sb = if tb { [2, 5] } else { [5, 2] };
            let a = randn(&mut rng, &sa);
            let b = randn(&mut rng, &sb);
            fd_check(&[a, b], move |g, v| {
                let y = g.matmul(v[0], v[1], ta, tb);
                weighted_sum(g, y, 20)
            }, 1e-6, 1e-6);
        }
    }

    #[test]
    fn bias_broadcasts_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[4, 6]);
        let br = randn(&mut rng, &[4]);
        let bc = randn(&mut rng, &[6]);
        fd_check(&[x.clone(), br], |g, v| {
            let y = g.add_bias_row(v[0], v[1]);
            weighted_sum(g, y, 30)
        }, 1e-6, 1e-6);
        fd_check(&[x, bc], |g, v| {
            let y = g.add_bias_col(v[0], v[1]);
            weighted_sum(g, y, 31)
        }, 1e-6, 1e-6);
    }

    #[test]
    fn concat_slice_reshape_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[4, 3]);
        fd_check(&[a.clone(), b.clone()], |g, v| {
            let c = g.concat_axis0(&[v[0], v[1], v[0]]); // reuse tests accumulation
            let s = g.slice_axis0(c, 1, 4);
            let r = g.reshape(s, &[2, 6]);
            weighted_sum(g, r, 40)
        }, 1e-6, 1e-6);
        let c = randn(&mut rng, &[3, 2]);
        let d = randn(&mut rng, &[3, 5]);
        fd_check(&[c, d], |g, v| {
            let cat = g.concat_axis1(&[v[0], v[1]]);
            let s = g.slice_axis1(cat, 1, 4);
            weighted_sum(g, s, 41)
        }, 1e-6, 1e-6);
    }

    #[test]
    fn concat_slice_values() {
        let mut g = Graph::new();
        let a = g.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = g.constant(arr2(&[[5.0, 6.0]]).into_dyn());
        let c = g.concat_axis0(&[a, b]);
        assert_eq!(g.value(c).shape(), &[3, 2]);
        let s = g.slice_axis0(c, 2, 1);
        assert_eq!(as2(g.value(s)), arr2(&[[5.0, 6.0]]));
        let s1 = g.slice_axis1(c, 1, 1);
        assert_eq!(as2(g.value(s1)), arr2(&[[2.0], [4.0], [6.0]]));
    }

    #[test]
    fn log_softmax_normalizes_both_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[4, 7]).mapv(|v| v * 3.0);
        for axis in [0usize, 1] {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let p = g.softmax(v, axis);
            let pv = as2(g.value(p)).to_owned();
            let sums = pv.sum_axis(Axis(axis));
            for s in sums.iter() {
                assert!((s - 1.0).abs() < 1e-12, "softmax sum {s}");
            }
            // Shifting logits by a constant leaves softmax unchanged.
            let mut g2 = Graph::new();
            let v2 = g2.constant(x.mapv(|t| t + 100.0));
            let p2 = g2.softmax(v2, axis);
            let pv2 = as2(g2.value(p2)).to_owned();
            assert!(pv.iter().zip(pv2.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        for axis in [0usize, 1] {
            fd_check(&[x.clone()], move |g, v| {
                let l = g.log_softmax(v[0], axis);
                weighted_sum(g, l, 50 + axis as u64)
            }, 1e-6, 1e-5);
            fd_check(&[x.clone()], move |g, v| {
                let p = g.softmax(v[0], axis);
                weighted_sum(g, p, 52 + axis as u64)
            }, 1e-6, 1e-5);
        }
    }

    #[test]
    fn layer_norm_stats_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[3, 8]).mapv(|v| 2.0 * v + 1.0);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let gamma = g.constant(Tensor::ones(IxDyn(&[8])));
        let beta = g.constant(Tensor::zeros(IxDyn(&[8])));
        let y = g.layer_norm_rows(vx, gamma, beta, 1e-10);
        for row in as2(g.value(y)).rows() {
            let mean = row.sum() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let gm = randn(&mut rng, &[8]);
        let bt = randn(&mut rng, &[8]);
        fd_check(&[x, gm, bt], |g, v| {
            let y = g.layer_norm_rows(v[0], v[1], v[2], 1e-5);
            weighted_sum(g, y, 60)
        }, 1e-6, 2e-5);
    }

    #[test]
    fn instance_norm_stats_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[2, 3, 4, 2]).mapv(|v| 3.0 * v - 0.7);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let gamma = g.constant(Tensor::ones(IxDyn(&[2])));
        let beta = g.constant(Tensor::zeros(IxDyn(&[2])));
        let y = g.instance_norm(vx, gamma, beta, 1e-10);
        let yv = as4(g.value(y)).to_owned();
        for ci in 0..2 {
            let ch = yv.index_axis(Axis(0), ci);
            let n = ch.len() as f64;
            let mean = ch.sum() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let gm = randn(&mut rng, &[2]);
        let bt = randn(&mut rng, &[2]);
        fd_check(&[x, gm, bt], |g, v| {
            let y = g.instance_norm(v[0], v[1], v[2], 1e-5);
            weighted_sum(g, y, 70)
        }, 1e-6, 2e-5);
    }

    #[test]
    fn l2_normalize_unit_norms_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[5, 6]);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let eps = 1e-8;
        let y = g.l2_normalize_cols(vx, eps);
        let xv = as2(&x);
        for (j, col) in as2(g.value(y)).columns().into_iter().enumerate() {
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Smooth normalization: the output norm is ‖x‖ / √(‖x‖² + eps).
            let sq: f64 = xv.column(j).iter().map(|v| v * v).sum();
            let expect = sq.sqrt() / (sq + eps).sqrt();
            assert!((norm - expect).abs() < 1e-12);
            assert!((norm - 1.0).abs() < 1e-6);
        }
        fd_check(&[x], |g, v| {
            let y = g.l2_normalize_cols(v[0], 1e-8);
            weighted_sum(g, y, 80)
        }, 1e-6, 1e-5);
        // A zero column maps to zero and the map is smooth through it.
        let mut z = Tensor::zeros(IxDyn(&[3, 2]));
        z.as_slice_mut().unwrap()[0] = 1.0; // column 0 nonzero, column 1 zero
        {
            let mut g = Graph::new();
            let vz = g.constant(z.clone());
            let y = g.l2_normalize_cols(vz, 1e-3);
            let yv = as2(g.value(y)).to_owned();
            assert_eq!(yv[[0, 1]], 0.0);
            assert_eq!(yv[[1, 1]], 0.0);
        }
        fd_check(&[z], |g, v| {
            let y = g.l2_normalize_cols(v[0], 1e-3);
            weighted_sum(g, y, 81)
        }, 1e-7, 1e-5);
    }

    /// Naive triple-loop 3×3×3 convolution used as a reference.
    fn conv3_reference(x: &Array4<f64>, w: &Tensor, b: &Array1<f64>) -> Array4<f64> {
        let (ci_n, d, h, wd) = x.dim();
        let co_n = w.shape()[0];
        let mut out = Array4::<f64>::zeros((co_n, d, h, wd));
        for co in 0..co_n {
            for z in 0..d as isize {
                for y in 0..h as isize {
                    for xx in 0..wd as isize {
                        let mut acc = b[co];
                        for ci in 0..ci_n {
                            for kz in -1isize..=1 {
                                for ky in -1isize..=1 {
                                    for kx in -1isize..=1 {
                                        let (sz, sy, sx) = (z + kz, y + ky, xx + kx);
                                        if sz < 0 || sy < 0 || sx < 0
                                            || sz >= d as isize || sy >= h as isize || sx >= wd as isize
                                        {
                                            continue;
                                        }
                                        acc += x[[ci, sz as usize, sy as usize, sx as usize]]
                                            * w[[co, ci, (kz + 1) as usize, (ky + 1) as usize, (kx + 1) as usize]];
                                    }
                                }
                            }
                        }
                        out[[co, z as usize, y as usize, xx as usize]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Deliberately non-cubic spatial dims to catch axis-order mistakes.
        let x = randn(&mut rng, &[2, 5, 4, 3]);
        let w = randn(&mut rng, &[3, 2, 3, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let vw = g.constant(w.clone());
        let vb = g.constant(b.clone());
        let y = g.conv3(vx, vw, vb);
        let expect = conv3_reference(
            &as4(&x).to_owned(),
            &w,
            &b.view().into_dimensionality::<Ix1>().unwrap().to_owned(),
        );
        let got = as4(g.value(y));
        assert_eq!(got.dim(), expect.dim());
        for (a, e) in got.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn conv3_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[1, 4, 4, 4]);
        let mut w = Tensor::zeros(IxDyn(&[1, 1, 3, 3, 3]));
        w[[0, 0, 1, 1, 1]] = 1.0;
        let b = Tensor::zeros(IxDyn(&[1]));
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let vw = g.constant(w);
        let vb = g.constant(b);
        let y = g.conv3(vx, vw, vb);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn conv3_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 4, 3, 3]);
        let w = randn(&mut rng, &[2, 2, 3, 3, 3]).mapv(|v| v * 0.3);
        let b = randn(&mut rng, &[2]);
        fd_check(&[x, w, b], |g, v| {
            let y = g.conv3(v[0], v[1], v[2]);
            weighted_sum(g, y, 90)
        }, 1e-6, 1e-5);
    }

    #[test]
    fn pool_and_upsample_values_and_fd() {
        let mut x = Array4::<f64>::zeros((1, 2, 2, 2));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64;
        }
        let mut g = Graph::new();
        let vx = g.constant(x.into_dyn());
        let p = g.avg_pool(vx, [2, 2, 2]);
        assert_eq!(g.value(p).shape(), &[1, 1, 1, 1]);
        assert!((g.value(p)[[0, 0, 0, 0]] - 3.5).abs() < 1e-12);
        let u = g.upsample_nearest(p, [2, 2, 2]);
        assert_eq!(g.value(u).shape(), &[1, 2, 2, 2]);
        assert!(g.value(u).iter().all(|v| (v - 3.5).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Anisotropic factors exercise per-axis bookkeeping.
        let x = randn(&mut rng, &[2, 4, 6, 2]);
        fd_check(&[x.clone()], |g, v| {
            let p = g.avg_pool(v[0], [2, 3, 1]);
            weighted_sum(g, p, 91)
        }, 1e-6, 1e-6);
        fd_check(&[x], |g, v| {
            let u = g.upsample_nearest(v[0], [1, 2, 3]);
            weighted_sum(g, u, 92)
        }, 1e-6, 1e-6);
    }

    #[test]
    fn nll_known_value_and_fd() {
        // Uniform log-probs over 4 classes: loss = ln 4 regardless of target.
        let c = 4;
        let n = 6;
        let logp = Tensor::from_elem(IxDyn(&[c, n]), (1.0f64 / c as f64).ln());
        let targets: Vec<u8> = (0..n as u8).map(|j| j % c as u8).collect();
        let mut g = Graph::new();
        let v = g.constant(logp);
        let l = g.nll_mean(v, &targets);
        assert!((g.scalar(l) - (c as f64).ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, &[3, 5]);
        let targets = vec![0u8, 2, 1, 2, 0];
        fd_check(&[x], move |g, v| {
            let lp = g.log_softmax(v[0], 0);
            g.nll_mean(lp, &targets)
        }, 1e-6, 1e-6);
    }

    #[test]
    fn soft_dice_perfect_prediction_is_zero_loss() {
        // One-hot columns equal to targets: every present dice = 1.
        let targets = vec![1u8, 2, 1, 0];
        let mut p = Tensor::zeros(IxDyn(&[3, 4]));
        for (j, &t) in targets.iter().enumerate() {
            p[[t as usize, j]] = 1.0;
        }
        let mut g = Graph::new();
        let v = g.constant(p);
        let l = g.soft_dice(v, &targets, &[1, 2], 1.0);
        assert!(g.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_matches_naive_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let raw = randn(&mut rng, &[4, 9]);
        let targets = vec![0u8, 1, 2, 3, 1, 2, 0, 3, 2];
        let present = vec![1u8, 2, 3];
        let eps = 1.0;
        // Naive reimplementation straight from the definition.
        let naive = |p: &Tensor| -> f64 {
            let p = as2(p);
            let mut mean = 0.0;
            for &c in &present {
                let mut inter = 0.0;
                let mut psum = 0.0;
                let mut gsum = 0.0;
                for j in 0..targets.len() {
                    psum += p[[c as usize, j]];
                    if targets[j] == c {
                        inter += p[[c as usize, j]];
                        gsum += 1.0;
                    }
                }
                mean += (2.0 * inter + eps) / (psum + gsum + eps);
            }
            1.0 - mean / present.len() as f64
        };
        let mut g = Graph::new();
        let v = g.constant(raw.clone());
        let p = g.softmax(v, 0);
        let pv = g.value(p).clone();
        let l = g.soft_dice(p, &targets, &present, eps);
        assert!((g.scalar(l) - naive(&pv)).abs() < 1e-12);

        let t2 = targets.clone();
        let pr2 = present.clone();
        fd_check(&[raw], move |g, v| {
            let p = g.softmax(v[0], 0);
            g.soft_dice(p, &t2, &pr2, eps)
        }, 1e-6, 1e-6);
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut g = Graph::new();
        let x = g.param(ndarray::arr0(f64::MAX).into_dyn());
        let y = g.exp(x); // overflows to +inf
        let err = g.backward(y);
        assert!(matches!(err, Err(crate::error::Error::Divergence(_))));
    }

    #[test]
    fn grad_accumulates_across_uses() {
        // y = sum(x ⊙ x) via two uses of x: dy/dx = 2x.
        let x = arr1(&[1.0, -2.0, 3.0]).into_dyn();
        let mut g = Graph::new();
        let vx = g.param(x.clone());
        let prod = g.mul(vx, vx);
        let y = g.sum_all(prod);
        g.backward(y).unwrap();
        let grad = g.grad(vx).unwrap();
        for (gv, xv) in grad.iter().zip(x.iter()) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let p = g.param(arr1(&[2.0]).into_dyn());
        let c = g.constant(arr1(&[3.0]).into_dyn());
        let m = g.mul(p, c);
        let l = g.sum_all(m);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap()[[0]], 3.0);
    }

    #[test]
    fn scalar_helpers() {
        let mut g = Graph::new();
        let x = g.constant(Array3::<f64>::from_elem((2, 2, 2), 0.5).into_dyn());
        let s = g.sum_all(x);
        assert!((g.scalar(s) - 4.0).abs() < 1e-12);
        assert_eq!(g.len(), 2);
        assert!(!g.is_empty());
    }
}
