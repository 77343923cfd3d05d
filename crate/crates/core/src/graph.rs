//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every primitive applied to its [`Var`] handles. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every node that tracks them. Tensors are treated
//! as matrices (`rows x cols`); scalars are `1 x 1`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{cast, Real, Tensor};

/// Guard used by layer normalisation and L2 normalisation.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    MeanAxis(Var, usize),
    RowPool {
        x: Var,
        groups: Vec<Vec<(usize, T)>>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Attention {
        qkv: Var,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    tracks: bool,
}

/// Parameters registered on a graph, addressable by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::KeyMismatch(format!("parameter `{name}` is not bound")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Gradients of every bound parameter that the loss actually reached.
    pub fn collect<T: Real>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn check_finite<T: Real>(op: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

fn rank2<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c: T = cast(0.797_884_560_802_865_4);
    let k: T = cast(0.044715);
    let half: T = cast(0.5);
    let three: T = cast(3.0);
    let two = T::one() + T::one();
    let inner = c * (x + k * x * x * x);
    // tanh through exp; saturates cleanly to +-1 when exp overflows
    let t = T::one() - two / ((two * inner).exp() + T::one());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
    (y, dy)
}

/// `c (+)= a @ b` for contiguous row-major operands, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    // a is m x k (or k x m stored when a_t), b is k x n (or n x k when b_t)
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn tracks_gradient(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    fn push(&mut self, op_name: &str, value: Tensor<T>, op: Op<T>, tracks: bool) -> Result<Var> {
        check_finite(op_name, value.data())?;
        self.nodes.push(Node {
            value: Arc::new(value),
            op: if tracks { op } else { Op::Leaf },
            tracks,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tr(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracks: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            tracks: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register every entry of `params`, tracking gradients when `trainable`.
    pub fn bind(&mut self, params: &ParamSet<T>, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let var = if trainable {
                    self.param(Arc::clone(t))
                } else {
                    self.constant(Arc::clone(t))
                };
                (name.to_string(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Copy of `v` with lineage cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let tracks = self.tr(a) || self.tr(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracks)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let tracks = self.tr(a);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), tracks)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        let tracks = self.tr(a) || self.tr(b);
        self.push("add", out, Op::Add(a, b), tracks)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        let tracks = self.tr(a) || self.tr(b);
        self.push("sub", out, Op::Sub(a, b), tracks)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        let tracks = self.tr(a) || self.tr(b);
        self.push("mul", out, Op::Mul(a, b), tracks)
    }

    /// `x + bias` with a `1 x c` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = rank2("add_row", self.value(x))?;
        let tb = self.value(bias);
        if tb.len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: vec![r, c],
                rhs: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += *bv;
            }
        }
        let tracks = self.tr(x) || self.tr(bias);
        self.push("add_row", Tensor::new(vec![r, c], out)?, Op::AddRow(x, bias), tracks)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| *v * factor).collect())?;
        let tracks = self.tr(x);
        self.push("scale", out, Op::Scale(x, factor), tracks)
    }

    /// Multiply by a `1 x 1` tensor variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let factor = sv.item();
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| *v * factor).collect())?;
        let tracks = self.tr(x) || self.tr(s);
        self.push("scale_by", out, Op::ScaleBy(x, s), tracks)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| gelu_parts(*v).0).collect())?;
        let tracks = self.tr(x);
        self.push("gelu", out, Op::Gelu(x), tracks)
    }

    /// Per-row layer normalisation with learnable affine (`1 x c` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = rank2("layer_norm", self.value(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let eps: T = cast(NORM_EPS);
        let cn: T = cast(c as f64);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let tracks = self.tr(x) || self.tr(gamma) || self.tr(beta);
        self.push(
            "layer_norm",
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            tracks,
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("softmax", self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let tracks = self.tr(x);
        self.push("softmax", Tensor::new(vec![r, c], out)?, Op::Softmax(x), tracks)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("log_softmax", self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<T>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let tracks = self.tr(x);
        self.push("log_softmax", Tensor::new(vec![r, c], out)?, Op::LogSoftmax(x), tracks)
    }

    /// Mean over `axis` (0: collapse rows to `1 x c`, 1: collapse columns to `r x 1`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = rank2("mean_axis", self.value(x))?;
        let src = self.value(x).data();
        let (shape, out) = match axis {
            0 => {
                let mut out = vec![T::zero(); c];
                for row in src.chunks(c) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += *v;
                    }
                }
                let n: T = cast(r as f64);
                out.iter_mut().for_each(|o| *o /= n);
                (vec![1, c], out)
            }
            1 => {
                let n: T = cast(c as f64);
                (vec![r, 1], src.chunks(c).map(|row| row.iter().copied().sum::<T>() / n).collect())
            }
            _ => return Err(Error::invalid(format!("mean_axis: axis {axis} out of range"))),
        };
        let tracks = self.tr(x);
        self.push("mean_axis", Tensor::new(shape, out)?, Op::MeanAxis(x, axis), tracks)
    }

    /// Weighted row pooling: output row `g` is `sum(w * x[r])` over `groups[g]`.
    pub fn row_pool(&mut self, x: Var, groups: Vec<Vec<(usize, T)>>) -> Result<Var> {
        let (r, c) = rank2("row_pool", self.value(x))?;
        if groups.is_empty() {
            return Err(Error::invalid("row_pool: no groups"));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            let dst = &mut out[g * c..(g + 1) * c];
            for &(row, w) in members {
                if row >= r {
                    return Err(Error::IndexOutOfRange { op: "row_pool", index: row, len: r });
                }
                for (o, v) in dst.iter_mut().zip(&src[row * c..(row + 1) * c]) {
                    *o += w * *v;
                }
            }
        }
        let tracks = self.tr(x);
        let shape = vec![groups.len(), c];
        self.push("row_pool", Tensor::new(shape, out)?, Op::RowPool { x, groups }, tracks)
    }

    /// Mean of each consecutive block of `seg` rows.
    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Result<Var> {
        let r = self.shape(x)[0];
        if seg == 0 || !r.is_multiple_of(seg) {
            return Err(Error::invalid(format!("segment_mean: {r} rows not divisible by {seg}")));
        }
        let w: T = cast(1.0 / seg as f64);
        let groups = (0..r / seg).map(|g| (g * seg..(g + 1) * seg).map(|i| (i, w)).collect()).collect();
        self.row_pool(x, groups)
    }

    /// `v / max(|v|, eps)` per row.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("l2_normalize", self.value(x))?;
        let eps: T = cast(NORM_EPS);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let d = n.max(eps);
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(n);
        }
        let tracks = self.tr(x);
        self.push("l2_normalize", Tensor::new(vec![r, c], out)?, Op::L2Normalize { x, norms }, tracks)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = rank2("gather_rows", self.value(x))?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfRange { op: "gather_rows", index: i, len: r });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let tracks = self.tr(x);
        self.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), c], out)?,
            Op::Gather { x, idx: idx.to_vec() },
            tracks,
        )
    }

    /// Stack along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows: no inputs"))?;
        let (_, c) = rank2("concat_rows", self.value(first))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = rank2("concat_rows", self.value(p))?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        let tracks = parts.iter().any(|p| self.tr(*p));
        self.push("concat_rows", Tensor::new(vec![rows, c], out)?, Op::Concat(parts.to_vec()), tracks)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.ln()).collect())?;
        let tracks = self.tr(x);
        self.push("log", out, Op::Log(x), tracks)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.exp()).collect())?;
        let tracks = self.tr(x);
        self.push("exp", out, Op::Exp(x), tracks)
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let tracks = self.tr(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), tracks)
    }

    /// Multi-head self-attention core over independent sequences of length
    /// `seq`. `qkv` is `(B*seq) x 3d` with query, key and value blocks laid
    /// out side by side; the result is `(B*seq) x d`.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize) -> Result<Var> {
        let (rows, c3) = rank2("attention", self.value(qkv))?;
        if c3 % 3 != 0 || seq == 0 || rows % seq != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: vec![rows, c3],
                rhs: vec![seq, heads],
            });
        }
        let d = c3 / 3;
        let dh = d / heads;
        let batch = rows / seq;
        let scale: T = cast(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv).data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * c3;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // scores = q @ k^T
                unsafe {
                    T::gemm(
                        seq,
                        dh,
                        seq,
                        scale,
                        src.as_ptr().add(base + h * dh),
                        c3 as isize,
                        1,
                        src.as_ptr().add(base + d + h * dh),
                        1,
                        c3 as isize,
                        T::zero(),
                        p.as_mut_ptr(),
                        seq as isize,
                        1,
                    );
                }
                for row in p.chunks_mut(seq) {
                    softmax_in_place(row);
                }
                // out = p @ v
                unsafe {
                    T::gemm(
                        seq,
                        seq,
                        dh,
                        T::one(),
                        p.as_ptr(),
                        seq as isize,
                        1,
                        src.as_ptr().add(base + 2 * d + h * dh),
                        c3 as isize,
                        1,
                        T::zero(),
                        out.as_mut_ptr().add(b * seq * d + h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let tracks = self.tr(qkv);
        self.push(
            "attention",
            Tensor::new(vec![rows, d], out)?,
            Op::Attention { qkv, seq, heads, probs },
            tracks,
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.tr(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracks {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.tr(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_into(m, n, k, dy, false, bv, true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_into(k, m, n, av, true, dy, false, gb, true);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += dy[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d);
                }
                if let Some(g) = self.acc(grads, *b) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g -= *d);
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d);
                }
                let c = self.value(*bias).len();
                if let Some(g) = self.acc(grads, *bias) {
                    for row in dy.chunks(c) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += *d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(bv) {
                        *g += *d * *o;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(av) {
                        *g += *d * *o;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d * *f);
                }
            }
            Op::ScaleBy(x, s) => {
                let f = self.value(*s).item();
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d * f);
                }
                if let Some(g) = self.acc(grads, *s) {
                    g[0] += dy.iter().zip(xv).map(|(d, v)| *d * *v).sum::<T>();
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(xv) {
                        *g += *d * gelu_parts(*v).1;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                if let Some(g) = self.acc(grads, *gamma) {
                    for (drow, hrow) in dy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += drow[j] * hrow[j];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for drow in dy.chunks(c) {
                        g.iter_mut().zip(drow).for_each(|(g, d)| *g += *d);
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    let cn: T = cast(c as f64);
                    for (i, (drow, hrow)) in dy.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            let dh = drow[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= cn;
                        mean_dh_h /= cn;
                        let grow = &mut g[i * c..(i + 1) * c];
                        for j in 0..c {
                            let dh = drow[j] * gv[j];
                            grow[j] += rstd[i] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = self.value(*x).cols();
                if let Some(g) = self.acc(grads, *x) {
                    for ((grow, drow), yrow) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                        let dot = drow.iter().zip(yrow).map(|(d, p)| *d * *p).sum::<T>();
                        for j in 0..c {
                            grow[j] += yrow[j] * (drow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = self.value(*x).cols();
                if let Some(g) = self.acc(grads, *x) {
                    for ((grow, drow), yrow) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                        let total = drow.iter().copied().sum::<T>();
                        for j in 0..c {
                            grow[j] += drow[j] - yrow[j].exp() * total;
                        }
                    }
                }
            }
            Op::MeanAxis(x, axis) => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                if let Some(g) = self.acc(grads, *x) {
                    if *axis == 0 {
                        let n: T = cast(r as f64);
                        for grow in g.chunks_mut(c) {
                            grow.iter_mut().zip(dy).for_each(|(g, d)| *g += *d / n);
                        }
                    } else {
                        let n: T = cast(c as f64);
                        for (grow, d) in g.chunks_mut(c).zip(dy) {
                            grow.iter_mut().for_each(|g| *g += *d / n);
                        }
                    }
                }
            }
            Op::RowPool { x, groups } => {
                let c = self.value(*x).cols();
                if let Some(g) = self.acc(grads, *x) {
                    for (gi, members) in groups.iter().enumerate() {
                        let drow = &dy[gi * c..(gi + 1) * c];
                        for &(row, w) in members {
                            g[row * c..(row + 1) * c]
                                .iter_mut()
                                .zip(drow)
                                .for_each(|(g, d)| *g += w * *d);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let c = self.value(*x).cols();
                let eps: T = cast(NORM_EPS);
                if let Some(g) = self.acc(grads, *x) {
                    for (i, n) in norms.iter().enumerate() {
                        let (drow, yrow) = (&dy[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                        let grow = &mut g[i * c..(i + 1) * c];
                        if *n > eps {
                            let dot = drow.iter().zip(yrow).map(|(d, p)| *d * *p).sum::<T>();
                            for j in 0..c {
                                grow[j] += (drow[j] - yrow[j] * dot) / *n;
                            }
                        } else {
                            for j in 0..c {
                                grow[j] += drow[j] / eps;
                            }
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let c = self.value(*x).cols();
                if let Some(g) = self.acc(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        g[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&dy[k * c..(k + 1) * c])
                            .for_each(|(g, d)| *g += *d);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(g) = self.acc(grads, p) {
                        g.iter_mut().zip(&dy[offset..offset + len]).for_each(|(g, d)| *g += *d);
                    }
                    offset += len;
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(xv) {
                        *g += *d / *v;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(y) {
                        *g += *d * *v;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Attention { qkv, seq, heads, probs } => {
                let seq = *seq;
                let heads = *heads;
                let src = self.value(*qkv).data();
                let c3 = self.value(*qkv).cols();
                let d = c3 / 3;
                let dh = d / heads;
                let batch = self.value(*qkv).rows() / seq;
                let scale: T = cast(1.0 / (dh as f64).sqrt());
                let Some(g) = self.acc(grads, *qkv) else { return };
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = b * seq * c3;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        let dout = dy[b * seq * d + h * dh..].as_ptr();
                        unsafe {
                            // dv += p^T @ dout
                            T::gemm(
                                seq, seq, dh, T::one(),
                                p.as_ptr(), 1, seq as isize,
                                dout, d as isize, 1,
                                T::one(),
                                g.as_mut_ptr().add(base + 2 * d + h * dh), c3 as isize, 1,
                            );
                            // dp = dout @ v^T
                            T::gemm(
                                seq, dh, seq, T::one(),
                                dout, d as isize, 1,
                                src.as_ptr().add(base + 2 * d + h * dh), 1, c3 as isize,
                                T::zero(),
                                dp.as_mut_ptr(), seq as isize, 1,
                            );
                        }
                        // ds = p * (dp - rowsum(dp * p)), folded with the score scale
                        for (prow, drow) in p.chunks(seq).zip(dp.chunks_mut(seq)) {
                            let dot = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum::<T>();
                            for (pv, dv) in prow.iter().zip(drow.iter_mut()) {
                                *dv = *pv * (*dv - dot) * scale;
                            }
                        }
                        unsafe {
                            // dq += ds @ k
                            T::gemm(
                                seq, seq, dh, T::one(),
                                dp.as_ptr(), seq as isize, 1,
                                src.as_ptr().add(base + d + h * dh), c3 as isize, 1,
                                T::one(),
                                g.as_mut_ptr().add(base + h * dh), c3 as isize, 1,
                            );
                            // dk += ds^T @ q
                            T::gemm(
                                seq, seq, dh, T::one(),
                                dp.as_ptr(), 1, seq as isize,
                                src.as_ptr().add(base + h * dh), c3 as isize, 1,
                                T::one(),
                                g.as_mut_ptr().add(base + d + h * dh), c3 as isize, 1,
                            );
                        }
                    }
                }
            }
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
