//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] records every op applied to its [`Var`]s in execution order,
//! which is a topological order by construction.  [`Graph::backward`] walks
//! the tape once in reverse and accumulates vector-Jacobian products into the
//! inputs of each node; fan-out accumulates additively.  Nodes that do not
//! depend on any differentiable leaf are skipped.
//!
//! One graph belongs to one thread for one forward pass.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::kernels::{self, AttnGeom, AttnGrads, AttnMask, ConvGeom};
use crate::tensor::{sigmoid, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Silu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SwapLeading {
        x: Var,
        a: usize,
        b: usize,
        rest: usize,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Upsample2 {
        x: Var,
        dims: [usize; 4],
    },
    GroupNorm {
        x: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        dims: [usize; 3],
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: AttnMask,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    RelBias {
        table: Var,
        heads: usize,
        len: usize,
        radius: usize,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

pub struct Graph<T: Real> {
    tape: RefCell<Tape<T>>,
    taping: bool,
    params_trainable: bool,
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; leaves the output does not reach get zeros.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.dims[v.0]))
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// `(name, gradient)` for every named parameter, sorted by name.
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(n, v)| (n.clone(), self.get(*v)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A taping graph; named parameters are differentiable.
    pub fn new() -> Self {
        Graph {
            tape: RefCell::new(Tape {
                nodes: Vec::new(),
                params: HashMap::new(),
            }),
            taping: true,
            params_trainable: true,
        }
    }

    /// A taping graph in which parameters are constants, for gradients with
    /// respect to inputs only.
    pub fn input_grad() -> Self {
        Graph {
            params_trainable: false,
            ..Self::new()
        }
    }

    /// Forward evaluation only; `backward` is a usage error.
    pub fn inference() -> Self {
        Graph {
            taping: false,
            params_trainable: false,
            ..Self::new()
        }
    }

    pub fn is_taping(&self) -> bool {
        self.taping
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.tape.borrow().nodes[v.0].value.clone()
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.tape.borrow().nodes[v.0].value.dims().to_vec()
    }

    fn needs(&self, v: Var) -> bool {
        self.tape.borrow().nodes[v.0].needs_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        let op = if self.taping { op } else { Op::Leaf };
        tape.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.taping,
        });
        Var(id)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A named parameter leaf; asking twice for the same name yields the same var.
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.tape.borrow().params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, self.params_trainable);
        self.tape.borrow_mut().params.insert(name.to_string(), v);
        v
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let y = self.value(x).map(f);
        self.push(y, op, self.needs(x))
    }

    fn binary(&self, a: Var, b: Var, t: Result<Tensor<T>>, op: Op<T>) -> Result<Var> {
        let y = t?;
        Ok(self.push(y, op, self.needs(a) || self.needs(b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(&self.value(b));
        self.binary(a, b, t, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).sub(&self.value(b));
        self.binary(a, b, t, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).mul(&self.value(b));
        self.binary(a, b, t, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).div(&self.value(b));
        self.binary(a, b, t, Op::Div(a, b))
    }

    pub fn add_scalar(&self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn mul_scalar(&self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::MulScalar(x, s))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        let y = self.value(x).log()?;
        Ok(self.push(y, Op::Log(x), self.needs(x)))
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        let y = self.value(x).sqrt()?;
        Ok(self.push(y, Op::Sqrt(x), self.needs(x)))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.needs(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x), self.needs(x))
    }

    pub fn reshape(&self, x: Var, dims: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(dims)?;
        Ok(self.push(y, Op::Reshape(x), self.needs(x)))
    }

    /// `[a, b, ...rest] -> [b, a, ...rest]`.
    pub fn swap_leading(&self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.dims();
        if d.len() < 2 {
            return Err(shape_err!("swap_leading needs rank >= 2, got {d:?}"));
        }
        let (a, b) = (d[0], d[1]);
        let rest: usize = d[2..].iter().product();
        let mut nd = d.to_vec();
        nd.swap(0, 1);
        let y = Tensor::from_parts(nd, kernels::swap_leading(t.data(), a, b, rest));
        Ok(self.push(y, Op::SwapLeading { x, a, b, rest }, self.needs(x)))
    }

    /// Concatenate along the last axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = vals.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let lead = &first.dims()[..first.dims().len() - 1];
        let mut widths = Vec::new();
        for v in &vals {
            let d = v.dims();
            if &d[..d.len() - 1] != lead {
                return Err(shape_err!("concat: {:?} vs {:?}", d, first.dims()));
            }
            widths.push(d[d.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut dims = lead.to_vec();
        dims.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(dims, out),
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            needs,
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.dims(), tb.dims());
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(shape_err!("matmul: {da:?} x {db:?}"));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let y = Tensor::from_parts(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n));
        Ok(self.push(
            y,
            Op::Matmul { a, b, m, k, n },
            self.needs(a) || self.needs(b),
        ))
    }

    /// Per-frame 3x3 convolution, zero padding 1; `input [F,H,W,Cin]`,
    /// `kernel [3,3,Cin,Cout]`, `bias [Cout]`.
    pub fn conv_spatial(&self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let (dx, dk) = (tx.dims(), tk.dims());
        if dx.len() != 4 || dk.len() != 4 || dk[0] != 3 || dk[1] != 3 {
            return Err(shape_err!("conv_spatial: input {dx:?}, kernel {dk:?}"));
        }
        if dk[2] != dx[3] {
            return Err(shape_err!(
                "conv_spatial: input has {} channels, kernel expects {}",
                dx[3],
                dk[2]
            ));
        }
        if tb.dims() != [dk[3]] {
            return Err(shape_err!("conv_spatial: bias {:?} for {} outputs", tb.dims(), dk[3]));
        }
        if stride == 0 {
            return Err(shape_err!("conv_spatial: zero stride"));
        }
        let geom = ConvGeom {
            frames: dx[0],
            h: dx[1],
            w: dx[2],
            cin: dx[3],
            cout: dk[3],
            stride,
        };
        let y = kernels::conv3x3(tx.data(), tk.data(), tb.data(), geom);
        let y = Tensor::from_parts(vec![dx[0], geom.out_h(), geom.out_w(), dk[3]], y);
        let needs = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            y,
            Op::Conv {
                x,
                kernel,
                bias,
                geom,
            },
            needs,
        ))
    }

    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.dims();
        if d.len() != 4 {
            return Err(shape_err!("upsample2: {d:?}"));
        }
        let dims = [d[0], d[1], d[2], d[3]];
        let y = kernels::upsample2(t.data(), d[0], d[1], d[2], d[3]);
        let y = Tensor::from_parts(vec![d[0], 2 * d[1], 2 * d[2], d[3]], y);
        Ok(self.push(y, Op::Upsample2 { x, dims }, self.needs(x)))
    }

    /// Group normalization with statistics per frame; input `[F, ..., C]`.
    pub fn group_norm(&self, x: Var, groups: usize, scale: Var, shift: Var) -> Result<Var> {
        let (tx, ts, tb) = (self.value(x), self.value(scale), self.value(shift));
        let d = tx.dims();
        let c = *d.last().unwrap();
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        if ts.dims() != [c] || tb.dims() != [c] {
            return Err(shape_err!("group_norm: scale/shift must be [{c}]"));
        }
        let frames = d[0];
        let pixels = tx.len() / (frames * c);
        let out = kernels::group_norm(tx.data(), frames, pixels, c, groups, ts.data(), tb.data());
        let y = Tensor::from_parts(d.to_vec(), out.y);
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        let (xhat, rstd) = if self.taping && needs {
            (out.xhat, out.rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                dims: [frames, pixels, c],
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Multi-head softmax attention on `[B, L, C]` inputs with an optional
    /// `[heads, L, L]` logit bias.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Option<Var>,
        mask: AttnMask,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.dims().to_vec();
        if d.len() != 3 || tk.dims() != d.as_slice() || tv.dims() != d.as_slice() {
            return Err(shape_err!(
                "attention: q {:?}, k {:?}, v {:?}",
                d,
                tk.dims(),
                tv.dims()
            ));
        }
        if heads == 0 || d[2] % heads != 0 {
            return Err(shape_err!("attention: {} channels over {heads} heads", d[2]));
        }
        let geom = AttnGeom {
            batch: d[0],
            len: d[1],
            channels: d[2],
            heads,
        };
        if let AttnMask::Independent(m) = &mask {
            if m.len() != geom.len {
                return Err(shape_err!("attention: mask length {} vs L={}", m.len(), geom.len));
            }
        }
        let tbias = match bias {
            Some(b) => {
                let t = self.value(b);
                if t.dims() != [heads, geom.len, geom.len] {
                    return Err(shape_err!(
                        "attention: bias {:?} for L={} and {heads} heads",
                        t.dims(),
                        geom.len
                    ));
                }
                Some(t)
            }
            None => None,
        };
        let (out, probs) = kernels::attention(
            tq.data(),
            tk.data(),
            tv.data(),
            tbias.as_ref().map(|t| t.data()),
            &mask,
            geom,
        );
        let needs = self.needs(q)
            || self.needs(k)
            || self.needs(v)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        let probs = if self.taping && needs { probs } else { Vec::new() };
        Ok(self.push(
            Tensor::from_parts(d, out),
            Op::Attention {
                q,
                k,
                v,
                bias,
                mask,
                geom,
                probs,
            },
            needs,
        ))
    }

    /// Expand a per-head relative-offset table `[heads, 2R+1]` into a
    /// `[heads, len, len]` logit bias, `bias[h,i,j] = table[h, clip(j-i)]`.
    pub fn relative_bias(&self, table: Var, len: usize) -> Result<Var> {
        let t = self.value(table);
        let d = t.dims();
        if d.len() != 2 || d[1].is_multiple_of(2) {
            return Err(shape_err!("relative_bias: table {d:?}"));
        }
        let (heads, radius) = (d[0], d[1] / 2);
        let mut out = vec![T::zero(); heads * len * len];
        for h in 0..heads {
            for i in 0..len {
                for j in 0..len {
                    out[(h * len + i) * len + j] = t.data()[h * d[1] + rel_index(i, j, radius)];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![heads, len, len], out),
            Op::RelBias {
                table,
                heads,
                len,
                radius,
            },
            self.needs(table),
        ))
    }

    /// Reverse pass from `output` seeded with `seed` (same dims as output).
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if !self.taping {
            return Err(Error::Usage("backward on an inference graph".into()));
        }
        let tape = self.tape.borrow();
        let nodes = &tape.nodes;
        if nodes[output.0].value.dims() != seed.dims() {
            return Err(shape_err!(
                "output grad {:?} for output {:?}",
                seed.dims(),
                nodes[output.0].value.dims()
            ));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if nodes[output.0].needs_grad {
            grads[output.0] = Some(seed.to_vec());
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::from_parts(node.value.dims().to_vec(), g));
                continue;
            }
            backprop_node(nodes, node, &g, &mut grads);
        }
        let mut params: Vec<(String, Var)> =
            tape.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        params.sort();
        Ok(Gradients {
            grads: leaf_grads,
            dims: nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
            params,
        })
    }
}

pub(crate) fn rel_index(i: usize, j: usize, radius: usize) -> usize {
    let off = (j as isize - i as isize).clamp(-(radius as isize), radius as isize);
    (off + radius as isize) as usize
}

fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

/// Accumulate `g ∘ f(i)`-style gradients for a broadcasting binary op into
/// whichever operand is `v`; `small` marks that `v` was broadcast.
fn acc_broadcast<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    out_len: usize,
    contrib: impl Fn(usize) -> T,
) {
    let vlen = nodes[v.0].value.len();
    let Some(s) = slot(nodes, grads, v) else { return };
    if vlen == out_len {
        for (i, si) in s.iter_mut().enumerate() {
            *si += contrib(i);
        }
    } else {
        for i in 0..out_len {
            s[i % vlen] += contrib(i);
        }
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let y = node.value.data();
    let n = g.len();
    let bval = |v: Var, i: usize| {
        let d = val(v);
        d[i % d.len()]
    };
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::Add(a, b) => {
            acc_broadcast(nodes, grads, *a, n, |i| g[i]);
            acc_broadcast(nodes, grads, *b, n, |i| g[i]);
        }
        Op::Sub(a, b) => {
            acc_broadcast(nodes, grads, *a, n, |i| g[i]);
            acc_broadcast(nodes, grads, *b, n, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            acc_broadcast(nodes, grads, *a, n, |i| g[i] * bval(*b, i));
            acc_broadcast(nodes, grads, *b, n, |i| g[i] * bval(*a, i));
        }
        Op::Div(a, b) => {
            acc_broadcast(nodes, grads, *a, n, |i| g[i] / bval(*b, i));
            acc_broadcast(nodes, grads, *b, n, |i| {
                let bv = bval(*b, i);
                -g[i] * bval(*a, i) / (bv * bv)
            });
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::add_into(s, g);
            }
        }
        Op::MulScalar(x, c) => {
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::axpy(s, *c, g);
            }
        }
        Op::Exp(x) => unary_back(nodes, grads, *x, |i, _| g[i] * y[i]),
        Op::Log(x) => unary_back(nodes, grads, *x, |i, xv| g[i] / xv),
        Op::Sqrt(x) => unary_back(nodes, grads, *x, |i, _| g[i] / (T::of(2.0) * y[i])),
        Op::Sigmoid(x) => unary_back(nodes, grads, *x, |i, _| g[i] * y[i] * (T::one() - y[i])),
        Op::Silu(x) => unary_back(nodes, grads, *x, |i, xv| {
            let s = sigmoid(xv);
            g[i] * (s + xv * s * (T::one() - s))
        }),
        Op::Tanh(x) => unary_back(nodes, grads, *x, |i, _| g[i] * (T::one() - y[i] * y[i])),
        Op::Sum(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                for si in s.iter_mut() {
                    *si += g[0];
                }
            }
        }
        Op::Mean(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                let c = g[0] / T::of(s.len() as f64);
                for si in s.iter_mut() {
                    *si += c;
                }
            }
        }
        Op::SwapLeading { x, a, b, rest } => {
            if let Some(s) = slot(nodes, grads, *x) {
                let back = kernels::swap_leading(g, *b, *a, *rest);
                kernels::add_into(s, &back);
            }
        }
        Op::Concat { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = n / total;
            let mut off = 0;
            for (p, &w) in parts.iter().zip(widths) {
                if let Some(s) = slot(nodes, grads, *p) {
                    for r in 0..rows {
                        kernels::add_into(
                            &mut s[r * w..(r + 1) * w],
                            &g[r * total + off..r * total + off + w],
                        );
                    }
                }
                off += w;
            }
        }
        Op::Matmul { a, b, m, k, n: nn } => {
            let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
            let mut da = slot(nodes, grads, *a).map(std::mem::take);
            let mut db = slot(nodes, grads, *b).map(std::mem::take);
            kernels::matmul_backward(&av, &bv, g, *m, *k, *nn, da.as_deref_mut(), db.as_deref_mut());
            if let Some(da) = da {
                grads[a.0] = Some(da);
            }
            if let Some(db) = db {
                grads[b.0] = Some(db);
            }
        }
        Op::Conv {
            x,
            kernel,
            bias,
            geom,
        } => {
            let mut dx = slot(nodes, grads, *x).map(std::mem::take);
            let mut dk = slot(nodes, grads, *kernel).map(std::mem::take);
            let mut db = slot(nodes, grads, *bias).map(std::mem::take);
            kernels::conv3x3_backward(
                val(*x),
                val(*kernel),
                g,
                *geom,
                dx.as_deref_mut(),
                dk.as_deref_mut(),
                db.as_deref_mut(),
            );
            restore(grads, *x, dx);
            restore(grads, *kernel, dk);
            restore(grads, *bias, db);
        }
        Op::Upsample2 { x, dims } => {
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::upsample2_backward(g, dims[0], dims[1], dims[2], dims[3], s);
            }
        }
        Op::GroupNorm {
            x,
            scale,
            shift,
            groups,
            dims,
            xhat,
            rstd,
        } => {
            let mut dx = slot(nodes, grads, *x).map(std::mem::take);
            let mut ds = slot(nodes, grads, *scale).map(std::mem::take);
            let mut db = slot(nodes, grads, *shift).map(std::mem::take);
            kernels::group_norm_backward(
                g,
                xhat,
                rstd,
                val(*scale),
                dims[0],
                dims[1],
                dims[2],
                *groups,
                dx.as_deref_mut(),
                ds.as_deref_mut(),
                db.as_deref_mut(),
            );
            restore(grads, *x, dx);
            restore(grads, *scale, ds);
            restore(grads, *shift, db);
        }
        Op::Attention {
            q,
            k,
            v,
            bias,
            mask,
            geom,
            probs,
        } => {
            let mut dq = slot(nodes, grads, *q).map(std::mem::take);
            let mut dk = slot(nodes, grads, *k).map(std::mem::take);
            let mut dv = slot(nodes, grads, *v).map(std::mem::take);
            let mut db = bias.and_then(|b| slot(nodes, grads, b).map(std::mem::take));
            kernels::attention_backward(
                val(*q),
                val(*k),
                val(*v),
                probs,
                g,
                mask,
                *geom,
                AttnGrads {
                    dq: dq.as_deref_mut(),
                    dk: dk.as_deref_mut(),
                    dv: dv.as_deref_mut(),
                    dbias: db.as_deref_mut(),
                },
            );
            restore(grads, *q, dq);
            restore(grads, *k, dk);
            restore(grads, *v, dv);
            if let Some(b) = bias {
                restore(grads, *b, db);
            }
        }
        Op::RelBias {
            table,
            heads,
            len,
            radius,
        } => {
            if let Some(s) = slot(nodes, grads, *table) {
                let width = 2 * radius + 1;
                for h in 0..*heads {
                    for i in 0..*len {
                        for j in 0..*len {
                            s[h * width + rel_index(i, j, *radius)] += g[(h * len + i) * len + j];
                        }
                    }
                }
            }
        }
    }
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        grads[v.0] = Some(g);
    }
}

fn unary_back<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    x: Var,
    f: impl Fn(usize, T) -> T,
) {
    let xv = nodes[x.0].value.data();
    if let Some(s) = slot(nodes, grads, x) {
        for (i, si) in s.iter_mut().enumerate() {
            *si += f(i, xv[i]);
        }
    }
}
