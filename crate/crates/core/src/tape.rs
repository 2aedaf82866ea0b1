//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tensor`] is a reference-counted node in a dynamically built computation
//! graph. Operations record a backward closure when gradient tracking is
//! enabled; [`Tensor::backward`] walks the graph in reverse topological order
//! and accumulates gradients into every reachable leaf created with
//! `requires_grad = true`.
//!
//! Everything is double precision so that finite-difference checks hold to
//! tight tolerances. Graphs are single-threaded (`Rc`-based); parallel callers
//! each build their own graph from a plain weight snapshot.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn, Slice};

pub type Arr = ArrayD<f64>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// While alive, newly created ops on this thread do not record backward
/// closures. Used by inference paths so long videos don't grow a graph.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: (output value, upstream grad, parent values) -> one
/// gradient contribution per parent (`None` = nothing flows to that parent).
type BackFn = Box<dyn Fn(&Arr, &Arr, &[&Arr]) -> Vec<Option<Arr>>>;

struct Node {
    id: u64,
    value: RefCell<Arr>,
    grad: RefCell<Option<Arr>>,
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

impl Tensor {
    /// Leaf tensor. Parameters pass `requires_grad = true`.
    pub fn leaf(value: Arr, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                requires_grad,
            }),
        }
    }

    pub fn constant(value: Arr) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Arr::from_elem(IxDyn(&[]), v))
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self::constant(Array1::from_vec(v).into_dyn())
    }

    fn from_op(value: Arr, parents: Vec<Tensor>, backward: BackFn) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents: if track { parents } else { Vec::new() },
                backward: if track { Some(backward) } else { None },
                requires_grad: track,
            }),
        }
    }

    pub fn value(&self) -> Arr {
        self.node.value.borrow().clone()
    }

    /// Borrow the value without cloning. Panics if the tensor is being mutated.
    pub fn with_value<R>(&self, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.node.value.borrow())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.node.value.borrow();
        assert!(v.len() == 1, "scalar_value on tensor of len {}", v.len());
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// In-place value overwrite for leaves (optimizer steps, finite differences).
    pub fn set_value(&self, value: Arr) {
        assert!(
            self.node.parents.is_empty(),
            "set_value is only valid on leaf tensors"
        );
        *self.node.value.borrow_mut() = value;
    }

    pub fn grad(&self) -> Option<Arr> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Cuts the graph: same value, no history.
    pub fn detach(&self) -> Tensor {
        Self::constant(self.value())
    }

    fn accumulate_grad(&self, g: Arr) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar output. Gradients accumulate into every
    /// reachable tensor with `requires_grad`; call `zero_grad` between passes.
    pub fn backward(&self) {
        assert!(
            self.node.value.borrow().len() == 1,
            "backward requires a scalar output"
        );
        assert!(
            self.node.requires_grad,
            "backward on a tensor with no recorded graph"
        );
        let order = self.topo_order();
        let seed_shape = self.node.value.borrow().raw_dim();
        self.accumulate_grad(Arr::from_elem(seed_shape, 1.0));
        for node in order.iter().rev() {
            let Some(back) = &node.node.backward else {
                continue;
            };
            let grad = match node.node.grad.borrow().clone() {
                Some(g) => g,
                None => continue, // no gradient flowed here
            };
            let out_val = node.node.value.borrow();
            let parent_refs: Vec<std::cell::Ref<Arr>> = node
                .node
                .parents
                .iter()
                .map(|p| p.node.value.borrow())
                .collect();
            let parent_vals: Vec<&Arr> = parent_refs.iter().map(|r| &**r).collect();
            let contribs = back(&out_val, &grad, &parent_vals);
            drop(parent_refs);
            assert_eq!(contribs.len(), node.node.parents.len());
            for (parent, contrib) in node.node.parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    if parent.node.requires_grad {
                        parent.accumulate_grad(c);
                    }
                }
            }
        }
    }

    /// Iterative post-order DFS; recursion would overflow on long unrolled
    /// sequence graphs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((tensor, child_idx)) = stack.pop() {
            if child_idx == 0 {
                if visited.contains(&tensor.node.id) {
                    continue;
                }
            }
            if child_idx < tensor.node.parents.len() {
                let child = tensor.node.parents[child_idx].clone();
                stack.push((tensor, child_idx + 1));
                if !visited.contains(&child.node.id) {
                    stack.push((child, 0));
                }
            } else {
                visited.insert(tensor.node.id);
                order.push(tensor);
            }
        }
        order
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.node.value.borrow().shape(),
        b.node.value.borrow().shape(),
        "shape mismatch in {op}"
    );
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "add");
        let v = &*self.node.value.borrow() + &*other.node.value.borrow();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|_, dy, _| vec![Some(dy.clone()), Some(dy.clone())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "sub");
        let v = &*self.node.value.borrow() - &*other.node.value.borrow();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|_, dy, _| vec![Some(dy.clone()), Some(-dy)]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "mul");
        let v = &*self.node.value.borrow() * &*other.node.value.borrow();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|_, dy, pv| vec![Some(dy * pv[1]), Some(dy * pv[0])]),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "div");
        let v = &*self.node.value.borrow() / &*other.node.value.borrow();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|_, dy, pv| {
                let da = dy / pv[1];
                let db = -(dy * pv[0]) / (pv[1] * pv[1]);
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&self, a: f64, b: f64) -> Tensor {
        let v = self.node.value.borrow().mapv(|x| a * x + b);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |_, dy, _| vec![Some(dy * a)]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn add_n(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "add_n on empty list");
        let mut v = parts[0].value();
        for p in &parts[1..] {
            same_shape(&parts[0], p, "add_n");
            v += &*p.node.value.borrow();
        }
        let n = parts.len();
        Tensor::from_op(
            v,
            parts.to_vec(),
            Box::new(move |_, dy, _| (0..n).map(|_| Some(dy.clone())).collect()),
        )
    }

    /// Broadcast divide by a 0-d tensor.
    pub fn div_scalar_tensor(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.node.value.borrow().len(), 1, "div_scalar_tensor denominator");
        let sv = s.scalar_value();
        let v = self.node.value.borrow().mapv(|x| x / sv);
        Tensor::from_op(
            v,
            vec![self.clone(), s.clone()],
            Box::new(|_, dy, pv| {
                let sv = *pv[1].iter().next().unwrap();
                let dx = dy / sv;
                let ds_val = -(dy * pv[0]).sum() / (sv * sv);
                let ds = Arr::from_elem(pv[1].raw_dim(), ds_val);
                vec![Some(dx), Some(ds)]
            }),
        )
    }

    /// Broadcast multiply by a 0-d tensor.
    pub fn mul_scalar_tensor(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.node.value.borrow().len(), 1, "mul_scalar_tensor factor");
        let sv = s.scalar_value();
        let v = self.node.value.borrow().mapv(|x| x * sv);
        Tensor::from_op(
            v,
            vec![self.clone(), s.clone()],
            Box::new(|_, dy, pv| {
                let sv = *pv[1].iter().next().unwrap();
                let dx = dy * sv;
                let ds_val = (dy * pv[0]).sum();
                let ds = Arr::from_elem(pv[1].raw_dim(), ds_val);
                vec![Some(dx), Some(ds)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn sigmoid(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(sigmoid_scalar);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|y, dy, _| vec![Some(dy * &y.mapv(|s| s * (1.0 - s)))]),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(f64::tanh);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|y, dy, _| vec![Some(dy * &y.mapv(|t| 1.0 - t * t))]),
        )
    }

    pub fn relu(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(|x| x.max(0.0));
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|_, dy, pv| {
                vec![Some(dy * &pv[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))]
            }),
        )
    }

    /// `x * sigmoid(x)` — smooth, so finite-difference checks are stable.
    pub fn silu(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(|x| x * sigmoid_scalar(x));
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|_, dy, pv| {
                let d = pv[0].mapv(|x| {
                    let s = sigmoid_scalar(x);
                    s * (1.0 + x * (1.0 - s))
                });
                vec![Some(dy * &d)]
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let v = self.node.value.borrow().mapv(f64::exp);
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|y, dy, _| vec![Some(dy * y)]),
        )
    }

    /// `ln(x + eps)` — the epsilon keeps saturated probabilities finite.
    pub fn ln_eps(&self, eps: f64) -> Tensor {
        let v = self.node.value.borrow().mapv(|x| (x + eps).ln());
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |_, dy, pv| vec![Some(dy / &pv[0].mapv(|x| x + eps))]),
        )
    }
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let v = self
            .node
            .value
            .borrow()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible size");
        let orig: Vec<usize> = self.shape();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |_, dy, _| {
                vec![Some(
                    dy.clone()
                        .into_shape_with_order(IxDyn(&orig))
                        .expect("reshape backward"),
                )]
            }),
        )
    }

    pub fn transpose2d(&self) -> Tensor {
        let v = self.as2(self).t().to_owned().into_dyn();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(|_, dy, _| {
                let d2 = dy.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![Some(d2.t().to_owned().into_dyn())]
            }),
        )
    }

    fn as2<'a>(&self, t: &'a Tensor) -> Array2<f64> {
        t.node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("tensor is not 2-d")
            .to_owned()
    }

    pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &view_refs).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(
            v,
            parts.to_vec(),
            Box::new(move |_, dy, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &len in &sizes {
                    let sl = dy
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + len as isize), 1))
                        .to_owned();
                    out.push(Some(sl));
                    start += len as isize;
                }
                out
            }),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self
            .node
            .value
            .borrow()
            .slice_axis(Axis(axis), Slice::new(start as isize, Some((start + len) as isize), 1))
            .to_owned();
        let full_shape = self.shape();
        Tensor::from_op(
            v,
            vec![self.clone()],
            Box::new(move |_, dy, _| {
                let mut dx = Arr::zeros(IxDyn(&full_shape));
                dx.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(dy);
                vec![Some(dx)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let s = self.node.value.borrow().sum();
        let shape = self.shape();
        Tensor::from_op(
            Arr::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Box::new(move |_, dy, _| {
                let g = *dy.iter().next().unwrap();
                vec![Some(Arr::from_elem(IxDyn(&shape), g))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.node.value.borrow().len() as f64;
        self.sum_all().affine(1.0 / n, 0.0)
    }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

impl Tensor {
    /// `[N,K] x [K,M] -> [N,M]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self
            .node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs not 2-d")
            .to_owned();
        let b = other
            .node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs not 2-d")
            .to_owned();
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension");
        let v = a.dot(&b).into_dyn();
        Tensor::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|_, dy, pv| {
                let dy2 = dy.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let a = pv[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b = pv[1].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let da = dy2.dot(&b.t()).into_dyn();
                let db = a.t().dot(&dy2).into_dyn();
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Row-wise bias add: `[N,D] + [D]`.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Tensor {
        let x = self.node.value.borrow();
        let b = bias.node.value.borrow();
        assert_eq!(x.shape()[x.ndim() - 1], b.len(), "bias length");
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = &*x + &b1;
        drop(x);
        drop(b);
        Tensor::from_op(
            v,
            vec![self.clone(), bias.clone()],
            Box::new(|_, dy, pv| {
                let d2 = dy.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let db = d2.sum_axis(Axis(0)).into_dyn();
                let _ = pv;
                vec![Some(dy.clone()), Some(db)]
            }),
        )
    }

    /// Negative squared Euclidean affinity: out[n,m] = -|q_n - k_m|^2.
    pub fn neg_sq_l2(&self, keys: &Tensor) -> Tensor {
        let q = self
            .node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("neg_sq_l2 lhs not 2-d")
            .to_owned();
        let k = keys
            .node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("neg_sq_l2 rhs not 2-d")
            .to_owned();
        assert_eq!(q.ncols(), k.ncols(), "neg_sq_l2 feature dimension");
        let qn: Array1<f64> = q.rows().into_iter().map(|r| r.dot(&r)).collect();
        let kn: Array1<f64> = k.rows().into_iter().map(|r| r.dot(&r)).collect();
        let mut v = q.dot(&k.t());
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = 2.0 * *e - qn[i] - kn[j];
            }
        }
        Tensor::from_op(
            v.into_dyn(),
            vec![self.clone(), keys.clone()],
            Box::new(|_, dy, pv| {
                let g = dy.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let q = pv[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let k = pv[1].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                // d/dq[n,d] = -2 (q[n,d] * sum_m g[n,m] - (g k)[n,d])
                let row_sums = g.sum_axis(Axis(1));
                let gk = g.dot(&k);
                let mut dq = Array2::<f64>::zeros((q.nrows(), q.ncols()));
                for n in 0..q.nrows() {
                    for d in 0..q.ncols() {
                        dq[[n, d]] = -2.0 * (q[[n, d]] * row_sums[n] - gk[[n, d]]);
                    }
                }
                let col_sums = g.sum_axis(Axis(0));
                let gq = g.t().dot(&q);
                let mut dk = Array2::<f64>::zeros((k.nrows(), k.ncols()));
                for m in 0..k.nrows() {
                    for d in 0..k.ncols() {
                        dk[[m, d]] = -2.0 * (k[[m, d]] * col_sums[m] - gq[[m, d]]);
                    }
                }
                vec![Some(dq.into_dyn()), Some(dk.into_dyn())]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

impl Tensor {
    /// Row-wise softmax over `[N,M]`. With `allowed`, masked-out logits are
    /// treated as -inf; a row with no permitted position falls back to an
    /// unmasked softmax so downstream math never sees NaN.
    pub fn softmax_rows(&self, allowed: Option<&Array2<bool>>) -> Tensor {
        let x = self
            .node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("softmax_rows input not 2-d")
            .to_owned();
        if let Some(mask) = allowed {
            assert_eq!(mask.dim(), x.dim(), "softmax mask shape");
        }
        let (n, m) = x.dim();
        let mut y = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            let row_allowed: Vec<bool> = match allowed {
                Some(mask) => {
                    let row: Vec<bool> = (0..m).map(|j| mask[[i, j]]).collect();
                    if row.iter().any(|&b| b) {
                        row
                    } else {
                        vec![true; m]
                    }
                }
                None => vec![true; m],
            };
            let mut mx = f64::NEG_INFINITY;
            for j in 0..m {
                if row_allowed[j] {
                    mx = mx.max(x[[i, j]]);
                }
            }
            let mut z = 0.0;
            for j in 0..m {
                if row_allowed[j] {
                    let e = (x[[i, j]] - mx).exp();
                    y[[i, j]] = e;
                    z += e;
                }
            }
            for j in 0..m {
                y[[i, j]] /= z;
            }
        }
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(|y, dy, _| {
                let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let d2 = dy.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut dx = Array2::<f64>::zeros(y2.dim());
                for i in 0..y2.nrows() {
                    let dot: f64 = (0..y2.ncols()).map(|j| d2[[i, j]] * y2[[i, j]]).sum();
                    for j in 0..y2.ncols() {
                        dx[[i, j]] = y2[[i, j]] * (d2[[i, j]] - dot);
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Layer norm over the last axis of `[N,D]` with learned gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        let x = self
            .node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("layer_norm input not 2-d")
            .to_owned();
        let g = gain.node.value.borrow().clone();
        let b = bias.node.value.borrow().clone();
        let (n, d) = x.dim();
        assert_eq!(g.len(), d, "layer_norm gain length");
        assert_eq!(b.len(), d, "layer_norm bias length");
        let mut y = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let row = x.row(i);
            let mu = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let sd = (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j] - mu) / sd;
                y[[i, j]] = xh * g[[j]] + b[[j]];
            }
        }
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |_, dy, pv| {
                let x = pv[0].view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let g = pv[1];
                let d2 = dy.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let (n, d) = x.dim();
                let mut dx = Array2::<f64>::zeros((n, d));
                let mut dg = Array1::<f64>::zeros(d);
                let mut db = Array1::<f64>::zeros(d);
                for i in 0..n {
                    let row = x.row(i);
                    let mu = row.mean().unwrap();
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let sd = (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) / sd).collect();
                    let dxhat: Vec<f64> =
                        (0..d).map(|j| d2[[i, j]] * g[[j]]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[[i, j]] =
                            (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / sd;
                        dg[j] += d2[[i, j]] * xhat[j];
                        db[j] += d2[[i, j]];
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dg.into_dyn()),
                    Some(db.into_dyn()),
                ]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Convolution / spatial ops
// ---------------------------------------------------------------------------

fn im2col(x: &Array3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..oh {
                    let yi = (oi * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let xj = (oj * stride + kj) as isize - pad as isize;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[[ci, yi as usize, xj as usize]];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..oh {
                    let yi = (oi * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let xj = (oj * stride + kj) as isize - pad as isize;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        dx[[ci, yi as usize, xj as usize]] += dcols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    dx
}

impl Tensor {
    /// 2-D convolution, zero padding: x `[C,H,W]`, weight `[O,C,kh,kw]`, bias `[O]`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let x = self
            .node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("conv2d input not 3-d")
            .to_owned();
        let wshape = weight.shape();
        assert_eq!(wshape.len(), 4, "conv2d weight not 4-d");
        let (o, c, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(c, x.dim().0, "conv2d channel mismatch");
        let (cols, oh, ow) = im2col(&x, kh, kw, stride, pad);
        let wmat = weight
            .node
            .value
            .borrow()
            .clone()
            .into_shape_with_order(IxDyn(&[o, c * kh * kw]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = wmat.dot(&cols); // [O, oh*ow]
        let b = bias.node.value.borrow();
        assert_eq!(b.len(), o, "conv2d bias length");
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            row += b[[i]];
        }
        drop(b);
        let (h, w) = (x.dim().1, x.dim().2);
        let v = y
            .into_shape_with_order((o, oh, ow))
            .unwrap()
            .into_dyn();
        Tensor::from_op(
            v,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |_, dy, pv| {
                let dy3 = dy.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let dymat = dy3
                    .to_owned()
                    .into_shape_with_order((o, oh * ow))
                    .unwrap();
                let wmat = pv[1]
                    .view()
                    .into_shape_with_order((o, c * kh * kw))
                    .unwrap()
                    .to_owned();
                let x3 = pv[0].view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let (cols, _, _) = im2col(&x3.to_owned(), kh, kw, stride, pad);
                let dw = dymat.dot(&cols.t());
                let db = dymat.sum_axis(Axis(1));
                let dcols = wmat.t().dot(&dymat);
                let dx = col2im(&dcols, c, h, w, kh, kw, stride, pad, oh, ow);
                vec![
                    Some(dx.into_dyn()),
                    Some(
                        dw.into_shape_with_order(IxDyn(&[o, c, kh, kw]))
                            .unwrap(),
                    ),
                    Some(db.into_dyn()),
                ]
            }),
        )
    }

    /// Bilinear resize of `[C,H,W]` to `(oh, ow)`, half-pixel centers.
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Tensor {
        let x = self
            .node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("bilinear_resize input not 3-d")
            .to_owned();
        let (c, h, w) = x.dim();
        let plan_y = resize_plan(h, oh);
        let plan_x = resize_plan(w, ow);
        let mut y = Array3::<f64>::zeros((c, oh, ow));
        for ci in 0..c {
            for (oi, &(i0, i1, wy)) in plan_y.iter().enumerate() {
                for (oj, &(j0, j1, wx)) in plan_x.iter().enumerate() {
                    let v00 = x[[ci, i0, j0]];
                    let v01 = x[[ci, i0, j1]];
                    let v10 = x[[ci, i1, j0]];
                    let v11 = x[[ci, i1, j1]];
                    y[[ci, oi, oj]] = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                }
            }
        }
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |_, dy, _| {
                let d3 = dy.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for (oi, &(i0, i1, wy)) in plan_y.iter().enumerate() {
                        for (oj, &(j0, j1, wx)) in plan_x.iter().enumerate() {
                            let g = d3[[ci, oi, oj]];
                            dx[[ci, i0, j0]] += g * (1.0 - wy) * (1.0 - wx);
                            dx[[ci, i0, j1]] += g * (1.0 - wy) * wx;
                            dx[[ci, i1, j0]] += g * wy * (1.0 - wx);
                            dx[[ci, i1, j1]] += g * wy * wx;
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Zero-pad the spatial dims of `[C,H,W]` on the bottom/right.
    pub fn pad_spatial(&self, pad_h: usize, pad_w: usize) -> Tensor {
        let x = self
            .node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("pad_spatial input not 3-d")
            .to_owned();
        let (c, h, w) = x.dim();
        let mut y = Array3::<f64>::zeros((c, h + pad_h, w + pad_w));
        y.slice_mut(ndarray::s![.., 0..h, 0..w]).assign(&x);
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |_, dy, _| {
                let d3 = dy.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let dx = d3.slice(ndarray::s![.., 0..h, 0..w]).to_owned();
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Crop `[C,H,W]` to the top-left `(oh, ow)` window.
    pub fn crop_spatial(&self, oh: usize, ow: usize) -> Tensor {
        let x = self
            .node
            .value
            .borrow()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("crop_spatial input not 3-d")
            .to_owned();
        let (c, h, w) = x.dim();
        assert!(oh <= h && ow <= w, "crop larger than input");
        let y = x.slice(ndarray::s![.., 0..oh, 0..ow]).to_owned();
        Tensor::from_op(
            y.into_dyn(),
            vec![self.clone()],
            Box::new(move |_, dy, _| {
                let d3 = dy.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut dx = Array3::<f64>::zeros((c, h, w));
                dx.slice_mut(ndarray::s![.., 0..oh, 0..ow]).assign(&d3);
                vec![Some(dx.into_dyn())]
            }),
        )
    }
}

/// Central finite-difference gradient of the scalar `f()` with respect to
/// `leaf`, one coordinate at a time. `f` must rebuild its graph on every
/// call; only forward evaluations are used, so this is independent of any
/// backward implementation.
pub fn finite_difference_grad(leaf: &Tensor, mut f: impl FnMut() -> f64, h: f64) -> Arr {
    let base = leaf.value();
    let n = base.len();
    let coords: Vec<usize> = (0..n).collect();
    let flat = finite_difference_grad_at(leaf, &mut f, h, &coords);
    let mut grad = Arr::zeros(base.raw_dim());
    for (slot, v) in grad.iter_mut().zip(flat) {
        *slot = v;
    }
    grad
}

/// Finite differences at selected flat coordinates only; keeps large
/// parameter tensors checkable in reasonable time.
pub fn finite_difference_grad_at(
    leaf: &Tensor,
    f: &mut impl FnMut() -> f64,
    h: f64,
    coords: &[usize],
) -> Vec<f64> {
    let base = leaf.value();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = base.clone();
        plus.as_slice_mut().unwrap()[i] += h;
        leaf.set_value(plus);
        let fp = f();
        let mut minus = base.clone();
        minus.as_slice_mut().unwrap()[i] -= h;
        leaf.set_value(minus);
        let fm = f();
        out.push((fp - fm) / (2.0 * h));
    }
    leaf.set_value(base);
    out
}

/// `|a-b| / max(|a|, |b|, 1e-6)`, the comparison used by every gradient check.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Source indices and lerp weight for each output position (half-pixel
/// convention, clamped to the border).
fn resize_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.max(0.0).min(n_in as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn add_mul_backward() {
        let a = Tensor::leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn(), true);
        let b = Tensor::leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn(), true);
        let y = a.mul(&b).add(&a).sum_all();
        y.backward();
        // dy/da = b + 1, dy/db = a
        let ga = a.grad().unwrap();
        let gb = b.grad().unwrap();
        assert_eq!(ga[[0, 0]], 6.0);
        assert_eq!(ga[[1, 1]], 9.0);
        assert_eq!(gb[[0, 1]], 2.0);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let a = Tensor::leaf(Arr::from_elem(IxDyn(&[2]), 1.0), true);
        let _guard = NoGradGuard::new();
        let y = a.affine(2.0, 0.0);
        assert!(!y.requires_grad());
    }

    #[test]
    fn softmax_rows_sum_to_one_with_mask() {
        let x = Tensor::leaf(arr2(&[[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]).into_dyn(), true);
        let mask = arr2(&[[true, false, true], [false, false, false]]);
        let y = x.softmax_rows(Some(&mask));
        let v = y.value();
        assert!((v[[0, 0]] + v[[0, 2]] - 1.0).abs() < 1e-12);
        assert_eq!(v[[0, 1]], 0.0);
        // empty row falls back to full softmax
        let s1: f64 = (0..3).map(|j| v[[1, j]]).sum();
        assert!((s1 - 1.0).abs() < 1e-12);
    }
}
