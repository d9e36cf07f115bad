//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tensor`] wraps a value plus an optional backward closure and parent
//! links; every operation builds the graph eagerly. Calling
//! [`Tensor::backward`] on a scalar result walks the graph once in reverse
//! creation order and accumulates gradients into every reachable tensor
//! whose `needs_grad` flag is set. There is exactly one forward
//! implementation in the library — inference simply never calls `backward`.

use super::kernels;
use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>)>;

struct Inner {
    id: u64,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    needs_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the autodiff graph. Cloning is cheap (shared reference).
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, needs_grad={})",
            self.0.id,
            self.shape(),
            self.needs_grad()
        )
    }
}

impl Tensor {
    fn leaf(data: ArrayD<f64>, needs_grad: bool) -> Tensor {
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            needs_grad: Cell::new(needs_grad),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A constant input: gradients are never computed for it.
    pub fn constant(data: ArrayD<f64>) -> Tensor {
        Tensor::leaf(data, false)
    }

    /// A trainable parameter: gradients accumulate on backward passes.
    pub fn param(data: ArrayD<f64>) -> Tensor {
        Tensor::leaf(data, true)
    }

    fn from_op(data: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let needs = parents.iter().any(|p| p.needs_grad());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            needs_grad: Cell::new(needs),
            parents,
            backward: needs.then_some(backward),
        }))
    }

    pub fn data(&self) -> Ref<'_, ArrayD<f64>> {
        self.0.data.borrow()
    }

    /// Clone of the current value.
    pub fn value(&self) -> ArrayD<f64> {
        self.0.data.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.data.borrow().shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad.get()
    }

    /// Turn gradient tracking for this leaf on or off (freezing weights).
    pub fn set_needs_grad(&self, on: bool) {
        self.0.needs_grad.set(on);
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite the value in place (optimizer updates).
    pub fn set_value(&self, data: ArrayD<f64>) {
        assert_eq!(
            self.0.data.borrow().shape(),
            data.shape(),
            "set_value must preserve shape"
        );
        *self.0.data.borrow_mut() = data;
    }

    fn accum_grad(&self, g: ArrayD<f64>) {
        if !self.needs_grad() {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Accumulate into one batch slice of this tensor's gradient without
    /// materializing a full-size intermediate per contribution.
    fn accum_grad_slice(&self, idx: usize, g: ArrayViewD<'_, f64>) {
        if !self.needs_grad() {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        if slot.is_none() {
            *slot = Some(ArrayD::zeros(self.0.data.borrow().raw_dim()));
        }
        let acc = slot.as_mut().unwrap();
        let mut view = acc.index_axis_mut(Axis(0), idx);
        view += &g;
    }

    /// Reverse-mode sweep from this (scalar) tensor: seeds d(self)/d(self)=1
    /// and accumulates gradients into every reachable `needs_grad` tensor.
    pub fn backward(&self) {
        assert_eq!(
            self.0.data.borrow().len(),
            1,
            "backward starts from a scalar loss"
        );
        // Iterative DFS post-order = reverse topological order when walked
        // from the back.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                stack.push((node.clone(), child + 1));
                let p = node.0.parents[child].clone();
                if p.needs_grad() && visited.insert(p.0.id) {
                    stack.push((p, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.accum_grad(ArrayD::ones(IxDyn(&[1])));
        for node in order.iter().rev() {
            if let Some(bw) = &node.0.backward {
                let g = node.0.grad.borrow().clone();
                if let Some(g) = g {
                    bw(&g);
                }
            }
        }
    }

    // ---- elementwise binary ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let data = &*self.data() + &*other.data();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(move |g| {
            a.accum_grad(g.clone());
            b.accum_grad(g.clone());
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let data = &*self.data() - &*other.data();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(move |g| {
            a.accum_grad(g.clone());
            b.accum_grad(-g);
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let data = &*self.data() * &*other.data();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(move |g| {
            if a.needs_grad() {
                a.accum_grad(g * &*b.data());
            }
            if b.needs_grad() {
                b.accum_grad(g * &*a.data());
            }
        }))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let data = &*self.data() / &*other.data();
        let (a, b) = (self.clone(), other.clone());
        let y = data.clone();
        Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(move |g| {
            if a.needs_grad() {
                a.accum_grad(g / &*b.data());
            }
            if b.needs_grad() {
                b.accum_grad(-(g * &y) / &*b.data());
            }
        }))
    }

    // ---- elementwise with constants ----

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().mapv(|v| v + c);
        let a = self.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| a.accum_grad(g.clone())))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().mapv(|v| v * c);
        let a = self.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| a.accum_grad(g * c)))
    }

    // ---- elementwise unary ----

    pub fn square(&self) -> Tensor {
        let data = self.data().mapv(|v| v * v);
        let a = self.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| {
            a.accum_grad(g * &a.data().mapv(|v| 2.0 * v));
        }))
    }

    /// `√(x + eps)` — eps keeps the derivative finite at x = 0.
    pub fn sqrt_add(&self, eps: f64) -> Tensor {
        let data = self.data().mapv(|v| (v + eps).sqrt());
        let a = self.clone();
        let y = data.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| {
            a.accum_grad(g / &y.mapv(|v| 2.0 * v));
        }))
    }

    /// SiLU activation `x · sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        let data = self.data().mapv(|v| v * kernels::sigmoid(v));
        let a = self.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| {
            let dx = a.data().mapv(|v| {
                let s = kernels::sigmoid(v);
                s * (1.0 + v * (1.0 - s))
            });
            a.accum_grad(g * &dx);
        }))
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().sum();
        let a = self.clone();
        let shape = self.data().raw_dim();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![a.clone()],
            Box::new(move |g| a.accum_grad(ArrayD::from_elem(shape.clone(), g[[0]]))),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.data().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    // ---- linear algebra ----

    /// 2-D matrix product `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a2 = self.data().clone().into_dimensionality::<Ix2>().expect("lhs is 2-d");
        let b2 = other.data().clone().into_dimensionality::<Ix2>().expect("rhs is 2-d");
        let data = a2.dot(&b2).into_dyn();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            if a.needs_grad() {
                let bv = b.data().clone().into_dimensionality::<Ix2>().unwrap();
                a.accum_grad(g2.dot(&bv.t()).into_dyn());
            }
            if b.needs_grad() {
                let av = a.data().clone().into_dimensionality::<Ix2>().unwrap();
                b.accum_grad(av.t().dot(&g2).into_dyn());
            }
        }))
    }

    pub fn transpose2d(&self) -> Tensor {
        let data = self
            .data()
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("transpose needs 2-d")
            .reversed_axes()
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let a = self.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            a.accum_grad(g2.reversed_axes().as_standard_layout().to_owned().into_dyn());
        }))
    }

    // ---- broadcasting adds ----

    /// `[m,n] + bias[n]`, the linear-layer bias.
    pub fn add_bias_row(&self, bias: &Tensor) -> Tensor {
        let x = self.data().clone().into_dimensionality::<Ix2>().expect("x is 2-d");
        let bv = bias.data().clone().into_dimensionality::<Ix1>().expect("bias is 1-d");
        let data = (&x + &bv).into_dyn();
        let (a, b) = (self.clone(), bias.clone());
        Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            a.accum_grad(g.clone());
            if b.needs_grad() {
                b.accum_grad(g2.sum_axis(Axis(0)).into_dyn());
            }
        }))
    }

    /// `[n,c,h,w] + bias[c]`, the convolution bias.
    pub fn add_bias_chan(&self, bias: &Tensor) -> Tensor {
        let x = self.data().clone().into_dimensionality::<Ix4>().expect("x is 4-d");
        let bv = bias.data().clone().into_dimensionality::<Ix1>().expect("bias is 1-d");
        let mut data = x;
        for c in 0..bv.len() {
            data.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bv[c]);
        }
        let (a, b) = (self.clone(), bias.clone());
        Tensor::from_op(data.into_dyn(), vec![a.clone(), b.clone()], Box::new(move |g| {
            a.accum_grad(g.clone());
            if b.needs_grad() {
                let g4 = g.clone().into_dimensionality::<Ix4>().unwrap();
                let db = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                b.accum_grad(db.into_dyn());
            }
        }))
    }

    /// `[n,c,h,w] + m[n,c]` broadcast over space (timestep conditioning).
    pub fn add_chan_map(&self, m: &Tensor) -> Tensor {
        let x = self.data().clone().into_dimensionality::<Ix4>().expect("x is 4-d");
        let mv = m.data().clone().into_dimensionality::<Ix2>().expect("map is 2-d");
        let (n, c, h, w) = x.dim();
        let mut data = x;
        for ni in 0..n {
            for ci in 0..c {
                let add = mv[[ni, ci]];
                for y in 0..h {
                    for xx in 0..w {
                        data[[ni, ci, y, xx]] += add;
                    }
                }
            }
        }
        let (a, b) = (self.clone(), m.clone());
        Tensor::from_op(data.into_dyn(), vec![a.clone(), b.clone()], Box::new(move |g| {
            a.accum_grad(g.clone());
            if b.needs_grad() {
                let g4 = g.clone().into_dimensionality::<Ix4>().unwrap();
                b.accum_grad(g4.sum_axis(Axis(3)).sum_axis(Axis(2)).into_dyn());
            }
        }))
    }

    /// `[n,l,d] + pos[l,d]` broadcast over the batch.
    pub fn add_tok_bias(&self, pos: &Tensor) -> Tensor {
        let x = self.data().clone().into_dimensionality::<Ix3>().expect("x is 3-d");
        let p = pos.data().clone().into_dimensionality::<Ix2>().expect("pos is 2-d");
        let data = (&x + &p).into_dyn();
        let (a, b) = (self.clone(), pos.clone());
        Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(move |g| {
            a.accum_grad(g.clone());
            if b.needs_grad() {
                let g3 = g.clone().into_dimensionality::<Ix3>().unwrap();
                b.accum_grad(g3.sum_axis(Axis(0)).into_dyn());
            }
        }))
    }

    // ---- structured ops ----

    /// Batched convolution (no bias — compose with [`Self::add_bias_chan`]).
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let x4 = self.data().clone().into_dimensionality::<Ix4>().expect("input is 4-d");
        let w4 = weight.data().clone().into_dimensionality::<Ix4>().expect("weight is 4-d");
        let data = kernels::conv2d_forward(x4.view(), w4.view(), stride, pad).into_dyn();
        let (a, b) = (self.clone(), weight.clone());
        Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(move |g| {
            let g4 = g.clone().into_dimensionality::<Ix4>().unwrap();
            let x4 = a.data().clone().into_dimensionality::<Ix4>().unwrap();
            let w4 = b.data().clone().into_dimensionality::<Ix4>().unwrap();
            let (dx, dw) = kernels::conv2d_backward(
                x4.view(),
                w4.view(),
                g4.view(),
                stride,
                pad,
                a.needs_grad(),
                b.needs_grad(),
            );
            if let Some(dx) = dx {
                a.accum_grad(dx.into_dyn());
            }
            if let Some(dw) = dw {
                b.accum_grad(dw.into_dyn());
            }
        }))
    }

    pub fn upsample2x(&self) -> Tensor {
        let x4 = self.data().clone().into_dimensionality::<Ix4>().expect("input is 4-d");
        let data = kernels::upsample2x_forward(x4.view()).into_dyn();
        let a = self.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| {
            let g4 = g.clone().into_dimensionality::<Ix4>().unwrap();
            a.accum_grad(kernels::upsample2x_backward(g4.view()).into_dyn());
        }))
    }

    /// Group normalization with per-channel scale and shift.
    pub fn group_norm(&self, gamma: &Tensor, beta: &Tensor, groups: usize) -> Tensor {
        let x4 = self.data().clone().into_dimensionality::<Ix4>().expect("input is 4-d");
        let gv: Vec<f64> = gamma.data().iter().copied().collect();
        let bv: Vec<f64> = beta.data().iter().copied().collect();
        let (y, ctx) = kernels::group_norm_forward(x4.view(), &gv, &bv, groups);
        let (a, gt, bt) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(
            y.into_dyn(),
            vec![a.clone(), gt.clone(), bt.clone()],
            Box::new(move |g| {
                let g4 = g.clone().into_dimensionality::<Ix4>().unwrap();
                let x4 = a.data().clone().into_dimensionality::<Ix4>().unwrap();
                let gv: Vec<f64> = gt.data().iter().copied().collect();
                let (dx, dgamma, dbeta) =
                    kernels::group_norm_backward(x4.view(), &gv, &ctx, g4.view(), groups);
                if a.needs_grad() {
                    a.accum_grad(dx.into_dyn());
                }
                if gt.needs_grad() {
                    gt.accum_grad(ArrayD::from_shape_vec(IxDyn(&[dgamma.len()]), dgamma).unwrap());
                }
                if bt.needs_grad() {
                    bt.accum_grad(ArrayD::from_shape_vec(IxDyn(&[dbeta.len()]), dbeta).unwrap());
                }
            }),
        )
    }

    /// Row-wise softmax on `[m,n]`.
    pub fn softmax_rows(&self) -> Tensor {
        let x2 = self.data().clone().into_dimensionality::<Ix2>().expect("input is 2-d");
        let y = kernels::softmax_rows(x2.view());
        let a = self.clone();
        let yc = y.clone();
        Tensor::from_op(y.into_dyn(), vec![a.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let gy = &g2 * &yc;
            let row_dot = gy.sum_axis(Axis(1)); // [m]
            let mut dx = gy;
            for (r, mut row) in dx.outer_iter_mut().enumerate() {
                let rd = row_dot[r];
                for (c, v) in row.iter_mut().enumerate() {
                    *v -= yc[[r, c]] * rd;
                }
            }
            a.accum_grad(dx.into_dyn());
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let data = self
            .data()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        let a = self.clone();
        let orig = self.data().raw_dim();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| {
            a.accum_grad(
                g.as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(orig.clone())
                    .unwrap(),
            );
        }))
    }

    /// `[c,h,w] → [h·w, c]`: spatial positions become token rows.
    pub fn tokens_from_chw(&self) -> Tensor {
        let x3 = self.data().clone().into_dimensionality::<Ix3>().expect("input is 3-d");
        let (c, h, w) = x3.dim();
        let data = x3
            .permuted_axes([1, 2, 0])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((h * w, c))
            .unwrap()
            .into_dyn();
        let a = self.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let back = g2
                .into_shape_with_order((h, w, c))
                .unwrap()
                .permuted_axes([2, 0, 1])
                .as_standard_layout()
                .to_owned()
                .into_dyn();
            a.accum_grad(back);
        }))
    }

    /// Inverse of [`Self::tokens_from_chw`].
    pub fn chw_from_tokens(&self, c: usize, h: usize, w: usize) -> Tensor {
        let x2 = self.data().clone().into_dimensionality::<Ix2>().expect("input is 2-d");
        assert_eq!(x2.dim(), (h * w, c), "token grid shape mismatch");
        let data = x2
            .into_shape_with_order((h, w, c))
            .unwrap()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let a = self.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| {
            let g3 = g.clone().into_dimensionality::<Ix3>().unwrap();
            let back = g3
                .permuted_axes([1, 2, 0])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((h * w, c))
                .unwrap()
                .into_dyn();
            a.accum_grad(back);
        }))
    }

    /// Pick one item from the batch axis: `[n, ...] → [...]`.
    pub fn select_item(&self, idx: usize) -> Tensor {
        let data = self.data().index_axis(Axis(0), idx).to_owned();
        let a = self.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| {
            a.accum_grad_slice(idx, g.view());
        }))
    }

    /// Stack equal-shaped tensors along a new leading batch axis.
    pub fn stack_items(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack needs at least one item");
        let item_shape = items[0].shape();
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&item_shape);
        let mut data = ArrayD::zeros(IxDyn(&shape));
        for (i, it) in items.iter().enumerate() {
            assert_eq!(it.shape(), item_shape, "stacked items must share a shape");
            data.index_axis_mut(Axis(0), i).assign(&it.data());
        }
        let parents: Vec<Tensor> = items.to_vec();
        let ps = parents.clone();
        Tensor::from_op(data, parents, Box::new(move |g| {
            for (i, p) in ps.iter().enumerate() {
                if p.needs_grad() {
                    p.accum_grad(g.index_axis(Axis(0), i).to_owned());
                }
            }
        }))
    }

    /// Concatenate along axis 1 (channels of `[n,c,h,w]`).
    pub fn concat_chan(&self, other: &Tensor) -> Tensor {
        let a4 = self.data().clone().into_dimensionality::<Ix4>().expect("lhs is 4-d");
        let b4 = other.data().clone().into_dimensionality::<Ix4>().expect("rhs is 4-d");
        let c1 = a4.dim().1;
        let data = ndarray::concatenate(Axis(1), &[a4.view(), b4.view()])
            .expect("channel concat shapes agree")
            .into_dyn();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(move |g| {
            let g4 = g.clone().into_dimensionality::<Ix4>().unwrap();
            if a.needs_grad() {
                a.accum_grad(g4.slice(ndarray::s![.., ..c1, .., ..]).to_owned().into_dyn());
            }
            if b.needs_grad() {
                b.accum_grad(g4.slice(ndarray::s![.., c1.., .., ..]).to_owned().into_dyn());
            }
        }))
    }

    /// Concatenate along axis 0 (rows of `[m,d]`).
    pub fn concat_rows(&self, other: &Tensor) -> Tensor {
        let a2 = self.data().clone().into_dimensionality::<Ix2>().expect("lhs is 2-d");
        let b2 = other.data().clone().into_dimensionality::<Ix2>().expect("rhs is 2-d");
        let m1 = a2.dim().0;
        let data = ndarray::concatenate(Axis(0), &[a2.view(), b2.view()])
            .expect("row concat shapes agree")
            .into_dyn();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(data, vec![a.clone(), b.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            if a.needs_grad() {
                a.accum_grad(g2.slice(ndarray::s![..m1, ..]).to_owned().into_dyn());
            }
            if b.needs_grad() {
                b.accum_grad(g2.slice(ndarray::s![m1.., ..]).to_owned().into_dyn());
            }
        }))
    }

    /// Row-wise convex blend `m·a + (1−m)·b` on `[t,d]` with a constant
    /// per-row mask. Rows with `m == 1` copy `a` bitwise and rows with
    /// `m == 0` copy `b` bitwise — no `0·x` arithmetic is performed, so
    /// fully masked rows are exact.
    pub fn blend_rows(mask: &ndarray::Array1<f64>, a: &Tensor, b: &Tensor) -> Tensor {
        let a2 = a.data().clone().into_dimensionality::<Ix2>().expect("a is 2-d");
        let b2 = b.data().clone().into_dimensionality::<Ix2>().expect("b is 2-d");
        assert_eq!(a2.dim(), b2.dim(), "blend operands must match");
        assert_eq!(a2.dim().0, mask.len(), "one mask value per row");
        let mut data = ndarray::Array2::zeros(a2.dim());
        for (r, &m) in mask.iter().enumerate() {
            let row_a = a2.index_axis(Axis(0), r);
            let row_b = b2.index_axis(Axis(0), r);
            let mut out = data.index_axis_mut(Axis(0), r);
            if m == 1.0 {
                out.assign(&row_a);
            } else if m == 0.0 {
                out.assign(&row_b);
            } else {
                for (i, v) in out.iter_mut().enumerate() {
                    *v = m * row_a[i] + (1.0 - m) * row_b[i];
                }
            }
        }
        let (at, bt) = (a.clone(), b.clone());
        let mc = mask.clone();
        Tensor::from_op(data.into_dyn(), vec![at.clone(), bt.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            if at.needs_grad() {
                let mut da = g2.clone();
                for (r, mut row) in da.outer_iter_mut().enumerate() {
                    row.mapv_inplace(|v| v * mc[r]);
                }
                at.accum_grad(da.into_dyn());
            }
            if bt.needs_grad() {
                let mut db = g2.clone();
                for (r, mut row) in db.outer_iter_mut().enumerate() {
                    row.mapv_inplace(|v| v * (1.0 - mc[r]));
                }
                bt.accum_grad(db.into_dyn());
            }
        }))
    }

    /// Look up embedding rows: `table [v,d]` gathered by `idx [n,l] → [n,l,d]`.
    pub fn gather_rows(table: &Tensor, idx: &ndarray::Array2<usize>) -> Tensor {
        let t2 = table.data().clone().into_dimensionality::<Ix2>().expect("table is 2-d");
        let (v, d) = t2.dim();
        let (n, l) = idx.dim();
        let mut data = ndarray::Array3::zeros((n, l, d));
        for ni in 0..n {
            for li in 0..l {
                let row = idx[[ni, li]];
                assert!(row < v, "token id {row} outside table of {v}");
                data.slice_mut(ndarray::s![ni, li, ..])
                    .assign(&t2.index_axis(Axis(0), row));
            }
        }
        let t = table.clone();
        let idxc = idx.clone();
        Tensor::from_op(data.into_dyn(), vec![t.clone()], Box::new(move |g| {
            if !t.needs_grad() {
                return;
            }
            let g3 = g.clone().into_dimensionality::<Ix3>().unwrap();
            let mut dt = ndarray::Array2::<f64>::zeros((v, d));
            for ni in 0..g3.dim().0 {
                for li in 0..g3.dim().1 {
                    let row = idxc[[ni, li]];
                    let mut acc = dt.index_axis_mut(Axis(0), row);
                    acc += &g3.slice(ndarray::s![ni, li, ..]);
                }
            }
            t.accum_grad(dt.into_dyn());
        }))
    }

    /// Mean over the first `lens[n]` token rows per item:
    /// `[n,l,d] → [n,d]`. Items with `lens[n] == 0` pool to zeros.
    pub fn masked_mean_rows(&self, lens: &[usize]) -> Tensor {
        let x3 = self.data().clone().into_dimensionality::<Ix3>().expect("input is 3-d");
        let (n, l, d) = x3.dim();
        assert_eq!(lens.len(), n, "one length per item");
        let mut data = ndarray::Array2::zeros((n, d));
        for ni in 0..n {
            let len = lens[ni].min(l);
            if len == 0 {
                continue;
            }
            for li in 0..len {
                for di in 0..d {
                    data[[ni, di]] += x3[[ni, li, di]];
                }
            }
            let inv = 1.0 / len as f64;
            for di in 0..d {
                data[[ni, di]] *= inv;
            }
        }
        let a = self.clone();
        let lensc = lens.to_vec();
        Tensor::from_op(data.into_dyn(), vec![a.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let mut dx = ndarray::Array3::zeros((n, l, d));
            for ni in 0..n {
                let len = lensc[ni].min(l);
                if len == 0 {
                    continue;
                }
                let inv = 1.0 / len as f64;
                for li in 0..len {
                    for di in 0..d {
                        dx[[ni, li, di]] = g2[[ni, di]] * inv;
                    }
                }
            }
            a.accum_grad(dx.into_dyn());
        }))
    }

    /// Spatial mean: `[n,c,h,w] → [n,c]`.
    pub fn global_avg_pool(&self) -> Tensor {
        let x4 = self.data().clone().into_dimensionality::<Ix4>().expect("input is 4-d");
        let (n, c, h, w) = x4.dim();
        let inv = 1.0 / (h * w) as f64;
        let data = (x4.sum_axis(Axis(3)).sum_axis(Axis(2)) * inv).into_dyn();
        let a = self.clone();
        Tensor::from_op(data, vec![a.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let mut dx = ndarray::Array4::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    let v = g2[[ni, ci]] * inv;
                    for y in 0..h {
                        for xx in 0..w {
                            dx[[ni, ci, y, xx]] = v;
                        }
                    }
                }
            }
            a.accum_grad(dx.into_dyn());
        }))
    }

    /// Normalize each row of `[n,d]` to unit length (eps-guarded at zero).
    pub fn l2norm_rows(&self) -> Tensor {
        let x2 = self.data().clone().into_dimensionality::<Ix2>().expect("input is 2-d");
        let (n, d) = x2.dim();
        let mut norms = Vec::with_capacity(n);
        let mut data = ndarray::Array2::zeros((n, d));
        for ni in 0..n {
            let row = x2.index_axis(Axis(0), ni);
            let norm = (row.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
            norms.push(norm);
            for di in 0..d {
                data[[ni, di]] = row[di] / norm;
            }
        }
        let a = self.clone();
        let y = data.clone();
        Tensor::from_op(data.into_dyn(), vec![a.clone()], Box::new(move |g| {
            let g2 = g.clone().into_dimensionality::<Ix2>().unwrap();
            let mut dx = ndarray::Array2::zeros((n, d));
            for ni in 0..n {
                let dot: f64 = (0..d).map(|di| g2[[ni, di]] * y[[ni, di]]).sum();
                for di in 0..d {
                    dx[[ni, di]] = (g2[[ni, di]] - y[[ni, di]] * dot) / norms[ni];
                }
            }
            a.accum_grad(dx.into_dyn());
        }))
    }

    /// Cross-entropy of square logits `[n,n]` against diagonal targets,
    /// averaged over rows — the one-direction contrastive-alignment loss.
    pub fn cross_entropy_diag(&self) -> Tensor {
        let x2 = self.data().clone().into_dimensionality::<Ix2>().expect("logits are 2-d");
        let (n, m) = x2.dim();
        assert_eq!(n, m, "diagonal targets need square logits");
        let probs = kernels::softmax_rows(x2.view());
        let mut loss = 0.0;
        for r in 0..n {
            // log softmax of the target entry, computed stably.
            let mx = x2.index_axis(Axis(0), r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = x2
                .index_axis(Axis(0), r)
                .iter()
                .map(|v| (v - mx).exp())
                .sum::<f64>()
                .ln()
                + mx;
            loss += lse - x2[[r, r]];
        }
        loss /= n as f64;
        let a = self.clone();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), loss),
            vec![a.clone()],
            Box::new(move |g| {
                let scale = g[[0]] / n as f64;
                let mut dx = probs.clone();
                for r in 0..n {
                    dx[[r, r]] -= 1.0;
                }
                a.accum_grad((dx * scale).into_dyn());
            }),
        )
    }
}
