//! Reverse-mode autodiff over f64 `ndarray` arrays.
//!
//! A [`Tensor`] is a node in a dynamically built computation graph. Ops
//! compute values eagerly and record a backward closure; [`Tensor::backward`]
//! walks the graph in reverse topological order and accumulates gradients
//! into every node that needs them. Leaves created with [`Tensor::param`]
//! keep their gradient between the backward pass and the optimizer step.
//!
//! The engine is deliberately small: 2-D matmul, 2-D conv via im2col, batch
//! norm, softmax, elementwise arithmetic with broadcasting, and reductions.
//! That is the full op set the training objective and the evaluation stack
//! need. Everything is f64 so finite-difference gradient checks hold tightly.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, Axis, Ix2, Ix4, IxDyn};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[bool]) -> Vec<Option<ArrayD<f64>>>>;

struct Inner {
    id: u64,
    value: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    trainable: bool,
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the autodiff graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("trainable", &self.inner.trainable)
            .finish()
    }
}

impl Tensor {
    fn new(
        value: ArrayD<f64>,
        trainable: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Self {
        let needs_grad = trainable || parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                trainable,
                needs_grad,
                parents,
                backward: if needs_grad { backward } else { None },
            }),
        }
    }

    /// Trainable leaf. Keeps its gradient after `backward` for the optimizer.
    pub fn param(value: ArrayD<f64>) -> Self {
        Tensor::new(value, true, Vec::new(), None)
    }

    /// Non-trainable leaf (inputs, masks, fixed coefficients).
    pub fn constant(value: ArrayD<f64>) -> Self {
        Tensor::new(value, false, Vec::new(), None)
    }

    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Self {
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(shape), values).expect("shape/data mismatch"))
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the value in place.
    pub fn value(&self) -> Ref<'_, ArrayD<f64>> {
        self.inner.value.borrow()
    }

    /// Clone the value out.
    pub fn to_array(&self) -> ArrayD<f64> {
        self.inner.value.borrow().clone()
    }

    /// Scalar extraction; panics unless the tensor has exactly one element.
    pub fn item(&self) -> f64 {
        let v = self.inner.value.borrow();
        assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    /// Overwrite a leaf's value (optimizer update). Only valid on leaves;
    /// op outputs are immutable once computed.
    pub fn set_value(&self, value: ArrayD<f64>) {
        assert!(
            self.inner.parents.is_empty(),
            "set_value on non-leaf tensor"
        );
        *self.inner.value.borrow_mut() = value;
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the gradient slot. Optimizer internals and tests only;
    /// normal gradients arrive through [`Tensor::backward`].
    pub fn set_grad(&self, g: ArrayD<f64>) {
        debug_assert_eq!(g.shape(), self.inner.value.borrow().shape());
        *self.inner.grad.borrow_mut() = Some(g);
    }

    fn accumulate_grad(&self, g: ArrayD<f64>) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// every node with `needs_grad`; read them back with [`Tensor::grad`].
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        let order = self.topo_order();
        self.accumulate_grad(ArrayD::from_elem(self.inner.value.borrow().raw_dim(), 1.0));
        for node in order.iter().rev() {
            let Some(bw) = &node.inner.backward else {
                continue;
            };
            let g = {
                let slot = node.inner.grad.borrow();
                match slot.as_ref() {
                    Some(g) => g.clone(),
                    None => continue,
                }
            };
            let needs: Vec<bool> = node
                .inner
                .parents
                .iter()
                .map(|p| p.inner.needs_grad)
                .collect();
            let contribs = bw(&g, &needs);
            debug_assert_eq!(contribs.len(), node.inner.parents.len());
            for (parent, contrib) in node.inner.parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    debug_assert_eq!(
                        c.shape(),
                        parent.inner.value.borrow().shape(),
                        "gradient shape mismatch"
                    );
                    parent.accumulate_grad(c);
                }
            }
            // Intermediate grads are no longer needed once propagated.
            if !node.inner.trainable && node.inner.id != self.inner.id {
                *node.inner.grad.borrow_mut() = None;
            }
        }
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.inner.id);
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                let next = node.inner.parents[child].clone();
                stack.push((node, child + 1));
                if next.inner.needs_grad && seen.insert(next.inner.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers
// ---------------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `grad` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if sd == 1 && gd != 1 {
            let summed = g.sum_axis(Axis(ax));
            g = summed.insert_axis(Axis(ax));
        }
    }
    g
}

fn bcast_apply(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let value = bcast_apply(&a.value(), &b.value(), |x, y| x + y);
    let (sa, sb) = (a.shape(), b.shape());
    Tensor::new(
        value,
        false,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, needs| {
            vec![
                needs[0].then(|| reduce_to_shape(g, &sa)),
                needs[1].then(|| reduce_to_shape(g, &sb)),
            ]
        })),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    let value = bcast_apply(&a.value(), &b.value(), |x, y| x - y);
    let (sa, sb) = (a.shape(), b.shape());
    Tensor::new(
        value,
        false,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, needs| {
            vec![
                needs[0].then(|| reduce_to_shape(g, &sa)),
                needs[1].then(|| reduce_to_shape(g, &sb.clone()).mapv(|v| -v)),
            ]
        })),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    let value = bcast_apply(&a.value(), &b.value(), |x, y| x * y);
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::new(
        value,
        false,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, needs| {
            let da = needs[0].then(|| {
                let prod = bcast_apply(g, &pb.value(), |x, y| x * y);
                reduce_to_shape(&prod, &pa.shape())
            });
            let db = needs[1].then(|| {
                let prod = bcast_apply(g, &pa.value(), |x, y| x * y);
                reduce_to_shape(&prod, &pb.shape())
            });
            vec![da, db]
        })),
    )
}

pub fn div(a: &Tensor, b: &Tensor) -> Tensor {
    let value = bcast_apply(&a.value(), &b.value(), |x, y| x / y);
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::new(
        value,
        false,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, needs| {
            let da = needs[0].then(|| {
                let prod = bcast_apply(g, &pb.value(), |x, y| x / y);
                reduce_to_shape(&prod, &pa.shape())
            });
            let db = needs[1].then(|| {
                let bv = pb.value().clone();
                let num = bcast_apply(g, &pa.value(), |x, y| x * y);
                let prod = bcast_apply(&num, &bv, |x, y| -x / (y * y));
                reduce_to_shape(&prod, &pb.shape())
            });
            vec![da, db]
        })),
    )
}

fn unary(
    a: &Tensor,
    value: ArrayD<f64>,
    dfun: impl Fn(&ArrayD<f64>, &Tensor) -> ArrayD<f64> + 'static,
) -> Tensor {
    let pa = a.clone();
    Tensor::new(
        value,
        false,
        vec![a.clone()],
        Some(Box::new(move |g, needs| {
            vec![needs[0].then(|| dfun(g, &pa))]
        })),
    )
}

pub fn neg(a: &Tensor) -> Tensor {
    let v = a.value().mapv(|x| -x);
    unary(a, v, |g, _| g.mapv(|x| -x))
}

pub fn exp(a: &Tensor) -> Tensor {
    let out = a.value().mapv(f64::exp);
    let saved = out.clone();
    unary(a, out, move |g, _| g * &saved)
}

pub fn ln(a: &Tensor) -> Tensor {
    let v = a.value().mapv(f64::ln);
    unary(a, v, |g, p| g / &*p.value())
}

pub fn sqrt(a: &Tensor) -> Tensor {
    let out = a.value().mapv(f64::sqrt);
    let saved = out.clone();
    unary(a, out, move |g, _| {
        let mut d = g / &saved;
        d.mapv_inplace(|x| 0.5 * x);
        d
    })
}

pub fn square(a: &Tensor) -> Tensor {
    let v = a.value().mapv(|x| x * x);
    unary(a, v, |g, p| {
        let mut d = g * &*p.value();
        d.mapv_inplace(|x| 2.0 * x);
        d
    })
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let v = a.value().mapv(|x| c * x);
    unary(a, v, move |g, _| g.mapv(|x| c * x))
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    let v = a.value().mapv(|x| x + c);
    unary(a, v, |g, _| g.clone())
}

pub fn relu(a: &Tensor) -> Tensor {
    let v = a.value().mapv(|x| if x > 0.0 { x } else { 0.0 });
    unary(a, v, |g, p| {
        let pv = p.value();
        ndarray::Zip::from(g)
            .and(&*pv)
            .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 })
    })
}

/// Elementwise max(x, m). Gradient passes where x >= m.
pub fn clamp_min(a: &Tensor, m: f64) -> Tensor {
    let v = a.value().mapv(|x| x.max(m));
    unary(a, v, move |g, p| {
        let pv = p.value();
        ndarray::Zip::from(g)
            .and(&*pv)
            .map_collect(|&gi, &xi| if xi >= m { gi } else { 0.0 })
    })
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all(a: &Tensor) -> Tensor {
    let total = a.value().sum();
    let shape = a.shape();
    unary(
        a,
        ArrayD::from_elem(IxDyn(&[]), total),
        move |g, _| {
            let gv = *g.iter().next().unwrap();
            ArrayD::from_elem(IxDyn(&shape), gv)
        },
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len() as f64;
    scale(&sum_all(a), 1.0 / n)
}

/// Sum along one axis, keeping it as a length-1 dimension.
pub fn sum_axis_keep(a: &Tensor, axis: usize) -> Tensor {
    let v = a.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
    let shape = a.shape();
    unary(a, v, move |g, _| {
        g.broadcast(IxDyn(&shape)).expect("sum_axis grad").to_owned()
    })
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

fn as2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view().into_dimensionality::<Ix2>().expect("2-D tensor").to_owned()
}

/// `dot` may hand back a reversed-axes (F-order) result when given
/// transposed views; force row-major so downstream reshapes and slices see
/// the logical order.
fn std2(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn dot2(a: &ArrayD<f64>, ta: bool, b: &ArrayD<f64>, tb: bool) -> Array2<f64> {
    let av = a.view().into_dimensionality::<Ix2>().expect("2-D lhs");
    let bv = b.view().into_dimensionality::<Ix2>().expect("2-D rhs");
    std2(match (ta, tb) {
        (false, false) => av.dot(&bv),
        (true, false) => av.t().dot(&bv),
        (false, true) => av.dot(&bv.t()),
        (true, true) => av.t().dot(&bv.t()),
    })
}

/// 2-D matrix product with optional transposes: `op(a) . op(b)`.
pub fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let value = dot2(&a.value(), ta, &b.value(), tb).into_dyn();
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::new(
        value,
        false,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, needs| {
            let da = needs[0].then(|| {
                let bv = pb.value();
                if ta {
                    // A was used transposed: dA = op(B) . Gᵀ
                    dot2(&bv, tb, g, true).into_dyn()
                } else {
                    dot2(g, false, &bv, !tb).into_dyn()
                }
            });
            let db = needs[1].then(|| {
                let av = pa.value();
                if tb {
                    dot2(g, true, &av, ta).into_dyn()
                } else {
                    dot2(&av, !ta, g, false).into_dyn()
                }
            });
            vec![da, db]
        })),
    )
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

pub fn reshape(a: &Tensor, shape: &[usize]) -> Tensor {
    let new_len: usize = shape.iter().product();
    assert_eq!(a.len(), new_len, "reshape length mismatch");
    let v = a
        .value()
        .clone()
        .into_shape(IxDyn(shape))
        .expect("reshape");
    let old = a.shape();
    unary(a, v, move |g, _| {
        g.clone().into_shape(IxDyn(&old)).expect("reshape grad")
    })
}

/// Column-wise concatenation of two 2-D tensors with equal row counts.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let av = as2(&a.value());
    let bv = as2(&b.value());
    assert_eq!(av.nrows(), bv.nrows(), "concat_cols row mismatch");
    let ca = av.ncols();
    let value = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
        .expect("concat")
        .into_dyn();
    Tensor::new(
        value,
        false,
        vec![a.clone(), b.clone()],
        Some(Box::new(move |g, needs| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D grad");
            let da = needs[0].then(|| g2.slice(ndarray::s![.., ..ca]).to_owned().into_dyn());
            let db = needs[1].then(|| g2.slice(ndarray::s![.., ca..]).to_owned().into_dyn());
            vec![da, db]
        })),
    )
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax of a 2-D tensor, numerically stabilized.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let x = as2(&a.value());
    let mut out = Array2::<f64>::zeros(x.raw_dim());
    for (mut orow, xrow) in out.outer_iter_mut().zip(x.outer_iter()) {
        let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow.iter()) {
            *o = (v - m).exp();
            z += *o;
        }
        orow.mapv_inplace(|v| v / z);
    }
    let p = out.clone();
    unary(a, out.into_dyn(), move |g, _| {
        let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D grad");
        let mut dz = Array2::<f64>::zeros(p.raw_dim());
        for ((mut drow, grow), prow) in dz.outer_iter_mut().zip(g2.outer_iter()).zip(p.outer_iter())
        {
            let dot: f64 = grow.iter().zip(prow.iter()).map(|(&gi, &pi)| gi * pi).sum();
            for ((d, &gi), &pi) in drow.iter_mut().zip(grow.iter()).zip(prow.iter()) {
                *d = (gi - dot) * pi;
            }
        }
        dz.into_dyn()
    })
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// im2col with column-major patch layout: output is `[C*KH*KW, B*OH*OW]`
/// so that consecutive output positions are contiguous per patch element.
fn im2col(
    x: &ndarray::ArrayView4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, b * oh * ow));
    {
        let cslice = cols.as_slice_mut().expect("contiguous cols");
        let xs = x.as_slice().expect("contiguous input");
        let row_len = b * oh * ow;
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let patch_row = (ci * kh + ky) * kw + kx;
                    let out_base = patch_row * row_len;
                    for bi in 0..b {
                        let x_base = (bi * c + ci) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let dst0 = out_base + (bi * oh + oy) * ow;
                            if iy < 0 || iy >= h as isize {
                                continue; // zero padding, already zeroed
                            }
                            let src_row = x_base + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    cslice[dst0 + ox] = xs[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back to the input layout.
fn col2im(
    dcols: &Array2<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    {
        let dxs = dx.as_slice_mut().expect("contiguous dx");
        let ds = dcols.as_slice().expect("contiguous dcols");
        let row_len = b * oh * ow;
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let patch_row = (ci * kh + ky) * kw + kx;
                    let src_base = patch_row * row_len;
                    for bi in 0..b {
                        let x_base = (bi * c + ci) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src0 = src_base + (bi * oh + oy) * ow;
                            let dst_row = x_base + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dxs[dst_row + ix as usize] += ds[src0 + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2-D convolution, NCHW input `[B,C,H,W]`, weight `[OC,C,KH,KW]`, no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xv = x.value().view().into_dimensionality::<Ix4>().expect("4-D input").to_owned();
    let wv = w.value().view().into_dimensionality::<Ix4>().expect("4-D weight").to_owned();
    let (b, c, h, win) = xv.dim();
    let (oc, wc, kh, kw) = wv.dim();
    assert_eq!(c, wc, "conv2d channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(win, kw, stride, pad);

    let cols = Rc::new(im2col(&xv.view(), kh, kw, stride, pad));
    let wmat = wv
        .view()
        .into_shape((oc, c * kh * kw))
        .expect("weight reshape")
        .to_owned();

    // prod[OC, B*OH*OW] = wmat . cols, then regroup to NCHW
    let prod = std2(wmat.dot(&cols.view()));
    let out = prod
        .into_shape((oc, b, oh, ow))
        .expect("conv out reshape")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned();

    let pw = w.clone();
    let cols_b = Rc::clone(&cols);
    Tensor::new(
        out.into_dyn(),
        false,
        vec![x.clone(), w.clone()],
        Some(Box::new(move |g, needs| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("4-D grad");
            // [B,OC,OH,OW] -> [OC, B*OH*OW]
            let g_mat = g4
                .permuted_axes([1, 0, 2, 3])
                .as_standard_layout()
                .to_owned()
                .into_shape((oc, b * oh * ow))
                .expect("grad reshape");
            let wv2 = pw.value();
            let wv4 = wv2.view().into_dimensionality::<Ix4>().unwrap();
            let wmat2 = wv4
                .into_shape((oc, c * kh * kw))
                .expect("weight reshape");
            let dx = needs[0].then(|| {
                // dcols[CKK, B*OH*OW] = wmatᵀ . g_mat
                let dcols = std2(wmat2.t().dot(&g_mat));
                col2im(&dcols, b, c, h, win, kh, kw, stride, pad).into_dyn()
            });
            let dw = needs[1].then(|| {
                // dW[OC, CKK] = g_mat . colsᵀ
                let dwmat = std2(g_mat.dot(&cols_b.t()));
                dwmat
                    .into_shape((oc, c, kh, kw))
                    .expect("dW reshape")
                    .into_dyn()
            });
            vec![dx, dw]
        })),
    )
}

/// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let xv = x.value().view().into_dimensionality::<Ix4>().expect("4-D input").to_owned();
    let (b, c, h, w) = xv.dim();
    let inv = 1.0 / (h * w) as f64;
    let mut out = Array2::<f64>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            out[[bi, ci]] = xv.slice(ndarray::s![bi, ci, .., ..]).sum() * inv;
        }
    }
    unary(x, out.into_dyn(), move |g, _| {
        let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D grad");
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let v = g2[[bi, ci]] * inv;
                dx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(v);
            }
        }
        dx.into_dyn()
    })
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Training-mode batch norm over `[B,C,H,W]` with per-channel statistics.
/// Returns the normalized output plus the biased batch mean/variance the
/// layer uses to update its running statistics.
pub fn batchnorm2d_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, Array1<f64>, Array1<f64>) {
    let xv = x.value().view().into_dimensionality::<Ix4>().expect("4-D input").to_owned();
    let (b, c, h, w) = xv.dim();
    let m = (b * h * w) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let ch = xv.slice(ndarray::s![.., ci, .., ..]);
        let mu = ch.sum() / m;
        let v = ch.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m;
        mean[ci] = mu;
        var[ci] = v;
    }
    let invstd: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());

    let mut xhat = Array4::<f64>::zeros((b, c, h, w));
    for ci in 0..c {
        let mu = mean[ci];
        let is = invstd[ci];
        let src = xv.slice(ndarray::s![.., ci, .., ..]);
        let mut dst = xhat.slice_mut(ndarray::s![.., ci, .., ..]);
        ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = (s - mu) * is);
    }

    let gv = gamma.value().view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let bv = beta.value().view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    for ci in 0..c {
        let ga = gv[ci];
        let be = bv[ci];
        let src = xhat.slice(ndarray::s![.., ci, .., ..]);
        let mut dst = out.slice_mut(ndarray::s![.., ci, .., ..]);
        ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = ga * s + be);
    }

    let xhat_saved = xhat;
    let invstd_saved = invstd.clone();
    let gamma_saved = gv;
    let node = Tensor::new(
        out.into_dyn(),
        false,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Some(Box::new(move |g, needs| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("4-D grad").to_owned();
            let mut dgamma = Array1::<f64>::zeros(c);
            let mut dbeta = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                let xs = xhat_saved.slice(ndarray::s![.., ci, .., ..]);
                dbeta[ci] = gs.sum();
                dgamma[ci] = ndarray::Zip::from(&gs).and(&xs).fold(0.0, |acc, &a, &b| acc + a * b);
            }
            let dx = needs[0].then(|| {
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for ci in 0..c {
                    let k = gamma_saved[ci] * invstd_saved[ci];
                    let mean_g = dbeta[ci] / m;
                    let mean_gx = dgamma[ci] / m;
                    let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                    let xs = xhat_saved.slice(ndarray::s![.., ci, .., ..]);
                    let mut ds = dx.slice_mut(ndarray::s![.., ci, .., ..]);
                    ndarray::Zip::from(&mut ds)
                        .and(&gs)
                        .and(&xs)
                        .for_each(|d, &gi, &xh| *d = k * (gi - mean_g - xh * mean_gx));
                }
                dx.into_dyn()
            });
            let dg = needs[1].then(|| dgamma.clone().into_dyn());
            let db = needs[2].then(|| dbeta.clone().into_dyn());
            vec![dx, dg, db]
        })),
    );
    (node, mean, var)
}

/// Evaluation-mode batch norm with fixed running statistics.
pub fn batchnorm2d_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
    eps: f64,
) -> Tensor {
    let xv = x.value().view().into_dimensionality::<Ix4>().expect("4-D input").to_owned();
    let (b, c, h, w) = xv.dim();
    let invstd: Array1<f64> = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
    let gv = gamma.value().view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let bv = beta.value().view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();

    let mut xhat = Array4::<f64>::zeros((b, c, h, w));
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    for ci in 0..c {
        let mu = running_mean[ci];
        let is = invstd[ci];
        let ga = gv[ci];
        let be = bv[ci];
        let src = xv.slice(ndarray::s![.., ci, .., ..]);
        let mut xh = xhat.slice_mut(ndarray::s![.., ci, .., ..]);
        let mut dst = out.slice_mut(ndarray::s![.., ci, .., ..]);
        ndarray::Zip::from(&mut xh)
            .and(&mut dst)
            .and(&src)
            .for_each(|x_, o, &s| {
                *x_ = (s - mu) * is;
                *o = ga * *x_ + be;
            });
    }

    let xhat_saved = xhat;
    let invstd_saved = invstd;
    let gamma_saved = gv;
    Tensor::new(
        out.into_dyn(),
        false,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Some(Box::new(move |g, needs| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("4-D grad").to_owned();
            let dx = needs[0].then(|| {
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for ci in 0..c {
                    let k = gamma_saved[ci] * invstd_saved[ci];
                    let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                    let mut ds = dx.slice_mut(ndarray::s![.., ci, .., ..]);
                    ndarray::Zip::from(&mut ds).and(&gs).for_each(|d, &gi| *d = k * gi);
                }
                dx.into_dyn()
            });
            let dg = needs[1].then(|| {
                let mut dgamma = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                    let xs = xhat_saved.slice(ndarray::s![.., ci, .., ..]);
                    dgamma[ci] =
                        ndarray::Zip::from(&gs).and(&xs).fold(0.0, |acc, &a, &b| acc + a * b);
                }
                dgamma.into_dyn()
            });
            let db = needs[2].then(|| {
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    dbeta[ci] = g4.slice(ndarray::s![.., ci, .., ..]).sum();
                }
                dbeta.into_dyn()
            });
            vec![dx, dg, db]
        })),
    )
}

// ---------------------------------------------------------------------------
// Operator sugar
// ---------------------------------------------------------------------------

impl std::ops::Add for &Tensor {
    type Output = Tensor;
    fn add(self, rhs: &Tensor) -> Tensor {
        add(self, rhs)
    }
}

impl std::ops::Sub for &Tensor {
    type Output = Tensor;
    fn sub(self, rhs: &Tensor) -> Tensor {
        sub(self, rhs)
    }
}

impl std::ops::Mul for &Tensor {
    type Output = Tensor;
    fn mul(self, rhs: &Tensor) -> Tensor {
        mul(self, rhs)
    }
}

impl std::ops::Div for &Tensor {
    type Output = Tensor;
    fn div(self, rhs: &Tensor) -> Tensor {
        div(self, rhs)
    }
}

/// View an arbitrary-dimension value as a tensor-friendly dynamic array.
pub fn dynview(v: ArrayViewD<'_, f64>) -> ArrayD<f64> {
    v.to_owned()
}
