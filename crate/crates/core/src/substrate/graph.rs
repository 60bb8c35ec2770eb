//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation evaluates eagerly and appends a node to the tape, so the
//! tape order is already a topological order. [`Graph::backward`] walks it in
//! reverse.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom, NormEps, Window};
use super::params::{Gradients, ParameterSet};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastAdd(Var, Var, Vec<usize>),
    BroadcastMul(Var, Var, Vec<usize>),
    Scale(Var, R),
    Square(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        n: usize,
        k: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    Relu(Var),
    Silu(Var),
    Normalize {
        x: Var,
        row: usize,
        inv: Vec<R>,
        k: Vec<R>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Pad2d(Var, Window),
    Crop2d(Var, Window),
    SpaceToDepth(Var),
    Upsample2(Var),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_chunk: usize,
        b_chunk: usize,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    SumAll(Var),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Recording tape. Build one per forward pass.
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    params: BTreeMap<String, Var>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node; differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<R>) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, mut t: Tensor<R>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Register every tensor of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParameterSet<R>) {
        self.bind_with(params, true)
    }

    /// Register parameters as constants (inference, or frozen sub-models).
    pub fn bind_frozen(&mut self, params: &ParameterSet<R>) {
        self.bind_with(params, false)
    }

    fn bind_with(&mut self, params: &ParameterSet<R>, grad: bool) {
        for (name, t) in params.iter() {
            let mut t = t.clone();
            t.requires_grad = grad;
            let v = self.leaf(t);
            self.params.insert(name.to_string(), v);
        }
    }

    /// Bound parameter by name.
    ///
    /// # Panics
    /// If no parameter of that name was bound; this is a model wiring bug.
    pub fn param(&self, name: &str) -> Var {
        match self.params.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn data(&self, v: Var) -> &[R] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Tensor<R> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(self.shape(a).to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(R) -> R) -> Tensor<R> {
        self.value(a).map(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let t = self.elementwise(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let t = self.elementwise(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let t = self.elementwise(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    fn bstrides(&self, a: Var, b: Var) -> Vec<usize> {
        kernels::broadcast_strides(self.shape(a), self.shape(b)).unwrap_or_else(|| {
            panic!(
                "cannot broadcast {:?} onto {:?}",
                self.shape(b),
                self.shape(a)
            )
        })
    }

    /// `a + b` where `b` has `a`'s rank and extent 1 on broadcast axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let st = self.bstrides(a, b);
        let data = kernels::broadcast_binary(self.data(a), self.shape(a), self.data(b), &st, |x, y| x + y);
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::BroadcastAdd(a, b, st), ng)
    }

    /// `a * b` with `b` broadcast as in [`Graph::add_broadcast`].
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Var {
        let st = self.bstrides(a, b);
        let data = kernels::broadcast_binary(self.data(a), self.shape(a), self.data(b), &st, |x, y| x * y);
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::BroadcastMul(a, b, st), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = R::lit(c);
        let t = self.unary(a, |x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x * x);
        let ng = self.ng(a);
        self.push(t, Op::Square(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| if x > R::zero() { x } else { R::zero() });
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x / (R::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    /// Matrix product over the last two axes. Operands are `[m,k]·[k,n]` or
    /// batched `[b,m,k]·[b,k,n]`, each optionally stored transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(
            sa.len() == sb.len() && (sa.len() == 2 || sa.len() == 3),
            "matmul: ranks {sa:?} {sb:?}"
        );
        let r = sa.len();
        let batch = if r == 3 { sa[0] } else { 1 };
        if r == 3 {
            assert_eq!(sa[0], sb[0], "matmul: batch extents differ");
        }
        let (m, ka) = if trans_a { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        assert_eq!(ka, kb, "matmul: inner extents {sa:?} {sb:?}");
        let k = ka;
        let mut out = vec![R::zero(); batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                super::real::gemm(
                    trans_a,
                    trans_b,
                    m,
                    n,
                    k,
                    &da[i * m * k..(i + 1) * m * k],
                    &db[i * k * n..(i + 1) * k * n],
                    R::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                n,
                k,
            },
            ng,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        assert_eq!(perm.len(), self.shape(a).len(), "permute: rank");
        let (data, shape) = kernels::permute(self.data(a), self.shape(a), perm);
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, data), Op::Permute(a, perm.to_vec()), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let row = *self.shape(a).last().expect("rank >= 1");
        let data = kernels::softmax_rows(self.data(a), row);
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Zero-mean unit-variance normalization of contiguous rows of length
    /// `row` (no affine part).
    pub fn normalize(&mut self, a: Var, row: usize, eps: NormEps) -> Var {
        assert!(
            row > 0 && self.value(a).len() % row == 0,
            "normalize: row length {row} does not divide {:?}",
            self.shape(a)
        );
        let (y, inv, k) = kernels::normalize_rows(self.data(a), row, eps);
        let t = Tensor::from_parts(self.shape(a).to_vec(), y);
        let ng = self.ng(a);
        self.push(t, Op::Normalize { x: a, row, inv, k }, ng)
    }

    /// Stride-1 convolution over NCHW input with kernel `[O,I,k,k]`,
    /// symmetric zero padding `pad` and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sx.len() == 4 && sw.len() == 4, "conv2d: ranks {sx:?} {sw:?}");
        assert_eq!(sx[1], sw[1], "conv2d: input channels {sx:?} vs kernel {sw:?}");
        assert_eq!(sw[2], sw[3], "conv2d: square kernels only");
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            cout: sw[0],
            h: sx[2],
            w: sx[3],
            k: sw[2],
            pad,
        };
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[sw[0]], "conv2d: bias shape");
        }
        let out = kernels::conv2d_forward(
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let shape = vec![geom.batch, geom.cout, geom.out_h(), geom.out_w()];
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Zero-pad the two trailing axes: `(top, bottom, left, right)`.
    pub fn pad2d(&mut self, x: Var, (top, bottom, left, right): (usize, usize, usize, usize)) -> Var {
        let s = self.shape(x).to_vec();
        let r = s.len();
        let planes: usize = s[..r - 2].iter().product();
        let (h, w) = (s[r - 2] + top + bottom, s[r - 1] + left + right);
        let win = Window {
            planes,
            h,
            w,
            top,
            left,
            oh: s[r - 2],
            ow: s[r - 1],
        };
        let mut big = vec![R::zero(); planes * h * w];
        kernels::scatter_window(&win, self.data(x), &mut big);
        let mut shape = s[..r - 2].to_vec();
        shape.extend([h, w]);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, big), Op::Pad2d(x, win), ng)
    }

    /// Keep the `[top..top+h, left..left+w]` window of the two trailing axes.
    pub fn crop2d(&mut self, x: Var, (top, left): (usize, usize), (h, w): (usize, usize)) -> Var {
        let s = self.shape(x).to_vec();
        let r = s.len();
        assert!(top + h <= s[r - 2] && left + w <= s[r - 1], "crop2d: out of range");
        let planes: usize = s[..r - 2].iter().product();
        let win = Window {
            planes,
            h: s[r - 2],
            w: s[r - 1],
            top,
            left,
            oh: h,
            ow: w,
        };
        let mut small = vec![R::zero(); planes * h * w];
        kernels::gather_window(&win, self.data(x), &mut small);
        let mut shape = s[..r - 2].to_vec();
        shape.extend([h, w]);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, small), Op::Crop2d(x, win), ng)
    }

    /// `[B,C,H,W] -> [B,4C,H/2,W/2]`; H and W must be even.
    pub fn space_to_depth(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0, "space_to_depth: {s:?}");
        let (data, shape) = kernels::space_to_depth(self.data(x), &s);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, data), Op::SpaceToDepth(x), ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2: rank");
        let (data, shape) = kernels::upsample2(self.data(x), &s);
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, data), Op::Upsample2(x), ng)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), sb.len(), "concat: rank");
        for i in 0..sa.len() {
            if i != axis {
                assert_eq!(sa[i], sb[i], "concat: {sa:?} vs {sb:?} on axis {axis}");
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (a_chunk, b_chunk) = (sa[axis] * inner, sb[axis] * inner);
        let mut out = Vec::with_capacity(outer * (a_chunk + b_chunk));
        {
            let (da, db) = (self.data(a), self.data(b));
            for o in 0..outer {
                out.extend_from_slice(&da[o * a_chunk..(o + 1) * a_chunk]);
                out.extend_from_slice(&db[o * b_chunk..(o + 1) * b_chunk]);
            }
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                a,
                b,
                outer,
                a_chunk,
                b_chunk,
            },
            ng,
        )
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (outer, extent, inner) = super::tensor::split_at_axis(&s, axis);
        let inv = R::one() / R::lit(extent as f64);
        let mut out = vec![R::zero(); outer * inner];
        let d = self.data(x);
        for o in 0..outer {
            for e in 0..extent {
                let src = &d[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let mut shape = s;
        shape[axis] = 1;
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MeanAxis {
                x,
                outer,
                extent,
                inner,
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Reverse pass from the scalar `loss`. Returns gradients of every bound
    /// parameter that lies on a path to `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar, got {:?}", lt.shape())));
        }
        let lv = lt.data()[0];
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {lv}")));
        }
        let grads = self.backward_from(loss)?;
        let mut out = Gradients::default();
        for (name, &v) in &self.params {
            if let Some(gt) = &grads[v.0] {
                if !gt.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{name}`")));
                }
                out.insert(name.clone(), gt.clone());
            }
        }
        Ok(out)
    }

    /// Gradient of the scalar `loss` w.r.t. an arbitrary differentiable node.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Option<Tensor<R>>> {
        let mut grads = self.backward_from(loss)?;
        Ok(grads[wrt.0].take())
    }

    fn backward_from(&self, loss: Var) -> Result<Vec<Option<Tensor<R>>>> {
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(loss) {
            return Ok(grads);
        }
        grads[loss.0] = Some(Tensor::scalar(R::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_backward(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn acc(&self, grads: &mut [Option<Tensor<R>>], v: Var, f: impl FnOnce(&mut [R])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("set above").data_mut());
    }

    fn acc_tensor(&self, grads: &mut [Option<Tensor<R>>], v: Var, t: Tensor<R>) {
        if !self.ng(v) {
            return;
        }
        let t = t.reshape(self.shape(v)).expect("same size");
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn apply_backward(&self, node: &Node<R>, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_tensor(grads, *a, g.clone());
                self.acc_tensor(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_tensor(grads, *a, g.clone());
                self.acc_tensor(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |o| {
                    for ((o, &x), &y) in o.iter_mut().zip(gd).zip(db) {
                        *o += x * y;
                    }
                });
                self.acc(grads, *b, |o| {
                    for ((o, &x), &y) in o.iter_mut().zip(gd).zip(da) {
                        *o += x * y;
                    }
                });
            }
            Op::BroadcastAdd(a, b, st) => {
                self.acc_tensor(grads, *a, g.clone());
                let shape = self.shape(*a);
                self.acc(grads, *b, |o| kernels::broadcast_reduce(gd, shape, st, None, o));
            }
            Op::BroadcastMul(a, b, st) => {
                let shape = self.shape(*a);
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |o| {
                    let scaled = kernels::broadcast_binary(gd, shape, db, st, |x, y| x * y);
                    for (o, v) in o.iter_mut().zip(scaled) {
                        *o += v;
                    }
                });
                self.acc(grads, *b, |o| kernels::broadcast_reduce(gd, shape, st, Some(da), o));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, |o| {
                    for (o, &x) in o.iter_mut().zip(gd) {
                        *o += x * c;
                    }
                });
            }
            Op::Square(a) => {
                let da = self.data(*a);
                let two = R::lit(2.0);
                self.acc(grads, *a, |o| {
                    for ((o, &x), &v) in o.iter_mut().zip(gd).zip(da) {
                        *o += two * v * x;
                    }
                });
            }
            Op::Relu(a) => {
                let da = self.data(*a);
                self.acc(grads, *a, |o| {
                    for ((o, &x), &v) in o.iter_mut().zip(gd).zip(da) {
                        if v > R::zero() {
                            *o += x;
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let da = self.data(*a);
                self.acc(grads, *a, |o| {
                    for ((o, &x), &v) in o.iter_mut().zip(gd).zip(da) {
                        let s = R::one() / (R::one() + (-v).exp());
                        *o += x * s * (R::one() + v * (R::one() - s));
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                n,
                k,
            } => {
                let (ta, tb, m, n, k) = (*trans_a, *trans_b, *m, *n, *k);
                let (da, db) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |o| {
                    for i in 0..*batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &db[i * k * n..(i + 1) * k * n];
                        let oi = &mut o[i * m * k..(i + 1) * m * k];
                        if ta {
                            super::real::gemm(tb, true, k, m, n, bi, gi, R::one(), oi);
                        } else {
                            super::real::gemm(false, !tb, m, k, n, gi, bi, R::one(), oi);
                        }
                    }
                });
                self.acc(grads, *b, |o| {
                    for i in 0..*batch {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let oi = &mut o[i * k * n..(i + 1) * k * n];
                        if tb {
                            super::real::gemm(true, ta, n, k, m, gi, ai, R::one(), oi);
                        } else {
                            super::real::gemm(!ta, false, k, n, m, ai, gi, R::one(), oi);
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc_tensor(grads, *a, g.clone()),
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_perm(perm);
                let (data, _) = kernels::permute(gd, g.shape(), &inv);
                self.acc(grads, *a, |o| {
                    for (o, v) in o.iter_mut().zip(data) {
                        *o += v;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let row = *node.value.shape().last().expect("rank");
                self.acc(grads, *a, |o| {
                    for ((os, gs), ys) in o.chunks_mut(row).zip(gd.chunks(row)).zip(y.chunks(row)) {
                        let mut dot = R::zero();
                        for (&gv, &yv) in gs.iter().zip(ys) {
                            dot += gv * yv;
                        }
                        for ((o, &gv), &yv) in os.iter_mut().zip(gs).zip(ys) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Normalize { x, row, inv, k } => {
                let y = node.value.data();
                self.acc(grads, *x, |o| kernels::normalize_rows_backward(gd, y, *row, inv, k, o));
            }
            Op::Conv2d { x, w, b, geom } => {
                // Take the three gradient slots out, run one fused pass.
                let want_x = self.ng(*x);
                let want_w = self.ng(*w);
                let want_b = b.is_some_and(|b| self.ng(b));
                let mut gx = want_x.then(|| take_or_zero(grads, *x, self.shape(*x)));
                let mut gw = want_w.then(|| take_or_zero(grads, *w, self.shape(*w)));
                let mut gb = if want_b {
                    b.map(|b| take_or_zero(grads, b, self.shape(b)))
                } else {
                    None
                };
                kernels::conv2d_backward(
                    gd,
                    self.data(*x),
                    self.data(*w),
                    geom,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = gx {
                    grads[x.0] = Some(t);
                }
                if let Some(t) = gw {
                    grads[w.0] = Some(t);
                }
                if let (Some(t), Some(b)) = (gb, b) {
                    grads[b.0] = Some(t);
                }
            }
            Op::Pad2d(x, win) => {
                self.acc(grads, *x, |o| {
                    let mut tmp = vec![R::zero(); o.len()];
                    kernels::gather_window(win, gd, &mut tmp);
                    for (o, v) in o.iter_mut().zip(tmp) {
                        *o += v;
                    }
                });
            }
            Op::Crop2d(x, win) => {
                self.acc(grads, *x, |o| kernels::scatter_window(win, gd, o));
            }
            Op::SpaceToDepth(x) => {
                let s = self.shape(*x);
                self.acc(grads, *x, |o| kernels::depth_to_space_add(gd, s, o));
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                self.acc(grads, *x, |o| kernels::upsample2_backward(gd, s, o));
            }
            Op::Concat {
                a,
                b,
                outer,
                a_chunk,
                b_chunk,
            } => {
                let (ac, bc) = (*a_chunk, *b_chunk);
                self.acc(grads, *a, |o| {
                    for i in 0..*outer {
                        let src = &gd[i * (ac + bc)..i * (ac + bc) + ac];
                        for (d, &s) in o[i * ac..(i + 1) * ac].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                self.acc(grads, *b, |o| {
                    for i in 0..*outer {
                        let src = &gd[i * (ac + bc) + ac..(i + 1) * (ac + bc)];
                        for (d, &s) in o[i * bc..(i + 1) * bc].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::MeanAxis {
                x,
                outer,
                extent,
                inner,
            } => {
                let (outer, extent, inner) = (*outer, *extent, *inner);
                let inv = R::one() / R::lit(extent as f64);
                self.acc(grads, *x, |o| {
                    for oi in 0..outer {
                        let src = &gd[oi * inner..(oi + 1) * inner];
                        for e in 0..extent {
                            let base = (oi * extent + e) * inner;
                            for (d, &s) in o[base..base + inner].iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let s = gd[0];
                self.acc(grads, *x, |o| {
                    for o in o.iter_mut() {
                        *o += s;
                    }
                });
            }
        }
    }
}

fn take_or_zero<R: Real>(grads: &mut [Option<Tensor<R>>], v: Var, shape: &[usize]) -> Tensor<R> {
    grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape))
}
