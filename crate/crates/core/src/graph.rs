//! Reverse-mode automatic differentiation over a recorded computation.
//!
//! A [`Graph`] is an append-only list of nodes. Leaves are created with
//! [`Graph::constant`] or [`Graph::param`]; every operation appends a node
//! holding its output value and the handles it was computed from. Since
//! nodes are only ever appended, insertion order is a topological order and
//! [`Graph::backward`] simply walks it in reverse.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, LookupGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    Depthwise { input: Var, weight: Var, bias: Option<Var>, k: usize },
    Bilinear { map: Var, coords: Var },
    AvgPool2(Var),
    InstanceNorm { input: Var, inv_std: Vec<T> },
    Concat(Vec<Var>),
    Slice { input: Var, start: usize, len: usize },
    Expand(Var),
    Corr { a: Var, b: Var, scale: T },
    Lookup { volume: Var, flow: Var, geom: LookupGeom },
    Sum(Var),
    L1Mean(Var, Var),
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one between backward passes.
    grad: Option<Vec<T>>,
}

/// The recorded computation. Owned by a single thread while it is built.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real = f32> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf, or `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = self.node(v);
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn chw(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(shape_err!("{what} must be C×H×W, got {s:?}")),
        }
    }

    // ---- elementwise ------------------------------------------------------

    /// Binary elementwise op. `b` may equal `a`'s shape or be a suffix of it,
    /// in which case it is repeated along the leading dimensions.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % n];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let value = self.value(a).map(|x| match kind {
            Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(T::zero()),
        });
        let rg = self.rg(&[a]);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    // ---- convolution ------------------------------------------------------

    /// Cross-correlation of a `C_in×H×W` input with `C_out×C_in×k×k`
    /// weights. Fails unless the window tiles the padded input exactly.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, w) = self.chw(input, "conv2d input")?;
        let (c_out, k) = match *self.shape(weight) {
            [co, ci, k1, k2] if ci == c_in && k1 == k2 => (co, k1),
            ref s => return Err(shape_err!("conv2d weight {s:?} incompatible with {c_in} input channels")),
        };
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err!("conv2d bias {:?}, expected [{c_out}]", self.shape(b)));
            }
        }
        let (Some(h_out), Some(w_out)) =
            (kernels::conv_out_dim(h, k, stride, pad), kernels::conv_out_dim(w, k, stride, pad))
        else {
            return Err(shape_err!(
                "conv2d output size not integral for {h}×{w}, k={k}, stride={stride}, pad={pad}"
            ));
        };
        let geom = ConvGeom { c_in, h, w, c_out, k, stride, pad, h_out, w_out };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new([c_out, h_out, w_out], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    /// Per-channel `k×k` convolution with stride 1 and same padding;
    /// weights are `C×k×k`.
    pub fn depthwise_conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (c, h, w) = self.chw(input, "depthwise input")?;
        let k = match *self.shape(weight) {
            [wc, k1, k2] if wc == c && k1 == k2 && k1 % 2 == 1 => k1,
            ref s => return Err(shape_err!("depthwise weight {s:?} incompatible with {c} channels")),
        };
        if let Some(b) = bias {
            if self.shape(b) != [c] {
                return Err(shape_err!("depthwise bias {:?}, expected [{c}]", self.shape(b)));
            }
        }
        let out = kernels::depthwise_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            c,
            h,
            w,
            k,
        );
        let value = Tensor::new([c, h, w], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Depthwise { input, weight, bias, k }, rg))
    }

    // ---- sampling and pooling ---------------------------------------------

    /// Samples every channel of a `C×H×W` map at the `(x, y)` pixel
    /// coordinates held in a `2×H'×W'` tensor. Coordinates are clamped to
    /// the map border before interpolation.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let (c, h, w) = self.chw(map, "bilinear map")?;
        let (h2, w2) = match *self.shape(coords) {
            [2, h2, w2] => (h2, w2),
            ref s => return Err(shape_err!("bilinear coords must be 2×H×W, got {s:?}")),
        };
        let n = h2 * w2;
        let m = self.value(map).data();
        let xy = self.value(coords).data();
        let mut out = vec![T::zero(); c * n];
        for p in 0..n {
            let t = kernels::tap(xy[p], xy[n + p], h, w);
            for ch in 0..c {
                out[ch * n + p] = t.sample(&m[ch * h * w..(ch + 1) * h * w]);
            }
        }
        let value = Tensor::new([c, h2, w2], out)?;
        let rg = self.rg(&[map, coords]);
        Ok(self.push(value, Op::Bilinear { map, coords }, rg))
    }

    /// 2×2 mean pooling over the last two dimensions; odd edges average the
    /// smaller window that remains.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("avg_pool2 needs at least 2 dims, got {shape:?}"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let lead: usize = shape[..shape.len() - 2].iter().product();
        let out = kernels::avg_pool2_forward(self.value(input).data(), lead, h, w);
        let mut oshape = shape;
        let nd = oshape.len();
        oshape[nd - 2] = h.div_ceil(2);
        oshape[nd - 1] = w.div_ceil(2);
        let value = Tensor::new(oshape, out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::AvgPool2(input), rg))
    }

    /// Per-channel normalization of a `C×H×W` tensor to zero mean and unit
    /// variance over the spatial grid.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.chw(input, "instance_norm input")?;
        let n = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * n);
        let mut inv_std = Vec::with_capacity(c);
        for plane in x.chunks_exact(n) {
            let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = plane.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(plane.iter().map(|v| T::from_f64((v.as_f64() - mean) * inv)));
            inv_std.push(T::from_f64(inv));
        }
        let value = Tensor::new([c, h, w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::InstanceNorm { input, inv_std }, rg))
    }

    // ---- structural ---------------------------------------------------------

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let (_, h, w) = self.chw(first, "concat part")?;
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.chw(p, "concat part")?;
            if (ph, pw) != (h, w) {
                return Err(shape_err!("concat spatial mismatch {ph}×{pw} vs {h}×{w}"));
            }
            channels += c;
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([channels, h, w], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len` of a `C×H×W` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.chw(input, "slice input")?;
        if start + len > c || len == 0 {
            return Err(shape_err!("channel slice {start}..{} of {c}", start + len));
        }
        let plane = h * w;
        let data = self.value(input).data()[start * plane..(start + len) * plane].to_vec();
        let value = Tensor::new([len, h, w], data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Slice { input, start, len }, rg))
    }

    /// Broadcasts a per-channel vector (`C` or `C×1×1`) over an `H×W` grid.
    pub fn expand_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let c = match *self.shape(input) {
            [c] | [c, 1, 1] => c,
            ref s => return Err(shape_err!("expand_spatial needs C or C×1×1, got {s:?}")),
        };
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(c * h * w);
        for &v in src {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let value = Tensor::new([c, h, w], data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Expand(input), rg))
    }

    // ---- correlation --------------------------------------------------------

    /// All-pairs correlation `out[i,j,p,q] = scale·⟨a[:,i,j], b[:,p,q]⟩`
    /// between two `D×H×W` feature maps; output shape `H×W×H×W`.
    pub fn correlation(&mut self, a: Var, b: Var, scale: T) -> Result<Var> {
        let (d, h, w) = self.chw(a, "correlation input")?;
        if self.shape(b) != [d, h, w] {
            return Err(shape_err!("correlation inputs {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let n = h * w;
        let mut out = vec![T::zero(); n * n];
        // out (n×n) = aᵀ (n×d) · b (d×n)
        T::gemm(n, d, n, scale, self.value(a).data(), 1, n, self.value(b).data(), n, 1, T::zero(), &mut out, n, 1);
        let value = Tensor::new([h, w, h, w], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Corr { a, b, scale }, rg))
    }

    /// Windowed lookup into a `H×W×Hl×Wl` correlation level. For every source
    /// pixel `x` and offset `d` in the `(2r+1)²` grid (row-major), samples
    /// the source's target plane at `(x + flow(x))·inv_scale + d`.
    pub fn corr_lookup(&mut self, volume: Var, flow: Var, radius: usize, inv_scale: f64) -> Result<Var> {
        let (h, w, hl, wl) = match *self.shape(volume) {
            [h, w, hl, wl] => (h, w, hl, wl),
            ref s => return Err(shape_err!("correlation level must be 4-D, got {s:?}")),
        };
        if self.shape(flow) != [2, h, w] {
            return Err(shape_err!("lookup flow {:?}, expected [2, {h}, {w}]", self.shape(flow)));
        }
        let geom = LookupGeom { h, w, hl, wl, radius, inv_scale };
        let out = kernels::lookup_forward(self.value(volume).data(), self.value(flow).data(), &geom);
        let value = Tensor::new([geom.window(), h, w], out)?;
        let rg = self.rg(&[volume, flow]);
        Ok(self.push(value, Op::Lookup { volume, flow, geom }, rg))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean absolute difference over all elements, as a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("l1_mean {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let total: T = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum();
        let mean = total / T::from_f64(av.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(mean), Op::L1Mean(a, b), rg))
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every reachable leaf created with
    /// [`Graph::param`]. Calling it again without [`Graph::zero_grad`] adds
    /// to the existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &gout, &mut grads, &mut leaves);
        }
        for (i, g) in leaves {
            let slot = self.nodes[i].grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s = *s + v;
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
        leaves: &mut Vec<(usize, Vec<T>)>,
    ) {
        let nodes = &self.nodes;
        // Gradient buffer of an input, allocated on first use; `None` when
        // the input does not need a gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
                } else {
                    None
                }
            }};
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => leaves.push((i, gout.to_vec())),
            &Op::Binary(kind, a, b) => {
                let n = nodes[b.0].value.numel();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = buf!(a) {
                    for (k, g) in ga.iter_mut().enumerate() {
                        *g = *g + match kind {
                            Binary::Add | Binary::Sub => gout[k],
                            Binary::Mul => gout[k] * bv[k % n],
                        };
                    }
                }
                if let Some(gb) = buf!(b) {
                    for (k, &go) in gout.iter().enumerate() {
                        let j = k % n;
                        gb[j] = gb[j]
                            + match kind {
                                Binary::Add => go,
                                Binary::Sub => -go,
                                Binary::Mul => go * av[k],
                            };
                    }
                }
            }
            &Op::Unary(kind, a) => {
                let out = node.value.data();
                if let Some(ga) = buf!(a) {
                    for (k, g) in ga.iter_mut().enumerate() {
                        let y = out[k];
                        let d = match kind {
                            Unary::Sigmoid => y * (T::one() - y),
                            Unary::Tanh => T::one() - y * y,
                            Unary::Relu => {
                                if y > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        *g = *g + gout[k] * d;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = buf!(a) {
                    for (g, &go) in ga.iter_mut().zip(gout) {
                        *g = *g + go * s;
                    }
                }
            }
            &Op::Conv2d { input, weight, bias, geom } => {
                let x = nodes[input.0].value.data();
                let wv = nodes[weight.0].value.data();
                // Three disjoint buffers are needed at once; take them out
                // of the table and put them back afterwards.
                let mut dx = buf!(input).map(std::mem::take);
                let mut dw = buf!(weight).map(std::mem::take);
                let mut db = bias.and_then(|b| buf!(b).map(std::mem::take));
                kernels::conv2d_backward(
                    x,
                    wv,
                    gout,
                    &geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = dw {
                    grads[weight.0] = Some(v);
                }
                if let (Some(b), Some(v)) = (bias, db) {
                    grads[b.0] = Some(v);
                }
            }
            &Op::Depthwise { input, weight, bias, k } => {
                let [c, h, w] = [node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]];
                let x = nodes[input.0].value.data();
                let wv = nodes[weight.0].value.data();
                let mut dx = buf!(input).map(std::mem::take);
                let mut dw = buf!(weight).map(std::mem::take);
                let mut db = bias.and_then(|b| buf!(b).map(std::mem::take));
                kernels::depthwise_backward(
                    x,
                    wv,
                    gout,
                    c,
                    h,
                    w,
                    k,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(v) = dx {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = dw {
                    grads[weight.0] = Some(v);
                }
                if let (Some(b), Some(v)) = (bias, db) {
                    grads[b.0] = Some(v);
                }
            }
            &Op::Bilinear { map, coords } => {
                let ms = nodes[map.0].value.shape();
                let (c, h, w) = (ms[0], ms[1], ms[2]);
                let m = nodes[map.0].value.data();
                let xy = nodes[coords.0].value.data();
                let n = xy.len() / 2;
                let mut dmap = buf!(map).map(std::mem::take);
                if let Some(dc) = buf!(coords) {
                    for p in 0..n {
                        let t = kernels::tap(xy[p], xy[n + p], h, w);
                        for ch in 0..c {
                            let (gx, gy) = t.grad_xy(&m[ch * h * w..(ch + 1) * h * w]);
                            let go = gout[ch * n + p];
                            dc[p] = dc[p] + go * gx;
                            dc[n + p] = dc[n + p] + go * gy;
                        }
                    }
                }
                if let Some(dm) = dmap.as_deref_mut() {
                    for p in 0..n {
                        let t = kernels::tap(xy[p], xy[n + p], h, w);
                        for ch in 0..c {
                            t.scatter(&mut dm[ch * h * w..(ch + 1) * h * w], gout[ch * n + p]);
                        }
                    }
                }
                if let Some(v) = dmap {
                    grads[map.0] = Some(v);
                }
            }
            &Op::AvgPool2(a) => {
                let s = nodes[a.0].value.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let lead = s[..s.len() - 2].iter().product();
                if let Some(ga) = buf!(a) {
                    kernels::avg_pool2_backward(gout, lead, h, w, ga);
                }
            }
            Op::InstanceNorm { input, inv_std } => {
                let y = node.value.data();
                let n = y.len() / inv_std.len();
                if let Some(ga) = buf!(*input) {
                    for (ch, &inv) in inv_std.iter().enumerate() {
                        let r = ch * n..(ch + 1) * n;
                        let (yc, gc) = (&y[r.clone()], &gout[r.clone()]);
                        let mean_g = gc.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
                        let mean_gy = gc.iter().zip(yc).map(|(g, y)| g.as_f64() * y.as_f64()).sum::<f64>() / n as f64;
                        for (k, dst) in ga[r].iter_mut().enumerate() {
                            let d = inv.as_f64() * (gc[k].as_f64() - mean_g - yc[k].as_f64() * mean_gy);
                            *dst = *dst + T::from_f64(d);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(gp) = buf!(p) {
                        for (g, &go) in gp.iter_mut().zip(&gout[offset..offset + len]) {
                            *g = *g + go;
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { input, start, len } => {
                let s = node.value.shape();
                let plane = s[1] * s[2];
                if let Some(gi) = buf!(input) {
                    let dst = &mut gi[start * plane..(start + len) * plane];
                    for (g, &go) in dst.iter_mut().zip(gout) {
                        *g = *g + go;
                    }
                }
            }
            &Op::Expand(a) => {
                let s = node.value.shape();
                let plane = s[1] * s[2];
                if let Some(ga) = buf!(a) {
                    for (c, g) in ga.iter_mut().enumerate() {
                        *g = *g + gout[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
                    }
                }
            }
            &Op::Corr { a, b, scale } => {
                let s = nodes[a.0].value.shape();
                let (d, n) = (s[0], s[1] * s[2]);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                // da (d×n) = scale · b (d×n) · goutᵀ (n×n)
                if let Some(ga) = buf!(a) {
                    T::gemm(d, n, n, scale, bv, n, 1, gout, 1, n, T::one(), ga, n, 1);
                }
                // db (d×n) = scale · a (d×n) · gout (n×n)
                if let Some(gb) = buf!(b) {
                    T::gemm(d, n, n, scale, av, n, 1, gout, n, 1, T::one(), gb, n, 1);
                }
            }
            &Op::Lookup { volume, flow, geom } => {
                let vol = nodes[volume.0].value.data();
                let fl = nodes[flow.0].value.data();
                let mut dvol = buf!(volume).map(std::mem::take);
                let mut dflow = buf!(flow).map(std::mem::take);
                kernels::lookup_backward(vol, fl, gout, &geom, dvol.as_deref_mut(), dflow.as_deref_mut());
                if let Some(v) = dvol {
                    grads[volume.0] = Some(v);
                }
                if let Some(v) = dflow {
                    grads[flow.0] = Some(v);
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = buf!(a) {
                    for g in ga.iter_mut() {
                        *g = *g + gout[0];
                    }
                }
            }
            &Op::L1Mean(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let scale = gout[0] / T::from_f64(av.len() as f64);
                let sign = |k: usize| {
                    let d = av[k] - bv[k];
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if let Some(ga) = buf!(a) {
                    for (k, g) in ga.iter_mut().enumerate() {
                        *g = *g + sign(k);
                    }
                }
                if let Some(gb) = buf!(b) {
                    for (k, g) in gb.iter_mut().enumerate() {
                        *g = *g - sign(k);
                    }
                }
            }
        }
    }
}
