//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena; node ids are a topological order, so
//! the backward pass is a single reverse sweep. Graphs are built per forward
//! pass and dropped afterwards.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{gemm, ConvGeom, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Rc::new(value), vec![], requires_grad, None)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn push(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an op. The backward closure is dropped when no input needs a
    /// gradient.
    fn op(&self, inputs: &[Var<'_>], value: Tensor, backward: BackwardFn) -> Var<'_> {
        let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires = parents.iter().any(|&p| self.requires(p));
        self.push(
            Rc::new(value),
            parents,
            requires,
            if requires { Some(backward) } else { None },
        )
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward root must be scalar");
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pgrads = bw(&g, &inputs, &node.value, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            // keep leaf / intermediate grads for inspection
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Var<'g> {
        concat_impl(self, parts, axis)
    }

    pub fn stack<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        let reshaped: Vec<Var<'g>> = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend_from_slice(p.value().shape());
                p.reshape(&s)
            })
            .collect();
        concat_impl(self, &reshaped, 0)
    }
}

fn concat_impl<'g>(g: &'g Graph, parts: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!parts.is_empty(), "concat of nothing");
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let sizes: Vec<usize> = values
        .iter()
        .map(|v| {
            assert_eq!(v.rank(), base.len());
            assert_eq!(&v.shape()[..axis], &base[..axis], "concat outer dims");
            assert_eq!(&v.shape()[axis + 1..], &base[axis + 1..], "concat inner dims");
            v.shape()[axis]
        })
        .collect();
    let total: usize = sizes.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &s) in values.iter().zip(&sizes) {
            data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let out = Tensor::from_parts(shape, data);
    g.op(
        parts,
        out,
        Box::new(move |grad, inputs, _, needs| {
            let mut res = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for (i, &s) in sizes.iter().enumerate() {
                if needs[i] {
                    let mut d = Vec::with_capacity(outer * s * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&grad.data()[start..start + s * inner]);
                    }
                    res.push(Some(Tensor::from_parts(inputs[i].shape().to_vec(), d)));
                } else {
                    res.push(None);
                }
                offset += s;
            }
            res
        }),
    )
}

fn unary<'g>(
    v: Var<'g>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'g> {
    let x = v.value();
    let out = x.map(f);
    v.graph.op(
        &[v],
        out,
        Box::new(move |grad, inputs, out, _| {
            let x = &inputs[0];
            let d = Tensor::from_parts(
                x.shape().to_vec(),
                grad.data()
                    .iter()
                    .zip(x.data())
                    .zip(out.data())
                    .map(|((g, &xi), &yi)| g * df(xi, yi))
                    .collect(),
            );
            vec![Some(d)]
        }),
    )
}

/// Nearest-neighbor source index under half-pixel-center mapping.
#[inline]
pub(crate) fn nearest_src(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.op(
            &[self, other],
            out,
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.op(
            &[self, other],
            out,
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        self.graph.op(
            &[self, other],
            out,
            Box::new(|g, inp, _, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&inp[1], |a, b| a * b)),
                    needs[1].then(|| g.zip_map(&inp[0], |a, b| a * b)),
                ]
            }),
        )
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v * s);
        self.graph
            .op(&[self], out, Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v + s);
        self.graph
            .op(&[self], out, Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'g> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        unary(
            self,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'g> {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'g> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn square(self) -> Var<'g> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(self) -> Var<'g> {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sum(self) -> Var<'g> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.op(
            &[self],
            out,
            Box::new(|g, inp, _, _| vec![Some(Tensor::full(inp[0].shape(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean absolute difference, `mean(|self - other|)`.
    pub fn l1_mean(self, other: Var<'g>) -> Var<'g> {
        self.sub(other).abs().mean()
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let out = (*self.value())
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        self.graph.op(
            &[self],
            out,
            Box::new(|g, inp, _, _| {
                vec![Some(Tensor::from_parts(inp[0].shape().to_vec(), g.data().to_vec()))]
            }),
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * dim + start) * inner;
            data.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        self.graph.op(
            &[self],
            Tensor::from_parts(oshape, data),
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let s = (o * dim + start) * inner;
                    d[s..s + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        )
    }

    /// Element `i` along the leading axis.
    pub fn select(self, i: usize) -> Var<'g> {
        let shape = self.shape();
        self.narrow(0, i, 1).reshape(&shape[1..])
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = a.matmul(&b);
        self.graph.op(
            &[self, other],
            out,
            Box::new(move |g, inp, _, needs| {
                let da = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, inp[1].data(), true, &mut d, 0.0);
                    Tensor::from_parts(vec![m, k], d)
                });
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, inp[0].data(), true, g.data(), false, &mut d, 0.0);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![da, db]
            }),
        )
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row_vector(self, bias: Var<'g>) -> Var<'g> {
        let x = self.value();
        let (m, n) = x.dims2();
        let b = bias.value();
        assert_eq!(b.numel(), n);
        let mut out = (*x).clone();
        for r in 0..m {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.graph.op(
            &[self, bias],
            out,
            Box::new(move |g, inp, _, needs| {
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; n];
                    for r in 0..m {
                        for (dv, gv) in d.iter_mut().zip(g.row(r)) {
                            *dv += gv;
                        }
                    }
                    Tensor::from_parts(inp[1].shape().to_vec(), d)
                });
                vec![Some(g.clone()), db]
            }),
        )
    }

    /// Rows of an R×C matrix picked by `index` (repeats allowed).
    pub fn gather_rows(self, index: &[usize]) -> Var<'g> {
        let x = self.value();
        let (r, c) = x.dims2();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            assert!(i < r, "gather_rows index {i} >= {r}");
            data.extend_from_slice(x.row(i));
        }
        let index = index.to_vec();
        self.graph.op(
            &[self],
            Tensor::from_parts(vec![index.len(), c], data),
            Box::new(move |g, _, _, _| {
                let mut d = Tensor::zeros(&[r, c]);
                for (k, &i) in index.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// `self[l, :] * scale[l] + shift[l]` for an L×C matrix and length-L
    /// vectors.
    pub fn row_affine(self, scale: Var<'g>, shift: Var<'g>) -> Var<'g> {
        let x = self.value();
        let (l, _) = x.dims2();
        let a = scale.value();
        let b = shift.value();
        assert_eq!(a.numel(), l);
        assert_eq!(b.numel(), l);
        let mut out = (*x).clone();
        for r in 0..l {
            let (ar, br) = (a.data()[r], b.data()[r]);
            for v in out.row_mut(r) {
                *v = ar * *v + br;
            }
        }
        self.graph.op(
            &[self, scale, shift],
            out,
            Box::new(move |g, inp, _, needs| {
                let (x, a) = (&inp[0], &inp[1]);
                let dx = needs[0].then(|| {
                    let mut d = g.clone();
                    for r in 0..l {
                        let ar = a.data()[r];
                        d.row_mut(r).iter_mut().for_each(|v| *v *= ar);
                    }
                    d
                });
                let da = needs[1].then(|| {
                    Tensor::from_parts(
                        inp[1].shape().to_vec(),
                        (0..l)
                            .map(|r| g.row(r).iter().zip(x.row(r)).map(|(p, q)| p * q).sum())
                            .collect(),
                    )
                });
                let db = needs[2].then(|| {
                    Tensor::from_parts(
                        inp[2].shape().to_vec(),
                        (0..l).map(|r| g.row(r).iter().sum()).collect(),
                    )
                });
                vec![dx, da, db]
            }),
        )
    }

    /// `self * gamma + beta`, all equally shaped.
    pub fn modulate(self, gamma: Var<'g>, beta: Var<'g>) -> Var<'g> {
        let x = self.value();
        let gm = gamma.value();
        let bt = beta.value();
        assert_eq!(x.shape(), gm.shape(), "modulate gamma shape");
        assert_eq!(x.shape(), bt.shape(), "modulate beta shape");
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(gm.data())
                .zip(bt.data())
                .map(|((x, g), b)| x * g + b)
                .collect(),
        );
        self.graph.op(
            &[self, gamma, beta],
            out,
            Box::new(|g, inp, _, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&inp[1], |a, b| a * b)),
                    needs[1].then(|| g.zip_map(&inp[0], |a, b| a * b)),
                    needs[2].then(|| g.clone()),
                ]
            }),
        )
    }

    /// Batch normalization without affine over an N×C×H×W tensor using the
    /// batch's own biased statistics. Returns the normalized tensor plus the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm(self, eps: f64) -> (Var<'g>, Vec<f64>, Vec<f64>) {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for k in 0..c {
                let s = &x.data()[(b * c + k) * hw..(b * c + k + 1) * hw];
                mean[k] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for k in 0..c {
                let s = &x.data()[(b * c + k) * hw..(b * c + k + 1) * hw];
                var[k] += s.iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for k in 0..c {
                let r = (b * c + k) * hw..(b * c + k + 1) * hw;
                for (o, v) in out[r.clone()].iter_mut().zip(&x.data()[r]) {
                    *o = (v - mean[k]) * inv_std[k];
                }
            }
        }
        let istd = inv_std.clone();
        let y = self.graph.op(
            &[self],
            Tensor::from_parts(x.shape().to_vec(), out),
            Box::new(move |g, _, y, _| {
                // dx = istd/N * (N*g - sum(g) - y*sum(g*y)) per channel
                let mut sg = vec![0.0; c];
                let mut sgy = vec![0.0; c];
                for b in 0..n {
                    for k in 0..c {
                        let r = (b * c + k) * hw..(b * c + k + 1) * hw;
                        for (gv, yv) in g.data()[r.clone()].iter().zip(&y.data()[r]) {
                            sg[k] += gv;
                            sgy[k] += gv * yv;
                        }
                    }
                }
                let mut d = vec![0.0; g.numel()];
                for b in 0..n {
                    for k in 0..c {
                        let r = (b * c + k) * hw..(b * c + k + 1) * hw;
                        let (mg, mgy) = (sg[k] / count, sgy[k] / count);
                        for ((dv, gv), yv) in
                            d[r.clone()].iter_mut().zip(&g.data()[r.clone()]).zip(&y.data()[r])
                        {
                            *dv = istd[k] * (gv - mg - yv * mgy);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        );
        (y, mean, var)
    }

    /// Normalization with fixed per-channel statistics (evaluation mode).
    pub fn normalize_with(self, mean: &[f64], var: &[f64], eps: f64) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(mean.len(), c);
        let hw = h * w;
        let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let mut out = vec![0.0; x.numel()];
        for b in 0..n {
            for k in 0..c {
                let r = (b * c + k) * hw..(b * c + k + 1) * hw;
                for (o, v) in out[r.clone()].iter_mut().zip(&x.data()[r]) {
                    *o = (v - mean[k]) * istd[k];
                }
            }
        }
        self.graph.op(
            &[self],
            Tensor::from_parts(x.shape().to_vec(), out),
            Box::new(move |g, _, _, _| {
                let mut d = g.clone();
                for b in 0..n {
                    for k in 0..c {
                        d.data_mut()[(b * c + k) * hw..(b * c + k + 1) * hw]
                            .iter_mut()
                            .for_each(|v| *v *= istd[k]);
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// 2-D convolution of an N×Cin×H×W input with a Cout×Cin×kh×kw kernel.
    ///
    /// With `labels` (one H×W label grid per batch element) this becomes an
    /// instance partial convolution: stride must be 1 with same padding, taps
    /// whose source pixel carries a different label than the output pixel
    /// are zeroed, and each output is rescaled by `kh·kw / valid_taps`
    /// before the bias is added.
    pub fn conv2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        pad: (usize, usize),
        labels: Option<Rc<Vec<Vec<u32>>>>,
    ) -> Var<'g> {
        let x = self.value();
        let wt = weight.value();
        let (n, cin, h, w) = x.dims4();
        let (cout, cin2, kh, kw) = wt.dims4();
        assert_eq!(cin, cin2, "conv2d channel mismatch: input {cin}, kernel {cin2}");
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad_h: pad.0,
            pad_w: pad.1,
        };
        let (oh, ow) = geom.out_hw();
        let p = oh * ow;
        let krows = geom.col_rows();
        let ntaps = kh * kw;
        // Per-image tap masks and output scaling.
        let (taps, scales): (Vec<Rc<Vec<bool>>>, Vec<Option<Rc<Vec<f64>>>>) = match &labels {
            None => {
                let t = Rc::new(geom.tap_mask(None));
                ((0..n).map(|_| t.clone()).collect(), vec![None; n])
            }
            Some(lbl) => {
                assert_eq!(lbl.len(), n, "one label grid per batch element");
                assert!(
                    stride == 1 && oh == h && ow == w,
                    "partial convolution needs stride 1 and same padding"
                );
                lbl.iter()
                    .map(|l| {
                        assert_eq!(l.len(), h * w, "label grid size");
                        let t = geom.tap_mask(Some(l));
                        let sc: Vec<f64> = (0..p)
                            .map(|q| {
                                let valid = (0..ntaps).filter(|&k| t[k * p + q]).count();
                                ntaps as f64 / valid.max(1) as f64
                            })
                            .collect();
                        (Rc::new(t), Some(Rc::new(sc)))
                    })
                    .unzip()
            }
        };
        let b = bias.map(|b| b.value());
        let mut out = vec![0.0; n * cout * p];
        let mut col = vec![0.0; krows * p];
        for i in 0..n {
            geom.im2col(&x.data()[i * cin * h * w..(i + 1) * cin * h * w], &taps[i], &mut col);
            let y = &mut out[i * cout * p..(i + 1) * cout * p];
            gemm(cout, krows, p, wt.data(), false, &col, false, y, 0.0);
            if let Some(sc) = &scales[i] {
                for o in 0..cout {
                    for (v, s) in y[o * p..(o + 1) * p].iter_mut().zip(sc.iter()) {
                        *v *= s;
                    }
                }
            }
            if let Some(b) = &b {
                for o in 0..cout {
                    let bo = b.data()[o];
                    y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bo);
                }
            }
        }
        let mut inputs = vec![self, weight];
        if let Some(bv) = bias {
            inputs.push(bv);
        }
        self.graph.op(
            &inputs,
            Tensor::from_parts(vec![n, cout, oh, ow], out),
            Box::new(move |g, inp, _, needs| {
                let x = &inp[0];
                let wt = &inp[1];
                let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
                let mut dw = needs[1].then(|| vec![0.0; wt.numel()]);
                let mut db = (inp.len() > 2 && needs[2]).then(|| vec![0.0; cout]);
                let mut col = vec![0.0; krows * p];
                let mut gs = vec![0.0; cout * p];
                for i in 0..n {
                    let gi = &g.data()[i * cout * p..(i + 1) * cout * p];
                    if let Some(db) = &mut db {
                        for o in 0..cout {
                            db[o] += gi[o * p..(o + 1) * p].iter().sum::<f64>();
                        }
                    }
                    gs.copy_from_slice(gi);
                    if let Some(sc) = &scales[i] {
                        for o in 0..cout {
                            for (v, s) in gs[o * p..(o + 1) * p].iter_mut().zip(sc.iter()) {
                                *v *= s;
                            }
                        }
                    }
                    if let Some(dw) = &mut dw {
                        geom.im2col(
                            &x.data()[i * cin * h * w..(i + 1) * cin * h * w],
                            &taps[i],
                            &mut col,
                        );
                        gemm(cout, p, krows, &gs, false, &col, true, dw, 1.0);
                    }
                    if let Some(dx) = &mut dx {
                        gemm(krows, cout, p, wt.data(), true, &gs, false, &mut col, 0.0);
                        geom.col2im(&col, &taps[i], &mut dx[i * cin * h * w..(i + 1) * cin * h * w]);
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                    dw.map(|d| Tensor::from_parts(wt.shape().to_vec(), d)),
                ];
                if inp.len() > 2 {
                    res.push(db.map(|d| Tensor::from_parts(inp[2].shape().to_vec(), d)));
                }
                res
            }),
        )
    }

    /// Nearest-neighbor upsampling of an N×C×H×W tensor by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        self.graph.op(
            &[self],
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gs = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dd = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dd[(y / factor) * w + xx / factor] += gs[y * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }),
        )
    }

    /// 2×2 average pooling (H, W must be even).
    pub fn avg_pool2(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let s = src[2 * y * w + 2 * xx]
                        + src[2 * y * w + 2 * xx + 1]
                        + src[(2 * y + 1) * w + 2 * xx]
                        + src[(2 * y + 1) * w + 2 * xx + 1];
                    out[p * oh * ow + y * ow + xx] = 0.25 * s;
                }
            }
        }
        self.graph.op(
            &[self],
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * g.data()[p * oh * ow + y * ow + xx];
                            let base = p * h * w;
                            d[base + 2 * y * w + 2 * xx] += gv;
                            d[base + 2 * y * w + 2 * xx + 1] += gv;
                            d[base + (2 * y + 1) * w + 2 * xx] += gv;
                            d[base + (2 * y + 1) * w + 2 * xx + 1] += gv;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }),
        )
    }

    /// Instance-masked 2× downsampling. `fine` holds per-image H×W label
    /// grids, `coarse` the nearest-downsampled (H/2)×(W/2) grids. Each
    /// output averages the window pixels that carry the coarse pixel's label.
    pub fn masked_downsample(
        self,
        fine: Rc<Vec<Vec<u32>>>,
        coarse: Rc<Vec<Vec<u32>>>,
    ) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = (h / 2, w / 2);
        // Per image: for each coarse pixel the contributing fine indices.
        let members: Rc<Vec<Vec<Vec<usize>>>> = Rc::new(
            (0..n)
                .map(|i| {
                    let (f, cg) = (&fine[i], &coarse[i]);
                    (0..oh * ow)
                        .map(|q| {
                            let (y, xx) = (q / ow, q % ow);
                            let lbl = cg[q];
                            let mut m = Vec::with_capacity(4);
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let src = (2 * y + dy) * w + 2 * xx + dx;
                                    if f[src] == lbl {
                                        m.push(src);
                                    }
                                }
                            }
                            debug_assert!(!m.is_empty());
                            m
                        })
                        .collect()
                })
                .collect(),
        );
        let mut out = vec![0.0; n * c * oh * ow];
        for i in 0..n {
            for k in 0..c {
                let src = &x.data()[(i * c + k) * h * w..(i * c + k + 1) * h * w];
                let dst = &mut out[(i * c + k) * oh * ow..(i * c + k + 1) * oh * ow];
                for (q, m) in members[i].iter().enumerate() {
                    dst[q] = m.iter().map(|&s| src[s]).sum::<f64>() / m.len() as f64;
                }
            }
        }
        self.graph.op(
            &[self],
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; n * c * h * w];
                for i in 0..n {
                    for k in 0..c {
                        let gs = &g.data()[(i * c + k) * oh * ow..(i * c + k + 1) * oh * ow];
                        let dd = &mut d[(i * c + k) * h * w..(i * c + k + 1) * h * w];
                        for (q, m) in members[i].iter().enumerate() {
                            let share = gs[q] / m.len() as f64;
                            for &s in m {
                                dd[s] += share;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], d))]
            }),
        )
    }

    /// Instance-masked 2× upsampling: a fine pixel copies its parent coarse
    /// pixel when both carry the same label and is zero otherwise.
    pub fn masked_upsample(
        self,
        coarse: Rc<Vec<Vec<u32>>>,
        fine: Rc<Vec<Vec<u32>>>,
        fine_hw: (usize, usize),
    ) -> Var<'g> {
        let x = self.value();
        let (n, c, ch, cw) = x.dims4();
        let (h, w) = fine_hw;
        let parent: Rc<Vec<Vec<Option<usize>>>> = Rc::new(
            (0..n)
                .map(|i| {
                    (0..h * w)
                        .map(|p| {
                            let (y, xx) = (p / w, p % w);
                            let par = nearest_src(y, ch, h) * cw + nearest_src(xx, cw, w);
                            (coarse[i][par] == fine[i][p]).then_some(par)
                        })
                        .collect()
                })
                .collect(),
        );
        let mut out = vec![0.0; n * c * h * w];
        for i in 0..n {
            for k in 0..c {
                let src = &x.data()[(i * c + k) * ch * cw..(i * c + k + 1) * ch * cw];
                let dst = &mut out[(i * c + k) * h * w..(i * c + k + 1) * h * w];
                for (p, par) in parent[i].iter().enumerate() {
                    if let Some(s) = par {
                        dst[p] = src[*s];
                    }
                }
            }
        }
        self.graph.op(
            &[self],
            Tensor::from_parts(vec![n, c, h, w], out),
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; n * c * ch * cw];
                for i in 0..n {
                    for k in 0..c {
                        let gs = &g.data()[(i * c + k) * h * w..(i * c + k + 1) * h * w];
                        let dd = &mut d[(i * c + k) * ch * cw..(i * c + k + 1) * ch * cw];
                        for (p, par) in parent[i].iter().enumerate() {
                            if let Some(s) = par {
                                dd[*s] += gs[p];
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, ch, cw], d))]
            }),
        )
    }

    /// Broadcasts rows of an L×C matrix onto a label grid: output C×H×W
    /// with `out[:, p] = self[labels[p] - 1, :]`.
    pub fn label_broadcast(self, labels: Rc<Vec<u32>>, h: usize, w: usize) -> Var<'g> {
        let x = self.value();
        let (l, c) = x.dims2();
        assert_eq!(labels.len(), h * w);
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for (p, &lbl) in labels.iter().enumerate() {
            let row = x.row(lbl as usize - 1);
            for k in 0..c {
                out[k * hw + p] = row[k];
            }
        }
        self.graph.op(
            &[self],
            Tensor::from_parts(vec![c, h, w], out),
            Box::new(move |g, _, _, _| {
                let mut d = Tensor::zeros(&[l, c]);
                for (p, &lbl) in labels.iter().enumerate() {
                    let row = d.row_mut(lbl as usize - 1);
                    for k in 0..c {
                        row[k] += g.data()[k * hw + p];
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Per-label mean of a C×H×W tensor: returns C×L where column `l-1`
    /// averages the pixels labelled `l`.
    pub fn label_mean_pool(self, labels: Rc<Vec<u32>>, num_labels: usize) -> Var<'g> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        assert_eq!(labels.len(), h * w);
        let mut counts = vec![0usize; num_labels];
        for &l in labels.iter() {
            counts[l as usize - 1] += 1;
        }
        let mut out = vec![0.0; c * num_labels];
        for k in 0..c {
            for (p, &l) in labels.iter().enumerate() {
                out[k * num_labels + l as usize - 1] += x.data()[k * h * w + p];
            }
            for l in 0..num_labels {
                out[k * num_labels + l] /= counts[l].max(1) as f64;
            }
        }
        self.graph.op(
            &[self],
            Tensor::from_parts(vec![c, num_labels], out),
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; c * h * w];
                for k in 0..c {
                    for (p, &l) in labels.iter().enumerate() {
                        let li = l as usize - 1;
                        d[k * h * w + p] = g.data()[k * num_labels + li] / counts[li] as f64;
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], d))]
            }),
        )
    }

    /// Spectral normalization `W / σ` with σ = uᵀ·W·v for fixed unit vectors
    /// `u` (length Cout) and `v` (length of the flattened remaining dims).
    pub fn spectral_normalize(self, u: &[f64], v: &[f64]) -> (Var<'g>, f64) {
        let wt = self.value();
        let rows = wt.shape()[0];
        let cols = wt.numel() / rows;
        assert_eq!(u.len(), rows);
        assert_eq!(v.len(), cols);
        let mut sigma = 0.0;
        for r in 0..rows {
            let wr = &wt.data()[r * cols..(r + 1) * cols];
            sigma += u[r] * wr.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
        let sigma = if sigma.abs() < 1e-12 { 1e-12 } else { sigma };
        let out = wt.map(|x| x / sigma);
        let (u, v) = (u.to_vec(), v.to_vec());
        let var = self.graph.op(
            &[self],
            out,
            Box::new(move |g, inp, _, _| {
                let w = &inp[0];
                let gw = g.dot(w);
                let mut d = g.map(|x| x / sigma);
                let coef = gw / (sigma * sigma);
                for r in 0..rows {
                    for cidx in 0..cols {
                        d.data_mut()[r * cols + cidx] -= coef * u[r] * v[cidx];
                    }
                }
                vec![Some(d)]
            }),
        );
        (var, sigma)
    }
}
