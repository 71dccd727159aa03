//! A small define-by-run reverse-mode tape over [`Tensor`]s.
//!
//! Every operation appends a node holding its value and, when any input
//! requires a gradient, a closure mapping the output gradient to input
//! gradients. [`Graph::detach`] copies a value into a fresh constant leaf,
//! which is how stop-gradient is expressed.

use std::sync::Arc;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct BackwardArgs<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    /// Which inputs actually need a gradient; others may be returned as `None`.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// A fixed sparse linear map acting on rows: `out[i, :] = Σ_j w_ij · in[j, :]`.
#[derive(Clone, Debug, Default)]
pub struct SparseMap {
    in_rows: usize,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl SparseMap {
    pub fn new(in_rows: usize) -> Self {
        SparseMap { in_rows, offsets: vec![0], index: Vec::new(), weight: Vec::new() }
    }

    /// Appends one output row built from `(input_row, weight)` terms.
    pub fn push_row(&mut self, terms: impl IntoIterator<Item = (usize, f64)>) {
        for (j, w) in terms {
            debug_assert!(j < self.in_rows);
            self.index.push(j as u32);
            self.weight.push(w);
        }
        self.offsets.push(self.index.len());
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.index[a..b].iter().zip(&self.weight[a..b]).map(|(&j, &w)| (j as usize, w))
    }

    pub fn apply(&self, x: &[f64], width: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.in_rows * width, "sparse map input size");
        let mut out = vec![0.0; self.out_rows() * width];
        for i in 0..self.out_rows() {
            let dst = &mut out[i * width..(i + 1) * width];
            for (j, w) in self.row(i) {
                let src = &x[j * width..(j + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    pub fn apply_transpose(&self, g: &[f64], width: usize) -> Vec<f64> {
        assert_eq!(g.len(), self.out_rows() * width, "sparse map gradient size");
        let mut out = vec![0.0; self.in_rows * width];
        for i in 0..self.out_rows() {
            let src = &g[i * width..(i + 1) * width];
            for (j, w) in self.row(i) {
                let dst = &mut out[j * width..(j + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) mod scalar {
    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
    pub fn softplus(x: f64) -> f64 {
        super::softplus(x)
    }
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

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        self.nodes.push(Node { value, parents, requires_grad, backward });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Stop-gradient: a constant leaf holding the same value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Registers an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(value, inputs.iter().map(|v| v.0).collect(), Some(backward))
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads =
                backward(&BackwardArgs { grad: &g, output: &node.value, inputs: &inputs, needs: &needs });
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg.reshape(self.nodes[p].value.shape().to_vec())),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, vec![a.0, b.0], Some(Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, vec![a.0, b.0], Some(Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.map(|x| -x))])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|args| {
                let ga = args.needs[0].then(|| args.grad.zip_map(args.inputs[1], |g, y| g * y));
                let gb = args.needs[1].then(|| args.grad.zip_map(args.inputs[0], |g, x| g * x));
                vec![ga, gb]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, vec![a.0], Some(Box::new(move |args| vec![Some(args.grad.map(|g| g * s))])))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, vec![a.0], Some(Box::new(|args| vec![Some(args.grad.clone())])))
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(v, vec![a.0], Some(Box::new(move |args| vec![Some(args.grad.zip_map(&c, |g, y| g * y))])))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |args| {
                let x = args.inputs[0].data();
                let y = args.output.data();
                let g = args.grad.data();
                let d = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                vec![Some(Tensor::new(args.grad.shape(), d))]
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape.to_vec());
        let orig = self.value(a).shape().to_vec();
        self.push(v, vec![a.0], Some(Box::new(move |args| vec![Some(args.grad.clone().reshape(orig.clone()))])))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, vec![a.0], Some(Box::new(|args| vec![Some(args.grad.transpose())])))
    }

    /// `out[i] = a[index[i]]` over the flattened input.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Var {
        let src = self.value(a).data();
        let v = Tensor::new(shape.to_vec(), index.iter().map(|&i| src[i]).collect());
        let n_in = src.len();
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |args| {
                let mut out = vec![0.0; n_in];
                for (&i, &g) in index.iter().zip(args.grad.data()) {
                    out[i] += g;
                }
                vec![Some(Tensor::new([n_in], out))]
            })),
        )
    }

    /// Applies a fixed sparse row map; the input is viewed as `[map.in_rows(), width]`.
    pub fn sparse(&mut self, a: Var, map: Arc<SparseMap>) -> Var {
        let x = self.value(a);
        let width = x.len() / map.in_rows();
        let v = Tensor::new([map.out_rows(), width], map.apply(x.data(), width));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |args| {
                vec![Some(Tensor::new([map.in_rows(), width], map.apply_transpose(args.grad.data(), width)))]
            })),
        )
    }

    /// Concatenates flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).len()).collect();
        let mut data = Vec::with_capacity(sizes.iter().sum());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        self.push(
            Tensor::new([n], data),
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |args| {
                let g = args.grad.data();
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let t = Tensor::new([s], g[off..off + s].to_vec());
                        off += s;
                        Some(t)
                    })
                    .collect()
            })),
        )
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|args| {
                let ga = args.needs[0].then(|| args.grad.matmul_t(false, args.inputs[1], true));
                let gb = args.needs[1].then(|| args.inputs[0].matmul_t(true, args.grad, false));
                vec![ga, gb]
            })),
        )
    }

    /// Adds a row vector `b` (length m) to every row of `a` (`[n, m]`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (x, bias) = (self.value(a), self.value(b));
        let m = x.cols();
        assert_eq!(bias.len(), m, "bias width");
        let mut v = x.clone();
        for row in v.data_mut().chunks_mut(m) {
            for (r, b) in row.iter_mut().zip(bias.data()) {
                *r += b;
            }
        }
        let bshape = bias.shape().to_vec();
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(move |args| {
                let gb = args.needs[1].then(|| {
                    let mut s = vec![0.0; m];
                    for row in args.grad.data().chunks(m) {
                        for (a, g) in s.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    Tensor::new(bshape.clone(), s)
                });
                vec![Some(args.grad.clone()), gb]
            })),
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.cols();
        let mut v = x.clone();
        for row in v.data_mut().chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                s += *r;
            }
            row.iter_mut().for_each(|r| *r /= s);
        }
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |args| {
                let mut out = args.grad.clone();
                for (orow, yrow) in out.data_mut().chunks_mut(m).zip(args.output.data().chunks(m)) {
                    let dot: f64 = orow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (o, y) in orow.iter_mut().zip(yrow) {
                        *o = y * (*o - dot);
                    }
                }
                vec![Some(out)]
            })),
        )
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let x = self.value(a);
        let m = x.cols();
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in v.data_mut().chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            row.iter_mut().for_each(|r| *r = (*r - mean) * is);
            inv_std.push(is);
        }
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |args| {
                let mut out = args.grad.clone();
                for ((orow, yrow), is) in out.data_mut().chunks_mut(m).zip(args.output.data().chunks(m)).zip(&inv_std) {
                    let mg = orow.iter().sum::<f64>() / m as f64;
                    let mgy = orow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / m as f64;
                    for (o, y) in orow.iter_mut().zip(yrow) {
                        *o = is * (*o - mg - y * mgy);
                    }
                }
                vec![Some(out)]
            })),
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let shape = self.value(a).shape().to_vec();
        self.push(v, vec![a.0], Some(Box::new(move |args| vec![Some(Tensor::full(shape.clone(), args.grad.item()))])))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mse operands");
        let n = x.len() as f64;
        let v = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n;
        self.push(
            Tensor::scalar(v),
            vec![a.0, b.0],
            Some(Box::new(move |args| {
                let k = 2.0 * args.grad.item() / n;
                let d = args.inputs[0].zip_map(args.inputs[1], |p, q| k * (p - q));
                let gb = args.needs[1].then(|| d.map(|x| -x));
                vec![Some(d), gb]
            })),
        )
    }

    /// Inner product of the flattened inputs.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.len(), y.len(), "dot operands");
        let v = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        self.push(
            Tensor::scalar(v),
            vec![a.0, b.0],
            Some(Box::new(|args| {
                let g = args.grad.item();
                let ga = args.needs[0].then(|| args.inputs[1].map(|y| g * y).reshape(args.inputs[0].shape().to_vec()));
                let gb = args.needs[1].then(|| args.inputs[0].map(|x| g * x).reshape(args.inputs[1].shape().to_vec()));
                vec![ga, gb]
            })),
        )
    }

    /// Scales each row to unit length, `y = x / sqrt(|x|² + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let m = if x.shape().len() == 2 { x.cols() } else { x.len() };
        let mut v = x.clone();
        let mut norms = Vec::new();
        for row in v.data_mut().chunks_mut(m) {
            let n = (row.iter().map(|r| r * r).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|r| *r /= n);
            norms.push(n);
        }
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |args| {
                let mut out = args.grad.clone();
                for ((orow, yrow), n) in out.data_mut().chunks_mut(m).zip(args.output.data().chunks(m)).zip(&norms) {
                    let gy: f64 = orow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (o, y) in orow.iter_mut().zip(yrow) {
                        *o = (*o - y * gy) / n;
                    }
                }
                vec![Some(out)]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central differences of a scalar function of one tensor.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check(shape: &[usize], build: &dyn Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(shape, &mut rng);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(&x, &|t| {
            let mut g = Graph::new();
            let v = g.param(t.clone());
            let o = build(&mut g, v);
            g.value(o).item()
        });
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-7, "gradient mismatch {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn elementwise_gradients() {
        check(&[6], &|g, x| {
            let a = g.silu(x);
            let b = g.softplus(x);
            let c = g.mul(a, b);
            let d = g.sigmoid(c);
            let e = g.tanh(d);
            let s = g.square(e);
            g.sum(s)
        });
    }

    #[test]
    fn matrix_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Arc::new(random(&[4, 3], &mut rng));
        let b = random(&[3], &mut rng);
        check(&[5, 4], &|g, x| {
            let wv = g.constant((*w).clone());
            let bv = g.constant(b.clone());
            let y = g.linear(x, wv, bv);
            let n = g.layer_norm_rows(y);
            let s = g.softmax_rows(n);
            let t = g.transpose(s);
            let q = g.matmul(t, x);
            let r = g.normalize_rows(q, 1e-3);
            let sq = g.square(r);
            g.mean(sq)
        });
        check(&[4, 3], &|g, wv| {
            let x = g.constant(Tensor::new([2, 4], (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()));
            let y = g.matmul(x, wv);
            let z = g.constant(Tensor::full([2, 3], 0.2));
            let m = g.mse(y, z);
            let d = g.dot(y, y);
            g.add(m, d)
        });
    }

    #[test]
    fn gather_sparse_concat_gradients() {
        let idx = Arc::new(vec![0, 2, 2, 5, 1]);
        let mut map = SparseMap::new(3);
        map.push_row([(0, 0.5), (2, 0.25)]);
        map.push_row([(1, -1.0)]);
        let map = Arc::new(map);
        check(&[6], &|g, x| {
            let a = g.gather(x, idx.clone(), &[5]);
            let b = g.reshape(x, &[3, 2]);
            let c = g.sparse(b, map.clone());
            let d = g.concat(&[a, c]);
            let e = g.square(d);
            let s = g.sum(e);
            g.scale(s, 0.7)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([2], vec![1.0, 2.0]));
        let y = g.square(x);
        let yd = g.detach(y);
        let z = g.mul(yd, x);
        let s = g.sum(z);
        let grads = g.backward(s);
        // d/dx (sg(x²)·x) = x²
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 4.0]);
        assert!(grads.get(y).is_none());
    }
}
