//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A forward pass pushes one node per operation; `backward` walks the tape in
//! reverse and accumulates exact gradients for every node, including the
//! parameter leaves registered at the start of the pass. Node indices are
//! topologically ordered by construction (parents always precede children),
//! so a single reverse sweep suffices.
//!
//! All arithmetic is f64. Dropout is the only stochastic op and is driven by
//! an explicit generator owned by the caller, so a fixed seed reproduces the
//! pass bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

type BackFn = Box<dyn Fn(&[Node], &Tensor, &mut [Option<Tensor>])>;

pub(crate) struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

/// Records a forward pass and computes gradients on demand.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape if the value never
    /// influenced the loss.
    pub fn get_or_zeros(&self, id: ValueId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn accum(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_scaled_assign(&g, 1.0),
        slot => *slot = Some(g),
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> ValueId {
        self.nodes.push(Node { value, back });
        ValueId(self.nodes.len() - 1)
    }

    /// Registers an input or parameter; gradients accumulate here.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, None)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: ValueId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(&self.nodes, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    // ----- arithmetic -----------------------------------------------------

    /// `C = A · B`, `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = self.value(a).matmul(self.value(b));
        self.push(
            v,
            Some(Box::new(move |nodes, g, grads| {
                accum(grads, a.0, g.matmul_nt(&nodes[b.0].value));
                accum(grads, b.0, nodes[a.0].value.matmul_tn(g));
            })),
        )
    }

    /// `C = A · Bᵀ`, `[m,k]·[n,k]ᵀ`; used for attention scores.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(
            v,
            Some(Box::new(move |nodes, g, grads| {
                accum(grads, a.0, g.matmul(&nodes[b.0].value));
                accum(grads, b.0, g.matmul_tn(&nodes[a.0].value));
            })),
        )
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let mut v = av.clone();
        v.add_scaled_assign(bv, 1.0);
        self.push(
            v,
            Some(Box::new(move |_, g, grads| {
                accum(grads, a.0, g.clone());
                accum(grads, b.0, g.clone());
            })),
        )
    }

    /// `[m,n] + [n]` broadcast over rows.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> ValueId {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (m, n) = (xv.rows(), xv.cols());
        assert_eq!(bv.len(), n, "bias length mismatch");
        let mut v = xv.clone();
        for r in 0..m {
            for c in 0..n {
                v.data_mut()[r * n + c] += bv.data()[c];
            }
        }
        self.push(
            v,
            Some(Box::new(move |_, g, grads| {
                accum(grads, x.0, g.clone());
                let n = g.cols();
                let mut db = Tensor::zeros(&[n]);
                for r in 0..g.rows() {
                    for c in 0..n {
                        db.data_mut()[c] += g.data()[r * n + c];
                    }
                }
                accum(grads, bias.0, db);
            })),
        )
    }

    pub fn scale(&mut self, x: ValueId, alpha: f64) -> ValueId {
        let mut v = self.value(x).clone();
        v.scale_assign(alpha);
        self.push(
            v,
            Some(Box::new(move |_, g, grads| {
                let mut gx = g.clone();
                gx.scale_assign(alpha);
                accum(grads, x.0, gx);
            })),
        )
    }

    /// Same data, new shape (free in both directions).
    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> ValueId {
        let in_shape = self.value(x).shape().to_vec();
        let v = self.value(x).reshaped(shape);
        self.push(
            v,
            Some(Box::new(move |_, g, grads| {
                accum(grads, x.0, g.reshaped(&in_shape));
            })),
        )
    }

    // ----- nonlinearities -------------------------------------------------

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let xv = self.value(x);
        let mut v = xv.clone();
        for e in v.data_mut() {
            let u = C * (*e + A * e.powi(3));
            *e = 0.5 * *e * (1.0 + u.tanh());
        }
        self.push(
            v,
            Some(Box::new(move |nodes, g, grads| {
                let xv = &nodes[x.0].value;
                let mut gx = g.clone();
                for (ge, xe) in gx.data_mut().iter_mut().zip(xv.data()) {
                    let u = C * (xe + A * xe.powi(3));
                    let t = u.tanh();
                    let d =
                        0.5 * (1.0 + t) + 0.5 * xe * (1.0 - t * t) * C * (1.0 + 3.0 * A * xe * xe);
                    *ge *= d;
                }
                accum(grads, x.0, gx);
            })),
        )
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> ValueId {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (m, n) = (xv.rows(), xv.cols());
        assert_eq!(gv.len(), n);
        assert_eq!(bv.len(), n);
        let mut v = Tensor::zeros(&[m, n]);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for c in 0..n {
                v.data_mut()[r * n + c] = gv.data()[c] * (row[c] - mean) * inv + bv.data()[c];
            }
        }
        self.push(
            v,
            Some(Box::new(move |nodes, g, grads| {
                let xv = &nodes[x.0].value;
                let gammav = &nodes[gamma.0].value;
                let (m, n) = (xv.rows(), xv.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                let mut dgamma = Tensor::zeros(&[n]);
                let mut dbeta = Tensor::zeros(&[n]);
                for r in 0..m {
                    let row = xv.row(r);
                    let grow = g.row(r);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + EPS).sqrt();
                    // dhat_c = grow_c * gamma_c; two row reductions close the form.
                    let mut sum_dhat = 0.0;
                    let mut sum_dhat_xhat = 0.0;
                    for c in 0..n {
                        let xhat = (row[c] - mean) * inv;
                        let dhat = grow[c] * gammav.data()[c];
                        sum_dhat += dhat;
                        sum_dhat_xhat += dhat * xhat;
                        dgamma.data_mut()[c] += grow[c] * xhat;
                        dbeta.data_mut()[c] += grow[c];
                    }
                    for c in 0..n {
                        let xhat = (row[c] - mean) * inv;
                        let dhat = grow[c] * gammav.data()[c];
                        gx.data_mut()[r * n + c] =
                            inv * (dhat - sum_dhat / n as f64 - xhat * sum_dhat_xhat / n as f64);
                    }
                }
                accum(grads, x.0, gx);
                accum(grads, gamma.0, dgamma);
                accum(grads, beta.0, dbeta);
            })),
        )
    }

    /// Row-wise softmax; every output row sums to one.
    pub fn softmax_rows(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut v = Tensor::zeros(&[m, n]);
        for r in 0..m {
            let row = xv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..n {
                let e = (row[c] - max).exp();
                v.data_mut()[r * n + c] = e;
                sum += e;
            }
            for c in 0..n {
                v.data_mut()[r * n + c] /= sum;
            }
        }
        let out_id = ValueId(self.nodes.len());
        self.push(
            v,
            Some(Box::new(move |nodes, g, grads| {
                let y = &nodes[out_id.0].value;
                let (m, n) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    let yrow = y.row(r);
                    let grow = g.row(r);
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gx.data_mut()[r * n + c] = yrow[c] * (grow[c] - dot);
                    }
                }
                accum(grads, x.0, gx);
            })),
        )
    }

    /// Inverted dropout; `keep = 1 - p`, surviving entries scaled by `1/keep`.
    /// Only called in training mode — evaluation skips the op entirely.
    pub fn dropout(&mut self, x: ValueId, p: f64, rng: &mut ChaCha8Rng) -> ValueId {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut v = xv.clone();
        for (e, m) in v.data_mut().iter_mut().zip(&mask) {
            *e *= m;
        }
        self.push(
            v,
            Some(Box::new(move |_, g, grads| {
                let mut gx = g.clone();
                for (e, m) in gx.data_mut().iter_mut().zip(&mask) {
                    *e *= m;
                }
                accum(grads, x.0, gx);
            })),
        )
    }

    // ----- structure ------------------------------------------------------

    /// Select rows by index; duplicate indices are allowed and scatter-add
    /// their gradients.
    pub fn gather_rows(&mut self, x: ValueId, idx: Vec<usize>) -> ValueId {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut v = Tensor::zeros(&[idx.len(), n]);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < m, "gather index {i} out of range {m}");
            v.data_mut()[r * n..(r + 1) * n].copy_from_slice(xv.row(i));
        }
        self.push(
            v,
            Some(Box::new(move |nodes, g, grads| {
                let n = nodes[x.0].value.cols();
                let m = nodes[x.0].value.rows();
                let mut gx = Tensor::zeros(&[m, n]);
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        gx.data_mut()[i * n + c] += g.data()[r * n + c];
                    }
                }
                accum(grads, x.0, gx);
            })),
        )
    }

    /// Stack two matrices with equal column counts.
    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.cols(), "concat_rows column mismatch");
        let (ma, mb, n) = (av.rows(), bv.rows(), av.cols());
        let mut data = Vec::with_capacity((ma + mb) * n);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let v = Tensor::from_vec(&[ma + mb, n], data);
        self.push(
            v,
            Some(Box::new(move |_, g, grads| {
                let n = g.cols();
                let ga = Tensor::from_vec(&[ma, n], g.data()[..ma * n].to_vec());
                let gb = Tensor::from_vec(&[mb, n], g.data()[ma * n..].to_vec());
                accum(grads, a.0, ga);
                accum(grads, b.0, gb);
            })),
        )
    }

    /// Repeat a vector `[n]` as `m` identical rows.
    pub fn broadcast_row(&mut self, vsrc: ValueId, m: usize) -> ValueId {
        let src = self.value(vsrc);
        assert_eq!(src.shape().len(), 1, "broadcast_row expects a vector");
        let n = src.len();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(src.data());
        }
        self.push(
            Tensor::from_vec(&[m, n], data),
            Some(Box::new(move |_, g, grads| {
                let n = g.cols();
                let mut gv = Tensor::zeros(&[n]);
                for r in 0..g.rows() {
                    for c in 0..n {
                        gv.data_mut()[c] += g.data()[r * n + c];
                    }
                }
                accum(grads, vsrc.0, gv);
            })),
        )
    }

    /// Column slice `[m, start..start+len]`; used to split attention heads.
    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> ValueId {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut v = Tensor::zeros(&[m, len]);
        for r in 0..m {
            v.data_mut()[r * len..(r + 1) * len].copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(
            v,
            Some(Box::new(move |nodes, g, grads| {
                let n = nodes[x.0].value.cols();
                let m = nodes[x.0].value.rows();
                let mut gx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    for c in 0..len {
                        gx.data_mut()[r * n + start + c] = g.data()[r * len + c];
                    }
                }
                accum(grads, x.0, gx);
            })),
        )
    }

    /// Concatenate matrices with equal row counts along columns; merges heads.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut v = Tensor::zeros(&[m, n]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), m, "concat_cols row mismatch");
            for r in 0..m {
                v.data_mut()[r * n + off..r * n + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let parts = parts.to_vec();
        self.push(
            v,
            Some(Box::new(move |_, g, grads| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut gp = Tensor::zeros(&[g.rows(), w]);
                    for r in 0..g.rows() {
                        gp.data_mut()[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    accum(grads, p.0, gp);
                    off += w;
                }
            })),
        )
    }

    /// Replace the two coordinates of selected joints with a shared learnable
    /// pad vector. `x` is `[T, 2J]`; `masks[t]` lists masked joint indices of
    /// row `t`.
    pub fn replace_joints(&mut self, x: ValueId, masks: Vec<Vec<usize>>, pad: ValueId) -> ValueId {
        let xv = self.value(x);
        let pv = self.value(pad);
        assert_eq!(pv.len(), 2, "joint pad vector must have length 2");
        let (t, n) = (xv.rows(), xv.cols());
        assert_eq!(masks.len(), t, "one mask set per frame expected");
        let mut v = xv.clone();
        for (r, joints) in masks.iter().enumerate() {
            for &j in joints {
                assert!(2 * j + 1 < n, "joint index {j} out of range");
                v.data_mut()[r * n + 2 * j] = pv.data()[0];
                v.data_mut()[r * n + 2 * j + 1] = pv.data()[1];
            }
        }
        self.push(
            v,
            Some(Box::new(move |_, g, grads| {
                let n = g.cols();
                let mut gx = g.clone();
                let mut gpad = Tensor::zeros(&[2]);
                for (r, joints) in masks.iter().enumerate() {
                    for &j in joints {
                        gpad.data_mut()[0] += g.data()[r * n + 2 * j];
                        gpad.data_mut()[1] += g.data()[r * n + 2 * j + 1];
                        gx.data_mut()[r * n + 2 * j] = 0.0;
                        gx.data_mut()[r * n + 2 * j + 1] = 0.0;
                    }
                }
                accum(grads, x.0, gx);
                accum(grads, pad.0, gpad);
            })),
        )
    }

    // ----- losses ---------------------------------------------------------

    /// Mean squared error against a constant target, over all elements.
    pub fn mse(&mut self, pred: ValueId, target: &Tensor) -> ValueId {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse shape mismatch");
        let n = pv.len() as f64;
        let sum: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t).powi(2))
            .sum();
        let target = target.clone();
        self.push(
            Tensor::scalar(sum / n),
            Some(Box::new(move |nodes, g, grads| {
                let pv = &nodes[pred.0].value;
                let n = pv.len() as f64;
                let mut gp = pv.clone();
                for (e, t) in gp.data_mut().iter_mut().zip(target.data()) {
                    *e = g.item() * 2.0 * (*e - t) / n;
                }
                accum(grads, pred.0, gp);
            })),
        )
    }

    /// Mean of per-joint Euclidean norms of `pred - target`.
    ///
    /// `pred` is `[K, J*dim]` (consecutive `dim`-tuples per joint); the value
    /// is `(1/(K·J)) Σ ‖pred_kj − target_kj‖₂`. At an exactly coincident
    /// joint the norm is not differentiable; the subgradient zero is used.
    pub fn joint_norm_mean(&mut self, pred: ValueId, target: &Tensor, dim: usize) -> ValueId {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "joint_norm_mean shape mismatch");
        let (k, w) = (pv.rows(), pv.cols());
        assert_eq!(w % dim, 0, "row width must be a multiple of dim");
        let j = w / dim;
        let count = (k * j) as f64;
        let mut sum = 0.0;
        for r in 0..k {
            for q in 0..j {
                let mut sq = 0.0;
                for c in 0..dim {
                    let i = r * w + q * dim + c;
                    sq += (pv.data()[i] - target.data()[i]).powi(2);
                }
                sum += sq.sqrt();
            }
        }
        let target = target.clone();
        self.push(
            Tensor::scalar(sum / count),
            Some(Box::new(move |nodes, g, grads| {
                let pv = &nodes[pred.0].value;
                let (k, w) = (pv.rows(), pv.cols());
                let j = w / dim;
                let count = (k * j) as f64;
                let mut gp = Tensor::zeros(&[k, w]);
                for r in 0..k {
                    for q in 0..j {
                        let base = r * w + q * dim;
                        let mut sq = 0.0;
                        for c in 0..dim {
                            sq += (pv.data()[base + c] - target.data()[base + c]).powi(2);
                        }
                        let norm = sq.sqrt();
                        if norm > 0.0 {
                            for c in 0..dim {
                                gp.data_mut()[base + c] = g.item()
                                    * (pv.data()[base + c] - target.data()[base + c])
                                    / (norm * count);
                            }
                        }
                    }
                }
                accum(grads, pred.0, gp);
            })),
        )
    }

    /// Scalar combine `a + lambda * b`.
    pub fn add_scaled(&mut self, a: ValueId, b: ValueId, lambda: f64) -> ValueId {
        let v = self.value(a).item() + lambda * self.value(b).item();
        self.push(
            Tensor::scalar(v),
            Some(Box::new(move |_, g, grads| {
                accum(grads, a.0, g.clone());
                let mut gb = g.clone();
                gb.scale_assign(lambda);
                accum(grads, b.0, gb);
            })),
        )
    }
}
