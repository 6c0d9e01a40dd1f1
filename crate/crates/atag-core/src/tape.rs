//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! leased onto the tape as leaf nodes at the start of the pass; calling
//! [`Tape::backward`] on a scalar node returns a [`GradStore`] with the
//! accumulated gradients of every node that requires them.
//!
//! Values are immutable once created; backward closures capture `Rc` clones
//! of whatever inputs they need, so the node list itself is append-only.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

mod nn_ops;

pub use nn_ops::SampleMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

type BackFn<S> = Box<dyn Fn(&[S], &mut GradStore<S>)>;

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    requires_grad: bool,
    back: Option<BackFn<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    warnings: RefCell<Vec<String>>,
}

/// Gradients indexed by node id, populated lazily during backward.
pub struct GradStore<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
    numels: Vec<usize>,
}

impl<S: Scalar> GradStore<S> {
    fn new(numels: Vec<usize>) -> Self {
        GradStore {
            grads: vec![None; numels.len()],
            numels,
        }
    }

    /// Mutable gradient buffer for `id`, zero-initialized on first access.
    pub fn entry(&mut self, id: usize) -> &mut [S] {
        let n = self.numels[id];
        self.grads[id].get_or_insert_with(|| vec![S::zero(); n])
    }

    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads[v.id].as_deref()
    }

    fn take(&mut self, id: usize) -> Option<Vec<S>> {
        self.grads[id].take()
    }

    fn put(&mut self, id: usize, g: Vec<S>) {
        self.grads[id] = Some(g);
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            warnings: RefCell::new(Vec::new()),
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.borrow().clone()
    }

    pub(crate) fn warn(&self, msg: impl Into<String>) {
        self.warnings.borrow_mut().push(msg.into());
    }

    fn push(&self, value: Tensor<S>, requires_grad: bool, back: Option<BackFn<S>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            back: if requires_grad { back } else { None },
        });
        Var { id }
    }

    /// Lease a tensor onto the tape as a trainable leaf.
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.push(value, true, None)
    }

    /// Non-trainable input or constant.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    /// Run reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> GradStore<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut store = GradStore::new(nodes.iter().map(|n| n.value.numel()).collect());
        store.put(root.id, vec![S::one()]);
        for id in (0..=root.id).rev() {
            let Some(g) = store.take(id) else { continue };
            if let Some(back) = &nodes[id].back {
                back(&g, &mut store);
            }
            store.put(id, g);
        }
        store
    }

    // ---- elementwise and linear-algebra ops ----

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Rc<Tensor<S>>, Rc<Tensor<S>>)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        Ok((va, vb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.binary_same_shape("add", a, b)?;
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.push(
            out,
            rga || rgb,
            Some(Box::new(move |g, store| {
                if rga {
                    for (d, &s) in store.entry(a.id).iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
                if rgb {
                    for (d, &s) in store.entry(b.id).iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
            })),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.binary_same_shape("sub", a, b)?;
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.push(
            out,
            rga || rgb,
            Some(Box::new(move |g, store| {
                if rga {
                    for (d, &s) in store.entry(a.id).iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
                if rgb {
                    for (d, &s) in store.entry(b.id).iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            })),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.binary_same_shape("mul", a, b)?;
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        Ok(self.push(
            out,
            rga || rgb,
            Some(Box::new(move |g, store| {
                if rga {
                    for ((d, &s), &y) in store.entry(a.id).iter_mut().zip(g).zip(cb.data()) {
                        *d = *d + s * y;
                    }
                }
                if rgb {
                    for ((d, &s), &x) in store.entry(b.id).iter_mut().zip(g).zip(ca.data()) {
                        *d = *d + s * x;
                    }
                }
            })),
        ))
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x * c);
        let rga = self.requires_grad(a);
        self.push(
            out,
            rga,
            Some(Box::new(move |g, store| {
                for (d, &s) in store.entry(a.id).iter_mut().zip(g) {
                    *d = *d + s * c;
                }
            })),
        )
    }

    /// Add a constant tensor (not tracked) elementwise.
    pub fn add_const(&self, a: Var, t: &Tensor<S>) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != t.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "add_const",
                lhs: va.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(t.data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        let rga = self.requires_grad(a);
        Ok(self.push(
            out,
            rga,
            Some(Box::new(move |g, store| {
                for (d, &s) in store.entry(a.id).iter_mut().zip(g) {
                    *d = *d + s;
                }
            })),
        ))
    }

    /// Multiply by a constant tensor (not tracked) elementwise.
    pub fn mul_const(&self, a: Var, t: &Tensor<S>) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != t.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "mul_const",
                lhs: va.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(t.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let rga = self.requires_grad(a);
        let mask = Rc::new(t.clone());
        Ok(self.push(
            out,
            rga,
            Some(Box::new(move |g, store| {
                for ((d, &s), &m) in store.entry(a.id).iter_mut().zip(g).zip(mask.data()) {
                    *d = *d + s * m;
                }
            })),
        ))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let x = va.data()[i * k + p];
                if x == S::zero() {
                    continue;
                }
                let brow = &vb.data()[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o = *o + x * y;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        Ok(self.push(
            out,
            rga || rgb,
            Some(Box::new(move |g, store| {
                if rga {
                    // dA = G . B^T
                    let ga = store.entry(a.id);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = S::zero();
                            for j in 0..n {
                                acc = acc + g[i * n + j] * cb.data()[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + acc;
                        }
                    }
                }
                if rgb {
                    // dB = A^T . G
                    let gb = store.entry(b.id);
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = S::zero();
                            for i in 0..m {
                                acc = acc + ca.data()[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] = gb[p * n + j] + acc;
                        }
                    }
                }
            })),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "transpose",
                lhs: va.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        let rga = self.requires_grad(a);
        Ok(self.push(
            out,
            rga,
            Some(Box::new(move |g, store| {
                let ga = store.entry(a.id);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                    }
                }
            })),
        ))
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| if x > S::zero() { x } else { S::zero() });
        let rga = self.requires_grad(a);
        let ca = Rc::clone(&va);
        self.push(
            out,
            rga,
            Some(Box::new(move |g, store| {
                for ((d, &s), &x) in store.entry(a.id).iter_mut().zip(g).zip(ca.data()) {
                    if x > S::zero() {
                        *d = *d + s;
                    }
                }
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| S::one() / (S::one() + (-x).exp()));
        let rga = self.requires_grad(a);
        let cy = Rc::new(out.clone());
        self.push(
            out,
            rga,
            Some(Box::new(move |g, store| {
                for ((d, &s), &y) in store.entry(a.id).iter_mut().zip(g).zip(cy.data()) {
                    *d = *d + s * y * (S::one() - y);
                }
            })),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let total = va.data().iter().fold(S::zero(), |acc, &x| acc + x);
        let n = va.numel();
        let rga = self.requires_grad(a);
        let _ = n;
        self.push(
            Tensor::scalar(total),
            rga,
            Some(Box::new(move |g, store| {
                let s = g[0];
                for d in store.entry(a.id).iter_mut() {
                    *d = *d + s;
                }
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.numel();
        let inv = S::from_f64(1.0 / n as f64);
        let total = va.data().iter().fold(S::zero(), |acc, &x| acc + x) * inv;
        let rga = self.requires_grad(a);
        self.push(
            Tensor::scalar(total),
            rga,
            Some(Box::new(move |g, store| {
                let s = g[0] * inv;
                for d in store.entry(a.id).iter_mut() {
                    *d = *d + s;
                }
            })),
        )
    }

    /// Broadcast-add a bias vector over the rows of a 2-D tensor.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.shape().len() != 2 || vb.shape() != [vx.cols()] {
            return Err(CoreError::ShapeMismatch {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(vx.data()[i * c + j] + vb.data()[j]);
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let (rgx, rgb) = (self.requires_grad(x), self.requires_grad(bias));
        Ok(self.push(
            out,
            rgx || rgb,
            Some(Box::new(move |g, store| {
                if rgx {
                    for (d, &s) in store.entry(x.id).iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
                if rgb {
                    let gb = store.entry(bias.id);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] = gb[j] + g[i * c + j];
                        }
                    }
                }
            })),
        ))
    }

    /// Concatenate two 2-D tensors along the column (channel) axis.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.rows() != vb.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "concat_cols",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (r, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::new(vec![r, ca + cb], out)?;
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        Ok(self.push(
            out,
            rga || rgb,
            Some(Box::new(move |g, store| {
                let cw = ca + cb;
                if rga {
                    let ga = store.entry(a.id);
                    for i in 0..r {
                        for j in 0..ca {
                            ga[i * ca + j] = ga[i * ca + j] + g[i * cw + j];
                        }
                    }
                }
                if rgb {
                    let gb = store.entry(b.id);
                    for i in 0..r {
                        for j in 0..cb {
                            gb[i * cb + j] = gb[i * cb + j] + g[i * cw + ca + j];
                        }
                    }
                }
            })),
        ))
    }

    /// Column `j` of a 2-D tensor as a length-`rows` vector.
    pub fn select_col(&self, x: Var, j: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || j >= vx.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "select_col",
                lhs: vx.shape().to_vec(),
                rhs: vec![j],
            });
        }
        let (r, c) = (vx.rows(), vx.cols());
        let out: Vec<S> = (0..r).map(|i| vx.data()[i * c + j]).collect();
        let out = Tensor::new(vec![r], out)?;
        let rgx = self.requires_grad(x);
        Ok(self.push(
            out,
            rgx,
            Some(Box::new(move |g, store| {
                let gx = store.entry(x.id);
                for i in 0..r {
                    gx[i * c + j] = gx[i * c + j] + g[i];
                }
            })),
        ))
    }

    /// Channel `ch` of a 3-D `(C, H, W)` tensor as an `(H, W)` matrix.
    pub fn select_channel(&self, x: Var, ch: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 3 || ch >= vx.shape()[0] {
            return Err(CoreError::ShapeMismatch {
                op: "select_channel",
                lhs: vx.shape().to_vec(),
                rhs: vec![ch],
            });
        }
        let (h, w) = (vx.shape()[1], vx.shape()[2]);
        let plane = h * w;
        let out = Tensor::new(vec![h, w], vx.data()[ch * plane..(ch + 1) * plane].to_vec())?;
        let rgx = self.requires_grad(x);
        Ok(self.push(
            out,
            rgx,
            Some(Box::new(move |g, store| {
                let gx = store.entry(x.id);
                for (i, &s) in g.iter().enumerate() {
                    gx[ch * plane + i] = gx[ch * plane + i] + s;
                }
            })),
        ))
    }

    /// Reinterpret the flat data with a new shape (no data movement).
    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: vx.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::new(shape, vx.data().to_vec())?;
        let rgx = self.requires_grad(x);
        Ok(self.push(
            out,
            rgx,
            Some(Box::new(move |g, store| {
                for (d, &s) in store.entry(x.id).iter_mut().zip(g) {
                    *d = *d + s;
                }
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = tape.constant(Tensor::eye(2));
        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let ai = tape.matmul(a, i).unwrap();
        let az = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(ai).data(), tape.value(a).data());
        assert!(tape.value(az).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(CoreError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::<f64>::new();
        let va = tape.constant(Tensor::from_slice_f64(vec![3, 4], &a));
        let vb = tape.constant(Tensor::from_slice_f64(vec![4, 2], &b));
        let vc = tape.matmul(va, vb).unwrap();
        let c = tape.value(vc);
        // independent triple-loop reference
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a[i * 4 + p] * b[p * 2 + j];
                }
                assert!((c.at2(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_through_matmul_and_add() {
        // loss = sum(A.B) ; dA = ones . B^T, dB = A^T . ones
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.leaf(t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss);
        let ga = grads.get(a).unwrap();
        // row i of dA = [sum(B row 0), sum(B row 1)]
        assert_eq!(ga, &[11.0, 15.0, 11.0, 15.0]);
        let gb = grads.get(b).unwrap();
        assert_eq!(gb, &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn grad_skips_non_required() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(&[vec![1.0, 2.0]]));
        let c = tape.constant(t2(&[vec![3.0, 4.0]]));
        let y = tape.mul(a, c).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn concat_and_select_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t2(&[vec![1.0], vec![2.0]]));
        let b = tape.leaf(t2(&[vec![3.0], vec![4.0]]));
        let cat = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.shape(cat), vec![2, 2]);
        let col1 = tape.select_col(cat, 1).unwrap();
        assert_eq!(tape.value(col1).data(), &[3.0, 4.0]);
        let loss = tape.sum_all(col1);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
        assert!(grads.get(a).is_none() || grads.get(a).unwrap() == &[0.0, 0.0]);
    }
}
