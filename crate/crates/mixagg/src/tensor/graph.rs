//! Reverse-mode differentiation on an eager tape.
//!
//! Every op evaluates immediately through the same kernels as the plain
//! value path, recording its inputs on an append-only tape. The tape is
//! acyclic by construction (an op can only reference ids that already
//! exist), so [`Graph::backward`] is a single reverse sweep in index order
//! with no topological sort. Gradient accumulation order is fixed by that
//! sweep, which keeps backward runs bit-for-bit reproducible.

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Handle to a node on one [`Graph`]'s tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBiasRows { x: NodeId, bias: NodeId },
    Relu { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Recip { x: NodeId },
    ClampMin { x: NodeId, floor: T },
    Scale { x: NodeId, c: T },
    AddScalar { x: NodeId },
    MulScalar { x: NodeId, s: NodeId },
    Sum { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    L2Normalize { x: NodeId },
    StackRows { parts: Vec<NodeId> },
}

struct NodeData<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Eager-forward tape. Build the computation through the op methods, then
/// call [`Graph::backward`] on a single-element result node.
pub struct Graph<T: Scalar> {
    nodes: Vec<NodeData<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(NodeData { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input tensor (parameter or data) on the tape.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::transpose(self.value(x))?;
        Ok(self.push(v, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshape(dims)?;
        Ok(self.push(v, Op::Reshape { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn add_bias_rows(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = tensor::add_bias_rows(self.value(x), self.value(bias))?;
        Ok(self.push(v, Op::AddBiasRows { x, bias }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = tensor::relu(self.value(x));
        self.push(v, Op::Relu { x })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::exp(self.value(x))?;
        Ok(self.push(v, Op::Exp { x }))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::ln(self.value(x))?;
        Ok(self.push(v, Op::Ln { x }))
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::recip(self.value(x))?;
        Ok(self.push(v, Op::Recip { x }))
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: T) -> NodeId {
        let v = tensor::clamp_min(self.value(x), floor);
        self.push(v, Op::ClampMin { x, floor })
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = tensor::scale(self.value(x), c);
        self.push(v, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let v = tensor::add_scalar(self.value(x), c);
        self.push(v, Op::AddScalar { x })
    }

    /// Element-wise product of `x` with a single-element node `s`
    /// (differentiable in both, unlike the constant [`Graph::scale`]).
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s).scalar_value()?;
        let v = tensor::scale(self.value(x), sv);
        Ok(self.push(v, Op::MulScalar { x, s }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = tensor::sum(self.value(x));
        self.push(v, Op::Sum { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let v = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::l2_normalize(self.value(x))?;
        Ok(self.push(v, Op::L2Normalize { x }))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::stack_rows(&tensors)?;
        Ok(self.push(v, Op::StackRows { parts: parts.to_vec() }))
    }

    /// Gradient of `root` (which must hold a single element) with respect to
    /// every node on the tape. Runs one reverse sweep; each rule mirrors the
    /// forward kernel it undoes.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must hold one element, got dims {:?}",
                root_value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(root_value.dims().to_vec(), T::ONE));

        for i in (0..self.nodes.len()).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let bt = tensor::transpose(self.value(*b))?;
                    let at = tensor::transpose(self.value(*a))?;
                    let ga = tensor::matmul(&g, &bt)?;
                    let gb = tensor::matmul(&at, &g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Transpose { x } => {
                    accumulate(&mut grads, *x, tensor::transpose(&g)?)?;
                }
                Op::Reshape { x } => {
                    let gx = g.reshape(self.value(*x).dims().to_vec())?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Mul { a, b } => {
                    let ga = tensor::mul(&g, self.value(*b))?;
                    let gb = tensor::mul(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddBiasRows { x, bias } => {
                    let (m, p) = g.dims2("add_bias_rows backward")?;
                    let mut col_sums = vec![T::ZERO; p];
                    for r in 0..m {
                        for (j, s) in col_sums.iter_mut().enumerate() {
                            *s += g.data()[r * p + j];
                        }
                    }
                    accumulate(&mut grads, *x, g)?;
                    accumulate(&mut grads, *bias, Tensor::new(vec![p], col_sums)?)?;
                }
                Op::Relu { x } => {
                    // Subgradient 0 at the kink, matching the forward's
                    // strict x > 0 test.
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| if v > T::ZERO { gv } else { T::ZERO })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.dims().to_vec(), data)?)?;
                }
                Op::Exp { x } => {
                    let gx = tensor::mul(&g, &node.value)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Ln { x } => {
                    let inv = tensor::recip(self.value(*x))?;
                    accumulate(&mut grads, *x, tensor::mul(&g, &inv)?)?;
                }
                Op::Recip { x } => {
                    // d(1/x) = -1/x² = -y².
                    let y2 = tensor::mul(&node.value, &node.value)?;
                    let gx = tensor::scale(&tensor::mul(&g, &y2)?, -T::ONE);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::ClampMin { x, floor } => {
                    let xv = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| if v > *floor { gv } else { T::ZERO })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.dims().to_vec(), data)?)?;
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, tensor::scale(&g, *c))?;
                }
                Op::AddScalar { x } => {
                    accumulate(&mut grads, *x, g)?;
                }
                Op::MulScalar { x, s } => {
                    let sv = self.value(*s).scalar_value()?;
                    let gx = tensor::scale(&g, sv);
                    let gs = tensor::sum(&tensor::mul(&g, self.value(*x))?);
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *s, gs)?;
                }
                Op::Sum { x } => {
                    let xv = self.value(*x);
                    let gx = Tensor::filled(xv.dims().to_vec(), g.data()[0]);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (gx, ggamma, gbeta) =
                        layer_norm_backward(&g, self.value(*x), self.value(*gamma), *eps)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, ggamma)?;
                    accumulate(&mut grads, *beta, gbeta)?;
                }
                Op::L2Normalize { x } => {
                    // y = x/‖x‖ ⇒ gx = (g - (g·y) y)/‖x‖.
                    let xv = self.value(*x);
                    let norm = xv.euclidean_norm();
                    let y = &node.value;
                    let mut dot = T::ZERO;
                    for (&gv, &yv) in g.data().iter().zip(y.data()) {
                        dot += gv * yv;
                    }
                    let inv = T::ONE / norm;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| (gv - dot * yv) * inv)
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.dims().to_vec(), data)?)?;
                }
                Op::StackRows { parts } => {
                    let k = self.value(parts[0]).numel();
                    for (r, &part) in parts.iter().enumerate() {
                        let slice = g.data()[r * k..(r + 1) * k].to_vec();
                        accumulate(&mut grads, part, Tensor::new(vec![k], slice)?)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    delta: Tensor<T>,
) -> Result<()> {
    match &mut grads[id.0] {
        slot @ None => *slot = Some(delta),
        Some(existing) => *existing = tensor::add(existing, &delta)?,
    }
    Ok(())
}

/// Row-wise normalization backward. With x̂ = (x−μ)/σ, σ = √(var+eps) and
/// ĝ = g ⊙ γ the input gradient per row is
/// (ĝ − mean(ĝ) − x̂ ⊙ mean(ĝ ⊙ x̂)) / σ.
fn layer_norm_backward<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, n) = x.dims2("layer_norm backward")?;
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut gx = vec![T::ZERO; m * n];
    let mut ggamma = vec![T::ZERO; n];
    let mut gbeta = vec![T::ZERO; n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let grow = &g.data()[i * n..(i + 1) * n];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = T::ONE / (var + eps).sqrt();

        let mut sum_gh = T::ZERO;
        let mut sum_gh_xh = T::ZERO;
        let mut xhat = vec![T::ZERO; n];
        for j in 0..n {
            let xh = (row[j] - mean) * inv_std;
            xhat[j] = xh;
            let gh = grow[j] * gamma.data()[j];
            sum_gh += gh;
            sum_gh_xh += gh * xh;
            ggamma[j] += grow[j] * xh;
            gbeta[j] += grow[j];
        }
        let mean_gh = sum_gh * inv_n;
        let mean_gh_xh = sum_gh_xh * inv_n;
        for j in 0..n {
            let gh = grow[j] * gamma.data()[j];
            gx[i * n + j] = (gh - mean_gh - xhat[j] * mean_gh_xh) * inv_std;
        }
    }
    Ok((
        Tensor::new(vec![m, n], gx)?,
        Tensor::new(vec![n], ggamma)?,
        Tensor::new(vec![n], gbeta)?,
    ))
}

/// Gradients from one [`Graph::backward`] sweep, indexed by [`NodeId`].
/// Nodes the root does not depend on hold `None`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{finite_diff_check, FdSampling};

    // Closed-form sanity checks first, then finite differences over every
    // op the model uses.

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_single_element_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn matmul_backward_matches_closed_form() {
        // f = sum(A·B) ⇒ dA = 1·Bᵀ, dB = Aᵀ·1 (1 the all-ones matrix).
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let na = g.leaf(a);
        let nb = g.leaf(b);
        let prod = g.matmul(na, nb).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(na).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(nb).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn unused_nodes_have_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let unused = g.leaf(Tensor::scalar(7.0));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn gradient_accumulates_across_reuses() {
        // f = sum(x ⊙ x) ⇒ df/dx = 2x via the product-rule paths.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    fn fd_max_err(
        params: &[Tensor<f64>],
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> crate::error::Result<NodeId>,
    ) -> f64 {
        finite_diff_check(params, 1e-5, FdSampling::All, build)
            .unwrap()
            .max_rel_err
    }

    fn seeded(dims: Vec<usize>, seed: u64) -> Tensor<f64> {
        // Small deterministic pseudo-random fill, kept away from relu/clamp
        // kinks by the offset.
        let numel: usize = dims.iter().product();
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        let data = (0..numel)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0 + 0.05
            })
            .collect();
        Tensor::new(dims, data).unwrap()
    }

    #[test]
    fn fd_matmul_chain() {
        let params = vec![seeded(vec![3, 4], 1), seeded(vec![4, 2], 2)];
        let err = fd_max_err(&params, |g, ids| {
            let p = g.matmul(ids[0], ids[1])?;
            Ok(g.sum(p))
        });
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn fd_layer_norm() {
        let params = vec![seeded(vec![2, 5], 3), seeded(vec![5], 4), seeded(vec![5], 5)];
        let err = fd_max_err(&params, |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn fd_l2_normalize() {
        let params = vec![seeded(vec![6], 6), seeded(vec![6], 7)];
        let err = fd_max_err(&params, |g, ids| {
            let y = g.l2_normalize(ids[0])?;
            let w = g.mul(y, ids[1])?;
            Ok(g.sum(w))
        });
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn fd_relu_exp_ln_recip() {
        // Inputs shifted positive so ln/recip are defined and relu sits
        // away from its kink.
        let base = seeded(vec![4], 8);
        let shifted = Tensor::new(
            vec![4],
            base.data().iter().map(|v| v.abs() + 0.5).collect(),
        )
        .unwrap();
        let params = vec![shifted];
        let err = fd_max_err(&params, |g, ids| {
            let r = g.relu(ids[0]);
            let e = g.exp(r)?;
            let l = g.ln(e)?;
            let rc = g.recip(l)?;
            Ok(g.sum(rc))
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn fd_bias_scale_stack() {
        let params = vec![seeded(vec![2, 3], 9), seeded(vec![3], 10), seeded(vec![6], 11)];
        let err = fd_max_err(&params, |g, ids| {
            let b = g.add_bias_rows(ids[0], ids[1])?;
            let flat = g.reshape(b, vec![6])?;
            let st = g.stack_rows(&[flat, ids[2]])?;
            let sc = g.scale(st, 0.7);
            let sh = g.add_scalar(sc, 0.3);
            Ok(g.sum(sh))
        });
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn fd_mul_scalar_both_sides() {
        let params = vec![seeded(vec![3], 12), seeded(vec![1], 13)];
        let err = fd_max_err(&params, |g, ids| {
            let p = g.mul_scalar(ids[0], ids[1])?;
            let q = g.mul(p, p)?;
            Ok(g.sum(q))
        });
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn fd_clamp_min_away_from_floor() {
        let base = seeded(vec![5], 14);
        // Push entries well to either side of the floor at 0.
        let x = Tensor::new(
            vec![5],
            base.data()
                .iter()
                .map(|v| if *v > 0.0 { v + 0.5 } else { v - 0.5 })
                .collect(),
        )
        .unwrap();
        let err = fd_max_err(&[x], |g, ids| {
            let c = g.clamp_min(ids[0], 0.0);
            let sq = g.mul(c, c)?;
            Ok(g.sum(sq))
        });
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn fd_transpose_in_affine_chain() {
        let params = vec![seeded(vec![3, 2], 15), seeded(vec![3, 4], 16)];
        let err = fd_max_err(&params, |g, ids| {
            let t = g.transpose(ids[0])?;
            let p = g.matmul(t, ids[1])?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        });
        assert!(err < 1e-7, "max rel err {err}");
    }
}
