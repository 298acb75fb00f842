//! Minimal reverse-mode differentiation over a fixed op set.
//!
//! There is no taping of arbitrary user code: the toolkit trains through a
//! closed set of operators (matmul, batched matmul, permutations/gathers,
//! elementwise arithmetic, GELU, layernorm, softmax, pooling, sparse token
//! mixing, block-diagonal application) with hand-derived VJPs, composed on
//! an explicit [`Tape`]. Every operator is checked against central finite
//! differences by [`finite_diff_check`].

pub mod ops;

use crate::error::{Error, Result};
use crate::rng::gaussian_init;
use crate::tensor::Tensor;

/// A differentiable operator: a pure forward map plus a vector-Jacobian
/// product. `vjp` returns one cotangent per input, shaped like that input.
pub trait DifferentiableOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;

    /// Like [`DifferentiableOp::vjp`] but may skip inputs whose slot in
    /// `needed` is false (frozen parameters). The default computes
    /// everything; heavyweight ops override it.
    fn vjp_masked(
        &self,
        inputs: &[&Tensor],
        upstream: &Tensor,
        needed: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let all = self.vjp(inputs, upstream)?;
        Ok(all
            .into_iter()
            .zip(needed)
            .map(|(g, &n)| if n { Some(g) } else { None })
            .collect())
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    op: Option<Box<dyn DifferentiableOp>>,
    inputs: Vec<ValueId>,
    value: Tensor,
    needs_grad: bool,
}

/// A single-use expression graph. Leaves are constants (frozen tensors) or
/// parameters (gradient targets); interior nodes are op applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Node { op: None, inputs: Vec::new(), value, needs_grad: false })
    }

    /// A leaf that accumulates a gradient during [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> ValueId {
        self.push(Node { op: None, inputs: Vec::new(), value, needs_grad: true })
    }

    fn push(&mut self, node: Node) -> ValueId {
        self.nodes.push(node);
        ValueId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Run `op` on existing values and record the application.
    pub fn apply(
        &mut self,
        op: Box<dyn DifferentiableOp>,
        inputs: &[ValueId],
    ) -> Result<ValueId> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = op.forward(&tensors)?;
        if value.has_non_finite() {
            return Err(Error::numeric(op.name(), "non-finite forward output"));
        }
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value,
            needs_grad,
        }))
    }

    /// Reverse sweep from a scalar root, seeding with cotangent 1.
    pub fn backward(&self, root: ValueId) -> Result<Gradients> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::dim(
                "backward without explicit cotangent requires a scalar root",
            ));
        }
        self.backward_with(root, Tensor::scalar(1.0))
    }

    /// Reverse sweep with an explicit root cotangent.
    pub fn backward_with(&self, root: ValueId, cotangent: Tensor) -> Result<Gradients> {
        if cotangent.shape() != self.nodes[root.0].value.shape() {
            return Err(Error::dim("cotangent shape must match root value"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(cotangent);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(op) = &node.op else {
                continue; // leaf: gradient stays for the caller
            };
            let Some(upstream) = grads[id].take() else {
                continue; // not on any path to the root
            };
            let inputs: Vec<&Tensor> =
                node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needed: Vec<bool> =
                node.inputs.iter().map(|i| self.nodes[i.0].needs_grad).collect();
            let cots = op.vjp_masked(&inputs, &upstream, &needed)?;
            debug_assert_eq!(cots.len(), node.inputs.len());
            for (input_id, cot) in node.inputs.iter().zip(cots) {
                let Some(cot) = cot else {
                    continue;
                };
                if !self.nodes[input_id.0].needs_grad {
                    continue;
                }
                if cot.has_non_finite() {
                    return Err(Error::numeric(op.name(), "non-finite cotangent"));
                }
                if cot.shape() != self.nodes[input_id.0].value.shape() {
                    return Err(Error::dim(format!(
                        "{}: cotangent shape {:?} vs input {:?}",
                        op.name(),
                        cot.shape(),
                        self.nodes[input_id.0].value.shape()
                    )));
                }
                match &mut grads[input_id.0] {
                    Some(acc) => acc.axpy(1.0, &cot)?,
                    slot @ None => *slot = Some(cot),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node cotangents produced by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads.get_mut(id.index()).and_then(|g| g.take())
    }
}

/// Outcome of a central-finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Error relative to `max(|a|, |b|)` with the denominator floored at 1e-2,
/// so near-zero gradients are compared on an absolute scale where central
/// differences are dominated by roundoff anyway.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Compare an operator's VJP against central differences
/// `(f(x+h) − f(x−h)) / 2h`, both contracted with the same deterministic
/// Gaussian cotangent (seed fixed below so reports are reproducible).
pub fn finite_diff_check(
    op: &dyn DifferentiableOp,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<FiniteDiffReport> {
    if h <= 0.0 {
        return Err(Error::config("finite_diff_check: h must be positive"));
    }
    for t in inputs {
        if t.has_non_finite() {
            return Err(Error::numeric(op.name(), "non-finite input"));
        }
    }
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let y0 = op.forward(&refs)?;
    if y0.has_non_finite() {
        return Err(Error::numeric(op.name(), "non-finite forward output"));
    }
    let cotangent = gaussian_init(y0.shape(), 1.0, 0xC0_7A_4E)?;
    let analytic = op.vjp(&refs, &cotangent)?;

    let mut max_rel_err: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[i].shape() {
            return Err(Error::dim(format!(
                "{}: vjp output {:?} does not match input {:?}",
                op.name(),
                grad.shape(),
                inputs[i].shape()
            )));
        }
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let refs: Vec<&Tensor> = work.iter().collect();
            let y_plus = op.forward(&refs)?;
            work[i].data_mut()[e] = orig - h;
            let refs: Vec<&Tensor> = work.iter().collect();
            let y_minus = op.forward(&refs)?;
            work[i].data_mut()[e] = orig;
            if y_plus.has_non_finite() || y_minus.has_non_finite() {
                return Err(Error::numeric(op.name(), "non-finite perturbed output"));
            }
            let fd = y_plus
                .sub(&y_minus)?
                .scale(1.0 / (2.0 * h))
                .dot(&cotangent)?;
            max_rel_err = max_rel_err.max(rel_err(grad.data()[e], fd));
        }
    }
    Ok(FiniteDiffReport { max_rel_err, pass: max_rel_err <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstOp;
    impl DifferentiableOp for ConstOp {
        fn name(&self) -> &'static str {
            "const"
        }
        fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
            Ok(Tensor::filled(inputs[0].shape(), 3.0))
        }
        fn vjp(&self, inputs: &[&Tensor], _upstream: &Tensor) -> Result<Vec<Tensor>> {
            Ok(vec![Tensor::zeros(inputs[0].shape())])
        }
    }

    #[test]
    fn constant_op_passes_with_zero_gradient() {
        let x = Tensor::filled(&[3], 1.0);
        let report = finite_diff_check(&ConstOp, &[x], 1e-5, 1e-5).unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn rejects_non_positive_h() {
        let x = Tensor::filled(&[2], 1.0);
        assert!(finite_diff_check(&ConstOp, &[x], 0.0, 1e-5).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(&[2, 2], 1.0));
        assert!(tape.backward(x).is_err());
    }
}
