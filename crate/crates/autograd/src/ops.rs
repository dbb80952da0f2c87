use std::rc::Rc;

use crate::error::AutogradError;
use crate::graph::{GraphNode, NodeKind, OpInput};
use crate::tensor::Tensor;

fn track(inputs: &[&Tensor]) -> bool {
    inputs.iter().any(|t| t.node.is_some())
}

fn input_of(t: &Tensor) -> OpInput {
    t.node.clone()
}

impl Tensor {
    /// Standard matrix product of a `[m, k]` by a `[k, n]` tensor.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, AutogradError> {
        let (a, b) = (self, rhs);
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(AutogradError::dim(
                "matmul",
                format!(
                    "expected 2-d operands, got {:?} x {:?}",
                    a.shape(),
                    b.shape()
                ),
            ));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(AutogradError::dim(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        let node = track(&[a, b]).then(|| {
            GraphNode::new(NodeKind::Matmul {
                a: input_of(a),
                b: input_of(b),
                a_data: a.data_rc(),
                b_data: b.data_rc(),
                m,
                k,
                n,
            })
        });
        Ok(Tensor::from_op(vec![m, n], out, node))
    }

    /// Elementwise sum; shapes must match exactly (no broadcasting).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, AutogradError> {
        if self.shape() != rhs.shape() {
            return Err(AutogradError::dim(
                "add",
                format!("shapes differ: {:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(x, y)| x + y)
            .collect();
        let node = track(&[self, rhs]).then(|| {
            GraphNode::new(NodeKind::Add {
                a: input_of(self),
                b: input_of(rhs),
            })
        });
        Ok(Tensor::from_op(self.shape().to_vec(), out, node))
    }

    /// Add a length-`n` row vector to every row of a `[m, n]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, AutogradError> {
        if self.shape().len() != 2 || bias.shape().len() != 1 || bias.shape()[0] != self.shape()[1]
        {
            return Err(AutogradError::dim(
                "add_bias",
                format!(
                    "expected [m, n] + [n], got {:?} + {:?}",
                    self.shape(),
                    bias.shape()
                ),
            ));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let mut out = self.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bias.data()[c];
            }
        }
        let node = track(&[self, bias]).then(|| {
            GraphNode::new(NodeKind::AddBias {
                x: input_of(self),
                bias: input_of(bias),
                rows,
                cols,
            })
        });
        Ok(Tensor::from_op(vec![rows, cols], out, node))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x.max(0.0)).collect();
        let node = track(&[self]).then(|| {
            GraphNode::new(NodeKind::Relu {
                x: input_of(self),
                x_data: self.data_rc(),
            })
        });
        Tensor::from_op(self.shape().to_vec(), out, node)
    }

    /// Elementwise multiplication by a constant.
    pub fn scale(&self, factor: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x * factor).collect();
        let node = track(&[self]).then(|| {
            GraphNode::new(NodeKind::Scale {
                x: input_of(self),
                factor,
            })
        });
        Tensor::from_op(self.shape().to_vec(), out, node)
    }
}

/// Mean of squared differences over all elements, as a scalar tensor.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor, AutogradError> {
    if pred.shape() != target.shape() {
        return Err(AutogradError::dim(
            "mse_loss",
            format!("shapes differ: {:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.numel() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    let node = track(&[pred, target]).then(|| {
        GraphNode::new(NodeKind::MseLoss {
            pred: input_of(pred),
            target: input_of(target),
            pred_data: pred.data_rc(),
            target_data: target.data_rc(),
        })
    });
    Ok(Tensor::from_op(vec![], vec![sum / n], node))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Gradients flowing to each operand given the output gradient. Entries line
/// up with `GraphNode::inputs()`: one per operand that carries a node.
pub(crate) fn backward_op(kind: &NodeKind, out_grad: &[f64]) -> Vec<(Rc<GraphNode>, Vec<f64>)> {
    let mut grads = Vec::new();
    let mut push = |input: &OpInput, g: Vec<f64>| {
        if let Some(node) = input {
            grads.push((Rc::clone(node), g));
        }
    };
    match kind {
        NodeKind::Accumulator { .. } => {}
        NodeKind::Matmul {
            a,
            b,
            a_data,
            b_data,
            m,
            k,
            n,
        } => {
            let (m, k, n) = (*m, *k, *n);
            if a.is_some() {
                // dA = dC . B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for l in 0..n {
                            acc += out_grad[i * n + l] * b_data[j * n + l];
                        }
                        da[i * k + j] = acc;
                    }
                }
                push(a, da);
            }
            if b.is_some() {
                // dB = A^T . dC
                let mut db = vec![0.0; k * n];
                for j in 0..k {
                    for l in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += a_data[i * k + j] * out_grad[i * n + l];
                        }
                        db[j * n + l] = acc;
                    }
                }
                push(b, db);
            }
        }
        NodeKind::Add { a, b } => {
            push(a, out_grad.to_vec());
            push(b, out_grad.to_vec());
        }
        NodeKind::AddBias {
            x,
            bias,
            rows,
            cols,
        } => {
            push(x, out_grad.to_vec());
            if bias.is_some() {
                let mut db = vec![0.0; *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        db[c] += out_grad[r * cols + c];
                    }
                }
                push(bias, db);
            }
        }
        NodeKind::Relu { x, x_data } => {
            let dx: Vec<f64> = x_data
                .iter()
                .zip(out_grad)
                .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                .collect();
            push(x, dx);
        }
        NodeKind::Scale { x, factor } => {
            push(x, out_grad.iter().map(|&g| g * factor).collect());
        }
        NodeKind::MseLoss {
            pred,
            target,
            pred_data,
            target_data,
        } => {
            let n = pred_data.len() as f64;
            let g0 = out_grad[0];
            if pred.is_some() {
                let dp: Vec<f64> = pred_data
                    .iter()
                    .zip(target_data.iter())
                    .map(|(p, t)| g0 * 2.0 * (p - t) / n)
                    .collect();
                push(pred, dp);
            }
            if target.is_some() {
                let dt: Vec<f64> = pred_data
                    .iter()
                    .zip(target_data.iter())
                    .map(|(p, t)| -g0 * 2.0 * (p - t) / n)
                    .collect();
                push(target, dt);
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(i.matmul(&x).unwrap().data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent oracle: the naive i/j/l product, distinct from the
        // cache-friendly loop order used by the op.
        fn oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += a[i * k + l] * b[l * n + j];
                    }
                    out[i * n + j] = acc;
                }
            }
            out
        }
        let mut rng = crate::rng::SplitMix64::new(11);
        let a = rng.fill_uniform(7 * 5, -1.0, 1.0);
        let b = rng.fill_uniform(5 * 3, -1.0, 1.0);
        let got = t(&[7, 5], &a).matmul(&t(&[5, 3], &b)).unwrap();
        let want = oracle(&a, &b, 7, 5, 3);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            a.matmul(&b),
            Err(AutogradError::Dimension { op: "matmul", .. })
        ));
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mse_zero_when_equal() {
        let a = t(&[2], &[1.0, 2.0]);
        assert_eq!(mse_loss(&a, &a).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn mse_hand_case() {
        let p = t(&[2], &[0.0, 0.0]);
        let y = t(&[2], &[2.0, 4.0]);
        assert_eq!(mse_loss(&p, &y).unwrap().item().unwrap(), 10.0);
    }

    #[test]
    fn add_shape_mismatch() {
        let a = t(&[2], &[0.0; 2]);
        let b = t(&[3], &[0.0; 3]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn constants_record_no_graph() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert!(!a.add(&b).unwrap().has_graph());
    }
}
