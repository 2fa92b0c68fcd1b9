use serde::Serialize;

use crate::error::{CarlError, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const VAR_EPS: f64 = 1e-4;
pub const COV_WEIGHT: f64 = 0.05;

/// Loss nodes of one VICReg evaluation.
#[derive(Debug, Clone, Copy)]
pub struct VicregVars {
    pub inv: Var,
    pub var: Var,
    pub cov: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct VicregTerms {
    pub inv: f64,
    pub var: f64,
    pub cov: f64,
    pub total: f64,
}

impl VicregVars {
    pub fn values(&self, t: &Tape) -> VicregTerms {
        VicregTerms {
            inv: t.value(self.inv).item(),
            var: t.value(self.var).item(),
            cov: t.value(self.cov).item(),
            total: t.value(self.total).item(),
        }
    }
}

/// VICReg between predictions `[B, N, D]` and constant targets of the same
/// shape. Statistics run over the batch axis `B`; the variance and
/// covariance use the unbiased `1/(B-1)` estimator.
pub fn vicreg(t: &mut Tape, pred: Var, target: &Tensor) -> Result<VicregVars> {
    let shape = t.shape(pred).to_vec();
    if shape.len() != 3 || shape != target.shape() {
        return Err(CarlError::Shape {
            op: "vicreg",
            lhs: shape,
            rhs: target.shape().to_vec(),
        });
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if b < 2 {
        return Err(CarlError::validation("VICReg needs a batch of at least two"));
    }
    let y = t.constant(target.clone());
    let diff = t.sub(pred, y)?;
    let sq = t.square(diff);
    let inv = t.mean_all(sq);

    let v = t.variance(pred, 0, 1)?;
    let v = t.add_scalar(v, VAR_EPS);
    let std = t.sqrt(v);
    let neg = t.scale(std, -1.0);
    let gap = t.add_scalar(neg, 1.0);
    let hinge = t.relu(gap);
    let var = t.mean_all(hinge);

    let mean = t.mean(pred, 0)?;
    let centered = t.sub(pred, mean)?;
    let per_n = t.permute(centered, &[1, 0, 2])?;
    let cov = t.matmul_ex(per_n, per_n, true, false)?;
    let cov = t.scale(cov, 1.0 / (b - 1) as f64);
    let cov_sq = t.square(cov);
    let off_diag = t.constant(Tensor::from_fn(&[d, d], |i| if i / d == i % d { 0.0 } else { 1.0 }));
    let off = t.mul(cov_sq, off_diag)?;
    let off = t.sum_all(off);
    let cov = t.scale(off, 1.0 / (n * d) as f64);

    let weighted = t.scale(cov, COV_WEIGHT);
    let total = t.add(inv, var)?;
    let total = t.add(total, weighted)?;
    Ok(VicregVars { inv, var, cov, total })
}
