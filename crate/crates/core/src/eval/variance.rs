use crate::error::{CarlError, Result};
use crate::tensor::Tensor;

/// Mean over feature dimensions of the R² obtained by regressing each
/// dimension on a one-hot encoding of `factor`. The least-squares fit of a
/// one-hot design is the per-level mean, so R² = 1 − SS_within / SS_total.
/// Constant dimensions contribute 0.
pub fn variance_decomposition(feats: &Tensor, factor: &[usize]) -> Result<f64> {
    let &[n, d] = feats.shape() else {
        return Err(CarlError::validation(format!("features must be [N, D], got {:?}", feats.shape())));
    };
    if factor.len() != n {
        return Err(CarlError::validation(format!("{} factor labels for {n} rows", factor.len())));
    }
    let levels = factor.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; levels];
    for &f in factor {
        counts[f] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(CarlError::validation("variance decomposition needs at least two factor levels"));
    }
    let x = feats.data();
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        let mut sums = vec![0.0; levels];
        for i in 0..n {
            sums[factor[i]] += x[i * d + j];
        }
        let (mut ss_tot, mut ss_res) = (0.0, 0.0);
        for i in 0..n {
            let v = x[i * d + j];
            let group = sums[factor[i]] / counts[factor[i]] as f64;
            ss_tot += (v - mean).powi(2);
            ss_res += (v - group).powi(2);
        }
        if ss_tot > 0.0 {
            total += 1.0 - ss_res / ss_tot;
        }
    }
    Ok(total / d as f64)
}

/// Coefficient of determination of a least-squares polynomial fit of `y` on `x`.
pub fn polyfit_r2(x: &[f64], y: &[f64], degree: usize) -> Result<f64> {
    let n = x.len();
    if y.len() != n || n <= degree {
        return Err(CarlError::validation(format!("need more than {degree} points of equal length")));
    }
    let k = degree + 1;
    // normal equations on x scaled to [-1, 1] for conditioning
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { (hi - lo) / 2.0 } else { 1.0 };
    let mid = (hi + lo) / 2.0;
    let phi: Vec<Vec<f64>> = x.iter().map(|&v| (0..k).map(|p| ((v - mid) / span).powi(p as i32)).collect()).collect();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (row, &yi) in phi.iter().zip(y) {
        for r in 0..k {
            for c in 0..k {
                a[r][c] += row[r] * row[c];
            }
            a[r][k] += row[r] * yi;
        }
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        a.swap(col, piv);
        if a[col][col].abs() < 1e-300 {
            return Err(CarlError::Numeric("singular polynomial fit".into()));
        }
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..k).map(|r| a[r][k] / a[r][r]).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = phi
        .iter()
        .zip(y)
        .map(|(row, &yi)| (yi - row.iter().zip(&coef).map(|(p, c)| p * c).sum::<f64>()).powi(2))
        .sum();
    Ok(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 })
}
