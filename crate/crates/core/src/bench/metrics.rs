use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch mean of squared Frobenius distances between rows of `k` values.
pub fn mse(pred: &[f64], reference: &[f64], k: usize) -> Result<f64> {
    let rows = check_rows(pred, reference, k)?;
    let total: f64 = pred
        .chunks(k)
        .zip(reference.chunks(k))
        .map(|(p, r)| sq_dist(p, r))
        .sum();
    Ok(total / rows as f64)
}

/// Relative mean-squared error and the number of rows left out because the
/// reference had zero norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeMse {
    pub value: f64,
    pub excluded: usize,
}

/// Batch mean of `|pred - ref|² / |ref|²`; rows with `ref = 0` are skipped
/// and counted. A batch with only zero references yields `NaN`.
pub fn relative_mse(pred: &[f64], reference: &[f64], k: usize) -> Result<RelativeMse> {
    check_rows(pred, reference, k)?;
    let (mut total, mut used, mut excluded) = (0.0, 0usize, 0usize);
    for (p, r) in pred.chunks(k).zip(reference.chunks(k)) {
        let norm: f64 = r.iter().map(|v| v * v).sum();
        if norm == 0.0 {
            excluded += 1;
            continue;
        }
        total += sq_dist(p, r) / norm;
        used += 1;
    }
    Ok(RelativeMse {
        value: if used == 0 { f64::NAN } else { total / used as f64 },
        excluded,
    })
}

fn sq_dist(p: &[f64], r: &[f64]) -> f64 {
    p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_rows(pred: &[f64], reference: &[f64], k: usize) -> Result<usize> {
    if pred.len() != reference.len() {
        return Err(Error::Dimension {
            what: "prediction length",
            expected: reference.len(),
            got: pred.len(),
        });
    }
    if k == 0 || pred.len() % k != 0 {
        return Err(Error::Dimension {
            what: "values per row",
            expected: k,
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("mse"));
    }
    Ok(pred.len() / k)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("aggregate"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Summary { mean, std: var.sqrt() })
}

/// `β` such that the error behaves like `N^{-β}`: minus the least-squares
/// slope of `ln ε` against `ln N`.
pub fn convergence_rate(errors: &[(usize, f64)]) -> Result<f64> {
    for &(n, e) in errors {
        if n == 0 {
            return Err(Error::NonPositive {
                what: "number of steps",
                value: 0.0,
            });
        }
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::NonPositive { what: "error", value: e });
        }
    }
    let mut distinct: Vec<usize> = errors.iter().map(|p| p.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InvalidConfig(
            "convergence rate needs at least two distinct N".into(),
        ));
    }
    let m = errors.len() as f64;
    let xs: Vec<f64> = errors.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(-sxy / sxx)
}
