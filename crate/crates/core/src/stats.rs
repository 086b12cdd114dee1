//! Small descriptive-statistics and least-squares helpers.
//!
//! Standard deviations use the population convention (divide by `n`)
//! throughout the crate.

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn mean_abs(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
}

pub fn variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub fn std(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(x: &[f64], q: f64) -> f64 {
    assert!(!x.is_empty(), "quantile of empty slice");
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    s[lo] + (s[hi] - s[lo]) * frac
}

pub fn median(x: &[f64]) -> f64 {
    quantile(x, 0.5)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks (ties share the mean rank), 1-based.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Solve the symmetric positive-definite system `a x = b` by Cholesky.
/// Returns the index of the first failing pivot on breakdown.
pub fn cholesky_solve(a: &[f64], n: usize, b: &[f64]) -> std::result::Result<Vec<f64>, usize> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                let scale = a[i * n + i].abs().max(1e-300);
                if s <= 1e-10 * scale {
                    return Err(i);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * z[k];
        }
        z[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

/// Ordinary least squares fit of `y` on the columns of `x` (plus an
/// intercept when requested).
#[derive(Debug, Clone)]
pub struct OlsFit {
    /// Slope coefficients, one per column of `x`.
    pub coef: Vec<f64>,
    pub intercept: f64,
    /// Standard errors of `coef` (homoskedastic).
    pub std_err: Vec<f64>,
    /// Mean squared residual (divide by `n`).
    pub residual_variance: f64,
}

pub fn ols(x: &Tensor, y: &[f64], intercept: bool) -> Result<OlsFit> {
    let (n, k) = x.dims2();
    assert_eq!(n, y.len(), "ols: row count mismatch");
    let kk = k + usize::from(intercept);
    let mut xtx = vec![0.0; kk * kk];
    let mut xty = vec![0.0; kk];
    let mut row = vec![0.0; kk];
    for i in 0..n {
        row[..k].copy_from_slice(x.row(i));
        if intercept {
            row[k] = 1.0;
        }
        for a in 0..kk {
            xty[a] += row[a] * y[i];
            for b in 0..=a {
                xtx[a * kk + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..kk {
        for b in 0..a {
            xtx[b * kk + a] = xtx[a * kk + b];
        }
    }
    let beta = cholesky_solve(&xtx, kk, &xty).map_err(|col| Error::Singular {
        columns: vec![if col < k { format!("x{col}") } else { "intercept".into() }],
    })?;
    let mut rss = 0.0;
    for i in 0..n {
        let mut pred = if intercept { beta[k] } else { 0.0 };
        for (j, xv) in x.row(i).iter().enumerate() {
            pred += beta[j] * xv;
        }
        rss += (y[i] - pred).powi(2);
    }
    let dof = (n as f64 - kk as f64).max(1.0);
    let sigma2 = rss / dof;
    let mut std_err = Vec::with_capacity(k);
    for j in 0..k {
        let mut e = vec![0.0; kk];
        e[j] = 1.0;
        let col = cholesky_solve(&xtx, kk, &e).expect("factorisation already succeeded");
        std_err.push((sigma2 * col[j]).sqrt());
    }
    Ok(OlsFit {
        coef: beta[..k].to_vec(),
        intercept: if intercept { beta[k] } else { 0.0 },
        std_err,
        residual_variance: rss / n as f64,
    })
}
