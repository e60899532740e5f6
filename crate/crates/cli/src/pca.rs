//! Principal component projection by power iteration with deflation.

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `n` rows of `k` coordinates.
    pub coords: Vec<Vec<f64>>,
    /// Unit component directions, by descending variance.
    pub components: Vec<Vec<f64>>,
    /// Sample variance (divisor `n - 1`) along each component.
    pub variances: Vec<f64>,
}

const MAX_ITERS: usize = 100_000;

/// Projects mean-centred `rows` onto the top `k` covariance eigenvectors.
/// Each component's largest-magnitude coordinate is made positive.
pub fn pca_project(rows: &[Vec<f64>], k: usize) -> Result<Projection> {
    let n = rows.len();
    if n < 2 {
        return Err(CliError::Config(format!("PCA needs at least 2 points, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(CliError::Config("PCA rows differ in length".into()));
    }
    if k > d {
        return Err(CliError::Config(format!("cannot take {k} components of {d}-dimensional data")));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j] / (n - 1) as f64;
            }
        }
    }
    let scale = (0..d).map(|i| cov[i][i]).fold(0.0, f64::max);

    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for c in 0..k {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + 0.1 * ((j + c) % d) as f64).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..MAX_ITERS {
            let mut w = mat_vec(&cov, &v);
            let norm = dot(&w, &w).sqrt();
            if norm <= 1e-14 * scale.max(1e-300) {
                // remaining variance is zero; any orthogonal direction will do
                lambda = 0.0;
                v = orthogonal_basis_vector(&components, d);
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = dot(&v, &mat_vec(&cov, &v));
            if delta < 1e-13 {
                break;
            }
        }
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        variances.push(lambda.max(0.0));
        components.push(v);
    }
    let coords = centred
        .iter()
        .map(|r| components.iter().map(|v| dot(r, v)).collect())
        .collect();
    Ok(Projection {
        coords,
        components,
        variances,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// First standard basis vector made orthogonal to `taken` by Gram-Schmidt
/// that leaves a non-degenerate remainder.
fn orthogonal_basis_vector(taken: &[Vec<f64>], d: usize) -> Vec<f64> {
    for axis in 0..d {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        for t in taken {
            let p = dot(&v, t);
            v.iter_mut().zip(t).for_each(|(x, y)| *x -= p * y);
        }
        if dot(&v, &v) > 1e-6 {
            normalize(&mut v);
            return v;
        }
    }
    unreachable!("fewer than d components taken")
}
