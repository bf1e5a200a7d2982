//! Reference computations for tests.
//!
//! Everything here works on plain `Vec<Vec<f64>>` rows and shares no code with
//! `fedlora-core`, so the core implementations can be checked against an
//! independent route. Speed is irrelevant; clarity is the point.

pub type Dense = Vec<Vec<f64>>;

pub fn zeros(rows: usize, cols: usize) -> Dense {
    vec![vec![0.0; cols]; rows]
}

pub fn identity(n: usize) -> Dense {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn transpose(m: &Dense) -> Dense {
    if m.is_empty() {
        return Vec::new();
    }
    let mut t = zeros(m[0].len(), m.len());
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

/// Element-wise triple loop, summing the inner dimension left to right.
pub fn triple_loop_matmul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let inner = b.len();
    let m = if inner == 0 { 0 } else { b[0].len() };
    let mut out = zeros(n, m);
    for i in 0..n {
        assert_eq!(a[i].len(), inner, "inner dimension mismatch");
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..inner {
                acc += a[i][p] * b[p][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn sub(a: &Dense, b: &Dense) -> Dense {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x - y).collect())
        .collect()
}

pub fn frobenius(a: &Dense) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cyclic two-sided Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues sorted descending and the matching eigenvectors as the
/// columns of the second return value.
pub fn symmetric_eigen(sym: &Dense) -> (Vec<f64>, Dense) {
    let n = sym.len();
    let mut a = sym.clone();
    let mut v = identity(n);
    for _sweep in 0..200 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let mut vectors = zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row][col] = v[row][src];
        }
    }
    (values, vectors)
}

/// Singular values (descending) from the eigenvalues of `mᵀm`.
pub fn singular_values(m: &Dense) -> Vec<f64> {
    let gram = triple_loop_matmul(&transpose(m), m);
    let (values, _) = symmetric_eigen(&gram);
    let k = m.len().min(m[0].len());
    values.into_iter().take(k).map(|l| l.max(0.0).sqrt()).collect()
}

/// Best rank-k approximation as the projection `m · V_k · V_kᵀ`, where `V_k`
/// spans the top-k right singular vectors.
pub fn best_rank_k(m: &Dense, k: usize) -> Dense {
    let gram = triple_loop_matmul(&transpose(m), m);
    let (_, vecs) = symmetric_eigen(&gram);
    let n = gram.len();
    let mut vk = zeros(n, k);
    for r in 0..n {
        for c in 0..k {
            vk[r][c] = vecs[r][c];
        }
    }
    let proj = triple_loop_matmul(&vk, &transpose(&vk));
    triple_loop_matmul(m, &proj)
}

/// Frobenius error of the best rank-k approximation: the root of the summed
/// squares of the discarded singular values.
pub fn truncation_error(m: &Dense, k: usize) -> f64 {
    singular_values(m)[k..].iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Projects row-vector samples onto the top-`dims` eigenvectors of their
/// sample covariance and returns the pairwise Euclidean distances between
/// the projected points, indexed `[i][j]`.
pub fn pca_pairwise_distances(samples: &Dense, dims: usize) -> Dense {
    let k = samples.len();
    let p = samples[0].len();
    let mut mean = vec![0.0; p];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / k as f64;
        }
    }
    let centered: Dense = samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = triple_loop_matmul(&transpose(&centered), &centered);
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (k.max(2) - 1) as f64;
        }
    }
    let (_, vecs) = symmetric_eigen(&cov);
    let projected: Dense = centered
        .iter()
        .map(|s| {
            (0..dims)
                .map(|c| (0..p).map(|r| s[r] * vecs[r][c]).sum())
                .collect()
        })
        .collect();
    let mut dist = zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            dist[i][j] = projected[i]
                .iter()
                .zip(&projected[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
    }
    dist
}

/// Central finite difference of `f` with respect to coordinate `index` of `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], index: usize, eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[index] += eps;
    minus[index] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

/// First AdamW step on a scalar parameter starting from zero moments,
/// written out in closed form with decoupled weight decay.
pub fn adamw_first_step_scalar(
    param: f64,
    grad: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> f64 {
    let m = (1.0 - beta1) * grad;
    let v = (1.0 - beta2) * grad * grad;
    let m_hat = m / (1.0 - beta1);
    let v_hat = v / (1.0 - beta2);
    param - lr * weight_decay * param - lr * m_hat / (v_hat.sqrt() + eps)
}
