//! 2-D embeddings of a source matrix, cluster-quality scoring of the
//! embeddings, and placement of new rows into a fitted embedding.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    Pca,
    Kpca,
    Tsne,
}

impl Technique {
    pub const ALL: [Technique; 3] = [Technique::Pca, Technique::Kpca, Technique::Tsne];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Pca => "pca",
            Technique::Kpca => "kpca",
            Technique::Tsne => "tsne",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Technique::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown projection technique {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionParams {
    /// Defaults to `min(30, (N - 1) / 3)`.
    pub perplexity: Option<f64>,
    pub tsne_iters: usize,
    /// Defaults to `1 / (D * var(matrix))`.
    pub kpca_gamma: Option<f64>,
    /// Neighbours used to place new rows into a t-SNE embedding.
    pub oos_neighbors: usize,
    pub seed: u64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        Self {
            perplexity: None,
            tsne_iters: 1000,
            kpca_gamma: None,
            oos_neighbors: 5,
            seed: 0,
        }
    }
}

/// State needed to place new rows without refitting. Kernel PCA and t-SNE
/// also need the training rows, which are passed separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Fitted {
    Pca {
        mean: Vec<f64>,
        /// Two unit-length components in source space.
        components: Vec<Vec<f64>>,
        explained_variance_ratio: Vec<f64>,
    },
    Kpca {
        gamma: f64,
        column_means: Vec<f64>,
        grand_mean: f64,
        /// Eigenvectors divided by the square root of their eigenvalue.
        alphas: Vec<Vec<f64>>,
        eigenvalues: Vec<f64>,
    },
    Tsne {
        neighbors: usize,
        perplexity: f64,
        /// `(iteration, KL(P || Q))` checkpoints.
        kl_history: Vec<(usize, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub technique: Technique,
    pub coords: Vec<[f32; 2]>,
    pub fitted: Fitted,
    /// Fewer than two usable dimensions; missing coordinates are zero.
    pub degenerate: bool,
}

fn to_matrix(rows: &[Vec<f32>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    if let Some(v) = rows.iter().flatten().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("projection input contains {v}")));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| f64::from(rows[i][j])))
}

fn require_shape(m: &DMatrix<f64>, min_rows: usize) -> Result<()> {
    if m.nrows() < min_rows || m.ncols() < 2 {
        return Err(Error::InvalidParams(format!(
            "projection needs at least {min_rows} rows and 2 columns, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Flip `v` so its largest-magnitude entry (first on ties) is positive.
fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn fit(technique: Technique, rows: &[Vec<f32>], params: &ProjectionParams) -> Result<Embedding> {
    match technique {
        Technique::Pca => pca_2d(rows),
        Technique::Kpca => kernel_pca_2d(rows, params.kpca_gamma),
        Technique::Tsne => tsne_2d(rows, params),
    }
}

pub fn pca_2d(rows: &[Vec<f32>]) -> Result<Embedding> {
    let x = to_matrix(rows)?;
    require_shape(&x, 3)?;
    let mean: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let mut centered = x;
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let s1 = svd.singular_values[order[0]];
    let s2 = order.get(1).map_or(0.0, |&i| svd.singular_values[i]);
    let rank = if s1 <= 1e-12 { 0 } else if s2 <= 1e-6 * s1 { 1 } else { 2 };
    let d = centered.ncols();
    let components: Vec<Vec<f64>> = (0..2)
        .map(|c| {
            if c < rank {
                let mut v: Vec<f64> = v_t.row(order[c]).iter().copied().collect();
                orient(&mut v);
                v
            } else {
                vec![0.0; d]
            }
        })
        .collect();
    let explained_variance_ratio = [s1, s2]
        .iter()
        .map(|s| if total > 0.0 { s * s / total } else { 0.0 })
        .collect();
    let fitted = Fitted::Pca {
        mean,
        components,
        explained_variance_ratio,
    };
    let coords = rows
        .iter()
        .map(|r| transform_pca(&fitted, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(Embedding {
        technique: Technique::Pca,
        coords,
        fitted,
        degenerate: rank < 2,
    })
}

fn transform_pca(fitted: &Fitted, row: &[f32]) -> Result<[f32; 2]> {
    let Fitted::Pca { mean, components, .. } = fitted else {
        unreachable!("caller matched the variant");
    };
    if row.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            found: row.len(),
        });
    }
    let project = |c: &Vec<f64>| -> f32 {
        row.iter()
            .zip(mean)
            .zip(c)
            .map(|((&x, m), w)| (f64::from(x) - m) * w)
            .sum::<f64>() as f32
    };
    Ok([project(&components[0]), project(&components[1])])
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
}

/// `1 / (D * var)` over all entries; `1 / D` when the matrix is constant.
pub fn default_gamma(rows: &[Vec<f32>]) -> f64 {
    let d = rows.first().map_or(1, Vec::len).max(1) as f64;
    let count = rows.iter().map(Vec::len).sum::<usize>().max(1) as f64;
    let mean = rows.iter().flatten().map(|&v| f64::from(v)).sum::<f64>() / count;
    let var = rows.iter().flatten().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / count;
    if var > 1e-300 {
        1.0 / (d * var)
    } else {
        1.0 / d
    }
}

/// Dense decomposition up to this size, block subspace iteration beyond.
const DENSE_EIGEN_LIMIT: usize = 400;

/// Largest `k` eigenpairs of a symmetric positive semi-definite matrix,
/// eigenvalues descending.
pub fn top_eigenpairs(a: &DMatrix<f64>, k: usize, seed: u64) -> (Vec<f64>, Vec<DVector<f64>>) {
    let n = a.nrows();
    let k = k.min(n);
    if n <= DENSE_EIGEN_LIMIT {
        let eig = SymmetricEigen::new(a.clone());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| {
            eig.eigenvalues[y]
                .partial_cmp(&eig.eigenvalues[x])
                .unwrap_or(Ordering::Equal)
                .then(x.cmp(&y))
        });
        let values = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
        let vectors = order[..k].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
        return (values, vectors);
    }
    subspace_iteration(a, k, seed)
}

fn subspace_iteration(a: &DMatrix<f64>, k: usize, seed: u64) -> (Vec<f64>, Vec<DVector<f64>>) {
    let n = a.nrows();
    let block = (k + 8).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = DMatrix::from_fn(n, block, |_, _| StandardNormal.sample(&mut rng));
    let mut q = start.qr().q();
    let mut values = vec![0.0; k];
    let mut vectors = vec![DVector::zeros(n); k];
    for _ in 0..500 {
        let z = a * &q;
        let small = q.transpose() * &z;
        let small = (&small + small.transpose()) * 0.5;
        let eig = SymmetricEigen::new(small);
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&x, &y| {
            eig.eigenvalues[y]
                .partial_cmp(&eig.eigenvalues[x])
                .unwrap_or(Ordering::Equal)
                .then(x.cmp(&y))
        });
        let scale = eig.eigenvalues[order[0]].abs().max(1e-300);
        let mut converged = true;
        for (slot, &i) in order[..k].iter().enumerate() {
            let w = eig.eigenvectors.column(i);
            let v = &q * w;
            let residual = (&z * w - &v * eig.eigenvalues[i]).norm();
            converged &= residual <= 1e-10 * scale;
            values[slot] = eig.eigenvalues[i];
            vectors[slot] = v;
        }
        if converged {
            break;
        }
        q = z.qr().q();
    }
    (values, vectors)
}

pub fn kernel_pca_2d(rows: &[Vec<f32>], gamma: Option<f64>) -> Result<Embedding> {
    let x = to_matrix(rows)?;
    require_shape(&x, 3)?;
    let n = rows.len();
    let gamma = gamma.unwrap_or_else(|| default_gamma(rows));
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParams(format!("kernel width {gamma} must be positive")));
    }
    let kernel = DMatrix::from_fn(n, n, |i, j| (-gamma * squared_distance(&rows[i], &rows[j])).exp());
    let column_means: Vec<f64> = kernel.column_iter().map(|c| c.mean()).collect();
    let grand_mean = column_means.iter().sum::<f64>() / n as f64;
    let centered = DMatrix::from_fn(n, n, |i, j| kernel[(i, j)] - column_means[i] - column_means[j] + grand_mean);
    let (eigenvalues, vectors) = top_eigenpairs(&centered, 2, 0);
    let threshold = 1e-8 * n as f64;
    let mut degenerate = false;
    let mut coords = vec![[0.0f32; 2]; n];
    let mut alphas = Vec::with_capacity(2);
    for (c, (lambda, v)) in eigenvalues.iter().zip(vectors).enumerate() {
        if *lambda < threshold {
            degenerate = true;
            alphas.push(vec![0.0; n]);
            continue;
        }
        let mut v: Vec<f64> = v.iter().copied().collect();
        orient(&mut v);
        let root = lambda.sqrt();
        for (row, &e) in coords.iter_mut().zip(&v) {
            row[c] = (e * root) as f32;
        }
        alphas.push(v.iter().map(|e| e / root).collect());
    }
    Ok(Embedding {
        technique: Technique::Kpca,
        coords,
        fitted: Fitted::Kpca {
            gamma,
            column_means,
            grand_mean,
            alphas,
            eigenvalues,
        },
        degenerate,
    })
}

fn default_perplexity(n: usize) -> f64 {
    30.0f64.min((n as f64 - 1.0) / 3.0)
}

/// Row-conditional affinities `p_{j|i}` matching `perplexity`, found by
/// bisection on the Gaussian precision.
fn conditional_affinities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    p.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let d = &dist[i * n..(i + 1) * n];
        let mut beta = 1.0f64;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..50 {
            let min_d = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[j] - min_d) * beta).exp() };
                sum += row[j];
                weighted += (d[j] - min_d) * row[j];
            }
            let entropy = sum.ln() + beta * weighted / sum;
            row.iter_mut().for_each(|v| *v /= sum);
            let diff = entropy - target;
            if diff.abs() < 1e-4 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
    });
    p
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let num: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            if i == j {
                0.0
            } else {
                1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2))
            }
        })
        .collect();
    let total: f64 = num.iter().sum();
    p.iter()
        .zip(&num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &q)| pij * (pij / (q / total).max(1e-300)).ln())
        .sum()
}

pub const EXAGGERATION: f64 = 12.0;
pub const EXAGGERATION_ITERS: usize = 250;

/// Exact t-SNE. Deterministic: PCA initialisation; `seed` only fills
/// initial dimensions that PCA leaves empty.
pub fn tsne_2d(rows: &[Vec<f32>], params: &ProjectionParams) -> Result<Embedding> {
    let n = rows.len();
    let perplexity = params.perplexity.unwrap_or_else(|| default_perplexity(n));
    if n < 10 || !(perplexity > 0.0) || perplexity > (n as f64 - 1.0) / 3.0 {
        return Err(Error::PerplexityTooLarge { perplexity, n });
    }
    let init = pca_2d(rows)?;
    let x = to_matrix(rows)?;
    let dist: Vec<f64> = (0..n * n)
        .into_par_iter()
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            x.row(i).iter().zip(x.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum()
        })
        .collect();
    let conditional = conditional_affinities(&dist, n, perplexity);
    let p: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            ((conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64)).max(1e-12)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut y: Vec<[f64; 2]> = init.coords.iter().map(|c| [f64::from(c[0]), f64::from(c[1])]).collect();
    for dim in 0..2 {
        let mean = y.iter().map(|v| v[dim]).sum::<f64>() / n as f64;
        let std = (y.iter().map(|v| (v[dim] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for v in y.iter_mut() {
            v[dim] = if std > 1e-12 {
                (v[dim] - mean) / std * 1e-2
            } else {
                1e-2 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            };
        }
    }

    let learning_rate = (n as f64 / 12.0).max(50.0);
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_history = Vec::new();
    for iter in 0..params.tsne_iters {
        let exaggeration = if iter < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if iter < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let num: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                if i == j {
                    0.0
                } else {
                    1.0 / (1.0 + (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2))
                }
            })
            .collect();
        let row_sums: Vec<f64> = num.par_chunks(n).map(|r| r.iter().sum()).collect();
        let total: f64 = row_sums.iter().sum();
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    let w = num[i * n + j];
                    let coef = (exaggeration * p[i * n + j] - w / total) * w;
                    g[0] += 4.0 * coef * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * coef * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for d in 0..2 {
                gains[i][d] = if (grad[i][d] > 0.0) != (update[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(0.01)
                };
                update[i][d] = momentum * update[i][d] - learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        for d in 0..2 {
            let mean = y.iter().map(|v| v[d]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|v| v[d] -= mean);
        }
        let done = iter + 1;
        if done % 50 == 0 || done == params.tsne_iters {
            kl_history.push((done, kl_divergence(&p, &y)));
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE diverged".into()));
    }
    Ok(Embedding {
        technique: Technique::Tsne,
        coords: y.iter().map(|v| [v[0] as f32, v[1] as f32]).collect(),
        fitted: Fitted::Tsne {
            neighbors: params.oos_neighbors,
            perplexity,
            kl_history,
        },
        degenerate: false,
    })
}

/// Coordinates of a row that was not part of the fit. `train_rows` and
/// `coords` are the rows and coordinates the embedding was fitted on.
pub fn project_oos(fitted: &Fitted, train_rows: &[Vec<f32>], coords: &[[f32; 2]], row: &[f32]) -> Result<[f32; 2]> {
    match fitted {
        Fitted::Pca { .. } => transform_pca(fitted, row),
        Fitted::Kpca {
            gamma,
            column_means,
            grand_mean,
            alphas,
            ..
        } => {
            check_dims(train_rows, row)?;
            let k: Vec<f64> = train_rows.iter().map(|r| (-gamma * squared_distance(r, row)).exp()).collect();
            let k_mean = k.iter().sum::<f64>() / k.len() as f64;
            let centered: Vec<f64> = k
                .iter()
                .zip(column_means)
                .map(|(v, m)| v - m - k_mean + grand_mean)
                .collect();
            let project = |a: &Vec<f64>| centered.iter().zip(a).map(|(c, a)| c * a).sum::<f64>() as f32;
            Ok([project(&alphas[0]), project(&alphas[1])])
        }
        Fitted::Tsne { neighbors, .. } => {
            check_dims(train_rows, row)?;
            let mut by_distance: Vec<(f64, usize)> = train_rows
                .iter()
                .enumerate()
                .map(|(i, r)| (squared_distance(r, row).sqrt(), i))
                .collect();
            by_distance.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
            let mut acc = [0.0f64; 2];
            let mut total = 0.0;
            for &(d, i) in by_distance.iter().take((*neighbors).max(1)) {
                let w = 1.0 / (d + 1e-9);
                acc[0] += w * f64::from(coords[i][0]);
                acc[1] += w * f64::from(coords[i][1]);
                total += w;
            }
            Ok([(acc[0] / total) as f32, (acc[1] / total) as f32])
        }
    }
}

fn check_dims(train_rows: &[Vec<f32>], row: &[f32]) -> Result<()> {
    let expected = train_rows.first().map_or(0, Vec::len);
    if row.len() != expected || train_rows.is_empty() {
        return Err(Error::DimensionMismatch {
            expected,
            found: row.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub predictions: f64,
    pub labels: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            predictions: 2.0,
            labels: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingScore {
    pub db: f64,
    pub cdist: f64,
    /// `cdist / (1 + db)`; zero when degenerate.
    pub g: f64,
    /// Fewer than two groups present.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub db_labels: f64,
    pub db_preds: f64,
    pub cdist_labels: f64,
    pub cdist_preds: f64,
    pub g_labels: f64,
    pub g_preds: f64,
    pub degenerate_labels: bool,
    pub degenerate_preds: bool,
    pub combined: f64,
}

/// Davies-Bouldin index and mean pairwise centroid distance of one grouping.
pub fn grouping_score(coords: &[[f32; 2]], groups: &[usize]) -> GroupingScore {
    let k = groups.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![[0.0f64; 2]; k];
    let mut counts = vec![0usize; k];
    for (c, &g) in coords.iter().zip(groups) {
        sums[g][0] += f64::from(c[0]);
        sums[g][1] += f64::from(c[1]);
        counts[g] += 1;
    }
    let present: Vec<usize> = (0..k).filter(|&g| counts[g] > 0).collect();
    if present.len() < 2 {
        return GroupingScore {
            db: 0.0,
            cdist: 0.0,
            g: 0.0,
            degenerate: true,
        };
    }
    let centroids: Vec<[f64; 2]> = (0..k)
        .map(|g| {
            let n = counts[g].max(1) as f64;
            [sums[g][0] / n, sums[g][1] / n]
        })
        .collect();
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut scatter = vec![0.0f64; k];
    for (c, &g) in coords.iter().zip(groups) {
        scatter[g] += dist([f64::from(c[0]), f64::from(c[1])], centroids[g]);
    }
    for g in 0..k {
        scatter[g] /= counts[g].max(1) as f64;
    }
    let mut db = 0.0;
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in present.iter().enumerate() {
        let mut worst = 0.0f64;
        for (b, &j) in present.iter().enumerate() {
            if i == j {
                continue;
            }
            let m = dist(centroids[i], centroids[j]);
            worst = worst.max((scatter[i] + scatter[j]) / m.max(1e-12));
            if b > a {
                pair_sum += m;
                pairs += 1;
            }
        }
        db += worst;
    }
    db /= present.len() as f64;
    let cdist = pair_sum / pairs as f64;
    GroupingScore {
        db,
        cdist,
        g: cdist / (1.0 + db),
        degenerate: false,
    }
}

pub fn cluster_score(coords: &[[f32; 2]], labels: &[usize], preds: &[usize], weights: ScoreWeights) -> ClusterScore {
    let l = grouping_score(coords, labels);
    let p = grouping_score(coords, preds);
    ClusterScore {
        db_labels: l.db,
        db_preds: p.db,
        cdist_labels: l.cdist,
        cdist_preds: p.cdist,
        g_labels: l.g,
        g_preds: p.g,
        degenerate_labels: l.degenerate,
        degenerate_preds: p.degenerate,
        combined: (weights.predictions * p.g + weights.labels * l.g) / (weights.predictions + weights.labels),
    }
}

/// Visible when `combined >= 0.5 * median` over all cells; the best cell of
/// every source column stays visible. `cells` is `(source, combined)`.
pub fn visibility(cells: &[(&str, f64)]) -> Vec<bool> {
    if cells.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = cells.iter().map(|c| c.1).collect();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    let mut visible: Vec<bool> = cells.iter().map(|c| c.1 >= 0.5 * median).collect();
    for (i, (source, score)) in cells.iter().enumerate() {
        let best = cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.0 == *source)
            .all(|(j, c)| c.1 < *score || (c.1 == *score && j >= i));
        if best {
            visible[i] = true;
        }
    }
    visible
}

/// One fitted cell of the projection grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCell {
    pub source: String,
    pub technique: Technique,
    pub coords: Vec<[f32; 2]>,
    pub fitted: Fitted,
    pub degenerate: bool,
    pub score: ClusterScore,
    pub visible: bool,
}

/// Applies [`visibility`] to a grid in place.
pub fn set_visibility(cells: &mut [ProjectionCell]) {
    let flags = visibility(&cells.iter().map(|c| (c.source.as_str(), c.score.combined)).collect::<Vec<_>>());
    for (cell, flag) in cells.iter_mut().zip(flags) {
        cell.visible = flag;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blobs(centers: &[[f32; 2]], per: usize, dims: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                let mut r: Vec<f32> = (0..dims).map(|_| Distribution::<f32>::sample(&StandardNormal, &mut rng)).collect();
                r[0] += center[0];
                r[1] += center[1];
                rows.push(r);
                labels.push(c);
            }
        }
        (rows, labels)
    }

    fn knn_purity(coords: &[[f32; 2]], labels: &[usize], k: usize) -> f64 {
        let mut hits = 0;
        for i in 0..coords.len() {
            let mut d: Vec<(f32, usize)> = (0..coords.len())
                .filter(|&j| j != i)
                .map(|j| ((coords[i][0] - coords[j][0]).hypot(coords[i][1] - coords[j][1]), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            hits += d[..k].iter().filter(|(_, j)| labels[*j] == labels[i]).count();
        }
        hits as f64 / (coords.len() * k) as f64
    }

    #[test]
    fn pca_on_rank_one_data() {
        let dir = [1.0f32, -2.0, 0.5, 3.0, 1.0];
        let rows: Vec<Vec<f32>> = (0..12).map(|i| dir.iter().map(|d| d * (i as f32 - 4.0) + 1.0).collect()).collect();
        let e = pca_2d(&rows).unwrap();
        assert!(e.degenerate);
        let Fitted::Pca { explained_variance_ratio, .. } = &e.fitted else { panic!() };
        assert!((explained_variance_ratio[0] - 1.0).abs() < 1e-9);
        assert!(e.coords.iter().all(|c| c[1].abs() <= 1e-5));
    }

    #[test]
    fn pca_out_of_sample_is_consistent_and_linear() {
        let (rows, _) = blobs(&[[0.0, 0.0], [5.0, 1.0]], 10, 6, 3);
        let e = pca_2d(&rows).unwrap();
        for (r, c) in rows.iter().zip(&e.coords) {
            let p = project_oos(&e.fitted, &rows, &e.coords, r).unwrap();
            assert!((p[0] - c[0]).abs() <= 1e-5 && (p[1] - c[1]).abs() <= 1e-5);
        }
        let mid: Vec<f32> = rows[2].iter().zip(&rows[13]).map(|(a, b)| (a + b) / 2.0).collect();
        let p = project_oos(&e.fitted, &rows, &e.coords, &mid).unwrap();
        for d in 0..2 {
            assert!((p[d] - (e.coords[2][d] + e.coords[13][d]) / 2.0).abs() <= 1e-5);
        }
        assert!(matches!(
            project_oos(&e.fitted, &rows, &e.coords, &[0.0; 3]),
            Err(Error::DimensionMismatch { expected: 6, found: 3 })
        ));
    }

    #[test]
    fn pca_sign_convention() {
        let (rows, _) = blobs(&[[0.0, 0.0], [4.0, -3.0]], 8, 4, 9);
        let Fitted::Pca { components, .. } = pca_2d(&rows).unwrap().fitted else { panic!() };
        for c in &components {
            let top = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(top > 0.0);
        }
    }

    #[test]
    fn pca_rejects_tiny_input() {
        assert!(pca_2d(&[vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(pca_2d(&[vec![1.0], vec![2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn kpca_separates_clusters() {
        let (rows, labels) = blobs(&[[0.0, 0.0], [10.0, 0.0]], 15, 3, 1);
        let e = kernel_pca_2d(&rows, None).unwrap();
        assert!(!e.degenerate);
        assert_eq!(knn_purity(&e.coords, &labels, 1), 1.0);
    }

    #[test]
    fn kpca_nystrom_reproduces_training_rows() {
        let (rows, _) = blobs(&[[0.0, 0.0], [3.0, 3.0]], 10, 4, 2);
        let e = kernel_pca_2d(&rows, None).unwrap();
        for (r, c) in rows.iter().zip(&e.coords) {
            let p = project_oos(&e.fitted, &rows, &e.coords, r).unwrap();
            assert!((p[0] - c[0]).abs() <= 1e-4 && (p[1] - c[1]).abs() <= 1e-4);
        }
    }

    #[test]
    fn kpca_tiny_gamma_is_degenerate() {
        let (rows, _) = blobs(&[[0.0, 0.0], [3.0, 3.0]], 10, 4, 2);
        assert!(kernel_pca_2d(&rows, Some(1e-12)).unwrap().degenerate);
    }

    #[test]
    fn kpca_duplicate_rows_coincide() {
        let (mut rows, _) = blobs(&[[0.0, 0.0], [3.0, 3.0]], 6, 3, 5);
        rows.push(rows[4].clone());
        let e = kernel_pca_2d(&rows, None).unwrap();
        let last = e.coords[rows.len() - 1];
        assert!((last[0] - e.coords[4][0]).abs() < 1e-6 && (last[1] - e.coords[4][1]).abs() < 1e-6);
    }

    #[test]
    fn subspace_iteration_matches_dense() {
        let (rows, _) = blobs(&[[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]], 40, 3, 4);
        let n = rows.len();
        let gamma = default_gamma(&rows);
        let k = DMatrix::from_fn(n, n, |i, j| (-gamma * squared_distance(&rows[i], &rows[j])).exp());
        let dense = SymmetricEigen::new(k.clone());
        let mut reference: Vec<f64> = dense.eigenvalues.iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        let (values, vectors) = subspace_iteration(&k, 2, 7);
        for c in 0..2 {
            assert!((values[c] - reference[c]).abs() <= 1e-8 * reference[0]);
            let residual = (&k * &vectors[c] - &vectors[c] * values[c]).norm();
            assert!(residual <= 1e-6 * reference[0]);
        }
    }

    #[test]
    fn tsne_rejects_small_n() {
        let rows = vec![vec![0.0f32, 1.0]; 9];
        assert!(matches!(
            tsne_2d(&rows, &ProjectionParams::default()),
            Err(Error::PerplexityTooLarge { n: 9, .. })
        ));
    }

    #[test]
    fn tsne_is_deterministic_and_reduces_kl() {
        let (rows, labels) = blobs(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 10, 4, 8);
        let params = ProjectionParams {
            tsne_iters: 400,
            ..ProjectionParams::default()
        };
        let a = tsne_2d(&rows, &params).unwrap();
        let b = tsne_2d(&rows, &params).unwrap();
        assert_eq!(a, b);
        let Fitted::Tsne { kl_history, .. } = &a.fitted else { panic!() };
        let at = |it| kl_history.iter().find(|h| h.0 == it).unwrap().1;
        assert!(at(400) < at(250));
        assert!(knn_purity(&a.coords, &labels, 5) >= 0.9);
        let p = project_oos(&a.fitted, &rows, &a.coords, &rows[3]).unwrap();
        assert!((p[0] - a.coords[3][0]).abs() <= 1e-4 && (p[1] - a.coords[3][1]).abs() <= 1e-4);
    }

    #[test]
    fn davies_bouldin_hand_example() {
        let coords = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let s = grouping_score(&coords, &[0, 0, 1, 1]);
        assert!((s.db - 0.1).abs() < 1e-12);
        assert!((s.cdist - 10.0).abs() < 1e-12);
        assert!((s.g - 10.0 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn combined_score_weights() {
        let coords = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let same = cluster_score(&coords, &[0, 0, 1, 1], &[0, 0, 1, 1], ScoreWeights::default());
        assert_eq!(same.g_labels, same.g_preds);
        assert!((same.combined - same.g_preds).abs() < 1e-12);
        let single = cluster_score(&coords, &[0, 0, 0, 0], &[0, 0, 1, 1], ScoreWeights::default());
        assert!(single.degenerate_labels && !single.degenerate_preds);
        assert_eq!(single.g_labels, 0.0);
        assert!((single.combined - 2.0 * single.g_preds / 3.0).abs() < 1e-12);
    }

    #[test]
    fn visibility_rules() {
        assert_eq!(visibility(&[("a", 1.0), ("b", 1.0), ("c", 1.0)]), vec![true; 3]);
        assert_eq!(
            visibility(&[("a", 1.0), ("a", 0.1), ("b", 1.0), ("b", 1.2)]),
            vec![true, false, true, true]
        );
        assert_eq!(visibility(&[("a", 0.0)]), vec![true]);
        // The best cell of a weak column survives.
        assert_eq!(visibility(&[("a", 1.0), ("a", 1.0), ("b", 0.1), ("b", 0.05)]), vec![true, true, true, false]);
    }

    proptest! {
        #[test]
        fn db_and_cdist_translation_and_scale(
            pts in proptest::collection::vec((-5.0f32..5.0, -5.0f32..5.0), 6..30),
            shift in (-20.0f32..20.0, -20.0f32..20.0),
            scale in 0.1f32..10.0,
        ) {
            let coords: Vec<[f32; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
            let groups: Vec<usize> = (0..coords.len()).map(|i| i % 3).collect();
            let base = grouping_score(&coords, &groups);
            let moved: Vec<[f32; 2]> = coords.iter().map(|c| [c[0] + shift.0, c[1] + shift.1]).collect();
            let scaled: Vec<[f32; 2]> = coords.iter().map(|c| [c[0] * scale, c[1] * scale]).collect();
            let t = grouping_score(&moved, &groups);
            let s = grouping_score(&scaled, &groups);
            let tol = |x: f64| 1e-4 * (1.0 + x.abs());
            prop_assert!((t.db - base.db).abs() <= tol(base.db));
            prop_assert!((t.cdist - base.cdist).abs() <= tol(base.cdist));
            prop_assert!((s.db - base.db).abs() <= tol(base.db));
            prop_assert!((s.cdist - f64::from(scale) * base.cdist).abs() <= tol(f64::from(scale) * base.cdist));
        }

        #[test]
        fn pca_ignores_constant_column(seed in 0u64..50) {
            let (rows, _) = blobs(&[[0.0, 0.0], [3.0, 1.0]], 6, 4, seed);
            let padded: Vec<Vec<f32>> = rows.iter().map(|r| { let mut r = r.clone(); r.push(7.5); r }).collect();
            let a = pca_2d(&rows).unwrap();
            let b = pca_2d(&padded).unwrap();
            for (x, y) in a.coords.iter().zip(&b.coords) {
                prop_assert!((x[0] - y[0]).abs() <= 1e-5 && (x[1] - y[1]).abs() <= 1e-5);
            }
        }
    }
}
