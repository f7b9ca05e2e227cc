//! Lloyd k-means over the columns of a weight matrix, plus the
//! zero-fixed-cluster variant used for sparsity promotion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::linalg::Matrix;

/// Column count above which the assignment step parallelizes.
const ASSIGN_PAR_THRESHOLD: usize = 4096;

/// Shared-parameter representation of one layer: `K` cluster centers in
/// `R^s` plus one center index per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, |c| c.len())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KmeansOpts {
    pub max_iter: usize,
    /// Relative inertia improvement below which Lloyd stops.
    pub tol: f64,
    /// Independent k-means++ restarts; the best inertia is kept.
    pub restarts: usize,
}

impl Default for KmeansOpts {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            restarts: 3,
        }
    }
}

#[inline]
fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Columns of `w` flattened into `n` contiguous points of length `dim`.
fn columns_as_points(w: &Matrix) -> (Vec<f64>, usize, usize) {
    let (dim, n) = (w.rows(), w.cols());
    let mut pts = vec![0.0; n * dim];
    for j in 0..n {
        for i in 0..dim {
            pts[j * dim + i] = w.at(i, j);
        }
    }
    (pts, n, dim)
}

fn nearest_center(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = dist_sq(point, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// k-means++ seeding over `points`.
fn kmeans_pp_init(points: &[f64], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let point = |j: usize| &points[j * dim..(j + 1) * dim];
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(point(rng.gen_range(0..n)).to_vec());

    let mut d2: Vec<f64> = (0..n).map(|j| dist_sq(point(j), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All points already coincide with a center; any choice works.
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (j, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = j;
                    break;
                }
            }
            chosen
        };
        centers.push(point(next).to_vec());
        for j in 0..n {
            let d = dist_sq(point(j), centers.last().unwrap());
            if d < d2[j] {
                d2[j] = d;
            }
        }
    }
    centers
}

/// One full Lloyd run from a k-means++ seed.
fn lloyd_run(
    points: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    seed: u64,
    opts: &KmeansOpts,
) -> Codebook {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |j: usize| &points[j * dim..(j + 1) * dim];
    let mut centers = kmeans_pp_init(points, n, dim, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;

    for _iter in 0..opts.max_iter {
        // Assignment step. Parallel over columns; each column independent,
        // so the result does not depend on the schedule.
        let assign_one = |j: usize| nearest_center(point(j), &centers);
        let assigned: Vec<(usize, f64)> = if n >= ASSIGN_PAR_THRESHOLD {
            (0..n).into_par_iter().map(assign_one).collect()
        } else {
            (0..n).map(assign_one).collect()
        };
        let mut inertia = 0.0;
        for (j, &(c, d)) in assigned.iter().enumerate() {
            assignments[j] = c;
            inertia += d;
        }

        // Lloyd never increases the objective; catch regressions early.
        debug_assert!(
            inertia <= prev_inertia * (1.0 + 1e-12) + 1e-12,
            "inertia increased: {prev_inertia} -> {inertia}"
        );

        // Update step: centers become cluster means, accumulated in fixed
        // column order.
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            let c = assignments[j];
            counts[c] += 1;
            for (acc, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(j)) {
                *acc += v;
            }
        }

        // Empty clusters are re-seeded to the point farthest from its
        // assigned center.
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far_j = 0;
            let mut far_d = -1.0;
            for (j, &(_, d)) in assigned.iter().enumerate() {
                if d > far_d && !taken.contains(&j) {
                    far_d = d;
                    far_j = j;
                }
            }
            taken.push(far_j);
            sums[c * dim..(c + 1) * dim].copy_from_slice(point(far_j));
            counts[c] = 1;
        }

        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for v in &mut sums[c * dim..(c + 1) * dim] {
                    *v *= inv;
                }
                centers[c] = sums[c * dim..(c + 1) * dim].to_vec();
            }
        }

        let converged = prev_inertia.is_finite()
            && (prev_inertia - inertia).abs() <= opts.tol * prev_inertia.max(f64::MIN_POSITIVE);
        prev_inertia = inertia;
        if converged && taken.is_empty() {
            break;
        }
    }

    // Final consistent assignment against the final centers.
    let mut inertia = 0.0;
    for j in 0..n {
        let (c, d) = nearest_center(point(j), &centers);
        assignments[j] = c;
        inertia += d;
    }
    Codebook {
        centers,
        assignments,
        inertia,
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Lloyd k-means over the columns of `w` with k-means++ seeding and
/// best-of-`restarts` selection.
pub fn kmeans(w: &Matrix, k: usize, seed: u64, opts: &KmeansOpts) -> Result<Codebook> {
    let (points, n, dim) = columns_as_points(w);
    kmeans_points(&points, n, dim, k, seed, opts)
}

fn kmeans_points(
    points: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    seed: u64,
    opts: &KmeansOpts,
) -> Result<Codebook> {
    ensure!(k >= 1, "kmeans needs k >= 1, got {k}");
    ensure!(k <= n, "kmeans needs k <= number of columns ({n}), got {k}");

    if k == n {
        // Singleton clusters: exact representation.
        let centers = (0..n).map(|j| points[j * dim..(j + 1) * dim].to_vec()).collect();
        return Ok(Codebook {
            centers,
            assignments: (0..n).collect(),
            inertia: 0.0,
        });
    }

    let restarts = opts.restarts.max(1);
    let mut best: Option<Codebook> = None;
    for r in 0..restarts {
        let run_seed = splitmix64(seed ^ (r as u64).wrapping_mul(0xA24BAED4963EE407));
        let cb = lloyd_run(points, n, dim, k, run_seed, opts);
        if best.as_ref().map_or(true, |b| cb.inertia < b.inertia) {
            best = Some(cb);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Sparsity-promoting k-means: the `ceil(p*N)` smallest-norm columns are
/// pinned to cluster 0 with its center fixed at the zero vector, and the
/// remaining columns get a (k-1)-clustering (centers 1..k).
pub fn kmeans_with_zero_cluster(
    w: &Matrix,
    k: usize,
    p: f64,
    seed: u64,
    opts: &KmeansOpts,
) -> Result<Codebook> {
    ensure!(
        (0.0..1.0).contains(&p),
        "sparsity fraction p must lie in [0,1), got {p}"
    );
    if p == 0.0 {
        return kmeans(w, k, seed, opts);
    }
    ensure!(k >= 2, "kmeans_with_zero_cluster needs k >= 2 when p > 0");

    let (points, n, dim) = columns_as_points(w);
    let n_zero = ((p * n as f64).ceil() as usize).min(n);
    ensure!(
        n_zero < n,
        "ceil(p*N) = {n_zero} must leave at least one column unpinned (N = {n})"
    );

    // Rank columns by l2 norm, ties broken by column index (stable sort).
    let mut order: Vec<usize> = (0..n).collect();
    let norm_sq: Vec<f64> = (0..n)
        .map(|j| points[j * dim..(j + 1) * dim].iter().map(|v| v * v).sum())
        .collect();
    order.sort_by(|&a, &b| norm_sq[a].partial_cmp(&norm_sq[b]).unwrap());
    let zeroed: Vec<usize> = order[..n_zero].to_vec();
    let kept: Vec<usize> = order[n_zero..].to_vec();

    let mut sub_points = vec![0.0; kept.len() * dim];
    for (jj, &j) in kept.iter().enumerate() {
        sub_points[jj * dim..(jj + 1) * dim].copy_from_slice(&points[j * dim..(j + 1) * dim]);
    }
    let sub = kmeans_points(&sub_points, kept.len(), dim, k - 1, seed, opts)?;

    let mut centers = Vec::with_capacity(k);
    centers.push(vec![0.0; dim]);
    centers.extend(sub.centers);

    let mut assignments = vec![0usize; n];
    for (jj, &j) in kept.iter().enumerate() {
        assignments[j] = sub.assignments[jj] + 1;
    }
    let zero_residual: f64 = zeroed.iter().map(|&j| norm_sq[j]).sum();
    Ok(Codebook {
        centers,
        assignments,
        inertia: zero_residual + sub.inertia,
    })
}

/// Replace each column of `w` by its assigned cluster center.
pub fn quantize(w: &Matrix, codebook: &Codebook) -> Result<Matrix> {
    ensure!(
        codebook.assignments.len() == w.cols(),
        "codebook covers {} columns but matrix has {}",
        codebook.assignments.len(),
        w.cols()
    );
    ensure!(
        codebook.dim() == w.rows(),
        "codebook center dimension {} does not match matrix rows {}",
        codebook.dim(),
        w.rows()
    );
    let k = codebook.k();
    for (j, &a) in codebook.assignments.iter().enumerate() {
        if a >= k {
            return Err(Error::Contract(format!(
                "assignment index {a} out of range (K = {k}) at column {j}"
            )));
        }
    }
    Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        codebook.centers[codebook.assignments[j]][i]
    }))
}

/// Within-cluster sum of squares of an explicit assignment; the
/// independent definition a codebook's `inertia` is checked against.
pub fn wcss(w: &Matrix, assignments: &[usize], k: usize) -> f64 {
    let (dim, n) = (w.rows(), w.cols());
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for j in 0..n {
        let c = assignments[j];
        counts[c] += 1;
        for i in 0..dim {
            sums[c * dim + i] += w.at(i, j);
        }
    }
    let mut total = 0.0;
    for j in 0..n {
        let c = assignments[j];
        let inv = 1.0 / counts[c] as f64;
        for i in 0..dim {
            let d = w.at(i, j) - sums[c * dim + i] * inv;
            total += d * d;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> KmeansOpts {
        KmeansOpts::default()
    }

    #[test]
    fn identical_columns_single_cluster() {
        let w = Matrix::from_fn(2, 5, |i, _| if i == 0 { 1.5 } else { -0.5 });
        let cb = kmeans(&w, 1, 0, &opts()).unwrap();
        assert_eq!(cb.centers.len(), 1);
        assert!((cb.centers[0][0] - 1.5).abs() < 1e-12);
        assert!((cb.centers[0][1] + 0.5).abs() < 1e-12);
        assert!(cb.inertia.abs() < 1e-12);
    }

    #[test]
    fn two_obvious_clusters() {
        // Columns {(0,0),(0,1),(10,10),(10,11)} -> centers (0,0.5),(10,10.5), inertia 1.
        let w = Matrix::from_rows(&[
            vec![0.0, 0.0, 10.0, 10.0],
            vec![0.0, 1.0, 10.0, 11.0],
        ])
        .unwrap();
        let cb = kmeans(&w, 2, 42, &opts()).unwrap();
        assert!((cb.inertia - 1.0).abs() < 1e-9, "inertia = {}", cb.inertia);
        let mut centers = cb.centers.clone();
        centers.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!((centers[0][0] - 0.0).abs() < 1e-9 && (centers[0][1] - 0.5).abs() < 1e-9);
        assert!((centers[1][0] - 10.0).abs() < 1e-9 && (centers[1][1] - 10.5).abs() < 1e-9);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let w = Matrix::from_fn(2, 6, |i, j| (i * 7 + j) as f64);
        let cb = kmeans(&w, 6, 3, &opts()).unwrap();
        assert_eq!(cb.inertia, 0.0);
        let q = quantize(&w, &cb).unwrap();
        assert_eq!(q, w);
    }

    #[test]
    fn contract_violations() {
        let w = Matrix::zeros(2, 4);
        assert!(matches!(kmeans(&w, 0, 0, &opts()), Err(Error::Contract(_))));
        assert!(matches!(kmeans(&w, 5, 0, &opts()), Err(Error::Contract(_))));
        assert!(matches!(
            kmeans_with_zero_cluster(&w, 2, 1.0, 0, &opts()),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            kmeans_with_zero_cluster(&w, 1, 0.5, 0, &opts()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_cluster_p_zero_matches_plain() {
        let w = Matrix::from_fn(2, 8, |i, j| ((i + 1) * (j + 3)) as f64 * 0.25);
        let a = kmeans(&w, 3, 9, &opts()).unwrap();
        let b = kmeans_with_zero_cluster(&w, 3, 0.0, 9, &opts()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_cluster_hand_example() {
        // Columns {(0,0.1),(0,0),(5,5),(6,6)}, p=0.5, k=2.
        let w = Matrix::from_rows(&[
            vec![0.0, 0.0, 5.0, 6.0],
            vec![0.1, 0.0, 5.0, 6.0],
        ])
        .unwrap();
        let cb = kmeans_with_zero_cluster(&w, 2, 0.5, 7, &opts()).unwrap();
        assert_eq!(cb.centers[0], vec![0.0, 0.0]);
        assert_eq!(cb.assignments[0], 0);
        assert_eq!(cb.assignments[1], 0);
        assert_eq!(cb.assignments[2], 1);
        assert_eq!(cb.assignments[3], 1);
        assert!((cb.centers[1][0] - 5.5).abs() < 1e-9);
        assert!((cb.centers[1][1] - 5.5).abs() < 1e-9);
        let expected_inertia = 0.1f64 * 0.1 + (0.5f64 * 0.5) * 4.0;
        assert!((cb.inertia - expected_inertia).abs() < 1e-9);
    }

    #[test]
    fn zero_cluster_all_zero_columns() {
        let w = Matrix::zeros(3, 10);
        let cb = kmeans_with_zero_cluster(&w, 2, 0.9, 1, &opts()).unwrap();
        assert_eq!(cb.inertia, 0.0);
        assert_eq!(cb.centers[0], vec![0.0; 3]);
    }

    #[test]
    fn quantize_identities() {
        let w = Matrix::from_fn(2, 6, |i, j| (i as f64) - (j as f64) * 0.5);
        // k = 1: every column becomes the global mean column.
        let cb = kmeans(&w, 1, 0, &opts()).unwrap();
        let q = quantize(&w, &cb).unwrap();
        for i in 0..2 {
            let mean: f64 = (0..6).map(|j| w.at(i, j)).sum::<f64>() / 6.0;
            for j in 0..6 {
                assert!((q.at(i, j) - mean).abs() < 1e-12);
            }
        }
        // Reconstruction error equals inertia.
        let cb = kmeans(&w, 3, 5, &opts()).unwrap();
        let q = quantize(&w, &cb).unwrap();
        let err = w.sub(&q).unwrap().frobenius_sq();
        assert!((err - cb.inertia).abs() < 1e-8 * cb.inertia.max(1.0));
    }

    #[test]
    fn quantize_rejects_out_of_range_index() {
        let w = Matrix::zeros(2, 3);
        let cb = Codebook {
            centers: vec![vec![0.0, 0.0]],
            assignments: vec![0, 1, 0],
            inertia: 0.0,
        };
        assert!(matches!(quantize(&w, &cb), Err(Error::Contract(_))));
    }

    #[test]
    fn inertia_matches_wcss_definition() {
        let w = Matrix::from_fn(2, 12, |i, j| ((i * 31 + j * 17) % 13) as f64 * 0.3);
        let cb = kmeans(&w, 4, 11, &opts()).unwrap();
        let independent = wcss(&w, &cb.assignments, cb.k());
        assert!((cb.inertia - independent).abs() < 1e-8 * independent.max(1.0));
    }
}
