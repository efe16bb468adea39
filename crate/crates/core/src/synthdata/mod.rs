//! Planted low-rank ground truths, multi-task dataset sampling, target-task
//! streams and an empirical RIP probe.

mod container;

pub use container::{read_dataset, write_dataset, DatasetFile, CONTAINER_MAGIC, CONTAINER_VERSION};

use crate::error::{invalid, Result};
use crate::numerics::{
    dot, gaussian_matrix, inverse, norm2, psd_sqrt, qr_orthonormal, svd, Matrix, SeededRng,
};

/// Planted model `B*·W*` together with its balanced SVD factors.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub d: usize,
    pub k: usize,
    pub t_count: usize,
    /// d × k
    pub b_star: Matrix,
    /// k × T
    pub w_star: Matrix,
    /// d × k, leading left singular vectors of `B*·W*`
    pub u_star: Matrix,
    /// T × k, leading right singular vectors of `B*·W*`
    pub v_star: Matrix,
    /// top-k singular values, descending
    pub sigma_star: Vec<f64>,
    /// `U*·Σ^{1/2}`
    pub f_target: Matrix,
    /// `V*·Σ^{1/2}`
    pub g_target: Matrix,
    pub noise_sigma: f64,
}

impl GroundTruth {
    /// `B*·W*`, whose columns are the task regression vectors `v*_t`.
    pub fn product(&self) -> Matrix {
        self.b_star.matmul(&self.w_star)
    }

    pub fn sigma1(&self) -> f64 {
        self.sigma_star[0]
    }

    pub fn sigmak(&self) -> f64 {
        self.sigma_star[self.k - 1]
    }

    pub fn kappa(&self) -> f64 {
        self.sigma1() / self.sigmak()
    }

    /// Ground truth from arbitrary factors; the balanced targets come from the
    /// SVD of the product.
    pub fn from_factors(b_star: Matrix, w_star: Matrix, noise_sigma: f64) -> Result<Self> {
        let (d, k) = b_star.shape();
        if w_star.rows() != k {
            return invalid(format!(
                "factor shapes disagree: B* is {:?}, W* is {:?}",
                b_star.shape(),
                w_star.shape()
            ));
        }
        let t_count = w_star.cols();
        if k == 0 || k > t_count.min(d) {
            return invalid(format!("need 1 <= k <= min(d, T), got k={k}, d={d}, T={t_count}"));
        }
        check_noise(noise_sigma)?;
        let dec = svd(&b_star.matmul(&w_star))?;
        let sigma_star: Vec<f64> = dec.s[..k].to_vec();
        if sigma_star[k - 1] <= 0.0 {
            return invalid("B*·W* has rank below k");
        }
        let u_star = dec.u.columns(0, k);
        let v_star = dec.v.columns(0, k);
        let (f_target, g_target) = balanced_targets(&u_star, &v_star, &sigma_star);
        Ok(Self {
            d,
            k,
            t_count,
            b_star,
            w_star,
            u_star,
            v_star,
            sigma_star,
            f_target,
            g_target,
            noise_sigma,
        })
    }

    /// Re-parameterizes the factors as `B* ← F·P`, `W* ← P⁻¹·Σ^{1/2}·V*ᵀ`,
    /// leaving `B*·W*` (and hence every estimation error) unchanged.
    pub fn with_mixing(&self, p: &Matrix) -> Result<Self> {
        if p.shape() != (self.k, self.k) {
            return invalid(format!("mixing matrix must be {0}x{0}", self.k));
        }
        let p_inv = inverse(p)?;
        let mut mixed = self.clone();
        mixed.b_star = self.f_target.matmul(p);
        mixed.w_star = p_inv.matmul_t(&self.g_target);
        Ok(mixed)
    }

    /// Tasks `start..end` as a ground truth of their own, sharing `B*`.
    pub fn task_slice(&self, start: usize, end: usize) -> Result<Self> {
        Self::from_factors(
            self.b_star.clone(),
            self.w_star.columns(start, end),
            self.noise_sigma,
        )
    }
}

fn balanced_targets(u: &Matrix, v: &Matrix, sigma: &[f64]) -> (Matrix, Matrix) {
    let roots: Vec<f64> = sigma.iter().map(|s| s.sqrt()).collect();
    let f = Matrix::from_fn(u.rows(), u.cols(), |i, j| u[(i, j)] * roots[j]);
    let g = Matrix::from_fn(v.rows(), v.cols(), |i, j| v[(i, j)] * roots[j]);
    (f, g)
}

fn check_noise(noise_sigma: f64) -> Result<()> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return invalid(format!("noise sigma must be finite and >= 0, got {noise_sigma}"));
    }
    Ok(())
}

fn check_spectrum(k: usize, sigma_star: &[f64]) -> Result<()> {
    if sigma_star.len() != k {
        return invalid(format!("expected {k} singular values, got {}", sigma_star.len()));
    }
    if sigma_star.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return invalid("singular values must be positive and finite");
    }
    if sigma_star.windows(2).any(|w| w[0] < w[1]) {
        return invalid("singular values must be non-increasing");
    }
    Ok(())
}

fn check_dims(d: usize, k: usize, t_count: usize) -> Result<()> {
    if k == 0 || k > t_count || k > d {
        return invalid(format!("need 1 <= k <= min(d, T), got d={d}, k={k}, T={t_count}"));
    }
    if t_count > d {
        log::warn!("T={t_count} exceeds d={d}; outside the high-dimensional regime");
    }
    Ok(())
}

/// Spectrum linearly spaced from `kappa·sigma_k` down to `sigma_k`.
pub fn linear_spectrum(k: usize, kappa: f64, sigma_k: f64) -> Vec<f64> {
    if k == 1 {
        return vec![sigma_k];
    }
    (0..k)
        .map(|i| sigma_k * (kappa - (kappa - 1.0) * i as f64 / (k - 1) as f64))
        .collect()
}

/// Planted ground truth in balanced form: `B* = U*·Σ^{1/2}`, `W* = Σ^{1/2}·V*ᵀ`
/// with `U*`, `V*` orthonormalized Gaussian matrices.
pub fn make_ground_truth(
    d: usize,
    k: usize,
    t_count: usize,
    sigma_star: &[f64],
    noise_sigma: f64,
    rng: &mut SeededRng,
) -> Result<GroundTruth> {
    check_dims(d, k, t_count)?;
    check_spectrum(k, sigma_star)?;
    check_noise(noise_sigma)?;
    let u_star = qr_orthonormal(&gaussian_matrix(d, k, 1.0, rng)?)?;
    let v_star = qr_orthonormal(&gaussian_matrix(t_count, k, 1.0, rng)?)?;
    Ok(balanced_truth(u_star, v_star, sigma_star, noise_sigma))
}

fn balanced_truth(u_star: Matrix, v_star: Matrix, sigma_star: &[f64], noise_sigma: f64) -> GroundTruth {
    let (f, g) = balanced_targets(&u_star, &v_star, sigma_star);
    GroundTruth {
        d: u_star.rows(),
        k: u_star.cols(),
        t_count: v_star.rows(),
        b_star: f.clone(),
        w_star: g.transpose(),
        u_star,
        v_star,
        sigma_star: sigma_star.to_vec(),
        f_target: f,
        g_target: g,
        noise_sigma,
    }
}

/// One ground truth per curriculum level. All levels share `U*` and `Σ*`
/// (hence the same `B*`); each level draws its own `V*_j`.
pub fn make_level_ground_truths(
    d: usize,
    k: usize,
    t_counts: &[usize],
    sigma_star: &[f64],
    noise_sigmas: &[f64],
    rng: &mut SeededRng,
) -> Result<Vec<GroundTruth>> {
    if t_counts.len() != noise_sigmas.len() || t_counts.is_empty() {
        return invalid("need one noise level per task group");
    }
    check_spectrum(k, sigma_star)?;
    for (&t, &s) in t_counts.iter().zip(noise_sigmas) {
        check_dims(d, k, t)?;
        check_noise(s)?;
    }
    let u_star = qr_orthonormal(&gaussian_matrix(d, k, 1.0, rng)?)?;
    let mut out = Vec::with_capacity(t_counts.len());
    for (&t, &s) in t_counts.iter().zip(noise_sigmas) {
        let v_star = qr_orthonormal(&gaussian_matrix(t, k, 1.0, rng)?)?;
        out.push(balanced_truth(u_star.clone(), v_star, sigma_star, s));
    }
    Ok(out)
}

/// Per-task covariates (d × N, samples as columns) and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub x: Matrix,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset {
    pub tasks: Vec<TaskData>,
    pub n_per_task: usize,
    pub noise_sigma: f64,
}

impl MultiTaskDataset {
    pub fn new(tasks: Vec<TaskData>, noise_sigma: f64) -> Result<Self> {
        let Some(first) = tasks.first() else {
            return invalid("dataset needs at least one task");
        };
        let (d, n) = first.x.shape();
        for (t, task) in tasks.iter().enumerate() {
            if task.x.shape() != (d, n) || task.y.len() != n {
                return invalid(format!("task {t} does not match shape d={d}, N={n}"));
            }
        }
        Ok(Self {
            tasks,
            n_per_task: n,
            noise_sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.tasks[0].x.rows()
    }

    pub fn t_count(&self) -> usize {
        self.tasks.len()
    }

    /// Samples `start..end` of every task.
    pub fn sample_range(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_per_task {
            return invalid(format!(
                "sample range {start}..{end} invalid for N={}",
                self.n_per_task
            ));
        }
        let tasks = self
            .tasks
            .iter()
            .map(|t| TaskData {
                x: t.x.columns(start, end),
                y: t.y[start..end].to_vec(),
            })
            .collect();
        Self::new(tasks, self.noise_sigma)
    }

    /// All tasks of `self` followed by all tasks of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut tasks = self.tasks.clone();
        tasks.extend(other.tasks.iter().cloned());
        Self::new(tasks, self.noise_sigma.max(other.noise_sigma))
    }
}

/// Draws `n_per_task` samples per task: covariates i.i.d. `N(0, 1)`, responses
/// `y_t = X_tᵀ·B*·w*_t + z_t` with `z_t ~ N(0, σ²)`.
pub fn sample_tasks(gt: &GroundTruth, n_per_task: usize, rng: &mut SeededRng) -> Result<MultiTaskDataset> {
    if n_per_task == 0 {
        return invalid("n_per_task must be at least 1");
    }
    let v = gt.product();
    let tasks = (0..gt.t_count)
        .map(|t| {
            let x = Matrix::from_fn(gt.d, n_per_task, |_, _| rng.standard_normal());
            let mut y = x.t_matvec(&v.column(t));
            if gt.noise_sigma > 0.0 {
                for yi in y.iter_mut() {
                    *yi += rng.normal(gt.noise_sigma);
                }
            }
            TaskData { x, y }
        })
        .collect();
    MultiTaskDataset::new(tasks, gt.noise_sigma)
}

/// Lower bound on the RIP constant of every `X_t/√N`: the largest
/// `|‖X_tᵀv‖²/N − 1|` over random unit probes `v` and tasks `t`.
pub fn estimate_rip_delta(data: &MultiTaskDataset, probes: usize, rng: &mut SeededRng) -> Result<f64> {
    Ok(rip_deviation_trace(data, probes, rng)?
        .last()
        .copied()
        .unwrap_or(0.0))
}

/// Running maximum of the probe deviations, one entry per probe.
pub fn rip_deviation_trace(data: &MultiTaskDataset, probes: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
    if probes == 0 {
        return invalid("need at least one probe");
    }
    let n = data.n_per_task as f64;
    let mut best = 0.0_f64;
    let mut trace = Vec::with_capacity(probes);
    for _ in 0..probes {
        let v = rng.unit_vector(data.dim());
        for task in &data.tasks {
            let proj = task.x.t_matvec(&v);
            let dev = (dot(&proj, &proj) / n - 1.0).abs();
            best = best.max(dev);
        }
        trace.push(best);
    }
    Ok(trace)
}

/// Online sampler for the target task: `x ~ N(0, H)`, `y = ⟨x, B*·w⟩ + N(0, σ²)`.
#[derive(Debug, Clone)]
pub struct TargetStream {
    regressor: Vec<f64>,
    h_sqrt: Matrix,
    noise_sigma: f64,
    remaining: usize,
    rng: SeededRng,
}

impl Iterator for TargetStream {
    type Item = (Vec<f64>, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let d = self.regressor.len();
        let g = self.rng.normal_vec(d, 1.0);
        let x = self.h_sqrt.matvec(&g);
        let mut y = dot(&x, &self.regressor);
        if self.noise_sigma > 0.0 {
            y += self.rng.normal(self.noise_sigma);
        }
        Some((x, y))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

pub fn sample_target_stream(
    gt: &GroundTruth,
    w_target: &[f64],
    h_cov: &Matrix,
    count: usize,
    rng: SeededRng,
) -> Result<TargetStream> {
    if w_target.len() != gt.k {
        return invalid(format!("target weight must have length k={}", gt.k));
    }
    if h_cov.shape() != (gt.d, gt.d) {
        return invalid(format!("covariance must be {0}x{0}", gt.d));
    }
    let h_sqrt = psd_sqrt(h_cov)?;
    Ok(TargetStream {
        regressor: gt.b_star.matvec(w_target),
        h_sqrt,
        noise_sigma: gt.noise_sigma,
        remaining: count,
        rng,
    })
}

/// Draws a target-task weight with `‖B*·w‖ = 1`.
pub fn random_target_weight(gt: &GroundTruth, rng: &mut SeededRng) -> Vec<f64> {
    let w = rng.normal_vec(gt.k, 1.0);
    let scale = norm2(&gt.b_star.matvec(&w));
    w.into_iter().map(|x| x / scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(d: usize, k: usize, t: usize, sigma: &[f64], noise: f64, seed: u64) -> GroundTruth {
        make_ground_truth(d, k, t, sigma, noise, &mut SeededRng::new(seed, 0)).unwrap()
    }

    #[test]
    fn spectrum_is_planted() {
        let gt = truth(6, 2, 4, &[3.0, 1.0], 0.0, 1);
        let s = svd(&gt.product()).unwrap().s;
        assert!((s[0] - 3.0).abs() < 1e-8 * 3.0 && (s[1] - 1.0).abs() < 1e-8);
        assert!(s[2..].iter().all(|v| *v < 1e-10));
    }

    #[test]
    fn balanced_factorization() {
        let gt = truth(6, 2, 4, &[3.0, 1.0], 0.0, 2);
        let diag = Matrix::diag(&gt.sigma_star);
        assert!(gt.b_star.t_matmul(&gt.b_star).max_abs_diff(&diag) < 1e-12);
        assert!(gt.w_star.matmul_t(&gt.w_star).max_abs_diff(&diag) < 1e-12);
        assert!(gt.f_target.t_matmul(&gt.f_target).max_abs_diff(&diag) < 1e-12);
        assert!(gt.g_target.t_matmul(&gt.g_target).max_abs_diff(&diag) < 1e-12);
        let fg = gt.f_target.matmul_t(&gt.g_target);
        assert!(fg.sub(&gt.product()).frobenius_norm() < 1e-12);
        let stacked = gt.b_star.vstack(&gt.w_star.transpose());
        let target = gt.f_target.vstack(&gt.g_target);
        assert!(crate::numerics::procrustes_distance(&stacked, &target).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_bad_spectra_and_dims() {
        let mut rng = SeededRng::new(0, 0);
        assert!(make_ground_truth(6, 2, 4, &[1.0, 3.0], 0.0, &mut rng).is_err());
        assert!(make_ground_truth(6, 2, 4, &[1.0, 0.0], 0.0, &mut rng).is_err());
        assert!(make_ground_truth(6, 2, 4, &[1.0], 0.0, &mut rng).is_err());
        assert!(make_ground_truth(6, 5, 4, &[1.0; 5], 0.0, &mut rng).is_err());
        // T > d is allowed with a warning
        assert!(make_ground_truth(3, 1, 5, &[1.0], 0.0, &mut rng).is_ok());
    }

    #[test]
    fn from_factors_matches_balanced_construction() {
        let gt = truth(8, 3, 5, &[4.0, 2.0, 1.0], 0.1, 3);
        let rebuilt = GroundTruth::from_factors(gt.b_star.clone(), gt.w_star.clone(), 0.1).unwrap();
        for (a, b) in rebuilt.sigma_star.iter().zip(&gt.sigma_star) {
            assert!((a - b).abs() < 1e-10);
        }
        let fg = rebuilt.f_target.matmul_t(&rebuilt.g_target);
        assert!(fg.sub(&gt.product()).frobenius_norm() < 1e-10);
    }

    #[test]
    fn mixing_preserves_product() {
        let gt = truth(6, 2, 4, &[2.0, 1.0], 0.0, 4);
        let p = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.5, 1.5]]).unwrap();
        let mixed = gt.with_mixing(&p).unwrap();
        assert!(mixed.product().sub(&gt.product()).frobenius_norm() < 1e-12);
        assert!(mixed.b_star.sub(&gt.b_star).frobenius_norm() > 0.1);
    }

    #[test]
    fn noiseless_samples_are_exact() {
        let gt = truth(5, 2, 3, &[2.0, 1.0], 0.0, 5);
        let data = sample_tasks(&gt, 20, &mut SeededRng::new(5, 1)).unwrap();
        let v = gt.product();
        for (t, task) in data.tasks.iter().enumerate() {
            assert_eq!(task.y, task.x.t_matvec(&v.column(t)));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let gt = truth(5, 2, 3, &[2.0, 1.0], 0.3, 6);
        let a = sample_tasks(&gt, 10, &mut SeededRng::new(9, 1)).unwrap();
        let b = sample_tasks(&gt, 10, &mut SeededRng::new(9, 1)).unwrap();
        assert_eq!(a, b);
        assert!(sample_tasks(&gt, 0, &mut SeededRng::new(9, 1)).is_err());
    }

    #[test]
    fn rip_of_isometry_is_zero() {
        // X = √N·I (d = N) gives X·Xᵀ/N = I exactly.
        let n = 4;
        let x = Matrix::identity(n).scale((n as f64).sqrt());
        let data = MultiTaskDataset::new(vec![TaskData { x, y: vec![0.0; n] }], 0.0).unwrap();
        let delta = estimate_rip_delta(&data, 50, &mut SeededRng::new(1, 0)).unwrap();
        assert!(delta < 1e-10, "{delta}");
    }

    #[test]
    fn rip_of_sign_vector_is_zero() {
        let x = Matrix::from_vec(1, 6, vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let data = MultiTaskDataset::new(vec![TaskData { x, y: vec![0.0; 6] }], 0.0).unwrap();
        let delta = estimate_rip_delta(&data, 10, &mut SeededRng::new(1, 0)).unwrap();
        assert!(delta < 1e-14);
    }

    #[test]
    fn rip_trace_is_monotone() {
        let gt = truth(10, 2, 3, &[1.0, 1.0], 0.0, 7);
        let data = sample_tasks(&gt, 40, &mut SeededRng::new(7, 1)).unwrap();
        let trace = rip_deviation_trace(&data, 100, &mut SeededRng::new(7, 2)).unwrap();
        assert!(trace.windows(2).all(|w| w[0] <= w[1]));
        assert!(rip_deviation_trace(&data, 0, &mut SeededRng::new(7, 2)).is_err());
    }

    #[test]
    fn rip_small_sample_range_and_trend() {
        let mut small_mean = 0.0;
        let mut large_mean = 0.0;
        for seed in 0..10 {
            let gt = truth(20, 2, 2, &[1.0, 1.0], 0.0, seed);
            let small = sample_tasks(&gt, 100, &mut SeededRng::new(seed, 1)).unwrap();
            let large = sample_tasks(&gt, 400, &mut SeededRng::new(seed, 1)).unwrap();
            let ds = estimate_rip_delta(&small, 500, &mut SeededRng::new(seed, 2)).unwrap();
            let dl = estimate_rip_delta(&large, 500, &mut SeededRng::new(seed, 2)).unwrap();
            assert!(ds > 0.0 && ds < 1.5);
            small_mean += ds;
            large_mean += dl;
        }
        assert!(large_mean < small_mean);
    }

    #[test]
    fn target_stream_identity_noiseless() {
        let gt = truth(4, 2, 3, &[2.0, 1.0], 0.0, 8);
        let w = vec![0.5, -1.0];
        let reg = gt.b_star.matvec(&w);
        let stream = sample_target_stream(&gt, &w, &Matrix::identity(4), 20, SeededRng::new(8, 3)).unwrap();
        let samples: Vec<_> = stream.collect();
        assert_eq!(samples.len(), 20);
        for (x, y) in samples {
            assert!((y - dot(&x, &reg)).abs() < 1e-12);
        }
    }

    #[test]
    fn target_stream_zero_covariance() {
        let gt = truth(3, 1, 2, &[1.0], 0.7, 9);
        let stream = sample_target_stream(&gt, &[1.0], &Matrix::zeros(3, 3), 5, SeededRng::new(1, 1)).unwrap();
        for (x, _) in stream {
            assert!(x.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn target_stream_rejects_indefinite_covariance() {
        let gt = truth(2, 1, 2, &[1.0], 0.0, 10);
        let h = Matrix::diag(&[1.0, -0.5]);
        assert!(sample_target_stream(&gt, &[1.0], &h, 5, SeededRng::new(1, 1)).is_err());
    }

    #[test]
    fn target_stream_covariance() {
        let d = 3;
        let gt = truth(d, 1, 2, &[1.0], 0.0, 11);
        let h = Matrix::diag(&[4.0, 1.0, 1.0]);
        let draws = 100_000;
        let stream = sample_target_stream(&gt, &[1.0], &h, draws, SeededRng::new(11, 5)).unwrap();
        let mut cov = Matrix::zeros(d, d);
        for (x, _) in stream {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += x[i] * x[j] / draws as f64;
                }
            }
        }
        for i in 0..d {
            assert!((cov[(i, i)] - h[(i, i)]).abs() < 0.1 * h[(i, i)]);
            for j in 0..d {
                if i != j {
                    assert!(cov[(i, j)].abs() < 0.1);
                }
            }
        }
    }

    #[test]
    fn level_truths_share_representation() {
        let gts = make_level_ground_truths(8, 2, &[4, 5], &[2.0, 1.0], &[0.1, 1.0], &mut SeededRng::new(1, 0)).unwrap();
        assert_eq!(gts[0].b_star, gts[1].b_star);
        assert_eq!(gts[1].t_count, 5);
        assert_eq!(gts[1].noise_sigma, 1.0);
        let s = svd(&gts[1].product()).unwrap().s;
        assert!((s[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn dataset_slicing() {
        let gt = truth(4, 1, 2, &[1.0], 0.0, 12);
        let data = sample_tasks(&gt, 10, &mut SeededRng::new(12, 1)).unwrap();
        let head = data.sample_range(0, 3).unwrap();
        let tail = data.sample_range(3, 10).unwrap();
        assert_eq!(head.n_per_task, 3);
        assert_eq!(tail.tasks[1].y, data.tasks[1].y[3..].to_vec());
        assert!(data.sample_range(5, 5).is_err());
        assert_eq!(data.concat(&head.concat(&head).unwrap()).is_err(), true);
        assert_eq!(data.concat(&data).unwrap().t_count(), 4);
    }
}
