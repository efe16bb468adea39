//! Easy-to-hard training over task groups of increasing noise, and the pooled
//! single-run alternative it is compared with.

use crate::error::{invalid, Error, Result};
use crate::losses::FactorPair;
use crate::numerics::{solve, Matrix, SeededRng};
use crate::solvers::{
    init_factors, phase2_refine, theoretical_hyperparams, tpgd_from, HyperOverrides, HyperParams,
    SolveOptions, SolveResult, SpectrumStats,
};
use crate::synthdata::{GroundTruth, MultiTaskDataset};

/// One group of tasks sharing a noise level.
#[derive(Debug, Clone)]
pub struct CurriculumLevel {
    pub dataset: MultiTaskDataset,
    pub noise_sigma: f64,
    /// Leading samples per task used for the least-squares warm start.
    pub n_warm: usize,
    /// Phase-II iterations for this level.
    pub k_iters: usize,
    pub eta2: f64,
    /// Planted model of this level, used only for metrics.
    pub truth: GroundTruth,
}

impl CurriculumLevel {
    /// Level with `N_j = min(N/2, max(4k, 50))`, `K_j = K₁/2` and `η₂` from the
    /// level's own spectrum.
    pub fn with_defaults(
        dataset: MultiTaskDataset,
        truth: GroundTruth,
        hp: &HyperParams,
        overrides: &HyperOverrides,
    ) -> Result<Self> {
        let n = dataset.n_per_task;
        let n_warm = (n / 2).min((4 * truth.k).max(50));
        let own = theoretical_hyperparams(&SpectrumStats::from_truth(&truth), hp.failure_prob, overrides)?;
        Ok(Self {
            noise_sigma: dataset.noise_sigma,
            dataset,
            n_warm,
            k_iters: hp.k1 / 2,
            eta2: own.eta2,
            truth,
        })
    }

    pub fn t_count(&self) -> usize {
        self.dataset.t_count()
    }

    fn validate(&self) -> Result<()> {
        if self.n_warm > self.dataset.n_per_task {
            return invalid(format!(
                "warm-start budget {} exceeds N={}",
                self.n_warm, self.dataset.n_per_task
            ));
        }
        if self.truth.t_count != self.t_count() || self.truth.d != self.dataset.dim() {
            return invalid("level truth does not match its dataset");
        }
        Ok(())
    }

    /// Prefix of `n_warm` samples per task.
    pub fn warm_samples(&self) -> Result<MultiTaskDataset> {
        self.dataset.sample_range(0, self.n_warm)
    }

    /// The remaining `N − n_warm` samples per task.
    pub fn refine_samples(&self) -> Result<MultiTaskDataset> {
        self.dataset.sample_range(self.n_warm, self.dataset.n_per_task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurriculumOptions {
    /// Keep `B̂` fixed during the Phase-II refinement of levels after the first.
    pub freeze_b: bool,
}

impl Default for CurriculumOptions {
    fn default() -> Self {
        Self { freeze_b: true }
    }
}

#[derive(Debug, Clone)]
pub struct CurriculumResult {
    /// Level 1: the full two-phase run; later levels: the refinement run.
    pub levels: Vec<SolveResult>,
    /// Representation learned on level 1.
    pub b_hat: Matrix,
    /// Final `(1/T_j)Σ_t‖v̂_t − v*_t‖²` per level.
    pub level_errors: Vec<f64>,
    pub aggregate_error: f64,
}

/// `(1/ΣT_j)·Σ_j T_j·err_j`
pub fn aggregate_error(level_errors: &[f64], t_counts: &[usize]) -> f64 {
    let total: usize = t_counts.iter().sum();
    level_errors
        .iter()
        .zip(t_counts)
        .map(|(e, &t)| e * t as f64)
        .sum::<f64>()
        / total as f64
}

/// Per-task least squares `argmin_w ‖ỹ_t − X̃_tᵀB̂w‖²` over all samples of `data`.
pub fn least_squares_weights(b_hat: &Matrix, data: &MultiTaskDataset) -> Result<Matrix> {
    if b_hat.rows() != data.dim() {
        return invalid("representation does not match the data dimension");
    }
    let k = b_hat.cols();
    let mut w = Matrix::zeros(k, data.t_count());
    for (t, task) in data.tasks.iter().enumerate() {
        let z = b_hat.t_matmul(&task.x);
        let gram = z.matmul_t(&z);
        let rhs = Matrix::column_vector(&z.matvec(&task.y));
        let sol = solve(&gram, &rhs).map_err(|e| match e {
            Error::Degenerate(_) => Error::DegenerateTask { task: t },
            other => other,
        })?;
        w.set_column(t, sol.as_slice());
    }
    Ok(w)
}

/// Warm-start weights for a level from its first `n_warm` samples.
pub fn ls_warm_start(b_hat: &Matrix, level: &CurriculumLevel) -> Result<Matrix> {
    if level.n_warm < b_hat.cols() {
        return invalid(format!(
            "warm start needs at least k={} samples, budget is {}",
            b_hat.cols(),
            level.n_warm
        ));
    }
    least_squares_weights(b_hat, &level.warm_samples()?)
}

fn check_levels(levels: &[CurriculumLevel]) -> Result<()> {
    if levels.is_empty() {
        return invalid("need at least one level");
    }
    for lvl in levels {
        lvl.validate()?;
    }
    if levels.windows(2).any(|p| p[1].noise_sigma < p[0].noise_sigma) {
        return invalid("levels must be ordered by non-decreasing noise");
    }
    let d = levels[0].dataset.dim();
    let n = levels[0].dataset.n_per_task;
    if levels.iter().any(|l| l.dataset.dim() != d || l.dataset.n_per_task != n) {
        return invalid("all levels must share d and N");
    }
    Ok(())
}

/// Level 1 by two-phase GD; each later level by a least-squares warm start on
/// its prefix followed by Phase II on its suffix, starting from level 1's `B̂`.
pub fn curriculum_run(
    levels: &[CurriculumLevel],
    hp: &HyperParams,
    opts: CurriculumOptions,
    rng: &mut SeededRng,
) -> Result<CurriculumResult> {
    check_levels(levels)?;
    let first = &levels[0];
    let init = init_factors(first.dataset.dim(), first.truth.k, first.t_count(), hp.alpha_tilde, rng)?;
    let base = tpgd_from(&first.dataset, &first.truth, hp, &init, SolveOptions::default())?;
    let b_hat = base.final_factors.b.clone();
    let mut level_errors = vec![base.final_error()];
    let mut runs = vec![base];
    for (j, level) in levels.iter().enumerate().skip(1) {
        let w0 = ls_warm_start(&b_hat, level)?;
        let start = FactorPair::new(b_hat.clone(), w0)?;
        let refine = level.refine_samples().map_err(|e| {
            Error::InvalidInput(format!("level {} has no samples left for refinement: {e}", j + 1))
        })?;
        let run = phase2_refine(
            &refine,
            &level.truth,
            level.eta2,
            level.k_iters,
            &start,
            opts.freeze_b,
            SolveOptions::default(),
        )?;
        level_errors.push(run.final_error());
        runs.push(run);
    }
    let t_counts: Vec<usize> = levels.iter().map(|l| l.t_count()).collect();
    Ok(CurriculumResult {
        aggregate_error: aggregate_error(&level_errors, &t_counts),
        levels: runs,
        b_hat,
        level_errors,
    })
}

#[derive(Debug, Clone)]
pub struct PooledResult {
    pub run: SolveResult,
    pub truth: GroundTruth,
    pub hyperparams: HyperParams,
    /// Final error restricted to each level's tasks.
    pub level_errors: Vec<f64>,
    pub aggregate_error: f64,
}

/// Ground truth of all levels side by side: `B*·[W*_1 … W*_D]`.
pub fn pooled_truth(levels: &[CurriculumLevel]) -> Result<GroundTruth> {
    check_levels(levels)?;
    let mut w = levels[0].truth.w_star.clone();
    for lvl in &levels[1..] {
        w = w.hstack(&lvl.truth.w_star);
    }
    let noise = levels.iter().fold(0.0_f64, |m, l| m.max(l.noise_sigma));
    GroundTruth::from_factors(levels[0].truth.b_star.clone(), w, noise)
}

/// All levels' tasks in one dataset, trained by a single two-phase run with
/// hyper-parameters from the pooled spectrum.
pub fn pooled_run(
    levels: &[CurriculumLevel],
    failure_prob: f64,
    overrides: &HyperOverrides,
    rng: &mut SeededRng,
) -> Result<PooledResult> {
    let truth = pooled_truth(levels)?;
    let mut data = levels[0].dataset.clone();
    for lvl in &levels[1..] {
        data = data.concat(&lvl.dataset)?;
    }
    let hp = theoretical_hyperparams(&SpectrumStats::from_truth(&truth), failure_prob, overrides)?;
    let init = init_factors(data.dim(), truth.k, data.t_count(), hp.alpha_tilde, rng)?;
    let run = tpgd_from(&data, &truth, &hp, &init, SolveOptions::default())?;
    let level_errors = per_level_errors(&run.final_factors, levels)?;
    Ok(PooledResult {
        aggregate_error: run.final_error(),
        level_errors,
        run,
        truth,
        hyperparams: hp,
    })
}

/// Splits a pooled fit into per-level errors against each level's truth.
pub fn per_level_errors(fp: &FactorPair, levels: &[CurriculumLevel]) -> Result<Vec<f64>> {
    let mut start = 0;
    let mut out = Vec::with_capacity(levels.len());
    for lvl in levels {
        let end = start + lvl.t_count();
        let part = FactorPair::new(fp.b.clone(), fp.w.columns(start, end))?;
        out.push(crate::solvers::estimation_error(&part, &lvl.truth)?);
        start = end;
    }
    if start != fp.w.cols() {
        return invalid("levels do not cover the pooled task count");
    }
    Ok(out)
}
