//! Two-phase gradient descent and the comparison baselines.

use std::time::Instant;

use crate::error::{invalid, Error, Result};
use crate::losses::{penalty_grad, FactorPair, GradPair, Objective, TaskMoments};
use crate::numerics::{gaussian_matrix, procrustes_distance, Matrix, SeededRng};
use crate::synthdata::{GroundTruth, MultiTaskDataset};

/// Default leading constant in `K₁ = c_K/(η₁σ_k)`.
pub const DEFAULT_C_K: f64 = 60.0;
/// Default cap on `η₁·σ₁`; plain GD on the factored loss is unstable once
/// `η₁ ≥ 1/σ₁`, which the 1.1× rule reaches at `κ = 1`.
pub const DEFAULT_ETA1_CAP: f64 = 0.5;
pub const DEFAULT_FAILURE_PROB: f64 = 0.1;
pub const DEFAULT_TAIL_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub alpha_tilde: f64,
    pub eta1: f64,
    pub eta2: f64,
    /// Total iterations, even; the first half are Phase I.
    pub k1: usize,
    pub failure_prob: f64,
    pub scale_eta1: f64,
    pub scale_eta2: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_tilde", self.alpha_tilde),
            ("eta1", self.eta1),
            ("eta2", self.eta2),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.k1 < 2 || !self.k1.is_multiple_of(2) {
            return invalid(format!("k1 must be even and at least 2, got {}", self.k1));
        }
        if !(self.failure_prob > 0.0 && self.failure_prob < 1.0) {
            return invalid(format!("failure_prob must lie in (0,1), got {}", self.failure_prob));
        }
        Ok(())
    }

    pub fn phase1_iters(&self) -> usize {
        self.k1 / 2
    }
}

/// Spectral summary of the planted model that the step-size rules need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumStats {
    pub sigma1: f64,
    pub sigmak: f64,
    pub d: usize,
    pub k: usize,
    pub t_count: usize,
}

impl SpectrumStats {
    pub fn from_truth(gt: &GroundTruth) -> Self {
        Self {
            sigma1: gt.sigma1(),
            sigmak: gt.sigmak(),
            d: gt.d,
            k: gt.k,
            t_count: gt.t_count,
        }
    }

    pub fn kappa(&self) -> f64 {
        self.sigma1 / self.sigmak
    }
}

/// Optional replacements for the derived hyper-parameters and the constants
/// used to derive them. `None` keeps the default.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HyperOverrides {
    pub alpha_tilde: Option<f64>,
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub k1: Option<usize>,
    pub scale_eta1: Option<f64>,
    pub scale_eta2: Option<f64>,
    pub c_k: Option<f64>,
    pub c1: Option<f64>,
    /// Cap on `η₁·σ₁`; `Some(f64::INFINITY)` disables it.
    pub eta1_cap: Option<f64>,
}

pub fn theoretical_hyperparams(
    stats: &SpectrumStats,
    failure_prob: f64,
    overrides: &HyperOverrides,
) -> Result<HyperParams> {
    let SpectrumStats { sigma1, sigmak, d, k, t_count } = *stats;
    if !(sigmak > 0.0 && sigma1 >= sigmak && sigma1.is_finite()) {
        return invalid(format!("need sigma1 >= sigmak > 0, got {sigma1}, {sigmak}"));
    }
    if k == 0 {
        return invalid("k must be at least 1");
    }
    let kappa = stats.kappa();
    let scale_eta1 = overrides.scale_eta1.unwrap_or(1.1);
    let scale_eta2 = overrides.scale_eta2.unwrap_or(0.1);
    let c_k = overrides.c_k.unwrap_or(DEFAULT_C_K);
    let c1 = overrides.c1.unwrap_or(1.0);
    let cap = overrides.eta1_cap.unwrap_or(DEFAULT_ETA1_CAP);

    let eta1 = overrides
        .eta1
        .unwrap_or_else(|| (scale_eta1 / (kappa.powi(5) * sigma1)).min(cap / sigma1));
    let eta2 = overrides.eta2.unwrap_or(scale_eta2 / sigma1);
    let k1 = match overrides.k1 {
        Some(k1) => k1,
        None => {
            let raw = (c_k / (eta1 * sigmak)).ceil().max(2.0) as usize;
            raw + raw % 2
        }
    };
    let alpha_tilde = overrides.alpha_tilde.unwrap_or_else(|| {
        let m = ((d + t_count).max(k)) as f64;
        let raw = sigma1 / ((k as f64).powi(5) * m.powf(2.0 + c1 * kappa / 2.0))
            * (failure_prob / (kappa * kappa)).powf(c1 * kappa);
        raw.max(1e-8 * sigma1.sqrt())
    });
    let hp = HyperParams {
        alpha_tilde,
        eta1,
        eta2,
        k1,
        failure_prob,
        scale_eta1,
        scale_eta2,
    };
    hp.validate()?;
    Ok(hp)
}

/// `B⁽⁰⁾ = α̃·B̃₀`, `W⁽⁰⁾ = (α̃/3)·W̃₀` with `B̃₀, W̃₀` entries i.i.d. `N(0, 1/d)`.
pub fn init_factors(d: usize, k: usize, t_count: usize, alpha_tilde: f64, rng: &mut SeededRng) -> Result<FactorPair> {
    if !(alpha_tilde > 0.0) {
        return invalid(format!("alpha_tilde must be positive, got {alpha_tilde}"));
    }
    if d == 0 || k == 0 || t_count == 0 {
        return invalid("dimensions must be positive");
    }
    let std = 1.0 / (d as f64).sqrt();
    let b = gaussian_matrix(d, k, alpha_tilde * std, rng)?;
    let w = gaussian_matrix(k, t_count, alpha_tilde / 3.0 * std, rng)?;
    FactorPair::new(b, w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub loss_phase1: f64,
    pub loss_phase2: f64,
    pub balance_gap: f64,
    pub estimation_error: f64,
    pub dist_to_target: f64,
    pub wall_ms: Option<f64>,
}

/// Which iterates keep a full copy of the factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnapshotPolicy {
    None,
    /// The trailing `ceil(fraction·length)` iterates.
    Tail(f64),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub snapshots: SnapshotPolicy,
    /// Fill `wall_ms`, the elapsed time since the run started.
    pub record_timing: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            snapshots: SnapshotPolicy::Tail(DEFAULT_TAIL_FRACTION),
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub final_factors: FactorPair,
    /// One record per iterate, initialization included.
    pub trajectory: Vec<IterRecord>,
    /// `(iteration, factors)` in increasing iteration order.
    pub snapshots: Vec<(usize, FactorPair)>,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.trajectory.len().saturating_sub(1)
    }

    pub fn final_record(&self) -> &IterRecord {
        self.trajectory.last().expect("trajectory always holds the initial iterate")
    }

    pub fn final_error(&self) -> f64 {
        self.final_record().estimation_error
    }
}

/// `(1/T)‖B·W − B*·W*‖_F²`
pub fn estimation_error(fp: &FactorPair, gt: &GroundTruth) -> Result<f64> {
    if fp.b.shape() != gt.b_star.shape() || fp.w.shape() != gt.w_star.shape() {
        return invalid("factor shapes do not match the ground truth");
    }
    Ok(fp.product().sub(&gt.product()).frobenius_norm_sq() / gt.t_count as f64)
}

/// Procrustes distance between `(B; Wᵀ)` and `(F; G)`.
pub fn dist_to_target(fp: &FactorPair, gt: &GroundTruth) -> Result<f64> {
    let z = fp.b.vstack(&fp.w.transpose());
    let j = gt.f_target.vstack(&gt.g_target);
    procrustes_distance(&z, &j)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub initial_std: f64,
    /// Multiplicative per-iteration factor in (0, 1].
    pub decay: f64,
}

impl NoiseSchedule {
    pub fn default_for(eta: f64) -> Self {
        Self {
            initial_std: 0.1 * eta,
            decay: 0.995,
        }
    }

    pub fn std_at(&self, iteration: usize) -> f64 {
        self.initial_std * self.decay.powi(iteration as i32)
    }

    fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return invalid(format!("noise decay must lie in (0,1], got {}", self.decay));
        }
        if !(self.initial_std >= 0.0 && self.initial_std.is_finite()) {
            return invalid(format!("initial noise std must be non-negative, got {}", self.initial_std));
        }
        Ok(())
    }
}

/// One leg of a step plan: `iters` steps of size `eta` on `objective`.
#[derive(Debug, Clone, Copy)]
struct Leg {
    objective: Objective,
    eta: f64,
    iters: usize,
    freeze_b: bool,
}

impl Leg {
    fn new(objective: Objective, eta: f64, iters: usize) -> Self {
        Self { objective, eta, iters, freeze_b: false }
    }
}

struct Driver<'a> {
    moments: TaskMoments,
    gt: &'a GroundTruth,
    opts: SolveOptions,
}

impl<'a> Driver<'a> {
    fn new(data: &MultiTaskDataset, gt: &'a GroundTruth, init: &FactorPair, opts: SolveOptions) -> Result<Self> {
        let (d, k, t) = init.dims();
        if d != data.dim() || t != data.t_count() {
            return invalid("initial factors do not fit the dataset");
        }
        if (d, k, t) != (gt.d, gt.k, gt.t_count) {
            return invalid("initial factors do not fit the ground truth");
        }
        Ok(Self {
            moments: TaskMoments::new(data),
            gt,
            opts,
        })
    }

    fn run(&self, init: &FactorPair, legs: &[Leg], mut noise: Option<(NoiseSchedule, &mut SeededRng)>) -> Result<SolveResult> {
        let total: usize = legs.iter().map(|l| l.iters).sum();
        let keep_from = match self.opts.snapshots {
            SnapshotPolicy::None => usize::MAX,
            SnapshotPolicy::All => 0,
            SnapshotPolicy::Tail(frac) => {
                if !(frac > 0.0 && frac <= 1.0) {
                    return invalid(format!("tail fraction must lie in (0,1], got {frac}"));
                }
                let len = total + 1;
                len - ((frac * len as f64).ceil() as usize).min(len)
            }
        };
        let start = Instant::now();
        let mut fp = init.clone();
        let mut result = SolveResult {
            final_factors: fp.clone(),
            trajectory: Vec::with_capacity(total + 1),
            snapshots: Vec::new(),
        };
        let mut iteration = 0;
        for leg in legs {
            for _ in 0..leg.iters {
                let (fit, mut grad) = self.moments.data_fit(&fp)?;
                self.record(&mut result, iteration, fit, &fp, keep_from, &start)?;
                add_penalty_grad(&mut grad, &fp, leg.objective);
                if let Some((sched, rng)) = noise.as_mut() {
                    let std = sched.std_at(iteration);
                    if std > 0.0 {
                        perturb(&mut grad, std, rng);
                    }
                }
                if leg.freeze_b {
                    fp.w.add_scaled(-leg.eta, &grad.gw);
                } else {
                    fp.descend(leg.eta, &grad);
                }
                iteration += 1;
                if !fp.is_finite() {
                    log::warn!("non-finite factors at iteration {iteration}");
                    return Err(Error::Diverged {
                        iteration,
                        partial: Box::new(result),
                    });
                }
            }
        }
        let (fit, _) = self.moments.data_fit(&fp)?;
        self.record(&mut result, iteration, fit, &fp, keep_from, &start)?;
        result.final_factors = fp;
        Ok(result)
    }

    fn record(
        &self,
        result: &mut SolveResult,
        iteration: usize,
        fit: f64,
        fp: &FactorPair,
        keep_from: usize,
        start: &Instant,
    ) -> Result<()> {
        let gap = fp.balance_gap();
        result.trajectory.push(IterRecord {
            iteration,
            loss_phase1: fit,
            loss_phase2: fit + 0.125 * gap * gap,
            balance_gap: gap,
            estimation_error: estimation_error(fp, self.gt)?,
            dist_to_target: dist_to_target(fp, self.gt)?,
            wall_ms: self
                .opts
                .record_timing
                .then(|| start.elapsed().as_secs_f64() * 1e3),
        });
        if iteration >= keep_from {
            result.snapshots.push((iteration, fp.clone()));
        }
        Ok(())
    }
}

fn add_penalty_grad(grad: &mut GradPair, fp: &FactorPair, objective: Objective) {
    let coef = objective.balance_coefficient();
    if coef != 0.0 {
        grad.add_scaled(1.0, &penalty_grad(fp, coef));
    }
}

fn perturb(grad: &mut GradPair, std: f64, rng: &mut SeededRng) {
    for v in grad.gb.as_mut_slice().iter_mut().chain(grad.gw.as_mut_slice()) {
        *v += rng.normal(std);
    }
}

/// Algorithm-1 run from a freshly drawn initialization.
pub fn tpgd(data: &MultiTaskDataset, gt: &GroundTruth, hp: &HyperParams, rng: &mut SeededRng) -> Result<SolveResult> {
    let init = init_factors(data.dim(), gt.k, data.t_count(), hp.alpha_tilde, rng)?;
    tpgd_from(data, gt, hp, &init, SolveOptions::default())
}

/// `K₁/2` steps of `−η₁∇L̂` followed by `K₁/2` steps of `−η₂∇L̃`.
pub fn tpgd_from(
    data: &MultiTaskDataset,
    gt: &GroundTruth,
    hp: &HyperParams,
    init: &FactorPair,
    opts: SolveOptions,
) -> Result<SolveResult> {
    hp.validate()?;
    let half = hp.phase1_iters();
    Driver::new(data, gt, init, opts)?.run(
        init,
        &[
            Leg::new(Objective::DataFit, hp.eta1, half),
            Leg::new(Objective::Balanced, hp.eta2, half),
        ],
        None,
    )
}

/// Phase II alone from a given starting point.
pub fn phase2_from(
    data: &MultiTaskDataset,
    gt: &GroundTruth,
    eta: f64,
    iters: usize,
    init: &FactorPair,
    opts: SolveOptions,
) -> Result<SolveResult> {
    constant_step(data, gt, Objective::Balanced, eta, iters, init, opts)
}

/// Phase-II steps from `init`; with `freeze_b` only `W` moves.
pub fn phase2_refine(
    data: &MultiTaskDataset,
    gt: &GroundTruth,
    eta: f64,
    iters: usize,
    init: &FactorPair,
    freeze_b: bool,
    opts: SolveOptions,
) -> Result<SolveResult> {
    check_eta(eta)?;
    let leg = Leg { freeze_b, ..Leg::new(Objective::Balanced, eta, iters) };
    Driver::new(data, gt, init, opts)?.run(init, &[leg], None)
}

/// Constant-step GD on the unregularized loss.
pub fn gd_loss1(
    data: &MultiTaskDataset,
    gt: &GroundTruth,
    eta: f64,
    iters: usize,
    init: &FactorPair,
    opts: SolveOptions,
) -> Result<SolveResult> {
    constant_step(data, gt, Objective::DataFit, eta, iters, init, opts)
}

/// Constant-step GD on the loss with the `(1/2)‖BᵀB − WWᵀ‖²` penalty.
pub fn gd_loss2(
    data: &MultiTaskDataset,
    gt: &GroundTruth,
    eta: f64,
    iters: usize,
    init: &FactorPair,
    opts: SolveOptions,
) -> Result<SolveResult> {
    constant_step(data, gt, Objective::Tripuraneni, eta, iters, init, opts)
}

fn constant_step(
    data: &MultiTaskDataset,
    gt: &GroundTruth,
    objective: Objective,
    eta: f64,
    iters: usize,
    init: &FactorPair,
    opts: SolveOptions,
) -> Result<SolveResult> {
    check_eta(eta)?;
    Driver::new(data, gt, init, opts)?.run(init, &[Leg::new(objective, eta, iters)], None)
}

/// [`gd_loss2`] with a decaying Gaussian perturbation added to every gradient.
#[allow(clippy::too_many_arguments)]
pub fn nsgd(
    data: &MultiTaskDataset,
    gt: &GroundTruth,
    eta: f64,
    iters: usize,
    noise: NoiseSchedule,
    init: &FactorPair,
    opts: SolveOptions,
    rng: &mut SeededRng,
) -> Result<SolveResult> {
    check_eta(eta)?;
    noise.validate()?;
    let leg = Leg::new(Objective::Tripuraneni, eta, iters);
    Driver::new(data, gt, init, opts)?.run(init, &[leg], Some((noise, rng)))
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return invalid(format!("step size must be positive, got {eta}"));
    }
    Ok(())
}

/// Entrywise mean of the last `ceil(fraction·length)` iterates.
pub fn tail_average(result: &SolveResult, fraction: f64) -> Result<FactorPair> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("tail fraction must lie in (0,1], got {fraction}"));
    }
    let len = result.trajectory.len();
    let window = ((fraction * len as f64).ceil() as usize).clamp(1, len);
    let first = len - window;
    let kept: Vec<&FactorPair> = result
        .snapshots
        .iter()
        .filter(|(it, _)| *it >= first)
        .map(|(_, fp)| fp)
        .collect();
    if kept.len() != window {
        return invalid(format!(
            "tail window needs {window} snapshots, only {} were kept",
            kept.len()
        ));
    }
    average(&kept)
}

fn average(pairs: &[&FactorPair]) -> Result<FactorPair> {
    let first = pairs[0];
    let mut b = Matrix::zeros(first.b.rows(), first.b.cols());
    let mut w = Matrix::zeros(first.w.rows(), first.w.cols());
    for fp in pairs {
        b.add_scaled(1.0, &fp.b);
        w.add_scaled(1.0, &fp.w);
    }
    let inv = 1.0 / pairs.len() as f64;
    FactorPair::new(b.scale(inv), w.scale(inv))
}

/// Calls `visit(i, avg)` with the tail average of the first `i + 1` iterates
/// for every prefix of the run. Needs [`SnapshotPolicy::All`].
fn for_each_tail_prefix<F>(result: &SolveResult, fraction: f64, mut visit: F) -> Result<()>
where
    F: FnMut(usize, &FactorPair) -> Result<()>,
{
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid(format!("tail fraction must lie in (0,1], got {fraction}"));
    }
    let len = result.trajectory.len();
    if result.snapshots.len() != len || len == 0 {
        return invalid("tail-averaged curve needs every iterate stored");
    }
    let first = &result.snapshots[0].1;
    let (nb, nw) = (first.b.as_slice().len(), first.w.as_slice().len());
    // prefix[i] = sum of the first i iterates
    let mut prefix_b = vec![vec![0.0; nb]];
    let mut prefix_w = vec![vec![0.0; nw]];
    for (_, fp) in &result.snapshots {
        let mut b = prefix_b.last().unwrap().clone();
        let mut w = prefix_w.last().unwrap().clone();
        crate::numerics::axpy(1.0, fp.b.as_slice(), &mut b);
        crate::numerics::axpy(1.0, fp.w.as_slice(), &mut w);
        prefix_b.push(b);
        prefix_w.push(w);
    }
    for i in 0..len {
        let n = i + 1;
        let window = ((fraction * n as f64).ceil() as usize).clamp(1, n);
        let lo = n - window;
        let inv = 1.0 / window as f64;
        let b: Vec<f64> = prefix_b[n].iter().zip(&prefix_b[lo]).map(|(h, l)| (h - l) * inv).collect();
        let w: Vec<f64> = prefix_w[n].iter().zip(&prefix_w[lo]).map(|(h, l)| (h - l) * inv).collect();
        let fp = FactorPair::new(
            Matrix::from_vec(first.b.rows(), first.b.cols(), b)?,
            Matrix::from_vec(first.w.rows(), first.w.cols(), w)?,
        )?;
        visit(i, &fp)?;
    }
    Ok(())
}

/// Estimation error of the tail average at every prefix of the run, i.e. the
/// curve a tail-averaged method would report if stopped at each iteration.
/// Needs [`SnapshotPolicy::All`].
pub fn tail_averaged_curve(result: &SolveResult, fraction: f64, gt: &GroundTruth) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(result.trajectory.len());
    for_each_tail_prefix(result, fraction, |_, fp| {
        out.push(estimation_error(fp, gt)?);
        Ok(())
    })?;
    Ok(out)
}

/// Like [`tail_averaged_curve`] but evaluates every metric of [`IterRecord`]
/// on the running tail average. Timing is copied from the underlying run.
pub fn tail_averaged_trajectory(
    result: &SolveResult,
    fraction: f64,
    data: &MultiTaskDataset,
    gt: &GroundTruth,
) -> Result<Vec<IterRecord>> {
    let moments = TaskMoments::new(data);
    let mut out = Vec::with_capacity(result.trajectory.len());
    for_each_tail_prefix(result, fraction, |i, fp| {
        let src = &result.trajectory[i];
        let l1 = moments.loss_phase1(fp)?;
        let gap = fp.balance_gap();
        out.push(IterRecord {
            iteration: src.iteration,
            loss_phase1: l1,
            loss_phase2: l1 + 0.125 * gap * gap,
            balance_gap: gap,
            estimation_error: estimation_error(fp, gt)?,
            dist_to_target: dist_to_target(fp, gt)?,
            wall_ms: src.wall_ms,
        });
        Ok(())
    })?;
    Ok(out)
}

/// First iteration whose value is at most `threshold`, if any.
pub fn first_reaching(curve: &[f64], threshold: f64) -> Option<usize> {
    curve.iter().position(|v| *v <= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{linear_spectrum, make_ground_truth, sample_tasks, TaskData};

    fn unit_problem() -> (MultiTaskDataset, GroundTruth) {
        let data = MultiTaskDataset::new(
            vec![TaskData {
                x: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
                y: vec![1.0],
            }],
            0.0,
        )
        .unwrap();
        let gt = GroundTruth::from_factors(
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            0.0,
        )
        .unwrap();
        (data, gt)
    }

    fn scalar_pair(b: f64, w: f64) -> FactorPair {
        FactorPair::new(
            Matrix::from_vec(1, 1, vec![b]).unwrap(),
            Matrix::from_vec(1, 1, vec![w]).unwrap(),
        )
        .unwrap()
    }

    fn stats(sigma1: f64, sigmak: f64) -> SpectrumStats {
        SpectrumStats { sigma1, sigmak, d: 10, k: 2, t_count: 10 }
    }

    #[test]
    fn unit_spectrum_steps() {
        let ov = HyperOverrides {
            scale_eta1: Some(1.0),
            scale_eta2: Some(1.0),
            eta1_cap: Some(f64::INFINITY),
            ..Default::default()
        };
        let hp = theoretical_hyperparams(&stats(1.0, 1.0), 0.1, &ov).unwrap();
        assert_eq!(hp.eta1, 1.0);
        assert_eq!(hp.eta2, 1.0);
    }

    #[test]
    fn eta1_formula() {
        let hp = theoretical_hyperparams(&stats(4.0, 1.0), 0.1, &HyperOverrides::default()).unwrap();
        assert!((hp.eta1 - 1.1 / 4096.0).abs() < 1e-18);
        assert!((hp.eta2 - 0.025).abs() < 1e-15);
        assert_eq!(hp.k1 % 2, 0);
        assert!(hp.k1 as f64 >= DEFAULT_C_K / hp.eta1);
        assert_eq!(hp.alpha_tilde, 1e-8 * 2.0);
    }

    #[test]
    fn eta1_cap_applies_at_unit_condition() {
        let hp = theoretical_hyperparams(&stats(2.0, 2.0), 0.1, &HyperOverrides::default()).unwrap();
        assert_eq!(hp.eta1, DEFAULT_ETA1_CAP / 2.0);
    }

    #[test]
    fn overrides_pass_through() {
        let ov = HyperOverrides {
            alpha_tilde: Some(0.3),
            eta1: Some(0.01),
            eta2: Some(0.02),
            k1: Some(40),
            ..Default::default()
        };
        let hp = theoretical_hyperparams(&stats(4.0, 1.0), 0.2, &ov).unwrap();
        assert_eq!((hp.alpha_tilde, hp.eta1, hp.eta2, hp.k1, hp.failure_prob), (0.3, 0.01, 0.02, 40, 0.2));
        assert!(theoretical_hyperparams(&stats(1.0, 2.0), 0.1, &ov).is_err());
        assert!(theoretical_hyperparams(&stats(1.0, 0.0), 0.1, &ov).is_err());
        let odd = HyperOverrides { k1: Some(3), ..ov };
        assert!(theoretical_hyperparams(&stats(4.0, 1.0), 0.1, &odd).is_err());
    }

    #[test]
    fn init_scale() {
        let (d, k, t, alpha) = (20, 3, 10, 0.5);
        let mut sum_b = 0.0;
        let mut sum_w = 0.0;
        for seed in 0..100 {
            let fp = init_factors(d, k, t, alpha, &mut SeededRng::new(seed, 7)).unwrap();
            sum_b += fp.b.frobenius_norm_sq();
            sum_w += fp.w.frobenius_norm_sq();
        }
        let expected_b = alpha * alpha * k as f64;
        assert!((sum_b / 100.0 / expected_b - 1.0).abs() < 0.2);
        let expected_w = alpha * alpha / 9.0 * (k * t) as f64 / d as f64;
        assert!((sum_w / 100.0 / expected_w - 1.0).abs() < 0.2);
        let a = init_factors(d, k, t, alpha, &mut SeededRng::new(3, 0)).unwrap();
        let b = init_factors(d, k, t, alpha, &mut SeededRng::new(3, 0)).unwrap();
        assert_eq!(a, b);
        assert!(init_factors(d, k, t, 0.0, &mut SeededRng::new(3, 0)).is_err());
    }

    #[test]
    fn hand_phase1_step() {
        let (data, gt) = unit_problem();
        let hp = HyperParams {
            alpha_tilde: 1.0,
            eta1: 0.1,
            eta2: 0.1,
            k1: 2,
            failure_prob: 0.1,
            scale_eta1: 1.1,
            scale_eta2: 0.1,
        };
        let res = tpgd_from(&data, &gt, &hp, &scalar_pair(1.0, 0.0), SolveOptions::default()).unwrap();
        assert_eq!(res.iterations(), 2);
        assert_eq!(res.trajectory.len(), 3);
        let g1 = gd_loss1(&data, &gt, 0.1, 1, &scalar_pair(1.0, 0.0), SolveOptions::default()).unwrap();
        assert_eq!(g1.final_factors.b[(0, 0)], 1.0);
        assert!((g1.final_factors.w[(0, 0)] - 0.1).abs() < 1e-15);
        assert_eq!(res.trajectory[1], g1.trajectory[1]);
    }

    #[test]
    fn zero_iterations_return_init() {
        let (data, gt) = unit_problem();
        let init = scalar_pair(0.3, 0.2);
        let res = gd_loss1(&data, &gt, 0.1, 0, &init, SolveOptions::default()).unwrap();
        assert_eq!(res.final_factors, init);
        assert_eq!(res.trajectory.len(), 1);
    }

    #[test]
    fn balanced_init_makes_penalties_inert() {
        let (data, gt) = unit_problem();
        let init = scalar_pair(0.5, 0.5);
        let a = gd_loss1(&data, &gt, 0.1, 1, &init, SolveOptions::default()).unwrap();
        let b = gd_loss2(&data, &gt, 0.1, 1, &init, SolveOptions::default()).unwrap();
        assert_eq!(a.final_factors, b.final_factors);
    }

    #[test]
    fn huge_step_diverges() {
        let (data, gt) = unit_problem();
        let err = gd_loss2(&data, &gt, 1e3, 200, &scalar_pair(1.0, 0.5), SolveOptions::default()).unwrap_err();
        match err {
            Error::Diverged { iteration, partial } => {
                assert!(iteration >= 1);
                assert_eq!(partial.trajectory.len(), iteration);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn noise_schedule() {
        let (data, gt) = unit_problem();
        let init = scalar_pair(0.5, 0.1);
        let quiet = NoiseSchedule { initial_std: 0.0, decay: 0.9 };
        let a = nsgd(&data, &gt, 0.1, 5, quiet, &init, SolveOptions::default(), &mut SeededRng::new(1, 0)).unwrap();
        let b = gd_loss2(&data, &gt, 0.1, 5, &init, SolveOptions::default()).unwrap();
        assert_eq!(a.final_factors, b.final_factors);
        let s = NoiseSchedule { initial_std: 2.0, decay: 0.5 };
        assert_eq!(s.std_at(3), 0.25);
        for decay in [0.0, 1.5, -0.1] {
            let bad = NoiseSchedule { initial_std: 0.1, decay };
            assert!(nsgd(&data, &gt, 0.1, 1, bad, &init, SolveOptions::default(), &mut SeededRng::new(1, 0)).is_err());
        }
    }

    #[test]
    fn tail_average_arithmetic() {
        let (data, gt) = unit_problem();
        let mut res = gd_loss1(&data, &gt, 0.1, 1, &scalar_pair(0.0, 0.0), SolveOptions::default()).unwrap();
        res.snapshots = vec![(0, scalar_pair(0.0, 0.0)), (1, scalar_pair(2.0, 2.0))];
        let avg = tail_average(&res, 1.0).unwrap();
        assert_eq!(avg, scalar_pair(1.0, 1.0));
        let last = tail_average(&res, 0.5).unwrap();
        assert_eq!(last, scalar_pair(2.0, 2.0));
        assert!(tail_average(&res, 0.0).is_err());
    }

    #[test]
    fn tail_curve_matches_direct_average() {
        let gt = make_ground_truth(5, 1, 3, &[1.0], 0.1, &mut SeededRng::new(2, 0)).unwrap();
        let data = sample_tasks(&gt, 20, &mut SeededRng::new(2, 1)).unwrap();
        let init = init_factors(5, 1, 3, 0.1, &mut SeededRng::new(2, 2)).unwrap();
        let opts = SolveOptions { snapshots: SnapshotPolicy::All, record_timing: false };
        let res = gd_loss1(&data, &gt, 0.2, 12, &init, opts).unwrap();
        let curve = tail_averaged_curve(&res, 0.25, &gt).unwrap();
        let direct = estimation_error(&tail_average(&res, 0.25).unwrap(), &gt).unwrap();
        assert!((curve[12] - direct).abs() < 1e-14);
        assert_eq!(curve[0], res.trajectory[0].estimation_error);
    }

    #[test]
    fn metrics_at_truth() {
        let gt = make_ground_truth(6, 2, 4, &[2.0, 1.0], 0.0, &mut SeededRng::new(5, 0)).unwrap();
        let fp = FactorPair::new(gt.b_star.clone(), gt.w_star.clone()).unwrap();
        assert!(estimation_error(&fp, &gt).unwrap() < 1e-24);
        assert!(dist_to_target(&fp, &gt).unwrap() < 1e-10);
        let p = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.5, 1.5]]).unwrap();
        let mixed = FactorPair::new(
            gt.b_star.matmul(&p),
            crate::numerics::inverse(&p).unwrap().matmul(&gt.w_star),
        )
        .unwrap();
        assert!(estimation_error(&mixed, &gt).unwrap() < 1e-20);
    }

    #[test]
    fn noiseless_recovery() {
        let gt = make_ground_truth(10, 2, 10, &linear_spectrum(2, 2.0, 1.0), 0.0, &mut SeededRng::new(9, 0)).unwrap();
        let data = sample_tasks(&gt, 200, &mut SeededRng::new(9, 1)).unwrap();
        let hp = theoretical_hyperparams(&SpectrumStats::from_truth(&gt), DEFAULT_FAILURE_PROB, &HyperOverrides::default()).unwrap();
        let res = tpgd(&data, &gt, &hp, &mut SeededRng::new(9, 2)).unwrap();
        let init_err = res.trajectory[0].estimation_error;
        assert!(res.final_error() <= 1e-6 * init_err, "{} vs {}", res.final_error(), init_err);
    }

    #[test]
    fn deterministic_runs() {
        let gt = make_ground_truth(6, 2, 5, &[2.0, 1.0], 0.3, &mut SeededRng::new(4, 0)).unwrap();
        let data = sample_tasks(&gt, 40, &mut SeededRng::new(4, 1)).unwrap();
        let hp = theoretical_hyperparams(&SpectrumStats::from_truth(&gt), 0.1, &HyperOverrides::default()).unwrap();
        let a = tpgd(&data, &gt, &hp, &mut SeededRng::new(4, 2)).unwrap();
        let b = tpgd(&data, &gt, &hp, &mut SeededRng::new(4, 2)).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.final_factors, b.final_factors);
    }
}
