use rayon::prelude::*;

use super::config::{ExperimentConfig, Family, Method};
use super::record::ExperimentRecord;
use crate::curriculum::{curriculum_run, pooled_run, CurriculumLevel, CurriculumOptions};
use crate::error::{Error, Result};
use crate::losses::{loss_phase1, FactorPair};
use crate::numerics::{Matrix, SeededRng};
use crate::solvers::{
    dist_to_target, estimation_error, gd_loss1, gd_loss2, init_factors, nsgd, phase2_from, tail_average,
    tail_averaged_trajectory, theoretical_hyperparams, tpgd_from, HyperParams, IterRecord, NoiseSchedule,
    SnapshotPolicy, SolveOptions, SolveResult, SpectrumStats,
};
use crate::synthdata::{
    estimate_rip_delta, make_ground_truth, make_level_ground_truths, random_target_weight, sample_target_stream,
    sample_tasks, GroundTruth, MultiTaskDataset,
};
use crate::transfer::{default_eta0, sgd_transfer, Checkpoints, DecaySchedule, RiskOracle};

// Per-seed random streams. Data streams are offset by N (and by level in the
// curriculum) so a cell's data does not depend on its position in a sweep.
const STREAM_TRUTH: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_TARGET: u64 = 3;
const STREAM_PROBES: u64 = 4;
const STREAM_DATA: u64 = 16;

fn data_stream(n: usize, level: usize) -> u64 {
    STREAM_DATA + n as u64 + ((level as u64) << 32)
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<ExperimentRecord>,
    /// Some run hit a non-finite iterate; its rows end with a flagged row.
    pub diverged: bool,
}

impl RunOutput {
    fn extend(&mut self, other: RunOutput) {
        self.records.extend(other.records);
        self.diverged |= other.diverged;
    }
}

pub fn run_family(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.family {
        Family::IterSweep => run_iter_sweep(cfg),
        Family::SampleSweep => run_sample_sweep(cfg),
        Family::Ablation => run_ablation(cfg),
        Family::Curriculum => run_curriculum(cfg),
        Family::Transfer => run_transfer(cfg),
        Family::RipCheck => run_rip_check(cfg),
    }
}

/// A planted instance with its data, schedule and shared initialization.
#[derive(Debug, Clone)]
pub struct Instance {
    pub gt: GroundTruth,
    pub data: MultiTaskDataset,
    pub hp: HyperParams,
    pub init: FactorPair,
}

impl Instance {
    pub fn build(cfg: &ExperimentConfig, seed: u64, k: usize, n: usize) -> Result<Self> {
        let spectrum = cfg.spectrum_for(k)?;
        let gt = make_ground_truth(
            cfg.d,
            k,
            cfg.t_count,
            &spectrum,
            cfg.noise_sigma,
            &mut SeededRng::new(seed, STREAM_TRUTH),
        )?;
        let data = sample_tasks(&gt, n, &mut SeededRng::new(seed, data_stream(n, 0)))?;
        let mut hp = theoretical_hyperparams(&SpectrumStats::from_truth(&gt), cfg.failure_prob, &cfg.overrides)?;
        if let Some(b) = cfg.iteration_budget {
            hp.k1 = b;
        }
        let init = init_factors(cfg.d, k, cfg.t_count, hp.alpha_tilde, &mut SeededRng::new(seed, STREAM_INIT))?;
        Ok(Self { gt, data, hp, init })
    }

    /// Iterations every method gets: `K₁` unless the config fixes a budget.
    pub fn budget(&self) -> usize {
        self.hp.k1
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        (self.gt.d, self.gt.k, self.gt.t_count, self.data.n_per_task)
    }
}

/// Runs `method` for `iters` iterations from the instance's initialization.
pub fn run_method(
    cfg: &ExperimentConfig,
    inst: &Instance,
    method: Method,
    iters: usize,
    seed: u64,
    snapshots: SnapshotPolicy,
) -> Result<SolveResult> {
    let opts = SolveOptions { snapshots, record_timing: cfg.timing };
    let (data, gt, init, eta1) = (&inst.data, &inst.gt, &inst.init, inst.hp.eta1);
    match method {
        Method::Tpgd => {
            let hp = HyperParams { k1: iters, ..inst.hp };
            tpgd_from(data, gt, &hp, init, opts)
        }
        Method::GdLoss1 => gd_loss1(data, gt, eta1, iters, init, opts),
        Method::GdLoss2 => gd_loss2(data, gt, eta1, iters, init, opts),
        Method::Nsgd => {
            let mut noise = NoiseSchedule::default_for(eta1);
            if let Some(s) = cfg.nsgd_initial_std {
                noise.initial_std = s;
            }
            if let Some(r) = cfg.nsgd_decay {
                noise.decay = r;
            }
            nsgd(data, gt, eta1, iters, noise, init, opts, &mut SeededRng::new(seed, STREAM_NOISE))
        }
    }
}

/// Splits a divergence into its partial run; other errors pass through.
fn settle(res: Result<SolveResult>) -> Result<(SolveResult, Option<usize>)> {
    match res {
        Ok(r) => Ok((r, None)),
        Err(Error::Diverged { iteration, partial }) => Ok((*partial, Some(iteration))),
        Err(e) => Err(e),
    }
}

struct RowKey<'a> {
    family: Family,
    method: &'a str,
    seed: Option<u64>,
    dims: (usize, usize, usize, usize),
}

impl RowKey<'_> {
    fn blank(&self) -> ExperimentRecord {
        ExperimentRecord::blank(self.family.name(), self.method, self.seed, self.dims)
    }

    /// Metrics can overflow before the factors do; such rows are flagged.
    fn record(&self, r: &IterRecord) -> ExperimentRecord {
        let finite = [r.loss_phase1, r.estimation_error, r.balance_gap, r.dist_to_target]
            .iter()
            .all(|v| v.is_finite());
        ExperimentRecord {
            iteration: r.iteration,
            train_loss: Some(r.loss_phase1),
            estimation_error: Some(r.estimation_error),
            balance_gap: Some(r.balance_gap),
            dist_to_target: Some(r.dist_to_target),
            wall_ms: r.wall_ms,
            diverged: !finite,
            ..self.blank()
        }
    }

    fn metric(&self, iteration: usize, value: f64) -> ExperimentRecord {
        ExperimentRecord { iteration, estimation_error: Some(value), ..self.blank() }
    }

    fn diverged(&self, iteration: usize) -> ExperimentRecord {
        ExperimentRecord { iteration, diverged: true, ..self.blank() }
    }

    fn rows(&self, traj: &[IterRecord], diverged_at: Option<usize>) -> RunOutput {
        let mut records: Vec<_> = traj.iter().map(|r| self.record(r)).collect();
        if let Some(it) = diverged_at {
            records.push(self.diverged(it));
        }
        RunOutput { records, diverged: diverged_at.is_some() }
    }
}

fn pair_record(key: &RowKey<'_>, iteration: usize, fp: &FactorPair, inst: &Instance) -> Result<ExperimentRecord> {
    Ok(ExperimentRecord {
        iteration,
        train_loss: Some(loss_phase1(fp, &inst.data)?),
        estimation_error: Some(estimation_error(fp, &inst.gt)?),
        balance_gap: Some(fp.balance_gap()),
        dist_to_target: Some(dist_to_target(fp, &inst.gt)?),
        ..key.blank()
    })
}

/// Evaluates cells in parallel and concatenates them in input order.
fn run_cells<C, F>(cells: Vec<C>, f: F) -> Result<Vec<RunOutput>>
where
    C: Send + Sync,
    F: Fn(&C) -> Result<RunOutput> + Send + Sync,
{
    cells.par_iter().map(f).collect()
}

fn concat(parts: Vec<RunOutput>) -> RunOutput {
    let mut out = RunOutput::default();
    for p in parts {
        out.extend(p);
    }
    out
}

/// `c` minimizing `Σ(e − c·x)²` with `x = dk/(NT)`.
pub fn fit_theory_constant(points: &[(f64, f64)]) -> Option<f64> {
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = points.iter().map(|(x, e)| x * e).sum();
    (sxx > 0.0 && sxy.is_finite()).then(|| sxy / sxx)
}

fn theory_x(d: usize, k: usize, t: usize, n: usize) -> f64 {
    (d * k) as f64 / (n * t) as f64
}

/// TPGD final errors of non-diverged runs, keyed by `dk/(NT)`.
fn tpgd_finals(records: &[ExperimentRecord]) -> Vec<(f64, f64)> {
    let mut last = std::collections::BTreeMap::new();
    for r in records.iter().filter(|r| r.method == Method::Tpgd.name()) {
        last.insert((r.seed, r.k, r.n), r);
    }
    last.values()
        .filter(|r| !r.diverged)
        .filter_map(|r| r.estimation_error.map(|e| (theory_x(r.d, r.k, r.t_count, r.n), e)))
        .collect()
}

fn run_iter_sweep(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let k = cfg.k;
    let mut cells = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            for &n in &cfg.n_values {
                cells.push((method, seed, n));
            }
        }
    }
    let parts = run_cells(cells, |&(method, seed, n)| {
        let inst = Instance::build(cfg, seed, k, n)?;
        let snaps = if method.tail_averaged() { SnapshotPolicy::All } else { SnapshotPolicy::None };
        let (run, diverged_at) = settle(run_method(cfg, &inst, method, inst.budget(), seed, snaps))?;
        let key = RowKey { family: cfg.family, method: method.name(), seed: Some(seed), dims: inst.dims() };
        if method.tail_averaged() && diverged_at.is_none() {
            let traj = tail_averaged_trajectory(&run, cfg.tail_fraction, &inst.data, &inst.gt)?;
            Ok(key.rows(&traj, None))
        } else {
            Ok(key.rows(&run.trajectory, diverged_at))
        }
    })?;
    let mut out = concat(parts);
    if let Some(c) = fit_theory_constant(&tpgd_finals(&out.records)) {
        for &n in &cfg.n_values {
            let budget = Instance::build(cfg, cfg.seeds[0], k, n)?.budget();
            let key = RowKey { family: cfg.family, method: "theory", seed: None, dims: (cfg.d, k, cfg.t_count, n) };
            let value = c * theory_x(cfg.d, k, cfg.t_count, n);
            out.records.push(key.metric(0, value));
            out.records.push(key.metric(budget, value));
        }
    }
    Ok(out)
}

fn run_sample_sweep(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cells = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            for &k in &cfg.k_values {
                for &n in &cfg.n_values {
                    cells.push((method, seed, k, n));
                }
            }
        }
    }
    let parts = run_cells(cells, |&(method, seed, k, n)| {
        let inst = Instance::build(cfg, seed, k, n)?;
        let snaps = if method.tail_averaged() {
            SnapshotPolicy::Tail(cfg.tail_fraction)
        } else {
            SnapshotPolicy::None
        };
        let budget = inst.budget();
        let (run, diverged_at) = settle(run_method(cfg, &inst, method, budget, seed, snaps))?;
        let key = RowKey { family: cfg.family, method: method.name(), seed: Some(seed), dims: inst.dims() };
        let record = match diverged_at {
            Some(it) => key.diverged(it),
            None if method.tail_averaged() => pair_record(&key, budget, &tail_average(&run, cfg.tail_fraction)?, &inst)?,
            None => key.record(run.final_record()),
        };
        Ok(RunOutput { records: vec![record], diverged: diverged_at.is_some() })
    })?;
    let mut out = concat(parts);
    if let Some(c) = fit_theory_constant(&tpgd_finals(&out.records)) {
        for &k in &cfg.k_values {
            for &n in &cfg.n_values {
                let budget = Instance::build(cfg, cfg.seeds[0], k, n)?.budget();
                let key = RowKey { family: cfg.family, method: "theory", seed: None, dims: (cfg.d, k, cfg.t_count, n) };
                out.records.push(key.metric(budget, c * theory_x(cfg.d, k, cfg.t_count, n)));
            }
        }
    }
    Ok(out)
}

pub const ABLATION_ARMS: [&str; 3] = ["tpgd", "phase1_only", "phase2_only"];

fn run_ablation(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cells = Vec::new();
    for arm in 0..ABLATION_ARMS.len() {
        for &seed in &cfg.seeds {
            for &n in &cfg.n_values {
                cells.push((arm, seed, n));
            }
        }
    }
    let parts = run_cells(cells, |&(arm, seed, n)| {
        let inst = Instance::build(cfg, seed, cfg.k, n)?;
        let budget = inst.budget();
        let opts = SolveOptions { snapshots: SnapshotPolicy::None, record_timing: cfg.timing };
        let res = match arm {
            0 => run_method(cfg, &inst, Method::Tpgd, budget, seed, SnapshotPolicy::None),
            1 => {
                let iters = (cfg.phase1_horizon * budget as f64).ceil() as usize;
                gd_loss1(&inst.data, &inst.gt, inst.hp.eta1, iters, &inst.init, opts)
            }
            _ => phase2_from(&inst.data, &inst.gt, inst.hp.eta2, budget, &inst.init, opts),
        };
        let (run, diverged_at) = settle(res)?;
        let key = RowKey { family: cfg.family, method: ABLATION_ARMS[arm], seed: Some(seed), dims: inst.dims() };
        Ok(key.rows(&run.trajectory, diverged_at))
    })?;
    Ok(concat(parts))
}

/// Levels of one curriculum seed, sharing `B*`. The first level's data
/// matches the iteration-sweep instance of the same seed and N.
pub fn curriculum_levels(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<CurriculumLevel>, HyperParams)> {
    let n = cfg.n_values[0];
    let truths = make_level_ground_truths(
        cfg.d,
        cfg.k,
        &cfg.t_counts,
        &cfg.spectrum_for(cfg.k)?,
        &cfg.noise_sigmas,
        &mut SeededRng::new(seed, STREAM_TRUTH),
    )?;
    let mut hp = theoretical_hyperparams(&SpectrumStats::from_truth(&truths[0]), cfg.failure_prob, &cfg.overrides)?;
    if let Some(b) = cfg.iteration_budget {
        hp.k1 = b;
    }
    let levels = truths
        .into_iter()
        .enumerate()
        .map(|(j, gt)| {
            let data = sample_tasks(&gt, n, &mut SeededRng::new(seed, data_stream(n, j)))?;
            CurriculumLevel::with_defaults(data, gt, &hp, &cfg.overrides)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((levels, hp))
}

fn run_curriculum(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let parts = run_cells(cfg.seeds.clone(), |&seed| {
        let (levels, hp) = curriculum_levels(cfg, seed)?;
        let n = cfg.n_values[0];
        let total_t: usize = cfg.t_counts.iter().sum();
        let key = |method: &'static str, t: usize| RowKey {
            family: cfg.family,
            method,
            seed: Some(seed),
            dims: (cfg.d, cfg.k, t, n),
        };
        let mut out = RunOutput::default();
        let opts = CurriculumOptions { freeze_b: cfg.freeze_b };
        match curriculum_run(&levels, &hp, opts, &mut SeededRng::new(seed, STREAM_INIT)) {
            Ok(res) => {
                let mut total_iters = 0;
                for (j, (run, level)) in res.levels.iter().zip(&levels).enumerate() {
                    let name = format!("curriculum_l{}", j + 1);
                    let k = RowKey { method: &name, ..key("", level.t_count()) };
                    out.extend(k.rows(&run.trajectory, None));
                    total_iters += run.iterations();
                }
                out.records
                    .push(key("curriculum_aggregate", total_t).metric(total_iters, res.aggregate_error));
            }
            Err(Error::Diverged { iteration, .. }) => {
                out.records.push(key("curriculum_aggregate", total_t).diverged(iteration));
                out.diverged = true;
            }
            Err(e) => return Err(e),
        }
        let mut pooled_overrides = cfg.overrides;
        if cfg.iteration_budget.is_some() {
            pooled_overrides.k1 = cfg.iteration_budget;
        }
        match pooled_run(&levels, cfg.failure_prob, &pooled_overrides, &mut SeededRng::new(seed, STREAM_INIT)) {
            Ok(res) => {
                out.extend(key("pooled", total_t).rows(&res.run.trajectory, None));
                let iters = res.run.iterations();
                for (j, (err, level)) in res.level_errors.iter().zip(&levels).enumerate() {
                    let name = format!("pooled_l{}", j + 1);
                    out.records.push(RowKey { method: &name, ..key("", level.t_count()) }.metric(iters, *err));
                }
                out.records.push(key("pooled_aggregate", total_t).metric(iters, res.aggregate_error));
            }
            Err(Error::Diverged { iteration, partial }) => {
                out.extend(key("pooled", total_t).rows(&partial.trajectory, Some(iteration)));
            }
            Err(e) => return Err(e),
        }
        Ok(out)
    })?;
    Ok(concat(parts))
}

/// Representation handed to the transfer task: `B*` itself, or a TPGD
/// estimate from the source tasks when `learn_representation` is set.
fn transfer_representation(cfg: &ExperimentConfig, seed: u64, gt: &GroundTruth) -> Result<Matrix> {
    if !cfg.learn_representation {
        return Ok(gt.b_star.clone());
    }
    let inst = Instance::build(cfg, seed, cfg.k, cfg.n_values[0])?;
    let run = run_method(cfg, &inst, Method::Tpgd, inst.budget(), seed, SnapshotPolicy::None)?;
    Ok(run.final_factors.b)
}

fn run_transfer(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &k2 in &cfg.k2_values {
            cells.push((seed, k2));
        }
    }
    let parts = run_cells(cells, |&(seed, k2)| {
        let gt = make_ground_truth(
            cfg.d,
            cfg.k,
            cfg.t_count,
            &cfg.spectrum_for(cfg.k)?,
            cfg.noise_sigma,
            &mut SeededRng::new(seed, STREAM_TRUTH),
        )?;
        let b_hat = transfer_representation(cfg, seed, &gt)?;
        let w_target = random_target_weight(&gt, &mut SeededRng::new(seed, STREAM_TARGET));
        let h_cov = Matrix::identity(cfg.d);
        let stream = sample_target_stream(&gt, &w_target, &h_cov, k2, SeededRng::new(seed, data_stream(k2, 0)))?;
        let oracle = RiskOracle::new(&gt, &w_target, &h_cov)?;
        let eta0 = default_eta0(&b_hat, &h_cov)?;
        let sched = DecaySchedule::with_log_base(eta0, DecaySchedule::default_h(k2), k2, cfg.log_base)?;
        let res = sgd_transfer(&b_hat, stream, &sched, &vec![0.0; cfg.k], &Checkpoints { every: 0, oracle: Some(&oracle) })?;
        let key = RowKey {
            family: cfg.family,
            method: "sgd_transfer",
            seed: Some(seed),
            dims: (cfg.d, cfg.k, cfg.t_count, k2),
        };
        let records = res.excess_risk_trace.iter().map(|&(tau, risk)| key.metric(tau, risk)).collect();
        Ok(RunOutput { records, diverged: false })
    })?;
    Ok(concat(parts))
}

fn run_rip_check(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &n in &cfg.n_values {
            cells.push((seed, n));
        }
    }
    let parts = run_cells(cells, |&(seed, n)| {
        let gt = make_ground_truth(
            cfg.d,
            cfg.k,
            cfg.t_count,
            &cfg.spectrum_for(cfg.k)?,
            cfg.noise_sigma,
            &mut SeededRng::new(seed, STREAM_TRUTH),
        )?;
        let data = sample_tasks(&gt, n, &mut SeededRng::new(seed, data_stream(n, 0)))?;
        let delta = estimate_rip_delta(&data, cfg.probes, &mut SeededRng::new(seed, STREAM_PROBES))?;
        let key = RowKey { family: cfg.family, method: "rip", seed: Some(seed), dims: (cfg.d, cfg.k, cfg.t_count, n) };
        Ok(RunOutput { records: vec![key.metric(cfg.probes, delta)], diverged: false })
    })?;
    Ok(concat(parts))
}
