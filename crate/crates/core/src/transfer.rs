//! Online SGD for a new task on top of a frozen representation, with a
//! constant warm-up followed by geometric step decay.

use crate::error::{invalid, Error, Result};
use crate::numerics::{dot, Matrix};
use crate::synthdata::GroundTruth;

/// Moment constant of Gaussian covariates in the fourth-moment bound.
pub const GAUSSIAN_MOMENT_CONSTANT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }
}

/// `η` up to `τ = K₂' + h`, then `η/2^⌊(τ−h)/K₂'⌋`, with
/// `K₂' = ⌊(K₂ − h)/log(K₂ − h)⌋`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecaySchedule {
    pub eta0: f64,
    pub h: usize,
    pub k2: usize,
    pub k2_prime: usize,
}

impl DecaySchedule {
    pub fn new(eta0: f64, h: usize, k2: usize) -> Result<Self> {
        Self::with_log_base(eta0, h, k2, LogBase::Natural)
    }

    pub fn with_log_base(eta0: f64, h: usize, k2: usize, base: LogBase) -> Result<Self> {
        if !(eta0 > 0.0 && eta0.is_finite()) {
            return invalid(format!("eta0 must be positive, got {eta0}"));
        }
        if k2 < h + 2 {
            return invalid(format!("need k2 - h >= 2, got k2={k2}, h={h}"));
        }
        let span = (k2 - h) as f64;
        let k2_prime = (span / base.log(span)).floor() as usize;
        if k2_prime == 0 {
            return invalid(format!("decay block length is zero for k2={k2}, h={h}"));
        }
        Ok(Self { eta0, h, k2, k2_prime })
    }

    /// Warm-up length `h = ⌈0.1·K₂⌉`.
    pub fn default_h(k2: usize) -> usize {
        (0.1 * k2 as f64).ceil() as usize
    }

    pub fn step_size(&self, tau: usize) -> Result<f64> {
        if tau >= self.k2 {
            return invalid(format!("tau {tau} outside [0, {})", self.k2));
        }
        if tau <= self.k2_prime + self.h {
            return Ok(self.eta0);
        }
        let l = (tau - self.h) / self.k2_prime;
        Ok(self.eta0 / 2f64.powi(l as i32))
    }
}

/// `1/(2·α·tr(B̂ᵀHB̂))` with the Gaussian moment constant `α = 3`.
pub fn default_eta0(b_hat: &Matrix, h_cov: &Matrix) -> Result<f64> {
    if h_cov.shape() != (b_hat.rows(), b_hat.rows()) {
        return invalid("covariance does not match the representation");
    }
    let tr = b_hat.t_matmul(&h_cov.matmul(b_hat)).trace();
    eta0_from_trace(tr)
}

/// [`default_eta0`] with `tr(B̂ᵀHB̂)` replaced by its sample mean
/// `(1/n)Σ‖B̂ᵀx_i‖²` over held-out covariates.
pub fn default_eta0_plugin(b_hat: &Matrix, covariates: &[Vec<f64>]) -> Result<f64> {
    if covariates.is_empty() {
        return invalid("need at least one held-out covariate");
    }
    let tr = covariates
        .iter()
        .map(|x| {
            let z = b_hat.t_matvec(x);
            dot(&z, &z)
        })
        .sum::<f64>()
        / covariates.len() as f64;
    eta0_from_trace(tr)
}

fn eta0_from_trace(tr: f64) -> Result<f64> {
    if !(tr > 0.0 && tr.is_finite()) {
        return invalid(format!("trace of the projected covariance must be positive, got {tr}"));
    }
    Ok(1.0 / (2.0 * GAUSSIAN_MOMENT_CONSTANT * tr))
}

/// Everything needed to evaluate the exact population excess risk.
#[derive(Debug, Clone)]
pub struct RiskOracle {
    /// `B*·w*` of the target task
    pub regressor: Vec<f64>,
    pub h_cov: Matrix,
}

impl RiskOracle {
    pub fn new(gt: &GroundTruth, w_target: &[f64], h_cov: &Matrix) -> Result<Self> {
        if w_target.len() != gt.k {
            return invalid(format!("target weight must have length k={}", gt.k));
        }
        check_psd(h_cov, gt.d)?;
        Ok(Self {
            regressor: gt.b_star.matvec(w_target),
            h_cov: h_cov.clone(),
        })
    }

    /// `½(B̂w − B*w*)ᵀ H (B̂w − B*w*)`
    pub fn excess_risk(&self, b_hat: &Matrix, w: &[f64]) -> Result<f64> {
        if b_hat.rows() != self.regressor.len() || b_hat.cols() != w.len() {
            return invalid("representation and weight do not match the target task");
        }
        let diff: Vec<f64> = b_hat
            .matvec(w)
            .iter()
            .zip(&self.regressor)
            .map(|(a, b)| a - b)
            .collect();
        Ok(0.5 * dot(&diff, &self.h_cov.matvec(&diff)).max(0.0))
    }
}

fn check_psd(h: &Matrix, d: usize) -> Result<()> {
    if h.shape() != (d, d) {
        return invalid(format!("covariance must be {d}x{d}"));
    }
    let (vals, _) = crate::numerics::symmetric_eigen(h)?;
    let scale = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if vals.iter().any(|v| *v < -1e-10 * scale.max(1.0)) {
        return invalid("covariance is not positive semi-definite");
    }
    Ok(())
}

pub fn excess_risk(b_hat: &Matrix, w: &[f64], gt: &GroundTruth, w_target: &[f64], h_cov: &Matrix) -> Result<f64> {
    RiskOracle::new(gt, w_target, h_cov)?.excess_risk(b_hat, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    pub w_final: Vec<f64>,
    /// `(iteration, excess risk)` at each checkpoint, including 0 and the end.
    pub excess_risk_trace: Vec<(usize, f64)>,
    pub samples_consumed: usize,
}

/// Checkpoints every `every` updates; `every = 0` picks `max(1, K₂/50)`.
#[derive(Debug, Clone)]
pub struct Checkpoints<'a> {
    pub every: usize,
    pub oracle: Option<&'a RiskOracle>,
}

/// Runs exactly `K₂ − 1` updates `w ← w − η_τ(⟨x, B̂w⟩ − y)·B̂ᵀx`, one fresh
/// sample each.
pub fn sgd_transfer<I>(
    b_hat: &Matrix,
    stream: I,
    sched: &DecaySchedule,
    w0: &[f64],
    checkpoints: &Checkpoints<'_>,
) -> Result<TransferResult>
where
    I: IntoIterator<Item = (Vec<f64>, f64)>,
{
    if !b_hat.is_finite() {
        return invalid("representation has non-finite entries");
    }
    if w0.len() != b_hat.cols() {
        return invalid(format!("w0 must have length k={}", b_hat.cols()));
    }
    let updates = sched.k2 - 1;
    let every = if checkpoints.every == 0 {
        (sched.k2 / 50).max(1)
    } else {
        checkpoints.every
    };
    let mut w = w0.to_vec();
    let mut trace = Vec::new();
    let checkpoint = |tau: usize, w: &[f64], trace: &mut Vec<(usize, f64)>| -> Result<()> {
        if let Some(oracle) = checkpoints.oracle {
            trace.push((tau, oracle.excess_risk(b_hat, w)?));
        }
        Ok(())
    };
    checkpoint(0, &w, &mut trace)?;
    let mut samples = stream.into_iter();
    for tau in 0..updates {
        let (x, y) = samples.next().ok_or(Error::InsufficientData {
            needed: updates,
            got: tau,
        })?;
        if x.len() != b_hat.rows() {
            return invalid(format!("sample {tau} has dimension {}, expected {}", x.len(), b_hat.rows()));
        }
        let z = b_hat.t_matvec(&x);
        let residual = dot(&z, &w) - y;
        let eta = sched.step_size(tau)?;
        for (wi, zi) in w.iter_mut().zip(&z) {
            *wi -= eta * residual * zi;
        }
        let done = tau + 1;
        if done % every == 0 || done == updates {
            checkpoint(done, &w, &mut trace)?;
        }
    }
    Ok(TransferResult {
        w_final: w,
        excess_risk_trace: trace,
        samples_consumed: updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::synthdata::{make_ground_truth, random_target_weight, sample_target_stream};

    #[test]
    fn worked_schedule() {
        let s = DecaySchedule::new(0.1, 10, 110).unwrap();
        assert_eq!(s.k2_prime, 21);
        assert_eq!(s.step_size(0).unwrap(), 0.1);
        assert_eq!(s.step_size(31).unwrap(), 0.1);
        assert_eq!(s.step_size(32).unwrap(), 0.05);
        assert!(s.step_size(110).is_err());
    }

    #[test]
    fn schedule_is_non_increasing() {
        let s = DecaySchedule::new(1.0, 37, 5000).unwrap();
        let steps: Vec<f64> = (0..5000).map(|t| s.step_size(t).unwrap()).collect();
        assert!(steps.windows(2).all(|p| p[1] <= p[0]));
        assert!(steps.windows(2).all(|p| p[1] == p[0] || p[1] == p[0] / 2.0));
    }

    #[test]
    fn schedule_rejects_bad_budgets() {
        assert!(DecaySchedule::new(0.1, 10, 11).is_err());
        assert!(DecaySchedule::new(0.0, 1, 100).is_err());
        assert!(DecaySchedule::new(0.1, 0, 1).is_err());
        assert_eq!(DecaySchedule::new(0.1, 0, 2).unwrap().k2_prime, 2);
        let two = DecaySchedule::with_log_base(0.1, 10, 110, LogBase::Two).unwrap();
        assert_eq!(two.k2_prime, 15);
    }

    #[test]
    fn hand_update() {
        let b = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let sched = DecaySchedule { eta0: 0.5, h: 0, k2: 2, k2_prime: 1 };
        let cp = Checkpoints { every: 1, oracle: None };
        let res = sgd_transfer(&b, vec![(vec![1.0], 1.0)], &sched, &[0.0], &cp).unwrap();
        assert_eq!(res.w_final, vec![0.5]);
        assert_eq!(res.samples_consumed, 1);
    }

    #[test]
    fn exhausted_stream() {
        let b = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let sched = DecaySchedule::new(0.1, 1, 20).unwrap();
        let cp = Checkpoints { every: 0, oracle: None };
        let err = sgd_transfer(&b, vec![(vec![1.0], 1.0); 5], &sched, &[0.0], &cp).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { needed: 19, got: 5 }));
    }

    #[test]
    fn fixed_point_at_truth() {
        let gt = make_ground_truth(6, 2, 3, &[2.0, 1.0], 0.0, &mut SeededRng::new(1, 0)).unwrap();
        let w_t = random_target_weight(&gt, &mut SeededRng::new(1, 1));
        let h = Matrix::identity(6);
        let stream = sample_target_stream(&gt, &w_t, &h, 199, SeededRng::new(1, 2)).unwrap();
        let oracle = RiskOracle::new(&gt, &w_t, &h).unwrap();
        let sched = DecaySchedule::new(0.05, 20, 200).unwrap();
        let cp = Checkpoints { every: 0, oracle: Some(&oracle) };
        let res = sgd_transfer(&gt.b_star, stream, &sched, &w_t, &cp).unwrap();
        for (a, b) in res.w_final.iter().zip(&w_t) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(res.excess_risk_trace.iter().all(|(_, r)| *r < 1e-26));
        assert_eq!(res.excess_risk_trace.first().unwrap().0, 0);
        assert_eq!(res.excess_risk_trace.last().unwrap().0, 199);
    }

    #[test]
    fn risk_examples() {
        let gt = make_ground_truth(3, 1, 2, &[1.0], 0.0, &mut SeededRng::new(2, 0)).unwrap();
        let w_t = vec![1.0];
        let h = Matrix::identity(3);
        assert!(excess_risk(&gt.b_star, &w_t, &gt, &w_t, &h).unwrap() < 1e-30);
        // B̂w − B*w* = e₁
        let target = gt.b_star.matvec(&w_t);
        let mut shifted = target.clone();
        shifted[0] += 1.0;
        let b_hat = Matrix::column_vector(&shifted);
        assert!((excess_risk(&b_hat, &[1.0], &gt, &w_t, &h).unwrap() - 0.5).abs() < 1e-12);
        let not_psd = Matrix::diag(&[1.0, -1.0, 1.0]);
        assert!(excess_risk(&b_hat, &[1.0], &gt, &w_t, &not_psd).is_err());
    }

    #[test]
    fn eta0_defaults() {
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let eta = default_eta0(&b, &Matrix::identity(2)).unwrap();
        assert!((eta - 1.0 / 12.0).abs() < 1e-15);
        let plug = default_eta0_plugin(&b, &[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        assert!((plug - 1.0 / 12.0).abs() < 1e-15);
        assert!(default_eta0_plugin(&b, &[]).is_err());
    }
}
