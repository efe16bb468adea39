//! Multi-task objectives and their analytic gradients.
//!
//! * data fit: `(1/2N) Σ_t ‖y_t − X_tᵀ·B·w_t‖²`
//! * balanced: data fit `+ (1/8)‖BᵀB − WWᵀ‖_F²`
//! * tripuraneni: data fit `+ (1/2)‖BᵀB − WWᵀ‖_F²`

use crate::error::{invalid, Result};
use crate::numerics::{axpy, dot, Matrix};
use crate::synthdata::MultiTaskDataset;

/// Shared representation `B` (d × k) and task weights `W` (k × T).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub b: Matrix,
    pub w: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub gb: Matrix,
    pub gw: Matrix,
}

impl FactorPair {
    pub fn new(b: Matrix, w: Matrix) -> Result<Self> {
        if b.cols() != w.rows() {
            return invalid(format!(
                "factor shapes disagree: B is {:?}, W is {:?}",
                b.shape(),
                w.shape()
            ));
        }
        Ok(Self { b, w })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.b.rows(), self.b.cols(), self.w.cols())
    }

    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.w)
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.w.is_finite()
    }

    /// `BᵀB − WWᵀ`
    pub fn gap(&self) -> Matrix {
        self.b.t_matmul(&self.b).sub(&self.w.matmul_t(&self.w))
    }

    /// `‖BᵀB − WWᵀ‖_F`
    pub fn balance_gap(&self) -> f64 {
        self.gap().frobenius_norm()
    }

    /// `self −= step · grad`
    pub fn descend(&mut self, step: f64, grad: &GradPair) {
        self.b.add_scaled(-step, &grad.gb);
        self.w.add_scaled(-step, &grad.gw);
    }
}

impl GradPair {
    pub fn zeros_like(fp: &FactorPair) -> Self {
        Self {
            gb: Matrix::zeros(fp.b.rows(), fp.b.cols()),
            gw: Matrix::zeros(fp.w.rows(), fp.w.cols()),
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &GradPair) {
        self.gb.add_scaled(alpha, &other.gb);
        self.gw.add_scaled(alpha, &other.gw);
    }
}

/// Which loss a gradient step descends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    DataFit,
    Balanced,
    Tripuraneni,
}

impl Objective {
    /// Coefficient on `‖BᵀB − WWᵀ‖_F²`.
    pub fn balance_coefficient(self) -> f64 {
        match self {
            Objective::DataFit => 0.0,
            Objective::Balanced => 0.125,
            Objective::Tripuraneni => 0.5,
        }
    }
}

fn check_shapes(fp: &FactorPair, data: &MultiTaskDataset) -> Result<()> {
    let (d, _, t) = fp.dims();
    if fp.b.cols() != fp.w.rows() || d != data.dim() || t != data.t_count() {
        return invalid(format!(
            "factors (B {:?}, W {:?}) do not fit a dataset with d={}, T={}",
            fp.b.shape(),
            fp.w.shape(),
            data.dim(),
            data.t_count()
        ));
    }
    Ok(())
}

/// `(1/2N) Σ_t ‖y_t − X_tᵀ·B·w_t‖²`, evaluated from explicit residuals.
pub fn loss_phase1(fp: &FactorPair, data: &MultiTaskDataset) -> Result<f64> {
    check_shapes(fp, data)?;
    let n = data.n_per_task as f64;
    let mut total = 0.0;
    for (t, task) in data.tasks.iter().enumerate() {
        let v = fp.b.matvec(&fp.w.column(t));
        let pred = task.x.t_matvec(&v);
        total += pred
            .iter()
            .zip(&task.y)
            .map(|(p, y)| (y - p) * (y - p))
            .sum::<f64>();
    }
    Ok(total / (2.0 * n))
}

pub fn grad_phase1(fp: &FactorPair, data: &MultiTaskDataset) -> Result<GradPair> {
    check_shapes(fp, data)?;
    let n = data.n_per_task as f64;
    let mut grad = GradPair::zeros_like(fp);
    for (t, task) in data.tasks.iter().enumerate() {
        let w_t = fp.w.column(t);
        let v = fp.b.matvec(&w_t);
        let residual: Vec<f64> = task
            .x
            .t_matvec(&v)
            .iter()
            .zip(&task.y)
            .map(|(p, y)| (p - y) / n)
            .collect();
        let g_t = task.x.matvec(&residual);
        accumulate_task_gradient(&mut grad, &fp.b, &w_t, &g_t, t);
    }
    Ok(grad)
}

/// Adds task `t`'s contribution given `g_t = (1/N)·X_t·(X_tᵀ·B·w_t − y_t)`.
fn accumulate_task_gradient(grad: &mut GradPair, b: &Matrix, w_t: &[f64], g_t: &[f64], t: usize) {
    for (i, gi) in g_t.iter().enumerate() {
        for (j, wj) in w_t.iter().enumerate() {
            grad.gb[(i, j)] += gi * wj;
        }
    }
    for (j, v) in b.t_matvec(g_t).into_iter().enumerate() {
        grad.gw[(j, t)] = v;
    }
}

/// `(1/8)‖BᵀB − WWᵀ‖_F²`
pub fn balance_regularizer(fp: &FactorPair) -> f64 {
    penalty(fp, Objective::Balanced.balance_coefficient())
}

/// Gradient of [`balance_regularizer`]: `(½B·Δ, ½(WWᵀ − BᵀB)·W)` with `Δ = BᵀB − WWᵀ`.
pub fn grad_balance(fp: &FactorPair) -> GradPair {
    penalty_grad(fp, Objective::Balanced.balance_coefficient())
}

fn penalty(fp: &FactorPair, coef: f64) -> f64 {
    if coef == 0.0 {
        return 0.0;
    }
    coef * fp.gap().frobenius_norm_sq()
}

pub(crate) fn penalty_grad(fp: &FactorPair, coef: f64) -> GradPair {
    if coef == 0.0 {
        return GradPair::zeros_like(fp);
    }
    let gap = fp.gap();
    GradPair {
        gb: fp.b.matmul(&gap).scale(4.0 * coef),
        gw: gap.matmul(&fp.w).scale(-4.0 * coef),
    }
}

pub fn loss_phase2(fp: &FactorPair, data: &MultiTaskDataset) -> Result<f64> {
    objective_value(Objective::Balanced, fp, data)
}

pub fn grad_phase2(fp: &FactorPair, data: &MultiTaskDataset) -> Result<GradPair> {
    objective_grad(Objective::Balanced, fp, data)
}

pub fn loss_tripuraneni(fp: &FactorPair, data: &MultiTaskDataset) -> Result<f64> {
    objective_value(Objective::Tripuraneni, fp, data)
}

pub fn grad_tripuraneni(fp: &FactorPair, data: &MultiTaskDataset) -> Result<GradPair> {
    objective_grad(Objective::Tripuraneni, fp, data)
}

pub fn objective_value(obj: Objective, fp: &FactorPair, data: &MultiTaskDataset) -> Result<f64> {
    Ok(loss_phase1(fp, data)? + penalty(fp, obj.balance_coefficient()))
}

pub fn objective_grad(obj: Objective, fp: &FactorPair, data: &MultiTaskDataset) -> Result<GradPair> {
    let mut g = grad_phase1(fp, data)?;
    g.add_scaled(1.0, &penalty_grad(fp, obj.balance_coefficient()));
    Ok(g)
}

/// Per-task second moments `X_t·X_tᵀ/N`, `X_t·y_t/N` and `‖y_t‖²/N`.
///
/// Evaluates the same objectives as the residual-based functions at a cost
/// independent of N; solvers iterate on this form.
#[derive(Debug, Clone)]
pub struct TaskMoments {
    d: usize,
    gram: Vec<Matrix>,
    cross: Vec<Vec<f64>>,
    y_sq: Vec<f64>,
}

impl TaskMoments {
    pub fn new(data: &MultiTaskDataset) -> Self {
        let n = data.n_per_task as f64;
        let d = data.dim();
        let mut gram = Vec::with_capacity(data.t_count());
        let mut cross = Vec::with_capacity(data.t_count());
        let mut y_sq = Vec::with_capacity(data.t_count());
        for task in &data.tasks {
            let mut g = task.x.matmul_t(&task.x);
            g.as_mut_slice().iter_mut().for_each(|v| *v /= n);
            gram.push(g);
            cross.push(task.x.matvec(&task.y).into_iter().map(|v| v / n).collect());
            y_sq.push(dot(&task.y, &task.y) / n);
        }
        Self { d, gram, cross, y_sq }
    }

    pub fn t_count(&self) -> usize {
        self.gram.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    fn check(&self, fp: &FactorPair) -> Result<()> {
        let (d, _, t) = fp.dims();
        if d != self.d || t != self.t_count() {
            return invalid(format!(
                "factors (B {:?}, W {:?}) do not fit d={}, T={}",
                fp.b.shape(),
                fp.w.shape(),
                self.d,
                self.t_count()
            ));
        }
        Ok(())
    }

    /// Data-fit value and gradient in one pass.
    pub fn data_fit(&self, fp: &FactorPair) -> Result<(f64, GradPair)> {
        self.check(fp)?;
        let mut grad = GradPair::zeros_like(fp);
        let mut value = 0.0;
        for t in 0..self.t_count() {
            let w_t = fp.w.column(t);
            let v = fp.b.matvec(&w_t);
            let sv = self.gram[t].matvec(&v);
            value += 0.5 * dot(&v, &sv) - dot(&self.cross[t], &v) + 0.5 * self.y_sq[t];
            let mut g_t = sv;
            axpy(-1.0, &self.cross[t], &mut g_t);
            accumulate_task_gradient(&mut grad, &fp.b, &w_t, &g_t, t);
        }
        Ok((value.max(0.0), grad))
    }

    pub fn loss_phase1(&self, fp: &FactorPair) -> Result<f64> {
        Ok(self.data_fit(fp)?.0)
    }

    /// Objective value and gradient.
    pub fn evaluate(&self, obj: Objective, fp: &FactorPair) -> Result<(f64, GradPair)> {
        let (mut value, mut grad) = self.data_fit(fp)?;
        let coef = obj.balance_coefficient();
        value += penalty(fp, coef);
        grad.add_scaled(1.0, &penalty_grad(fp, coef));
        Ok((value, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, SeededRng};
    use crate::synthdata::{make_ground_truth, sample_tasks, TaskData};

    fn scalar_data(x: f64, y: f64) -> MultiTaskDataset {
        MultiTaskDataset::new(
            vec![TaskData {
                x: Matrix::from_vec(1, 1, vec![x]).unwrap(),
                y: vec![y],
            }],
            0.0,
        )
        .unwrap()
    }

    fn scalar_pair(b: f64, w: f64) -> FactorPair {
        FactorPair::new(
            Matrix::from_vec(1, 1, vec![b]).unwrap(),
            Matrix::from_vec(1, 1, vec![w]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn hand_evaluated_loss() {
        let data = scalar_data(2.0, 3.0);
        let fp = scalar_pair(1.0, 0.5);
        assert_eq!(loss_phase1(&fp, &data).unwrap(), 2.0);
    }

    #[test]
    fn hand_evaluated_gradient() {
        let data = scalar_data(1.0, 1.0);
        let fp = scalar_pair(1.0, 0.0);
        let g = grad_phase1(&fp, &data).unwrap();
        assert_eq!(g.gb[(0, 0)], 0.0);
        assert_eq!(g.gw[(0, 0)], -1.0);
    }

    #[test]
    fn zero_at_truth() {
        let gt = make_ground_truth(6, 2, 4, &[2.0, 1.0], 0.0, &mut SeededRng::new(1, 0)).unwrap();
        let data = sample_tasks(&gt, 30, &mut SeededRng::new(1, 1)).unwrap();
        let fp = FactorPair::new(gt.b_star.clone(), gt.w_star.clone()).unwrap();
        assert!(loss_phase1(&fp, &data).unwrap() < 1e-26);
        assert!(loss_phase2(&fp, &data).unwrap() < 1e-20);
        let g = grad_phase2(&fp, &data).unwrap();
        assert!(g.gb.frobenius_norm() < 1e-12 && g.gw.frobenius_norm() < 1e-12);
    }

    #[test]
    fn quadratic_homogeneity() {
        let data = scalar_data(1.0, 3.0);
        let base = loss_phase1(&scalar_pair(1.0, 1.0), &data).unwrap(); // residual 2
        let doubled = loss_phase1(&scalar_pair(1.0, -1.0), &data).unwrap(); // residual 4
        assert_eq!(doubled, 4.0 * base);
    }

    #[test]
    fn balance_hand_example() {
        let fp = FactorPair::new(
            Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(balance_regularizer(&fp), 0.125);
        let g = grad_balance(&fp);
        assert_eq!(g.gb.as_slice(), &[-0.5, 0.0]);
        assert_eq!(g.gw.as_slice(), &[0.5, 0.5]);
        assert_eq!(penalty(&fp, Objective::Tripuraneni.balance_coefficient()), 0.5);
    }

    #[test]
    fn balanced_pair_has_no_penalty() {
        let fp = FactorPair::new(Matrix::identity(2), Matrix::identity(2)).unwrap();
        assert_eq!(balance_regularizer(&fp), 0.0);
        let g = grad_balance(&fp);
        assert_eq!(g.gb.frobenius_norm() + g.gw.frobenius_norm(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let data = scalar_data(1.0, 1.0);
        let fp = FactorPair::new(Matrix::zeros(2, 1), Matrix::zeros(1, 1)).unwrap();
        assert!(loss_phase1(&fp, &data).is_err());
        assert!(grad_phase1(&fp, &data).is_err());
        assert!(FactorPair::new(Matrix::zeros(2, 1), Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn moment_form_matches_residual_form() {
        let mut rng = SeededRng::new(3, 0);
        let gt = make_ground_truth(7, 2, 5, &[2.0, 1.0], 0.4, &mut rng).unwrap();
        let data = sample_tasks(&gt, 25, &mut rng).unwrap();
        let fp = FactorPair::new(
            gaussian_matrix(7, 2, 1.0, &mut rng).unwrap(),
            gaussian_matrix(2, 5, 1.0, &mut rng).unwrap(),
        )
        .unwrap();
        let moments = TaskMoments::new(&data);
        for obj in [Objective::DataFit, Objective::Balanced, Objective::Tripuraneni] {
            let (v, g) = moments.evaluate(obj, &fp).unwrap();
            let v_ref = objective_value(obj, &fp, &data).unwrap();
            let g_ref = objective_grad(obj, &fp, &data).unwrap();
            assert!((v - v_ref).abs() <= 1e-10 * v_ref.max(1.0));
            assert!(g.gb.sub(&g_ref.gb).frobenius_norm() <= 1e-10 * g_ref.gb.frobenius_norm());
            assert!(g.gw.sub(&g_ref.gw).frobenius_norm() <= 1e-10 * g_ref.gw.frobenius_norm());
        }
    }
}
