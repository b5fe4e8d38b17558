//! Quadratic objectives with L1 and optional L2 penalties,
//!
//! `F(ν) = νᵀAν − 2bᵀν + λ₁‖ν‖₁ + λ₂‖ν‖₂²`,
//!
//! solved by cyclic coordinate descent. Both the weighted squared loss and the
//! Riesz loss of the locally linear class reduce to this form, so a single
//! solver serves node-level fits and the per-point forest lassos.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{DrrfError, Result};
use crate::scalar::Scalar;

static SOLVER_INVOCATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of calls to [`solve`] made by this process so far.
pub fn solver_invocations() -> u64 {
    SOLVER_INVOCATIONS.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadLassoProblem<T> {
    dim: usize,
    /// Row-major `dim × dim`.
    a: Vec<T>,
    b: Vec<T>,
    lambda1: T,
    lambda2: T,
}

impl<T: Scalar> QuadLassoProblem<T> {
    pub fn new(a: Vec<T>, b: Vec<T>, lambda1: T, lambda2: T) -> Result<Self> {
        let dim = b.len();
        if a.len() != dim * dim {
            return Err(DrrfError::Shape(format!(
                "A has {} entries, expected {dim}x{dim}",
                a.len()
            )));
        }
        if !(lambda1 >= T::zero()) || !(lambda2 >= T::zero()) {
            return Err(DrrfError::Config("penalties must be non-negative".into()));
        }
        let scale = a.iter().fold(T::one(), |m, v| m.max(v.abs()));
        let tol = T::lit(1e-12) * scale;
        for i in 0..dim {
            if !(a[i * dim + i] >= T::zero()) {
                return Err(DrrfError::Domain(format!("A[{i},{i}] is negative")));
            }
            for j in i + 1..dim {
                if (a[i * dim + j] - a[j * dim + i]).abs() > tol {
                    return Err(DrrfError::Domain(format!("A is not symmetric at ({i},{j})")));
                }
            }
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(DrrfError::Domain("non-finite entry in A or b".into()));
        }
        Ok(Self {
            dim,
            a,
            b,
            lambda1,
            lambda2,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a(&self) -> &[T] {
        &self.a
    }

    pub fn b(&self) -> &[T] {
        &self.b
    }

    pub fn lambda1(&self) -> T {
        self.lambda1
    }

    pub fn lambda2(&self) -> T {
        self.lambda2
    }

    /// Same quadratic, different penalties.
    pub fn with_penalties(&self, lambda1: T, lambda2: T) -> Self {
        Self {
            lambda1,
            lambda2,
            ..self.clone()
        }
    }

    fn a_row(&self, j: usize) -> &[T] {
        &self.a[j * self.dim..(j + 1) * self.dim]
    }

    fn a_times(&self, nu: &[T]) -> Vec<T> {
        (0..self.dim)
            .map(|j| dot(self.a_row(j), nu))
            .collect()
    }

    pub fn objective(&self, nu: &[T]) -> T {
        let an = self.a_times(nu);
        self.objective_with(nu, &an)
    }

    fn objective_with(&self, nu: &[T], a_nu: &[T]) -> T {
        let quad = dot(nu, a_nu);
        let lin = dot(&self.b, nu);
        let l1 = nu.iter().fold(T::zero(), |s, v| s + v.abs());
        let l2 = dot(nu, nu);
        quad - T::lit(2.0) * lin + self.lambda1 * l1 + self.lambda2 * l2
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

/// Accumulates `Σ kᵢ wᵢwᵢᵀ`, filling the upper triangle only.
pub(crate) fn accumulate_gram<T: Scalar>(gram: &mut [T], w: &[T], k: T) {
    let p = w.len();
    for j in 0..p {
        let kw = k * w[j];
        if kw == T::zero() {
            continue;
        }
        let row = &mut gram[j * p + j..(j + 1) * p];
        for (g, &wl) in row.iter_mut().zip(&w[j..]) {
            *g = *g + kw * wl;
        }
    }
}

pub(crate) fn symmetrize_upper<T: Scalar>(gram: &mut [T], p: usize) {
    for j in 0..p {
        for l in j + 1..p {
            gram[l * p + j] = gram[j * p + l];
        }
    }
}

fn check_rows<T: Scalar>(rows: usize, weights: &[T]) -> Result<T> {
    if rows != weights.len() {
        return Err(DrrfError::Shape(format!(
            "{rows} rows but {} weights",
            weights.len()
        )));
    }
    if weights.iter().any(|k| !(*k >= T::zero()) || !k.is_finite()) {
        return Err(DrrfError::Domain("weights must be finite and non-negative".into()));
    }
    let total: T = weights.iter().copied().sum();
    if total <= T::zero() {
        return Err(DrrfError::DegenerateWeights);
    }
    Ok(total)
}

/// Weighted squared loss `Σ kᵢ (yᵢ − wᵢᵀν)²` as a quadratic problem:
/// `A = Σ kᵢ wᵢwᵢᵀ`, `b = Σ kᵢ yᵢ wᵢ`.
pub fn assemble_regression<T: Scalar>(
    rows: &[(&[T], T)],
    weights: &[T],
    lambda1: T,
    lambda2: T,
) -> Result<QuadLassoProblem<T>> {
    check_rows(rows.len(), weights)?;
    let p = rows.first().map_or(0, |r| r.0.len());
    let mut a = vec![T::zero(); p * p];
    let mut b = vec![T::zero(); p];
    for ((w, y), &k) in rows.iter().zip(weights) {
        if w.len() != p {
            return Err(DrrfError::Shape("rows have differing lengths".into()));
        }
        accumulate_gram(&mut a, w, k);
        for (bj, &wj) in b.iter_mut().zip(*w) {
            *bj = *bj + k * *y * wj;
        }
    }
    symmetrize_upper(&mut a, p);
    QuadLassoProblem::new(a, b, lambda1, lambda2)
}

/// Weighted Riesz loss `Σ kᵢ [(wᵢᵀν)² − 2 m̃ᵢᵀν]`:
/// `A = Σ kᵢ wᵢwᵢᵀ`, `b = Σ kᵢ m̃ᵢ`.
pub fn assemble_riesz<T: Scalar>(
    rows: &[(&[T], &[T])],
    weights: &[T],
    lambda1: T,
    lambda2: T,
) -> Result<QuadLassoProblem<T>> {
    check_rows(rows.len(), weights)?;
    let p = rows.first().map_or(0, |r| r.0.len());
    let mut a = vec![T::zero(); p * p];
    let mut b = vec![T::zero(); p];
    for ((w, mt), &k) in rows.iter().zip(weights) {
        if w.len() != p || mt.len() != p {
            return Err(DrrfError::Shape("rows have differing lengths".into()));
        }
        accumulate_gram(&mut a, w, k);
        for (bj, &mj) in b.iter_mut().zip(*mt) {
            *bj = *bj + k * mj;
        }
    }
    symmetrize_upper(&mut a, p);
    QuadLassoProblem::new(a, b, lambda1, lambda2)
}

#[derive(Clone, Debug)]
pub struct SolverSettings<T> {
    /// KKT residual tolerance.
    pub tol: T,
    /// Cap on coordinate sweeps (full and active-set sweeps both count).
    pub max_iter: usize,
    pub init: Option<Vec<T>>,
}

impl<T: Scalar> Default for SolverSettings<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-8),
            max_iter: 10_000,
            init: None,
        }
    }
}

impl<T: Scalar> SolverSettings<T> {
    pub fn warm(init: Vec<T>) -> Self {
        Self {
            init: Some(init),
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterReached,
}

#[derive(Clone, Debug)]
pub struct LassoSolution<T> {
    pub nu: Vec<T>,
    pub status: SolveStatus,
    pub sweeps: usize,
    pub kkt: T,
}

fn soft_threshold<T: Scalar>(v: T, t: T) -> T {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        T::zero()
    }
}

/// Largest distance from zero to the subgradient of `F` at `nu`, over coordinates.
pub fn kkt_residual<T: Scalar>(problem: &QuadLassoProblem<T>, nu: &[T]) -> T {
    let a_nu = problem.a_times(nu);
    kkt_with(problem, nu, &a_nu)
}

fn kkt_with<T: Scalar>(problem: &QuadLassoProblem<T>, nu: &[T], a_nu: &[T]) -> T {
    let two = T::lit(2.0);
    let mut worst = T::zero();
    for j in 0..problem.dim {
        let grad = two * (a_nu[j] - problem.b[j] + problem.lambda2 * nu[j]);
        let r = if nu[j] > T::zero() {
            (grad + problem.lambda1).abs()
        } else if nu[j] < T::zero() {
            (grad - problem.lambda1).abs()
        } else {
            (grad.abs() - problem.lambda1).max(T::zero())
        };
        worst = worst.max(r);
    }
    worst
}

/// Minimizes the problem by cyclic coordinate descent.
///
/// The first pass and every convergence check sweep all coordinates; in
/// between, sweeps are restricted to the current nonzero set.
pub fn solve<T: Scalar>(
    problem: &QuadLassoProblem<T>,
    settings: &SolverSettings<T>,
) -> Result<LassoSolution<T>> {
    SOLVER_INVOCATIONS.fetch_add(1, Ordering::Relaxed);
    let p = problem.dim;
    if !(settings.tol > T::zero()) || settings.max_iter == 0 {
        return Err(DrrfError::Config("tol must be positive and max_iter ≥ 1".into()));
    }
    let half_l1 = problem.lambda1 / T::lit(2.0);
    let mut nu = match &settings.init {
        Some(init) if init.len() == p => init.clone(),
        Some(init) => {
            return Err(DrrfError::Shape(format!(
                "warm start has length {}, expected {p}",
                init.len()
            )))
        }
        None => vec![T::zero(); p],
    };
    for j in 0..p {
        let denom = problem.a[j * p + j] + problem.lambda2;
        if denom <= T::zero() {
            // The coordinate is decoupled; it stays bounded only while the
            // penalty dominates the linear term.
            let free = problem.b[j] - dot(problem.a_row(j), &nu) + problem.a[j * p + j] * nu[j];
            if free.abs() > half_l1 {
                return Err(DrrfError::Unbounded { coordinate: j });
            }
            nu[j] = T::zero();
        }
    }
    let mut a_nu = problem.a_times(&nu);

    let mut sweeps = 0;
    #[cfg(debug_assertions)]
    let mut last_obj = problem.objective_with(&nu, &a_nu);

    let update = |j: usize, nu: &mut [T], a_nu: &mut [T]| -> T {
        let ajj = problem.a[j * p + j];
        let denom = ajj + problem.lambda2;
        if denom <= T::zero() {
            return T::zero();
        }
        let c = problem.b[j] - (a_nu[j] - ajj * nu[j]);
        let new = soft_threshold(c, half_l1) / denom;
        let delta = new - nu[j];
        if delta != T::zero() {
            nu[j] = new;
            for (an, &a) in a_nu.iter_mut().zip(problem.a_row(j)) {
                *an = *an + a * delta;
            }
        }
        delta.abs()
    };

    let mut status = SolveStatus::MaxIterReached;
    let mut kkt = T::infinity();
    'outer: while sweeps < settings.max_iter {
        for j in 0..p {
            update(j, &mut nu, &mut a_nu);
        }
        sweeps += 1;
        #[cfg(debug_assertions)]
        {
            let obj = problem.objective_with(&nu, &a_nu);
            debug_assert!(
                obj <= last_obj + T::lit(1e-9) * (T::one() + last_obj.abs()),
                "coordinate descent increased the objective"
            );
            last_obj = obj;
        }
        kkt = kkt_with(problem, &nu, &a_nu);
        if kkt <= settings.tol {
            // Drift in the running product is checked against a fresh one.
            a_nu = problem.a_times(&nu);
            kkt = kkt_with(problem, &nu, &a_nu);
            if kkt <= settings.tol {
                status = SolveStatus::Converged;
                break;
            }
        }
        let active: Vec<usize> = (0..p).filter(|&j| nu[j] != T::zero()).collect();
        if active.is_empty() {
            continue;
        }
        loop {
            if sweeps >= settings.max_iter {
                break 'outer;
            }
            let mut max_delta = T::zero();
            for &j in &active {
                max_delta = max_delta.max(update(j, &mut nu, &mut a_nu));
            }
            sweeps += 1;
            #[cfg(debug_assertions)]
            {
                let obj = problem.objective_with(&nu, &a_nu);
                debug_assert!(
                    obj <= last_obj + T::lit(1e-9) * (T::one() + last_obj.abs()),
                    "coordinate descent increased the objective"
                );
                last_obj = obj;
            }
            let scale = nu.iter().fold(T::one(), |m, v| m.max(v.abs()));
            if max_delta <= settings.tol * T::lit(1e-2) * scale {
                break;
            }
        }
    }
    if status != SolveStatus::Converged {
        a_nu = problem.a_times(&nu);
        kkt = kkt_with(problem, &nu, &a_nu);
        if kkt <= settings.tol {
            status = SolveStatus::Converged;
        }
    }
    Ok(LassoSolution {
        nu,
        status,
        sweeps,
        kkt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_regression_row() {
        let w = [1.0, 0.0];
        let pr = assemble_regression(&[(&w[..], 2.0)], &[1.0], 0.0, 0.0).unwrap();
        assert_eq!(pr.a(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(pr.b(), &[2.0, 0.0]);
    }

    #[test]
    fn duplicated_rows_split_weight() {
        let w = [0.3, -1.2];
        let one = assemble_regression(&[(&w[..], 0.7)], &[1.0], 0.0, 0.0).unwrap();
        let two = assemble_regression(&[(&w[..], 0.7), (&w[..], 0.7)], &[0.5, 0.5], 0.0, 0.0)
            .unwrap();
        for (a, b) in one.a().iter().zip(two.a()).chain(one.b().iter().zip(two.b())) {
            let (a, b): (&f64, &f64) = (a, b);
            assert!((a - b).abs() < 1e-15f64);
        }
    }

    #[test]
    fn single_riesz_row() {
        let w = [1.0, 1.0];
        let m = [1.0, 0.0];
        let pr = assemble_riesz(&[(&w[..], &m[..])], &[1.0], 0.0, 0.0).unwrap();
        assert_eq!(pr.a(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(pr.b(), &[1.0, 0.0]);
    }

    #[test]
    fn zero_weights_are_degenerate() {
        let w = [1.0, 1.0];
        let m = [1.0, 0.0];
        let err = assemble_riesz(&[(&w[..], &m[..]), (&w[..], &m[..])], &[0.0, 0.0], 0.1, 0.0)
            .unwrap_err();
        assert!(matches!(err, DrrfError::DegenerateWeights));
        let err = assemble_regression(&[(&w[..], 1.0)], &[1.0, 2.0], 0.1, 0.0).unwrap_err();
        assert!(matches!(err, DrrfError::Shape(_)));
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let ws = (0..n)
            .map(|_| (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let ys = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ks = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        (ws, ys, ks)
    }

    #[test]
    fn regression_objective_matches_direct_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ws, ys, ks) = random_rows(&mut rng, 5, 3);
        let rows: Vec<(&[f64], f64)> = ws.iter().map(|w| &w[..]).zip(ys.iter().copied()).collect();
        let pr = assemble_regression(&rows, &ks, 0.0, 0.0).unwrap();
        let offset: f64 = ks.iter().zip(&ys).map(|(k, y)| k * y * y).sum();
        for _ in 0..20 {
            let nu: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let direct: f64 = ws
                .iter()
                .zip(&ys)
                .zip(&ks)
                .map(|((w, y), k)| k * (y - dot(w, &nu)).powi(2))
                .sum();
            assert!((pr.objective(&nu) + offset - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn riesz_objective_matches_direct_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (ws, _, ks) = random_rows(&mut rng, 5, 3);
        let ms: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let rows: Vec<(&[f64], &[f64])> = ws.iter().map(|w| &w[..]).zip(ms.iter().map(|m| &m[..])).collect();
        let pr = assemble_riesz(&rows, &ks, 0.0, 0.0).unwrap();
        for _ in 0..20 {
            let nu: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let direct: f64 = ws
                .iter()
                .zip(&ms)
                .zip(&ks)
                .map(|((w, m), k)| k * (dot(w, &nu).powi(2) - 2.0 * dot(m, &nu)))
                .sum();
            assert!((pr.objective(&nu) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn diagonal_soft_threshold() {
        let pr = QuadLassoProblem::<f64>::new(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.1], 0.2, 0.0).unwrap();
        let sol = solve(&pr, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!((sol.nu[0] - 0.9).abs() < 1e-10);
        assert_eq!(sol.nu[1], 0.0);
        assert!(kkt_residual(&pr, &sol.nu) <= 1e-12);
    }

    #[test]
    fn identity_without_penalty_returns_b() {
        let pr = QuadLassoProblem::new(vec![1.0, 0.0, 0.0, 1.0], vec![-0.4, 2.5], 0.0, 0.0).unwrap();
        let sol = solve(&pr, &SolverSettings::default()).unwrap();
        assert_eq!(sol.nu, vec![-0.4, 2.5]);
    }

    #[test]
    fn kkt_at_origin_by_hand() {
        let pr = QuadLassoProblem::new(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0], 0.0, 0.0).unwrap();
        assert_eq!(kkt_residual(&pr, &[0.0, 0.0]), 2.0);
    }

    #[test]
    fn kkt_is_permutation_invariant() {
        let a = vec![2.0, 0.3, -0.1, 0.3, 1.0, 0.2, -0.1, 0.2, 1.5];
        let b = vec![0.5, -1.0, 0.25];
        let nu = [0.1, -0.7, 0.0];
        let pr = QuadLassoProblem::new(a.clone(), b.clone(), 0.3, 0.01).unwrap();
        let perm = [2usize, 0, 1];
        let mut ap = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                ap[i * 3 + j] = a[perm[i] * 3 + perm[j]];
            }
        }
        let bp: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        let nup: Vec<f64> = perm.iter().map(|&i| nu[i]).collect();
        let pp = QuadLassoProblem::new(ap, bp, 0.3, 0.01).unwrap();
        assert!((kkt_residual(&pr, &nu) - kkt_residual(&pp, &nup)).abs() < 1e-15);
    }

    #[test]
    fn zero_diagonal_coordinates() {
        let pr = QuadLassoProblem::<f64>::new(vec![1.0, 0.0, 0.0, 0.0], vec![0.5, 0.05], 0.2, 0.0).unwrap();
        let sol = solve(&pr, &SolverSettings::default()).unwrap();
        assert_eq!(sol.nu[1], 0.0);
        assert!((sol.nu[0] - 0.4).abs() < 1e-12);

        let pr = QuadLassoProblem::new(vec![1.0, 0.0, 0.0, 0.0], vec![0.5, 0.5], 0.2, 0.0).unwrap();
        assert!(matches!(
            solve(&pr, &SolverSettings::default()),
            Err(DrrfError::Unbounded { coordinate: 1 })
        ));
        // Ridge makes the direction bounded again.
        let sol: LassoSolution<f64> = solve(&pr.with_penalties(0.2, 0.01), &SolverSettings::default()).unwrap();
        assert!((sol.nu[1] - 40.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_invalid_problems() {
        assert!(QuadLassoProblem::new(vec![1.0, 0.5, 0.0, 1.0], vec![0.0, 0.0], 0.0, 0.0).is_err());
        assert!(QuadLassoProblem::new(vec![-1.0], vec![0.0], 0.0, 0.0).is_err());
        assert!(QuadLassoProblem::new(vec![1.0], vec![0.0], -0.1, 0.0).is_err());
        assert!(QuadLassoProblem::new(vec![1.0], vec![0.0, 1.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn f32_problems_solve() {
        let pr = QuadLassoProblem::<f32>::new(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.1], 0.2, 0.0)
            .unwrap();
        let settings = SolverSettings {
            tol: 1e-5,
            ..SolverSettings::default()
        };
        let sol = solve(&pr, &settings).unwrap();
        assert!((sol.nu[0] - 0.9).abs() < 1e-6);
    }
}
