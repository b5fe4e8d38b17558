//! Shared oracles for the integration suites.
#![allow(dead_code)]

use drrf::quadlasso::{kkt_residual, solve};
use drrf::{MomentSpec, NuisancePair, QuadLassoProblem, SolverSettings};
use drrf::moments::{true_riesz_cate, Obs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random positive definite `p × p` matrix `MᵀM + εI`, row-major.
pub fn random_pd(rng: &mut ChaCha8Rng, p: usize, eps: f64) -> Vec<f64> {
    let m: Vec<f64> = (0..p * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut a = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..p {
                s += m[k * p + i] * m[k * p + j];
            }
            a[i * p + j] = s + if i == j { eps } else { 0.0 };
        }
    }
    a
}

/// Smallest eigenvalue shift used by [`random_problem`].
pub const PD_SHIFT: f64 = 0.1;

/// Random problem whose quadratic part has eigenvalues ≥ [`PD_SHIFT`].
pub fn random_problem(rng: &mut ChaCha8Rng, p: usize) -> QuadLassoProblem {
    let a = random_pd(rng, p, PD_SHIFT);
    let b = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let l1 = rng.gen_range(0.0..1.5);
    let l2 = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.1) } else { 0.0 };
    QuadLassoProblem::new(a, b, l1, l2).unwrap()
}

/// Exhaustive grid refinement for `p ≤ 3`: a coarse grid over a box known to
/// contain the minimizer, then local grids around the incumbent until the
/// pitch reaches 1e-4. `lambda_min` is a lower bound on the smallest
/// eigenvalue of `A + λ₂I`.
pub fn grid_minimum(problem: &QuadLassoProblem, lambda_min: f64) -> f64 {
    let p = problem.dim();
    assert!(p <= 3);
    let b_norm = problem.b().iter().map(|v| v * v).sum::<f64>().sqrt();
    // F(ν) ≥ λmin‖ν‖² − 2‖b‖‖ν‖, so F(ν) ≤ F(0) = 0 forces ‖ν‖ ≤ 2‖b‖/λmin.
    let mut half = 2.0 * b_norm / lambda_min + 1e-9;
    let steps = 40i64;
    let span = |j: usize| if j < p { steps } else { 0 };
    let mut center = [0.0f64; 3];
    let mut best = problem.objective(&center[..p]);
    loop {
        let pitch = half / steps as f64;
        let mut incumbent = center;
        for i in -span(0)..=span(0) {
            for j in -span(1)..=span(1) {
                for k in -span(2)..=span(2) {
                    let nu = [
                        center[0] + i as f64 * pitch,
                        center[1] + j as f64 * pitch,
                        center[2] + k as f64 * pitch,
                    ];
                    let f = problem.objective(&nu[..p]);
                    if f < best {
                        best = f;
                        incumbent = nu;
                    }
                }
            }
        }
        center = incumbent;
        if pitch <= 1e-4 {
            return best;
        }
        half = 10.0 * pitch;
    }
}

/// Solver objective minus grid objective, and the solver's KKT residual.
pub fn grid_gap(problem: &QuadLassoProblem, lambda_min: f64) -> (f64, f64) {
    let sol = solve(problem, &SolverSettings::default()).unwrap();
    let grid = grid_minimum(problem, lambda_min);
    (problem.objective(&sol.nu) - grid, kkt_residual(problem, &sol.nu))
}

/// Discrete instance at a fixed `x`: `W = (D, X̃₁, X̃₂)` with binary entries.
pub struct DiscreteInstance {
    /// `ℙ(X̃ = c)` for the four control cells.
    pub cell: [f64; 4],
    /// Propensity per control cell.
    pub e: [f64; 4],
    /// `g₀(w)` per support point, indexed `4d + c`.
    pub g0: [f64; 8],
}

pub struct Point {
    pub prob: f64,
    pub w: [f64; 3],
    pub alpha0: f64,
    pub g0: f64,
}

impl DiscreteInstance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut cell = [0.0; 4];
        let mut e = [0.0; 4];
        let mut g0 = [0.0; 8];
        for c in 0..4 {
            cell[c] = raw[c] / total;
            e[c] = rng.gen_range(0.1..0.9);
        }
        for v in g0.iter_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
        Self { cell, e, g0 }
    }

    pub fn points(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(8);
        for d in 0..2 {
            for c in 0..4 {
                let df = d as f64;
                let e = self.e[c];
                out.push(Point {
                    prob: self.cell[c] * if d == 1 { e } else { 1.0 - e },
                    w: [df, (c & 1) as f64, (c >> 1) as f64],
                    alpha0: true_riesz_cate(e, df).unwrap(),
                    g0: self.g0[4 * d + c],
                });
            }
        }
        out
    }

    /// `θ₀ = E[g₀(1, X̃) − g₀(0, X̃)]`.
    pub fn theta0(&self) -> f64 {
        (0..4).map(|c| self.cell[c] * (self.g0[4 + c] - self.g0[c])).sum()
    }

    /// `E[ψ]` for linear nuisances, with `Y` replaced by its conditional mean `g₀(W)`
    /// (ψ is affine in `Y`).
    pub fn expected_psi(&self, spec: &MomentSpec, pair: &NuisancePair) -> f64 {
        let x = [0.5];
        self.points()
            .iter()
            .map(|pt| {
                let z = Obs { y: pt.g0, x: &x, w: &pt.w };
                pt.prob * spec.psi(&z, pair).unwrap()
            })
            .sum()
    }

    /// `E[ψ]` at `α = α₀ + t·δα` and `g = g₀ + t·δg`, with `δα`, `δg` linear in `w`.
    pub fn expected_psi_perturbed(&self, spec: &MomentSpec, t_g: f64, dg: &[f64], t_a: f64, da: &[f64]) -> f64 {
        let x = [0.5];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let m_g0 = self.theta0();
        self.points()
            .iter()
            .map(|pt| {
                let z = Obs { y: pt.g0, x: &x, w: &pt.w };
                let scaled: Vec<f64> = dg.iter().map(|v| t_g * v).collect();
                let m_delta = spec.moment_value(&z, &scaled).unwrap();
                let g = pt.g0 + t_g * dot(&pt.w, dg);
                let alpha = pt.alpha0 + t_a * dot(&pt.w, da);
                pt.prob * (m_delta + alpha * (pt.g0 - g))
            })
            .sum::<f64>()
            + m_g0
    }
}

use drrf::forest::{forest_weights, ForestKernel, Features, HonestTree, TreeNode};

/// Walks `tree`, routing its subsample through every node, and checks the
/// balance, leaf-size and threshold rules. Returns the number of leaves with
/// `≥ 2r` weighting observations.
pub fn check_tree(tree: &HonestTree, features: &Features, rho: f64, r: usize) -> usize {
    let mut oversized = 0;
    let mut stack = vec![(0usize, tree.subsample.s1.clone(), tree.subsample.s2.clone())];
    while let Some((id, s1, s2)) = stack.pop() {
        match tree.nodes[id] {
            TreeNode::Leaf { leaf } => {
                let mut members = tree.leaves[leaf].clone();
                members.sort_unstable();
                assert_eq!(members, s2, "leaf members differ from routed S²");
                assert!(s2.len() >= r, "leaf with {} < r weighting rows", s2.len());
                if s2.len() >= 2 * r {
                    oversized += 1;
                }
            }
            TreeNode::Split { feature, threshold, left, right } => {
                let at = |i: usize| features.row(i)[feature];
                let (l1, r1): (Vec<usize>, Vec<usize>) = s1.iter().partition(|&&i| at(i) <= threshold);
                let (l2, r2): (Vec<usize>, Vec<usize>) = s2.iter().partition(|&&i| at(i) <= threshold);
                let need = r.max((rho * s2.len() as f64).ceil() as usize);
                assert!(l2.len() >= need && r2.len() >= need, "unbalanced split {} / {} of {}", l2.len(), r2.len(), s2.len());
                assert!(!l1.is_empty() && !r1.is_empty(), "child without S¹ rows");
                let lo = l1.iter().map(|&i| at(i)).fold(f64::NEG_INFINITY, f64::max);
                let hi = r1.iter().map(|&i| at(i)).fold(f64::INFINITY, f64::min);
                assert!(threshold == 0.5 * (lo + hi) || (threshold == lo && 0.5 * (lo + hi) >= hi), "threshold not a midpoint");
                stack.push((left, l1, l2));
                stack.push((right, r1, r2));
            }
        }
    }
    oversized
}

/// Zero weight on every tree's `S¹` rows, at `x`.
pub fn s1_weight_is_zero(tree: &HonestTree, x: &[f64]) -> bool {
    let w = drrf::forest::tree_weights(tree, x);
    w.indices.iter().all(|i| tree.subsample.s1.binary_search(i).is_err())
}

/// Mean over `xs` of the largest distance from `x` to a positively weighted training row.
pub fn kernel_radius(kernel: &ForestKernel, features: &Features, xs: &[Vec<f64>]) -> f64 {
    let total: f64 = xs
        .iter()
        .map(|x| {
            forest_weights(kernel, x)
                .iter()
                .filter(|&(_, k)| k > 0.0)
                .map(|(i, _)| {
                    features.row(i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                })
                .fold(0.0, f64::max)
        })
        .sum();
    total / xs.len() as f64
}

/// Uniform features on `[0, 1]^d`.
pub fn uniform_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Features {
    Features::new((0..n * d).map(|_| rng.gen_range(0.0..1.0)).collect(), d).unwrap()
}

/// Shrinkage trend for one seed: kernel radii at subsample sizes 200, 800, 3200.
pub fn shrinkage_radii(seed: u64) -> [f64; 3] {
    use drrf::forest::{FixedResponses, ForestParams};
    let mut r = rng(seed);
    let n = 4000;
    let features = uniform_features(&mut r, n, 2);
    let responses = FixedResponses((0..n).map(|_| r.gen_range(-1.0..1.0)).collect());
    let queries: Vec<Vec<f64>> = (0..50).map(|_| vec![r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)]).collect();
    let mut out = [0.0; 3];
    for (slot, s) in [200usize, 800, 3200].into_iter().enumerate() {
        let params = ForestParams {
            trees: 20,
            subsample_size: Some(s),
            pi: 0.5,
            seed,
            ..ForestParams::default()
        };
        let kernel = ForestKernel::grow(&features, &responses, &params).unwrap();
        out[slot] = kernel_radius(&kernel, &features, &queries);
    }
    out
}
