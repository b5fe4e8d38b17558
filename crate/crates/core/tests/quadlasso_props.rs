mod common;

use common::{grid_gap, random_problem, rng, PD_SHIFT};
use drrf::quadlasso::{assemble_regression, assemble_riesz, kkt_residual, solve, SolveStatus};
use drrf::{DrrfError, QuadLassoProblem, SolverSettings};
use proptest::prelude::*;
use rand::Rng;

fn solve_default(problem: &QuadLassoProblem) -> Vec<f64> {
    solve(problem, &SolverSettings::default()).unwrap().nu
}

#[test]
fn regression_objective_matches_direct_loss() {
    let mut r = rng(11);
    let p = 4;
    let ws: Vec<Vec<f64>> = (0..5).map(|_| (0..p).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
    let ys: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
    let ks: Vec<f64> = (0..5).map(|_| r.gen_range(0.0..1.0)).collect();
    let rows: Vec<(&[f64], f64)> = ws.iter().map(|w| w.as_slice()).zip(ys.iter().copied()).collect();
    let problem = assemble_regression(&rows, &ks, 0.0, 0.0).unwrap();
    let const_term: f64 = ks.iter().zip(&ys).map(|(k, y)| k * y * y).sum();
    for _ in 0..20 {
        let nu: Vec<f64> = (0..p).map(|_| r.gen_range(-2.0..2.0)).collect();
        let direct: f64 = ws
            .iter()
            .zip(&ys)
            .zip(&ks)
            .map(|((w, y), k)| {
                let fit: f64 = w.iter().zip(&nu).map(|(a, b)| a * b).sum();
                k * (y - fit).powi(2)
            })
            .sum();
        assert!((problem.objective(&nu) + const_term - direct).abs() < 1e-10);
    }
}

#[test]
fn riesz_objective_matches_direct_loss() {
    let mut r = rng(12);
    let p = 3;
    let ws: Vec<Vec<f64>> = (0..6).map(|_| (0..p).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
    let ms: Vec<Vec<f64>> = (0..6).map(|_| (0..p).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let ks: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
    let rows: Vec<(&[f64], &[f64])> = ws.iter().map(|w| w.as_slice()).zip(ms.iter().map(|m| m.as_slice())).collect();
    let problem = assemble_riesz(&rows, &ks, 0.0, 0.0).unwrap();
    for _ in 0..20 {
        let nu: Vec<f64> = (0..p).map(|_| r.gen_range(-2.0..2.0)).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let direct: f64 = ws
            .iter()
            .zip(&ms)
            .zip(&ks)
            .map(|((w, m), k)| k * (dot(w, &nu).powi(2) - 2.0 * dot(m, &nu)))
            .sum();
        assert!((problem.objective(&nu) - direct).abs() < 1e-10);
    }
}

#[test]
fn assembly_examples() {
    let w = [1.0, 0.0];
    let p = assemble_regression(&[(&w[..], 2.0)], &[1.0], 0.0, 0.0).unwrap();
    assert_eq!(p.a(), &[1.0, 0.0, 0.0, 0.0]);
    assert_eq!(p.b(), &[2.0, 0.0]);
    let twice = assemble_regression(&[(&w[..], 2.0), (&w[..], 2.0)], &[0.5, 0.5], 0.0, 0.0).unwrap();
    assert_eq!(twice, p);

    let w = [1.0, 1.0];
    let m = [1.0, 0.0];
    let p = assemble_riesz(&[(&w[..], &m[..])], &[1.0], 0.0, 0.0).unwrap();
    assert_eq!(p.a(), &[1.0, 1.0, 1.0, 1.0]);
    assert_eq!(p.b(), &[1.0, 0.0]);
    assert!(matches!(
        assemble_riesz(&[(&w[..], &m[..])], &[0.0], 0.0, 0.0),
        Err(DrrfError::DegenerateWeights)
    ));
    assert!(matches!(
        assemble_regression(&[(&w[..], 1.0)], &[1.0, 1.0], 0.0, 0.0),
        Err(DrrfError::Shape(_))
    ));
}

#[test]
fn diagonal_problems_match_soft_threshold() {
    let mut r = rng(13);
    for _ in 0..100 {
        let p = r.gen_range(1..6);
        let b: Vec<f64> = (0..p).map(|_| r.gen_range(-3.0..3.0)).collect();
        let l1 = r.gen_range(0.0..2.0);
        let mut a = vec![0.0; p * p];
        for j in 0..p {
            a[j * p + j] = 1.0;
        }
        let problem = QuadLassoProblem::new(a, b.clone(), l1, 0.0).unwrap();
        let nu = solve_default(&problem);
        for j in 0..p {
            let expected = b[j].signum() * (b[j].abs() - l1 / 2.0).max(0.0);
            assert!((nu[j] - expected).abs() <= 1e-10, "{} vs {expected}", nu[j]);
        }
    }
    let problem = QuadLassoProblem::new(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.1], 0.2, 0.0).unwrap();
    let nu = solve_default(&problem);
    assert!((nu[0] - 0.9).abs() < 1e-12 && nu[1] == 0.0);
    assert!(kkt_residual(&problem, &nu) <= 1e-12);
}

#[test]
fn kkt_examples() {
    let problem = QuadLassoProblem::new(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0], 0.0, 0.0).unwrap();
    assert_eq!(kkt_residual(&problem, &[0.0, 0.0]), 2.0);
    assert_eq!(solve_default(&problem), vec![1.0, 0.0]);
}

#[test]
fn kkt_residual_is_permutation_invariant() {
    let mut r = rng(14);
    for _ in 0..20 {
        let p = 4;
        let problem = random_problem(&mut r, p);
        let nu: Vec<f64> = (0..p).map(|_| r.gen_range(-1.0..1.0)).collect();
        let perm = [2usize, 0, 3, 1];
        let a: Vec<f64> = (0..p * p)
            .map(|k| problem.a()[perm[k / p] * p + perm[k % p]])
            .collect();
        let b: Vec<f64> = perm.iter().map(|&j| problem.b()[j]).collect();
        let nu_p: Vec<f64> = perm.iter().map(|&j| nu[j]).collect();
        let permuted = QuadLassoProblem::new(a, b, problem.lambda1(), problem.lambda2()).unwrap();
        let d = kkt_residual(&problem, &nu) - kkt_residual(&permuted, &nu_p);
        assert!(d.abs() < 1e-12);
    }
}

#[test]
fn large_penalty_gives_zero() {
    let mut r = rng(15);
    for _ in 0..50 {
        let p = r.gen_range(1..8);
        let problem = random_problem(&mut r, p);
        let bmax = problem.b().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let big = problem.with_penalties(2.0 * bmax + r.gen_range(0.0..1.0), 0.0);
        assert!(solve_default(&big).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn unbounded_direction_is_reported() {
    let problem = QuadLassoProblem::new(vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 2.0], 1.0, 0.0).unwrap();
    assert!(matches!(
        solve(&problem, &SolverSettings::default()),
        Err(DrrfError::Unbounded { coordinate: 1 })
    ));
    // The penalty dominates on the flat coordinate: it stays at zero.
    let bounded = problem.with_penalties(4.0, 0.0);
    assert_eq!(solve_default(&bounded)[1], 0.0);
}

#[test]
fn random_problems_meet_kkt_tolerance() {
    let mut r = rng(16);
    for _ in 0..100 {
        let p = r.gen_range(1..30);
        let problem = random_problem(&mut r, p);
        let sol = solve(&problem, &SolverSettings::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(kkt_residual(&problem, &sol.nu) <= 1e-8);
    }
}

#[test]
fn grid_oracle_agrees_for_small_problems() {
    let mut r = rng(17);
    for case in 0..100 {
        let p = 1 + case % 3;
        let problem = random_problem(&mut r, p);
        let (gap, _) = grid_gap(&problem, PD_SHIFT + problem.lambda2());
        assert!(gap.abs() <= 1e-3, "case {case}: gap {gap}");
    }
}

#[test]
fn warm_start_changes_only_iterations() {
    let mut r = rng(18);
    for _ in 0..30 {
        let p = r.gen_range(2..20);
        let problem = random_problem(&mut r, p);
        let cold = solve(&problem, &SolverSettings::default()).unwrap();
        let init: Vec<f64> = (0..p).map(|_| r.gen_range(-3.0..3.0)).collect();
        let warm = solve(&problem, &SolverSettings::warm(init)).unwrap();
        assert!(kkt_residual(&problem, &warm.nu) <= 1e-8);
        // Strictly convex: the fixed point is unique.
        for (a, b) in cold.nu.iter().zip(&warm.nu) {
            assert!((a - b).abs() < 1e-7);
        }
        let from_opt = solve(&problem, &SolverSettings::warm(cold.nu.clone())).unwrap();
        assert!(from_opt.sweeps <= cold.sweeps);
    }
}

#[test]
fn single_precision_problems_solve() {
    let problem = drrf::QuadLassoProblemF32::new(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.1], 0.2, 0.0).unwrap();
    let sol = solve(&problem, &drrf::quadlasso::SolverSettings { tol: 1e-5f32, ..Default::default() }).unwrap();
    assert!((sol.nu[0] - 0.9).abs() < 1e-6 && sol.nu[1] == 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_leaves_solution_unchanged(seed in any::<u64>(), p in 1usize..8, c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let problem = random_problem(&mut r, p);
        let scaled = QuadLassoProblem::new(
            problem.a().iter().map(|v| v * c).collect(),
            problem.b().iter().map(|v| v * c).collect(),
            problem.lambda1() * c,
            problem.lambda2() * c,
        ).unwrap();
        let tight = SolverSettings { tol: 1e-11, ..Default::default() };
        let base = solve(&problem, &tight).unwrap().nu;
        let other = solve(&scaled, &SolverSettings { tol: 1e-11 * c, ..Default::default() }).unwrap().nu;
        for (a, b) in base.iter().zip(&other) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn solution_never_worse_than_origin(seed in any::<u64>(), p in 1usize..10) {
        let mut r = rng(seed);
        let problem = random_problem(&mut r, p);
        let nu = solve_default(&problem);
        prop_assert!(problem.objective(&nu) <= problem.objective(&vec![0.0; p]) + 1e-12);
    }
}
