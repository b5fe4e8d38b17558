//! Pipeline-level Monte Carlo properties on binary setup 1 at full sample size.

use drrf::estimator::{fit, DrrfConfig, DrrfModel};
use drrf::moments::Obs;
use drrf::simharness::{eval_grid, generate, grid_rmse, DgpConfig, DgpFamily, Estimator};
use drrf::{Dataset, NuisancePair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rmse(model: &DrrfModel) -> f64 {
    let grid = eval_grid();
    let xs: Vec<Vec<f64>> = grid.iter().map(|&x| vec![x]).collect();
    let est: Vec<f64> = model.predict_batch(&xs).into_iter().map(|r| r.unwrap()).collect();
    grid_rmse(&grid, &est)
}

/// Recomputes the table after adding fixed perturbations to every stored pair.
fn perturbed(model: &DrrfModel, data: &Dataset, dg: Option<&[f64]>, da: Option<&[f64]>) -> DrrfModel {
    let spec = DgpFamily::Binary1.moment_spec();
    let add = |v: &[f64], d: Option<&[f64]>| -> Vec<f64> {
        match d {
            Some(d) => v.iter().zip(d).map(|(a, b)| a + b).collect(),
            None => v.to_vec(),
        }
    };
    let psi = model
        .split
        .first
        .iter()
        .enumerate()
        .map(|(pos, &i)| {
            let pair = model.psi_table.pair(pos).unwrap();
            let pair = NuisancePair::new(add(&pair.nu_g, dg), add(&pair.nu_alpha, da)).unwrap();
            spec.psi(&Obs { y: data.y_at(i), x: data.x_row(i), w: data.w_row(i) }, &pair).unwrap()
        })
        .collect();
    model.with_psi(psi).unwrap()
}

#[test]
fn oracle_sandwich_and_double_robustness() {
    let seeds = 10u64;
    let mut sandwich = 0;
    let mut g_only = 0;
    let mut alpha_only = 0;
    for seed in 0..seeds {
        let cfg = DgpConfig::new(DgpFamily::Binary1, 5, 1000 + seed);
        let (data, truth) = generate(&cfg).unwrap();
        let config = DrrfConfig::default();
        let model = fit(&data, &DgpFamily::Binary1.moment_spec(), &config, seed).unwrap();
        let base = rmse(&model);

        let oracle = match Estimator::Oracle(config).fit(&data, &truth, seed).unwrap() {
            drrf::simharness::Fitted::Model(m) => m,
            drrf::simharness::Fitted::Zero => unreachable!(),
        };
        let oracle_rmse = rmse(&oracle);
        if oracle_rmse <= base + 0.05 {
            sandwich += 1;
        }

        // One bounded perturbation shared by both nuisances, so corrupting
        // both produces a nonzero product term.
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let delta: Vec<f64> = (0..data.p()).map(|_| r.gen_range(-0.1..0.1)).collect();
        let only_g = rmse(&perturbed(&model, &data, Some(&delta), None));
        let only_a = rmse(&perturbed(&model, &data, None, Some(&delta)));
        let both = rmse(&perturbed(&model, &data, Some(&delta), Some(&delta)));
        println!("seed {seed}: fitted {base:.3} oracle {oracle_rmse:.3} g {only_g:.3} alpha {only_a:.3} both {both:.3}");
        if only_g < both {
            g_only += 1;
        }
        if only_a < both {
            alpha_only += 1;
        }
    }
    assert!(sandwich >= 8, "oracle within slack in {sandwich}/10 seeds");
    assert!(g_only >= 8, "g-only corruption milder in {g_only}/10 seeds");
    assert!(alpha_only >= 8, "α-only corruption milder in {alpha_only}/10 seeds");
}
