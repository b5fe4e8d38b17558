//! The two-step doubly robust forest estimator.
//!
//! 1. Split the sample into halves.
//! 2. Grow a nuisance forest on the second half and, at every first-half
//!    point `Xᵢ`, solve the two kernel-weighted lassos for `ν̂_g(Xᵢ)` and
//!    `ν̂_α(Xᵢ)`. Store `ψᵢ`.
//! 3. Grow the target forest on the first half. Predictions average the
//!    stored `ψᵢ` with the target kernel, so no lasso is solved at query time.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datasets::{split_halves, Dataset, HalfSplit};
use crate::error::{DrrfError, Result};
use crate::forest::{
    compute_lambda, forest_weights, ForestKernel, ForestParams, SparseWeights, SplitResponder,
    TreeStats,
};
use crate::forest::Features;
use crate::moments::{MomentKind, MomentSpec, NuisancePair, Obs};
use crate::quadlasso::{
    accumulate_gram, solve, symmetrize_upper, LassoSolution, QuadLassoProblem, SolveStatus,
    SolverSettings,
};

pub const MODEL_VERSION: u64 = 1;

const NUISANCE_SALT: u64 = 0x5bd1_e995_0000_0001;
const TARGET_SALT: u64 = 0x5bd1_e995_0000_0002;

/// How the debiasing term is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// `ψ = m(z; ĝ) + α̂·(y − ĝ)`.
    Debiased,
    /// `α̂ ≡ 0` in the stored moments: the plug-in `m(z; ĝ)`. Trees are
    /// grown exactly as for `Debiased`, since plug-in node moments are
    /// constant within a node for treatment contrasts.
    PlugIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrrfConfig {
    /// Tree parameters shared by both forests. `bag_size` and
    /// `min_s1_child` apply to the target forest only and `seed` is replaced
    /// by seeds derived in [`fit`].
    pub forest: ForestParams,
    /// Minimum `S¹` rows per child in the nuisance forest; `None` means `max(5, p)`.
    pub nuisance_min_s1_child: Option<usize>,
    /// Forest-lasso penalty for `ν̂_g`; defaults to [`compute_lambda`].
    pub lambda_g: Option<f64>,
    /// Forest-lasso penalty for `ν̂_α`; defaults to [`compute_lambda`].
    pub lambda_alpha: Option<f64>,
    /// Choose `λ_g` at every first-half point by 5-fold cross-validation.
    pub cv: bool,
    pub variant: Variant,
}

impl Default for DrrfConfig {
    fn default() -> Self {
        Self {
            forest: ForestParams {
                bag_size: 10,
                ..ForestParams::default()
            },
            nuisance_min_s1_child: None,
            lambda_g: None,
            lambda_alpha: None,
            cv: false,
            variant: Variant::Debiased,
        }
    }
}

/// Multipliers of the default `λ_g` tried by cross-validation.
pub const CV_LAMBDA_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
const CV_FOLDS: usize = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Training-half view: local index → dataset row, plus each row's `m̃`.
struct HalfData<'a> {
    data: &'a Dataset,
    rows: &'a [usize],
    mtilde: Vec<Vec<f64>>,
}

impl<'a> HalfData<'a> {
    fn new(data: &'a Dataset, rows: &'a [usize], spec: &MomentSpec<f64>) -> Result<Self> {
        let mtilde = rows
            .iter()
            .map(|&i| spec.moment_of_coordinates(&obs(data, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { data, rows, mtilde })
    }

    fn features(&self) -> Features {
        let mut x = Vec::with_capacity(self.rows.len() * self.data.d());
        for &i in self.rows {
            x.extend_from_slice(self.data.x_row(i));
        }
        Features::new(x, self.data.d()).expect("rows have width d")
    }

    fn w(&self, local: usize) -> &[f64] {
        self.data.w_row(self.rows[local])
    }

    fn y(&self, local: usize) -> f64 {
        self.data.y_at(self.rows[local])
    }

    /// Weighted sums `Σ k wwᵀ`, `Σ k y w`, `Σ k m̃` over local indices.
    fn moments(&self, entries: impl Iterator<Item = (usize, f64)>) -> GramSums {
        let p = self.data.p();
        let mut sums = GramSums::zeros(p);
        for (local, k) in entries {
            let w = self.w(local);
            accumulate_gram(&mut sums.gram, w, k);
            let ky = k * self.y(local);
            for ((bg, ba), (&wj, &mj)) in sums
                .b_g
                .iter_mut()
                .zip(sums.b_alpha.iter_mut())
                .zip(w.iter().zip(&self.mtilde[local]))
            {
                *bg += ky * wj;
                *ba += k * mj;
            }
            sums.weight += k;
        }
        sums
    }
}

pub(crate) fn obs(data: &Dataset, i: usize) -> Obs<'_, f64> {
    Obs {
        y: data.y_at(i),
        x: data.x_row(i),
        w: data.w_row(i),
    }
}

#[derive(Clone)]
struct GramSums {
    p: usize,
    /// Upper triangle only until [`GramSums::problems`].
    gram: Vec<f64>,
    b_g: Vec<f64>,
    b_alpha: Vec<f64>,
    weight: f64,
}

impl GramSums {
    fn zeros(p: usize) -> Self {
        Self {
            p,
            gram: vec![0.0; p * p],
            b_g: vec![0.0; p],
            b_alpha: vec![0.0; p],
            weight: 0.0,
        }
    }

    fn minus(&self, other: &GramSums) -> GramSums {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        GramSums {
            p: self.p,
            gram: sub(&self.gram, &other.gram),
            b_g: sub(&self.b_g, &other.b_g),
            b_alpha: sub(&self.b_alpha, &other.b_alpha),
            weight: self.weight - other.weight,
        }
    }

    /// Normalized regression and Riesz problems.
    fn problems(
        &self,
        lambda_g: f64,
        lambda_alpha: f64,
        ridge: f64,
    ) -> Result<(QuadLassoProblem<f64>, QuadLassoProblem<f64>)> {
        if !(self.weight > 0.0) {
            return Err(DrrfError::DegenerateWeights);
        }
        let scale = 1.0 / self.weight;
        let mut a: Vec<f64> = self.gram.iter().map(|v| v * scale).collect();
        symmetrize_upper(&mut a, self.p);
        let bg = self.b_g.iter().map(|v| v * scale).collect();
        let ba = self.b_alpha.iter().map(|v| v * scale).collect();
        let g = QuadLassoProblem::new(a.clone(), bg, lambda_g, 0.0)?;
        let alpha = QuadLassoProblem::new(a, ba, lambda_alpha, ridge)?;
        Ok((g, alpha))
    }
}

fn solve_from(problem: &QuadLassoProblem<f64>, warm: Option<&[f64]>) -> Result<LassoSolution<f64>> {
    let settings = match warm {
        Some(w) => SolverSettings::warm(w.to_vec()),
        None => SolverSettings::default(),
    };
    solve(problem, &settings)
}

/// Split-time fits only rank candidate splits, so they stop early; small
/// nodes have fewer members than coordinates and converge slowly.
pub const NODE_SOLVER_TOL: f64 = 1e-6;
pub const NODE_SOLVER_SWEEPS: usize = 100;

fn solve_node(problem: &QuadLassoProblem<f64>, warm: Option<&[f64]>) -> Result<LassoSolution<f64>> {
    let settings = SolverSettings {
        tol: NODE_SOLVER_TOL,
        max_iter: NODE_SOLVER_SWEEPS,
        init: warm.map(<[f64]>::to_vec),
    };
    solve(problem, &settings)
}

/// Node-level responses: equally weighted lassos on the node's `S¹` members,
/// then `ψᵢ` from the node's fitted nuisances.
struct NodeLassoResponder<'a> {
    half: &'a HalfData<'a>,
    spec: &'a MomentSpec<f64>,
    lambda: f64,
    ridge: f64,
}

impl SplitResponder for NodeLassoResponder<'_> {
    fn node_responses(
        &self,
        members: &[usize],
        warm: Option<&NuisancePair<f64>>,
    ) -> Result<(Vec<f64>, Option<NuisancePair<f64>>)> {
        let k = 1.0 / members.len() as f64;
        let sums = self.half.moments(members.iter().map(|&i| (i, k)));
        let (pg, pa) = sums.problems(self.lambda, self.lambda, self.ridge)?;
        let nu_g = solve_node(&pg, warm.map(|w| &w.nu_g[..]))?.nu;
        let nu_alpha = solve_node(&pa, warm.map(|w| &w.nu_alpha[..]))?.nu;
        let pair = NuisancePair { nu_g, nu_alpha };
        let psi = members
            .iter()
            .map(|&i| self.spec.psi(&obs(self.half.data, self.half.rows[i]), &pair))
            .collect::<Result<Vec<_>>>()?;
        Ok((psi, Some(pair)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowStatus {
    /// Both lassos met the KKT tolerance.
    pub converged: bool,
    /// The penalty was doubled once after a solver failure.
    pub retried: bool,
}

/// First-step output for each first-half observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceTable {
    pub psi: Vec<f64>,
    /// `None` in slim model files.
    pub nu_g: Option<Vec<Vec<f64>>>,
    pub nu_alpha: Option<Vec<Vec<f64>>>,
    pub status: Vec<RowStatus>,
}

impl NuisanceTable {
    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn pair(&self, i: usize) -> Option<NuisancePair<f64>> {
        Some(NuisancePair {
            nu_g: self.nu_g.as_ref()?[i].clone(),
            nu_alpha: self.nu_alpha.as_ref()?[i].clone(),
        })
    }
}

/// The fitted nuisance stage: forest kernel over the second half plus penalties.
pub struct NuisanceStage {
    pub kernel: ForestKernel,
    pub lambda_g: f64,
    pub lambda_alpha: f64,
    pub ridge: f64,
    pub cv: bool,
    pub variant: Variant,
    rows: Vec<usize>,
    mtilde: Vec<Vec<f64>>,
}

impl NuisanceStage {
    fn half<'a>(&'a self, data: &'a Dataset) -> HalfData<'a> {
        HalfData {
            data,
            rows: &self.rows,
            mtilde: Vec::new(),
        }
    }

    /// Forest-lasso nuisances at `x`: kernel weights over the second half,
    /// then the two weighted lassos.
    pub fn nuisances_at(&self, data: &Dataset, x: &[f64]) -> Result<(NuisancePair<f64>, RowStatus)> {
        let weights = forest_weights(&self.kernel, x);
        self.solve_weighted(&self.half(data), &weights)
    }

    fn solve_weighted(
        &self,
        half: &HalfData<'_>,
        weights: &SparseWeights,
    ) -> Result<(NuisancePair<f64>, RowStatus)> {
        let sums = self.weighted_sums(half, weights);
        match self.solve_pair(half, weights, &sums, 1.0) {
            Ok((pair, converged)) => Ok((
                pair,
                RowStatus {
                    converged,
                    retried: false,
                },
            )),
            Err(_) => {
                let (pair, converged) = self.solve_pair(half, weights, &sums, 2.0)?;
                Ok((
                    pair,
                    RowStatus {
                        converged,
                        retried: true,
                    },
                ))
            }
        }
    }

    fn weighted_sums(&self, half: &HalfData<'_>, weights: &SparseWeights) -> GramSums {
        let p = half.data.p();
        let mut sums = GramSums::zeros(p);
        for (local, k) in weights.iter() {
            let w = half.w(local);
            accumulate_gram(&mut sums.gram, w, k);
            let ky = k * half.y(local);
            for (bg, &wj) in sums.b_g.iter_mut().zip(w) {
                *bg += ky * wj;
            }
            let mt = &self.mtilde[local];
            for (ba, &mj) in sums.b_alpha.iter_mut().zip(mt) {
                *ba += k * mj;
            }
            sums.weight += k;
        }
        sums
    }

    fn solve_pair(
        &self,
        half: &HalfData<'_>,
        weights: &SparseWeights,
        sums: &GramSums,
        factor: f64,
    ) -> Result<(NuisancePair<f64>, bool)> {
        let lambda_g = if self.cv {
            self.cv_lambda_g(half, weights, sums)? * factor
        } else {
            self.lambda_g * factor
        };
        let (pg, pa) = sums.problems(lambda_g, self.lambda_alpha * factor, self.ridge)?;
        let g = solve_from(&pg, None)?;
        let mut converged = g.status == SolveStatus::Converged;
        let nu_alpha = match self.variant {
            Variant::Debiased => {
                let a = solve_from(&pa, None)?;
                converged &= a.status == SolveStatus::Converged;
                a.nu
            }
            Variant::PlugIn => vec![0.0; g.nu.len()],
        };
        Ok((
            NuisancePair {
                nu_g: g.nu,
                nu_alpha,
            },
            converged,
        ))
    }

    /// `λ_g` minimizing the 5-fold cross-validated weighted squared loss.
    fn cv_lambda_g(&self, half: &HalfData<'_>, weights: &SparseWeights, total: &GramSums) -> Result<f64> {
        let n = weights.len();
        if n < CV_FOLDS {
            return Ok(self.lambda_g);
        }
        let folds: Vec<GramSums> = (0..CV_FOLDS)
            .map(|f| {
                let part = SparseWeights {
                    indices: weights.indices.iter().skip(f).step_by(CV_FOLDS).copied().collect(),
                    weights: weights.weights.iter().skip(f).step_by(CV_FOLDS).copied().collect(),
                };
                self.weighted_sums(half, &part)
            })
            .collect();
        let mut best = (f64::INFINITY, self.lambda_g);
        // Largest penalty first so ties keep the sparser fit.
        for &factor in CV_LAMBDA_FACTORS.iter().rev() {
            let lambda = self.lambda_g * factor;
            let mut loss = 0.0;
            for (f, fold) in folds.iter().enumerate() {
                let train = total.minus(fold);
                if !(train.weight > 0.0) {
                    continue;
                }
                let (pg, _) = train.problems(lambda, 0.0, 0.0)?;
                let nu = solve_from(&pg, None)?.nu;
                for (pos, (local, k)) in weights.iter().enumerate() {
                    if pos % CV_FOLDS == f {
                        let resid = half.y(local) - dot(half.w(local), &nu);
                        loss += k * resid * resid;
                    }
                }
            }
            if loss < best.0 {
                best = (loss, lambda);
            }
        }
        Ok(best.1)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Moment information kept in model files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentInfo {
    pub kind: MomentKind,
    pub treatment_col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub nuisance_seed: u64,
    pub target_seed: u64,
    pub variant: Variant,
    pub cv: bool,
    pub n_first: usize,
    pub n_second: usize,
    pub d: usize,
    pub p: usize,
    pub nuisance_subsample: usize,
    pub target_subsample: usize,
    /// Forest-lasso and nuisance node penalties; absent when `ψ` was supplied externally.
    pub lambda_g: Option<f64>,
    pub lambda_alpha: Option<f64>,
    pub lambda_node_nuisance: Option<f64>,
    pub lambda_node_target: f64,
    pub nuisance_trees: TreeStats,
    pub target_trees: TreeStats,
    pub retried_rows: usize,
    pub unconverged_rows: usize,
}

/// A fitted estimator; immutable, queried for `θ̂(x)` and intervals.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DrrfModel {
    pub version: u64,
    pub moment: MomentInfo,
    pub params: ForestParams,
    pub split: HalfSplit,
    pub bag_size: usize,
    pub metadata: ModelMetadata,
    pub psi_table: NuisanceTable,
    pub target_kernel: ForestKernel,
    /// Mean `ψ` over each leaf's weighting members, per tree.
    #[serde(skip)]
    leaf_values: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimateWithCI {
    pub point: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Full fit output; the nuisance stage is kept for diagnostics and the naive
/// per-point harness but is not part of the model.
pub struct FitOutput {
    pub model: DrrfModel,
    pub nuisance: NuisanceStage,
}

pub fn fit(dataset: &Dataset, spec: &MomentSpec<f64>, config: &DrrfConfig, seed: u64) -> Result<DrrfModel> {
    Ok(fit_detailed(dataset, spec, config, seed)?.model)
}

/// Seeds for the two forests, derived from the fit seed.
pub fn forest_seeds(seed: u64) -> (u64, u64) {
    (splitmix(seed ^ NUISANCE_SALT), splitmix(seed ^ TARGET_SALT))
}

fn check_inputs(dataset: &Dataset, spec: &MomentSpec<f64>, config: &DrrfConfig) -> Result<()> {
    spec.validate()?;
    config.forest.validate()?;
    if spec.treatment_col() >= dataset.p() {
        return Err(DrrfError::Config(format!(
            "treatment column {} outside w of width {}",
            spec.treatment_col(),
            dataset.p()
        )));
    }
    if dataset.len() < 4 {
        return Err(DrrfError::Size(format!("{} observations is too few", dataset.len())));
    }
    for l in [config.lambda_g, config.lambda_alpha].into_iter().flatten() {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(DrrfError::Config("lambda must be finite and non-negative".into()));
        }
    }
    Ok(())
}

/// Nuisance-forest node-lasso row requirement: the configured value or `max(5, p)`.
pub fn nuisance_min_s1_child(config: &DrrfConfig, dataset: &Dataset) -> usize {
    config.nuisance_min_s1_child.unwrap_or(dataset.p().max(5))
}

/// Grows the nuisance forest on `rows` (the second half).
pub fn fit_nuisance_stage(
    dataset: &Dataset,
    spec: &MomentSpec<f64>,
    config: &DrrfConfig,
    rows: &[usize],
    forest_seed: u64,
) -> Result<NuisanceStage> {
    let params = ForestParams {
        seed: forest_seed,
        bag_size: 1,
        min_s1_child: Some(nuisance_min_s1_child(config, dataset)),
        ..config.forest.clone()
    };
    let p = dataset.p();
    let n = rows.len();
    let s = params.subsample_size_for(n)?;
    let default_lambda = compute_lambda(n, s, p);
    let lambda_node = params.lambda_node.unwrap_or(default_lambda);
    let half = HalfData::new(dataset, rows, spec)?;
    let responder = NodeLassoResponder {
        half: &half,
        spec,
        lambda: lambda_node,
        ridge: params.ridge_alpha,
    };
    let kernel = ForestKernel::grow(&half.features(), &responder, &params)?;
    Ok(NuisanceStage {
        kernel,
        lambda_g: config.lambda_g.unwrap_or(default_lambda),
        lambda_alpha: config.lambda_alpha.unwrap_or(default_lambda),
        ridge: params.ridge_alpha,
        cv: config.cv,
        variant: config.variant,
        rows: rows.to_vec(),
        mtilde: half.mtilde,
    })
}

/// Solves the forest lassos at every first-half point and tabulates `ψᵢ`.
pub fn nuisance_table(
    dataset: &Dataset,
    spec: &MomentSpec<f64>,
    stage: &NuisanceStage,
    first: &[usize],
) -> Result<NuisanceTable> {
    let half = stage.half(dataset);
    let rows = first
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let weights = forest_weights(&stage.kernel, dataset.x_row(i));
            let (pair, status) = stage
                .solve_weighted(&half, &weights)
                .map_err(|e| DrrfError::NuisanceFit {
                    index: pos,
                    source: Box::new(e),
                })?;
            let psi = spec.psi(&obs(dataset, i), &pair)?;
            if !psi.is_finite() {
                return Err(DrrfError::NuisanceFit {
                    index: pos,
                    source: Box::new(DrrfError::Domain("ψ is not finite".into())),
                });
            }
            Ok((psi, pair, status))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = NuisanceTable {
        psi: Vec::with_capacity(rows.len()),
        nu_g: Some(Vec::with_capacity(rows.len())),
        nu_alpha: Some(Vec::with_capacity(rows.len())),
        status: Vec::with_capacity(rows.len()),
    };
    for (psi, pair, status) in rows {
        table.psi.push(psi);
        table.nu_g.as_mut().unwrap().push(pair.nu_g);
        table.nu_alpha.as_mut().unwrap().push(pair.nu_alpha);
        table.status.push(status);
    }
    Ok(table)
}

/// Grows the target forest on the first half with node-level `ψ` splitting.
pub fn grow_target_forest(
    dataset: &Dataset,
    spec: &MomentSpec<f64>,
    config: &DrrfConfig,
    rows: &[usize],
    forest_seed: u64,
) -> Result<(ForestKernel, f64)> {
    let params = ForestParams {
        seed: forest_seed,
        ..config.forest.clone()
    };
    let n = rows.len();
    let s = params.subsample_size_for(n)?;
    let lambda_node = params.lambda_node.unwrap_or(compute_lambda(n, s, dataset.p()));
    let half = HalfData::new(dataset, rows, spec)?;
    let responder = NodeLassoResponder {
        half: &half,
        spec,
        lambda: lambda_node,
        ridge: params.ridge_alpha,
    };
    Ok((ForestKernel::grow(&half.features(), &responder, &params)?, lambda_node))
}

pub fn fit_detailed(
    dataset: &Dataset,
    spec: &MomentSpec<f64>,
    config: &DrrfConfig,
    seed: u64,
) -> Result<FitOutput> {
    check_inputs(dataset, spec, config)?;
    let split = split_halves(dataset, seed)?;
    let (nuisance_seed, target_seed) = forest_seeds(seed);
    let stage = fit_nuisance_stage(dataset, spec, config, &split.second, nuisance_seed)?;
    let table = nuisance_table(dataset, spec, &stage, &split.first)?;
    let (target, lambda_node_target) =
        grow_target_forest(dataset, spec, config, &split.first, target_seed)?;
    let metadata = ModelMetadata {
        seed,
        nuisance_seed,
        target_seed,
        variant: config.variant,
        cv: config.cv,
        n_first: split.first.len(),
        n_second: split.second.len(),
        d: dataset.d(),
        p: dataset.p(),
        nuisance_subsample: stage.kernel.subsample_size,
        target_subsample: target.subsample_size,
        lambda_g: Some(stage.lambda_g),
        lambda_alpha: Some(stage.lambda_alpha),
        lambda_node_nuisance: Some(
            stage
                .kernel
                .params
                .lambda_node
                .unwrap_or(compute_lambda(split.second.len(), stage.kernel.subsample_size, dataset.p())),
        ),
        lambda_node_target,
        nuisance_trees: stage.kernel.stats(),
        target_trees: target.stats(),
        retried_rows: table.status.iter().filter(|s| s.retried).count(),
        unconverged_rows: table.status.iter().filter(|s| !s.converged).count(),
    };
    let model = DrrfModel::assemble(spec, split, target, table, metadata)?;
    Ok(FitOutput {
        model,
        nuisance: stage,
    })
}

/// Fits with externally supplied `ψ` for each dataset row (for example the
/// true nuisances); the target forest is grown as usual.
pub fn fit_with_psi(
    dataset: &Dataset,
    spec: &MomentSpec<f64>,
    config: &DrrfConfig,
    seed: u64,
    psi_of_row: &(dyn Fn(usize) -> f64 + Sync),
) -> Result<DrrfModel> {
    check_inputs(dataset, spec, config)?;
    let split = split_halves(dataset, seed)?;
    let (nuisance_seed, target_seed) = forest_seeds(seed);
    let (target, lambda_node_target) =
        grow_target_forest(dataset, spec, config, &split.first, target_seed)?;
    let table = NuisanceTable {
        psi: split.first.iter().map(|&i| psi_of_row(i)).collect(),
        nu_g: None,
        nu_alpha: None,
        status: vec![RowStatus { converged: true, retried: false }; split.first.len()],
    };
    let metadata = ModelMetadata {
        seed,
        nuisance_seed,
        target_seed,
        variant: config.variant,
        cv: false,
        n_first: split.first.len(),
        n_second: split.second.len(),
        d: dataset.d(),
        p: dataset.p(),
        nuisance_subsample: 0,
        target_subsample: target.subsample_size,
        lambda_g: None,
        lambda_alpha: None,
        lambda_node_nuisance: None,
        lambda_node_target,
        nuisance_trees: TreeStats::default(),
        target_trees: target.stats(),
        retried_rows: 0,
        unconverged_rows: 0,
    };
    DrrfModel::assemble(spec, split, target, table, metadata)
}

/// Per-point refit: recomputes the forest-lasso nuisances at every
/// first-half point in the target kernel's support of `x`, then averages.
/// Agrees with [`DrrfModel::predict`] but solves lassos for every query.
pub fn naive_predict(model: &DrrfModel, dataset: &Dataset, spec: &MomentSpec<f64>, stage: &NuisanceStage, x: &[f64]) -> Result<f64> {
    model.check_query(x)?;
    let weights = forest_weights(&model.target_kernel, x);
    let mut total = 0.0;
    for (local, k) in weights.iter() {
        let i = model.split.first[local];
        let (pair, _) = stage.nuisances_at(dataset, dataset.x_row(i))?;
        total += k * spec.psi(&obs(dataset, i), &pair)?;
    }
    Ok(total)
}

impl DrrfModel {
    pub fn assemble(
        spec: &MomentSpec<f64>,
        split: HalfSplit,
        target_kernel: ForestKernel,
        psi_table: NuisanceTable,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        if psi_table.len() != split.first.len() || target_kernel.n_train != split.first.len() {
            return Err(DrrfError::Shape("ψ table, split and target forest disagree".into()));
        }
        let bag_size = target_kernel.params.bag_size;
        let mut model = Self {
            version: MODEL_VERSION,
            moment: MomentInfo {
                kind: spec.kind(),
                treatment_col: spec.treatment_col(),
            },
            params: target_kernel.params.clone(),
            split,
            bag_size,
            metadata,
            psi_table,
            target_kernel,
            leaf_values: Vec::new(),
        };
        model.refresh_leaf_values();
        Ok(model)
    }

    fn refresh_leaf_values(&mut self) {
        let psi = &self.psi_table.psi;
        self.leaf_values = self
            .target_kernel
            .trees
            .iter()
            .map(|t| {
                t.leaves
                    .iter()
                    .map(|members| members.iter().map(|&i| psi[i]).sum::<f64>() / members.len() as f64)
                    .collect()
            })
            .collect();
    }

    /// Replaces `ψ` (for example with oracle values), keeping the trees.
    pub fn with_psi(&self, psi: Vec<f64>) -> Result<Self> {
        if psi.len() != self.psi_table.len() {
            return Err(DrrfError::Shape("ψ length differs from the first half".into()));
        }
        let mut model = self.clone();
        model.psi_table.psi = psi;
        model.refresh_leaf_values();
        Ok(model)
    }

    /// Drops the stored `ν̂` vectors, keeping only `ψ`.
    pub fn slim(mut self) -> Self {
        self.psi_table.nu_g = None;
        self.psi_table.nu_alpha = None;
        self
    }

    pub fn d(&self) -> usize {
        self.target_kernel.d
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d() {
            return Err(DrrfError::Shape(format!(
                "query has {} coordinates, model expects {}",
                x.len(),
                self.d()
            )));
        }
        if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DrrfError::Domain(format!("query {x:?} outside [0, 1]^d")));
        }
        Ok(())
    }

    /// Predictions of the individual trees at `x`.
    pub fn tree_predictions(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_query(x)?;
        Ok(self
            .target_kernel
            .trees
            .iter()
            .zip(&self.leaf_values)
            .map(|(t, values)| values[t.leaf_of(x)])
            .collect())
    }

    /// `θ̂(x)`: target-kernel average of the stored `ψᵢ`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let preds = self.tree_predictions(x)?;
        Ok(preds.iter().sum::<f64>() / preds.len() as f64)
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Vec<Result<f64>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    /// Kernel weights of `x` over first-half positions.
    pub fn weights(&self, x: &[f64]) -> Result<SparseWeights> {
        self.check_query(x)?;
        Ok(forest_weights(&self.target_kernel, x))
    }

    /// Little-bags variance: between-bag dispersion of bag means minus the
    /// within-bag noise share, floored at zero.
    pub fn variance_blb(&self, x: &[f64]) -> Result<f64> {
        let preds = self.tree_predictions(x)?;
        blb_variance(&preds, self.bag_size)
    }

    pub fn confidence_interval(&self, x: &[f64], level: f64) -> Result<EstimateWithCI> {
        if !(level > 0.0 && level < 1.0) {
            return Err(DrrfError::Config(format!("confidence level {level} outside (0, 1)")));
        }
        let preds = self.tree_predictions(x)?;
        let point = preds.iter().sum::<f64>() / preds.len() as f64;
        let variance = blb_variance(&preds, self.bag_size)?;
        let half = normal_quantile((1.0 + level) / 2.0) * variance.sqrt();
        Ok(EstimateWithCI {
            point,
            variance,
            lower: point - half,
            upper: point + half,
            level,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| DrrfError::Integrity(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(DrrfError::Integrity("empty model file".into()));
        }
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| DrrfError::Integrity(e.to_string()))?;
        let found = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| DrrfError::Integrity("missing version field".into()))?;
        if found != MODEL_VERSION {
            return Err(DrrfError::Incompatible {
                found,
                expected: MODEL_VERSION,
            });
        }
        let mut model: DrrfModel =
            serde_json::from_value(value).map_err(|e| DrrfError::Integrity(e.to_string()))?;
        model.validate_loaded()?;
        model.refresh_leaf_values();
        Ok(model)
    }

    fn validate_loaded(&self) -> Result<()> {
        let n = self.psi_table.len();
        let bad = |m: &str| Err(DrrfError::Integrity(m.to_string()));
        if self.split.first.len() != n || self.target_kernel.n_train != n {
            return bad("ψ table does not match the first half");
        }
        if self.target_kernel.trees.is_empty() || self.target_kernel.trees.len() != self.params.trees {
            return bad("tree count does not match parameters");
        }
        for tree in &self.target_kernel.trees {
            for node in &tree.nodes {
                match *node {
                    crate::forest::TreeNode::Split { feature, left, right, .. } => {
                        if feature >= self.target_kernel.d || left >= tree.nodes.len() || right >= tree.nodes.len() {
                            return bad("tree node out of range");
                        }
                    }
                    crate::forest::TreeNode::Leaf { leaf } => {
                        if leaf >= tree.leaves.len() {
                            return bad("leaf id out of range");
                        }
                    }
                }
            }
            if tree.leaves.iter().any(|m| m.is_empty() || m.iter().any(|&i| i >= n)) {
                return bad("leaf membership out of range");
            }
        }
        Ok(())
    }
}

pub fn save_model(model: &DrrfModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_json()?).map_err(|e| DrrfError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DrrfModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DrrfError::io(path, e))?;
    DrrfModel::from_json(&text)
}

/// `max(0, between − within)` for tree predictions grouped in consecutive bags of `bag_size`.
pub fn blb_variance(tree_preds: &[f64], bag_size: usize) -> Result<f64> {
    if bag_size < 2 || tree_preds.len() % bag_size != 0 || tree_preds.len() / bag_size < 2 {
        return Err(DrrfError::Config(format!(
            "{} trees cannot form at least two bags of {bag_size}",
            tree_preds.len()
        )));
    }
    let groups = tree_preds.len() / bag_size;
    // Shifting by one prediction keeps identical trees at exactly zero.
    let shift = tree_preds[0];
    let centered: Vec<f64> = tree_preds.iter().map(|t| t - shift).collect();
    let overall = centered.iter().sum::<f64>() / centered.len() as f64;
    let mut between = 0.0;
    let mut within = 0.0;
    for bag in centered.chunks(bag_size) {
        let mean = bag.iter().sum::<f64>() / bag_size as f64;
        between += (mean - overall).powi(2);
        within += bag.iter().map(|t| (t - mean).powi(2)).sum::<f64>();
    }
    let l = bag_size as f64;
    let g = groups as f64;
    Ok((between / (g - 1.0) - within / (g * l * (l - 1.0))).max(0.0))
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blb_of_identical_trees_is_zero() {
        assert_eq!(blb_variance(&[1.5; 100], 10).unwrap(), 0.0);
        assert!(blb_variance(&[1.0; 10], 10).is_err());
        assert!(blb_variance(&[1.0; 12], 5).is_err());
    }

    #[test]
    fn blb_by_hand() {
        // Bags (0, 2) and (4, 6): bag means 1 and 5, overall 3.
        // between = (4 + 4)/1 = 8, within = (1+1+1+1)/(2·2·1) = 1.
        let v = blb_variance(&[0.0, 2.0, 4.0, 6.0], 2).unwrap();
        assert!((v - 7.0).abs() < 1e-15);
        // Within-bag noise larger than between-bag spread is floored.
        assert_eq!(blb_variance(&[0.0, 10.0, 0.0, 10.0], 2).unwrap(), 0.0);
    }

    #[test]
    fn quantile_at_ninety_percent() {
        assert!((normal_quantile(0.95) - 1.6448536269514722).abs() < 1e-9);
    }
}
