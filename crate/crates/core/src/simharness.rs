//! Simulation designs, the true effect curve and experiment runners.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{DrrfError, Result};
use crate::estimator::{fit, fit_with_psi, DrrfConfig, DrrfModel, EstimateWithCI, Variant};
use crate::moments::MomentSpec;

/// Piecewise linear effect curve used by every design.
pub fn theta0(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(DrrfError::Domain(format!("θ₀ evaluated at {x} outside [0, 1]")));
    }
    Ok(theta0_unchecked(x))
}

fn theta0_unchecked(x: f64) -> f64 {
    if x <= 0.3 {
        x + 2.0
    } else if x <= 0.6 {
        6.0 * x + 0.5
    } else {
        -3.0 * x + 5.9
    }
}

/// `m` evenly spaced points from 0 to 1 inclusive.
pub fn linspace_grid(m: usize) -> Vec<f64> {
    match m {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..m).map(|i| i as f64 / (m - 1) as f64).collect(),
    }
}

/// The 100-point evaluation grid.
pub fn eval_grid() -> Vec<f64> {
    linspace_grid(100)
}

/// `m` cell midpoints `(i + ½)/m`.
pub fn midpoint_grid(m: usize) -> Vec<f64> {
    (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpFamily {
    Binary1,
    Binary2,
    Binary3,
    Cont1,
    Cont2,
    Cont3,
}

impl DgpFamily {
    pub const ALL: [DgpFamily; 6] = [
        DgpFamily::Binary1,
        DgpFamily::Binary2,
        DgpFamily::Binary3,
        DgpFamily::Cont1,
        DgpFamily::Cont2,
        DgpFamily::Cont3,
    ];

    pub fn is_binary(self) -> bool {
        matches!(self, DgpFamily::Binary1 | DgpFamily::Binary2 | DgpFamily::Binary3)
    }

    pub fn name(self) -> &'static str {
        match self {
            DgpFamily::Binary1 => "binary1",
            DgpFamily::Binary2 => "binary2",
            DgpFamily::Binary3 => "binary3",
            DgpFamily::Cont1 => "cont1",
            DgpFamily::Cont2 => "cont2",
            DgpFamily::Cont3 => "cont3",
        }
    }

    /// Moment matching the treatment type: CATE for binary, CAME for continuous.
    pub fn moment_spec(self) -> MomentSpec<f64> {
        if self.is_binary() {
            MomentSpec::cate(0)
        } else {
            MomentSpec::came(0)
        }
    }
}

impl fmt::Display for DgpFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DgpFamily {
    type Err = DrrfError;

    fn from_str(s: &str) -> Result<Self> {
        DgpFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| DrrfError::Config(format!("unknown family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub family: DgpFamily,
    pub k: usize,
    pub p: usize,
    pub two_n: usize,
    pub seed: u64,
    /// Append a constant column to `W`.
    pub intercept: bool,
    /// Test hook: force `γ₀ = 0`.
    pub gamma_zero: bool,
    /// Test hook: replace a binary family's propensity by a constant.
    pub propensity_override: Option<f64>,
}

impl DgpConfig {
    pub fn new(family: DgpFamily, k: usize, seed: u64) -> Self {
        Self {
            family,
            k,
            p: 100,
            two_n: 5000,
            seed,
            intercept: false,
            gamma_zero: false,
            propensity_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k > self.p {
            return Err(DrrfError::Config(format!("k = {} exceeds p = {}", self.k, self.p)));
        }
        if self.two_n < 4 {
            return Err(DrrfError::Config(format!("2n = {} is below 4", self.two_n)));
        }
        if let Some(e) = self.propensity_override {
            if !(e > 0.0 && e < 1.0) {
                return Err(DrrfError::Config(format!("propensity {e} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Ground truth for one generated dataset.
#[derive(Clone, Debug)]
pub struct Truth {
    pub family: DgpFamily,
    pub nu0: Vec<f64>,
    pub gamma0: Vec<f64>,
    /// True propensity per row (binary families).
    pub propensity: Option<Vec<f64>>,
    /// `g₀(Xᵢ, Wᵢ)` per row.
    pub g0: Vec<f64>,
    /// `α₀(Xᵢ, Wᵢ)` per row.
    pub alpha0: Vec<f64>,
}

impl Truth {
    pub fn theta0(&self, x: f64) -> Result<f64> {
        theta0(x)
    }

    /// `ψ` at the true nuisances: `θ₀(Xᵢ) + α₀ᵢ·(Yᵢ − g₀ᵢ)`.
    pub fn oracle_psi(&self, data: &Dataset, i: usize) -> f64 {
        theta0_unchecked(data.x_row(i)[0]) + self.alpha0[i] * (data.y_at(i) - self.g0[i])
    }
}

/// Propensity `ℙ(D=1 | x, X̃)` of a binary family.
fn propensity(family: DgpFamily, x: f64, index: f64) -> f64 {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    match family {
        DgpFamily::Binary1 => 0.3 + 0.4 * ind(x > 0.5),
        DgpFamily::Binary2 => 0.1 + 0.3 * ind(index > 0.0) + 0.4 * ind(x > 0.5),
        DgpFamily::Binary3 => 0.2 + 0.6 * ind(index > 3.0),
        _ => unreachable!("continuous family has no propensity"),
    }
}

/// Draws one dataset with `W = (D, X̃)` (plus a constant column if requested).
pub fn generate(config: &DgpConfig) -> Result<(Dataset, Truth)> {
    config.validate()?;
    let DgpConfig { family, k, p, two_n, .. } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut nu0 = vec![0.0; p];
    let mut gamma0 = vec![0.0; p];
    for j in 0..k {
        nu0[j] = rng.gen_range(-1.0..=1.0);
    }
    for j in 0..k {
        gamma0[j] = match family {
            DgpFamily::Binary3 => 1.0 / k as f64,
            _ => rng.gen_range(0.0..=1.0),
        };
    }
    if config.gamma_zero {
        gamma0.iter_mut().for_each(|g| *g = 0.0);
    }
    let width = p + 1 + usize::from(config.intercept);
    let mut y = Vec::with_capacity(two_n);
    let mut xs = Vec::with_capacity(two_n);
    let mut w = Vec::with_capacity(two_n * width);
    let mut props = family.is_binary().then(|| Vec::with_capacity(two_n));
    let mut g0 = Vec::with_capacity(two_n);
    let mut alpha0 = Vec::with_capacity(two_n);
    let mut xt = vec![0.0; p];
    for _ in 0..two_n {
        let x: f64 = rng.gen_range(0.0..=1.0);
        let mean = match family {
            DgpFamily::Binary3 | DgpFamily::Cont3 => 2.0 + f64::from(family == DgpFamily::Binary3),
            DgpFamily::Cont2 => 2.0 * x,
            _ => 0.0,
        };
        for v in xt.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = mean + z;
        }
        let index: f64 = xt.iter().zip(&gamma0).map(|(a, b)| a * b).sum();
        let (d, alpha) = if family.is_binary() {
            let e = config
                .propensity_override
                .unwrap_or_else(|| propensity(family, x, index));
            let u: f64 = rng.gen();
            let d = if u < e { 1.0 } else { 0.0 };
            props.as_mut().unwrap().push(e);
            (d, d / e - (1.0 - d) / (1.0 - e))
        } else {
            let eta: f64 = rng.gen_range(-1.0..=1.0);
            let f = match family {
                DgpFamily::Cont1 => index,
                DgpFamily::Cont2 => index.powi(3),
                _ => index.powi(2),
            };
            // Riesz representer of the derivative in the span of (D, X̃):
            // 3η satisfies E[3η·D] = 1 and E[3η·X̃] = 0 since Var(η) = 1/3.
            (f + eta, 3.0 * eta)
        };
        let eps: f64 = rng.gen_range(-1.0..=1.0);
        let g = theta0_unchecked(x) * d + xt.iter().zip(&nu0).map(|(a, b)| a * b).sum::<f64>();
        y.push(g + eps);
        xs.push(x);
        w.push(d);
        w.extend_from_slice(&xt);
        if config.intercept {
            w.push(1.0);
        }
        g0.push(g);
        alpha0.push(alpha);
    }
    let data = Dataset::new(y, xs, 1, w, width, 0)?;
    Ok((
        data,
        Truth {
            family,
            nu0,
            gamma0,
            propensity: props,
            g0,
            alpha0,
        },
    ))
}

/// Estimators compared by the experiment runners.
#[derive(Clone, Debug, PartialEq)]
pub enum Estimator {
    Drrf(DrrfConfig),
    /// `λ_g` chosen by cross-validation at every point.
    DrrfCv(DrrfConfig),
    /// `ψ` evaluated at the true nuisances.
    Oracle(DrrfConfig),
    /// Debiasing term removed.
    PlugIn(DrrfConfig),
    /// Predicts 0 everywhere with zero variance.
    Zero,
}

impl Estimator {
    pub fn label(&self) -> &'static str {
        match self {
            Estimator::Drrf(_) => "drrf",
            Estimator::DrrfCv(_) => "drrf-cv",
            Estimator::Oracle(_) => "oracle",
            Estimator::PlugIn(_) => "plug-in",
            Estimator::Zero => "zero",
        }
    }

    pub fn fit(&self, data: &Dataset, truth: &Truth, seed: u64) -> Result<Fitted> {
        let spec = truth.family.moment_spec();
        let model = match self {
            Estimator::Drrf(c) => fit(data, &spec, c, seed)?,
            Estimator::DrrfCv(c) => fit(data, &spec, &DrrfConfig { cv: true, ..c.clone() }, seed)?,
            Estimator::PlugIn(c) => fit(
                data,
                &spec,
                &DrrfConfig {
                    variant: Variant::PlugIn,
                    ..c.clone()
                },
                seed,
            )?,
            Estimator::Oracle(c) => fit_with_psi(data, &spec, c, seed, &|i| truth.oracle_psi(data, i))?,
            Estimator::Zero => return Ok(Fitted::Zero),
        };
        Ok(Fitted::Model(Box::new(model)))
    }
}

pub enum Fitted {
    Model(Box<DrrfModel>),
    Zero,
}

impl Fitted {
    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Vec<Result<f64>> {
        match self {
            Fitted::Model(m) => m.predict_batch(xs),
            Fitted::Zero => xs.iter().map(|_| Ok(0.0)).collect(),
        }
    }

    pub fn confidence_interval(&self, x: &[f64], level: f64) -> Result<EstimateWithCI> {
        match self {
            Fitted::Model(m) => m.confidence_interval(x, level),
            Fitted::Zero => Ok(EstimateWithCI {
                point: 0.0,
                variance: 0.0,
                lower: 0.0,
                upper: 0.0,
                level,
            }),
        }
    }
}

/// Root mean squared error of `estimates` against `θ₀` at `grid`.
pub fn grid_rmse(grid: &[f64], estimates: &[f64]) -> f64 {
    let sse: f64 = grid
        .iter()
        .zip(estimates)
        .map(|(&x, &t)| (t - theta0_unchecked(x)).powi(2))
        .sum();
    (sse / grid.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub rep: usize,
    pub seed: u64,
    pub rmse: f64,
    pub fit_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub label: String,
    pub config: DgpConfig,
    pub reps: Vec<RepResult>,
    pub failures: usize,
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len() as f64;
    v.sum::<f64>() / n
}

impl ExperimentReport {
    pub fn rmses(&self) -> Vec<f64> {
        self.reps.iter().map(|r| r.rmse).collect()
    }

    pub fn mean_rmse(&self) -> f64 {
        mean(self.reps.iter().map(|r| r.rmse))
    }

    pub fn sd_rmse(&self) -> f64 {
        let n = self.reps.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean_rmse();
        (self.reps.iter().map(|r| (r.rmse - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn mean_fit_seconds(&self) -> f64 {
        mean(self.reps.iter().map(|r| r.fit_seconds))
    }

    pub fn mean_eval_seconds(&self) -> f64 {
        mean(self.reps.iter().map(|r| r.eval_seconds))
    }

    /// `rep,rmse,fit_seconds,eval_seconds`, or `rep,rmse` without timings.
    pub fn write_reps_csv(&self, out: &mut impl Write, timings: bool) -> std::io::Result<()> {
        if timings {
            writeln!(out, "rep,rmse,fit_seconds,eval_seconds")?;
        } else {
            writeln!(out, "rep,rmse")?;
        }
        for r in &self.reps {
            if timings {
                writeln!(out, "{},{:?},{:?},{:?}", r.rep, r.rmse, r.fit_seconds, r.eval_seconds)?;
            } else {
                writeln!(out, "{},{:?}", r.rep, r.rmse)?;
            }
        }
        Ok(())
    }

    /// `rep,fit_seconds,eval_seconds` for timing sidecars.
    pub fn write_timings_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "rep,fit_seconds,eval_seconds")?;
        for r in &self.reps {
            writeln!(out, "{},{:?},{:?}", r.rep, r.fit_seconds, r.eval_seconds)?;
        }
        Ok(())
    }
}

pub const SUMMARY_HEADER: &str = "estimator,setup,k,reps,failures,mean_rmse,sd_rmse,mean_eval_seconds";

/// One summary row per report: estimator by setup and support size.
pub fn write_summary_csv(reports: &[ExperimentReport], out: &mut impl Write, timings: bool) -> std::io::Result<()> {
    if timings {
        writeln!(out, "{SUMMARY_HEADER}")?;
    } else {
        writeln!(out, "estimator,setup,k,reps,failures,mean_rmse,sd_rmse")?;
    }
    for r in reports {
        write!(
            out,
            "{},{},{},{},{},{:?},{:?}",
            r.label,
            r.config.family,
            r.config.k,
            r.reps.len(),
            r.failures,
            r.mean_rmse(),
            r.sd_rmse()
        )?;
        if timings {
            write!(out, ",{:?}", r.mean_eval_seconds())?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Median wall time of `runs` calls to `f`.
pub fn median_seconds(runs: usize, mut f: impl FnMut()) -> f64 {
    let mut times: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

fn grid_points(grid: &[f64]) -> Vec<Vec<f64>> {
    grid.iter().map(|&x| vec![x]).collect()
}

/// Fits on `reps` fresh datasets (seeds `seed + rep`) and scores each on the
/// 100-point grid. Failed replications are counted and skipped.
pub fn run_rmse_experiment(config: &DgpConfig, estimator: &Estimator, reps: usize) -> Result<ExperimentReport> {
    if reps == 0 {
        return Err(DrrfError::Config("reps must be at least 1".into()));
    }
    config.validate()?;
    let grid = eval_grid();
    let points = grid_points(&grid);
    let outcomes: Vec<Option<RepResult>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let seed = config.seed.wrapping_add(rep as u64);
            let (data, truth) = generate(&config.with_seed(seed)).ok()?;
            let start = Instant::now();
            let fitted = estimator.fit(&data, &truth, seed).ok()?;
            let fit_seconds = start.elapsed().as_secs_f64();
            let estimates = fitted
                .predict_batch(&points)
                .into_iter()
                .collect::<Result<Vec<_>>>()
                .ok()?;
            let eval_seconds = median_seconds(10, || {
                std::hint::black_box(fitted.predict_batch(&points));
            });
            Some(RepResult {
                rep,
                seed,
                rmse: grid_rmse(&grid, &estimates),
                fit_seconds,
                eval_seconds,
            })
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    Ok(ExperimentReport {
        label: estimator.label().to_string(),
        config: config.clone(),
        reps: outcomes.into_iter().flatten().collect(),
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub label: String,
    pub level: f64,
    pub grid: Vec<f64>,
    /// Fraction of successful replications whose interval contains `θ₀(x)`.
    pub coverage: Vec<f64>,
    pub mean_width: Vec<f64>,
    pub reps: usize,
    pub failures: usize,
}

impl CoverageReport {
    pub fn aggregate(&self) -> f64 {
        mean(self.coverage.iter().copied())
    }

    /// `x,coverage,mean_width`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "x,coverage,mean_width")?;
        for ((x, c), w) in self.grid.iter().zip(&self.coverage).zip(&self.mean_width) {
            writeln!(out, "{x:?},{c:?},{w:?}")?;
        }
        Ok(())
    }
}

pub fn run_coverage_experiment(
    config: &DgpConfig,
    estimator: &Estimator,
    reps: usize,
    level: f64,
    grid: &[f64],
) -> Result<CoverageReport> {
    if reps < 2 {
        return Err(DrrfError::Config("coverage needs at least 2 reps".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(DrrfError::Config(format!("confidence level {level} outside (0, 1)")));
    }
    config.validate()?;
    for &x in grid {
        theta0(x)?;
    }
    let outcomes: Vec<Option<Vec<(bool, f64)>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let seed = config.seed.wrapping_add(rep as u64);
            let (data, truth) = generate(&config.with_seed(seed)).ok()?;
            let fitted = estimator.fit(&data, &truth, seed).ok()?;
            grid.iter()
                .map(|&x| {
                    let ci = fitted.confidence_interval(&[x], level).ok()?;
                    let t = theta0_unchecked(x);
                    Some((ci.lower <= t && t <= ci.upper, ci.upper - ci.lower))
                })
                .collect()
        })
        .collect();
    let ok: Vec<Vec<(bool, f64)>> = outcomes.iter().flatten().cloned().collect();
    let failures = reps - ok.len();
    if ok.is_empty() {
        return Err(DrrfError::Config("every coverage replication failed".into()));
    }
    let n = ok.len() as f64;
    let coverage = (0..grid.len())
        .map(|j| ok.iter().filter(|r| r[j].0).count() as f64 / n)
        .collect();
    let mean_width = (0..grid.len())
        .map(|j| ok.iter().map(|r| r[j].1).sum::<f64>() / n)
        .collect();
    Ok(CoverageReport {
        label: estimator.label().to_string(),
        level,
        grid: grid.to_vec(),
        coverage,
        mean_width,
        reps: ok.len(),
        failures,
    })
}
