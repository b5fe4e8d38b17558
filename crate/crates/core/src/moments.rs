//! Moment functionals `m(z; g)` for the locally linear class `g(x, w) = wᵀν`,
//! their coordinate vectors `m̃(z) = (m(z; f₁), …, m(z; f_p))` with
//! `f_j(x, w) = w_j`, and the debiased functional
//! `ψ = m(z; g) + α(x, w)·(y − g(x, w))`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DrrfError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentKind {
    /// `g(x, (1, x̃)) − g(x, (0, x̃))`.
    Cate,
    /// `∂g(x, (d, x̃))/∂d`.
    Came,
    /// `π(x, x̃)·∂g(x, (d, x̃))/∂d`.
    Cipe,
    Custom,
}

impl std::str::FromStr for MomentKind {
    type Err = DrrfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cate" => Ok(MomentKind::Cate),
            "came" => Ok(MomentKind::Came),
            "cipe" => Ok(MomentKind::Cipe),
            "custom" => Ok(MomentKind::Custom),
            other => Err(DrrfError::Config(format!("unknown moment kind `{other}`"))),
        }
    }
}

/// One observation `z = (y, x, w)`.
#[derive(Clone, Copy, Debug)]
pub struct Obs<'a, T> {
    pub y: T,
    pub x: &'a [T],
    pub w: &'a [T],
}

/// Policy `π(x, x̃)`; receives the target covariates and the controls (w without the treatment column).
pub type Policy<T> = Arc<dyn Fn(&[T], &[T]) -> T + Send + Sync>;
/// Custom `m(z, g)`, where the second argument evaluates `g(x, ·)` at any `w`.
pub type CustomMoment<T> = Arc<dyn Fn(&Obs<'_, T>, &dyn Fn(&[T]) -> T) -> T + Send + Sync>;
/// Custom `m̃(z)`.
pub type CustomCoordinates<T> = Arc<dyn Fn(&Obs<'_, T>) -> Vec<T> + Send + Sync>;

#[derive(Clone)]
pub struct MomentSpec<T> {
    kind: MomentKind,
    treatment_col: usize,
    policy: Option<Policy<T>>,
    custom_m: Option<CustomMoment<T>>,
    custom_mtilde: Option<CustomCoordinates<T>>,
}

impl<T> fmt::Debug for MomentSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MomentSpec")
            .field("kind", &self.kind)
            .field("treatment_col", &self.treatment_col)
            .field("policy", &self.policy.is_some())
            .finish()
    }
}

impl<T: Scalar> MomentSpec<T> {
    pub fn cate(treatment_col: usize) -> Self {
        Self::plain(MomentKind::Cate, treatment_col)
    }

    pub fn came(treatment_col: usize) -> Self {
        Self::plain(MomentKind::Came, treatment_col)
    }

    pub fn cipe(treatment_col: usize, policy: Policy<T>) -> Self {
        Self {
            policy: Some(policy),
            ..Self::plain(MomentKind::Cipe, treatment_col)
        }
    }

    pub fn custom(
        treatment_col: usize,
        m: Option<CustomMoment<T>>,
        mtilde: Option<CustomCoordinates<T>>,
    ) -> Self {
        Self {
            custom_m: m,
            custom_mtilde: mtilde,
            ..Self::plain(MomentKind::Custom, treatment_col)
        }
    }

    fn plain(kind: MomentKind, treatment_col: usize) -> Self {
        Self {
            kind,
            treatment_col,
            policy: None,
            custom_m: None,
            custom_mtilde: None,
        }
    }

    /// Builds a spec from its kind; CIPE needs a policy, CUSTOM needs hooks.
    pub fn from_kind(kind: MomentKind, treatment_col: usize, policy: Option<Policy<T>>) -> Result<Self> {
        let spec = Self {
            policy,
            ..Self::plain(kind, treatment_col)
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.policy.is_some()) {
            (MomentKind::Cipe, false) => Err(DrrfError::Config("CIPE requires a policy".into())),
            (MomentKind::Cipe, true) => Ok(()),
            (_, true) => Err(DrrfError::Config(format!(
                "{:?} does not take a policy",
                self.kind
            ))),
            (MomentKind::Custom, false) if self.custom_mtilde.is_none() && self.custom_m.is_none() => {
                Err(DrrfError::Config("custom moment needs at least one hook".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn kind(&self) -> MomentKind {
        self.kind
    }

    pub fn treatment_col(&self) -> usize {
        self.treatment_col
    }

    fn check(&self, z: &Obs<'_, T>) -> Result<()> {
        if self.treatment_col >= z.w.len() {
            return Err(DrrfError::Shape(format!(
                "treatment column {} outside w of length {}",
                self.treatment_col,
                z.w.len()
            )));
        }
        Ok(())
    }

    fn policy_at(&self, z: &Obs<'_, T>) -> Result<T> {
        let policy = self
            .policy
            .as_ref()
            .ok_or_else(|| DrrfError::Config("CIPE requires a policy".into()))?;
        let controls: Vec<T> = z
            .w
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != self.treatment_col)
            .map(|(_, &v)| v)
            .collect();
        Ok(policy(z.x, &controls))
    }

    /// `m̃(z)`: the moment applied to every coordinate function `f_j(x, w) = w_j`.
    pub fn moment_of_coordinates(&self, z: &Obs<'_, T>) -> Result<Vec<T>> {
        self.check(z)?;
        let p = z.w.len();
        let indicator = |scale: T| {
            let mut v = vec![T::zero(); p];
            v[self.treatment_col] = scale;
            v
        };
        match self.kind {
            MomentKind::Cate | MomentKind::Came => Ok(indicator(T::one())),
            MomentKind::Cipe => Ok(indicator(self.policy_at(z)?)),
            MomentKind::Custom => {
                let hook = self.custom_mtilde.as_ref().ok_or_else(|| {
                    DrrfError::Config("custom moment has no coordinate hook".into())
                })?;
                let v = hook(z);
                if v.len() != p {
                    return Err(DrrfError::Shape(format!(
                        "custom m̃ has length {}, expected {p}",
                        v.len()
                    )));
                }
                Ok(v)
            }
        }
    }

    /// `m(z; g)` with `g(x, w) = wᵀν_g`.
    pub fn moment_value(&self, z: &Obs<'_, T>, nu_g: &[T]) -> Result<T> {
        if nu_g.len() != z.w.len() {
            return Err(DrrfError::Shape(format!(
                "ν_g has length {}, w has length {}",
                nu_g.len(),
                z.w.len()
            )));
        }
        if let (MomentKind::Custom, Some(m)) = (self.kind, &self.custom_m) {
            let g = |w: &[T]| dot(w, nu_g);
            return Ok(m(z, &g));
        }
        let mt = self.moment_of_coordinates(z)?;
        Ok(dot(&mt, nu_g))
    }

    /// `ψ(z) = m(z; wᵀν_g) + (wᵀν_α)(y − wᵀν_g)`.
    pub fn psi(&self, z: &Obs<'_, T>, pair: &NuisancePair<T>) -> Result<T> {
        if pair.nu_alpha.len() != z.w.len() {
            return Err(DrrfError::Shape("ν_α length differs from w".into()));
        }
        let m = self.moment_value(z, &pair.nu_g)?;
        let g = dot(z.w, &pair.nu_g);
        let alpha = dot(z.w, &pair.nu_alpha);
        Ok(m + alpha * (z.y - g))
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

/// Local coefficient vectors of the outcome regression and the Riesz representer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisancePair<T> {
    pub nu_g: Vec<T>,
    pub nu_alpha: Vec<T>,
}

impl<T: Scalar> NuisancePair<T> {
    pub fn new(nu_g: Vec<T>, nu_alpha: Vec<T>) -> Result<Self> {
        if nu_g.len() != nu_alpha.len() {
            return Err(DrrfError::Shape("ν_g and ν_α lengths differ".into()));
        }
        if nu_g.iter().chain(&nu_alpha).any(|v| !v.is_finite()) {
            return Err(DrrfError::Domain("non-finite nuisance coefficient".into()));
        }
        Ok(Self { nu_g, nu_alpha })
    }

    pub fn g(&self, w: &[T]) -> T {
        dot(w, &self.nu_g)
    }

    pub fn alpha(&self, w: &[T]) -> T {
        dot(w, &self.nu_alpha)
    }
}

/// The conditional Riesz representer of the binary-treatment CATE:
/// `d/e − (1 − d)/(1 − e)`.
pub fn true_riesz_cate<T: Scalar>(propensity: T, d: T) -> Result<T> {
    if !(propensity > T::zero() && propensity < T::one()) {
        return Err(DrrfError::Domain(format!(
            "propensity {propensity} outside (0, 1)"
        )));
    }
    Ok(d / propensity - (T::one() - d) / (T::one() - propensity))
}
