//! Coefficient layout and parameter sets.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ChoiceError;

/// Number of utility coefficients.
pub const K: usize = 13;

/// Utility coefficients in storage order. The first three apply within the
/// near-home threshold, the remaining ten beyond it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Coef {
    DistNear,
    OutletsNear,
    IsWalkHome,
    DistFar,
    OutletsFar,
    IsGas,
    Leis,
    Sport,
    Sm,
    Shop,
    Mall,
    Rest,
    Ff,
}

impl Coef {
    pub const ALL: [Coef; K] = [
        Coef::DistNear,
        Coef::OutletsNear,
        Coef::IsWalkHome,
        Coef::DistFar,
        Coef::OutletsFar,
        Coef::IsGas,
        Coef::Leis,
        Coef::Sport,
        Coef::Sm,
        Coef::Shop,
        Coef::Mall,
        Coef::Rest,
        Coef::Ff,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Coef::DistNear => "distNear",
            Coef::OutletsNear => "outletsNear",
            Coef::IsWalkHome => "isWalkHome",
            Coef::DistFar => "distFar",
            Coef::OutletsFar => "outletsFar",
            Coef::IsGas => "isGas",
            Coef::Leis => "leis",
            Coef::Sport => "sport",
            Coef::Sm => "sm",
            Coef::Shop => "shop",
            Coef::Mall => "mall",
            Coef::Rest => "rest",
            Coef::Ff => "ff",
        }
    }

    pub fn from_name(name: &str) -> Option<Coef> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Coef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Mnl,
    Mxl,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mnl => "MNL",
            ModelKind::Mxl => "MXL",
        })
    }
}

impl FromStr for ModelKind {
    type Err = ChoiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mnl" => Ok(ModelKind::Mnl),
            "mxl" => Ok(ModelKind::Mxl),
            _ => Err(ChoiceError::Parse(format!("unknown model kind `{s}`"))),
        }
    }
}

/// Means and standard deviations of the 13 coefficients. For MNL every
/// standard deviation is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub model_kind: ModelKind,
    pub mu: [f64; K],
    pub sigma: [f64; K],
    pub near_threshold_km: f64,
    pub seed: u64,
    pub draws: usize,
}

impl ParameterSet {
    pub fn mnl(mu: [f64; K]) -> Self {
        Self { model_kind: ModelKind::Mnl, mu, sigma: [0.0; K], near_threshold_km: 1.5, seed: 0, draws: 0 }
    }

    pub fn mxl(mu: [f64; K], sigma: [f64; K]) -> Self {
        Self { model_kind: ModelKind::Mxl, mu, sigma, near_threshold_km: 1.5, seed: 0, draws: 0 }
    }

    pub fn mean(&self, c: Coef) -> f64 {
        self.mu[c.index()]
    }

    pub fn sd(&self, c: Coef) -> f64 {
        self.sigma[c.index()]
    }

    /// Free parameters: 13 for MNL, 26 for MXL.
    pub fn free_count(&self) -> usize {
        match self.model_kind {
            ModelKind::Mnl => K,
            ModelKind::Mxl => 2 * K,
        }
    }

    /// `[mu]` for MNL, `[mu, sigma]` for MXL.
    pub fn to_vector(&self) -> Vec<f64> {
        match self.model_kind {
            ModelKind::Mnl => self.mu.to_vec(),
            ModelKind::Mxl => self.mu.iter().chain(&self.sigma).copied().collect(),
        }
    }

    pub fn from_vector(kind: ModelKind, v: &[f64]) -> Self {
        let mut mu = [0.0; K];
        mu.copy_from_slice(&v[..K]);
        let mut sigma = [0.0; K];
        if kind == ModelKind::Mxl {
            sigma.copy_from_slice(&v[K..2 * K]);
        }
        Self { model_kind: kind, mu, sigma, near_threshold_km: 1.5, seed: 0, draws: 0 }
    }

    /// Multiplies every mean and standard deviation by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.mu.iter_mut().for_each(|m| *m *= c);
        out.sigma.iter_mut().for_each(|s| *s *= c);
        out
    }

    pub fn validate(&self) -> Result<(), ChoiceError> {
        if self.model_kind == ModelKind::Mnl && self.sigma.iter().any(|&s| s != 0.0) {
            return Err(ChoiceError::Parse("MNL parameter set has a non-zero sigma".into()));
        }
        if self.mu.iter().chain(&self.sigma).any(|v| !v.is_finite()) {
            return Err(ChoiceError::Parse("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Flat `key = value` text, one entry per line.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "model_kind = {}", self.model_kind).unwrap();
        writeln!(out, "near_threshold_km = {}", self.near_threshold_km).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        writeln!(out, "draws = {}", self.draws).unwrap();
        for c in Coef::ALL {
            writeln!(out, "beta.{}.mu = {}", c.name(), self.mu[c.index()]).unwrap();
            writeln!(out, "beta.{}.sigma = {}", c.name(), self.sigma[c.index()]).unwrap();
        }
        out
    }

    /// Parses [`ParameterSet::to_kv`] output. Blank lines and `#` comments
    /// are skipped; missing sigma entries default to zero.
    pub fn from_kv(text: &str) -> Result<Self, ChoiceError> {
        let mut kind = None;
        let mut mu = [f64::NAN; K];
        let mut sigma = [0.0; K];
        let mut near = 1.5;
        let mut seed = 0;
        let mut draws = 0;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| ChoiceError::Parse(format!("line {}: {what}: `{line}`", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || value.parse::<f64>().map_err(|_| bad("not a number"));
            match key {
                "model_kind" => kind = Some(value.parse()?),
                "near_threshold_km" => near = num()?,
                "seed" => seed = value.parse().map_err(|_| bad("not an integer"))?,
                "draws" => draws = value.parse().map_err(|_| bad("not an integer"))?,
                _ => {
                    let rest = key.strip_prefix("beta.").ok_or_else(|| bad("unknown key"))?;
                    let (name, part) = rest.rsplit_once('.').ok_or_else(|| bad("unknown key"))?;
                    let c = Coef::from_name(name).ok_or_else(|| bad("unknown coefficient"))?;
                    match part {
                        "mu" => mu[c.index()] = num()?,
                        "sigma" => sigma[c.index()] = num()?,
                        _ => return Err(bad("unknown key")),
                    }
                }
            }
        }
        let kind = kind.ok_or_else(|| ChoiceError::Parse("missing model_kind".into()))?;
        if let Some(c) = Coef::ALL.into_iter().find(|c| mu[c.index()].is_nan()) {
            return Err(ChoiceError::Parse(format!("missing beta.{}.mu", c.name())));
        }
        let p = Self { model_kind: kind, mu, sigma, near_threshold_km: near, seed, draws };
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn coefficient_order() {
        assert_eq!(Coef::ALL.len(), K);
        for (i, c) in Coef::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(Coef::from_name(c.name()), Some(*c));
        }
    }

    #[test]
    fn kv_rejects_garbage() {
        assert!(ParameterSet::from_kv("model_kind = MNL\n").is_err());
        assert!(ParameterSet::from_kv("nonsense").is_err());
        let mut text = ParameterSet::mnl([0.1; K]).to_kv();
        text.push_str("beta.isGas.sigma = 0.3\n");
        assert!(ParameterSet::from_kv(&text).is_err(), "MNL with sigma must be rejected");
    }

    proptest! {
        #[test]
        fn kv_round_trip(
            mu in proptest::array::uniform13(-5.0f64..5.0),
            sigma in proptest::array::uniform13(0.0f64..3.0),
            seed in any::<u64>(),
            draws in 0usize..5000,
        ) {
            let mut p = ParameterSet::mxl(mu, sigma);
            p.seed = seed;
            p.draws = draws;
            prop_assert_eq!(ParameterSet::from_kv(&p.to_kv()).unwrap(), p);
        }
    }
}
