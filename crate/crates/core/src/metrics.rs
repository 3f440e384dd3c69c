//! Goodness-of-fit indicators, chosen-alternative probability distributions
//! (DPSA) and parameter ratio tables.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::{mixed_probabilities, mnl_probabilities, Coef, DrawMatrix, ModelKind, ObsDesign, ParameterSet, K};
use crate::stats::MinMeanMax;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("null log-likelihood is zero; rho is undefined")]
    ZeroNullLoglik,
    #[error("no observations to evaluate")]
    Empty,
    #[error("fold {0}: isWalkHome mean coefficient is zero")]
    ZeroWalkCoefficient(usize),
    #[error("fold {fold}: model kind {found} differs from {expected}")]
    MixedModels { fold: usize, expected: ModelKind, found: ModelKind },
    #[error("draw matrix covers {have} observations, need {need}")]
    TooFewDraws { have: usize, need: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Likelihood-ratio indices and information criteria.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Indicators {
    pub ll_null: f64,
    pub ll_final: f64,
    pub rho: f64,
    pub rho_bar_sq: f64,
    pub aic: f64,
    pub bic: f64,
    pub k: usize,
    pub n: usize,
}

pub fn indicators(ll_null: f64, ll_final: f64, k: usize, n: usize) -> Result<Indicators, MetricsError> {
    if ll_null == 0.0 {
        return Err(MetricsError::ZeroNullLoglik);
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let kf = k as f64;
    Ok(Indicators {
        ll_null,
        ll_final,
        rho: 1.0 - ll_final / ll_null,
        rho_bar_sq: 1.0 - (ll_final - kf) / ll_null,
        aic: 2.0 * kf - 2.0 * ll_final,
        bic: kf * (n as f64).ln() - 2.0 * ll_final,
        k,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpsaKind {
    Null,
    Final,
    Average,
    Closest,
}

impl DpsaKind {
    pub fn name(self) -> &'static str {
        match self {
            DpsaKind::Null => "null",
            DpsaKind::Final => "final",
            DpsaKind::Average => "average",
            DpsaKind::Closest => "closest",
        }
    }
}

impl fmt::Display for DpsaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Indicators plus, for validation sets, the DPSA distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorReport {
    #[serde(flatten)]
    pub indicators: Indicators,
    #[serde(default)]
    pub dpsa: BTreeMap<DpsaKind, MinMeanMax>,
}

/// Something that assigns a probability vector to a choice set.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// Uniform over the choice set.
    Null,
    /// All mass on the nearest alternative, split evenly among exact ties.
    Closest,
    Mnl(&'a [f64; K]),
    /// Mixed logit; observation `n` uses draw block `n` of `draws`.
    Mxl { mu: &'a [f64; K], sigma: &'a [f64; K], draws: &'a DrawMatrix },
}

impl<'a> Predictor<'a> {
    /// The predictor implied by a parameter set.
    pub fn from_params(p: &'a ParameterSet, draws: &'a DrawMatrix) -> Self {
        match p.model_kind {
            ModelKind::Mnl => Predictor::Mnl(&p.mu),
            ModelKind::Mxl => Predictor::Mxl { mu: &p.mu, sigma: &p.sigma, draws },
        }
    }
}

/// Distance of an alternative, recovered from its design row.
fn row_distance(row: &[f64; K]) -> f64 {
    row[Coef::DistNear.index()] + row[Coef::DistFar.index()]
}

/// Probability each observation's chosen alternative receives.
pub fn chosen_probabilities(obs: &[ObsDesign], predictor: Predictor<'_>) -> Result<Vec<f64>, MetricsError> {
    if let Predictor::Mxl { draws, .. } = predictor {
        if draws.n_users() < obs.len() {
            return Err(MetricsError::TooFewDraws { have: draws.n_users(), need: obs.len() });
        }
    }
    Ok(obs
        .iter()
        .enumerate()
        .map(|(n, o)| match predictor {
            Predictor::Null => 1.0 / o.rows.len() as f64,
            Predictor::Closest => {
                let best = o.rows.iter().map(row_distance).fold(f64::INFINITY, f64::min);
                let ties = o.rows.iter().filter(|r| row_distance(r) == best).count();
                if row_distance(&o.rows[o.chosen]) == best {
                    1.0 / ties as f64
                } else {
                    0.0
                }
            }
            Predictor::Mnl(beta) => {
                let v: Vec<f64> = o.rows.iter().map(|z| z.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
                mnl_probabilities(&v)[o.chosen]
            }
            Predictor::Mxl { mu, sigma, draws } => mixed_probabilities(&o.rows, mu, sigma, draws.user_block(n))[o.chosen],
        })
        .collect())
}

/// Min/mean/max of the chosen-alternative probabilities.
pub fn dpsa(obs: &[ObsDesign], predictor: Predictor<'_>) -> Result<MinMeanMax, MetricsError> {
    MinMeanMax::of(&chosen_probabilities(obs, predictor)?).ok_or(MetricsError::Empty)
}

/// Indicators of `predictor` on a set of observations, with `k` free parameters.
pub fn evaluate(obs: &[ObsDesign], predictor: Predictor<'_>, k: usize) -> Result<Indicators, MetricsError> {
    if obs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let probs = chosen_probabilities(obs, predictor)?;
    let ll: f64 = probs.iter().map(|p| p.ln()).sum();
    let ll_null: f64 = obs.iter().map(|o| -(o.rows.len() as f64).ln()).sum();
    indicators(ll_null, ll, k, obs.len())
}

/// Coefficients divided by their fold's isWalkHome mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub mu: [f64; K],
    pub sigma: [f64; K],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub model_kind: ModelKind,
    pub folds: Vec<RatioRow>,
    pub average: RatioRow,
}

impl RatioTable {
    /// The cross-fold average ratios as a parameter set.
    pub fn average_params(&self) -> ParameterSet {
        let mut p = ParameterSet::mnl(self.average.mu);
        p.model_kind = self.model_kind;
        if self.model_kind == ModelKind::Mxl {
            p.sigma = self.average.sigma;
        }
        p
    }

    /// Rows `coefficient,part,<fold>...,average`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), MetricsError> {
        write!(out, "coefficient,part")?;
        for f in 0..self.folds.len() {
            write!(out, ",{f}")?;
        }
        writeln!(out, ",average")?;
        let parts: &[&str] = match self.model_kind {
            ModelKind::Mnl => &["mu"],
            ModelKind::Mxl => &["mu", "sigma"],
        };
        for c in Coef::ALL {
            for &part in parts {
                let pick = |r: &RatioRow| if part == "mu" { r.mu[c.index()] } else { r.sigma[c.index()] };
                write!(out, "{},{part}", c.name())?;
                for r in &self.folds {
                    write!(out, ",{}", pick(r))?;
                }
                writeln!(out, ",{}", pick(&self.average))?;
            }
        }
        Ok(())
    }
}

pub fn ratio_row(p: &ParameterSet) -> Option<RatioRow> {
    let w = p.mean(Coef::IsWalkHome);
    if w == 0.0 {
        return None;
    }
    Some(RatioRow { mu: p.mu.map(|m| m / w), sigma: p.sigma.map(|s| s / w) })
}

pub fn ratio_table(folds: &[ParameterSet]) -> Result<RatioTable, MetricsError> {
    let first = folds.first().ok_or(MetricsError::Empty)?;
    let mut rows = Vec::with_capacity(folds.len());
    for (f, p) in folds.iter().enumerate() {
        if p.model_kind != first.model_kind {
            return Err(MetricsError::MixedModels { fold: f, expected: first.model_kind, found: p.model_kind });
        }
        rows.push(ratio_row(p).ok_or(MetricsError::ZeroWalkCoefficient(f))?);
    }
    let n = rows.len() as f64;
    let mut average = RatioRow { mu: [0.0; K], sigma: [0.0; K] };
    for r in &rows {
        for k in 0..K {
            average.mu[k] += r.mu[k];
            average.sigma[k] += r.sigma[k];
        }
    }
    average.mu.iter_mut().chain(average.sigma.iter_mut()).for_each(|v| *v /= n);
    Ok(RatioTable { model_kind: first.model_kind, folds: rows, average })
}

/// Delta-method standard errors of the mu and sigma ratios given the
/// covariance of the free parameter vector (`[mu]` or `[mu, sigma]`).
/// The isWalkHome mean ratio is exactly 1 and gets a zero error.
pub fn ratio_std_errors(p: &ParameterSet, cov: &[Vec<f64>]) -> RatioRow {
    let w_ix = Coef::IsWalkHome.index();
    let w = p.mu[w_ix];
    let var_w = cov[w_ix][w_ix];
    let se = |a: f64, ix: usize| {
        let v = cov[ix][ix] / (w * w) + a * a * var_w / w.powi(4) - 2.0 * a * cov[ix][w_ix] / w.powi(3);
        v.max(0.0).sqrt()
    };
    let mut out = RatioRow { mu: [f64::NAN; K], sigma: [f64::NAN; K] };
    for k in 0..K {
        out.mu[k] = if k == w_ix { 0.0 } else { se(p.mu[k], k) };
        if p.model_kind == ModelKind::Mxl {
            out.sigma[k] = se(p.sigma[k], K + k);
        }
    }
    out
}

/// Indicator table, one row per indicator and one column per report.
pub fn write_indicator_csv<W: Write>(reports: &[IndicatorReport], mut out: W) -> Result<(), MetricsError> {
    write!(out, "indicator")?;
    for f in 0..reports.len() {
        write!(out, ",{f}")?;
    }
    writeln!(out)?;
    type Getter = fn(&Indicators) -> f64;
    let rows: [(&str, Getter); 8] = [
        ("ll_null", |i| i.ll_null),
        ("ll_final", |i| i.ll_final),
        ("rho", |i| i.rho),
        ("rho_bar_sq", |i| i.rho_bar_sq),
        ("aic", |i| i.aic),
        ("bic", |i| i.bic),
        ("k", |i| i.k as f64),
        ("n", |i| i.n as f64),
    ];
    for (name, get) in rows {
        write!(out, "{name}")?;
        for r in reports {
            write!(out, ",{}", get(&r.indicators))?;
        }
        writeln!(out)?;
    }
    let kinds: Vec<DpsaKind> = {
        let mut v: Vec<DpsaKind> = reports.iter().flat_map(|r| r.dpsa.keys().copied()).collect();
        v.sort();
        v.dedup();
        v
    };
    for kind in kinds {
        for (stat, get) in [("min", 0usize), ("mean", 1), ("max", 2)] {
            write!(out, "dpsa_{kind}_{stat}")?;
            for r in reports {
                match r.dpsa.get(&kind) {
                    Some(d) => write!(out, ",{}", [d.min, d.mean, d.max][get])?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::DrawKind;
    use proptest::prelude::*;

    fn obs(dists: &[f64], chosen: usize) -> ObsDesign {
        let rows = dists
            .iter()
            .map(|&d| {
                let mut z = [0.0; K];
                z[Coef::DistFar.index()] = d;
                z
            })
            .collect();
        ObsDesign { chosen, rows }
    }

    #[test]
    fn indicator_formulas() {
        let r = indicators(-31030.6143, -26141.5274, 13, 5000).unwrap();
        assert!((r.rho - 0.1576).abs() < 5e-4);
        assert!((r.rho_bar_sq - 0.1571).abs() < 5e-4);
        assert!((r.aic - 52309.0547).abs() < 0.01);
        assert!((r.bic - 52393.7783).abs() < 0.01);
        let m = indicators(-31030.6143, -22557.9877, 26, 5000).unwrap();
        assert!((m.aic - 45167.9754).abs() < 0.01);
    }

    #[test]
    fn indicator_edge_cases() {
        assert_eq!(indicators(-10.0, -10.0, 3, 5).unwrap().rho, 0.0);
        assert!(matches!(indicators(0.0, -1.0, 3, 5), Err(MetricsError::ZeroNullLoglik)));
    }

    #[test]
    fn dpsa_predictors() {
        let data = vec![obs(&[1.0; 18], 0), obs(&[2.0, 3.0, 4.0], 0)];
        let null = dpsa(&data, Predictor::Null).unwrap();
        assert!((null.mean - (1.0 / 18.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((null.min - 1.0 / 18.0).abs() < 1e-15);

        let closest = dpsa(&[obs(&[2.0, 3.0], 0), obs(&[5.0, 1.0, 4.0], 1)], Predictor::Closest).unwrap();
        assert_eq!(closest.mean, 1.0);
        let missed = chosen_probabilities(&[obs(&[2.0, 3.0], 1)], Predictor::Closest).unwrap();
        assert_eq!(missed, vec![0.0]);
        assert!(dpsa(&[], Predictor::Null).is_err());
    }

    #[test]
    fn dpsa_of_known_probabilities() {
        // V = (ln 4, 0) gives 0.8 / 0.2
        let mut beta = [0.0; K];
        beta[Coef::DistFar.index()] = 4f64.ln();
        let data = vec![obs(&[1.0, 0.0], 1), obs(&[1.0, 0.0], 0)];
        let d = dpsa(&data, Predictor::Mnl(&beta)).unwrap();
        assert!((d.min - 0.2).abs() < 1e-12 && (d.max - 0.8).abs() < 1e-12 && (d.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mxl_predictor_with_zero_sigma_is_mnl() {
        let mut beta = [0.0; K];
        beta[Coef::DistFar.index()] = -0.3;
        let data = vec![obs(&[1.0, 2.0, 0.5], 2), obs(&[3.0, 1.0], 0)];
        let draws = DrawMatrix::generate(2, 7, K, 3, DrawKind::Pseudo);
        let a = chosen_probabilities(&data, Predictor::Mnl(&beta)).unwrap();
        let b = chosen_probabilities(&data, Predictor::Mxl { mu: &beta, sigma: &[0.0; K], draws: &draws }).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ratios() {
        let mut mu = [0.0; K];
        mu[Coef::IsWalkHome.index()] = 2.0;
        mu[Coef::DistFar.index()] = -0.4;
        let t = ratio_table(&[ParameterSet::mnl(mu)]).unwrap();
        assert!((t.folds[0].mu[Coef::DistFar.index()] + 0.2).abs() < 1e-15);
        assert_eq!(t.folds[0].mu[Coef::IsWalkHome.index()], 1.0);

        let folds: Vec<ParameterSet> = [0.1, 0.2, 0.3, 0.4, 0.5]
            .iter()
            .map(|&r| {
                let mut mu = [0.0; K];
                mu[Coef::IsWalkHome.index()] = 1.0;
                mu[Coef::Rest.index()] = r;
                ParameterSet::mnl(mu)
            })
            .collect();
        let t = ratio_table(&folds).unwrap();
        assert!((t.average.mu[Coef::Rest.index()] - 0.3).abs() < 1e-15);

        let mut zero = folds.clone();
        zero[3].mu[Coef::IsWalkHome.index()] = 0.0;
        assert!(matches!(ratio_table(&zero), Err(MetricsError::ZeroWalkCoefficient(3))));
    }

    #[test]
    fn ratio_se_matches_finite_difference_delta() {
        let mut mu = [0.1; K];
        mu[Coef::IsWalkHome.index()] = 0.8;
        let p = ParameterSet::mnl(mu);
        let mut cov = vec![vec![0.0; K]; K];
        for k in 0..K {
            cov[k][k] = 0.01;
        }
        let w = Coef::IsWalkHome.index();
        cov[0][w] = 0.002;
        cov[w][0] = 0.002;
        let se = ratio_std_errors(&p, &cov);
        // gradient of a/w is (1/w, -a/w^2)
        let (a, wv): (f64, f64) = (0.1, 0.8);
        let g = [1.0 / wv, -a / (wv * wv)];
        let v = g[0] * g[0] * 0.01 + g[1] * g[1] * 0.01 + 2.0 * g[0] * g[1] * 0.002;
        assert!((se.mu[0] - v.sqrt()).abs() < 1e-12);
        assert_eq!(se.mu[w], 0.0);
    }

    #[test]
    fn csv_layout() {
        let r = IndicatorReport { indicators: indicators(-10.0, -8.0, 2, 4).unwrap(), dpsa: BTreeMap::new() };
        let mut buf = Vec::new();
        write_indicator_csv(&[r.clone(), r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("indicator,0,1\nll_null,-10,-10\n"));
    }

    proptest! {
        #[test]
        fn ratios_are_scale_invariant(
            mu in proptest::array::uniform13(-3.0f64..3.0),
            sigma in proptest::array::uniform13(0.0f64..2.0),
            c in 0.01f64..100.0,
        ) {
            let mut mu = mu;
            if mu[Coef::IsWalkHome.index()].abs() < 1e-3 {
                mu[Coef::IsWalkHome.index()] = 1.0;
            }
            let p = ParameterSet::mxl(mu, sigma);
            let a = ratio_row(&p).unwrap();
            let b = ratio_row(&p.scaled(c)).unwrap();
            for k in 0..K {
                prop_assert!((a.mu[k] - b.mu[k]).abs() <= 1e-12 * a.mu[k].abs().max(1.0));
                prop_assert!((a.sigma[k] - b.sigma[k]).abs() <= 1e-12 * a.sigma[k].abs().max(1.0));
            }
        }

        #[test]
        fn null_mean_is_mean_inverse_size(sizes in proptest::collection::vec(1usize..30, 1..40)) {
            let data: Vec<ObsDesign> = sizes.iter().map(|&m| obs(&vec![1.0; m], 0)).collect();
            let d = dpsa(&data, Predictor::Null).unwrap();
            let expect = sizes.iter().map(|&m| 1.0 / m as f64).sum::<f64>() / sizes.len() as f64;
            prop_assert!((d.mean - expect).abs() < 1e-14);
        }
    }
}
