//! (mu/mu_w, lambda) CMA-ES with an ask/tell interface.
//!
//! The search runs in coordinates normalized to the unit box of the design
//! bounds, so `sigma0` is a fraction of each bound's width. Candidates are
//! returned as sampled, out-of-box points included; the caller penalizes them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{check_design, GEAR_BOUNDS_HI, GEAR_BOUNDS_LO, NUM_GEARS};

/// Fitness assigned to infeasible designs.
pub const PENALTY: f64 = 1e6;

/// Smallest eigenvalue kept in `C`, relative to the largest.
const EIGEN_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmaesError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("expected {expected} fitness values, got {got}")]
    BatchSize { expected: usize, got: usize },
    #[error("fitness of candidate {0} is not finite")]
    NonFinite(usize),
    #[error("tell called without a pending ask")]
    NoPendingAsk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaesConfig {
    pub population: usize,
    pub generations: usize,
    pub sigma0: f64,
    pub seed: u64,
    pub bounds_lo: Vec<f64>,
    pub bounds_hi: Vec<f64>,
    pub penalty_value: f64,
    /// Start point; the box centre when absent.
    pub initial_mean: Option<Vec<f64>>,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        CmaesConfig {
            population: 100,
            generations: 30,
            sigma0: 0.3,
            seed: 0,
            bounds_lo: GEAR_BOUNDS_LO.to_vec(),
            bounds_hi: GEAR_BOUNDS_HI.to_vec(),
            penalty_value: PENALTY,
            initial_mean: None,
        }
    }
}

impl CmaesConfig {
    /// Reduced budget used for quick studies: 20 candidates, 10 generations.
    pub fn desk_scale() -> Self {
        CmaesConfig { population: 20, generations: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CmaesError> {
        let bad = |m: String| Err(CmaesError::Config(m));
        if self.population < 4 {
            return bad(format!("population {} must be at least 4", self.population));
        }
        if !(self.sigma0 > 0.0) || !self.sigma0.is_finite() {
            return bad(format!("sigma0 {} must be positive", self.sigma0));
        }
        if self.bounds_lo.is_empty() || self.bounds_lo.len() != self.bounds_hi.len() {
            return bad("bounds must be non-empty and of equal length".into());
        }
        for (i, (lo, hi)) in self.bounds_lo.iter().zip(&self.bounds_hi).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("bound {i}: lower {lo} must be below upper {hi}"));
            }
        }
        if let Some(m) = &self.initial_mean {
            if m.len() != self.bounds_lo.len() || m.iter().any(|v| !v.is_finite()) {
                return bad("initial mean has wrong length or non-finite entries".into());
            }
        }
        if !self.penalty_value.is_finite() {
            return bad("penalty must be finite".into());
        }
        Ok(())
    }
}

/// One evaluated design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignCandidate {
    pub gear_ratios: [f64; NUM_GEARS],
    pub fitness: f64,
    pub feasible: bool,
    /// Inner solver status, `None` when the design was rejected before solving.
    pub solve_status: Option<String>,
}

/// Optimizer state.
#[derive(Debug, Clone)]
pub struct Cmaes {
    dim: usize,
    lambda: usize,
    mu: usize,
    weights: Vec<f64>,
    mueff: f64,
    cc: f64,
    cs: f64,
    c1: f64,
    cmu: f64,
    damps: f64,
    chi_n: f64,
    lo: Vec<f64>,
    width: Vec<f64>,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    pc: DVector<f64>,
    ps: DVector<f64>,
    rng: ChaCha8Rng,
    pending: Option<Vec<DVector<f64>>>,
    generation: usize,
    evaluations: usize,
    best: Option<(Vec<f64>, f64)>,
}

impl Cmaes {
    pub fn new(config: &CmaesConfig) -> Result<Self, CmaesError> {
        config.validate()?;
        let dim = config.bounds_lo.len();
        let lambda = config.population;
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..mu).map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln()).collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let n = dim as f64;
        let cc = (4.0 + mueff / n) / (n + 4.0 + 2.0 * mueff / n);
        let cs = (mueff + 2.0) / (n + mueff + 5.0);
        let c1 = 2.0 / ((n + 1.3).powi(2) + mueff);
        let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((n + 2.0).powi(2) + mueff));
        let damps = 1.0 + 2.0 * (((mueff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        let lo = config.bounds_lo.clone();
        let width: Vec<f64> = config.bounds_hi.iter().zip(&lo).map(|(h, l)| h - l).collect();
        let mean = match &config.initial_mean {
            Some(m) => DVector::from_iterator(dim, m.iter().zip(lo.iter().zip(&width)).map(|(v, (l, w))| (v - l) / w)),
            None => DVector::from_element(dim, 0.5),
        };
        Ok(Cmaes {
            dim,
            lambda,
            mu,
            weights,
            mueff,
            cc,
            cs,
            c1,
            cmu,
            damps,
            chi_n,
            lo,
            width,
            mean,
            sigma: config.sigma0,
            cov: DMatrix::identity(dim, dim),
            basis: DMatrix::identity(dim, dim),
            scales: DVector::from_element(dim, 1.0),
            pc: DVector::zeros(dim),
            ps: DVector::zeros(dim),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            pending: None,
            generation: 0,
            evaluations: 0,
            best: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn population(&self) -> usize {
        self.lambda
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Current mean in design coordinates.
    pub fn mean(&self) -> Vec<f64> {
        self.to_design(&self.mean)
    }

    /// Covariance in normalized coordinates.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Best design seen so far with its fitness.
    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.best.as_ref().map(|(x, f)| (x.as_slice(), *f))
    }

    fn to_design(&self, y: &DVector<f64>) -> Vec<f64> {
        y.iter().zip(self.lo.iter().zip(&self.width)).map(|(v, (l, w))| l + v * w).collect()
    }

    /// Samples a new population. Calling `ask` again before `tell` discards
    /// the previous batch.
    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        let bd = &self.basis * DMatrix::from_diagonal(&self.scales);
        let mut ys = Vec::with_capacity(self.lambda);
        for _ in 0..self.lambda {
            let z = DVector::from_iterator(self.dim, (0..self.dim).map(|_| StandardNormal.sample(&mut self.rng)));
            ys.push(&self.mean + (&bd * z) * self.sigma);
        }
        let out = ys.iter().map(|y| self.to_design(y)).collect();
        self.pending = Some(ys);
        out
    }

    /// Updates mean, paths, step size and covariance from the fitness of the
    /// last asked batch (lower is better).
    pub fn tell(&mut self, fitness: &[f64]) -> Result<(), CmaesError> {
        let Some(ys) = self.pending.as_ref() else {
            return Err(CmaesError::NoPendingAsk);
        };
        if fitness.len() != ys.len() {
            return Err(CmaesError::BatchSize { expected: ys.len(), got: fitness.len() });
        }
        if let Some(i) = fitness.iter().position(|f| !f.is_finite()) {
            return Err(CmaesError::NonFinite(i));
        }
        let ys = self.pending.take().expect("checked above");
        self.evaluations += ys.len();
        self.generation += 1;

        let mut order: Vec<usize> = (0..ys.len()).collect();
        order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
        let best = order[0];
        if self.best.as_ref().is_none_or(|(_, f)| fitness[best] < *f) {
            self.best = Some((self.to_design(&ys[best]), fitness[best]));
        }
        let flat = fitness.iter().all(|f| *f == fitness[0]);

        // Without a ranking there is no selection: the mean stays put and the
        // rank-mu term keeps C.
        let old = self.mean.clone();
        if !flat {
            self.mean = order[..self.mu]
                .iter()
                .zip(&self.weights)
                .fold(DVector::zeros(self.dim), |acc, (&i, w)| acc + &ys[i] * *w);
        }
        let shift = (&self.mean - &old) / self.sigma;

        let inv_sqrt = &self.basis * DMatrix::from_diagonal(&self.scales.map(|d| 1.0 / d)) * self.basis.transpose();
        self.ps = &self.ps * (1.0 - self.cs) + (&inv_sqrt * &shift) * (self.cs * (2.0 - self.cs) * self.mueff).sqrt();
        let n = self.dim as f64;
        let gens = self.generation as f64;
        let ps_norm = self.ps.norm();
        let hsig = ps_norm / (1.0 - (1.0 - self.cs).powf(2.0 * gens)).sqrt() / self.chi_n < 1.4 + 2.0 / (n + 1.0);
        let hsig = if hsig { 1.0 } else { 0.0 };
        self.pc = &self.pc * (1.0 - self.cc) + &shift * (hsig * (self.cc * (2.0 - self.cc) * self.mueff).sqrt());

        let rank_one = &self.pc * self.pc.transpose() + &self.cov * ((1.0 - hsig) * self.cc * (2.0 - self.cc));
        let rank_mu = if flat {
            self.cov.clone()
        } else {
            order[..self.mu].iter().zip(&self.weights).fold(DMatrix::zeros(self.dim, self.dim), |acc, (&i, w)| {
                let d = (&ys[i] - &old) / self.sigma;
                acc + &d * d.transpose() * *w
            })
        };
        self.cov = &self.cov * (1.0 - self.c1 - self.cmu) + rank_one * self.c1 + rank_mu * self.cmu;
        self.sigma *= ((self.cs / self.damps) * (ps_norm / self.chi_n - 1.0)).exp();
        self.decompose();
        Ok(())
    }

    /// Symmetrizes `C`, floors its spectrum and refreshes `B` and `D`.
    fn decompose(&mut self) {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let vals = eig.eigenvalues.map(|v| v.max(top * EIGEN_FLOOR));
        self.cov = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        self.basis = eig.eigenvectors;
        self.scales = vals.map(f64::sqrt);
    }
}

/// Fitness of a gear-ratio vector: the penalty if it leaves the box, breaks
/// the ordering `g3 <= g2 < g1`, or the inner evaluation reports no feasible
/// motion; the inner cost otherwise.
pub fn penalized_fitness<F>(g: &[f64; NUM_GEARS], lo: &[f64; NUM_GEARS], hi: &[f64; NUM_GEARS], penalty: f64, inner: F) -> f64
where
    F: FnOnce(&[f64; NUM_GEARS]) -> Option<f64>,
{
    if check_design(g, lo, hi).is_err() {
        return penalty;
    }
    match inner(g) {
        Some(cost) if cost.is_finite() => cost,
        _ => penalty,
    }
}
