//! Repeated fitting experiments on Morlet and random-filter targets.
//!
//! Every trial draws from its own ChaCha stream (stream index = trial
//! index), so the results do not depend on how trials are scheduled.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::bases::{BasisKind, BasisSet};
use crate::error::{invalid, Result};
use crate::grid::GridSpec;
use crate::parametrize::{morlet_filter, random_resized_filter_with, rmse, MorletParams, RidgeFitter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitCase {
    /// Fit and compare on the unrotated grid.
    Original,
    /// Fit unrotated, synthesize with bases rotated by 45°, compare with the
    /// analytically rotated target.
    Rot45,
    /// One coefficient vector fitted jointly to the target and its 45°
    /// rotation.
    Simultaneous,
}

impl FitCase {
    pub fn name(&self) -> &'static str {
        match self {
            FitCase::Original => "original",
            FitCase::Rot45 => "rot45",
            FitCase::Simultaneous => "simultaneous",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetKind {
    /// Morlet target with random orientation and translation
    /// `b ~ N(0, translation_std² I)`.
    Morlet { a: [f64; 2], translation_std: f64 },
    /// Bicubically resized 8x8 Gaussian patch. Only the original case is
    /// defined.
    RandomResized,
}

impl TargetKind {
    pub fn name(&self) -> &'static str {
        match self {
            TargetKind::Morlet { .. } => "morlet",
            TargetKind::RandomResized => "random",
        }
    }

    pub fn default_morlet() -> Self {
        TargetKind::Morlet { a: [2.0, 1.5], translation_std: 0.1 }
    }

    pub fn cases(&self) -> &'static [FitCase] {
        match self {
            TargetKind::Morlet { .. } => &[FitCase::Original, FitCase::Rot45, FitCase::Simultaneous],
            TargetKind::RandomResized => &[FitCase::Original],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrialConfig {
    pub kind: BasisKind,
    pub grid: GridSpec,
    pub trials: usize,
    pub seed: u64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct CaseStats {
    pub case: FitCase,
    pub errors: Vec<f64>,
}

impl CaseStats {
    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.errors.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / self.errors.len() as f64).sqrt()
    }
}

struct Fitters {
    single: RidgeFitter,
    joint: Option<RidgeFitter>,
}

/// Runs `cfg.trials` fits of `target` and reports per-case errors.
pub fn run_fit_trials(target: TargetKind, cfg: &TrialConfig) -> Result<Vec<CaseStats>> {
    if cfg.trials == 0 {
        return Err(invalid("trial count must be at least 1"));
    }
    if let TargetKind::Morlet { translation_std, .. } = target {
        if !(translation_std >= 0.0) {
            return Err(invalid("translation std must be non-negative"));
        }
    }
    let set = BasisSet::new(cfg.kind, cfg.grid);
    let fitters = Fitters {
        single: RidgeFitter::new(&set, cfg.lambda, &[0.0])?,
        joint: match target {
            TargetKind::Morlet { .. } => Some(RidgeFitter::new(&set, cfg.lambda, &[0.0, PI / 4.0])?),
            TargetKind::RandomResized => None,
        },
    };
    let support = set.mask_samples();
    let per_trial: Vec<Vec<f64>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(trial as u64);
            run_trial(target, &fitters, &support, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(target
        .cases()
        .iter()
        .enumerate()
        .map(|(c, case)| CaseStats { case: *case, errors: per_trial.iter().map(|e| e[c]).collect() })
        .collect())
}

fn run_trial(target: TargetKind, fitters: &Fitters, support: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let grid = *fitters.single.set().grid();
    match target {
        TargetKind::RandomResized => {
            let t = &random_resized_filter_with(rng, grid.p())? * support;
            let fit = fitters.single.fit(&t)?;
            Ok(vec![rmse(&fit.fitted, &t, support)?])
        }
        TargetKind::Morlet { a, translation_std } => {
            let theta = rng.random_range(0.0..2.0 * PI);
            let normal = Normal::new(0.0, translation_std).map_err(|e| invalid(e.to_string()))?;
            let b = [normal.sample(rng), normal.sample(rng)];
            let params = MorletParams::new(a, b)?;
            let t0 = &morlet_filter(&params, &grid, theta) * support;
            let t45 = &morlet_filter(&params, &grid, theta + PI / 4.0) * support;

            let fit = fitters.single.fit(&t0)?;
            let original = rmse(&fit.fitted, &t0, support)?;
            let rotated = fitters.single.synthesize_at_angle(&fit.coefficients, PI / 4.0)?;
            let rot45 = rmse(&rotated, &t45, support)?;

            let joint = fitters.joint.as_ref().expect("joint fitter exists for Morlet targets");
            let (w, _) = joint.fit_stacked(&[t0.clone(), t45.clone()])?;
            let f0 = joint.synthesize_at_angle(&w, 0.0)?;
            let f45 = joint.synthesize_at_angle(&w, PI / 4.0)?;
            Ok(vec![original, rot45, joint_rmse(&[(&f0, &t0), (&f45, &t45)], support)])
        }
    }
}

/// Relative error of several fitted/target pairs under one norm.
fn joint_rmse(pairs: &[(&Array2<f64>, &Array2<f64>)], support: &Array2<f64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (f, t) in pairs {
        for ((f, t), m) in f.iter().zip(t.iter()).zip(support) {
            if *m > 0.0 {
                num += (f - t) * (f - t);
                den += t * t;
            }
        }
    }
    if den == 0.0 {
        f64::INFINITY
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parametrize::DEFAULT_LAMBDA;

    fn cfg(kind: BasisKind, p: usize, h: f64, trials: usize) -> TrialConfig {
        TrialConfig { kind, grid: GridSpec::new(p, h).unwrap(), trials, seed: 2021, lambda: DEFAULT_LAMBDA }
    }

    #[test]
    fn random_targets_are_exact() {
        for p in [5, 11] {
            let stats = run_fit_trials(TargetKind::RandomResized, &cfg(BasisKind::Proposed, p, 0.2, 20)).unwrap();
            assert_eq!(stats.len(), 1);
            assert!(stats[0].mean() <= 1e-8, "p={p}: {}", stats[0].mean());
        }
    }

    #[test]
    fn trials_are_reproducible() {
        let c = cfg(BasisKind::Proposed, 7, 0.3, 8);
        let a = run_fit_trials(TargetKind::default_morlet(), &c).unwrap();
        let b = run_fit_trials(TargetKind::default_morlet(), &c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.errors, y.errors);
        }
    }

    #[test]
    fn proposed_beats_classic_under_rotation() {
        let prop = run_fit_trials(TargetKind::default_morlet(), &cfg(BasisKind::Proposed, 11, 0.2, 30)).unwrap();
        let classic = run_fit_trials(TargetKind::default_morlet(), &cfg(BasisKind::ClassicFourier, 11, 0.2, 30)).unwrap();
        assert!(prop[0].mean() <= 1e-8);
        assert!(classic[0].mean() <= 1e-8);
        assert!(prop[1].mean() * 5.0 <= classic[1].mean());
        assert!(prop[2].mean() <= 0.05);
    }

    #[test]
    fn stats_examples() {
        let s = CaseStats { case: FitCase::Original, errors: vec![1.0, 3.0] };
        assert_eq!(s.mean(), 2.0);
        assert_eq!(s.std(), 1.0);
        assert!(run_fit_trials(TargetKind::RandomResized, &cfg(BasisKind::Proposed, 5, 0.2, 0)).is_err());
    }
}
