//! Rotated-basis matrices, their orthonormalization, filter synthesis and
//! ridge least-squares fitting of target filters.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bases::BasisSet;
use crate::error::{invalid, Error, Result};
use crate::grid::{rotate_inverse, GridSpec, RotationGroup};

/// Relative singular-value cutoff separating redundant directions.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Default ridge weight for filter fitting.
pub const DEFAULT_LAMBDA: f64 = 1e-10;

/// Singular values below this fraction of the largest are treated as exact
/// zeros by the least-squares solver.
const SOLVER_ZERO_TOL: f64 = 1e-12;

/// Stacks `vec(φ_n(A^{-1} x))` over the group, one column per basis function.
///
/// Row `a·p² + i·p + j` holds the sample of cell `(i, j)` under element `a`.
pub fn assemble_d(set: &BasisSet, group: &RotationGroup) -> DMatrix<f64> {
    let p = set.grid().p();
    let block = p * p;
    let t = group.order();
    let mut d = DMatrix::zeros(t * block, set.len());
    for n in 0..set.len() {
        for a in 0..t {
            let s = set.sample_rotated(n, group, a).unwrap();
            for (idx, v) in s.iter().enumerate() {
                d[(a * block + idx, n)] = *v;
            }
        }
    }
    d
}

/// Thin SVD of `D` with singular values sorted in decreasing order.
fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .expect("unbounded iteration always converges");
    let u = svd.u.expect("left singular vectors requested");
    let vt = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let vt = DMatrix::from_fn(order.len(), vt.ncols(), |r, c| vt[(order[r], c)]);
    (u, s, vt)
}

/// Column-orthonormal replacement `U` of the rotated-basis matrix `D`.
#[derive(Debug, Clone)]
pub struct NormalizedBasis {
    d: DMatrix<f64>,
    u: DMatrix<f64>,
    singular_values: Vec<f64>,
    tol: f64,
    p: usize,
    t: usize,
}

impl NormalizedBasis {
    /// Builds `D` from `set` and `group` and normalizes it.
    pub fn build(set: &BasisSet, group: &RotationGroup, tol: f64) -> Result<Self> {
        normalize_basis(&assemble_d(set, group), tol)
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn rank_tol(&self) -> f64 {
        self.tol
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// `U ŵ` reshaped to `t` slices of `p x p`.
    pub fn synthesize(&self, w: &[f64]) -> Result<Array3<f64>> {
        if w.len() != self.rank() {
            return Err(invalid(format!("expected {} coefficients, got {}", self.rank(), w.len())));
        }
        let mut out = Array3::zeros((self.t, self.p, self.p));
        let flat = out.as_slice_mut().expect("standard layout");
        for (c, wc) in w.iter().enumerate() {
            if *wc == 0.0 {
                continue;
            }
            let col = self.u.column(c);
            for (o, u) in flat.iter_mut().zip(col.iter()) {
                *o += wc * u;
            }
        }
        Ok(out)
    }

    /// `Uᵀ g` for a gradient `g` with the layout produced by [`synthesize`].
    ///
    /// [`synthesize`]: NormalizedBasis::synthesize
    pub fn project(&self, g: &Array3<f64>) -> Result<Vec<f64>> {
        if g.dim() != (self.t, self.p, self.p) {
            return Err(invalid(format!("gradient shape {:?} does not match basis", g.dim())));
        }
        let flat: Vec<f64> = g.iter().copied().collect();
        Ok((0..self.rank())
            .map(|c| self.u.column(c).iter().zip(&flat).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// Thin SVD of `D`, keeping directions with `σ_i > tol · σ_max`.
pub fn normalize_basis(d: &DMatrix<f64>, tol: f64) -> Result<NormalizedBasis> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(invalid("basis matrix has non-finite entries"));
    }
    let cols = d.ncols();
    let p = ((cols / 2) as f64).sqrt().round() as usize;
    if p == 0 || 2 * p * p != cols || d.nrows() % (p * p) != 0 {
        return Err(invalid(format!("basis matrix shape {}x{} is not (t·p²)x(2p²)", d.nrows(), cols)));
    }
    let t = d.nrows() / (p * p);
    let (u, s, _) = sorted_svd(d);
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return Err(Error::DegenerateBasis("basis matrix is identically zero".into()));
    }
    let rank = s.iter().take_while(|&&v| v > tol * smax).count();
    Ok(NormalizedBasis {
        d: d.clone(),
        u: u.columns(0, rank).into_owned(),
        singular_values: s[..rank].to_vec(),
        tol,
        p,
        t,
    })
}

pub fn synthesize_filters(basis: &NormalizedBasis, w: &[f64]) -> Result<Array3<f64>> {
    basis.synthesize(w)
}

/// He-style Gaussian coefficients for a filter stack of `t` orientations.
///
/// `fan_in` counts the dense `p x p` filter slices feeding one output
/// element. He scaling asks each tap for variance `2 / (fan_in · p²)`; a
/// length-`r` vector spreads its energy `‖ŵ‖²` over `t · p²` taps, so the
/// coefficient variance is `2t / (fan_in · r)`.
pub fn init_coefficients(seed: u64, fan_in: usize, r: usize, t: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_coefficients_with(&mut rng, fan_in, r, t)
}

pub fn init_coefficients_with<R: rand::Rng>(rng: &mut R, fan_in: usize, r: usize, t: usize) -> Vec<f64> {
    let std = (2.0 * t as f64 / (fan_in.max(1) * r.max(1)) as f64).sqrt();
    (0..r)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Outcome of a ridge fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    pub fitted: Array2<f64>,
    /// The unregularized system had no unique solution and the
    /// pseudo-inverse was used.
    pub rank_deficient: bool,
}

/// Closed-form ridge solver for one or more stacked sample systems.
///
/// The factorization is computed once so repeated fits only cost a few
/// matrix-vector products.
#[derive(Debug, Clone)]
pub struct RidgeFitter {
    set: BasisSet,
    lambda: f64,
    angles: Vec<f64>,
    system: DMatrix<f64>,
    u: DMatrix<f64>,
    s: Vec<f64>,
    vt: DMatrix<f64>,
}

impl RidgeFitter {
    /// Fits against samples at `U_θ^{-1} x` for each `θ` in `angles`, stacked
    /// in that order.
    pub fn new(set: &BasisSet, lambda: f64, angles: &[f64]) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(invalid(format!("ridge weight must be non-negative, got {lambda}")));
        }
        if angles.is_empty() {
            return Err(invalid("at least one sampling angle is required"));
        }
        let system = sample_matrix(set, angles);
        let (u, s, vt) = sorted_svd(&system);
        Ok(Self { set: set.clone(), lambda, angles: angles.to_vec(), system, u, s, vt })
    }

    pub fn set(&self) -> &BasisSet {
        &self.set
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Fits stacked targets, one `p x p` array per sampling angle.
    pub fn fit_stacked(&self, targets: &[Array2<f64>]) -> Result<(Vec<f64>, bool)> {
        let p = self.set.grid().p();
        if targets.len() != self.angles.len() {
            return Err(invalid(format!("expected {} targets, got {}", self.angles.len(), targets.len())));
        }
        if targets.iter().any(|t| t.dim() != (p, p)) {
            return Err(invalid(format!("targets must be {p}x{p}")));
        }
        let y = DVector::from_iterator(self.system.nrows(), targets.iter().flat_map(|t| t.iter().copied()));
        let smax = self.s.first().copied().unwrap_or(0.0);
        let mut w = DVector::zeros(self.system.ncols());
        let mut kept = 0;
        for (i, &s) in self.s.iter().enumerate() {
            if s <= SOLVER_ZERO_TOL * smax || s == 0.0 {
                continue;
            }
            kept += 1;
            let proj = self.u.column(i).dot(&y);
            let gain = s / (s * s + self.lambda);
            w.axpy(gain * proj, &self.vt.row(i).transpose(), 1.0);
        }
        let rank_deficient = self.lambda == 0.0 && kept < self.system.ncols();
        Ok((w.iter().copied().collect(), rank_deficient))
    }

    pub fn fit(&self, target: &Array2<f64>) -> Result<FitResult> {
        let (coefficients, rank_deficient) = self.fit_stacked(std::slice::from_ref(target))?;
        let fitted = self.synthesize_at_angle(&coefficients, self.angles[0])?;
        Ok(FitResult { coefficients, fitted, rank_deficient })
    }

    /// Evaluates `Σ_n w_n φ_n(U_θ^{-1} x_ij)`.
    pub fn synthesize_at_angle(&self, w: &[f64], theta: f64) -> Result<Array2<f64>> {
        synthesize_at_angle(&self.set, w, theta)
    }
}

fn sample_matrix(set: &BasisSet, angles: &[f64]) -> DMatrix<f64> {
    let grid = set.grid();
    let block = grid.p() * grid.p();
    let descriptors = set.descriptors();
    DMatrix::from_fn(angles.len() * block, set.len(), |row, n| {
        let theta = angles[row / block];
        let cell = row % block;
        let x = rotate_inverse(theta, grid.coord(cell / grid.p(), cell % grid.p()));
        set.value(&descriptors[n], x)
    })
}

pub fn synthesize_at_angle(set: &BasisSet, w: &[f64], theta: f64) -> Result<Array2<f64>> {
    if w.len() != set.len() {
        return Err(invalid(format!("expected {} coefficients, got {}", set.len(), w.len())));
    }
    let grid = set.grid();
    let descriptors = set.descriptors();
    let p = grid.p();
    Ok(Array2::from_shape_fn((p, p), |(i, j)| {
        let x = rotate_inverse(theta, grid.coord(i, j));
        descriptors.iter().zip(w).filter(|(_, w)| **w != 0.0).map(|(d, w)| w * set.value(d, x)).sum()
    }))
}

/// Minimizes `Σ_ij (target_ij - Σ_n w_n φ_n(x_ij))² + λ‖w‖²`.
pub fn fit_least_squares(target: &Array2<f64>, set: &BasisSet, lambda: f64) -> Result<FitResult> {
    RidgeFitter::new(set, lambda, &[0.0])?.fit(target)
}

/// Relative Frobenius error restricted to cells where `support` is positive.
///
/// Returns `+∞` when the target vanishes on the support.
pub fn rmse(fitted: &Array2<f64>, target: &Array2<f64>, support: &Array2<f64>) -> Result<f64> {
    if fitted.dim() != target.dim() || support.dim() != target.dim() {
        return Err(invalid("rmse operands must share a shape"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((f, t), m) in fitted.iter().zip(target).zip(support) {
        if *m > 0.0 {
            num += (f - t) * (f - t);
            den += t * t;
        }
    }
    if den == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((num / den).sqrt())
}

/// Zoom `a` and translation `b` of the Morlet-style target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorletParams {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl MorletParams {
    pub fn new(a: [f64; 2], b: [f64; 2]) -> Result<Self> {
        if !(a[0] > 0.0 && a[1] > 0.0) {
            return Err(invalid("Morlet zoom components must be positive"));
        }
        Ok(Self { a, b })
    }

    /// `exp(-½‖a ⊙ (x + b)‖²) · cos(10 (x₁ + b₁))`.
    pub fn value(&self, x: [f64; 2]) -> f64 {
        let u = self.a[0] * (x[0] + self.b[0]);
        let v = self.a[1] * (x[1] + self.b[1]);
        (-0.5 * (u * u + v * v)).exp() * (10.0 * (x[0] + self.b[0])).cos()
    }
}

/// Samples the Morlet target rotated by `theta`.
pub fn morlet_filter(params: &MorletParams, grid: &GridSpec, theta: f64) -> Array2<f64> {
    let p = grid.p();
    Array2::from_shape_fn((p, p), |(i, j)| params.value(rotate_inverse(theta, grid.coord(i, j))))
}

/// Catmull-Rom cubic weight (`a = -0.5`).
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic resize with pixel-center alignment and edge clamping.
pub fn bicubic_resize(src: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (sr, sc) = src.dim();
    let axis = |n_out: usize, n_in: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = (o as f64 + 0.5) * scale - 0.5;
                let base = s.floor();
                (-1..=2)
                    .map(|k| {
                        let idx = (base as i64 + k).clamp(0, n_in as i64 - 1) as usize;
                        (idx, cubic_weight(s - (base + k as f64)))
                    })
                    .collect()
            })
            .collect()
    };
    let wr = axis(rows, sr);
    let wc = axis(cols, sc);
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let mut acc = 0.0;
        for &(r, a) in &wr[i] {
            for &(c, b) in &wc[j] {
                acc += a * b * src[[r, c]];
            }
        }
        acc
    })
}

/// Standard-Gaussian `n x n` patch.
pub fn gaussian_patch<R: rand::Rng>(rng: &mut R, n: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, n), || StandardNormal.sample(rng))
}

/// An 8x8 Gaussian patch resized bicubically to `p x p`.
pub fn random_resized_filter(seed: u64, p: usize) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_resized_filter_with(&mut rng, p)
}

pub fn random_resized_filter_with<R: rand::Rng>(rng: &mut R, p: usize) -> Result<Array2<f64>> {
    if p == 0 {
        return Err(invalid("filter size must be positive"));
    }
    let patch = gaussian_patch(rng, 8);
    Ok(bicubic_resize(&patch, p, p))
}
