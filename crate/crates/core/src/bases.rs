//! Classic 2D Fourier bases and the frequency-recentered family.
//!
//! A [`BasisSet`] enumerates `2p²` functions: all cosine descriptors in
//! row-major `(k, l)` order followed by all sine descriptors in the same
//! order. Every function is multiplied by the radial mask `Ω`.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::error::{invalid, Result};
use crate::grid::{rotate_inverse, GridSpec, Point, RotationGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// Frequencies `(k, l)` with `k, l ∈ {0, …, p-1}`.
    ClassicFourier,
    /// Frequencies shifted to `(k - ⌊p/2⌋, l - ⌊p/2⌋)`.
    Proposed,
}

impl BasisKind {
    pub fn name(&self) -> &'static str {
        match self {
            BasisKind::ClassicFourier => "classic",
            BasisKind::Proposed => "proposed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Cos,
    Sin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub parity: Parity,
    pub k: usize,
    pub l: usize,
}

/// Radial window: 1 up to `cutoff - rolloff`, a raised-cosine shoulder, and
/// exactly 0 from `cutoff` outward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub cutoff: f64,
    pub rolloff: f64,
}

impl MaskSpec {
    /// `R = (p+1)h/2` with a rolloff of one mesh cell.
    pub fn for_grid(grid: &GridSpec) -> Self {
        Self {
            cutoff: (grid.p() as f64 + 1.0) * grid.h() / 2.0,
            rolloff: grid.h(),
        }
    }

    pub fn value(&self, x: Point) -> f64 {
        radial_profile(x[0].hypot(x[1]), self)
    }

    /// Bound on `|dΩ/dr|`.
    pub fn max_slope(&self) -> f64 {
        PI / (2.0 * self.rolloff)
    }

    /// Bound on the spectral norm of the Hessian of `Ω`.
    ///
    /// The radial Hessian has eigenvalues `Ω''(r)` and `Ω'(r)/r`.
    pub fn max_curvature(&self) -> f64 {
        let w = self.rolloff;
        let second = PI * PI / (2.0 * w * w);
        let inner = self.cutoff - w;
        if inner > 0.0 {
            second.max(self.max_slope() / inner)
        } else {
            f64::INFINITY
        }
    }
}

fn radial_profile(r: f64, mask: &MaskSpec) -> f64 {
    let start = mask.cutoff - mask.rolloff;
    if r <= start {
        1.0
    } else if r >= mask.cutoff {
        0.0
    } else {
        0.5 * (1.0 + (PI * (r - start) / mask.rolloff).cos())
    }
}

pub fn radial_mask(x: Point, mask: &MaskSpec) -> f64 {
    mask.value(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    kind: BasisKind,
    grid: GridSpec,
    mask: MaskSpec,
}

impl BasisSet {
    pub fn new(kind: BasisKind, grid: GridSpec) -> Self {
        Self::with_mask(kind, grid, MaskSpec::for_grid(&grid))
    }

    pub fn with_mask(kind: BasisKind, grid: GridSpec, mask: MaskSpec) -> Self {
        Self { kind, grid, mask }
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn mask(&self) -> &MaskSpec {
        &self.mask
    }

    pub fn len(&self) -> usize {
        2 * self.grid.p() * self.grid.p()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn descriptor(&self, n: usize) -> Result<Descriptor> {
        let p = self.grid.p();
        if n >= self.len() {
            return Err(invalid(format!("basis index {n} out of range for {} functions", self.len())));
        }
        let parity = if n < p * p { Parity::Cos } else { Parity::Sin };
        let rem = n % (p * p);
        Ok(Descriptor { parity, k: rem / p, l: rem % p })
    }

    pub fn descriptors(&self) -> Vec<Descriptor> {
        (0..self.len()).map(|n| self.descriptor(n).unwrap()).collect()
    }

    /// Integer frequency vector actually used by descriptor `d`.
    pub fn frequency(&self, d: &Descriptor) -> (i64, i64) {
        let shift = match self.kind {
            BasisKind::ClassicFourier => 0,
            BasisKind::Proposed => (self.grid.p() / 2) as i64,
        };
        (d.k as i64 - shift, d.l as i64 - shift)
    }

    /// Mask-free trigonometric factor.
    fn wave(&self, d: &Descriptor, x: Point) -> f64 {
        let (fk, fl) = self.frequency(d);
        let scale = 2.0 * PI / (self.grid.p() as f64 * self.grid.h());
        let arg = scale * (fk as f64 * x[0] + fl as f64 * x[1]);
        match d.parity {
            Parity::Cos => arg.cos(),
            Parity::Sin => arg.sin(),
        }
    }

    pub(crate) fn value(&self, d: &Descriptor, x: Point) -> f64 {
        let m = self.mask.value(x);
        if m == 0.0 {
            0.0
        } else {
            m * self.wave(d, x)
        }
    }

    pub fn eval(&self, n: usize, x: Point) -> Result<f64> {
        let d = self.descriptor(n)?;
        Ok(self.value(&d, x))
    }

    /// Samples basis `n` at `U_θ^{-1} x_ij` for every grid cell.
    pub fn sample_at_angle(&self, n: usize, theta: f64) -> Result<Array2<f64>> {
        let d = self.descriptor(n)?;
        let p = self.grid.p();
        Ok(Array2::from_shape_fn((p, p), |(i, j)| {
            self.value(&d, rotate_inverse(theta, self.grid.coord(i, j)))
        }))
    }

    pub fn sample(&self, n: usize) -> Result<Array2<f64>> {
        self.sample_at_angle(n, 0.0)
    }

    pub fn sample_rotated(&self, n: usize, group: &RotationGroup, element: usize) -> Result<Array2<f64>> {
        if element >= group.order() {
            return Err(invalid(format!("group element {element} out of range for order {}", group.order())));
        }
        self.sample_at_angle(n, group.angle(element))
    }

    /// Mask values at the grid cells.
    pub fn mask_samples(&self) -> Array2<f64> {
        let p = self.grid.p();
        Array2::from_shape_fn((p, p), |(i, j)| self.mask.value(self.grid.coord(i, j)))
    }
}

pub fn eval_basis(set: &BasisSet, n: usize, x: Point) -> Result<f64> {
    set.eval(n, x)
}

pub fn sample_basis_rotated(set: &BasisSet, n: usize, group: &RotationGroup, element: usize) -> Result<Array2<f64>> {
    set.sample_rotated(n, group, element)
}

/// Index map and sign relating classic descriptors to recentered ones on
/// the sampling grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignMap {
    p: usize,
    eps: f64,
}

impl SignMap {
    pub fn p(&self) -> usize {
        self.p
    }

    /// Recentered index carrying the same grid samples as classic index `c`.
    ///
    /// The shift is `⌊p/2⌋`: this equals `⌊(p-1)/2⌋` for odd `p`, and for even
    /// `p` only `⌊p/2⌋` reproduces the classic samples.
    pub fn index(&self, c: usize) -> usize {
        (c + self.p / 2) % self.p
    }

    pub fn sign(&self, k: usize, l: usize) -> f64 {
        let half = self.p as f64 / 2.0;
        let e = (self.p - 1) as i32;
        let sk = (k as f64 - half + self.eps).signum().powi(e);
        let sl = (l as f64 - half + self.eps).signum().powi(e);
        sk * sl
    }
}

pub fn remark1_map(p: usize) -> Result<SignMap> {
    if p == 0 {
        return Err(invalid("p must be positive"));
    }
    Ok(SignMap { p, eps: 0.25 })
}

/// Largest grid-point discrepancy between each classic function and the
/// signed recentered function it maps to.
pub fn verify_remark1(p: usize, h: f64) -> Result<f64> {
    let grid = GridSpec::new(p, h)?;
    let classic = BasisSet::new(BasisKind::ClassicFourier, grid);
    let proposed = BasisSet::new(BasisKind::Proposed, grid);
    let map = remark1_map(p)?;
    let coords = grid.coords();
    let mut worst: f64 = 0.0;
    for parity in [Parity::Cos, Parity::Sin] {
        for k in 0..p {
            for l in 0..p {
                let dc = Descriptor { parity, k, l };
                let dp = Descriptor { parity, k: map.index(k), l: map.index(l) };
                let s = map.sign(k, l);
                for x in &coords {
                    let diff = classic.value(&dc, *x) - s * proposed.value(&dp, *x);
                    worst = worst.max(diff.abs());
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(kind: BasisKind, p: usize, h: f64) -> BasisSet {
        BasisSet::new(kind, GridSpec::new(p, h).unwrap())
    }

    #[test]
    fn mask_examples() {
        let m = MaskSpec::for_grid(&GridSpec::new(11, 0.2).unwrap());
        assert_eq!(radial_mask([m.cutoff, 0.0], &m), 0.0);
        assert_eq!(radial_mask([0.0, 0.0], &m), 1.0);
        let mid = m.cutoff - m.rolloff / 2.0;
        assert!((radial_mask([0.0, mid], &m) - 0.5).abs() < 1e-12);
        assert_eq!(radial_mask([5.0, 5.0], &m), 0.0);
    }

    #[test]
    fn mask_is_c1_along_a_ray() {
        let m = MaskSpec { cutoff: 1.2, rolloff: 0.2 };
        let n = 1000;
        let r_max = 1.5;
        let dr = r_max / n as f64;
        let vals: Vec<f64> = (0..=n).map(|i| m.value([i as f64 * dr, 0.0])).collect();
        let deriv: Vec<f64> = vals.windows(2).map(|w| (w[1] - w[0]) / dr).collect();
        let max_jump = deriv.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        assert!(max_jump <= 10.0 / m.rolloff, "jump {max_jump}");
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn eval_examples() {
        let s = set(BasisKind::ClassicFourier, 11, 0.2);
        // cos, k=l=0 is index 0; sin, k=l=0 is index p².
        assert!((s.eval(0, [0.1, -0.3]).unwrap() - 1.0).abs() < 1e-15);
        for x in s.grid().coords() {
            assert_eq!(s.eval(121, x).unwrap(), 0.0);
        }
        // cos, (k, l) = (1, 0) is index p = 11.
        let v = s.eval(11, [0.2, 0.0]).unwrap();
        assert!((v - 0.841_253_532_831_181_2).abs() < 1e-12, "{v}");
        assert!(s.eval(242, [0.0, 0.0]).is_err());
    }

    #[test]
    fn ordering_is_parity_major_row_major() {
        let s = set(BasisKind::Proposed, 3, 1.0);
        let d = s.descriptors();
        assert_eq!(d.len(), 18);
        assert_eq!(d[0], Descriptor { parity: Parity::Cos, k: 0, l: 0 });
        assert_eq!(d[1], Descriptor { parity: Parity::Cos, k: 0, l: 1 });
        assert_eq!(d[3], Descriptor { parity: Parity::Cos, k: 1, l: 0 });
        assert_eq!(d[9], Descriptor { parity: Parity::Sin, k: 0, l: 0 });
    }

    #[test]
    fn proposed_frequencies_are_bounded() {
        for p in 1..=12 {
            let s = set(BasisKind::Proposed, p, 1.0);
            let half = (p / 2) as i64;
            for d in s.descriptors() {
                let (a, b) = s.frequency(&d);
                assert!(a.abs() <= half && b.abs() <= half);
                assert!(a >= -half && a <= p as i64 - 1 - half);
            }
        }
    }

    #[test]
    fn rotated_samples_respect_bounds_and_identity() {
        let s = set(BasisKind::Proposed, 5, 0.5);
        let g = RotationGroup::new(8).unwrap();
        for n in 0..s.len() {
            assert_eq!(s.sample_rotated(n, &g, 0).unwrap(), s.sample(n).unwrap());
            for a in 0..8 {
                let t = s.sample_rotated(n, &g, a).unwrap();
                assert!(t.iter().all(|v| v.abs() <= 1.0));
            }
        }
        assert!(s.sample_rotated(0, &g, 8).is_err());
    }

    #[test]
    fn quarter_turn_sampling_is_a_permutation() {
        // Oracle: locate the grid cell whose coordinate equals U^{-1} x_ij.
        let s = set(BasisKind::ClassicFourier, 7, 0.3);
        let g = RotationGroup::new(4).unwrap();
        let grid = *s.grid();
        let coords = grid.coords();
        for n in [3, 17, 40, 60, 97] {
            let base = s.sample(n).unwrap();
            let rot = s.sample_rotated(n, &g, 1).unwrap();
            for i in 0..7 {
                for j in 0..7 {
                    let y = rotate_inverse(std::f64::consts::FRAC_PI_2, grid.coord(i, j));
                    let idx = coords
                        .iter()
                        .position(|z| (z[0] - y[0]).abs() < 1e-9 && (z[1] - y[1]).abs() < 1e-9)
                        .unwrap();
                    assert!((rot[[i, j]] - base[[idx / 7, idx % 7]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sign_map_examples() {
        let m = remark1_map(11).unwrap();
        for k in 0..11 {
            for l in 0..11 {
                assert_eq!(m.sign(k, l), 1.0);
            }
        }
        assert_eq!(m.index(0), 5);
        assert_eq!(remark1_map(4).unwrap().sign(3, 0), -1.0);
        assert!(remark1_map(0).is_err());
    }

    #[test]
    fn remark1_examples() {
        assert!(verify_remark1(11, 0.2).unwrap() <= 1e-12);
        assert!(verify_remark1(5, 0.5).unwrap() <= 1e-12);
        assert!(verify_remark1(4, 1.0).unwrap() <= 1e-12);
    }

    #[test]
    fn classic_and_proposed_share_low_frequencies() {
        for p in [4, 5, 11] {
            let c = set(BasisKind::ClassicFourier, p, 0.4);
            let q = set(BasisKind::Proposed, p, 0.4);
            let half = p / 2;
            for d in c.descriptors() {
                if d.k + half >= p || d.l + half >= p {
                    continue;
                }
                let dq = Descriptor { parity: d.parity, k: d.k + half, l: d.l + half };
                assert_eq!(c.frequency(&d), q.frequency(&dq));
                for x in c.grid().coords() {
                    assert!((c.value(&d, x) - q.value(&dq, x)).abs() <= 1e-12);
                }
            }
        }
    }
}
