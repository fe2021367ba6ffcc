//! Image and feature-map rotations, equivariance-error metrics, and the
//! discretization error bound with its mesh-size scaling experiment.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;

use crate::bases::MaskSpec;
use crate::error::{invalid, Error, Result};
use crate::gconv::{FeatureMap, LayerKind, PlanarImage};
use crate::grid::{rotate_inverse, GridSpec, Point, RotationGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    /// Index permutation; only multiples of π/2.
    ExactQuarterTurn,
}

fn quarter_turns(theta: f64) -> Option<usize> {
    let k = theta / (PI / 2.0);
    let r = k.round();
    if (k - r).abs() <= 1e-9 {
        Some(r.rem_euclid(4.0) as usize)
    } else {
        None
    }
}

/// `out[i][j] = in[n-1-j][i]`, a rotation by π/2 about the center.
fn quarter_turn(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let (r, c) = a.dim();
    Array2::from_shape_fn((c, r), |(i, j)| a[[r - 1 - j, i]])
}

/// `out(x) = in(U_θ^{-1} x)` about the array center.
pub fn rotate_plane(a: ArrayView2<'_, f64>, theta: f64, interp: Interp) -> Result<Array2<f64>> {
    match interp {
        Interp::ExactQuarterTurn => {
            let k = quarter_turns(theta)
                .ok_or_else(|| invalid(format!("angle {theta} is not a multiple of π/2")))?;
            if a.nrows() != a.ncols() {
                return Err(invalid("quarter turns need a square array"));
            }
            let mut out = a.to_owned();
            for _ in 0..k {
                out = quarter_turn(out.view());
            }
            Ok(out)
        }
        Interp::Bilinear => {
            let (r, c) = a.dim();
            let cr = (r as f64 - 1.0) / 2.0;
            let cc = (c as f64 - 1.0) / 2.0;
            let at = |i: i64, j: i64| -> f64 {
                if i < 0 || j < 0 || i >= r as i64 || j >= c as i64 {
                    0.0
                } else {
                    a[[i as usize, j as usize]]
                }
            };
            Ok(Array2::from_shape_fn((r, c), |(i, j)| {
                let src = rotate_inverse(theta, [i as f64 - cr, j as f64 - cc]);
                let (u, v) = (src[0] + cr, src[1] + cc);
                let (u0, v0) = (u.floor(), v.floor());
                let (fu, fv) = (u - u0, v - v0);
                let (i0, j0) = (u0 as i64, v0 as i64);
                (1.0 - fu) * ((1.0 - fv) * at(i0, j0) + fv * at(i0, j0 + 1))
                    + fu * ((1.0 - fv) * at(i0 + 1, j0) + fv * at(i0 + 1, j0 + 1))
            }))
        }
    }
}

pub fn rotate_image(image: &PlanarImage, theta: f64, interp: Interp) -> Result<PlanarImage> {
    PlanarImage::new(rotate_plane(image.values().view(), theta, interp)?, image.h())
}

/// Channel `A` of the result is input channel `Ã⁻¹A` rotated by `Ã`.
pub fn transform_feature(features: &FeatureMap, group: &RotationGroup, element: usize, interp: Interp) -> Result<FeatureMap> {
    if features.t() != group.order() {
        return Err(invalid(format!("feature order {} does not match group order {}", features.t(), group.order())));
    }
    if element >= group.order() {
        return Err(invalid(format!("group element {element} out of range")));
    }
    let t = group.order();
    let theta = group.angle(element);
    let slices = (0..t)
        .map(|a| rotate_plane(features.orientation(group.compose(group.inverse(element), a)), theta, interp))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
    FeatureMap::new(ndarray::stack(Axis(0), &views).unwrap())
}

/// A rotation acting on `(channels, orientations, n, n)` tensors: spatial
/// rotation by `angle` plus a cyclic shift of the orientation axis by
/// `shift` (ignored for planar tensors).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub angle: f64,
    pub shift: usize,
}

impl Action {
    pub fn group_element(group: &RotationGroup, element: usize) -> Self {
        Self { angle: group.angle(element), shift: element % group.order() }
    }

    pub fn identity() -> Self {
        Self { angle: 0.0, shift: 0 }
    }
}

pub fn transform_tensor(x: ArrayView4<'_, f64>, action: Action, interp: Interp) -> Result<Array4<f64>> {
    let (c, t, _, _) = x.dim();
    let mut out = Array4::zeros(x.raw_dim());
    for ch in 0..c {
        for a in 0..t {
            let src = (a + t - action.shift % t) % t;
            let rotated = rotate_plane(x.slice(s![ch, src, .., ..]), action.angle, interp)?;
            out.slice_mut(s![ch, a, .., ..]).assign(&rotated);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Full,
    /// Pixels within `radius` (in pixels) of the array center.
    CentralDisk { radius: f64 },
}

impl Region {
    pub fn name(&self) -> &'static str {
        match self {
            Region::Full => "full",
            Region::CentralDisk { .. } => "central-disk",
        }
    }

    /// The default comparison disk for a network with filter size `p`.
    pub fn default_disk(n_out: usize, p: usize) -> Self {
        Region::CentralDisk { radius: (n_out as f64 / 2.0 - p as f64).max(0.0) }
    }

    pub fn contains(&self, i: usize, j: usize, rows: usize, cols: usize) -> bool {
        match self {
            Region::Full => true,
            Region::CentralDisk { radius } => {
                let di = i as f64 - (rows as f64 - 1.0) / 2.0;
                let dj = j as f64 - (cols as f64 - 1.0) / 2.0;
                di * di + dj * dj <= radius * radius
            }
        }
    }
}

/// Pixels whose reference magnitude is below this are skipped by LEPN.
pub const LEPN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EquivReport {
    pub network: String,
    pub angle: f64,
    pub region: Region,
    pub rmse: f64,
    pub lepn_count: usize,
    pub lepn_fraction: f64,
}

/// Relative error and large-error-pixel statistics between `rotated`
/// (network output of the rotated input) and `reference` (transformed
/// network output). Each pixel is a vector over channels and orientations.
pub fn compare_outputs(rotated: ArrayView4<'_, f64>, reference: ArrayView4<'_, f64>, region: Region) -> Result<(f64, usize, f64)> {
    if rotated.dim() != reference.dim() {
        return Err(Error::Contract(format!("output shapes differ: {:?} vs {:?}", rotated.dim(), reference.dim())));
    }
    let (c, t, r, cols) = rotated.dim();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut large = 0;
    let mut counted = 0;
    for i in 0..r {
        for j in 0..cols {
            if !region.contains(i, j, r, cols) {
                continue;
            }
            let mut d2 = 0.0;
            let mut x2 = 0.0;
            for ch in 0..c {
                for a in 0..t {
                    let x0 = reference[[ch, a, i, j]];
                    let d = rotated[[ch, a, i, j]] - x0;
                    d2 += d * d;
                    x2 += x0 * x0;
                }
            }
            num += d2;
            den += x2;
            if x2.sqrt() >= LEPN_FLOOR {
                counted += 1;
                if d2 > x2 {
                    large += 1;
                }
            }
        }
    }
    let rmse = if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    };
    let fraction = if counted == 0 { 0.0 } else { large as f64 / counted as f64 };
    Ok((rmse, large, fraction))
}

/// Compares `forward(rotate(I))` with `transform(forward(I))`.
pub fn equivariance_error<F>(
    forward: F,
    network: &str,
    input: ArrayView4<'_, f64>,
    action: Action,
    region: Region,
    interp: Interp,
) -> Result<EquivReport>
where
    F: Fn(ArrayView4<'_, f64>) -> Result<Array4<f64>>,
{
    let rotated_in = transform_tensor(input, action, interp)?;
    let left = forward(rotated_in.view())?;
    let base = forward(input)?;
    let right = transform_tensor(base.view(), action, interp)?;
    let (rmse, lepn_count, lepn_fraction) = compare_outputs(left.view(), right.view(), region)?;
    Ok(EquivReport { network: network.to_string(), angle: action.angle, region, rmse, lepn_count, lepn_fraction })
}

/// Smoothness bounds of the input (`f1`, `g1`, `h1`) and the filters
/// (`f2`, `g2`, `h2`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub f1: f64,
    pub g1: f64,
    pub h1: f64,
    pub f2: f64,
    pub g2: f64,
    pub h2: f64,
    pub p: usize,
    pub h: f64,
    pub t: usize,
}

impl BoundParams {
    pub fn c(&self) -> f64 {
        self.f1 * self.h2 + self.f2 * self.h1 + 2.0 * self.g1 * self.g2
    }
}

/// `(C/2)(p+1)²h²`, times `t` for layers that sum over orientations.
pub fn theorem1_bound(params: &BoundParams, kind: LayerKind) -> Result<f64> {
    let b = params;
    if [b.f1, b.g1, b.h1, b.f2, b.g2, b.h2, b.h].iter().any(|v| !(*v >= 0.0)) {
        return Err(invalid("bound parameters must be non-negative"));
    }
    let base = b.c() / 2.0 * ((b.p + 1) as f64).powi(2) * b.h * b.h;
    Ok(match kind {
        LayerKind::Input => base,
        LayerKind::Intermediate | LayerKind::Output => base * b.t as f64,
    })
}

/// `Σ_m c_m cos(ω_m · x + φ_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidField {
    pub terms: Vec<SinusoidTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidTerm {
    pub freq: [f64; 2],
    pub amp: f64,
    pub phase: f64,
}

impl SinusoidField {
    pub fn value(&self, x: Point) -> f64 {
        self.terms
            .iter()
            .map(|s| s.amp * (s.freq[0] * x[0] + s.freq[1] * x[1] + s.phase).cos())
            .sum()
    }

    /// Bounds on the value, gradient norm and Hessian norm.
    pub fn bounds(&self) -> (f64, f64, f64) {
        let mut f = 0.0;
        let mut g = 0.0;
        let mut h = 0.0;
        for s in &self.terms {
            let w = s.freq[0].hypot(s.freq[1]);
            f += s.amp.abs();
            g += s.amp.abs() * w;
            h += s.amp.abs() * w * w;
        }
        (f, g, h)
    }

    pub fn default_input() -> Self {
        let term = |freq, amp, phase| SinusoidTerm { freq, amp, phase };
        Self {
            terms: vec![
                term([1.0, 0.7], 0.8, 0.1),
                term([-0.5, 1.3], 0.5, 1.0),
                term([0.9, -0.4], 0.3, 2.0),
            ],
        }
    }
}

/// Masked plane-wave filter `Ω(x) cos(k · x + c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveFilter {
    pub mask: MaskSpec,
    pub wave: [f64; 2],
    pub phase: f64,
}

impl WaveFilter {
    pub fn value(&self, x: Point) -> f64 {
        let m = self.mask.value(x);
        if m == 0.0 {
            0.0
        } else {
            m * (self.wave[0] * x[0] + self.wave[1] * x[1] + self.phase).cos()
        }
    }

    pub fn bounds(&self) -> (f64, f64, f64) {
        let k = self.wave[0].hypot(self.wave[1]);
        let slope = self.mask.max_slope();
        (1.0, slope + k, self.mask.max_curvature() + 2.0 * slope * k + k * k)
    }
}

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub hs: Vec<f64>,
    pub t: usize,
    /// Physical filter support radius; `p = 2R/h - 1` so the support is
    /// fixed while the grid refines.
    pub support_radius: f64,
    pub rolloff: f64,
    pub wave: [f64; 2],
    pub input: SinusoidField,
    /// Output positions (physical units) where the layers are compared.
    pub probes: Vec<Point>,
    pub layers: Vec<LayerKind>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        let mut probes = Vec::new();
        for a in [-0.4, 0.0, 0.4] {
            for b in [-0.4, 0.0, 0.4] {
                probes.push([a, b]);
            }
        }
        Self {
            hs: vec![0.2, 0.1, 0.05, 0.025],
            t: 8,
            support_radius: 1.0,
            rolloff: 0.5,
            wave: [3.0, 1.5],
            input: SinusoidField::default_input(),
            probes,
            layers: vec![LayerKind::Input, LayerKind::Intermediate, LayerKind::Output],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub layer: LayerKind,
    pub h: f64,
    pub p: usize,
    pub error: f64,
    pub bound: f64,
}

/// Filter for orientation index `a` (phase varies with `a`).
fn layer_filter(cfg: &ScalingConfig, a: usize) -> WaveFilter {
    WaveFilter {
        mask: MaskSpec { cutoff: cfg.support_radius, rolloff: cfg.rolloff },
        wave: cfg.wave,
        phase: 0.3 + 0.7 * a as f64,
    }
}

/// Maximum deviation from exact equivariance of one layer, evaluated with
/// analytic inputs at the probe points, over all non-identity `Ã`.
fn layer_error(cfg: &ScalingConfig, grid: &GridSpec, kind: LayerKind) -> f64 {
    let group = RotationGroup::new(cfg.t).unwrap();
    let t = cfg.t;
    let pts = grid.coords();
    // e(x, A) = r(A⁻¹x) for orientation-indexed inputs.
    let e = |x: Point, a: usize| cfg.input.value(rotate_inverse(group.angle(a), x));
    let filters: Vec<WaveFilter> = (0..t).map(|a| layer_filter(cfg, a)).collect();
    let sub = |y: Point, x: Point| [y[0] - x[0], y[1] - x[1]];

    (1..t)
        .into_par_iter()
        .map(|at| {
            let theta = group.angle(at);
            let inv = group.inverse(at);
            let mut worst: f64 = 0.0;
            for &y in &cfg.probes {
                let ty = rotate_inverse(theta, y);
                match kind {
                    LayerKind::Input => {
                        for b in 0..t {
                            let bt = group.compose(inv, b);
                            let (mut l, mut r) = (0.0, 0.0);
                            for &x in &pts {
                                l += filters[0].value(rotate_inverse(group.angle(b), x))
                                    * cfg.input.value(rotate_inverse(theta, sub(y, x)));
                                r += filters[0].value(rotate_inverse(group.angle(bt), x)) * cfg.input.value(sub(ty, x));
                            }
                            worst = worst.max((l - r).abs());
                        }
                    }
                    LayerKind::Intermediate => {
                        for b in 0..t {
                            let bt = group.compose(inv, b);
                            let (mut l, mut r) = (0.0, 0.0);
                            for (a, filter) in filters.iter().enumerate() {
                                let shifted = group.compose(inv, group.compose(b, a));
                                for &x in &pts {
                                    l += filter.value(rotate_inverse(group.angle(b), x))
                                        * e(rotate_inverse(theta, sub(y, x)), shifted);
                                    r += filter.value(rotate_inverse(group.angle(bt), x)) * e(sub(ty, x), group.compose(bt, a));
                                }
                            }
                            worst = worst.max((l - r).abs());
                        }
                    }
                    LayerKind::Output => {
                        let (mut l, mut r) = (0.0, 0.0);
                        for b in 0..t {
                            for &x in &pts {
                                let f = filters[0].value(rotate_inverse(group.angle(b), x));
                                l += f * e(rotate_inverse(theta, sub(y, x)), group.compose(inv, b));
                                r += f * e(sub(ty, x), b);
                            }
                        }
                        worst = worst.max((l - r).abs());
                    }
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// Empirical equivariance error and its bound for each layer kind and mesh
/// size, with the filter support held fixed in physical units.
pub fn scaling_experiment(cfg: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    if cfg.hs.is_empty() || cfg.t == 0 {
        return Err(invalid("scaling experiment needs mesh sizes and a group order"));
    }
    if !(cfg.rolloff > 0.0 && cfg.rolloff <= cfg.support_radius) {
        return Err(invalid("rolloff must lie in (0, support radius]"));
    }
    let (f1, g1, h1) = cfg.input.bounds();
    let (f2, g2, h2) = layer_filter(cfg, 0).bounds();
    let mut rows = Vec::new();
    for &kind in &cfg.layers {
        for &h in &cfg.hs {
            if !(h > 0.0) {
                return Err(invalid(format!("mesh size must be positive, got {h}")));
            }
            let p = ((2.0 * cfg.support_radius / h).round() as usize).saturating_sub(1).max(1);
            let grid = GridSpec::new(p, h)?;
            let params = BoundParams { f1, g1, h1, f2, g2, h2, p, h, t: cfg.t };
            rows.push(ScalingRow { layer: kind, h, p, error: layer_error(cfg, &grid, kind), bound: theorem1_bound(&params, kind)? });
        }
    }
    Ok(rows)
}

/// Builds a `(1, 1, n, n)` tensor from a planar image.
pub fn image_tensor(image: &Array2<f64>) -> Array4<f64> {
    let (r, c) = image.dim();
    image.clone().into_shape_with_order((1, 1, r, c)).unwrap()
}

/// Stacks feature maps into a `(c, t, n, n)` tensor.
pub fn feature_tensor(maps: &[FeatureMap]) -> Result<Array4<f64>> {
    let views: Vec<_> = maps.iter().map(|m| m.values().view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bases::{BasisKind, BasisSet};
    use crate::gconv::{build_layer_filters, FilterBank};
    use crate::parametrize::{init_coefficients, NormalizedBasis, DEFAULT_RANK_TOL};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn4(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }

    fn bank(kind: LayerKind, p: usize, t: usize, c_out: usize, c_in: usize, seed: u64) -> FilterBank {
        let set = BasisSet::new(BasisKind::Proposed, GridSpec::new(p, 0.5).unwrap());
        let nb = NormalizedBasis::build(&set, &RotationGroup::new(t).unwrap(), DEFAULT_RANK_TOL).unwrap();
        let n = c_out * c_in * kind.vectors_per_pair(t) * nb.rank();
        build_layer_filters(&nb, &init_coefficients(seed, c_in, n, t), kind, c_out, c_in).unwrap()
    }

    #[test]
    fn rotate_examples() {
        let img = randn4(1, (1, 1, 9, 9)).index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0);
        assert_eq!(rotate_plane(img.view(), 0.0, Interp::Bilinear).unwrap(), img);
        assert_eq!(rotate_plane(img.view(), 0.0, Interp::ExactQuarterTurn).unwrap(), img);

        for n in [4, 7] {
            let a = Array2::from_shape_fn((n, n), |(i, j)| (i * n + j) as f64);
            let mut oracle = a.t().to_owned();
            oracle.invert_axis(Axis(1));
            assert_eq!(rotate_plane(a.view(), PI / 2.0, Interp::ExactQuarterTurn).unwrap(), oracle);
            let bil = rotate_plane(a.view(), PI / 2.0, Interp::Bilinear).unwrap();
            assert!(bil.iter().zip(oracle.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
        }
        assert!(rotate_plane(img.view(), 0.3, Interp::ExactQuarterTurn).is_err());
    }

    #[test]
    fn bilinear_round_trip_on_smooth_image() {
        let n = 64;
        let c = (n as f64 - 1.0) / 2.0;
        let img = Array2::from_shape_fn((n, n), |(i, j)| {
            let (u, v) = (i as f64 - c - 5.0, j as f64 - c + 3.0);
            (-(u * u + v * v) / 60.0).exp() + 0.5 * (-((u + 10.0).powi(2) + (v - 8.0).powi(2)) / 40.0).exp()
        });
        for theta in [0.3, 1.0, 2.5] {
            let there = rotate_plane(img.view(), theta, Interp::Bilinear).unwrap();
            let back = rotate_plane(there.view(), -theta, Interp::Bilinear).unwrap();
            let a = back.into_shape_with_order((1, 1, n, n)).unwrap();
            let b = img.clone().into_shape_with_order((1, 1, n, n)).unwrap();
            let (rmse, _, _) = compare_outputs(a.view(), b.view(), Region::CentralDisk { radius: n as f64 / 4.0 }).unwrap();
            assert!(rmse <= 0.05, "{rmse}");
        }
    }

    #[test]
    fn transform_feature_examples() {
        let group = RotationGroup::new(4).unwrap();
        let f = FeatureMap::new(randn4(2, (1, 4, 7, 7)).index_axis_move(Axis(0), 0)).unwrap();
        assert_eq!(transform_feature(&f, &group, 0, Interp::ExactQuarterTurn).unwrap(), f);

        let g = transform_feature(&f, &group, 1, Interp::ExactQuarterTurn).unwrap();
        let want = rotate_plane(f.orientation(3), PI / 2.0, Interp::ExactQuarterTurn).unwrap();
        assert_eq!(g.orientation(0).to_owned(), want);

        let back = transform_feature(&g, &group, 3, Interp::ExactQuarterTurn).unwrap();
        assert_eq!(back, f);

        for a in 0..4 {
            for b in 0..4 {
                let lhs = transform_feature(&transform_feature(&f, &group, a, Interp::ExactQuarterTurn).unwrap(), &group, b, Interp::ExactQuarterTurn).unwrap();
                let rhs = transform_feature(&f, &group, group.compose(b, a), Interp::ExactQuarterTurn).unwrap();
                assert_eq!(lhs, rhs);
            }
        }
        assert!(transform_feature(&f, &RotationGroup::new(8).unwrap(), 1, Interp::Bilinear).is_err());
    }

    #[test]
    fn transform_tensor_matches_feature_transform() {
        let group = RotationGroup::new(4).unwrap();
        let x = randn4(3, (2, 4, 5, 5));
        let y = transform_tensor(x.view(), Action::group_element(&group, 3), Interp::ExactQuarterTurn).unwrap();
        for ch in 0..2 {
            let f = FeatureMap::new(x.index_axis(Axis(0), ch).to_owned()).unwrap();
            let g = transform_feature(&f, &group, 3, Interp::ExactQuarterTurn).unwrap();
            assert_eq!(&y.index_axis(Axis(0), ch).to_owned(), g.values());
        }
    }

    #[test]
    fn identity_action_has_no_error() {
        let b = bank(LayerKind::Input, 5, 8, 2, 1, 4);
        let x = randn4(5, (1, 1, 21, 21));
        let r = equivariance_error(|v| b.forward(v), "fconv", x.view(), Action::identity(), Region::Full, Interp::Bilinear).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.lepn_count, 0);
    }

    #[test]
    fn quarter_turns_are_exact_for_every_layer() {
        let t = 4;
        let group = RotationGroup::new(t).unwrap();
        for p in [3, 5] {
            let input = bank(LayerKind::Input, p, t, 2, 1, 6);
            let inter = bank(LayerKind::Intermediate, p, t, 2, 2, 7);
            let output = bank(LayerKind::Output, p, t, 1, 2, 8);
            let x = randn4(9, (1, 1, 19, 19));
            let f = randn4(10, (2, t, 19, 19));
            for k in 0..t {
                let action = Action::group_element(&group, k);
                let cases: Vec<(Array4<f64>, Box<dyn Fn(ArrayView4<'_, f64>) -> Result<Array4<f64>>>)> = vec![
                    (x.clone(), Box::new(|v| input.forward(v))),
                    (f.clone(), Box::new(|v| inter.forward(v))),
                    (f.clone(), Box::new(|v| output.forward(v))),
                    (x.clone(), Box::new(|v| output.forward(inter.forward(input.forward(v)?.view())?.view()))),
                ];
                for (data, fwd) in cases {
                    let r = equivariance_error(fwd, "fconv", data.view(), action, Region::Full, Interp::ExactQuarterTurn).unwrap();
                    assert!(r.rmse <= 1e-10, "p={p} k={k}: {}", r.rmse);
                }
            }
        }
    }

    #[test]
    fn metrics_are_scale_invariant() {
        let a = randn4(11, (2, 3, 8, 8));
        let b = randn4(12, (2, 3, 8, 8));
        let r1 = compare_outputs(a.view(), b.view(), Region::Full).unwrap();
        let r2 = compare_outputs((&a * 7.5).view(), (&b * 7.5).view(), Region::Full).unwrap();
        assert!((r1.0 - r2.0).abs() < 1e-12);
        assert_eq!(r1.1, r2.1);
        assert!((0.0..=1.0).contains(&r1.2));

        let (rmse, count, frac) = compare_outputs(a.view(), a.view(), Region::Full).unwrap();
        assert_eq!((rmse, count, frac), (0.0, 0, 0.0));
        assert!(compare_outputs(a.view(), randn4(1, (1, 3, 8, 8)).view(), Region::Full).is_err());
    }

    #[test]
    fn lepn_counts_flipped_pixels() {
        let mut a = Array4::from_elem((1, 1, 2, 2), 1.0);
        let b = Array4::from_elem((1, 1, 2, 2), 1.0);
        a[[0, 0, 0, 0]] = -1.0;
        a[[0, 0, 1, 1]] = 1.5;
        let (_, count, frac) = compare_outputs(a.view(), b.view(), Region::Full).unwrap();
        assert_eq!(count, 1);
        assert_eq!(frac, 0.25);
    }

    #[test]
    fn rectifier_commutes_with_transform() {
        let group = RotationGroup::new(4).unwrap();
        let x = randn4(13, (2, 4, 9, 9));
        for k in 0..4 {
            let action = Action::group_element(&group, k);
            let lhs = transform_tensor(x.mapv(|v| v.max(0.0)).view(), action, Interp::ExactQuarterTurn).unwrap();
            let rhs = transform_tensor(x.view(), action, Interp::ExactQuarterTurn).unwrap().mapv(|v| v.max(0.0));
            assert_eq!(lhs, rhs);
        }
    }

    fn unit_bounds(p: usize, h: f64, t: usize) -> BoundParams {
        BoundParams { f1: 1.0, g1: 1.0, h1: 1.0, f2: 1.0, g2: 1.0, h2: 1.0, p, h, t }
    }

    #[test]
    fn bound_examples() {
        let zero = BoundParams { f1: 0.0, g1: 0.0, h1: 0.0, f2: 0.0, g2: 0.0, h2: 0.0, p: 5, h: 0.1, t: 8 };
        assert_eq!(theorem1_bound(&zero, LayerKind::Input).unwrap(), 0.0);
        assert!((theorem1_bound(&unit_bounds(5, 0.1, 8), LayerKind::Input).unwrap() - 0.72).abs() < 1e-12);
        assert!((theorem1_bound(&unit_bounds(5, 0.1, 8), LayerKind::Intermediate).unwrap() - 5.76).abs() < 1e-12);
        let bad = BoundParams { f1: -1.0, ..zero };
        assert!(theorem1_bound(&bad, LayerKind::Input).is_err());
    }

    #[test]
    fn bound_is_monotone() {
        let base = unit_bounds(5, 0.1, 4);
        for kind in [LayerKind::Input, LayerKind::Intermediate, LayerKind::Output] {
            let b0 = theorem1_bound(&base, kind).unwrap();
            let bigger = [
                BoundParams { p: 7, ..base },
                BoundParams { h: 0.2, ..base },
                BoundParams { t: 8, ..base },
                BoundParams { f1: 2.0, ..base },
                BoundParams { g1: 2.0, ..base },
                BoundParams { h1: 2.0, ..base },
                BoundParams { f2: 2.0, ..base },
                BoundParams { g2: 2.0, ..base },
                BoundParams { h2: 2.0, ..base },
            ];
            for b in bigger {
                assert!(theorem1_bound(&b, kind).unwrap() >= b0);
            }
        }
    }

    #[test]
    fn sinusoid_bounds_hold_numerically() {
        let field = SinusoidField::default_input();
        let (f, g, _) = field.bounds();
        let eps = 1e-6;
        for i in 0..50 {
            let x = [(i as f64 * 0.37).sin() * 3.0, (i as f64 * 0.91).cos() * 3.0];
            assert!(field.value(x).abs() <= f);
            let gx = (field.value([x[0] + eps, x[1]]) - field.value([x[0] - eps, x[1]])) / (2.0 * eps);
            let gy = (field.value([x[0], x[1] + eps]) - field.value([x[0], x[1] - eps])) / (2.0 * eps);
            assert!(gx.hypot(gy) <= g + 1e-6);
        }
        let filter = layer_filter(&ScalingConfig::default(), 0);
        let (f2, g2, _) = filter.bounds();
        for i in 0..200 {
            let x = [(i as f64 * 0.13).sin(), (i as f64 * 0.29).cos()];
            assert!(filter.value(x).abs() <= f2);
            let gx = (filter.value([x[0] + eps, x[1]]) - filter.value([x[0] - eps, x[1]])) / (2.0 * eps);
            let gy = (filter.value([x[0], x[1] + eps]) - filter.value([x[0], x[1] - eps])) / (2.0 * eps);
            assert!(gx.hypot(gy) <= g2 + 1e-6);
        }
    }

    #[test]
    fn scaling_errors_shrink_with_mesh() {
        let cfg = ScalingConfig { hs: vec![0.2, 0.1], layers: vec![LayerKind::Input], ..ScalingConfig::default() };
        let rows = scaling_experiment(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].p, rows[1].p), (9, 19));
        for r in &rows {
            assert!(r.error <= r.bound);
        }
        let ratio = rows[0].error / rows[1].error;
        assert!((1.5..=8.0).contains(&ratio), "{ratio}");
    }
}
