//! Discrete group convolutions over the cyclic rotation group.
//!
//! All convolutions are true convolutions (the kernel is flipped):
//! `out[i][j] = Σ_ab K[a][b] · I[i + p - 1 - a][j + p - 1 - b]` in valid mode.
//!
//! Multi-channel activations are `Array4` tensors shaped
//! `(channels, orientations, n, n)`. Planar images use one orientation.

use ndarray::{s, Array2, Array3, Array4, Array6, ArrayView2, ArrayView3, ArrayView4, Axis};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::parametrize::NormalizedBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding so the output has the input's size.
    ZeroSame,
}

/// A sampled scalar image with its mesh size.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    values: Array2<f64>,
    h: f64,
}

impl PlanarImage {
    pub fn new(values: Array2<f64>, h: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("image has non-finite entries"));
        }
        if !(h > 0.0) {
            return Err(invalid(format!("mesh size must be positive, got {h}")));
        }
        Ok(Self { values, h })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn side(&self) -> usize {
        self.values.nrows()
    }
}

/// One channel of orientation-indexed features, shaped `(t, n, n)`.
///
/// Slice `a` belongs to group element `A_a`, in increasing angle order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature map has non-finite entries"));
        }
        if values.dim().0 == 0 {
            return Err(invalid("feature map needs at least one orientation"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn t(&self) -> usize {
        self.values.dim().0
    }

    pub fn side(&self) -> usize {
        self.values.dim().1
    }

    pub fn orientation(&self, a: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), a)
    }
}

/// `out += conv_valid(img, ker)` over contiguous row-major buffers.
fn conv_valid_acc(img: &[f64], cols: usize, ker: &[f64], p: usize, out: &mut [f64], out_rows: usize, out_cols: usize) {
    match p {
        3 => conv_valid_rows::<3>(img, cols, ker, out, out_rows, out_cols),
        5 => conv_valid_rows::<5>(img, cols, ker, out, out_rows, out_cols),
        7 => conv_valid_rows::<7>(img, cols, ker, out, out_rows, out_cols),
        _ => conv_valid_taps(img, cols, ker, p, out, out_rows, out_cols),
    }
}

/// One pass per kernel row with the row's taps held in registers.
fn conv_valid_rows<const P: usize>(img: &[f64], cols: usize, ker: &[f64], out: &mut [f64], out_rows: usize, out_cols: usize) {
    for a in 0..P {
        // Taps reversed so that `k[b]` multiplies `src[j + b]`.
        let mut k = [0.0; P];
        for b in 0..P {
            k[b] = ker[a * P + P - 1 - b];
        }
        if k.iter().all(|v| *v == 0.0) {
            continue;
        }
        let dr = P - 1 - a;
        for i in 0..out_rows {
            let src = &img[(i + dr) * cols..(i + dr) * cols + out_cols + P - 1];
            let dst = &mut out[i * out_cols..(i + 1) * out_cols];
            for (o, w) in dst.iter_mut().zip(src.windows(P)) {
                let mut acc = 0.0;
                for b in 0..P {
                    acc += k[b] * w[b];
                }
                *o += acc;
            }
        }
    }
}

fn conv_valid_taps(img: &[f64], cols: usize, ker: &[f64], p: usize, out: &mut [f64], out_rows: usize, out_cols: usize) {
    for a in 0..p {
        for b in 0..p {
            let k = ker[a * p + b];
            if k == 0.0 {
                continue;
            }
            let dr = p - 1 - a;
            let dc = p - 1 - b;
            for i in 0..out_rows {
                let src = &img[(i + dr) * cols + dc..(i + dr) * cols + dc + out_cols];
                let dst = &mut out[i * out_cols..(i + 1) * out_cols];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += k * v;
                }
            }
        }
    }
}

/// `dker += ∂(Σ g · conv_valid(img, ker)) / ∂ker`.
fn conv_grad_kernel_acc(img: &[f64], cols: usize, g: &[f64], out_rows: usize, out_cols: usize, p: usize, dker: &mut [f64]) {
    match p {
        3 => grad_kernel_rows::<3>(img, cols, g, out_rows, out_cols, dker),
        5 => grad_kernel_rows::<5>(img, cols, g, out_rows, out_cols, dker),
        7 => grad_kernel_rows::<7>(img, cols, g, out_rows, out_cols, dker),
        _ => grad_kernel_taps(img, cols, g, out_rows, out_cols, p, dker),
    }
}

fn grad_kernel_rows<const P: usize>(img: &[f64], cols: usize, g: &[f64], out_rows: usize, out_cols: usize, dker: &mut [f64]) {
    for a in 0..P {
        let dr = P - 1 - a;
        let mut acc = [0.0; P];
        for i in 0..out_rows {
            let src = &img[(i + dr) * cols..(i + dr) * cols + out_cols + P - 1];
            let gr = &g[i * out_cols..(i + 1) * out_cols];
            for (w, gv) in src.windows(P).zip(gr) {
                for b in 0..P {
                    acc[b] += w[b] * gv;
                }
            }
        }
        for b in 0..P {
            dker[a * P + P - 1 - b] += acc[b];
        }
    }
}

fn grad_kernel_taps(img: &[f64], cols: usize, g: &[f64], out_rows: usize, out_cols: usize, p: usize, dker: &mut [f64]) {
    for a in 0..p {
        for b in 0..p {
            let dr = p - 1 - a;
            let dc = p - 1 - b;
            let mut acc = 0.0;
            for i in 0..out_rows {
                let src = &img[(i + dr) * cols + dc..(i + dr) * cols + dc + out_cols];
                let gr = &g[i * out_cols..(i + 1) * out_cols];
                acc += src.iter().zip(gr).map(|(x, y)| x * y).sum::<f64>();
            }
            dker[a * p + b] += acc;
        }
    }
}

/// `dimg += ∂(Σ g · conv_valid(img, ker)) / ∂img`.
fn conv_grad_input_acc(g: &[f64], out_rows: usize, out_cols: usize, ker: &[f64], p: usize, dimg: &mut [f64], cols: usize) {
    match p {
        3 => grad_input_rows::<3>(g, out_rows, out_cols, ker, dimg, cols),
        5 => grad_input_rows::<5>(g, out_rows, out_cols, ker, dimg, cols),
        7 => grad_input_rows::<7>(g, out_rows, out_cols, ker, dimg, cols),
        _ => grad_input_taps(g, out_rows, out_cols, ker, p, dimg, cols),
    }
}

/// Full correlation of each upstream row, zero-extended by `P - 1` on both
/// sides, with one kernel row.
fn grad_input_rows<const P: usize>(g: &[f64], out_rows: usize, out_cols: usize, ker: &[f64], dimg: &mut [f64], cols: usize) {
    let mut padded = vec![0.0; out_cols + 2 * (P - 1)];
    for i in 0..out_rows {
        padded[P - 1..P - 1 + out_cols].copy_from_slice(&g[i * out_cols..(i + 1) * out_cols]);
        for a in 0..P {
            let k: &[f64] = &ker[a * P..(a + 1) * P];
            if k.iter().all(|v| *v == 0.0) {
                continue;
            }
            let dr = P - 1 - a;
            let dst = &mut dimg[(i + dr) * cols..(i + dr + 1) * cols];
            for (d, w) in dst.iter_mut().zip(padded.windows(P)) {
                let mut acc = 0.0;
                for b in 0..P {
                    acc += k[b] * w[b];
                }
                *d += acc;
            }
        }
    }
}

fn grad_input_taps(g: &[f64], out_rows: usize, out_cols: usize, ker: &[f64], p: usize, dimg: &mut [f64], cols: usize) {
    for a in 0..p {
        for b in 0..p {
            let k = ker[a * p + b];
            if k == 0.0 {
                continue;
            }
            let dr = p - 1 - a;
            let dc = p - 1 - b;
            for i in 0..out_rows {
                let dst = &mut dimg[(i + dr) * cols + dc..(i + dr) * cols + dc + out_cols];
                let gr = &g[i * out_cols..(i + 1) * out_cols];
                for (d, v) in dst.iter_mut().zip(gr) {
                    *d += k * v;
                }
            }
        }
    }
}

/// Zero-pads by `(p-1) - ⌊(p-1)/2⌋` before and `⌊(p-1)/2⌋` after each axis.
pub fn pad_same(image: ArrayView2<'_, f64>, p: usize) -> Array2<f64> {
    let hi = (p - 1) / 2;
    let lo = p - 1 - hi;
    let (r, c) = image.dim();
    let mut out = Array2::zeros((r + p - 1, c + p - 1));
    out.slice_mut(s![lo..lo + r, lo..lo + c]).assign(&image);
    out
}

/// Plain 2D true convolution.
pub fn conv2d(image: ArrayView2<'_, f64>, kernel: ArrayView2<'_, f64>, padding: Padding) -> Result<Array2<f64>> {
    let (kp, kq) = kernel.dim();
    if kp != kq || kp == 0 {
        return Err(invalid(format!("kernel must be square and non-empty, got {kp}x{kq}")));
    }
    let image = match padding {
        Padding::Valid => image.as_standard_layout().into_owned(),
        Padding::ZeroSame => pad_same(image, kp),
    };
    let (r, c) = image.dim();
    if kp > r || kp > c {
        return Err(invalid(format!("kernel {kp}x{kp} larger than image {r}x{c}")));
    }
    let (or, oc) = (r - kp + 1, c - kp + 1);
    let ker = kernel.as_standard_layout();
    let mut out = Array2::zeros((or, oc));
    conv_valid_acc(
        image.as_slice().unwrap(),
        c,
        ker.as_slice().unwrap(),
        kp,
        out.as_slice_mut().unwrap(),
        or,
        oc,
    );
    Ok(out)
}

/// Gradient of `Σ g ⊙ conv2d(image, K)` with respect to a `p x p` kernel `K`
/// (valid mode).
pub fn conv2d_grad_kernel(image: ArrayView2<'_, f64>, grad_out: ArrayView2<'_, f64>, p: usize) -> Result<Array2<f64>> {
    let (r, c) = image.dim();
    if p == 0 || p > r || p > c || grad_out.dim() != (r - p + 1, c - p + 1) {
        return Err(invalid("gradient shape does not match a valid convolution"));
    }
    let img = image.as_standard_layout();
    let g = grad_out.as_standard_layout();
    let mut dk = Array2::zeros((p, p));
    conv_grad_kernel_acc(img.as_slice().unwrap(), c, g.as_slice().unwrap(), r - p + 1, c - p + 1, p, dk.as_slice_mut().unwrap());
    Ok(dk)
}

/// Gradient of `Σ g ⊙ conv2d(image, K)` with respect to the image (valid mode).
pub fn conv2d_grad_input(grad_out: ArrayView2<'_, f64>, kernel: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let p = kernel.nrows();
    if kernel.ncols() != p || p == 0 {
        return Err(invalid("kernel must be square and non-empty"));
    }
    let (or, oc) = grad_out.dim();
    let (r, c) = (or + p - 1, oc + p - 1);
    let g = grad_out.as_standard_layout();
    let k = kernel.as_standard_layout();
    let mut di = Array2::zeros((r, c));
    conv_grad_input_acc(g.as_slice().unwrap(), or, oc, k.as_slice().unwrap(), p, di.as_slice_mut().unwrap(), c);
    Ok(di)
}

fn to_tensor(image: &PlanarImage) -> Array4<f64> {
    let v = image.values().as_standard_layout().into_owned();
    let (r, c) = v.dim();
    v.into_shape_with_order((1, 1, r, c)).unwrap()
}

/// `out^B = Ψ̃^B * I` for a `(t, p, p)` filter.
pub fn input_layer(psi: ArrayView3<'_, f64>, image: &PlanarImage) -> Result<FeatureMap> {
    let (t, p, q) = psi.dim();
    let bank = FilterBank::new(LayerKind::Input, psi.to_owned().into_shape_with_order((1, 1, t, 1, p, q)).unwrap())?;
    let out = bank.forward(to_tensor(image).view())?;
    FeatureMap::new(out.index_axis_move(Axis(0), 0))
}

/// Pre-shifted form: `out^B = Σ_A Φ̄^{B,A} * F^A` with
/// `Φ̄^{B,A} = Φ̃^{B, B⁻¹A}`. `phi` is indexed `(B, A, i, j)`.
pub fn intermediate_layer(phi: ArrayView4<'_, f64>, features: &FeatureMap) -> Result<FeatureMap> {
    let (tb, ta, p, q) = phi.dim();
    if tb != features.t() || ta != features.t() {
        return Err(invalid(format!("filter group orders ({tb}, {ta}) do not match feature order {}", features.t())));
    }
    let bank = FilterBank::new(LayerKind::Intermediate, phi.to_owned().into_shape_with_order((1, 1, tb, ta, p, q)).unwrap())?;
    let x = features.values().clone().insert_axis(Axis(0));
    let out = bank.forward(x.view())?;
    FeatureMap::new(out.index_axis_move(Axis(0), 0))
}

/// Direct form: `out^B = Σ_A Φ̃^{B,A} * F^{BA}`.
pub fn intermediate_layer_direct(phi: ArrayView4<'_, f64>, features: &FeatureMap) -> Result<FeatureMap> {
    let (tb, ta, _, _) = phi.dim();
    let t = features.t();
    if tb != t || ta != t {
        return Err(invalid(format!("filter group orders ({tb}, {ta}) do not match feature order {t}")));
    }
    let mut slices = Vec::with_capacity(t);
    for b in 0..t {
        let mut acc: Option<Array2<f64>> = None;
        for a in 0..t {
            let y = conv2d(features.orientation((b + a) % t), phi.slice(s![b, a, .., ..]), Padding::Valid)?;
            acc = Some(match acc {
                Some(v) => v + y,
                None => y,
            });
        }
        slices.push(acc.unwrap());
    }
    let views: Vec<_> = slices.iter().map(|v| v.view()).collect();
    FeatureMap::new(ndarray::stack(Axis(0), &views).unwrap())
}

/// `out = Σ_B Υ̃^B * F^B` for a `(t, p, p)` filter.
pub fn output_layer(upsilon: ArrayView3<'_, f64>, features: &FeatureMap, h: f64) -> Result<PlanarImage> {
    let (t, p, q) = upsilon.dim();
    if t != features.t() {
        return Err(invalid(format!("filter group order {t} does not match feature order {}", features.t())));
    }
    let bank = FilterBank::new(LayerKind::Output, upsilon.to_owned().into_shape_with_order((1, 1, t, 1, p, q)).unwrap())?;
    let x = features.values().clone().insert_axis(Axis(0));
    let out = bank.forward(x.view())?;
    PlanarImage::new(out.slice(s![0, 0, .., ..]).to_owned(), h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Planar input, `t` orientations out.
    Input,
    /// `t` orientations in and out with cyclic channel shift.
    Intermediate,
    /// `t` orientations in, planar output.
    Output,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Intermediate => "intermediate",
            LayerKind::Output => "output",
        }
    }

    /// Coefficient vectors per channel pair.
    pub fn vectors_per_pair(&self, t: usize) -> usize {
        match self {
            LayerKind::Intermediate => t,
            _ => 1,
        }
    }

    /// Orientations of the layer input and output tensors.
    pub fn orientations(&self, t: usize) -> (usize, usize) {
        match self {
            LayerKind::Input => (1, t),
            LayerKind::Intermediate => (t, t),
            LayerKind::Output => (t, 1),
        }
    }
}

/// Synthesized filters of one layer, shaped `(c_out, c_in, t, t_A, p, p)`.
///
/// Input and output layers have `t_A = 1` and slice `[o, i, B, 0]` holds
/// `Ψ̃^B` or `Υ̃^B`. Intermediate layers store `Φ̃^{B,A}` at `[o, i, B, A]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    kind: LayerKind,
    values: Array6<f64>,
}

impl FilterBank {
    pub fn new(kind: LayerKind, values: Array6<f64>) -> Result<Self> {
        let (_, _, t, ta, p, q) = values.dim();
        if p != q || p == 0 || t == 0 {
            return Err(invalid("filters must be non-empty and square"));
        }
        let want_ta = if kind == LayerKind::Intermediate { t } else { 1 };
        if ta != want_ta {
            return Err(invalid(format!("{} filters need {want_ta} inner orientations, got {ta}", kind.name())));
        }
        Ok(Self { kind, values: values.as_standard_layout().into_owned() })
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn values(&self) -> &Array6<f64> {
        &self.values
    }

    pub fn c_out(&self) -> usize {
        self.values.dim().0
    }

    pub fn c_in(&self) -> usize {
        self.values.dim().1
    }

    pub fn t(&self) -> usize {
        self.values.dim().2
    }

    pub fn p(&self) -> usize {
        self.values.dim().4
    }

    /// Filter slice for `Ψ̃^B`/`Υ̃^B` or `Φ̃^{B,A}`.
    pub fn slice(&self, o: usize, i: usize, b: usize, a: usize) -> ArrayView2<'_, f64> {
        self.values.slice(s![o, i, b, a, .., ..])
    }

    fn kernel_offset(&self, o: usize, i: usize, b: usize, a: usize) -> usize {
        let (_, ci, t, ta, p, _) = self.values.dim();
        (((o * ci + i) * t + b) * ta + a) * p * p
    }

    /// The terms summed into output plane `ob = o·t_out + B` from input
    /// channel `i`: input orientation and kernel offset, in a fixed order.
    fn terms(&self, ob: usize, i: usize) -> Vec<(usize, usize)> {
        let t = self.t();
        match self.kind {
            LayerKind::Input => vec![(0, self.kernel_offset(ob / t, i, ob % t, 0))],
            LayerKind::Intermediate => {
                let (o, b) = (ob / t, ob % t);
                (0..t).map(|a| (a, self.kernel_offset(o, i, b, (a + t - b) % t))).collect()
            }
            LayerKind::Output => (0..t).map(|b| (b, self.kernel_offset(ob, i, b, 0))).collect(),
        }
    }

    fn check_input(&self, x: &ArrayView4<'_, f64>) -> Result<(usize, usize)> {
        let (c, ta, r, cols) = x.dim();
        let (want_t, _) = self.kind.orientations(self.t());
        if c != self.c_in() || ta != want_t {
            return Err(invalid(format!(
                "{} layer expects ({}, {want_t}, n, n) input, got ({c}, {ta}, {r}, {cols})",
                self.kind.name(),
                self.c_in()
            )));
        }
        if r < self.p() || cols < self.p() {
            return Err(invalid(format!("input {r}x{cols} smaller than filter size {}", self.p())));
        }
        Ok((r - self.p() + 1, cols - self.p() + 1))
    }

    /// Valid-mode layer application on a `(c_in, t_in, n, n)` tensor.
    pub fn forward(&self, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
        let (or, oc) = self.check_input(&x)?;
        let x = x.as_standard_layout();
        let (_, t_in, r, c) = x.dim();
        let (_, t_out) = self.kind.orientations(self.t());
        let xs = x.as_slice().unwrap();
        let ks = self.values.as_slice().unwrap();
        let p = self.p();
        let plane = r * c;
        let mut out = Array4::zeros((self.c_out(), t_out, or, oc));
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(or * oc)
            .enumerate()
            .for_each(|(ob, dst)| {
                for i in 0..self.c_in() {
                    for (a, k) in self.terms(ob, i) {
                        let src = &xs[(i * t_in + a) * plane..(i * t_in + a + 1) * plane];
                        conv_valid_acc(src, c, &ks[k..k + p * p], p, dst, or, oc);
                    }
                }
            });
        Ok(out)
    }

    /// Gradients with respect to the layer input and the filter values,
    /// given the upstream gradient `g` of the forward output.
    pub fn backward(&self, x: ArrayView4<'_, f64>, g: ArrayView4<'_, f64>) -> Result<(Array4<f64>, Array6<f64>)> {
        let (or, oc) = self.check_input(&x)?;
        let (_, t_out) = self.kind.orientations(self.t());
        if g.dim() != (self.c_out(), t_out, or, oc) {
            return Err(Error::Contract(format!("upstream gradient shape {:?} does not match layer output", g.dim())));
        }
        let x = x.as_standard_layout();
        let g = g.as_standard_layout();
        let (_, t_in, r, c) = x.dim();
        let xs = x.as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let p = self.p();
        let plane = r * c;
        let oplane = or * oc;
        let n_out = self.c_out() * t_out;

        let ks = self.values.as_slice().unwrap();
        let n_kernels = ks.len() / (p * p);

        // Group the (output plane, input plane, kernel) links by input plane
        // and by kernel so each gradient buffer is reduced in a fixed order.
        let mut by_plane: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.c_in() * t_in];
        let mut by_kernel: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_kernels];
        for ob in 0..n_out {
            for i in 0..self.c_in() {
                for (a, k) in self.terms(ob, i) {
                    by_plane[i * t_in + a].push((ob, k));
                    by_kernel[k / (p * p)].push((ob, i * t_in + a));
                }
            }
        }

        let mut dx = Array4::zeros((self.c_in(), t_in, r, c));
        dx.as_slice_mut().unwrap().par_chunks_mut(plane).zip(&by_plane).for_each(|(dst, links)| {
            for &(ob, k) in links {
                conv_grad_input_acc(&gs[ob * oplane..(ob + 1) * oplane], or, oc, &ks[k..k + p * p], p, dst, c);
            }
        });

        let mut dk = Array6::zeros(self.values.dim());
        dk.as_slice_mut().unwrap().par_chunks_mut(p * p).zip(&by_kernel).for_each(|(dst, links)| {
            for &(ob, s) in links {
                conv_grad_kernel_acc(&xs[s * plane..(s + 1) * plane], c, &gs[ob * oplane..(ob + 1) * oplane], or, oc, p, dst);
            }
        });
        Ok((dx, dk))
    }
}

/// Coefficients of one layer: `c_out · c_in · vectors_per_pair` vectors of
/// length `r`, flattened pair-major (`o`, then `i`, then `A`).
pub fn build_layer_filters(
    basis: &NormalizedBasis,
    coefficients: &[f64],
    kind: LayerKind,
    c_out: usize,
    c_in: usize,
) -> Result<FilterBank> {
    let t = basis.t();
    let r = basis.rank();
    let p = basis.p();
    let per_pair = kind.vectors_per_pair(t);
    let want = c_out * c_in * per_pair * r;
    if coefficients.len() != want {
        return Err(invalid(format!(
            "{} layer with {c_out}x{c_in} channels needs {want} coefficients, got {}",
            kind.name(),
            coefficients.len()
        )));
    }
    let ta = if kind == LayerKind::Intermediate { t } else { 1 };
    let mut values = Array6::zeros((c_out, c_in, t, ta, p, p));
    for o in 0..c_out {
        for i in 0..c_in {
            for a in 0..per_pair {
                let off = ((o * c_in + i) * per_pair + a) * r;
                let stack = basis.synthesize(&coefficients[off..off + r])?;
                values.slice_mut(s![o, i, .., a, .., ..]).assign(&stack);
            }
        }
    }
    FilterBank::new(kind, values)
}

/// Chains a filter-space gradient back to the layer coefficients (`Uᵀ` per
/// synthesized stack), in the layout of [`build_layer_filters`].
pub fn project_filter_gradient(basis: &NormalizedBasis, grad: &Array6<f64>, kind: LayerKind) -> Result<Vec<f64>> {
    let (c_out, c_in, t, ta, _, _) = grad.dim();
    if t != basis.t() || ta != kind.vectors_per_pair(t) {
        return Err(invalid("filter gradient does not match the basis"));
    }
    let mut out = Vec::with_capacity(c_out * c_in * ta * basis.rank());
    for o in 0..c_out {
        for i in 0..c_in {
            for a in 0..ta {
                let stack = grad.slice(s![o, i, .., a, .., ..]).to_owned();
                out.extend(basis.project(&stack)?);
            }
        }
    }
    Ok(out)
}
