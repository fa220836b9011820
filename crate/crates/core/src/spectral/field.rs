use std::collections::HashMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::basis::{basis_eval, gamma_frame, symmetric_closure, GammaFrame, Wavevector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// `d - 1` amplitudes per mode along the `γ_k` columns.
    Velocity,
    /// One amplitude per mode.
    Scalar,
}

/// Finite real Fourier expansion over a mode set closed under negation.
///
/// Coefficients are stored mode-major: entry `(m, i)` lives at `m * ncomp + i`.
/// The coefficient norm `Σ a²` equals `∫|u|² / (π(2π)^{d-1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawField", into = "RawField")]
pub struct SpectralField {
    dim: usize,
    kind: FieldKind,
    modes: Vec<Wavevector>,
    coeffs: Vec<f64>,
    index: HashMap<Wavevector, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawField {
    d: usize,
    kind: FieldKind,
    modes: Vec<Wavevector>,
    coeffs: Vec<f64>,
}

impl TryFrom<RawField> for SpectralField {
    type Error = Error;
    fn try_from(r: RawField) -> Result<Self> {
        SpectralField::from_coeffs(r.d, r.kind, r.modes, r.coeffs)
    }
}

impl From<SpectralField> for RawField {
    fn from(f: SpectralField) -> Self {
        RawField {
            d: f.dim,
            kind: f.kind,
            modes: f.modes,
            coeffs: f.coeffs,
        }
    }
}

/// `π(2π)^{d-1}`, the squared L² norm of each basis function.
pub fn basis_norm_sq(dim: usize) -> f64 {
    PI * (2.0 * PI).powi(dim as i32 - 1)
}

impl SpectralField {
    /// Zero field on `modes`, which must be closed under negation.
    pub fn zeros(dim: usize, kind: FieldKind, modes: Vec<Wavevector>) -> Result<Self> {
        let n = modes.len() * ncomp(dim, kind);
        Self::from_coeffs(dim, kind, modes, vec![0.0; n])
    }

    pub fn from_coeffs(
        dim: usize,
        kind: FieldKind,
        modes: Vec<Wavevector>,
        coeffs: Vec<f64>,
    ) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::InvalidDimension(dim));
        }
        let mut index = HashMap::with_capacity(modes.len());
        for (m, k) in modes.iter().enumerate() {
            if k.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: k.dim(),
                });
            }
            if index.insert(*k, m).is_some() {
                return Err(Error::DuplicateMode(k.comps().to_vec()));
            }
        }
        for k in &modes {
            if !index.contains_key(&k.neg()) {
                return Err(Error::NotSymmetric(k.neg().comps().to_vec()));
            }
        }
        let expected = modes.len() * ncomp(dim, kind);
        if coeffs.len() != expected {
            return Err(Error::CoefficientLength {
                expected,
                got: coeffs.len(),
            });
        }
        Ok(Self {
            dim,
            kind,
            modes,
            coeffs,
            index,
        })
    }

    /// Zero field whose mode set is the symmetric closure of `generators`.
    pub fn zeros_on(dim: usize, kind: FieldKind, generators: &[Wavevector]) -> Result<Self> {
        Self::zeros(dim, kind, symmetric_closure(generators))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    #[inline]
    pub fn ncomp(&self) -> usize {
        ncomp(self.dim, self.kind)
    }

    #[inline]
    pub fn modes(&self) -> &[Wavevector] {
        &self.modes
    }

    #[inline]
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    #[inline]
    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn position(&self, k: &Wavevector) -> Option<usize> {
        self.index.get(k).copied()
    }

    /// Amplitude `(u)_k^i`, zero when `k` is not retained.
    pub fn get(&self, k: &Wavevector, i: usize) -> f64 {
        self.position(k)
            .map(|m| self.coeffs[m * self.ncomp() + i])
            .unwrap_or(0.0)
    }

    pub fn set(&mut self, k: &Wavevector, i: usize, value: f64) -> Result<()> {
        let nc = self.ncomp();
        if i >= nc {
            return Err(crate::error::invalid("component", format!("{i} >= {nc}")));
        }
        let m = self
            .position(k)
            .ok_or_else(|| Error::InvalidWavevector(k.comps().to_vec()))?;
        self.coeffs[m * nc + i] = value;
        Ok(())
    }

    pub fn max_linf(&self) -> i32 {
        self.modes.iter().map(|k| k.norm_linf()).max().unwrap_or(0)
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.dim == other.dim && self.kind == other.kind && self.modes == other.modes
    }

    /// Coefficient norm `Σ a²`.
    pub fn coeff_norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|a| a * a).sum()
    }

    /// `∫|u|² dx` over the torus.
    pub fn l2_norm_sq(&self) -> f64 {
        self.coeff_norm_sq() * basis_norm_sq(self.dim)
    }

    /// `Σ |k|² a²`, the coefficient norm of the gradient.
    pub fn grad_coeff_norm_sq(&self) -> f64 {
        let nc = self.ncomp();
        self.modes
            .iter()
            .enumerate()
            .map(|(m, k)| {
                let s: f64 = self.coeffs[m * nc..(m + 1) * nc].iter().map(|a| a * a).sum();
                k.norm_sq() * s
            })
            .sum()
    }

    /// Per-mode factor `exp(-(ν|k|² + η|k|⁴) dt)`.
    pub fn apply_dissipation(&self, nu: f64, eta: f64, dt: f64) -> Self {
        let mut out = self.clone();
        let nc = self.ncomp();
        for (m, k) in self.modes.iter().enumerate() {
            let k2 = k.norm_sq();
            let f = (-(nu * k2 + eta * k2 * k2) * dt).exp();
            for a in &mut out.coeffs[m * nc..(m + 1) * nc] {
                *a *= f;
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.coeffs {
            *a *= s;
        }
    }

    /// `self += s * other`; layouts must match.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::KindMismatch("axpy on different mode layouts"));
        }
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
        Ok(())
    }

    /// Copy of `self` restricted or extended to `modes`; missing amplitudes are zero.
    pub fn remap(&self, modes: Vec<Wavevector>) -> Result<Self> {
        let mut out = Self::zeros(self.dim, self.kind, modes)?;
        let nc = self.ncomp();
        for (m, k) in out.modes.clone().iter().enumerate() {
            if let Some(src) = self.position(k) {
                out.coeffs[m * nc..(m + 1) * nc]
                    .copy_from_slice(&self.coeffs[src * nc..(src + 1) * nc]);
            }
        }
        Ok(out)
    }

    /// Direct summation `Σ_k Σ_i (u)_k^i e_k(x) γ_k^i`, zero-padded to three components.
    pub fn eval_velocity(&self, x: &[f64]) -> [f64; 3] {
        debug_assert_eq!(self.kind, FieldKind::Velocity);
        let nc = self.ncomp();
        let mut out = [0.0; 3];
        for (m, k) in self.modes.iter().enumerate() {
            let e = basis_eval(k, x);
            let g = gamma_frame(k);
            for i in 0..nc {
                let a = self.coeffs[m * nc + i] * e;
                for (o, c) in out.iter_mut().zip(g.col(i)) {
                    *o += a * c;
                }
            }
        }
        out
    }

    /// `(∇u)_{ij} = ∂_j u_i` at `x`.
    pub fn eval_gradient(&self, x: &[f64]) -> [[f64; 3]; 3] {
        debug_assert_eq!(self.kind, FieldKind::Velocity);
        let nc = self.ncomp();
        let mut out = [[0.0; 3]; 3];
        for (m, k) in self.modes.iter().enumerate() {
            let de = basis_derivative(k, x);
            let kf = k.as_f64();
            let g = gamma_frame(k);
            for i in 0..nc {
                let a = self.coeffs[m * nc + i] * de;
                let c = g.col(i);
                for r in 0..3 {
                    for s in 0..3 {
                        out[r][s] += a * c[r] * kf[s];
                    }
                }
            }
        }
        out
    }

    pub fn eval_scalar(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(self.kind, FieldKind::Scalar);
        self.modes
            .iter()
            .zip(&self.coeffs)
            .map(|(k, a)| a * basis_eval(k, x))
            .sum()
    }

    pub fn eval_scalar_gradient(&self, x: &[f64]) -> [f64; 3] {
        debug_assert_eq!(self.kind, FieldKind::Scalar);
        let mut out = [0.0; 3];
        for (k, a) in self.modes.iter().zip(&self.coeffs) {
            let de = a * basis_derivative(k, x);
            let kf = k.as_f64();
            for j in 0..3 {
                out[j] += de * kf[j];
            }
        }
        out
    }

    /// Upper bound `Σ|a|` on the sup norm (each `|e_k γ| <= 1`).
    pub fn sup_bound(&self) -> f64 {
        self.coeffs.iter().map(|a| a.abs()).sum()
    }

    /// Compiled evaluator for repeated point queries.
    pub fn evaluator(&self) -> FieldEvaluator {
        FieldEvaluator::new(self)
    }

    /// Complex amplitudes `ĉ(k)` with `u(x) = Σ_k ĉ(k) e^{ik·x}` over all retained `±k`.
    pub fn to_complex(&self) -> Vec<(Wavevector, [Complex64; 3])> {
        let mut out = Vec::with_capacity(self.modes.len());
        for k in &self.modes {
            if !k.is_positive() {
                continue;
            }
            let c = self.complex_at_positive(k);
            let conj = [c[0].conj(), c[1].conj(), c[2].conj()];
            out.push((*k, c));
            out.push((k.neg(), conj));
        }
        out
    }

    /// Complex amplitude of `e^{ip·x}` for `p` in the positive half.
    fn complex_at_positive(&self, p: &Wavevector) -> [Complex64; 3] {
        let q = p.neg();
        match self.kind {
            FieldKind::Scalar => {
                let b_p = self.get(p, 0);
                let b_m = self.get(&q, 0);
                [Complex64::new(0.5 * b_m, -0.5 * b_p), Complex64::default(), Complex64::default()]
            }
            FieldKind::Velocity => {
                let g = gamma_frame(p);
                let mut c = [Complex64::default(); 3];
                for i in 0..self.ncomp() {
                    let a_p = self.get(p, i);
                    let a_m = self.get(&q, i);
                    let z = Complex64::new(-0.5 * a_m, -0.5 * a_p);
                    for (cj, gj) in c.iter_mut().zip(g.col(i)) {
                        *cj += z * gj;
                    }
                }
                c
            }
        }
    }

    /// Inverse of [`to_complex`](Self::to_complex): reads `ĉ(p)` for positive `p` through
    /// `lookup` and projects velocity amplitudes onto `γ_p` (the Leray projection).
    pub(crate) fn fill_from_complex<F>(&mut self, mut lookup: F)
    where
        F: FnMut(&Wavevector) -> [Complex64; 3],
    {
        let nc = self.ncomp();
        let modes = self.modes.clone();
        for p in modes.iter().filter(|k| k.is_positive()) {
            let w = lookup(p);
            let mp = self.index[p];
            let mm = self.index[&p.neg()];
            match self.kind {
                FieldKind::Scalar => {
                    self.coeffs[mm] = 2.0 * w[0].re;
                    self.coeffs[mp] = -2.0 * w[0].im;
                }
                FieldKind::Velocity => {
                    let g = gamma_frame(p);
                    for i in 0..nc {
                        let col = g.col(i);
                        let c: Complex64 = (0..3).map(|j| w[j] * col[j]).sum();
                        self.coeffs[mm * nc + i] = -2.0 * c.re;
                        self.coeffs[mp * nc + i] = -2.0 * c.im;
                    }
                }
            }
        }
    }

    /// Project a divergence-free trigonometric field onto `modes` with an
    /// `m^d` equispaced quadrature, exact when `m` exceeds twice the field's degree.
    pub fn project_velocity<F>(dim: usize, modes: Vec<Wavevector>, m: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> [f64; 3],
    {
        let mut out = Self::zeros(dim, FieldKind::Velocity, modes)?;
        let frames: Vec<GammaFrame> = out.modes.iter().map(gamma_frame).collect();
        let nc = out.ncomp();
        let w = (2.0 * PI / m as f64).powi(dim as i32) / basis_norm_sq(dim);
        for_each_grid_point(dim, m, |x| {
            let val = f(x);
            for (idx, k) in out.modes.iter().enumerate() {
                let e = basis_eval(k, x) * w;
                for i in 0..nc {
                    let c = frames[idx].col(i);
                    out.coeffs[idx * nc + i] += e * (val[0] * c[0] + val[1] * c[1] + val[2] * c[2]);
                }
            }
        });
        Ok(out)
    }

    pub fn project_scalar<F>(dim: usize, modes: Vec<Wavevector>, m: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64,
    {
        let mut out = Self::zeros(dim, FieldKind::Scalar, modes)?;
        let w = (2.0 * PI / m as f64).powi(dim as i32) / basis_norm_sq(dim);
        for_each_grid_point(dim, m, |x| {
            let val = f(x);
            for (idx, k) in out.modes.iter().enumerate() {
                out.coeffs[idx] += w * val * basis_eval(k, x);
            }
        });
        Ok(out)
    }
}

#[inline]
fn ncomp(dim: usize, kind: FieldKind) -> usize {
    match kind {
        FieldKind::Velocity => dim - 1,
        FieldKind::Scalar => 1,
    }
}

/// `d/dθ` of the basis profile at `θ = k·x`: `cos θ` on the positive half, `-sin θ` otherwise.
#[inline]
fn basis_derivative(k: &Wavevector, x: &[f64]) -> f64 {
    let phase = k.dot(x);
    if k.is_positive() {
        phase.cos()
    } else {
        -phase.sin()
    }
}

pub(crate) fn for_each_grid_point<F: FnMut(&[f64])>(dim: usize, m: usize, mut f: F) {
    let h = 2.0 * PI / m as f64;
    let total = m.pow(dim as u32);
    let mut x = [0.0; 3];
    for n in 0..total {
        let mut r = n;
        for xj in x.iter_mut().take(dim) {
            *xj = (r % m) as f64 * h;
            r /= m;
        }
        f(&x[..dim]);
    }
}

/// Sum of `s_p sin(p·x) + c_p cos(p·x)` over positive `p`, with vector amplitudes.
///
/// One `sin_cos` per `±p` pair, so this is the hot path for particle tracking.
#[derive(Clone, Debug)]
pub struct FieldEvaluator {
    dim: usize,
    waves: Vec<[f64; 3]>,
    sin_amp: Vec<[f64; 3]>,
    cos_amp: Vec<[f64; 3]>,
}

impl FieldEvaluator {
    pub fn new(u: &SpectralField) -> Self {
        let dim = u.dim();
        let nc = u.ncomp();
        let mut waves = Vec::new();
        let mut sin_amp = Vec::new();
        let mut cos_amp = Vec::new();
        for p in u.modes().iter().filter(|k| k.is_positive()) {
            let q = p.neg();
            let mut s = [0.0; 3];
            let mut c = [0.0; 3];
            match u.kind() {
                FieldKind::Scalar => {
                    s[0] = u.get(p, 0);
                    c[0] = u.get(&q, 0);
                }
                FieldKind::Velocity => {
                    let g = gamma_frame(p);
                    for i in 0..nc {
                        let (ap, aq) = (u.get(p, i), u.get(&q, i));
                        for j in 0..3 {
                            s[j] += ap * g.col(i)[j];
                            // γ_{-p} = -γ_p
                            c[j] -= aq * g.col(i)[j];
                        }
                    }
                }
            }
            if s.iter().chain(&c).any(|v| *v != 0.0) {
                waves.push(p.as_f64());
                sin_amp.push(s);
                cos_amp.push(c);
            }
        }
        Self {
            dim,
            waves,
            sin_amp,
            cos_amp,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.waves.is_empty()
    }

    #[inline]
    pub fn velocity(&self, x: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for ((p, s), c) in self.waves.iter().zip(&self.sin_amp).zip(&self.cos_amp) {
            let (sn, cs) = (p[0] * x[0] + p[1] * x[1] + p[2] * x[2]).sin_cos();
            for j in 0..3 {
                out[j] += s[j] * sn + c[j] * cs;
            }
        }
        out
    }

    /// Velocity and `(∇u)_{ij} = ∂_j u_i` together.
    #[inline]
    pub fn velocity_gradient(&self, x: &[f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
        let mut u = [0.0; 3];
        let mut g = [[0.0; 3]; 3];
        for ((p, s), c) in self.waves.iter().zip(&self.sin_amp).zip(&self.cos_amp) {
            let (sn, cs) = (p[0] * x[0] + p[1] * x[1] + p[2] * x[2]).sin_cos();
            for i in 0..3 {
                u[i] += s[i] * sn + c[i] * cs;
                let d = s[i] * cs - c[i] * sn;
                for j in 0..3 {
                    g[i][j] += d * p[j];
                }
            }
        }
        (u, g)
    }
}

#[cfg(test)]
mod tests {
    use super::super::basis::linf_ball;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wv(c: &[i32]) -> Wavevector {
        Wavevector::new(c).unwrap()
    }

    fn random_field(dim: usize, n: i32, seed: u64) -> SpectralField {
        let modes = linf_ball(dim, n).unwrap();
        let mut u = SpectralField::zeros(dim, FieldKind::Velocity, modes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in u.coeffs_mut() {
            *a = rng.gen_range(-1.0..1.0);
        }
        u
    }

    #[test]
    fn single_mode_velocity() {
        let mut u = SpectralField::zeros_on(2, FieldKind::Velocity, &[wv(&[1, 0])]).unwrap();
        u.set(&wv(&[1, 0]), 0, 1.0).unwrap();
        let v = u.eval_velocity(&[PI / 2.0, 0.7]);
        assert!(v[0].abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cellular_gradient_at_origin() {
        // (sin x2, sin x1): sin x2 ê1 is mode (0,1) with γ = (-1,0), amplitude -1;
        // sin x1 ê2 is mode (1,0) with γ = (0,1), amplitude 1.
        let mut u =
            SpectralField::zeros_on(2, FieldKind::Velocity, &[wv(&[1, 0]), wv(&[0, 1])]).unwrap();
        u.set(&wv(&[0, 1]), 0, -1.0).unwrap();
        u.set(&wv(&[1, 0]), 0, 1.0).unwrap();
        let g = u.eval_gradient(&[0.0, 0.0]);
        assert_eq!([g[0][0], g[0][1], g[1][0], g[1][1]], [0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn evaluator_matches_direct_sum() {
        for dim in [2, 3] {
            let u = random_field(dim, 2, 7 + dim as u64);
            let ev = u.evaluator();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..10 {
                let mut x = [0.0; 3];
                for xj in x.iter_mut().take(dim) {
                    *xj = rng.gen_range(0.0..2.0 * PI);
                }
                let a = u.eval_velocity(&x[..dim]);
                let ga = u.eval_gradient(&x[..dim]);
                let (b, gb) = ev.velocity_gradient(&x);
                for i in 0..3 {
                    assert!((a[i] - b[i]).abs() < 1e-12);
                    for j in 0..3 {
                        assert!((ga[i][j] - gb[i][j]).abs() < 1e-12);
                    }
                }
                let tr: f64 = (0..3).map(|i| ga[i][i]).sum();
                assert!(tr.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn complex_roundtrip() {
        for dim in [2, 3] {
            let u = random_field(dim, 2, 3);
            let table: HashMap<Wavevector, [Complex64; 3]> = u.to_complex().into_iter().collect();
            let mut v = SpectralField::zeros(dim, FieldKind::Velocity, u.modes().to_vec()).unwrap();
            v.fill_from_complex(|p| table[p]);
            for (a, b) in u.coeffs().iter().zip(v.coeffs()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn json_roundtrip() {
        let u = random_field(2, 1, 5);
        let s = serde_json::to_string(&u).unwrap();
        let v: SpectralField = serde_json::from_str(&s).unwrap();
        assert_eq!(u, v);
        let bad = r#"{"d":2,"kind":"scalar","modes":[[1,0]],"coeffs":[1.0]}"#;
        assert!(serde_json::from_str::<SpectralField>(bad).is_err());
    }

    #[test]
    fn dissipation_halves() {
        let mut u = SpectralField::zeros_on(2, FieldKind::Velocity, &[wv(&[1, 0])]).unwrap();
        u.set(&wv(&[1, 0]), 0, 1.0).unwrap();
        let v = u.apply_dissipation(1.0, 0.0, 2f64.ln());
        assert!((v.get(&wv(&[1, 0]), 0) - 0.5).abs() < 1e-15);
        assert_eq!(u.apply_dissipation(1.0, 0.3, 0.0), u);
    }
}
