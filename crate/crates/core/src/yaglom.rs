//! Two-point statistics of the stationary scalar, the KHM relation and Yaglom's law.
//!
//! Scalar quantities use the coefficient normalization of the balance relation:
//! averages over the torus are taken with the real basis orthonormal, which is the
//! physical mean `⨍` multiplied by [`SCALAR_NORM`]. With this convention
//! `𝔞̄(0) = ε̄` and `κ E Σ|k|²b² = ε̄` hold simultaneously.
//!
//! Spectral evaluation writes every statistic as a sum over shells `|k|` of
//! spherical averages of plane waves: `ψ₀ = J₀`, `ψ₁ = J₁` in two dimensions and
//! `ψ₀ = sin z / z`, `ψ₁ = j₁` in three.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forcing::{aux_rng, ScalarForcing};
use crate::scalar::Snapshot;
use crate::spectral::{FieldEvaluator, FieldKind, SpectralField};
use crate::stats::{mean, std_error, Estimate};

/// Factor between physical means of `g²` and the coefficient normalization.
pub const SCALAR_NORM: f64 = 2.0;

/// Spherical average of `e^{iz k̂·n}`.
pub fn psi0(dim: usize, z: f64) -> f64 {
    if dim == 2 {
        puruspe::Jn(0, z)
    } else if z.abs() < 1e-4 {
        1.0 - z * z / 6.0
    } else {
        z.sin() / z
    }
}

/// `k̂ · ⨍ n sin(z k̂·n) dS(n)`; equals `−ψ₀'`.
pub fn psi1(dim: usize, z: f64) -> f64 {
    if dim == 2 {
        puruspe::Jn(1, z)
    } else if z.abs() < 1e-3 {
        z / 3.0 - z * z * z / 30.0
    } else {
        (z.sin() - z * z.cos()) / (z * z)
    }
}

/// Area of the unit sphere `S^{d-1}`.
pub fn sphere_area(dim: usize) -> f64 {
    if dim == 2 {
        2.0 * std::f64::consts::PI
    } else {
        4.0 * std::f64::consts::PI
    }
}

/// Per-shell weights of one snapshot: `𝔊̄(ℓ) = Σ_s power_s ψ₀(k_s ℓ)` and
/// `D̄(ℓ) = Σ_s flux_s ψ₁(k_s ℓ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellWeights {
    pub dim: usize,
    /// `|k|²` of each shell.
    pub k2: Vec<i64>,
    pub power: Vec<f64>,
    pub flux: Vec<f64>,
}

impl ShellWeights {
    pub fn g_bar(&self, ell: f64) -> f64 {
        self.k2
            .iter()
            .zip(&self.power)
            .map(|(k2, p)| p * psi0(self.dim, (*k2 as f64).sqrt() * ell))
            .sum()
    }

    pub fn g_bar_prime(&self, ell: f64) -> f64 {
        self.k2
            .iter()
            .zip(&self.power)
            .map(|(k2, p)| {
                let k = (*k2 as f64).sqrt();
                -p * k * psi1(self.dim, k * ell)
            })
            .sum()
    }

    pub fn d_bar(&self, ell: f64) -> f64 {
        self.k2
            .iter()
            .zip(&self.flux)
            .map(|(k2, w)| w * psi1(self.dim, (*k2 as f64).sqrt() * ell))
            .sum()
    }
}

type Amps = BTreeMap<[i32; 3], Complex64>;
type VAmps = BTreeMap<[i32; 3], [Complex64; 3]>;

fn sub(a: [i32; 3], b: [i32; 3]) -> [i32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Shell weights of a `(u, g)` pair.
///
/// With `S(y) = ⨍ g(x)² u(x+y)` and `T(y) = ⨍ g(x) (gu)(x+y)` the increment flux is
/// `D(y) = S(y) − S(−y) − 2T(y) + 2T(−y)`, a sine series whose spherical average
/// against `n` reduces to `ψ₁`.
pub fn shell_weights(u: &SpectralField, g: &SpectralField) -> Result<ShellWeights> {
    if u.kind() != FieldKind::Velocity || g.kind() != FieldKind::Scalar {
        return Err(Error::KindMismatch("expected a velocity and a scalar"));
    }
    if u.dim() != g.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            got: g.dim(),
        });
    }
    let dim = u.dim();
    let gh: Amps = g.to_complex().into_iter().map(|(k, c)| (k.raw(), c[0])).collect();
    let uh: VAmps = u.to_complex().into_iter().map(|(k, c)| (k.raw(), c)).collect();
    let zero = Complex64::default();

    let mut shells: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for (k, c) in &gh {
        let k2 = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as i64;
        shells.entry(k2).or_default().0 += SCALAR_NORM * c.norm_sqr();
    }

    // V_k = conj(ĝ²_k) û_k − 2 conj(ĝ_k) (ĝu)_k; flux weight −2 Im(V_k·k̂)
    let mut push_flux = |k: [i32; 3], v: [Complex64; 3]| {
        let k2 = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as i64;
        let kn = (k2 as f64).sqrt();
        let dot = (v[0] * k[0] as f64 + v[1] * k[1] as f64 + v[2] * k[2] as f64) / kn;
        shells.entry(k2).or_default().1 += SCALAR_NORM * (-2.0 * dot.im);
    };
    for (p, up) in &uh {
        let mut g2 = zero;
        for (q, gq) in &gh {
            if let Some(gr) = gh.get(&sub(*p, *q)) {
                g2 += gq * gr;
            }
        }
        let c = g2.conj();
        push_flux(*p, [c * up[0], c * up[1], c * up[2]]);
    }
    for (k, gk) in &gh {
        let mut gu = [zero; 3];
        for (p, up) in &uh {
            if let Some(gq) = gh.get(&sub(*k, *p)) {
                for i in 0..3 {
                    gu[i] += up[i] * gq;
                }
            }
        }
        let c = -2.0 * gk.conj();
        push_flux(*k, [c * gu[0], c * gu[1], c * gu[2]]);
    }
    let (k2, (power, flux)): (Vec<i64>, (Vec<f64>, Vec<f64>)) =
        shells.into_iter().map(|(k, (p, f))| (k, (p, f))).unzip();
    Ok(ShellWeights { dim, k2, power, flux })
}

/// `𝔞̄(ℓ) = ½ Σ q̃_k² ψ₀(|k|ℓ)`.
pub fn a_bar(dim: usize, source: &ScalarForcing, ell: f64) -> f64 {
    source
        .modes
        .iter()
        .zip(&source.q)
        .map(|(k, q)| 0.5 * q * q * psi0(dim, k.norm() * ell))
        .sum()
}

/// `−4 ℓ^{1−d} ∫₀^ℓ s^{d−1} 𝔞̄(s) ds = −4 Σ ½q̃² ψ₁(|k|ℓ)/|k|`.
pub fn source_flux(dim: usize, source: &ScalarForcing, ell: f64) -> f64 {
    source
        .modes
        .iter()
        .zip(&source.q)
        .map(|(k, q)| {
            let kn = k.norm();
            -4.0 * 0.5 * q * q * psi1(dim, kn * ell) / kn
        })
        .sum()
}

/// How increments are averaged over base points and directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Quadrature {
    /// Exact averages through the shell expansion.
    Spectral,
    /// Uniform random base points and a fixed direction set.
    MonteCarlo { n_dirs: usize, n_base: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureFunctionTable {
    pub dim: usize,
    pub ell: Vec<f64>,
    pub d_bar: Vec<f64>,
    pub d_bar_se: Vec<f64>,
    pub g_bar: Vec<f64>,
    pub g_bar_se: Vec<f64>,
    /// `∂_ℓ 𝔊̄`; present for spectral tables.
    pub g_bar_prime: Option<Vec<f64>>,
    pub a_bar: Vec<f64>,
    pub eps_bar: f64,
    pub n_snapshots: usize,
}

/// Standard errors from up to 20 consecutive batches of per-snapshot values.
fn column_estimates(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let m = rows[0].len();
    let nb = n.clamp(1, 20);
    let len = n / nb;
    (0..m)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let batches: Vec<f64> = (0..nb).map(|b| mean(&col[b * len..(b + 1) * len])).collect();
            let se = if nb > 1 { std_error(&batches) } else { f64::NAN };
            (mean(&col), se)
        })
        .unzip()
}

/// Directions on `S^{d−1}`: equispaced in 2D, a Fibonacci set in 3D.
pub fn sphere_directions(dim: usize, n: usize) -> Vec<[f64; 3]> {
    let pi = std::f64::consts::PI;
    (0..n)
        .map(|j| {
            if dim == 2 {
                let th = 2.0 * pi * j as f64 / n as f64;
                [th.cos(), th.sin(), 0.0]
            } else {
                let z = 1.0 - (2.0 * j as f64 + 1.0) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = j as f64 * pi * (3.0 - 5f64.sqrt());
                [r * phi.cos(), r * phi.sin(), z]
            }
        })
        .collect()
}

fn mc_rows(
    u: &SpectralField,
    g: &SpectralField,
    ell: &[f64],
    dirs: &[[f64; 3]],
    n_base: usize,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    let dim = u.dim();
    let ev = FieldEvaluator::new(u);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut d = vec![0.0; ell.len()];
    let mut gg = vec![0.0; ell.len()];
    for _ in 0..n_base {
        let mut x = [0.0; 3];
        for c in x.iter_mut().take(dim) {
            *c = rng.gen_range(0.0..two_pi);
        }
        let g0 = g.eval_scalar(&x[..dim]);
        let u0 = ev.velocity(&x);
        for (j, &l) in ell.iter().enumerate() {
            for n in dirs {
                let mut y = x;
                for i in 0..dim {
                    y[i] += l * n[i];
                }
                let g1 = g.eval_scalar(&y[..dim]);
                let u1 = ev.velocity(&y);
                let du: f64 = (0..dim).map(|i| (u1[i] - u0[i]) * n[i]).sum();
                d[j] += SCALAR_NORM * (g1 - g0).powi(2) * du;
                gg[j] += SCALAR_NORM * g0 * g1;
            }
        }
    }
    let w = 1.0 / (n_base * dirs.len()) as f64;
    d.iter_mut().for_each(|v| *v *= w);
    gg.iter_mut().for_each(|v| *v *= w);
    (d, gg)
}

/// Table of `D̄`, `𝔊̄`, `𝔞̄` on `ell` averaged over `snapshots`.
pub fn structure_functions(
    snapshots: &[Snapshot],
    source: &ScalarForcing,
    ell: &[f64],
    quadrature: &Quadrature,
) -> Result<StructureFunctionTable> {
    if snapshots.is_empty() {
        return Err(invalid("snapshots", "need at least one snapshot"));
    }
    let dim = snapshots[0].u.dim();
    let mut d_rows = Vec::with_capacity(snapshots.len());
    let mut g_rows = Vec::with_capacity(snapshots.len());
    let mut gp_rows = Vec::new();
    match quadrature {
        Quadrature::Spectral => {
            for s in snapshots {
                let w = shell_weights(&s.u, &s.g)?;
                d_rows.push(ell.iter().map(|l| w.d_bar(*l)).collect());
                g_rows.push(ell.iter().map(|l| w.g_bar(*l)).collect());
                gp_rows.push(ell.iter().map(|l| w.g_bar_prime(*l)).collect::<Vec<f64>>());
            }
        }
        Quadrature::MonteCarlo { n_dirs, n_base, seed } => {
            let dirs = sphere_directions(dim, *n_dirs);
            for (i, s) in snapshots.iter().enumerate() {
                let mut rng = aux_rng(*seed, i as u64, 11);
                let (d, g) = mc_rows(&s.u, &s.g, ell, &dirs, *n_base, &mut rng);
                d_rows.push(d);
                g_rows.push(g);
            }
        }
    }
    let (d_bar, d_bar_se) = column_estimates(&d_rows);
    let (g_bar, g_bar_se) = column_estimates(&g_rows);
    let g_bar_prime = (!gp_rows.is_empty()).then(|| column_estimates(&gp_rows).0);
    Ok(StructureFunctionTable {
        dim,
        ell: ell.to_vec(),
        d_bar,
        d_bar_se,
        g_bar,
        g_bar_se,
        g_bar_prime,
        a_bar: ell.iter().map(|l| a_bar(dim, source, *l)).collect(),
        eps_bar: source.eps_bar,
        n_snapshots: snapshots.len(),
    })
}

/// Log-spaced separations.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1).max(1) as f64).exp())
        .collect()
}

/// Radial bump `η(r) = (1 − (r/R)²)³` on `r < R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub radius: f64,
}

impl Bump {
    pub fn phi(&self, r: f64) -> f64 {
        let s = (r / self.radius).powi(2);
        if s >= 1.0 {
            0.0
        } else {
            (1.0 - s).powi(3)
        }
    }

    pub fn dphi(&self, r: f64) -> f64 {
        let r2 = self.radius * self.radius;
        let s = r * r / r2;
        if s >= 1.0 {
            0.0
        } else {
            -6.0 * r / r2 * (1.0 - s).powi(2)
        }
    }

    /// Radial Laplacian `φ'' + (d−1)φ'/r`.
    pub fn laplacian(&self, dim: usize, r: f64) -> f64 {
        let r2 = self.radius * self.radius;
        let s = r * r / r2;
        if s >= 1.0 {
            return 0.0;
        }
        let d2 = -6.0 / r2 * (1.0 - s).powi(2) + 24.0 * r * r / (r2 * r2) * (1.0 - s);
        let d1_over_r = -6.0 / r2 * (1.0 - s).powi(2);
        d2 + (dim as f64 - 1.0) * d1_over_r
    }
}

/// Composite Simpson rule on `[0, R]` with `n` (even) intervals.
fn simpson(r: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = n + n % 2;
    let h = r / n as f64;
    let mut s = f(0.0) + f(r);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    s * h / 3.0
}

/// Radial integrals of the bump against the shell kernels.
struct KhmKernels {
    flux: BTreeMap<i64, f64>,
    diff: BTreeMap<i64, f64>,
}

impl KhmKernels {
    fn new(dim: usize, bump: &Bump, shells: impl Iterator<Item = i64>, n_quad: usize) -> Self {
        let area = sphere_area(dim);
        let rpow = |r: f64| r.powi(dim as i32 - 1);
        let mut flux = BTreeMap::new();
        let mut diff = BTreeMap::new();
        for k2 in shells {
            if flux.contains_key(&k2) {
                continue;
            }
            let k = (k2 as f64).sqrt();
            let f = 0.5 * area * simpson(bump.radius, n_quad, |r| bump.dphi(r) * rpow(r) * psi1(dim, k * r));
            let d = area * simpson(bump.radius, n_quad, |r| bump.laplacian(dim, r) * rpow(r) * psi0(dim, k * r));
            flux.insert(k2, f);
            diff.insert(k2, d);
        }
        Self { flux, diff }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KhmReport {
    pub radius: f64,
    pub kappa: f64,
    /// `½∫∇η·𝔇`.
    pub flux_term: Estimate,
    /// `2κ∫Δη 𝔊`.
    pub diffusive_term: Estimate,
    /// `2∫η 𝔞`.
    pub source_term: f64,
    /// `(½∫∇η·𝔇 − 2κ∫Δη𝔊 − 2∫η𝔞) / 2∫η𝔞` with its standard error.
    pub residual: Estimate,
    pub n_snapshots: usize,
}

impl KhmReport {
    pub fn z(&self) -> f64 {
        (self.residual.mean / self.residual.stderr).abs()
    }
}

/// Per-snapshot radial integrals `(½∫∇η·𝔇, ∫Δη 𝔊)`.
pub fn khm_terms(weights: &[ShellWeights], bump: &Bump, n_quad: usize) -> Vec<(f64, f64)> {
    if weights.is_empty() {
        return vec![];
    }
    let dim = weights[0].dim;
    let ker = KhmKernels::new(dim, bump, weights.iter().flat_map(|w| w.k2.clone()), n_quad);
    weights
        .iter()
        .map(|w| {
            let f: f64 = w.k2.iter().zip(&w.flux).map(|(k, x)| x * ker.flux[k]).sum();
            let g: f64 = w.k2.iter().zip(&w.power).map(|(k, x)| x * ker.diff[k]).sum();
            (f, g)
        })
        .collect()
}

/// `2∫η𝔞`.
pub fn khm_source_term(dim: usize, source: &ScalarForcing, bump: &Bump, n_quad: usize) -> f64 {
    let area = sphere_area(dim);
    2.0 * area
        * simpson(bump.radius, n_quad, |r| {
            bump.phi(r) * r.powi(dim as i32 - 1) * a_bar(dim, source, r)
        })
}

/// Scalar KHM relation evaluated on stationary snapshots.
pub fn khm_residual(snapshots: &[Snapshot], source: &ScalarForcing, kappa: f64, bump: &Bump) -> Result<KhmReport> {
    if !(bump.radius > 0.0) || bump.radius > std::f64::consts::PI {
        return Err(Error::SupportTooLarge {
            radius: bump.radius,
            limit: std::f64::consts::PI,
        });
    }
    if snapshots.is_empty() {
        return Err(invalid("snapshots", "need at least one snapshot"));
    }
    let dim = snapshots[0].u.dim();
    let weights: Vec<ShellWeights> = snapshots
        .iter()
        .map(|s| shell_weights(&s.u, &s.g))
        .collect::<Result<_>>()?;
    let n_quad = 2000;
    let terms = khm_terms(&weights, bump, n_quad);
    let src = khm_source_term(dim, source, bump, n_quad);
    let flux: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let diff: Vec<f64> = terms.iter().map(|t| 2.0 * kappa * t.1).collect();
    let res: Vec<f64> = terms
        .iter()
        .map(|t| (t.0 - 2.0 * kappa * t.1 - src) / src)
        .collect();
    let batch = |xs: &[f64]| {
        let (m, se) = column_estimates(&xs.iter().map(|x| vec![*x]).collect::<Vec<_>>());
        Estimate::new(m[0], se[0])
    };
    Ok(KhmReport {
        radius: bump.radius,
        kappa,
        flux_term: batch(&flux),
        diffusive_term: batch(&diff),
        source_term: src,
        residual: batch(&res),
        n_snapshots: snapshots.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YaglomReport {
    pub ell: Vec<f64>,
    /// `D̄(ℓ) / (ℓ ε̄)`.
    pub compensated: Vec<f64>,
    pub compensated_se: Vec<f64>,
    /// Plateau value the check is made against.
    pub target: f64,
    pub tolerance: f64,
    /// `−4κ ∂_ℓ𝔊̄ / (ℓ ε̄)`, the diffusive part of the integrated ODE.
    pub kappa_term: Vec<f64>,
    /// `−4 ℓ^{1−d}∫₀^ℓ s^{d−1}𝔞̄ / (ℓ ε̄)`.
    pub source_term: Vec<f64>,
    /// Smallest ℓ beyond which the diffusive part stays below 10% of the source part.
    pub ell_d: Option<f64>,
    pub ell_i: f64,
    /// Longest run of consecutive grid points within tolerance of the target.
    pub plateau: Option<(f64, f64)>,
    pub plateau_decades: f64,
    /// `D̄ < 0` throughout `[ℓ_D, ℓ_I]`.
    pub sign_negative: bool,
    pub inertial_range_empty: bool,
}

impl YaglomReport {
    pub fn plateau_ok(&self, min_decades: f64) -> bool {
        self.plateau_decades >= min_decades
    }
}

/// Compensated flux against `target` (for example `−4/3`).
pub fn yaglom_check(
    table: &StructureFunctionTable,
    source: &ScalarForcing,
    kappa: f64,
    ell_i: f64,
    target: f64,
    tolerance: f64,
) -> Result<YaglomReport> {
    let gp = table
        .g_bar_prime
        .as_ref()
        .ok_or_else(|| invalid("table", "needs a spectral table for ∂_ℓ𝔊̄"))?;
    let eps = table.eps_bar;
    let ell = &table.ell;
    let compensated: Vec<f64> = ell.iter().zip(&table.d_bar).map(|(l, d)| d / (l * eps)).collect();
    let compensated_se: Vec<f64> = ell
        .iter()
        .zip(&table.d_bar_se)
        .map(|(l, s)| s / (l * eps))
        .collect();
    let kappa_term: Vec<f64> = ell.iter().zip(gp).map(|(l, g)| -4.0 * kappa * g / (l * eps)).collect();
    let source_term: Vec<f64> = ell
        .iter()
        .map(|l| source_flux(table.dim, source, *l) / (l * eps))
        .collect();
    let within_i: Vec<usize> = (0..ell.len()).filter(|&j| ell[j] <= ell_i).collect();
    let mut ell_d = None;
    for &j in within_i.iter().rev() {
        if kappa_term[j].abs() <= 0.1 * source_term[j].abs() {
            ell_d = Some(ell[j]);
        } else {
            break;
        }
    }
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for j in 0..=ell.len() {
        let ok = j < ell.len() && (compensated[j] - target).abs() <= tolerance * target.abs();
        match (ok, start) {
            (true, None) => start = Some(j),
            (false, Some(s)) => {
                let span = ell[j - 1] / ell[s];
                if best.map_or(true, |(a, b)| span > ell[b] / ell[a]) {
                    best = Some((s, j - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    let plateau = best.map(|(a, b)| (ell[a], ell[b]));
    let plateau_decades = plateau.map_or(0.0, |(a, b)| (b / a).log10());
    let sign_negative = match ell_d {
        Some(ld) => ell
            .iter()
            .zip(&table.d_bar)
            .filter(|(l, _)| **l >= ld && **l <= ell_i)
            .all(|(_, d)| *d < 0.0),
        None => false,
    };
    Ok(YaglomReport {
        ell: ell.clone(),
        compensated,
        compensated_se,
        target,
        tolerance,
        kappa_term,
        source_term,
        inertial_range_empty: ell_d.is_none(),
        ell_d,
        ell_i,
        plateau,
        plateau_decades,
        sign_negative,
    })
}

/// The constant of the integrated ODE in dimension `d`: `−4/d`.
pub fn dimensional_constant(dim: usize) -> f64 {
    -4.0 / dim as f64
}

/// Grid and tolerances for a Yaglom analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YaglomSettings {
    #[serde(default = "default_ell_lo")]
    pub ell_lo: f64,
    #[serde(default = "default_ell_hi")]
    pub ell_hi: f64,
    #[serde(default = "default_n_ell")]
    pub n_ell: usize,
    /// Upper end `ℓ_I` of the inertial range.
    #[serde(default = "default_ell_hi")]
    pub ell_i: f64,
    #[serde(default = "default_target")]
    pub target: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_min_decades")]
    pub min_decades: f64,
    /// Support radius of the KHM test function; at most `π`.
    #[serde(default = "default_khm_radius")]
    pub khm_radius: f64,
    #[serde(default = "default_quadrature")]
    pub quadrature: Quadrature,
}

fn default_ell_lo() -> f64 {
    0.02
}
fn default_ell_hi() -> f64 {
    3.0
}
fn default_n_ell() -> usize {
    80
}
fn default_target() -> f64 {
    -4.0 / 3.0
}
fn default_tolerance() -> f64 {
    0.25
}
fn default_min_decades() -> f64 {
    0.5
}
fn default_khm_radius() -> f64 {
    1.0
}
fn default_quadrature() -> Quadrature {
    Quadrature::Spectral
}

impl Default for YaglomSettings {
    fn default() -> Self {
        Self {
            ell_lo: default_ell_lo(),
            ell_hi: default_ell_hi(),
            n_ell: default_n_ell(),
            ell_i: default_ell_hi(),
            target: default_target(),
            tolerance: default_tolerance(),
            min_decades: default_min_decades(),
            khm_radius: default_khm_radius(),
            quadrature: default_quadrature(),
        }
    }
}

impl YaglomSettings {
    pub fn grid(&self) -> Result<Vec<f64>> {
        if !(self.ell_lo > 0.0 && self.ell_hi > self.ell_lo) || self.n_ell < 2 {
            return Err(invalid("ell", "need 0 < ell_lo < ell_hi and n_ell ≥ 2"));
        }
        Ok(log_grid(self.ell_lo, self.ell_hi, self.n_ell))
    }
}

/// Analysis of one stationary run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YaglomPoint {
    pub kappa: f64,
    pub table: StructureFunctionTable,
    pub check: YaglomReport,
    /// Same table read against `−4/d`.
    pub check_dimensional: YaglomReport,
    pub khm: KhmReport,
}

pub fn yaglom_point(snapshots: &[Snapshot], source: &ScalarForcing, kappa: f64, settings: &YaglomSettings) -> Result<YaglomPoint> {
    let ell = settings.grid()?;
    let table = structure_functions(snapshots, source, &ell, &settings.quadrature)?;
    // the ODE terms need ∂_ℓ𝔊̄, which only the spectral path provides
    let mut merged = table.clone();
    if merged.g_bar_prime.is_none() {
        merged.g_bar_prime = structure_functions(snapshots, source, &ell, &Quadrature::Spectral)?.g_bar_prime;
    }
    let check = yaglom_check(&merged, source, kappa, settings.ell_i, settings.target, settings.tolerance)?;
    let check_dimensional = yaglom_check(
        &merged,
        source,
        kappa,
        settings.ell_i,
        dimensional_constant(merged.dim),
        settings.tolerance,
    )?;
    let khm = khm_residual(snapshots, source, kappa, &Bump { radius: settings.khm_radius })?;
    Ok(YaglomPoint {
        kappa,
        table,
        check,
        check_dimensional,
        khm,
    })
}

/// Trend of the Yaglom statistics across a κ-sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YaglomTrend {
    /// Ordered by decreasing κ.
    pub points: Vec<YaglomPoint>,
    pub ell_d: Vec<Option<f64>>,
    /// `ℓ_D` strictly decreases as κ decreases; an empty inertial range counts as `ℓ_D = ∞`.
    pub ell_d_decreasing: bool,
    /// `D̄ < 0` on `[ℓ_D, ℓ_I]` at the smallest κ.
    pub sign_negative: bool,
    pub khm_max_z: f64,
    /// Every KHM residual within three standard errors of zero.
    pub khm_consistent: bool,
    /// Plateau against the configured target at the smallest κ.
    pub plateau_decades: f64,
    pub plateau_ok: bool,
    /// Plateau against `−4/d` at the smallest κ.
    pub dimensional_plateau_decades: f64,
    /// The plateau criterion failed at this resolution.
    pub resolution_limited: bool,
}

pub fn yaglom_trend(runs: &[(f64, &[Snapshot])], source: &ScalarForcing, settings: &YaglomSettings) -> Result<YaglomTrend> {
    if runs.is_empty() {
        return Err(invalid("runs", "need at least one κ"));
    }
    let mut order: Vec<&(f64, &[Snapshot])> = runs.iter().collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let points: Vec<YaglomPoint> = order
        .iter()
        .map(|(kappa, snaps)| yaglom_point(snaps, source, *kappa, settings))
        .collect::<Result<_>>()?;
    let ell_d: Vec<Option<f64>> = points.iter().map(|p| p.check.ell_d).collect();
    let as_len = |x: &Option<f64>| x.unwrap_or(f64::INFINITY);
    let ell_d_decreasing = ell_d.windows(2).all(|w| as_len(&w[1]) < as_len(&w[0]));
    let last = points.last().expect("nonempty");
    let khm_max_z = points.iter().map(|p| p.khm.z()).fold(0.0, f64::max);
    let plateau_ok = last.check.plateau_ok(settings.min_decades);
    Ok(YaglomTrend {
        ell_d,
        ell_d_decreasing,
        sign_negative: last.check.sign_negative,
        khm_max_z,
        khm_consistent: khm_max_z < 3.0,
        plateau_decades: last.check.plateau_decades,
        plateau_ok,
        dimensional_plateau_decades: last.check_dimensional.plateau_decades,
        resolution_limited: !plateau_ok,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forcing::{build_scalar_forcing, ForcingSpec};
    use crate::spectral::{k, velocity_from_terms};

    fn snap(u: SpectralField, g: SpectralField) -> Snapshot {
        Snapshot { t: 0.0, trajectory: 0, u, g }
    }

    fn sin_x1() -> SpectralField {
        let mut g = SpectralField::zeros_on(2, FieldKind::Scalar, &[k(&[1, 0])]).unwrap();
        g.set(&k(&[1, 0]), 0, 1.0).unwrap();
        g
    }

    /// Tensor-product quadrature of `2 ⨍⨍ |δg|² δu·n` for the shear pair.
    fn quadrature_oracle(u: &SpectralField, g: &SpectralField, l: f64) -> f64 {
        let m = 64;
        let h = 2.0 * std::f64::consts::PI / m as f64;
        let ev = FieldEvaluator::new(u);
        let mut s = 0.0;
        for a in 0..m {
            for b in 0..m {
                let x = [a as f64 * h, b as f64 * h, 0.0];
                for d in 0..64 {
                    let th = 2.0 * std::f64::consts::PI * d as f64 / 64.0;
                    let n = [th.cos(), th.sin()];
                    let y = [x[0] + l * n[0], x[1] + l * n[1], 0.0];
                    let dg = g.eval_scalar(&y[..2]) - g.eval_scalar(&x[..2]);
                    let u0 = ev.velocity(&x);
                    let u1 = ev.velocity(&y);
                    s += SCALAR_NORM * dg * dg * ((u1[0] - u0[0]) * n[0] + (u1[1] - u0[1]) * n[1]);
                }
            }
        }
        s / (m * m * 64) as f64
    }

    #[test]
    fn bessel_kernels() {
        assert!((psi0(2, 0.0) - 1.0).abs() < 1e-12);
        assert!((psi0(2, 2.404_825_557_695_773)).abs() < 1e-7);
        assert!((psi1(3, 1e-4) - 1e-4 / 3.0).abs() < 1e-12);
        // ψ₀' = −ψ₁
        for d in [2, 3] {
            let z = 1.7;
            let h = 1e-5;
            let der = (psi0(d, z + h) - psi0(d, z - h)) / (2.0 * h);
            assert!((der + psi1(d, z)).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_scalar_has_no_flux() {
        let u = velocity_from_terms(2, &[(k(&[0, 1]), 0, 1.0)]).unwrap();
        let g = SpectralField::zeros_on(2, FieldKind::Scalar, &[k(&[1, 0])]).unwrap();
        let w = shell_weights(&u, &g).unwrap();
        assert!(w.flux.iter().all(|f| *f == 0.0));
    }

    #[test]
    fn spectral_flux_matches_quadrature() {
        // u = (sin x₂, 0) is γ_(0,1) with the minus sign of the frame
        let u = velocity_from_terms(2, &[(k(&[0, 1]), 0, -1.0), (k(&[1, 1]), 0, 0.4)]).unwrap();
        let mut g = sin_x1();
        g = g.remap(vec![k(&[1, 0]), k(&[-1, 0]), k(&[0, 1]), k(&[0, -1])]).unwrap();
        g.set(&k(&[0, -1]), 0, 0.5).unwrap();
        let w = shell_weights(&u, &g).unwrap();
        for l in [0.3, 0.9, 1.7] {
            let ora = quadrature_oracle(&u, &g, l);
            let ours = w.d_bar(l);
            assert!((ours - ora).abs() < 1e-3 * ora.abs().max(1e-2), "{l}: {ours} vs {ora}");
        }
        let table = structure_functions(
            &[snap(u.clone(), g.clone())],
            &build_scalar_forcing(&ForcingSpec::from_table(2, &[(k(&[1, 0]), 1.0)])).unwrap(),
            &[0.9],
            &Quadrature::MonteCarlo {
                n_dirs: 64,
                n_base: 4000,
                seed: 1,
            },
        )
        .unwrap();
        let ora = quadrature_oracle(&u, &g, 0.9);
        assert!((table.d_bar[0] - ora).abs() < 0.05 * ora.abs().max(0.1), "{} {}", table.d_bar[0], ora);
    }

    #[test]
    fn correlation_at_zero() {
        let mut g = sin_x1();
        g.scale(3.0);
        let u = velocity_from_terms(2, &[(k(&[0, 1]), 0, 1.0)]).unwrap();
        let w = shell_weights(&u, &g).unwrap();
        assert!((w.g_bar(0.0) - g.coeff_norm_sq()).abs() < 1e-12);
        let src = build_scalar_forcing(&ForcingSpec::from_table(2, &[(k(&[1, 2]), 0.8), (k(&[-1, 0]), 0.3)])).unwrap();
        assert!((a_bar(2, &src, 0.0) - src.eps_bar).abs() < 1e-15);
        // single mode: 𝔞̄(ℓ) = ε̄ J₀(|k|ℓ)
        let one = build_scalar_forcing(&ForcingSpec::from_table(2, &[(k(&[1, 2]), 0.8)])).unwrap();
        let l = 0.7;
        let n = 4096;
        let avg: f64 = (0..n)
            .map(|j| {
                let th = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                (l * (th.cos() + 2.0 * th.sin())).cos()
            })
            .sum::<f64>()
            / n as f64;
        assert!((a_bar(2, &one, l) - one.eps_bar * avg).abs() < 1e-7);
    }

    #[test]
    fn khm_linear_in_kappa() {
        let u = velocity_from_terms(2, &[(k(&[0, 1]), 0, -1.0)]).unwrap();
        let g = sin_x1();
        let src = build_scalar_forcing(&ForcingSpec::from_table(2, &[(k(&[1, 0]), 1.0)])).unwrap();
        let b = Bump { radius: 1.5 };
        let s = [snap(u, g)];
        let r1 = khm_residual(&s, &src, 0.1, &b).unwrap();
        let r2 = khm_residual(&s, &src, 0.2, &b).unwrap();
        let r3 = khm_residual(&s, &src, 0.4, &b).unwrap();
        let d1 = r2.residual.mean - r1.residual.mean;
        let d2 = r3.residual.mean - r2.residual.mean;
        assert!((d2 - 2.0 * d1).abs() < 1e-10 * d1.abs().max(1.0));
        assert!(khm_residual(&s, &src, 0.1, &Bump { radius: 4.0 }).is_err());
    }

    #[test]
    fn ou_diffusive_balance_closes_khm() {
        // stationary u = 0 statistics: 𝔊 per mode = 𝔞 / (κ|k|²) gives zero residual
        let kappa = 0.3;
        let src = build_scalar_forcing(&ForcingSpec::from_table(2, &[(k(&[1, 1]), 0.7), (k(&[-2, 1]), 0.4)])).unwrap();
        let mut g = SpectralField::zeros(2, FieldKind::Scalar, crate::spectral::linf_ball(2, 2).unwrap()).unwrap();
        for (m, q) in src.modes.iter().zip(&src.q) {
            g.set(m, 0, (q * q / (2.0 * kappa * m.norm_sq())).sqrt()).unwrap();
        }
        let u = SpectralField::zeros_on(2, FieldKind::Velocity, &[k(&[1, 0])]).unwrap();
        let r = khm_residual(&[snap(u, g)], &src, kappa, &Bump { radius: 2.0 }).unwrap();
        assert!(r.residual.mean.abs() < 1e-9, "{:?}", r.residual);
    }

    #[test]
    fn bump_derivatives() {
        let b = Bump { radius: 1.3 };
        let h = 1e-5;
        for r in [0.1, 0.5, 1.0] {
            let d1 = (b.phi(r + h) - b.phi(r - h)) / (2.0 * h);
            assert!((d1 - b.dphi(r)).abs() < 1e-8);
            let d2 = (b.phi(r + h) - 2.0 * b.phi(r) + b.phi(r - h)) / (h * h);
            assert!((d2 + d1 / r - b.laplacian(2, r)).abs() < 1e-4);
        }
    }
}
