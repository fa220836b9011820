//! Lie-bracket spanning checks for the projective, inverse-transpose and matrix processes.
//!
//! Every bracket is evaluated from its closed form: the Lagrangian vector fields are
//! linear in `u`, so `[e_kγ_k^i, V]` does not depend on `u`, and the Navier-Stokes
//! drift is quadratic, so brackets of constant directions with it reduce to the
//! symmetric bilinear form `B(a, b) + B(b, a)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forcing::aux_rng;
use crate::spectral::{basis_eval, bilinear, gamma_frame, linf_ball, symmetric_closure, FieldKind, SpectralField, Wavevector};

/// Relative singular-value threshold for numerical rank.
pub const RANK_TOL: f64 = 1e-8;
/// Minimum ratio across the rank cut for a conclusive verdict.
pub const GAP_RATIO: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// `(x, v)` on `T^d × S^{d−1}`.
    Projective,
    /// `(x, v̌)` on `T^d × S^{d−1}`.
    InverseTranspose,
    /// `(x, A)` on `T^d × SL_d`.
    Matrix,
}

impl Target {
    /// Dimension of the tangent space of the manifold factor.
    pub fn tangent_dim(self, dim: usize) -> usize {
        match self {
            Target::Projective | Target::InverseTranspose => 2 * dim - 1,
            Target::Matrix => dim + dim * dim - 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ManifoldPoint {
    Sphere { x: Vec<f64>, v: Vec<f64> },
    /// Row-major `d × d` matrix of unit determinant.
    Matrix { x: Vec<f64>, a: Vec<f64> },
}

impl ManifoldPoint {
    pub fn x(&self) -> &[f64] {
        match self {
            ManifoldPoint::Sphere { x, .. } | ManifoldPoint::Matrix { x, .. } => x,
        }
    }

    pub fn dim(&self) -> usize {
        self.x().len()
    }
}

/// A tangent vector at a point; the `A`-component is stored right-translated to the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketVector {
    pub x_part: Vec<f64>,
    /// `T_vS^{d−1} ⊂ R^d`, or `sl_d` row-major.
    pub manifold_part: Vec<f64>,
}

impl BracketVector {
    fn zeros(dim: usize, target: Target) -> Self {
        let m = if target == Target::Matrix { dim * dim } else { dim };
        Self {
            x_part: vec![0.0; dim],
            manifold_part: vec![0.0; m],
        }
    }

    fn axpy(&mut self, s: f64, o: &Self) {
        for (a, b) in self.x_part.iter_mut().zip(&o.x_part) {
            *a += s * b;
        }
        for (a, b) in self.manifold_part.iter_mut().zip(&o.manifold_part) {
            *a += s * b;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Π_v w = w − (v·w) v`.
fn project_out(v: &[f64], w: &[f64]) -> Vec<f64> {
    let s = dot(v, w);
    w.iter().zip(v).map(|(wi, vi)| wi - s * vi).collect()
}

/// `(e_k(x)γ_k^i, (k·v) e_{−k}(x) Π_v γ_k^i)`.
pub fn projective_bracket(k: &Wavevector, i: usize, x: &[f64], v: &[f64]) -> BracketVector {
    let d = k.dim();
    let frame = gamma_frame(k);
    let g = &frame.col(i)[..d];
    let kf_all = k.as_f64();
    let kf = &kf_all[..d];
    let (ek, emk) = (basis_eval(k, x), basis_eval(&k.neg(), x));
    let s = dot(kf, v) * emk;
    BracketVector {
        x_part: g.iter().map(|c| ek * c).collect(),
        manifold_part: project_out(v, g).into_iter().map(|c| s * c).collect(),
    }
}

/// `(e_k(x)γ_k^i, −(γ_k^i·v̌) e_{−k}(x) Π_v̌ k)`.
pub fn inverse_transpose_bracket(k: &Wavevector, i: usize, x: &[f64], v: &[f64]) -> BracketVector {
    let d = k.dim();
    let frame = gamma_frame(k);
    let g = &frame.col(i)[..d];
    let kf_all = k.as_f64();
    let kf = &kf_all[..d];
    let (ek, emk) = (basis_eval(k, x), basis_eval(&k.neg(), x));
    let s = -dot(g, v) * emk;
    BracketVector {
        x_part: g.iter().map(|c| ek * c).collect(),
        manifold_part: project_out(v, kf).into_iter().map(|c| s * c).collect(),
    }
}

/// `γ_k^i ⊗ k`, row-major.
pub fn gamma_outer_k(k: &Wavevector, i: usize) -> Vec<f64> {
    let d = k.dim();
    let frame = gamma_frame(k);
    let g = frame.col(i);
    let kf = k.as_f64();
    (0..d * d).map(|rc| g[rc / d] * kf[rc % d]).collect()
}

/// `(e_k(x)γ_k^i, e_{−k}(x)(γ_k^i⊗k))`; the matrix part is the right translate of the
/// value `e_{−k}(x)(γ_k^i⊗k)A` at `A`, hence independent of `A`.
pub fn matrix_bracket(k: &Wavevector, i: usize, x: &[f64]) -> BracketVector {
    let d = k.dim();
    let frame = gamma_frame(k);
    let g = &frame.col(i)[..d];
    let (ek, emk) = (basis_eval(k, x), basis_eval(&k.neg(), x));
    BracketVector {
        x_part: g.iter().map(|c| ek * c).collect(),
        manifold_part: gamma_outer_k(k, i).into_iter().map(|c| emk * c).collect(),
    }
}

/// Untranslated matrix component `e_{−k}(x)(γ_k^i⊗k)A` in `T_A SL_d`.
pub fn matrix_bracket_value(k: &Wavevector, i: usize, x: &[f64], a: &[f64]) -> Vec<f64> {
    let d = k.dim();
    let m = DMatrix::from_row_slice(d, d, &matrix_bracket(k, i, x).manifold_part);
    let am = DMatrix::from_row_slice(d, d, a);
    let p = m * am;
    (0..d * d).map(|rc| p[(rc / d, rc % d)]).collect()
}

/// Bracket of the noise direction `e_kγ_k^i` with the Lagrangian field of `target` at `p`.
pub fn bracket(target: Target, k: &Wavevector, i: usize, p: &ManifoldPoint) -> Result<BracketVector> {
    match (target, p) {
        (Target::Projective, ManifoldPoint::Sphere { x, v }) => Ok(projective_bracket(k, i, x, v)),
        (Target::InverseTranspose, ManifoldPoint::Sphere { x, v }) => Ok(inverse_transpose_bracket(k, i, x, v)),
        (Target::Matrix, ManifoldPoint::Matrix { x, .. }) => Ok(matrix_bracket(k, i, x)),
        _ => Err(invalid("point", "point type does not match the target")),
    }
}

/// Lagrangian field of `target` for velocity `u`, i.e. `Σ u_k^i [e_kγ_k^i, V]`.
pub fn lagrangian_field(target: Target, u: &SpectralField, p: &ManifoldPoint) -> Result<BracketVector> {
    let nc = u.ncomp();
    let mut out = BracketVector::zeros(u.dim(), target);
    for (m, k) in u.modes().iter().enumerate() {
        for i in 0..nc {
            let c = u.coeffs()[m * nc + i];
            if c != 0.0 {
                out.axpy(c, &bracket(target, k, i, p)?);
            }
        }
    }
    Ok(out)
}

/// Orthonormal basis of `T_vS^{d−1}` as rows.
fn sphere_tangent_basis(v: &[f64]) -> Vec<Vec<f64>> {
    if v.len() == 2 {
        return vec![vec![-v[1], v[0]]];
    }
    let j = (0..3)
        .min_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
        .unwrap();
    let mut a = vec![0.0; 3];
    a[j] = 1.0;
    let b1 = project_out(v, &a);
    let n = dot(&b1, &b1).sqrt();
    let b1: Vec<f64> = b1.iter().map(|c| c / n).collect();
    let b2 = vec![
        v[1] * b1[2] - v[2] * b1[1],
        v[2] * b1[0] - v[0] * b1[2],
        v[0] * b1[1] - v[1] * b1[0],
    ];
    vec![b1, b2]
}

/// Orthonormal basis of trace-free `d × d` matrices, row-major.
pub fn sl_basis(d: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(d * d - 1);
    for r in 0..d {
        for c in 0..d {
            if r != c {
                let mut m = vec![0.0; d * d];
                m[r * d + c] = 1.0;
                out.push(m);
            }
        }
    }
    for j in 1..d {
        let mut m = vec![0.0; d * d];
        let n = ((j * (j + 1)) as f64).sqrt();
        for l in 0..j {
            m[l * d + l] = 1.0 / n;
        }
        m[j * d + j] = -(j as f64) / n;
        out.push(m);
    }
    out
}

/// Rows of an orthonormal basis of the manifold tangent space, in ambient coordinates.
fn manifold_basis(target: Target, p: &ManifoldPoint) -> Vec<Vec<f64>> {
    match (target, p) {
        (Target::Matrix, _) => sl_basis(p.dim()),
        (_, ManifoldPoint::Sphere { v, .. }) => sphere_tangent_basis(v),
        _ => unreachable!("checked by bracket"),
    }
}

/// Intrinsic coordinates of `b` in `T_x T^d × T_p M`.
pub fn tangent_coords(target: Target, p: &ManifoldPoint, b: &BracketVector) -> Vec<f64> {
    let mut out = b.x_part.clone();
    out.extend(manifold_basis(target, p).iter().map(|e| dot(e, &b.manifold_part)));
    out
}

fn ambient_from_coords(target: Target, p: &ManifoldPoint, c: &[f64]) -> Vec<f64> {
    let d = p.dim();
    let mut out = c[..d].to_vec();
    let basis = manifold_basis(target, p);
    let mut m = vec![0.0; basis[0].len()];
    for (e, s) in basis.iter().zip(&c[d..]) {
        for (mi, ei) in m.iter_mut().zip(e) {
            *mi += s * ei;
        }
    }
    out.extend(m);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankStatus {
    Full,
    Deficient,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub rank: usize,
    pub full: usize,
    pub singular_values: Vec<f64>,
    pub status: RankStatus,
    /// Orthonormal basis (in the coordinates handed in) of the orthogonal complement of the span.
    pub null_directions: Vec<Vec<f64>>,
}

/// Numerical rank of the span of `vectors` (all of length `full`).
pub fn numerical_rank(vectors: &[Vec<f64>], full: usize) -> RankResult {
    let m = vectors.len().max(full);
    let mut mat = DMatrix::<f64>::zeros(full, m);
    for (j, v) in vectors.iter().enumerate() {
        for (i, x) in v.iter().enumerate() {
            mat[(i, j)] = *x;
        }
    }
    let svd = mat.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..full).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let sv: Vec<f64> = order.iter().map(|&j| svd.singular_values[j]).collect();
    let smax = sv.first().copied().unwrap_or(0.0);
    let thr = RANK_TOL * smax;
    let rank = if smax == 0.0 { 0 } else { sv.iter().filter(|s| **s > thr).count() };
    let status = if rank == full {
        if sv[full - 1] >= GAP_RATIO * thr {
            RankStatus::Full
        } else {
            RankStatus::Inconclusive
        }
    } else {
        let above = if rank == 0 { f64::INFINITY } else { sv[rank - 1] };
        let below = sv[rank];
        if below == 0.0 || above / below >= GAP_RATIO {
            RankStatus::Deficient
        } else {
            RankStatus::Inconclusive
        }
    };
    let null_directions = order[rank..]
        .iter()
        .map(|&j| u.column(j).iter().copied().collect())
        .collect();
    RankResult {
        rank,
        full,
        singular_values: sv,
        status,
        null_directions,
    }
}

/// Bracket vectors at `p` for the mode set `modes`, plus the `e_k`/`e_{−k}` recombinations.
pub fn spanning_vectors(target: Target, modes: &[Wavevector], p: &ManifoldPoint) -> Result<Vec<BracketVector>> {
    let d = p.dim();
    let mut out = Vec::new();
    for k in modes {
        for i in 0..d - 1 {
            out.push(bracket(target, k, i, p)?);
        }
    }
    for k in modes.iter().filter(|k| k.is_positive() && modes.contains(&k.neg())) {
        let (ek, emk) = (basis_eval(k, p.x()), basis_eval(&k.neg(), p.x()));
        for i in 0..d - 1 {
            let a = bracket(target, k, i, p)?;
            let b = bracket(target, &k.neg(), i, p)?;
            let mut s = BracketVector::zeros(d, target);
            s.axpy(ek, &a);
            s.axpy(-emk, &b);
            out.push(s);
            let mut t = BracketVector::zeros(d, target);
            t.axpy(emk, &a);
            t.axpy(ek, &b);
            out.push(t);
        }
    }
    Ok(out)
}

/// Uniform random points: `x` on the torus, `v` on the sphere, `A` a Gaussian matrix scaled to `det = 1`.
pub fn sample_points(target: Target, dim: usize, n: usize, seed: u64) -> Result<Vec<ManifoldPoint>> {
    if !(2..=3).contains(&dim) {
        return Err(Error::InvalidDimension(dim));
    }
    let mut rng = aux_rng(seed, 0, 21);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..two_pi)).collect();
        let p = match target {
            Target::Matrix => {
                let mut a: Vec<f64> = (0..dim * dim).map(|_| rng.sample(StandardNormal)).collect();
                let mut det = DMatrix::from_row_slice(dim, dim, &a).determinant();
                if det < 0.0 {
                    a[..dim].iter_mut().for_each(|c| *c = -*c);
                    det = -det;
                }
                let s = det.powf(-1.0 / dim as f64);
                ManifoldPoint::Matrix {
                    x,
                    a: a.into_iter().map(|c| c * s).collect(),
                }
            }
            _ => {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = dot(&v, &v).sqrt();
                ManifoldPoint::Sphere {
                    x,
                    v: v.into_iter().map(|c| c / n).collect(),
                }
            }
        };
        pts.push(p);
    }
    Ok(pts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// A sample that did not reach full rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankFailure {
    pub point: ManifoldPoint,
    pub rank: usize,
    pub status: RankStatus,
    /// Unit vectors `(x-part, manifold-part)` orthogonal to every bracket at the point.
    pub null_directions: Vec<BracketVector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub target: Target,
    pub dim: usize,
    pub modes: Vec<Vec<i32>>,
    pub tangent_dim: usize,
    pub n_samples: usize,
    pub min_rank: usize,
    pub max_rank: usize,
    pub verdict: Verdict,
    pub failures: Vec<RankFailure>,
}

/// Rank of the brackets of `modes` with the Lagrangian field at every point.
pub fn spanning_rank(modes: &[Wavevector], points: &[ManifoldPoint], target: Target) -> Result<RankReport> {
    let dim = modes.first().ok_or(Error::EmptyModeSet)?.dim();
    if modes.iter().any(|k| !modes.contains(&k.neg())) {
        return Err(invalid("modes", "mode set must be closed under k -> -k"));
    }
    let full = target.tangent_dim(dim);
    let mut report = RankReport {
        target,
        dim,
        modes: modes.iter().map(|k| k.comps().to_vec()).collect(),
        tangent_dim: full,
        n_samples: points.len(),
        min_rank: usize::MAX,
        max_rank: 0,
        verdict: Verdict::Pass,
        failures: vec![],
    };
    for p in points {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
        let vecs: Vec<Vec<f64>> = spanning_vectors(target, modes, p)?
            .iter()
            .map(|b| tangent_coords(target, p, b))
            .collect();
        let r = numerical_rank(&vecs, full);
        report.min_rank = report.min_rank.min(r.rank);
        report.max_rank = report.max_rank.max(r.rank);
        match r.status {
            RankStatus::Full => {}
            RankStatus::Deficient => report.verdict = Verdict::Fail,
            RankStatus::Inconclusive => {
                if report.verdict == Verdict::Pass {
                    report.verdict = Verdict::Inconclusive;
                }
            }
        }
        if r.status != RankStatus::Full {
            let null_directions = r
                .null_directions
                .iter()
                .map(|c| {
                    let amb = ambient_from_coords(target, p, c);
                    BracketVector {
                        x_part: amb[..dim].to_vec(),
                        manifold_part: amb[dim..].to_vec(),
                    }
                })
                .collect();
            report.failures.push(RankFailure {
                point: p.clone(),
                rank: r.rank,
                status: r.status,
                null_directions,
            });
        }
    }
    if points.is_empty() {
        report.min_rank = 0;
    }
    Ok(report)
}

/// Mode set `{±k}` used for the projective spanning lemma: the coordinate vectors.
pub fn coordinate_modes(dim: usize) -> Vec<Wavevector> {
    let gens: Vec<Wavevector> = (0..dim)
        .map(|j| {
            let mut c = vec![0; dim];
            c[j] = 1;
            Wavevector::new(&c).expect("unit vector")
        })
        .collect();
    symmetric_closure(&gens)
}

/// Mode set for the matrix spanning lemma: coordinate vectors plus the all-ones vector.
pub fn matrix_modes(dim: usize) -> Vec<Wavevector> {
    let mut gens = coordinate_modes(dim);
    gens.push(Wavevector::new(&vec![1; dim]).expect("ones"));
    symmetric_closure(&gens)
}

/// Linear part and nonlinearity of the fluid drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    /// `−ν|k|²u` on the forced modes.
    Stokes { nu: f64 },
    /// `−Π_N B(u, u) − (ν|k|² + η|k|⁴)u` on `|k|_inf ≤ N`.
    Galerkin { nu: f64, eta: f64, cutoff: i32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureConfig {
    pub dim: usize,
    /// Forced modes; closed under negation.
    pub forced: Vec<Wavevector>,
    pub drift: DriftSpec,
    pub target: Target,
    /// Maximum number of drift insertions.
    pub depth: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureLevel {
    pub depth: usize,
    /// Dimension of the constant directions reached in `u`-space.
    pub constant_rank: usize,
    /// `dim H − constant_rank`.
    pub fluid_deficit: usize,
    /// Smallest full-state rank over the samples.
    pub rank: usize,
    pub inconclusive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureReport {
    pub fluid_dim: usize,
    pub state_dim: usize,
    pub levels: Vec<ClosureLevel>,
    pub verdict: Verdict,
    /// `state_dim − rank` at the deepest level computed.
    pub residual_codim: usize,
}

/// Modified Gram-Schmidt; returns whether `v` enlarged the basis.
fn push_independent(basis: &mut Vec<DVector<f64>>, mut v: DVector<f64>) -> bool {
    let n0 = v.norm();
    if n0 == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for b in basis.iter() {
            let c = b.dot(&v);
            v.axpy(-c, b, 1.0);
        }
    }
    let n = v.norm();
    if n > 1e-9 * n0 {
        basis.push(v / n);
        true
    } else {
        false
    }
}

struct FluidSpace {
    dim: usize,
    modes: Vec<Wavevector>,
    nc: usize,
    drift: DriftSpec,
}

impl FluidSpace {
    fn len(&self) -> usize {
        self.modes.len() * self.nc
    }

    fn field(&self, c: &DVector<f64>) -> SpectralField {
        SpectralField::from_coeffs(self.dim, FieldKind::Velocity, self.modes.clone(), c.as_slice().to_vec())
            .expect("layout matches")
    }

    fn vector(&self, f: &SpectralField) -> DVector<f64> {
        DVector::from_column_slice(f.coeffs())
    }

    fn sym_b(&self, a: &DVector<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
        let (fa, fb) = (self.field(a), self.field(b));
        let ab = bilinear(&fa, &fb, &self.modes)?;
        let ba = bilinear(&fb, &fa, &self.modes)?;
        Ok(self.vector(&ab) + self.vector(&ba))
    }

    fn linear_rate(&self, m: usize) -> f64 {
        let k2 = self.modes[m].norm_sq();
        match self.drift {
            DriftSpec::Stokes { nu } => nu * k2,
            DriftSpec::Galerkin { nu, eta, .. } => nu * k2 + eta * k2 * k2,
        }
    }

    /// `DU(u) c`.
    fn drift_derivative(&self, u: &DVector<f64>, c: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::from_fn(self.len(), |j, _| -self.linear_rate(j / self.nc) * c[j]);
        if matches!(self.drift, DriftSpec::Galerkin { .. }) {
            out -= self.sym_b(u, c)?;
        }
        Ok(out)
    }
}

/// Rank growth of the brackets generated by the forced directions and the drift.
///
/// Depth counts drift insertions: depth `n` contains the constant directions obtained
/// from `n` nested applications of `(a, b) ↦ B(a, b) + B(b, a)` and the brackets of
/// the constant directions of depth `n − 1` with the drift.
pub fn hormander_closure(cfg: &ClosureConfig) -> Result<ClosureReport> {
    let dim = cfg.dim;
    if !(2..=3).contains(&dim) {
        return Err(Error::InvalidDimension(dim));
    }
    if cfg.forced.is_empty() {
        return Err(Error::EmptyModeSet);
    }
    if cfg.forced.iter().any(|k| !cfg.forced.contains(&k.neg())) {
        return Err(invalid("forced", "mode set must be closed under k -> -k"));
    }
    let modes = match cfg.drift {
        DriftSpec::Stokes { .. } => symmetric_closure(&cfg.forced),
        DriftSpec::Galerkin { cutoff, .. } => {
            if cfg.forced.iter().any(|k| k.norm_linf() > cutoff) {
                return Err(invalid("forced", "forced modes exceed the truncation"));
            }
            linf_ball(dim, cutoff)?
        }
    };
    let space = FluidSpace {
        dim,
        nc: dim - 1,
        modes,
        drift: cfg.drift.clone(),
    };
    let nh = space.len();
    let tangent = cfg.target.tangent_dim(dim);
    let state_dim = nh + tangent;

    // constant directions by depth
    let mut constants: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut level0 = Vec::new();
    for k in &cfg.forced {
        let m = space.modes.iter().position(|q| q == k).expect("forced mode retained");
        for i in 0..space.nc {
            let e = DVector::from_fn(nh, |j, _| if j == m * space.nc + i { 1.0 } else { 0.0 });
            if push_independent(&mut basis, e.clone()) {
                level0.push(basis.last().unwrap().clone());
            }
        }
    }
    constants.push(level0);
    for _ in 0..cfg.depth {
        let mut fresh = Vec::new();
        if matches!(cfg.drift, DriftSpec::Galerkin { .. }) && basis.len() < nh {
            let newest = constants.last().unwrap().clone();
            let all = basis.clone();
            'outer: for a in &newest {
                for b in &all {
                    let s = space.sym_b(a, b)?;
                    if push_independent(&mut basis, s) {
                        fresh.push(basis.last().unwrap().clone());
                        if basis.len() == nh {
                            break 'outer;
                        }
                    }
                }
            }
        }
        constants.push(fresh);
    }

    let points = sample_points(cfg.target, dim, cfg.samples, cfg.seed)?;
    let mut rng = aux_rng(cfg.seed, 1, 22);
    let us: Vec<DVector<f64>> = (0..cfg.samples)
        .map(|_| DVector::from_fn(nh, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();

    let mut levels = Vec::new();
    let mut verdict = Verdict::Fail;
    for depth in 0..=cfg.depth {
        let const_rank: usize = constants[..=depth].iter().map(|c| c.len()).sum();
        let mut min_rank = usize::MAX;
        let mut inconclusive = 0;
        for (p, u) in points.iter().zip(&us) {
            let mut vecs: Vec<Vec<f64>> = Vec::new();
            for c in constants[..=depth].iter().flatten() {
                let mut v = c.as_slice().to_vec();
                v.extend(std::iter::repeat(0.0).take(tangent));
                vecs.push(v);
            }
            for c in constants[..depth].iter().flatten() {
                let mut v = space.drift_derivative(u, c)?.as_slice().to_vec();
                let lag = lagrangian_field(cfg.target, &space.field(c), p)?;
                v.extend(tangent_coords(cfg.target, p, &lag));
                vecs.push(v);
            }
            let r = numerical_rank(&vecs, state_dim);
            min_rank = min_rank.min(r.rank);
            if r.status == RankStatus::Inconclusive {
                inconclusive += 1;
            }
        }
        if points.is_empty() {
            min_rank = 0;
        }
        levels.push(ClosureLevel {
            depth,
            constant_rank: const_rank,
            fluid_deficit: nh - const_rank,
            rank: min_rank,
            inconclusive,
        });
        if min_rank == state_dim {
            verdict = if inconclusive > 0 { Verdict::Inconclusive } else { Verdict::Pass };
            break;
        }
    }
    let last = levels.last().expect("depth 0 always computed");
    Ok(ClosureReport {
        fluid_dim: nh,
        state_dim,
        residual_codim: state_dim - last.rank,
        levels,
        verdict,
    })
}
