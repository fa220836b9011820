//! Particle, projective and matrix processes carried by a velocity field.
//!
//! Along a fluid path the particle obeys `ẋ = u(x)`, tangent directions obey
//! `v̇ = Π_v ∇u(x) v` and `v̌̇ = -Π_v̌ ∇u(x)ᵀ v̌`, and the Jacobian obeys `Ȧ = ∇u(x) A`.
//! Each step freezes the field and takes one classical RK4 step of the coupled system.
//! The matrix part of that step is a linear propagator `P`, which is applied to `A`
//! and, through `P^{-⊤}`, to the inverse transpose.

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::spectral::FieldEvaluator;

pub type Vec<const D: usize> = SVector<f64, D>;
pub type Mat<const D: usize> = SMatrix<f64, D, D>;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Norm window outside of which the matrix is rescaled into `log_norm`.
pub const RENORM_BOUNDS: (f64, f64) = (1e-6, 1e6);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState<const D: usize> {
    /// Position, kept in `[0, 2π)^d`.
    pub x: Vec<D>,
    pub v: Vec<D>,
    pub v_check: Vec<D>,
    /// Jacobian up to the scalar factor `exp(log_norm)`.
    pub a: Mat<D>,
    pub log_norm: f64,
    /// Inverse transpose of the Jacobian up to `exp(log_norm_inv_t)`.
    pub a_inv_t: Mat<D>,
    pub log_norm_inv_t: f64,
    /// `log det` of the represented Jacobian, summed from the step propagators.
    #[serde(default)]
    pub log_det: f64,
    pub steps: u64,
}

/// Step options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOptions {
    /// RK4 substeps per call.
    pub substeps: usize,
    /// Rescale `A` to unit determinant every this many steps (0 disables).
    pub reproject_every: u64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            substeps: 1,
            reproject_every: 1000,
        }
    }
}

/// One-step linear propagators of the tangent and cotangent cocycles.
#[derive(Clone, Copy, Debug)]
pub struct StepPropagator<const D: usize> {
    pub p: Mat<D>,
    pub p_inv_t: Mat<D>,
}

#[inline]
fn wrap(x: f64) -> f64 {
    let y = x.rem_euclid(TWO_PI);
    if y >= TWO_PI {
        0.0
    } else {
        y
    }
}

#[inline]
fn eval<const D: usize>(field: &FieldEvaluator, x: &Vec<D>) -> (Vec<D>, Mat<D>) {
    let mut p = [0.0; 3];
    p[..D].copy_from_slice(x.as_slice());
    let (u, g) = field.velocity_gradient(&p);
    let uv = Vec::<D>::from_fn(|i, _| u[i]);
    let gm = Mat::<D>::from_fn(|i, j| g[i][j]);
    (uv, gm)
}

#[inline]
fn projective_rhs<const D: usize>(g: &Mat<D>, v: &Vec<D>) -> Vec<D> {
    let gv = g * v;
    gv - v * v.dot(&gv)
}

fn rk4_projective<const D: usize>(gs: &[Mat<D>; 4], v: &Vec<D>, h: f64) -> Vec<D> {
    let k1 = projective_rhs(&gs[0], v);
    let k2 = projective_rhs(&gs[1], &(v + k1 * (h / 2.0)));
    let k3 = projective_rhs(&gs[2], &(v + k2 * (h / 2.0)));
    let k4 = projective_rhs(&gs[3], &(v + k3 * h));
    let out = v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    out.normalize()
}

fn rk4_linear<const D: usize>(gs: &[Mat<D>; 4], h: f64) -> Mat<D> {
    let id = Mat::<D>::identity();
    let k1 = gs[0];
    let k2 = gs[1] * (id + k1 * (h / 2.0));
    let k3 = gs[2] * (id + k2 * (h / 2.0));
    let k4 = gs[3] * (id + k3 * h);
    id + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

impl<const D: usize> LagrangianState<D> {
    pub fn new(x: Vec<D>, v: Vec<D>, v_check: Vec<D>) -> Self {
        Self {
            x: x.map(wrap),
            v: v.normalize(),
            v_check: v_check.normalize(),
            a: Mat::<D>::identity(),
            log_norm: 0.0,
            a_inv_t: Mat::<D>::identity(),
            log_norm_inv_t: 0.0,
            log_det: 0.0,
            steps: 0,
        }
    }

    /// Advance by `dt` in the frozen field; returns the composed step propagators.
    pub fn flow_step(
        &mut self,
        field: &FieldEvaluator,
        dt: f64,
        opts: &FlowOptions,
    ) -> StepPropagator<D> {
        let n = opts.substeps.max(1);
        let h = dt / n as f64;
        let mut p_total = Mat::<D>::identity();
        for _ in 0..n {
            // stage positions and gradients
            let (u1, g1) = eval(field, &self.x);
            let x2 = self.x + u1 * (h / 2.0);
            let (u2, g2) = eval(field, &x2);
            let x3 = self.x + u2 * (h / 2.0);
            let (u3, g3) = eval(field, &x3);
            let x4 = self.x + u3 * h;
            let (u4, g4) = eval(field, &x4);
            self.x = (self.x + (u1 + u2 * 2.0 + u3 * 2.0 + u4) * (h / 6.0)).map(wrap);
            let gs = [g1, g2, g3, g4];
            let gts = [-g1.transpose(), -g2.transpose(), -g3.transpose(), -g4.transpose()];
            self.v = rk4_projective(&gs, &self.v, h);
            self.v_check = rk4_projective(&gts, &self.v_check, h);
            let p = rk4_linear(&gs, h);
            p_total = p * p_total;
        }
        let p_inv_t = p_total
            .try_inverse()
            .expect("RK4 propagator of a bounded gradient is invertible")
            .transpose();
        self.log_det += determinant(&p_total).abs().ln();
        self.a = p_total * self.a;
        self.a_inv_t = p_inv_t * self.a_inv_t;
        self.steps += 1;
        self.renormalize();
        if opts.reproject_every > 0 && self.steps % opts.reproject_every == 0 {
            self.reproject();
        }
        StepPropagator {
            p: p_total,
            p_inv_t,
        }
    }

    fn renormalize(&mut self) {
        let (lo, hi) = RENORM_BOUNDS;
        let na = self.a.norm();
        if !(lo..=hi).contains(&na) {
            self.a /= na;
            self.log_norm += na.ln();
        }
        let nb = self.a_inv_t.norm();
        if !(lo..=hi).contains(&nb) {
            self.a_inv_t /= nb;
            self.log_norm_inv_t += nb.ln();
        }
    }

    /// Rescale both matrices so the represented Jacobian has unit determinant.
    pub fn reproject(&mut self) {
        let s = self.log_det / D as f64;
        self.log_norm -= s;
        self.log_norm_inv_t += s;
        self.log_det = 0.0;
    }

    /// `log det A`, accumulated from the well-conditioned step propagators.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn det(&self) -> f64 {
        self.log_det.exp()
    }

    /// `log |det A|` computed from the stored matrix. Loses accuracy once the
    /// condition number of `A` approaches `1/ε`.
    pub fn log_det_direct(&self) -> f64 {
        determinant(&self.a).abs().ln() + D as f64 * self.log_norm
    }

    /// `log |A|` with the operator 2-norm.
    pub fn log_norm_a(&self) -> f64 {
        log_singular_values(&self.a)[0] + self.log_norm
    }

    pub fn log_norm_a_inv_t(&self) -> f64 {
        log_singular_values(&self.a_inv_t)[0] + self.log_norm_inv_t
    }

    /// `log |A v|`.
    pub fn log_stretch(&self, v: &Vec<D>) -> f64 {
        (self.a * v).norm().ln() + self.log_norm
    }

    /// `A^{-⊤} w`, the gradient at the particle of the scalar transported from
    /// initial gradient `w`. May overflow on long chaotic runs; see
    /// [`log_pullback_norm`](Self::log_pullback_norm).
    pub fn pullback_gradient(&self, w: &Vec<D>) -> Vec<D> {
        self.a_inv_t * w * self.log_norm_inv_t.exp()
    }

    pub fn log_pullback_norm(&self, w: &Vec<D>) -> f64 {
        (self.a_inv_t * w).norm().ln() + self.log_norm_inv_t
    }

    pub fn duality_check(&self) -> DualityReport {
        let sa: std::vec::Vec<f64> = log_singular_values(&self.a)
            .iter()
            .map(|s| s + self.log_norm)
            .collect();
        let sb: std::vec::Vec<f64> = log_singular_values(&self.a_inv_t)
            .iter()
            .map(|s| s + self.log_norm_inv_t)
            .collect();
        // the smallest singular value of a stretched matrix is lost to rounding,
        // so it is replaced by the product of the others over the determinant
        let ld = self.log_det;
        let pair = |x: &[f64], y: &[f64], ld: f64| {
            (0..D - 1)
                .map(|i| {
                    let j = D - 1 - i;
                    let rhs = if j == D - 1 {
                        y[..D - 1].iter().sum::<f64>() - ld
                    } else {
                        -y[j]
                    };
                    (x[i] - rhs).exp_m1().abs()
                })
                .fold(0.0, f64::max)
        };
        let max_rel_error = pair(&sb, &sa, ld).max(pair(&sa, &sb, -ld));
        DualityReport {
            log_sv_a: sa,
            log_sv_inv_t: sb,
            max_rel_error,
        }
    }

    /// `A v₀ / |A v₀|`.
    pub fn transported_direction(&self, v0: &Vec<D>) -> Vec<D> {
        (self.a * v0).normalize()
    }

    pub fn transported_cotangent(&self, w0: &Vec<D>) -> Vec<D> {
        (self.a_inv_t * w0).normalize()
    }
}

/// Singular values of `A` and `A^{-⊤}` on a log scale, descending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub log_sv_a: std::vec::Vec<f64>,
    pub log_sv_inv_t: std::vec::Vec<f64>,
    /// `max_i |σ_i(A^{-⊤}) σ_{d-i+1}(A) - 1|`.
    pub max_rel_error: f64,
}

pub fn determinant<const D: usize>(m: &Mat<D>) -> f64 {
    DMatrix::from_column_slice(D, D, m.as_slice()).determinant()
}

/// Descending log singular values via a dense SVD.
pub fn log_singular_values<const D: usize>(m: &Mat<D>) -> std::vec::Vec<f64> {
    let dm = DMatrix::from_column_slice(D, D, m.as_slice());
    let mut sv: std::vec::Vec<f64> = dm.singular_values().iter().map(|s| s.ln()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Orthonormal frame carried by a cocycle, re-orthonormalized by QR on demand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentFrame<const D: usize> {
    pub q: Mat<D>,
    /// Accumulated `log |R_ii|`.
    pub log_r: Vec<D>,
}

impl<const D: usize> TangentFrame<D> {
    pub fn new(q: Mat<D>) -> Self {
        let mut f = Self {
            q,
            log_r: Vec::<D>::zeros(),
        };
        f.orthonormalize();
        f.log_r = Vec::<D>::zeros();
        f
    }

    pub fn identity() -> Self {
        Self::new(Mat::<D>::identity())
    }

    #[inline]
    pub fn apply(&mut self, p: &Mat<D>) {
        self.q = p * self.q;
    }

    /// Factor `Q R`, keep `Q` with positive `R` diagonal, accumulate `log R_ii`.
    pub fn orthonormalize(&mut self) {
        let dm = DMatrix::from_column_slice(D, D, self.q.as_slice());
        let qr = dm.qr();
        let q = qr.q();
        let r = qr.r();
        for j in 0..D {
            let rjj = r[(j, j)];
            self.log_r[j] += rjj.abs().ln();
            let s = rjj.signum();
            for i in 0..D {
                self.q[(i, j)] = q[(i, j)] * s;
            }
        }
    }
}

/// `R A R^{-1}` with `R` the rotation by `π/2`; equals `A^{-⊤}` for `A ∈ SL_2`.
pub fn rotate_conjugate(a: &Mat<2>) -> Mat<2> {
    let r = Mat::<2>::new(0.0, -1.0, 1.0, 0.0);
    r * a * r.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{k, velocity_from_terms, FieldKind, SpectralField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cellular(f: f64) -> FieldEvaluator {
        // f (sin x2, sin x1)
        velocity_from_terms(2, &[(k(&[0, 1]), 0, -f), (k(&[1, 0]), 0, f)])
            .unwrap()
            .evaluator()
    }

    #[test]
    fn shear_orbit() {
        // (cos x2, 0)
        let u = velocity_from_terms(2, &[(k(&[0, -1]), 0, 1.0)]).unwrap().evaluator();
        let v0 = Vec::<2>::new(0.6, 0.8);
        let mut s = LagrangianState::new(Vec::<2>::zeros(), v0, v0);
        for _ in 0..100 {
            s.flow_step(&u, 0.01, &FlowOptions::default());
        }
        assert!((s.x[0] - 1.0).abs() < 1e-12 && s.x[1] == 0.0);
        assert!((s.a - Mat::<2>::identity()).norm() < 1e-14);
        assert!((s.v - v0).norm() < 1e-14);
    }

    #[test]
    fn frozen_strain_matches_matrix_exponential() {
        let m: f64 = 10.0;
        let u = cellular(m.ln());
        let mut s = LagrangianState::new(Vec::<2>::zeros(), Vec::<2>::x(), Vec::<2>::x());
        for _ in 0..1000 {
            s.flow_step(&u, 1e-3, &FlowOptions::default());
        }
        let (c, sh) = (m.ln().cosh(), m.ln().sinh());
        let want = Mat::<2>::new(c, sh, sh, c);
        assert!((s.a * s.log_norm.exp() - want).norm() < 1e-9);
        assert!((s.log_norm_a().exp() - m).abs() < 1e-9);
        assert_eq!(s.x, Vec::<2>::zeros());
    }

    #[test]
    fn unit_determinant_on_random_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let modes = crate::spectral::linf_ball(3, 1).unwrap();
        let mut f = SpectralField::zeros(3, FieldKind::Velocity, modes).unwrap();
        for a in f.coeffs_mut() {
            *a = rng.gen_range(-1.0..1.0);
        }
        let ev = f.evaluator();
        let v = Vec::<3>::new(1.0, 0.0, 0.0);
        let mut s = LagrangianState::new(Vec::<3>::new(0.1, 0.2, 0.3), v, v);
        for _ in 0..1000 {
            s.flow_step(&ev, 0.01, &FlowOptions { substeps: 1, reproject_every: 0 });
        }
        assert!((s.det() - 1.0).abs() < 1e-6);
        assert!(s.duality_check().max_rel_error < 1e-8);
        assert!((s.transported_direction(&v) - s.v).norm() < 1e-6);
        assert!((s.transported_cotangent(&v) - s.v_check).norm() < 1e-6);
    }

    #[test]
    fn sl2_inverse_transpose_is_rotation_conjugate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut a = Mat::<2>::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let d = a.determinant();
            if d.abs() < 0.1 {
                continue;
            }
            a /= d.abs().sqrt();
            if d < 0.0 {
                a.swap_columns(0, 1);
            }
            let it = a.try_inverse().unwrap().transpose();
            assert!((rotate_conjugate(&a) - it).norm() < 1e-12);
        }
    }

    #[test]
    fn qr_frame_recovers_strain_rates() {
        let u = cellular(0.5);
        let mut s = LagrangianState::new(Vec::<2>::zeros(), Vec::<2>::x(), Vec::<2>::x());
        let mut fr = TangentFrame::<2>::identity();
        for n in 1..=2000 {
            let p = s.flow_step(&u, 0.01, &FlowOptions::default());
            fr.apply(&p.p);
            if n % 10 == 0 {
                fr.orthonormalize();
            }
        }
        // |A e_1|² = cosh² + sinh² = cosh(2ft) for A = exp(f t S)
        let want = 0.5 * 20f64.cosh().ln();
        assert!((fr.log_r[0] - want).abs() < 1e-8, "{:?} {want}", fr.log_r);
        assert!((fr.log_r[1] + want).abs() < 1e-8, "{:?} {want}", fr.log_r);
    }
}
