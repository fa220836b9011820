//! Explicit controls for the particle, projective and matrix processes.
//!
//! Every control is a schedule of Euler-steady flows built from `|k| = 1` modes, each
//! switched on inside its own time window with a smooth bump amplitude. Shears move
//! the particle; cellular flows centred on the particle rotate `v` in place; the
//! hyperbolic cellular flow centred on the particle stretches `A`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use ode_solvers::{Dopri5, OutputType, System};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forcing::{ou_noise_std, NoiseBank, NoiseFamily};
use crate::lagrangian::{FlowOptions, LagrangianState};
use crate::spectral::{bilinear, linf_ball, FieldEvaluator, SpectralField, Wavevector};

/// `∫₀¹ exp(−1/(s(1−s))) ds`.
fn bump_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| {
        let n = 20_000;
        let h = 1.0 / n as f64;
        let f = |s: f64| if s <= 0.0 || s >= 1.0 { 0.0 } else { (-1.0 / (s * (1.0 - s))).exp() };
        let mut acc = 0.0;
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        acc * h / 3.0
    })
}

/// `c·exp(−1/(s(1−s)))` on `(t0, t1)`, `s = (t − t0)/(t1 − t0)`, scaled to a prescribed integral.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpProfile {
    pub t0: f64,
    pub t1: f64,
    pub integral: f64,
}

impl BumpProfile {
    fn scale(&self) -> f64 {
        self.integral / ((self.t1 - self.t0) * bump_mass())
    }

    pub fn value(&self, t: f64) -> f64 {
        let s = (t - self.t0) / (self.t1 - self.t0);
        if s <= 0.0 || s >= 1.0 || self.integral == 0.0 {
            return 0.0;
        }
        self.scale() * (-1.0 / (s * (1.0 - s))).exp()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let w = self.t1 - self.t0;
        let s = (t - self.t0) / w;
        if s <= 0.0 || s >= 1.0 {
            return 0.0;
        }
        let q = s * (1.0 - s);
        self.value(t) * (1.0 - 2.0 * s) / (q * q) / w
    }
}

/// Flow shapes; all are Euler-steady eigenfunctions of the Laplacian with `|k| = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowShape {
    /// `u_dir = cos(y_along − phase)`.
    Shear { dir: usize, along: usize, phase: f64 },
    /// `u_i = −sin(y_j − c_j)`, `u_j = sin(y_i − c_i)`: rotation of the `(i, j)` plane about `c`.
    Cellular { i: usize, j: usize, ci: f64, cj: f64 },
    /// `(sin(y_2 − b), sin(y_1 − a))`: hyperbolic point at `(a, b)` with strain `[[0,1],[1,0]]`.
    Hyperbolic { a: f64, b: f64 },
}

impl FlowShape {
    pub fn velocity(&self, y: &[f64]) -> [f64; 3] {
        let mut u = [0.0; 3];
        match *self {
            FlowShape::Shear { dir, along, phase } => u[dir] = (y[along] - phase).cos(),
            FlowShape::Cellular { i, j, ci, cj } => {
                u[i] = -(y[j] - cj).sin();
                u[j] = (y[i] - ci).sin();
            }
            FlowShape::Hyperbolic { a, b } => {
                u[0] = (y[1] - b).sin();
                u[1] = (y[0] - a).sin();
            }
        }
        u
    }

    /// `(∇u)_{rs} = ∂_s u_r`.
    pub fn gradient(&self, y: &[f64]) -> [[f64; 3]; 3] {
        let mut g = [[0.0; 3]; 3];
        match *self {
            FlowShape::Shear { dir, along, phase } => g[dir][along] = -(y[along] - phase).sin(),
            FlowShape::Cellular { i, j, ci, cj } => {
                g[i][j] = -(y[j] - cj).cos();
                g[j][i] = (y[i] - ci).cos();
            }
            FlowShape::Hyperbolic { a, b } => {
                g[0][1] = (y[1] - b).cos();
                g[1][0] = (y[0] - a).cos();
            }
        }
        g
    }

    /// Spectral coefficients on `|k|_inf ≤ 1`.
    pub fn to_field(&self, dim: usize) -> Result<SpectralField> {
        let shape = *self;
        SpectralField::project_velocity(dim, linf_ball(dim, 1)?, 4, move |y| shape.velocity(y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub profile: BumpProfile,
    pub shape: FlowShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPlan {
    pub dim: usize,
    pub phases: Vec<Phase>,
}

impl ControlPlan {
    pub fn velocity(&self, t: f64, y: &[f64]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for p in &self.phases {
            let f = p.profile.value(t);
            if f != 0.0 {
                let s = p.shape.velocity(y);
                for c in 0..3 {
                    u[c] += f * s[c];
                }
            }
        }
        u
    }

    pub fn gradient(&self, t: f64, y: &[f64]) -> [[f64; 3]; 3] {
        let mut g = [[0.0; 3]; 3];
        for p in &self.phases {
            let f = p.profile.value(t);
            if f != 0.0 {
                let s = p.shape.gradient(y);
                for r in 0..3 {
                    for c in 0..3 {
                        g[r][c] += f * s[r][c];
                    }
                }
            }
        }
        g
    }

    pub fn is_zero(&self) -> bool {
        self.phases.iter().all(|p| p.profile.integral == 0.0)
    }
}

/// Signed shortest displacement on the circle, in `(−π, π]`.
pub fn circle_delta(from: f64, to: f64) -> f64 {
    let d = (to - from).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

pub fn torus_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| circle_delta(*x, *y).powi(2)).sum::<f64>().sqrt()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(invalid("v", "direction must be a nonzero finite vector"));
    }
    Ok(v.iter().map(|c| c / n).collect())
}

fn phase(t0: f64, t1: f64, integral: f64, shape: FlowShape) -> Phase {
    Phase {
        profile: BumpProfile { t0, t1, integral },
        shape,
    }
}

/// Schedule on `[0, 1]` taking `(x, v)` to `(x', v')`.
///
/// d = 2: shear in `x_1` on `(0, ¼)`, shear in `x_2` on `(¼, ½)`, rotation about the
/// particle on `(½, 1)`. d = 3: one shear per axis on `(0, ½)`, then rotations about the
/// `z`, `x` and `z` axes that set longitude, latitude and longitude in turn.
pub fn synthesize_control(x: &[f64], v: &[f64], x1: &[f64], v1: &[f64]) -> Result<ControlPlan> {
    let d = x.len();
    if !(2..=3).contains(&d) {
        return Err(Error::InvalidDimension(d));
    }
    if v.len() != d || x1.len() != d || v1.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: v.len().min(x1.len()).min(v1.len()),
        });
    }
    let (v, v1) = (unit(v)?, unit(v1)?);
    let mut phases = Vec::new();
    if d == 2 {
        let da = circle_delta(x[0], x1[0]);
        let db = circle_delta(x[1], x1[1]);
        phases.push(phase(0.0, 0.25, da, FlowShape::Shear { dir: 0, along: 1, phase: x[1] }));
        phases.push(phase(0.25, 0.5, db, FlowShape::Shear { dir: 1, along: 0, phase: x[0] + da }));
        // shears leave v fixed since their gradient vanishes on the particle's line
        let angle = circle_delta(v[1].atan2(v[0]), v1[1].atan2(v1[0]));
        let (a, b) = (x[0] + da, x[1] + db);
        phases.push(phase(0.5, 1.0, angle, FlowShape::Cellular { i: 0, j: 1, ci: a, cj: b }));
    } else {
        let mut pos = x.to_vec();
        let w = 1.0 / 6.0;
        for (n, (dir, along)) in [(0usize, 1usize), (1, 2), (2, 0)].into_iter().enumerate() {
            let delta = circle_delta(x[dir], x1[dir]);
            phases.push(phase(
                n as f64 * w,
                (n + 1) as f64 * w,
                delta,
                FlowShape::Shear { dir, along, phase: pos[along] },
            ));
            pos[dir] += delta;
        }
        let lon = |u: &[f64]| u[1].atan2(u[0]);
        let lat = |u: &[f64]| u[2].clamp(-1.0, 1.0).asin();
        let rot_z = FlowShape::Cellular { i: 0, j: 1, ci: pos[0], cj: pos[1] };
        let rot_x = FlowShape::Cellular { i: 1, j: 2, ci: pos[1], cj: pos[2] };
        let to_yz = circle_delta(lon(&v), PI / 2.0);
        let to_yz = if v[0].hypot(v[1]) == 0.0 { 0.0 } else { to_yz };
        phases.push(phase(3.0 * w, 4.0 * w, to_yz, rot_z));
        // in the (y, z) plane at longitude π/2 the angle from +y is the latitude
        phases.push(phase(4.0 * w, 5.0 * w, lat(&v1) - lat(&v), rot_x));
        let back = if v1[0].hypot(v1[1]) == 0.0 { 0.0 } else { circle_delta(PI / 2.0, lon(&v1)) };
        phases.push(phase(5.0 * w, 1.0, back, rot_z));
    }
    Ok(ControlPlan { dim: d, phases })
}

struct PlanSystem<'a> {
    plan: &'a ControlPlan,
}

/// State `(x, A)` flattened, `A` row-major.
impl System<f64, DVector<f64>> for PlanSystem<'_> {
    fn system(&self, t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        let d = self.plan.dim;
        let x = &y.as_slice()[..d];
        let u = self.plan.velocity(t, x);
        let g = self.plan.gradient(t, x);
        for i in 0..d {
            dy[i] = u[i];
        }
        for r in 0..d {
            for c in 0..d {
                let mut s = 0.0;
                for m in 0..d {
                    s += g[r][m] * y[d + m * d + c];
                }
                dy[d + r * d + c] = s;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlledEndpoint {
    pub x: Vec<f64>,
    /// `A_1 v / |A_1 v|`.
    pub v: Vec<f64>,
    /// Row-major Jacobian `A_1`.
    pub a: Vec<f64>,
    pub steps: usize,
}

/// Integrate `(x, A)` under the scheduled flow over `[0, 1]`, window by window.
pub fn integrate_plan(plan: &ControlPlan, x: &[f64], v: &[f64], tol: f64) -> Result<ControlledEndpoint> {
    let d = plan.dim;
    let mut y = DVector::zeros(d + d * d);
    y.as_mut_slice()[..d].copy_from_slice(x);
    for i in 0..d {
        y[d + i * d + i] = 1.0;
    }
    let mut cuts: Vec<f64> = vec![0.0, 1.0];
    for p in &plan.phases {
        cuts.push(p.profile.t0.clamp(0.0, 1.0));
        cuts.push(p.profile.t1.clamp(0.0, 1.0));
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let mut steps = 0;
    for w in cuts.windows(2) {
        let sys = PlanSystem { plan };
        let len = w[1] - w[0];
        // the bump is flat at window ends, so hinit alone can overshoot the whole window
        let mut solver = Dopri5::from_param(
            sys,
            w[0],
            w[1],
            len,
            y.clone(),
            tol,
            tol * 1e-2,
            0.9,
            0.04,
            0.2,
            10.0,
            len / 32.0,
            0.0,
            100_000,
            1000,
            OutputType::Sparse,
        );
        let stats = solver
            .integrate()
            .map_err(|e| invalid("integration", format!("{e:?}")))?;
        steps += stats.accepted_steps as usize;
        y = solver.y_out().last().expect("at least one output").clone();
    }
    let a: Vec<f64> = y.as_slice()[d..].to_vec();
    let am = DMatrix::from_row_slice(d, d, &a);
    let av = am * DVector::from_column_slice(&unit(v)?);
    Ok(ControlledEndpoint {
        x: y.as_slice()[..d].to_vec(),
        v: (av.clone() / av.norm()).as_slice().to_vec(),
        a,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointError {
    pub x_error: f64,
    pub v_error: f64,
}

pub fn endpoint_error(end: &ControlledEndpoint, x1: &[f64], v1: &[f64]) -> Result<EndpointError> {
    let v1 = unit(v1)?;
    Ok(EndpointError {
        x_error: torus_distance(&end.x, x1),
        v_error: end.v.iter().zip(&v1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
    })
}

/// Time-dependent forcing that makes the deterministic equation follow the plan.
#[derive(Clone, Debug)]
pub struct ControlForcing {
    pub plan: ControlPlan,
    pub nu: f64,
    pub eta: f64,
    shapes: Vec<SpectralField>,
}

/// `Qg(t) = Σ (f′ + λ f)·shape` with `λ = ν + η` the dissipation rate of `|k| = 1` modes.
pub fn control_to_forcing(plan: &ControlPlan, nu: f64, eta: f64) -> Result<ControlForcing> {
    let shapes = plan
        .phases
        .iter()
        .map(|p| p.shape.to_field(plan.dim))
        .collect::<Result<_>>()?;
    Ok(ControlForcing {
        plan: plan.clone(),
        nu,
        eta,
        shapes,
    })
}

impl ControlForcing {
    fn combine(&self, weight: impl Fn(&BumpProfile) -> f64) -> SpectralField {
        let mut out = SpectralField::zeros(
            self.plan.dim,
            crate::spectral::FieldKind::Velocity,
            linf_ball(self.plan.dim, 1).expect("valid dimension"),
        )
        .expect("valid layout");
        for (p, s) in self.plan.phases.iter().zip(&self.shapes) {
            let w = weight(&p.profile);
            if w != 0.0 {
                out.axpy(w, s).expect("same layout");
            }
        }
        out
    }

    pub fn at(&self, t: f64) -> SpectralField {
        let lambda = self.nu + self.eta;
        self.combine(|p| p.derivative(t) + lambda * p.value(t))
    }

    /// The flow the controlled equation should reproduce.
    pub fn scheduled_flow(&self, t: f64) -> SpectralField {
        self.combine(|p| p.value(t))
    }
}

struct PdeSystem<'a> {
    forcing: &'a ControlForcing,
    modes: Vec<Wavevector>,
    rates: Vec<f64>,
}

impl PdeSystem<'_> {
    fn field(&self, y: &DVector<f64>) -> SpectralField {
        SpectralField::from_coeffs(
            self.forcing.plan.dim,
            crate::spectral::FieldKind::Velocity,
            self.modes.clone(),
            y.as_slice().to_vec(),
        )
        .expect("layout")
    }
}

impl System<f64, DVector<f64>> for PdeSystem<'_> {
    fn system(&self, t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        let u = self.field(y);
        let b = bilinear(&u, &u, &self.modes).expect("velocity fields");
        let g = self.forcing.at(t).remap(self.modes.clone()).expect("layout");
        for j in 0..y.len() {
            dy[j] = -b.coeffs()[j] - self.rates[j] * y[j] + g.coeffs()[j];
        }
    }
}

/// Largest coefficient-norm deviation of the controlled Galerkin solution from the
/// scheduled flow over the accepted steps in `[0, 1]`.
pub fn pde_residual(forcing: &ControlForcing, cutoff: i32, tol: f64) -> Result<f64> {
    let dim = forcing.plan.dim;
    let modes = linf_ball(dim, cutoff.max(1))?;
    let nc = dim - 1;
    let rates: Vec<f64> = modes
        .iter()
        .flat_map(|k| {
            let k2 = k.norm_sq();
            std::iter::repeat(forcing.nu * k2 + forcing.eta * k2 * k2).take(nc)
        })
        .collect();
    let sys = PdeSystem {
        forcing,
        modes: modes.clone(),
        rates,
    };
    let y0 = DVector::zeros(modes.len() * nc);
    let mut solver = Dopri5::new(sys, 0.0, 1.0, 1.0, y0, tol, tol * 1e-2);
    // every accepted step is checked; dense output is not used
    solver.set_output(OutputType::Sparse);
    solver
        .integrate()
        .map_err(|e| invalid("integration", format!("{e:?}")))?;
    let mut worst: f64 = 0.0;
    for (t, y) in solver.x_out().iter().zip(solver.y_out()) {
        let want = forcing.scheduled_flow(*t).remap(modes.clone())?;
        let diff: f64 = y
            .iter()
            .zip(want.coeffs())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianGrowthReport {
    pub m: f64,
    /// Row-major `A_1`.
    pub a: Vec<f64>,
    /// Operator norm `|A_1|`.
    pub norm: f64,
    /// `|A_1 − exp(log M · S)|` with `S = [[0,1],[1,0]]`.
    pub closed_form_error: f64,
    pub x_drift: f64,
    pub passed: bool,
}

/// Hyperbolic cellular control at `x` with `∫₀¹ f = log M`.
pub fn jacobian_growth_plan(m: f64, x: &[f64]) -> Result<ControlPlan> {
    if !(m >= 1.0) || x.len() != 2 {
        return Err(invalid("m", "needs M ≥ 1 and a point in two dimensions"));
    }
    Ok(ControlPlan {
        dim: 2,
        phases: vec![phase(0.0, 1.0, m.ln(), FlowShape::Hyperbolic { a: x[0], b: x[1] })],
    })
}

pub fn jacobian_growth_demo(m: f64, x: &[f64], tol: f64) -> Result<JacobianGrowthReport> {
    let plan = jacobian_growth_plan(m, x)?;
    let end = integrate_plan(&plan, x, &[1.0, 0.0], tol)?;
    let a = DMatrix::from_row_slice(2, 2, &end.a);
    let norm = a.clone().svd(false, false).singular_values.max();
    let (c, s) = (m.ln().cosh(), m.ln().sinh());
    let want = DMatrix::from_row_slice(2, 2, &[c, s, s, c]);
    let closed_form_error = (a - want).norm();
    let x_drift = torus_distance(&end.x, x);
    Ok(JacobianGrowthReport {
        m,
        a: end.a,
        norm,
        closed_form_error,
        x_drift,
        passed: norm >= m * (1.0 - 1e-6) && x_drift < 1e-8,
    })
}

/// Noisy Galerkin run steered by a control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowingConfig {
    pub nu: f64,
    pub cutoff: i32,
    /// Common noise amplitude on every retained mode.
    pub sigma: f64,
    pub dt: f64,
    pub n_traj: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowingReport {
    pub eps: Vec<f64>,
    pub hit_fraction: Vec<f64>,
    pub n_traj: usize,
}

fn endpoint_distances<const D: usize>(
    forcing: &ControlForcing,
    cfg: &ShadowingConfig,
    x0: &[f64],
    v0: &[f64],
    x1: &[f64],
    v1: &[f64],
    traj: u64,
) -> Result<f64> {
    let modes = linf_ball(D, cfg.cutoff.max(1))?;
    let nc = D - 1;
    let mut u = SpectralField::zeros(D, crate::spectral::FieldKind::Velocity, modes.clone())?;
    let rates: Vec<f64> = modes
        .iter()
        .flat_map(|k| std::iter::repeat(cfg.nu * k.norm_sq()).take(nc))
        .collect();
    let mut bank = NoiseBank::new(
        cfg.seed,
        traj,
        NoiseFamily::Velocity,
        modes.iter().flat_map(|k| (0..nc).map(move |i| (*k, i))),
    );
    let mut xi = vec![0.0; bank.len()];
    let mut state = LagrangianState::<D>::new(
        nalgebra::SVector::from_column_slice(x0),
        nalgebra::SVector::from_column_slice(v0),
        nalgebra::SVector::from_column_slice(v0),
    );
    let n = (1.0 / cfg.dt).round().max(1.0) as usize;
    let dt = 1.0 / n as f64;
    let opts = FlowOptions::default();
    for s in 0..n {
        let t = s as f64 * dt;
        let ev = FieldEvaluator::new(&u);
        state.flow_step(&ev, dt, &opts);
        let b = bilinear(&u, &u, &modes)?;
        let g = forcing.at(t + 0.5 * dt).remap(modes.clone())?;
        bank.fill_normals(&mut xi);
        let c = u.coeffs_mut();
        for j in 0..c.len() {
            let l = rates[j];
            let decay = (-l * dt).exp();
            let phi = if l * dt < 1e-12 { dt } else { (1.0 - decay) / l };
            c[j] = decay * c[j] + phi * (g.coeffs()[j] - b.coeffs()[j]) + ou_noise_std(l, cfg.sigma, dt) * xi[j];
        }
    }
    let x_end: Vec<f64> = state.x.iter().copied().collect();
    let v_end: Vec<f64> = state.v.iter().copied().collect();
    let dv = v_end.iter().zip(v1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(u.coeff_norm_sq().sqrt().max(torus_distance(&x_end, x1)).max(dv))
}

/// Fraction of noisy controlled runs ending within `ε` of `(0, x', v')` for each `ε`.
pub fn noise_shadowing_probe(
    plan: &ControlPlan,
    endpoints: (&[f64], &[f64], &[f64], &[f64]),
    cfg: &ShadowingConfig,
    eps: &[f64],
) -> Result<ShadowingReport> {
    let forcing = control_to_forcing(plan, cfg.nu, 0.0)?;
    let (x0, v0, x1, v1) = endpoints;
    let v0 = unit(v0)?;
    let v1 = unit(v1)?;
    let dists: Vec<f64> = (0..cfg.n_traj as u64)
        .into_par_iter()
        .map(|tr| match plan.dim {
            2 => endpoint_distances::<2>(&forcing, cfg, x0, &v0, x1, &v1, tr),
            3 => endpoint_distances::<3>(&forcing, cfg, x0, &v0, x1, &v1, tr),
            d => Err(Error::InvalidDimension(d)),
        })
        .collect::<Result<_>>()?;
    let hit_fraction = eps
        .iter()
        .map(|e| dists.iter().filter(|d| **d < *e).count() as f64 / cfg.n_traj.max(1) as f64)
        .collect();
    Ok(ShadowingReport {
        eps: eps.to_vec(),
        hit_fraction,
        n_traj: cfg.n_traj,
    })
}
