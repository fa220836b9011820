//! Passive scalar advected by the stochastic fluid.
//!
//! The diffusive scalar lives on a full ℓ∞ box of complex amplitudes. Advection by
//! the few retained velocity modes is an exact sparse convolution truncated to the
//! box, so there is no aliasing and the truncated transport conserves `‖g‖²`.
//! Each step is an integrating-factor RK4 for `−u·∇g` with exact diffusion, plus the
//! exact stochastic integral of the source. The inviscid scalar is never stepped on
//! the grid; its gradient is read off the inverse-transpose cocycle instead.

use std::sync::Arc;

use nalgebra::SVector;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fluid::{FluidDriver, FluidInit, FluidModelConfig, FluidState, FluidStepper};
use crate::forcing::{aux_rng, build_scalar_forcing, ou_noise_std, ForcingSpec, NoiseBank, NoiseFamily, ScalarForcing};
use crate::lagrangian::{FlowOptions, LagrangianState};
use crate::lyapunov::{FieldSource, FrozenField};
use crate::spectral::{linf_ball, FieldKind, SpectralField, Wavevector};
use crate::stats::{linear_fit, mean, std_error, Estimate};

/// Index arithmetic for the full box `|k|_∞ ≤ n`.
#[derive(Clone, Debug)]
pub struct ScalarGrid {
    dim: usize,
    n: i32,
    side: usize,
    k: Vec<[f64; 3]>,
    k2: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(dim: usize, n: i32) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::InvalidDimension(dim));
        }
        if n < 1 {
            return Err(invalid("cutoff", "must be at least 1"));
        }
        let side = (2 * n + 1) as usize;
        let len = side.pow(dim as u32);
        let mut k = Vec::with_capacity(len);
        let mut k2 = Vec::with_capacity(len);
        for idx in 0..len {
            let w = Self::unpack(dim, n, side, idx);
            let f = [w[0] as f64, w[1] as f64, w[2] as f64];
            k2.push(f[0] * f[0] + f[1] * f[1] + f[2] * f[2]);
            k.push(f);
        }
        Ok(Self { dim, n, side, k, k2 })
    }

    fn unpack(dim: usize, n: i32, side: usize, mut idx: usize) -> [i32; 3] {
        let mut w = [0; 3];
        for c in w.iter_mut().take(dim) {
            *c = (idx % side) as i32 - n;
            idx /= side;
        }
        w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cutoff(&self) -> i32 {
        self.n
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn slot(&self, k: &[i32; 3]) -> Option<usize> {
        let mut idx = 0usize;
        for &c in k.iter().take(self.dim).rev() {
            if c.abs() > self.n {
                return None;
            }
            idx = idx * self.side + (c + self.n) as usize;
        }
        Some(idx)
    }

    pub fn wave(&self, idx: usize) -> [i32; 3] {
        Self::unpack(self.dim, self.n, self.side, idx)
    }

    pub fn norm_sq(&self, idx: usize) -> f64 {
        self.k2[idx]
    }

    /// Real-basis modes of the box, excluding the mean.
    pub fn modes(&self) -> Vec<Wavevector> {
        linf_ball(self.dim, self.n).expect("dimension checked")
    }

    pub fn to_field(&self, g: &[Complex64]) -> SpectralField {
        let mut f = SpectralField::zeros(self.dim, FieldKind::Scalar, self.modes()).expect("valid box");
        f.fill_from_complex(|p| {
            let c = self.slot(&p.comps_array()).map(|s| g[s]).unwrap_or_default();
            [c, Complex64::default(), Complex64::default()]
        });
        f
    }

    /// Amplitudes of `g` on the box; modes of `g` outside the box are dropped.
    pub fn from_field(&self, g: &SpectralField) -> Result<Vec<Complex64>> {
        if g.kind() != FieldKind::Scalar {
            return Err(Error::KindMismatch("expected a scalar field"));
        }
        if g.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: g.dim(),
            });
        }
        let mut out = vec![Complex64::default(); self.len()];
        for (k, c) in g.to_complex() {
            if let Some(s) = self.slot(&k.comps_array()) {
                out[s] = c[0];
            }
        }
        Ok(out)
    }

    /// `Σ b²` of the real coefficients, i.e. `2 Σ |ĝ|²`.
    pub fn coeff_norm_sq(&self, g: &[Complex64]) -> f64 {
        2.0 * g.iter().map(|c| c.norm_sqr()).sum::<f64>()
    }

    /// `Σ |k|² b²`.
    pub fn grad_coeff_norm_sq(&self, g: &[Complex64]) -> f64 {
        2.0 * g
            .iter()
            .zip(&self.k2)
            .map(|(c, k2)| k2 * c.norm_sqr())
            .sum::<f64>()
    }

    /// `Σ |k|² b²` binned by the integer shell `round(|k|)`.
    pub fn gradient_spectrum(&self, g: &[Complex64]) -> Vec<f64> {
        let nmax = (self.n as f64 * (self.dim as f64).sqrt()).ceil() as usize + 1;
        let mut s = vec![0.0; nmax + 1];
        for (c, k2) in g.iter().zip(&self.k2) {
            s[k2.sqrt().round() as usize] += 2.0 * k2 * c.norm_sqr();
        }
        s
    }

    /// Fraction of `Σ |k|² b²` carried by `|k| > 2n/3`.
    pub fn tail_fraction(&self, spectrum: &[f64]) -> f64 {
        let cut = 2.0 * self.n as f64 / 3.0;
        let total: f64 = spectrum.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        let tail: f64 = spectrum
            .iter()
            .enumerate()
            .filter(|(i, _)| *i as f64 > cut)
            .map(|(_, v)| v)
            .sum();
        tail / total
    }
}

trait CompsArray {
    fn comps_array(&self) -> [i32; 3];
}

impl CompsArray for Wavevector {
    fn comps_array(&self) -> [i32; 3] {
        let c = self.comps();
        let mut out = [0; 3];
        out[..c.len()].copy_from_slice(c);
        out
    }
}

/// Sparse `−u·∇g` on the box for a fixed list of velocity wavevectors.
#[derive(Clone, Debug)]
struct AdvectionPlan {
    waves: Vec<Wavevector>,
    /// Per velocity wavevector `p`: pairs `(q, q + p)` of box slots.
    pairs: Vec<Vec<(u32, u32)>>,
}

impl AdvectionPlan {
    fn new(grid: &ScalarGrid, waves: Vec<Wavevector>) -> Self {
        let pairs = waves
            .iter()
            .map(|p| {
                let pr = p.comps_array();
                (0..grid.len())
                    .filter_map(|q| {
                        let w = grid.wave(q);
                        grid.slot(&[w[0] + pr[0], w[1] + pr[1], w[2] + pr[2]])
                            .map(|k| (q as u32, k as u32))
                    })
                    .collect()
            })
            .collect();
        Self { waves, pairs }
    }

    fn apply(&self, grid: &ScalarGrid, u: &[[Complex64; 3]], g: &[Complex64], out: &mut [Complex64]) {
        out.iter_mut().for_each(|o| *o = Complex64::default());
        for (up, pairs) in u.iter().zip(&self.pairs) {
            if up.iter().all(|z| z.norm_sqr() == 0.0) {
                continue;
            }
            for &(q, k) in pairs {
                let kq = &grid.k[q as usize];
                let s = up[0] * kq[0] + up[1] * kq[1] + up[2] * kq[2];
                let gq = g[q as usize];
                // −i s ĝ
                out[k as usize] += Complex64::new(s.im, -s.re) * gq;
            }
        }
    }
}

/// Velocity amplitudes in the order fixed by the plan.
fn velocity_amplitudes(plan: &AdvectionPlan, u: &SpectralField) -> Vec<[Complex64; 3]> {
    let c = u.to_complex();
    debug_assert!(c.iter().map(|x| x.0).eq(plan.waves.iter().copied()));
    c.into_iter().map(|x| x.1).collect()
}

/// Fixed-step solver for one `(κ, source, box)` triple.
#[derive(Clone, Debug)]
pub struct ScalarSolver {
    grid: Arc<ScalarGrid>,
    kappa: f64,
    dt: f64,
    plan: AdvectionPlan,
    e_half: Vec<f64>,
    e_full: Vec<f64>,
    source: ScalarForcing,
    /// Per source channel: slot of `p = k.positive_rep()`, whether `k` is the sine
    /// member, and the standard deviation of its stochastic integral.
    src: Vec<(usize, bool, f64)>,
}

impl ScalarSolver {
    /// `velocity_modes` is the real mode set of the advecting field.
    pub fn new(
        grid: Arc<ScalarGrid>,
        velocity_modes: &[Wavevector],
        kappa: f64,
        source: &ForcingSpec,
        dt: f64,
    ) -> Result<Self> {
        if !(kappa >= 0.0) {
            return Err(invalid("kappa", "must be non-negative"));
        }
        if !(dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        let source = if source.amplitudes()?.is_empty() {
            ScalarForcing {
                modes: vec![],
                q: vec![],
                eps_bar: 0.0,
            }
        } else {
            build_scalar_forcing(source)?
        };
        let mut src = Vec::new();
        for (k, q) in source.modes.iter().zip(&source.q) {
            let p = k.positive_rep();
            let slot = grid
                .slot(&p.comps_array())
                .ok_or_else(|| invalid("source", "source mode outside the scalar box"))?;
            src.push((slot, k.is_positive(), ou_noise_std(kappa * k.norm_sq() as f64, *q, dt)));
        }
        let mut waves = Vec::new();
        for p in velocity_modes.iter().filter(|k| k.is_positive()) {
            waves.push(*p);
            waves.push(p.neg());
        }
        let plan = AdvectionPlan::new(&grid, waves);
        let e_half = grid.k2.iter().map(|k2| (-kappa * k2 * dt / 2.0).exp()).collect();
        let e_full = grid.k2.iter().map(|k2| (-kappa * k2 * dt).exp()).collect();
        Ok(Self {
            grid,
            kappa,
            dt,
            plan,
            e_half,
            e_full,
            source,
            src,
        })
    }

    pub fn grid(&self) -> &Arc<ScalarGrid> {
        &self.grid
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn eps_bar(&self) -> f64 {
        self.source.eps_bar
    }

    pub fn source(&self) -> &ScalarForcing {
        &self.source
    }

    pub fn noise_bank(&self, seed: u64, trajectory: u64) -> NoiseBank {
        NoiseBank::new(
            seed,
            trajectory,
            NoiseFamily::ScalarSource,
            self.source.modes.iter().map(|k| (*k, 0)),
        )
    }

    /// Advance `g` by one step with the velocity moving linearly from `u0` to `u1`;
    /// `xi` holds one standard normal per source channel.
    pub fn step_box(&self, g: &mut [Complex64], u0: &[[Complex64; 3]], u1: &[[Complex64; 3]], xi: &[f64]) {
        let h = self.dt;
        let grid = &*self.grid;
        let n = g.len();
        let umid: Vec<[Complex64; 3]> = u0
            .iter()
            .zip(u1)
            .map(|(a, b)| [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5, (a[2] + b[2]) * 0.5])
            .collect();
        let mut k1 = vec![Complex64::default(); n];
        let mut k2 = vec![Complex64::default(); n];
        let mut k3 = vec![Complex64::default(); n];
        let mut k4 = vec![Complex64::default(); n];
        let mut tmp = vec![Complex64::default(); n];
        self.plan.apply(grid, u0, g, &mut k1);
        for i in 0..n {
            tmp[i] = (g[i] + k1[i] * (h / 2.0)) * self.e_half[i];
        }
        self.plan.apply(grid, &umid, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = g[i] * self.e_half[i] + k2[i] * (h / 2.0);
        }
        self.plan.apply(grid, &umid, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = (g[i] * self.e_half[i] + k3[i] * h) * self.e_half[i];
        }
        self.plan.apply(grid, u1, &tmp, &mut k4);
        for i in 0..n {
            let eh = self.e_half[i];
            let ef = self.e_full[i];
            g[i] = g[i] * ef + (k1[i] * ef + (k2[i] + k3[i]) * (2.0 * eh) + k4[i]) * (h / 6.0);
        }
        self.add_source(g, xi);
        if let Some(z) = grid.slot(&[0, 0, 0]) {
            g[z] = Complex64::default();
        }
    }

    fn add_source(&self, g: &mut [Complex64], xi: &[f64]) {
        let grid = &*self.grid;
        for (&(slot, sine, std), x) in self.src.iter().zip(xi) {
            let z = std * x;
            let c = if sine {
                Complex64::new(0.0, -0.5 * z)
            } else {
                Complex64::new(0.5 * z, 0.0)
            };
            g[slot] += c;
            let w = grid.wave(slot);
            let m = grid.slot(&[-w[0], -w[1], -w[2]]).expect("box is symmetric");
            g[m] += c.conj();
        }
    }
}

/// Scalar state in the real basis, for checkpoints and external use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarState {
    pub t: f64,
    pub g: SpectralField,
    pub kappa: f64,
    pub source: ForcingSpec,
    pub eps_bar: f64,
}

/// One step of `state` along the velocity segment `u0 → u1`.
pub fn scalar_step(
    solver: &ScalarSolver,
    state: &mut ScalarState,
    u0: &SpectralField,
    u1: &SpectralField,
    bank: &mut NoiseBank,
) -> Result<()> {
    if !(state.kappa > 0.0) {
        return Err(invalid("kappa", "the diffusive scalar needs κ > 0"));
    }
    let mut g = solver.grid.from_field(&state.g)?;
    let a = velocity_amplitudes(&solver.plan, u0);
    let b = velocity_amplitudes(&solver.plan, u1);
    let mut xi = vec![0.0; bank.len()];
    bank.fill_normals(&mut xi);
    solver.step_box(&mut g, &a, &b, &xi);
    state.g = solver.grid.to_field(&g);
    state.t += solver.dt;
    Ok(())
}

/// `f = √κ g`, whose stationary balance reads `E‖∇f‖² = ε̄`.
pub fn renormalized_scalar(state: &ScalarState) -> Result<ScalarState> {
    if !(state.kappa > 0.0) {
        return Err(invalid("kappa", "renormalization needs κ > 0"));
    }
    let mut out = state.clone();
    out.g.scale(state.kappa.sqrt());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarConfig {
    /// Advecting fluid; its time step is shared by the scalar.
    pub fluid: FluidModelConfig,
    pub source: ForcingSpec,
    pub kappa: f64,
    /// Scalar box `|k|_∞ ≤ cutoff`.
    pub cutoff: i32,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    pub horizon: f64,
    #[serde(default = "one")]
    pub sample_every: usize,
    #[serde(default = "one")]
    pub n_traj: usize,
    #[serde(default = "default_batches")]
    pub n_batches: usize,
    /// Allowed share of the gradient budget above `2/3` of the cutoff.
    #[serde(default = "default_tail")]
    pub tail_limit: f64,
    #[serde(default = "default_fluid_burn_in")]
    pub fluid_burn_in: f64,
    /// Time between stored `(u, g)` snapshots (none when absent).
    #[serde(default)]
    pub snapshot_every: Option<f64>,
}

fn default_burn_in() -> f64 {
    50.0
}
fn one() -> usize {
    1
}
fn default_batches() -> usize {
    20
}
fn default_tail() -> f64 {
    0.01
}
fn default_fluid_burn_in() -> f64 {
    20.0
}

impl ScalarConfig {
    pub fn new(fluid: FluidModelConfig, source: ForcingSpec, kappa: f64, cutoff: i32, horizon: f64) -> Self {
        Self {
            fluid,
            source,
            kappa,
            cutoff,
            burn_in: default_burn_in(),
            horizon,
            sample_every: 1,
            n_traj: 1,
            n_batches: default_batches(),
            tail_limit: default_tail(),
            fluid_burn_in: default_fluid_burn_in(),
            snapshot_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(invalid("kappa", "the diffusive scalar needs κ > 0"));
        }
        if self.source.dim != self.fluid.dim {
            return Err(Error::DimensionMismatch {
                expected: self.fluid.dim,
                got: self.source.dim,
            });
        }
        if !(self.horizon > 0.0) || self.burn_in < 0.0 {
            return Err(invalid("horizon", "need horizon > 0 and burn_in ≥ 0"));
        }
        if self.n_traj == 0 || self.n_batches < 2 || self.sample_every == 0 {
            return Err(invalid("n_traj", "need n_traj ≥ 1, n_batches ≥ 2, sample_every ≥ 1"));
        }
        self.fluid.validate()
    }

    pub fn solver(&self) -> Result<ScalarSolver> {
        self.validate()?;
        let grid = Arc::new(ScalarGrid::new(self.fluid.dim, self.cutoff)?);
        ScalarSolver::new(grid, &self.fluid.modes()?, self.kappa, &self.source, self.fluid.resolved_dt()?)
    }
}

/// Saved state of a coupled fluid–scalar trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarCheckpoint {
    pub trajectory: u64,
    pub t: f64,
    pub fluid: FluidState,
    pub fluid_counters: Vec<u64>,
    pub g: SpectralField,
    pub source_counters: Vec<u64>,
}

/// One coupled fluid–scalar trajectory.
#[derive(Debug)]
pub struct ScalarDriver {
    fluid: FluidDriver,
    solver: Arc<ScalarSolver>,
    bank: NoiseBank,
    g: Vec<Complex64>,
    u_now: Vec<[Complex64; 3]>,
    xi: Vec<f64>,
    trajectory: u64,
    t: f64,
    steps: u64,
}

/// Coefficient norm treated as a numerical blow-up of the scalar.
pub const SCALAR_BLOWUP: f64 = 1e12;

impl ScalarDriver {
    pub fn new(solver: Arc<ScalarSolver>, fluid: FluidDriver, seed: u64, trajectory: u64) -> Self {
        let bank = solver.noise_bank(seed, trajectory);
        let u_now = velocity_amplitudes(&solver.plan, &fluid.state().u);
        let g = vec![Complex64::default(); solver.grid.len()];
        let xi = vec![0.0; bank.len()];
        Self {
            fluid,
            solver,
            bank,
            g,
            u_now,
            xi,
            trajectory,
            t: 0.0,
            steps: 0,
        }
    }

    pub fn resume(
        solver: Arc<ScalarSolver>,
        stepper: Arc<FluidStepper>,
        seed: u64,
        cp: &ScalarCheckpoint,
    ) -> Result<Self> {
        let fluid = FluidDriver::from_parts(stepper, seed, cp.trajectory, cp.fluid.clone(), &cp.fluid_counters)?;
        let mut d = Self::new(solver, fluid, seed, cp.trajectory);
        d.bank.seek_all(&cp.source_counters)?;
        d.g = d.solver.grid.from_field(&cp.g)?;
        d.t = cp.t;
        Ok(d)
    }

    pub fn checkpoint(&self) -> ScalarCheckpoint {
        ScalarCheckpoint {
            trajectory: self.trajectory,
            t: self.t,
            fluid: self.fluid.state().clone(),
            fluid_counters: self.fluid.counters(),
            g: self.scalar_field(),
            source_counters: self.bank.counters(),
        }
    }

    pub fn advance(&mut self) -> Result<()> {
        self.fluid.advance()?;
        let u_next = velocity_amplitudes(&self.solver.plan, &self.fluid.state().u);
        self.bank.fill_normals(&mut self.xi);
        self.solver.step_box(&mut self.g, &self.u_now, &u_next, &self.xi);
        self.u_now = u_next;
        self.t += self.solver.dt;
        self.steps += 1;
        if self.steps % 64 == 0 {
            let e = self.solver.grid.coeff_norm_sq(&self.g);
            if !(e < SCALAR_BLOWUP) {
                return Err(Error::BlowUp {
                    t: self.t,
                    reason: format!("scalar norm {e:e}; reduce dt below the advective limit"),
                });
            }
        }
        Ok(())
    }

    /// `dt · N · Σ_p |û_p|`, a bound on the advective Courant number of the step.
    /// RK4 stays stable below roughly 2.8.
    pub fn advective_cfl(&self) -> f64 {
        let s: f64 = self
            .u_now
            .iter()
            .map(|c| (c[0].norm_sqr() + c[1].norm_sqr() + c[2].norm_sqr()).sqrt())
            .sum();
        self.solver.dt * self.solver.grid.n as f64 * s
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.g
    }

    pub fn set_amplitudes(&mut self, g: Vec<Complex64>) -> Result<()> {
        if g.len() != self.g.len() {
            return Err(Error::CoefficientLength {
                expected: self.g.len(),
                got: g.len(),
            });
        }
        self.g = g;
        Ok(())
    }

    pub fn scalar_field(&self) -> SpectralField {
        self.solver.grid.to_field(&self.g)
    }

    pub fn velocity(&self) -> &SpectralField {
        &self.fluid.state().u
    }

    pub fn fluid(&self) -> &FluidDriver {
        &self.fluid
    }

    pub fn state(&self) -> ScalarState {
        ScalarState {
            t: self.t,
            g: self.scalar_field(),
            kappa: self.solver.kappa,
            source: ForcingSpec::from_table(
                self.solver.grid.dim,
                &self
                    .solver
                    .source
                    .modes
                    .iter()
                    .copied()
                    .zip(self.solver.source.q.iter().copied())
                    .collect::<Vec<_>>(),
            ),
            eps_bar: self.solver.eps_bar(),
        }
    }

    pub fn record(&self) -> ScalarRecord {
        let grid = &self.solver.grid;
        ScalarRecord {
            t: self.t,
            g_norm_sq: grid.coeff_norm_sq(&self.g),
            dissipation: self.solver.kappa * grid.grad_coeff_norm_sq(&self.g),
        }
    }
}

/// Time-series row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarRecord {
    pub t: f64,
    /// `Σ b²`.
    pub g_norm_sq: f64,
    /// `κ Σ |k|² b²`.
    pub dissipation: f64,
}

/// Stationary `(u, g)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub trajectory: u64,
    pub u: SpectralField,
    pub g: SpectralField,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub kappa: f64,
    pub eps_bar: f64,
    /// `κ E‖∇g‖²` in coefficient units.
    pub dissipation: Estimate,
    /// `|κ E‖∇g‖² − ε̄| / ε̄`.
    pub balance_error: f64,
    /// `E‖g‖²`.
    pub variance: Estimate,
    /// `κ E‖g‖² = E‖f^κ‖²`.
    pub renormalized_variance: Estimate,
    /// Time-averaged `Σ|k|² b²` per integer shell.
    pub spectrum: Vec<f64>,
    pub tail_fraction: f64,
    pub resolved: bool,
    pub n_samples: usize,
    pub dt: f64,
    /// Largest sampled advective Courant bound.
    pub max_cfl: f64,
}

#[derive(Clone, Debug)]
pub struct ScalarRun {
    pub report: BalanceReport,
    /// Time series of the first trajectory.
    pub series: Vec<ScalarRecord>,
    pub snapshots: Vec<Snapshot>,
}

struct TrajectoryOutput {
    max_cfl: f64,
    series: Vec<ScalarRecord>,
    spectrum: Vec<f64>,
    snapshots: Vec<Snapshot>,
}

fn run_one(
    cfg: &ScalarConfig,
    solver: Arc<ScalarSolver>,
    stepper: Arc<FluidStepper>,
    seed: u64,
    traj: u64,
) -> Result<TrajectoryOutput> {
    let init = FluidInit::stationary_for(&cfg.fluid, cfg.fluid_burn_in);
    let fluid = FluidDriver::new(stepper, seed, traj, init)?;
    let mut d = ScalarDriver::new(solver.clone(), fluid, seed, traj);
    let dt = solver.dt;
    for _ in 0..(cfg.burn_in / dt).round() as usize {
        d.advance()?;
    }
    let n = (cfg.horizon / dt).round() as usize;
    let snap_stride = cfg.snapshot_every.map(|s| ((s / dt).round() as usize).max(1));
    let mut series = Vec::with_capacity(n / cfg.sample_every + 1);
    let mut spectrum: Vec<f64> = vec![];
    let mut snapshots = vec![];
    let mut max_cfl: f64 = 0.0;
    for s in 1..=n {
        d.advance()?;
        if s % cfg.sample_every == 0 {
            max_cfl = max_cfl.max(d.advective_cfl());
            series.push(d.record());
            let sp = solver.grid.gradient_spectrum(&d.g);
            if spectrum.is_empty() {
                spectrum = vec![0.0; sp.len()];
            }
            spectrum.iter_mut().zip(sp).for_each(|(a, b)| *a += b);
        }
        if snap_stride.is_some_and(|st| s % st == 0) {
            snapshots.push(Snapshot {
                t: d.t,
                trajectory: traj,
                u: d.velocity().clone(),
                g: d.scalar_field(),
            });
        }
    }
    let count = series.len().max(1) as f64;
    spectrum.iter_mut().for_each(|v| *v *= solver.kappa / count);
    Ok(TrajectoryOutput {
        max_cfl,
        series,
        spectrum,
        snapshots,
    })
}

/// Mean of a per-trajectory series with the larger of the pooled batch-means and
/// cross-trajectory standard errors.
fn series_estimate(per_traj: &[Vec<f64>], n_batches: usize) -> Estimate {
    let mut batch = Vec::new();
    let mut means = Vec::new();
    for s in per_traj {
        let nb = n_batches.min(s.len()).max(1);
        let len = s.len() / nb;
        for b in 0..nb {
            batch.push(mean(&s[b * len..(b + 1) * len]));
        }
        means.push(mean(s));
    }
    let se_b = std_error(&batch);
    let se_t = if means.len() > 1 { std_error(&means) } else { f64::NAN };
    let se = if se_t.is_nan() { se_b } else { se_b.max(se_t) };
    Estimate::new(mean(&means), se)
}

/// Stationary run of the coupled system; checks the balance and the resolution guard.
pub fn run_scalar(cfg: &ScalarConfig, seed: u64) -> Result<ScalarRun> {
    let solver = Arc::new(cfg.solver()?);
    let stepper = Arc::new(FluidStepper::new(&cfg.fluid)?);
    let outs: Vec<TrajectoryOutput> = (0..cfg.n_traj as u64)
        .into_par_iter()
        .map(|t| run_one(cfg, solver.clone(), stepper.clone(), seed, t))
        .collect::<Result<_>>()?;
    let diss: Vec<Vec<f64>> = outs
        .iter()
        .map(|o| o.series.iter().map(|r| r.dissipation).collect())
        .collect();
    let var: Vec<Vec<f64>> = outs
        .iter()
        .map(|o| o.series.iter().map(|r| r.g_norm_sq).collect())
        .collect();
    let kvar: Vec<Vec<f64>> = var
        .iter()
        .map(|s| s.iter().map(|v| v * cfg.kappa).collect())
        .collect();
    let dissipation = series_estimate(&diss, cfg.n_batches);
    let mut spectrum = vec![0.0; outs[0].spectrum.len()];
    for o in &outs {
        spectrum.iter_mut().zip(&o.spectrum).for_each(|(a, b)| *a += b / outs.len() as f64);
    }
    let tail_fraction = solver.grid.tail_fraction(&spectrum);
    let eps_bar = solver.eps_bar();
    let report = BalanceReport {
        kappa: cfg.kappa,
        eps_bar,
        balance_error: (dissipation.mean - eps_bar).abs() / eps_bar,
        dissipation,
        variance: series_estimate(&var, cfg.n_batches),
        renormalized_variance: series_estimate(&kvar, cfg.n_batches),
        spectrum,
        tail_fraction,
        resolved: tail_fraction < cfg.tail_limit,
        n_samples: diss.iter().map(|s| s.len()).sum(),
        dt: solver.dt,
        max_cfl: outs.iter().map(|o| o.max_cfl).fold(0.0, f64::max),
    };
    let mut outs = outs;
    let series = std::mem::take(&mut outs[0].series);
    let snapshots = outs.into_iter().flat_map(|o| o.snapshots).collect();
    Ok(ScalarRun {
        report,
        series,
        snapshots,
    })
}

/// Error out when the resolution guard was violated.
pub fn require_resolved(report: &BalanceReport, limit: f64) -> Result<()> {
    if report.tail_fraction >= limit {
        return Err(Error::Unresolved {
            tail_fraction: report.tail_fraction,
            limit,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub reports: Vec<BalanceReport>,
    /// Every run satisfies the balance within `tolerance` relative error.
    pub balance_ok: bool,
    pub tolerance: f64,
    /// `κ E‖g‖²` decreases along the sweep (ordered by decreasing κ) with each
    /// step separated by more than two joint standard errors.
    pub wad_decreasing: bool,
    pub wad_z: Vec<f64>,
}

/// Sweep over `kappas` with per-κ cutoffs; the sweep is reported in decreasing κ.
pub fn kappa_sweep(base: &ScalarConfig, kappas: &[(f64, i32)], seed: u64, tolerance: f64) -> Result<(SweepReport, Vec<ScalarRun>)> {
    let mut order: Vec<(f64, i32)> = kappas.to_vec();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut runs = Vec::new();
    for (kappa, cutoff) in order {
        let mut cfg = base.clone();
        cfg.kappa = kappa;
        cfg.cutoff = cutoff;
        runs.push(run_scalar(&cfg, seed)?);
    }
    let reports: Vec<BalanceReport> = runs.iter().map(|r| r.report.clone()).collect();
    let wad_z: Vec<f64> = reports
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0].renormalized_variance, &w[1].renormalized_variance);
            (a.mean - b.mean) / a.stderr.hypot(b.stderr)
        })
        .collect();
    Ok((
        SweepReport {
            balance_ok: reports.iter().all(|r| r.balance_error <= tolerance),
            tolerance,
            wad_decreasing: wad_z.iter().all(|z| *z > 2.0),
            wad_z,
            reports,
        },
        runs,
    ))
}

/// Per-trajectory residual of the Itô identity
/// `‖g_T‖² − ‖g_0‖² = ∫ (2ε̄ − 2κ‖∇g‖²) dt + martingale` along a series
/// sampled every step.
pub fn ito_residual(series: &[ScalarRecord], g0_norm_sq: f64, eps_bar: f64, dt: f64) -> f64 {
    let drift: f64 = series.iter().map(|r| 2.0 * eps_bar - 2.0 * r.dissipation).sum::<f64>() * dt;
    let last = series.last().map(|r| r.g_norm_sq).unwrap_or(g0_norm_sq);
    last - g0_norm_sq - drift
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientGrowthConfig {
    pub fluid: FluidModelConfig,
    /// Initial scalar; its gradient is evaluated at the particles.
    pub f0: SpectralField,
    pub horizon: f64,
    pub n_particles: usize,
    /// Independent fluid paths (each with its own particle cloud).
    #[serde(default = "one")]
    pub n_paths: usize,
    #[serde(default = "default_records")]
    pub n_records: usize,
    /// Fraction of the horizon skipped before fitting the rate.
    #[serde(default = "default_fit_start")]
    pub fit_start: f64,
    #[serde(default = "default_fluid_burn_in")]
    pub fluid_burn_in: f64,
}

fn default_records() -> usize {
    100
}
fn default_fit_start() -> f64 {
    0.25
}

impl GradientGrowthConfig {
    /// `f0 = sin x₁`.
    pub fn sine(fluid: FluidModelConfig, horizon: f64, n_particles: usize) -> Result<Self> {
        let dim = fluid.dim;
        let mut c = [0; 3];
        c[0] = 1;
        let k1 = Wavevector::new(&c[..dim])?;
        let mut f0 = SpectralField::zeros_on(dim, FieldKind::Scalar, &[k1])?;
        f0.set(&k1, 0, 1.0)?;
        Ok(Self {
            fluid,
            f0,
            horizon,
            n_particles,
            n_paths: 1,
            n_records: default_records(),
            fit_start: default_fit_start(),
            fluid_burn_in: default_fluid_burn_in(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub times: Vec<f64>,
    /// `[path][record]` log of the Monte-Carlo `‖∇f_t‖_{L¹}`.
    pub log_l1: Vec<Vec<f64>>,
    /// Fitted rate per path.
    pub path_rates: Vec<f64>,
    pub rate: Estimate,
    /// Comparison with a supplied top exponent.
    pub lambda: Option<Estimate>,
    pub joint_z: Option<f64>,
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (xs.iter().map(|x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

fn growth_path<const D: usize, S: FieldSource>(
    source: &mut S,
    f0: &SpectralField,
    cfg: &GradientGrowthConfig,
    seed: u64,
    path: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dt = source.dt();
    let mut rng = aux_rng(seed, path, 7);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut particles: Vec<(LagrangianState<D>, SVector<f64, D>)> = (0..cfg.n_particles)
        .map(|_| {
            let x = SVector::<f64, D>::from_fn(|_, _| rng.gen_range(0.0..two_pi));
            let gr = f0.eval_scalar_gradient(x.as_slice());
            let w = SVector::<f64, D>::from_fn(|i, _| gr[i]);
            let e1 = SVector::<f64, D>::from_fn(|i, _| if i == 0 { 1.0 } else { 0.0 });
            (LagrangianState::new(x, e1, e1), w)
        })
        .collect();
    let opts = FlowOptions::default();
    let n = (cfg.horizon / dt).round() as usize;
    let every = (n / cfg.n_records.max(1)).max(1);
    let vol = (D as f64) * two_pi.ln();
    let log_l1 = |ps: &[(LagrangianState<D>, SVector<f64, D>)]| {
        let logs: Vec<f64> = ps.iter().map(|(s, w)| s.log_pullback_norm(w)).collect();
        log_mean_exp(&logs) + vol
    };
    let mut times = vec![0.0];
    let mut logs = vec![log_l1(&particles)];
    for s in 1..=n {
        let ev = source.evaluator();
        for (p, _) in particles.iter_mut() {
            p.flow_step(ev, dt, &opts);
        }
        source.advance()?;
        if s % every == 0 {
            times.push(s as f64 * dt);
            logs.push(log_l1(&particles));
        }
    }
    Ok((times, logs))
}

fn fit_rate(times: &[f64], logs: &[f64], fit_start: f64) -> f64 {
    let t_end = *times.last().unwrap_or(&0.0);
    let (x, y): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(logs)
        .filter(|(t, _)| **t >= fit_start * t_end)
        .map(|(t, l)| (*t, *l))
        .unzip();
    linear_fit(&x, &y).0
}

fn growth_report(cfg: &GradientGrowthConfig, paths: Vec<(Vec<f64>, Vec<f64>)>, lambda: Option<Estimate>) -> GrowthReport {
    let times = paths[0].0.clone();
    let path_rates: Vec<f64> = paths.iter().map(|(t, l)| fit_rate(t, l, cfg.fit_start)).collect();
    let se = if path_rates.len() > 1 {
        std_error(&path_rates)
    } else {
        f64::NAN
    };
    let rate = Estimate::new(mean(&path_rates), se);
    GrowthReport {
        joint_z: lambda.map(|l| rate.z_distance(&l)),
        lambda,
        times,
        log_l1: paths.into_iter().map(|p| p.1).collect(),
        path_rates,
        rate,
    }
}

/// Monte-Carlo `‖∇f_t‖_{L¹} = ∫ |A_t^{-⊤}(x) ∇f₀(x)| dx` with uniform particles on
/// each fluid path, and the fitted exponential rate.
pub fn inviscid_gradient_growth(cfg: &GradientGrowthConfig, seed: u64, lambda: Option<Estimate>) -> Result<GrowthReport> {
    cfg.fluid.validate()?;
    if cfg.n_particles == 0 || cfg.n_paths == 0 {
        return Err(invalid("n_particles", "need at least one particle and one path"));
    }
    let stepper = Arc::new(FluidStepper::new(&cfg.fluid)?);
    let paths: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let init = FluidInit::stationary_for(&cfg.fluid, cfg.fluid_burn_in);
            let mut driver = FluidDriver::new(stepper.clone(), seed, p, init)?;
            match cfg.fluid.dim {
                2 => growth_path::<2, _>(&mut driver, &cfg.f0, cfg, seed, p),
                _ => growth_path::<3, _>(&mut driver, &cfg.f0, cfg, seed, p),
            }
        })
        .collect::<Result<_>>()?;
    Ok(growth_report(cfg, paths, lambda))
}

/// Same estimator in a time-independent field.
pub fn frozen_gradient_growth(u: &SpectralField, cfg: &GradientGrowthConfig, dt: f64, seed: u64) -> Result<GrowthReport> {
    let mut src = FrozenField::new(u, dt);
    let path = match u.dim() {
        2 => growth_path::<2, _>(&mut src, &cfg.f0, cfg, seed, 0)?,
        _ => growth_path::<3, _>(&mut src, &cfg.f0, cfg, seed, 0)?,
    };
    Ok(growth_report(cfg, vec![path], None))
}
