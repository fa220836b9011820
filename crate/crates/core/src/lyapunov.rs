//! Lyapunov exponents of the Jacobian cocycle by QR re-orthonormalization.
//!
//! Every trajectory couples one fluid path to one particle. A tangent frame and a
//! cotangent frame are pushed forward with the step propagators and factored every
//! `qr_every` steps; the accumulated `log R_ii` give the exponent spectra of `A` and
//! `A^{-⊤}`. Time is split into equal batches whose mean rates give standard errors.

use std::sync::Arc;

use nalgebra::SVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fluid::{FluidDriver, FluidInit, FluidModelConfig, FluidStepper};
use crate::forcing::aux_rng;
use crate::lagrangian::{FlowOptions, LagrangianState, TangentFrame};
use crate::spectral::{FieldEvaluator, SpectralField};
use crate::stats::{mean, std_error, Estimate, Z95};

/// Source of the velocity field seen by particles, one step at a time.
pub trait FieldSource {
    fn evaluator(&self) -> &FieldEvaluator;
    fn advance(&mut self) -> Result<()>;
    fn dt(&self) -> f64;
}

impl FieldSource for FluidDriver {
    fn evaluator(&self) -> &FieldEvaluator {
        FluidDriver::evaluator(self)
    }
    fn advance(&mut self) -> Result<()> {
        FluidDriver::advance(self)
    }
    fn dt(&self) -> f64 {
        FluidDriver::dt(self)
    }
}

/// Time-independent field.
#[derive(Clone, Debug)]
pub struct FrozenField {
    evaluator: FieldEvaluator,
    dt: f64,
}

impl FrozenField {
    pub fn new(u: &SpectralField, dt: f64) -> Self {
        Self {
            evaluator: u.evaluator(),
            dt,
        }
    }
}

impl FieldSource for FrozenField {
    fn evaluator(&self) -> &FieldEvaluator {
        &self.evaluator
    }
    fn advance(&mut self) -> Result<()> {
        Ok(())
    }
    fn dt(&self) -> f64 {
        self.dt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConfig {
    pub fluid: FluidModelConfig,
    /// Measured time per trajectory (after the transient).
    pub horizon: f64,
    #[serde(default = "default_transient")]
    pub transient: f64,
    pub n_traj: usize,
    #[serde(default = "default_qr_every")]
    pub qr_every: usize,
    #[serde(default = "default_batches")]
    pub n_batches: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Initial directions for the all-directions expansion check (0 disables).
    #[serde(default)]
    pub n_directions: usize,
    /// Burn-in for systems without a closed-form stationary law.
    #[serde(default = "default_burn_in")]
    pub fluid_burn_in: f64,
    /// Flag the estimate when the 95% CI of `λ_1` is wider than this.
    #[serde(default)]
    pub ci_width_target: Option<f64>,
    #[serde(default = "default_reproject")]
    pub reproject_every: u64,
}

fn default_transient() -> f64 {
    10.0
}
fn default_qr_every() -> usize {
    10
}
fn default_batches() -> usize {
    50
}
fn default_substeps() -> usize {
    1
}
fn default_burn_in() -> f64 {
    20.0
}
fn default_reproject() -> u64 {
    1000
}

impl LyapunovConfig {
    pub fn new(fluid: FluidModelConfig, horizon: f64, n_traj: usize) -> Self {
        Self {
            fluid,
            horizon,
            transient: default_transient(),
            n_traj,
            qr_every: default_qr_every(),
            n_batches: default_batches(),
            substeps: default_substeps(),
            n_directions: 0,
            fluid_burn_in: default_burn_in(),
            ci_width_target: None,
            reproject_every: default_reproject(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(invalid("horizon", "must be positive"));
        }
        if self.n_traj == 0 {
            return Err(invalid("n_traj", "need at least one trajectory"));
        }
        if self.qr_every == 0 {
            return Err(invalid("qr_every", "must be positive"));
        }
        if self.n_batches < 2 {
            return Err(invalid("n_batches", "need at least two batches"));
        }
        self.fluid.validate()
    }

    fn flow_options(&self) -> FlowOptions {
        FlowOptions {
            substeps: self.substeps,
            reproject_every: self.reproject_every,
        }
    }
}

/// Per-trajectory output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub trajectory: u64,
    /// `[batch][i]` mean rate of `log R_ii` over each batch.
    pub batch_rates: Vec<Vec<f64>>,
    /// Same for the cotangent frame.
    pub batch_rates_inv_t: Vec<Vec<f64>>,
    /// Batch boundary times (measured from the end of the transient).
    pub batch_times: Vec<f64>,
    /// `[direction][boundary]` values of `log |A_t v|`.
    pub direction_logs: Vec<Vec<f64>>,
    pub final_det: f64,
    pub duality_error: f64,
}

impl TrajectoryRecord {
    pub fn rate(&self, i: usize) -> f64 {
        mean(&self.batch_rates.iter().map(|b| b[i]).collect::<Vec<_>>())
    }
}

/// Initial directions: equispaced angles on `[0, π)` in 2D, a Fibonacci set on the
/// upper hemisphere in 3D.
pub fn direction_grid(dim: usize, n: usize) -> Vec<Vec<f64>> {
    let pi = std::f64::consts::PI;
    (0..n)
        .map(|j| {
            if dim == 2 {
                let th = pi * j as f64 / n as f64;
                vec![th.cos(), th.sin()]
            } else {
                let z = (j as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = j as f64 * pi * (3.0 - 5f64.sqrt());
                vec![r * phi.cos(), r * phi.sin(), z]
            }
        })
        .collect()
}

fn random_unit<const D: usize, R: Rng>(rng: &mut R) -> SVector<f64, D> {
    loop {
        let v = SVector::<f64, D>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Random initial particle state for a trajectory.
pub fn initial_particle<const D: usize>(seed: u64, trajectory: u64) -> LagrangianState<D> {
    let mut rng = aux_rng(seed, trajectory, 1);
    let x = SVector::<f64, D>::from_fn(|_, _| rng.gen_range(0.0..2.0 * std::f64::consts::PI));
    let v = random_unit::<D, _>(&mut rng);
    let w = random_unit::<D, _>(&mut rng);
    LagrangianState::new(x, v, w)
}

/// Core loop on an arbitrary field source.
pub fn run_cocycle<const D: usize, S: FieldSource>(
    source: &mut S,
    particle: LagrangianState<D>,
    cfg: &LyapunovConfig,
    trajectory: u64,
) -> Result<(TrajectoryRecord, LagrangianState<D>)> {
    let dt = source.dt();
    let opts = cfg.flow_options();
    let mut ls = particle;
    let mut fr = TangentFrame::<D>::identity();
    let mut fr_it = TangentFrame::<D>::identity();
    let dirs: Vec<SVector<f64, D>> = direction_grid(D, cfg.n_directions)
        .into_iter()
        .map(|v| SVector::<f64, D>::from_column_slice(&v))
        .collect();

    let mut step = |ls: &mut LagrangianState<D>,
                    fr: &mut TangentFrame<D>,
                    fr_it: &mut TangentFrame<D>,
                    n: usize|
     -> Result<()> {
        let p = ls.flow_step(source.evaluator(), dt, &opts);
        fr.apply(&p.p);
        fr_it.apply(&p.p_inv_t);
        source.advance()?;
        if (n + 1) % cfg.qr_every == 0 {
            fr.orthonormalize();
            fr_it.orthonormalize();
        }
        Ok(())
    };

    let n_transient = (cfg.transient / dt).round() as usize;
    for n in 0..n_transient {
        step(&mut ls, &mut fr, &mut fr_it, n)?;
    }
    fr.orthonormalize();
    fr_it.orthonormalize();

    let n_steps = ((cfg.horizon / dt).round() as usize).max(cfg.n_batches);
    let per_batch = n_steps / cfg.n_batches;
    let mut batch_rates = Vec::with_capacity(cfg.n_batches);
    let mut batch_rates_inv_t = Vec::with_capacity(cfg.n_batches);
    let mut batch_times = vec![0.0];
    let mut direction_logs: Vec<Vec<f64>> = dirs.iter().map(|v| vec![ls.log_stretch(v)]).collect();
    let mut prev = fr.log_r;
    let mut prev_it = fr_it.log_r;
    for b in 0..cfg.n_batches {
        for n in 0..per_batch {
            step(&mut ls, &mut fr, &mut fr_it, n)?;
        }
        fr.orthonormalize();
        fr_it.orthonormalize();
        let span = per_batch as f64 * dt;
        batch_rates.push(((fr.log_r - prev) / span).iter().copied().collect());
        batch_rates_inv_t.push(((fr_it.log_r - prev_it) / span).iter().copied().collect());
        prev = fr.log_r;
        prev_it = fr_it.log_r;
        batch_times.push((b + 1) as f64 * span);
        for (log, v) in direction_logs.iter_mut().zip(&dirs) {
            log.push(ls.log_stretch(v));
        }
    }
    let record = TrajectoryRecord {
        trajectory,
        batch_rates,
        batch_rates_inv_t,
        batch_times,
        direction_logs,
        final_det: ls.det(),
        duality_error: ls.duality_check().max_rel_error,
    };
    Ok((record, ls))
}

fn run_fluid_trajectory<const D: usize>(
    cfg: &LyapunovConfig,
    stepper: Arc<FluidStepper>,
    seed: u64,
    trajectory: u64,
) -> Result<TrajectoryRecord> {
    let init = FluidInit::stationary_for(&cfg.fluid, cfg.fluid_burn_in);
    let mut driver = FluidDriver::new(stepper, seed, trajectory, init)?;
    let particle = initial_particle::<D>(seed, trajectory);
    Ok(run_cocycle(&mut driver, particle, cfg, trajectory)?.0)
}

/// Run trajectories `ids` in parallel; results come back in `ids` order.
pub fn run_trajectories(cfg: &LyapunovConfig, seed: u64, ids: &[u64]) -> Result<Vec<TrajectoryRecord>> {
    cfg.validate()?;
    let stepper = Arc::new(FluidStepper::new(&cfg.fluid)?);
    ids.par_iter()
        .map(|&t| match cfg.fluid.dim {
            2 => run_fluid_trajectory::<2>(cfg, stepper.clone(), seed, t),
            _ => run_fluid_trajectory::<3>(cfg, stepper.clone(), seed, t),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentEstimate {
    pub lambda: Vec<f64>,
    /// Reported standard error: the larger of the two estimates below.
    pub stderr: Vec<f64>,
    pub ci: Vec<[f64; 2]>,
    /// Batch means pooled over all trajectories.
    pub stderr_batch: Vec<f64>,
    /// Spread of per-trajectory means.
    pub stderr_traj: Vec<f64>,
    pub sum: f64,
    pub sum_stderr: f64,
    pub lambda_inv_t: Vec<f64>,
    pub stderr_inv_t: Vec<f64>,
    pub horizon: f64,
    pub n_traj: usize,
    pub n_batches: usize,
    pub dt: f64,
    /// CI wider than the requested target.
    pub horizon_too_short: bool,
}

impl ExponentEstimate {
    pub fn top(&self) -> Estimate {
        Estimate::new(self.lambda[0], self.stderr[0])
    }

    pub fn top_inv_t(&self) -> Estimate {
        Estimate::new(self.lambda_inv_t[0], self.stderr_inv_t[0])
    }
}

fn component_stats(records: &[TrajectoryRecord], pick: impl Fn(&TrajectoryRecord, usize) -> f64) -> (f64, f64, f64) {
    let nb = records[0].batch_rates.len();
    let pooled: Vec<f64> = records
        .iter()
        .flat_map(|r| (0..nb).map(|b| pick(r, b)).collect::<Vec<_>>())
        .collect();
    let per_traj: Vec<f64> = records
        .iter()
        .map(|r| mean(&(0..nb).map(|b| pick(r, b)).collect::<Vec<_>>()))
        .collect();
    let se_batch = std_error(&pooled);
    let se_traj = if per_traj.len() >= 2 {
        std_error(&per_traj)
    } else {
        f64::NAN
    };
    (mean(&per_traj), se_batch, se_traj)
}

pub fn aggregate(cfg: &LyapunovConfig, records: &[TrajectoryRecord], dt: f64) -> ExponentEstimate {
    let d = records[0].batch_rates[0].len();
    let mut est = ExponentEstimate {
        lambda: vec![],
        stderr: vec![],
        ci: vec![],
        stderr_batch: vec![],
        stderr_traj: vec![],
        sum: 0.0,
        sum_stderr: 0.0,
        lambda_inv_t: vec![],
        stderr_inv_t: vec![],
        horizon: cfg.horizon,
        n_traj: records.len(),
        n_batches: cfg.n_batches,
        dt,
        horizon_too_short: false,
    };
    let combine = |a: f64, b: f64| if b.is_nan() { a } else { a.max(b) };
    for i in 0..d {
        let (m, sb, st) = component_stats(records, |r, b| r.batch_rates[b][i]);
        let se = combine(sb, st);
        est.lambda.push(m);
        est.stderr.push(se);
        est.ci.push(Estimate::new(m, se).ci95());
        est.stderr_batch.push(sb);
        est.stderr_traj.push(st);
        let (mi, sbi, sti) = component_stats(records, |r, b| r.batch_rates_inv_t[b][i]);
        est.lambda_inv_t.push(mi);
        est.stderr_inv_t.push(combine(sbi, sti));
    }
    let (s, sb, st) = component_stats(records, |r, b| r.batch_rates[b].iter().sum());
    est.sum = s;
    est.sum_stderr = combine(sb, st);
    if let Some(w) = cfg.ci_width_target {
        est.horizon_too_short = 2.0 * Z95 * est.stderr[0] > w;
    }
    est
}

/// Exponent spectrum of the configured system.
pub fn estimate_exponents(cfg: &LyapunovConfig, seed: u64) -> Result<(ExponentEstimate, Vec<TrajectoryRecord>)> {
    let ids: Vec<u64> = (0..cfg.n_traj as u64).collect();
    let records = run_trajectories(cfg, seed, &ids)?;
    let dt = cfg.fluid.resolved_dt()?;
    Ok((aggregate(cfg, &records, dt), records))
}

/// Exponents of a time-independent field seen from one particle.
pub fn frozen_exponents<const D: usize>(
    u: &SpectralField,
    x0: SVector<f64, D>,
    cfg: &LyapunovConfig,
    dt: f64,
) -> Result<(ExponentEstimate, TrajectoryRecord)> {
    let mut src = FrozenField::new(u, dt);
    let v = SVector::<f64, D>::from_fn(|i, _| if i == 0 { 1.0 } else { 0.0 });
    let (rec, _) = run_cocycle(&mut src, LagrangianState::new(x0, v, v), cfg, 0)?;
    let est = aggregate(cfg, std::slice::from_ref(&rec), dt);
    Ok((est, rec))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub directions: Vec<Vec<f64>>,
    /// Mean over trajectories of the growth rate of `log |A_t v|` over the measured window.
    pub rates: Vec<f64>,
    pub rate_stderr: Vec<f64>,
    pub lambda1: f64,
    pub lambda1_ci: [f64; 2],
    /// `max_v |rate(v) - λ_1|`.
    pub max_deviation: f64,
    pub all_within_ci: bool,
}

pub fn expansion_all_directions(
    cfg: &LyapunovConfig,
    est: &ExponentEstimate,
    records: &[TrajectoryRecord],
) -> ExpansionReport {
    let directions = direction_grid(cfg.fluid.dim, cfg.n_directions);
    let mut rates = Vec::new();
    let mut rate_stderr = Vec::new();
    for j in 0..directions.len() {
        let slopes: Vec<f64> = records
            .iter()
            .map(|r| {
                let l = &r.direction_logs[j];
                (l[l.len() - 1] - l[0]) / r.batch_times[r.batch_times.len() - 1]
            })
            .collect();
        rates.push(mean(&slopes));
        rate_stderr.push(if slopes.len() > 1 {
            std_error(&slopes)
        } else {
            f64::NAN
        });
    }
    let ci = est.ci[0];
    let max_deviation = rates
        .iter()
        .map(|r| (r - est.lambda[0]).abs())
        .fold(0.0, f64::max);
    ExpansionReport {
        all_within_ci: rates.iter().all(|r| *r >= ci[0] && *r <= ci[1]),
        directions,
        rates,
        rate_stderr,
        lambda1: est.lambda[0],
        lambda1_ci: ci,
        max_deviation,
    }
}

/// Occupation histogram of `(x, [v])` on `T^d × P^{d-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectiveHistogram {
    pub dim: usize,
    /// Bins per spatial axis.
    pub n_x: usize,
    /// Bins per projective coordinate (angle in 2D; height and azimuth in 3D).
    pub n_v: usize,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl ProjectiveHistogram {
    pub fn new(dim: usize, n_x: usize, n_v: usize) -> Self {
        let nv = if dim == 2 { n_v } else { n_v * n_v };
        Self {
            dim,
            n_x,
            n_v,
            counts: vec![0; n_x.pow(dim as u32) * nv],
            total: 0,
        }
    }

    fn v_bins(&self) -> usize {
        if self.dim == 2 {
            self.n_v
        } else {
            self.n_v * self.n_v
        }
    }

    pub fn record(&mut self, x: &[f64], v: &[f64]) {
        let two_pi = 2.0 * std::f64::consts::PI;
        let pi = std::f64::consts::PI;
        let mut idx = 0usize;
        for &xi in x.iter().rev() {
            let b = ((xi.rem_euclid(two_pi) / two_pi) * self.n_x as f64) as usize;
            idx = idx * self.n_x + b.min(self.n_x - 1);
        }
        let vb = if self.dim == 2 {
            let th = v[1].atan2(v[0]).rem_euclid(pi);
            ((th / pi * self.n_v as f64) as usize).min(self.n_v - 1)
        } else {
            let s = if v[2] < 0.0 { -1.0 } else { 1.0 };
            let z = s * v[2];
            let phi = (s * v[1]).atan2(s * v[0]).rem_euclid(two_pi);
            let bz = ((z * self.n_v as f64) as usize).min(self.n_v - 1);
            let bp = ((phi / two_pi * self.n_v as f64) as usize).min(self.n_v - 1);
            bz * self.n_v + bp
        };
        let nvb = self.v_bins();
        self.counts[idx * nvb + vb] += 1;
        self.total += 1;
    }

    /// Total-variation distance between normalized histograms.
    pub fn tv_distance(&self, other: &Self) -> f64 {
        let (a, b) = (self.total.max(1) as f64, other.total.max(1) as f64);
        0.5 * self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(p, q)| (*p as f64 / a - *q as f64 / b).abs())
            .sum::<f64>()
    }

    /// Counts of the spatial marginal.
    pub fn x_marginal(&self) -> Vec<u64> {
        self.counts
            .chunks(self.v_bins())
            .map(|c| c.iter().sum())
            .collect()
    }

    /// Pearson statistic of the spatial marginal against uniform, with its degrees of freedom.
    pub fn x_uniformity_chi2(&self) -> (f64, usize) {
        let m = self.x_marginal();
        let e = self.total as f64 / m.len() as f64;
        let chi2 = m.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        (chi2, m.len() - 1)
    }

    /// Point mass check: index of the only occupied bin, if any.
    pub fn single_bin(&self) -> Option<usize> {
        let occupied: Vec<usize> = self
            .counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(i, _)| i)
            .collect();
        (occupied.len() == 1).then(|| occupied[0])
    }
}

fn histogram_run<const D: usize, S: FieldSource>(
    source: &mut S,
    mut ls: LagrangianState<D>,
    horizon: f64,
    sample_every: usize,
    hist: &mut ProjectiveHistogram,
) -> Result<()> {
    let dt = source.dt();
    let opts = FlowOptions::default();
    let n = (horizon / dt).round() as usize;
    for s in 0..n {
        ls.flow_step(source.evaluator(), dt, &opts);
        source.advance()?;
        if (s + 1) % sample_every.max(1) == 0 {
            hist.record(ls.x.as_slice(), ls.v.as_slice());
        }
    }
    Ok(())
}

/// Occupation histogram of one long trajectory of the projective process.
pub fn projective_measure_histogram(
    cfg: &LyapunovConfig,
    seed: u64,
    trajectory: u64,
    horizon: f64,
    n_x: usize,
    n_v: usize,
    sample_every: usize,
) -> Result<ProjectiveHistogram> {
    cfg.validate()?;
    let stepper = Arc::new(FluidStepper::new(&cfg.fluid)?);
    let init = FluidInit::stationary_for(&cfg.fluid, cfg.fluid_burn_in);
    let mut driver = FluidDriver::new(stepper, seed, trajectory, init)?;
    let mut hist = ProjectiveHistogram::new(cfg.fluid.dim, n_x, n_v);
    match cfg.fluid.dim {
        2 => histogram_run(
            &mut driver,
            initial_particle::<2>(seed, trajectory),
            horizon,
            sample_every,
            &mut hist,
        )?,
        _ => histogram_run(
            &mut driver,
            initial_particle::<3>(seed, trajectory),
            horizon,
            sample_every,
            &mut hist,
        )?,
    }
    Ok(hist)
}

/// Histogram of a frozen field seen from one particle.
pub fn frozen_histogram<const D: usize>(
    u: &SpectralField,
    particle: LagrangianState<D>,
    dt: f64,
    horizon: f64,
    n_x: usize,
    n_v: usize,
) -> Result<ProjectiveHistogram> {
    let mut src = FrozenField::new(u, dt);
    let mut hist = ProjectiveHistogram::new(D, n_x, n_v);
    histogram_run(&mut src, particle, horizon, 1, &mut hist)?;
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forcing::ForcingSpec;
    use crate::spectral::{k, velocity_from_terms, FieldKind};
    use crate::stats::linear_fit;

    fn frozen_cfg(horizon: f64) -> LyapunovConfig {
        let mut c = LyapunovConfig::new(
            FluidModelConfig::stokes(ForcingSpec::stokes_four_mode(1.0)),
            horizon,
            1,
        );
        c.transient = 0.0;
        c.n_batches = 10;
        c.n_directions = 8;
        c
    }

    #[test]
    fn zero_field_has_zero_exponents() {
        let u = SpectralField::zeros_on(2, FieldKind::Velocity, &[k(&[1, 0])]).unwrap();
        let (est, _) = frozen_exponents::<2>(&u, SVector::<f64, 2>::new(1.0, 2.0), &frozen_cfg(5.0), 0.01).unwrap();
        assert_eq!(est.lambda, vec![0.0, 0.0]);
    }

    #[test]
    fn frozen_strain_exponents_and_directions() {
        let f = 0.5;
        let u = velocity_from_terms(2, &[(k(&[0, 1]), 0, -f), (k(&[1, 0]), 0, f)]).unwrap();
        let mut cfg = frozen_cfg(20.0);
        cfg.transient = 5.0;
        let (est, rec) = frozen_exponents::<2>(&u, SVector::<f64, 2>::zeros(), &cfg, 0.01).unwrap();
        assert!((est.lambda[0] - f).abs() < 1e-3, "{:?}", est.lambda);
        assert!((est.lambda[1] + f).abs() < 1e-3);
        assert!(est.sum.abs() < 1e-10);
        // the stable direction (1,-1)/√2 sits between grid angles; check the
        // grid slope at angle 3π/4 directly
        let j = 6; // 6π/8
        let slope = linear_fit(&rec.batch_times, &rec.direction_logs[j]).0;
        assert!((slope + f).abs() < 1e-6, "{slope}");
        for (jj, logs) in rec.direction_logs.iter().enumerate() {
            if jj != j {
                let s = linear_fit(&rec.batch_times, logs).0;
                assert!(s > 0.3, "{jj}: {s}");
            }
        }
    }

    #[test]
    fn zero_field_histogram_is_point_mass() {
        let u = SpectralField::zeros_on(2, FieldKind::Velocity, &[k(&[1, 0])]).unwrap();
        let p = LagrangianState::new(
            SVector::<f64, 2>::new(1.0, 1.0),
            SVector::<f64, 2>::new(0.3, 0.4),
            SVector::<f64, 2>::x(),
        );
        let h = frozen_histogram(&u, p, 0.1, 10.0, 4, 8).unwrap();
        assert!(h.single_bin().is_some());
    }

    #[test]
    fn stokes_short_run_is_consistent() {
        let mut cfg = LyapunovConfig::new(
            FluidModelConfig::stokes(ForcingSpec::stokes_four_mode(1.0)).with_dt(0.02),
            50.0,
            2,
        );
        cfg.n_batches = 10;
        let (a, recs) = estimate_exponents(&cfg, 1).unwrap();
        let (b, _) = estimate_exponents(&cfg, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.sum.abs() < 1e-6);
        for r in &recs {
            assert!((r.final_det - 1.0).abs() < 1e-6);
        }
    }
}
