//! Dispatch of configured experiments to the library.

use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use stochflow::control::{
    control_to_forcing, endpoint_error, integrate_plan, jacobian_growth_demo, noise_shadowing_probe, pde_residual,
    synthesize_control, ShadowingConfig,
};
use stochflow::fluid::{diagnostics, FluidDriver, FluidInit, FluidModelConfig, FluidState, FluidStepper, FluidVariant};
use stochflow::forcing::build_scalar_forcing;
use stochflow::hormander::{
    coordinate_modes, hormander_closure, matrix_modes, sample_points, spanning_rank, ClosureConfig, Target,
};
use stochflow::lyapunov::{aggregate, expansion_all_directions, run_trajectories, LyapunovConfig, TrajectoryRecord};
use stochflow::scalar::{kappa_sweep, run_scalar, ScalarConfig, ScalarRun, Snapshot};
use stochflow::spectral::symmetric_closure;
use stochflow::yaglom::{yaglom_trend, StructureFunctionTable};

use crate::config::{
    config_hash, ControlExperiment, Experiment, ExperimentConfig, HormanderExperiment, ScalarExperiment,
    SimulateConfig, YaglomExperiment,
};
use crate::output::{clear_checkpoint, load_checkpoint, save_checkpoint, OutputDir};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after writing this many checkpoints (for exercising resume).
    pub halt_after: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Interrupted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_s: f64,
    pub outcome: Outcome,
    pub resumed: bool,
    pub artifacts: Vec<String>,
    pub metrics: Value,
}

pub struct RunResult {
    pub outcome: Outcome,
    pub summary: Value,
    pub manifest: RunManifest,
}

struct Ctx<'a> {
    out: OutputDir,
    hash: String,
    seed: u64,
    opts: &'a RunOptions,
    checkpoints: usize,
    resumed: bool,
}

impl Ctx<'_> {
    fn resume_payload<T: serde::de::DeserializeOwned>(&mut self, kind: &str) -> Result<Option<T>> {
        if !self.opts.resume {
            return Ok(None);
        }
        let p = load_checkpoint(&self.out, &self.hash, kind)?;
        self.resumed = p.is_some();
        Ok(p)
    }

    /// Save and report whether the run should stop here.
    fn checkpoint<T: Serialize>(&mut self, kind: &str, payload: &T) -> Result<bool> {
        save_checkpoint(&self.out, &self.hash, kind, payload)?;
        self.checkpoints += 1;
        Ok(self.opts.halt_after.is_some_and(|h| self.checkpoints >= h))
    }
}

enum Step {
    Done { summary: Value, metrics: Value },
    Halted,
}

/// Run the configured experiment and write its artifacts and manifest.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunResult> {
    let start = Instant::now();
    let mut ctx = Ctx {
        out: OutputDir::create(&cfg.output.dir)?,
        hash: config_hash(cfg),
        seed: cfg.seed,
        opts,
        checkpoints: 0,
        resumed: false,
    };
    let every = cfg.output.checkpoint_every;
    let step = match &cfg.experiment {
        Experiment::Simulate(c) => simulate(c, every, &mut ctx)?,
        Experiment::Lyapunov(c) => lyapunov(c, every, &mut ctx)?,
        Experiment::Scalar(c) => scalar(c, &mut ctx)?,
        Experiment::Yaglom(c) => yaglom(c, &mut ctx)?,
        Experiment::Hormander(c) => hormander(c, &mut ctx)?,
        Experiment::Control(c) => control(c, &mut ctx)?,
    };
    let (outcome, summary, metrics) = match step {
        Step::Done { summary, metrics } => {
            ctx.out.json("summary.json", &summary)?;
            clear_checkpoint(&ctx.out)?;
            (Outcome::Completed, summary, metrics)
        }
        Step::Halted => (Outcome::Interrupted, Value::Null, Value::Null),
    };
    let manifest = RunManifest {
        kind: cfg.experiment.kind().to_string(),
        config_hash: ctx.hash.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        wall_time_s: start.elapsed().as_secs_f64(),
        outcome,
        resumed: ctx.resumed,
        artifacts: ctx.out.artifacts.clone(),
        metrics,
    };
    ctx.out.json("manifest.json", &manifest)?;
    Ok(RunResult {
        outcome,
        summary,
        manifest,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SimRow {
    trajectory: u64,
    t: f64,
    energy: f64,
    enstrophy: f64,
    sup_norm: f64,
}

#[derive(Serialize, Deserialize)]
struct SimCurrent {
    trajectory: u64,
    step: usize,
    state: FluidState,
    counters: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct SimCheckpoint {
    rows: Vec<SimRow>,
    current: Option<SimCurrent>,
    next_trajectory: u64,
}

fn sim_row(trajectory: u64, state: &FluidState) -> SimRow {
    let d = diagnostics(state);
    SimRow {
        trajectory,
        t: d.t,
        energy: d.energy,
        enstrophy: d.enstrophy,
        sup_norm: d.sup_norm,
    }
}

/// `E Σ a² = Σ (d−1) q²/(2λ_k)` for the linear model.
fn stokes_energy(fluid: &FluidModelConfig) -> Result<Option<f64>> {
    if fluid.variant != FluidVariant::Stokes {
        return Ok(None);
    }
    let d1 = (fluid.dim - 1) as f64;
    let e = fluid
        .forcing
        .amplitudes()?
        .iter()
        .map(|(k, q)| {
            let k2 = k.norm_sq() as f64;
            d1 * q * q / (2.0 * (fluid.nu * k2 + fluid.eta * k2 * k2))
        })
        .sum();
    Ok(Some(e))
}

fn simulate(c: &SimulateConfig, every: usize, ctx: &mut Ctx) -> Result<Step> {
    if !(c.horizon > 0.0) || c.n_traj == 0 || !(c.record_every > 0.0) {
        bail!("simulate needs horizon > 0, n_traj ≥ 1 and record_every > 0");
    }
    let stepper = Arc::new(FluidStepper::new(&c.fluid)?);
    let dt = stepper.dt();
    let n_steps = (c.horizon / dt).round() as usize;
    let stride = ((c.record_every / dt).round() as usize).max(1);
    let init = c.init.unwrap_or_else(|| FluidInit::stationary_for(&c.fluid, 20.0));
    let cp: Option<SimCheckpoint> = ctx.resume_payload("simulate")?;
    let (mut rows, mut current, first) = match cp {
        Some(cp) => (cp.rows, cp.current, cp.next_trajectory),
        None => (vec![], None, 0),
    };
    let mut since = 0;
    for traj in first..c.n_traj as u64 {
        let (mut driver, mut step) = match current.take() {
            Some(cur) if cur.trajectory == traj => (
                FluidDriver::from_parts(stepper.clone(), ctx.seed, traj, cur.state, &cur.counters)?,
                cur.step,
            ),
            _ => {
                let d = FluidDriver::new(stepper.clone(), ctx.seed, traj, init)?;
                rows.push(sim_row(traj, d.state()));
                (d, 0)
            }
        };
        while step < n_steps {
            driver.advance()?;
            step += 1;
            if step % stride != 0 {
                continue;
            }
            rows.push(sim_row(traj, driver.state()));
            since += 1;
            if every > 0 && since % every == 0 && step < n_steps {
                let cp = SimCheckpoint {
                    current: Some(SimCurrent {
                        trajectory: traj,
                        step,
                        state: driver.state().clone(),
                        counters: driver.counters(),
                    }),
                    next_trajectory: traj,
                    rows: rows.clone(),
                };
                if ctx.checkpoint("simulate", &cp)? {
                    return Ok(Step::Halted);
                }
            }
        }
    }
    ctx.out.csv_rows("series.csv", &rows)?;
    let mean = |f: fn(&SimRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let summary = json!({
        "n_traj": c.n_traj,
        "horizon": c.horizon,
        "dt": dt,
        "n_records": rows.len(),
        "mean_energy": mean(|r| r.energy),
        "mean_enstrophy": mean(|r| r.enstrophy),
        "max_sup_norm": rows.iter().map(|r| r.sup_norm).fold(0.0, f64::max),
        "stokes_energy": stokes_energy(&c.fluid)?,
    });
    let metrics = json!({ "mean_energy": summary["mean_energy"], "n_records": rows.len() });
    Ok(Step::Done { summary, metrics })
}

fn lyapunov(c: &LyapunovConfig, every: usize, ctx: &mut Ctx) -> Result<Step> {
    let mut records: Vec<TrajectoryRecord> = ctx.resume_payload("lyapunov")?.unwrap_or_default();
    let chunk = if every == 0 { c.n_traj } else { every };
    while records.len() < c.n_traj {
        let lo = records.len() as u64;
        let hi = (records.len() + chunk).min(c.n_traj) as u64;
        let ids: Vec<u64> = (lo..hi).collect();
        records.extend(run_trajectories(c, ctx.seed, &ids)?);
        if every > 0 && records.len() < c.n_traj && ctx.checkpoint("lyapunov", &records)? {
            return Ok(Step::Halted);
        }
    }
    let dt = c.fluid.resolved_dt()?;
    let est = aggregate(c, &records, dt);
    let expansion = (c.n_directions > 0).then(|| expansion_all_directions(c, &est, &records));
    let d = c.fluid.dim;
    let mut header = vec!["trajectory".to_string(), "batch".to_string(), "t_end".to_string()];
    header.extend((1..=d).map(|i| format!("rate_{i}")));
    header.extend((1..=d).map(|i| format!("rate_inv_t_{i}")));
    let mut table = vec![];
    for r in &records {
        for (b, rates) in r.batch_rates.iter().enumerate() {
            let mut row = vec![r.trajectory as f64, b as f64, r.batch_times[b + 1]];
            row.extend(rates);
            row.extend(&r.batch_rates_inv_t[b]);
            table.push(row);
        }
    }
    ctx.out.csv_table("rates.csv", &header, &table)?;
    ctx.out.jsonl("trajectories.jsonl", &records)?;
    let max_det_error = records.iter().map(|r| (r.final_det - 1.0).abs()).fold(0.0, f64::max);
    let max_duality_error = records.iter().map(|r| r.duality_error).fold(0.0, f64::max);
    let metrics = json!({
        "lambda_1": est.lambda[0],
        "lambda_1_ci": est.ci[0],
        "sum": est.sum,
        "horizon_too_short": est.horizon_too_short,
    });
    let summary = json!({
        "estimate": est,
        "expansion": expansion,
        "max_det_error": max_det_error,
        "max_duality_error": max_duality_error,
    });
    Ok(Step::Done { summary, metrics })
}

fn scalar_series(out: &mut OutputDir, name: &str, run: &ScalarRun) -> Result<()> {
    out.csv_rows(name, &run.series)
}

fn scalar(c: &ScalarExperiment, ctx: &mut Ctx) -> Result<Step> {
    if c.sweep.is_empty() {
        let run = run_scalar(&c.run, ctx.seed)?;
        scalar_series(&mut ctx.out, "series.csv", &run)?;
        spectrum_csv(&mut ctx.out, "spectrum.csv", &run.report.spectrum)?;
        let r = &run.report;
        let metrics = json!({
            "balance_error": r.balance_error,
            "within_tolerance": r.balance_error <= c.tolerance,
            "resolved": r.resolved,
        });
        return Ok(Step::Done {
            summary: json!({ "balance": r, "tolerance": c.tolerance }),
            metrics,
        });
    }
    let points: Vec<(f64, i32)> = c.sweep.iter().map(|p| (p.kappa, p.cutoff)).collect();
    let (sweep, runs) = kappa_sweep(&c.run, &points, ctx.seed, c.tolerance)?;
    for (i, run) in runs.iter().enumerate() {
        scalar_series(&mut ctx.out, &format!("series_{i}.csv"), run)?;
        spectrum_csv(&mut ctx.out, &format!("spectrum_{i}.csv"), &run.report.spectrum)?;
    }
    let metrics = json!({ "balance_ok": sweep.balance_ok, "wad_decreasing": sweep.wad_decreasing });
    Ok(Step::Done {
        summary: serde_json::to_value(&sweep)?,
        metrics,
    })
}

fn spectrum_csv(out: &mut OutputDir, name: &str, spectrum: &[f64]) -> Result<()> {
    let rows: Vec<Vec<f64>> = spectrum.iter().enumerate().map(|(s, v)| vec![s as f64, *v]).collect();
    out.csv_table(name, &["shell".into(), "kappa_grad_power".into()], &rows)
}

#[derive(Serialize, Deserialize)]
struct SnapshotLine {
    kappa: f64,
    snapshot: Snapshot,
}

fn yaglom_csv(out: &mut OutputDir, name: &str, table: &StructureFunctionTable, kappa_term: &[f64], source_term: &[f64]) -> Result<()> {
    let header: Vec<String> = [
        "ell",
        "d_bar",
        "d_bar_se",
        "g_bar",
        "g_bar_se",
        "a_bar",
        "compensated",
        "compensated_se",
        "kappa_term",
        "source_term",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<f64>> = (0..table.ell.len())
        .map(|j| {
            let l = table.ell[j];
            let e = table.eps_bar;
            vec![
                l,
                table.d_bar[j],
                table.d_bar_se[j],
                table.g_bar[j],
                table.g_bar_se[j],
                table.a_bar[j],
                table.d_bar[j] / (l * e),
                table.d_bar_se[j] / (l * e),
                kappa_term[j],
                source_term[j],
            ]
        })
        .collect();
    out.csv_table(name, &header, &rows)
}

fn yaglom(c: &YaglomExperiment, ctx: &mut Ctx) -> Result<Step> {
    let source = build_scalar_forcing(&c.run.source)?;
    let mut groups: Vec<(f64, Vec<Snapshot>)> = vec![];
    let mut balance = vec![];
    if let Some(path) = &c.snapshots_from {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let s: SnapshotLine = serde_json::from_str(line).with_context(|| format!("snapshot line {}", i + 1))?;
            match groups.iter_mut().find(|g| g.0 == s.kappa) {
                Some(g) => g.1.push(s.snapshot),
                None => groups.push((s.kappa, vec![s.snapshot])),
            }
        }
    } else {
        if c.run.snapshot_every.is_none() {
            bail!("yaglom needs `run.snapshot_every` (or `snapshots_from`)");
        }
        let points: Vec<(f64, i32)> = if c.sweep.is_empty() {
            vec![(c.run.kappa, c.run.cutoff)]
        } else {
            c.sweep.iter().map(|p| (p.kappa, p.cutoff)).collect()
        };
        for (kappa, cutoff) in points {
            let cfg = ScalarConfig {
                kappa,
                cutoff,
                ..c.run.clone()
            };
            let run = run_scalar(&cfg, ctx.seed)?;
            balance.push(run.report);
            groups.push((kappa, run.snapshots));
        }
        if c.store_snapshots {
            let lines = groups.iter().flat_map(|(k, ss)| {
                ss.iter().map(move |s| SnapshotLine {
                    kappa: *k,
                    snapshot: s.clone(),
                })
            });
            ctx.out.jsonl("snapshots.jsonl", lines)?;
        }
    }
    let refs: Vec<(f64, &[Snapshot])> = groups.iter().map(|(k, s)| (*k, s.as_slice())).collect();
    let trend = yaglom_trend(&refs, &source, &c.analysis)?;
    for (i, p) in trend.points.iter().enumerate() {
        yaglom_csv(
            &mut ctx.out,
            &format!("yaglom_{i}.csv"),
            &p.table,
            &p.check.kappa_term,
            &p.check.source_term,
        )?;
    }
    let metrics = json!({
        "ell_d": trend.ell_d,
        "ell_d_decreasing": trend.ell_d_decreasing,
        "sign_negative": trend.sign_negative,
        "khm_consistent": trend.khm_consistent,
        "plateau_ok": trend.plateau_ok,
        "resolution_limited": trend.resolution_limited,
    });
    Ok(Step::Done {
        summary: json!({ "trend": trend, "balance": balance }),
        metrics,
    })
}

fn hormander(c: &HormanderExperiment, ctx: &mut Ctx) -> Result<Step> {
    let mut modes = match &c.modes {
        Some(m) => symmetric_closure(m),
        None => match c.target {
            Target::Matrix => matrix_modes(c.dim),
            _ => symmetric_closure(&coordinate_modes(c.dim)),
        },
    };
    modes.retain(|k| !c.remove.contains(k));
    if let Some(cl) = &c.closure {
        let report = hormander_closure(&ClosureConfig {
            dim: c.dim,
            forced: modes,
            drift: cl.drift.clone(),
            target: c.target,
            depth: cl.depth,
            samples: c.samples,
            seed: ctx.seed,
        })?;
        let metrics = json!({ "verdict": report.verdict, "residual_codim": report.residual_codim });
        return Ok(Step::Done {
            summary: serde_json::to_value(&report)?,
            metrics,
        });
    }
    let points = sample_points(c.target, c.dim, c.samples, ctx.seed)?;
    let report = spanning_rank(&modes, &points, c.target)?;
    let metrics = json!({
        "verdict": report.verdict,
        "min_rank": report.min_rank,
        "tangent_dim": report.tangent_dim,
        "n_failures": report.failures.len(),
    });
    Ok(Step::Done {
        summary: serde_json::to_value(&report)?,
        metrics,
    })
}

fn control(c: &ControlExperiment, ctx: &mut Ctx) -> Result<Step> {
    let plan = synthesize_control(&c.x0, &c.v0, &c.x1, &c.v1)?;
    let end = integrate_plan(&plan, &c.x0, &c.v0, c.tol)?;
    let err = endpoint_error(&end, &c.x1, &c.v1)?;
    let pde = if c.pde_cutoff > 0 {
        Some(pde_residual(&control_to_forcing(&plan, c.nu, c.eta)?, c.pde_cutoff, c.tol)?)
    } else {
        None
    };
    let growth = if c.jacobian_growth.is_empty() {
        vec![]
    } else {
        if c.x0.len() != 2 {
            bail!("jacobian_growth is a two-dimensional demo");
        }
        c.jacobian_growth
            .iter()
            .map(|m| jacobian_growth_demo(*m, &c.x0, c.tol))
            .collect::<stochflow::Result<Vec<_>>>()?
    };
    let shadowing = match &c.shadowing {
        Some(s) => Some(noise_shadowing_probe(
            &plan,
            (&c.x0, &c.v0, &c.x1, &c.v1),
            &ShadowingConfig {
                nu: s.nu,
                cutoff: s.cutoff,
                sigma: s.sigma,
                dt: s.dt,
                n_traj: s.n_traj,
                seed: ctx.seed,
            },
            &s.eps,
        )?),
        None => None,
    };
    let metrics = json!({
        "x_error": err.x_error,
        "v_error": err.v_error,
        "pde_residual": pde,
    });
    Ok(Step::Done {
        summary: json!({
            "plan": plan,
            "endpoint": end,
            "error": err,
            "pde_residual": pde,
            "jacobian_growth": growth,
            "shadowing": shadowing,
        }),
        metrics,
    })
}
