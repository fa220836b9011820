//! Static checks of a configuration before anything is simulated.

use serde::{Deserialize, Serialize};
use stochflow::fluid::FluidModelConfig;
use stochflow::forcing::ForcingSpec;

use crate::config::{Experiment, ExperimentConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Warn,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub status: Status,
    pub checks: Vec<Check>,
}

struct Checks(Vec<Check>);

impl Checks {
    fn push(&mut self, name: &str, status: Status, message: impl Into<String>) {
        self.0.push(Check {
            name: name.into(),
            status,
            message: message.into(),
        });
    }
}

/// Typical coefficient amplitude of each forced mode under the linear balance,
/// `sqrt((d−1) q² / (2ν|k|²))`.
fn typical_amplitudes(fluid: &FluidModelConfig) -> Vec<f64> {
    let d1 = (fluid.dim - 1) as f64;
    fluid
        .forcing
        .amplitudes()
        .map(|a| {
            a.iter()
                .map(|(k, q)| (d1 * q * q / (2.0 * fluid.nu * k.norm_sq() as f64)).sqrt())
                .collect()
        })
        .unwrap_or_default()
}

fn forcing_checks(name: &str, f: &ForcingSpec, out: &mut Checks) {
    let rep = match f.check_assumptions() {
        Ok(r) => r,
        Err(e) => {
            out.push(name, Status::Fail, e.to_string());
            return;
        }
    };
    let low_requested = f.assumption_low_modes || f.stokes_weak_condition;
    if low_requested && !rep.low_modes_ok {
        out.push(
            name,
            Status::Fail,
            format!(
                "low-mode condition fails; missing modes {:?}",
                rep.missing_low_modes.iter().map(|k| k.comps().to_vec()).collect::<Vec<_>>()
            ),
        );
    } else if low_requested {
        let which = if f.stokes_weak_condition {
            "four-mode Stokes condition"
        } else {
            "low-mode condition"
        };
        out.push(name, Status::Pass, format!("{which} holds"));
    }
    if f.assumption_high_modes && !rep.high_modes_ok {
        out.push(name, Status::Fail, format!("high-mode condition fails for alpha = {}", rep.alpha));
    }
    if !rep.alpha_admissible {
        out.push(name, Status::Warn, format!("decay exponent {} is not above 5d/2", rep.alpha));
    }
    for m in rep.messages.iter().filter(|m| m.contains("negation")) {
        out.push(name, Status::Warn, m.clone());
    }
}

fn fluid_checks(fluid: &FluidModelConfig, out: &mut Checks) {
    if let Err(e) = fluid.validate() {
        out.push("fluid", Status::Fail, e.to_string());
        return;
    }
    out.push("fluid", Status::Pass, "model parameters are consistent");
    forcing_checks("fluid.forcing", &fluid.forcing, out);
    let (Ok(dt), Ok(n)) = (fluid.resolved_dt(), fluid.effective_cutoff()) else {
        return;
    };
    let amps = typical_amplitudes(fluid);
    let sup = amps.iter().sum::<f64>().max(1e-300);
    // the linear estimate undercounts a nonlinear cascade, so only the Stokes bound is sharp
    if let Ok(bound) = fluid.cfl_dt(sup) {
        if dt > bound {
            out.push(
                "dt",
                Status::Warn,
                format!("dt = {dt} exceeds the advective stability bound {bound:.4e} (N = {n}, |u| ≈ {sup:.3})"),
            );
        } else {
            out.push("dt", Status::Pass, format!("dt = {dt} within the advective bound {bound:.4e}"));
        }
    }
}

fn scalar_checks(fluid: &FluidModelConfig, kappa: f64, cutoff: i32, out: &mut Checks) {
    let Ok(dt) = fluid.resolved_dt() else { return };
    let sup: f64 = typical_amplitudes(fluid).iter().sum();
    // Courant number dt·N·Σ|û| of the scalar step; RK4 needs it below about 2.8
    let courant = dt * cutoff as f64 * sup;
    if courant > 1.0 {
        out.push(
            "scalar.dt",
            Status::Warn,
            format!("scalar Courant number {courant:.3} above 1; stability bound dt ≤ {:.4e}", 1.0 / (cutoff as f64 * sup)),
        );
    } else {
        out.push("scalar.dt", Status::Pass, format!("scalar Courant number {courant:.3}"));
    }
    let resolution = cutoff as f64 * kappa.sqrt();
    if resolution < 1.5 {
        out.push(
            "scalar.cutoff",
            Status::Warn,
            format!("N·sqrt(κ) = {resolution:.3} < 1.5; the diffusive scale is likely unresolved"),
        );
    } else {
        out.push("scalar.cutoff", Status::Pass, format!("N·sqrt(κ) = {resolution:.3}"));
    }
}

fn hypothesis(fluid: &FluidModelConfig, what: &str, out: &mut Checks) {
    let f = &fluid.forcing;
    if !(f.assumption_low_modes || f.stokes_weak_condition) {
        out.push(
            "hypothesis",
            Status::Warn,
            format!("{what} relies on the low-mode nondegeneracy of the noise, which is not requested"),
        );
    }
}

pub fn validate(cfg: &ExperimentConfig) -> ValidationReport {
    let mut out = Checks(vec![]);
    match &cfg.experiment {
        Experiment::Simulate(c) => fluid_checks(&c.fluid, &mut out),
        Experiment::Lyapunov(c) => {
            fluid_checks(&c.fluid, &mut out);
            hypothesis(&c.fluid, "a positive Lyapunov exponent", &mut out);
            if c.n_batches < 10 {
                out.push("n_batches", Status::Warn, "fewer than 10 batches give unreliable standard errors");
            }
        }
        Experiment::Scalar(c) => {
            fluid_checks(&c.run.fluid, &mut out);
            forcing_checks("run.source", &c.run.source, &mut out);
            let pts: Vec<(f64, i32)> = if c.sweep.is_empty() {
                vec![(c.run.kappa, c.run.cutoff)]
            } else {
                c.sweep.iter().map(|p| (p.kappa, p.cutoff)).collect()
            };
            for (kappa, n) in pts {
                scalar_checks(&c.run.fluid, kappa, n, &mut out);
            }
        }
        Experiment::Yaglom(c) => {
            fluid_checks(&c.run.fluid, &mut out);
            hypothesis(&c.run.fluid, "the Yaglom flux law", &mut out);
            let pts: Vec<(f64, i32)> = if c.sweep.is_empty() {
                vec![(c.run.kappa, c.run.cutoff)]
            } else {
                c.sweep.iter().map(|p| (p.kappa, p.cutoff)).collect()
            };
            for (kappa, n) in pts {
                scalar_checks(&c.run.fluid, kappa, n, &mut out);
            }
            if c.run.snapshot_every.is_none() && c.snapshots_from.is_none() {
                out.push("run.snapshot_every", Status::Fail, "snapshots are required for two-point statistics");
            }
            if c.analysis.khm_radius > std::f64::consts::PI {
                out.push("analysis.khm_radius", Status::Fail, "test-function support must not exceed π");
            }
        }
        Experiment::Hormander(c) => {
            if !(c.dim == 2 || c.dim == 3) {
                out.push("dim", Status::Fail, format!("dimension {} unsupported", c.dim));
            } else {
                out.push("dim", Status::Pass, format!("d = {}", c.dim));
            }
        }
        Experiment::Control(c) => {
            let d = c.x0.len();
            let ok = (2..=3).contains(&d) && [&c.v0, &c.x1, &c.v1].iter().all(|v| v.len() == d);
            if ok {
                out.push("endpoints", Status::Pass, format!("d = {d}"));
            } else {
                out.push("endpoints", Status::Fail, "x0, v0, x1, v1 must share a dimension of 2 or 3");
            }
            if !c.jacobian_growth.is_empty() && d != 2 {
                out.push("jacobian_growth", Status::Fail, "the growth demo is two-dimensional");
            }
        }
    }
    let status = out.0.iter().map(|c| c.status).max().unwrap_or(Status::Pass);
    ValidationReport { status, checks: out.0 }
}
