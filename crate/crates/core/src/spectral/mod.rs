//! Real Fourier representation of divergence-free velocity fields and scalars on `T^d`.

mod basis;
mod field;
mod nonlinear;

pub use basis::{
    basis_eval, gamma_frame, linf_ball, symmetric_closure, GammaFrame, Wavevector,
};
pub use field::{basis_norm_sq, FieldEvaluator, FieldKind, SpectralField};
pub use nonlinear::{
    advect_scalar, bilinear, coeff_inner, euler_nonlinearity, euler_nonlinearity_truncated,
    CollocationGrid,
};

pub(crate) use field::for_each_grid_point;

/// Shorthand for a wavevector literal; panics on an invalid input.
pub fn k(comps: &[i32]) -> Wavevector {
    Wavevector::new(comps).expect("valid wavevector")
}

/// Velocity field from `(k, component, amplitude)` triples; repeated entries add up.
pub fn velocity_from_terms(
    dim: usize,
    terms: &[(Wavevector, usize, f64)],
) -> crate::Result<SpectralField> {
    let gens: Vec<Wavevector> = terms.iter().map(|t| t.0).collect();
    let mut u = SpectralField::zeros_on(dim, FieldKind::Velocity, &gens)?;
    for (k, i, a) in terms {
        let cur = u.get(k, *i);
        u.set(k, *i, cur + a)?;
    }
    Ok(u)
}
