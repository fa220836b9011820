//! Convective products `u·∇v` between spectral fields.
//!
//! The reference path is an exact triad sum over retained wavevector pairs in
//! complex form. [`CollocationGrid`] evaluates the same products pseudo-spectrally on a
//! grid large enough that the truncated result carries no aliasing error.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::basis::{linf_ball, Wavevector};
use super::field::{FieldKind, SpectralField};
use crate::error::{Error, Result};

/// Dense complex table over the box `|k|_inf <= n`.
struct ModeBox {
    dim: usize,
    n: i32,
    side: usize,
    data: Vec<[Complex64; 3]>,
}

impl ModeBox {
    fn new(dim: usize, n: i32) -> Self {
        let side = (2 * n + 1) as usize;
        Self {
            dim,
            n,
            side,
            data: vec![[Complex64::default(); 3]; side.pow(dim as u32)],
        }
    }

    #[inline]
    fn slot(&self, k: &[i32; 3]) -> Option<usize> {
        let mut idx = 0usize;
        for &c in k.iter().take(self.dim).rev() {
            if c.abs() > self.n {
                return None;
            }
            idx = idx * self.side + (c + self.n) as usize;
        }
        Some(idx)
    }

    fn get(&self, k: &Wavevector) -> [Complex64; 3] {
        self.slot(&k.raw())
            .map(|s| self.data[s])
            .unwrap_or([Complex64::default(); 3])
    }
}

fn check_velocity(u: &SpectralField, what: &'static str) -> Result<()> {
    if u.kind() != FieldKind::Velocity {
        return Err(Error::KindMismatch(what));
    }
    Ok(())
}

/// Accumulates `Σ_{p+q=k} (û(p)·iq) v̂(q)` into a box of radius `n`.
fn triad_box(u: &SpectralField, v: &SpectralField, n: i32) -> ModeBox {
    let dim = u.dim();
    let mut bx = ModeBox::new(dim, n);
    let uc = u.to_complex();
    let vc = v.to_complex();
    let nc = if v.kind() == FieldKind::Velocity { 3 } else { 1 };
    for (p, up) in &uc {
        if up.iter().all(|z| z.norm_sqr() == 0.0) {
            continue;
        }
        let pr = p.raw();
        for (q, vq) in &vc {
            let qr = q.raw();
            let k = [pr[0] + qr[0], pr[1] + qr[1], pr[2] + qr[2]];
            let Some(slot) = bx.slot(&k) else { continue };
            let qf = q.as_f64();
            // û(p)·(iq)
            let s = Complex64::i() * (up[0] * qf[0] + up[1] * qf[1] + up[2] * qf[2]);
            let cell = &mut bx.data[slot];
            for j in 0..nc {
                cell[j] += s * vq[j];
            }
        }
    }
    bx
}

/// `Π(u·∇v)` restricted to `target` (Leray projection plus truncation).
pub fn bilinear(u: &SpectralField, v: &SpectralField, target: &[Wavevector]) -> Result<SpectralField> {
    check_velocity(u, "advecting field must be a velocity")?;
    check_velocity(v, "advected field must be a velocity")?;
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    let mut out = SpectralField::zeros(u.dim(), FieldKind::Velocity, target.to_vec())?;
    let n = out.max_linf();
    let bx = triad_box(u, v, n);
    out.fill_from_complex(|p| bx.get(p));
    Ok(out)
}

/// `B(u, u)` on the mode set of `u`.
///
/// Fails with [`Error::TruncationRequired`] when the exact product has energy
/// outside that set; use [`euler_nonlinearity_truncated`] to project instead.
pub fn euler_nonlinearity(u: &SpectralField) -> Result<SpectralField> {
    check_velocity(u, "euler nonlinearity needs a velocity")?;
    let n = 2 * u.max_linf();
    let full_modes = linf_ball(u.dim(), n)?;
    let full = bilinear(u, u, &full_modes)?;
    let kept = full.remap(u.modes().to_vec())?;
    let scale = u.coeff_norm_sq().max(f64::MIN_POSITIVE) * (n as f64).powi(2);
    let overflow = full.coeff_norm_sq() - kept.coeff_norm_sq();
    if overflow > 1e-24 * scale * scale {
        return Err(Error::TruncationRequired(n));
    }
    Ok(kept)
}

/// `Π_N B(u, u)` on an explicit target mode set.
pub fn euler_nonlinearity_truncated(u: &SpectralField, target: &[Wavevector]) -> Result<SpectralField> {
    bilinear(u, u, target)
}

/// `u·∇g` for a scalar `g`, restricted to `target`.
pub fn advect_scalar(u: &SpectralField, g: &SpectralField, target: &[Wavevector]) -> Result<SpectralField> {
    check_velocity(u, "advecting field must be a velocity")?;
    if g.kind() != FieldKind::Scalar {
        return Err(Error::KindMismatch("advected field must be a scalar"));
    }
    let mut out = SpectralField::zeros(u.dim(), FieldKind::Scalar, target.to_vec())?;
    let bx = triad_box(u, g, out.max_linf());
    out.fill_from_complex(|p| bx.get(p));
    Ok(out)
}

/// Coefficient inner product `Σ a_k b_k`; equals `⟨a, b⟩_{L²} / (π(2π)^{d-1})`.
pub fn coeff_inner(a: &SpectralField, b: &SpectralField) -> f64 {
    let nc = a.ncomp();
    let mut s = 0.0;
    for (m, k) in a.modes().iter().enumerate() {
        if let Some(mb) = b.position(k) {
            for i in 0..nc {
                s += a.coeffs()[m * nc + i] * b.coeffs()[mb * nc + i];
            }
        }
    }
    s
}

/// Pseudo-spectral evaluator on an `m^d` grid.
pub struct CollocationGrid {
    dim: usize,
    m: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CollocationGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CollocationGrid")
            .field("dim", &self.dim)
            .field("m", &self.m)
            .finish()
    }
}

impl CollocationGrid {
    /// Grid of side `m`; products of fields with `|k|_inf <= n` truncated to
    /// `|k|_inf <= n_t` are alias-free when `m > 2n + n_t`.
    pub fn new(dim: usize, m: usize) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::InvalidDimension(dim));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            dim,
            m,
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
        })
    }

    /// Smallest alias-free grid for squaring a field with `|k|_inf <= n` (the 3/2 rule).
    pub fn for_cutoff(dim: usize, n: i32) -> Result<Self> {
        let mut m = (3 * n + 1) as usize;
        m += m % 2;
        Self::new(dim, m)
    }

    pub fn side(&self) -> usize {
        self.m
    }

    fn len(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    fn slot(&self, k: &Wavevector) -> usize {
        let m = self.m as i32;
        let mut idx = 0usize;
        for &c in k.comps().iter().rev() {
            idx = idx * self.m + c.rem_euclid(m) as usize;
        }
        idx
    }

    fn transform(&self, data: &mut [Complex64], forward: bool) {
        let plan = if forward { &self.fwd } else { &self.inv };
        let m = self.m;
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        // axis 0 is contiguous
        for row in data.chunks_exact_mut(m) {
            plan.process_with_scratch(row, &mut scratch);
        }
        let mut line = vec![Complex64::default(); m];
        let mut stride = m;
        for _axis in 1..self.dim {
            let block = stride * m;
            for base in (0..data.len()).step_by(block) {
                for off in 0..stride {
                    for (t, l) in line.iter_mut().enumerate() {
                        *l = data[base + off + t * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (t, l) in line.iter().enumerate() {
                        data[base + off + t * stride] = *l;
                    }
                }
            }
            stride = block;
        }
    }

    fn to_grid(&self, spec: &[(Wavevector, Complex64)]) -> Vec<Complex64> {
        let mut data = vec![Complex64::default(); self.len()];
        for (k, z) in spec {
            data[self.slot(k)] += *z;
        }
        self.transform(&mut data, false);
        data
    }

    /// `Π(u·∇v)` on `target`, computed on the grid.
    pub fn bilinear(
        &self,
        u: &SpectralField,
        v: &SpectralField,
        target: &[Wavevector],
    ) -> Result<SpectralField> {
        check_velocity(u, "advecting field must be a velocity")?;
        let d = self.dim;
        let uc = u.to_complex();
        let vc = v.to_complex();
        let nv = if v.kind() == FieldKind::Velocity { d } else { 1 };
        let ugrid: Vec<Vec<Complex64>> = (0..d)
            .map(|j| self.to_grid(&uc.iter().map(|(k, z)| (*k, z[j])).collect::<Vec<_>>()))
            .collect();
        let mut w = vec![vec![Complex64::default(); self.len()]; nv];
        for (i, wi) in w.iter_mut().enumerate() {
            for (j, uj) in ugrid.iter().enumerate() {
                let dv: Vec<(Wavevector, Complex64)> = vc
                    .iter()
                    .map(|(k, z)| (*k, Complex64::i() * k.as_f64()[j] * z[i]))
                    .collect();
                let g = self.to_grid(&dv);
                for ((acc, a), b) in wi.iter_mut().zip(uj).zip(&g) {
                    // both factors are real-valued fields
                    *acc += a.re * b.re;
                }
            }
            self.transform(wi, true);
        }
        let norm = 1.0 / self.len() as f64;
        let kind = v.kind();
        let mut out = SpectralField::zeros(d, kind, target.to_vec())?;
        out.fill_from_complex(|p| {
            let s = self.slot(p);
            let mut c = [Complex64::default(); 3];
            for i in 0..nv {
                c[i] = w[i][s] * norm;
            }
            c
        });
        Ok(out)
    }
}
