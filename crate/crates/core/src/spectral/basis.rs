//! Real Fourier basis on the torus `[0, 2π]^d` and the divergence-free frames `γ_k`.
//!
//! Wavevectors are split into a positive half `Z^d_+` and its negation. Positive
//! modes carry `sin(k·x)`, negative modes carry `cos(k·x)`, so `e_k` and `e_{-k}`
//! are independent basis functions and `e_k² + e_{-k}² = 1` pointwise.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nonzero integer wavevector in dimension 2 or 3.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i32>", into = "Vec<i32>")]
pub struct Wavevector {
    comps: [i32; 3],
    dim: u8,
}

impl Wavevector {
    pub fn new(comps: &[i32]) -> Result<Self> {
        let dim = comps.len();
        if !(dim == 2 || dim == 3) || comps.iter().all(|&c| c == 0) {
            return Err(Error::InvalidWavevector(comps.to_vec()));
        }
        let mut c = [0; 3];
        c[..dim].copy_from_slice(comps);
        Ok(Self {
            comps: c,
            dim: dim as u8,
        })
    }

    pub(crate) fn from_array(comps: [i32; 3], dim: usize) -> Option<Self> {
        if comps[..dim].iter().all(|&c| c == 0) {
            None
        } else {
            Some(Self {
                comps,
                dim: dim as u8,
            })
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    #[inline]
    pub fn comps(&self) -> &[i32] {
        &self.comps[..self.dim as usize]
    }

    #[inline]
    pub(crate) fn raw(&self) -> [i32; 3] {
        self.comps
    }

    #[inline]
    pub fn as_f64(&self) -> [f64; 3] {
        [
            self.comps[0] as f64,
            self.comps[1] as f64,
            self.comps[2] as f64,
        ]
    }

    /// Membership in `Z^d_+`: `k_d > 0`, or `k_d = 0` and `k_1 > 0`.
    ///
    /// In three dimensions the vectors with `k_1 = k_3 = 0` are covered by
    /// the extra rule `k_2 > 0`, so every nonzero `k` lies in exactly one half.
    pub fn is_positive(&self) -> bool {
        let c = &self.comps;
        let last = c[self.dim() - 1];
        if last != 0 {
            return last > 0;
        }
        if c[0] != 0 {
            return c[0] > 0;
        }
        // only reachable for d = 3 with k = (0, k_2, 0)
        c[1] > 0
    }

    pub fn neg(&self) -> Self {
        Self {
            comps: [-self.comps[0], -self.comps[1], -self.comps[2]],
            dim: self.dim,
        }
    }

    /// Representative of `±k` lying in `Z^d_+`.
    pub fn positive_rep(&self) -> Self {
        if self.is_positive() {
            *self
        } else {
            self.neg()
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.comps.iter().map(|&c| (c as f64) * (c as f64)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_linf(&self) -> i32 {
        self.comps.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    #[inline]
    pub fn dot(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim() {
            s += self.comps[i] as f64 * x[i];
        }
        s
    }

    pub fn add(&self, other: &Self) -> Option<Self> {
        let d = self.dim();
        let mut c = [0; 3];
        for (i, ci) in c.iter_mut().enumerate().take(d) {
            *ci = self.comps[i] + other.comps[i];
        }
        Self::from_array(c, d)
    }
}

impl fmt::Debug for Wavevector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.comps())
    }
}

impl fmt::Display for Wavevector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.comps().iter().map(|c| c.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl PartialOrd for Wavevector {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Wavevector {
    /// Shell order: `|k|_inf`, then `|k|²`, then lexicographic.
    fn cmp(&self, other: &Self) -> Ordering {
        self.norm_linf()
            .cmp(&other.norm_linf())
            .then((self.norm_sq() as i64).cmp(&(other.norm_sq() as i64)))
            .then(self.comps.cmp(&other.comps))
    }
}

impl TryFrom<Vec<i32>> for Wavevector {
    type Error = Error;
    fn try_from(v: Vec<i32>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<Wavevector> for Vec<i32> {
    fn from(k: Wavevector) -> Self {
        k.comps().to_vec()
    }
}

/// `e_k(x)`: `sin(k·x)` on `Z^d_+`, `cos(k·x)` on `Z^d_-`.
#[inline]
pub fn basis_eval(k: &Wavevector, x: &[f64]) -> f64 {
    let phase = k.dot(x);
    if k.is_positive() {
        phase.sin()
    } else {
        phase.cos()
    }
}

/// Orthonormal frame of `k^⊥` with `γ_{-k} = -γ_k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaFrame {
    pub k: Wavevector,
    cols: [[f64; 3]; 2],
}

impl GammaFrame {
    /// Number of columns, `d - 1`.
    pub fn len(&self) -> usize {
        self.k.dim() - 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn col(&self, i: usize) -> &[f64; 3] {
        &self.cols[i]
    }

    pub fn cols(&self) -> &[[f64; 3]] {
        &self.cols[..self.len()]
    }
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Deterministic frame for `k`.
///
/// d = 2: `γ_k = k^⊥/|k|` with `k^⊥ = (-k_2, k_1)`.
/// d = 3: for the positive representative `p`, `γ^1 = p × a / |p × a|` with
/// `a = e_3` (or `e_1` when `p ∥ e_3`) and `γ^2 = p × γ^1 / |p × γ^1|`; negative
/// modes take the negated frame.
pub fn gamma_frame(k: &Wavevector) -> GammaFrame {
    let p = k.positive_rep();
    let pf = p.as_f64();
    let sign = if k.is_positive() { 1.0 } else { -1.0 };
    let mut cols = [[0.0; 3]; 2];
    match k.dim() {
        2 => {
            let n = p.norm();
            cols[0] = [sign * -pf[1] / n, sign * pf[0] / n, 0.0];
        }
        _ => {
            let a = if pf[0] == 0.0 && pf[1] == 0.0 {
                [1.0, 0.0, 0.0]
            } else {
                [0.0, 0.0, 1.0]
            };
            let g1 = normalized(cross(&pf, &a));
            let g2 = normalized(cross(&pf, &g1));
            for i in 0..3 {
                cols[0][i] = sign * g1[i];
                cols[1][i] = sign * g2[i];
            }
        }
    }
    GammaFrame { k: *k, cols }
}

/// All nonzero `k` with `|k|_inf <= n`, in shell order.
pub fn linf_ball(dim: usize, n: i32) -> Result<Vec<Wavevector>> {
    if !(dim == 2 || dim == 3) {
        return Err(Error::InvalidDimension(dim));
    }
    let mut out = Vec::new();
    let r = -n..=n;
    for a in r.clone() {
        for b in r.clone() {
            if dim == 2 {
                if let Some(k) = Wavevector::from_array([a, b, 0], 2) {
                    out.push(k);
                }
            } else {
                for c in r.clone() {
                    if let Some(k) = Wavevector::from_array([a, b, c], 3) {
                        out.push(k);
                    }
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// `k` together with `-k` for every generator, deduplicated and sorted.
pub fn symmetric_closure(generators: &[Wavevector]) -> Vec<Wavevector> {
    let mut out: Vec<Wavevector> = generators
        .iter()
        .flat_map(|k| [*k, k.neg()])
        .collect();
    out.sort();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn wv(c: &[i32]) -> Wavevector {
        Wavevector::new(c).unwrap()
    }

    #[test]
    fn zero_wavevector_rejected() {
        assert!(Wavevector::new(&[0, 0]).is_err());
        assert!(Wavevector::new(&[1]).is_err());
        assert!(Wavevector::new(&[1, 0, 0, 0]).is_err());
    }

    #[test]
    fn basis_values() {
        assert!((basis_eval(&wv(&[1, 0]), &[PI / 2.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((basis_eval(&wv(&[-1, 0]), &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn halves_partition_nonzero_lattice() {
        for d in [2, 3] {
            for k in linf_ball(d, 3).unwrap() {
                assert_ne!(k.is_positive(), k.neg().is_positive(), "{k:?}");
            }
        }
        // paper convention on its own domain
        assert!(wv(&[1, -1, 0]).is_positive());
        assert!(!wv(&[-1, 1, 0]).is_positive());
        assert!(wv(&[0, 1, 0]).is_positive());
    }

    #[test]
    fn two_d_frames() {
        let g = gamma_frame(&wv(&[1, 0]));
        assert_eq!(&g.col(0)[..2], &[0.0, 1.0]);
        let g = gamma_frame(&wv(&[-1, 0]));
        assert_eq!(&g.col(0)[..2], &[0.0, -1.0]);
    }

    #[test]
    fn three_d_frame_orthonormal() {
        for k in linf_ball(3, 2).unwrap() {
            let g = gamma_frame(&k);
            let kf = k.as_f64();
            for i in 0..2 {
                let c = g.col(i);
                let dot_k: f64 = (0..3).map(|j| c[j] * kf[j]).sum();
                assert!(dot_k.abs() < 1e-14);
                for j in 0..2 {
                    let gram: f64 = (0..3).map(|m| c[m] * g.col(j)[m]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((gram - want).abs() < 1e-14);
                }
            }
            let gn = gamma_frame(&k.neg());
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(gn.col(i)[j], -g.col(i)[j]);
                }
            }
        }
        let g = gamma_frame(&wv(&[0, 0, 1]));
        assert!(g.col(0)[2].abs() < 1e-15 && g.col(1)[2].abs() < 1e-15);
    }

    #[test]
    fn ball_sizes() {
        assert_eq!(linf_ball(2, 1).unwrap().len(), 8);
        assert_eq!(linf_ball(3, 1).unwrap().len(), 26);
        assert_eq!(linf_ball(2, 3).unwrap().len(), 48);
    }
}
