//! Additive noise operators and reproducible Gaussian streams.
//!
//! [`ForcingSpec`] describes the diagonal operator `Q e_k γ_k^i = q_k e_k γ_k^i` (or its
//! scalar counterpart). Draws come from ChaCha8 streams keyed by the run seed and
//! addressed by `(trajectory, channel)`, so a draw depends only on its address and
//! step counter, never on scheduling.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{linf_ball, Wavevector};

/// One explicit table entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAmplitude {
    pub k: Wavevector,
    pub q: f64,
}

/// `q_k = c |k|^{-α}` for `1 <= |k|_inf <= kmax`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub c: f64,
    pub alpha: f64,
    pub kmax: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcingSpec {
    pub dim: usize,
    /// Explicit amplitudes; modes not listed have `q_k = 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<ModeAmplitude>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_law: Option<PowerLaw>,
    /// Decay exponent used by the coloring check; defaults to `5d/2 + 0.01`.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// High-mode cutoff `L`.
    #[serde(default = "default_cutoff")]
    pub cutoff: i32,
    #[serde(default)]
    pub assumption_low_modes: bool,
    #[serde(default)]
    pub assumption_high_modes: bool,
    /// Accept the four-mode 2D Stokes condition `{±e_1, ±e_2} ⊂ K` in place of
    /// the full low-mode assumption.
    #[serde(default)]
    pub stokes_weak_condition: bool,
}

fn default_cutoff() -> i32 {
    1
}

/// Smallest admissible decay exponent plus a margin.
pub fn default_alpha(dim: usize) -> f64 {
    2.5 * dim as f64 + 0.01
}

impl ForcingSpec {
    pub fn from_table(dim: usize, entries: &[(Wavevector, f64)]) -> Self {
        Self {
            dim,
            table: Some(
                entries
                    .iter()
                    .map(|(k, q)| ModeAmplitude { k: *k, q: *q })
                    .collect(),
            ),
            power_law: None,
            alpha: None,
            cutoff: 1,
            assumption_low_modes: false,
            assumption_high_modes: false,
            stokes_weak_condition: false,
        }
    }

    pub fn power_law(dim: usize, c: f64, alpha: f64, kmax: i32) -> Self {
        Self {
            dim,
            table: None,
            power_law: Some(PowerLaw { c, alpha, kmax }),
            alpha: Some(alpha),
            cutoff: 1,
            assumption_low_modes: false,
            assumption_high_modes: false,
            stokes_weak_condition: false,
        }
    }

    /// The same amplitude `q` on every `k` and `-k` in `generators`.
    pub fn uniform(dim: usize, generators: &[Wavevector], q: f64) -> Self {
        let entries: Vec<(Wavevector, f64)> = generators
            .iter()
            .flat_map(|k| [(*k, q), (k.neg(), q)])
            .collect();
        Self::from_table(dim, &entries)
    }

    /// Four-mode 2D field `{±(1,0), ±(0,1)}` with i.i.d. amplitudes.
    pub fn stokes_four_mode(q: f64) -> Self {
        let mut s = Self::uniform(
            2,
            &[
                Wavevector::new(&[1, 0]).expect("static"),
                Wavevector::new(&[0, 1]).expect("static"),
            ],
            q,
        );
        s.stokes_weak_condition = true;
        s
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| default_alpha(self.dim))
    }

    /// Resolved amplitude table over the active set `K` (nonzero `q_k`), sorted by shell.
    pub fn amplitudes(&self) -> Result<BTreeMap<Wavevector, f64>> {
        if !(self.dim == 2 || self.dim == 3) {
            return Err(Error::InvalidDimension(self.dim));
        }
        let mut map = BTreeMap::new();
        if let Some(pl) = &self.power_law {
            if pl.kmax < 1 {
                return Err(invalid("power_law.kmax", "must be >= 1"));
            }
            for k in linf_ball(self.dim, pl.kmax)? {
                map.insert(k, pl.c * k.norm().powf(-pl.alpha));
            }
        }
        if let Some(t) = &self.table {
            for e in t {
                if e.k.dim() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        got: e.k.dim(),
                    });
                }
                if !e.q.is_finite() {
                    return Err(invalid("table.q", format!("non-finite amplitude at {:?}", e.k)));
                }
                map.insert(e.k, e.q);
            }
        }
        map.retain(|_, q| *q != 0.0);
        Ok(map)
    }

    /// Active set `K` (modes with `q_k != 0`).
    pub fn active_modes(&self) -> Result<Vec<Wavevector>> {
        Ok(self.amplitudes()?.into_keys().collect())
    }

    /// `½ Σ_k (d-1) q_k²`, the mean energy injection rate of velocity forcing in
    /// coefficient units.
    pub fn velocity_injection_rate(&self) -> Result<f64> {
        let d1 = (self.dim - 1) as f64;
        Ok(0.5 * d1 * self.amplitudes()?.values().map(|q| q * q).sum::<f64>())
    }

    pub fn check_assumptions(&self) -> Result<AssumptionReport> {
        let amps = self.amplitudes()?;
        let low_missing: Vec<Wavevector> = linf_ball(self.dim, 1)?
            .into_iter()
            .filter(|k| !amps.contains_key(k))
            .collect();
        let weak_missing: Vec<Wavevector> = if self.dim == 2 {
            [[1, 0], [0, 1], [-1, 0], [0, -1]]
                .iter()
                .map(|c| Wavevector::new(c).expect("static"))
                .filter(|k| !amps.contains_key(k))
                .collect()
        } else {
            low_missing.clone()
        };
        let alpha = self.alpha();
        let mut messages = Vec::new();
        let asymmetric: Vec<Wavevector> = amps
            .keys()
            .filter(|k| !amps.contains_key(&k.neg()))
            .map(|k| k.neg())
            .collect();
        if !asymmetric.is_empty() {
            messages.push(format!("active set is not closed under negation: missing {asymmetric:?}"));
        }
        let alpha_ok = alpha > 2.5 * self.dim as f64;
        if !alpha_ok {
            messages.push(format!(
                "decay exponent {alpha} does not exceed 5d/2 = {}",
                2.5 * self.dim as f64
            ));
        }
        // coloring: q_k |k|^α bounded; on a finite table this is the worst ratio
        let coloring_constant = amps
            .iter()
            .map(|(k, q)| q.abs() * k.norm().powf(alpha))
            .fold(0.0, f64::max);
        let low_ok = if self.stokes_weak_condition {
            weak_missing.is_empty()
        } else {
            low_missing.is_empty()
        };
        if self.assumption_low_modes && !low_ok {
            let missing = if self.stokes_weak_condition {
                &weak_missing
            } else {
                &low_missing
            };
            messages.push(format!("low-mode assumption fails: missing {missing:?}"));
        }
        // checked on the retained range: only a power law can satisfy the lower bound
        let high_ok = self
            .power_law
            .as_ref()
            .is_some_and(|pl| pl.c > 0.0 && pl.alpha <= alpha && pl.kmax >= self.cutoff);
        if self.assumption_high_modes && !high_ok {
            messages.push(format!(
                "high-mode assumption needs q_k >= c|k|^-{alpha} for all |k|_inf >= {}",
                self.cutoff
            ));
        }
        Ok(AssumptionReport {
            low_modes_ok: low_ok,
            missing_low_modes: if self.stokes_weak_condition {
                weak_missing
            } else {
                low_missing
            },
            high_modes_ok: high_ok,
            alpha,
            alpha_admissible: alpha_ok,
            coloring_constant,
            messages,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub low_modes_ok: bool,
    pub missing_low_modes: Vec<Wavevector>,
    pub high_modes_ok: bool,
    pub alpha: f64,
    pub alpha_admissible: bool,
    /// `max_k q_k |k|^α` over the active set.
    pub coloring_constant: f64,
    pub messages: Vec<String>,
}

/// Source table for a passive scalar together with its injection rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarForcing {
    pub modes: Vec<Wavevector>,
    pub q: Vec<f64>,
    /// `ε̄ = ½ Σ_k q̃_k²`.
    pub eps_bar: f64,
}

pub fn build_scalar_forcing(spec: &ForcingSpec) -> Result<ScalarForcing> {
    let amps = spec.amplitudes()?;
    if amps.is_empty() {
        return Err(Error::EmptyModeSet);
    }
    let (modes, q): (Vec<_>, Vec<_>) = amps.into_iter().unzip();
    let eps_bar = 0.5 * q.iter().map(|a| a * a).sum::<f64>();
    Ok(ScalarForcing { modes, q, eps_bar })
}

/// Family tag separating the velocity, scalar-source and probe noises of one trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Velocity,
    ScalarSource,
    Auxiliary,
}

/// Address of a stream: which trajectory, which mode and component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseId {
    pub trajectory: u64,
    pub family: NoiseFamily,
    pub mode: Wavevector,
    pub component: u8,
}

impl NoiseId {
    fn channel(&self) -> u64 {
        let c = self.mode.raw();
        let pack = |v: i32| (v + 1024) as u64 & 0x7ff;
        let fam = match self.family {
            NoiseFamily::Velocity => 1u64,
            NoiseFamily::ScalarSource => 2,
            NoiseFamily::Auxiliary => 3,
        };
        (fam << 40) | (pack(c[0]) << 29) | (pack(c[1]) << 18) | (pack(c[2]) << 7) | self.component as u64
    }

    fn stream(&self) -> u64 {
        splitmix64(splitmix64(self.trajectory) ^ self.channel())
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn key_from_seed(seed: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    key
}

/// Auxiliary generator for initial conditions and sampling, independent of all noise
/// streams of the same seed.
pub fn aux_rng(seed: u64, trajectory: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(key_from_seed(seed));
    rng.set_stream(splitmix64(splitmix64(trajectory) ^ (0xa5a5 << 48) ^ tag));
    rng
}

/// Words of ChaCha output consumed per standard normal.
const WORDS_PER_DRAW: u128 = 4;

/// Sequential Gaussian stream; draw `n` always sits at ChaCha word `4n`.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    id: NoiseId,
    counter: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, id: NoiseId) -> Self {
        let mut rng = ChaCha8Rng::from_seed(key_from_seed(seed));
        rng.set_stream(id.stream());
        Self {
            seed,
            id,
            counter: 0,
            rng,
        }
    }

    pub fn id(&self) -> &NoiseId {
        &self.id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Index of the next draw.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn seek(&mut self, counter: u64) {
        self.counter = counter;
        self.rng.set_word_pos(counter as u128 * WORDS_PER_DRAW);
    }

    /// Next standard normal (Box-Muller on two 53-bit uniforms).
    pub fn next_normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        self.counter += 1;
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// Draw number `counter` without disturbing sequential state.
    pub fn normal_at(&self, counter: u64) -> f64 {
        let mut s = self.clone();
        s.seek(counter);
        s.next_normal()
    }
}

/// Brownian increment over `dt`: `√dt · ξ`.
pub fn wiener_increment(stream: &mut NoiseStream, dt: f64) -> f64 {
    dt.sqrt() * stream.next_normal()
}

/// Standard deviation of `q ∫_0^dt e^{-λ(dt-s)} dW_s`.
#[inline]
pub fn ou_noise_std(lambda: f64, q: f64, dt: f64) -> f64 {
    let x = lambda * dt;
    // (1 - e^{-2x}) / (2λ) = dt · (1 - e^{-2x}) / (2x), stable as x → 0
    let ratio = if x.abs() < 1e-8 {
        1.0 - x
    } else {
        -(-2.0 * x).exp_m1() / (2.0 * x)
    };
    q.abs() * (dt * ratio).sqrt()
}

/// Exact transition of `dz = -λz dt + q dW` given a standard normal `xi`.
#[inline]
pub fn ou_exact_step_with(z: f64, lambda: f64, q: f64, dt: f64, xi: f64) -> f64 {
    z * (-lambda * dt).exp() + ou_noise_std(lambda, q, dt) * xi
}

pub fn ou_exact_step(z: f64, lambda: f64, q: f64, dt: f64, stream: &mut NoiseStream) -> f64 {
    let xi = stream.next_normal();
    ou_exact_step_with(z, lambda, q, dt, xi)
}

/// One stream per `(mode, component)` channel of a trajectory.
#[derive(Clone, Debug)]
pub struct NoiseBank {
    streams: Vec<NoiseStream>,
}

impl NoiseBank {
    pub fn new(
        seed: u64,
        trajectory: u64,
        family: NoiseFamily,
        channels: impl IntoIterator<Item = (Wavevector, usize)>,
    ) -> Self {
        let streams = channels
            .into_iter()
            .map(|(mode, c)| {
                NoiseStream::new(
                    seed,
                    NoiseId {
                        trajectory,
                        family,
                        mode,
                        component: c as u8,
                    },
                )
            })
            .collect();
        Self { streams }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn fill_normals(&mut self, out: &mut [f64]) {
        for (o, s) in out.iter_mut().zip(&mut self.streams) {
            *o = s.next_normal();
        }
    }

    pub fn counters(&self) -> Vec<u64> {
        self.streams.iter().map(|s| s.counter()).collect()
    }

    pub fn seek_all(&mut self, counters: &[u64]) -> Result<()> {
        if counters.len() != self.streams.len() {
            return Err(invalid("counters", "length does not match the stream bank"));
        }
        for (s, &c) in self.streams.iter_mut().zip(counters) {
            s.seek(c);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::k;

    fn stream(traj: u64) -> NoiseStream {
        NoiseStream::new(
            42,
            NoiseId {
                trajectory: traj,
                family: NoiseFamily::Velocity,
                mode: k(&[1, 0]),
                component: 0,
            },
        )
    }

    #[test]
    fn moments_within_clt_band() {
        let mut s = stream(0);
        let n = 1_000_000;
        let (mut m, mut v) = (0.0, 0.0);
        for _ in 0..n {
            let w = wiener_increment(&mut s, 0.25);
            m += w;
            v += w * w;
        }
        m /= n as f64;
        v = v / n as f64 - m * m;
        assert!(m.abs() < 4e-3 * 0.5);
        assert!((v - 0.25).abs() < 1.5e-3, "{v}");
    }

    #[test]
    fn random_access_matches_sequential() {
        let mut s = stream(3);
        let seq: Vec<f64> = (0..20).map(|_| s.next_normal()).collect();
        let fresh = stream(3);
        for (n, x) in seq.iter().enumerate() {
            assert_eq!(fresh.normal_at(n as u64).to_bits(), x.to_bits());
        }
        assert_ne!(stream(4).normal_at(0), seq[0]);
    }

    #[test]
    fn ou_limits() {
        let mut s = stream(1);
        assert_eq!(ou_exact_step(2.0, 1.5, 0.0, 0.3, &mut s), 2.0 * (-0.45f64).exp());
        assert!(ou_noise_std(1.0, 1.0, 1e-12) < 2e-6);
        assert!((ou_noise_std(0.0, 2.0, 0.25) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_injection_rate() {
        let f = build_scalar_forcing(&ForcingSpec::from_table(2, &[(k(&[1, 0]), 1.0)])).unwrap();
        assert_eq!(f.eps_bar, 0.5);
        let two = ForcingSpec::from_table(2, &[(k(&[1, 0]), 1.0), (k(&[-1, 0]), 2.0)]);
        assert_eq!(build_scalar_forcing(&two).unwrap().eps_bar, 2.5);
        assert!(build_scalar_forcing(&ForcingSpec::from_table(2, &[])).is_err());
    }

    #[test]
    fn low_mode_check_lists_missing() {
        let mut spec = ForcingSpec::uniform(2, &[k(&[1, 0])], 1.0);
        spec.assumption_low_modes = true;
        let r = spec.check_assumptions().unwrap();
        assert!(!r.low_modes_ok);
        assert!(r.missing_low_modes.contains(&k(&[0, 1])));
        let r = ForcingSpec::stokes_four_mode(1.0).check_assumptions().unwrap();
        assert!(r.low_modes_ok);
    }
}
