//! Extended Phase Graph simulation of FISP fingerprints.
//!
//! Configuration states are tracked as three arrays `F+_k`, `F-_k`, `Z_k`
//! over dephasing orders `k = 0..=K`. Each repetition applies an RF
//! rotation, relaxation and one unit of unbalanced-gradient dephasing.
//! [`isochromat_ensemble`] is an independent brute-force Bloch simulator
//! used to check the phase-graph path.

use std::f64::consts::PI;
use std::fs;
use std::ops::{Add, Mul};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_LENGTH: usize = 1000;
pub const DEFAULT_TR_MS: f64 = 12.0;
pub const DEFAULT_TE_MS: f64 = 2.0;
pub const DEFAULT_TI_MS: f64 = 18.0;
pub const DEFAULT_RF_PHASE_DEG: f64 = 90.0;
pub const DEFAULT_MAX_ORDER: usize = 250;

/// Excitation schedule of a FISP acquisition. Times in milliseconds,
/// angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceParams {
    pub flip_angles_deg: Vec<f64>,
    pub repetition_times_ms: Vec<f64>,
    pub echo_time_ms: f64,
    pub inversion_time_ms: f64,
    pub rf_phase_deg: f64,
    pub epg_max_order: usize,
}

/// Periodic flip-angle lobes, `10 + 50 |sin(pi t / 200)|` for `t = 1..=len`.
pub fn default_flip_schedule(len: usize) -> Vec<f64> {
    (1..=len)
        .map(|t| 10.0 + 50.0 * (PI * t as f64 / 200.0).sin().abs())
        .collect()
}

impl SequenceParams {
    pub fn new(
        flip_angles_deg: Vec<f64>,
        repetition_times_ms: Vec<f64>,
        echo_time_ms: f64,
        inversion_time_ms: f64,
        rf_phase_deg: f64,
        epg_max_order: usize,
    ) -> Result<Self> {
        let seq = Self {
            flip_angles_deg,
            repetition_times_ms,
            echo_time_ms,
            inversion_time_ms,
            rf_phase_deg,
            epg_max_order,
        };
        seq.validate()?;
        Ok(seq)
    }

    /// Default FISP schedule of the given length: sinusoidal flip lobes,
    /// constant TR, TE = 2 ms, inversion delay 18 ms.
    pub fn fisp(len: usize) -> Self {
        Self {
            flip_angles_deg: default_flip_schedule(len),
            repetition_times_ms: vec![DEFAULT_TR_MS; len],
            echo_time_ms: DEFAULT_TE_MS,
            inversion_time_ms: DEFAULT_TI_MS,
            rf_phase_deg: DEFAULT_RF_PHASE_DEG,
            epg_max_order: DEFAULT_MAX_ORDER,
        }
    }

    pub fn len(&self) -> usize {
        self.flip_angles_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flip_angles_deg.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSequence(msg));
        if self.flip_angles_deg.is_empty() {
            return bad("empty flip-angle schedule".into());
        }
        if self.flip_angles_deg.len() != self.repetition_times_ms.len() {
            return bad(format!(
                "{} flip angles but {} repetition times",
                self.flip_angles_deg.len(),
                self.repetition_times_ms.len()
            ));
        }
        if !(self.echo_time_ms.is_finite() && self.echo_time_ms > 0.0) {
            return bad(format!(
                "echo time {} ms must be positive",
                self.echo_time_ms
            ));
        }
        if !(self.inversion_time_ms.is_finite() && self.inversion_time_ms >= 0.0) {
            return bad(format!(
                "inversion time {} ms must be non-negative",
                self.inversion_time_ms
            ));
        }
        if !self.rf_phase_deg.is_finite() {
            return bad("rf phase must be finite".into());
        }
        if self.epg_max_order == 0 {
            return bad("epg_max_order must be at least 1".into());
        }
        for (t, &a) in self.flip_angles_deg.iter().enumerate() {
            if !(0.0..=180.0).contains(&a) {
                return bad(format!("flip angle {a} at frame {t} outside [0, 180]"));
            }
        }
        for (t, &tr) in self.repetition_times_ms.iter().enumerate() {
            if !(tr.is_finite() && tr > self.echo_time_ms) {
                return bad(format!(
                    "TR {tr} ms at frame {t} must exceed TE {} ms",
                    self.echo_time_ms
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 over a canonical little-endian encoding of every field.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        for v in self.flip_angles_deg.iter().chain(&self.repetition_times_ms) {
            h.update(v.to_bits().to_le_bytes());
        }
        for v in [self.echo_time_ms, self.inversion_time_ms, self.rf_phase_deg] {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update((self.epg_max_order as u64).to_le_bytes());
        h.finalize().into()
    }
}

impl Default for SequenceParams {
    fn default() -> Self {
        Self::fisp(DEFAULT_LENGTH)
    }
}

/// Parses a schedule file body: one decimal value per line. A single
/// trailing newline is accepted; any other blank line is an error.
pub fn parse_schedule(text: &str, expected_len: Option<usize>) -> Result<Vec<f64>> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    let body = body.strip_suffix('\r').unwrap_or(body);
    let mut values = Vec::new();
    if !body.is_empty() {
        for (i, line) in body.split('\n').enumerate() {
            let line = line.trim();
            let v: f64 = line.parse().map_err(|_| Error::ScheduleParse {
                line: i + 1,
                message: format!("expected a decimal value, found {line:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::ScheduleParse {
                    line: i + 1,
                    message: format!("non-finite value {line:?}"),
                });
            }
            values.push(v);
        }
    }
    if let Some(n) = expected_len {
        if values.len() != n {
            return Err(Error::ScheduleParse {
                line: values.len() + 1,
                message: format!("expected exactly {n} lines, found {}", values.len()),
            });
        }
    }
    Ok(values)
}

pub fn read_schedule(path: impl AsRef<Path>, expected_len: Option<usize>) -> Result<Vec<f64>> {
    parse_schedule(&fs::read_to_string(path)?, expected_len)
}

pub fn write_schedule(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 20);
    for v in values {
        out.push_str(&format!("{v}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// One complex magnetization sample per TR, taken at the echo time.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub samples: Vec<Complex64>,
}

impl Fingerprint {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.samples
            .iter()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

/// `exp(i phase)` with exact values on multiples of 90 degrees, so that
/// quadrature-phase pulses give exactly real rotation matrices.
fn unit_phase(phase_deg: f64) -> Complex64 {
    let p = phase_deg.rem_euclid(360.0);
    match p {
        0.0 => Complex64::new(1.0, 0.0),
        90.0 => Complex64::new(0.0, 1.0),
        180.0 => Complex64::new(-1.0, 0.0),
        270.0 => Complex64::new(0.0, -1.0),
        _ => Complex64::from_polar(1.0, p.to_radians()),
    }
}

/// 3x3 RF mixing matrix acting on `(F+_k, F-_k, Z_k)`.
#[derive(Debug, Clone, Copy)]
struct RfMatrix([[Complex64; 3]; 3]);

impl RfMatrix {
    fn new(alpha_deg: f64, phase_deg: f64) -> Self {
        // Exact at multiples of 90 degrees, so an inversion leaves no
        // transverse residue.
        let u = unit_phase(alpha_deg);
        let (ca, sa) = (u.re, u.im);
        let (c2, s2) = ((1.0 + ca) / 2.0, (1.0 - ca) / 2.0);
        let e = unit_phase(phase_deg);
        let e2 = e * e;
        let i = Complex64::i();
        let half_i = Complex64::new(0.0, 0.5);
        Self([
            [Complex64::from(c2), e2 * s2, -i * e * sa],
            [e2.conj() * s2, Complex64::from(c2), i * e.conj() * sa],
            [
                -half_i * e.conj() * sa,
                half_i * e * sa,
                Complex64::from(ca),
            ],
        ])
    }

    fn is_real(&self) -> bool {
        self.0.iter().flatten().all(|c| c.im == 0.0)
    }

    fn real(&self) -> [[f64; 3]; 3] {
        self.0.map(|row| row.map(|c| c.re))
    }
}

/// Amplitude type of the phase-graph states. Quadrature-phase sequences
/// stay on the real axis and run on `f64`.
trait Amplitude: Copy + Add<Output = Self> + Mul<Output = Self> + Mul<f64, Output = Self> {
    const ZERO: Self;
    fn conj(self) -> Self;
    fn to_complex(self) -> Complex64;
}

impl Amplitude for f64 {
    const ZERO: Self = 0.0;
    fn conj(self) -> Self {
        self
    }
    fn to_complex(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
}

impl Amplitude for Complex64 {
    const ZERO: Self = Complex64::new(0.0, 0.0);
    fn conj(self) -> Self {
        Complex64::conj(&self)
    }
    fn to_complex(self) -> Complex64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct States<T> {
    fp: Vec<T>,
    fm: Vec<T>,
    z: Vec<T>,
    // orders above `active` are known to be zero
    active: usize,
}

impl<T: Amplitude> States<T> {
    fn equilibrium(max_order: usize, one: T) -> Self {
        let mut z = vec![T::ZERO; max_order + 1];
        z[0] = one;
        Self {
            fp: vec![T::ZERO; max_order + 1],
            fm: vec![T::ZERO; max_order + 1],
            z,
            active: 0,
        }
    }

    fn rotate(&mut self, m: &[[T; 3]; 3]) {
        for k in 0..=self.active {
            let (p, q, z) = (self.fp[k], self.fm[k], self.z[k]);
            self.fp[k] = m[0][0] * p + m[0][1] * q + m[0][2] * z;
            self.fm[k] = m[1][0] * p + m[1][1] * q + m[1][2] * z;
            self.z[k] = m[2][0] * p + m[2][1] * q + m[2][2] * z;
        }
    }

    fn relax(&mut self, e1: f64, e2: f64, regrowth: T) {
        for k in 0..=self.active {
            self.fp[k] = self.fp[k] * e2;
            self.fm[k] = self.fm[k] * e2;
            self.z[k] = self.z[k] * e1;
        }
        self.z[0] = self.z[0] + regrowth;
    }

    /// Rotation followed by relaxation over one full repetition, in a
    /// single pass. Returns `F+_0` as it would be after `e2_echo` alone.
    fn rotate_relax(&mut self, m: &[[T; 3]; 3], e1: f64, e2: f64, regrowth: T, e2_echo: f64) -> T {
        let mut echo = T::ZERO;
        for k in 0..=self.active {
            let (p, q, z) = (self.fp[k], self.fm[k], self.z[k]);
            let p2 = m[0][0] * p + m[0][1] * q + m[0][2] * z;
            if k == 0 {
                echo = p2 * e2_echo;
            }
            self.fp[k] = p2 * e2;
            self.fm[k] = (m[1][0] * p + m[1][1] * q + m[1][2] * z) * e2;
            self.z[k] = (m[2][0] * p + m[2][1] * q + m[2][2] * z) * e1;
        }
        self.z[0] = self.z[0] + regrowth;
        echo
    }

    fn shift(&mut self) {
        let k_max = self.fp.len() - 1;
        let top = (self.active + 1).min(k_max);
        self.fp.copy_within(0..top, 1);
        self.fm.copy_within(1..=top, 0);
        self.fm[top] = T::ZERO;
        self.fp[0] = self.fm[0].conj();
        self.active = top;
    }
}

/// Phase-graph configuration state over dephasing orders `0..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpgState {
    pub f_plus: Vec<Complex64>,
    pub f_minus: Vec<Complex64>,
    pub z: Vec<Complex64>,
}

impl EpgState {
    /// Fully relaxed magnetization: `Z_0 = 1`, everything else zero.
    pub fn equilibrium(max_order: usize) -> Self {
        let s = States::equilibrium(max_order, Complex64::new(1.0, 0.0));
        Self {
            f_plus: s.fp,
            f_minus: s.fm,
            z: s.z,
        }
    }

    pub fn max_order(&self) -> usize {
        self.f_plus.len() - 1
    }

    fn to_states(&self) -> States<Complex64> {
        States {
            fp: self.f_plus.clone(),
            fm: self.f_minus.clone(),
            z: self.z.clone(),
            active: self.max_order(),
        }
    }

    fn from_states(s: States<Complex64>) -> Self {
        Self {
            f_plus: s.fp,
            f_minus: s.fm,
            z: s.z,
        }
    }

    /// Squared norm of the represented magnetization. `F-_0` duplicates
    /// `F+_0`, and each `Z_k` with `k > 0` stands for the `+k/-k` pair.
    /// Invariant under RF rotation and, if nothing reaches the top order,
    /// under the gradient shift.
    pub fn energy(&self) -> f64 {
        let head = self.f_plus[0].norm_sqr() + self.z[0].norm_sqr();
        let tail: f64 = (1..self.f_plus.len())
            .map(|k| {
                self.f_plus[k].norm_sqr() + self.f_minus[k].norm_sqr() + 2.0 * self.z[k].norm_sqr()
            })
            .sum();
        head + tail
    }
}

/// Applies an instantaneous RF pulse of `alpha_deg` about the transverse
/// axis at `phase_deg`. Every order is mixed independently.
pub fn epg_rf_rotation(state: &EpgState, alpha_deg: f64, phase_deg: f64) -> EpgState {
    let mut s = state.to_states();
    s.rotate(&RfMatrix::new(alpha_deg, phase_deg).0);
    EpgState::from_states(s)
}

fn check_relaxation(t1_ms: f64, t2_ms: f64) -> Result<()> {
    if t1_ms > 0.0 && t2_ms > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidRelaxation { t1_ms, t2_ms })
    }
}

/// Relaxes for `dt_ms` and then applies one unbalanced-gradient shift;
/// `F+` orders move up, `F-` orders move down, the top order is dropped.
pub fn epg_relax_and_shift(
    state: &EpgState,
    dt_ms: f64,
    t1_ms: f64,
    t2_ms: f64,
) -> Result<EpgState> {
    check_relaxation(t1_ms, t2_ms)?;
    if !(dt_ms >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "negative time step {dt_ms} ms"
        )));
    }
    let (e1, e2) = ((-dt_ms / t1_ms).exp(), (-dt_ms / t2_ms).exp());
    let mut s = state.to_states();
    s.relax(e1, e2, Complex64::from(1.0 - e1));
    s.shift();
    Ok(EpgState::from_states(s))
}

fn run_sequence<T: Amplitude>(
    t1_ms: f64,
    t2_ms: f64,
    seq: &SequenceParams,
    one: T,
    inversion: &[[T; 3]; 3],
    pulses: &[[[T; 3]; 3]],
) -> Vec<Complex64> {
    let relax = |dt: f64| ((-dt / t1_ms).exp(), (-dt / t2_ms).exp());
    let mut s = States::equilibrium(seq.epg_max_order, one);
    s.rotate(inversion);
    let (e1, e2) = relax(seq.inversion_time_ms);
    s.relax(e1, e2, one * (1.0 - e1));

    // Relaxation over a whole TR composes exactly from the TE and TR - TE
    // segments, so the echo is read off the rotated F+_0 directly.
    let (_, e2_te) = relax(seq.echo_time_ms);
    let mut out = Vec::with_capacity(pulses.len());
    for (m, &tr) in pulses.iter().zip(&seq.repetition_times_ms) {
        let (e1, e2) = relax(tr);
        let echo = s.rotate_relax(m, e1, e2, one * (1.0 - e1), e2_te);
        out.push(echo.to_complex());
        s.shift();
    }
    out
}

/// Simulates the FISP response of a tissue with relaxation times `t1_ms`
/// and `t2_ms`: inversion, inversion delay, then per frame an RF pulse,
/// relaxation to TE, readout of `F+_0`, relaxation to TR and a shift.
pub fn simulate_fingerprint(t1_ms: f64, t2_ms: f64, seq: &SequenceParams) -> Result<Fingerprint> {
    check_relaxation(t1_ms, t2_ms)?;
    seq.validate()?;
    let inversion = RfMatrix::new(180.0, seq.rf_phase_deg);
    let pulses: Vec<RfMatrix> = seq
        .flip_angles_deg
        .iter()
        .map(|&a| RfMatrix::new(a, seq.rf_phase_deg))
        .collect();
    let samples = if inversion.is_real() && pulses.iter().all(RfMatrix::is_real) {
        let pulses: Vec<_> = pulses.iter().map(RfMatrix::real).collect();
        run_sequence(t1_ms, t2_ms, seq, 1.0f64, &inversion.real(), &pulses)
    } else {
        let pulses: Vec<_> = pulses.iter().map(|m| m.0).collect();
        run_sequence(
            t1_ms,
            t2_ms,
            seq,
            Complex64::new(1.0, 0.0),
            &inversion.0,
            &pulses,
        )
    };
    Ok(Fingerprint { samples })
}

/// Same as [`simulate_fingerprint`] but always on complex amplitudes.
#[doc(hidden)]
pub fn simulate_fingerprint_complex(
    t1_ms: f64,
    t2_ms: f64,
    seq: &SequenceParams,
) -> Result<Fingerprint> {
    check_relaxation(t1_ms, t2_ms)?;
    seq.validate()?;
    let inversion = RfMatrix::new(180.0, seq.rf_phase_deg).0;
    let pulses: Vec<_> = seq
        .flip_angles_deg
        .iter()
        .map(|&a| RfMatrix::new(a, seq.rf_phase_deg).0)
        .collect();
    let samples = run_sequence(
        t1_ms,
        t2_ms,
        seq,
        Complex64::new(1.0, 0.0),
        &inversion,
        &pulses,
    );
    Ok(Fingerprint { samples })
}

/// Right-handed rotation by `alpha` about the transverse axis at `phase`.
fn rotation_about_transverse(alpha_deg: f64, phase_deg: f64) -> [[f64; 3]; 3] {
    let (a, p) = (alpha_deg.to_radians(), phase_deg.to_radians());
    let (ux, uy) = (p.cos(), p.sin());
    let (c, s) = (a.cos(), a.sin());
    let t = 1.0 - c;
    [
        [c + t * ux * ux, t * ux * uy, s * uy],
        [t * ux * uy, c + t * uy * uy, -s * ux],
        [-s * uy, s * ux, c],
    ]
}

/// Brute-force Bloch simulation over `n_spins` isochromats whose gradient
/// phase per TR is spread uniformly over one cycle. Returns the mean
/// transverse magnetization `Mx + i My` at each echo.
pub fn isochromat_ensemble(
    t1_ms: f64,
    t2_ms: f64,
    seq: &SequenceParams,
    n_spins: usize,
) -> Result<Fingerprint> {
    check_relaxation(t1_ms, t2_ms)?;
    seq.validate()?;
    if n_spins < 100 {
        return Err(Error::InvalidArgument(format!(
            "isochromat ensemble needs at least 100 spins, got {n_spins}"
        )));
    }
    let mut spins = vec![[0.0f64, 0.0, 1.0]; n_spins];
    let precession: Vec<(f64, f64)> = (0..n_spins)
        .map(|j| {
            let psi = 2.0 * PI * j as f64 / n_spins as f64;
            (psi.cos(), psi.sin())
        })
        .collect();

    let rotate = |spins: &mut [[f64; 3]], r: &[[f64; 3]; 3]| {
        for m in spins.iter_mut() {
            let v = *m;
            for (row, out) in r.iter().zip(m.iter_mut()) {
                *out = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
        }
    };
    let relax = |spins: &mut [[f64; 3]], dt: f64| {
        let (e1, e2) = ((-dt / t1_ms).exp(), (-dt / t2_ms).exp());
        for m in spins.iter_mut() {
            m[0] *= e2;
            m[1] *= e2;
            m[2] = m[2] * e1 + (1.0 - e1);
        }
    };

    rotate(
        &mut spins,
        &rotation_about_transverse(180.0, seq.rf_phase_deg),
    );
    relax(&mut spins, seq.inversion_time_ms);

    let mut out = Vec::with_capacity(seq.len());
    for (&alpha, &tr) in seq.flip_angles_deg.iter().zip(&seq.repetition_times_ms) {
        rotate(
            &mut spins,
            &rotation_about_transverse(alpha, seq.rf_phase_deg),
        );
        relax(&mut spins, seq.echo_time_ms);
        let (sx, sy) = spins
            .iter()
            .fold((0.0, 0.0), |(x, y), m| (x + m[0], y + m[1]));
        out.push(Complex64::new(sx, sy) / n_spins as f64);
        relax(&mut spins, tr - seq.echo_time_ms);
        for (m, &(c, s)) in spins.iter_mut().zip(&precession) {
            let (x, y) = (m[0], m[1]);
            m[0] = c * x - s * y;
            m[1] = s * x + c * y;
        }
    }
    Ok(Fingerprint { samples: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_l2(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        (num / den).sqrt()
    }

    fn short_seq(len: usize) -> SequenceParams {
        SequenceParams::fisp(len)
    }

    #[test]
    fn zero_flip_rotation_is_identity() {
        let mut s = EpgState::equilibrium(4);
        s.f_plus[1] = Complex64::new(0.3, -0.2);
        s.f_minus[2] = Complex64::new(0.1, 0.4);
        s.z[3] = Complex64::new(-0.5, 0.0);
        assert_eq!(epg_rf_rotation(&s, 0.0, 37.0), s);
    }

    #[test]
    fn ninety_degree_pulse_tips_equilibrium() {
        let s = epg_rf_rotation(&EpgState::equilibrium(3), 90.0, 0.0);
        assert!((s.f_plus[0].norm() - 1.0).abs() < 1e-15);
        assert!(s.z[0].norm() < 1e-15);
        assert!((s.f_minus[0] - s.f_plus[0].conj()).norm() < 1e-15);
    }

    #[test]
    fn inversion_pulse_flips_z() {
        let s = epg_rf_rotation(&EpgState::equilibrium(3), 180.0, 0.0);
        assert!((s.z[0] + 1.0).norm() < 1e-15);
        assert!(s.f_plus[0].norm() < 1e-15 && s.f_minus[0].norm() < 1e-15);
    }

    #[test]
    fn rf_keeps_conjugate_link_at_order_zero() {
        let mut s = EpgState::equilibrium(2);
        for (a, p) in [(33.0, 10.0), (71.0, 250.0), (12.0, 90.0)] {
            s = epg_rf_rotation(&s, a, p);
            assert!((s.f_minus[0] - s.f_plus[0].conj()).norm() < 1e-14);
            s = epg_relax_and_shift(&s, 5.0, 800.0, 60.0).unwrap();
        }
    }

    #[test]
    fn zero_dt_only_shifts() {
        let mut s = EpgState::equilibrium(4);
        s.f_plus[0] = Complex64::new(0.5, 0.1);
        s.f_minus[1] = Complex64::new(0.2, 0.3);
        s.z[1] = Complex64::new(0.7, 0.0);
        let r = epg_relax_and_shift(&s, 0.0, 1000.0, 100.0).unwrap();
        assert_eq!(r.f_plus[1], Complex64::new(0.5, 0.1));
        assert_eq!(r.f_minus[0], Complex64::new(0.2, 0.3));
        assert_eq!(r.f_plus[0], Complex64::new(0.2, -0.3));
        assert_eq!(r.z, s.z);
    }

    #[test]
    fn no_relaxation_keeps_equilibrium() {
        let s = EpgState::equilibrium(4);
        let r = epg_relax_and_shift(&s, 50.0, f64::INFINITY, f64::INFINITY).unwrap();
        assert_eq!(r.z[0], Complex64::new(1.0, 0.0));
        assert_eq!(r.energy(), 1.0);
    }

    #[test]
    fn shift_conserves_energy_without_relaxation() {
        let mut s = epg_rf_rotation(&EpgState::equilibrium(10), 40.0, 20.0);
        for _ in 0..5 {
            let before = s.energy();
            s = epg_relax_and_shift(&s, 10.0, f64::INFINITY, f64::INFINITY).unwrap();
            assert!((before - s.energy()).abs() < 1e-12);
            let before = s.energy();
            s = epg_rf_rotation(&s, 25.0, 20.0);
            assert!((before - s.energy()).abs() < 1e-12);
        }
    }

    #[test]
    fn half_life_step_halves_transverse_state() {
        let mut s = EpgState::equilibrium(3);
        s.z[0] = Complex64::new(0.0, 0.0);
        s.f_plus[0] = Complex64::new(0.8, 0.0);
        let t2 = 40.0;
        let r = epg_relax_and_shift(&s, t2 * 2f64.ln(), 1000.0, t2).unwrap();
        assert!((r.f_plus[1].norm() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_relaxation() {
        let s = EpgState::equilibrium(2);
        assert!(matches!(
            epg_relax_and_shift(&s, 1.0, 0.0, 10.0),
            Err(Error::InvalidRelaxation { .. })
        ));
        assert!(simulate_fingerprint(100.0, -1.0, &short_seq(10)).is_err());
    }

    #[test]
    fn zero_flip_sequence_is_silent() {
        let mut seq = short_seq(200);
        seq.flip_angles_deg.iter_mut().for_each(|a| *a = 0.0);
        let fp = simulate_fingerprint(900.0, 80.0, &seq).unwrap();
        assert!(fp.samples.iter().all(|c| c.norm() < 1e-12));
        let iso = isochromat_ensemble(900.0, 80.0, &seq, 100).unwrap();
        assert!(iso.samples.iter().all(|c| c.norm() < 1e-12));
    }

    #[test]
    fn real_fast_path_is_bit_identical_to_complex_path() {
        let seq = short_seq(300);
        let a = simulate_fingerprint(1200.0, 90.0, &seq).unwrap();
        let b = simulate_fingerprint_complex(1200.0, 90.0, &seq).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_isochromats_at_non_quadrature_phase() {
        let mut seq = short_seq(300);
        seq.rf_phase_deg = 30.0;
        let a = simulate_fingerprint(700.0, 60.0, &seq).unwrap();
        let b = isochromat_ensemble(700.0, 60.0, &seq, 400).unwrap();
        assert!(rel_l2(&a.samples, &b.samples) < 1e-3);
    }

    #[test]
    fn isochromats_self_converge() {
        let seq = SequenceParams::default();
        let a = isochromat_ensemble(1000.0, 100.0, &seq, 200).unwrap();
        let b = isochromat_ensemble(1000.0, 100.0, &seq, 400).unwrap();
        assert!(rel_l2(&a.samples, &b.samples) < 1e-3);
    }

    #[test]
    fn long_t1_peak_sits_in_inversion_transient() {
        // brute-force scan of the default grid: the peak leaves the first
        // 50 frames for T1 up to 2430 ms, never above
        let seq = SequenceParams::default();
        for t1 in (25..=40).map(|i| i as f64 * 100.0) {
            for t2 in (1..=30).map(|i| i as f64 * 20.0) {
                let fp = simulate_fingerprint(t1, t2, &seq).unwrap();
                let peak = (0..fp.len())
                    .max_by(|&a, &b| fp.samples[a].norm().total_cmp(&fp.samples[b].norm()))
                    .unwrap();
                assert!(peak < 50, "peak at frame {peak} for ({t1}, {t2})");
            }
        }
    }

    #[test]
    fn magnitudes_stay_bounded() {
        let seq = SequenceParams::default();
        for (t1, t2) in [
            (100.0, 20.0),
            (100.0, 600.0),
            (4000.0, 600.0),
            (784.0, 77.0),
        ] {
            let fp = simulate_fingerprint(t1, t2, &seq).unwrap();
            assert!(fp
                .samples
                .iter()
                .all(|c| c.is_finite() && c.norm() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn isochromat_rejects_small_ensembles() {
        assert!(isochromat_ensemble(1000.0, 100.0, &short_seq(5), 99).is_err());
    }

    #[test]
    fn sequence_validation() {
        let mut seq = short_seq(4);
        seq.flip_angles_deg[2] = 181.0;
        assert!(seq.validate().is_err());
        let mut seq = short_seq(4);
        seq.repetition_times_ms[1] = 2.0;
        assert!(seq.validate().is_err());
        let mut seq = short_seq(4);
        seq.repetition_times_ms.pop();
        assert!(seq.validate().is_err());
        assert!(short_seq(4).validate().is_ok());
    }

    #[test]
    fn schedule_parsing_reports_line_numbers() {
        assert_eq!(
            parse_schedule("1.5\n2\n3e1\n", Some(3)).unwrap(),
            vec![1.5, 2.0, 30.0]
        );
        match parse_schedule("1\n2\nabc\n4\n", Some(4)) {
            Err(Error::ScheduleParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match parse_schedule("1\n2\n", Some(3)) {
            Err(Error::ScheduleParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_schedule("1\n\n2\n", None).is_err());
    }

    #[test]
    fn default_schedule_has_five_lobes() {
        let fa = default_flip_schedule(1000);
        assert_eq!(fa.len(), 1000);
        let troughs = fa.iter().filter(|&&a| (a - 10.0).abs() < 1e-9).count();
        assert_eq!(troughs, 5);
        assert!(fa.iter().all(|&a| (10.0..=60.0).contains(&a)));
    }

    #[test]
    fn digest_tracks_every_field() {
        let a = short_seq(10);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.epg_max_order += 1;
        assert_ne!(a.digest(), b.digest());
    }
}
