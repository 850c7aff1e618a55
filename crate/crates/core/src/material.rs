//! Material models for the carbon-fibre bone cement.
//!
//! * impedance conversion between polar and rectangular form,
//! * the series `R_s`–`L_s` plus parallel `R_p‖C_p` equivalent circuit and
//!   its least-squares fit to a measured spectrum,
//! * a percolation law for conductivity against filler volume fraction,
//! * a saturating piezoresistive law for conductivity against load.
//!
//! Default parameters of the two conductivity laws are illustrative: they
//! reproduce the qualitative orderings (threshold near 1.5 vol.%, monotone
//! loss with a plateau at high load), not measured values.

use std::io::{Read, Write};
use std::path::Path;

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{storage::Owned, DVector, Dyn, Vector4, U4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(|Z|, θ) → (Z′, Z″)`.
pub fn polar_to_complex(magnitude: f64, theta: f64) -> (f64, f64) {
    (magnitude * theta.cos(), magnitude * theta.sin())
}

/// `(Z′, Z″) → (|Z|, θ)` with `θ ∈ (−π, π]`.
pub fn complex_to_polar(re: f64, im: f64) -> (f64, f64) {
    (re.hypot(im), im.atan2(re))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    #[serde(rename = "R_p_ohm")]
    pub r_p: f64,
    #[serde(rename = "R_s_ohm")]
    pub r_s: f64,
    #[serde(rename = "C_p_F")]
    pub c_p: f64,
    #[serde(rename = "L_s_H")]
    pub l_s: f64,
}

impl CircuitParams {
    pub fn new(r_p: f64, r_s: f64, c_p: f64, l_s: f64) -> Result<Self> {
        let p = CircuitParams { r_p, r_s, c_p, l_s };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("R_p", self.r_p),
            ("R_s", self.r_s),
            ("C_p", self.c_p),
            ("L_s", self.l_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn to_log(self) -> Vector4<f64> {
        Vector4::new(self.r_p.ln(), self.r_s.ln(), self.c_p.ln(), self.l_s.ln())
    }

    fn from_log(x: &Vector4<f64>) -> Self {
        CircuitParams {
            r_p: x[0].exp(),
            r_s: x[1].exp(),
            c_p: x[2].exp(),
            l_s: x[3].exp(),
        }
    }
}

/// `Z(f) = R_s + jωL_s + R_p / (1 + jωR_pC_p)`, `ω = 2πf`.
pub fn circuit_impedance(p: &CircuitParams, frequency: f64) -> Complex64 {
    let w = 2.0 * std::f64::consts::PI * frequency;
    let d = Complex64::new(1.0, w * p.r_p * p.c_p);
    Complex64::new(p.r_s, w * p.l_s) + p.r_p / d
}

/// Derivatives of `Z` with respect to `(ln R_p, ln R_s, ln C_p, ln L_s)`.
fn circuit_log_gradient(p: &CircuitParams, frequency: f64) -> [Complex64; 4] {
    let w = 2.0 * std::f64::consts::PI * frequency;
    let d = Complex64::new(1.0, w * p.r_p * p.c_p);
    let d2 = d * d;
    let j = Complex64::i();
    [
        p.r_p / d2,
        Complex64::new(p.r_s, 0.0),
        -j * w * p.r_p * p.r_p * p.c_p / d2,
        j * w * p.l_s,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpedancePoint {
    pub frequency: f64,
    pub z: Complex64,
}

/// Impedance samples at strictly increasing positive frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpedanceSpectrum {
    points: Vec<ImpedancePoint>,
}

impl ImpedanceSpectrum {
    pub fn new(points: Vec<ImpedancePoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.frequency > 0.0 && p.frequency.is_finite()) {
                return Err(Error::Validation(format!(
                    "point {i}: frequency must be positive, got {}",
                    p.frequency
                )));
            }
            if !(p.z.re.is_finite() && p.z.im.is_finite()) {
                return Err(Error::Validation(format!("point {i}: impedance is not finite")));
            }
            if i > 0 && p.frequency <= points[i - 1].frequency {
                return Err(Error::Validation(format!(
                    "point {i}: frequencies must be strictly increasing ({} after {})",
                    p.frequency,
                    points[i - 1].frequency
                )));
            }
        }
        Ok(ImpedanceSpectrum { points })
    }

    /// Builds from `(frequency, |Z|, θ)` triples.
    pub fn from_polar(samples: &[(f64, f64, f64)]) -> Result<Self> {
        let mut points = Vec::with_capacity(samples.len());
        for (i, &(f, mag, theta)) in samples.iter().enumerate() {
            if !(mag >= 0.0) {
                return Err(Error::Validation(format!("point {i}: |Z| must be >= 0, got {mag}")));
            }
            let (re, im) = polar_to_complex(mag, theta);
            points.push(ImpedancePoint {
                frequency: f,
                z: Complex64::new(re, im),
            });
        }
        Self::new(points)
    }

    /// Exact circuit response at the given frequencies.
    pub fn synthesize(p: &CircuitParams, frequencies: &[f64]) -> Result<Self> {
        Self::new(
            frequencies
                .iter()
                .map(|&f| ImpedancePoint {
                    frequency: f,
                    z: circuit_impedance(p, f),
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[ImpedancePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `n` log-spaced frequencies from `lo` to `hi` inclusive.
pub fn log_frequencies(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n.max(2) - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumFormat {
    Polar,
    Rectangular,
}

const POLAR_HEADER: [&str; 3] = ["frequency_Hz", "Z_abs_ohm", "theta_rad"];
const RECT_HEADER: [&str; 3] = ["frequency_Hz", "Z_real_ohm", "Z_imag_ohm"];

/// Reads a spectrum CSV in either polar or rectangular form, chosen by the
/// header.
pub fn read_spectrum_csv<R: Read>(reader: R) -> Result<ImpedanceSpectrum> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = r.headers().map_err(|e| Error::parse("line 1", e.to_string()))?.clone();
    let format = if header.iter().eq(POLAR_HEADER) {
        SpectrumFormat::Polar
    } else if header.iter().eq(RECT_HEADER) {
        SpectrumFormat::Rectangular
    } else {
        return Err(Error::parse(
            "line 1",
            format!(
                "expected header `{}` or `{}`",
                POLAR_HEADER.join(","),
                RECT_HEADER.join(",")
            ),
        ));
    };
    let names = if format == SpectrumFormat::Polar {
        POLAR_HEADER
    } else {
        RECT_HEADER
    };
    let mut points = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::parse(format!("line {line}"), e.to_string()))?;
        if rec.len() != 3 {
            return Err(Error::parse(format!("line {line}"), "expected 3 fields"));
        }
        let mut v = [0.0; 3];
        for c in 0..3 {
            v[c] = rec[c].parse().map_err(|_| {
                Error::parse(
                    format!("line {line}, field {}", names[c]),
                    format!("`{}` is not a number", &rec[c]),
                )
            })?;
        }
        let z = match format {
            SpectrumFormat::Polar => {
                if !(v[1] >= 0.0) {
                    return Err(Error::parse(format!("line {line}, field Z_abs_ohm"), "must be >= 0"));
                }
                let (re, im) = polar_to_complex(v[1], v[2]);
                Complex64::new(re, im)
            }
            SpectrumFormat::Rectangular => Complex64::new(v[1], v[2]),
        };
        points.push(ImpedancePoint { frequency: v[0], z });
    }
    ImpedanceSpectrum::new(points)
}

pub fn write_spectrum_csv<W: Write>(writer: W, spectrum: &ImpedanceSpectrum, format: SpectrumFormat) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header = if format == SpectrumFormat::Polar {
        POLAR_HEADER
    } else {
        RECT_HEADER
    };
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(header).map_err(io)?;
    for p in spectrum.points() {
        let (a, b) = match format {
            SpectrumFormat::Polar => complex_to_polar(p.z.re, p.z.im),
            SpectrumFormat::Rectangular => (p.z.re, p.z.im),
        };
        w.write_record([format!("{:e}", p.frequency), format!("{:e}", a), format!("{:e}", b)])
            .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_spectrum(path: impl AsRef<Path>) -> Result<ImpedanceSpectrum> {
    read_spectrum_csv(std::fs::File::open(path)?)
}

/// Result of [`fit_circuit`].
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitFit {
    pub params: CircuitParams,
    /// `sqrt(Σ |Z_model − Z_data|²)` in ohms.
    pub residual_norm: f64,
    /// `Z_model − Z_data` at each input frequency.
    pub residuals: Vec<Complex64>,
    /// Index of the multi-start seed that produced the result.
    pub start: usize,
}

impl CircuitFit {
    pub fn to_report(&self, spectrum: &ImpedanceSpectrum) -> FitReport {
        FitReport {
            params: self.params,
            residual_norm_ohm: self.residual_norm,
            n_points: self.residuals.len(),
            start: self.start,
            points: spectrum
                .points()
                .iter()
                .zip(&self.residuals)
                .map(|(p, r)| PointResidual {
                    frequency_hz: p.frequency,
                    residual_real_ohm: r.re,
                    residual_imag_ohm: r.im,
                })
                .collect(),
        }
    }
}

/// Serialisable fit report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: CircuitParams,
    pub residual_norm_ohm: f64,
    pub n_points: usize,
    pub start: usize,
    pub points: Vec<PointResidual>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointResidual {
    #[serde(rename = "frequency_Hz")]
    pub frequency_hz: f64,
    pub residual_real_ohm: f64,
    pub residual_imag_ohm: f64,
}

struct CircuitProblem<'a> {
    spectrum: &'a ImpedanceSpectrum,
    x: Vector4<f64>,
}

impl LeastSquaresProblem<f64, Dyn, U4> for CircuitProblem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U4>;
    type ParameterStorage = Owned<f64, U4>;

    fn set_params(&mut self, x: &Vector4<f64>) {
        self.x = *x;
    }

    fn params(&self) -> Vector4<f64> {
        self.x
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let p = CircuitParams::from_log(&self.x);
        let n = self.spectrum.len();
        let mut r = DVector::zeros(2 * n);
        for (i, pt) in self.spectrum.points().iter().enumerate() {
            let d = circuit_impedance(&p, pt.frequency) - pt.z;
            r[2 * i] = d.re;
            r[2 * i + 1] = d.im;
        }
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self) -> Option<nalgebra::OMatrix<f64, Dyn, U4>> {
        let p = CircuitParams::from_log(&self.x);
        let n = self.spectrum.len();
        let mut jac = nalgebra::OMatrix::<f64, Dyn, U4>::zeros(2 * n);
        for (i, pt) in self.spectrum.points().iter().enumerate() {
            for (k, g) in circuit_log_gradient(&p, pt.frequency).iter().enumerate() {
                jac[(2 * i, k)] = g.re;
                jac[(2 * i + 1, k)] = g.im;
            }
        }
        jac.iter().all(|v| v.is_finite()).then_some(jac)
    }
}

/// Decade offsets of `(R_p, R_s, C_p, L_s)` from the heuristic start.
const START_OFFSETS: [[f64; 4]; 8] = [
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 2.0, 2.0],
    [0.0, 0.0, -2.0, -2.0],
    [0.0, 0.0, 2.0, -2.0],
    [0.0, 0.0, -2.0, 2.0],
    [1.0, -1.0, 1.0, 1.0],
    [-1.0, 1.0, -1.0, -1.0],
    [0.5, 0.5, -1.0, 1.0],
];

fn heuristic_start(spectrum: &ImpedanceSpectrum) -> CircuitParams {
    let pts = spectrum.points();
    let (lo, hi) = (pts[0], pts[pts.len() - 1]);
    let floor = 1e-6 * pts.iter().map(|p| p.z.norm()).fold(0.0, f64::max).max(1e-12);
    let r_s = hi.z.re.max(floor);
    let r_p = (lo.z.re - r_s).max(floor);
    // The RC corner sits near the most capacitive point.
    let corner = pts
        .iter()
        .min_by(|a, b| a.z.im.total_cmp(&b.z.im))
        .map(|p| p.frequency)
        .unwrap_or((lo.frequency * hi.frequency).sqrt());
    let c_p = 1.0 / (2.0 * std::f64::consts::PI * corner * r_p);
    let l_s = (hi.z.im / (2.0 * std::f64::consts::PI * hi.frequency)).max(1e-12);
    CircuitParams { r_p, r_s, c_p, l_s }
}

/// Least-squares fit of the equivalent circuit, in log parameters, from
/// eight deterministic starts; returns the best converged one.
pub fn fit_circuit(spectrum: &ImpedanceSpectrum) -> Result<CircuitFit> {
    let pts = spectrum.points();
    if pts.len() < 8 {
        return Err(Error::InvalidArgument(format!(
            "fitting needs at least 8 points, got {}",
            pts.len()
        )));
    }
    if pts[pts.len() - 1].frequency < 100.0 * pts[0].frequency {
        return Err(Error::InvalidArgument(
            "fitting needs frequencies spanning at least two decades".into(),
        ));
    }
    let base = heuristic_start(spectrum).to_log();
    let lm = LevenbergMarquardt::new().with_patience(400);
    let ln10 = std::f64::consts::LN_10;

    let mut best: Option<(f64, Vector4<f64>, usize)> = None;
    let mut best_any = f64::INFINITY;
    for (s, off) in START_OFFSETS.iter().enumerate() {
        let x0 = base + Vector4::from_column_slice(off) * ln10;
        let (problem, report) = lm.minimize(CircuitProblem { spectrum, x: x0 });
        let obj = report.objective_function;
        if !obj.is_finite() {
            continue;
        }
        best_any = best_any.min(obj);
        if report.termination.was_successful() && best.as_ref().is_none_or(|b| obj < b.0) {
            best = Some((obj, problem.x, s));
        }
    }
    let Some((_, x, start)) = best else {
        return Err(Error::FitFailed(format!(
            "no start converged; best residual norm {:.6e} ohm",
            (2.0 * best_any).sqrt()
        )));
    };
    let params = CircuitParams::from_log(&x);
    let residuals: Vec<Complex64> = pts
        .iter()
        .map(|p| circuit_impedance(&params, p.frequency) - p.z)
        .collect();
    let residual_norm = residuals.iter().map(|r| r.norm_sqr()).sum::<f64>().sqrt();
    Ok(CircuitFit {
        params,
        residual_norm,
        residuals,
        start,
    })
}

/// `σ(v) = σ_below` up to the threshold `v_c`, then
/// `σ_below + σ_scale·(v − v_c)^t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PercolationModel {
    #[serde(rename = "sigma_below_S_per_m")]
    pub sigma_below: f64,
    #[serde(rename = "sigma_scale_S_per_m")]
    pub sigma_scale: f64,
    pub v_c: f64,
    pub t: f64,
}

impl Default for PercolationModel {
    fn default() -> Self {
        PercolationModel {
            sigma_below: 2e-3,
            sigma_scale: 120.0,
            v_c: 0.015,
            t: 2.0,
        }
    }
}

impl PercolationModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_c > 0.0 && self.v_c < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "v_c must be in (0, 1), got {}",
                self.v_c
            )));
        }
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::InvalidArgument(format!("t must be > 0, got {}", self.t)));
        }
        if !(self.sigma_below > 0.0 && self.sigma_scale > 0.0 && self.sigma_scale.is_finite()) {
            return Err(Error::InvalidArgument("conductivities must be > 0".into()));
        }
        // One volume-percent past threshold must already exceed the floor.
        if self.sigma_scale * 0.01f64.powf(self.t) <= self.sigma_below {
            return Err(Error::InvalidArgument(
                "sigma_scale too small: no conductivity rise within 1 vol.% above threshold".into(),
            ));
        }
        Ok(())
    }

    pub fn sigma(&self, v: f64) -> Result<f64> {
        self.validate()?;
        if !(0.0..1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "volume fraction must be in [0, 1), got {v}"
            )));
        }
        Ok(if v <= self.v_c {
            self.sigma_below
        } else {
            self.sigma_below + self.sigma_scale * (v - self.v_c).powf(self.t)
        })
    }
}

/// `g(F) = 1 − drop·(1 − exp(−F/F₀))`: normalised conductivity under load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiezoModel {
    pub saturation_drop: f64,
    #[serde(rename = "load_scale_N")]
    pub load_scale: f64,
}

impl Default for PiezoModel {
    fn default() -> Self {
        PiezoModel {
            saturation_drop: 0.3,
            load_scale: 800.0,
        }
    }
}

impl PiezoModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.saturation_drop > 0.0 && self.saturation_drop < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "saturation_drop must be in (0, 1), got {}",
                self.saturation_drop
            )));
        }
        if !(self.load_scale > 0.0 && self.load_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "load_scale must be > 0, got {}",
                self.load_scale
            )));
        }
        Ok(())
    }

    pub fn factor(&self, load: f64) -> Result<f64> {
        self.validate()?;
        if !(load >= 0.0 && load.is_finite()) {
            return Err(Error::InvalidArgument(format!("load must be >= 0, got {load}")));
        }
        Ok(1.0 - self.saturation_drop * (-(-load / self.load_scale).exp_m1()))
    }
}
