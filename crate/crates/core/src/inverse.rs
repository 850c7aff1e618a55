//! One-step linearised difference reconstruction.
//!
//! Minimises `½‖JΔσ − δV‖² + ½α‖LΔσ‖²`, optionally subject to `Δσ ≤ 0`,
//! where `L` is the element-graph Laplacian. The unconstrained problem is
//! solved through its normal equations; the sign-constrained one by a
//! Lawson–Hanson active-set solver applied to `y = −Δσ ≥ 0`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{element_adjacency, ElementAdjacency, Mesh};
use crate::sensitivity::SensitivityMatrix;

/// Sparse, symmetric graph Laplacian over element adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationOperator {
    /// Row-wise `(column, value)` pairs, diagonal first, then neighbours ascending.
    rows: Vec<Vec<(usize, f64)>>,
}

impl RegularizationOperator {
    pub fn from_adjacency(n_elements: usize, adjacency: &ElementAdjacency) -> Result<Self> {
        if adjacency.neighbors.len() != n_elements {
            return Err(Error::mismatch("adjacency rows", n_elements, adjacency.neighbors.len()));
        }
        let rows = adjacency
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut nb = nb.clone();
                nb.sort_unstable();
                let mut row = vec![(i, nb.len() as f64)];
                row.extend(nb.into_iter().map(|j| (j, -1.0)));
                row
            })
            .collect();
        Ok(RegularizationOperator { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn trace(&self) -> f64 {
        self.rows.iter().map(|r| r[0].1).sum()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Adds `weight · LᵀL` to `target`.
    fn add_gram(&self, target: &mut DMatrix<f64>, weight: f64) {
        // L is symmetric, so (LᵀL)_ij = Σ_k L_ki L_kj.
        for r in &self.rows {
            for &(i, vi) in r {
                for &(j, vj) in r {
                    target[(i, j)] += weight * vi * vj;
                }
            }
        }
    }
}

/// Graph Laplacian of the mesh's element adjacency.
pub fn build_laplacian(mesh: &Mesh) -> RegularizationOperator {
    RegularizationOperator::from_adjacency(mesh.n_elements(), &element_adjacency(mesh))
        .expect("adjacency is built from the same mesh")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    /// `Δσ ≤ 0` elementwise.
    Nonpositive,
    Unconstrained,
}

impl ConstraintMode {
    pub fn is_constrained(self) -> bool {
        self == ConstraintMode::Nonpositive
    }
}

impl fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintMode::Nonpositive => "nonpositive",
            ConstraintMode::Unconstrained => "unconstrained",
        })
    }
}

impl FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonpositive" => Ok(ConstraintMode::Nonpositive),
            "unconstrained" => Ok(ConstraintMode::Unconstrained),
            other => Err(Error::InvalidArgument(format!(
                "unknown constraint mode `{other}` (expected nonpositive or unconstrained)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    /// Per-element conductivity change (S/m).
    pub delta_sigma: Vec<f64>,
    pub alpha: f64,
    pub mode: ConstraintMode,
    /// Whether `J` was column-normalised before solving. When it was, `α`
    /// weighs the roughness of the scaled variable `DΔσ`.
    pub column_scaled: bool,
    /// `‖JΔσ − δV‖₂`.
    pub data_residual: f64,
    /// `‖LΔσ‖₂`.
    pub roughness: f64,
    /// `‖Lx‖₂` for the variable `x` that `α` acted on (`x = Δσ` unless
    /// column-scaled). This is the quantity traded off along an L-curve.
    pub penalty_roughness: f64,
}

impl ReconstructionResult {
    pub fn region_average(&self, mesh: &Mesh, center: [f64; 2], diameter: f64) -> Result<f64> {
        region_average(&self.delta_sigma, mesh, center, diameter)
    }
}

/// Reusable solver for one `(J, L, α, mode)` combination; the Gram matrix
/// (and in unconstrained mode its factorisation) is computed once.
pub struct Reconstructor {
    jacobian: DMatrix<f64>,
    scales: Option<Vec<f64>>,
    laplacian: RegularizationOperator,
    alpha: f64,
    mode: ConstraintMode,
    gram: DMatrix<f64>,
    cholesky: Option<Cholesky<f64, Dyn>>,
}

impl Reconstructor {
    pub fn new(j: &SensitivityMatrix, l: &RegularizationOperator, alpha: f64, mode: ConstraintMode) -> Result<Self> {
        Self::build(j.entries().clone(), None, l, alpha, mode)
    }

    /// Solves for `x = DΔσ` against `J D⁻¹`, `D` the column norms of `J`,
    /// and maps back. Makes `α` comparable across meshes and backgrounds.
    pub fn column_scaled(
        j: &SensitivityMatrix,
        l: &RegularizationOperator,
        alpha: f64,
        mode: ConstraintMode,
    ) -> Result<Self> {
        let (scaled, scales) = j.column_normalized();
        Self::build(scaled.entries().clone(), Some(scales), l, alpha, mode)
    }

    fn build(
        jacobian: DMatrix<f64>,
        scales: Option<Vec<f64>>,
        l: &RegularizationOperator,
        alpha: f64,
        mode: ConstraintMode,
    ) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        let n = jacobian.ncols();
        if l.len() != n {
            return Err(Error::mismatch("Laplacian size", n, l.len()));
        }
        if alpha == 0.0 && jacobian.nrows() < n {
            return Err(Error::IllPosed(format!(
                "{} measurements cannot determine {n} unknowns without regularization; use alpha > 0",
                jacobian.nrows()
            )));
        }
        let mut gram = jacobian.tr_mul(&jacobian);
        l.add_gram(&mut gram, alpha);
        let cholesky = match mode {
            ConstraintMode::Unconstrained => Some(Cholesky::new(gram.clone()).ok_or_else(|| {
                if alpha == 0.0 {
                    Error::IllPosed("JᵀJ is rank deficient; use alpha > 0".into())
                } else {
                    Error::Singular(format!("JᵀJ + αLᵀL is not positive definite at alpha = {alpha}"))
                }
            })?),
            ConstraintMode::Nonpositive => {
                if alpha == 0.0 && Cholesky::new(gram.clone()).is_none() {
                    return Err(Error::IllPosed("JᵀJ is rank deficient; use alpha > 0".into()));
                }
                None
            }
        };
        Ok(Reconstructor {
            jacobian,
            scales,
            laplacian: l.clone(),
            alpha,
            mode,
            gram,
            cholesky,
        })
    }

    pub fn n_measurements(&self) -> usize {
        self.jacobian.nrows()
    }

    pub fn solve(&self, dv: &[f64]) -> Result<ReconstructionResult> {
        if dv.len() != self.jacobian.nrows() {
            return Err(Error::mismatch(
                "voltage difference length",
                self.jacobian.nrows(),
                dv.len(),
            ));
        }
        if dv.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("voltage differences must be finite".into()));
        }
        let dv = DVector::from_column_slice(dv);
        let rhs = self.jacobian.tr_mul(&dv);
        let x = match self.mode {
            ConstraintMode::Unconstrained => {
                let chol = self.cholesky.as_ref().expect("factored in build");
                solve_refined(&self.gram, chol, &rhs)
            }
            ConstraintMode::Nonpositive => {
                let h = -&rhs;
                let y = nnls_gram(&self.gram, &h, 10 * self.gram.nrows().max(1))?;
                y.map(|v| if v > 0.0 { -v } else { 0.0 })
            }
        };

        let data_residual = (&self.jacobian * &x - &dv).norm();
        let penalty_roughness = norm(&self.laplacian.apply(x.as_slice()));
        let delta_sigma: Vec<f64> = match &self.scales {
            Some(s) => x.iter().zip(s).map(|(v, s)| v / s).collect(),
            None => x.as_slice().to_vec(),
        };
        let roughness = norm(&self.laplacian.apply(&delta_sigma));
        Ok(ReconstructionResult {
            delta_sigma,
            alpha: self.alpha,
            mode: self.mode,
            column_scaled: self.scales.is_some(),
            data_residual,
            roughness,
            penalty_roughness,
        })
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cholesky solve followed by up to three steps of iterative refinement.
fn solve_refined(a: &DMatrix<f64>, chol: &Cholesky<f64, Dyn>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = chol.solve(b);
    let target = 1e-13 * b.norm();
    for _ in 0..3 {
        let r = b - a * &x;
        if r.norm() <= target {
            break;
        }
        x += chol.solve(&r);
    }
    x
}

/// `argmin_Δσ ½‖JΔσ − δV‖² + ½α‖LΔσ‖²`, with `Δσ ≤ 0` in nonpositive mode.
pub fn reconstruct(
    j: &SensitivityMatrix,
    l: &RegularizationOperator,
    alpha: f64,
    dv: &[f64],
    mode: ConstraintMode,
) -> Result<ReconstructionResult> {
    Reconstructor::new(j, l, alpha, mode)?.solve(dv)
}

/// [`reconstruct`] on the column-normalised Jacobian.
pub fn reconstruct_normalized(
    j: &SensitivityMatrix,
    l: &RegularizationOperator,
    alpha: f64,
    dv: &[f64],
    mode: ConstraintMode,
) -> Result<ReconstructionResult> {
    Reconstructor::column_scaled(j, l, alpha, mode)?.solve(dv)
}

/// Upper-triangular Cholesky factor `R` of `G[P, P]` (so `G_PP = RᵀR`),
/// stored column by column, updated as the passive set changes.
struct PassiveFactor {
    set: Vec<usize>,
    cols: Vec<Vec<f64>>,
}

impl PassiveFactor {
    fn new() -> Self {
        PassiveFactor {
            set: Vec::new(),
            cols: Vec::new(),
        }
    }

    fn from_set(g: &DMatrix<f64>, set: &[usize]) -> Option<Self> {
        let mut f = Self::new();
        for &j in set {
            if !f.push(g, j) {
                return None;
            }
        }
        Some(f)
    }

    /// Appends variable `j`; returns false (leaving the factor unchanged) if
    /// `G[P∪j, P∪j]` is numerically singular.
    fn push(&mut self, g: &DMatrix<f64>, j: usize) -> bool {
        let p = self.set.len();
        let mut col = Vec::with_capacity(p + 1);
        for i in 0..p {
            let mut v = g[(self.set[i], j)];
            for (k, c) in col.iter().enumerate() {
                v -= self.cols[i][k] * c;
            }
            col.push(v / self.cols[i][i]);
        }
        let d2 = g[(j, j)] - col.iter().map(|c| c * c).sum::<f64>();
        if !(d2 > 1e-12 * g[(j, j)]) {
            return false;
        }
        col.push(d2.sqrt());
        self.set.push(j);
        self.cols.push(col);
        true
    }

    /// Removes the variable at position `k` and re-triangularises with
    /// Givens rotations.
    fn remove(&mut self, k: usize) {
        self.set.remove(k);
        self.cols.remove(k);
        for j in k..self.cols.len() {
            let (a, b) = (self.cols[j][j], self.cols[j][j + 1]);
            let r = a.hypot(b);
            let (c, s) = (a / r, b / r);
            for col in &mut self.cols[j..] {
                let (u, v) = (col[j], col[j + 1]);
                col[j] = c * u + s * v;
                col[j + 1] = -s * u + c * v;
            }
            self.cols[j].pop();
        }
    }

    /// Solves `G_PP s = rhs_P`.
    fn solve(&self, rhs: &DVector<f64>) -> Vec<f64> {
        let p = self.set.len();
        let mut u = vec![0.0; p];
        for i in 0..p {
            let dot: f64 = self.cols[i][..i].iter().zip(&u[..i]).map(|(a, b)| a * b).sum();
            u[i] = (rhs[self.set[i]] - dot) / self.cols[i][i];
        }
        for i in (0..p).rev() {
            let dot: f64 = (i + 1..p).map(|k| self.cols[k][i] * u[k]).sum();
            u[i] = (u[i] - dot) / self.cols[i][i];
        }
        u
    }
}

/// Lawson–Hanson active-set solver for `min ½yᵀGy − hᵀy` subject to `y ≥ 0`,
/// with `G` symmetric positive semidefinite.
///
/// Entering variable: largest `w = h − Gy` (most negative gradient), lowest
/// index on exact ties.
pub fn nnls_gram(g: &DMatrix<f64>, h: &DVector<f64>, max_iter: usize) -> Result<DVector<f64>> {
    let n = h.len();
    if g.nrows() != n || g.ncols() != n {
        return Err(Error::mismatch("Gram matrix size", n, g.nrows()));
    }
    let mut y = DVector::zeros(n);
    let scale = h.amax().max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    let mut factor = PassiveFactor::new();
    let mut passive = vec![false; n];
    let mut iterations = 0;

    // The incremental factor accumulates rounding; on exit the passive-set
    // solve is repeated from a fresh factorisation, and if that disagrees in
    // sign the loop resumes from there.
    for _pass in 0..3 {
        let mut rejected = vec![false; n];
        loop {
            let w = h - g * &y;
            let mut best: Option<usize> = None;
            for i in 0..n {
                if !passive[i] && !rejected[i] && w[i] > tol && best.is_none_or(|b| w[i] > w[b]) {
                    best = Some(i);
                }
            }
            let Some(j) = best else { break };
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::NonConvergence(format!(
                    "active-set solver exceeded {max_iter} iterations; passive set size {}, max dual {:.3e}, objective {:.6e}",
                    factor.set.len(),
                    w.max(),
                    0.5 * y.dot(&(g * &y)) - h.dot(&y)
                )));
            }
            if !factor.push(g, j) {
                rejected[j] = true;
                continue;
            }
            passive[j] = true;

            loop {
                let s = factor.solve(h);
                if s.iter().all(|&v| v > 0.0) {
                    for (k, &i) in factor.set.iter().enumerate() {
                        y[i] = s[k];
                    }
                    break;
                }
                // Step from y towards s until the first passive variable hits zero.
                let mut step = 1.0f64;
                let mut blocking = Vec::new();
                for (k, &i) in factor.set.iter().enumerate() {
                    if s[k] <= 0.0 {
                        let t = y[i] / (y[i] - s[k]);
                        if t < step {
                            step = t;
                            blocking.clear();
                        }
                        if t == step {
                            blocking.push(i);
                        }
                    }
                }
                for (k, &i) in factor.set.iter().enumerate() {
                    y[i] += step * (s[k] - y[i]);
                }
                for i in blocking {
                    y[i] = 0.0;
                }
                let mut k = 0;
                while k < factor.set.len() {
                    let i = factor.set[k];
                    if y[i] <= 0.0 {
                        y[i] = 0.0;
                        passive[i] = false;
                        factor.remove(k);
                        // A variable that cannot move off zero right after
                        // entering would be picked again immediately.
                        if i == j && step == 0.0 {
                            rejected[i] = true;
                        }
                    } else {
                        k += 1;
                    }
                }
                if factor.set.is_empty() {
                    break;
                }
            }
            // A successful step can change which rejected variables would help.
            if passive[j] {
                rejected.iter_mut().for_each(|r| *r = false);
            }
        }

        let set: Vec<usize> = factor.set.clone();
        let Some(fresh) = PassiveFactor::from_set(g, &set) else {
            break;
        };
        let mut s = fresh.solve(h);
        for _ in 0..2 {
            let mut r = h.clone();
            for &i in &set {
                r[i] -= set.iter().zip(&s).map(|(&k, sk)| g[(i, k)] * sk).sum::<f64>();
            }
            let ds = fresh.solve(&r);
            s.iter_mut().zip(&ds).for_each(|(v, d)| *v += d);
        }
        factor = fresh;
        if s.iter().all(|&v| v > 0.0) {
            for (k, &i) in set.iter().enumerate() {
                y[i] = s[k];
            }
            let w = h - g * &y;
            if (0..n).all(|i| passive[i] || w[i] <= tol) {
                break;
            }
        }
    }
    Ok(y)
}

/// Area-weighted mean of `delta_sigma` over elements whose centroid lies in
/// the disk of the given diameter.
pub fn region_average(delta_sigma: &[f64], mesh: &Mesh, center: [f64; 2], diameter: f64) -> Result<f64> {
    if delta_sigma.len() != mesh.n_elements() {
        return Err(Error::mismatch(
            "conductivity change length",
            mesh.n_elements(),
            delta_sigma.len(),
        ));
    }
    if !(diameter > 0.0 && diameter.is_finite()) {
        return Err(Error::InvalidArgument(format!("diameter must be > 0, got {diameter}")));
    }
    let r2 = (diameter / 2.0).powi(2);
    let (mut sum, mut area) = (0.0, 0.0);
    for (e, c) in mesh.centroids().iter().enumerate() {
        if (c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2) <= r2 {
            let a = mesh.area(e);
            sum += a * delta_sigma[e];
            area += a;
        }
    }
    if area == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "no element centroid lies within {diameter} m of ({}, {})",
            center[0], center[1]
        )));
    }
    Ok(sum / area)
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && n >= 2) {
        return Err(Error::InvalidArgument(format!(
            "log sweep needs 0 < lo < hi and n >= 2, got lo={lo}, hi={hi}, n={n}"
        )));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

/// One L-curve point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LCurvePoint {
    pub alpha: f64,
    pub data_residual: f64,
    pub penalty_roughness: f64,
}

pub fn alpha_sweep(
    j: &SensitivityMatrix,
    l: &RegularizationOperator,
    dv: &[f64],
    alphas: &[f64],
    mode: ConstraintMode,
    column_scaled: bool,
) -> Result<Vec<LCurvePoint>> {
    alphas
        .iter()
        .map(|&alpha| {
            let solver = if column_scaled {
                Reconstructor::column_scaled(j, l, alpha, mode)?
            } else {
                Reconstructor::new(j, l, alpha, mode)?
            };
            let r = solver.solve(dv)?;
            Ok(LCurvePoint {
                alpha,
                data_residual: r.data_residual,
                penalty_roughness: r.penalty_roughness,
            })
        })
        .collect()
}

pub fn write_lcurve_csv<W: Write>(writer: W, points: &[LCurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["alpha", "data_residual_V", "roughness"])
        .map_err(csv_err)?;
    for p in points {
        w.write_record([
            format!("{:e}", p.alpha),
            format!("{:e}", p.data_residual),
            format!("{:e}", p.penalty_roughness),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::parse("csv", format!("{other:?}")),
    }
}

const RECON_HEADER: [&str; 4] = ["element_id", "centroid_x_m", "centroid_y_m", "delta_sigma_S_per_m"];

pub fn write_reconstruction_csv<W: Write>(writer: W, mesh: &Mesh, delta_sigma: &[f64]) -> Result<()> {
    if delta_sigma.len() != mesh.n_elements() {
        return Err(Error::mismatch(
            "conductivity change length",
            mesh.n_elements(),
            delta_sigma.len(),
        ));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RECON_HEADER).map_err(csv_err)?;
    for (e, (c, v)) in mesh.centroids().iter().zip(delta_sigma).enumerate() {
        w.write_record([
            e.to_string(),
            format!("{:e}", c[0]),
            format!("{:e}", c[1]),
            format!("{:e}", v),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `delta_sigma` column of a reconstruction CSV; element ids must
/// run 0, 1, 2, … in order.
pub fn read_reconstruction_csv<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(RECON_HEADER) {
        return Err(Error::parse(
            "line 1",
            format!("expected header {}", RECON_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 4 {
            return Err(Error::parse(format!("line {line}"), "expected 4 fields"));
        }
        let id: usize = rec[0]
            .parse()
            .map_err(|_| Error::parse(format!("line {line}, field element_id"), "not an integer"))?;
        if id != k {
            return Err(Error::parse(
                format!("line {line}, field element_id"),
                format!("expected {k}, found {id}"),
            ));
        }
        let v: f64 = rec[3]
            .parse()
            .map_err(|_| Error::parse(format!("line {line}, field delta_sigma_S_per_m"), "not a number"))?;
        out.push(v);
    }
    Ok(out)
}

/// Grey level for each element: in nonpositive mode the most negative value
/// maps to black and zero to white; otherwise zero is mid-grey and the
/// largest magnitude reaches black (negative) or white (positive).
fn grey_levels(delta_sigma: &[f64], mode: ConstraintMode) -> Vec<u8> {
    let max_abs = delta_sigma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let to_byte = |t: f64| (t.clamp(0.0, 1.0) * 255.0).round() as u8;
    delta_sigma
        .iter()
        .map(|&v| {
            if max_abs == 0.0 {
                return if mode.is_constrained() { 255 } else { 128 };
            }
            match mode {
                ConstraintMode::Nonpositive => to_byte(1.0 + v.min(0.0) / max_abs),
                ConstraintMode::Unconstrained => to_byte(0.5 + 0.5 * v / max_abs),
            }
        })
        .collect()
}

/// Binary PGM (P5) of `size × size` pixels over the bounding square of the
/// tank. Each pixel inside the disk takes the level of the element with the
/// nearest centroid; pixels outside take the zero-change level. Row 0 is the
/// top (`y = +R`).
pub fn write_pgm<W: Write>(
    mut writer: W,
    mesh: &Mesh,
    delta_sigma: &[f64],
    mode: ConstraintMode,
    size: usize,
) -> Result<()> {
    if delta_sigma.len() != mesh.n_elements() {
        return Err(Error::mismatch(
            "conductivity change length",
            mesh.n_elements(),
            delta_sigma.len(),
        ));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("raster size must be > 0".into()));
    }
    let pixels = raster_elements(mesh, size);
    let levels = grey_levels(delta_sigma, mode);
    let background = if mode.is_constrained() { 255 } else { 128 };
    let bytes: Vec<u8> = pixels.iter().map(|p| p.map_or(background, |e| levels[e])).collect();
    write!(writer, "P5\n{size} {size}\n255\n")?;
    writer.write_all(&bytes)?;
    Ok(())
}

/// Element sampled by each pixel (row-major, top row first), `None` outside
/// the disk.
pub fn raster_elements(mesh: &Mesh, size: usize) -> Vec<Option<usize>> {
    let r = mesh.radius();
    let centroids = mesh.centroids();
    // Bucket centroids on a coarse grid so each lookup scans a neighbourhood.
    let nb = ((centroids.len() as f64).sqrt().ceil() as usize).max(1);
    let cell = 2.0 * r / nb as f64;
    let bucket_of = |x: f64| (((x + r) / cell).floor().max(0.0) as usize).min(nb - 1);
    let mut buckets = vec![Vec::new(); nb * nb];
    for (e, c) in centroids.iter().enumerate() {
        buckets[bucket_of(c[1]) * nb + bucket_of(c[0])].push(e);
    }
    let mut out = Vec::with_capacity(size * size);
    for row in 0..size {
        let y = r - (row as f64 + 0.5) * 2.0 * r / size as f64;
        for col in 0..size {
            let x = -r + (col as f64 + 0.5) * 2.0 * r / size as f64;
            if x * x + y * y > r * r {
                out.push(None);
                continue;
            }
            let (bx, by) = (bucket_of(x) as isize, bucket_of(y) as isize);
            let mut best = (f64::INFINITY, 0usize);
            let mut ring = 0isize;
            loop {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs() != ring && dy.abs() != ring {
                            continue;
                        }
                        let (cx, cy) = (bx + dx, by + dy);
                        if cx < 0 || cy < 0 || cx >= nb as isize || cy >= nb as isize {
                            continue;
                        }
                        for &e in &buckets[cy as usize * nb + cx as usize] {
                            let c = centroids[e];
                            let d = (c[0] - x).powi(2) + (c[1] - y).powi(2);
                            if d < best.0 || (d == best.0 && e < best.1) {
                                best = (d, e);
                            }
                        }
                    }
                }
                // Anything outside the scanned square is at least `ring·cell` away.
                let reach = ring as f64 * cell;
                if best.0.is_finite() && best.0 <= reach * reach {
                    break;
                }
                if ring as usize > nb {
                    break;
                }
                ring += 1;
            }
            out.push(Some(best.1));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ConductivityField;
    use crate::mesh::{generate_disk_mesh, DiskMeshParams};

    fn two_triangles() -> RegularizationOperator {
        RegularizationOperator::from_adjacency(2, &ElementAdjacency::from_elements(&[[0, 1, 2], [1, 3, 2]])).unwrap()
    }

    #[test]
    fn laplacian_of_two_triangles() {
        let l = two_triangles().to_dense();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn laplacian_annihilates_constants_and_is_symmetric() {
        let mesh = generate_disk_mesh(&DiskMeshParams {
            radius: 1.0,
            n_electrodes: 8,
            electrode_coverage: 0.5,
            target_edge_length: 0.2,
        })
        .unwrap();
        let l = build_laplacian(&mesh);
        assert!(l.apply(&vec![3.5; l.len()]).iter().all(|v| *v == 0.0));
        let d = l.to_dense();
        assert_eq!(d, d.transpose());
        let adj = element_adjacency(&mesh);
        assert_eq!(l.trace(), 2.0 * adj.pairs.len() as f64);
    }

    #[test]
    fn gram_matches_dense_product() {
        let mesh = generate_disk_mesh(&DiskMeshParams {
            radius: 1.0,
            n_electrodes: 4,
            electrode_coverage: 0.5,
            target_edge_length: 0.5,
        })
        .unwrap();
        let l = build_laplacian(&mesh);
        let d = l.to_dense();
        let mut g = DMatrix::zeros(l.len(), l.len());
        l.add_gram(&mut g, 2.0);
        assert!((g - 2.0 * d.transpose() * &d).amax() < 1e-12);
    }

    fn random_problem(m: usize, n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        // Small LCG; the values only need to be varied, not random.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let a = DMatrix::from_fn(m, n, |_, _| next());
        let b = DVector::from_fn(m, |_, _| next());
        (a, b)
    }

    /// Brute-force oracle: enumerate every passive set, keep the feasible
    /// stationary point with the lowest objective.
    fn nnls_enumerate(g: &DMatrix<f64>, h: &DVector<f64>) -> DVector<f64> {
        let n = h.len();
        let mut best = (0.0, DVector::zeros(n));
        for mask in 1u32..(1 << n) {
            let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let gs = DMatrix::from_fn(idx.len(), idx.len(), |a, b| g[(idx[a], idx[b])]);
            let hs = DVector::from_fn(idx.len(), |a, _| h[idx[a]]);
            let Some(s) = gs.cholesky().map(|c| c.solve(&hs)) else {
                continue;
            };
            if s.iter().any(|v| *v < 0.0) {
                continue;
            }
            let mut y = DVector::zeros(n);
            for (k, &i) in idx.iter().enumerate() {
                y[i] = s[k];
            }
            let obj = 0.5 * y.dot(&(g * &y)) - h.dot(&y);
            if obj < best.0 {
                best = (obj, y);
            }
        }
        best.1
    }

    #[test]
    fn nnls_matches_enumeration() {
        for seed in 0..40 {
            let (a, b) = random_problem(9, 6, seed);
            let g = a.tr_mul(&a);
            let h = a.tr_mul(&b);
            let y = nnls_gram(&g, &h, 60).unwrap();
            let oracle = nnls_enumerate(&g, &h);
            assert!((&y - &oracle).amax() < 1e-10, "seed {seed}: {y} vs {oracle}");
        }
    }

    #[test]
    fn passive_factor_removal_matches_fresh_factor() {
        let (a, _) = random_problem(12, 8, 3);
        let g = a.tr_mul(&a);
        let mut f = PassiveFactor::from_set(&g, &[4, 1, 6, 0, 7]).unwrap();
        f.remove(1);
        f.remove(2);
        let fresh = PassiveFactor::from_set(&g, &[4, 6, 7]).unwrap();
        for (c, d) in f.cols.iter().zip(&fresh.cols) {
            for (x, y) in c.iter().zip(d) {
                // Givens rotations may flip signs of whole rows.
                assert!((x.abs() - y.abs()).abs() < 1e-12);
            }
        }
        let rhs = DVector::from_fn(8, |i, _| i as f64 - 3.0);
        let (s1, s2) = (f.solve(&rhs), fresh.solve(&rhs));
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    fn small_setup() -> (Mesh, SensitivityMatrix, RegularizationOperator) {
        use crate::forward::{ContactImpedances, Protocol};
        let mesh = generate_disk_mesh(&DiskMeshParams {
            radius: 1.0,
            n_electrodes: 8,
            electrode_coverage: 0.5,
            target_edge_length: 0.25,
        })
        .unwrap();
        let sigma = ConductivityField::uniform(mesh.n_elements(), 1.0).unwrap();
        let z = ContactImpedances::uniform(8, 0.02).unwrap();
        let j = crate::sensitivity::compute_jacobian(&mesh, &sigma, &z, &Protocol::adjacent(8, 1.0)).unwrap();
        let l = build_laplacian(&mesh);
        (mesh, j, l)
    }

    #[test]
    fn zero_data_gives_zero_image() {
        let (_, j, l) = small_setup();
        for mode in [ConstraintMode::Nonpositive, ConstraintMode::Unconstrained] {
            let r = reconstruct(&j, &l, 1e-3, &vec![0.0; j.rows()], mode).unwrap();
            assert!(r.delta_sigma.iter().all(|v| *v == 0.0));
            assert_eq!(r.data_residual, 0.0);
        }
    }

    #[test]
    fn alpha_zero_underdetermined_is_rejected() {
        let (_, j, l) = small_setup();
        assert!(j.rows() < j.cols());
        for mode in [ConstraintMode::Nonpositive, ConstraintMode::Unconstrained] {
            let err = reconstruct(&j, &l, 0.0, &vec![0.0; j.rows()], mode).unwrap_err();
            assert!(matches!(err, Error::IllPosed(_)), "{err}");
        }
        assert!(reconstruct(&j, &l, -1.0, &vec![0.0; j.rows()], ConstraintMode::Nonpositive).is_err());
    }

    #[test]
    fn wrong_data_length_is_rejected() {
        let (_, j, l) = small_setup();
        let err = reconstruct(&j, &l, 1.0, &[0.0; 3], ConstraintMode::Unconstrained).unwrap_err();
        assert!(err.to_string().contains(&j.rows().to_string()));
    }

    #[test]
    fn region_average_basics() {
        let (mesh, _, _) = small_setup();
        let n = mesh.n_elements();
        let uniform = vec![-0.7; n];
        assert!((region_average(&uniform, &mesh, [0.3, -0.2], 0.9).unwrap() + 0.7).abs() < 1e-15);
        let outside: Vec<f64> = mesh
            .centroids()
            .iter()
            .map(|c| if c[0].hypot(c[1]) > 0.6 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(region_average(&outside, &mesh, [0.0, 0.0], 1.0).unwrap(), 0.0);
        assert!(region_average(&uniform, &mesh, [5.0, 5.0], 0.1).is_err());
        assert!(region_average(&uniform, &mesh, [0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn constrained_output_is_nonpositive() {
        let (_, j, l) = small_setup();
        let g: Vec<f64> = (0..j.cols()).map(|e| ((e * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let dv = j.apply(&g).unwrap();
        let r = reconstruct(&j, &l, 1e-4, &dv, ConstraintMode::Nonpositive).unwrap();
        assert!(r.delta_sigma.iter().all(|v| *v <= 0.0));
        assert!(r.delta_sigma.iter().any(|v| *v < 0.0));
    }

    #[test]
    fn reconstruction_csv_round_trip() {
        let (mesh, _, _) = small_setup();
        let ds: Vec<f64> = (0..mesh.n_elements()).map(|e| -(e as f64) * 1.25e-5).collect();
        let mut buf = Vec::new();
        write_reconstruction_csv(&mut buf, &mesh, &ds).unwrap();
        assert_eq!(read_reconstruction_csv(buf.as_slice()).unwrap(), ds);
        let text = String::from_utf8(buf).unwrap().replacen("\n1,", "\n2,", 1);
        assert!(read_reconstruction_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn raster_levels_follow_mode() {
        assert_eq!(
            grey_levels(&[-2.0, -1.0, 0.0], ConstraintMode::Nonpositive),
            vec![0, 128, 255]
        );
        assert_eq!(
            grey_levels(&[-2.0, 0.0, 2.0], ConstraintMode::Unconstrained),
            vec![0, 128, 255]
        );
        assert_eq!(grey_levels(&[0.0, 0.0], ConstraintMode::Unconstrained), vec![128, 128]);
    }

    #[test]
    fn raster_sampling_is_nearest_centroid() {
        let (mesh, _, _) = small_setup();
        let size = 40;
        let pix = raster_elements(&mesh, size);
        let centroids = mesh.centroids();
        let r = mesh.radius();
        for (k, p) in pix.iter().enumerate() {
            let (row, col) = (k / size, k % size);
            let y = r - (row as f64 + 0.5) * 2.0 * r / size as f64;
            let x = -r + (col as f64 + 0.5) * 2.0 * r / size as f64;
            match p {
                None => assert!(x * x + y * y > r * r),
                Some(e) => {
                    let d = |c: &[f64; 2]| (c[0] - x).powi(2) + (c[1] - y).powi(2);
                    let best = centroids.iter().map(d).fold(f64::INFINITY, f64::min);
                    assert_eq!(d(&centroids[*e]), best);
                }
            }
        }
        let mut buf = Vec::new();
        write_pgm(
            &mut buf,
            &mesh,
            &vec![0.0; mesh.n_elements()],
            ConstraintMode::Nonpositive,
            size,
        )
        .unwrap();
        assert!(buf.starts_with(b"P5\n40 40\n255\n"));
        assert_eq!(buf.len(), 13 + size * size);
    }

    #[test]
    fn log_sweep_endpoints() {
        let a = log_spaced(1e-6, 1e-1, 6).unwrap();
        assert_eq!(a.len(), 6);
        assert!((a[0] - 1e-6).abs() < 1e-20 && (a[5] - 1e-1).abs() < 1e-15);
        assert!((a[1] - 1e-5).abs() < 1e-18);
        assert!(log_spaced(1.0, 1.0, 3).is_err());
    }
}
