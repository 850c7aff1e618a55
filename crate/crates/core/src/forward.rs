//! Complete electrode model forward problem.
//!
//! The discrete system couples node potentials `Φ` and electrode voltages `V`:
//!
//! ```text
//! [ A_M + A_Z   A_W ] [Φ]   [0]
//! [ A_Wᵀ        A_D ] [V] = [I]
//! ```
//!
//! It is singular up to an additive constant. The solver grounds it with the
//! constraint `ΣV = 0`, imposed as the rank-one term `s·ccᵀ` with
//! `c = [0; 1_L]`. For zero-sum currents the augmented system has the same
//! solution as the bordered saddle-point system and stays positive definite,
//! so one sparse Cholesky factorization serves all patterns.

use std::io::{Read, Write};
use std::path::Path;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::LltError;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{from_json_str, Error, Result};
use crate::mesh::Mesh;

/// Default contact impedance (Ω·m), uniform over electrodes.
pub const DEFAULT_CONTACT_IMPEDANCE: f64 = 1e-3;

/// Default injected current amplitude (A).
pub const DEFAULT_AMPLITUDE: f64 = 25e-6;

/// Per-element conductivity (S/m).
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityField {
    values: Vec<f64>,
}

impl ConductivityField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "conductivity of element {i} must be positive, got {v}"
            )));
        }
        Ok(ConductivityField { values })
    }

    pub fn uniform(n_elements: usize, sigma: f64) -> Result<Self> {
        Self::new(vec![sigma; n_elements])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }

    pub fn check_mesh(&self, mesh: &Mesh) -> Result<()> {
        if self.len() != mesh.n_elements() {
            return Err(Error::mismatch("conductivity field", mesh.n_elements(), self.len()));
        }
        Ok(())
    }
}

/// Per-electrode contact impedance (Ω·m).
#[derive(Debug, Clone, PartialEq)]
pub struct ContactImpedances {
    z: Vec<f64>,
}

impl ContactImpedances {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if let Some((l, v)) = z.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "contact impedance of electrode {l} must be positive, got {v}"
            )));
        }
        Ok(ContactImpedances { z })
    }

    pub fn uniform(n_electrodes: usize, z: f64) -> Result<Self> {
        Self::new(vec![z; n_electrodes])
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.z.iter().map(|v| v * factor).collect())
    }
}

/// Currents injected at each electrode (A). Entries sum to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentPattern {
    injected: Vec<f64>,
}

impl CurrentPattern {
    pub fn new(injected: Vec<f64>) -> Result<Self> {
        let max = injected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sum: f64 = injected.iter().sum();
        if !max.is_finite() || sum.abs() > 1e-15 * max {
            return Err(Error::InvalidArgument(format!(
                "injected currents must sum to zero, sum is {sum:e}"
            )));
        }
        Ok(CurrentPattern { injected })
    }

    /// `amplitude` into `source`, out of `sink`.
    pub fn pair(n_electrodes: usize, source: usize, sink: usize, amplitude: f64) -> Result<Self> {
        if source >= n_electrodes || sink >= n_electrodes || source == sink {
            return Err(Error::InvalidArgument(format!(
                "invalid drive pair [{source}, {sink}] for {n_electrodes} electrodes"
            )));
        }
        let mut injected = vec![0.0; n_electrodes];
        injected[source] = amplitude;
        injected[sink] = -amplitude;
        Self::new(injected)
    }

    pub fn injected(&self) -> &[f64] {
        &self.injected
    }
}

/// Gradients of the three linear basis functions of an element, and its area.
pub fn basis_gradients(mesh: &Mesh, element: usize) -> ([[f64; 2]; 3], f64) {
    let [p, q, r] = mesh.vertices(element);
    let area2 = (q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]);
    let grads = [
        [(q[1] - r[1]) / area2, (r[0] - q[0]) / area2],
        [(r[1] - p[1]) / area2, (p[0] - r[0]) / area2],
        [(p[1] - q[1]) / area2, (q[0] - p[0]) / area2],
    ];
    (grads, 0.5 * area2)
}

/// Unassembled blocks of the electrode model system. Triplets may repeat and
/// are summed on assembly.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub n_nodes: usize,
    pub n_electrodes: usize,
    /// `A_M`: conductivity-weighted stiffness, node × node.
    pub stiffness: Vec<(usize, usize, f64)>,
    /// `A_Z`: boundary mass terms under electrodes, node × node.
    pub contact: Vec<(usize, usize, f64)>,
    /// `A_W`: electrode × node coupling.
    pub coupling: Vec<(usize, usize, f64)>,
    /// `A_D`: diagonal `E_l / z_l`.
    pub electrode_diag: Vec<f64>,
}

impl AssembledSystem {
    pub fn dim(&self) -> usize {
        self.n_nodes + self.n_electrodes
    }

    /// The full ungrounded symmetric system as a dense matrix. Meant for
    /// small meshes and tests.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n_nodes;
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for &(i, j, v) in self.stiffness.iter().chain(&self.contact) {
            m[(i, j)] += v;
        }
        for &(l, i, v) in &self.coupling {
            m[(n + l, i)] += v;
            m[(i, n + l)] += v;
        }
        for (l, &d) in self.electrode_diag.iter().enumerate() {
            m[(n + l, n + l)] += d;
        }
        m
    }

    /// Weight of the grounding term; matches the electrode block scale.
    pub fn grounding_weight(&self) -> f64 {
        self.electrode_diag.iter().sum::<f64>() / self.n_electrodes as f64
    }

    fn grounded_sparse(&self) -> Result<SparseColMat<usize, f64>> {
        let n = self.n_nodes;
        let l = self.n_electrodes;
        let s = self.grounding_weight();
        let mut trip: Vec<Triplet<usize, usize, f64>> =
            Vec::with_capacity(self.stiffness.len() + self.contact.len() + 2 * self.coupling.len() + l * l);
        for &(i, j, v) in self.stiffness.iter().chain(&self.contact) {
            trip.push(Triplet::new(i, j, v));
        }
        for &(e, i, v) in &self.coupling {
            trip.push(Triplet::new(n + e, i, v));
            trip.push(Triplet::new(i, n + e, v));
        }
        for a in 0..l {
            for b in 0..l {
                let d = if a == b { self.electrode_diag[a] } else { 0.0 };
                trip.push(Triplet::new(n + a, n + b, d + s));
            }
        }
        SparseColMat::try_new_from_triplets(self.dim(), self.dim(), &trip)
            .map_err(|e| Error::Singular(format!("sparse assembly failed: {e:?}")))
    }
}

/// Assemble the electrode model blocks for a conductivity field.
pub fn assemble_system(mesh: &Mesh, sigma: &ConductivityField, z: &ContactImpedances) -> Result<AssembledSystem> {
    sigma.check_mesh(mesh)?;
    if z.len() != mesh.n_electrodes() {
        return Err(Error::mismatch("contact impedances", mesh.n_electrodes(), z.len()));
    }

    let mut stiffness = Vec::with_capacity(9 * mesh.n_elements());
    for (e, &s) in sigma.values().iter().enumerate() {
        let (g, area) = basis_gradients(mesh, e);
        let nodes = mesh.elements()[e];
        for a in 0..3 {
            for b in 0..3 {
                let k = s * area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                stiffness.push((nodes[a], nodes[b], k));
            }
        }
    }

    let mut contact = Vec::new();
    let mut coupling = Vec::new();
    let mut electrode_diag = Vec::with_capacity(mesh.n_electrodes());
    for (l, el) in mesh.electrodes().iter().enumerate() {
        let inv_z = 1.0 / z.values()[l];
        for &[a, b] in &el.boundary_edges {
            let pa = mesh.nodes()[a];
            let pb = mesh.nodes()[b];
            let len = (pa[0] - pb[0]).hypot(pa[1] - pb[1]);
            // ∫ w_i w_j over a linear edge: len/3 on the diagonal, len/6 off it.
            contact.push((a, a, inv_z * len / 3.0));
            contact.push((b, b, inv_z * len / 3.0));
            contact.push((a, b, inv_z * len / 6.0));
            contact.push((b, a, inv_z * len / 6.0));
            coupling.push((l, a, -inv_z * len / 2.0));
            coupling.push((l, b, -inv_z * len / 2.0));
        }
        electrode_diag.push(el.arc_length * inv_z);
    }

    Ok(AssembledSystem {
        n_nodes: mesh.n_nodes(),
        n_electrodes: mesh.n_electrodes(),
        stiffness,
        contact,
        coupling,
        electrode_diag,
    })
}

/// Potentials from one forward solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub potentials: Vec<f64>,
    pub electrode_voltages: Vec<f64>,
}

/// Factored, grounded electrode model system for one conductivity field.
/// Immutable after construction; solves may run concurrently.
pub struct ForwardSolver {
    n_nodes: usize,
    n_electrodes: usize,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl std::fmt::Debug for ForwardSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardSolver")
            .field("n_nodes", &self.n_nodes)
            .field("n_electrodes", &self.n_electrodes)
            .finish_non_exhaustive()
    }
}

impl ForwardSolver {
    pub fn new(mesh: &Mesh, sigma: &ConductivityField, z: &ContactImpedances) -> Result<Self> {
        let system = assemble_system(mesh, sigma, z)?;
        Self::from_system(&system)
    }

    pub fn from_system(system: &AssembledSystem) -> Result<Self> {
        let matrix = system.grounded_sparse()?;
        let llt = matrix.sp_cholesky(Side::Lower).map_err(|e| {
            let (lo, hi) = diagonal_range(&matrix);
            let detail = match e {
                LltError::Numeric(faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index }) => {
                    format!("non-positive pivot at index {index}")
                }
                other => format!("{other:?}"),
            };
            Error::Singular(format!(
                "{detail}; diagonal range [{lo:e}, {hi:e}], ratio {:e}",
                hi / lo
            ))
        })?;
        Ok(ForwardSolver {
            n_nodes: system.n_nodes,
            n_electrodes: system.n_electrodes,
            llt,
        })
    }

    pub fn n_electrodes(&self) -> usize {
        self.n_electrodes
    }

    pub fn solve(&self, pattern: &CurrentPattern) -> Result<Solution> {
        Ok(self.solve_many(std::slice::from_ref(pattern))?.pop().unwrap())
    }

    /// Solve all patterns against the shared factorization.
    pub fn solve_many(&self, patterns: &[CurrentPattern]) -> Result<Vec<Solution>> {
        let n = self.n_nodes;
        let l = self.n_electrodes;
        for p in patterns {
            if p.injected().len() != l {
                return Err(Error::mismatch("current pattern", l, p.injected().len()));
            }
        }
        let mut rhs = Mat::<f64>::zeros(n + l, patterns.len());
        for (k, p) in patterns.iter().enumerate() {
            for (e, &i) in p.injected().iter().enumerate() {
                rhs[(n + e, k)] = i;
            }
        }
        self.llt.solve_in_place(rhs.as_mut());
        let mut out = Vec::with_capacity(patterns.len());
        for k in 0..patterns.len() {
            let col = rhs.col(k);
            let potentials: Vec<f64> = (0..n).map(|i| col[i]).collect();
            let electrode_voltages: Vec<f64> = (0..l).map(|e| col[n + e]).collect();
            if electrode_voltages.iter().any(|v| !v.is_finite()) {
                return Err(Error::Singular("non-finite electrode voltages".into()));
            }
            out.push(Solution {
                potentials,
                electrode_voltages,
            });
        }
        Ok(out)
    }
}

fn diagonal_range(m: &SparseColMat<usize, f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let r = m.as_ref();
    for j in 0..r.ncols() {
        let rows = r.row_idx_of_col_raw(j);
        let vals = r.val_of_col(j);
        for (&i, &v) in rows.iter().zip(vals) {
            if i == j {
                lo = lo.min(v.abs());
                hi = hi.max(v.abs());
            }
        }
    }
    (lo, hi)
}

/// Electrode voltages for every pattern, with the protocol-flattened
/// measurement vector once a protocol is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    pub patterns: Vec<CurrentPattern>,
    pub electrode_voltages: Vec<Vec<f64>>,
    /// Node potentials per pattern, kept only on request.
    pub potentials: Option<Vec<Vec<f64>>>,
    pub protocol_voltages: Vec<f64>,
}

/// Solve the forward problem for a set of current patterns.
pub fn solve_forward(
    mesh: &Mesh,
    sigma: &ConductivityField,
    z: &ContactImpedances,
    patterns: &[CurrentPattern],
    retain_potentials: bool,
) -> Result<MeasurementFrame> {
    let solver = ForwardSolver::new(mesh, sigma, z)?;
    let solutions = solver.solve_many(patterns)?;
    let mut electrode_voltages = Vec::with_capacity(solutions.len());
    let mut potentials = retain_potentials.then(Vec::new);
    for s in solutions {
        electrode_voltages.push(s.electrode_voltages);
        if let Some(p) = potentials.as_mut() {
            p.push(s.potentials);
        }
    }
    Ok(MeasurementFrame {
        patterns: patterns.to_vec(),
        electrode_voltages,
        potentials,
        protocol_voltages: Vec::new(),
    })
}

/// Forward solve for every drive of a protocol; fills `protocol_voltages`.
pub fn simulate_protocol(
    mesh: &Mesh,
    sigma: &ConductivityField,
    z: &ContactImpedances,
    protocol: &Protocol,
) -> Result<MeasurementFrame> {
    let patterns = protocol.patterns(mesh.n_electrodes())?;
    let mut frame = solve_forward(mesh, sigma, z, &patterns, false)?;
    frame.protocol_voltages = apply_protocol(&frame, protocol)?;
    Ok(frame)
}

/// Drive pairs with per-drive differential measurement pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    #[serde(rename = "amplitude_A")]
    pub amplitude: f64,
    /// `[source, sink]` per injection.
    pub drive_pairs: Vec<[usize; 2]>,
    /// For each drive, `[a, b]` pairs measured as `V_a − V_b`.
    pub measure_pairs: Vec<Vec<[usize; 2]>>,
}

impl Protocol {
    /// Adjacent drive, adjacent measurement, skipping pairs that touch a
    /// driven electrode: `L − 3` measurements per drive.
    pub fn adjacent(n_electrodes: usize, amplitude: f64) -> Self {
        let l = n_electrodes;
        let mut drive_pairs = Vec::with_capacity(l);
        let mut measure_pairs = Vec::with_capacity(l);
        for d in 0..l {
            let drive = [d, (d + 1) % l];
            drive_pairs.push(drive);
            measure_pairs.push(
                (0..l)
                    .map(|m| [m, (m + 1) % l])
                    .filter(|p| !p.iter().any(|e| drive.contains(e)))
                    .collect(),
            );
        }
        Protocol {
            amplitude,
            drive_pairs,
            measure_pairs,
        }
    }

    pub fn validate(&self, n_electrodes: usize) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        if self.drive_pairs.is_empty() {
            return Err(Error::InvalidArgument("protocol has no drive pairs".into()));
        }
        if self.measure_pairs.len() != self.drive_pairs.len() {
            return Err(Error::mismatch(
                "measure_pairs (one list per drive)",
                self.drive_pairs.len(),
                self.measure_pairs.len(),
            ));
        }
        let all = self.drive_pairs.iter().chain(self.measure_pairs.iter().flatten());
        for &[a, b] in all {
            if a >= n_electrodes || b >= n_electrodes {
                return Err(Error::InvalidArgument(format!(
                    "protocol pair [{a}, {b}] references an electrode outside [0, {n_electrodes})"
                )));
            }
            if a == b {
                return Err(Error::InvalidArgument(format!("degenerate protocol pair [{a}, {a}]")));
            }
        }
        Ok(())
    }

    pub fn n_measurements(&self) -> usize {
        self.measure_pairs.iter().map(Vec::len).sum()
    }

    pub fn patterns(&self, n_electrodes: usize) -> Result<Vec<CurrentPattern>> {
        self.validate(n_electrodes)?;
        self.drive_pairs
            .iter()
            .map(|&[s, t]| CurrentPattern::pair(n_electrodes, s, t, self.amplitude))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        from_json_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("protocol serializes");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Flatten a frame into the protocol's differential measurement vector.
pub fn apply_protocol(frame: &MeasurementFrame, protocol: &Protocol) -> Result<Vec<f64>> {
    let l = frame.patterns.first().map_or(0, |p| p.injected().len());
    protocol.validate(l)?;
    if frame.electrode_voltages.len() != protocol.drive_pairs.len() {
        return Err(Error::mismatch(
            "frame patterns",
            protocol.drive_pairs.len(),
            frame.electrode_voltages.len(),
        ));
    }
    let mut out = Vec::with_capacity(protocol.n_measurements());
    for (v, pairs) in frame.electrode_voltages.iter().zip(&protocol.measure_pairs) {
        out.extend(pairs.iter().map(|&[a, b]| v[a] - v[b]));
    }
    Ok(out)
}

/// Write protocol voltages as `pattern_index, measure_index, voltage_V`.
pub fn write_voltage_csv<W: Write>(writer: W, protocol: &Protocol, voltages: &[f64]) -> Result<()> {
    if voltages.len() != protocol.n_measurements() {
        return Err(Error::mismatch(
            "voltage vector",
            protocol.n_measurements(),
            voltages.len(),
        ));
    }
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["pattern_index", "measure_index", "voltage_V"])
        .map_err(csv_err)?;
    let mut k = 0;
    for (p, pairs) in protocol.measure_pairs.iter().enumerate() {
        for m in 0..pairs.len() {
            w.write_record([p.to_string(), m.to_string(), format!("{:e}", voltages[k])])
                .map_err(csv_err)?;
            k += 1;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a voltage CSV back into a flat vector, checking the index columns
/// run in protocol order.
pub fn read_voltage_csv<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = r.headers().map_err(|e| Error::parse("header", e.to_string()))?.clone();
    let expected = ["pattern_index", "measure_index", "voltage_V"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            "line 1",
            format!(
                "expected columns {expected:?}, found {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        ));
    }
    let mut out = Vec::new();
    let mut last: Option<(usize, usize)> = None;
    for (row, rec) in r.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::parse(format!("line {line}"), e.to_string()))?;
        let field = |i: usize, name: &str| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::parse(format!("line {line}, field `{name}`"), "missing"))
        };
        let p: usize = field(0, "pattern_index")?
            .parse()
            .map_err(|e| Error::parse(format!("line {line}, field `pattern_index`"), format!("{e}")))?;
        let m: usize = field(1, "measure_index")?
            .parse()
            .map_err(|e| Error::parse(format!("line {line}, field `measure_index`"), format!("{e}")))?;
        let v: f64 = field(2, "voltage_V")?
            .parse()
            .map_err(|e| Error::parse(format!("line {line}, field `voltage_V`"), format!("{e}")))?;
        let ok = match last {
            None => p == 0 && m == 0,
            Some((lp, lm)) => (p == lp && m == lm + 1) || (p == lp + 1 && m == 0),
        };
        if !ok {
            return Err(Error::parse(
                format!("line {line}"),
                format!("indices ({p}, {m}) out of order"),
            ));
        }
        last = Some((p, m));
        out.push(v);
    }
    Ok(out)
}
