//! Jacobian of protocol voltages with respect to element conductivity.
//!
//! Computed with adjoint fields. Measurement `V_a − V_b` under drive `d` is
//! `gᵀx_d` with `A x_d = b_d`, so its derivative along element `e` is
//! `−ψᵀ (∂A/∂σ_e) x_d`, where `A ψ = g` is the solve for a unit current
//! driven through the measurement pair. Only the stiffness block depends on
//! `σ`, giving `J[m, e] = −|e| ∇φ_d · ∇ψ_m` for linear elements.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::{basis_gradients, ConductivityField, ContactImpedances, CurrentPattern, ForwardSolver, Protocol};
use crate::mesh::Mesh;

const MAGIC: &[u8; 8] = b"PZEITJAC";

/// Dense `measurements × elements` sensitivity matrix and the background it
/// was linearised at.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    entries: DMatrix<f64>,
    background: ConductivityField,
}

impl SensitivityMatrix {
    pub fn new(entries: DMatrix<f64>, background: ConductivityField) -> Result<Self> {
        if entries.ncols() != background.len() {
            return Err(Error::mismatch(
                "sensitivity columns",
                background.len(),
                entries.ncols(),
            ));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("sensitivity matrix has non-finite entries".into()));
        }
        Ok(SensitivityMatrix { entries, background })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn background(&self) -> &ConductivityField {
        &self.background
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    /// `J Δσ`.
    pub fn apply(&self, delta_sigma: &[f64]) -> Result<Vec<f64>> {
        if delta_sigma.len() != self.cols() {
            return Err(Error::mismatch("conductivity change", self.cols(), delta_sigma.len()));
        }
        let x = DVector::from_column_slice(delta_sigma);
        Ok((&self.entries * x).as_slice().to_vec())
    }

    /// Euclidean norm of each column.
    pub fn column_norms(&self) -> Vec<f64> {
        self.entries.column_iter().map(|c| c.norm()).collect()
    }

    /// Copy with every column scaled to unit norm, and the norms used.
    /// Zero columns are left as they are (scale 1).
    pub fn column_normalized(&self) -> (SensitivityMatrix, Vec<f64>) {
        let scales: Vec<f64> = self
            .column_norms()
            .into_iter()
            .map(|n| if n > 0.0 { n } else { 1.0 })
            .collect();
        let mut entries = self.entries.clone();
        for (mut col, s) in entries.column_iter_mut().zip(&scales) {
            col /= *s;
        }
        (
            SensitivityMatrix {
                entries,
                background: self.background.clone(),
            },
            scales,
        )
    }

    /// Binary dump: 8-byte magic, `rows` and `cols` as little-endian u64,
    /// the matrix row-major as little-endian f64, then the `cols` background
    /// conductivities.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.rows() as u64).to_le_bytes())?;
        w.write_all(&(self.cols() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * (self.rows() + 1) * self.cols());
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                buf.extend_from_slice(&self.entries[(r, c)].to_le_bytes());
            }
        }
        for v in self.background.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(Error::parse("byte 0", "not a sensitivity matrix dump"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
        let (rows, cols) = (word(8), word(16));
        let expected = rows
            .checked_add(1)
            .and_then(|n| n.checked_mul(cols))
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(24))
            .ok_or_else(|| Error::parse("header", "dimensions overflow"))?;
        if bytes.len() != expected {
            return Err(Error::parse(
                "header",
                format!("{rows}x{cols} dump needs {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let value = |k: usize| f64::from_le_bytes(bytes[24 + 8 * k..32 + 8 * k].try_into().unwrap());
        let entries = DMatrix::from_fn(rows, cols, |i, j| value(i * cols + j));
        let background = ConductivityField::new((0..cols).map(|j| value(rows * cols + j)).collect())?;
        Self::new(entries, background)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_binary(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_binary(std::fs::File::open(path)?)
    }
}

/// Adjoint-field Jacobian of the protocol voltages at `sigma0`.
pub fn compute_jacobian(
    mesh: &Mesh,
    sigma0: &ConductivityField,
    z: &ContactImpedances,
    protocol: &Protocol,
) -> Result<SensitivityMatrix> {
    let l = mesh.n_electrodes();
    let drives = protocol.patterns(l)?;
    let solver = ForwardSolver::new(mesh, sigma0, z)?;

    let mut pair_index: HashMap<[usize; 2], usize> = HashMap::new();
    let mut adjoint_patterns = Vec::new();
    for pair in protocol.measure_pairs.iter().flatten() {
        if !pair_index.contains_key(pair) {
            pair_index.insert(*pair, adjoint_patterns.len());
            adjoint_patterns.push(CurrentPattern::pair(l, pair[0], pair[1], 1.0)?);
        }
    }

    let geometry: Vec<([[f64; 2]; 3], f64)> = (0..mesh.n_elements()).map(|e| basis_gradients(mesh, e)).collect();
    let field_gradients = |potentials: &[f64]| -> Vec<[f64; 2]> {
        geometry
            .iter()
            .zip(mesh.elements())
            .map(|((g, _), nodes)| {
                let mut grad = [0.0; 2];
                for a in 0..3 {
                    let u = potentials[nodes[a]];
                    grad[0] += u * g[a][0];
                    grad[1] += u * g[a][1];
                }
                grad
            })
            .collect()
    };

    let drive_grads: Vec<Vec<[f64; 2]>> = solver
        .solve_many(&drives)?
        .iter()
        .map(|s| field_gradients(&s.potentials))
        .collect();
    let adjoint_grads: Vec<Vec<[f64; 2]>> = solver
        .solve_many(&adjoint_patterns)?
        .iter()
        .map(|s| field_gradients(&s.potentials))
        .collect();

    let mut entries = DMatrix::zeros(protocol.n_measurements(), mesh.n_elements());
    let mut row = 0;
    for (d, pairs) in protocol.measure_pairs.iter().enumerate() {
        let phi = &drive_grads[d];
        for pair in pairs {
            let psi = &adjoint_grads[pair_index[pair]];
            for (e, (_, area)) in geometry.iter().enumerate() {
                entries[(row, e)] = -area * (phi[e][0] * psi[e][0] + phi[e][1] * psi[e][1]);
            }
            row += 1;
        }
    }
    SensitivityMatrix::new(entries, sigma0.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate_protocol;
    use crate::mesh::{generate_disk_mesh, DiskMeshParams};

    fn setup() -> (Mesh, ConductivityField, ContactImpedances, Protocol) {
        let mesh = generate_disk_mesh(&DiskMeshParams {
            radius: 1.0,
            n_electrodes: 8,
            electrode_coverage: 0.5,
            target_edge_length: 0.25,
        })
        .unwrap();
        let sigma = ConductivityField::new(
            (0..mesh.n_elements())
                .map(|e| 1.0 + 0.3 * (e as f64 * 0.37).sin())
                .collect(),
        )
        .unwrap();
        let z = ContactImpedances::uniform(8, 0.02).unwrap();
        (mesh, sigma, z, Protocol::adjacent(8, 1.0))
    }

    #[test]
    fn zero_change_maps_to_zero() {
        let (mesh, sigma, z, p) = setup();
        let j = compute_jacobian(&mesh, &sigma, &z, &p).unwrap();
        assert_eq!(j.rows(), p.n_measurements());
        assert_eq!(j.cols(), mesh.n_elements());
        assert!(j.apply(&vec![0.0; j.cols()]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matches_forward_difference_on_sampled_columns() {
        let (mesh, sigma, z, p) = setup();
        let j = compute_jacobian(&mesh, &sigma, &z, &p).unwrap();
        let base = simulate_protocol(&mesh, &sigma, &z, &p).unwrap().protocol_voltages;
        for e in [0, 7, mesh.n_elements() / 2, mesh.n_elements() - 1] {
            let mut v = sigma.values().to_vec();
            let step = 1e-6 * v[e];
            v[e] += step;
            let bumped = simulate_protocol(&mesh, &ConductivityField::new(v).unwrap(), &z, &p)
                .unwrap()
                .protocol_voltages;
            let fd: Vec<f64> = bumped.iter().zip(&base).map(|(a, b)| (a - b) / step).collect();
            let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (m, f) in fd.iter().enumerate() {
                assert!(
                    (j.entries()[(m, e)] - f).abs() <= 1e-4 * scale,
                    "element {e}, row {m}: {} vs {f}",
                    j.entries()[(m, e)]
                );
            }
        }
    }

    #[test]
    fn binary_dump_round_trip() {
        let (mesh, sigma, z, p) = setup();
        let j = compute_jacobian(&mesh, &sigma, &z, &p).unwrap();
        let mut buf = Vec::new();
        j.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 8 * (j.rows() + 1) * j.cols());
        assert_eq!(SensitivityMatrix::read_binary(buf.as_slice()).unwrap(), j);
        assert!(SensitivityMatrix::read_binary(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn normalized_columns_have_unit_norm() {
        let (mesh, sigma, z, p) = setup();
        let j = compute_jacobian(&mesh, &sigma, &z, &p).unwrap();
        let (n, scales) = j.column_normalized();
        for (c, s) in n.column_norms().iter().zip(&scales) {
            assert!((c - 1.0).abs() < 1e-12);
            assert!(*s > 0.0);
        }
    }
}
