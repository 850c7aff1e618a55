mod common;

use piezo_eit::forward::{
    simulate_protocol, ConductivityField, ContactImpedances, CurrentPattern, ForwardSolver, Protocol,
    DEFAULT_CONTACT_IMPEDANCE,
};
use piezo_eit::mesh::{generate_disk_mesh, DiskMeshParams, Mesh};

fn mesh() -> Mesh {
    generate_disk_mesh(&DiskMeshParams::default()).unwrap()
}

fn homogeneous(mesh: &Mesh) -> (ConductivityField, ContactImpedances) {
    (
        ConductivityField::uniform(mesh.n_elements(), 1e-3).unwrap(),
        ContactImpedances::uniform(mesh.n_electrodes(), DEFAULT_CONTACT_IMPEDANCE).unwrap(),
    )
}

fn max_abs(r: &[Vec<f64>]) -> f64 {
    r.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn transfer_matrix_is_symmetric_on_random_fields() {
    let mesh = mesh();
    let z = ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE).unwrap();
    for seed in 0..5 {
        let sigma = common::random_field(mesh.n_elements(), 2e-4, 5e-3, seed);
        let r = common::transfer_matrix(&mesh, &sigma, &z);
        let scale = max_abs(&r);
        for (d, row) in r.iter().enumerate() {
            for (m, value) in row.iter().enumerate() {
                assert!((value - r[m][d]).abs() <= 1e-10 * scale, "seed {seed} ({d},{m})");
            }
        }
    }
}

#[test]
fn homogeneous_transfer_matrix_has_ring_symmetry() {
    let mesh = mesh();
    let (sigma, z) = homogeneous(&mesh);
    let r = common::transfer_matrix(&mesh, &sigma, &z);
    let l = 16;
    let scale = max_abs(&r);
    for d in 0..l {
        for m in 0..l {
            // Rotation by one electrode pitch.
            assert!((r[d][m] - r[(d + 1) % l][(m + 1) % l]).abs() <= 1e-10 * scale);
            // Reflection across the x axis reverses both pairs.
            assert!((r[d][m] - r[(2 * l - d - 1) % l][(2 * l - m - 1) % l]).abs() <= 1e-10 * scale);
        }
    }
}

#[test]
fn joint_scaling_of_conductivity_and_contact_impedance() {
    let mesh = mesh();
    let sigma = common::random_field(mesh.n_elements(), 5e-4, 2e-3, 11);
    let z = ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE).unwrap();
    let protocol = Protocol::adjacent(16, 25e-6);
    let base = simulate_protocol(&mesh, &sigma, &z, &protocol)
        .unwrap()
        .protocol_voltages;
    for c in [0.1, 2.0, 25.0] {
        let v = simulate_protocol(&mesh, &sigma.scaled(c).unwrap(), &z.scaled(1.0 / c).unwrap(), &protocol)
            .unwrap()
            .protocol_voltages;
        let expected: Vec<f64> = base.iter().map(|x| x / c).collect();
        assert!(common::norm(&common::diff(&v, &expected)) <= 1e-10 * common::norm(&expected));
    }
}

#[test]
fn electrode_voltages_sum_to_zero_and_scale_with_current() {
    let mesh = mesh();
    let (sigma, z) = homogeneous(&mesh);
    let solver = ForwardSolver::new(&mesh, &sigma, &z).unwrap();
    let one = solver.solve(&CurrentPattern::pair(16, 3, 9, 1e-6).unwrap()).unwrap();
    let five = solver.solve(&CurrentPattern::pair(16, 3, 9, 5e-6).unwrap()).unwrap();
    let scale = one.electrode_voltages.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(one.electrode_voltages.iter().sum::<f64>().abs() <= 1e-12 * scale);
    for (a, b) in one.electrode_voltages.iter().zip(&five.electrode_voltages) {
        assert!((5.0 * a - b).abs() <= 1e-10 * scale);
    }
}

#[test]
fn adjacent_protocol_length() {
    let mesh = mesh();
    let (sigma, z) = homogeneous(&mesh);
    let protocol = Protocol::adjacent(16, 25e-6);
    assert_eq!(protocol.n_measurements(), 16 * 13);
    let v = simulate_protocol(&mesh, &sigma, &z, &protocol)
        .unwrap()
        .protocol_voltages;
    assert_eq!(v.len(), 208);
}
