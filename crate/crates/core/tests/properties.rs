mod common;

use std::f64::consts::PI;
use std::sync::OnceLock;

use piezo_eit::forward::{ConductivityField, ContactImpedances, Protocol};
use piezo_eit::inverse::{build_laplacian, ConstraintMode, Reconstructor};
use piezo_eit::material::{complex_to_polar, polar_to_complex, PercolationModel, PiezoModel};
use piezo_eit::mesh::{element_adjacency, generate_disk_mesh, DiskMeshParams, Mesh};
use piezo_eit::sensitivity::{compute_jacobian, SensitivityMatrix};
use proptest::prelude::*;
use rand::Rng;

fn small_mesh() -> &'static Mesh {
    static MESH: OnceLock<Mesh> = OnceLock::new();
    MESH.get_or_init(|| {
        generate_disk_mesh(&DiskMeshParams {
            n_electrodes: 8,
            target_edge_length: 0.02,
            ..Default::default()
        })
        .unwrap()
    })
}

fn small_jacobian() -> &'static SensitivityMatrix {
    static J: OnceLock<SensitivityMatrix> = OnceLock::new();
    J.get_or_init(|| {
        let mesh = small_mesh();
        let sigma = ConductivityField::uniform(mesh.n_elements(), 1e-3).unwrap();
        let z = ContactImpedances::uniform(8, 1e-3).unwrap();
        compute_jacobian(mesh, &sigma, &z, &Protocol::adjacent(8, 25e-6)).unwrap()
    })
}

fn mesh_params() -> impl Strategy<Value = DiskMeshParams> {
    (
        0.03..0.1f64,
        prop::sample::select(vec![8usize, 12, 16]),
        0.3..0.7f64,
        0.5..1.0f64,
    )
        .prop_map(|(radius, n_electrodes, electrode_coverage, frac)| {
            let arc = 2.0 * PI * radius * electrode_coverage / n_electrodes as f64;
            DiskMeshParams {
                radius,
                n_electrodes,
                electrode_coverage,
                target_edge_length: frac * arc,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_meshes_are_valid(params in mesh_params()) {
        let mesh = generate_disk_mesh(&params).unwrap();
        prop_assert!(mesh.validate().is_ok());
        prop_assert_eq!(mesh.n_electrodes(), params.n_electrodes);
        for e in 0..mesh.n_elements() {
            prop_assert!(mesh.signed_area(e) > 0.0);
        }
        let disk = PI * params.radius * params.radius;
        prop_assert!(mesh.total_area() <= disk);
        prop_assert!(mesh.total_area() > 0.95 * disk);
        for node in mesh.nodes() {
            prop_assert!(node[0].hypot(node[1]) <= params.radius * (1.0 + 1e-12));
        }
    }

    #[test]
    fn halving_edge_length_at_least_doubles_elements(params in mesh_params()) {
        let coarse = generate_disk_mesh(&params).unwrap();
        let fine = generate_disk_mesh(&DiskMeshParams {
            target_edge_length: params.target_edge_length / 2.0,
            ..params
        })
        .unwrap();
        prop_assert!(fine.n_elements() >= 2 * coarse.n_elements());
    }

    #[test]
    fn laplacian_annihilates_constants_and_is_psd(
        x in prop::collection::vec(-1.0..1.0f64, small_mesh().n_elements()),
        c in -5.0..5.0f64,
    ) {
        let mesh = small_mesh();
        let l = build_laplacian(mesh);
        let adjacency = element_adjacency(mesh);
        for v in l.apply(&vec![c; x.len()]) {
            prop_assert!(v.abs() <= 1e-12 * c.abs().max(1.0));
        }
        let lx = l.apply(&x);
        let quad: f64 = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
        prop_assert!(quad >= -1e-12);
        for i in 0..x.len() {
            for &(j, w) in l.row(i) {
                if i != j {
                    prop_assert!(adjacency.contains(i, j));
                    prop_assert!(l.row(j).iter().any(|&(k, v)| k == i && v == w));
                }
            }
        }
    }

    #[test]
    fn unconstrained_reconstruction_is_linear(seed in any::<u64>(), c in -10.0..10.0f64) {
        let j = small_jacobian();
        let mesh = small_mesh();
        let solver =
            Reconstructor::column_scaled(j, &build_laplacian(mesh), 1e-2, ConstraintMode::Unconstrained).unwrap();
        let mut rng = common::rng(seed);
        let dv: Vec<f64> = (0..j.rows()).map(|_| rng.random_range(-1e-3..1e-3)).collect();
        let scaled: Vec<f64> = dv.iter().map(|v| c * v).collect();
        let a = solver.solve(&dv).unwrap().delta_sigma;
        let b = solver.solve(&scaled).unwrap().delta_sigma;
        let reference = common::norm(&a) * c.abs();
        let err = common::norm(&common::diff(&b, &a.iter().map(|v| c * v).collect::<Vec<_>>()));
        prop_assert!(err <= 1e-9 * reference.max(1e-300));
    }

    #[test]
    fn nonpositive_reconstruction_is_feasible(seed in any::<u64>()) {
        let j = small_jacobian();
        let mesh = small_mesh();
        let solver =
            Reconstructor::column_scaled(j, &build_laplacian(mesh), 1e-2, ConstraintMode::Nonpositive).unwrap();
        let mut rng = common::rng(seed);
        let dv: Vec<f64> = (0..j.rows()).map(|_| rng.random_range(-1e-3..1e-3)).collect();
        for v in solver.solve(&dv).unwrap().delta_sigma {
            prop_assert!(v <= 0.0);
        }
    }

    #[test]
    fn percolation_is_monotone(mut v in prop::collection::vec(0.0..0.5f64, 2..20)) {
        v.sort_by(f64::total_cmp);
        let model = PercolationModel::default();
        let sigma: Vec<f64> = v.iter().map(|&x| model.sigma(x).unwrap()).collect();
        for w in sigma.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        for (&x, &s) in v.iter().zip(&sigma) {
            if x > model.v_c {
                prop_assert!(s > model.sigma_below);
            } else {
                prop_assert_eq!(s, model.sigma_below);
            }
        }
    }

    #[test]
    fn piezo_factor_is_monotone_and_bounded(mut f in prop::collection::vec(0.0..1e5f64, 2..20)) {
        f.sort_by(f64::total_cmp);
        let model = PiezoModel::default();
        let g: Vec<f64> = f.iter().map(|&x| model.factor(x).unwrap()).collect();
        for w in g.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        for x in g {
            prop_assert!(x <= 1.0 && x >= 1.0 - model.saturation_drop);
        }
    }

    #[test]
    fn polar_round_trip(log_mag in -3.0..6.0f64, theta in (1e-9 - PI)..PI) {
        let mag = 10f64.powf(log_mag);
        let (re, im) = polar_to_complex(mag, theta);
        let (m2, t2) = complex_to_polar(re, im);
        prop_assert!((m2 - mag).abs() <= 1e-12 * mag);
        prop_assert!((t2 - theta).abs() <= 1e-12);
    }
}
