mod common;

use piezo_eit::forward::{
    simulate_protocol, ConductivityField, ContactImpedances, Protocol, DEFAULT_CONTACT_IMPEDANCE,
};
use piezo_eit::inverse::{build_laplacian, region_average, ConstraintMode, Reconstructor};
use piezo_eit::mesh::{generate_disk_mesh, DiskMeshParams, Mesh};
use piezo_eit::sensitivity::compute_jacobian;

const SIGMA0: f64 = 1e-3;

struct Setup {
    mesh: Mesh,
    z: ContactImpedances,
    protocol: Protocol,
    baseline: Vec<f64>,
    nonpositive: Reconstructor,
    unconstrained: Reconstructor,
}

fn setup() -> Setup {
    let mesh = generate_disk_mesh(&DiskMeshParams::default()).unwrap();
    let z = ContactImpedances::uniform(16, DEFAULT_CONTACT_IMPEDANCE).unwrap();
    let protocol = Protocol::adjacent(16, 25e-6);
    let background = ConductivityField::uniform(mesh.n_elements(), SIGMA0).unwrap();
    let baseline = simulate_protocol(&mesh, &background, &z, &protocol)
        .unwrap()
        .protocol_voltages;
    let j = compute_jacobian(&mesh, &background, &z, &protocol).unwrap();
    let l = build_laplacian(&mesh);
    Setup {
        nonpositive: Reconstructor::column_scaled(&j, &l, 1e-2, ConstraintMode::Nonpositive).unwrap(),
        unconstrained: Reconstructor::column_scaled(&j, &l, 1e-2, ConstraintMode::Unconstrained).unwrap(),
        mesh,
        z,
        protocol,
        baseline,
    }
}

impl Setup {
    /// Voltage change from the full forward model for `σ0 + Δσ(x, y)`.
    fn data(&self, delta: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        let values = self.mesh.centroids().into_iter().map(|c| SIGMA0 + delta(c)).collect();
        let field = ConductivityField::new(values).unwrap();
        let v = simulate_protocol(&self.mesh, &field, &self.z, &self.protocol)
            .unwrap()
            .protocol_voltages;
        common::diff(&v, &self.baseline)
    }

    fn average(&self, ds: &[f64], center: [f64; 2], diameter: f64) -> f64 {
        region_average(ds, &self.mesh, center, diameter).unwrap()
    }
}

fn blob(center: [f64; 2], radius: f64, value: f64) -> impl Fn([f64; 2]) -> f64 {
    move |p| {
        if (p[0] - center[0]).hypot(p[1] - center[1]) <= radius {
            value
        } else {
            0.0
        }
    }
}

#[test]
fn conductivity_drop_is_localised() {
    let s = setup();
    let target = [0.025, 0.0];
    let ds = s
        .nonpositive
        .solve(&s.data(blob(target, 0.015, -4e-4)))
        .unwrap()
        .delta_sigma;
    assert!(ds.iter().all(|&v| v <= 0.0));
    let at_target = s.average(&ds, target, 0.03);
    let opposite = s.average(&ds, [-0.025, 0.0], 0.03);
    assert!(at_target < 0.0);
    assert!(at_target < 3.0 * opposite, "{at_target} vs {opposite}");
}

#[test]
fn deeper_drops_give_more_negative_averages() {
    let s = setup();
    let averages: Vec<f64> = [1e-4, 2e-4, 4e-4]
        .iter()
        .map(|&depth| {
            let ds = s
                .nonpositive
                .solve(&s.data(blob([0.0, 0.0], 0.0225, -depth)))
                .unwrap()
                .delta_sigma;
            s.average(&ds, [0.0, 0.0], 0.045)
        })
        .collect();
    assert!(averages[0] < 0.0);
    assert!(averages.windows(2).all(|w| w[1] < w[0]), "{averages:?}");
}

#[test]
fn conductivity_rise_is_suppressed_only_by_the_constraint() {
    let s = setup();
    let ring = |p: [f64; 2]| {
        let r = p[0].hypot(p[1]);
        if (0.017..=0.0225).contains(&r) {
            1e-3
        } else {
            0.0
        }
    };
    let dv = s.data(ring);
    let free = s.average(&s.unconstrained.solve(&dv).unwrap().delta_sigma, [0.0, 0.0], 0.045);
    let clamped = s.average(&s.nonpositive.solve(&dv).unwrap().delta_sigma, [0.0, 0.0], 0.045);
    assert!(free > 0.0);
    assert!(clamped <= 0.0 && clamped.abs() < 0.05 * free, "{clamped} vs {free}");
}
