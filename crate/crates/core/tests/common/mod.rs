//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use piezo_eit::forward::{
    simulate_protocol, solve_forward, ConductivityField, ContactImpedances, CurrentPattern, Protocol,
};
use piezo_eit::inverse::{build_laplacian, region_average, ConstraintMode, Reconstructor};
use piezo_eit::mesh::Mesh;
use piezo_eit::phantom::{simulate_scenario, Scenario};
use piezo_eit::sensitivity::compute_jacobian;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-element conductivities, log-uniform in `[lo, hi]`.
pub fn random_field(n: usize, lo: f64, hi: f64, seed: u64) -> ConductivityField {
    let mut r = rng(seed);
    let (a, b) = (lo.ln(), hi.ln());
    ConductivityField::new((0..n).map(|_| r.random_range(a..b).exp()).collect()).unwrap()
}

/// Transfer resistances `R[d][m]`: voltage `V_m − V_{m+1}` when unit current
/// enters electrode `d` and leaves `d + 1` (indices mod L).
pub fn transfer_matrix(mesh: &Mesh, sigma: &ConductivityField, z: &ContactImpedances) -> Vec<Vec<f64>> {
    let l = mesh.n_electrodes();
    let patterns: Vec<CurrentPattern> = (0..l)
        .map(|d| CurrentPattern::pair(l, d, (d + 1) % l, 1.0).unwrap())
        .collect();
    let frame = solve_forward(mesh, sigma, z, &patterns, false).unwrap();
    frame
        .electrode_voltages
        .iter()
        .map(|v| (0..l).map(|m| v[m] - v[(m + 1) % l]).collect())
        .collect()
}

/// Central-difference column `∂V/∂σ_e` with step `rel·σ_e`.
pub fn fd_column(
    mesh: &Mesh,
    sigma: &ConductivityField,
    z: &ContactImpedances,
    protocol: &Protocol,
    e: usize,
    rel: f64,
) -> Vec<f64> {
    let h = rel * sigma.values()[e];
    let eval = |delta: f64| {
        let mut v = sigma.values().to_vec();
        v[e] += delta;
        simulate_protocol(mesh, &ConductivityField::new(v).unwrap(), z, protocol)
            .unwrap()
            .protocol_voltages
    };
    let (p, m) = (eval(h), eval(-h));
    p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Equivalent-circuit impedance written out in real arithmetic:
/// `Z = R_s + R_p/(1 + a²) + j(ωL_s − R_p·a/(1 + a²))`, `a = ωR_pC_p`.
pub fn circuit_reference(r_p: f64, r_s: f64, c_p: f64, l_s: f64, f: f64) -> (f64, f64) {
    let w = 2.0 * std::f64::consts::PI * f;
    let a = w * r_p * c_p;
    (r_s + r_p / (1.0 + a * a), w * l_s - r_p * a / (1.0 + a * a))
}

/// Region averages of every step of a scenario, reconstructed against
/// step 0 with a Jacobian linearised at the homogeneous `sigma0`.
pub struct PipelineRun {
    pub labels: Vec<String>,
    pub averages: Vec<f64>,
}

pub fn run_pipeline(
    mesh: &Mesh,
    scenario: &Scenario,
    sigma0: f64,
    alpha: f64,
    mode: ConstraintMode,
    diameter: f64,
) -> PipelineRun {
    let steps = simulate_scenario(mesh, scenario).unwrap();
    let protocol = scenario.protocol(mesh.n_electrodes());
    let background = ConductivityField::uniform(mesh.n_elements(), sigma0).unwrap();
    let z = ContactImpedances::uniform(mesh.n_electrodes(), scenario.phantom.contact_impedance).unwrap();
    let j = compute_jacobian(mesh, &background, &z, &protocol).unwrap();
    let solver = Reconstructor::column_scaled(&j, &build_laplacian(mesh), alpha, mode).unwrap();
    let base = &steps[0].voltages;
    let averages = steps
        .iter()
        .map(|s| {
            let r = solver.solve(&diff(&s.voltages, base)).unwrap();
            region_average(&r.delta_sigma, mesh, [0.0, 0.0], diameter).unwrap()
        })
        .collect();
    PipelineRun {
        labels: steps.into_iter().map(|s| s.label).collect(),
        averages,
    }
}

/// Cramér–Rao lower bound on the standard deviation of unbiased estimates
/// of `(ln R_p, ln R_s, ln C_p, ln L_s)` when each impedance sample carries
/// independent Gaussian noise of standard deviation `rel·|Z|` per component.
pub fn circuit_log_crb(truth: [f64; 4], freqs: &[f64], rel: f64) -> [f64; 4] {
    use nalgebra::Matrix4;
    let eval = |q: [f64; 4], f: f64| circuit_reference(q[0].exp(), q[1].exp(), q[2].exp(), q[3].exp(), f);
    let q0 = truth.map(f64::ln);
    let mut fisher = Matrix4::<f64>::zeros();
    for &f in freqs {
        let (re, im) = eval(q0, f);
        let var = (rel * re.hypot(im)).powi(2);
        let mut grads = [[0.0; 2]; 4];
        for (k, g) in grads.iter_mut().enumerate() {
            let h = 1e-6;
            let (mut qp, mut qm) = (q0, q0);
            qp[k] += h;
            qm[k] -= h;
            let (a, b) = (eval(qp, f), eval(qm, f));
            *g = [(a.0 - b.0) / (2.0 * h), (a.1 - b.1) / (2.0 * h)];
        }
        for i in 0..4 {
            for j in 0..4 {
                fisher[(i, j)] += (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]) / var;
            }
        }
    }
    let cov = fisher.try_inverse().expect("Fisher information is invertible");
    std::array::from_fn(|k| cov[(k, k)].sqrt())
}

/// Reference equivalent-circuit rows `(name, [R_p, R_s, C_p, L_s])`.
pub const REFERENCE_CIRCUITS: [(&str, [f64; 4]); 6] = [
    ("1.0 vol.% #1", [432.50, 83.26, 18.66e-10, 1.66e-6]),
    ("1.0 vol.% #2", [601.52, 92.74, 16.46e-10, 2.10e-6]),
    ("1.5 vol.% #1", [183.89, 53.31, 32.54e-10, 1.42e-6]),
    ("1.5 vol.% #2", [240.89, 64.83, 22.10e-10, 1.49e-6]),
    ("2.0 vol.% #1", [36.08, 72.63, 2.37e-10, 1.19e-6]),
    ("2.0 vol.% #2", [38.15, 138.56, 2.35e-10, 1.13e-6]),
];
