//! Synthetic tank experiments: a circular tank of water with a central
//! cement inclusion, stepped through loads and failure events, measured
//! with seeded noise.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{from_json_str, Error, Result};
use crate::forward::{
    simulate_protocol, write_voltage_csv, ConductivityField, ContactImpedances, Protocol, DEFAULT_AMPLITUDE,
    DEFAULT_CONTACT_IMPEDANCE,
};
use crate::material::{PercolationModel, PiezoModel};
use crate::mesh::Mesh;

fn default_tank_radius() -> f64 {
    0.0665
}
fn default_background() -> f64 {
    1e-3
}
fn default_inclusion_diameter() -> f64 {
    0.045
}
fn default_debonding_gain() -> f64 {
    5.0
}
fn default_contact_impedance() -> f64 {
    DEFAULT_CONTACT_IMPEDANCE
}

/// Inclusion conductivity, either given directly or evaluated from the
/// percolation model at a filler volume fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InclusionConductivity {
    Value(f64),
    VolumeFraction { volume_fraction: f64 },
}

impl InclusionConductivity {
    pub fn resolve(&self, percolation: &PercolationModel) -> Result<f64> {
        match *self {
            InclusionConductivity::Value(v) => Ok(v),
            InclusionConductivity::VolumeFraction { volume_fraction } => percolation.sigma(volume_fraction),
        }
    }
}

impl Default for InclusionConductivity {
    fn default() -> Self {
        InclusionConductivity::VolumeFraction { volume_fraction: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    #[serde(rename = "tank_radius_m", default = "default_tank_radius")]
    pub tank_radius: f64,
    #[serde(rename = "background_sigma_S_per_m", default = "default_background")]
    pub background_sigma: f64,
    #[serde(rename = "inclusion_center_m", default)]
    pub inclusion_center: [f64; 2],
    #[serde(rename = "inclusion_diameter_m", default = "default_inclusion_diameter")]
    pub inclusion_diameter: f64,
    #[serde(rename = "inclusion_sigma0_S_per_m", default)]
    pub inclusion_sigma0: InclusionConductivity,
    /// Conductivity multiplier of the debonded boundary layer.
    #[serde(default = "default_debonding_gain")]
    pub debonding_gain: f64,
    #[serde(rename = "contact_impedance_ohm_m2", default = "default_contact_impedance")]
    pub contact_impedance: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            tank_radius: default_tank_radius(),
            background_sigma: default_background(),
            inclusion_center: [0.0, 0.0],
            inclusion_diameter: default_inclusion_diameter(),
            inclusion_sigma0: InclusionConductivity::default(),
            debonding_gain: default_debonding_gain(),
            contact_impedance: default_contact_impedance(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StepKind {
    Load {
        #[serde(rename = "force_N")]
        force: f64,
    },
    Fracture,
    Debonding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub label: String,
    #[serde(flatten)]
    pub kind: StepKind,
}

impl ScenarioStep {
    pub fn load(force: f64) -> Self {
        ScenarioStep {
            label: format!("{force} N"),
            kind: StepKind::Load { force },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub rel: f64,
    #[serde(rename = "abs_floor_V")]
    pub abs_floor: f64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec {
        rel: 0.0,
        abs_floor: 0.0,
    };

    pub fn is_zero(&self) -> bool {
        self.rel == 0.0 && self.abs_floor == 0.0
    }

    fn validate(&self) -> Result<()> {
        if !(self.rel >= 0.0 && self.abs_floor >= 0.0 && self.rel.is_finite() && self.abs_floor.is_finite()) {
            return Err(Error::InvalidArgument("noise levels must be finite and >= 0".into()));
        }
        Ok(())
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            rel: 1e-3,
            abs_floor: 1e-6,
        }
    }
}

/// The phantom laid onto a mesh: which elements belong to the inclusion,
/// the crack band and the debonding layer.
#[derive(Debug, Clone)]
pub struct Phantom {
    spec: PhantomSpec,
    inclusion_sigma0: f64,
    inclusion: Vec<usize>,
    crack: Vec<usize>,
    debond: Vec<usize>,
    pristine: ConductivityField,
}

impl Phantom {
    pub fn new(spec: &PhantomSpec, percolation: &PercolationModel, mesh: &Mesh) -> Result<Self> {
        let sigma0 = spec.inclusion_sigma0.resolve(percolation)?;
        for (name, v) in [
            ("background_sigma", spec.background_sigma),
            ("inclusion_sigma0", sigma0),
            ("contact_impedance", spec.contact_impedance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(spec.debonding_gain > 1.0 && spec.debonding_gain.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "debonding_gain must be > 1, got {}",
                spec.debonding_gain
            )));
        }
        if !(spec.inclusion_diameter >= 0.0) {
            return Err(Error::InvalidArgument("inclusion_diameter must be >= 0".into()));
        }
        let tol = 1e-9 * mesh.radius();
        if (spec.tank_radius - mesh.radius()).abs() > tol {
            return Err(Error::Validation(format!(
                "tank radius {} m does not match mesh radius {} m",
                spec.tank_radius,
                mesh.radius()
            )));
        }
        let [cx, cy] = spec.inclusion_center;
        let r_inc = spec.inclusion_diameter / 2.0;
        if cx.hypot(cy) + r_inc > spec.tank_radius + tol {
            return Err(Error::Validation(format!(
                "inclusion (center ({cx}, {cy}), diameter {}) extends outside the tank",
                spec.inclusion_diameter
            )));
        }

        let centroids = mesh.centroids();
        let offset = |e: usize| [centroids[e][0] - cx, centroids[e][1] - cy];
        let inclusion: Vec<usize> = (0..mesh.n_elements())
            .filter(|&e| {
                let d = offset(e);
                r_inc > 0.0 && d[0].hypot(d[1]) <= r_inc
            })
            .collect();

        let (crack, debond) = if inclusion.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            // Band widths of about one element, taken from the mean inclusion
            // element area.
            let mean_area = inclusion.iter().map(|&e| mesh.area(e)).sum::<f64>() / inclusion.len() as f64;
            let h = (2.0 * mean_area).sqrt();
            let crack = inclusion.iter().copied().filter(|&e| offset(e)[0].abs() <= h).collect();
            let debond = inclusion
                .iter()
                .copied()
                .filter(|&e| {
                    let d = offset(e);
                    d[0].hypot(d[1]) > r_inc - h
                })
                .collect();
            (crack, debond)
        };

        let mut values = vec![spec.background_sigma; mesh.n_elements()];
        for &e in &inclusion {
            values[e] = sigma0;
        }
        Ok(Phantom {
            spec: spec.clone(),
            inclusion_sigma0: sigma0,
            inclusion,
            crack,
            debond,
            pristine: ConductivityField::new(values)?,
        })
    }

    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    pub fn inclusion_sigma0(&self) -> f64 {
        self.inclusion_sigma0
    }

    /// The unloaded field.
    pub fn field(&self) -> &ConductivityField {
        &self.pristine
    }

    pub fn inclusion_elements(&self) -> &[usize] {
        &self.inclusion
    }

    pub fn crack_elements(&self) -> &[usize] {
        &self.crack
    }

    pub fn debond_elements(&self) -> &[usize] {
        &self.debond
    }

    pub fn contact_impedances(&self, n_electrodes: usize) -> Result<ContactImpedances> {
        ContactImpedances::uniform(n_electrodes, self.spec.contact_impedance)
    }

    /// Field for a specimen state: intact inclusion elements scaled by
    /// `g(F)/g(F_baseline)`, then the crack band reset to the background
    /// and the debonded layer multiplied by the gain.
    pub fn render(&self, state: &SpecimenState, piezo: &PiezoModel) -> Result<ConductivityField> {
        if (state.fractured && self.crack.is_empty()) || (state.debonded && self.debond.is_empty()) {
            return Err(Error::InvalidArgument(
                "failure step needs a non-empty inclusion".into(),
            ));
        }
        let ratio = piezo.factor(state.force)? / piezo.factor(state.baseline_force)?;
        let mut v = self.pristine.values().to_vec();
        for &e in &self.inclusion {
            v[e] = self.inclusion_sigma0 * ratio;
        }
        if state.debonded {
            for &e in &self.debond {
                v[e] *= self.spec.debonding_gain;
            }
        }
        if state.fractured {
            for &e in &self.crack {
                v[e] = self.spec.background_sigma;
            }
        }
        ConductivityField::new(v)
    }
}

/// Mechanical state of the specimen during a scenario. Failures persist
/// and keep the last applied load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecimenState {
    pub baseline_force: f64,
    pub force: f64,
    pub fractured: bool,
    pub debonded: bool,
}

impl SpecimenState {
    pub fn at_baseline(force: f64) -> Self {
        SpecimenState {
            baseline_force: force,
            force,
            fractured: false,
            debonded: false,
        }
    }

    pub fn apply(&self, step: &StepKind) -> Result<Self> {
        let mut next = *self;
        match *step {
            StepKind::Load { force } => {
                if !(force >= 0.0 && force.is_finite()) {
                    return Err(Error::InvalidArgument(format!("force must be >= 0, got {force}")));
                }
                next.force = force;
            }
            StepKind::Fracture => next.fractured = true,
            StepKind::Debonding => next.debonded = true,
        }
        Ok(next)
    }
}

/// A complete scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub phantom: PhantomSpec,
    pub steps: Vec<ScenarioStep>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub piezo: PiezoModel,
    #[serde(default)]
    pub percolation: PercolationModel,
    /// Defaults to adjacent drive at 25 µA.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Protocol>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = from_json_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialises")
    }

    pub fn validate(&self) -> Result<()> {
        match self.steps.first() {
            None => return Err(Error::Validation("scenario has no steps".into())),
            Some(ScenarioStep {
                kind: StepKind::Load { .. },
                ..
            }) => {}
            Some(s) => {
                return Err(Error::Validation(format!(
                    "first step `{}` must be a load step (the baseline)",
                    s.label
                )))
            }
        }
        self.noise.validate()?;
        self.piezo.validate()?;
        self.percolation.validate()
    }

    pub fn protocol(&self, n_electrodes: usize) -> Protocol {
        self.protocol
            .clone()
            .unwrap_or_else(|| Protocol::adjacent(n_electrodes, DEFAULT_AMPLITUDE))
    }

    pub fn baseline_force(&self) -> f64 {
        match self.steps[0].kind {
            StepKind::Load { force } => force,
            _ => unreachable!("validated"),
        }
    }

    /// State after each step.
    pub fn states(&self) -> Result<Vec<SpecimenState>> {
        self.validate()?;
        let mut state = SpecimenState::at_baseline(self.baseline_force());
        self.steps
            .iter()
            .map(|s| {
                state = state.apply(&s.kind)?;
                Ok(state)
            })
            .collect()
    }
}

/// Names of the bundled scenarios.
pub const PRESET_NAMES: [&str; 6] = [
    "ladder_1.0volpct",
    "ladder_1.5volpct",
    "ladder_2.0volpct",
    "failure_1.0volpct",
    "failure_1.5volpct",
    "failure_2.0volpct",
];

/// JSON text of a bundled scenario.
pub fn preset(name: &str) -> Option<&'static str> {
    Some(match name {
        "ladder_1.0volpct" => include_str!("../presets/ladder_1.0volpct.json"),
        "ladder_1.5volpct" => include_str!("../presets/ladder_1.5volpct.json"),
        "ladder_2.0volpct" => include_str!("../presets/ladder_2.0volpct.json"),
        "failure_1.0volpct" => include_str!("../presets/failure_1.0volpct.json"),
        "failure_1.5volpct" => include_str!("../presets/failure_1.5volpct.json"),
        "failure_2.0volpct" => include_str!("../presets/failure_2.0volpct.json"),
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepVoltages {
    pub label: String,
    pub voltages: Vec<f64>,
}

/// Forward-solves every step and adds noise of standard deviation
/// `rel·|v| + abs_floor` per channel. Step `k` draws from ChaCha8 stream
/// `k` of `seed`, so results do not depend on evaluation order.
pub fn simulate_scenario(mesh: &Mesh, scenario: &Scenario) -> Result<Vec<StepVoltages>> {
    let phantom = Phantom::new(&scenario.phantom, &scenario.percolation, mesh)?;
    let protocol = scenario.protocol(mesh.n_electrodes());
    protocol.validate(mesh.n_electrodes())?;
    let z = phantom.contact_impedances(mesh.n_electrodes())?;
    let states = scenario.states()?;
    let standard = Normal::new(0.0, 1.0).expect("unit normal");

    states
        .iter()
        .zip(&scenario.steps)
        .enumerate()
        .map(|(k, (state, step))| {
            let field = phantom.render(state, &scenario.piezo)?;
            let mut voltages = simulate_protocol(mesh, &field, &z, &protocol)?.protocol_voltages;
            if !scenario.noise.is_zero() {
                let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
                rng.set_stream(k as u64);
                for v in &mut voltages {
                    let sd = scenario.noise.rel * v.abs() + scenario.noise.abs_floor;
                    *v += sd * standard.sample(&mut rng);
                }
            }
            Ok(StepVoltages {
                label: step.label.clone(),
                voltages,
            })
        })
        .collect()
}

/// Manifest of a simulated scenario written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub seed: u64,
    pub steps: Vec<ManifestStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestStep {
    pub index: usize,
    pub label: String,
    pub file: String,
}

/// File name for step `index`: `step_NN_<label>.csv` with the label reduced
/// to `[A-Za-z0-9._-]`.
pub fn step_file_name(index: usize, label: &str) -> String {
    let slug: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("step_{index:02}_{slug}.csv")
}

/// Writes one voltage CSV per step and `scenario_manifest.json` into
/// `outdir`; returns the paths written, manifest last.
pub fn write_scenario_outputs(
    outdir: &Path,
    protocol: &Protocol,
    seed: u64,
    steps: &[StepVoltages],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir)?;
    let mut written = Vec::new();
    let mut manifest = ScenarioManifest {
        seed,
        steps: Vec::new(),
    };
    for (k, s) in steps.iter().enumerate() {
        let name = step_file_name(k, &s.label);
        let path = outdir.join(&name);
        let file = std::fs::File::create(&path)?;
        write_voltage_csv(std::io::BufWriter::new(file), protocol, &s.voltages)?;
        written.push(path);
        manifest.steps.push(ManifestStep {
            index: k,
            label: s.label.clone(),
            file: name,
        });
    }
    let path = outdir.join("scenario_manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    text.push('\n');
    std::fs::write(&path, text)?;
    written.push(path);
    Ok(written)
}
