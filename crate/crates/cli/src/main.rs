//! `piezo-eit`: mesh generation, scenario simulation, reconstruction, region
//! metrics and impedance-spectrum fitting from the command line.
//!
//! Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors.

mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use piezo_eit::forward::{
    read_voltage_csv, ConductivityField, ContactImpedances, Protocol, DEFAULT_AMPLITUDE, DEFAULT_CONTACT_IMPEDANCE,
};
use piezo_eit::inverse::{
    alpha_sweep, build_laplacian, log_spaced, read_reconstruction_csv, region_average, write_lcurve_csv, write_pgm,
    write_reconstruction_csv, ConstraintMode, Reconstructor,
};
use piezo_eit::material::{fit_circuit, load_spectrum};
use piezo_eit::mesh::{generate_disk_mesh, load_mesh, mesh_from_str, mesh_to_string, DiskMeshParams, Mesh};
use piezo_eit::phantom::{preset, simulate_scenario, write_scenario_outputs, Scenario, PRESET_NAMES};
use piezo_eit::sensitivity::compute_jacobian;

use manifest::{sidecar, RunManifest};

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "piezo-eit", version, about = "Difference EIT of piezoresistive inclusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a disk mesh with equally spaced boundary electrodes.
    Mesh(MeshArgs),
    /// Simulate every step of a scenario and write one voltage CSV per step.
    Simulate(SimulateArgs),
    /// Reconstruct the conductivity change between two voltage frames.
    Reconstruct(ReconstructArgs),
    /// Area-weighted mean conductivity change over a circular region.
    Avg(AvgArgs),
    /// Fit the equivalent circuit to an impedance spectrum.
    FitEis(FitEisArgs),
}

#[derive(clap::Args)]
struct MeshArgs {
    /// Tank radius (m).
    #[arg(long, default_value_t = 0.0665, value_parser = positive)]
    radius: f64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(4..))]
    electrodes: u32,
    /// Fraction of the circumference covered by electrodes.
    #[arg(long, default_value_t = 0.5, value_parser = open_unit)]
    coverage: f64,
    /// Target edge length (m).
    #[arg(long, default_value_t = 0.008, value_parser = positive)]
    edge: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Scenario JSON file, or the name of a bundled preset.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    outdir: PathBuf,
    /// Overrides the scenario's noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Protocol JSON file; overrides the scenario's protocol.
    #[arg(long)]
    protocol: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Nonpositive,
    Unconstrained,
}

impl From<Mode> for ConstraintMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Nonpositive => ConstraintMode::Nonpositive,
            Mode::Unconstrained => ConstraintMode::Unconstrained,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scaling {
    /// Regularise the column-normalised Jacobian.
    Column,
    /// Regularise the raw Jacobian.
    None,
}

#[derive(clap::Args)]
struct ReconstructArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Reference voltage CSV.
    #[arg(long)]
    baseline: PathBuf,
    /// Voltage CSV to compare against the baseline.
    #[arg(long)]
    frame: PathBuf,
    #[arg(long, default_value_t = 1e-2, value_parser = non_negative)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = Mode::Nonpositive)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = Scaling::Column)]
    scaling: Scaling,
    /// Homogeneous conductivity the Jacobian is linearised at (S/m).
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    sigma0: f64,
    /// Contact impedance of every electrode (ohm m^2).
    #[arg(long, default_value_t = DEFAULT_CONTACT_IMPEDANCE, value_parser = positive)]
    contact_impedance: f64,
    /// Protocol JSON file; defaults to adjacent drive.
    #[arg(long)]
    protocol: Option<PathBuf>,
    /// Reconstruction CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write a PGM image.
    #[arg(long)]
    raster: Option<PathBuf>,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..=8192))]
    raster_size: u32,
    /// Also write an L-curve CSV over alpha·10^-3 .. alpha·10^3.
    #[arg(long)]
    lcurve: Option<PathBuf>,
    #[arg(long, default_value_t = 13, value_parser = clap::value_parser!(u32).range(2..=200))]
    lcurve_points: u32,
}

#[derive(clap::Args)]
struct AvgArgs {
    /// Reconstruction CSV.
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    mesh: PathBuf,
    /// Region centre `x,y` (m).
    #[arg(long, default_value = "0,0", value_parser = point)]
    center: [f64; 2],
    /// Region diameter (m).
    #[arg(long, default_value_t = 0.045, value_parser = positive)]
    diameter: f64,
    /// CSV to append the result to.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(clap::Args)]
struct FitEisArgs {
    /// Spectrum CSV, polar or rectangular.
    #[arg(long)]
    spectrum: PathBuf,
    /// Fit report JSON.
    #[arg(long)]
    out: PathBuf,
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("`{s}` is not a non-negative number")),
    }
}

fn open_unit(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("`{s}` is not in (0, 1)")),
    }
}

fn point(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |p: &str| p.trim().parse::<f64>().ok().filter(|v| v.is_finite());
    match parts.as_slice() {
        [x, y] => match (parse(x), parse(y)) {
            (Some(x), Some(y)) => Ok([x, y]),
            _ => Err(format!("`{s}` is not a point `x,y`")),
        },
        _ => Err(format!("`{s}` is not a point `x,y`")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.command {
        Command::Mesh(a) => cmd_mesh(a, args),
        Command::Simulate(a) => cmd_simulate(a, args),
        Command::Reconstruct(a) => cmd_reconstruct(a, args),
        Command::Avg(a) => cmd_avg(a),
        Command::FitEis(a) => cmd_fit_eis(a, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn read_mesh(path: &Path, manifest: &mut RunManifest) -> CliResult<Mesh> {
    let bytes = read(path)?;
    manifest.input_bytes(path.display().to_string(), &bytes);
    mesh_from_str(&String::from_utf8_lossy(&bytes)).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn read_protocol(path: &Path, manifest: &mut RunManifest) -> CliResult<Protocol> {
    let bytes = read(path)?;
    manifest.input_bytes(path.display().to_string(), &bytes);
    Ok(Protocol::from_json(&String::from_utf8_lossy(&bytes)).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn read_voltages(path: &Path, manifest: &mut RunManifest) -> CliResult<Vec<f64>> {
    let bytes = read(path)?;
    manifest.input_bytes(path.display().to_string(), &bytes);
    Ok(read_voltage_csv(bytes.as_slice()).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn cmd_mesh(a: MeshArgs, args: Vec<String>) -> CliResult<()> {
    let mesh = generate_disk_mesh(&DiskMeshParams {
        radius: a.radius,
        n_electrodes: a.electrodes as usize,
        electrode_coverage: a.coverage,
        target_edge_length: a.edge,
    })?;
    fs::write(&a.out, mesh_to_string(&mesh))?;
    let mut manifest = RunManifest::new("mesh", args);
    manifest.output(&a.out)?;
    manifest.write(&sidecar(&a.out))?;
    println!(
        "{}: {} nodes, {} elements, {} electrodes",
        a.out.display(),
        mesh.n_nodes(),
        mesh.n_elements(),
        mesh.n_electrodes()
    );
    Ok(())
}

fn load_scenario(spec: &str, manifest: &mut RunManifest) -> CliResult<Scenario> {
    let path = Path::new(spec);
    if path.exists() {
        let bytes = read(path)?;
        manifest.input_bytes(path.display().to_string(), &bytes);
        return Ok(Scenario::from_json(&String::from_utf8_lossy(&bytes)).map_err(|e| format!("{spec}: {e}"))?);
    }
    match preset(spec) {
        Some(text) => {
            manifest.input_bytes(format!("preset:{spec}"), text.as_bytes());
            Ok(Scenario::from_json(text)?)
        }
        None => Err(format!(
            "scenario `{spec}` is neither a file nor a preset ({})",
            PRESET_NAMES.join(", ")
        )
        .into()),
    }
}

fn cmd_simulate(a: SimulateArgs, args: Vec<String>) -> CliResult<()> {
    let mut manifest = RunManifest::new("simulate", args);
    let mesh = read_mesh(&a.mesh, &mut manifest)?;
    let mut scenario = load_scenario(&a.scenario, &mut manifest)?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    if let Some(p) = &a.protocol {
        scenario.protocol = Some(read_protocol(p, &mut manifest)?);
    }
    // Everything is computed before the output directory is touched.
    let steps = simulate_scenario(&mesh, &scenario)?;
    let protocol = scenario.protocol(mesh.n_electrodes());
    for path in write_scenario_outputs(&a.outdir, &protocol, scenario.seed, &steps)? {
        manifest.output(&path)?;
    }
    manifest.seed = Some(scenario.seed);
    manifest.write(&a.outdir.join("run_manifest.json"))?;
    println!("{}: {} steps", a.outdir.display(), steps.len());
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs, args: Vec<String>) -> CliResult<()> {
    let mut manifest = RunManifest::new("reconstruct", args);
    let mesh = read_mesh(&a.mesh, &mut manifest)?;
    let baseline = read_voltages(&a.baseline, &mut manifest)?;
    let frame = read_voltages(&a.frame, &mut manifest)?;
    let protocol = match &a.protocol {
        Some(p) => read_protocol(p, &mut manifest)?,
        None => Protocol::adjacent(mesh.n_electrodes(), DEFAULT_AMPLITUDE),
    };
    protocol.validate(mesh.n_electrodes())?;
    let expected = protocol.n_measurements();
    for (name, v) in [("baseline", &baseline), ("frame", &frame)] {
        if v.len() != expected {
            return Err(format!("{name} has {} measurements, protocol expects {expected}", v.len()).into());
        }
    }
    let dv: Vec<f64> = frame.iter().zip(&baseline).map(|(f, b)| f - b).collect();

    let background = ConductivityField::uniform(mesh.n_elements(), a.sigma0)?;
    let z = ContactImpedances::uniform(mesh.n_electrodes(), a.contact_impedance)?;
    let j = compute_jacobian(&mesh, &background, &z, &protocol)?;
    let l = build_laplacian(&mesh);
    let mode = ConstraintMode::from(a.mode);
    let column_scaled = matches!(a.scaling, Scaling::Column);
    let solver = if column_scaled {
        Reconstructor::column_scaled(&j, &l, a.alpha, mode)?
    } else {
        Reconstructor::new(&j, &l, a.alpha, mode)?
    };
    let result = solver.solve(&dv)?;

    let lcurve = match &a.lcurve {
        Some(_) => {
            let lo = if a.alpha > 0.0 { a.alpha * 1e-3 } else { 1e-6 };
            let alphas = log_spaced(lo, lo * 1e6, a.lcurve_points as usize)?;
            Some(alpha_sweep(&j, &l, &dv, &alphas, mode, column_scaled)?)
        }
        None => None,
    };

    let mut buf = Vec::new();
    write_reconstruction_csv(&mut buf, &mesh, &result.delta_sigma)?;
    fs::write(&a.out, buf)?;
    manifest.output(&a.out)?;
    if let Some(path) = &a.raster {
        let mut buf = Vec::new();
        write_pgm(&mut buf, &mesh, &result.delta_sigma, mode, a.raster_size as usize)?;
        fs::write(path, buf)?;
        manifest.output(path)?;
    }
    if let (Some(path), Some(points)) = (&a.lcurve, &lcurve) {
        let mut buf = Vec::new();
        write_lcurve_csv(&mut buf, points)?;
        fs::write(path, buf)?;
        manifest.output(path)?;
    }
    manifest.write(&sidecar(&a.out))?;
    println!(
        "{}: alpha {:e}, {} mode, data residual {:.6e} V, roughness {:.6e}",
        a.out.display(),
        result.alpha,
        mode,
        result.data_residual,
        result.roughness
    );
    Ok(())
}

fn cmd_avg(a: AvgArgs) -> CliResult<()> {
    let mesh = load_mesh(&a.mesh).map_err(|e| format!("{}: {e}", a.mesh.display()))?;
    let bytes = read(&a.recon)?;
    let ds = read_reconstruction_csv(bytes.as_slice()).map_err(|e| format!("{}: {e}", a.recon.display()))?;
    let avg = region_average(&ds, &mesh, a.center, a.diameter)?;
    println!("{avg:e}");
    if let Some(path) = &a.metrics {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "recon,center_x_m,center_y_m,diameter_m,average_delta_sigma_S_per_m")?;
        }
        writeln!(
            f,
            "{},{:e},{:e},{:e},{avg:e}",
            a.recon.display(),
            a.center[0],
            a.center[1],
            a.diameter
        )?;
    }
    Ok(())
}

fn cmd_fit_eis(a: FitEisArgs, args: Vec<String>) -> CliResult<()> {
    let mut manifest = RunManifest::new("fit-eis", args);
    let bytes = read(&a.spectrum)?;
    manifest.input_bytes(a.spectrum.display().to_string(), &bytes);
    let spectrum = load_spectrum(&a.spectrum).map_err(|e| format!("{}: {e}", a.spectrum.display()))?;
    let fit = fit_circuit(&spectrum)?;
    let report = fit.to_report(&spectrum);
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&a.out, text)?;
    manifest.output(&a.out)?;
    manifest.write(&sidecar(&a.out))?;
    let p = report.params;
    println!(
        "R_p {:.6e} ohm, R_s {:.6e} ohm, C_p {:.6e} F, L_s {:.6e} H, residual {:.3e} ohm",
        p.r_p, p.r_s, p.c_p, p.l_s, report.residual_norm_ohm
    );
    Ok(())
}
