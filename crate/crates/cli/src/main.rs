use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use oamsim::cascade::{
    standard_targets, grid_for, semianalytic_field, simulate_numeric, simulate_semianalytic, solve_coins,
    SemiAnalyticOptions, SolveOptions, TermCache, WalkSpec, DEFAULT_STEPS,
};
use oamsim::holography::{
    calibrate_basis_d, default_period, generate_hologram, hygg_model_field, lg_model_field,
    measure_targets, write_report, MeasureConfig, ModelTag, Projection, DEFAULT_PERIOD_CELLS, REFERENCE_WAIST,
};
use oamsim::imaging::{generate_dataset, DatasetModel, PerturbationSpec};
use oamsim::propagation::azimuthal_spectrum;
use oamsim::{overlap, BeamParams, Error, Field};

#[derive(Parser)]
#[command(name = "oamsim", version, about = "Cascaded q-plate OAM walk simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Walk description (TOML). Defaults to a 5-step identity-coin walk.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0x0a4d5eed)]
    seed: u64,
    /// Grid size per side.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Lg,
    Hygg,
    PseudoExperimental,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ideal,
    Holographic,
}

#[derive(Subcommand)]
enum Command {
    /// Numeric and semi-analytic cascade output with their overlap.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Truncation of the semi-analytic model.
        #[arg(long, default_value_t = 3)]
        k_trunc: usize,
    },
    /// Phase hologram of one of the measured targets.
    Hologram {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "hygg")]
        model: Model,
        #[arg(long, default_value = "|1>")]
        target: String,
        /// Grating period in grid cells.
        #[arg(long, default_value_t = DEFAULT_PERIOD_CELLS)]
        period_cells: usize,
    },
    /// Fidelity, efficiency and D table for the fourteen targets.
    Measure {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "ideal")]
        method: MethodArg,
        /// Fit the model waist to the basis-state D values first.
        #[arg(long)]
        calibrate: bool,
    },
    /// Labelled Stokes-image dataset.
    Dataset {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "hygg")]
        model: Model,
        #[arg(long, default_value_t = 400)]
        per_class: usize,
        /// Waveplate angle error bound in degrees.
        #[arg(long)]
        angle_error_deg: Option<f64>,
    },
}

fn load_spec(common: &Common) -> oamsim::Result<WalkSpec> {
    match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            WalkSpec::from_toml_str(&text)
        }
        None => Ok(WalkSpec::identity(BeamParams::new(1e-3, 808e-9)?, DEFAULT_STEPS, 0.05)),
    }
}

fn solve_options(common: &Common) -> SolveOptions {
    SolveOptions {
        seed: common.seed,
        ..SolveOptions::default()
    }
}

fn write_out(dir: &Path, name: &str, text: &str) -> oamsim::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn simulate(common: &Common, k_trunc: usize) -> oamsim::Result<()> {
    let spec = load_spec(common)?;
    let grid = grid_for(&spec, common.grid.unwrap_or(512))?;
    let numeric = simulate_numeric(&spec, grid)?;
    let opts = SemiAnalyticOptions::new(grid).with_k_trunc(k_trunc);
    let out = simulate_semianalytic(&spec, &opts, TermCache::global())?;
    let semi = semianalytic_field(&spec, &out, grid)?;
    let o = overlap(&numeric, &semi)?.norm() / (numeric.power() * semi.power()).sqrt();

    let mut report = String::new();
    writeln!(report, "# grid\t{}\t{:.6e}", grid.n, grid.extent).unwrap();
    writeln!(report, "# output_z\t{:.6e}", spec.output_z()).unwrap();
    writeln!(report, "overlap\t{o:.6}").unwrap();
    writeln!(report, "semianalytic_tail\t{:.6e}", out.tail()).unwrap();
    writeln!(report, "m\tpower_numeric\tpower_semianalytic").unwrap();
    let a = azimuthal_spectrum(&numeric, None);
    let b = azimuthal_spectrum(&semi, None);
    let mut odd = 0.0;
    for m in -spec.max_charge()..=spec.max_charge() {
        let (pa, pb) = (a.get(&m).copied().unwrap_or(0.0), b.get(&m).copied().unwrap_or(0.0));
        if m % 2 != 0 {
            odd += pa;
        }
        writeln!(report, "{m}\t{pa:.6}\t{pb:.6}").unwrap();
    }
    writeln!(report, "odd_charge_power\t{odd:.6}").unwrap();
    print!("{report}");
    write_out(&common.out, "simulate.tsv", &report)?;
    numeric.write_snapshot(fs::File::create(common.out.join("numeric.field"))?)?;
    semi.write_snapshot(fs::File::create(common.out.join("semianalytic.field"))?)?;
    Ok(())
}

fn hologram(common: &Common, model: Model, label: &str, period_cells: usize) -> oamsim::Result<()> {
    let template = load_spec(common)?;
    let target = standard_targets()
        .into_iter()
        .find(|t| t.label == label)
        .ok_or_else(|| Error::Config(format!("unknown target {label:?}")))?;
    let grid = grid_for(&template, common.grid.unwrap_or(512))?;
    let sol = solve_coins(&target.superposition(), &template, &solve_options(common))?;
    let (field, tag): (Field, ModelTag) = match model {
        Model::Lg => (lg_model_field(&sol.spec, &target.amps, grid)?, ModelTag::Lg),
        Model::Hygg => {
            let opts = SemiAnalyticOptions::new(grid);
            (hygg_model_field(&sol.spec, &opts, TermCache::global())?.0, ModelTag::Hygg)
        }
        Model::PseudoExperimental => return Err(Error::Config("holograms use the lg or hygg model".into())),
    };
    let h = generate_hologram(&field, default_period(&grid, period_cells), tag)?;
    fs::create_dir_all(&common.out)?;
    h.save_png(&common.out.join("hologram.png"))?;
    let mut report = String::new();
    writeln!(report, "target\t{label}").unwrap();
    writeln!(report, "grating_period\t{:.6e}", h.grating_period).unwrap();
    writeln!(report, "walk_overlap\t{:.6}", sol.overlap).unwrap();
    print!("{report}");
    write_out(&common.out, "hologram.tsv", &report)?;
    fs::write(common.out.join("walk.toml"), sol.spec.to_toml_string())?;
    Ok(())
}

fn measure(common: &Common, method: MethodArg, calibrate: bool) -> oamsim::Result<()> {
    let mut template = load_spec(common)?;
    let n = common.grid.unwrap_or(256);
    let cache = TermCache::global();
    let solve = solve_options(common);
    let mut coin_waist = None;
    if calibrate {
        let cal = calibrate_basis_d(&template, &solve, n, cache)?;
        info!("fitted w0 = {:.4} mm", cal.w0 * 1e3);
        template.beam = BeamParams::new(cal.w0, template.beam.wavelength)?;
        coin_waist = Some(REFERENCE_WAIST);
    }
    let mut cfg = MeasureConfig::new(template);
    cfg.n = n;
    cfg.solve = solve;
    cfg.coin_waist = coin_waist;
    cfg.projection = match method {
        MethodArg::Ideal => Projection::Ideal,
        MethodArg::Holographic => Projection::Holographic {
            period_cells: DEFAULT_PERIOD_CELLS,
            fiber_waist: 12.0 * cfg.template.beam.w0,
        },
    };
    let rows = measure_targets(&standard_targets(), &cfg, cache)?;
    let mut buf = Vec::new();
    write_report(&rows, &mut buf)?;
    let text = format!(
        "# w0_mm\t{:.4}\n{}",
        cfg.template.beam.w0 * 1e3,
        String::from_utf8(buf).expect("report is utf-8")
    );
    print!("{text}");
    write_out(&common.out, "measure.tsv", &text)
}

fn dataset(common: &Common, model: Model, per_class: usize, angle_error_deg: Option<f64>) -> oamsim::Result<()> {
    let template = load_spec(common)?;
    let (model, mut pert) = match model {
        Model::Lg => (DatasetModel::Lg, PerturbationSpec::none()),
        Model::Hygg => (DatasetModel::Hygg, PerturbationSpec::none()),
        Model::PseudoExperimental => (DatasetModel::PseudoExperimental, PerturbationSpec::pseudo_experimental(template.beam.w0)),
    };
    if let Some(deg) = angle_error_deg {
        pert.wp_angle_sigma_max = deg.to_radians();
    }
    let manifest = generate_dataset(model, per_class, &pert, common.seed, &common.out, &template, TermCache::global())?;
    println!("wrote {} images to {}", manifest.files.len(), common.out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidIndex(_) | Error::InvalidGrid(_) | Error::Json(_) => 2,
        Error::Io(_) | Error::Image(_) | Error::Snapshot(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { common, k_trunc } => simulate(common, *k_trunc),
        Command::Hologram {
            common,
            model,
            target,
            period_cells,
        } => hologram(common, *model, target, *period_cells),
        Command::Measure { common, method, calibrate } => measure(common, *method, *calibrate),
        Command::Dataset {
            common,
            model,
            per_class,
            angle_error_deg,
        } => dataset(common, *model, *per_class, *angle_error_deg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
