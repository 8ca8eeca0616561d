//! Command-line driver: list the built-in experiments, run an inversion,
//! execute the fast verification suite, or print a convergence study.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use source_shape::checks;
use source_shape::fem::FemContext;
use source_shape::harness::{self, RunOptions};
use source_shape::levelset;
use source_shape::mesh::{build_square_mesh, MeshMode};
use source_shape::shapeopt::ShapeParams;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "source-shape",
    about = "Recover the support and intensity of an elliptic source from boundary Cauchy data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in experiments.
    List,
    /// Run an inversion on a built-in experiment or a problem file.
    Run {
        /// Example name (e1..e6) or path to a problem file.
        target: String,
        /// Gaussian noise level added to the observation.
        #[arg(long = "noise")]
        noise: Option<f64>,
        /// RNG seed for the noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inversion mesh subdivisions per side.
        #[arg(long)]
        coarse: Option<usize>,
        /// Data-generation mesh subdivisions per side.
        #[arg(long)]
        fine: Option<usize>,
        /// Output directory (SOURCE_SHAPE_OUT overrides).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Iteration budget override.
        #[arg(long = "max-iters")]
        max_iters: Option<usize>,
        /// Write VTK snapshots every K iterations (0 = off).
        #[arg(long = "snap-every", default_value_t = 0)]
        snap_every: usize,
        /// Pick the post-processing weight by a discrepancy sweep.
        #[arg(long = "pp-sweep")]
        pp_sweep: bool,
    },
    /// Run the fast invariant / gradient / oracle suite.
    Check,
    /// Manufactured-solution convergence study for the forward solver.
    Convergence {
        /// Coarsest mesh subdivisions.
        #[arg(long, default_value_t = 8)]
        start: usize,
        /// Number of uniform refinements.
        #[arg(long, default_value_t = 4)]
        levels: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::List => {
            for spec in harness::builtin_examples() {
                println!("{}", spec.name);
            }
            Ok(0)
        }
        Command::Run {
            target,
            noise,
            seed,
            coarse,
            fine,
            out,
            max_iters,
            snap_every,
            pp_sweep,
        } => {
            let spec = if let Some(spec) = harness::find_example(&target) {
                spec
            } else {
                let path = PathBuf::from(&target);
                if !path.exists() {
                    bail!("unknown example or missing problem file: {target}");
                }
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                harness::parse_problem_file(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            };
            let opts = RunOptions {
                seed,
                sigma: noise,
                coarse_n: coarse,
                fine_n: fine,
                max_iters,
                out_dir: out.or_else(|| Some(PathBuf::from("runs").join(&spec.name))),
                snap_every,
                pp_sweep,
            };
            let art = harness::run_experiment(&spec, &opts)?;
            println!("{}", serde_json::to_string_pretty(&art.summary)?);
            Ok(0)
        }
        Command::Check => run_check(),
        Command::Convergence { start, levels } => {
            let rows = checks::fem_convergence_study(start, levels)?;
            println!("{:>10} {:>12} {:>7} {:>12} {:>7}", "h", "L2", "rate", "H1", "rate");
            for (i, (h, l2, h1)) in rows.iter().enumerate() {
                let (rl2, rh1) = if i == 0 {
                    (String::from("-"), String::from("-"))
                } else {
                    let (hp, l2p, h1p) = rows[i - 1];
                    (
                        format!("{:.2}", (l2p / l2).ln() / (hp / h).ln()),
                        format!("{:.2}", (h1p / h1).ln() / (hp / h).ln()),
                    )
                };
                println!("{h:>10.5} {l2:>12.4e} {rl2:>7} {h1:>12.4e} {rh1:>7}");
            }
            Ok(0)
        }
    }
}

struct CheckReport {
    failures: usize,
}

impl CheckReport {
    fn new() -> Self {
        CheckReport { failures: 0 }
    }

    fn record(&mut self, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {detail}");
        if !pass {
            self.failures += 1;
        }
    }
}

fn run_check() -> anyhow::Result<i32> {
    let mut report = CheckReport::new();

    // Mesh invariants.
    for mode in [MeshMode::Structured, MeshMode::Perturbed] {
        let m = build_square_mesh(12, mode)?;
        let ok = m.validate().is_ok() && m.boundary_edges.len() == 48;
        report.record(
            "mesh invariants",
            ok,
            format!("{mode:?}: {} triangles, {} boundary edges", m.n_triangles(), m.boundary_edges.len()),
        );
    }

    // Geometry oracles at h ≈ 0.04.
    let g = checks::geometry_oracles(50)?;
    report.record(
        "disk volume/perimeter",
        g.disk_volume_rel_err < 0.02 && g.disk_perimeter_rel_err < 0.02,
        format!(
            "rel errs {:.3e} / {:.3e} (tol 2e-2)",
            g.disk_volume_rel_err, g.disk_perimeter_rel_err
        ),
    );
    report.record(
        "rectangle area",
        g.rect_volume_rel_err < 0.02,
        format!("rel err {:.3e} (tol 2e-2)", g.rect_volume_rel_err),
    );
    report.record(
        "redistancing",
        (g.reinit_median_grad - 1.0).abs() <= 0.1 && g.reinit_zero_move <= 2.0 * 0.04,
        format!(
            "median |grad| {:.3}, zero-set move {:.3e}",
            g.reinit_median_grad, g.reinit_zero_move
        ),
    );

    // Example-5 style component counting.
    {
        let m = build_square_mesh(54, MeshMode::Structured)?;
        let spec5 = harness::find_example("e5").expect("e5 exists");
        let phi = levelset::init_from_expression(&m, spec5.omega_e.as_ref().unwrap());
        let n = levelset::connected_components(&m, &phi);
        report.record("component count", n == 4, format!("four disks -> {n}"));
    }

    // Adjoint shortcut on the e1 geometry.
    {
        let (mesh, spec) = checks::e1_geometry(40)?;
        let ctx = FemContext::new(&mesh);
        let problem = checks::build_problem(&spec, &mesh, 0)?;
        let phi = levelset::init_from_expression(&mesh, &spec.omega0);
        let (vp, w) = checks::adjoint_shortcut_defect(&ctx, &problem, &phi, 1e-3)?;
        report.record(
            "adjoint shortcut",
            vp <= 1e-8 && w <= 1e-8,
            format!("|v+p| {vp:.2e}, |w| {w:.2e} (tol 1e-8)"),
        );

        let params = ShapeParams {
            alpha: 1e-3,
            beta: 0.0,
            lambda: 1e-6,
            gamma0: 0.0,
        };
        let cert = checks::descent_certificate(&ctx, &problem, &phi, &params)?;
        report.record(
            "descent certificate",
            cert <= 1e-6,
            format!("relative defect {cert:.2e} (tol 1e-6)"),
        );

        let phi_r = levelset::reinitialize(&mesh, &phi, 30);
        let sweeps =
            checks::gradient_fd_sweeps(&ctx, &problem, &phi_r, &params, 1, &[1e-2, 1e-3], 3)?;
        let best = sweeps[0].best;
        report.record(
            "shape gradient vs finite differences",
            best <= 0.05,
            format!("best rel err {best:.2e} (tol 5e-2)"),
        );
    }

    // Stability of the coupled solve across the α sweep.
    {
        let (mesh, spec) = checks::e1_geometry(30)?;
        let ctx = FemContext::new(&mesh);
        let problem = checks::build_problem(&spec, &mesh, 0)?;
        let phi = levelset::init_from_expression(&mesh, &spec.omega0);
        let mut ratios = Vec::new();
        for alpha in [1e-2, 1e-4, 1e-6] {
            ratios.push(checks::stability_ratio(&ctx, &problem, &phi, alpha)?);
        }
        let max = ratios.iter().cloned().fold(0.0f64, f64::max);
        report.record(
            "coupled stability sweep",
            max.is_finite() && max < 100.0,
            format!("ratios {ratios:?}"),
        );
    }

    if report.failures == 0 {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("{} check(s) failed", report.failures);
        Ok(2)
    }
}
