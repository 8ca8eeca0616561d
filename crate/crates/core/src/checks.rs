//! Self-contained verification routines shared by the CLI `check` command
//! and the acceptance test suite. Each function returns measured numbers;
//! callers compare them against their thresholds.

use crate::error::Result;
use crate::fem::{
    self, apply_dirichlet, BoundaryData, FemContext, FunctionP1,
};
use crate::harness::{self, ProblemSpec};
use crate::levelset::{self, LevelSetField, Shape};
use crate::mesh::{build_square_mesh, MeshMode, TriMesh};
use crate::shapeopt::{
    self, adjoint_state, extend_velocity, finite_difference_check, shape_gradient_distributed,
    shape_gradient_surface, AdjointMode, OptimizeConfig, PerimeterGradForm, ShapeParams,
    ShapeProblem, VelocityField,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Smooth random interior velocity: low-order polynomial modes times the
/// bump `(1-x²)(1-y²)`, normalized to unit maximum speed.
pub fn random_velocity(mesh: &TriMesh, rng: &mut ChaCha8Rng) -> VelocityField {
    let c: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut v = VelocityField::zeros(mesh);
    for (i, &[x, y]) in mesh.vertices.iter().enumerate() {
        let bump = (1.0 - x * x) * (1.0 - y * y);
        v.x[i] = bump * (c[0] + c[1] * x + c[2] * y + c[3] * x * y);
        v.y[i] = bump * (c[4] + c[5] * x + c[6] * y + c[7] * x * y);
    }
    let m = v.max_norm();
    if m > 0.0 {
        v = v.scaled(1.0 / m);
    }
    v
}

/// Builds the inversion problem of a spec on a given coarse mesh, with the
/// observation manufactured on the spec's fine mesh.
pub fn build_problem<'m>(
    spec: &ProblemSpec,
    mesh: &'m TriMesh,
    seed: u64,
) -> Result<ShapeProblem<'m>> {
    let data = harness::generate_data(spec, mesh, seed)?;
    Ok(ShapeProblem {
        mesh,
        f: FunctionP1::interpolate(mesh, |x, y| spec.f.eval(x, y)),
        u_n: BoundaryData::from_fn(mesh, |x, y| spec.u_n.eval(x, y)),
        u_d: data.u_d,
    })
}

/// L2/H1 errors of the forward Neumann solve against
/// `u* = cos(πx)cos(πy)` on a sequence of uniformly refined meshes.
pub fn fem_convergence_study(n0: usize, levels: usize) -> Result<Vec<(f64, f64, f64)>> {
    let exact = |x: f64, y: f64| (PI * x).cos() * (PI * y).cos();
    let grad = |x: f64, y: f64| {
        [
            -PI * (PI * x).sin() * (PI * y).cos(),
            -PI * (PI * x).cos() * (PI * y).sin(),
        ]
    };
    let mut out = Vec::new();
    let mut mesh = build_square_mesh(n0, MeshMode::Structured)?;
    for _ in 0..levels {
        let f = FunctionP1::interpolate(&mesh, |x, y| (2.0 * PI * PI + 1.0) * exact(x, y));
        let u = fem::solve_forward_neumann(&mesh, &f, None, &BoundaryData::zeros(&mesh))?;
        out.push((
            mesh.h(),
            fem::l2_error_vs(&mesh, &u, exact),
            fem::h1_seminorm_error_vs(&mesh, &u, grad),
        ));
        mesh = crate::mesh::refine_uniform(&mesh)?;
    }
    Ok(out)
}

/// Least-squares slope of log(err) against log(h).
pub fn convergence_rate(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(h, e) in pairs {
        let x = h.ln();
        let y = e.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Stability ratio `(‖u‖₁ + α^{-1/2}‖p‖₁) / (‖u_d‖_Γ + ‖u_n‖_Γ + ‖f‖)` of
/// the coupled solve for one α, with the e1 geometry and data.
pub fn stability_ratio(
    ctx: &FemContext,
    problem: &ShapeProblem,
    phi: &LevelSetField,
    alpha: f64,
) -> Result<f64> {
    let params = ShapeParams {
        alpha,
        beta: 0.0,
        lambda: 0.0,
        gamma0: 0.0,
    };
    let (sol, _, _) = shapeopt::solve_and_objective(ctx, problem, phi, &params, 1e-12)?;
    let num = ctx.h1_norm(&sol.u.values) + ctx.h1_norm(&sol.p.values) / alpha.sqrt();
    let den = ctx.boundary_norm(&problem.u_d.values)
        + ctx.boundary_norm(&problem.u_n.values)
        + ctx.l2_norm(&problem.f.values);
    Ok(num / den)
}

/// Relative sizes of the numerically solved adjoint pair against the closed
/// form `(v, w) = (-p, 0)`: returns `(‖v+p‖₁/‖p‖₁, ‖w‖₁/‖p‖₁)`.
pub fn adjoint_shortcut_defect(
    ctx: &FemContext,
    problem: &ShapeProblem,
    phi: &LevelSetField,
    alpha: f64,
) -> Result<(f64, f64)> {
    let params = ShapeParams {
        alpha,
        beta: 0.0,
        lambda: 0.0,
        gamma0: 0.0,
    };
    let (sol, _, _) = shapeopt::solve_and_objective(ctx, problem, phi, &params, 1e-12)?;
    let adj = adjoint_state(ctx, phi, &sol, &problem.u_d, AdjointMode::Solve, 1e-12)?;
    let p_norm = ctx.h1_norm(&sol.p.values);
    let vp: Vec<f64> = adj
        .v
        .values
        .iter()
        .zip(&sol.p.values)
        .map(|(v, p)| v + p)
        .collect();
    Ok((
        ctx.h1_norm(&vp) / p_norm,
        ctx.h1_norm(&adj.w.values) / p_norm,
    ))
}

/// Result of one finite-difference validation sweep.
#[derive(Debug, Clone)]
pub struct FdSweep {
    /// `(t, rel_err)` for each probed step.
    pub probes: Vec<(f64, f64)>,
    pub best: f64,
}

/// Central-difference validation of the surface shape gradient on the e1
/// geometry for `n_fields` random velocities; every J comes from a full
/// coupled re-solve.
pub fn gradient_fd_sweeps(
    ctx: &FemContext,
    problem: &ShapeProblem,
    phi: &LevelSetField,
    params: &ShapeParams,
    n_fields: usize,
    steps: &[f64],
    seed: u64,
) -> Result<Vec<FdSweep>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..n_fields {
        let vel = random_velocity(ctx.mesh, &mut rng);
        let mut probes = Vec::new();
        let mut best = f64::INFINITY;
        for &t in steps {
            let chk = finite_difference_check(ctx, problem, phi, &vel, t, params)?;
            best = best.min(chk.rel_err);
            probes.push((t, chk.rel_err));
        }
        out.push(FdSweep { probes, best });
    }
    Ok(out)
}

/// Relative disagreement between the surface and distributed gradient forms
/// over random velocities.
pub fn gradient_form_agreement(
    ctx: &FemContext,
    problem: &ShapeProblem,
    phi: &LevelSetField,
    params: &ShapeParams,
    n_fields: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (sol, _, _) = shapeopt::solve_and_objective(ctx, problem, phi, params, 1e-11)?;
    let adj = adjoint_state(ctx, phi, &sol, &problem.u_d, AdjointMode::Shortcut, 1e-11)?;
    let interface = levelset::extract_interface(ctx.mesh, phi);
    let gs = shape_gradient_surface(
        ctx.mesh,
        phi,
        &interface,
        &sol,
        &adj,
        params,
        PerimeterGradForm::TangentialDivergence,
    );
    let gd = shape_gradient_distributed(ctx.mesh, phi, &sol, &adj, &problem.f, params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..n_fields {
        let w = random_velocity(ctx.mesh, &mut rng);
        let a = gs.apply(&w);
        let b = gd.apply(&w);
        out.push((a - b).abs() / a.abs().max(b.abs()).max(1e-300));
    }
    Ok(out)
}

/// Descent-direction certificate at one state: `|dJ(V) + ‖V‖²| / ‖V‖²`.
pub fn descent_certificate(
    ctx: &FemContext,
    problem: &ShapeProblem,
    phi: &LevelSetField,
    params: &ShapeParams,
) -> Result<f64> {
    let (sol, _, _) = shapeopt::solve_and_objective(ctx, problem, phi, params, 1e-11)?;
    let adj = adjoint_state(ctx, phi, &sol, &problem.u_d, AdjointMode::Shortcut, 1e-11)?;
    let interface = levelset::extract_interface(ctx.mesh, phi);
    let grad = shape_gradient_surface(
        ctx.mesh,
        phi,
        &interface,
        &sol,
        &adj,
        params,
        PerimeterGradForm::TangentialDivergence,
    );
    let a_d = apply_dirichlet(&ctx.h1, &ctx.mesh.vertex_is_boundary);
    let (_, dj, norm2) = extend_velocity(ctx, &a_d, &grad, 1e-12)?;
    Ok((dj + norm2).abs() / norm2.max(1e-300))
}

/// Geometry oracle outcomes at one resolution.
#[derive(Debug, Clone)]
pub struct GeometryOracles {
    pub disk_volume_rel_err: f64,
    pub disk_perimeter_rel_err: f64,
    pub rect_volume_rel_err: f64,
    pub reinit_median_grad: f64,
    pub reinit_zero_move: f64,
}

/// Cut-cell volume/perimeter of a disk and the example rectangle, and the
/// redistancing statistics used by the reinit trigger.
pub fn geometry_oracles(n: usize) -> Result<GeometryOracles> {
    let mesh = build_square_mesh(n, MeshMode::Structured)?;
    let r = 0.3;
    let disk = levelset::init_from_expression(
        &mesh,
        &Shape::Disk {
            center: [0.0, 0.0],
            r,
        },
    );
    let vol = levelset::measure_volume(&mesh, &disk);
    let per = levelset::measure_perimeter(&mesh, &disk);
    let disk_volume_rel_err = (vol - PI * r * r).abs() / (PI * r * r);
    let disk_perimeter_rel_err = (per - 2.0 * PI * r).abs() / (2.0 * PI * r);

    let rect = levelset::init_from_expression(
        &mesh,
        &Shape::Rect {
            x0: -0.1,
            x1: 0.6,
            y0: 0.1,
            y1: 0.4,
        },
    );
    let rect_volume_rel_err = (levelset::measure_volume(&mesh, &rect) - 0.21).abs() / 0.21;

    // Redistance a 3x-scaled signed distance field.
    let scaled = LevelSetField {
        values: disk.values.iter().map(|v| 3.0 * v).collect(),
    };
    let fixed = levelset::reinitialize(&mesh, &scaled, 40);
    let mut mags: Vec<f64> = Vec::new();
    for t in 0..mesh.n_triangles() {
        let g = fixed.tri_gradient(&mesh, t);
        let f = fixed.tri_values(&mesh, t);
        let near = f.iter().any(|&v| v.abs() < 3.0 * mesh.h());
        if near {
            mags.push((g[0] * g[0] + g[1] * g[1]).sqrt());
        }
    }
    mags.sort_by(f64::total_cmp);
    let reinit_median_grad = if mags.is_empty() {
        f64::NAN
    } else {
        mags[mags.len() / 2]
    };
    let sym = levelset::measure_symmetric_difference(&mesh, &scaled, &fixed);
    let reinit_zero_move = sym / per.max(1e-300);
    Ok(GeometryOracles {
        disk_volume_rel_err,
        disk_perimeter_rel_err,
        rect_volume_rel_err,
        reinit_median_grad,
        reinit_zero_move,
    })
}

/// Standard configuration of the e1 validation geometry: the published
/// initial disk over the published data, at an arbitrary resolution.
pub fn e1_geometry(
    n: usize,
) -> Result<(TriMesh, ProblemSpec)> {
    let spec = harness::find_example("e1").expect("e1 exists");
    let mesh = build_square_mesh(n, MeshMode::Structured)?;
    Ok((mesh, spec))
}

/// A 50-step e1 descent run; returns per-iteration descent defects and the
/// monotone fraction.
pub fn descent_run_statistics(n: usize, iters: usize) -> Result<(Vec<f64>, f64)> {
    let (mesh, spec) = e1_geometry(n)?;
    let problem = build_problem(&spec, &mesh, 0)?;
    let phi0 = levelset::init_from_expression(&mesh, &spec.omega0);
    let config = OptimizeConfig {
        max_iters: iters,
        stop_window: usize::MAX, // run the full budget
        ..spec.config.clone()
    };
    let out = shapeopt::optimize(&problem, &phi0, &config, None, None)?;
    let defects = out
        .history
        .records
        .iter()
        .map(|r| r.descent_defect)
        .collect();
    Ok((defects, out.history.monotone_fraction()))
}
