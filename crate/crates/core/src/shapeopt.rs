//! Shape sensitivity and the steepest-descent loop.
//!
//! The objective's derivative along an interior velocity field `W` has two
//! equivalent discrete realizations: a surface form supported on the
//! reconstructed interface (the default, using the closed-form adjoint
//! `v = -p`, `w = 0`) and a distributed volume form retained as a
//! cross-check. Either is assembled as a linear functional against nodal
//! vector fields; the Hilbertian extension then turns that functional into
//! a descent velocity vanishing on `∂Ω`, and a backtracking line search
//! moves the level set.

use crate::cutcell;
use crate::error::{Error, Result};
use crate::fem::{
    self, apply_dirichlet, assemble_indicator_mass, BoundaryData, CoupledForm, CoupledSolution,
    FemContext, FunctionP1, GeometryReport, ObjectiveTerms,
};
use crate::levelset::{self, InterfaceMesh, LevelSetField};
use crate::mesh::TriMesh;
use crate::sparse::{self, SparseMatrix};

/// Second adjoint pair of the shape problem. The closed form is
/// `(v, w) = (-p, 0)`; solving the discrete adjoint system reproduces it to
/// solver tolerance, so the solve mode exists for validation only.
#[derive(Debug, Clone)]
pub struct AdjointPair {
    pub v: FunctionP1,
    pub w: FunctionP1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdjointMode {
    #[default]
    Shortcut,
    Solve,
}

/// Computes the second adjoint pair.
pub fn adjoint_state(
    ctx: &FemContext,
    phi: &LevelSetField,
    sol: &CoupledSolution,
    u_d: &BoundaryData,
    mode: AdjointMode,
    tol: f64,
) -> Result<AdjointPair> {
    match mode {
        AdjointMode::Shortcut => Ok(AdjointPair {
            v: FunctionP1 {
                values: sol.p.values.iter().map(|p| -p).collect(),
            },
            w: FunctionP1 {
                values: vec![0.0; sol.p.values.len()],
            },
        }),
        AdjointMode::Solve => {
            let mesh = ctx.mesh;
            let n = mesh.n_vertices();
            let m_omega = assemble_indicator_mass(mesh, phi);
            let alpha = sol.alpha;
            // a(v,r) - (w,r)_Γ = -(u-u_d, r)_Γ
            // a(w,s) + (1/α)(v,s)_ω = -(1/α)(p,s)_ω
            let mut buf = sparse::TripletBuffer::with_capacity(
                2 * ctx.h1.nnz() + ctx.boundary_mass.nnz() + m_omega.nnz(),
            );
            let push = |buf: &mut sparse::TripletBuffer,
                        mat: &SparseMatrix,
                        ro: usize,
                        co: usize,
                        scale: f64| {
                for r in 0..mat.nrows {
                    for k in mat.row_offsets[r]..mat.row_offsets[r + 1] {
                        buf.push(2 * r + ro, 2 * mat.col_indices[k] + co, scale * mat.values[k]);
                    }
                }
            };
            push(&mut buf, &ctx.h1, 0, 0, 1.0);
            push(&mut buf, &ctx.boundary_mass, 0, 1, -1.0);
            push(&mut buf, &m_omega, 1, 0, 1.0 / alpha);
            push(&mut buf, &ctx.h1, 1, 1, 1.0);
            let k = SparseMatrix::from_triplets(&buf, 2 * n, 2 * n)?;
            let diff: Vec<f64> = sol
                .u
                .values
                .iter()
                .zip(&u_d.values)
                .map(|(u, d)| u - d)
                .collect();
            let b_mis = ctx.boundary_mass.matvec(&diff)?;
            let m_p = m_omega.matvec(&sol.p.values)?;
            let mut rhs = vec![0.0; 2 * n];
            for i in 0..n {
                rhs[2 * i] = -b_mis[i];
                rhs[2 * i + 1] = -m_p[i] / alpha;
            }
            let x = sparse::solve_general(&k, &rhs, tol)?;
            let mut v = vec![0.0; n];
            let mut w = vec![0.0; n];
            for i in 0..n {
                v[i] = x[2 * i];
                w[i] = x[2 * i + 1];
            }
            Ok(AdjointPair {
                v: FunctionP1 { values: v },
                w: FunctionP1 { values: w },
            })
        }
    }
}

/// Nodal vector field vanishing on `∂Ω`.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl VelocityField {
    pub fn zeros(mesh: &TriMesh) -> Self {
        VelocityField {
            x: vec![0.0; mesh.n_vertices()],
            y: vec![0.0; mesh.n_vertices()],
        }
    }

    /// Largest nodal speed.
    pub fn max_norm(&self) -> f64 {
        self.x
            .iter()
            .zip(&self.y)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> VelocityField {
        VelocityField {
            x: self.x.iter().map(|v| s * v).collect(),
            y: self.y.iter().map(|v| s * v).collect(),
        }
    }
}

/// The shape derivative assembled as a linear functional `W ↦ dJ(W)`
/// against nodal vector P1 fields; `rx`/`ry` hold the coefficients of the
/// two components (zero on boundary vertices).
#[derive(Debug, Clone)]
pub struct ShapeGradient {
    pub rx: Vec<f64>,
    pub ry: Vec<f64>,
}

impl ShapeGradient {
    /// Evaluates the functional at a velocity field.
    pub fn apply(&self, w: &VelocityField) -> f64 {
        sparse::dot(&self.rx, &w.x) + sparse::dot(&self.ry, &w.y)
    }
}

/// Realization of the perimeter term's derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerimeterGradForm {
    /// `λ ∫_{∂ω} (div W - DW n·n) ds`, evaluated with the element-wise
    /// constant Jacobian of `W`; the default.
    #[default]
    TangentialDivergence,
    /// `λ ∫_{∂ω} κ (W·n) ds` with curvature from averaged nodal normals;
    /// equivalent on closed smooth interfaces but noisier on coarse meshes.
    Curvature,
}

/// Scalar parameters entering the objective and its derivative.
#[derive(Debug, Clone, Copy)]
pub struct ShapeParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma0: f64,
}

/// Per-element curvature of the interface from the divergence of averaged
/// nodal unit normals.
fn element_curvatures(mesh: &TriMesh, phi: &LevelSetField) -> Vec<f64> {
    let nv = mesh.n_vertices();
    let nt = mesh.n_triangles();
    let mut nodal = vec![[0.0f64; 2]; nv];
    let mut weight = vec![0.0f64; nv];
    for t in 0..nt {
        let g = phi.tri_gradient(mesh, t);
        let area = mesh.element_geometry(t).expect("validated mesh").area;
        for &v in &mesh.triangles[t] {
            nodal[v][0] += area * g[0];
            nodal[v][1] += area * g[1];
            weight[v] += area;
        }
    }
    for i in 0..nv {
        if weight[i] > 0.0 {
            let gx = nodal[i][0] / weight[i];
            let gy = nodal[i][1] / weight[i];
            let n = (gx * gx + gy * gy).sqrt();
            nodal[i] = if n > 1e-14 { [gx / n, gy / n] } else { [0.0, 0.0] };
        }
    }
    (0..nt)
        .map(|t| {
            let geo = mesh.element_geometry(t).expect("validated mesh");
            let idx = mesh.triangles[t];
            let mut div = 0.0;
            for i in 0..3 {
                div += nodal[idx[i]][0] * geo.grad[i][0] + nodal[idx[i]][1] * geo.grad[i][1];
            }
            div
        })
        .collect()
}

/// Surface form of the shape gradient:
/// `dJ(W) = ∫_{∂ω} [(p² + 2pv)/(2α) + β](W·n) ds + λ ∫_{∂ω} (div W - DW n·n) ds`,
/// midpoint rule per interface segment.
#[allow(clippy::too_many_arguments)]
pub fn shape_gradient_surface(
    mesh: &TriMesh,
    phi: &LevelSetField,
    interface: &InterfaceMesh,
    sol: &CoupledSolution,
    adj: &AdjointPair,
    params: &ShapeParams,
    lambda_form: PerimeterGradForm,
) -> ShapeGradient {
    let nv = mesh.n_vertices();
    let mut rx = vec![0.0; nv];
    let mut ry = vec![0.0; nv];
    let curvatures = match lambda_form {
        PerimeterGradForm::Curvature if params.lambda != 0.0 => {
            Some(element_curvatures(mesh, phi))
        }
        _ => None,
    };
    for seg in &interface.segments {
        let t = seg.tri;
        let idx = mesh.triangles[t];
        let geo = mesh.element_geometry(t).expect("validated mesh");
        let bm = seg.midpoint_bary();
        let pv = [
            sol.p.values[idx[0]],
            sol.p.values[idx[1]],
            sol.p.values[idx[2]],
        ];
        let vv = [
            adj.v.values[idx[0]],
            adj.v.values[idx[1]],
            adj.v.values[idx[2]],
        ];
        let p_m = cutcell::lin_value(pv, bm);
        let v_m = cutcell::lin_value(vv, bm);
        let density = (p_m * p_m + 2.0 * p_m * v_m) / (2.0 * params.alpha) + params.beta;
        let n = seg.normal;
        for i in 0..3 {
            let shape = bm[i];
            rx[idx[i]] += seg.length * density * shape * n[0];
            ry[idx[i]] += seg.length * density * shape * n[1];
        }
        if params.lambda != 0.0 {
            match lambda_form {
                PerimeterGradForm::TangentialDivergence => {
                    for i in 0..3 {
                        let gl = geo.grad[i];
                        let gln = gl[0] * n[0] + gl[1] * n[1];
                        rx[idx[i]] += params.lambda * seg.length * (gl[0] - n[0] * gln);
                        ry[idx[i]] += params.lambda * seg.length * (gl[1] - n[1] * gln);
                    }
                }
                PerimeterGradForm::Curvature => {
                    let kappa = curvatures.as_ref().expect("computed above")[t];
                    for i in 0..3 {
                        let shape = bm[i];
                        rx[idx[i]] += params.lambda * seg.length * kappa * shape * n[0];
                        ry[idx[i]] += params.lambda * seg.length * kappa * shape * n[1];
                    }
                }
            }
        }
    }
    // The admissible space vanishes on ∂Ω.
    for i in 0..nv {
        if mesh.vertex_is_boundary[i] {
            rx[i] = 0.0;
            ry[i] = 0.0;
        }
    }
    ShapeGradient { rx, ry }
}

/// Distributed (volume) form of the shape gradient; all terms of the
/// Eulerian derivative plus the interface perimeter term. With the shortcut
/// adjoint (`w ≡ 0`) the two `w` terms vanish identically.
#[allow(clippy::too_many_arguments)]
pub fn shape_gradient_distributed(
    mesh: &TriMesh,
    phi: &LevelSetField,
    sol: &CoupledSolution,
    adj: &AdjointPair,
    f: &FunctionP1,
    params: &ShapeParams,
) -> ShapeGradient {
    let nv = mesh.n_vertices();
    let mut rx = vec![0.0; nv];
    let mut ry = vec![0.0; nv];
    let alpha = params.alpha;
    let w_is_zero = adj.w.values.iter().all(|&w| w == 0.0);
    for t in 0..mesh.n_triangles() {
        let geo = mesh.element_geometry(t).expect("validated mesh");
        let idx = mesh.triangles[t];
        let tri = mesh.tri_coords(t);
        let area = geo.area;
        let take = |field: &FunctionP1| -> [f64; 3] {
            [
                field.values[idx[0]],
                field.values[idx[1]],
                field.values[idx[2]],
            ]
        };
        let uv3 = take(&sol.u);
        let pv3 = take(&sol.p);
        let vv3 = take(&adj.v);
        let wv3 = take(&adj.w);
        let fv3 = take(f);
        let grad_of = |f3: [f64; 3]| -> [f64; 2] {
            [
                f3[0] * geo.grad[0][0] + f3[1] * geo.grad[1][0] + f3[2] * geo.grad[2][0],
                f3[0] * geo.grad[0][1] + f3[1] * geo.grad[1][1] + f3[2] * geo.grad[2][1],
            ]
        };
        let gu = grad_of(uv3);
        let gp = grad_of(pv3);
        let gv = grad_of(vv3);
        let gw = grad_of(wv3);
        let gf = grad_of(fv3);

        // ∫_T (uv - vf) and ∫_T p·w (quadratics, exact midpoint rule).
        let int_uv_vf = cutcell::integrate_triangle(area, |b| {
            let u = cutcell::lin_value(uv3, b);
            let v = cutcell::lin_value(vv3, b);
            let fx = cutcell::lin_value(fv3, b);
            u * v - v * fx
        });
        let int_pw = if w_is_zero {
            0.0
        } else {
            cutcell::integrate_triangle(area, |b| {
                cutcell::lin_value(pv3, b) * cutcell::lin_value(wv3, b)
            })
        };
        // ∫_T v·λ_i for the ∇f transport term.
        let mut int_v_lam = [0.0f64; 3];
        for i in 0..3 {
            int_v_lam[i] =
                cutcell::integrate_triangle(area, |b| cutcell::lin_value(vv3, b) * b[i]);
        }

        // Cut quantities on ω ∩ T.
        let cut = cutcell::cut_triangle(phi.tri_values(mesh, t));
        let (int_p2_omega, int_pv_omega, area_omega) = if cut.neg_poly.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let p2 = cutcell::integrate_poly(&tri, &cut.neg_poly, |b| {
                let p = cutcell::lin_value(pv3, b);
                p * p
            });
            let pv = cutcell::integrate_poly(&tri, &cut.neg_poly, |b| {
                cutcell::lin_value(pv3, b) * cutcell::lin_value(vv3, b)
            });
            (p2, pv, cutcell::poly_area(&tri, &cut.neg_poly))
        };

        let gu_gv = gu[0] * gv[0] + gu[1] * gv[1];
        let gp_gw = gp[0] * gw[0] + gp[1] * gw[1];

        for i in 0..3 {
            let gl = geo.grad[i];
            for c in 0..2 {
                // div W coefficient of W_{i,c} is ∂λ_i/∂x_c.
                let divc = gl[c];
                let mut acc = 0.0;
                // (1/2α)∫_ω div W p² + (1/α)∫_ω div W p v + β ∫_ω div W
                acc += divc * (int_p2_omega / (2.0 * alpha) + int_pv_omega / alpha);
                acc += params.beta * divc * area_omega;
                // ∫ ((div W)I - DWᵀ - DW)(∇u·∇v)
                acc += area * (divc * gu_gv - gu[c] * (gl[0] * gv[0] + gl[1] * gv[1])
                    - gv[c] * (gl[0] * gu[0] + gl[1] * gu[1]));
                // ∫ div W (uv - vf)  and  -∫ v (∇f·W)
                acc += divc * int_uv_vf;
                acc -= gf[c] * int_v_lam[i];
                if !w_is_zero {
                    // ∫ ((div W)I - DWᵀ - DW)(∇p·∇w) + ∫ div W p w
                    acc += area * (divc * gp_gw - gp[c] * (gl[0] * gw[0] + gl[1] * gw[1])
                        - gw[c] * (gl[0] * gp[0] + gl[1] * gp[1]));
                    acc += divc * int_pw;
                }
                if c == 0 {
                    rx[idx[i]] += acc;
                } else {
                    ry[idx[i]] += acc;
                }
            }
        }
    }
    // Perimeter term stays a surface integral.
    if params.lambda != 0.0 {
        let interface = levelset::extract_interface(mesh, phi);
        for seg in &interface.segments {
            let geo = mesh.element_geometry(seg.tri).expect("validated mesh");
            let idx = mesh.triangles[seg.tri];
            let n = seg.normal;
            for i in 0..3 {
                let gl = geo.grad[i];
                let gln = gl[0] * n[0] + gl[1] * n[1];
                rx[idx[i]] += params.lambda * seg.length * (gl[0] - n[0] * gln);
                ry[idx[i]] += params.lambda * seg.length * (gl[1] - n[1] * gln);
            }
        }
    }
    for i in 0..nv {
        if mesh.vertex_is_boundary[i] {
            rx[i] = 0.0;
            ry[i] = 0.0;
        }
    }
    ShapeGradient { rx, ry }
}

/// Hilbertian extension: solves `(∇V,∇W) + (V,W) = -dJ(W)` over vector
/// fields vanishing on `∂Ω` (two scalar SPD solves sharing one matrix) and
/// returns the velocity together with `dJ(V)` and `‖V‖²_{H¹}`. By
/// construction `dJ(V) = -‖V‖²_{H¹} ≤ 0`.
pub fn extend_velocity(
    ctx: &FemContext,
    a_dirichlet: &SparseMatrix,
    grad: &ShapeGradient,
    tol: f64,
) -> Result<(VelocityField, f64, f64)> {
    let neg = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| -x).collect() };
    let vx = sparse::solve_spd(a_dirichlet, &neg(&grad.rx), tol)?;
    let vy = sparse::solve_spd(a_dirichlet, &neg(&grad.ry), tol)?;
    let vel = VelocityField { x: vx, y: vy };
    let dj = grad.apply(&vel);
    let norm2 = ctx.h1.quadratic_form(&vel.x, &vel.x)?
        + ctx.h1.quadratic_form(&vel.y, &vel.y)?;
    Ok((vel, dj, norm2))
}

/// Problem data bundle for one inversion: fixed mesh, source background,
/// Neumann flux and observed trace.
pub struct ShapeProblem<'m> {
    pub mesh: &'m TriMesh,
    pub f: FunctionP1,
    pub u_n: BoundaryData,
    pub u_d: BoundaryData,
}

/// Solves the coupled state and evaluates the objective at `phi`.
pub fn solve_and_objective(
    ctx: &FemContext,
    problem: &ShapeProblem,
    phi: &LevelSetField,
    params: &ShapeParams,
    tol: f64,
) -> Result<(CoupledSolution, ObjectiveTerms, GeometryReport)> {
    let sol = fem::solve_coupled_state_ctx(
        ctx,
        phi,
        &problem.f,
        &problem.u_n,
        &problem.u_d,
        params.alpha,
        CoupledForm::RescaledSymmetric,
        tol,
    )?;
    let (terms, geo) = fem::compute_objective(
        ctx,
        phi,
        &sol,
        &problem.u_d,
        params.alpha,
        params.lambda,
        params.beta,
        params.gamma0,
    );
    Ok((sol, terms, geo))
}

/// Result of a central-difference validation of the shape derivative.
#[derive(Debug, Clone, Copy)]
pub struct FdCheck {
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

/// Central finite difference of the objective along `V` with step `t`; each
/// endpoint is a full coupled re-solve on the advected level set. The
/// analytic value comes from the surface form with the shortcut adjoint.
pub fn finite_difference_check(
    ctx: &FemContext,
    problem: &ShapeProblem,
    phi: &LevelSetField,
    vel: &VelocityField,
    t: f64,
    params: &ShapeParams,
) -> Result<FdCheck> {
    let mesh = ctx.mesh;
    let tol = fem::INNER_TOL * 0.01;
    let (sol, _, _) = solve_and_objective(ctx, problem, phi, params, tol)?;
    let adj = adjoint_state(ctx, phi, &sol, &problem.u_d, AdjointMode::Shortcut, tol)?;
    let interface = levelset::extract_interface(mesh, phi);
    let grad = shape_gradient_surface(
        mesh,
        phi,
        &interface,
        &sol,
        &adj,
        params,
        PerimeterGradForm::TangentialDivergence,
    );
    let analytic = grad.apply(vel);
    if vel.max_norm() == 0.0 {
        return Ok(FdCheck {
            analytic: 0.0,
            fd: 0.0,
            rel_err: 0.0,
        });
    }
    let phi_plus = levelset::advect(mesh, phi, &vel.x, &vel.y, t, 1)?;
    let phi_minus = {
        let back = vel.scaled(-1.0);
        levelset::advect(mesh, phi, &back.x, &back.y, t, 1)?
    };
    let (_, j_plus, _) = solve_and_objective(ctx, problem, &phi_plus, params, tol)?;
    let (_, j_minus, _) = solve_and_objective(ctx, problem, &phi_minus, params, tol)?;
    let fd = (j_plus.total - j_minus.total) / (2.0 * t);
    let denom = analytic.abs().max(fd.abs()).max(1e-300);
    Ok(FdCheck {
        analytic,
        fd,
        rel_err: (analytic - fd).abs() / denom,
    })
}

/// Optimizer configuration; schedules follow the fixed-then-geometric decay
/// with λ held constant.
#[derive(Debug, Clone)]
pub struct OptimizeConfig {
    /// Initial Tikhonov regularization weight.
    pub alpha0: f64,
    /// Initial volume penalty weight.
    pub beta0: f64,
    /// Perimeter penalty (held fixed).
    pub lambda: f64,
    /// Geometric decay factor applied to α and β each iteration after
    /// `decay_start`.
    pub decay_rate: f64,
    /// Number of initial iterations with frozen α, β.
    pub decay_start: usize,
    /// Relative objective-change threshold of the stop rule.
    pub stop_tol: f64,
    /// Consecutive below-threshold iterations required to stop.
    pub stop_window: usize,
    pub max_iters: usize,
    /// Initial step scale: `dt = ls_cfl · h / max|V|`.
    pub ls_cfl: f64,
    /// Maximum step halvings per line search.
    pub ls_max_backtracks: usize,
    /// Consecutive forced (non-decreasing) steps before giving up.
    pub max_forced_steps: usize,
    /// Redistance when the gradient-norm deviation exceeds this.
    pub reinit_deviation: f64,
    /// Redistance unconditionally every this many iterations.
    pub reinit_every: usize,
    /// Pseudo-time steps per redistancing call.
    pub reinit_steps: usize,
    /// Redistance the initial level set before iterating.
    pub reinit_initial: bool,
    /// Volume target offset (shifts J by a constant; gradient-neutral).
    pub gamma0: f64,
    /// Inner linear-solver tolerance.
    pub inner_tol: f64,
    /// Perimeter-derivative realization.
    pub lambda_form: PerimeterGradForm,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            alpha0: 1e-2,
            beta0: 0.0,
            lambda: 1e-6,
            decay_rate: 0.9,
            decay_start: 20,
            stop_tol: 1e-6,
            stop_window: 5,
            max_iters: 150,
            ls_cfl: 0.5,
            ls_max_backtracks: 8,
            max_forced_steps: 4,
            reinit_deviation: 0.3,
            reinit_every: 10,
            reinit_steps: 20,
            reinit_initial: true,
            gamma0: 0.0,
            inner_tol: fem::INNER_TOL,
            lambda_form: PerimeterGradForm::TangentialDivergence,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha0 <= 0.0 {
            return Err(Error::InvalidConfig("alpha0 must be positive".into()));
        }
        if self.beta0 < 0.0 || self.lambda < 0.0 {
            return Err(Error::InvalidConfig(
                "beta0 and lambda must be nonnegative".into(),
            ));
        }
        if !(0.0 < self.decay_rate && self.decay_rate < 1.0) {
            return Err(Error::InvalidConfig("decay_rate must lie in (0,1)".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// One accepted optimizer step.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub j: f64,
    pub j_misfit: f64,
    pub j_reg: f64,
    pub j_perim: f64,
    pub j_vol: f64,
    pub err_q: Option<f64>,
    pub volume: f64,
    pub perimeter: f64,
    pub dt: f64,
    pub reinit: bool,
    /// Line search exhausted its backtracks; the minimal step was taken
    /// even though it did not decrease J.
    pub forced: bool,
    /// Relative defect of the descent identity `dJ(V) = -‖V‖²_{H¹}`.
    pub descent_defect: f64,
}

/// Audit trail of an optimization run.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub records: Vec<IterationRecord>,
}

impl History {
    /// Fraction of accepted steps that decreased the objective.
    pub fn monotone_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 1.0;
        }
        let good = self.records.iter().filter(|r| !r.forced).count();
        good as f64 / self.records.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Relative objective change stayed below the tolerance for the
    /// configured window.
    Converged,
    MaxIterations,
    /// Velocity vanished or the line search stalled repeatedly.
    Stagnant,
    /// The negative set disappeared.
    EmptyDomain,
}

/// Everything a finished run hands back.
pub struct OptimizeOutcome {
    pub phi: LevelSetField,
    pub solution: CoupledSolution,
    pub intensity: FunctionP1,
    pub history: History,
    pub termination: Termination,
    pub final_alpha: f64,
    pub final_beta: f64,
}

struct LineSearchOutcome {
    phi: LevelSetField,
    sol: CoupledSolution,
    terms: ObjectiveTerms,
    geo: GeometryReport,
    dt: f64,
    forced: bool,
}

#[allow(clippy::too_many_arguments)]
fn line_search(
    ctx: &FemContext,
    problem: &ShapeProblem,
    phi: &LevelSetField,
    vel: &VelocityField,
    j_current: f64,
    params: &ShapeParams,
    h: f64,
    config: &OptimizeConfig,
) -> Result<LineSearchOutcome> {
    let vmax = vel.max_norm();
    let mut dt = config.ls_cfl * h / vmax;
    let mut fallback: Option<LineSearchOutcome> = None;
    for attempt in 0..=config.ls_max_backtracks {
        let phi_try = levelset::advect(ctx.mesh, phi, &vel.x, &vel.y, dt, 1)?;
        let (sol, terms, geo) =
            solve_and_objective(ctx, problem, &phi_try, params, config.inner_tol)?;
        if terms.total < j_current {
            return Ok(LineSearchOutcome {
                phi: phi_try,
                sol,
                terms,
                geo,
                dt,
                forced: false,
            });
        }
        if attempt == config.ls_max_backtracks {
            fallback = Some(LineSearchOutcome {
                phi: phi_try,
                sol,
                terms,
                geo,
                dt,
                forced: true,
            });
        }
        dt *= 0.5;
    }
    Ok(fallback.expect("loop always sets the fallback on the last attempt"))
}

/// Per-iteration progress callback; receives the accepted state.
pub type SnapshotFn<'a> =
    &'a mut dyn FnMut(usize, &LevelSetField, &CoupledSolution, &FunctionP1);

/// Metric hook evaluated on the accepted state each iteration.
pub type ErrMetric<'a> = &'a dyn Fn(&TriMesh, &LevelSetField, &CoupledSolution) -> f64;

/// Steepest-descent loop: solve state, shortcut adjoint, surface shape
/// gradient, Hilbertian extension, line search, redistancing; α and β are
/// frozen for `decay_start` iterations then decay geometrically.
pub fn optimize(
    problem: &ShapeProblem,
    phi0: &LevelSetField,
    config: &OptimizeConfig,
    err_metric: Option<ErrMetric>,
    mut snapshot: Option<SnapshotFn>,
) -> Result<OptimizeOutcome> {
    config.validate()?;
    let mesh = problem.mesh;
    let h = mesh.h();
    let ctx = FemContext::new(mesh);
    let a_dirichlet = apply_dirichlet(&ctx.h1, &mesh.vertex_is_boundary);

    let mut alpha = config.alpha0;
    let mut beta = config.beta0;
    let mut phi = if config.reinit_initial {
        levelset::reinitialize(mesh, phi0, config.reinit_steps)
    } else {
        phi0.clone()
    };

    let params_at = |alpha: f64, beta: f64| ShapeParams {
        alpha,
        beta,
        lambda: config.lambda,
        gamma0: config.gamma0,
    };

    let mut params = params_at(alpha, beta);
    let (mut sol, mut terms, _) =
        solve_and_objective(&ctx, problem, &phi, &params, config.inner_tol)?;
    let mut geo: GeometryReport;

    let mut history = History::default();
    let mut window = 0usize;
    let mut forced_streak = 0usize;
    let mut termination = Termination::MaxIterations;

    if let Some(cb) = snapshot.as_mut() {
        let q = fem::recover_intensity(mesh, &sol, &phi);
        cb(0, &phi, &sol, &q);
    }

    for k in 0..config.max_iters {
        if k >= config.decay_start {
            alpha *= config.decay_rate;
            beta *= config.decay_rate;
            params = params_at(alpha, beta);
            let re = solve_and_objective(&ctx, problem, &phi, &params, config.inner_tol)?;
            sol = re.0;
            terms = re.1;
        }

        let interface = levelset::extract_interface(mesh, &phi);
        if interface.segments.is_empty() {
            termination = Termination::EmptyDomain;
            break;
        }

        let adj = adjoint_state(
            &ctx,
            &phi,
            &sol,
            &problem.u_d,
            AdjointMode::Shortcut,
            config.inner_tol,
        )?;
        let grad = shape_gradient_surface(
            mesh,
            &phi,
            &interface,
            &sol,
            &adj,
            &params,
            config.lambda_form,
        );
        let (vel, dj_v, vnorm2) = extend_velocity(&ctx, &a_dirichlet, &grad, config.inner_tol)?;
        let descent_defect = if vnorm2 > 0.0 {
            (dj_v + vnorm2).abs() / vnorm2
        } else {
            0.0
        };

        let speed = vel.max_norm();
        if speed <= 1e-14 * (1.0 + terms.total.abs()) {
            termination = Termination::Stagnant;
            break;
        }

        let j_base = terms.total;
        let ls = line_search(&ctx, problem, &phi, &vel, j_base, &params, h, config)?;
        phi = ls.phi;
        sol = ls.sol;
        terms = ls.terms;
        geo = ls.geo;

        forced_streak = if ls.forced { forced_streak + 1 } else { 0 };

        let mut reinit_flag = false;
        let due = (k + 1) % config.reinit_every == 0;
        if due || levelset::grad_norm_deviation(mesh, &phi) > config.reinit_deviation {
            phi = levelset::reinitialize(mesh, &phi, config.reinit_steps);
            reinit_flag = true;
            let re = solve_and_objective(&ctx, problem, &phi, &params, config.inner_tol)?;
            sol = re.0;
            terms = re.1;
            geo = re.2;
        }

        let q = fem::recover_intensity(mesh, &sol, &phi);
        let err_q = err_metric.map(|m| m(mesh, &phi, &q));
        history.records.push(IterationRecord {
            k: k + 1,
            j: terms.total,
            j_misfit: terms.misfit,
            j_reg: terms.reg,
            j_perim: terms.perimeter,
            j_vol: terms.volume,
            err_q,
            volume: geo.volume,
            perimeter: geo.perimeter,
            dt: ls.dt,
            reinit: reinit_flag,
            forced: ls.forced,
            descent_defect,
        });
        if let Some(cb) = snapshot.as_mut() {
            cb(k + 1, &phi, &sol, &q);
        }

        let rel_change = (ls.terms.total - j_base).abs() / j_base.abs().max(1e-300);
        window = if !ls.forced && rel_change < config.stop_tol {
            window + 1
        } else {
            0
        };
        if window >= config.stop_window {
            termination = Termination::Converged;
            break;
        }
        if forced_streak >= config.max_forced_steps {
            termination = Termination::Stagnant;
            break;
        }
    }

    let intensity = fem::recover_intensity(mesh, &sol, &phi);
    Ok(OptimizeOutcome {
        phi,
        solution: sol,
        intensity,
        history,
        termination,
        final_alpha: alpha,
        final_beta: beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levelset::{init_from_expression, Shape};
    use crate::mesh::{build_square_mesh, MeshMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn disk(center: [f64; 2], r: f64) -> Shape {
        Shape::Disk { center, r }
    }

    /// Smooth random interior velocity: polynomial modes times the corner
    /// bump (1-x²)(1-y²), normalized to unit maximum speed.
    pub(crate) fn random_velocity(mesh: &TriMesh, rng: &mut ChaCha8Rng) -> VelocityField {
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

    fn example_problem(mesh: &TriMesh) -> ShapeProblem<'_> {
        // Self-consistent synthetic data on the same mesh: forward solve
        // with a known disk source, trace as u_d.
        let f = FunctionP1::interpolate(mesh, |_, _| 1.0);
        let u_n = BoundaryData::from_fn(mesh, |x, y| (PI * x).sin() * (PI * y).sin());
        let omega_true = init_from_expression(mesh, &disk([0.15, 0.1], 0.3));
        let q = FunctionP1::interpolate(mesh, |_, _| 1.0);
        let u =
            fem::solve_forward_neumann(mesh, &f, Some((&omega_true, &q)), &u_n).unwrap();
        let u_d = BoundaryData {
            values: mesh
                .vertices
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    if mesh.vertex_is_boundary[i] {
                        u.values[i]
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        ShapeProblem {
            mesh,
            f,
            u_n,
            u_d,
        }
    }

    #[test]
    fn adjoint_shortcut_matches_solve() {
        let mesh = build_square_mesh(30, MeshMode::Structured).unwrap();
        let ctx = FemContext::new(&mesh);
        let problem = example_problem(&mesh);
        let phi = init_from_expression(&mesh, &disk([-0.1, 0.0], 0.2));
        let params = ShapeParams {
            alpha: 1e-3,
            beta: 0.0,
            lambda: 1e-6,
            gamma0: 0.0,
        };
        let (sol, _, _) =
            solve_and_objective(&ctx, &problem, &phi, &params, 1e-12).unwrap();
        let fast = adjoint_state(&ctx, &phi, &sol, &problem.u_d, AdjointMode::Shortcut, 1e-12)
            .unwrap();
        let slow =
            adjoint_state(&ctx, &phi, &sol, &problem.u_d, AdjointMode::Solve, 1e-12).unwrap();
        // p ≡ 0 edge case is covered separately; here compare both modes.
        let p_scale = ctx.h1_norm(&sol.p.values);
        let dv: Vec<f64> = slow
            .v
            .values
            .iter()
            .zip(&sol.p.values)
            .map(|(v, p)| v + p)
            .collect();
        assert!(ctx.h1_norm(&dv) <= 1e-8 * p_scale, "v + p too large");
        assert!(ctx.h1_norm(&slow.w.values) <= 1e-8 * p_scale, "w too large");
        // Shortcut is exactly (-p, 0).
        for i in 0..mesh.n_vertices() {
            assert_eq!(fast.v.values[i], -sol.p.values[i]);
            assert_eq!(fast.w.values[i], 0.0);
        }
    }

    #[test]
    fn zero_solution_gives_zero_adjoint() {
        let mesh = build_square_mesh(10, MeshMode::Structured).unwrap();
        let sol = CoupledSolution {
            u: FunctionP1::zeros(&mesh),
            p: FunctionP1::zeros(&mesh),
            alpha: 1.0,
        };
        let ctx = FemContext::new(&mesh);
        let phi = init_from_expression(&mesh, &disk([0.0, 0.0], 0.3));
        let adj = adjoint_state(
            &ctx,
            &phi,
            &sol,
            &BoundaryData::zeros(&mesh),
            AdjointMode::Solve,
            1e-12,
        )
        .unwrap();
        assert!(adj.v.values.iter().all(|&v| v.abs() < 1e-12));
        assert!(adj.w.values.iter().all(|&w| w.abs() < 1e-12));
    }

    #[test]
    fn gradient_functional_linear_and_zero_at_zero() {
        let mesh = build_square_mesh(40, MeshMode::Structured).unwrap();
        let ctx = FemContext::new(&mesh);
        let problem = example_problem(&mesh);
        let phi = init_from_expression(&mesh, &disk([0.0, 0.0], 0.25));
        let params = ShapeParams {
            alpha: 1e-3,
            beta: 0.1,
            lambda: 1e-6,
            gamma0: 0.0,
        };
        let (sol, _, _) = solve_and_objective(&ctx, &problem, &phi, &params, 1e-10).unwrap();
        let adj =
            adjoint_state(&ctx, &phi, &sol, &problem.u_d, AdjointMode::Shortcut, 1e-10).unwrap();
        let interface = levelset::extract_interface(&mesh, &phi);
        let grad = shape_gradient_surface(
            &mesh,
            &phi,
            &interface,
            &sol,
            &adj,
            &params,
            PerimeterGradForm::TangentialDivergence,
        );
        assert_eq!(grad.apply(&VelocityField::zeros(&mesh)), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w1 = random_velocity(&mesh, &mut rng);
        let w2 = random_velocity(&mesh, &mut rng);
        let (a, b) = (0.7, -1.3);
        let combo = VelocityField {
            x: w1.x.iter().zip(&w2.x).map(|(p, q)| a * p + b * q).collect(),
            y: w1.y.iter().zip(&w2.y).map(|(p, q)| a * p + b * q).collect(),
        };
        let lhs = grad.apply(&combo);
        let rhs = a * grad.apply(&w1) + b * grad.apply(&w2);
        let scale = lhs.abs().max(rhs.abs()).max(1e-30);
        assert!((lhs - rhs).abs() / scale < 1e-12);
    }

    #[test]
    fn shortcut_kills_w_terms_in_distributed_form() {
        let mesh = build_square_mesh(30, MeshMode::Structured).unwrap();
        let ctx = FemContext::new(&mesh);
        let problem = example_problem(&mesh);
        let phi = init_from_expression(&mesh, &disk([0.0, 0.0], 0.25));
        let params = ShapeParams {
            alpha: 1e-3,
            beta: 0.0,
            lambda: 0.0,
            gamma0: 0.0,
        };
        let (sol, _, _) = solve_and_objective(&ctx, &problem, &phi, &params, 1e-10).unwrap();
        let adj =
            adjoint_state(&ctx, &phi, &sol, &problem.u_d, AdjointMode::Shortcut, 1e-10).unwrap();
        // With w ≡ 0 the w-terms contribute exactly zero: adding a fake
        // nonzero w must change the functional.
        let g0 = shape_gradient_distributed(&mesh, &phi, &sol, &adj, &problem.f, &params);
        let fake = AdjointPair {
            v: adj.v.clone(),
            w: FunctionP1::interpolate(&mesh, |x, y| x + 0.5 * y),
        };
        let g1 = shape_gradient_distributed(&mesh, &phi, &sol, &fake, &problem.f, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_velocity(&mesh, &mut rng);
        let d0 = g0.apply(&w);
        let d1 = g1.apply(&w);
        assert!((d0 - d1).abs() > 1e-12 * d0.abs().max(1.0));
    }

    #[test]
    fn surface_and_distributed_forms_agree_on_resolved_disk() {
        let mesh = build_square_mesh(80, MeshMode::Structured).unwrap();
        let ctx = FemContext::new(&mesh);
        let problem = example_problem(&mesh);
        let phi = init_from_expression(&mesh, &disk([0.15, 0.1], 0.25));
        let params = ShapeParams {
            alpha: 1e-3,
            beta: 0.05,
            lambda: 1e-6,
            gamma0: 0.0,
        };
        let (sol, _, _) = solve_and_objective(&ctx, &problem, &phi, &params, 1e-11).unwrap();
        let adj =
            adjoint_state(&ctx, &phi, &sol, &problem.u_d, AdjointMode::Shortcut, 1e-11).unwrap();
        let interface = levelset::extract_interface(&mesh, &phi);
        let gs = shape_gradient_surface(
            &mesh,
            &phi,
            &interface,
            &sol,
            &adj,
            &params,
            PerimeterGradForm::TangentialDivergence,
        );
        let gd = shape_gradient_distributed(&mesh, &phi, &sol, &adj, &problem.f, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..3 {
            let w = random_velocity(&mesh, &mut rng);
            let a = gs.apply(&w);
            let b = gd.apply(&w);
            let scale = a.abs().max(b.abs()).max(1e-30);
            assert!((a - b).abs() / scale < 0.05, "surface {a} vs distributed {b}");
        }
    }

    #[test]
    fn extension_gives_descent_certificate() {
        let mesh = build_square_mesh(40, MeshMode::Structured).unwrap();
        let ctx = FemContext::new(&mesh);
        let problem = example_problem(&mesh);
        let phi = init_from_expression(&mesh, &disk([0.0, 0.0], 0.2));
        let params = ShapeParams {
            alpha: 1e-3,
            beta: 0.0,
            lambda: 1e-6,
            gamma0: 0.0,
        };
        let (sol, _, _) = solve_and_objective(&ctx, &problem, &phi, &params, 1e-11).unwrap();
        let adj =
            adjoint_state(&ctx, &phi, &sol, &problem.u_d, AdjointMode::Shortcut, 1e-11).unwrap();
        let interface = levelset::extract_interface(&mesh, &phi);
        let grad = shape_gradient_surface(
            &mesh,
            &phi,
            &interface,
            &sol,
            &adj,
            &params,
            PerimeterGradForm::TangentialDivergence,
        );
        let a_d = apply_dirichlet(&ctx.h1, &mesh.vertex_is_boundary);
        let (vel, dj, norm2) = extend_velocity(&ctx, &a_d, &grad, 1e-12).unwrap();
        assert!(dj <= 0.0);
        assert!((dj + norm2).abs() <= 1e-8 * norm2.max(1e-30), "dj {dj} norm2 {norm2}");
        // Essential condition holds exactly.
        for i in 0..mesh.n_vertices() {
            if mesh.vertex_is_boundary[i] {
                assert_eq!(vel.x[i], 0.0);
                assert_eq!(vel.y[i], 0.0);
            }
        }
        // Zero functional gives zero velocity.
        let zero = ShapeGradient {
            rx: vec![0.0; mesh.n_vertices()],
            ry: vec![0.0; mesh.n_vertices()],
        };
        let (v0, dj0, n0) = extend_velocity(&ctx, &a_d, &zero, 1e-12).unwrap();
        assert_eq!(v0.max_norm(), 0.0);
        assert_eq!(dj0, 0.0);
        assert_eq!(n0, 0.0);
    }

    #[test]
    fn fd_check_zero_velocity() {
        let mesh = build_square_mesh(24, MeshMode::Structured).unwrap();
        let ctx = FemContext::new(&mesh);
        let problem = example_problem(&mesh);
        let phi = init_from_expression(&mesh, &disk([0.0, 0.0], 0.25));
        let params = ShapeParams {
            alpha: 1e-3,
            beta: 0.0,
            lambda: 1e-6,
            gamma0: 0.0,
        };
        let v = VelocityField::zeros(&mesh);
        let chk = finite_difference_check(&ctx, &problem, &phi, &v, 1e-3, &params).unwrap();
        assert_eq!(chk.analytic, 0.0);
        assert_eq!(chk.fd, 0.0);
    }

    #[test]
    fn fd_check_matches_analytic_gradient() {
        let mesh = build_square_mesh(60, MeshMode::Structured).unwrap();
        let ctx = FemContext::new(&mesh);
        let problem = example_problem(&mesh);
        let phi0 = init_from_expression(&mesh, &disk([-0.1, 0.0], 0.2));
        let phi = levelset::reinitialize(&mesh, &phi0, 30);
        let params = ShapeParams {
            alpha: 1e-3,
            beta: 0.01,
            lambda: 1e-6,
            gamma0: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let vel = random_velocity(&mesh, &mut rng);
        let mut best = f64::INFINITY;
        for t in [1e-2, 1e-3, 1e-4] {
            let chk = finite_difference_check(&ctx, &problem, &phi, &vel, t, &params).unwrap();
            best = best.min(chk.rel_err);
        }
        assert!(best < 0.02, "best rel err {best}");
    }

    #[test]
    fn optimize_short_run_descends() {
        let mesh = build_square_mesh(34, MeshMode::Structured).unwrap();
        let problem = example_problem(&mesh);
        let phi0 = init_from_expression(&mesh, &disk([-0.1, 0.0], 0.2));
        let config = OptimizeConfig {
            alpha0: 1e-3,
            max_iters: 12,
            ..OptimizeConfig::default()
        };
        let out = optimize(&problem, &phi0, &config, None, None).unwrap();
        assert!(!out.history.records.is_empty());
        let first = &out.history.records[0];
        let last = out.history.records.last().unwrap();
        assert!(last.j <= first.j, "J went {} -> {}", first.j, last.j);
        assert!(out.history.monotone_fraction() >= 0.9);
        for r in &out.history.records {
            assert!(r.descent_defect <= 1e-6, "defect {}", r.descent_defect);
            // CFL-like bound holds by construction of the line search.
        }
        // Recovered support should drift toward the true disk center
        // (0.15, 0.1): the volume should grow from the small initial disk.
        assert!(last.volume > 0.9 * PI * 0.2 * 0.2);
    }

    #[test]
    fn optimize_stagnates_on_self_consistent_optimum() {
        // Manufacture u_d as the trace of the forward solution with no
        // source; then (u, p=0) solves the coupled system at any shape and
        // the misfit is already zero. Without perimeter/volume penalties
        // the shape gradient vanishes identically and the loop must flag
        // stagnation within a couple of iterations.
        let mesh = build_square_mesh(30, MeshMode::Structured).unwrap();
        let f = FunctionP1::interpolate(&mesh, |_, _| 1.0);
        let u_n = BoundaryData::from_fn(&mesh, |x, y| (PI * x).sin() * (PI * y).sin());
        let phi0 = init_from_expression(&mesh, &disk([0.0, 0.0], 0.3));
        let u_free = fem::solve_forward_neumann(&mesh, &f, None, &u_n).unwrap();
        let u_d = BoundaryData {
            values: (0..mesh.n_vertices())
                .map(|i| {
                    if mesh.vertex_is_boundary[i] {
                        u_free.values[i]
                    } else {
                        0.0
                    }
                })
                .collect(),
        };
        let problem = ShapeProblem {
            mesh: &mesh,
            f,
            u_n,
            u_d,
        };
        let config = OptimizeConfig {
            alpha0: 1e-2,
            lambda: 0.0,
            beta0: 0.0,
            max_iters: 30,
            reinit_initial: false,
            ..OptimizeConfig::default()
        };
        let out = optimize(&problem, &phi0, &config, None, None).unwrap();
        assert!(
            matches!(out.termination, Termination::Converged | Termination::Stagnant),
            "terminated {:?} after {} iterations",
            out.termination,
            out.history.records.len()
        );
        assert!(out.history.records.len() < 5);
        // The closed-form velocity norm at the optimum is tiny.
        let p_max = out
            .solution
            .p
            .values
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        assert!(p_max < 1e-8, "p should vanish, got {p_max}");
    }
}
