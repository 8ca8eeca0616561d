//! P1 finite elements on the hold-all square: assembly of the `H¹` bilinear
//! form, boundary and indicator mass matrices, load vectors, the forward
//! Neumann problem, and the coupled first-order optimality system whose
//! adjoint component carries the source intensity as `q = -p/α` on `ω`.

use crate::cutcell;
use crate::error::{Error, Result};
use crate::levelset::{self, LevelSetField};
use crate::mesh::TriMesh;
use crate::sparse::{self, SparseMatrix, TripletBuffer};

/// Default relative residual for every inner linear solve. Shape-gradient
/// finite-difference checks difference the objective at steps far larger
/// than this, so the solves never dominate the error budget.
pub const INNER_TOL: f64 = 1e-10;

/// Nodal P1 scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionP1 {
    pub values: Vec<f64>,
}

impl FunctionP1 {
    pub fn new(mesh: &TriMesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_vertices() {
            return Err(Error::Dimension(format!(
                "nodal values {} vs {} vertices",
                values.len(),
                mesh.n_vertices()
            )));
        }
        Ok(FunctionP1 { values })
    }

    pub fn zeros(mesh: &TriMesh) -> Self {
        FunctionP1 {
            values: vec![0.0; mesh.n_vertices()],
        }
    }

    /// Nodal interpolation of an analytic function.
    pub fn interpolate(mesh: &TriMesh, f: impl Fn(f64, f64) -> f64) -> Self {
        FunctionP1 {
            values: mesh.vertices.iter().map(|&[x, y]| f(x, y)).collect(),
        }
    }

    pub fn eval(&self, mesh: &TriMesh, p: [f64; 2]) -> f64 {
        let (t, bc) = mesh.locate(p);
        let [i, j, k] = mesh.triangles[t];
        self.values[i] * bc[0] + self.values[j] * bc[1] + self.values[k] * bc[2]
    }

    /// Constant gradient on triangle `t`.
    pub fn tri_gradient(&self, mesh: &TriMesh, t: usize) -> [f64; 2] {
        let g = mesh.element_geometry(t).expect("validated mesh");
        let [a, b, c] = mesh.triangles[t];
        let f = [self.values[a], self.values[b], self.values[c]];
        [
            f[0] * g.grad[0][0] + f[1] * g.grad[1][0] + f[2] * g.grad[2][0],
            f[0] * g.grad[0][1] + f[1] * g.grad[1][1] + f[2] * g.grad[2][1],
        ]
    }
}

/// Nodal data living on boundary vertices (zero elsewhere).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub values: Vec<f64>,
}

impl BoundaryData {
    /// Evaluates `f` on boundary vertices only.
    pub fn from_fn(mesh: &TriMesh, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = mesh
            .vertices
            .iter()
            .enumerate()
            .map(|(i, &[x, y])| {
                if mesh.vertex_is_boundary[i] {
                    f(x, y)
                } else {
                    0.0
                }
            })
            .collect();
        BoundaryData { values }
    }

    pub fn zeros(mesh: &TriMesh) -> Self {
        BoundaryData {
            values: vec![0.0; mesh.n_vertices()],
        }
    }
}

/// Discrete solution of the coupled optimality system.
#[derive(Debug, Clone)]
pub struct CoupledSolution {
    pub u: FunctionP1,
    pub p: FunctionP1,
    pub alpha: f64,
}

/// Stiffness-plus-mass matrix of `a(u,v) = (∇u,∇v) + (u,v)`.
pub fn assemble_h1(mesh: &TriMesh) -> SparseMatrix {
    let mut buf = TripletBuffer::with_capacity(9 * mesh.n_triangles());
    for t in 0..mesh.n_triangles() {
        let geo = mesh.element_geometry(t).expect("validated mesh");
        let idx = mesh.triangles[t];
        for i in 0..3 {
            for j in 0..3 {
                let stiff = geo.area
                    * (geo.grad[i][0] * geo.grad[j][0] + geo.grad[i][1] * geo.grad[j][1]);
                let mass = geo.area / 12.0 * if i == j { 2.0 } else { 1.0 };
                buf.push(idx[i], idx[j], stiff + mass);
            }
        }
    }
    SparseMatrix::from_triplets(&buf, mesh.n_vertices(), mesh.n_vertices())
        .expect("indices in range by construction")
}

/// Consistent P1 mass matrix.
pub fn assemble_mass(mesh: &TriMesh) -> SparseMatrix {
    let mut buf = TripletBuffer::with_capacity(9 * mesh.n_triangles());
    for t in 0..mesh.n_triangles() {
        let geo = mesh.element_geometry(t).expect("validated mesh");
        let idx = mesh.triangles[t];
        for i in 0..3 {
            for j in 0..3 {
                buf.push(
                    idx[i],
                    idx[j],
                    geo.area / 12.0 * if i == j { 2.0 } else { 1.0 },
                );
            }
        }
    }
    SparseMatrix::from_triplets(&buf, mesh.n_vertices(), mesh.n_vertices())
        .expect("indices in range by construction")
}

/// Edge-wise P1 mass matrix of `(u, v)_Γ`, supported on boundary vertices.
pub fn assemble_boundary_mass(mesh: &TriMesh) -> SparseMatrix {
    let mut buf = TripletBuffer::with_capacity(4 * mesh.boundary_edges.len());
    for e in &mesh.boundary_edges {
        let [a, b] = e.v;
        let pa = mesh.vertices[a];
        let pb = mesh.vertices[b];
        let len = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
        buf.push(a, a, len / 3.0);
        buf.push(b, b, len / 3.0);
        buf.push(a, b, len / 6.0);
        buf.push(b, a, len / 6.0);
    }
    SparseMatrix::from_triplets(&buf, mesh.n_vertices(), mesh.n_vertices())
        .expect("indices in range by construction")
}

/// Mass matrix restricted to `ω = {φ < 0}`: entries `∫_{ω∩T} λ_i λ_j`, with
/// exact integration over the sub-polygon of each cut triangle.
pub fn assemble_indicator_mass(mesh: &TriMesh, phi: &LevelSetField) -> SparseMatrix {
    let mut buf = TripletBuffer::new();
    for t in 0..mesh.n_triangles() {
        let f = phi.tri_values(mesh, t);
        let cut = cutcell::cut_triangle(f);
        if cut.neg_poly.is_empty() {
            continue;
        }
        let geo = mesh.element_geometry(t).expect("validated mesh");
        let idx = mesh.triangles[t];
        if cut.segment.is_none() {
            // Whole triangle inside ω: exact local mass.
            for i in 0..3 {
                for j in 0..3 {
                    buf.push(
                        idx[i],
                        idx[j],
                        geo.area / 12.0 * if i == j { 2.0 } else { 1.0 },
                    );
                }
            }
        } else {
            let tri = mesh.tri_coords(t);
            for i in 0..3 {
                for j in i..3 {
                    let v = cutcell::integrate_poly(&tri, &cut.neg_poly, |b| b[i] * b[j]);
                    buf.push(idx[i], idx[j], v);
                    if j != i {
                        buf.push(idx[j], idx[i], v);
                    }
                }
            }
        }
    }
    SparseMatrix::from_triplets(&buf, mesh.n_vertices(), mesh.n_vertices())
        .expect("indices in range by construction")
}

/// Load vector `(f, λ_i)` for nodal `f` (exact for the P1 interpolant).
pub fn load_volume(mesh: &TriMesh, f: &FunctionP1) -> Vec<f64> {
    let mut load = vec![0.0; mesh.n_vertices()];
    for t in 0..mesh.n_triangles() {
        let geo = mesh.element_geometry(t).expect("validated mesh");
        let idx = mesh.triangles[t];
        let fv = [f.values[idx[0]], f.values[idx[1]], f.values[idx[2]]];
        for i in 0..3 {
            load[idx[i]] += geo.area / 12.0 * (fv[i] + fv[0] + fv[1] + fv[2]);
        }
    }
    load
}

/// Boundary load `(g, λ_i)_Γ` for nodal boundary data.
pub fn load_boundary(mesh: &TriMesh, g: &BoundaryData) -> Vec<f64> {
    let mut load = vec![0.0; mesh.n_vertices()];
    for e in &mesh.boundary_edges {
        let [a, b] = e.v;
        let pa = mesh.vertices[a];
        let pb = mesh.vertices[b];
        let len = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
        load[a] += len / 6.0 * (2.0 * g.values[a] + g.values[b]);
        load[b] += len / 6.0 * (g.values[a] + 2.0 * g.values[b]);
    }
    load
}

/// Load `∫_{ω∩T} q λ_i` of a masked source with nodal intensity `q`.
pub fn load_indicator(mesh: &TriMesh, phi: &LevelSetField, q: &FunctionP1) -> Vec<f64> {
    let m = assemble_indicator_mass(mesh, phi);
    m.matvec(&q.values).expect("dimension by construction")
}

/// Solves the forward Neumann problem
/// `a(u, v) = (f + q·χ_ω, v) + (u_n, v)_Γ`. Used to manufacture the
/// Dirichlet observation on a fine mesh.
pub fn solve_forward_neumann(
    mesh: &TriMesh,
    f: &FunctionP1,
    source: Option<(&LevelSetField, &FunctionP1)>,
    u_n: &BoundaryData,
) -> Result<FunctionP1> {
    let a = assemble_h1(mesh);
    let mut rhs = load_volume(mesh, f);
    if let Some((phi, q)) = source {
        let extra = load_indicator(mesh, phi, q);
        for (r, e) in rhs.iter_mut().zip(extra) {
            *r += e;
        }
    }
    for (r, e) in rhs.iter_mut().zip(load_boundary(mesh, u_n)) {
        *r += e;
    }
    let u = sparse::solve_spd(&a, &rhs, INNER_TOL)?;
    FunctionP1::new(mesh, u)
}

/// Choice of linear form for the coupled optimality system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoupledForm {
    /// Symmetric saddle system in the unknowns `(u, p/√α)`; the default,
    /// better conditioned for small `α`.
    #[default]
    RescaledSymmetric,
    /// Plain nonsymmetric block system in `(u, p)`; kept as a cross-check.
    MonolithicBlock,
}

/// Matrices reused across repeated coupled solves on one mesh.
pub struct FemContext<'m> {
    pub mesh: &'m TriMesh,
    pub h1: SparseMatrix,
    pub boundary_mass: SparseMatrix,
    pub mass: SparseMatrix,
}

impl<'m> FemContext<'m> {
    pub fn new(mesh: &'m TriMesh) -> Self {
        FemContext {
            mesh,
            h1: assemble_h1(mesh),
            boundary_mass: assemble_boundary_mass(mesh),
            mass: assemble_mass(mesh),
        }
    }

    /// `‖v‖_{H¹} = sqrt(vᵀ A v)`.
    pub fn h1_norm(&self, v: &[f64]) -> f64 {
        self.h1
            .quadratic_form(v, v)
            .expect("dimension by construction")
            .max(0.0)
            .sqrt()
    }

    /// `‖g‖_{L²(Γ)} = sqrt(gᵀ B g)`.
    pub fn boundary_norm(&self, g: &[f64]) -> f64 {
        self.boundary_mass
            .quadratic_form(g, g)
            .expect("dimension by construction")
            .max(0.0)
            .sqrt()
    }

    /// `‖v‖_{L²(Ω)} = sqrt(vᵀ M v)`.
    pub fn l2_norm(&self, v: &[f64]) -> f64 {
        self.mass
            .quadratic_form(v, v)
            .expect("dimension by construction")
            .max(0.0)
            .sqrt()
    }
}

/// Solves the coupled first-order optimality system on `ω = {φ < 0}` with
/// data `(f, u_n, u_d)` and regularization `α`, using cached matrices.
#[allow(clippy::too_many_arguments)]
pub fn solve_coupled_state_ctx(
    ctx: &FemContext,
    phi: &LevelSetField,
    f: &FunctionP1,
    u_n: &BoundaryData,
    u_d: &BoundaryData,
    alpha: f64,
    form: CoupledForm,
    tol: f64,
) -> Result<CoupledSolution> {
    if alpha <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "regularization alpha must be positive, got {alpha}"
        )));
    }
    let mesh = ctx.mesh;
    let n = mesh.n_vertices();
    let m_omega = assemble_indicator_mass(mesh, phi);
    let b_f = load_volume(mesh, f);
    let b_n = load_boundary(mesh, u_n);
    let b_d = ctx
        .boundary_mass
        .matvec(&u_d.values)
        .expect("dimension by construction");

    // Interleaved unknowns keep the system banded: column 2j is u_j, column
    // 2j+1 the second field at node j.
    let push_block = |buf: &mut TripletBuffer,
                      mat: &SparseMatrix,
                      row_off: usize,
                      col_off: usize,
                      scale: f64| {
        for r in 0..mat.nrows {
            for k in mat.row_offsets[r]..mat.row_offsets[r + 1] {
                buf.push(
                    2 * r + row_off,
                    2 * mat.col_indices[k] + col_off,
                    scale * mat.values[k],
                );
            }
        }
    };

    let nnz_est = 2 * ctx.h1.nnz() + ctx.boundary_mass.nnz() + m_omega.nnz();
    let mut buf = TripletBuffer::with_capacity(nnz_est);
    let mut rhs = vec![0.0; 2 * n];
    let (u, p) = match form {
        CoupledForm::RescaledSymmetric => {
            // Unknown x = (u, p/√α); rows 2i test the adjoint equation,
            // rows 2i+1 test the state equation.
            let s = 1.0 / alpha.sqrt();
            push_block(&mut buf, &ctx.boundary_mass, 0, 0, -s);
            push_block(&mut buf, &ctx.h1, 0, 1, 1.0);
            push_block(&mut buf, &ctx.h1, 1, 0, 1.0);
            push_block(&mut buf, &m_omega, 1, 1, s);
            for i in 0..n {
                rhs[2 * i] = -s * b_d[i];
                rhs[2 * i + 1] = b_f[i] + b_n[i];
            }
            let k = SparseMatrix::from_triplets(&buf, 2 * n, 2 * n)?;
            let x = sparse::solve_general(&k, &rhs, tol)?;
            let mut u = vec![0.0; n];
            let mut p = vec![0.0; n];
            for i in 0..n {
                u[i] = x[2 * i];
                p[i] = alpha.sqrt() * x[2 * i + 1];
            }
            (u, p)
        }
        CoupledForm::MonolithicBlock => {
            // Unknown (u, p); rows 2i test the state equation, rows 2i+1
            // the adjoint equation.
            push_block(&mut buf, &ctx.h1, 0, 0, 1.0);
            push_block(&mut buf, &m_omega, 0, 1, 1.0 / alpha);
            push_block(&mut buf, &ctx.boundary_mass, 1, 0, -1.0);
            push_block(&mut buf, &ctx.h1, 1, 1, 1.0);
            for i in 0..n {
                rhs[2 * i] = b_f[i] + b_n[i];
                rhs[2 * i + 1] = -b_d[i];
            }
            let k = SparseMatrix::from_triplets(&buf, 2 * n, 2 * n)?;
            let x = sparse::solve_general(&k, &rhs, tol)?;
            let mut u = vec![0.0; n];
            let mut p = vec![0.0; n];
            for i in 0..n {
                u[i] = x[2 * i];
                p[i] = x[2 * i + 1];
            }
            (u, p)
        }
    };
    Ok(CoupledSolution {
        u: FunctionP1 { values: u },
        p: FunctionP1 { values: p },
        alpha,
    })
}

/// Convenience wrapper assembling the context on the fly.
pub fn solve_coupled_state(
    mesh: &TriMesh,
    phi: &LevelSetField,
    f: &FunctionP1,
    u_n: &BoundaryData,
    u_d: &BoundaryData,
    alpha: f64,
) -> Result<CoupledSolution> {
    let ctx = FemContext::new(mesh);
    solve_coupled_state_ctx(
        &ctx,
        phi,
        f,
        u_n,
        u_d,
        alpha,
        CoupledForm::RescaledSymmetric,
        INNER_TOL,
    )
}

/// The smooth intensity field `-p/α` with no support mask; integrals
/// against the indicator of `ω` resolve the support geometrically.
pub fn intensity_smooth(sol: &CoupledSolution) -> FunctionP1 {
    FunctionP1 {
        values: sol.p.values.iter().map(|p| -p / sol.alpha).collect(),
    }
}

/// Recovered intensity `q = -p/α` at nodes inside `ω`, zero outside. The
/// indicator is handled at integration time on cut elements.
pub fn recover_intensity(
    mesh: &TriMesh,
    sol: &CoupledSolution,
    phi: &LevelSetField,
) -> FunctionP1 {
    let values = (0..mesh.n_vertices())
        .map(|i| {
            let v = phi.values[i];
            let v = if v == 0.0 { cutcell::TIE_EPS } else { v };
            if v < 0.0 {
                -sol.p.values[i] / sol.alpha
            } else {
                0.0
            }
        })
        .collect();
    FunctionP1 { values }
}

/// The four objective terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    /// `½ ‖u - u_d‖²_Γ`
    pub misfit: f64,
    /// `(1/2α) ‖p‖²_ω`
    pub reg: f64,
    /// `λ · P_Ω(ω)`
    pub perimeter: f64,
    /// `β · (|ω| - γ₀)`
    pub volume: f64,
    pub total: f64,
}

/// Geometry byproducts of an objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryReport {
    pub volume: f64,
    pub perimeter: f64,
}

/// Evaluates the full objective
/// `J = ½‖u-u_d‖²_Γ + (1/2α)‖p‖²_ω + λ P_Ω(ω) + β(|ω| - γ₀)`.
#[allow(clippy::too_many_arguments)]
pub fn compute_objective(
    ctx: &FemContext,
    phi: &LevelSetField,
    sol: &CoupledSolution,
    u_d: &BoundaryData,
    alpha: f64,
    lambda: f64,
    beta: f64,
    gamma0: f64,
) -> (ObjectiveTerms, GeometryReport) {
    let mesh = ctx.mesh;
    let diff: Vec<f64> = sol
        .u
        .values
        .iter()
        .zip(&u_d.values)
        .map(|(u, d)| u - d)
        .collect();
    let misfit = 0.5
        * ctx
            .boundary_mass
            .quadratic_form(&diff, &diff)
            .expect("dimension by construction");
    let m_omega = assemble_indicator_mass(mesh, phi);
    let reg = 0.5 / alpha
        * m_omega
            .quadratic_form(&sol.p.values, &sol.p.values)
            .expect("dimension by construction");
    let vol = levelset::measure_volume(mesh, phi);
    let per = levelset::measure_perimeter(mesh, phi);
    let perimeter = lambda * per;
    let volume = beta * (vol - gamma0);
    (
        ObjectiveTerms {
            misfit,
            reg,
            perimeter,
            volume,
            total: misfit + reg + perimeter + volume,
        },
        GeometryReport {
            volume: vol,
            perimeter: per,
        },
    )
}

/// Zeroes rows and columns of Dirichlet-constrained vertices and puts a unit
/// diagonal there; used by the velocity extension.
pub fn apply_dirichlet(a: &SparseMatrix, constrained: &[bool]) -> SparseMatrix {
    let mut buf = TripletBuffer::with_capacity(a.nnz());
    for r in 0..a.nrows {
        if constrained[r] {
            buf.push(r, r, 1.0);
            continue;
        }
        for k in a.row_offsets[r]..a.row_offsets[r + 1] {
            let c = a.col_indices[k];
            if !constrained[c] {
                buf.push(r, c, a.values[k]);
            }
        }
    }
    SparseMatrix::from_triplets(&buf, a.nrows, a.ncols).expect("indices preserved")
}

/// Degree-5 quadrature (7 points) for error integrals against smooth exact
/// solutions.
pub(crate) const QUAD7: [([f64; 3], f64); 7] = [
    ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
    (
        [0.059715871789770, 0.470142064105115, 0.470142064105115],
        0.132394152788506,
    ),
    (
        [0.470142064105115, 0.059715871789770, 0.470142064105115],
        0.132394152788506,
    ),
    (
        [0.470142064105115, 0.470142064105115, 0.059715871789770],
        0.132394152788506,
    ),
    (
        [0.797426985353087, 0.101286507323456, 0.101286507323456],
        0.125939180544827,
    ),
    (
        [0.101286507323456, 0.797426985353087, 0.101286507323456],
        0.125939180544827,
    ),
    (
        [0.101286507323456, 0.101286507323456, 0.797426985353087],
        0.125939180544827,
    ),
];

/// `‖u_h - u‖_{L²(Ω)}` with a degree-5 rule and exact evaluations of `u`.
pub fn l2_error_vs(mesh: &TriMesh, u_h: &FunctionP1, exact: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = 0.0;
    for t in 0..mesh.n_triangles() {
        let geo = mesh.element_geometry(t).expect("validated mesh");
        let tri = mesh.tri_coords(t);
        let [a, b, c] = mesh.triangles[t];
        let f = [u_h.values[a], u_h.values[b], u_h.values[c]];
        for (bc, w) in QUAD7 {
            let p = cutcell::to_cart(&tri, bc);
            let uh = cutcell::lin_value(f, bc);
            let d = uh - exact(p[0], p[1]);
            acc += geo.area * w * d * d;
        }
    }
    acc.sqrt()
}

/// `|u_h - u|_{H¹(Ω)}` (seminorm) with exact gradient evaluations.
pub fn h1_seminorm_error_vs(
    mesh: &TriMesh,
    u_h: &FunctionP1,
    grad_exact: impl Fn(f64, f64) -> [f64; 2],
) -> f64 {
    let mut acc = 0.0;
    for t in 0..mesh.n_triangles() {
        let geo = mesh.element_geometry(t).expect("validated mesh");
        let tri = mesh.tri_coords(t);
        let gh = u_h.tri_gradient(mesh, t);
        for (bc, w) in QUAD7 {
            let p = cutcell::to_cart(&tri, bc);
            let ge = grad_exact(p[0], p[1]);
            let dx = gh[0] - ge[0];
            let dy = gh[1] - ge[1];
            acc += geo.area * w * (dx * dx + dy * dy);
        }
    }
    acc.sqrt()
}
