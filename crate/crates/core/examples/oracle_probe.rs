use source_shape::fem::{self, BoundaryData, FemContext, FunctionP1};
use source_shape::harness::{self, PostProcessMode};
use source_shape::levelset;
use source_shape::mesh::{build_square_mesh, MeshMode};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).cloned().unwrap_or_else(|| "e1".into());
    let coarse_n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(54);
    let mut spec = harness::find_example(&name).unwrap();
    spec.coarse_n = coarse_n;
    let mesh = build_square_mesh(spec.coarse_n, MeshMode::Structured).unwrap();
    let data = harness::generate_data(&spec, &mesh, 0).unwrap();
    let omega_e = spec.omega_e.clone().unwrap();
    let q_e = spec.q_e.clone().unwrap();
    let phi_e = levelset::init_from_expression(&mesh, &omega_e);
    let vol = levelset::measure_volume(&mesh, &phi_e);
    let per = levelset::measure_perimeter(&mesh, &phi_e);
    println!("{name}: |omega_e| = {vol:.4}, perimeter = {per:.4}");

    let f = FunctionP1::interpolate(&mesh, |x, y| spec.f.eval(x, y));
    let u_n = BoundaryData::from_fn(&mesh, |x, y| spec.u_n.eval(x, y));
    let ctx = FemContext::new(&mesh);
    println!("{:>10} {:>12} {:>12}", "alpha_pp", "err_q", "misfit");
    let mut a = 1e-2;
    while a > 1e-10 {
        let (q, _) = harness::post_process_intensity(
            &mesh,
            &phi_e,
            &f,
            &u_n,
            &data.u_d,
            PostProcessMode::Fixed(a),
        )
        .unwrap();
        let e = harness::err_q(&mesh, &q, &omega_e, &q_e);
        let sol = fem::solve_coupled_state_ctx(
            &ctx,
            &phi_e,
            &f,
            &u_n,
            &data.u_d,
            a,
            fem::CoupledForm::RescaledSymmetric,
            1e-10,
        )
        .unwrap();
        let diff: Vec<f64> = sol
            .u
            .values
            .iter()
            .zip(&data.u_d.values)
            .map(|(u, d)| u - d)
            .collect();
        let mis = ctx.boundary_norm(&diff);
        println!("{a:>10.1e} {e:>12.4e} {mis:>12.4e}");
        a /= 10.0;
    }
}
