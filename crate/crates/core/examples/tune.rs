use source_shape::harness::{self, RunOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).cloned().unwrap_or_else(|| "e1".into());
    let coarse: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let fine: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(83);
    let iters: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(100);
    let alphas: Vec<f64> = args.get(5).map(|s| s.split(',').map(|v| v.parse().unwrap()).collect()).unwrap_or_else(|| vec![1e-3, 1e-4]);
    let betas: Vec<f64> = args.get(6).map(|s| s.split(',').map(|v| v.parse().unwrap()).collect()).unwrap_or_else(|| vec![0.0, 1e-3, 3e-3]);

    println!("example={name} coarse={coarse} fine={fine} iters={iters}");
    println!("{:>9} {:>9} | {:>9} {:>9} {:>9} {:>5} {:>7} {:>7} {:>5}", "alpha0", "beta0", "best_err", "final_err", "pp_err", "k_best", "vol", "per", "comp");
    for &a in &alphas {
        for &b in &betas {
            let mut spec = harness::find_example(&name).unwrap();
            spec.coarse_n = coarse;
            spec.fine_n = fine;
            spec.config.max_iters = iters;
            spec.config.alpha0 = a;
            spec.config.beta0 = b;
            let art = harness::run_experiment(&spec, &RunOptions::default()).unwrap();
            let best = art.history.records.iter().filter_map(|r| r.err_q.map(|e| (r.k, e)))
                .min_by(|x, y| x.1.total_cmp(&y.1));
            let (kb, be) = best.unwrap_or((0, f64::NAN));
            println!("{a:>9.1e} {b:>9.1e} | {be:>9.4} {:>9.4} {:>9.4} {kb:>5} {:>7.3} {:>7.3} {:>5}",
                art.summary.err_q.unwrap_or(f64::NAN),
                art.summary.err_q_postprocessed.unwrap_or(f64::NAN),
                art.summary.volume, art.summary.perimeter, art.summary.components);
        }
    }
}
