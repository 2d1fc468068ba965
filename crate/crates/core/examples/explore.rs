// scratch exploration: flagship geometry, replica quality, lambda sweep
use fringetrack::pipeline::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("span");

    match mode {
        "span" => {
            let cfg = ExperimentConfig::default();
            let truth = cfg.true_field().unwrap();
            println!(
                "default dipole: span [{:.4}, {:.4}] mT, max path step {:.4} mT ({}x{})",
                truth.min(),
                truth.max(),
                max_path_step(&truth, cfg.scan.order),
                cfg.grid.nx,
                cfg.grid.ny
            );
        }
        "replica" => {
            let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
            let mut cfg = ExperimentConfig::default();
            cfg.seed = seed;
            let t0 = Instant::now();
            let out = run_simulation(&cfg).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            let st = out.deviation.stats;
            println!(
                "seed {seed}: {:.1}s | iters {} conv {} gnorm {:.2e} | max_int {:.4} rms_int {:.4} frac<=0.03 {:.3} max_all {:.4} | shifts {}+{} | track max {:.2} MHz",
                dt,
                out.fitted.diagnostics.iterations,
                out.fitted.diagnostics.converged,
                out.fitted.diagnostics.final_gradient_norm,
                st.max_interior_mt,
                st.rms_interior_mt,
                st.fraction_interior_below,
                st.max_all_mt,
                out.raw_record.shift_log.iter().filter(|s| **s == fringetrack::tracker::Shift::Down).count(),
                out.raw_record.shift_log.iter().filter(|s| **s == fringetrack::tracker::Shift::Up).count(),
                out.tracking.max_detuning_mhz,
            );
        }
        "lambda" => {
            let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
            let mut cfg = ExperimentConfig::default();
            cfg.seed = seed;
            let lambdas: Vec<f64> = (0..9).map(|i| 10f64.powf(-11.0 + 0.5 * i as f64)).collect();
            let t0 = Instant::now();
            let search = lambda_search(&cfg, &lambdas).unwrap();
            println!("lambda sweep ({:.1}s):", t0.elapsed().as_secs_f64());
            for (i, t) in search.trials.iter().enumerate() {
                let mark = if i == search.best { " <-- argmin" } else { "" };
                println!(
                    "  lambda {:.3e}: fringe_rms {:.6e} bending {:.3e} conv {}{}",
                    t.lambda, t.fringe_rms, t.bending_energy, t.converged, mark
                );
            }
        }
        "lambda_full" => {
            let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
            let mut cfg = ExperimentConfig::default();
            cfg.seed = seed;
            cfg.fit.objective_tolerance = 0.0;
            let lambdas = [1e-11, 3.162e-10, 1e-9, 3.162e-8, 1e-7, 1e-6, 1e-5];
            let t0 = Instant::now();
            let search = lambda_search(&cfg, &lambdas).unwrap();
            println!("full-convergence sweep ({:.1}s):", t0.elapsed().as_secs_f64());
            for (i, t) in search.trials.iter().enumerate() {
                let mark = if i == search.best { " <-- argmin" } else { "" };
                println!(
                    "  lambda {:.3e}: fringe_rms {:.6e} bending {:.3e}{}",
                    t.lambda, t.fringe_rms, t.bending_energy, mark
                );
            }
        }
        "budget" => {
            for cap in [200usize, 400, 600, 1000, 1500] {
                let mut cfg = ExperimentConfig::default();
                cfg.fit.max_iterations = cap;
                let t0 = Instant::now();
                let out = run_simulation(&cfg).unwrap();
                let st = out.deviation.stats;
                println!(
                    "cap {cap:5}: {:6.1}s evals {:5} | E {:.6} gnorm {:.2e} | max_int {:.4} rms_int {:.4} frac {:.3}",
                    t0.elapsed().as_secs_f64(),
                    out.fitted.diagnostics.evaluations,
                    out.fitted.diagnostics.final_objective,
                    out.fitted.diagnostics.final_gradient_norm,
                    st.max_interior_mt,
                    st.rms_interior_mt,
                    st.fraction_interior_below
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
