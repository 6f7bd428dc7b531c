// Temporary timing probe; will be replaced by the real integration suite.
use sensor_core::{EncodingCache, Prior, SensorSpace, SolveOptions};
use std::sync::Arc;
use std::time::Instant;

#[test]
#[ignore]
fn probe_oqs_n8() {
    let space = Arc::new(SensorSpace::symmetric(8).unwrap());
    let prior = Prior::new(2, 0.75).unwrap();
    let t0 = Instant::now();
    let cache = EncodingCache::with_order(space, prior, 40).unwrap();
    println!("cache build: {:?}", t0.elapsed());
    for max_outer in [30, 120] {
        let t1 = Instant::now();
        let opts = SolveOptions { restarts: 2, max_outer, seed: 11, ..Default::default() };
        let sol = sensor_core::solve_oqs(&cache, &opts).unwrap();
        println!(
            "outer {max_outer}: {:?}  cost {:.6e} ratio {:.4} iters {} conv {}",
            t1.elapsed(),
            sol.cost,
            sol.ratio,
            sol.status.iterations,
            sol.status.converged,
        );
    }
    println!("bound ratio {:.4}", (sensor_core::bcrb_quantum(2, 8, 0.75) / 1.125).sqrt());
}

#[test]
#[ignore]
fn probe_oqs_n4_small_delta() {
    let space = Arc::new(SensorSpace::symmetric(4).unwrap());
    let prior = Prior::new(2, 0.05).unwrap();
    let cache = EncodingCache::with_order(space, prior, 40).unwrap();
    let t1 = Instant::now();
    let opts = SolveOptions { restarts: 4, max_outer: 120, seed: 5, ..Default::default() };
    let sol = sensor_core::solve_oqs(&cache, &opts).unwrap();
    let bound = sensor_core::bcrb_quantum(2, 4, 0.05);
    println!(
        "N4 d0.05: {:?} cost {:.9e} bound {:.9e} excess {:.3}% iters {} conv {}",
        t1.elapsed(),
        sol.cost,
        bound,
        100.0 * (sol.cost / bound - 1.0),
        sol.status.iterations,
        sol.status.converged,
    );
}

#[test]
#[ignore]
fn probe_covariant_n8() {
    use sensor_core::{solve_covariant_2p, CovariantOptions};
    for n in [4u32, 8] {
        let delta = 0.75;
        let t0 = Instant::now();
        let opts = CovariantOptions { restarts: 6, max_outer: 80, seed: 3, ..Default::default() };
        let sol = solve_covariant_2p(n, delta, &opts).unwrap();
        let bound = sensor_core::bcrb_quantum(2, n, delta);
        println!(
            "covariant N={n}: {:?} cost {:.6e} ratio {:.4} iters {} conv {} best_r {} | bound {:.6e} excess {:.2}%",
            t0.elapsed(),
            sol.cost,
            sol.ratio,
            sol.status.iterations,
            sol.status.converged,
            sol.status.best_restart,
            bound,
            100.0 * (sol.cost / bound - 1.0),
        );
    }
}

#[test]
#[ignore]
fn probe_oqs_irreducible_n8_warm() {
    use sensor_core::{
        embed_warm_start, isometry_into_irreducible, solve_covariant_2p, CovariantOptions,
        WarmStart,
    };
    let n = 8u32;
    let delta = 0.75;
    let t0 = Instant::now();
    let cov = solve_covariant_2p(n, delta, &CovariantOptions { restarts: 6, seed: 3, ..Default::default() }).unwrap();
    println!("covariant: {:?} cost {:.6e}", t0.elapsed(), cov.cost);

    let (povm, _est) = sensor_core::expand_covariant(&cov, (2 * n + 2) as usize).unwrap();
    let dsum = cov.space().unwrap();
    let psi = cov.state_vector(&dsum).unwrap();
    let (iota, irr) = isometry_into_irreducible(&dsum).unwrap();
    let warm = embed_warm_start(&iota, &WarmStart { psi, povm });
    println!("warm POVM outcomes {} dim {}", warm.povm.len(), irr.dim);

    let t1 = Instant::now();
    let prior = Prior::new(2, delta).unwrap();
    let cache = EncodingCache::new(Arc::new(irr), prior).unwrap();
    println!("irreducible cache: {:?}", t1.elapsed());

    let t2 = Instant::now();
    let opts = SolveOptions {
        restarts: 2,
        max_outer: 40,
        seed: 11,
        warm: Some(warm),
        n_outcomes: Some(31),
        ..Default::default()
    };
    let sol = sensor_core::solve_oqs(&cache, &opts).unwrap();
    println!(
        "oqs irr N=8: {:?} cost {:.6e} ratio {:.4} iters {} conv {} best_r {}",
        t2.elapsed(),
        sol.cost,
        sol.ratio,
        sol.status.iterations,
        sol.status.converged,
        sol.status.best_restart,
    );
    println!("2p/oqs ratio: {:.4}", cov.cost / sol.cost);
}
