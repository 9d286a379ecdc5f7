//! End-to-end checks on an i.i.d. β ∈ {2, 3} base against a quenched oracle.
//! For an integer multiplier M, ∫ (x - 1/2)({Mx} - 1/2) dx = 1/(12 M), so the
//! lag-n correlation at position j is 1/(12 β_j ⋯ β_{j+n-1}).

use std::sync::Arc;

use rds_core::base_env::BaseProcess;
use rds_core::decomp::reconstruction_error;
use rds_core::fiber_maps::{FiberMap, MapFamily};
use rds_core::observable::{Formula, Observable};
use rds_core::stats::estimators::{correlation_estimates, estimate_sigma_martingale};
use rds_core::transfer::{DensityField, QuenchedSystem, UlamCache};

const BETAS: [u32; 2] = [2, 3];

fn oracle(path: &[u32], j: usize, lags: usize) -> (f64, f64) {
    let mut prod = 1.0;
    let mut e = 0.0;
    for n in 1..=lags {
        prod *= path[j + n - 1] as f64;
        e += 1.0 / (12.0 * prod);
    }
    (1.0 / 12.0 + 2.0 * e, e)
}

#[test]
fn sigma_and_e_match_the_quenched_oracle() {
    let process = BaseProcess::iid(vec!["b2".into(), "b3".into()], vec![0.5, 0.5]).unwrap();
    let path = Arc::new(process.sample_path(100, 200, 17));
    let maps = Arc::new(BETAS.iter().map(|&b| FiberMap::build(&MapFamily::Beta { beta: b }).unwrap()).collect::<Vec<_>>());
    let sys = QuenchedSystem::with_cache(Arc::clone(&path), Arc::clone(&maps), 4096, &UlamCache::new()).unwrap();
    let field = DensityField::along(&sys, -100, 200, 0).unwrap();
    let v = Observable::with_maps(vec![Formula::poly(&[-0.5, 1.0])], maps).unwrap().centered(&sys, &field, -100, 200).unwrap();

    let positions = 0..48;
    let betas: Vec<u32> = (0..=200).map(|j| BETAS[sys.symbol_at(j)]).collect();
    let n = (positions.end - positions.start) as f64;
    let (mut sigma, mut e) = (0.0, 0.0);
    for j in positions.clone() {
        let (s, ej) = oracle(&betas, j as usize, 60);
        sigma += s / n;
        e += ej / n;
    }

    let est = correlation_estimates(&sys, &field, &v, positions.clone(), 60).unwrap();
    assert!((est.sigma.scalar().0 - sigma).abs() < 2e-3, "{} vs {sigma}", est.sigma.scalar().0);
    assert!((est.e.scalar().0 - e).abs() < 2e-3, "{} vs {e}", est.e.scalar().0);

    let mart = estimate_sigma_martingale(&sys, &field, &v, positions, 40).unwrap();
    assert!((mart.sigma.scalar().0 - sigma).abs() < 2e-3, "{} vs {sigma}", mart.sigma.scalar().0);
    let dec = &mart.decomposition;
    assert!(dec.max_residual() <= 1e-3);
    assert!(reconstruction_error(&sys, &v, &dec.chi, &dec.m).unwrap() <= 2.0 / 4096.0);
}
