mod common;

use common::{kernel, KERNELS};
use mpmdse::cdfg::build_cdfg;
use mpmdse::pareto::{dominates, reference_front, ObjectiveMode, DEFAULT_EXHAUSTIVE_LIMIT};

#[test]
fn shipped_kernels_load_and_validate() {
    let sizes: Vec<u128> = KERNELS.iter().map(|k| kernel(k).space.size()).collect();
    assert_eq!(sizes, [216, 1080, 216]);
    for k in KERNELS {
        let spec = kernel(k);
        assert_eq!(spec.kernel_id(), k);
        let g = build_cdfg(&spec.description).unwrap();
        g.graph.validate().unwrap();
        assert!(g.graph.is_weakly_connected(), "{k}");
        for d in &spec.space.directives {
            assert!(g.targets.contains_key(&d.target), "{k}: {}", d.name);
        }
    }
}

#[test]
fn reference_fronts_are_non_dominated() {
    for k in KERNELS {
        let oracle = kernel(k).oracle().unwrap();
        for mode in [ObjectiveMode::LatencyMaxUtil, ObjectiveMode::Full] {
            let front = reference_front(&oracle, mode, DEFAULT_EXHAUSTIVE_LIMIT).unwrap();
            let pts = front.objectives();
            assert!(pts.len() > 1, "{k}");
            for a in &pts {
                assert!(pts.iter().all(|b| !dominates(b, a).unwrap()), "{k}");
            }
        }
    }
}

#[test]
fn every_gemm_configuration_fits() {
    let spec = kernel("gemm");
    let oracle = spec.oracle().unwrap();
    let infeasible = spec
        .space
        .enumerate(spec.space.size())
        .filter(|c| !oracle.evaluate(c).unwrap().feasible)
        .count();
    assert_eq!(infeasible, 0);
}
