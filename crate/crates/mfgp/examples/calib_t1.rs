// scratch calibration: Table-1-style relative error corridors
use mfgp::inference::{InferenceConfig, MfData, MfHyperParams, VecchiaConfig};
use mfgp::kernels::KernelParams;
use mfgp::meanmodel::GlsMode;
use mfgp::mfstruct::NoiseModel;
use mfgp::oracle::validate;
use mfgp::rho::RhoModel;
use mfgp::simulate::{generate, lengthscale_from_corr, SimConfig};
use mfgp::vecchia::{ConditioningKind, ConditioningRule, OrderingKind, OrderingStrategy};
use rayon::prelude::*;
use std::time::Instant;

fn main() {
    let reps = 20u64;
    let t0 = Instant::now();
    let ms = [10usize, 20, 30, 40, 60];
    let mut results: Vec<(ConditioningKind, usize, f64, f64, f64, f64, f64)> = Vec::new();
    for kind in [ConditioningKind::NearestNeighbor, ConditioningKind::Correlation] {
        for &m in &ms {
            let rows: Vec<_> = (0..reps)
                .into_par_iter()
                .map(|rep| {
                    let cfg = SimConfig {
                        n_train_stations: Some(12),
                        seed: 9000 + rep,
                        ..SimConfig::default()
                    };
                    let ds = generate(&cfg).unwrap();
                    let data = MfData::from_sim(&ds).unwrap();
                    let dt = 1.0 / (cfg.n_time as f64 - 1.0);
                    let ls = lengthscale_from_corr(0.72, 1.0).unwrap();
                    let lt = lengthscale_from_corr(0.8, dt).unwrap();
                    let params = MfHyperParams {
                        kernel_l: KernelParams::new(1.0, ls, lt).unwrap(),
                        kernel_d: KernelParams::new(4.0, ls, lt).unwrap(),
                        noise: NoiseModel::new(0.1, 0.1).unwrap(),
                        rho: RhoModel::Constant(0.6),
                    };
                    let icfg = InferenceConfig {
                        vecchia: VecchiaConfig {
                            ordering: OrderingStrategy::new(OrderingKind::SpaceMajor, rep),
                            conditioning: ConditioningRule::new(kind, m).unwrap(),
                            freeze_neighbors: false,
                        },
                        gls: GlsMode::none(),
                    };
                    let targets = ds.hf_test_points();
                    let observed = ds.hf_test_values();
                    validate(&data, &params, &icfg, Some((&targets, &observed)), 5000).unwrap()
                })
                .collect();
            let mean = |f: &dyn Fn(&mfgp::oracle::ValidationReport) -> f64| {
                rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
            };
            let row = (
                kind,
                m,
                mean(&|r| r.rel_kinv_y),
                mean(&|r| r.rel_logdet),
                mean(&|r| r.rel_quadform),
                mean(&|r| r.diff_rel),
                mean(&|r| r.rmse_heldout),
            );
            println!(
                "{:?} m={}  rel_kinv={:.4} rel_logdet={:.4} rel_quad={:.4} diff_rel={:.5} rmse={:.3}",
                row.0, row.1, row.2, row.3, row.4, row.5, row.6
            );
            results.push(row);
        }
    }
    println!("table1-style done in {:?}", t0.elapsed());

    // B.2-style orderings on the 720+720 layout, Corr conditioning
    let t0 = Instant::now();
    for ordering in [
        OrderingKind::Random,
        OrderingKind::SpaceMajor,
        OrderingKind::TimeMajorRandSpace,
        OrderingKind::TimeMajor,
    ] {
        for m in [10usize, 40] {
            let reps = 10u64;
            let rows: Vec<_> = (0..reps)
                .into_par_iter()
                .map(|rep| {
                    let cfg = SimConfig {
                        n_space: 12,
                        n_time: 5,
                        n_train_stations: Some(143),
                        seed: 20_000 + rep,
                        ..SimConfig::default()
                    };
                    let ds = generate(&cfg).unwrap();
                    let mut hf_points = ds.hf_train_points();
                    let mut hf_values = ds.hf_train_values();
                    for r in &ds.hf_test {
                        hf_points.push(r.point);
                        hf_values.push(r.y);
                    }
                    let data =
                        MfData::new(ds.lf_points.clone(), ds.y_l.clone(), hf_points, hf_values)
                            .unwrap();
                    let dt = 0.25;
                    let ls = lengthscale_from_corr(0.72, 1.0).unwrap();
                    let lt = lengthscale_from_corr(0.8, dt).unwrap();
                    let params = MfHyperParams {
                        kernel_l: KernelParams::new(1.0, ls, lt).unwrap(),
                        kernel_d: KernelParams::new(4.0, ls, lt).unwrap(),
                        noise: NoiseModel::new(0.1, 0.1).unwrap(),
                        rho: RhoModel::Constant(0.6),
                    };
                    let icfg = InferenceConfig {
                        vecchia: VecchiaConfig {
                            ordering: OrderingStrategy::new(ordering, rep),
                            conditioning: ConditioningRule::new(ConditioningKind::Correlation, m)
                                .unwrap(),
                            freeze_neighbors: false,
                        },
                        gls: GlsMode::none(),
                    };
                    validate(&data, &params, &icfg, None, 5000).unwrap()
                })
                .collect();
            let mean_diff_rel = rows.iter().map(|r| r.diff_rel).sum::<f64>() / rows.len() as f64;
            let mean_diff_abs = rows.iter().map(|r| r.diff_abs).sum::<f64>() / rows.len() as f64;
            let mean_nnz = rows.iter().map(|r| r.nnz_r as f64).sum::<f64>() / rows.len() as f64;
            println!(
                "{ordering:?} m={m}: diffAbs={mean_diff_abs:.2} diffRel={mean_diff_rel:.5} nnzR={mean_nnz:.0}"
            );
        }
    }
    println!("orderings done in {:?}", t0.elapsed());
}
