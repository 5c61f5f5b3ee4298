// scratch calibration: sparsity of H for candidate 720-point layouts
use mfgp::inference::{MfData, MfHyperParams, NlmlEngine, InferenceConfig, VecchiaConfig};
use mfgp::kernels::KernelParams;
use mfgp::meanmodel::GlsMode;
use mfgp::mfstruct::NoiseModel;
use mfgp::rho::RhoModel;
use mfgp::simulate::{generate, lengthscale_from_corr, SimConfig};
use mfgp::vecchia::{ConditioningKind, ConditioningRule, OrderingKind, OrderingStrategy};
use std::time::Instant;

fn main() {
    for (side, nt) in [(2usize, 180usize), (3, 80), (4, 45), (6, 20), (12, 5)] {
        let cfg = SimConfig {
            n_space: side,
            n_time: nt,
            n_train_stations: Some(side * side - 1),
            seed: 1,
            ..SimConfig::default()
        };
        // HF everywhere: override the split by using all stations as train
        let ds = generate(&cfg).unwrap();
        let mut hf_points = ds.hf_train_points();
        let mut hf_values = ds.hf_train_values();
        for r in &ds.hf_test {
            hf_points.push(r.point);
            hf_values.push(r.y);
        }
        let data = MfData::new(ds.lf_points.clone(), ds.y_l.clone(), hf_points, hf_values).unwrap();
        assert_eq!(data.lf_points.len(), 720);
        assert_eq!(data.hf_points.len(), 720);

        let dt = 1.0 / (nt as f64 - 1.0);
        let ls = lengthscale_from_corr(0.72, 1.0).unwrap();
        let lt = lengthscale_from_corr(0.8, dt).unwrap();
        let params = MfHyperParams {
            kernel_l: KernelParams::new(1.0, ls, lt).unwrap(),
            kernel_d: KernelParams::new(4.0, ls, lt).unwrap(),
            noise: NoiseModel::new(0.1, 0.1).unwrap(),
            rho: RhoModel::Constant(0.6),
        };
        for ordering in [OrderingKind::SpaceMajor, OrderingKind::TimeMajor, OrderingKind::Random] {
            let icfg = InferenceConfig {
                vecchia: VecchiaConfig {
                    ordering: OrderingStrategy::new(ordering, 7),
                    conditioning: ConditioningRule::new(ConditioningKind::Correlation, 15).unwrap(),
                    freeze_neighbors: false,
                },
                gls: GlsMode::none(),
            };
            let t0 = Instant::now();
            let engine = NlmlEngine::new(&data, &icfg, Some(&params)).unwrap();
            let sys = engine.build_system(&params).unwrap();
            let rep = sys.sparsity_report();
            println!(
                "{side}x{side} x{nt}  {ordering:?}: nnz_h={} density={:.4} nnz_chol={}  ({} ms)",
                rep.nnz_h,
                rep.density_h,
                rep.nnz_chol_h,
                t0.elapsed().as_millis()
            );
        }
        println!();
    }
}
