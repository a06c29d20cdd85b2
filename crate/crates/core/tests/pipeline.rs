use rcgps_core::outcome::{bootstrap_ate, BootstrapConfig, BootstrapMode};
use rcgps_core::pipeline::GridInput;
use rcgps_core::{
    generate_scenario, run_pipeline, CutoffSpec, Error, ExposureSource, GridRegionMap, Link, Method,
    OutcomeSpec, PipelineConfig, PipelineInputs, Role, RoleMap, Scale, ScenarioConfig, TabularDataset,
};

fn small_scenario(seed: u64) -> (TabularDataset, TabularDataset, ScenarioConfig) {
    let cfg = ScenarioConfig {
        n_main: 600,
        n_validation: 150,
        ..Default::default()
    };
    let (main, validation) = generate_scenario(&cfg, seed).unwrap();
    (main, validation, cfg)
}

#[test]
fn every_arm_and_method_produces_all_contrasts() {
    let (main, validation, scen) = small_scenario(3);
    for exposure in [
        ExposureSource::ErrorFree,
        ExposureSource::ErrorProne,
        ExposureSource::RcNoCovariates,
        ExposureSource::RcWithCovariates,
    ] {
        for method in Method::ALL {
            let cfg = PipelineConfig::new(scen.cutoffs.clone(), exposure, method);
            let out = run_pipeline(&cfg, PipelineInputs::new(&main, Some(&validation))).unwrap();
            assert_eq!(out.ate.rows.len(), 3 * 2, "{exposure:?} {method}");
            assert_eq!(out.rc.is_some(), matches!(exposure, ExposureSource::RcNoCovariates | ExposureSource::RcWithCovariates));
            for x in 1..=3 {
                let d = out.ate.get(x, x % 3 + 1, Scale::Difference).unwrap().estimate;
                let r = out.ate.get(x % 3 + 1, x, Scale::Difference).unwrap().estimate;
                assert!((d + r).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn calibration_needs_validation_study() {
    let (main, _, scen) = small_scenario(4);
    let cfg = PipelineConfig::new(scen.cutoffs.clone(), ExposureSource::RcWithCovariates, Method::Iptw);
    let err = run_pipeline(&cfg, PipelineInputs::new(&main, None)).unwrap_err();
    assert!(matches!(err, Error::Schema(_)), "{err}");
}

#[test]
fn missing_outcome_role_is_a_schema_error() {
    let (main, validation, scen) = small_scenario(5);
    let mut roles = RoleMap::new();
    for (c, r) in main.roles().assignments() {
        if *r != Role::Outcome {
            roles.assign(c.clone(), *r);
        }
    }
    let cols: Vec<Vec<f64>> = main.names().iter().map(|n| main.column(n).unwrap().to_vec()).collect();
    let stripped = TabularDataset::new(main.names().to_vec(), cols).unwrap().with_roles(roles).unwrap();
    let cfg = PipelineConfig::new(scen.cutoffs.clone(), ExposureSource::ErrorFree, Method::Iptw);
    let err = run_pipeline(&cfg, PipelineInputs::new(&stripped, Some(&validation))).unwrap_err();
    assert!(err.to_string().contains("outcome"), "{err}");
}

fn boot(method: Method, seed: u64) -> BootstrapConfig {
    BootstrapConfig {
        replicates: 20,
        ..BootstrapConfig::for_method(method, 20, seed)
    }
}

#[test]
fn bootstrap_is_deterministic_across_thread_counts() {
    let (main, validation, scen) = small_scenario(6);
    for method in Method::ALL {
        let cfg = PipelineConfig::new(scen.cutoffs.clone(), ExposureSource::RcWithCovariates, method);
        let inputs = || PipelineInputs::new(&main, Some(&validation));
        let point = run_pipeline(&cfg, inputs()).unwrap().ate;
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| bootstrap_ate(&cfg, inputs(), &point, &boot(method, 77)).unwrap());
        let b = four.install(|| bootstrap_ate(&cfg, inputs(), &point, &boot(method, 77)).unwrap());
        assert_eq!(a.table, b.table);
        assert_eq!(a.replicates, b.replicates);
        for row in &a.table.rows {
            let se = row.se.unwrap();
            assert!(se > 0.0 && se.is_finite());
            assert!((row.ci_lower.unwrap() - (row.estimate - 1.96 * se)).abs() < 1e-12);
        }
        let c = bootstrap_ate(&cfg, inputs(), &point, &boot(method, 78)).unwrap();
        assert_ne!(a.replicates, c.replicates);
    }
}

#[test]
fn constant_outcome_has_zero_bootstrap_se() {
    let (main, validation, scen) = small_scenario(7);
    let names = main.names().to_vec();
    let cols: Vec<Vec<f64>> = names
        .iter()
        .map(|n| {
            let v = main.column(n).unwrap();
            if n == "y" { vec![5.0; v.len()] } else { v.to_vec() }
        })
        .collect();
    let flat = TabularDataset::new(names, cols).unwrap().with_roles(main.roles().clone()).unwrap();
    for method in Method::ALL {
        let cfg = PipelineConfig::new(scen.cutoffs.clone(), ExposureSource::RcWithCovariates, method);
        let inputs = || PipelineInputs::new(&flat, Some(&validation));
        let point = run_pipeline(&cfg, inputs()).unwrap().ate;
        // Horvitz-Thompson means of a constant still vary with the weights;
        // subclass and matching means are convex combinations of y.
        if method == Method::Iptw {
            continue;
        }
        let res = bootstrap_ate(&cfg, inputs(), &point, &boot(method, 9)).unwrap();
        for row in &res.table.rows {
            assert!(row.estimate.abs() < 1e-10);
            assert!(row.se.unwrap() < 1e-10, "{method}: {:?}", row.se);
        }
    }
}

#[test]
fn matching_rejects_standard_bootstrap() {
    let (main, validation, scen) = small_scenario(8);
    let cfg = PipelineConfig::new(scen.cutoffs.clone(), ExposureSource::ErrorProne, Method::Matching);
    let point = run_pipeline(&cfg, PipelineInputs::new(&main, Some(&validation))).unwrap().ate;
    let b = BootstrapConfig {
        mode: BootstrapMode::Standard,
        ..boot(Method::Matching, 1)
    };
    let err = bootstrap_ate(&cfg, PipelineInputs::new(&main, Some(&validation)), &point, &b).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn grid_exposure_is_area_weighted_per_region() {
    // Four grid cells, three regions; region exposures 1.5, 10 and 19.
    let grid = TabularDataset::new(
        vec!["cell".into(), "pm".into()],
        vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 3.0, 10.0, 19.0]],
    )
    .unwrap()
    .with_roles(RoleMap::new().with("cell", Role::RegionId).with("pm", Role::TrueExposure))
    .unwrap();
    let map = GridRegionMap::from_columns(
        &[1.0, 1.0, 2.0, 3.0],
        &[1.0, 2.0, 3.0, 4.0],
        &[1.0, 1.0, 2.0, 0.5],
    )
    .unwrap();
    let n = 60;
    let region: Vec<f64> = (0..n).map(|i| (1 + i % 3) as f64).collect();
    let c: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
    let y: Vec<f64> = (0..n).map(|i| region[i] * 2.0 + c[i]).collect();
    let main = TabularDataset::new(vec!["y".into(), "c".into(), "region".into()], vec![y, c, region])
        .unwrap()
        .with_roles(
            RoleMap::new()
                .with("y", Role::Outcome)
                .with("c", Role::Confounder)
                .with("region", Role::RegionId),
        )
        .unwrap();
    let cfg = PipelineConfig::new(CutoffSpec::new(vec![5.0, 15.0]).unwrap(), ExposureSource::ErrorFree, Method::Iptw);
    let inputs = PipelineInputs {
        grid: Some(GridInput { grid: &grid, map: &map }),
        ..PipelineInputs::new(&main, None)
    };
    let out = run_pipeline(&cfg, inputs).unwrap();
    for i in 0..n {
        let expect = [1.5, 10.0, 19.0][i % 3];
        assert!((out.exposure[i] - expect).abs() < 1e-12);
        assert_eq!(out.xc_all[i], 1 + i % 3);
    }
}

#[test]
fn log_link_outcome_model_with_offset() {
    let n = 300;
    let c: Vec<f64> = (0..n).map(|i| ((i * 13) % 17) as f64 / 17.0 - 0.5).collect();
    let x: Vec<f64> = (0..n).map(|i| [2.0, 8.0][(i + (i * 5) % 3) % 2]).collect();
    let t: Vec<f64> = (0..n).map(|i| 100.0 + (i % 9) as f64 * 10.0).collect();
    // Counts proportional to person-time with rate ratio 1.5 between categories.
    let y: Vec<f64> = (0..n)
        .map(|i| (t[i] * if x[i] > 5.0 { 0.15 } else { 0.1 } * (1.0 + 0.2 * c[i])).round())
        .collect();
    let main = TabularDataset::new(
        vec!["deaths".into(), "pm".into(), "c".into(), "pt".into()],
        vec![y, x, c, t],
    )
    .unwrap()
    .with_roles(
        RoleMap::new()
            .with("deaths", Role::Outcome)
            .with("pm", Role::TrueExposure)
            .with("c", Role::Confounder)
            .with("pt", Role::Offset),
    )
    .unwrap();
    let mut cfg = PipelineConfig::new(CutoffSpec::new(vec![5.0]).unwrap(), ExposureSource::ErrorFree, Method::Iptw);
    cfg.outcome_model = Some(OutcomeSpec {
        link: Link::Log,
        include_confounders: true,
        offset: Some("pt".into()),
        stratum: None,
    });
    let out = run_pipeline(&cfg, PipelineInputs::new(&main, None)).unwrap();
    let irr = out.ate.get(2, 1, Scale::Ratio).unwrap();
    assert!((irr.estimate - 1.5).abs() < 0.02, "{}", irr.estimate);
    // Standard errors for contrasts come from the bootstrap, not the model.
    assert!(irr.se.is_none());
    let model = out.outcome.unwrap();
    assert!(model.iterations < 100);
    assert!(model.standard_errors.iter().all(|s| *s > 0.0));
}
