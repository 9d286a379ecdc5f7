use rds_core::fiber_maps::MapFamily;
use rds_lab::{presets, ExperimentConfig, Lab, LabError};

fn small_clt() -> ExperimentConfig {
    let mut cfg = presets::load("doubling-clt").unwrap();
    cfg.numerics.n = 2000;
    cfg.numerics.n_paths = 1000;
    cfg.numerics.n_bins = 1024;
    cfg
}

#[test]
fn clt_smoke() {
    let out = Lab::new().evaluate(&small_clt()).unwrap();
    let s = &out.summary;
    assert_eq!(s.scenario, "clt");
    let ks = s.criterion("clt_ks[component_0]").expect("KS criterion evaluated");
    // 1000 paths: 1.63/√1000 + model allowance.
    assert!(ks.value < 0.062, "{ks:?}");
    assert!((s.criterion("sigma_correlation").unwrap().value - 0.5).abs() < 0.01);
    // Every criterion name appears once.
    let mut names: Vec<&str> = s.criteria.iter().map(|c| c.name.as_str()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), s.criteria.len());
}

#[test]
fn reruns_hit_the_cache_and_agree() {
    let lab = Lab::new();
    let cfg = small_clt();
    let a = lab.evaluate(&cfg).unwrap().summary;
    let misses = lab.cache().misses();
    let hits = lab.cache().hits();
    let b = lab.evaluate(&cfg).unwrap().summary;
    assert_eq!(lab.cache().misses(), misses);
    assert!(lab.cache().hits() > hits);
    assert_eq!(a.criteria, b.criteria);
}

#[test]
fn invalid_configs_are_refused() {
    let mut cfg = small_clt();
    cfg.numerics.epsilon = Some(1.5);
    match Lab::new().evaluate(&cfg) {
        Err(LabError::Invalid(v)) => assert_eq!(v, vec!["epsilon must be in (0,1)".to_string()]),
        other => panic!("{:?}", other.map(|o| o.summary)),
    }
}

#[test]
fn numeric_failures_propagate() {
    let mut cfg = presets::load("homogenization-doubling").unwrap();
    // Alternating a slowly mixing map with doubling leaves the uniform decay regime.
    cfg.base.symbols = vec!["slow".into(), "b2".into()];
    cfg.base.process = "markov".into();
    cfg.base.weights = None;
    cfg.base.transition = Some(vec![vec![0.1, 0.9], vec![0.9, 0.1]]);
    cfg.maps.insert("slow".into(), MapFamily::Mixed { d: 2, q: 1, eta: 1.01, curvature: 0.0 });
    cfg.numerics.n_bins = 256;
    cfg.numerics.truncation_k = Some(40);
    cfg.numerics.n_paths = 10;
    assert!(rds_lab::validate(&cfg).is_empty(), "{:?}", rds_lab::validate(&cfg));
    let err = Lab::new().evaluate(&cfg).err().expect("decay regime refusal");
    assert!(matches!(err, LabError::Core(rds_core::Error::DecayRegime(_))), "{err}");
    assert!(err.to_string().contains("might fail"));
}

#[test]
fn run_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = presets::load("conditions-iid").unwrap();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let s = Lab::new().run(&cfg).unwrap();
    assert!(s.pass);
    let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), s.criteria.len() + 1);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(&s.config_hash)));
    let back = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(back.hash(), cfg.hash());
}
