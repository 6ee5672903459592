use ttsnap::harness::{cmd_gen_pool, cmd_train_narf, ExperimentConfig, Layout, Role};
use ttsnap::par::Exec;
use ttsnap::verifiers::NoiseAwareVerifier;

#[test]
fn default_training_run_scales_with_data_and_stamps_outputs() {
    let mut cfg = ExperimentConfig::default();
    cfg.narf.compare = false;
    cfg.narf.data_scaling = true;
    let dir = tempfile::tempdir().unwrap();
    cmd_gen_pool(Exec::default(), &cfg, dir.path(), &[Role::Train, Role::Eval]).unwrap();
    let report = cmd_train_narf(Exec::default(), &cfg, dir.path()).unwrap();

    let sizes: Vec<usize> = report.data_scaling.iter().map(|p| p.0).collect();
    assert_eq!(sizes, cfg.pools.train_sizes);
    for w in report.data_scaling.windows(2) {
        assert!(w[1].1 >= w[0].1, "mean Kendall fell from {:?} to {:?}", w[0], w[1]);
    }

    let layout = Layout::new(dir.path());
    let main = NoiseAwareVerifier::load(&layout.checkpoint("reward0")).unwrap();
    let steps: Vec<usize> = main.checkpoints().keys().copied().collect();
    assert_eq!(steps, (0..=cfg.narf.start_step).collect::<Vec<_>>());

    let (hash, seed) = (cfg.hash(), cfg.master_seed.to_string());
    for f in ["kendall.csv", "data_scaling.csv"] {
        let mut rows = csv::Reader::from_path(layout.narf(f)).unwrap();
        let header = rows.headers().unwrap().clone();
        assert_eq!((&header[0], &header[1]), ("config_hash", "seed"));
        for row in rows.records() {
            let row = row.unwrap();
            assert_eq!((&row[0], &row[1]), (hash.as_str(), seed.as_str()));
        }
    }
}
