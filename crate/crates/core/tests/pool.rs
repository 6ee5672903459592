mod common;

use common::{instance, random_mixture, rng};
use ttsnap::dynamics::NoiseSchedule;
use ttsnap::harness::ExperimentConfig;
use ttsnap::metrics::summarize;
use ttsnap::par::Exec;
use ttsnap::pool::{
    generate_pool, generate_pool_from_inits, generate_pool_with, load_pool, record_bytes,
    reward_table, save_pool, DiversityConfig, FrozenReward, POOL_FORMAT_VERSION,
};
use ttsnap::verifiers::{reward_clean, RewardSpec};
use ttsnap::{seeds, Error};

fn schedule() -> NoiseSchedule {
    NoiseSchedule::geometric(20, 80.0, 0.002).unwrap()
}

#[test]
fn persistence_is_bit_exact() {
    let inst = instance(random_mixture(&mut rng(41), 8, 2), RewardSpec::composite(0, 0.1, 2.0, 2.0));
    let pool = generate_pool(&inst, &schedule(), 200, 5, DiversityConfig::enabled()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/p.pool");
    save_pool(&pool, &path).unwrap();
    let back = load_pool(&path, &schedule()).unwrap();
    assert_eq!(back, pool);
    for (a, b) in back.trajectories.iter().zip(&pool.trajectories) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.latents_flat()), bits(b.latents_flat()));
        assert_eq!(bits(a.estimates_flat()), bits(b.estimates_flat()));
    }

    let bytes = std::fs::read(&path).unwrap();
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
    let count = header["count"].as_u64().unwrap() as usize;
    assert_eq!(count, 200);
    assert_eq!(bytes.len(), 16 + header_len + count * record_bytes(20, 2));
    assert_eq!(record_bytes(20, 2), 8 + 8 * 2 * 41);
}

#[test]
fn corrupted_files_are_rejected_with_distinct_errors() {
    let inst = instance(random_mixture(&mut rng(42), 3, 2), RewardSpec::mode_preference(0));
    let pool = generate_pool(&inst, &schedule(), 10, 0, DiversityConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.pool");
    save_pool(&pool, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let other = NoiseSchedule::geometric(20, 80.0, 0.001).unwrap();
    assert!(matches!(load_pool(&path, &other), Err(Error::ScheduleHashMismatch { .. })));

    let cut = dir.path().join("cut.pool");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_pool(&cut, &schedule()), Err(Error::Truncated { .. })));

    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&(POOL_FORMAT_VERSION + 1).to_le_bytes());
    let vpath = dir.path().join("v.pool");
    std::fs::write(&vpath, &versioned).unwrap();
    assert!(matches!(load_pool(&vpath, &schedule()), Err(Error::VersionMismatch { .. })));

    let mut garbage = bytes.clone();
    garbage[0] ^= 0xff;
    let gpath = dir.path().join("g.pool");
    std::fs::write(&gpath, &garbage).unwrap();
    assert!(matches!(load_pool(&gpath, &schedule()), Err(Error::BadMagic { .. })));

    assert!(matches!(load_pool(&dir.path().join("none.pool"), &schedule()), Err(Error::MissingFile(_))));
}

#[test]
fn generation_is_a_pure_function_of_its_inputs() {
    let inst = instance(random_mixture(&mut rng(43), 8, 2), RewardSpec::composite(1, 0.1, 2.0, 2.0));
    let sched = schedule().with_churn(0.3).unwrap();
    let a = generate_pool_with(Exec::Sequential, &inst, &sched, 40, 9, DiversityConfig::enabled()).unwrap();
    let b = generate_pool_with(Exec::Parallel, &inst, &sched, 40, 9, DiversityConfig::enabled()).unwrap();
    assert_eq!(a, b);
    let seeds: std::collections::BTreeSet<u64> = a.trajectories.iter().map(|t| t.seed).collect();
    assert_eq!(seeds.len(), 40);
}

#[test]
fn repulsion_separates_coincident_starts() {
    // Identical starts only separate when the sampler injects noise; the
    // comparison is over many pairs so a single unlucky draw cannot decide it.
    let inst = instance(random_mixture(&mut rng(44), 8, 2), RewardSpec::mode_preference(0));
    let sched = schedule().with_churn(0.5).unwrap();
    let x0 = vec![20.0, -35.0];
    let distance = |div: DiversityConfig, seed: u64| {
        let p = generate_pool_from_inits(Exec::Sequential, &inst, &sched, vec![x0.clone(), x0.clone()], seed, div)
            .unwrap();
        let (a, b) = (p.trajectories[0].final_sample(), p.trajectories[1].final_sample());
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let mut with = 0.0;
    let mut without = 0.0;
    for seed in 0..100 {
        with += distance(DiversityConfig::enabled(), 2 * seed);
        without += distance(DiversityConfig::default(), 2 * seed);
    }
    assert!(with > without, "mean distance with repulsion {with} vs without {without}");
}

#[test]
fn diversity_widens_the_reward_spread_on_the_default_instance() {
    let cfg = ExperimentConfig::default();
    let inst = &cfg.eval_instances().unwrap()[0];
    let sched = cfg.schedule.build().unwrap();
    let std_of = |div: DiversityConfig, base: u64| {
        let pool = generate_pool(inst, &sched, 200, base, div).unwrap();
        let r: Vec<f64> = pool
            .trajectories
            .iter()
            .map(|t| reward_clean(&inst.reward_spec, &inst.mixture, t.final_sample()).unwrap())
            .collect();
        summarize(&r).std
    };
    // The pool the harness actually generates for this instance.
    let base = cfg.pool_seed(seeds::ROLE_EVAL, 0);
    let (with, without) = (std_of(DiversityConfig::enabled(), base), std_of(DiversityConfig::default(), base));
    assert!(with >= without, "reward std {with} with diversity vs {without} without");
    // A single 200-sample std is noisy; the effect also holds on average.
    let bases: Vec<u64> = (0..20).map(|i| i * 1000).collect();
    let mean = |div: DiversityConfig| bases.iter().map(|&b| std_of(div, b)).sum::<f64>() / 20.0;
    let (with, without) = (mean(DiversityConfig::enabled()), mean(DiversityConfig::default()));
    assert!(with >= without, "mean reward std {with} with diversity vs {without} without");
}

#[test]
fn reward_table_replays_and_matches_clean_rewards() {
    let inst = instance(random_mixture(&mut rng(45), 8, 2), RewardSpec::composite(0, 0.1, 2.0, 2.0));
    let pool = generate_pool(&inst, &schedule(), 30, 3, DiversityConfig::default()).unwrap();
    let frozen = FrozenReward { spec: &inst.reward_spec, mixture: &inst.mixture };
    let steps = [0, 5, 12];
    let t1 = reward_table(&pool, &frozen, &inst.reward_spec, &inst.mixture, &steps).unwrap();
    let t2 = reward_table(&pool, &frozen, &inst.reward_spec, &inst.mixture, &steps).unwrap();
    assert_eq!(t1, t2);
    assert_eq!((t1.rows, t1.cols()), (30, 4));
    for (i, t) in pool.trajectories.iter().enumerate() {
        assert_eq!(t1.final_reward(i), reward_clean(&inst.reward_spec, &inst.mixture, t.final_sample()).unwrap());
        for &s in &steps {
            let want = reward_clean(&inst.reward_spec, &inst.mixture, t.estimate(s)).unwrap();
            assert_eq!(t1.at_step(i, s).unwrap(), want);
        }
    }
    assert!(matches!(t1.at_step(0, 7), Err(Error::MissingCheckpoint(7))));
}
