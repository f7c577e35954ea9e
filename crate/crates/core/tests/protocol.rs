use std::fs;

use declora::algorithms::{
    gossip_aggregate, init_clients, perturb_clients, run_dec_lora, LearningRate, TrainConfig,
};
use declora::harness::config::{PartitionConfig, SweepAxis, SweepConfig, TopologyConfig};
use declora::harness::runner::{build_mixing, build_task, count_bound_violations};
use declora::harness::verify::{zero_gradient_deviations, zero_gradient_task};
use declora::harness::{run_experiment, run_single, ExperimentConfig};
use declora::linalg::{mean, DenseMatrix};
use declora::rng::{stream, StreamRole};
use declora::topology::{build_erdos_renyi, mixing_from_laplacian};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};

fn golden_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.n = 4;
    cfg.train.rounds = 5;
    cfg.train.local_steps = 2;
    cfg.train.eta = LearningRate::Constant(0.1);
    cfg.train.seed = 7;
    cfg.data.samples = 200;
    cfg.partition = PartitionConfig::Iid;
    cfg
}

fn close(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-10 * want.abs().max(1e-12)
}

// Frozen from the first verified run.
#[test]
fn golden_trace() {
    let r = run_single(&golden_config(), 7).unwrap();
    let last = r.trajectory.final_metrics();
    let checksum: f64 = r.trajectory.traces[5]
        .bar_b
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, x)| (i + 1) as f64 * x)
        .sum();
    assert!(
        close(last.train_loss, 0.435_229_348_122_901),
        "{}",
        last.train_loss
    );
    assert!(close(last.dev_a, 2.156_435_222_672_778e-5), "{}", last.dev_a);
    assert!(close(last.dev_b, 8.233_621_466_664_482e-4), "{}", last.dev_b);
    assert!(close(checksum, -0.179_268_890_595_919_66), "{checksum}");
    assert_eq!(r.trajectory.selected_round, 2);
}

#[test]
fn trace_means_match_recomputation() {
    let r = run_single(&golden_config(), 7).unwrap();
    for tr in &r.trajectory.traces {
        let a: Vec<&DenseMatrix> = tr.factors.iter().map(|(a, _)| a).collect();
        let b: Vec<&DenseMatrix> = tr.factors.iter().map(|(_, b)| b).collect();
        assert!(mean(&a).unwrap().max_abs_diff(&tr.bar_a).unwrap() <= 1e-12);
        assert!(mean(&b).unwrap().max_abs_diff(&tr.bar_b).unwrap() <= 1e-12);
    }
    let first = &r.trajectory.traces[0];
    assert!(first.factors.iter().all(|f| f == &first.factors[0]));
    assert_eq!(first.factors[0].1.max_abs(), 0.0);
}

#[test]
fn experiment_outputs_are_byte_identical() {
    let mut cfg = golden_config();
    cfg.replicates = 2;
    cfg.topology = TopologyConfig::ErdosRenyi { p_c: 0.5 };
    cfg.sweep = Some(SweepConfig {
        axis: SweepAxis::EdgeProbability,
        values: vec![0.3, 0.9],
        fixed_budget: None,
    });
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&cfg, Some(&a)).unwrap();
    run_experiment(&cfg, Some(&b)).unwrap();
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "config_echo.json",
            "metrics_p_c-0.3_seed-7.csv",
            "metrics_p_c-0.3_seed-8.csv",
            "metrics_p_c-0.9_seed-7.csv",
            "metrics_p_c-0.9_seed-8.csv",
            "summary.json",
        ]
    );
    for n in &names {
        assert_eq!(
            fs::read(a.join(n)).unwrap(),
            fs::read(b.join(n)).unwrap(),
            "{n}"
        );
    }
}

#[test]
fn fixed_budget_sweep_over_local_steps() {
    let mut cfg = golden_config();
    cfg.sweep = Some(SweepConfig {
        axis: SweepAxis::LocalSteps,
        values: vec![1.0, 2.0, 4.0, 5.0],
        fixed_budget: Some(20),
    });
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&cfg, Some(dir.path())).unwrap();
    let kt: Vec<usize> = s.points.iter().map(|p| p.local_steps * p.rounds).collect();
    assert_eq!(kt, [20, 20, 20, 20]);
    let csv = fs::read_to_string(dir.path().join("metrics_K-5_seed-7.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 1);
}

#[test]
fn rate_sweep_reports_slope() {
    let mut cfg = golden_config();
    cfg.train.eta = LearningRate::AUTO;
    cfg.sweep = Some(SweepConfig {
        axis: SweepAxis::Rounds,
        values: vec![4.0, 8.0, 16.0, 32.0],
        fixed_budget: None,
    });
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&cfg, Some(dir.path())).unwrap();
    assert!(s.stationarity_slope.unwrap().is_finite());
    let echo = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    assert!(echo.contains("\"stationarity_slope\""));
}

#[test]
fn zero_gradient_contraction_on_random_graphs() {
    for seed in 0..5 {
        let g = build_erdos_renyi(12, 0.3, &mut stream(seed, StreamRole::Topology, &[])).unwrap();
        let q = mixing_from_laplacian(&g).unwrap();
        let b2 = q.beta().powi(2);
        let dev = zero_gradient_deviations(&q, 30, seed).unwrap();
        for t in 0..30 {
            assert!(dev[t + 1] <= (b2 + 1e-9) * dev[t], "seed {seed} round {t}");
            assert!(dev[t + 1] <= dev[0] * b2.powi(t as i32 + 1) * (1.0 + 1e-6));
        }
    }
}

#[test]
fn zero_gradient_runs_respect_the_deviation_bound() {
    let task = zero_gradient_task(6).unwrap();
    let q = build_mixing(&TopologyConfig::Ring, 6, 0).unwrap();
    let cfg = TrainConfig {
        n: 6,
        rounds: 20,
        ..TrainConfig::default()
    };
    let traj = run_dec_lora(&cfg, &task, &q).unwrap();
    assert_eq!(traj.local_stats.max_grad_norm, 0.0);
    let v = count_bound_violations(&traj, q.beta(), 6, cfg.local_steps, cfg.resolved_eta());
    assert_eq!((v.dev_a, v.dev_b), (0, 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gossip_preserves_client_means(seed in 0u64..10_000, n in 3usize..12, p_c in 0.3f64..1.0) {
        let mut cfg = golden_config();
        cfg.train.n = n;
        cfg.data.samples = 10 * n;
        let task = build_task(&cfg, seed).unwrap();
        let g = build_erdos_renyi(n, p_c, &mut stream(seed, StreamRole::Topology, &[])).unwrap();
        let q = mixing_from_laplacian(&g).unwrap();
        let mut train = cfg.train.clone();
        train.seed = seed;
        let states = perturb_clients(
            &init_clients(&train, &task).unwrap(),
            1.0,
            &mut stream(seed, StreamRole::Perturb, &[]),
        )
        .unwrap();
        let mixed = gossip_aggregate(&states, &q, true).unwrap();
        for pick in [0, 1] {
            let get = |s: &declora::algorithms::ClientState| {
                if pick == 0 { s.layer.a().clone() } else { s.layer.b().clone() }
            };
            let before: Vec<DenseMatrix> = states.iter().map(get).collect();
            let after: Vec<DenseMatrix> = mixed.iter().map(get).collect();
            let mb = mean(&before.iter().collect::<Vec<_>>()).unwrap();
            let ma = mean(&after.iter().collect::<Vec<_>>()).unwrap();
            prop_assert!(mb.max_abs_diff(&ma).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn identical_configs_give_identical_traces(seed in 0u64..1000) {
        let cfg = golden_config();
        let a = run_single(&cfg, seed).unwrap();
        let b = run_single(&cfg, seed).unwrap();
        prop_assert!(a.trajectory.traces == b.trajectory.traces);
        prop_assert!(a.trajectory.selected_round == b.trajectory.selected_round);
    }
}
