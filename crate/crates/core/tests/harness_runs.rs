use std::fs;

use saint::cone::ConeConfig;
use saint::harness::run::load_run;
use saint::harness::{
    aggregate, read_metrics, run_experiment, time_to_baseline, write_metrics, ExperimentSpec,
    MetricsRow, PolicyClass, SeedRun, TimeToBaseline,
};

fn smoke(dir: &std::path::Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::minimal(ConeConfig::new(2, 4, 0.25, 1), PolicyClass::Saint);
    spec.train.max_episodes = Some(15);
    spec.seeds = vec![0, 1, 2, 3, 4];
    spec.out_dir = dir.to_owned();
    spec
}

#[test]
fn aggregate_of_seeded_runs_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&smoke(&dir.path().join("a/smoke")), &mut |_| {}).unwrap();
    let b = run_experiment(&smoke(&dir.path().join("b/smoke")), &mut |_| {}).unwrap();
    let sa = fs::read(a.dir.join("summary.csv")).unwrap();
    let sb = fs::read(b.dir.join("summary.csv")).unwrap();
    assert_eq!(sa, sb);
    // Metrics match apart from the wall-clock column.
    for seed in 0..5 {
        let strip = |p: &std::path::Path| -> Vec<String> {
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_owned())
                .collect()
        };
        let name = format!("metrics_seed{seed}.csv");
        assert_eq!(strip(&a.dir.join(&name)), strip(&b.dir.join(&name)));
    }
    let (_, runs) = load_run(&a.dir).unwrap();
    assert_eq!(aggregate(&runs).unwrap(), a.summary);
}

#[test]
fn distinct_configurations_do_not_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let mut s1 = smoke(&dir.path().join("x"));
    s1.seeds = vec![0];
    let mut s2 = s1.clone();
    s2.out_dir = dir.path().join("y");
    s2.train.lr = 5e-4;
    let mut runs = run_experiment(&s1, &mut |_| {}).unwrap().runs;
    runs.extend(run_experiment(&s2, &mut |_| {}).unwrap().runs);
    assert!(matches!(aggregate(&runs), Err(saint::Error::Refused(_))));
}

fn curve(seed: u64, returns: &[f64], dt: f64) -> Vec<MetricsRow> {
    returns
        .iter()
        .enumerate()
        .map(|(i, &r)| MetricsRow {
            seed,
            episode: i,
            env_steps: 10 * (i + 1),
            episode_return: r,
            wall_clock_s: dt * (i + 1) as f64,
        })
        .collect()
}

#[test]
fn time_to_baseline_from_metrics_files() {
    let dir = tempfile::tempdir().unwrap();
    let load = |name: &str, seed: u64, rows: Vec<MetricsRow>| {
        let path = dir.path().join(name);
        write_metrics(&path, &rows).unwrap();
        SeedRun {
            identity: name[..4].to_owned(),
            env_identity: "D=2".into(),
            seed,
            rows: read_metrics(&path).unwrap(),
        }
    };
    // Baseline final windows: 2.0 and 4.0, level 3.0.
    let base = vec![
        load("base0.csv", 0, curve(0, &[2.0; 20], 1.0)),
        load("base1.csv", 1, curve(1, &[4.0; 20], 1.0)),
    ];
    // Candidate 0 climbs by one per episode. The first full trailing window
    // ends at episode 9 with mean 4.5, at wall-clock 10 * 0.25.
    let ramp: Vec<f64> = (0..30).map(f64::from).collect();
    // Candidate 1 sits at 3.0 from episode 15 on, after 2.0 before:
    // the trailing mean reaches 3.0 at episode 24, wall-clock 25 * 0.5.
    let mut step = vec![2.0; 15];
    step.extend([3.0; 15]);
    let cand = vec![
        load("cand0.csv", 0, curve(0, &ramp, 0.25)),
        load("cand1.csv", 1, curve(1, &step, 0.5)),
    ];
    let t = time_to_baseline(&cand, &base).unwrap();
    assert_eq!(t, TimeToBaseline::Reached((2.5 + 12.5) / 2.0));
    let slow = vec![load("slow0.csv", 0, curve(0, &[2.9; 30], 1.0))];
    assert_eq!(
        time_to_baseline(&slow, &base).unwrap(),
        TimeToBaseline::Unreachable
    );
}
