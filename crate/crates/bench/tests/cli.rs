use std::path::Path;
use std::process::Command as Proc;

use ofql_bench::commands::{
    cmd_ablate, cmd_bench_speed, cmd_eval, cmd_toy_study, cmd_train, run_parallel, seed_dir, CHECKPOINT_FILE,
    METRICS_FILE, TIMING_FILE, TOY_FILE,
};
use ofql_bench::config::TimingConfig;
use ofql_bench::manifest::Manifest;
use ofql_bench::{Axis, BenchError, Command, Family, RunConfig};
use ofql_core::policy::Sampler;

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_ofql-bench"))
}

fn tiny(command: Command, out: &Path) -> RunConfig {
    RunConfig {
        command,
        n_steps: 40,
        batch: 16,
        hidden: vec![8, 8],
        critic_hidden: vec![8, 8],
        embed_dim: 4,
        log_every: 10,
        eval_episodes: 4,
        out: out.to_path_buf(),
        dataset: ofql_bench::config::DatasetConfig {
            n_transitions: 400,
            ..Default::default()
        },
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("run.json");
    std::fs::write(&p, serde_json::to_string(cfg).unwrap()).unwrap();
    p
}

#[test]
fn dry_run_validates_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &tiny(Command::Train, &out));
    let st = bin()
        .args(["train", "--dry-run", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Command::Train, &dir.path().join("out"));
    c.env = "no_such_env".into();
    let cfg = write_config(dir.path(), &c);
    let st = bin().args(["train", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(st.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "not_a_field = 3\n").unwrap();
    let st = bin().args(["train", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(1));

    let st = bin().args(["eval", "--dry-run"]).status().unwrap();
    assert_eq!(st.code(), Some(1), "eval without a checkpoint");
}

#[test]
fn run_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = write_config(dir.path(), &tiny(Command::Train, &blocker.join("sub")));
    let st = bin().args(["train", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn mismatched_behavior_is_a_config_error() {
    let mut c = tiny(Command::Train, Path::new("unused"));
    c.dataset.behavior = Some("bandit_mixture".into());
    assert!(matches!(c.validate(), Err(BenchError::Config(_))));
    c.env = "bandit".into();
    c.validate().unwrap();
    c.eval_sampler = Sampler::DdimOneStep;
    assert!(matches!(c.validate(), Err(BenchError::Config(_))));
    c.family = Family::Dql;
    c.validate().unwrap();
    c.seeds.clear();
    assert!(matches!(c.validate(), Err(BenchError::Config(_))));
}

#[test]
fn toml_and_json_configs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(Command::Ablate, &dir.path().join("out"));
    let toml_path = dir.path().join("run.toml");
    std::fs::write(&toml_path, toml::to_string(&c).unwrap()).unwrap();
    let json_path = write_config(dir.path(), &c);
    assert_eq!(RunConfig::load(&toml_path).unwrap(), c);
    assert_eq!(RunConfig::load(&json_path).unwrap(), c);

    let partial = dir.path().join("partial.toml");
    std::fs::write(&partial, "eta = 0.3\nseeds = [4, 5]\n[toy]\nfit_steps = 10\n").unwrap();
    let p = RunConfig::load(&partial).unwrap();
    assert_eq!((p.eta, p.seeds.clone(), p.toy.fit_steps), (0.3, vec![4, 5], 10));
    assert_eq!(p.n_steps, RunConfig::default().n_steps);
}

#[test]
fn identical_config_and_seed_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(Command::Train, &dir.path().join("a"));
    let b = tiny(Command::Train, &dir.path().join("b"));
    cmd_train(&a).unwrap();
    cmd_train(&b).unwrap();
    let read = |c: &RunConfig| std::fs::read(seed_dir(&c.out, 0).join(METRICS_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(
        std::fs::read(seed_dir(&a.out, 0).join(CHECKPOINT_FILE)).unwrap(),
        std::fs::read(seed_dir(&b.out, 0).join(CHECKPOINT_FILE)).unwrap()
    );
    assert_eq!(Manifest::read(&a.out).unwrap().config_hash, a.hash());
}

#[test]
fn parallel_seeds_match_serial_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Command::Train, &dir.path().join("multi"));
    c.seeds = vec![3, 4];
    cmd_train(&c).unwrap();
    let mut single = tiny(Command::Train, &dir.path().join("single"));
    single.seeds = vec![4];
    cmd_train(&single).unwrap();
    let read = |out: &Path| std::fs::read(seed_dir(out, 4).join(METRICS_FILE)).unwrap();
    assert_eq!(read(&c.out), read(&single.out));

    let squares = run_parallel(&[1u64, 2, 3, 4, 5], 3, |x| x * x);
    assert_eq!(squares, vec![1, 4, 9, 16, 25]);
}

#[test]
fn default_run_length_writes_one_row_per_log_interval() {
    // default step count and log interval; small networks keep it quick
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig {
        hidden: vec![4],
        critic_hidden: vec![4],
        embed_dim: 2,
        batch: 2,
        out: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    assert_eq!((c.family, c.env.as_str()), (Family::Ofql, "point_mass"));
    cmd_train(&c).unwrap();
    let mut r = csv::Reader::from_path(seed_dir(&c.out, 0).join(METRICS_FILE)).unwrap();
    let steps: Vec<u64> = r
        .records()
        .map(|rec| rec.unwrap()[0].parse().unwrap())
        .collect();
    assert_eq!(steps.len(), c.n_steps / c.log_every);
    assert_eq!(*steps.last().unwrap(), c.n_steps as u64);
}

#[test]
fn fresh_ofql_policy_scores_like_random() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Command::Train, dir.path());
    c.n_steps = 0;
    c.eval_episodes = 1000;
    cmd_train(&c).unwrap();
    let ck = seed_dir(&c.out, 0).join(CHECKPOINT_FILE);
    c.command = Command::Eval;
    let s = cmd_eval(&c, &ck).unwrap();
    assert!(s.normalized_score.abs() < 10.0, "fresh policy scored {}", s.normalized_score);
    assert_eq!(s.episodes.len(), 1000);
    assert_eq!(s.nfe, 1);
    assert_eq!(s.config_hash, Manifest::read(&c.out).unwrap().config_hash);
}

#[test]
fn eval_reports_architecture_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Command::Train, dir.path());
    c.n_steps = 0;
    cmd_train(&c).unwrap();
    let ck = seed_dir(&c.out, 0).join(CHECKPOINT_FILE);
    c.command = Command::Eval;
    c.hidden = vec![8, 9];
    let msg = cmd_eval(&c, &ck).unwrap_err().to_string();
    assert!(msg.contains("[8, 8]") && msg.contains("[8, 9]"), "{msg}");
}

#[test]
fn sweeps_cover_their_grids() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Command::Ablate, dir.path());
    c.n_steps = 2;
    c.eval_episodes = 1;
    c.steps = 2;
    for (axis, want) in [
        (Axis::FlowRatio, vec!["1", "0.75", "0.5", "0.25", "0"]),
        (Axis::Eta, vec!["0.001", "0.01", "0.1", "0.3", "0.5"]),
        (Axis::Strategy, vec!["dql", "dql_ddim1", "fbrac", "ofql"]),
    ] {
        c.ablate.axis = axis;
        let rows = cmd_ablate(&c).unwrap();
        let mut got: Vec<&str> = rows.iter().map(|r| r.value.as_str()).collect();
        got.sort();
        let mut want = want.clone();
        want.sort();
        assert_eq!(got, want, "{axis:?}");
    }
    let strat = cmd_ablate(&c).unwrap();
    let nfe = |v: &str| strat.iter().find(|r| r.value == v).unwrap().nfe;
    assert_eq!((nfe("dql"), nfe("dql_ddim1"), nfe("fbrac"), nfe("ofql")), (2, 1, 1, 1));

    c.ablate.etas.clear();
    c.ablate.axis = Axis::Eta;
    assert!(matches!(cmd_ablate(&c), Err(BenchError::Config(_))));
}

#[test]
fn toy_study_evaluates_five_configurations_per_density() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Command::ToyStudy, dir.path());
    c.density = "all".into();
    c.toy.n_train = 64;
    c.toy.fit_steps = 3;
    c.toy.batch = 16;
    c.toy.hidden = vec![8];
    c.toy.eval_samples = 32;
    let rows = cmd_toy_study(&c).unwrap();
    for d in ["crescent", "spiral", "checkerboard"] {
        let mine: Vec<_> = rows.iter().filter(|r| r.density == d).collect();
        assert_eq!(mine.len(), 5);
        let labels: Vec<String> = mine.iter().map(|r| format!("{}{}", r.param, r.steps)).collect();
        assert_eq!(labels, ["v1", "v2", "v5", "v10", "u1"]);
        for r in mine {
            assert!(r.energy_distance >= 0.0);
            assert!(c.out.join("samples").join(&r.samples_file).exists());
        }
    }
    assert!(c.out.join(TOY_FILE).exists());
}

#[test]
fn timing_reports_nfe_per_family() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Command::BenchSpeed, dir.path());
    c.timing = TimingConfig {
        batch: 4,
        n_batches: 10,
        train_steps: 2,
        ..TimingConfig::default()
    };
    let rows = cmd_bench_speed(&c).unwrap();
    let nfe: Vec<(String, usize)> = rows.iter().map(|r| (r.label.clone(), r.nfe)).collect();
    assert_eq!(
        nfe,
        [
            ("ofql".to_string(), 1),
            ("dql_k5".to_string(), 5),
            ("dql_k10".to_string(), 10),
            ("dql_k20".to_string(), 20),
            ("dql_k50".to_string(), 50),
            ("fbrac_n5_infer1".to_string(), 1),
        ]
    );
    for r in &rows {
        assert_eq!(r.timed_batches, 9);
        assert!(r.decisions_hz > 0.0 && r.batch_iqr_s >= 0.0);
        assert!((r.per_action_us * 1e-6 * r.batch as f64 - r.batch_median_s).abs() < 1e-12);
    }
    assert_eq!(rows.last().unwrap().train_nfe, 5);
    assert!(c.out.join(TIMING_FILE).exists());
}
