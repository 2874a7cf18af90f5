use std::fs;
use std::path::Path;
use std::process::Command;

use ewip_bench::compare::{self, check_compatible, differences, Run};
use ewip_bench::config::{ControllerKind, ExperimentConfig};
use ewip_bench::controller::{Controller, Policy};
use ewip_bench::evaluate::{evaluate, write_run, EvaluationReport};
use ewip_bench::metrics::{self, COLUMNS};
use ewip_bench::sweep::{self, Axis, Var};
use ewip_bench::trace::{self, TraceRow, HEADER};
use ewip_bench::training::run_training;
use ewip_bench::BenchError;
use ewip_core::dynamics::ControlInput;
use ewip_core::environment::{Environment, Observation, ReferenceTrajectory};
use ewip_core::mpc::MpcController;

fn small_ddpg(kind: ControllerKind, episodes: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_kind(kind);
    c.seed = 11;
    c.ddpg.hidden = vec![16, 16];
    c.ddpg.warmup = 64;
    c.ddpg.batch_size = 32;
    c.training.episodes = episodes;
    c.training.eval_every = 2;
    c.env.episode_length = 2.0;
    c
}

fn mpc() -> (ExperimentConfig, Controller) {
    let c = ExperimentConfig::for_kind(ControllerKind::Mpc);
    let ctl = Controller::load(&c, None).unwrap();
    (c, ctl)
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

#[test]
fn smoke_training_logs_one_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_ddpg(ControllerKind::DdpgEh, 5);
    let mut evals = 0;
    let summary = run_training(&cfg, dir.path(), &mut |_| evals += 1).unwrap();
    assert_eq!(csv_rows(&dir.path().join("train_log.csv")), 5);
    // every 2 episodes plus the final one
    assert_eq!(evals, 3);
    assert_eq!(csv_rows(&dir.path().join("eval_log.csv")), 3);
    assert_eq!(summary.iterations, 5);
    assert!(summary.mean_max_reward.is_some());
    for f in ["best.json", "final.json", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let mut eval_cfg = cfg.clone();
    eval_cfg.env.episode_length = 10.0;
    let agent = Controller::load(&eval_cfg, Some(&dir.path().join("final.json"))).unwrap();
    assert_eq!(agent.obs_dim(), Some(22));
}

#[test]
fn ppo_smoke_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::for_kind(ControllerKind::Ppo);
    cfg.ppo.hidden = vec![8];
    cfg.ppo.horizon = 100;
    cfg.ppo.minibatch = 50;
    cfg.ppo.epochs = 2;
    cfg.env.episode_length = 0.5;
    cfg.training.updates = 3;
    cfg.training.eval_every = 1;
    let summary = run_training(&cfg, dir.path(), &mut |_| {}).unwrap();
    assert_eq!(csv_rows(&dir.path().join("train_log.csv")), 3);
    assert_eq!(summary.evaluations, 3);
    assert!(summary.episodes >= 3);
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_ddpg(ControllerKind::Ddpg, 4);
    run_training(&cfg, a.path(), &mut |_| {}).unwrap();
    run_training(&cfg, b.path(), &mut |_| {}).unwrap();
    for f in ["train_log.csv", "eval_log.csv", "final.json", "best.json", "summary.json"] {
        let (x, y) = (fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs");
    }

    let mut eval_cfg = cfg.clone();
    eval_cfg.evaluation.theta_noise = 0.05;
    let mut traces = Vec::new();
    for d in [&a, &b] {
        let mut ctl = Controller::load(&eval_cfg, Some(&d.path().join("final.json"))).unwrap();
        let ev = evaluate(&eval_cfg, &mut ctl, 3).unwrap();
        let mut bytes = Vec::new();
        trace::write(&ev.trace, &mut bytes).unwrap();
        traces.push(bytes);
    }
    assert_eq!(traces[0], traces[1]);

    let mut other = cfg.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    run_training(&other, c.path(), &mut |_| {}).unwrap();
    assert_ne!(
        fs::read(a.path().join("final.json")).unwrap(),
        fs::read(c.path().join("final.json")).unwrap()
    );
}

#[test]
fn ppo_at_coarse_sample_time_warns() {
    let text = "kind = \"ppo\"\n[env]\nsample_time = 0.05\n";
    let (_, warnings) = ExperimentConfig::from_toml_str(text, Path::new(".")).unwrap();
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("0.01"), "{}", warnings[0]);
    let (_, warnings) = ExperimentConfig::from_toml_str("kind = \"ppo\"", Path::new(".")).unwrap();
    assert!(warnings.is_empty());
}

#[test]
fn history_flag_mismatch_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut cfg = small_ddpg(ControllerKind::DdpgEh, 5);
    cfg.env.error_history = false;
    let err = run_training(&cfg, &out, &mut |_| {}).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(!out.exists());

    let err = run_training(&ExperimentConfig::for_kind(ControllerKind::Mpc), &out, &mut |_| {})
        .unwrap_err();
    assert!(err.is_validation());
}

#[test]
fn checkpoint_must_match_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_ddpg(ControllerKind::Ddpg, 1);
    run_training(&cfg, dir.path(), &mut |_| {}).unwrap();
    let ckpt = dir.path().join("final.json");

    let eh = ExperimentConfig::for_kind(ControllerKind::DdpgEh);
    assert!(Controller::load(&eh, Some(&ckpt)).unwrap_err().is_validation());
    let ppo = ExperimentConfig::for_kind(ControllerKind::Ppo);
    assert!(Controller::load(&ppo, Some(&ckpt)).unwrap_err().is_validation());
    assert!(Controller::load(&cfg, None).unwrap_err().is_validation());
    let m = ExperimentConfig::for_kind(ControllerKind::Mpc);
    assert!(Controller::load(&m, Some(&ckpt)).unwrap_err().is_validation());
}

#[test]
fn plant_file_include_and_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("plant.toml"), "m_p = 0.2\nr_w = 0.12\n").unwrap();
    let text = "kind = \"mpc\"\nplant_file = \"plant.toml\"\n[plant]\nr_w = 0.11\n";
    fs::write(dir.path().join("exp.toml"), text).unwrap();
    let (cfg, _) = ExperimentConfig::load(&dir.path().join("exp.toml")).unwrap();
    assert_eq!(cfg.plant.m_p, 0.2);
    assert_eq!(cfg.plant.r_w, 0.11);
    assert_eq!(cfg.plant.g, 9.81);

    fs::write(dir.path().join("bad.toml"), "kind = \"mpc\"\nplant_file = \"nope.toml\"\n").unwrap();
    assert!(ExperimentConfig::load(&dir.path().join("bad.toml"))
        .unwrap_err()
        .is_validation());
}

#[test]
fn trace_header_and_power_column() {
    let (cfg, mut ctl) = mpc();
    let ev = evaluate(&cfg, &mut ctl, 0).unwrap();
    assert_eq!(ev.trace.len(), 1000);
    let mut bytes = Vec::new();
    trace::write(&ev.trace, &mut bytes).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert_eq!(text.lines().next(), Some(HEADER));
    assert_eq!(
        HEADER,
        "t,x,z,theta,phi,l,xd,zd,thetad,phid,ld,tau,f_in,x_ref,z_ref,e_x,e_z,reward,power"
    );

    let back = trace::read(bytes.as_slice()).unwrap();
    assert_eq!(back, ev.trace);
    let mut prev = f64::NEG_INFINITY;
    for r in &back {
        assert_eq!(r.power.to_bits(), (r.tau * r.phid).to_bits());
        assert!(r.t > prev);
        prev = r.t;
    }
}

fn row(t: f64, power: f64) -> TraceRow {
    TraceRow {
        t,
        x: 0.0,
        z: 0.1,
        theta: 0.0,
        phi: 0.0,
        l: 0.375,
        xd: 0.0,
        zd: 0.0,
        thetad: 0.0,
        phid: 0.0,
        ld: 0.0,
        tau: 0.0,
        f_in: 0.0,
        x_ref: 0.0,
        z_ref: 0.475,
        e_x: 0.0,
        e_z: 0.0,
        reward: 0.0,
        power,
    }
}

#[test]
fn energy_is_trapezoid_of_abs_power() {
    let rows = [row(0.0, 2.0), row(0.5, -4.0), row(1.5, 1.0)];
    // 0.5 * (2 + 4) * 0.5 + 0.5 * (4 + 1) * 1.0
    assert_eq!(metrics::energy(&rows), 4.0);
    assert_eq!(metrics::energy(&rows[..1]), 0.0);
}

#[test]
fn metrics_by_hand() {
    let mut rows = vec![row(0.1, 0.0), row(0.2, 0.0)];
    rows[0].e_x = 3.0;
    rows[0].theta = -0.2;
    rows[0].xd = -0.7;
    rows[0].reward = 0.25;
    rows[1].e_x = -4.0;
    rows[1].x = 1.5;
    rows[1].x_ref = 2.0;
    rows[1].theta = 0.1;
    rows[1].reward = 0.5;
    let m = metrics::compute(&rows, false).unwrap();
    assert_eq!(m.rmse_x, 12.5f64.sqrt());
    assert_eq!(m.final_error, 0.5);
    assert_eq!(m.max_theta, 0.2);
    assert_eq!(m.max_xd, 0.7);
    assert_eq!(m.episode_return, 0.75);
    assert_eq!(m.steps, 2);
    assert_eq!(metrics::compute(&rows, false).unwrap(), m);
    assert!(matches!(metrics::compute(&[], false), Err(BenchError::EmptyTrace)));
}

#[test]
fn zero_length_trajectory_gives_empty_trace() {
    let (mut cfg, mut ctl) = mpc();
    cfg.evaluation.trajectory = Some(ReferenceTrajectory {
        x_initial: 0.0,
        segments: vec![],
        z_ref: 0.475,
    });
    let ev = evaluate(&cfg, &mut ctl, 0).unwrap();
    assert!(ev.trace.is_empty());
    assert!(matches!(ev.metrics(), Err(BenchError::EmptyTrace)));
    let dir = tempfile::tempdir().unwrap();
    assert!(write_run(dir.path(), "mpc", &cfg, 0, &ev).is_err());
    assert_eq!(fs::read_to_string(dir.path().join("trace.csv")).unwrap().trim(), HEADER);
}

struct Shove;

impl Policy for Shove {
    fn act(&mut self, _: &Environment, _: &Observation) -> Result<ControlInput, BenchError> {
        Ok(ControlInput::new(5.0, 9.81))
    }
}

#[test]
fn fall_is_flagged_and_trace_kept() {
    let cfg = ExperimentConfig::for_kind(ControllerKind::Mpc);
    let ev = evaluate(&cfg, &mut Shove, 0).unwrap();
    assert!(ev.failed);
    assert!(!ev.trace.is_empty() && ev.trace.len() < 1000);
    let m = ev.metrics().unwrap();
    assert!(m.failed);
    assert!(m.max_theta > std::f64::consts::FRAC_PI_4);
}

#[test]
fn mpc_tracks_the_reference() {
    let (cfg, mut ctl) = mpc();
    let ev = evaluate(&cfg, &mut ctl, 0).unwrap();
    let m = ev.metrics().unwrap();
    assert!(!m.failed);
    assert_eq!(ev.fallbacks, 0);
    assert!(m.final_error <= 0.15, "final error {}", m.final_error);
    assert!((m.max_xd - 0.5).abs() <= 0.2, "max xd {}", m.max_xd);
    assert!(m.max_theta < cfg.mpc.theta_max);
}

fn report(label: &str, cfg: &ExperimentConfig, ctl: &mut Controller) -> EvaluationReport {
    let ev = evaluate(cfg, ctl, 0).unwrap();
    EvaluationReport::new(label, cfg, 0, &ev).unwrap()
}

#[test]
fn compare_reports() {
    let (cfg, mut ctl) = mpc();
    let a = report("a", &cfg, &mut ctl);
    let b = report("b", &cfg, &mut ctl);
    assert_eq!(differences(&a.metrics, &b.metrics), [0.0; 6]);
    check_compatible(&[&a, &b]).unwrap();
    assert!(check_compatible(&[&a]).unwrap_err().is_validation());

    let table = compare::table(&[&a, &b]);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    let mut expected = vec!["label", "kind"];
    expected.extend(COLUMNS);
    expected.push("failed");
    assert_eq!(header, expected);
    assert_eq!(table.lines().count(), 4);

    let mut moved = cfg.clone();
    moved.evaluation.trajectory = Some(ReferenceTrajectory::stationary(0.0, 0.475, 10.0));
    let c = report("c", &moved, &mut ctl);
    assert!(check_compatible(&[&a, &c]).unwrap_err().is_validation());
}

#[test]
fn compare_writes_scripts() {
    let (cfg, mut ctl) = mpc();
    let dir = tempfile::tempdir().unwrap();
    let (ra, rb) = (dir.path().join("a"), dir.path().join("b"));
    let ev = evaluate(&cfg, &mut ctl, 0).unwrap();
    write_run(&ra, "a", &cfg, 0, &ev).unwrap();
    write_run(&rb, "b", &cfg, 0, &ev).unwrap();
    let out = dir.path().join("cmp");
    let text = compare::compare(&[ra.clone(), rb], &out).unwrap();
    assert!(text.contains("+0.000000"));
    for f in ["comparison.txt", "states.gp", "torque.gp", "power.gp"] {
        let s = fs::read_to_string(out.join(f)).unwrap();
        if f.ends_with(".gp") {
            assert!(s.contains("trace.csv"), "{f}");
        }
    }
    let run = Run::load(&ra).unwrap();
    let rows = trace::load(&run.trace).unwrap();
    assert_eq!(metrics::energy(&rows), run.report.metrics.energy);
    assert!(compare::compare(&[ra], &out).unwrap_err().is_validation());
}

#[test]
fn sweep_grids() {
    let (cfg, mut ctl) = mpc();
    let theta = Axis::new(Var::Theta, -0.3, 0.3, 21);
    let rows = sweep::sweep(&mut ctl, &cfg, Axis::new(Var::X, -1.0, 1.0, 21), theta).unwrap();
    assert_eq!(rows.len(), 441);
    let rate = sweep::sweep(&mut ctl, &cfg, Axis::new(Var::ThetaRate, -1.5, 1.5, 21), theta).unwrap();
    assert_eq!(rate.len(), 441);

    // x = 0 is the middle block of the x-major grid
    let mid = &rows[10 * 21..11 * 21];
    assert_eq!(mid[0].a, 0.0);
    for k in 0..21 {
        let (p, n) = (mid[k], mid[20 - k]);
        assert_eq!(p.b, -n.b);
        assert!((p.tau + n.tau).abs() <= 1e-9, "tau({}) = {}, tau({}) = {}", p.b, p.tau, n.b, n.tau);
    }
    assert!(mid[20].tau != 0.0);

    let eq = sweep::sweep(&mut ctl, &cfg, Axis::new(Var::X, -1.0, 1.0, 1), Axis::new(Var::Theta, -0.3, 0.3, 1))
        .unwrap();
    assert_eq!(eq.len(), 1);
    assert!(eq[0].tau.abs() < 1e-9, "{}", eq[0].tau);

    let mut bytes = Vec::new();
    sweep::write_csv(&rows, Var::X, Var::Theta, &mut bytes).unwrap();
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().next(), Some("x,theta,tau,f_in"));
    assert_eq!(text.lines().count(), 442);
}

#[test]
fn mpc_policy_matches_direct_control() {
    let (cfg, _) = mpc();
    let mut direct = MpcController::new(cfg.plant, cfg.mpc.clone()).unwrap();
    let mut env = Environment::new(cfg.evaluation_env(), cfg.plant).unwrap();
    let obs = env.reset(0);
    let window: Vec<(f64, f64)> = (1..=100).map(|i| env.trajectory().at(i as f64 * 0.01)).collect();
    let u = direct.control(env.state(), &window).unwrap();
    let mut wrapped = MpcController::new(cfg.plant, cfg.mpc.clone()).unwrap();
    assert_eq!(Policy::act(&mut wrapped, &env, &obs).unwrap(), u);
}

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ewip-bench"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr),
    )
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    fs::write(p("mpc.toml"), "kind = \"mpc\"\n").unwrap();
    fs::write(p("bad.toml"), "kind = \"mpc\"\n[env]\nsample_time = 0.02\n").unwrap();
    fs::write(
        p("empty.toml"),
        "kind = \"mpc\"\n[evaluation.trajectory]\nx_initial = 0.0\nz_ref = 0.475\nsegments = []\n",
    )
    .unwrap();
    fs::write(
        p("still.toml"),
        "kind = \"mpc\"\n[evaluation.trajectory]\nx_initial = 0.0\nz_ref = 0.475\n\
         [[evaluation.trajectory.segments]]\nt_start = 0.0\nt_end = 1.0\nx_target = 0.0\n",
    )
    .unwrap();

    let (code, out) = cli(&["evaluate", "-c", &p("mpc.toml"), "-o", &p("a")]);
    assert_eq!(code, 0, "{out}");
    assert!(dir.path().join("a/trace.csv").exists());
    assert_eq!(cli(&["evaluate", "-c", &p("still.toml"), "-o", &p("b")]).0, 0);

    assert_eq!(cli(&["evaluate", "-c", &p("bad.toml")]).0, 1);
    assert_eq!(cli(&["evaluate", "-c", &p("missing.toml")]).0, 1);
    assert_eq!(cli(&["frobnicate"]).0, 1);
    let (code, out) = cli(&["compare", &p("a"), &p("b"), "-o", &p("cmp")]);
    assert_eq!(code, 1, "{out}");
    assert!(out.contains("trajectory"));
    assert_eq!(cli(&["evaluate", "-c", &p("empty.toml"), "-o", &p("e")]).0, 2);
    assert_eq!(cli(&["--help"]).0, 0);

    let (code, out) = cli(&["linearize", "-c", &p("mpc.toml")]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["ad"].as_array().unwrap().len(), 10);
    assert_eq!(v["bd"][0].as_array().unwrap().len(), 2);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for kind in ControllerKind::ALL {
        let (cfg, warnings) = ExperimentConfig::load(&dir.join(format!("{kind}.toml"))).unwrap();
        assert_eq!(cfg.kind, kind);
        assert!(warnings.is_empty(), "{kind}: {warnings:?}");
        let d = ewip_core::dynamics::SystemParams::default();
        assert_eq!((cfg.plant.m_w, cfg.plant.m_p, cfg.plant.r_w), (d.m_w, d.m_p, d.r_w));
        assert!((cfg.plant.inertia - d.inertia).abs() < 1e-15);
    }
}
