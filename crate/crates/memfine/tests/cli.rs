use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn run(args: &[&str], scenario_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_memfine"));
    cmd.args(args).env_remove("MEMFINE_SCENARIO_DIR").env_remove("RUST_LOG");
    if let Some(d) = scenario_dir {
        cmd.env("MEMFINE_SCENARIO_DIR", d);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn scenario_dir_lookup() {
    let dir = scenarios();
    let o = run(&["estimate", "-s", "toy", "--stage", "0"], Some(&dir));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("c_selected"));
    assert!(text.contains("mact"));
}

#[test]
fn zero_load_is_attention_only() {
    let o = run(&["estimate", "-s", "toy", "--s-prime", "0", "--method", "unchunked", "--format", "json"], Some(&scenarios()));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["methods"][0]["estimate"]["activation_bytes"], 512);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(scenarios().join("toy.toml")).unwrap().replace("l = 2", "l = 3");
    std::fs::write(&bad, text).unwrap();
    let o = run(&["estimate", "-s", bad.to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("l·p·v ≠ L"), "{}", stderr(&o));

    assert_eq!(code(&run(&["estimate", "-s", "/nonexistent/x.toml"], None)), 1);
    assert_eq!(code(&run(&["estimate"], None)), 1);
    assert_eq!(code(&run(&["frobnicate"], None)), 1);
    let o = run(&["simulate", "-s", "toy", "--dist", "hot_expert:rho=2"], Some(&scenarios()));
    assert_eq!(code(&o), 1);
    let o = run(&["estimate", "-s", "toy", "--bins", "4,2"], Some(&scenarios()));
    assert_eq!(code(&o), 1);
    assert_eq!(code(&run(&["--help"], None)), 0);
}

#[test]
fn unknown_keys_warn_but_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("extra.toml");
    let text = std::fs::read_to_string(scenarios().join("toy.toml")).unwrap() + "\n[notes]\nauthor = \"x\"\n";
    std::fs::write(&p, text).unwrap();
    let o = run(&["estimate", "-s", p.to_str().unwrap(), "--stage", "0"], None);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("unknown key `notes`"), "{}", stderr(&o));
}

#[test]
fn verify_exit_codes() {
    let o = run(&["verify", "--seeds", "1"], None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));

    let o = run(&["verify", "--seeds", "2", "--size", "small", "--inject-fault"], None);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("FAIL seed 0"), "{}", stderr(&o));
}

#[test]
fn simulate_outputs_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let scn = scenarios().join("model_ii.toml");
    let before = std::fs::read(&scn).unwrap();
    let o = run(
        &["simulate", "-s", scn.to_str().unwrap(), "--seed", "5", "--iters", "4", "--out", a.to_str().unwrap(), "--format", "json"],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&scn).unwrap(), before, "input mutated");
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["plans"].as_array().unwrap().len(), 3);
    for f in ["trace.csv", "layer_stats.csv", "plan.csv", "throughput.csv", "report.json", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    for (f, magic) in [
        ("trace.csv", "# memfine-trace v1"),
        ("plan.csv", "# memfine-plan v1"),
        ("layer_stats.csv", "# memfine-layer-stats v1"),
        ("throughput.csv", "# memfine-throughput v1"),
    ] {
        assert!(std::fs::read_to_string(a.join(f)).unwrap().starts_with(magic), "{f}");
    }

    // The plan subcommand on the written trace reproduces the simulated plan.
    let plan = dir.path().join("plan.csv");
    let trace = a.join("trace.csv");
    let o = run(
        &["plan", "-s", scn.to_str().unwrap(), "--trace", trace.to_str().unwrap(), "--out", plan.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&plan).unwrap(), std::fs::read(a.join("plan.csv")).unwrap());

    // Replaying the trace and rerunning from the manifest give the same files.
    let b = dir.path().join("b");
    let o = run(
        &["simulate", "-s", scn.to_str().unwrap(), "--replay", trace.to_str().unwrap(), "--out", b.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let c = dir.path().join("c");
    let m = a.join("manifest.json");
    assert_eq!(code(&run(&["simulate", "--from-manifest", m.to_str().unwrap(), "--out", c.to_str().unwrap()], None)), 0);
    for f in ["trace.csv", "plan.csv", "throughput.csv"] {
        let want = std::fs::read(a.join(f)).unwrap();
        assert_eq!(std::fs::read(b.join(f)).unwrap(), want, "replay {f}");
        assert_eq!(std::fs::read(c.join(f)).unwrap(), want, "manifest {f}");
    }
}

#[test]
fn zero_iterations_write_headers() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "-s", "toy", "--iters", "0", "--out", dir.path().to_str().unwrap()], Some(&scenarios()));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert_eq!(trace.lines().last(), Some("iteration,layer,gpu,tokens"));
    let plan = std::fs::read_to_string(dir.path().join("plan.csv")).unwrap();
    assert!(plan.ends_with("c_selected,clamped,feasible\n"));
}

#[test]
fn later_layers_get_more_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let scn = scenarios().join("model_i.toml");
    let o = run(
        &["simulate", "-s", scn.to_str().unwrap(), "--iters", "20", "--seed", "1", "--out", dir.path().to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(dir.path().join("plan.csv")).unwrap();
    let body = text.lines().skip(2).collect::<Vec<_>>().join("\n");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let (mut early, mut late) = (Vec::new(), Vec::new());
    for r in rdr.records() {
        let r = r.unwrap();
        let (layer, c): (u64, f64) = (r[1].parse().unwrap(), r[6].parse().unwrap());
        if layer < 8 {
            early.push(c)
        } else {
            late.push(c)
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&late) > mean(&early), "{} vs {}", mean(&late), mean(&early));
}
