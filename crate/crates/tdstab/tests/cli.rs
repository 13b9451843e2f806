use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tdstab::cases;
use tdstab::measurement::read_frames;
use tdstab::network::{load_network, NetworkModel};

fn tdstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdstab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn case_file(dir: &Path, name: &str) -> PathBuf {
    let path = dir.join(format!("{name}.json"));
    let o = tdstab(&["case", name, "--out", s(&path)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    path
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

#[test]
fn shipped_data_matches_built_in_cases() {
    let expected: [(&str, NetworkModel); 7] = [
        ("chain_case1.json", cases::chain_case(1)),
        ("chain_case2.json", cases::chain_case(2)),
        ("chain_case3.json", cases::chain_case(3)),
        ("unbalanced_chain1.json", cases::unbalanced_chain(1)),
        ("unbalanced_chain2.json", cases::unbalanced_chain(2)),
        ("two_substation.json", cases::two_substation(1.0, 1.0)),
        ("two_substation_weak_a.json", cases::two_substation(2.8, 1.0)),
    ];
    for (file, model) in expected {
        assert_eq!(load_network(data(file)).unwrap(), model, "{file}");
    }
}

#[test]
fn simulate_writes_one_frame_per_device_and_point() {
    let dir = tempfile::tempdir().unwrap();
    let net = case_file(dir.path(), "unbalanced-chain1");
    let out = dir.path().join("f.csv");
    let o = tdstab(&[
        "simulate", "--network", s(&net), "--out", s(&out), "--lambda-start", "0.05", "--lambda-stop", "1.0",
        "--lambda-step", "0.05",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let frames = read_frames(&out).unwrap();
    assert_eq!(frames.len(), 20);
    assert!(frames.iter().all(|f| f.channels.contains_key("LD")));
    let text = std::fs::read_to_string(&out).unwrap();
    // one PMU row and one μPMU row per point
    assert_eq!(text.lines().count(), 1 + 40);
}

#[test]
fn simulate_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let net = case_file(dir.path(), "chain-case2");
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = tdstab(&[
            "simulate", "--network", s(&net), "--out", s(&out), "--lambda-stop", "2", "--noise-sigma", "1e-3",
            "--seed", seed,
        ]);
        assert_eq!(code(&o), 0);
        std::fs::read(out).unwrap()
    };
    assert_eq!(run("3", "a.csv"), run("3", "b.csv"));
    assert_ne!(run("3", "a.csv"), run("4", "c.csv"));
}

#[test]
fn simulate_past_the_nose_keeps_the_converged_part() {
    let dir = tempfile::tempdir().unwrap();
    let net = case_file(dir.path(), "chain-case1");
    let out = dir.path().join("f.csv");
    let o = tdstab(&[
        "simulate", "--network", s(&net), "--out", s(&out), "--lambda-stop", "8", "--lambda-step", "0.5",
        "--excitation", "0",
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    // λ_max is 5 for this case
    let frames = read_frames(&out).unwrap();
    assert_eq!(frames.len(), 9);
}

#[test]
fn estimate_recovers_the_line_from_simulated_frames() {
    let dir = tempfile::tempdir().unwrap();
    let net = case_file(dir.path(), "unbalanced-chain1");
    let csv = dir.path().join("f.csv");
    let json = dir.path().join("e.json");
    let o = tdstab(&[
        "simulate", "--network", s(&net), "--out", s(&csv), "--lambda-start", "0.5", "--lambda-stop", "0.95",
    ]);
    assert_eq!(code(&o), 0);
    let o = tdstab(&["estimate", "--measurements", s(&csv), "--out", s(&json)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let model = load_network(&net).unwrap();
    let truth = [&model.transmission[0].z, &model.feeders[0].branches[0].z];
    let eq = &v["equivalents"][0];
    assert_eq!(eq["node"], "LD");
    for (key, z) in ["z_eq_t", "z_eq_d"].iter().zip(truth) {
        for i in 0..3 {
            for j in 0..3 {
                let re = eq[key][i][j][0].as_f64().unwrap();
                let im = eq[key][i][j][1].as_f64().unwrap();
                let want = z.0[i][j];
                assert!((re - want.re).abs() < 1e-8 && (im - want.im).abs() < 1e-8, "{key}[{i}][{j}]");
            }
        }
    }
    assert_eq!(v["substations"][0]["substation"], "SUB");
}

#[test]
fn too_few_frames_is_an_estimation_error() {
    let dir = tempfile::tempdir().unwrap();
    let net = case_file(dir.path(), "chain-case1");
    let csv = dir.path().join("f.csv");
    let o = tdstab(&["simulate", "--network", s(&net), "--out", s(&csv), "--lambda-stop", "1"]);
    assert_eq!(code(&o), 0);
    let o = tdstab(&["estimate", "--measurements", s(&csv)]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least"));
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&tdstab(&["simulate", "--network", s(&missing), "--lambda-stop", "2"])), 2);

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\"source\": 1}").unwrap();
    assert_eq!(code(&tdstab(&["sweep", "--network", s(&broken)])), 2);

    let net = case_file(dir.path(), "two-substation");
    let o = tdstab(&["whatif", "--network", s(&net), "--intervention", "var:NOPE:5"]);
    assert_eq!(code(&o), 2);
    let o = tdstab(&["whatif", "--network", s(&net), "--intervention", "nonsense"]);
    assert_eq!(code(&o), 2);

    let garbage = dir.path().join("g.csv");
    std::fs::write(&garbage, "k,t\n1,2\n").unwrap();
    assert_eq!(code(&tdstab(&["estimate", "--measurements", s(&garbage)])), 2);
}

#[test]
fn whatif_prints_a_table_with_base_row() {
    let dir = tempfile::tempdir().unwrap();
    let net = case_file(dir.path(), "chain-case1");
    let o = tdstab(&["whatif", "--network", s(&net), "--intervention", "var:SUB:50"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "intervention,lambda_max,delta_lambda_max_pct");
    assert!(lines[1].starts_with("base,"));
    let delta: f64 = lines[2].rsplit(',').next().unwrap().parse().unwrap();
    assert!(delta > 0.0);
}

#[test]
fn sweep_and_monitor_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let net = case_file(dir.path(), "chain-case3");
    let out = dir.path().join("sweep.csv");
    let o = tdstab(&["sweep", "--network", s(&net), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("lambda,total_p,vsi_3ph:LD,vsi_t:SUB,tddi:LD\n"));
    assert!(text.lines().count() > 10);

    let csv = dir.path().join("f.csv");
    let o = tdstab(&["simulate", "--network", s(&net), "--out", s(&csv), "--lambda-stop", "2"]);
    assert_eq!(code(&o), 0);
    let o = tdstab(&["monitor", "--measurements", s(&csv), "--window", "10", "--stride", "5", "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,node,substation,vsi_3ph,tddi,class,critical");
    // 21 frames: windows end at frames 9, 14 and 19
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("19,LD,SUB,"));

    let o = tdstab(&["monitor", "--measurements", s(&csv), "--window", "10"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 12);
    assert_eq!(v[0]["report"]["critical_node"], "LD");
}
