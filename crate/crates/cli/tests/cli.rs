use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ldgrad"));
    c.env_remove("OUT_DIR");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn cfg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

#[test]
fn analyze_verdicts_and_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["analyze", "--generator", &cfg("cyclic3.json"), "--samples", "20"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("verdict: covector system only"));
    let r = json(&dir.path().join("analyze.json"));
    assert!(r["diagnostics"]["time_symmetry_defect_max"].as_f64().unwrap() > 1e-2);

    let o = run(&["analyze", "--generator", &cfg("symmetric2.json"), "--samples", "20"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("verdict: gradient system (detailed balance)"));
    let r = json(&dir.path().join("analyze.json"));
    assert_eq!(r["driving_functional"], "S = E_pi / 2");
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "analyze");
    assert_eq!(manifest["outputs"][0], "analyze.json");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"Q\": [[").unwrap();
    let o = run(&["analyze", "--generator", bad.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    let reducible = dir.path().join("reducible.json");
    std::fs::write(&reducible, "{\"Q\": [[0, 0], [0, 0]]}").unwrap();
    assert_eq!(code(&run(&["analyze", "--generator", reducible.to_str().unwrap()], dir.path())), 2);
}

#[test]
fn evolve_gap_stationary_start_and_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "evolve", "--generator", &cfg("birth_death4.json"), "--rho0", "0.7,0.1,0.1,0.1", "--T", "2", "--dt", "1e-3",
        "--structure", "linear,ldp",
    ];
    let o = run(&args, dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("evolve.json"));
    let gap = r["gaps"][0]["gap"]["sup_norm_gap"].as_f64().unwrap();
    assert!(gap <= 1e-6);
    assert!(dir.path().join("trajectory_ldp.csv").exists());
    assert!(dir.path().join("evolve.gp").exists());

    let o = run(&["evolve", "--generator", &cfg("symmetric2.json"), "--rho0", "pi", "--T", "1", "--structure", "linear"], dir.path());
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("trajectory_linear.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("0.5")));

    let o = run(&["evolve", "--generator", &cfg("cyclic3.json"), "--rho0", "0.5,0.3,0.2", "--T", "1", "--structure", "ldp"], dir.path());
    assert_eq!(code(&o), 3);
    let o = run(&["evolve", "--generator", &cfg("symmetric2.json"), "--rho0", "0.5,0.3", "--T", "1"], dir.path());
    assert_eq!(code(&o), 2);
    let o = run(&["evolve", "--generator", &cfg("symmetric2.json"), "--rho0", "pi", "--T", "1", "--structure", "wavy"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_sanity_errors_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--config", &cfg("zero_tilt.toml")], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("simulate.json"));
    assert_eq!(r["paths"]["girsanov"]["value"].as_f64(), Some(0.0));

    let missing = dir.path().join("missing.toml");
    std::fs::write(&missing, "generator = \"nope.json\"\n[paths]\nn = 1\nT = 1.0\nrho0 = [1.0, 0.0]\n").unwrap();
    assert_eq!(code(&run(&["simulate", "--config", missing.to_str().unwrap()], dir.path())), 2);

    let gen = cfg("symmetric2.json");
    let strong = dir.path().join("strong.toml");
    std::fs::write(
        &strong,
        format!("generator = {gen:?}\n[paths]\nn = 2\nT = 1.0\nrho0 = [0.5, 0.5]\ntilt = {{ kind = \"constant\", values = [400.0, -400.0] }}\n"),
    )
    .unwrap();
    assert_eq!(code(&run(&["simulate", "--config", strong.to_str().unwrap()], dir.path())), 4);

    let small = dir.path().join("hold.json");
    std::fs::write(
        &small,
        serde_json::json!({
            "generator": gen, "seed": 5,
            "experiment": {"hold": [0.7, 0.3], "T": 1.0, "dt": 0.05, "n_list": [100], "replicas": 20,
                           "tube_radius": 0.05, "plain_mc": true}
        })
        .to_string(),
    )
    .unwrap();
    let o = run(&["simulate", "--config", small.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("I_T(target)"));
    let r = json(&dir.path().join("simulate.json"));
    assert_eq!(r["experiment"]["rows"].as_array().unwrap().len(), 1);
    let replicas = std::fs::read_to_string(dir.path().join("replicas.csv")).unwrap();
    assert_eq!(replicas.lines().count(), 1 + 40);
}

fn diffusion_config(dir: &Path, potential: &str, n: usize) -> PathBuf {
    let p = dir.join(format!("grid_{n}.toml"));
    std::fs::write(
        &p,
        format!("a = -5.0\nb = 5.0\nN = {n}\npotential = {potential:?}\ndecomposition_samples = 20\n"),
    )
    .unwrap();
    p
}

#[test]
fn diffusion_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let c = diffusion_config(dir.path(), "quadratic", 51);
    let o = run(&["diffusion", "--config", c.to_str().unwrap(), "--T", "2", "--dt", "1e-3"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("entropy.csv")).unwrap();
    let e: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(e.windows(2).all(|w| w[1] <= w[0]));
    let r = json(&dir.path().join("diffusion.json"));
    assert!(r["decomposition_residual_max"].as_f64().unwrap() <= 1e-12);
    assert_eq!(r["refinement"]["n_fine"], 101);
    assert!(dir.path().join("diffusion.gp").exists());

    let c = diffusion_config(dir.path(), "zero", 21);
    let o = run(&["diffusion", "--config", c.to_str().unwrap(), "--T", "0.5", "--dt", "1e-3"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let profile = std::fs::read_to_string(dir.path().join("profile_final.csv")).unwrap();
    let pis: Vec<f64> = profile.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(pis.iter().all(|p| (p - pis[0]).abs() < 1e-12));

    let c = diffusion_config(dir.path(), "quadratic", 2);
    assert_eq!(code(&run(&["diffusion", "--config", c.to_str().unwrap()], dir.path())), 2);
    let c = diffusion_config(dir.path(), "cubic", 11);
    assert_eq!(code(&run(&["diffusion", "--config", c.to_str().unwrap()], dir.path())), 2);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let base = tempfile::tempdir().unwrap();
    let mut snaps = Vec::new();
    for (k, threads) in ["1", "4", "8", "4"].iter().enumerate() {
        let out = base.path().join(format!("run{k}"));
        for args in [
            vec!["analyze", "--generator", &cfg("birth_death4.json"), "--samples", "30", "--seed", "3"],
            vec!["simulate", "--config", &cfg("tilted_paths.toml")],
        ] {
            let o = bin().args(&args).arg("--out").arg(&out).env("RAYON_NUM_THREADS", threads).output().unwrap();
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        }
        snaps.push(snapshot(&out));
    }
    assert!(snaps[0].len() >= 3);
    for s in &snaps[1..] {
        assert_eq!(&snaps[0], s);
    }
}

#[test]
fn out_dir_environment_and_atomic_writes() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["analyze", "--generator", &cfg("symmetric2.json"), "--samples", "5"])
        .env("OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(sorted, vec!["analyze.json", "manifest.json"]);
    let m = json(&dir.path().join("manifest.json"));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["seeds"][0], 0);
}
