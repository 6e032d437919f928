use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn qlan() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qlan"))
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn tiny() -> PathBuf {
    manifest_dir().join("tests/fixtures/tiny.toml")
}

fn alloc1() -> PathBuf {
    manifest_dir().join("../core/configs/alloc1.toml")
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn assert_valid(schema: &str, instance: &Value) {
    let path = manifest_dir().join("schemas").join(format!("{schema}.schema.json"));
    let schema: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_deterministic_and_hashed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(qlan().args(["simulate", "-c"]).arg(tiny()).arg("-o").arg(&a));
    run_ok(qlan().args(["simulate", "-c"]).arg(tiny()).arg("-o").arg(&b));
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb, "outputs differ between identical runs");
    // three links, eight settings, two nodes each
    assert_eq!(ta.len(), 3 * 8 * 2 + 1);

    let manifest = json_file(&a.join("manifest.json"));
    assert_valid("simulate-manifest", &manifest);
    for f in manifest["files"].as_array().unwrap() {
        let bytes = fs::read(a.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_hex(&bytes));
        assert!(f["records"].as_u64().unwrap() > 0);
    }
}

#[test]
fn simulate_seed_flag_changes_streams() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(qlan().args(["simulate", "-c"]).arg(tiny()).arg("-o").arg(&a));
    run_ok(qlan().args(["simulate", "--seed", "99", "-c"]).arg(tiny()).arg("-o").arg(&b));
    let ma = json_file(&a.join("manifest.json"));
    let mb = json_file(&b.join("manifest.json"));
    assert_eq!(mb["seed"], 99);
    assert_ne!(ma["files"][0]["sha256"], mb["files"][0]["sha256"]);
}

#[test]
fn unknown_node_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(tiny()).unwrap().replacen("link = \"A-B\"", "link = \"A-Dave\"", 1);
    let cfg = tmp.path().join("dave.toml");
    fs::write(&cfg, text).unwrap();
    let out = qlan().args(["simulate", "-c"]).arg(&cfg).arg("-o").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("allocation.links[0].link") && err.contains("Dave"), "{err}");
}

#[test]
fn malformed_config_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(tiny()).unwrap().replacen("seed = 20210602", "seed = \"soon\"", 1);
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let out = qlan().args(["allocate", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn correlate_recovers_simulated_delay() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sim");
    run_ok(qlan().args(["simulate", "-c"]).arg(tiny()).arg("-o").arg(&dir));
    let manifest = json_file(&dir.join("manifest.json"));
    let link = manifest["links"]
        .as_array()
        .unwrap()
        .iter()
        .find(|l| l["link"] == "C-A")
        .unwrap()
        .clone();
    let hist = tmp.path().join("hist.csv");
    let out = run_ok(
        qlan()
            .arg("correlate")
            .arg(dir.join("C-A/DD/C.qltt"))
            .arg(dir.join("C-A/DD/A.qltt"))
            .args(["--window-ns", "10", "--duration-s", "2", "--histogram"])
            .arg(&hist),
    );
    let v = stdout_json(&out);
    assert_valid("correlate", &v);
    assert_eq!(v["delay_bins"], link["delay_bins"]);
    assert_eq!(v["first"], "C");
    assert!(v["raw_coincidences"].as_u64().unwrap() > 10 * v["accidentals"].as_f64().unwrap() as u64);
    let csv = fs::read_to_string(hist).unwrap();
    assert!(csv.starts_with("delay_bins,count\n"));
}

#[test]
fn correlate_rejects_garbage_input() {
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.qltt");
    fs::write(&junk, b"not a timetag file").unwrap();
    let out = qlan().arg("correlate").arg(&junk).arg(&junk).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn write_counts(dir: &Path) -> PathBuf {
    let p = dir.join("counts.csv");
    fs::write(
        &p,
        "setting1,setting2,count\nH,H,20\nH,V,480\nV,H,470\nV,V,25\nD,D,460\nD,A,30\nA,D,22\nA,A,450\n",
    )
    .unwrap();
    p
}

#[test]
fn tomo_reports_link_json() {
    let tmp = tempfile::tempdir().unwrap();
    let counts = write_counts(tmp.path());
    let dump = tmp.path().join("samples.csv");
    let out = run_ok(
        qlan()
            .arg("tomo")
            .arg(&counts)
            .args(["--samples", "128", "--seed", "5", "--samples-out"])
            .arg(&dump),
    );
    let v = stdout_json(&out);
    assert_valid("tomo", &v);
    let f = v["fidelity"]["mean"].as_f64().unwrap();
    assert!(f > 0.85 && f < 0.97, "fidelity {f}");
    assert_eq!(fs::read_to_string(dump).unwrap().lines().count(), 129);
    // rate is counts per basis per second
    let rate = v["coincidence_rate"].as_f64().unwrap();
    assert!((rate - 1957.0 / 120.0).abs() < 1e-9);
}

#[test]
fn tomo_rejects_bad_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.csv");
    fs::write(&p, "H,H,10\nH,Q,5\n").unwrap();
    let out = qlan().arg("tomo").arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
    let out = qlan().arg("tomo").arg(write_counts(tmp.path())).args(["--samples", "10"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "samples not divisible by chains");
}

#[test]
fn allocate_prints_table_and_json() {
    let out = run_ok(qlan().args(["allocate", "--objective", "max-min-re", "-c"]).arg(alloc1()));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("link") && lines[0].contains("R_E"));
    for link in ["A-B", "B-C", "C-A"] {
        assert!(lines.iter().any(|l| l.starts_with(link)), "{text}");
    }
    let out = run_ok(qlan().args(["allocate", "--json", "--objective", "max-total-re", "-c"]).arg(alloc1()));
    let v = stdout_json(&out);
    assert_valid("allocate", &v);
    assert_eq!(v["links"].as_array().unwrap().len(), 3);

    let out = qlan().args(["allocate", "--objective", "best", "-c"]).arg(alloc1()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn allocate_reports_infeasible_floor() {
    let out = qlan()
        .args(["allocate", "--objective", "min-fidelity-floor=0.99", "-c"])
        .arg(alloc1())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no allocation"));
}

#[test]
fn jsi_reports_car() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("jsi.csv");
    let out = run_ok(qlan().args(["jsi", "--seed", "1", "-c"]).arg(alloc1()).arg("--csv").arg(&csv));
    let v = stdout_json(&out);
    assert_valid("jsi", &v);
    assert_eq!(v["matrix"].as_array().unwrap().len(), 8);
    let car = v["car"].as_f64().unwrap();
    assert!(car > 9.0 && car < 14.0, "CAR {car}");
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 65);
}

#[test]
fn run_writes_report_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let out = run_ok(qlan().env("QLAN_THREADS", "2").args(["run", "-c"]).arg(tiny()).arg("-o").arg(&out_dir));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with(
        "link,channels,kind,fidelity,fidelity_std,log_negativity,log_negativity_std,ebit_rate,ebit_rate_std,coincidence_rate,singles_1,singles_2\n"
    ));
    assert_eq!(table.lines().count(), 1 + 3 * 2);
    assert_eq!(fs::read_to_string(out_dir.join("table.csv")).unwrap(), table);

    assert_valid("run-manifest", &json_file(&out_dir.join("manifest.json")));
    for link in ["A-B", "B-C", "C-A"] {
        let entry = json_file(&out_dir.join(format!("links/{link}.json")));
        assert_valid("link-entry", &entry);
        assert!(entry["error"].is_null());
        assert_valid("rsp-report", &json_file(&out_dir.join(format!("rsp/{link}.json"))));
    }
    let poincare = fs::read_to_string(out_dir.join("poincare.csv")).unwrap();
    assert!(poincare.starts_with("task,sample,s1,s2,s3\n"));
    // three tasks, 64 posterior samples each
    assert_eq!(poincare.lines().count(), 1 + 3 * 64);
    for line in poincare.lines().skip(1) {
        let s: Vec<f64> = line.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert!(s.iter().map(|x| x * x).sum::<f64>() <= 1.0 + 1e-9);
    }

    let again = tmp.path().join("again");
    let out1 = run_ok(qlan().env("QLAN_THREADS", "1").args(["run", "-c"]).arg(tiny()).arg("-o").arg(&again));
    assert_eq!(String::from_utf8(out1.stdout).unwrap(), table, "worker count changed the result");
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = qlan().env("QLAN_THREADS", "0").args(["allocate", "-c"]).arg(alloc1()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
