use std::path::Path;
use std::process::{Command, Output};

fn binfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binfer")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, name: &str, seed: &str) -> String {
    let p = dir.join(name).to_string_lossy().into_owned();
    let o = binfer(&["gen", "--sigma", "0.125", "--padding", "neg1", "--seed", seed, "-o", &p]);
    assert!(o.status.success(), "{}", stderr(&o));
    p
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.bnn", "7");
    let b = gen(dir.path(), "b.bnn", "7");
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn gen_rejects_fractional_channels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.bnn");
    let o = binfer(&["gen", "--sigma", "0.3", "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("non-integral channel count"));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(binfer(&["opcount", "--bogus"]).status.code(), Some(2));
}

#[test]
fn run_emits_json_lines_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let model = gen(dir.path(), "m.bnn", "1");
    let images = dir.path().join("frames.bin");
    let bytes: Vec<u8> = (0..3 * 3072).map(|i| (i * 37 % 251) as u8).collect();
    std::fs::write(&images, &bytes).unwrap();
    let img = images.to_str().unwrap();
    let one = binfer(&["run", "-m", &model, "-i", img, "--workers", "1"]);
    let eight = binfer(&["run", "-m", &model, "-i", img, "--workers", "8"]);
    assert!(one.status.success(), "{}", stderr(&one));
    assert_eq!(stdout(&one), stdout(&eight));
    let lines: Vec<serde_json::Value> = stdout(&one).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["frame"], i);
        assert_eq!(l["scores"].as_array().unwrap().len(), 10);
        assert!(l["label"].as_u64().unwrap() < 10);
    }
}

#[test]
fn run_rejects_truncated_images() {
    let dir = tempfile::tempdir().unwrap();
    let model = gen(dir.path(), "m.bnn", "1");
    let images = dir.path().join("short.bin");
    std::fs::write(&images, vec![0u8; 3000]).unwrap();
    let o = binfer(&["run", "-m", &model, "-i", images.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("3000 bytes"), "{}", stderr(&o));
}

#[test]
fn verify_passes_and_detects_faults() {
    let o = binfer(&["verify", "--sigma", "1/8", "--trials", "3", "--frames", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all 3 cases bit-exact"));

    let o = binfer(&["verify", "--sigma", "1/8", "--trials", "1", "--frames", "1", "--inject-fault", "1"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("first mismatch at layer 1"), "{}", stdout(&o));

    assert_eq!(binfer(&["verify", "--trials", "0"]).status.code(), Some(2));
}

#[test]
fn schedule_json_within_budget() {
    let o = binfer(&["schedule", "--sigma", "1", "--fps", "12000", "--clock", "125000000", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let layers = v["layers"]["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 9);
    for l in layers {
        assert!(l["II"].as_u64().unwrap() <= 10416);
        for k in ["P", "S", "M", "Fn", "Fs", "Fm"] {
            assert!(l[k].as_u64().unwrap() >= 1);
        }
    }
    assert!(v["summary"]["gops"].as_f64().unwrap() > 14000.0);
}

#[test]
fn opcount_text_and_json() {
    let o = binfer(&["opcount", "--sigma", "1/2", "--padding", "neg1"]);
    assert!(stdout(&o).contains("310.3 Mops"), "{}", stdout(&o));
    let o = binfer(&["opcount", "--sigma", "1", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["total_ops"], 2 * 616_966_144u64);
}

#[test]
fn roofline_uses_device_dir() {
    let dir = tempfile::tempdir().unwrap();
    let dev = r#"{"name":"custom","luts":1000,"brams_36k":10,"dsps":10,"utilization_factor":0.5,
        "clock_hz":100,"costs":{"binary":{"lut":1.0},"float32":{"lut":100.0,"dsp":1.0}}}"#;
    std::fs::write(dir.path().join("custom.json"), dev).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_binfer"))
        .args(["roofline", "--device", "custom", "--json"])
        .env("BINFER_DEVICE_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["device"], "custom");
    assert_eq!(v["peaks"]["binary"].as_f64().unwrap(), 500.0 * 100.0);

    let o = binfer(&["roofline"]);
    assert!(stdout(&o).contains("binary:float32 peak ratio"));
    assert_eq!(binfer(&["roofline", "--device", "nonexistent"]).status.code(), Some(2));
}

#[test]
fn report_json_parses() {
    let o = binfer(&["report", "--sigma", "1/4", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["table"]["rows"].as_array().unwrap().len(), 1);
    let util = v["networks"][0]["bram"]["utilization"].as_f64().unwrap();
    assert!(util > 0.0 && util <= 1.0);
}
