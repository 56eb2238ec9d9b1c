use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ptz(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptz")).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Small noise-free scene so the full command chain runs quickly.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "seed = 11\n\n[scene]\nnum_views = 72\nnum_ref_views = 24\nnum_points = 4000\nnoise_sigma_px = 0.0\n",
    )
    .unwrap();
    path
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ptz(&["synth", "--seed", "5", "--out", arg(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 5);
    assert!(ta == tb, "scene files differ between runs");
}

#[test]
fn invalid_sigma_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ptz(&["synth", "--sigma", "-1", "--out", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    // usage errors must not collide with the algorithmic exit code
    assert_eq!(ptz(&["synth", "--bogus"]).status.code(), Some(1));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ptz(&["calibrate", "--matches", arg(&dir.path().join("nope.json")), "--out", arg(&dir.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "sed = 3\n").unwrap();
    let o = ptz(&["--config", arg(&cfg), "synth", "--out", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unmatchable_views_fail_algorithmically() {
    let dir = tempfile::tempdir().unwrap();
    let matches = dir.path().join("m.json");
    let out = dir.path().join("r.json");
    fs::write(
        &matches,
        r#"{"views":[{"id":"a","width":640,"height":480},{"id":"b","width":640,"height":480}],
           "matches":[{"view_a":"a","view_b":"b","pairs":[[1,2,3,4],[10,20,30,40],[100,50,7,9]]}]}"#,
    )
    .unwrap();
    let o = ptz(&["calibrate", "--matches", arg(&matches), "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let written: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(written["status"], "failed");
}

#[test]
fn full_chain_on_a_noise_free_scene() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let scene = d.join("scene");
    let run = |args: &[&str]| {
        let mut full = vec!["--config", arg(&cfg)];
        full.extend_from_slice(args);
        let o = ptz(&full);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["synth", "--out", arg(&scene)]);
    let (recon, geo, loc) = (d.join("recon.json"), d.join("geo.json"), d.join("loc.json"));
    run(&["calibrate", "--matches", arg(&scene.join("offline_matches.json")), "--out", arg(&recon)]);
    run(&["georef", "--recon", arg(&recon), "--annotations", arg(&scene.join("annotations.json")), "--out", arg(&geo)]);
    run(&["localize", "--db", arg(&geo), "--matches", arg(&scene.join("online_matches.json")), "--stateless", "--out", arg(&loc)]);
    let truth = scene.join("ground_truth.json");
    let template = scene.join("template.json");
    let table = run(&[
        "eval", "--pred", arg(&geo), "--truth", arg(&truth), "--template", arg(&template), "--out", arg(&d.join("e1.json")),
    ]);
    assert!(table.contains("offline"));
    run(&["eval", "--pred", arg(&loc), "--truth", arg(&truth), "--stage", "online", "--out", arg(&d.join("e2.json"))]);

    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("e2.json")).unwrap()).unwrap();
    let views = report["views"].as_array().unwrap();
    assert_eq!(views.len(), 48);
    for v in views {
        assert!(v["fle_px"].as_f64().unwrap() < 1e-2, "{v}");
        assert!(v["ape_rot_deg"].as_f64().unwrap() < 1e-3, "{v}");
    }
}

#[test]
fn version_and_help() {
    assert!(ptz(&["--version"]).status.success());
    let help = ptz(&["--help"]);
    let text = String::from_utf8(help.stdout).unwrap();
    for sub in ["synth", "calibrate", "georef", "localize", "eval"] {
        assert!(text.contains(sub));
    }
}
