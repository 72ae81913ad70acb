use std::path::Path;
use std::process::Command;

fn great(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_great")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    let (code, _, err) = great(&[
        "synth",
        "--out",
        s(&dir.join("data")),
        "--instances",
        "2",
        "--images-per-cell",
        "1",
        "--image-size",
        "48",
    ]);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn reason_with_partial_fixture_exits_2_and_names_images() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let fixtures = dir.path().join("data/fixtures.json");
    let mut map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&fixtures).unwrap()).unwrap();
    let dropped = map.keys().next().unwrap().clone();
    map.remove(&dropped);
    let partial = dir.path().join("partial.json");
    std::fs::write(&partial, serde_json::Value::Object(map).to_string()).unwrap();

    let args = |f: &Path| {
        vec![
            "reason".to_string(),
            "--manifest".into(),
            s(&dir.path().join("data/manifest.json")).into(),
            "--cache".into(),
            s(&dir.path().join("cache")).into(),
            "--fixture".into(),
            s(f).into(),
        ]
    };
    let run = |f: &Path| {
        let a = args(f);
        great(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let (code, out, err) = run(&partial);
    assert_eq!(code, 2);
    assert!(out.contains("failed: 1"), "{out}");
    assert!(err.contains(&dropped), "{err}");

    let (code, out, _) = run(&fixtures);
    assert_eq!(code, 0);
    assert!(out.contains("cached: 5  generated: 1  failed: 0"), "{out}");
}

#[test]
fn bad_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"nope").unwrap();
    let (code, _, err) = great(&["eval", "--checkpoint", s(&bogus)]);
    assert_eq!(code, 1, "{err}");

    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"epochs": 0}"#).unwrap();
    let (code, _, err) = great(&["train", "--config", s(&cfg)]);
    assert_eq!(code, 1);
    assert!(err.contains("epochs"), "{err}");

    let (code, _, _) = great(&["reason", "--manifest", "m.json", "--cache", "c"]);
    assert_eq!(code, 2, "clap usage errors exit 2");
}

#[test]
fn help_lists_subcommands() {
    let (code, out, _) = great(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["synth", "reason", "train", "eval", "infer"] {
        assert!(out.contains(sub), "{out}");
    }
}
