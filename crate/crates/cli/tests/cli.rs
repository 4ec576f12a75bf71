use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use undersea_cli::run;

const TINY: &str = r#"{
  "steps": 2,
  "batch": 2,
  "eval_count": 2,
  "data": { "count": 4, "height": 16, "width": 16 },
  "model": { "image_size": 16 }
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("undersea")
        .chain(args.iter().copied())
        .map(String::from)
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_undersea"))
        .args(args)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(argv(&["frobnicate"])), 2);
    assert_eq!(run(argv(&["synth", "--bogus"])), 2);
    assert_eq!(run(argv(&["synth", "--preset", "huge"])), 2);
    assert_eq!(run(argv(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"data": {"cnt": 3}}"#).unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        run(argv(&["synth", "--config", s(&bad), "--out", s(&out)])),
        2
    );
    fs::write(&bad, "{not json").unwrap();
    assert_eq!(
        run(argv(&["synth", "--config", s(&bad), "--out", s(&out)])),
        2
    );
    fs::write(&bad, r#"{"lr": -1.0}"#).unwrap();
    assert_eq!(
        run(argv(&["synth", "--config", s(&bad), "--out", s(&out)])),
        2
    );
    assert_eq!(run(argv(&["eval", "--out", s(&out)])), 2);
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(run(argv(&["synth", "--config", s(&missing)])), 3);
    let out = dir.path().join("x.ppm");
    assert_eq!(
        run(argv(&[
            "degrade",
            "--in",
            s(&dir.path().join("none.ppm")),
            "--out",
            s(&out)
        ])),
        3
    );
    let ck = dir.path().join("ck.bin");
    fs::write(&ck, b"garbage").unwrap();
    assert_eq!(
        run(argv(&[
            "enhance",
            "--ckpt",
            s(&ck),
            "--in",
            s(&out),
            "--out",
            s(&out)
        ])),
        3
    );
}

#[test]
fn errors_are_one_json_line() {
    let out = bin(&["synth", "--config", "/definitely/missing.json"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    let v: Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "io");
    assert_eq!(v["code"], 3);
    assert_eq!(v["command"], "synth");
    let out = bin(&["train", "--nope"]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "usage");
}

#[test]
fn synth_then_verify_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(
        run(argv(&[
            "synth",
            "--config",
            s(&cfg),
            "--seed",
            "5",
            "--count",
            "3",
            "--out",
            s(&data)
        ])),
        0
    );
    assert!(data.join("clear/00002.ppm").exists());
    assert!(data.join("truth/00000.t.pfm").exists());
    let m = json(&data.join("manifest.json"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["data"]["count"], 3);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 12);

    let ev = dir.path().join("ev");
    assert_eq!(
        run(argv(&[
            "eval",
            "--verify-pairs",
            "--data",
            s(&data),
            "--out",
            s(&ev)
        ])),
        0
    );
    assert_eq!(
        json(&ev.join("manifest.json"))["results"]["verify"]["checked"],
        3
    );

    let victim = data.join("degraded/00001.ppm");
    let mut bytes = fs::read(&victim).unwrap();
    let n = bytes.len();
    bytes[n - 5] = bytes[n - 5].wrapping_add(40);
    fs::write(&victim, bytes).unwrap();
    assert_eq!(
        run(argv(&[
            "eval",
            "--verify-pairs",
            "--data",
            s(&data),
            "--out",
            s(&ev)
        ])),
        4
    );
}

#[test]
fn degrade_train_enhance_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(
        run(argv(&["synth", "--config", s(&cfg), "--out", s(&data)])),
        0
    );

    let clear = data.join("clear/00000.ppm");
    let deg = dir.path().join("single/deg.ppm");
    assert_eq!(
        run(argv(&[
            "degrade",
            "--config",
            s(&cfg),
            "--in",
            s(&clear),
            "--out",
            s(&deg)
        ])),
        0
    );
    for f in ["deg.ppm", "deg.t.pfm", "deg.b.pfm", "deg.manifest.json"] {
        assert!(dir.path().join("single").join(f).exists(), "{f}");
    }
    // given maps reproduce the drawn ones
    let deg2 = dir.path().join("single/again.ppm");
    let (t, b) = (
        dir.path().join("single/deg.t.pfm"),
        dir.path().join("single/deg.b.pfm"),
    );
    let args = [
        "degrade",
        "--in",
        s(&clear),
        "--t-map",
        s(&t),
        "--b-map",
        s(&b),
        "--out",
        s(&deg2),
    ];
    assert_eq!(run(argv(&args)), 0);
    assert_eq!(fs::read(&deg).unwrap(), fs::read(&deg2).unwrap());

    let tr = dir.path().join("train");
    assert_eq!(
        run(argv(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data),
            "--out",
            s(&tr)
        ])),
        0
    );
    let ck = tr.join("checkpoint.bin");
    assert!(ck.exists());
    let hist = fs::read_to_string(tr.join("history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 3);
    assert_eq!(json(&tr.join("manifest.json"))["results"]["steps"], 2);

    let enh = dir.path().join("enh/out.ppm");
    assert_eq!(
        run(argv(&[
            "enhance",
            "--ckpt",
            s(&ck),
            "--in",
            s(&deg),
            "--out",
            s(&enh)
        ])),
        0
    );
    let img = undersea::data::read_image(&enh).unwrap();
    assert_eq!(img.shape(), [3, 16, 16]);

    // image the encoder cannot downsample evenly
    let odd = dir.path().join("odd.ppm");
    undersea::data::write_image(&odd, &undersea::Tensor::zeros([3, 18, 18])).unwrap();
    assert_eq!(
        run(argv(&[
            "enhance",
            "--ckpt",
            s(&ck),
            "--in",
            s(&odd),
            "--out",
            s(&enh)
        ])),
        2
    );

    // two separate processes score the checkpoint identically
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for e in [&e1, &e2] {
        let out = bin(&["eval", "--ckpt", s(&ck), "--out", s(e)]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(
        fs::read(e1.join("metrics.csv")).unwrap(),
        fs::read(e2.join("metrics.csv")).unwrap()
    );

    // resume continues the step count
    let more = dir.path().join("more");
    assert_eq!(
        run(argv(&[
            "train",
            "--resume",
            s(&ck),
            "--steps",
            "3",
            "--data",
            s(&data),
            "--out",
            s(&more)
        ])),
        0
    );
    assert_eq!(
        fs::read_to_string(more.join("history.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn identical_invocations_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ab");
    let run_once = || {
        let code = run(argv(&[
            "ablate",
            "--axis",
            "fusion",
            "--config",
            s(&cfg),
            "--seed",
            "3",
            "--out",
            s(&out),
        ]));
        assert_eq!(code, 0);
        let read = |p: &str| fs::read_to_string(out.join(p)).unwrap();
        (read("ablation.csv"), read("manifest.json"))
    };
    let (csv_a, man_a) = run_once();
    let (csv_b, man_b) = run_once();
    assert_eq!(csv_a, csv_b);
    assert_eq!(man_a, man_b);
    let lines: Vec<_> = csv_a.lines().collect();
    assert_eq!(lines.len(), 4);
    for (line, name) in lines[1..].iter().zip(["residual", "concat", "direct"]) {
        assert!(line.starts_with(&format!("fusion,{name},")), "{line}");
    }
}

#[test]
fn ablate_prints_csv_and_checks_psi() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("ab");
    let res = bin(&[
        "ablate",
        "--axis",
        "enhancer",
        "--config",
        s(&cfg),
        "--steps",
        "1",
        "--out",
        s(&out),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert_eq!(stdout.lines().next(), Some(undersea::ablation::CSV_HEADER));
    assert_eq!(stdout.lines().count(), 4);
    let m = json(&out.join("manifest.json"));
    assert_eq!(
        m["results"]["enhancer_params"]["physics"],
        m["results"]["enhancer_params"]["none"]
    );
    assert_eq!(
        fs::read_to_string(out.join("ablation.csv")).unwrap(),
        stdout
    );
}

#[test]
fn gradcheck_toy_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let res = bin(&[
        "gradcheck",
        "--preset",
        "toy",
        "--coords",
        "30",
        "--out",
        s(&out),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.starts_with("max relative error "), "{stdout}");
    let r = json(&out.join("gradcheck.json"));
    assert_eq!(r["checked"], 30);
    assert!(r["max_rel_error"].as_f64().unwrap() <= 1e-3);
    // a step far too coarse for the network is reported as a numeric failure
    let res = bin(&[
        "gradcheck",
        "--coords",
        "10",
        "--step",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(res.status.code(), Some(4));
}
