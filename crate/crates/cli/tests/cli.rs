use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wscd(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_wscd")).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "wscd {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn tiny_config(dir: &Path, data: &Path, run: &Path) -> String {
    let text = format!(
        "[model]\nmode = transwcd_dl\nencoder = tiny\n\
         [cam]\nscales = 1.0\n\
         [dp]\nbranch_channels = 4\nstart_iteration = 4\n\
         [train]\nmax_iterations = 8\nwarmup_iterations = 2\nbatch_size = 2\nlog_interval = 2\neval_interval = 8\nbase_lr = 1e-3\n\
         [data]\nsource = directory\nroot = {}\n\
         [output]\ndir = {}\n",
        data.display(),
        run.display()
    );
    let path = dir.join("tiny.ini");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let d = data.to_str().unwrap();

    let out = stdout(&wscd(&["gen-synth", "--out", d, "--num", "8", "--size", "32", "--seed", "3"]));
    assert!(out.contains("train: 8 pairs"), "{out}");
    for split in ["train", "val", "test"] {
        for sub in ["A", "B", "label"] {
            assert!(data.join(split).join(sub).is_dir(), "{split}/{sub} missing");
        }
    }
    assert_eq!(fs::read_dir(data.join("train/A")).unwrap().count(), 8);

    let config = tiny_config(tmp.path(), &data, &run);
    let out = stdout(&wscd(&["train", "--config", &config, "--set", "train.seed=5"]));
    let steps: Vec<&str> = out.lines().filter(|l| l.contains("\"l_total\"")).collect();
    // every log_interval plus the final iteration
    assert_eq!(steps.len(), 5, "{out}");
    assert!(steps[4].starts_with("{\"iteration\":7,"));
    assert!(steps[2].contains("\"l_cp\"") && !steps[1].contains("\"l_cp\""));
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.starts_with('{')));
    assert!(fs::read_to_string(run.join("config.ini")).unwrap().contains("seed = 5"));
    let ckpt = run.join("checkpoint.wscd");
    assert!(ckpt.is_file());
    let c = ckpt.to_str().unwrap();

    let metrics = tmp.path().join("metrics.json");
    let out = stdout(&wscd(&["eval", "--checkpoint", c, "--data", d, "--split", "test", "--out", metrics.to_str().unwrap()]));
    assert!(out.starts_with("split,precision,recall,f1,oa,iou\ntest,"), "{out}");
    let json = fs::read_to_string(&metrics).unwrap();
    for key in ["\"precision\"", "\"recall\"", "\"f1\"", "\"oa\"", "\"iou\""] {
        assert!(json.contains(key), "{key} missing from {json}");
    }
    wscd(&["eval", "--checkpoint", c, "--data", d, "--split", "val", "--out", metrics.to_str().unwrap(), "--which", "initial"]);

    let first = |sub: &str| {
        let mut names: Vec<_> = fs::read_dir(data.join("test").join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        names[0].display().to_string()
    };
    let mask = tmp.path().join("mask.png");
    let cam = tmp.path().join("cam.png");
    let out = stdout(&wscd(&[
        "predict",
        "--checkpoint",
        c,
        "--pre",
        &first("A"),
        "--post",
        &first("B"),
        "--out-mask",
        mask.to_str().unwrap(),
        "--out-cam",
        cam.to_str().unwrap(),
    ]));
    assert!(out.contains("changed"), "{out}");
    assert!(mask.is_file() && cam.is_file());

    let csv = tmp.path().join("sweep.csv");
    wscd(&[
        "sweep-alpha",
        "--config",
        &config,
        "--alphas",
        "0,0.5",
        "--out",
        csv.to_str().unwrap(),
        "--set",
        "train.max_iterations=4",
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    let width = lines[0].split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == width));
}

#[test]
fn bad_input_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ini");
    let out = Command::new(env!("CARGO_BIN_EXE_wscd"))
        .args(["train", "--config", missing.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ini"));

    let cfg = tmp.path().join("bad.ini");
    fs::write(&cfg, "[train]\nbase_lr = 1e-3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_wscd"))
        .args(["sweep-alpha", "--config", cfg.to_str().unwrap(), "--alphas", "0,x", "--out", "x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha list"));
}
