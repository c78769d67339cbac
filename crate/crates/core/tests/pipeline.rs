use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use socl::data::{cache_top_maps, Manifest, MANIFEST_FILE};
use socl::top_prior::TopConfig;
use socl::tracker::{read_jsonl, Metrics};

fn socl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_socl")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = socl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, relative path and contents, sorted.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// metrics.csv without the wall-clock column.
fn losses(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--seed", "5", "--videos", "6", "--frames", "6", "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn full_pipeline_runs_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (data, data2) = (t.join("data"), t.join("data2"));
    gen(&data, &[]);
    gen(&data2, &[]);
    assert_eq!(snapshot(&data), snapshot(&data2));

    let (cache, cache2) = (t.join("cache"), t.join("cache2"));
    let out = ok(&["top", "--seed", "1", "--data", s(&data), "--cache", s(&cache), "--dump", s(&t.join("dump"))]);
    assert!(out.contains("computed 36 maps, reused 0"), "{out}");
    let out = ok(&["top", "--seed", "1", "--data", s(&data), "--cache", s(&cache)]);
    assert!(out.contains("computed 0 maps, reused 36"), "{out}");
    ok(&["top", "--seed", "1", "--data", s(&data), "--cache", s(&cache2)]);
    assert_eq!(snapshot(&cache), snapshot(&cache2));
    assert_eq!(std::fs::read_dir(t.join("dump")).unwrap().count(), 36);

    let config = t.join("train.json");
    std::fs::write(&config, r#"{"N": 2, "steps": 6, "log_interval": 1, "checkpoint_interval": 3}"#).unwrap();
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--config", s(&config), "--seed", "2", "--data", s(&data), "--cache", s(&cache), "--out", s(out)];
        args.extend_from_slice(extra);
        ok(&args)
    };
    let (run1, run2) = (t.join("run1"), t.join("run2"));
    train(&run1, &[]);
    train(&run2, &[]);
    let ckpt = std::fs::read(run1.join("model.ckpt")).unwrap();
    assert_eq!(ckpt, std::fs::read(run2.join("model.ckpt")).unwrap());
    assert_eq!(losses(&run1), losses(&run2));
    assert_eq!(losses(&run1).len(), 7);
    assert!(run1.join("config.json").exists());

    // stop at step 3, then resume to 6
    let run3 = t.join("run3");
    train(&run3, &["--steps", "3"]);
    train(&run3, &["--resume"]);
    assert_eq!(std::fs::read(run3.join("model.ckpt")).unwrap(), ckpt);
    assert_eq!(losses(&run3), losses(&run1));

    let tracks = t.join("tracks");
    ok(&["track", "--data", s(&data), "--model", s(&run1.join("model.ckpt")), "--out", s(&tracks)]);
    let metrics = t.join("metrics.json");
    ok(&["eval", "--data", s(&data), "--tracks", s(&tracks), "--out", s(&metrics)]);
    let m: Metrics = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m.frames, 36);
    assert!((0.0..=1.0).contains(&m.precision_20));

    let manifest = Manifest::load(data.join(MANIFEST_FILE)).unwrap();
    let pseudo = t.join("pseudo");
    ok(&["pseudo", "--data", s(&data), "--seed", "0", "--T", "4", "--out", s(&pseudo)]);
    for video in &manifest.videos {
        let traj = read_jsonl(pseudo.join(format!("{}.jsonl", video.id))).unwrap();
        assert_eq!(traj.len(), 6);
        for (p, pt) in traj.iter().zip(&video.points) {
            assert!((p.cx - pt[0]).hypot(p.cy - pt[1]) <= 20.0);
        }
        assert_eq!(traj[4].bbox(), video.boxes[4]);
    }
    let top_boxes = t.join("top_boxes");
    ok(&["pseudo", "--data", s(&data), "--alpha", "0.5", "--cache", s(&cache), "--out", s(&top_boxes)]);
    assert_eq!(std::fs::read_dir(&top_boxes).unwrap().count(), 6);
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (data, test) = (t.join("data"), t.join("test"));
    gen(&data, &[]);
    ok(&["gen-data", "--seed", "9", "--videos", "2", "--frames", "4", "--out", s(&test)]);
    let config = t.join("train.json");
    std::fs::write(&config, r#"{"N": 2, "seed": 4}"#).unwrap();
    let out = t.join("ablate");
    ok(&["ablate", "--config", s(&config), "--data", s(&data), "--cache", s(&t.join("cache")), "--test", s(&test), "--out", s(&out), "--steps", "2"]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["gst_only", "+sns", "+sns+mixup", "full"]);
    let enabled: Vec<usize> = rows
        .iter()
        .map(|r| r.split(',').skip(1).take(3).filter(|f| *f == "1").count())
        .collect();
    assert_eq!(enabled, [0, 1, 2, 3]);
}

#[test]
fn noisy_points_sit_twenty_pixels_off() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("noisy");
    gen(&data, &["--noise", "20"]);
    let m = Manifest::load(data.join(MANIFEST_FILE)).unwrap();
    for v in &m.videos {
        for (p, b) in v.points.iter().zip(&v.boxes) {
            let d = (p[0] - b.cx).hypot(p[1] - b.cy);
            let (w, h) = (m.frame_width as f64, m.frame_height as f64);
            let clipped = p[0] == 0.5 || p[1] == 0.5 || p[0] == w - 0.5 || p[1] == h - 0.5;
            assert!((d - 20.0).abs() < 1e-9 || clipped, "distance {d}");
        }
    }
}

#[test]
fn changed_clip_eta_recomputes_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cache) = (tmp.path().join("data"), tmp.path().join("cache"));
    gen(&data, &[]);
    let m = Manifest::load(data.join(MANIFEST_FILE)).unwrap();
    let cfg = TopConfig { n_random: 200, ..TopConfig::default() };
    assert_eq!(cache_top_maps(&m, &data, &cfg, &cache).unwrap().computed, 36);
    let other = TopConfig { clip_eta: 0.2, ..cfg.clone() };
    assert_eq!(cache_top_maps(&m, &data, &other, &cache).unwrap().computed, 36);
    assert_eq!(cache_top_maps(&m, &data, &other, &cache).unwrap().computed, 0);
}

#[test]
fn reporting_commands() {
    let out = ok(&["cost", "--T", "10"]);
    assert!(out.contains("10\t3.16"), "{out}");
    assert!(out.contains("4.5x faster"), "{out}");
    let out = ok(&["grad-check", "--op", "softmax"]);
    assert!(out.contains("softmax"));
    assert_eq!(socl(&[]).status.code(), Some(1));
    assert_eq!(socl(&["train", "--data", "x", "--cache", "y", "--out", "z"]).status.code(), Some(1));
    assert_eq!(socl(&["eval", "--data", "/nonexistent", "--tracks", "/nonexistent"]).status.code(), Some(2));
    assert_eq!(socl(&["cost", "--T", "10", "--verbose"]).status.code(), Some(1));
}
