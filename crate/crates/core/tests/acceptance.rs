//! Acceptance run: one PASS/FAIL line per criterion. The training criteria
//! share their runs and take the better part of an hour on one core.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socl::autodiff::{grad_check, Graph, Tensor, CHECKED_OPS};
use socl::backbone::{init_backbone, Arch, BackboneParams};
use socl::data::{generate_dataset, points_from_boxes, render_video, SyntheticSpec, SyntheticVideo};
use socl::geometry::BoxF;
use socl::imaging::Image;
use socl::socl::{assemble_negatives, build_samples, lst, gst, Ablation, SampleDraws, SampleKind, SoclConfig};
use socl::top_prior::{top_map, PointAnnotation, TopConfig, TopMap};
use socl::tracker::*;
use socl::trainer::{fit, TrainConfig, TrainSet};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cost_arithmetic() -> Outcome {
    let schema = SchemaConfig::default();
    let cost = format!("{:.2}", schema_cost(&schema).map_err(|e| e.to_string())?);
    let ratio = format!("{:.1}", schema.box_cost_s / schema.point_cost_s);
    check(cost == "3.16" && ratio == "4.5", format!("T=10 cost {cost} s/frame, points {ratio}x faster"))
}

fn negative_set_size() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = SoclConfig::default();
    for n in [2, 4, 8] {
        let mut g = Graph::new();
        let feats: Vec<[_; 2]> = (0..n)
            .map(|_| [0, 1].map(|_| g.constant(Tensor::from_fn([25, 4], |_| rng.gen_range(-1.0..1.0)))))
            .collect();
        let tops: Vec<[TopMap; 2]> = (0..n).map(|_| [0, 1].map(|_| common::random_top(&mut rng, 5))).collect();
        let draws = SampleDraws::draw(n, &cfg, &mut rng);
        let batch = build_samples(&mut g, &feats, &tops, &cfg, Ablation::Full, &draws).map_err(|e| e.to_string())?;
        for v in 0..n {
            let negs = assemble_negatives(&batch, v, Ablation::Full).map_err(|e| e.to_string())?;
            let count = |k| negs.iter().filter(|s| s.kind == k).count();
            let got = (negs.len(), count(SampleKind::Gst), count(SampleKind::Sns), count(SampleKind::Mixup));
            if got != (8 * n - 2, 2 * (n - 1), 4 * n, 2 * n) {
                return Err(format!("N={n}: total/gst/sns/mixup {got:?}"));
            }
        }
    }
    Ok("N in {2,4,8}: 8N-2 negatives, split 2(N-1)/4N/2N".into())
}

fn selection_oracles() -> Outcome {
    let instances = 600;
    for (name, f) in common::ORACLES {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for i in 0..instances {
            f(&mut rng).map_err(|e| format!("{name} instance {i}: {e}"))?;
        }
    }
    Ok(format!("{} oracles x {instances} instances", common::ORACLES.len()))
}

fn gradient_suite() -> Outcome {
    let mut worst_op = 0.0f64;
    for op in CHECKED_OPS {
        for seed in 0..5 {
            let r = grad_check(op, seed).map_err(|e| e.to_string())?;
            worst_op = worst_op.max(r.max_rel_err);
        }
    }
    let mut worst_batch = 0.0f64;
    for ablation in Ablation::ALL {
        for seed in 0..3 {
            worst_batch = worst_batch.max(common::micro_batch(ablation, false, seed));
        }
    }
    worst_batch = worst_batch.max(common::micro_batch(Ablation::Full, true, 7));
    check(
        worst_op < 1e-4 && worst_batch < 1e-3,
        format!("{} operators max rel err {worst_op:.1e}, micro-batch {worst_batch:.1e}", CHECKED_OPS.len()),
    )
}

fn lst_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases = 200;
    for i in 0..cases {
        let side = rng.gen_range(2..10);
        let c = rng.gen_range(1..8);
        let top = common::random_top(&mut rng, side);
        let feat = Tensor::from_fn([side * side, c], |_| rng.gen_range(-2.0..2.0));
        let mut g = Graph::new();
        let x = g.constant(feat);
        let a = gst(&mut g, x, &top).map_err(|e| e.to_string())?;
        let b = lst(&mut g, x, &top, 1.0).map_err(|e| e.to_string())?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(g.value(a).data()) != bits(g.value(b).data()) {
            return Err(format!("case {i} differs"));
        }
    }
    Ok(format!("{cases} random maps, bitwise equal"))
}

fn top_quality() -> Outcome {
    let spec = SyntheticSpec::default();
    let cfg = TopConfig::default();
    let (mut near, mut total, mut worst_sum) = (0, 0, 0.0f64);
    for v in 0..spec.n_videos {
        let video = render_video(&spec, v).map_err(|e| e.to_string())?;
        for (f, (img, b)) in video.frames.iter().zip(&video.boxes).enumerate() {
            let map = top_map(img, &PointAnnotation::new(b.cx, b.cy, f), &cfg).map_err(|e| e.to_string())?;
            worst_sum = worst_sum.max((map.values().iter().sum::<f64>() - 1.0).abs());
            let (px, py) = map.peak();
            if (px - b.cx).hypot(py - b.cy) <= 8.0 {
                near += 1;
            }
            total += 1;
        }
    }
    let frac = near as f64 / total as f64;
    check(
        frac >= 0.95 && worst_sum <= 1e-6,
        format!("peak within 8 px on {near}/{total} frames ({:.1}%), worst |sum-1| {worst_sum:.1e}", 100.0 * frac),
    )
}

/// Held-out protocol shared by the training criteria.
struct Bench {
    test: Vec<SyntheticVideo>,
    clean: TrainSet,
    noisy: TrainSet,
    scratch: tempfile::TempDir,
    /// p10/p20 per (seed, ablation) for clean training.
    runs: Vec<(u64, Ablation, Metrics)>,
}

fn load_set(root: &Path, noise: f64) -> socl::Result<TrainSet> {
    let spec = SyntheticSpec::default();
    let data = root.join(format!("data_{noise}"));
    let mut manifest = generate_dataset(&spec, &data)?;
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_65);
        manifest = points_from_boxes(&manifest, noise, &mut rng);
    }
    TrainSet::load(&manifest, &data, &TopConfig::default(), root.join(format!("cache_{noise}")))
}

impl Bench {
    fn new() -> socl::Result<Self> {
        let scratch = tempfile::tempdir().map_err(|e| socl::Error::InvalidArgument(e.to_string()))?;
        let tspec = SyntheticSpec { n_videos: 32, frames_per_video: 48, seed: 1000, ..SyntheticSpec::default() };
        let test = (0..tspec.n_videos).map(|v| render_video(&tspec, v)).collect::<socl::Result<_>>()?;
        let clean = load_set(scratch.path(), 0.0)?;
        let noisy = load_set(scratch.path(), 20.0)?;
        Ok(Self { test, clean, noisy, scratch, runs: vec![] })
    }

    fn eval(&self, params: &BackboneParams) -> socl::Result<Metrics> {
        let cfg = TrackerConfig::default();
        let (mut pred, mut truth) = (vec![], vec![]);
        for v in &self.test {
            let traj = track_video(params, &v.frames, &v.boxes[0], &cfg)?;
            pred.push(traj.iter().map(|p| p.bbox()).collect());
            truth.push(v.boxes.clone());
        }
        evaluate(&pred, &truth)
    }

    fn train(&self, set: &TrainSet, seed: u64, ablation: Ablation, tag: &str) -> socl::Result<Metrics> {
        let t = Instant::now();
        let cfg = TrainConfig { seed, ablation, ..TrainConfig::default() };
        let out = self.scratch.path().join(format!("{tag}_{}_{seed}", ablation.name()));
        let (state, _) = fit(set, &Arch::desk(), &cfg, out, false)?;
        let m = self.eval(&state.params)?;
        eprintln!(
            "  {tag} seed {seed} {:<11} p10 {:.3} p20 {:.3} ({:.0} s)",
            ablation.name(),
            m.precision_10,
            m.precision_20,
            t.elapsed().as_secs_f64()
        );
        Ok(m)
    }

    fn clean_run(&self, seed: u64, ablation: Ablation) -> Result<&Metrics, String> {
        let run = self.runs.iter().find(|r| r.0 == seed && r.1 == ablation);
        run.map(|r| &r.2).ok_or_else(|| format!("no clean {} run for seed {seed}", ablation.name()))
    }
}

fn ablation_ordering(bench: &mut Bench) -> Outcome {
    for seed in 0..3 {
        for ablation in Ablation::ALL {
            let m = bench.train(&bench.clean, seed, ablation, "clean").map_err(|e| e.to_string())?;
            bench.runs.push((seed, ablation, m));
        }
    }
    let mut ordered = 0;
    let mut margin_ok = true;
    let mut detail = vec![];
    for seed in 0..3 {
        let p10: Vec<f64> = Ablation::ALL.iter().map(|&a| bench.clean_run(seed, a).map(|m| m.precision_10)).collect::<Result<_, _>>()?;
        if p10.windows(2).all(|w| w[1] >= w[0]) {
            ordered += 1;
        }
        margin_ok &= p10[3] >= p10[0] + 0.05;
        detail.push(format!("seed {seed} [{}]", p10.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(" ")));
    }
    check(ordered >= 2 && margin_ok, format!("p10 chains {}; ordered in {ordered}/3", detail.join(", ")))
}

fn noise_robustness(bench: &Bench) -> Outcome {
    let clean = bench.clean_run(0, Ablation::Full)?.precision_10;
    let noisy = bench.train(&bench.noisy, 0, Ablation::Full, "noisy").map_err(|e| e.to_string())?.precision_10;
    check(clean - noisy <= 0.03, format!("p10 clean {clean:.3}, 20 px noise {noisy:.3}, drop {:.3}", clean - noisy))
}

fn tracking_sanity(bench: &Bench) -> Outcome {
    let random = init_backbone(&Arch::desk(), 0).map_err(|e| e.to_string())?;
    let base = bench.eval(&random).map_err(|e| e.to_string())?.precision_20;
    let full = bench.clean_run(0, Ablation::Full)?.precision_20;
    check(full - base >= 0.20, format!("p20 full {full:.3}, random init {base:.3}, gap {:.3}", full - base))
}

/// Replays scripted centers, including wild and non-finite ones.
struct Wild {
    centers: Vec<[f64; 2]>,
    at: usize,
}

impl CenterTracker for Wild {
    fn init(&mut self, _: &Image, _: &BoxF) -> socl::Result<()> {
        self.at += 1;
        Ok(())
    }

    fn step(&mut self, _: &Image) -> socl::Result<(f64, f64, f64)> {
        let [x, y] = self.centers[self.at];
        self.at += 1;
        Ok((x, y, 0.5))
    }

    fn recenter(&mut self, _: f64, _: f64) {}
}

fn worst_offset(out: &SchemaOutput, points: &[[f64; 2]]) -> f64 {
    out.boxes.iter().zip(points).map(|(b, p)| (b.cx - p[0]).hypot(b.cy - p[1])).fold(0.0, |a, d| if d.is_nan() { f64::INFINITY } else { a.max(d) })
}

fn sparse_boxes(points: &[[f64; 2]], t: usize) -> Vec<BoxF> {
    points.iter().step_by(t).map(|p| BoxF::new(p[0], p[1], 24.0, 20.0)).collect()
}

fn schema_invariant() -> Outcome {
    let schema = SchemaConfig::default();
    let mut worst = 0.0f64;
    let mut runs = 0;

    // nominal: the real tracker on synthetic videos, clean and noisy points
    let params = init_backbone(&Arch::desk(), 0).map_err(|e| e.to_string())?;
    let spec = SyntheticSpec { n_videos: 6, frames_per_video: 24, seed: 77, ..SyntheticSpec::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in 0..spec.n_videos {
        let video = render_video(&spec, v).map_err(|e| e.to_string())?;
        for noise in [0.0, 20.0] {
            let points: Vec<[f64; 2]> = video
                .boxes
                .iter()
                .map(|b| {
                    let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    [b.cx + noise * a.cos(), b.cy + noise * a.sin()]
                })
                .collect();
            let mut tracker = SiameseTracker::new(&params, TrackerConfig::default());
            let out = pseudo_boxes_schema(&mut tracker, &video.frames, &points, &sparse_boxes(&points, schema.t), &schema)
                .map_err(|e| e.to_string())?;
            worst = worst.max(worst_offset(&out, &points));
            runs += 1;
        }
    }

    // adversarial: scripted trackers that jump, explode or return NaN
    let blank = Image::filled(8, 8, 3, 0).map_err(|e| e.to_string())?;
    for _ in 0..500 {
        let frames = rng.gen_range(1..40);
        let t = rng.gen_range(1..12);
        let points: Vec<[f64; 2]> = (0..frames).map(|_| [rng.gen_range(-50.0..500.0), rng.gen_range(-50.0..500.0)]).collect();
        let centers: Vec<[f64; 2]> = points
            .iter()
            .map(|p| match rng.gen_range(0..6) {
                0 => [f64::NAN, p[1]],
                1 => [f64::INFINITY, f64::NEG_INFINITY],
                2 => [p[0] + 20.0, p[1]],
                3 => [p[0] + rng.gen_range(-1e6..1e6), p[1] + rng.gen_range(-1e6..1e6)],
                4 => [p[0] + 14.0, p[1] + 14.5],
                _ => [p[0] + rng.gen_range(-30.0..30.0), p[1] + rng.gen_range(-30.0..30.0)],
            })
            .collect();
        let schema = SchemaConfig { t, ..SchemaConfig::default() };
        let mut tracker = Wild { centers, at: 0 };
        let out = pseudo_boxes_schema(&mut tracker, &vec![blank.clone(); frames], &points, &sparse_boxes(&points, t), &schema)
            .map_err(|e| e.to_string())?;
        worst = worst.max(worst_offset(&out, &points));
        runs += 1;
    }
    check(worst <= schema.fail_dist, format!("{runs} runs, worst center offset {worst:.2} px"))
}

fn socl(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_socl")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

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

/// metrics.csv carries a wall-clock column; everything else must match.
fn without_wall_clock(files: Vec<(PathBuf, Vec<u8>)>) -> Vec<(PathBuf, Vec<u8>)> {
    files
        .into_iter()
        .map(|(p, bytes)| {
            if p.file_name().is_some_and(|n| n == "metrics.csv") {
                let text = String::from_utf8_lossy(&bytes).lines().map(|l| l.rsplit_once(',').map_or(l, |s| s.0).to_string()).collect::<Vec<_>>().join("\n");
                (p, text.into_bytes())
            } else {
                (p, bytes)
            }
        })
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let config = t.join("train.json");
    std::fs::write(&config, r#"{"N": 3, "steps": 20, "log_interval": 5, "checkpoint_interval": 10}"#).map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        let d = t.join(run);
        socl(&["gen-data", "--seed", "11", "--videos", "6", "--frames", "5", "--out", &s(&d.join("data"))])?;
        socl(&["top", "--seed", "11", "--data", &s(&d.join("data")), "--cache", &s(&d.join("cache"))])?;
        socl(&[
            "train", "--config", &s(&config), "--seed", "4", "--data", &s(&d.join("data")), "--cache", &s(&d.join("cache")),
            "--out", &s(&d.join("run")),
        ])?;
    }
    let mut differing = vec![];
    for part in ["data", "cache", "run"] {
        let (a, b) = (snapshot(&t.join("a").join(part)), snapshot(&t.join("b").join(part)));
        if a.is_empty() || without_wall_clock(a) != without_wall_clock(b) {
            differing.push(part);
        }
    }
    check(differing.is_empty(), format!("gen-data, top, train artifacts identical across runs; differing: {differing:?}"))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag} {name}: {detail}");
    };
    report(1, "cost arithmetic", cost_arithmetic());
    report(2, "negative set size", negative_set_size());
    report(3, "selection oracles", selection_oracles());
    report(4, "gradient suite", gradient_suite());
    report(5, "LST degeneracy", lst_degeneracy());
    report(6, "TOP quality", top_quality());
    match Bench::new() {
        Ok(mut bench) => {
            report(7, "ablation ordering", ablation_ordering(&mut bench));
            report(8, "noise robustness", noise_robustness(&bench));
            report(9, "tracking sanity", tracking_sanity(&bench));
        }
        Err(e) => {
            for (n, name) in [(7, "ablation ordering"), (8, "noise robustness"), (9, "tracking sanity")] {
                report(n, name, Err(format!("data setup failed: {e}")));
            }
        }
    }
    report(10, "pseudo-box invariant", schema_invariant());
    report(11, "determinism", determinism());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
