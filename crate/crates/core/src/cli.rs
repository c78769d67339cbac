//! Command-line surface. `run` parses arguments, dispatches and maps errors
//! to exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::{grad_check, CHECKED_OPS};
use crate::backbone::{init_backbone, Arch, BackboneParams};
use crate::data::{cache_top_maps, generate_dataset, load_frames, load_top_maps, points_from_boxes, Manifest, SyntheticSpec, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::geometry::BoxF;
use crate::imaging::{encode_pnm, Image};
use crate::socl::Ablation;
use crate::top_prior::{TopConfig, TopMap};
use crate::tracker::{
    evaluate, pseudo_box_from_top, pseudo_boxes_schema, read_jsonl, schema_cost, track_video, write_jsonl, Metrics,
    SchemaConfig, SiameseTracker, TrackPoint, TrackerConfig,
};
use crate::trainer::{fit, TrainConfig, TrainSet};

#[derive(Parser, Debug)]
#[command(name = "socl", version, about = "Point-supervised tracking representations on synthetic video")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with ground truth and point annotations.
    GenData(GenDataArgs),
    /// Compute (or refresh) the TOP cache of a dataset.
    Top(TopArgs),
    /// Train the embedding network.
    Train(TrainArgs),
    /// Track every video from its first ground-truth box.
    Track(TrackArgs),
    /// Pseudo boxes from sparse boxes and points, or from TOP maps.
    Pseudo(PseudoArgs),
    /// Score trajectories against ground truth.
    Eval(EvalArgs),
    /// Per-frame annotation cost of the sparse-box schema.
    Cost(CostArgs),
    /// Finite-difference check of every differentiable operator.
    GradCheck(GradCheckArgs),
    /// Train the four ablation configurations and compare them.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// Shift every point by this many pixels in a random direction.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Mark every T-th frame as box-annotated.
    #[arg(long)]
    sparse_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TopArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Also write every map as a PGM heat map under this directory.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    clip_eta: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOP configuration used to fill the cache on a miss.
    #[arg(long)]
    top_config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    symmetrize: bool,
    /// Continue from `state.bin` in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint; without it, a random network seeded by `--seed`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PseudoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    fail_dist: Option<f64>,
    /// Use the TOP-threshold baseline with this mass instead of tracking.
    #[arg(long)]
    alpha: Option<f64>,
    /// TOP cache for `--alpha`.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    /// Write the metrics document here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long = "T", num_args = 1.., default_values_t = [1usize, 2, 5, 10, 20, 50])]
    t: Vec<usize>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Seed of the random inputs; the check is deterministic either way.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    op: Option<String>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Held-out dataset used for tracking evaluation.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

/// Parse `argv` (program name first), run the command, return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let Some(command) = cli.command else {
        eprintln!("{}", <Cli as clap::CommandFactory>::command().render_help());
        return 1;
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return 1;
        }
        // only the first call in a process can size the global pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match dispatch(command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Top(a) => top(a),
        Command::Train(a) => train(a),
        Command::Track(a) => track(a),
        Command::Pseudo(a) => pseudo(a),
        Command::Eval(a) => eval(a),
        Command::Cost(a) => cost(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// Defaults overlaid with the config file, plus whether the file set `seed`.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, Option<u64>)> {
    let Some(path) = path else {
        return Ok((T::default(), None));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let seed = value.get("seed").or_else(|| value.get("rng_seed")).and_then(|s| s.as_u64());
    let cfg = serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, seed))
}

fn require_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    flag.or(file)
        .ok_or_else(|| Error::InvalidArgument("--seed is required (or a \"seed\" entry in --config)".into()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::load(dir.join(MANIFEST_FILE))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let (mut spec, file_seed): (SyntheticSpec, _) = load_config(a.config.as_deref())?;
    spec.seed = require_seed(a.seed, file_seed)?;
    if let Some(v) = a.videos {
        spec.n_videos = v;
    }
    if let Some(f) = a.frames {
        spec.frames_per_video = f;
    }
    if let Some(s) = a.size {
        spec.frame_size = s;
    }
    if !(a.noise >= 0.0) {
        return Err(Error::InvalidArgument("--noise must be non-negative".into()));
    }
    let mut manifest = generate_dataset(&spec, &a.out)?;
    if a.noise > 0.0 || a.sparse_every.is_some() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_65);
        manifest = points_from_boxes(&manifest, a.noise, &mut rng);
        for v in manifest.videos.iter_mut() {
            v.sparse_every = a.sparse_every;
        }
        manifest.save(a.out.join(MANIFEST_FILE))?;
    }
    println!("wrote {} videos, {} frames to {}", manifest.videos.len(), manifest.frame_count(), a.out.display());
    Ok(())
}

/// Min-max scale a map to 0-255 and write it as binary PGM. A constant map
/// becomes mid gray.
pub fn dump_top_visual(map: &TopMap, path: impl AsRef<Path>) -> Result<()> {
    let v = map.values();
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let px: Vec<u8> = if hi > lo {
        v.iter().map(|x| ((x - lo) / (hi - lo) * 255.0).round() as u8).collect()
    } else {
        vec![128; v.len()]
    };
    let img = Image::new(map.width(), map.height(), 1, px)?;
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(&img)).map_err(|e| Error::io(path, e))
}

fn top(a: TopArgs) -> Result<()> {
    let (mut cfg, file_seed): (TopConfig, _) = load_config(a.config.as_deref())?;
    cfg.rng_seed = require_seed(a.seed, file_seed)?;
    if let Some(e) = a.clip_eta {
        cfg.clip_eta = e;
    }
    let manifest = load_manifest(&a.data)?;
    let report = cache_top_maps(&manifest, &a.data, &cfg, &a.cache)?;
    if let Some(dump) = &a.dump {
        std::fs::create_dir_all(dump).map_err(|e| Error::io(dump, e))?;
        let maps = load_top_maps(&manifest, &a.cache)?;
        for (v, video) in manifest.videos.iter().enumerate() {
            for (f, m) in maps[v].iter().enumerate() {
                dump_top_visual(m, dump.join(format!("{}_{f:03}.pgm", video.id)))?;
            }
        }
    }
    println!("computed {} maps, reused {}", report.computed, report.reused);
    Ok(())
}

fn load_top_config(path: Option<&Path>) -> Result<TopConfig> {
    load_config::<TopConfig>(path).map(|(c, _)| c)
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut cfg, file_seed): (TrainConfig, _) = load_config(a.config.as_deref())?;
    cfg.seed = require_seed(a.seed, file_seed)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(ab) = &a.ablation {
        cfg.ablation = Ablation::parse(ab)?;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if a.symmetrize {
        cfg.symmetrize = true;
    }
    cfg.validate()?;
    let manifest = load_manifest(&a.data)?;
    let set = TrainSet::load(&manifest, &a.data, &load_top_config(a.top_config.as_deref())?, &a.cache)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_json(&cfg, &a.out.join("config.json"))?;
    let (state, report) = fit(&set, &Arch::desk(), &cfg, &a.out, a.resume)?;
    let last = report.losses.last().map_or(f64::NAN, |l| l.1);
    println!("trained to step {} (last loss {last:.4}); checkpoint {}", state.step, report.checkpoint.display());
    Ok(())
}

fn model_params(model: Option<&Path>, seed: Option<u64>) -> Result<BackboneParams> {
    let arch = Arch::desk();
    match model {
        Some(p) => BackboneParams::load(p, &arch),
        None => init_backbone(&arch, require_seed(seed, None)?),
    }
}

fn track(a: TrackArgs) -> Result<()> {
    let (cfg, file_seed): (TrackerConfig, _) = load_config(a.config.as_deref())?;
    let params = model_params(a.model.as_deref(), a.seed.or(file_seed))?;
    let manifest = load_manifest(&a.data)?;
    let frames = load_frames(&manifest, &a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (v, video) in manifest.videos.iter().enumerate() {
        let traj = track_video(&params, &frames[v], &video.boxes[0], &cfg)?;
        write_jsonl(&traj, a.out.join(format!("{}.jsonl", video.id)))?;
    }
    println!("tracked {} videos", manifest.videos.len());
    Ok(())
}

fn pseudo(a: PseudoArgs) -> Result<()> {
    let (mut schema, file_seed): (SchemaConfig, _) = load_config(a.config.as_deref())?;
    if let Some(t) = a.t {
        schema.t = t;
    }
    if let Some(d) = a.fail_dist {
        schema.fail_dist = d;
    }
    schema.validate()?;
    let manifest = load_manifest(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let (fw, fh) = (manifest.frame_width as f64, manifest.frame_height as f64);
    if let Some(alpha) = a.alpha {
        let cache = a.cache.as_ref().ok_or_else(|| Error::InvalidArgument("--alpha needs --cache".into()))?;
        let maps = load_top_maps(&manifest, cache)?;
        for (v, video) in manifest.videos.iter().enumerate() {
            let traj = maps[v]
                .iter()
                .enumerate()
                .map(|(frame, m)| {
                    let b = pseudo_box_from_top(m, alpha, fw, fh)?;
                    Ok(TrackPoint { frame, cx: b.cx, cy: b.cy, w: b.w, h: b.h, peak: m.values()[m.argmax()] })
                })
                .collect::<Result<Vec<_>>>()?;
            write_jsonl(&traj, a.out.join(format!("{}.jsonl", video.id)))?;
        }
        println!("wrote TOP pseudo boxes for {} videos", manifest.videos.len());
        return Ok(());
    }
    let params = model_params(a.model.as_deref(), a.seed.or(file_seed))?;
    let frames = load_frames(&manifest, &a.data)?;
    let mut corrections = 0;
    for (v, video) in manifest.videos.iter().enumerate() {
        let sparse: Vec<BoxF> = video.boxes.iter().step_by(schema.t).copied().collect();
        let mut tracker = SiameseTracker::new(&params, TrackerConfig::default());
        let out = pseudo_boxes_schema(&mut tracker, &frames[v], &video.points, &sparse, &schema)?;
        corrections += out.corrected.iter().filter(|&&c| c).count();
        write_jsonl(&out.trajectory(), a.out.join(format!("{}.jsonl", video.id)))?;
    }
    println!(
        "wrote pseudo boxes for {} videos ({corrections} corrections), {:.2} s/frame",
        manifest.videos.len(),
        schema_cost(&schema)?
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let manifest = load_manifest(&a.data)?;
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for video in &manifest.videos {
        let traj = read_jsonl(a.tracks.join(format!("{}.jsonl", video.id)))?;
        pred.push(traj.iter().map(TrackPoint::bbox).collect::<Vec<_>>());
        truth.push(video.boxes.clone());
    }
    let m: Metrics = evaluate(&pred, &truth)?;
    let text = serde_json::to_string_pretty(&m)?;
    println!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, &text).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn cost(a: CostArgs) -> Result<()> {
    let base = SchemaConfig::default();
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "T\tseconds_per_frame");
    for t in a.t {
        let c = schema_cost(&SchemaConfig { t, ..base.clone() })?;
        let _ = writeln!(out, "{t}\t{c:.2}");
    }
    let _ = writeln!(out, "point vs box: {:.1}x faster", base.box_cost_s / base.point_cost_s);
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let ops: Vec<&str> = match &a.op {
        Some(op) => vec![op.as_str()],
        None => CHECKED_OPS.to_vec(),
    };
    let mut worst: f64 = 0.0;
    for op in ops {
        let r = grad_check(op, a.seed)?;
        println!("{:<12} max_rel_err {:.3e} ({} entries)", r.op, r.max_rel_err, r.checked);
        worst = worst.max(r.max_rel_err);
    }
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("gradient check failed: max relative error {worst:.3e}")))
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let (mut base, file_seed): (TrainConfig, _) = load_config(a.config.as_deref())?;
    base.seed = require_seed(a.seed, file_seed)?;
    if let Some(s) = a.steps {
        base.steps = s;
    }
    base.validate()?;
    let manifest = load_manifest(&a.data)?;
    let set = TrainSet::load(&manifest, &a.data, &TopConfig::default(), &a.cache)?;
    let test = load_manifest(&a.test)?;
    let test_frames = load_frames(&test, &a.test)?;
    let truth: Vec<Vec<BoxF>> = test.videos.iter().map(|v| v.boxes.clone()).collect();
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut csv = String::from("ablation,sns,mixup,lst,final_loss,precision_10,precision_20,success_auc\n");
    for ablation in Ablation::ALL {
        let cfg = TrainConfig { ablation, ..base.clone() };
        let dir = a.out.join(ablation.name().replace('+', "plus_"));
        let (state, report) = fit(&set, &Arch::desk(), &cfg, &dir, false)?;
        let mut pred = Vec::new();
        for (v, video) in test.videos.iter().enumerate() {
            let traj = track_video(&state.params, &test_frames[v], &video.boxes[0], &TrackerConfig::default())?;
            pred.push(traj.iter().map(TrackPoint::bbox).collect::<Vec<_>>());
        }
        let m = evaluate(&pred, &truth)?;
        let last = report.losses.last().map_or(f64::NAN, |l| l.1);
        csv.push_str(&format!(
            "{},{},{},{},{last},{},{},{}\n",
            ablation.name(),
            ablation.uses_sns() as u8,
            ablation.uses_mixup() as u8,
            ablation.uses_lst() as u8,
            m.precision_10,
            m.precision_20,
            m.success_auc
        ));
        println!("{:<11} precision@10 {:.3}", ablation.name(), m.precision_10);
    }
    let path = a.out.join("ablation.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_scales_to_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        dump_top_visual(&TopMap::one_hot(3, 2, 4), &p).unwrap();
        let img = crate::imaging::load_image(&p).unwrap();
        let px: Vec<u8> = (0..6).map(|i| img.get(i % 3, i / 3, 0)).collect();
        assert_eq!(px, vec![0, 0, 0, 0, 255, 0]);
        dump_top_visual(&TopMap::uniform(4, 4), &p).unwrap();
        let img = crate::imaging::load_image(&p).unwrap();
        assert!((0..16).all(|i| img.get(i % 4, i / 4, 0) == 128));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["socl"]), 1);
        assert_eq!(run(["socl", "cost", "--T", "10"]), 0);
        assert_eq!(run(["socl", "cost", "--bogus"]), 1);
        assert_eq!(run(["socl", "cost", "--T", "0"]), 1);
        assert_eq!(run(["socl", "gen-data", "--out", "/nonexistent/x"]), 1);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        assert_eq!(run(["socl", "eval", "--data", missing.to_str().unwrap(), "--tracks", "x"]), 2);
    }
}
