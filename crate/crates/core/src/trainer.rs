//! Mini-batch construction, the Adam update and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor};
use crate::backbone::{self, init_backbone, write_atomic, Arch, BackboneParams};
use crate::data::{cache_top_maps, load_frames, load_top_maps, Manifest};
use crate::error::{Error, Result};
use crate::imaging::{crop_normalized, Image};
use crate::socl::{batch_loss, build_samples, Ablation, SampleDraws, SoclConfig};
use crate::top_prior::{mix_seed, pool_mass, TopConfig, TopMap};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.bin";

const STATE_MAGIC: &[u8; 8] = b"SOCLSTAT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Videos per batch.
    #[serde(rename = "N")]
    pub n: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate from `lr_decay_step` on.
    pub lr_decay: f64,
    pub lr_decay_step: Option<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    #[serde(flatten)]
    pub socl: SoclConfig,
    pub symmetrize: bool,
    pub clip_norm: f64,
    /// Side of the square context crop around the point, in frame pixels.
    pub crop_size: f64,
    /// Uniform jitter of the crop center, in frame pixels.
    pub crop_jitter: f64,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 8,
            steps: 2000,
            learning_rate: 3e-4,
            lr_decay: 0.1,
            lr_decay_step: None,
            seed: 0,
            ablation: Ablation::Full,
            socl: SoclConfig::default(),
            symmetrize: false,
            clip_norm: 5.0,
            crop_size: 64.0,
            crop_jitter: 8.0,
            log_interval: 10,
            checkpoint_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.socl.validate()?;
        if self.n < 2 {
            return Err(Error::Config(format!("N must be at least 2, got {}", self.n)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0,1], got {}", self.lr_decay)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.crop_size >= 8.0 && self.crop_jitter >= 0.0 && self.crop_jitter < self.crop_size / 2.0) {
            return Err(Error::Config("crop_size must be >= 8 and crop_jitter below half of it".into()));
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("intervals must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_decay_step {
            Some(s) if step >= s => self.learning_rate * self.lr_decay,
            _ => self.learning_rate,
        }
    }
}

/// Adam state. Moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &BackboneParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} tensors, {} gradients, optimizer holds {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if g.len() != m.len() || p.numel() != m.len() {
                return Err(Error::Shape(format!("tensor {i}: gradient length {} vs {}", g.len(), m.len())));
            }
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *x -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Frames, points and frame-resolution TOP maps held in memory.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub frames: Vec<Vec<Image>>,
    pub points: Vec<Vec<[f64; 2]>>,
    pub tops: Vec<Vec<TopMap>>,
}

impl TrainSet {
    /// Load frames and TOP maps, filling the cache first where it is stale.
    pub fn load(manifest: &Manifest, root: impl AsRef<Path>, top: &TopConfig, cache_dir: impl AsRef<Path>) -> Result<Self> {
        cache_top_maps(manifest, root.as_ref(), top, cache_dir.as_ref())?;
        Ok(Self {
            frames: load_frames(manifest, root)?,
            points: manifest.videos.iter().map(|v| v.points.clone()).collect(),
            tops: load_top_maps(manifest, cache_dir)?,
        })
    }

    pub fn videos(&self) -> usize {
        self.frames.len()
    }
}

/// `N` videos with two frames each, as network input plus feature-grid TOP maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub videos: Vec<usize>,
    pub frames: Vec<[usize; 2]>,
    /// Crop centers in frame pixels, per video and frame.
    pub centers: Vec<[(f64, f64); 2]>,
    /// `[2N, C, S, S]`, frame-major within each video.
    pub inputs: Vec<f64>,
    pub tops: Vec<[TopMap; 2]>,
}

impl Batch {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (v, f) in self.videos.iter().zip(&self.frames) {
            h.update((*v as u64).to_le_bytes());
            h.update((f[0] as u64).to_le_bytes());
            h.update((f[1] as u64).to_le_bytes());
        }
        for x in &self.inputs {
            h.update(x.to_le_bytes());
        }
        for pair in &self.tops {
            for t in pair {
                for x in t.values() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Normalized crop input plus the TOP map pooled onto the crop's feature grid.
pub fn crop_sample(arch: &Arch, frame: &Image, top: &TopMap, cx: f64, cy: f64, side: f64) -> Result<(Vec<f64>, TopMap)> {
    let s = arch.input_size;
    let input = crop_normalized(frame, cx, cy, side, side, s, s, arch.in_channels());
    let scale = side / s as f64;
    let edges = arch.cell_edges();
    let xs: Vec<f64> = edges.iter().map(|e| cx - side / 2.0 + e * scale).collect();
    let ys: Vec<f64> = edges.iter().map(|e| cy - side / 2.0 + e * scale).collect();
    Ok((input, pool_mass(top, &xs, &ys)?))
}

pub fn build_batch(set: &TrainSet, arch: &Arch, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    let n = cfg.n;
    if set.videos() < n {
        return Err(Error::InvalidArgument(format!("dataset has {} videos, batch needs {n}", set.videos())));
    }
    if let Some(v) = set.frames.iter().position(|f| f.len() < 2) {
        return Err(Error::InvalidArgument(format!("video {v} has fewer than 2 frames")));
    }
    let videos = sample(rng, set.videos(), n).into_vec();
    let mut batch = Batch {
        videos: videos.clone(),
        frames: Vec::with_capacity(n),
        centers: Vec::with_capacity(n),
        inputs: Vec::new(),
        tops: Vec::with_capacity(n),
    };
    for &v in &videos {
        let picked = sample(rng, set.frames[v].len(), 2).into_vec();
        let pair = [picked[0], picked[1]];
        let mut centers = [(0.0, 0.0); 2];
        let mut tops = Vec::with_capacity(2);
        for (k, &f) in pair.iter().enumerate() {
            let [px, py] = set.points[v][f];
            let j = cfg.crop_jitter;
            let (dx, dy) = if j > 0.0 { (rng.gen_range(-j..=j), rng.gen_range(-j..=j)) } else { (0.0, 0.0) };
            centers[k] = (px + dx, py + dy);
            let (input, top) = crop_sample(arch, &set.frames[v][f], &set.tops[v][f], px + dx, py + dy, cfg.crop_size)?;
            batch.inputs.extend(input);
            tops.push(top);
        }
        let [a, b]: [TopMap; 2] = tops.try_into().expect("two maps");
        batch.frames.push(pair);
        batch.centers.push(centers);
        batch.tops.push([a, b]);
    }
    Ok(batch)
}

/// Result of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub pair_losses: Vec<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Loss and parameter gradients for one batch, without updating anything.
pub fn loss_and_grads(params: &BackboneParams, batch: &Batch, cfg: &TrainConfig, draws: &SampleDraws) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let arch = &params.arch;
    let n = batch.videos.len();
    let s = arch.input_size;
    let mut g = Graph::new();
    let vars = params.register(&mut g, true);
    let x = g.constant(Tensor::new([2 * n, arch.in_channels(), s, s], batch.inputs.clone())?);
    let out = backbone::forward(&mut g, arch, &vars, x)?;
    let mut feats = Vec::with_capacity(n);
    for v in 0..n {
        feats.push([backbone::feature_rows(&mut g, out, 2 * v)?, backbone::feature_rows(&mut g, out, 2 * v + 1)?]);
    }
    let samples = build_samples(&mut g, &feats, &batch.tops, &cfg.socl, cfg.ablation, draws)?;
    let bl = batch_loss(&mut g, &samples, cfg.ablation, cfg.socl.tau, cfg.symmetrize)?;
    let loss = g.scalar(bl.loss);
    let mut grads = g.backward(bl.loss)?;
    let grads = vars
        .iter()
        .map(|&v| grads.take(v).ok_or_else(|| Error::Shape("parameter without gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, bl.pair_losses, grads))
}

/// Forward, backward, clip to `cfg.clip_norm`, Adam at `lr`.
pub fn train_step(
    params: &mut BackboneParams,
    opt: &mut OptimizerState,
    batch: &Batch,
    cfg: &TrainConfig,
    draws: &SampleDraws,
    lr: f64,
) -> Result<StepOutcome> {
    let (loss, pair_losses, mut grads) = loss_and_grads(params, batch, cfg, draws)?;
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteLoss { pair: 0, term: "gradient".into() });
    }
    if norm > cfg.clip_norm {
        let k = cfg.clip_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    opt.update(&mut params.tensors_mut(), &grads, lr)?;
    Ok(StepOutcome { loss, pair_losses, grad_norm: norm })
}

/// Batch and sample generators for `step`. They are independent of each
/// other and of every earlier step, so a resumed run sees the same draws.
pub fn step_rngs(seed: u64, step: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let base = mix_seed(seed, step);
    let batch = ChaCha8Rng::seed_from_u64(base);
    let mut samples = ChaCha8Rng::seed_from_u64(base);
    samples.set_stream(1);
    (batch, samples)
}

/// Parameters, optimizer and step counter, in full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: BackboneParams,
    pub opt: OptimizerState,
    pub step: usize,
}

impl TrainState {
    pub fn new(arch: &Arch, seed: u64) -> Result<Self> {
        let params = init_backbone(arch, seed)?;
        let opt = OptimizerState::new(&params);
        Ok(Self { params, opt, step: 0 })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        out.extend_from_slice(&self.opt.step.to_le_bytes());
        let groups: [Vec<&[f64]>; 3] = [
            self.params.tensors().into_iter().map(|t| t.data()).collect(),
            self.opt.m.iter().map(|m| m.as_slice()).collect(),
            self.opt.v.iter().map(|v| v.as_slice()).collect(),
        ];
        for group in groups {
            for xs in group {
                out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
                for x in xs {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], arch: &Arch, path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
        if bytes.len() < 24 || &bytes[..8] != STATE_MAGIC {
            return Err(bad("not a training state file"));
        }
        let mut pos = 8;
        let read_u64 = |pos: &mut usize| -> Result<u64> {
            let b = bytes.get(*pos..*pos + 8).ok_or_else(|| bad("truncated"))?;
            *pos += 8;
            Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
        };
        let step = read_u64(&mut pos)? as usize;
        let opt_step = read_u64(&mut pos)?;
        let mut state = Self::new(arch, 0)?;
        state.step = step;
        state.opt.step = opt_step;
        let fill = |dst: &mut [f64], pos: &mut usize| -> Result<()> {
            if read_u64(pos)? as usize != dst.len() {
                return Err(bad("tensor size does not match the architecture"));
            }
            for d in dst.iter_mut() {
                *d = f64::from_bits(read_u64(pos)?);
            }
            Ok(())
        };
        for t in state.params.tensors_mut() {
            fill(t.data_mut(), &mut pos)?;
        }
        for m in state.opt.m.iter_mut() {
            fill(m, &mut pos)?;
        }
        for v in state.opt.v.iter_mut() {
            fill(v, &mut pos)?;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>, arch: &Arch) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, arch, path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// `(step, loss)` for every step run in this call.
    pub losses: Vec<(usize, f64)>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Train from `state` up to `cfg.steps`, writing `metrics.csv`, `model.ckpt`
/// and the resumable `state.bin` under `out_dir`.
pub fn fit_from(set: &TrainSet, cfg: &TrainConfig, state: &mut TrainState, out_dir: impl AsRef<Path>) -> Result<FitReport> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let state_path = out_dir.join(STATE_FILE);

    let mut log = if state.step == 0 {
        let mut f = std::fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
        writeln!(f, "step,loss,wall_ms").map_err(|e| Error::io(&metrics, e))?;
        f
    } else {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&metrics)
            .map_err(|e| Error::io(&metrics, e))?
    };
    let arch = state.params.arch.clone();
    let start = Instant::now();
    let mut losses = Vec::new();
    while state.step < cfg.steps {
        let step = state.step;
        let (mut brng, mut srng) = step_rngs(cfg.seed, step);
        let batch = build_batch(set, &arch, cfg, &mut brng)?;
        let draws = SampleDraws::draw(cfg.n, &cfg.socl, &mut srng);
        let out = train_step(&mut state.params, &mut state.opt, &batch, cfg, &draws, cfg.lr_at(step))?;
        state.step += 1;
        losses.push((step, out.loss));
        if state.step % cfg.log_interval == 0 {
            writeln!(log, "{},{},{}", state.step, out.loss, start.elapsed().as_millis()).map_err(|e| Error::io(&metrics, e))?;
        }
        if state.step % cfg.checkpoint_interval == 0 || state.step == cfg.steps {
            state.params.save(&checkpoint)?;
            state.save(&state_path)?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics, e))?;
    Ok(FitReport { losses, checkpoint, metrics })
}

/// Fresh run, or a resumed one when `out_dir` holds a state file.
pub fn fit(set: &TrainSet, arch: &Arch, cfg: &TrainConfig, out_dir: impl AsRef<Path>, resume: bool) -> Result<(TrainState, FitReport)> {
    let out_dir = out_dir.as_ref();
    let state_path = out_dir.join(STATE_FILE);
    let mut state = if resume && state_path.exists() {
        TrainState::load(&state_path, arch)?
    } else {
        TrainState::new(arch, cfg.seed)?
    };
    let report = fit_from(set, cfg, &mut state, out_dir)?;
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_video;
    use crate::data::SyntheticSpec;
    use crate::top_prior::top_map;

    pub(crate) fn tiny_set(videos: usize, frames: usize) -> TrainSet {
        let spec = SyntheticSpec {
            n_videos: videos,
            frames_per_video: frames,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let top = TopConfig {
            n_random: 300,
            ..TopConfig::default()
        };
        let mut set = TrainSet { frames: vec![], points: vec![], tops: vec![] };
        for v in 0..videos {
            let vid = render_video(&spec, v).unwrap();
            let points: Vec<[f64; 2]> = vid.boxes.iter().map(|b| [b.cx, b.cy]).collect();
            let tops = vid
                .frames
                .iter()
                .zip(&points)
                .enumerate()
                .map(|(f, (img, p))| top_map(img, &crate::top_prior::PointAnnotation::new(p[0], p[1], f), &top).unwrap().quantized())
                .collect();
            set.frames.push(vid.frames);
            set.points.push(points);
            set.tops.push(tops);
        }
        set
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            n: 2,
            steps: 4,
            log_interval: 2,
            checkpoint_interval: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_matches_scalar_loop() {
        let arch = Arch::desk();
        let mut p = init_backbone(&arch, 5).unwrap();
        let mut opt = OptimizerState::new(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // reference state, updated element by element
        let mut theta: Vec<Vec<f64>> = p.tensors().iter().map(|t| t.data().to_vec()).collect();
        let mut m: Vec<Vec<f64>> = theta.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut v = m.clone();
        for t in 1..=3 {
            let grads: Vec<Vec<f64>> = theta.iter().map(|x| x.iter().map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            opt.update(&mut p.tensors_mut(), &grads, 1e-3).unwrap();
            for i in 0..theta.len() {
                for k in 0..theta[i].len() {
                    let g = grads[i][k];
                    m[i][k] = 0.9 * m[i][k] + 0.1 * g;
                    v[i][k] = 0.999 * v[i][k] + 0.001 * g * g;
                    let mh = m[i][k] / (1.0 - 0.9f64.powi(t));
                    let vh = v[i][k] / (1.0 - 0.999f64.powi(t));
                    theta[i][k] -= 1e-3 * mh / (vh.sqrt() + 1e-8);
                }
            }
        }
        for (t, r) in p.tensors().iter().zip(&theta) {
            for (a, b) in t.data().iter().zip(r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_shape_and_determinism() {
        let set = tiny_set(3, 4);
        let arch = Arch::desk();
        let cfg = small_cfg();
        let a = build_batch(&set, &arch, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = build_batch(&set, &arch, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.videos.len(), 2);
        assert_ne!(a.videos[0], a.videos[1]);
        assert!(a.frames.iter().all(|f| f[0] != f[1]));
        assert_eq!(a.inputs.len(), 4 * 3 * 96 * 96);
        assert!(a.tops.iter().flatten().all(|t| t.len() == 100));
        let too_big = TrainConfig { n: 4, ..cfg };
        assert!(build_batch(&set, &arch, &too_big, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let set = tiny_set(2, 2);
        let arch = Arch::desk();
        let cfg = small_cfg();
        let mut state = TrainState::new(&arch, 1).unwrap();
        let before = state.params.clone();
        let (mut br, mut sr) = step_rngs(0, 0);
        let batch = build_batch(&set, &arch, &cfg, &mut br).unwrap();
        let draws = SampleDraws::draw(2, &cfg.socl, &mut sr);
        let out = train_step(&mut state.params, &mut state.opt, &batch, &cfg, &draws, 0.0).unwrap();
        assert!(out.loss.is_finite());
        assert_eq!(state.params, before);
    }

    #[test]
    fn state_roundtrip_is_exact() {
        let arch = Arch::desk();
        let mut s = TrainState::new(&arch, 4).unwrap();
        s.step = 17;
        s.opt.step = 17;
        s.opt.m[0][3] = 0.123456789;
        let back = TrainState::from_bytes(&s.to_bytes(), &arch, Path::new("x")).unwrap();
        assert_eq!(back, s);
        let mut bytes = s.to_bytes();
        bytes.pop();
        assert!(TrainState::from_bytes(&bytes, &arch, Path::new("x")).is_err());
    }

    #[test]
    fn config_json_is_flat() {
        let cfg = TrainConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(v["N"], 8);
        assert_eq!(v["theta_b"], 0.8);
        assert_eq!(v["ablation"], "full");
        let back: TrainConfig = serde_json::from_str(r#"{"N": 4, "tau": 0.2, "ablation": "+sns"}"#).unwrap();
        assert_eq!((back.n, back.socl.tau, back.ablation), (4, 0.2, Ablation::Sns));
        assert_eq!(back.steps, 2000);
        assert!(TrainConfig { n: 1, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn lr_decays_at_configured_step() {
        let cfg = TrainConfig {
            lr_decay_step: Some(10),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(9), 3e-4);
        assert!((cfg.lr_at(10) - 3e-5).abs() < 1e-18);
    }
}
