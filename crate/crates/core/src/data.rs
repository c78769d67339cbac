//! Synthetic videos with ground truth, point annotations and the TOP cache.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::BoxF;
use crate::imaging::{encode_pnm, load_image, Image};
use crate::top_prior::{mix_seed, top_map, PointAnnotation, TopConfig, TopMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub frame_size: usize,
    /// Range of the target's longer side, in pixels.
    pub target_size: (f64, f64),
    /// Range of target speed, pixels per frame.
    pub velocity: (f64, f64),
    /// Relative size change per frame (random sign per video).
    pub scale_drift: f64,
    /// Expected static clutter patches per 1000 px^2 of frame.
    pub clutter_density: f64,
    pub distractors: usize,
    pub occluder_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 64,
            frames_per_video: 16,
            frame_size: 128,
            target_size: (20.0, 32.0),
            velocity: (3.0, 6.0),
            scale_drift: 0.01,
            clutter_density: 5.0,
            distractors: 2,
            occluder_prob: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.target_size;
        let grow = (1.0 + self.scale_drift.abs()).powi(self.frames_per_video as i32);
        if !(lo >= 4.0 && lo <= hi && hi * grow * 1.5 < self.frame_size as f64) {
            return Err(Error::Config(format!(
                "target size range ({lo}, {hi}) does not fit {} px frames",
                self.frame_size
            )));
        }
        if self.n_videos == 0 || self.frames_per_video == 0 {
            return Err(Error::Config("need at least one video and one frame".into()));
        }
        if !(self.velocity.0 >= 0.0 && self.velocity.0 <= self.velocity.1) {
            return Err(Error::Config("velocity range must be ordered and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.occluder_prob) || self.clutter_density < 0.0 {
            return Err(Error::Config("occluder_prob must be in [0,1] and clutter_density >= 0".into()));
        }
        Ok(())
    }
}

/// One rendered video held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Vec<Image>,
    pub boxes: Vec<BoxF>,
    /// Distractor boxes per frame.
    pub distractors: Vec<Vec<BoxF>>,
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    Checker { period: f64 },
    Stripes { period: f64, angle: f64 },
    Dots { period: f64 },
}

impl Pattern {
    fn random(kind: usize, rng: &mut ChaCha8Rng) -> Self {
        let period = rng.gen_range(3.0..6.0);
        match kind {
            0 => Pattern::Checker { period },
            1 => Pattern::Stripes { period, angle: rng.gen_range(0.0..std::f64::consts::PI) },
            _ => Pattern::Dots { period },
        }
    }

    fn kind(&self) -> usize {
        match self {
            Pattern::Checker { .. } => 0,
            Pattern::Stripes { .. } => 1,
            Pattern::Dots { .. } => 2,
        }
    }

    /// Whether texture coordinate `(u, v)` takes the second color.
    fn alt(&self, u: f64, v: f64) -> bool {
        match *self {
            Pattern::Checker { period } => ((u / period).floor() + (v / period).floor()).rem_euclid(2.0) >= 1.0,
            Pattern::Stripes { period, angle } => ((u * angle.cos() + v * angle.sin()) / period).floor().rem_euclid(2.0) >= 1.0,
            Pattern::Dots { period } => {
                let du = u - period * (u / period).round();
                let dv = v - period * (v / period).round();
                du.hypot(dv) < period / 3.0
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    pattern: Pattern,
    colors: [[u8; 3]; 2],
}

impl Blob {
    fn bbox(&self) -> BoxF {
        BoxF::new(self.cx, self.cy, self.w, self.h)
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / (0.5 * self.w);
        let dy = (y - self.cy) / (0.5 * self.h);
        dx * dx + dy * dy <= 1.0
    }

    fn color(&self, x: f64, y: f64) -> [u8; 3] {
        self.colors[self.pattern.alt(x - self.cx, y - self.cy) as usize]
    }

    /// Advance one frame, bouncing off the frame borders.
    fn step(&mut self, size: f64) {
        self.cx += self.vx;
        self.cy += self.vy;
        let (hw, hh) = (0.5 * self.w + 1.0, 0.5 * self.h + 1.0);
        if self.cx < hw || self.cx > size - hw {
            self.vx = -self.vx;
            self.cx = self.cx.clamp(hw, size - hw);
        }
        if self.cy < hh || self.cy > size - hh {
            self.vy = -self.vy;
            self.cy = self.cy.clamp(hh, size - hh);
        }
    }
}

fn vivid(rng: &mut ChaCha8Rng) -> [u8; 3] {
    // one strong channel, one weak, one random
    let mut c = [rng.gen_range(200..=255u8), rng.gen_range(0..60u8), rng.gen_range(0..=255u8)];
    let perm = rng.gen_range(0..6);
    let order = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][perm];
    let src = c;
    for (i, &o) in order.iter().enumerate() {
        c[o] = src[i];
    }
    c
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter().zip(&b).map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs()).sum()
}

/// Two vivid colors far enough apart that the texture is visible.
fn distinct_pair(rng: &mut ChaCha8Rng) -> [[u8; 3]; 2] {
    let a = vivid(rng);
    loop {
        let b = vivid(rng);
        if color_distance(a, b) >= 200 {
            return [a, b];
        }
    }
}

fn velocity(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let speed = rng.gen_range(spec.velocity.0..=spec.velocity.1);
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    (speed * a.cos(), speed * a.sin())
}

fn random_blob(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, pattern: Pattern, colors: [[u8; 3]; 2]) -> Blob {
    let size = spec.frame_size as f64;
    let long = rng.gen_range(spec.target_size.0..=spec.target_size.1);
    let aspect = rng.gen_range(0.7..1.0);
    let (w, h) = if rng.gen_bool(0.5) { (long, long * aspect) } else { (long * aspect, long) };
    let (vx, vy) = velocity(spec, rng);
    Blob {
        cx: rng.gen_range(0.5 * w + 2.0..size - 0.5 * w - 2.0),
        cy: rng.gen_range(0.5 * h + 2.0..size - 0.5 * h - 2.0),
        w,
        h,
        vx,
        vy,
        pattern,
        colors,
    }
}

/// Move `d` so that its box overlaps `target` by IoU at most `max_iou`.
fn separate(d: &mut Blob, target: &BoxF, size: f64, max_iou: f64) {
    if d.bbox().iou(target) <= max_iou {
        return;
    }
    // nearest grid position that satisfies the bound
    let (hw, hh) = (0.5 * d.w + 1.0, 0.5 * d.h + 1.0);
    let mut best: Option<(f64, f64, f64)> = None;
    for gy in 0..9 {
        for gx in 0..9 {
            let cx = hw + (size - 2.0 * hw) * gx as f64 / 8.0;
            let cy = hh + (size - 2.0 * hh) * gy as f64 / 8.0;
            let b = BoxF::new(cx, cy, d.w, d.h);
            if b.iou(target) > max_iou {
                continue;
            }
            let dist = (cx - d.cx).hypot(cy - d.cy);
            if best.map_or(true, |(_, _, bd)| dist < bd) {
                best = Some((cx, cy, dist));
            }
        }
    }
    if let Some((cx, cy, _)) = best {
        d.cx = cx;
        d.cy = cy;
        d.vx = -d.vx;
        d.vy = -d.vy;
    }
}

/// Render video `index` of `spec` in memory. Deterministic in `(spec, index)`.
pub fn render_video(spec: &SyntheticSpec, index: usize) -> Result<SyntheticVideo> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index));
    let n = spec.frame_size;
    let size = n as f64;

    // low-frequency muted background plus static clutter
    let base: [f64; 3] = [rng.gen_range(70.0..170.0), rng.gen_range(70.0..170.0), rng.gen_range(70.0..170.0)];
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.02..0.08),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                [rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0)],
            )
        })
        .collect();
    let mut background = vec![0u8; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let mut v = base[c];
                for (f, a, p, amp) in &waves {
                    v += amp[c] * ((x as f64 * a.cos() + y as f64 * a.sin()) * f + p).sin();
                }
                background[(y * n + x) * 3 + c] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    let n_clutter = (spec.clutter_density * size * size / 1000.0).round() as usize;
    for _ in 0..n_clutter {
        let (w, h) = (rng.gen_range(2..7usize), rng.gen_range(2..7usize));
        let (x0, y0) = (rng.gen_range(0..n - w), rng.gen_range(0..n - h));
        let shade: [u8; 3] = [rng.gen_range(40..220), rng.gen_range(40..220), rng.gen_range(40..220)];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                background[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&shade);
            }
        }
    }

    let kind = rng.gen_range(0..3);
    let pattern = Pattern::random(kind, &mut rng);
    let colors = distinct_pair(&mut rng);
    let mut target = random_blob(spec, &mut rng, pattern, colors);
    let drift = if rng.gen_bool(0.5) { spec.scale_drift } else { -spec.scale_drift };

    // distractors wear the target's colors in another pattern family
    let mut distractors: Vec<Blob> = (0..spec.distractors)
        .map(|_| {
            let p = Pattern::random((pattern.kind() + rng.gen_range(1..3)) % 3, &mut rng);
            let mut d = random_blob(spec, &mut rng, p, colors);
            separate(&mut d, &target.bbox(), size, 0.3);
            d
        })
        .collect();

    let occluder = if rng.gen_bool(spec.occluder_prob) {
        let shade = rng.gen_range(30..226u8);
        Some((rng.gen_range(0.2 * size..0.8 * size), rng.gen_range(-1.0..1.0), rng.gen_range(4.0..7.0), shade))
    } else {
        None
    };

    let mut frames = Vec::with_capacity(spec.frames_per_video);
    let mut boxes = Vec::with_capacity(spec.frames_per_video);
    let mut dboxes = Vec::with_capacity(spec.frames_per_video);
    for f in 0..spec.frames_per_video {
        if f > 0 {
            target.step(size);
            let grow = 1.0 + drift;
            let fits = target.w * grow + 4.0 < size && target.h * grow + 4.0 < size;
            if fits && target.w * grow >= 4.0 && target.h * grow >= 4.0 {
                target.w *= grow;
                target.h *= grow;
            }
            let (hw, hh) = (0.5 * target.w + 1.0, 0.5 * target.h + 1.0);
            target.cx = target.cx.clamp(hw, size - hw);
            target.cy = target.cy.clamp(hh, size - hh);
            for d in distractors.iter_mut() {
                d.step(size);
                separate(d, &target.bbox(), size, 0.3);
            }
        }
        let mut px = background.clone();
        for blob in distractors.iter().chain(std::iter::once(&target)) {
            let b = blob.bbox().pixel_rect(n, n);
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if blob.covers(fx, fy) {
                        px[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&blob.color(fx, fy));
                    }
                }
            }
        }
        if let Some((x, slope, width, shade)) = occluder {
            let x = x + slope * f as f64;
            for y in 0..n {
                for xi in 0..n {
                    if ((xi as f64 + 0.5) - x).abs() < 0.5 * width {
                        px[(y * n + xi) * 3..(y * n + xi) * 3 + 3].fill(shade);
                    }
                }
            }
        }
        frames.push(Image::new(n, n, 3, px)?);
        boxes.push(target.bbox());
        dboxes.push(distractors.iter().map(Blob::bbox).collect());
    }
    Ok(SyntheticVideo {
        frames,
        boxes,
        distractors: dboxes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    /// Frame paths relative to the manifest directory.
    pub frames: Vec<String>,
    pub boxes: Vec<BoxF>,
    pub points: Vec<[f64; 2]>,
    /// Boxes are considered annotated on every `sparse_every`-th frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse_every: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frame_width: usize,
    pub frame_height: usize,
    pub videos: Vec<VideoEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        for v in &self.videos {
            if v.frames.len() != v.boxes.len() || v.frames.len() != v.points.len() {
                return Err(Error::Config(format!(
                    "video {}: {} frames, {} boxes, {} points",
                    v.id,
                    v.frames.len(),
                    v.boxes.len(),
                    v.points.len()
                )));
            }
            for p in &v.points {
                let inside = (0.0..self.frame_width as f64).contains(&p[0]) && (0.0..self.frame_height as f64).contains(&p[1]);
                if !inside {
                    return Err(Error::Config(format!("video {}: point {p:?} outside the frame", v.id)));
                }
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.videos.iter().map(|v| v.frames.len()).sum()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn point(&self, video: usize, frame: usize) -> PointAnnotation {
        let p = self.videos[video].points[frame];
        PointAnnotation::new(p[0], p[1], frame)
    }
}

/// Render `spec` to `out_dir` (frames as PPM plus `manifest.json`). Points are
/// the exact box centers.
pub fn generate_dataset(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let videos: Vec<VideoEntry> = (0..spec.n_videos)
        .into_par_iter()
        .map(|v| -> Result<VideoEntry> {
            let video = render_video(spec, v)?;
            let id = format!("v{v:03}");
            let dir = out_dir.join(&id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut frames = Vec::new();
            for (f, img) in video.frames.iter().enumerate() {
                let rel = format!("{id}/f{f:03}.ppm");
                write_atomic(&out_dir.join(&rel), &encode_pnm(img))?;
                frames.push(rel);
            }
            Ok(VideoEntry {
                id,
                frames,
                points: video.boxes.iter().map(|b| [b.cx, b.cy]).collect(),
                boxes: video.boxes,
                sparse_every: None,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        frame_width: spec.frame_size,
        frame_height: spec.frame_size,
        videos,
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Replace every point with its box center shifted by `noise_px` in a
/// uniformly random direction, clipped to the outermost pixel centers.
pub fn points_from_boxes(manifest: &Manifest, noise_px: f64, rng: &mut impl Rng) -> Manifest {
    let (w, h) = (manifest.frame_width as f64, manifest.frame_height as f64);
    let mut out = manifest.clone();
    for v in out.videos.iter_mut() {
        v.points = v
            .boxes
            .iter()
            .map(|b| {
                if noise_px == 0.0 {
                    return [b.cx, b.cy];
                }
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                [(b.cx + noise_px * a.cos()).clamp(0.5, w - 0.5), (b.cy + noise_px * a.sin()).clamp(0.5, h - 0.5)]
            })
            .collect();
    }
    out
}

/// Hex sha256 over every frame file and the manifest itself.
pub fn dataset_digest(manifest: &Manifest, root: impl AsRef<Path>) -> Result<String> {
    let root = root.as_ref();
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(manifest)?);
    for v in &manifest.videos {
        for f in &v.frames {
            let p = root.join(f);
            hasher.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct CacheIndex {
    config_digest: String,
    entries: BTreeMap<String, CacheEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    file: String,
    frame_digest: String,
}

pub const CACHE_INDEX_FILE: &str = "index.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheReport {
    pub computed: usize,
    pub reused: usize,
}

fn frame_key(video: &VideoEntry, frame: usize) -> String {
    format!("{}/{frame:03}", video.id)
}

fn frame_digest(bytes: &[u8], point: &PointAnnotation) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.update(point.x.to_le_bytes());
    h.update(point.y.to_le_bytes());
    h.update((point.frame_id as u64).to_le_bytes());
    hex::encode(h.finalize())
}

/// Compute (or reuse) the TOP map of every frame under `cache_dir`.
/// Entries are reused only when both the config digest and the frame
/// digest (pixels plus point) match and the file parses.
pub fn cache_top_maps(manifest: &Manifest, root: impl AsRef<Path>, cfg: &TopConfig, cache_dir: impl AsRef<Path>) -> Result<CacheReport> {
    cfg.validate()?;
    let (root, cache_dir) = (root.as_ref(), cache_dir.as_ref());
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let index_path = cache_dir.join(CACHE_INDEX_FILE);
    let config_digest = cfg.digest();
    let old = std::fs::read_to_string(&index_path)
        .ok()
        .and_then(|t| serde_json::from_str::<CacheIndex>(&t).ok())
        .filter(|i| i.config_digest == config_digest)
        .unwrap_or_default();

    let jobs: Vec<(usize, usize)> = manifest
        .videos
        .iter()
        .enumerate()
        .flat_map(|(v, e)| (0..e.frames.len()).map(move |f| (v, f)))
        .collect();
    let results: Vec<(String, CacheEntry, bool)> = jobs
        .par_iter()
        .map(|&(v, f)| -> Result<(String, CacheEntry, bool)> {
            let video = &manifest.videos[v];
            let frame_path = root.join(&video.frames[f]);
            let bytes = std::fs::read(&frame_path).map_err(|e| Error::io(&frame_path, e))?;
            let point = manifest.point(v, f);
            let digest = frame_digest(&bytes, &point);
            let key = frame_key(video, f);
            let file = format!("{}_{f:03}.top", video.id);
            let reusable = old
                .entries
                .get(&key)
                .filter(|e| e.frame_digest == digest && e.file == file)
                .is_some_and(|e| TopMap::load(cache_dir.join(&e.file)).is_ok());
            if !reusable {
                let img = crate::imaging::decode_pnm(&bytes, &frame_path)?;
                top_map(&img, &point, cfg)?.save(cache_dir.join(&file))?;
            }
            Ok((key, CacheEntry { file, frame_digest: digest }, !reusable))
        })
        .collect::<Result<_>>()?;

    let mut report = CacheReport::default();
    let mut index = CacheIndex {
        config_digest,
        entries: BTreeMap::new(),
    };
    for (key, entry, computed) in results {
        if computed {
            report.computed += 1;
        } else {
            report.reused += 1;
        }
        index.entries.insert(key, entry);
    }
    write_atomic(&index_path, serde_json::to_string_pretty(&index)?.as_bytes())?;
    Ok(report)
}

/// Load every cached TOP map, `[video][frame]`.
pub fn load_top_maps(manifest: &Manifest, cache_dir: impl AsRef<Path>) -> Result<Vec<Vec<TopMap>>> {
    let cache_dir = cache_dir.as_ref();
    let index_path = cache_dir.join(CACHE_INDEX_FILE);
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: CacheIndex = serde_json::from_str(&text)?;
    manifest
        .videos
        .iter()
        .map(|v| {
            (0..v.frames.len())
                .map(|f| {
                    let key = frame_key(v, f);
                    let entry = index.entries.get(&key).ok_or_else(|| Error::Format {
                        path: index_path.clone(),
                        reason: format!("no cache entry for {key}"),
                    })?;
                    TopMap::load(cache_dir.join(&entry.file))
                })
                .collect()
        })
        .collect()
}

/// Decode every frame of a manifest, `[video][frame]`.
pub fn load_frames(manifest: &Manifest, root: impl AsRef<Path>) -> Result<Vec<Vec<Image>>> {
    let root: PathBuf = root.as_ref().to_path_buf();
    manifest
        .videos
        .par_iter()
        .map(|v| v.frames.iter().map(|f| load_image(root.join(f))).collect())
        .collect()
}
