//! Target objectness prior (TOP) maps from a single annotated point.
//!
//! Pipeline: proposals centered on the click plus edge-anchored proposals
//! near it, an objectness score per proposal, greedy NMS, per-pixel score
//! accumulation, max-clip of the peak, and a softmax over locations.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxF;
use crate::imaging::{
    downsample2, gradient_magnitude, sobel_magnitude, bin_of, chi_square, Image, IntegralGrid,
    RealGrid, Rect,
};

/// Smallest side any proposal may have, in pixels.
pub const MIN_PROPOSAL_SIDE: f64 = 4.0;
/// Bins per channel for the color-contrast cue.
pub const CONTRAST_BINS: usize = 16;
const BOX_FACTORS: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];
const BOX_ASPECTS: [f64; 3] = [0.5, 1.0, 2.0];

/// A clicked target center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
    pub frame_id: usize,
}

impl PointAnnotation {
    pub fn new(x: f64, y: f64, frame_id: usize) -> Self {
        Self { x, y, frame_id }
    }

    pub(crate) fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        if !(self.x >= 0.0 && self.x < width as f64 && self.y >= 0.0 && self.y < height as f64) {
            return Err(Error::InvalidArgument(format!(
                "point ({}, {}) outside {width}x{height} frame",
                self.x, self.y
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalSource {
    Random,
    Edge,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BoxF,
    pub score: f64,
    pub source: ProposalSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopConfig {
    pub n_random: usize,
    pub n_edge: usize,
    pub edge_radius: f64,
    /// Number of edge-density anchors spawning candidate boxes.
    pub edge_anchors: usize,
    pub nms_iou: f64,
    pub nms_keep: usize,
    pub clip_eta: f64,
    /// Smallest random-proposal side in pixels.
    pub min_scale: f64,
    /// Largest random-proposal side as a fraction of `min(width, height)`.
    pub max_scale_frac: f64,
    pub aspect_range: [f64; 2],
    pub rng_seed: u64,
}

impl Default for TopConfig {
    fn default() -> Self {
        Self {
            n_random: 5000,
            n_edge: 1000,
            edge_radius: 30.0,
            edge_anchors: 200,
            nms_iou: 0.7,
            nms_keep: 64,
            clip_eta: 0.10,
            min_scale: 8.0,
            max_scale_frac: 0.8,
            aspect_range: [1.0 / 3.0, 3.0],
            rng_seed: 0,
        }
    }
}

impl TopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config(format!("nms_iou must be in (0,1), got {}", self.nms_iou)));
        }
        if !(self.clip_eta > 0.0 && self.clip_eta <= 1.0) {
            return Err(Error::Config(format!("clip_eta must be in (0,1], got {}", self.clip_eta)));
        }
        if self.nms_keep == 0 {
            return Err(Error::Config("nms_keep must be at least 1".into()));
        }
        let [a0, a1] = self.aspect_range;
        if !(a0 > 0.0 && a0 <= a1) || !(self.min_scale >= MIN_PROPOSAL_SIDE) {
            return Err(Error::Config("invalid scale or aspect range".into()));
        }
        Ok(())
    }

    fn scale_range(&self, width: usize, height: usize) -> Result<(f64, f64)> {
        let hi = self.max_scale_frac * width.min(height) as f64;
        if hi < self.min_scale {
            return Err(Error::Degenerate(format!(
                "{width}x{height} frame is smaller than the minimum proposal scale {}",
                self.min_scale
            )));
        }
        Ok((self.min_scale, hi))
    }

    /// Stable digest of the configuration, used to key TOP caches.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

/// Random boxes centered on the annotation with log-uniform scale and aspect.
pub fn random_proposals(
    point: &PointAnnotation,
    width: usize,
    height: usize,
    cfg: &TopConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Proposal>> {
    let (lo, hi) = cfg.scale_range(width, height)?;
    point.check_inside(width, height)?;
    let [a0, a1] = cfg.aspect_range;
    let (fw, fh) = (width as f64, height as f64);
    Ok((0..cfg.n_random)
        .map(|_| {
            let side = log_uniform(rng, lo, hi);
            let aspect = log_uniform(rng, a0, a1).sqrt();
            let bbox = BoxF::new(point.x, point.y, side * aspect, side / aspect)
                .clipped(fw, fh, MIN_PROPOSAL_SIDE);
            Proposal {
                bbox,
                score: 0.0,
                source: ProposalSource::Random,
            }
        })
        .collect())
}

/// Edge-anchored proposals near the annotation.
///
/// Edge density (mean gradient magnitude in a window) is evaluated at
/// `sqrt(2)`-spaced window sizes; its local maxima within reach of the point
/// become anchors, and each anchor spawns 5 scales x 3 aspects of jittered
/// boxes. Survivors must be centered within `edge_radius` of the point,
/// contain it, and be no smaller than the minimum proposal scale.
pub fn edge_proposals(
    img: &Image,
    point: &PointAnnotation,
    cfg: &TopConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Proposal>> {
    let (width, height) = (img.width(), img.height());
    let (lo, hi) = cfg.scale_range(width, height)?;
    point.check_inside(width, height)?;
    let grad = gradient_magnitude(img);
    let integral = IntegralGrid::from_grid(&grad);
    if integral.at(width, height) == 0.0 || cfg.n_edge == 0 || cfg.edge_anchors == 0 {
        return Ok(Vec::new());
    }

    let mut scales = Vec::new();
    let mut s = lo;
    while s <= hi + 1e-9 {
        scales.push(s);
        s *= std::f64::consts::SQRT_2;
    }
    let per_scale = cfg.edge_anchors.div_ceil(scales.len());
    // anchors further than this cannot yield an accepted center
    let reach = cfg.edge_radius + 0.1 * hi;

    let mut anchors: Vec<(f64, f64, f64)> = Vec::new();
    for &scale in &scales {
        let side = scale.round().max(1.0) as usize;
        let step = (side / 4).max(1);
        let gw = width.div_ceil(step);
        let gh = height.div_ceil(step);
        let density = |gx: usize, gy: usize| {
            let (x, y) = (gx * step, gy * step);
            let r = Rect::new(
                x.saturating_sub(side / 2),
                y.saturating_sub(side / 2),
                (x + side.div_ceil(2)).min(width),
                (y + side.div_ceil(2)).min(height),
            );
            integral.rect_sum(r) / r.area() as f64
        };
        let values: Vec<f64> = (0..gh)
            .flat_map(|gy| (0..gw).map(move |gx| (gx, gy)))
            .map(|(gx, gy)| density(gx, gy))
            .collect();
        let mut local: Vec<(f64, usize)> = Vec::new();
        for gy in 0..gh {
            for gx in 0..gw {
                let idx = gy * gw + gx;
                let v = values[idx];
                if v <= 0.0 {
                    continue;
                }
                let (x, y) = ((gx * step) as f64 + 0.5, (gy * step) as f64 + 0.5);
                if (x - point.x).hypot(y - point.y) > reach {
                    continue;
                }
                let mut is_max = true;
                'nb: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (gx as i64 + dx, gy as i64 + dy);
                        if (dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= gw as i64 || ny >= gh as i64 {
                            continue;
                        }
                        let nidx = ny as usize * gw + nx as usize;
                        let nv = values[nidx];
                        // plateaus keep only their first cell
                        if nv > v || (nv == v && nidx < idx) {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    local.push((v, idx));
                }
            }
        }
        local.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, idx) in local.iter().take(per_scale) {
            let (gx, gy) = (idx % gw, idx / gw);
            anchors.push(((gx * step) as f64 + 0.5, (gy * step) as f64 + 0.5, scale));
        }
    }

    let (fw, fh) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (ax, ay, scale) in anchors {
        for f in BOX_FACTORS {
            for aspect in BOX_ASPECTS {
                let side = f * scale;
                if side < lo {
                    continue;
                }
                let jitter = 0.05 * side;
                let cx = ax + rng.gen_range(-jitter..=jitter);
                let cy = ay + rng.gen_range(-jitter..=jitter);
                if (cx - point.x).hypot(cy - point.y) > cfg.edge_radius {
                    continue;
                }
                let a = aspect.sqrt();
                let bbox = BoxF::new(cx, cy, side * a, side / a).clipped(fw, fh, MIN_PROPOSAL_SIDE);
                // clipping may move the center; re-check the radius contract.
                // Boxes that miss the clicked point describe something else.
                if bbox.center_distance(point.x, point.y) > cfg.edge_radius || !bbox.contains_point(point.x, point.y) {
                    continue;
                }
                out.push(Proposal {
                    bbox,
                    score: 0.0,
                    source: ProposalSource::Edge,
                });
            }
        }
    }
    if out.len() > cfg.n_edge {
        let mut keep = index::sample(rng, out.len(), cfg.n_edge).into_vec();
        keep.sort_unstable();
        out = keep.into_iter().map(|i| out[i]).collect();
    }
    Ok(out)
}

/// Precomputed per-frame tables for the three objectness cues.
pub struct ObjectnessCues {
    width: usize,
    height: usize,
    channels: usize,
    /// gradient integral and frame-mean gradient at scales 1, 1/2, 1/4
    saliency: Vec<(IntegralGrid, f64)>,
    strong_edges: IntegralGrid,
    bin_counts: Vec<IntegralGrid>,
}

impl ObjectnessCues {
    pub fn new(img: &Image) -> Self {
        let (width, height) = (img.width(), img.height());
        let mut plane = img.luma_plane();
        let (mut w, mut h) = (width, height);
        let mut saliency = Vec::with_capacity(3);
        let mut full_grad = Vec::new();
        for level in 0..3 {
            if level > 0 {
                let (p, w2, h2) = downsample2(&plane, w, h);
                plane = p;
                w = w2;
                h = h2;
            }
            let grad = sobel_magnitude(&plane, w, h);
            let mean = grad.iter().sum::<f64>() / grad.len() as f64;
            saliency.push((IntegralGrid::from_values(w, h, &grad), mean));
            if level == 0 {
                full_grad = grad;
            }
        }

        let mut sorted = full_grad.clone();
        sorted.sort_by(f64::total_cmp);
        let p75 = sorted[(0.75 * (sorted.len() - 1) as f64).floor() as usize];
        let strong: Vec<f64> = full_grad.iter().map(|&g| f64::from(u8::from(g > p75))).collect();
        let strong_edges = IntegralGrid::from_values(width, height, &strong);

        let channels = img.channels();
        let mut bin_counts = Vec::with_capacity(channels * CONTRAST_BINS);
        let mut indicator = vec![0.0; width * height];
        for c in 0..channels {
            for bin in 0..CONTRAST_BINS {
                for (i, ind) in indicator.iter_mut().enumerate() {
                    let v = img.pixels()[i * channels + c];
                    *ind = f64::from(u8::from(bin_of(v, CONTRAST_BINS) == bin));
                }
                bin_counts.push(IntegralGrid::from_values(width, height, &indicator));
            }
        }
        Self {
            width,
            height,
            channels,
            saliency,
            strong_edges,
            bin_counts,
        }
    }

    /// Mean gradient inside the box relative to the frame, averaged over three scales.
    pub fn saliency(&self, r: Rect) -> f64 {
        let mut total = 0.0;
        for (level, (integral, frame_mean)) in self.saliency.iter().enumerate() {
            let f = 1usize << level;
            let (w, h) = (integral.width(), integral.height());
            let mut sr = Rect::new(
                (r.x0 / f).min(w),
                (r.y0 / f).min(h),
                r.x1.div_ceil(f).min(w),
                r.y1.div_ceil(f).min(h),
            );
            if sr.is_empty() {
                sr = Rect::new(sr.x0.min(w - 1), sr.y0.min(h - 1), sr.x0.min(w - 1) + 1, sr.y0.min(h - 1) + 1);
            }
            let mean = integral.rect_sum(sr) / sr.area() as f64;
            if mean + frame_mean > 0.0 {
                total += mean / (mean + frame_mean);
            }
        }
        total / self.saliency.len() as f64
    }

    fn histogram(&self, r: Rect) -> Vec<f64> {
        self.bin_counts.iter().map(|ii| ii.rect_sum(r)).collect()
    }

    /// Chi-square contrast against a surrounding ring of equal area, squashed by `x/(1+x)`.
    pub fn color_contrast(&self, bbox: &BoxF, r: Rect) -> f64 {
        let outer = BoxF::new(
            bbox.cx,
            bbox.cy,
            bbox.w * std::f64::consts::SQRT_2,
            bbox.h * std::f64::consts::SQRT_2,
        )
        .pixel_rect(self.width, self.height);
        let inner = self.histogram(r);
        let ring: Vec<f64> = self
            .histogram(outer)
            .iter()
            .zip(&inner)
            .map(|(o, i)| (o - i).max(0.0))
            .collect();
        let ring_total: f64 = ring.iter().sum();
        let inner_total: f64 = inner.iter().sum();
        if ring_total <= 0.0 || inner_total <= 0.0 {
            return 0.0;
        }
        let a: Vec<f64> = inner.iter().map(|v| v / inner_total).collect();
        let b: Vec<f64> = ring.iter().map(|v| v / ring_total).collect();
        let x = chi_square(&a, &b);
        x / (1.0 + x)
    }

    /// Fraction of strong-gradient pixels in the inner border band.
    pub fn edge_density(&self, r: Rect) -> f64 {
        let band = ((0.1 * r.width().min(r.height()) as f64).round() as usize).max(1);
        let total = self.strong_edges.rect_sum(r);
        let area = r.area() as f64;
        if r.width() <= 2 * band || r.height() <= 2 * band {
            return total / area;
        }
        let inner = Rect::new(r.x0 + band, r.y0 + band, r.x1 - band, r.y1 - band);
        let band_area = area - inner.area() as f64;
        (total - self.strong_edges.rect_sum(inner)) / band_area
    }

    /// Product of the three cue scores, in `[0, 1]`.
    pub fn score(&self, bbox: &BoxF) -> Result<f64> {
        const EPS: f64 = 1e-6;
        if bbox.area() < 16.0 || !(bbox.w > 0.0 && bbox.h > 0.0) {
            return Err(Error::Degenerate(format!("box {bbox:?} smaller than 16 px^2")));
        }
        if bbox.x0() < -EPS
            || bbox.y0() < -EPS
            || bbox.x1() > self.width as f64 + EPS
            || bbox.y1() > self.height as f64 + EPS
        {
            return Err(Error::InvalidArgument(format!("box {bbox:?} outside frame")));
        }
        let r = bbox.pixel_rect(self.width, self.height);
        if r.is_empty() {
            return Err(Error::Degenerate(format!("box {bbox:?} covers no pixel")));
        }
        let s = self.saliency(r) * self.color_contrast(bbox, r) * self.edge_density(r);
        Ok(s.clamp(0.0, 1.0))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Objectness of a single box. Prefer [`ObjectnessCues`] when scoring many boxes.
pub fn objectness(img: &Image, bbox: &BoxF) -> Result<f64> {
    ObjectnessCues::new(img).score(bbox)
}

/// Greedy non-maximum suppression. Equal scores keep input order.
pub fn nms(proposals: &[Proposal], iou_thresh: f64, keep: usize) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Proposal> = Vec::with_capacity(keep.min(proposals.len()));
    for i in order {
        if kept.len() >= keep {
            break;
        }
        let p = proposals[i];
        if kept.iter().all(|k| k.bbox.iou(&p.bbox) <= iou_thresh) {
            kept.push(p);
        }
    }
    kept
}

/// Per-pixel sum of the scores of all boxes covering the pixel, via corner
/// stamps and a 2D prefix sum.
pub fn accumulate_scores(survivors: &[Proposal], width: usize, height: usize) -> Result<RealGrid> {
    if survivors.is_empty() {
        return Err(Error::Degenerate("no proposals to accumulate".into()));
    }
    let stride = width + 1;
    let mut diff = vec![0.0; stride * (height + 1)];
    for p in survivors {
        let r = p.bbox.pixel_rect(width, height);
        if r.is_empty() {
            continue;
        }
        diff[r.y0 * stride + r.x0] += p.score;
        diff[r.y0 * stride + r.x1] -= p.score;
        diff[r.y1 * stride + r.x0] -= p.score;
        diff[r.y1 * stride + r.x1] += p.score;
    }
    let mut grid = RealGrid::zeros(width, height);
    let mut above = vec![0.0; width];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += diff[y * stride + x];
            above[x] += row;
            grid.set(x, y, above[x]);
        }
    }
    Ok(grid)
}

/// Clip every value to the mean of the `ceil(eta * n)` largest values.
pub fn max_clip(grid: &RealGrid, eta: f64) -> Result<RealGrid> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidArgument(format!("eta must be in (0,1], got {eta}")));
    }
    let n = grid.len();
    let k = ((eta * n as f64).ceil() as usize).clamp(1, n);
    let mut scratch = grid.values().to_vec();
    scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let top = &scratch[..k];
    // the mean lies between the extremes; clamping only absorbs rounding
    let (lo, hi) = top.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let level = (top.iter().sum::<f64>() / k as f64).clamp(lo, hi);
    let values = grid.values().iter().map(|&v| v.min(level)).collect();
    RealGrid::new(grid.width(), grid.height(), values)
}

/// A probability distribution over grid locations.
#[derive(Clone, Debug, PartialEq)]
pub struct TopMap {
    grid: RealGrid,
}

impl TopMap {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(grid: RealGrid) -> Result<Self> {
        if grid.values().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("TOP map values must be finite and non-negative".into()));
        }
        let total = grid.sum();
        if (total - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidArgument(format!("TOP map sums to {total}, not 1")));
        }
        Ok(Self { grid })
    }

    /// Normalize arbitrary non-negative mass into a map.
    pub fn from_mass(width: usize, height: usize, mass: Vec<f64>) -> Result<Self> {
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Degenerate("map has no mass".into()));
        }
        let grid = RealGrid::new(width, height, mass.into_iter().map(|v| v / total).collect())?;
        Self::new(grid)
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        let v = 1.0 / (width * height) as f64;
        Self {
            grid: RealGrid::new(width, height, vec![v; width * height]).expect("non-empty"),
        }
    }

    pub fn one_hot(width: usize, height: usize, index: usize) -> Self {
        let mut values = vec![0.0; width * height];
        values[index] = 1.0;
        Self {
            grid: RealGrid::new(width, height, values).expect("non-empty"),
        }
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        self.grid.values()
    }

    pub fn grid(&self) -> &RealGrid {
        &self.grid
    }

    pub fn argmax(&self) -> usize {
        self.grid.argmax()
    }

    /// Centroid (pixel-center coordinates) of the cells attaining the maximum.
    /// Max-clipped maps have a flat plateau over the target rather than a
    /// single peak cell.
    pub fn peak(&self) -> (f64, f64) {
        let max = self.values()[self.argmax()];
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &v) in self.values().iter().enumerate() {
            if v >= max * (1.0 - 1e-12) {
                sx += (i % self.width()) as f64 + 0.5;
                sy += (i / self.width()) as f64 + 0.5;
                n += 1.0;
            }
        }
        (sx / n, sy / n)
    }

    /// Round-trip through 32-bit storage, as the cache does.
    pub fn quantized(&self) -> TopMap {
        let values = self.values().iter().map(|&v| f64::from(v as f32)).collect();
        TopMap {
            grid: RealGrid::new(self.width(), self.height(), values).expect("same shape"),
        }
    }

    /// Cache encoding: "TOPM", u32 width, u32 height, u32 reserved, then f32 values (all little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.len());
        out.extend_from_slice(b"TOPM");
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for &v in self.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..4] != b"TOPM" {
            return Err(bad("missing TOPM header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (width, height) = (word(4), word(8));
        if width == 0 || height == 0 {
            return Err(bad("zero-sized map".into()));
        }
        let expected = 16 + 4 * width * height;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let values = bytes[16..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Self::new(RealGrid::new(width, height, values)?).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Softmax over all locations, with max subtraction.
pub fn softmax_map(grid: &RealGrid) -> Result<TopMap> {
    if grid.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("softmax input must be finite".into()));
    }
    let max = grid.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = grid.values().iter().map(|&v| (v - max).exp()).collect();
    TopMap::from_mass(grid.width(), grid.height(), exps)
}

/// Derive a per-item seed (splitmix64 finalizer).
pub fn mix_seed(seed: u64, frame_id: usize) -> u64 {
    let mut z = seed ^ (frame_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Intermediate products of [`top_map`], useful for inspection.
pub struct TopStages {
    pub proposals: Vec<Proposal>,
    pub survivors: Vec<Proposal>,
    pub scores: RealGrid,
    pub clipped: RealGrid,
    pub map: TopMap,
}

pub fn top_map_stages(img: &Image, point: &PointAnnotation, cfg: &TopConfig) -> Result<TopStages> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, point.frame_id));
    let (width, height) = (img.width(), img.height());
    let mut proposals = random_proposals(point, width, height, cfg, &mut rng)?;
    proposals.extend(edge_proposals(img, point, cfg, &mut rng)?);
    let cues = ObjectnessCues::new(img);
    for p in proposals.iter_mut() {
        p.score = cues.score(&p.bbox)?;
    }
    let survivors = nms(&proposals, cfg.nms_iou, cfg.nms_keep);
    let scores = accumulate_scores(&survivors, width, height)?;
    let clipped = max_clip(&scores, cfg.clip_eta)?;
    let map = softmax_map(&clipped)?;
    Ok(TopStages {
        proposals,
        survivors,
        scores,
        clipped,
        map,
    })
}

/// Full TOP pipeline at frame resolution. Deterministic in
/// `(img, point, cfg)`; the frame id is mixed into the seed.
pub fn top_map(img: &Image, point: &PointAnnotation, cfg: &TopConfig) -> Result<TopMap> {
    top_map_stages(img, point, cfg).map(|s| s.map)
}

/// Mass falling into each target cell, where target column `i` spans source
/// columns `[x_edges[i], x_edges[i+1])` (fractional overlaps weighted by
/// length, clamped to the source), renormalized to unit total.
pub fn pool_mass(map: &TopMap, x_edges: &[f64], y_edges: &[f64]) -> Result<TopMap> {
    let overlap = |edges: &[f64], n: usize| -> Vec<Vec<(usize, f64)>> {
        edges
            .windows(2)
            .map(|e| {
                let (lo, hi) = (e[0].max(0.0), e[1].min(n as f64));
                let mut ws = Vec::new();
                if hi > lo {
                    let first = lo.floor() as usize;
                    let last = (hi.ceil() as usize).min(n);
                    for s in first..last {
                        let w = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                        if w > 0.0 {
                            ws.push((s, w));
                        }
                    }
                }
                ws
            })
            .collect()
    };
    if x_edges.len() < 2 || y_edges.len() < 2 {
        return Err(Error::InvalidArgument("need at least one target cell".into()));
    }
    let xs = overlap(x_edges, map.width());
    let ys = overlap(y_edges, map.height());
    let (tw, th) = (xs.len(), ys.len());
    let mut mass = vec![0.0; tw * th];
    for (ty, yw) in ys.iter().enumerate() {
        for (tx, xw) in xs.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, wy) in yw {
                for &(sx, wx) in xw {
                    acc += wy * wx * map.grid.get(sx, sy);
                }
            }
            mass[ty * tw + tx] = acc;
        }
    }
    TopMap::from_mass(tw, th, mass)
}

/// Area-average pool to `width x height`, then renormalize.
pub fn resample_top(map: &TopMap, width: usize, height: usize) -> Result<TopMap> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("target resolution must be positive".into()));
    }
    if width > map.width() || height > map.height() {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample {}x{} to {width}x{height}",
            map.width(),
            map.height()
        )));
    }
    if width == map.width() && height == map.height() {
        return Ok(map.clone());
    }
    let edges = |src: usize, dst: usize| -> Vec<f64> {
        (0..=dst).map(|i| (i * src) as f64 / dst as f64).collect()
    };
    pool_mass(map, &edges(map.width(), width), &edges(map.height(), height))
}
