//! Template matching with Gaussian-pooled descriptors, the sparse-box pseudo
//! label schema, TOP-threshold boxes, annotation cost and tracking metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{embed_input, BackboneParams, FeatureMap};
use crate::error::{Error, Result};
use crate::geometry::BoxF;
use crate::imaging::{crop_normalized, Image};
use crate::socl::cumulative_select;
use crate::top_prior::TopMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Search and template crop side as a multiple of `sqrt(w * h)`.
    pub context: f64,
    /// Response lattice points per feature cell along each axis.
    pub upsample: usize,
    /// Weight of the cosine window blended into the normalized response.
    pub window_weight: f64,
    /// Template Gaussian sigma as a fraction of the feature grid height.
    pub sigma_frac: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            context: 2.0,
            upsample: 4,
            window_weight: 0.3,
            sigma_frac: 0.25,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.context > 0.0) || self.upsample == 0 || !(0.0..=1.0).contains(&self.window_weight) || !(self.sigma_frac > 0.0) {
            return Err(Error::Config("invalid tracker configuration".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub template: Vec<f64>,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Half the side of the search crop, in pixels.
    pub search_radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub peak: f64,
}

impl TrackPoint {
    pub fn bbox(&self) -> BoxF {
        BoxF::new(self.cx, self.cy, self.w, self.h)
    }
}

pub type Trajectory = Vec<TrackPoint>;

/// Write one JSON object per line.
pub fn write_jsonl(traj: &[TrackPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in traj {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Square crop side for a box.
pub fn crop_side(cfg: &TrackerConfig, w: f64, h: f64) -> f64 {
    cfg.context * (w * h).sqrt()
}

fn embed_crop(params: &BackboneParams, frame: &Image, cx: f64, cy: f64, side: f64) -> Result<FeatureMap> {
    let s = params.arch.input_size;
    embed_input(params, crop_normalized(frame, cx, cy, side, side, s, s, params.arch.in_channels()))
}

/// Feature-grid coordinate of the crop center.
fn center_cell(params: &BackboneParams) -> f64 {
    let (stride, offset) = params.arch.cell_geometry();
    (params.arch.input_size as f64 / 2.0 - offset) / stride
}

/// Normalized Gaussian weights of `n` cells around each position.
fn axis_weights(n: usize, positions: &[f64], sigma: f64) -> Vec<Vec<f64>> {
    positions
        .iter()
        .map(|&p| {
            let w: Vec<f64> = (0..n).map(|q| (-(q as f64 - p).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|v| v / total).collect()
        })
        .collect()
}

/// Gaussian-weighted means of the feature rows centered at every
/// `(xs[i], ys[j])`, in fractional cell units. Row-major over `ys`, then `xs`.
pub fn pooled_descriptors(feat: &FeatureMap, sigma: f64, xs: &[f64], ys: &[f64]) -> Vec<Vec<f64>> {
    let c = feat.channels;
    let wx = axis_weights(feat.width, xs, sigma);
    let wy = axis_weights(feat.height, ys, sigma);
    // pool along x within each row first
    let mut rows = vec![vec![0.0; c]; feat.height * xs.len()];
    for qy in 0..feat.height {
        for (i, w) in wx.iter().enumerate() {
            let acc = &mut rows[qy * xs.len() + i];
            for (qx, &wq) in w.iter().enumerate() {
                for (a, f) in acc.iter_mut().zip(feat.row(qy * feat.width + qx)) {
                    *a += wq * f;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for w in &wy {
        for i in 0..xs.len() {
            let mut acc = vec![0.0; c];
            for (qy, &wq) in w.iter().enumerate() {
                for (a, r) in acc.iter_mut().zip(&rows[qy * xs.len() + i]) {
                    *a += wq * r;
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Mean of the feature rows weighted by a Gaussian centered on `(c, c)`.
pub fn gaussian_template(feat: &FeatureMap, c: f64, sigma: f64) -> Vec<f64> {
    pooled_descriptors(feat, sigma, &[c], &[c]).pop().expect("one position")
}

/// Negative squared distance between the template and the pooled
/// descriptor at every `(xs[i], ys[j])`, row-major over `ys`.
pub fn response(feat: &FeatureMap, template: &[f64], sigma: f64, xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    if template.len() != feat.channels {
        return Err(Error::Shape(format!("template has {} channels, features {}", template.len(), feat.channels)));
    }
    Ok(pooled_descriptors(feat, sigma, xs, ys)
        .iter()
        .map(|d| -d.iter().zip(template).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect())
}

pub fn init_track(params: &BackboneParams, frame: &Image, init: &BoxF, cfg: &TrackerConfig) -> Result<TrackState> {
    cfg.validate()?;
    if !(init.w > 0.0 && init.h > 0.0) || !init.cx.is_finite() || !init.cy.is_finite() {
        return Err(Error::Degenerate(format!("initial box {init:?}")));
    }
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);
    if !(0.0..=fw).contains(&init.cx) || !(0.0..=fh).contains(&init.cy) {
        return Err(Error::InvalidArgument(format!("initial box center outside the {fw}x{fh} frame")));
    }
    let side = crop_side(cfg, init.w, init.h);
    let feat = embed_crop(params, frame, init.cx, init.cy, side)?;
    let template = gaussian_template(&feat, center_cell(params), cfg.sigma_frac * feat.height as f64);
    Ok(TrackState {
        template,
        cx: init.cx,
        cy: init.cy,
        w: init.w,
        h: init.h,
        search_radius: side / 2.0,
    })
}

/// Move the state to the response maximum in `frame`; returns the peak of
/// the normalized, windowed response.
pub fn track_frame(params: &BackboneParams, state: &mut TrackState, frame: &Image, cfg: &TrackerConfig) -> Result<f64> {
    let (fw, fh) = (frame.width() as f64, frame.height() as f64);
    let r = state.search_radius;
    if state.cx + r <= 0.0 || state.cx - r >= fw || state.cy + r <= 0.0 || state.cy - r >= fh {
        return Err(Error::InvalidArgument("search window lies outside the frame".into()));
    }
    let side = 2.0 * r;
    let feat = embed_crop(params, frame, state.cx, state.cy, side)?;
    let (stride, _) = params.arch.cell_geometry();
    let c = center_cell(params);
    let up = cfg.upsample as f64;
    // a 1/upsample lattice through the crop center
    let kx: Vec<i64> = ((-c * up).ceil() as i64..=((feat.width as f64 - 1.0 - c) * up).floor() as i64).collect();
    let ky: Vec<i64> = ((-c * up).ceil() as i64..=((feat.height as f64 - 1.0 - c) * up).floor() as i64).collect();
    let xs: Vec<f64> = kx.iter().map(|&k| c + k as f64 / up).collect();
    let ys: Vec<f64> = ky.iter().map(|&k| c + k as f64 / up).collect();
    let resp = response(&feat, &state.template, cfg.sigma_frac * feat.height as f64, &xs, &ys)?;
    let samples: Vec<(i64, i64, f64)> = ky
        .iter()
        .flat_map(|&l| kx.iter().map(move |&k| (k, l)))
        .zip(resp)
        .map(|((k, l), v)| (k, l, v))
        .collect();
    let lo = samples.iter().map(|s| s.2).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.2).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let reach = (c.max(feat.width as f64 - 1.0 - c).max(feat.height as f64 - 1.0 - c) + 1.0) * up;
    let hann = |k: i64| {
        let t = (k as f64 / reach).abs().min(1.0);
        (0.5 * std::f64::consts::PI * t).cos().powi(2)
    };
    let w = cfg.window_weight;
    let mut best = (0i64, 0i64, f64::NEG_INFINITY);
    for &(k, l, v) in &samples {
        let score = (1.0 - w) * (v - lo) / span + w * hann(k) * hann(l);
        // strict comparison keeps the first maximum in row-major order
        if score > best.2 {
            best = (k, l, score);
        }
    }
    let scale = side / params.arch.input_size as f64;
    state.cx = (state.cx + best.0 as f64 / up * stride * scale).clamp(0.0, fw);
    state.cy = (state.cy + best.1 as f64 / up * stride * scale).clamp(0.0, fh);
    Ok(best.2)
}

/// Track through `frames`, starting from `init` on frame 0.
pub fn track_video(params: &BackboneParams, frames: &[Image], init: &BoxF, cfg: &TrackerConfig) -> Result<Trajectory> {
    let first = frames.first().ok_or_else(|| Error::InvalidArgument("empty video".into()))?;
    let mut state = init_track(params, first, init, cfg)?;
    let mut out = vec![TrackPoint { frame: 0, cx: init.cx, cy: init.cy, w: init.w, h: init.h, peak: 1.0 }];
    for (f, frame) in frames.iter().enumerate().skip(1) {
        let peak = track_frame(params, &mut state, frame, cfg)?;
        out.push(TrackPoint { frame: f, cx: state.cx, cy: state.cy, w: state.w, h: state.h, peak });
    }
    Ok(out)
}

/// Anything that follows a target center through frames. Lets the schema
/// run with scripted trackers as well as the Siamese one.
pub trait CenterTracker {
    fn init(&mut self, frame: &Image, init: &BoxF) -> Result<()>;
    /// Estimated center and confidence in the next frame.
    fn step(&mut self, frame: &Image) -> Result<(f64, f64, f64)>;
    fn recenter(&mut self, cx: f64, cy: f64);
}

pub struct SiameseTracker<'a> {
    pub params: &'a BackboneParams,
    pub cfg: TrackerConfig,
    state: Option<TrackState>,
}

impl<'a> SiameseTracker<'a> {
    pub fn new(params: &'a BackboneParams, cfg: TrackerConfig) -> Self {
        Self { params, cfg, state: None }
    }
}

impl CenterTracker for SiameseTracker<'_> {
    fn init(&mut self, frame: &Image, init: &BoxF) -> Result<()> {
        self.state = Some(init_track(self.params, frame, init, &self.cfg)?);
        Ok(())
    }

    fn step(&mut self, frame: &Image) -> Result<(f64, f64, f64)> {
        let state = self.state.as_mut().ok_or_else(|| Error::InvalidArgument("tracker used before init".into()))?;
        let peak = track_frame(self.params, state, frame, &self.cfg)?;
        Ok((state.cx, state.cy, peak))
    }

    fn recenter(&mut self, cx: f64, cy: f64) {
        if let Some(s) = self.state.as_mut() {
            s.cx = cx;
            s.cy = cy;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub fail_dist: f64,
    pub point_cost_s: f64,
    pub box_cost_s: f64,
    pub tracker_cost_s: f64,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            t: 10,
            fail_dist: 20.0,
            point_cost_s: 2.27,
            box_cost_s: 10.2,
            tracker_cost_s: 0.1,
        }
    }
}

impl SchemaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        if !(self.fail_dist > 0.0 && self.point_cost_s > 0.0 && self.box_cost_s > 0.0 && self.tracker_cost_s > 0.0) {
            return Err(Error::Config("fail_dist and costs must be positive".into()));
        }
        Ok(())
    }
}

/// Annotation seconds per frame: points on the unboxed frames, one box per
/// snippet, plus the tracker pass.
pub fn schema_cost(schema: &SchemaConfig) -> Result<f64> {
    schema.validate()?;
    let t = schema.t as f64;
    Ok(schema.point_cost_s * (1.0 - 1.0 / t) + schema.tracker_cost_s + schema.box_cost_s / t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemaOutput {
    pub boxes: Vec<BoxF>,
    /// Whether the frame's tracker estimate was replaced by its point.
    pub corrected: Vec<bool>,
    /// Tracker confidence; 1 on boxed frames.
    pub peaks: Vec<f64>,
}

impl SchemaOutput {
    pub fn trajectory(&self) -> Trajectory {
        self.boxes
            .iter()
            .zip(&self.peaks)
            .enumerate()
            .map(|(frame, (b, &peak))| TrackPoint { frame, cx: b.cx, cy: b.cy, w: b.w, h: b.h, peak })
            .collect()
    }
}

/// Pseudo boxes from boxes on frames `0, T, 2T, ...` and points elsewhere.
/// `sparse[k]` is the box of frame `k * T`.
pub fn pseudo_boxes_schema(
    tracker: &mut dyn CenterTracker,
    frames: &[Image],
    points: &[[f64; 2]],
    sparse: &[BoxF],
    schema: &SchemaConfig,
) -> Result<SchemaOutput> {
    schema.validate()?;
    if points.len() != frames.len() {
        return Err(Error::InvalidArgument(format!("{} points for {} frames", points.len(), frames.len())));
    }
    let t = schema.t;
    let snippets = frames.len().div_ceil(t);
    if sparse.len() < snippets {
        return Err(Error::InvalidArgument(format!(
            "missing sparse box for snippet {} of {snippets}",
            sparse.len()
        )));
    }
    let mut out = SchemaOutput {
        boxes: Vec::with_capacity(frames.len()),
        corrected: Vec::with_capacity(frames.len()),
        peaks: Vec::with_capacity(frames.len()),
    };
    for (k, init) in sparse.iter().take(snippets).enumerate() {
        let start = k * t;
        let end = (start + t).min(frames.len());
        tracker.init(&frames[start], init)?;
        out.boxes.push(*init);
        out.corrected.push(false);
        out.peaks.push(1.0);
        for f in start + 1..end {
            let (mut cx, mut cy, peak) = tracker.step(&frames[f])?;
            let [px, py] = points[f];
            // a non-finite estimate counts as a failure too
            let fail = !((cx - px).hypot(cy - py) <= schema.fail_dist);
            if fail {
                cx = px;
                cy = py;
                tracker.recenter(cx, cy);
            }
            out.boxes.push(BoxF::new(cx, cy, init.w, init.h));
            out.corrected.push(fail);
            out.peaks.push(peak);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoBoxConfig {
    pub alpha: f64,
}

impl PseudoBoxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Tight box around the smallest high-mass cell set reaching `alpha`, in
/// frame pixels.
pub fn pseudo_box_from_top(map: &TopMap, alpha: f64, frame_w: f64, frame_h: f64) -> Result<BoxF> {
    PseudoBoxConfig { alpha }.validate()?;
    let sel = cumulative_select(map.values(), alpha)?;
    let w = map.width();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &p in sel.selected() {
        let (x, y) = (p % w, p / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let sx = frame_w / w as f64;
    let sy = frame_h / map.height() as f64;
    Ok(BoxF::from_corners(x0 as f64 * sx, y0 as f64 * sy, (x1 + 1) as f64 * sx, (y1 + 1) as f64 * sy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    pub precision_5: f64,
    pub precision_10: f64,
    pub precision_20: f64,
    pub mean_center_error: f64,
    pub success_auc: f64,
}

pub fn center_errors(pred: &[BoxF], truth: &[BoxF]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} ground-truth boxes", pred.len(), truth.len())));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| p.center_distance(t.cx, t.cy)).collect())
}

/// Fraction of frames with center error at most `r`.
pub fn precision_at(errors: &[f64], r: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= r).count() as f64 / errors.len() as f64
}

/// Mean over thresholds `0, 0.05, ..., 1` of the fraction of frames with
/// IoU at least the threshold.
pub fn success_auc(pred: &[BoxF], truth: &[BoxF]) -> Result<f64> {
    center_errors(pred, truth)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let ious: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p.iou(t)).collect();
    let total: f64 = (0..=20)
        .map(|i| {
            let th = i as f64 * 0.05;
            ious.iter().filter(|&&v| v >= th - 1e-12).count() as f64 / ious.len() as f64
        })
        .sum();
    Ok(total / 21.0)
}

/// Metrics over every frame of every sequence, pooled.
pub fn evaluate(pred: &[Vec<BoxF>], truth: &[Vec<BoxF>]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!("{} trajectories for {} sequences", pred.len(), truth.len())));
    }
    let mut errs = Vec::new();
    for (p, t) in pred.iter().zip(truth) {
        errs.extend(center_errors(p, t)?);
    }
    let flat_p: Vec<BoxF> = pred.concat();
    let flat_t: Vec<BoxF> = truth.concat();
    Ok(Metrics {
        frames: errs.len(),
        precision_5: precision_at(&errs, 5.0),
        precision_10: precision_at(&errs, 10.0),
        precision_20: precision_at(&errs, 20.0),
        mean_center_error: if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 },
        success_auc: success_auc(&flat_p, &flat_t)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{embed, init_backbone, Arch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cost_reproduces_reported_values() {
        let c = schema_cost(&SchemaConfig::default()).unwrap();
        assert!((c - 3.163).abs() < 1e-9);
        assert_eq!(format!("{c:.2}"), "3.16");
        let one = schema_cost(&SchemaConfig { t: 1, ..Default::default() }).unwrap();
        assert!((one - 10.3).abs() < 1e-12);
        let far = schema_cost(&SchemaConfig { t: 1_000_000, ..Default::default() }).unwrap();
        assert!((far - 2.37).abs() < 1e-4);
        let mut prev = f64::INFINITY;
        for t in 2..200 {
            let c = schema_cost(&SchemaConfig { t, ..Default::default() }).unwrap();
            assert!(c < prev);
            prev = c;
        }
        assert!(schema_cost(&SchemaConfig { t: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn template_is_gaussian_weighted_mean() {
        let p = init_backbone(&Arch::desk(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let px = (0..96 * 96 * 3).map(|_| rng.gen()).collect();
        let img = Image::new(96, 96, 3, px).unwrap();
        let feat = embed(&p, &img).unwrap();
        let (c, sigma) = (4.9375, 2.5);
        let t = gaussian_template(&feat, c, sigma);
        for ch in 0..feat.channels {
            let (mut num, mut den) = (0.0, 0.0);
            for y in 0..10 {
                for x in 0..10 {
                    let w = (-((x as f64 - c).powi(2) + (y as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp();
                    num += w * feat.values[(y * 10 + x) * feat.channels + ch];
                    den += w;
                }
            }
            assert!((t[ch] - num / den).abs() < 1e-12);
        }
        assert_eq!(center_cell(&p), c);
    }

    #[test]
    fn response_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w, c) = (4, 5, 3);
        let values = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feat = FeatureMap { height: h, width: w, channels: c, values };
        let t = [0.3, -0.2, 0.1];
        let (sigma, xs, ys) = (1.3, [0.0, 1.25, 3.5, 4.0], [0.5, 2.75]);
        let r = response(&feat, &t, sigma, &xs, &ys).unwrap();
        for (j, &y) in ys.iter().enumerate() {
            for (i, &x) in xs.iter().enumerate() {
                let mut d = [0.0; 3];
                let mut total = 0.0;
                for qy in 0..h {
                    for qx in 0..w {
                        let wt = (-((qx as f64 - x).powi(2) + (qy as f64 - y).powi(2)) / (2.0 * sigma * sigma)).exp();
                        total += wt;
                        for k in 0..c {
                            d[k] += wt * feat.row(qy * w + qx)[k];
                        }
                    }
                }
                let want: f64 = -(0..c).map(|k| (d[k] / total - t[k]).powi(2)).sum::<f64>();
                assert!((r[j * xs.len() + i] - want).abs() < 1e-12);
            }
        }
        assert!(response(&feat, &[1.0], sigma, &xs, &ys).is_err());
        // the template's own position scores exactly zero
        let own = gaussian_template(&feat, 2.0, sigma);
        assert_eq!(response(&feat, &own, sigma, &[2.0], &[2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn identical_init_gives_identical_template() {
        let p = init_backbone(&Arch::desk(), 3).unwrap();
        let img = Image::filled(64, 64, 3, 77).unwrap();
        let b = BoxF::new(30.0, 30.0, 16.0, 12.0);
        let a = init_track(&p, &img, &b, &TrackerConfig::default()).unwrap();
        let c = init_track(&p, &img, &b, &TrackerConfig::default()).unwrap();
        assert_eq!(a, c);
        assert_eq!((a.cx, a.cy), (30.0, 30.0));
        assert!(init_track(&p, &img, &BoxF::new(30.0, 30.0, 0.0, 5.0), &TrackerConfig::default()).is_err());
    }

    #[test]
    fn top_box_cases() {
        let one = TopMap::one_hot(4, 4, 6);
        let b = pseudo_box_from_top(&one, 0.5, 40.0, 40.0).unwrap();
        assert_eq!((b.x0(), b.y0(), b.x1(), b.y1()), (20.0, 10.0, 30.0, 20.0));
        let uni = TopMap::uniform(4, 4);
        // ties break by index, so half the mass is the first two rows
        let b = pseudo_box_from_top(&uni, 0.5, 4.0, 4.0).unwrap();
        assert_eq!((b.x0(), b.y0(), b.x1(), b.y1()), (0.0, 0.0, 4.0, 2.0));
        assert!(pseudo_box_from_top(&uni, 1.0, 4.0, 4.0).is_err());
    }

    #[test]
    fn metric_spot_values() {
        let truth: Vec<BoxF> = (0..10).map(|i| BoxF::new(20.0 + i as f64, 30.0, 10.0, 10.0)).collect();
        let m = evaluate(&[truth.clone()], &[truth.clone()]).unwrap();
        assert_eq!((m.precision_5, m.success_auc, m.mean_center_error), (1.0, 1.0, 0.0));
        let shifted: Vec<BoxF> = truth.iter().map(|b| BoxF::new(b.cx + 25.0, b.cy, b.w, b.h)).collect();
        let m = evaluate(&[shifted.clone()], &[truth.clone()]).unwrap();
        assert_eq!(m.precision_20, 0.0);
        let e = center_errors(&shifted, &truth).unwrap();
        assert_eq!(precision_at(&e, 30.0), 1.0);
        assert!(evaluate(&[shifted], &[truth[..3].to_vec()]).is_err());
    }
}
