//! Soft samples (global and local soft templates, soft negatives, mixups)
//! and the contrastive objective built on them.
//!
//! Feature maps enter as `HW x C` graph nodes; TOP maps are constants at the
//! same `H x W` resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::RealGrid;
use crate::top_prior::TopMap;

/// Tolerance when comparing a cumulative sum against its threshold.
pub const CUMSUM_TOLERANCE: f64 = 1e-12;

/// Stand-in for minus infinity inside softmax inputs. Finite, so max
/// subtraction never produces `inf - inf`.
pub const MASK_SENTINEL: f64 = f64::MIN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoclConfig {
    pub theta_b: f64,
    pub b_p: f64,
    pub tau: f64,
    pub mixup_lambda_range: (f64, f64),
}

impl Default for SoclConfig {
    fn default() -> Self {
        Self {
            theta_b: 0.8,
            b_p: 0.6,
            tau: 0.5,
            mixup_lambda_range: (0.5, 1.0),
        }
    }
}

impl SoclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_b > 0.0 && self.theta_b < 1.0) {
            return Err(Error::Config(format!("theta_b must be in (0,1), got {}", self.theta_b)));
        }
        if !(self.b_p > 0.0 && self.b_p < 1.0) {
            return Err(Error::Config(format!("b_p must be in (0,1), got {}", self.b_p)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        let (lo, hi) = self.mixup_lambda_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("mixup_lambda_range must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Which sample families take part in the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "gst_only")]
    GstOnly,
    #[serde(rename = "+sns")]
    Sns,
    #[serde(rename = "+sns+mixup")]
    SnsMixup,
    #[serde(rename = "full")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::GstOnly, Ablation::Sns, Ablation::SnsMixup, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::GstOnly => "gst_only",
            Ablation::Sns => "+sns",
            Ablation::SnsMixup => "+sns+mixup",
            Ablation::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation {s:?} (expected gst_only, +sns, +sns+mixup or full)")))
    }

    pub fn uses_sns(self) -> bool {
        self != Ablation::GstOnly
    }

    pub fn uses_mixup(self) -> bool {
        matches!(self, Ablation::SnsMixup | Ablation::Full)
    }

    pub fn uses_lst(self) -> bool {
        self == Ablation::Full
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleKind {
    Gst,
    Sns,
    Lst,
    Mixup,
}

/// A soft sample node tagged with where it came from. `frame` is 0 or 1
/// within the video's pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SoftSample {
    pub var: Var,
    pub kind: SampleKind,
    pub video: usize,
    pub frame: usize,
}

/// Locations sorted by descending value (ties by ascending index) and the
/// shortest prefix reaching the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeSelection {
    pub sorted: Vec<f64>,
    pub order: Vec<usize>,
    pub cutoff: usize,
}

impl CumulativeSelection {
    pub fn selected(&self) -> &[usize] {
        &self.order[..self.cutoff]
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.order.len()];
        for &i in self.selected() {
            m[i] = true;
        }
        m
    }
}

/// Smallest prefix of the descending order whose mass reaches `threshold`.
pub fn cumulative_select(values: &[f64], threshold: f64) -> Result<CumulativeSelection> {
    if !(threshold > 0.0 && threshold <= 1.0 - CUMSUM_TOLERANCE) {
        return Err(Error::Config(format!(
            "selection threshold must be in (0, 1), got {threshold}"
        )));
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot select from an empty map".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let mut acc = 0.0;
    let mut cutoff = sorted.len();
    for (k, v) in sorted.iter().enumerate() {
        acc += v;
        if acc >= threshold - CUMSUM_TOLERANCE {
            cutoff = k + 1;
            break;
        }
    }
    Ok(CumulativeSelection { sorted, order, cutoff })
}

/// Locations masked out of background selection (the target's top mass).
pub fn background_mask(h: &TopMap, theta_b: f64) -> Result<Vec<bool>> {
    let sel = cumulative_select(h.values(), theta_b)?;
    if sel.cutoff == h.len() {
        return Err(Error::Degenerate(format!(
            "theta_b {theta_b} masks every one of {} locations",
            h.len()
        )));
    }
    Ok(sel.mask())
}

/// Background similarity map: target locations set to minus infinity.
pub fn select_background(g: &RealGrid, h: &TopMap, theta_b: f64) -> Result<RealGrid> {
    check_same_grid(g.width(), g.height(), h)?;
    let mask = background_mask(h, theta_b)?;
    let values = g
        .values()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { f64::NEG_INFINITY } else { v })
        .collect();
    RealGrid::new(g.width(), g.height(), values)
}

/// Keep `h` on its top-mass locations (threshold `theta_p`), zero elsewhere.
/// `theta_p = 1` keeps every location.
pub fn select_target(h: &TopMap, theta_p: f64) -> Result<RealGrid> {
    let keep = if theta_p >= 1.0 - CUMSUM_TOLERANCE {
        if theta_p > 1.0 {
            return Err(Error::InvalidArgument(format!("theta_p must be at most 1, got {theta_p}")));
        }
        vec![true; h.len()]
    } else {
        cumulative_select(h.values(), theta_p)?.mask()
    };
    let values = h.values().iter().zip(&keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect();
    RealGrid::new(h.width(), h.height(), values)
}

/// Total-sum normalization.
pub fn normalize(values: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("weights have zero total mass".into()));
    }
    Ok(values.iter().map(|v| v / total).collect())
}

/// Weights of the global soft template: the TOP map, renormalized.
pub fn gst_weights(h: &TopMap) -> Result<Vec<f64>> {
    normalize(h.values())
}

/// Weights of a local soft template.
pub fn lst_weights(h: &TopMap, theta_p: f64) -> Result<Vec<f64>> {
    normalize(select_target(h, theta_p)?.values())
}

fn check_same_grid(width: usize, height: usize, h: &TopMap) -> Result<()> {
    if width != h.width() || height != h.height() {
        return Err(Error::Shape(format!(
            "TOP map is {}x{}, feature grid is {width}x{height}",
            h.width(),
            h.height()
        )));
    }
    Ok(())
}

fn feature_dims(g: &Graph, feat: Var) -> Result<(usize, usize)> {
    match g.shape(feat) {
        [hw, c] => Ok((*hw, *c)),
        s => Err(Error::Shape(format!("features must be HW x C, got {s:?}"))),
    }
}

/// `feat^T w` for a constant weight vector over locations.
pub fn weighted_sum(g: &mut Graph, feat: Var, weights: Vec<f64>) -> Result<Var> {
    let (hw, c) = feature_dims(g, feat)?;
    if weights.len() != hw {
        return Err(Error::Shape(format!("{} weights for {hw} locations", weights.len())));
    }
    let w = g.constant(Tensor::new([1, hw], weights)?);
    let z = g.matmul(w, feat)?;
    g.reshape(z, [c])
}

/// Global soft template.
pub fn gst(g: &mut Graph, feat: Var, h: &TopMap) -> Result<Var> {
    let (hw, _) = feature_dims(g, feat)?;
    if hw != h.len() {
        return Err(Error::Shape(format!("TOP map has {} cells, features have {hw} locations", h.len())));
    }
    weighted_sum(g, feat, gst_weights(h)?)
}

/// Local soft template with selection threshold `theta_p`.
pub fn lst(g: &mut Graph, feat: Var, h: &TopMap, theta_p: f64) -> Result<Var> {
    let (hw, _) = feature_dims(g, feat)?;
    if hw != h.len() {
        return Err(Error::Shape(format!("TOP map has {} cells, features have {hw} locations", h.len())));
    }
    weighted_sum(g, feat, lst_weights(h, theta_p)?)
}

/// Per-location inner products `<f_p, z>`, shape `[HW]`.
pub fn similarity_map(g: &mut Graph, feat: Var, z: Var) -> Result<Var> {
    let (hw, c) = feature_dims(g, feat)?;
    if g.shape(z) != [c] {
        return Err(Error::Shape(format!("query has shape {:?}, features have {c} channels", g.shape(z))));
    }
    let col = g.reshape(z, [c, 1])?;
    let s = g.matmul(feat, col)?;
    g.reshape(s, [hw])
}

/// Soft negative sample of one frame: similarity to `z`, target masked out,
/// softmax over the rest, then a weighted sum of features.
pub fn sns(g: &mut Graph, feat: Var, z: Var, h: &TopMap, theta_b: f64) -> Result<Var> {
    let (hw, _) = feature_dims(g, feat)?;
    if hw != h.len() {
        return Err(Error::Shape(format!("TOP map has {} cells, features have {hw} locations", h.len())));
    }
    let mask = background_mask(h, theta_b)?;
    let sim = similarity_map(g, feat, z)?;
    let masked = g.mask_fill(sim, &mask, MASK_SENTINEL)?;
    let weights = g.softmax(masked, 0)?;
    let row = g.reshape(weights, [1, hw])?;
    let z_hat = g.matmul(row, feat)?;
    let c = g.shape(feat)[1];
    g.reshape(z_hat, [c])
}

/// The two soft negatives of a video pair queried by `z`: one per frame.
pub fn sns_pair(
    g: &mut Graph,
    feat_i: Var,
    feat_j: Var,
    z: Var,
    h_i: &TopMap,
    h_j: &TopMap,
    cfg: &SoclConfig,
) -> Result<(Var, Var)> {
    Ok((sns(g, feat_i, z, h_i, cfg.theta_b)?, sns(g, feat_j, z, h_j, cfg.theta_b)?))
}

/// Uniform draw in `[b_p, 1)`.
pub fn sample_theta_p(cfg: &SoclConfig, rng: &mut impl Rng) -> f64 {
    rng.gen_range(cfg.b_p..1.0)
}

/// Uniform draw in the open mixup interval.
pub fn sample_lambda(cfg: &SoclConfig, rng: &mut impl Rng) -> f64 {
    let (lo, hi) = cfg.mixup_lambda_range;
    loop {
        let l = rng.gen_range(lo..hi);
        if l > lo {
            return l;
        }
    }
}

/// Indices of the two pool members most similar to `query` (ties by index).
pub fn hardest_two(g: &Graph, pool: &[Var], query: Var) -> Result<(usize, usize)> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(format!("mixup needs at least 2 candidates, got {}", pool.len())));
    }
    let q = g.value(query).data();
    let sims: Vec<f64> = pool
        .iter()
        .map(|&v| g.value(v).data().iter().zip(q).map(|(a, b)| a * b).sum())
        .collect();
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok((idx[0], idx[1]))
}

/// `lambda * a + (1 - lambda) * b`.
pub fn mix(g: &mut Graph, a: Var, b: Var, lambda: f64) -> Result<Var> {
    let sa = g.scale(a, lambda);
    let sb = g.scale(b, 1.0 - lambda);
    g.add(sa, sb)
}

/// Mixup negative from the two hardest pool members.
pub fn mixup_negative(g: &mut Graph, pool: &[Var], query: Var, lambda: f64) -> Result<Var> {
    let (a, b) = hardest_two(g, pool, query)?;
    mix(g, pool[a], pool[b], lambda)
}

/// `-<q,pos>/tau + log sum_k exp(<q,n_k>/tau)`; the positive is not part of
/// the denominator.
pub fn info_nce(g: &mut Graph, query: Var, positive: Var, negatives: &[Var], tau: f64) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("negative set is empty".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let pos = g.dot(query, positive)?;
    let pos = g.scale(pos, 1.0 / tau);
    let stacked = g.stack(negatives)?;
    let c = g.shape(query)[0];
    let qcol = g.reshape(query, [c, 1])?;
    let sims = g.matmul(stacked, qcol)?;
    let sims = g.reshape(sims, [negatives.len()])?;
    let logits = g.scale(sims, 1.0 / tau);
    let max = g.value(logits).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = g.add_scalar(logits, -max);
    let e = g.exp(shifted);
    let total = g.sum(e, None)?;
    let lse = g.log(total)?;
    let lse = g.add_scalar(lse, max);
    g.sub(lse, pos)
}

/// The three-term objective for query `z_i`: global-to-global plus the two
/// global-to-local terms.
pub fn total_loss(
    g: &mut Graph,
    z_i: Var,
    z_j: Var,
    lst_i: Var,
    lst_j: Var,
    negatives: &[Var],
    tau: f64,
) -> Result<Var> {
    let a = info_nce(g, z_i, z_j, negatives, tau)?;
    let b = info_nce(g, z_i, lst_j, negatives, tau)?;
    let c = info_nce(g, z_i, lst_i, negatives, tau)?;
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Every soft sample built for one batch.
#[derive(Clone, Debug, Default)]
pub struct BatchSamples {
    pub samples: Vec<SoftSample>,
    pub videos: usize,
}

impl BatchSamples {
    pub fn of_kind(&self, kind: SampleKind) -> impl Iterator<Item = &SoftSample> {
        self.samples.iter().filter(move |s| s.kind == kind)
    }

    pub fn find(&self, kind: SampleKind, video: usize, frame: usize) -> Option<Var> {
        self.samples
            .iter()
            .find(|s| s.kind == kind && s.video == video && s.frame == frame)
            .map(|s| s.var)
    }
}

/// Negatives of the query pair from `video`: the other videos' templates,
/// then (per ablation) every soft negative and every mixup.
pub fn assemble_negatives(batch: &BatchSamples, video: usize, ablation: Ablation) -> Result<Vec<SoftSample>> {
    if batch.videos < 2 || video >= batch.videos {
        return Err(Error::InvalidArgument(format!(
            "query video {video} in a batch of {} videos",
            batch.videos
        )));
    }
    let mut out: Vec<SoftSample> = batch.of_kind(SampleKind::Gst).filter(|s| s.video != video).copied().collect();
    if out.len() != 2 * (batch.videos - 1) {
        return Err(Error::InvalidArgument("each video needs exactly two templates".into()));
    }
    if ablation.uses_sns() {
        out.extend(batch.of_kind(SampleKind::Sns).copied());
    }
    if ablation.uses_mixup() {
        out.extend(batch.of_kind(SampleKind::Mixup).copied());
    }
    Ok(out)
}

/// Draws consumed while building soft samples, fixed up front so every
/// ablation sees the same values.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraws {
    /// Per video, the thresholds of the two local templates.
    pub theta_p: Vec<[f64; 2]>,
    /// Per video, the mixing weights of the two mixups.
    pub lambda: Vec<[f64; 2]>,
}

impl SampleDraws {
    pub fn draw(videos: usize, cfg: &SoclConfig, rng: &mut impl Rng) -> Self {
        let mut theta_p = Vec::with_capacity(videos);
        let mut lambda = Vec::with_capacity(videos);
        for _ in 0..videos {
            theta_p.push([sample_theta_p(cfg, rng), sample_theta_p(cfg, rng)]);
            lambda.push([sample_lambda(cfg, rng), sample_lambda(cfg, rng)]);
        }
        Self { theta_p, lambda }
    }
}

/// Build the soft samples needed by `ablation`. `feats[v]` holds the two
/// `HW x C` feature nodes of video `v`, `tops[v]` the matching TOP maps.
pub fn build_samples(
    g: &mut Graph,
    feats: &[[Var; 2]],
    tops: &[[TopMap; 2]],
    cfg: &SoclConfig,
    ablation: Ablation,
    draws: &SampleDraws,
) -> Result<BatchSamples> {
    let n = feats.len();
    if n < 2 || tops.len() != n || draws.theta_p.len() != n {
        return Err(Error::InvalidArgument(format!("malformed batch of {n} videos")));
    }
    let mut batch = BatchSamples { samples: Vec::new(), videos: n };
    for v in 0..n {
        for f in 0..2 {
            let var = gst(g, feats[v][f], &tops[v][f])?;
            batch.samples.push(SoftSample { var, kind: SampleKind::Gst, video: v, frame: f });
        }
    }
    if ablation.uses_sns() {
        for v in 0..n {
            // each template of the pair queries both frames
            for q in 0..2 {
                let z = batch.find(SampleKind::Gst, v, q).expect("built above");
                let (a, b) = sns_pair(g, feats[v][0], feats[v][1], z, &tops[v][0], &tops[v][1], cfg)?;
                batch.samples.push(SoftSample { var: a, kind: SampleKind::Sns, video: v, frame: 0 });
                batch.samples.push(SoftSample { var: b, kind: SampleKind::Sns, video: v, frame: 1 });
            }
        }
    }
    if ablation.uses_mixup() {
        let pool: Vec<Var> = batch.of_kind(SampleKind::Sns).map(|s| s.var).collect();
        for v in 0..n {
            for f in 0..2 {
                let z = batch.find(SampleKind::Gst, v, f).expect("built above");
                let var = mixup_negative(g, &pool, z, draws.lambda[v][f])?;
                batch.samples.push(SoftSample { var, kind: SampleKind::Mixup, video: v, frame: f });
            }
        }
    }
    if ablation.uses_lst() {
        for v in 0..n {
            for f in 0..2 {
                let var = lst(g, feats[v][f], &tops[v][f], draws.theta_p[v][f])?;
                batch.samples.push(SoftSample { var, kind: SampleKind::Lst, video: v, frame: f });
            }
        }
    }
    Ok(batch)
}

/// Loss node for a batch plus the per-pair values.
pub struct BatchLoss {
    pub loss: Var,
    pub pair_losses: Vec<f64>,
}

/// Mean over pairs of the per-pair objective. With `symmetrize`, each pair's
/// objective averages the `z_i`-queried and `z_j`-queried forms.
pub fn batch_loss(
    g: &mut Graph,
    batch: &BatchSamples,
    ablation: Ablation,
    tau: f64,
    symmetrize: bool,
) -> Result<BatchLoss> {
    let n = batch.videos;
    let mut pair_vars = Vec::with_capacity(n);
    let mut pair_losses = Vec::with_capacity(n);
    for v in 0..n {
        let negs: Vec<Var> = assemble_negatives(batch, v, ablation)?.iter().map(|s| s.var).collect();
        let z = [0, 1].map(|f| batch.find(SampleKind::Gst, v, f).expect("templates exist"));
        let queries: &[usize] = if symmetrize { &[0, 1] } else { &[0] };
        let mut terms = Vec::new();
        for &q in queries {
            let (zq, zp) = (z[q], z[1 - q]);
            let main = info_nce(g, zq, zp, &negs, tau)?;
            check_term(g, main, v, "global")?;
            terms.push(main);
            if ablation.uses_lst() {
                let l_other = batch.find(SampleKind::Lst, v, 1 - q).expect("local templates exist");
                let l_own = batch.find(SampleKind::Lst, v, q).expect("local templates exist");
                let a = info_nce(g, zq, l_other, &negs, tau)?;
                check_term(g, a, v, "local-cross")?;
                let b = info_nce(g, zq, l_own, &negs, tau)?;
                check_term(g, b, v, "local-self")?;
                terms.push(a);
                terms.push(b);
            }
        }
        let stacked = g.stack(&terms)?;
        let sum = g.sum(stacked, None)?;
        let pair = g.scale(sum, 1.0 / queries.len() as f64);
        pair_losses.push(g.scalar(pair));
        pair_vars.push(pair);
    }
    let stacked = g.stack(&pair_vars)?;
    let sum = g.sum(stacked, None)?;
    let loss = g.scale(sum, 1.0 / n as f64);
    Ok(BatchLoss { loss, pair_losses })
}

fn check_term(g: &Graph, v: Var, pair: usize, term: &str) -> Result<()> {
    if g.scalar(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { pair, term: term.to_string() })
    }
}
