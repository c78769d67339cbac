//! Brute-force oracles and fixtures shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socl::autodiff::{check_gradients, Graph, Tensor, Var};
use socl::backbone::feature_rows;
use socl::geometry::BoxF;
use socl::imaging::RealGrid;
use socl::socl::{
    batch_loss, build_samples, cumulative_select, select_background, select_target, Ablation, SampleDraws, SoclConfig,
    CUMSUM_TOLERANCE,
};
use socl::top_prior::{accumulate_scores, max_clip, nms, Proposal, ProposalSource, TopMap};

/// Smallest subset reaching `threshold`, found by enumerating every subset.
/// Among subsets of that size the heaviest one wins.
pub fn min_subset(values: &[f64], threshold: f64) -> Vec<usize> {
    let n = values.len();
    let mut best: Option<(usize, f64, u32)> = None;
    for bits in 0u32..(1 << n) {
        let size = bits.count_ones() as usize;
        let mass: f64 = (0..n).filter(|i| bits >> i & 1 == 1).map(|i| values[i]).sum();
        if mass < threshold - CUMSUM_TOLERANCE {
            continue;
        }
        let better = match best {
            None => true,
            Some((s, m, _)) => size < s || (size == s && mass > m),
        };
        if better {
            best = Some((size, mass, bits));
        }
    }
    let bits = best.map(|b| b.2).unwrap_or((1 << n) - 1);
    (0..n).filter(|i| bits >> i & 1 == 1).collect()
}

/// Distinct positive values (so the minimal subset is unique) normalized to 1.
pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| rng.gen_range(0.0..1.0f64).powi(2) + 1e-6 * i as f64).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Threshold that is not within 1e-9 of any subset-sum boundary reachable by
/// a prefix of the sorted values.
pub fn safe_threshold(rng: &mut ChaCha8Rng, values: &[f64], lo: f64, hi: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let prefix: Vec<f64> = sorted
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    loop {
        let t = rng.gen_range(lo..hi);
        if prefix.iter().all(|p| (p - t).abs() > 1e-9) {
            return t;
        }
    }
}

pub fn check_cumulative_select(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(1..=10);
    let values = random_distribution(rng, n);
    let t = safe_threshold(rng, &values, 0.05, 0.98);
    let got = cumulative_select(&values, t).map_err(|e| e.to_string())?;
    let mut sel = got.selected().to_vec();
    sel.sort();
    let want = min_subset(&values, t);
    if sel != want {
        return Err(format!("values {values:?} threshold {t}: got {sel:?}, want {want:?}"));
    }
    Ok(())
}

fn top_of(values: &[f64], w: usize) -> TopMap {
    TopMap::new(RealGrid::new(w, values.len() / w, values.to_vec()).unwrap()).unwrap()
}

pub fn check_select_background(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (w, h) = (rng.gen_range(2..=5), 2);
    let n = w * h;
    let values = random_distribution(rng, n);
    let theta = safe_threshold(rng, &values, 0.05, 0.9);
    let masked = min_subset(&values, theta);
    let map = top_of(&values, w);
    let sims: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let g = RealGrid::new(w, h, sims.clone()).unwrap();
    match select_background(&g, &map, theta) {
        // every location masked is a legitimate refusal
        Err(_) if masked.len() == n => Ok(()),
        Err(e) => Err(e.to_string()),
        Ok(out) => {
            for i in 0..n {
                let want = if masked.contains(&i) { f64::NEG_INFINITY } else { sims[i] };
                if out.values()[i] != want {
                    return Err(format!("location {i}: got {}, want {want}", out.values()[i]));
                }
            }
            Ok(())
        }
    }
}

pub fn check_select_target(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (w, h) = (rng.gen_range(1..=5), 2);
    let n = w * h;
    let values = random_distribution(rng, n);
    let map = top_of(&values, w);
    let full = rng.gen_bool(0.1);
    let theta = if full { 1.0 } else { safe_threshold(rng, &values, 0.05, 0.98) };
    let kept = if full { (0..n).collect() } else { min_subset(&values, theta) };
    let out = select_target(&map, theta).map_err(|e| e.to_string())?;
    for i in 0..n {
        let want = if kept.contains(&i) { map.values()[i] } else { 0.0 };
        if out.values()[i] != want {
            return Err(format!("location {i}: got {}, want {want}", out.values()[i]));
        }
    }
    Ok(())
}

pub fn random_box(rng: &mut ChaCha8Rng, size: f64) -> BoxF {
    let w = rng.gen_range(2.0..size / 2.0);
    let h = rng.gen_range(2.0..size / 2.0);
    BoxF::new(rng.gen_range(0.0..size), rng.gen_range(0.0..size), w, h)
}

pub fn random_proposals(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Vec<Proposal> {
    (0..n)
        .map(|_| Proposal {
            bbox: random_box(rng, size),
            // coarse scores so ties occur
            score: rng.gen_range(0..8) as f64 / 8.0,
            source: ProposalSource::Random,
        })
        .collect()
}

/// Classic NMS: take the best remaining box, discard everything that
/// overlaps it too much, repeat.
pub fn nms_oracle(props: &[Proposal], thresh: f64, keep: usize) -> Vec<Proposal> {
    let mut alive: Vec<usize> = (0..props.len()).collect();
    let mut out = Vec::new();
    while !alive.is_empty() && out.len() < keep {
        let mut best = 0;
        for k in 1..alive.len() {
            let (a, b) = (alive[k], alive[best]);
            if props[a].score > props[b].score || (props[a].score == props[b].score && a < b) {
                best = k;
            }
        }
        let chosen = alive.remove(best);
        out.push(props[chosen]);
        alive.retain(|&i| props[i].bbox.iou(&props[chosen].bbox) <= thresh);
    }
    out
}

pub fn check_nms(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(1..40);
    let props = random_proposals(rng, n, 40.0);
    let thresh = rng.gen_range(0.1..0.9);
    let keep = rng.gen_range(1..50);
    let got = nms(&props, thresh, keep);
    let want = nms_oracle(&props, thresh, keep);
    if got != want {
        return Err(format!("nms mismatch: {} vs {} survivors", got.len(), want.len()));
    }
    Ok(())
}

pub fn check_accumulate(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (w, h) = (rng.gen_range(4..24), rng.gen_range(4..24));
    let n = rng.gen_range(1..20);
    let mut props = random_proposals(rng, n, w.max(h).max(8) as f64);
    for p in &mut props {
        p.score = rng.gen_range(0.0..1.0);
    }
    let got = accumulate_scores(&props, w, h).map_err(|e| e.to_string())?;
    for y in 0..h {
        for x in 0..w {
            let mut want = 0.0;
            for p in &props {
                let r = p.bbox.pixel_rect(w, h);
                if r.x0 <= x && x < r.x1 && r.y0 <= y && y < r.y1 {
                    want += p.score;
                }
            }
            if (got.get(x, y) - want).abs() > 1e-9 {
                return Err(format!("pixel ({x},{y}): got {}, want {want}", got.get(x, y)));
            }
        }
    }
    Ok(())
}

pub fn check_max_clip(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (w, h) = (rng.gen_range(1..12), rng.gen_range(1..12));
    let values: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..10.0)).collect();
    let eta = rng.gen_range(0.01..=1.0);
    let got = max_clip(&RealGrid::new(w, h, values.clone()).unwrap(), eta).map_err(|e| e.to_string())?;
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((eta * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let level = (sorted[..k].iter().sum::<f64>() / k as f64).clamp(sorted[k - 1], sorted[0]);
    for (i, v) in values.iter().enumerate() {
        if (got.values()[i] - v.min(level)).abs() > 1e-9 {
            return Err(format!("cell {i}: got {}, want {}", got.values()[i], v.min(level)));
        }
    }
    Ok(())
}

/// Every selection oracle, in the order they are reported.
pub const ORACLES: &[(&str, fn(&mut ChaCha8Rng) -> Result<(), String>)] = &[
    ("cumulative_select", check_cumulative_select),
    ("s_b", check_select_background),
    ("s_t", check_select_target),
    ("nms", check_nms),
    ("accumulate_scores", check_accumulate),
    ("max_clip", check_max_clip),
];

pub fn random_top(rng: &mut ChaCha8Rng, side: usize) -> TopMap {
    let raw: Vec<f64> = (0..side * side).map(|_| rng.gen_range(0.05..1.0f64).powi(3)).collect();
    TopMap::from_mass(side, side, raw).unwrap()
}

/// Composed micro-batch: a small convolution produces the feature maps of
/// two videos, which go through every soft sample and the batch objective.
pub fn micro_batch(ablation: Ablation, symmetrize: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, cin, cout, side) = (2, 2, 3, 5);
    let input = Tensor::from_fn([2 * n, cin, side, side], |_| rng.gen_range(-1.0..1.0));
    let kernel = Tensor::from_fn([cout, cin, 3, 3], |_| rng.gen_range(-0.5..0.5));
    let bias = Tensor::from_fn([cout], |_| rng.gen_range(-0.1..0.1));
    let tops: Vec<[TopMap; 2]> = (0..n).map(|_| [random_top(&mut rng, 3), random_top(&mut rng, 3)]).collect();
    let cfg = SoclConfig::default();
    let draws = SampleDraws::draw(n, &cfg, &mut rng);
    let f = |g: &mut Graph, v: &[Var]| {
        let out = g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
        let mut feats = Vec::new();
        for b in 0..n {
            feats.push([feature_rows(g, out, 2 * b)?, feature_rows(g, out, 2 * b + 1)?]);
        }
        let samples = build_samples(g, &feats, &tops, &cfg, ablation, &draws)?;
        Ok(batch_loss(g, &samples, ablation, cfg.tau, symmetrize)?.loss)
    };
    check_gradients("micro_batch", &f, &[input, kernel, bias], 1e-5, seed).unwrap().max_rel_err
}
