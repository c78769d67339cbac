//! Build every soft sample family for a random batch and inspect the
//! negative set of one query pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socl::autodiff::{Graph, Tensor};
use socl::socl::*;
use socl::top_prior::TopMap;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, side, channels) = (4, 6, 8);
    let cfg = SoclConfig::default();
    let mut g = Graph::new();
    let mut feats = Vec::new();
    let mut tops = Vec::new();
    for _ in 0..n {
        feats.push([0, 1].map(|_| g.constant(Tensor::from_fn([side * side, channels], |_| rng.gen_range(-1.0..1.0)))));
        tops.push([0, 1].map(|_| {
            // a blob of mass around a random center
            let (cx, cy) = (rng.gen_range(1.0..5.0), rng.gen_range(1.0..5.0));
            let mass = (0..side * side)
                .map(|p| {
                    let (x, y) = ((p % side) as f64, (p / side) as f64);
                    (-((x - cx).powi(2) + (y - cy).powi(2)) / 2.0).exp()
                })
                .collect();
            TopMap::from_mass(side, side, mass).unwrap()
        }));
    }
    let draws = SampleDraws::draw(n, &cfg, &mut rng);
    let batch = build_samples(&mut g, &feats, &tops, &cfg, Ablation::Full, &draws)?;
    for kind in [SampleKind::Gst, SampleKind::Sns, SampleKind::Mixup, SampleKind::Lst] {
        println!("{kind:?}: {}", batch.of_kind(kind).count());
    }
    for ablation in Ablation::ALL {
        let negs = assemble_negatives(&batch, 0, ablation)?;
        println!("{:<11} {} negatives for the first pair", ablation.name(), negs.len());
    }
    let loss = batch_loss(&mut g, &batch, Ablation::Full, cfg.tau, false)?;
    println!("batch loss {:.4}, per pair {:?}", g.scalar(loss.loss), loss.pair_losses);

    // with theta_p = 1 the local template keeps every location
    let z = gst(&mut g, feats[0][0], &tops[0][0])?;
    let l = lst(&mut g, feats[0][0], &tops[0][0], 1.0)?;
    println!("full-mass LST equals GST: {}", g.value(z) == g.value(l));
    Ok(())
}
