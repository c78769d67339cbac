mod common;

use common::{micro_batch, random_top};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socl::autodiff::{grad_check, Graph, Tensor, CHECKED_OPS};
use socl::imaging::RealGrid;
use socl::socl::Ablation;
use socl::top_prior::TopMap;

#[test]
fn composed_objective_matches_finite_differences() {
    for ablation in Ablation::ALL {
        for seed in 0..3 {
            let err = micro_batch(ablation, false, seed);
            assert!(err < 1e-3, "{} seed {seed}: {err:e}", ablation.name());
        }
    }
    assert!(micro_batch(Ablation::Full, true, 7) < 1e-3);
}

#[test]
fn every_operator_passes() {
    for op in CHECKED_OPS {
        for seed in 0..5 {
            let r = grad_check(op, seed).unwrap();
            assert!(r.max_rel_err < 1e-4, "{op} seed {seed}: {:e}", r.max_rel_err);
            assert!(r.checked > 0);
        }
    }
}

#[test]
fn lst_at_full_mass_is_the_gst() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let side = rng.gen_range(2..8);
        let c = rng.gen_range(1..6);
        let top = random_top(&mut rng, side);
        let feat = Tensor::from_fn([side * side, c], |_| rng.gen_range(-2.0..2.0));
        let mut g = Graph::new();
        let x = g.constant(feat);
        let a = socl::socl::gst(&mut g, x, &top).unwrap();
        let b = socl::socl::lst(&mut g, x, &top, 1.0).unwrap();
        let (va, vb) = (g.value(a).data().to_vec(), g.value(b).data().to_vec());
        assert_eq!(va.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn uniform_map_gives_plain_mean() {
    let top = TopMap::new(RealGrid::new(2, 2, vec![0.25; 4]).unwrap()).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new([4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
    let z = socl::socl::gst(&mut g, x, &top).unwrap();
    assert_eq!(g.value(z).data(), &[4.0, 5.0]);
}
