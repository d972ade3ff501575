use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rlt::denoiser::diffusion_loss;
use rlt::latent::LatentVideo;
use rlt::mask::masked_loss;
use rlt::rcl::{rcl_loss, DynamicsFeature, MemoryBank, Role};
use rlt::{Rng, Tensor};

fn latent(dims: &[usize], rng: &mut Rng) -> LatentVideo<f64> {
    LatentVideo::new(Tensor::gaussian(dims, 0.0, 1.0, rng)).unwrap()
}

#[test]
fn masked_loss_degenerates() {
    let mut rng = Rng::seed_from_u64(0);
    for _ in 0..100 {
        let dims = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..4)];
        let (eps, hat) = (latent(&dims, &mut rng), latent(&dims, &mut rng));
        let mask = Tensor::from_fn(&dims[..3], |_| f64::from(u8::from(rng.random_bool(0.5))));
        let plain = diffusion_loss(&eps, &hat).unwrap();
        assert!((masked_loss(&eps, &hat, &mask, 0.0).unwrap() - plain).abs() < 1e-12);
        let ones = Tensor::ones(&dims[..3]);
        assert!((masked_loss(&eps, &hat, &ones, 50.0).unwrap() - 51.0 * plain).abs() < 1e-9);
    }
}

#[test]
fn contrastive_loss_symmetric_closed_form() {
    // Every similarity equal: each anchor contributes −log(n_pos / (n_pos + n_neg)).
    let (rows, c) = (3, 5);
    let v = Tensor::from_fn(&[rows, c], |i| (i % c) as f64 + 1.0);
    let pos = Tensor::from_fn(&[rows, 4, c], |i| 2.0 * ((i % c) as f64 + 1.0));
    let neg = Tensor::from_fn(&[rows, 10, c], |i| 0.5 * ((i % c) as f64 + 1.0));
    let l = rcl_loss(&v, &pos, &neg, 0.07).unwrap();
    let per_anchor = -(4.0f64 / 14.0).ln();
    assert!((per_anchor - 1.252763).abs() < 1e-6);
    assert!((l / rows as f64 - per_anchor).abs() < 1e-9, "{l}");
}

/// Direct InfoNCE on unit vectors, written independently of the graph code.
fn naive_info_nce(a: &Tensor, p: &Tensor, n: &Tensor, tau: f64) -> f64 {
    let c = a.shape()[1];
    let unit = |x: &[f64]| {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter().map(|v| v / norm).collect::<Vec<_>>()
    };
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let mut total = 0.0;
    for i in 0..a.shape()[0] {
        let ai = unit(&a.data()[i * c..(i + 1) * c]);
        let sims = |t: &Tensor| {
            let k = t.shape()[1];
            (0..k).map(|j| (dot(&ai, &unit(&t.data()[(i * k + j) * c..(i * k + j + 1) * c])) / tau).exp()).sum::<f64>()
        };
        let (sp, sn) = (sims(p), sims(n));
        total -= (sp / (sp + sn)).ln();
    }
    total
}

#[test]
fn contrastive_loss_matches_direct_formula() {
    let mut rng = Rng::seed_from_u64(5);
    for tau in [0.07, 0.5, 1.0] {
        let a = Tensor::gaussian(&[3, 6], 0.0, 1.0, &mut rng);
        let p = Tensor::gaussian(&[3, 4, 6], 0.0, 1.0, &mut rng);
        let n = Tensor::gaussian(&[3, 10, 6], 0.0, 1.0, &mut rng);
        let ours = rcl_loss(&a, &p, &n, tau).unwrap();
        let expect = naive_info_nce(&a, &p, &n, tau);
        assert!((ours - expect).abs() < 1e-9 * expect.abs().max(1.0), "{ours} vs {expect}");
    }
}

fn feature(id: usize) -> DynamicsFeature<f64> {
    DynamicsFeature {
        vector: vec![id as f64],
        relation_id: ["approach", "orbit"][id % 2].into(),
        role: if id.is_multiple_of(3) { Role::Appearance } else { Role::Dynamics },
        video_id: format!("v{}", id % 7),
        frame: id % 4,
        timestep: id % 100,
    }
}

#[test]
fn bank_matches_list_replay() {
    let mut rng = Rng::seed_from_u64(11);
    let mut bank = MemoryBank::new(64);
    let mut oracle: Vec<DynamicsFeature<f64>> = Vec::new();
    let mut next = 0;
    for _ in 0..10_000 {
        let batch: Vec<_> = (0..rng.random_range(0..6)).map(|_| {
            next += 1;
            feature(next)
        }).collect();
        oracle.extend(batch.iter().cloned());
        let excess = oracle.len().saturating_sub(64);
        oracle.drain(..excess);
        bank.push(batch);
        assert_eq!(bank.capacity(), 64);
        assert!(bank.iter().eq(oracle.iter()));
    }
}

proptest! {
    #[test]
    fn bank_keeps_the_newest(capacity in 0usize..20, pushes in prop::collection::vec(0usize..8, 0..40)) {
        let mut bank = MemoryBank::new(capacity);
        let mut total = 0;
        for n in pushes {
            bank.push((total..total + n).map(feature));
            total += n;
        }
        prop_assert_eq!(bank.len(), total.min(capacity));
        let ids: Vec<usize> = bank.iter().map(|f| f.vector[0] as usize).collect();
        let expect: Vec<usize> = (total - total.min(capacity)..total).collect();
        prop_assert_eq!(ids, expect);
    }

    #[test]
    fn masked_loss_is_monotone_in_lambda(seed in 0u64..500, lo in 0.0f64..20.0, extra in 0.0f64..20.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let dims = [2, 2, 3, 2];
        let (eps, hat) = (latent(&dims, &mut rng), latent(&dims, &mut rng));
        let mask = Tensor::from_fn(&dims[..3], |_| rng.random_range(0.0..1.0));
        let a = masked_loss(&eps, &hat, &mask, lo).unwrap();
        let b = masked_loss(&eps, &hat, &mask, lo + extra).unwrap();
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn contrastive_loss_is_scale_invariant(seed in 0u64..500, k in 0.1f64..10.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let a = Tensor::gaussian(&[2, 4], 0.0, 1.0, &mut rng);
        let p = Tensor::gaussian(&[2, 3, 4], 0.0, 1.0, &mut rng);
        let n = Tensor::gaussian(&[2, 5, 4], 0.0, 1.0, &mut rng);
        let l1 = rcl_loss(&a, &p, &n, 0.2).unwrap();
        let l2 = rcl_loss(&a.map(|x| k * x), &p, &n.map(|x| k * x), 0.2).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-9 * l1.abs().max(1.0));
        prop_assert!(l1 > 0.0);
    }
}
