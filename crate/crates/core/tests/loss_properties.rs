use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use riddle_core::losses::{
    deid_loss, diversity_loss, latent_reg_loss, parsing_loss, perceptual_loss, pixel_loss, recovery_loss,
    similarity_matrix, total_loss, ChannelMask, LossParts, LossWeights,
};
use riddle_core::{ChunkLayout, LatentCode, Tensor};

fn units(seed: u64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn parts_from(v: [f64; 7]) -> LossParts {
    LossParts {
        div: v[0],
        deid: v[1],
        rec: v[2],
        pix: v[3],
        lpips: v[4],
        parse: v[5],
        latent: v[6],
    }
}

proptest! {
    #[test]
    fn identity_terms_are_bounded(seed in any::<u64>(), m in 1usize..4, n in 1usize..3, dim in 2usize..12, eps in 0.0f64..0.9) {
        let k = m * (n + 1);
        let set = units(seed, k + m + 1, dim);
        let (orig, rest) = set.split_first().unwrap();
        let deid: Vec<&[f64]> = rest[..k].iter().map(Vec::as_slice).collect();
        let correct: Vec<&[f64]> = rest[k..].iter().map(Vec::as_slice).collect();

        let sim = similarity_matrix(&deid, eps).unwrap();
        for i in 0..k {
            for j in 0..k {
                prop_assert!(sim.values()[(i, j)] >= eps);
                prop_assert!((sim.values()[(i, j)] - sim.values()[(j, i)]).abs() < 1e-12);
            }
        }
        let div = diversity_loss(&sim, m, n).unwrap();
        prop_assert!(div >= 0.0);
        let d = deid_loss(orig, &deid, eps).unwrap();
        prop_assert!(d >= 0.0 && d <= k as f64 + 1e-12);
        let r = recovery_loss(orig, &correct).unwrap();
        prop_assert!(r >= -1e-12 && r <= 2.0 * m as f64 + 1e-12);
    }

    #[test]
    fn quality_terms_are_nonnegative(seed in any::<u64>(), len in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |r: usize, c: usize| Tensor::<f64>::randn(r, c, 1.0, &mut rng);
        prop_assert!(pixel_loss(&t(1, len), &t(1, len)).unwrap() >= 0.0);
        prop_assert!(perceptual_loss(&t(1, len), &t(1, len)).unwrap() >= 0.0);
        let mask = ChannelMask::new(vec![false, true, true, true, true, false]).unwrap();
        prop_assert!(parsing_loss(&t(6, len), &t(6, len), &mask).unwrap() >= 0.0);
        let layout = ChunkLayout::new(1, 1, 1).unwrap();
        let w = LatentCode::new(t(3, len), layout).unwrap();
        let others: Vec<LatentCode<f64>> = (0..3).map(|_| LatentCode::new(t(3, len), layout).unwrap()).collect();
        let refs: Vec<&LatentCode<f64>> = others.iter().collect();
        prop_assert!(latent_reg_loss(&w, &refs).unwrap() >= 0.0);
    }

    #[test]
    fn total_is_linear_in_each_part(base in prop::array::uniform7(0.0f64..10.0), which in 0usize..7, delta in -5.0f64..5.0) {
        let w = LossWeights::default();
        let coeff = [1.0, 1.0, 1.0, w.pix, w.lpips, w.parse, w.latent];
        let mut bumped = base;
        bumped[which] += delta;
        let diff = total_loss(&parts_from(bumped), &w) - total_loss(&parts_from(base), &w);
        prop_assert!((diff - coeff[which] * delta).abs() < 1e-9);
    }

    #[test]
    fn diversity_matches_pair_loop(seed in any::<u64>(), m in 1usize..3, n in 1usize..3) {
        let k = m * (n + 1);
        let set = units(seed, k, 5);
        let refs: Vec<&[f64]> = set.iter().map(Vec::as_slice).collect();
        let sim = similarity_matrix(&refs, 0.0).unwrap();
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    let c: f64 = set[i].iter().zip(&set[j]).map(|(a, b)| a * b).sum();
                    acc += c.max(0.0);
                }
            }
        }
        let want = acc / (k * k) as f64;
        prop_assert!((diversity_loss(&sim, m, n).unwrap() - want).abs() <= 1e-9 * want.max(1.0));
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let set = units(1, 4, 3);
    let refs: Vec<&[f64]> = set.iter().map(Vec::as_slice).collect();
    let sim = similarity_matrix(&refs, 0.0).unwrap();
    assert!(diversity_loss(&sim, 2, 2).is_err());
    assert!(diversity_loss(&sim, 2, 1).is_ok());
}
