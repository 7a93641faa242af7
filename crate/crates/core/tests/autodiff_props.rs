use persona_core::autodiff::Graph;
use persona_core::gradcheck::finite_diff_check;
use persona_core::tensor::{log_sum_exp, softmax, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn softmax_is_a_distribution(row in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&row);
        prop_assert!(p.iter().all(|v| *v >= 0.0 && *v <= 1.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(row in prop::collection::vec(-20.0f64..20.0, 1..20), c in -100.0f64..100.0) {
        let a = softmax(&row);
        let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..6),
        seed in 0u64..100,
    ) {
        let logits = Tensor::from_rows(&rows).unwrap();
        let targets: Vec<usize> = (0..rows.len()).map(|i| (seed as usize + 3 * i) % 6).collect();
        let mask: Vec<bool> = (0..rows.len()).map(|i| i % 3 != 1).collect();
        let mut g = Graph::new();
        let l = g.leaf(&logits, false);
        let ce = g.cross_entropy(l, &targets, &mask).unwrap();
        let used: Vec<usize> = (0..rows.len()).filter(|&i| mask[i]).collect();
        let want = used.iter().map(|&i| log_sum_exp(&rows[i]) - rows[i][targets[i]]).sum::<f64>() / used.len() as f64;
        prop_assert!((g.scalar(ce) - want).abs() <= 1e-10);
        prop_assert!(g.scalar(ce) >= 0.0);
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let logits = Tensor::zeros(&[3, 260]);
    let mut g = Graph::new();
    let l = g.leaf(&logits, false);
    let ce = g.cross_entropy(l, &[0, 5, 259], &[true, true, true]).unwrap();
    assert!((g.scalar(ce) - 260f64.ln()).abs() <= 1e-12);
}

#[test]
fn empty_mask_is_rejected() {
    let logits = Tensor::zeros(&[2, 4]);
    let mut g = Graph::new();
    let l = g.leaf(&logits, false);
    assert!(g.cross_entropy(l, &[0, 1], &[false, false]).is_err());
}

#[test]
fn transformer_style_block_gradients() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let wq = Tensor::randn(&[6, 6], 0.5, &mut rng);
        let wk = Tensor::randn(&[6, 6], 0.5, &mut rng);
        let wo = Tensor::randn(&[6, 5], 0.5, &mut rng);
        let targets = [1, 4, 0, 2];
        let err = finite_diff_check(&[x, wq, wk, wo], 1e-5, |g, p| {
            let h = g.layer_norm(p[0]);
            let q = g.matmul(h, p[1])?;
            let k = g.matmul(h, p[2])?;
            let s = g.matmul_nt(q, k)?;
            let s = g.scale(s, 0.4);
            let a = g.causal_softmax(s)?;
            let ctx = g.matmul(a, h)?;
            let ctx = g.gelu(ctx);
            let r = g.add(ctx, h)?;
            let logits = g.matmul(r, p[3])?;
            g.cross_entropy(logits, &targets, &[true, false, true, true])
        })
        .unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn slicing_and_embedding_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let table = Tensor::randn(&[7, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[1, 2], 1.0, &mut rng);
    let err = finite_diff_check(&[table, w], 1e-5, |g, p| {
        let e = g.embedding(p[0], &[3, 0, 3, 6])?;
        let left = g.slice_cols(e, 0, 2)?;
        let right = g.slice_cols(e, 2, 2)?;
        let right = g.scale_col_blocks(right, p[1])?;
        let joined = g.concat_cols(&[right, left])?;
        let top = g.slice_rows(joined, 1, 3)?;
        let m = g.mean_rows(top);
        let sq = g.mul(m, m)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}
