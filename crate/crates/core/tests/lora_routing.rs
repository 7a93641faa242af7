use persona_core::autodiff::Graph;
use persona_core::gradcheck::finite_diff_check;
use persona_core::lora::{init_adapter, lora_forward, moe_lora_forward, trainable_param_count, AdapterConfig, LoraExpert};
use persona_core::objectives::{
    auxiliary_balance_loss, auxiliary_balance_loss_graph, specialization_loss, specialization_loss_graph, total_loss,
    RegularizerMode,
};
use persona_core::optim::{Adam, AdamConfig};
use persona_core::routing::{weighting_matrix, weights_graph, ExpertWeighting, PersonalityTable, Router, WeightingMatrix};
use persona_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn weighting(raw: &[f64]) -> ExpertWeighting {
    let s: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / s).collect();
    let fix = 1.0 - w.iter().sum::<f64>();
    w[0] += fix;
    ExpertWeighting::new(w).unwrap()
}

fn columns() -> impl Strategy<Value = Vec<ExpertWeighting>> {
    (2usize..7, 2usize..7).prop_flat_map(|(n, p)| {
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, n), p)
            .prop_map(|cols| cols.iter().map(|c| weighting(c)).collect())
    })
}

proptest! {
    #[test]
    fn regularizers_ignore_trait_order(cols in columns(), rot in 0usize..7) {
        let m = WeightingMatrix::from_columns(&cols).unwrap();
        let mut shuffled = cols.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let s = WeightingMatrix::from_columns(&shuffled).unwrap();
        prop_assert!((specialization_loss(&m) - specialization_loss(&s)).abs() <= 1e-12);
        prop_assert!((auxiliary_balance_loss(&m) - auxiliary_balance_loss(&s)).abs() <= 1e-12);
    }

    #[test]
    fn regularizers_ignore_expert_order(cols in columns()) {
        let m = WeightingMatrix::from_columns(&cols).unwrap();
        let flipped: Vec<ExpertWeighting> = cols
            .iter()
            .map(|c| {
                let mut v = c.as_slice().to_vec();
                v.reverse();
                ExpertWeighting::new(v).unwrap()
            })
            .collect();
        let s = WeightingMatrix::from_columns(&flipped).unwrap();
        prop_assert!((specialization_loss(&m) - specialization_loss(&s)).abs() <= 1e-12);
        prop_assert!((auxiliary_balance_loss(&m) - auxiliary_balance_loss(&s)).abs() <= 1e-12);
    }

    #[test]
    fn specialization_loss_bounds(cols in columns()) {
        let m = WeightingMatrix::from_columns(&cols).unwrap();
        let p = cols.len() as f64;
        let psl = specialization_loss(&m);
        prop_assert!(psl >= 0.0 && psl <= p * (p - 1.0) + 1e-12);
        let aux = auxiliary_balance_loss(&m);
        prop_assert!(aux >= 1.0 - 1e-12 && aux <= m.num_experts() as f64 + 1e-12);
    }

    #[test]
    fn routing_always_yields_a_distribution(seed in 0u64..1000, std in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = PersonalityTable::random(10, 16, &mut rng);
        let router = Router::random(16, 8, std, &mut rng);
        let m = weighting_matrix(&table, &router).unwrap();
        for i in 0..10 {
            let col = m.column(i);
            prop_assert!(col.iter().all(|w| *w >= 0.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn disjoint_support_is_exactly_zero_and_overlap_is_not() {
    let a = ExpertWeighting::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
    let b = ExpertWeighting::new(vec![0.0, 0.0, 0.25, 0.75]).unwrap();
    assert_eq!(specialization_loss(&WeightingMatrix::from_columns(&[a.clone(), b]).unwrap()), 0.0);
    let c = ExpertWeighting::new(vec![0.0, 0.1, 0.9, 0.0]).unwrap();
    assert!(specialization_loss(&WeightingMatrix::from_columns(&[a, c]).unwrap()) > 0.0);
}

#[test]
fn specialization_loss_alone_separates_traits() {
    // Four traits, eight experts: minimizing the overlap alone must find
    // disjoint routings.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut table = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let mut gate = Tensor::randn(&[6, 8], 0.1, &mut rng);
    let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, &[table.len(), gate.len()]);
    let mut max_off = f64::INFINITY;
    for _ in 0..2000 {
        let grads = {
            let mut g = Graph::new();
            let t = g.leaf(&table, true);
            let gv = g.leaf(&gate, true);
            let w = weights_graph(&mut g, t, gv).unwrap();
            let loss = specialization_loss_graph(&mut g, w).unwrap();
            let grads = g.backward(loss).unwrap();
            vec![grads.get(t).unwrap().to_vec(), grads.get(gv).unwrap().to_vec()]
        };
        adam.step(&mut [table.data_mut(), gate.data_mut()], &grads).unwrap();
        let m = weighting_matrix(
            &PersonalityTable::new(table.clone()).unwrap(),
            &Router::new(gate.clone()).unwrap(),
        )
        .unwrap();
        max_off = m.gram_off_diagonal_stats().1;
        if max_off < 1e-3 {
            break;
        }
    }
    assert!(max_off < 1e-3, "max off-diagonal overlap {max_off}");
}

#[test]
fn parameter_count_matches_formula_for_any_expert_count() {
    let dims = [(64, 64), (64, 64), (64, 64), (64, 256), (256, 64)];
    for n in [1, 2, 4, 8, 16] {
        let cfg = AdapterConfig { num_experts: n, total_rank: 32, ..AdapterConfig::default() };
        let rho = 32 / n;
        let want: usize = dims.iter().map(|&(i, o)| n * (rho * i + o * rho)).sum();
        assert_eq!(trainable_param_count(&cfg, &dims), want);
        // The total rank is fixed, so the count does not depend on N.
        assert_eq!(want, dims.iter().map(|&(i, o)| 32 * (i + o)).sum::<usize>());
    }
}

#[test]
fn single_expert_mixture_reduces_to_plain_adapter() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Tensor::randn(&[5, 7], 1.0, &mut rng);
    let cfg = AdapterConfig { num_experts: 1, total_rank: 3, alpha: 6.0, ..AdapterConfig::default() };
    let mut layer = init_adapter(&cfg, vec![w], 9).unwrap().remove(0);
    layer
        .set_expert(0, &LoraExpert { a: Tensor::randn(&[3, 7], 1.0, &mut rng), b: Tensor::randn(&[5, 3], 1.0, &mut rng) })
        .unwrap();
    let h: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
    let plain = lora_forward(&h, &layer).unwrap();
    let mix = moe_lora_forward(&h, &layer, &ExpertWeighting::uniform(1)).unwrap();
    for (a, b) in plain.iter().zip(&mix) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn identical_experts_make_weights_irrelevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let cfg = AdapterConfig { num_experts: 4, total_rank: 8, ..AdapterConfig::default() };
    let mut layer = init_adapter(&cfg, vec![w], 1).unwrap().remove(0);
    let e = LoraExpert { a: Tensor::randn(&[2, 6], 1.0, &mut rng), b: Tensor::randn(&[4, 2], 1.0, &mut rng) };
    for j in 0..4 {
        layer.set_expert(j, &e).unwrap();
    }
    let h = vec![0.2, -0.4, 1.0, 0.0, 0.5, -1.5];
    let u = moe_lora_forward(&h, &layer, &ExpertWeighting::uniform(4)).unwrap();
    let skew = moe_lora_forward(&h, &layer, &ExpertWeighting::new(vec![0.7, 0.1, 0.15, 0.05]).unwrap()).unwrap();
    for (a, b) in u.iter().zip(&skew) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn combined_regularizer_gradients_pass_finite_differences() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let gates = [Tensor::randn(&[3, 4], 1.0, &mut rng), Tensor::randn(&[3, 4], 1.0, &mut rng)];
        let err = finite_diff_check(&[table, gates[0].clone(), gates[1].clone()], 1e-5, |g, p| {
            let mut acc = None;
            for &gate in &p[1..] {
                let w = weights_graph(g, p[0], gate)?;
                let psl = specialization_loss_graph(g, w)?;
                let aux = auxiliary_balance_loss_graph(g, w)?;
                let both = g.add(psl, aux)?;
                acc = Some(match acc {
                    None => both,
                    Some(a) => g.add(a, both)?,
                });
            }
            Ok(g.scale(acc.unwrap(), 0.05))
        })
        .unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn total_loss_is_linear_in_lambda() {
    let layers = [0.4, 1.2, 0.8];
    let base = total_loss(3.0, &layers, None, 0.0, RegularizerMode::Psl).unwrap().total;
    for lambda in [0.05, 0.1, 1.0] {
        let b = total_loss(3.0, &layers, None, lambda, RegularizerMode::Psl).unwrap();
        assert!((b.total - base - lambda * 0.8).abs() <= 1e-12);
    }
}
