use diffcore::functional::l2_normalize;
use diffcore::{Graph, ParamStore};
use dlr_core::reward::{focus_reward, total_reward};
use dlr_core::sglp::{
    clipped_sum_graph, group_advantages, importance_ratio, log_density_dot, log_density_unnorm, project_noise,
    ratio_graph,
};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| dot(v, v) > 1e-4)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..24).prop_flat_map(|d| (vector(d), vector(d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// One small ascent step on the unnormalized mean moves z^T mu with the
    /// sign of the advantage.
    #[test]
    fn ascent_moves_alignment_with_advantage(
        (m, noise) in pair(),
        a in prop_oneof![0.05f64..3.0, -3.0f64..-0.05],
    ) {
        let mu = l2_normalize(&m).unwrap();
        let eps: Vec<f64> = noise.iter().map(|x| 0.1 * x).collect();
        let z = project_noise(&mu, &eps).unwrap();
        prop_assume!(dot(&z, &mu) < 1.0 - 1e-9);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mv = g.input_with_grad(1, m.len(), m.clone());
        let mu_new = g.l2_normalize_rows(mv).unwrap();
        let r = ratio_graph(&mut g, &z, mu_new, &mu, 0.1).unwrap();
        let obj = clipped_sum_graph(&mut g, r, vec![a], 0.2);
        let grad = g.backward(obj).unwrap().input(mv).unwrap().to_vec();
        prop_assert_eq!(dot(&grad, &z).signum(), a.signum());
        let stepped: Vec<f64> = m.iter().zip(&grad).map(|(x, g)| x + 1e-4 * g).collect();
        let after = dot(&z, &l2_normalize(&stepped).unwrap());
        prop_assert_eq!((after - dot(&z, &mu)).signum(), a.signum());
    }

    #[test]
    fn density_forms_agree_on_the_sphere((a, b) in pair(), sigma in 0.05f64..2.0) {
        let z = l2_normalize(&a).unwrap();
        let mu = l2_normalize(&b).unwrap();
        let diff = log_density_unnorm(&z, &mu, sigma) - log_density_dot(&z, &mu, sigma);
        prop_assert!(diff.abs() < 1e-9 * (1.0 / (sigma * sigma)).max(1.0));
    }

    #[test]
    fn ratio_is_one_at_equal_policies((a, b) in pair(), sigma in 0.05f64..2.0) {
        let z = l2_normalize(&a).unwrap();
        let mu = l2_normalize(&b).unwrap();
        prop_assert_eq!(importance_ratio(&z, &mu, &mu, sigma), 1.0);
    }

    #[test]
    fn advantages_are_centered(rewards in prop::collection::vec(0.0f64..1.1, 2..16)) {
        let adv = group_advantages(&rewards).unwrap();
        prop_assert!(adv.iter().sum::<f64>().abs() < 1e-12);
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        for (a, r) in adv.iter().zip(&rewards) {
            prop_assert!((a - (r - mean)).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_answers_earn_nothing(focus in 0.0f64..=1.0, beta in 0.0f64..1.0) {
        prop_assert_eq!(total_reward(0.0, focus, beta), 0.0);
        prop_assert!((total_reward(1.0, focus, beta) - (1.0 + beta * focus)).abs() < 1e-15);
    }

    #[test]
    fn focus_is_in_unit_interval(
        p in prop::collection::vec(0.001f64..1.0, 4),
        q in prop::collection::vec(0.0f64..1.0, 4),
    ) {
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        prop_assume!(q.iter().sum::<f64>() > 1e-6);
        let r = focus_reward(&[norm(&q)], &[norm(&p)], 1.0);
        prop_assert!(r > 0.0 && r <= 1.0);
    }
}
