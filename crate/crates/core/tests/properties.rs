use maskrdt::model::{Model, ModelConfig};
use maskrdt::numerics::{Eager, Tensor};
use maskrdt::retention::{retention, RetentionMode};
use maskrdt::trajectory::{build_segment, compute_rtg, sample_mask, Step, Token, Trajectory};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn qkv() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
    (1usize..40, 1usize..6).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d), matrix(n, d)))
}

fn trajectory(d_s: usize, catalog: usize) -> impl Strategy<Value = Trajectory> {
    let step = (
        prop::collection::vec(-2.0f64..2.0, d_s),
        0..catalog,
        prop::bool::ANY,
    )
        .prop_map(|(state, action, click)| Step {
            state,
            action,
            reward: if click { 1.0 } else { 0.0 },
        });
    prop::collection::vec(step, 1..20).prop_map(|s| Trajectory::new(0, s, 1.0).unwrap())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn tiny_model() -> Model {
    let cfg = ModelConfig {
        d_h: 8,
        heads: 2,
        layers: 1,
        context: 6,
        seg_len: 4,
        d_s: 3,
        catalog: 5,
        dropout: 0.0,
        max_timestep: 20,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = maskrdt::model::ModelParams::init(&cfg, &mut rng).unwrap();
    Model::new(cfg, params).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retention_modes_agree((q, k, v) in qkv(), alpha in 0.5f64..0.999, seg in 1usize..12) {
        let r = retention(&mut Eager, RetentionMode::Recurrent, &q, &k, &v, alpha, seg).unwrap();
        let p = retention(&mut Eager, RetentionMode::Parallel, &q, &k, &v, alpha, seg).unwrap();
        let c = retention(&mut Eager, RetentionMode::Chunkwise, &q, &k, &v, alpha, seg).unwrap();
        prop_assert!(max_abs_diff(&r, &p) < 1e-9);
        prop_assert!(max_abs_diff(&r, &c) < 1e-9);
    }

    #[test]
    fn retention_output_ignores_later_tokens(
        (q, k, v) in qkv(), alpha in 0.5f64..0.999, cut in 0usize..40, noise in -3.0f64..3.0,
    ) {
        let n = q.rows();
        let cut = cut % n;
        let split = (cut + 1) * v.cols();
        let shifted = v.data().iter().enumerate().map(|(i, x)| if i >= split { x + noise } else { *x });
        let v2 = Tensor::new(v.shape().to_vec(), shifted.collect()).unwrap();
        let a = retention(&mut Eager, RetentionMode::Parallel, &q, &k, &v, alpha, 4).unwrap();
        let b = retention(&mut Eager, RetentionMode::Parallel, &q, &k, &v2, alpha, 4).unwrap();
                prop_assert!(max_abs_diff(
            &Tensor::vector(a.data()[..split].to_vec()),
            &Tensor::vector(b.data()[..split].to_vec()),
        ) < 1e-12);
    }

    #[test]
    fn rtg_satisfies_backward_recursion(
        rewards in prop::collection::vec(-1.0f64..1.0, 1..50), gamma in 0.0f64..=1.0,
    ) {
        let g = compute_rtg(&rewards, gamma).unwrap();
        let n = rewards.len();
        prop_assert!((g[n - 1] - rewards[n - 1]).abs() < 1e-12);
        for t in 0..n - 1 {
            prop_assert!((g[t] - (rewards[t] + gamma * g[t + 1])).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_segment_exposes_exactly_m_steps(
        traj in trajectory(3, 5), t in 0usize..20, context in 1usize..10, seed in any::<u64>(),
    ) {
        let t = t % traj.len();
        let m = sample_mask(t, context, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(m >= 1 && m <= context.min(t + 1));
        let seg = build_segment(&traj, t, context, m).unwrap();
        prop_assert_eq!(seg.tokens.len(), 3 * context);
        prop_assert_eq!(seg.visible_count(), 2 * m);
        prop_assert_eq!(seg.visible_state_slots().len(), m);
        prop_assert_eq!(seg.visible_action_slots().len(), m - 1);
        prop_assert_eq!(seg.rtg_value(), traj.rtg()[t + 1 - m]);
        for (tok, &vis) in seg.tokens.iter().zip(&seg.visible) {
            prop_assert!(!vis || *tok != Token::Padding);
        }
    }

    #[test]
    fn predictions_ignore_hidden_tokens(traj in trajectory(3, 5), t in 0usize..20, m in 1usize..7) {
        let model = tiny_model();
        let t = t % traj.len();
        let m = m.min(t + 1).min(model.config.context);
        let seg = build_segment(&traj, t, model.config.context, m).unwrap();
        let mut scrambled = seg.clone();
        for (tok, &vis) in scrambled.tokens.iter_mut().zip(&seg.visible) {
            if vis {
                continue;
            }
            *tok = match tok {
                Token::State(s) => Token::State(s.iter().map(|x| x * -3.0 + 1.0).collect()),
                Token::Action(a) => Token::Action((*a + 1) % 5),
                Token::Rtg(g) => Token::Rtg(*g + 10.0),
                Token::Padding => Token::Padding,
            };
        }
        let a = model.predict(&[&seg]).unwrap();
        let b = model.predict(&[&scrambled]).unwrap();
        prop_assert!(max_abs_diff(&a.reward, &b.reward) < 1e-12);
        prop_assert!(max_abs_diff(&a.logits, &b.logits) < 1e-12);
    }
}
