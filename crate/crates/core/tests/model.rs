mod common;

use common::oracles::{closed_form_param_count, finite_difference_check};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxfuse::model::{InputBatch, Mode, ModelConfig, ModelError, NetworkParameters, SpatialRank};

fn random_input(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn default_parameter_count_matches_closed_form() {
    let cfg = ModelConfig::default();
    let params = NetworkParameters::<f32>::build(&cfg, 0).unwrap();
    assert_eq!(closed_form_param_count(&cfg), 312_706);
    assert_eq!(params.trainable_count(), 312_706);
}

#[test]
fn slice_model_parameter_count() {
    let cfg = ModelConfig::slice_2d();
    let params = NetworkParameters::<f32>::build(&cfg, 0).unwrap();
    // conv1 = 16 * (1 * 9 + 1) = 160
    assert_eq!(params.tensor("encoders.t1.block0.conv.weight").unwrap().len() + 16, 160);
    assert_eq!(params.trainable_count(), closed_form_param_count(&cfg));
    assert_eq!(params.trainable_count(), 32_356);
}

#[test]
fn same_seed_same_parameters() {
    let cfg = ModelConfig::default();
    let a = NetworkParameters::<f32>::build(&cfg, 11).unwrap();
    let b = NetworkParameters::<f32>::build(&cfg, 11).unwrap();
    let c = NetworkParameters::<f32>::build(&cfg, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn fused_dim_mismatch_is_rejected() {
    let cfg = ModelConfig { fused_dim: 200, ..ModelConfig::default() };
    assert!(matches!(NetworkParameters::<f32>::build(&cfg, 0), Err(ModelError::InvalidConfig(_))));
    let cfg = ModelConfig { head_hidden: 0, ..ModelConfig::default() };
    assert!(NetworkParameters::<f32>::build(&cfg, 0).is_err());
    let cfg = ModelConfig { dropout_p: 1.0, ..ModelConfig::default() };
    assert!(NetworkParameters::<f32>::build(&cfg, 0).is_err());
}

#[test]
fn shape_errors() {
    let params = NetworkParameters::<f64>::build(&ModelConfig::default(), 0).unwrap();
    let data = vec![0.0; 2 * 3 * 512];
    let err = params.infer(&InputBatch::new(&data, 2, 3, [8, 8, 8])).unwrap_err();
    assert!(matches!(err, ModelError::Shape(_)));
    let data = vec![0.0; 4 * 7 * 8 * 8];
    assert!(params.infer(&InputBatch::new(&data, 1, 4, [7, 8, 8])).is_err());
}

#[test]
fn full_resolution_forward_shapes() {
    let params = NetworkParameters::<f32>::build(&ModelConfig::default(), 3).unwrap();
    let dims = [91, 109, 91];
    let n = dims.iter().product::<usize>();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f32> = (0..2 * 4 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let trace = params.infer(&InputBatch::new(&data, 2, 4, dims)).unwrap();
    assert_eq!(trace.logits.len(), 2 * 2);
    assert_eq!(trace.embeddings.len(), 4);
    for e in &trace.embeddings {
        assert_eq!(e.len(), 2 * 64);
    }
    assert_eq!(trace.last_dims, [22, 27, 22]);
}

#[test]
fn eval_mode_is_repeatable() {
    let params = NetworkParameters::<f64>::build(&ModelConfig::default(), 4).unwrap();
    let data = random_input(2 * 4 * 512, 1);
    let x = InputBatch::new(&data, 2, 4, [8, 8, 8]);
    let a = params.infer(&x).unwrap();
    let b = params.infer(&x).unwrap();
    assert_eq!(a.logits, b.logits);
    let (c, _) = params.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a.logits, c.logits);
}

#[test]
fn train_mode_dropout_is_seed_reproducible() {
    let params = NetworkParameters::<f64>::build(&ModelConfig::default(), 4).unwrap();
    let data = random_input(2 * 4 * 512, 1);
    let x = InputBatch::new(&data, 2, 4, [8, 8, 8]);
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.forward(&x, Mode::Train(&mut rng)).unwrap().0.logits
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn branches_are_independent() {
    let params = NetworkParameters::<f64>::build(&ModelConfig::default(), 8).unwrap();
    let dims = [8, 8, 8];
    let s = 512;
    let data = random_input(2 * 4 * s, 2);
    let base = params.infer(&InputBatch::new(&data, 2, 4, dims)).unwrap();
    for c in 0..4 {
        let mut perturbed = data.clone();
        for b in 0..2 {
            for v in &mut perturbed[(b * 4 + c) * s..(b * 4 + c + 1) * s] {
                *v = 0.0;
            }
        }
        let t = params.infer(&InputBatch::new(&perturbed, 2, 4, dims)).unwrap();
        for m in 0..4 {
            if m == c {
                assert_ne!(t.embeddings[m], base.embeddings[m], "branch {m} should change");
            } else {
                assert_eq!(t.embeddings[m], base.embeddings[m], "branch {m} must not change when channel {c} is zeroed");
            }
        }
    }
}

#[test]
fn global_average_pool_shift() {
    // The embedding is the spatial mean of the last activation map, so a
    // constant added to one channel's map moves that coordinate by the same
    // constant.
    let params = NetworkParameters::<f64>::build(&ModelConfig::default(), 8).unwrap();
    let data = random_input(4 * 512, 3);
    let t = params.infer(&InputBatch::new(&data, 1, 4, [8, 8, 8])).unwrap();
    let s: usize = t.last_dims.iter().product();
    for m in 0..4 {
        let act = &t.last_activations[m];
        for c in [0, 17, 63] {
            let mean: f64 = act[c * s..(c + 1) * s].iter().sum::<f64>() / s as f64;
            assert!((mean - t.embeddings[m][c]).abs() < 1e-12);
            let shifted: f64 = act[c * s..(c + 1) * s].iter().map(|v| v + 0.25).sum::<f64>() / s as f64;
            assert!((shifted - (t.embeddings[m][c] + 0.25)).abs() < 1e-12);
        }
    }
}

// Central differences at step 1e-3 are only a derivative estimate when no
// ReLU or max-pool kink lies within the step; entries that straddle one are
// re-evaluated at a smaller step (see `finite_difference_check`).
#[test]
fn analytic_gradients_match_finite_differences() {
    let cfg = ModelConfig::default();
    let params = NetworkParameters::<f64>::build(&cfg, 21).unwrap();
    let input = random_input(2 * 4 * 512, 22);
    let checks = finite_difference_check(&params, &input, 2, [8, 8, 8], &[0, 1], 1e-3, 24, 5);
    assert_eq!(checks.len(), 4 * 3 * 4 + 4);
    for c in &checks {
        assert!(
            c.rel_error_kink_aware <= 1e-3,
            "{}: relative error {:.3e} over {} entries ({} straddled a kink)",
            c.name,
            c.rel_error_kink_aware,
            c.checked,
            c.kinked
        );
    }
}

#[test]
fn slice_model_gradients_match_finite_differences() {
    let cfg = ModelConfig::slice_2d();
    assert_eq!(cfg.spatial_rank, SpatialRank::TwoD);
    let params = NetworkParameters::<f64>::build(&cfg, 2).unwrap();
    let input = random_input(3 * 16 * 16, 3);
    let checks = finite_difference_check(&params, &input, 3, [16, 16, 1], &[0, 3, 1], 1e-3, 24, 9);
    for c in &checks {
        assert!(c.rel_error_kink_aware <= 1e-3, "{}: {:.3e}", c.name, c.rel_error_kink_aware);
    }
}

#[test]
fn slice_forward_shapes() {
    let params = NetworkParameters::<f32>::build(&ModelConfig::slice_2d(), 1).unwrap();
    let data = vec![0.5f32; 8 * 64 * 64];
    let x = InputBatch::new(&data, 8, 1, [64, 64, 1]);
    let a = params.infer(&x).unwrap();
    assert_eq!(a.logits.len(), 8 * 4);
    assert_eq!(params.infer(&x).unwrap().logits, a.logits);
}

#[test]
fn running_stats_follow_momentum_rule() {
    let mut params = NetworkParameters::<f64>::build(&ModelConfig::default(), 1).unwrap();
    let data = random_input(2 * 4 * 512, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, cache) = params.forward(&InputBatch::new(&data, 2, 4, [8, 8, 8]), Mode::Train(&mut rng)).unwrap();
    params.update_running_stats(&cache);
    let rm = &params.tensor("encoders.t1.block0.bn.running_mean").unwrap().data;
    let rv = &params.tensor("encoders.t1.block0.bn.running_var").unwrap().data;
    // starting from (0, 1), one update gives 0.1 * batch statistics
    assert!(rm.iter().any(|v| v.abs() > 0.0));
    assert!(rv.iter().all(|&v| v > 0.0 && v.is_finite()));
}
