use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::ATTENTION_MASK_VALUE;
use super::*;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

#[test]
fn matmul_identity_is_identity() {
    let g = Graph::new(0);
    let a = g.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let eye = g.constant(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let out = a.matmul(&eye).unwrap();
    assert_eq!(out.value(), a.value());
}

#[test]
fn matmul_shape_mismatch_is_reported() {
    let g = Graph::new(0);
    let a = g.zeros(2, 3);
    let b = g.zeros(2, 3);
    match a.matmul(&b) {
        Err(NumericsError::Shape { op: "matmul", detail }) => {
            assert!(detail.contains("2x3"), "{detail}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let g = Graph::new(0);
    let x = g.constant(2, 4, vec![0.7; 8]);
    let y = x.softmax().unwrap();
    for v in y.value() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let g = Graph::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.constant(5, 7, rand_vec(&mut rng, 35));
    let y = x.softmax().unwrap();
    let vals = y.value();
    for r in 0..5 {
        let s: f64 = vals[r * 7..(r + 1) * 7].iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
    }
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let g = Graph::new(0);
    let x = g.constant(1, 3, vec![0.3, ATTENTION_MASK_VALUE, 1.1]);
    let y = x.softmax().unwrap();
    let v = y.value();
    assert_eq!(v[1], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
}

#[test]
fn bilinear_center_of_2x2_grid_is_corner_mean() {
    let g = Graph::new(0);
    // 2x2 grid with 1 channel: corners 1, 2, 3, 4
    let feat = g.constant(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
    let coords = g.constant(1, 2, vec![0.5, 0.5]);
    let out = feat.grid_sample(&coords, 2, 2).unwrap();
    assert!((out.value()[0] - 2.5).abs() < 1e-15);
}

#[test]
fn grid_sample_clamps_out_of_range_coordinates() {
    let g = Graph::new(0);
    let feat = g.constant(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
    let coords = g.constant(2, 2, vec![-3.0, 0.0, 7.0, 1.0]);
    let out = feat.grid_sample(&coords, 2, 2).unwrap();
    assert_eq!(out.value(), vec![1.0, 4.0]);
}

#[test]
fn cross_entropy_is_nonnegative_and_exact_for_onehot() {
    let g = Graph::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = g.constant(3, 5, rand_vec(&mut rng, 15));
    let ce = logits.cross_entropy(&[1, 0, 4], &[1.0, 1.0, 1.0]).unwrap();
    assert!(ce.scalar_value() >= 0.0);
    // a strongly peaked logit row has near-zero loss
    let peaked = g.constant(1, 3, vec![50.0, 0.0, 0.0]);
    let ce = peaked.cross_entropy(&[0], &[1.0]).unwrap();
    assert!(ce.scalar_value() < 1e-12);
}

#[test]
fn backward_of_sum_is_ones() {
    let g = Graph::new(0);
    let x = g.param(2, 3, vec![0.5; 6]);
    let loss = x.sum_all().unwrap();
    g.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_elementwise_product_is_other_factor() {
    let g = Graph::new(0);
    let x = g.param(1, 3, vec![1.0, 2.0, 3.0]);
    let y = g.param(1, 3, vec![4.0, 5.0, 6.0]);
    let loss = x.mul(&y).unwrap().sum_all().unwrap();
    g.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, 5.0, 6.0]);
    assert_eq!(y.grad().unwrap(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let g = Graph::new(0);
    let x = g.param(2, 2, vec![1.0; 4]);
    assert!(matches!(
        g.backward(&x),
        Err(NumericsError::NonScalarLoss { rows: 2, cols: 2 })
    ));
}

#[test]
fn gradients_accumulate_until_cleared() {
    let g = Graph::new(0);
    let x = g.param(1, 2, vec![1.0, 2.0]);
    let mark = g.mark();
    let loss = x.sum_all().unwrap();
    g.backward(&loss).unwrap();
    g.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    g.zero_grads();
    g.rewind(mark);
    let loss = x.sum_all().unwrap();
    g.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
}

#[test]
fn dropout_is_identity_in_eval_mode() {
    let g = Graph::new(9);
    g.set_eval(true);
    let x = g.constant(4, 4, vec![0.3; 16]);
    let y = x.dropout(0.5).unwrap();
    assert_eq!(y.value(), x.value());
}

#[test]
fn dropout_scales_surviving_entries() {
    let g = Graph::new(9);
    let x = g.constant(1, 1000, vec![1.0; 1000]);
    let y = x.dropout(0.2).unwrap();
    let vals = y.value();
    let kept = vals.iter().filter(|v| **v != 0.0).count();
    for v in &vals {
        assert!(*v == 0.0 || (*v - 1.25).abs() < 1e-12);
    }
    assert!((700..900).contains(&kept), "kept {kept} of 1000 at p=0.2");
}

/// Generic finite-difference harness: loss = sum(op_output * fixed rand
/// weights); compares every parameter gradient against central
/// differences.
fn fd_case(
    name: &str,
    param_shapes: &[(usize, usize)],
    build: impl Fn(&Graph, &[Tensor]) -> Tensor,
) {
    let g = Graph::new(0);
    g.set_eval(true);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut registry = ParamRegistry::new();
    let params: Vec<Tensor> = param_shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            registry.register(format!("p{i}"), g.param(r, c, rand_vec(&mut rng, r * c)))
        })
        .collect();
    let max_rel = finite_diff_check(
        &g,
        &registry,
        || {
            let out = build(&g, &params);
            let w = g.constant(
                out.rows(),
                out.cols(),
                (0..out.elem_count())
                    .map(|i| 0.3 + 0.1 * (i % 7) as f64)
                    .collect(),
            );
            out.mul(&w).unwrap().sum_all()
        },
        1e-5,
        24,
        7,
    )
    .unwrap();
    assert!(max_rel < 1e-6, "{name}: max relative error {max_rel}");
}

#[test]
fn finite_diff_validates_every_op_backward() {
    fd_case("add", &[(3, 4), (3, 4)], |_, p| p[0].add(&p[1]).unwrap());
    fd_case("sub", &[(3, 4), (3, 4)], |_, p| p[0].sub(&p[1]).unwrap());
    fd_case("mul", &[(3, 4), (3, 4)], |_, p| p[0].mul(&p[1]).unwrap());
    fd_case("div", &[(3, 4), (3, 4)], |_, p| {
        p[0].div(&p[1].add_scalar(3.0).unwrap()).unwrap()
    });
    fd_case("add_row", &[(3, 4), (1, 4)], |_, p| {
        p[0].add_row(&p[1]).unwrap()
    });
    fd_case("neg", &[(2, 5)], |_, p| p[0].neg().unwrap());
    fd_case("scale", &[(2, 5)], |_, p| p[0].scale(-1.7).unwrap());
    fd_case("add_scalar", &[(2, 5)], |_, p| p[0].add_scalar(0.9).unwrap());
    fd_case("matmul", &[(3, 4), (4, 2)], |_, p| {
        p[0].matmul(&p[1]).unwrap()
    });
    fd_case("transpose", &[(3, 4)], |_, p| p[0].transpose().unwrap());
    fd_case("concat_rows", &[(2, 3), (4, 3)], |_, p| {
        concat_rows(&[p[0].clone(), p[1].clone()]).unwrap()
    });
    fd_case("concat_cols", &[(3, 2), (3, 5)], |_, p| {
        concat_cols(&[p[0].clone(), p[1].clone()]).unwrap()
    });
    fd_case("slice_rows", &[(5, 3)], |_, p| {
        p[0].slice_rows(1, 3).unwrap()
    });
    fd_case("slice_cols", &[(3, 6)], |_, p| {
        p[0].slice_cols(2, 3).unwrap()
    });
    fd_case("reshape", &[(3, 4)], |_, p| p[0].reshape(6, 2).unwrap());
    fd_case("softmax", &[(3, 5)], |_, p| p[0].softmax().unwrap());
    fd_case("layer_norm", &[(4, 6), (1, 6), (1, 6)], |_, p| {
        p[0].layer_norm(&p[1], &p[2]).unwrap()
    });
    fd_case("gelu", &[(3, 4)], |_, p| p[0].gelu().unwrap());
    fd_case("relu", &[(3, 4)], |_, p| p[0].relu().unwrap());
    fd_case("sigmoid", &[(3, 4)], |_, p| p[0].sigmoid().unwrap());
    fd_case("max2", &[(3, 4), (3, 4)], |_, p| p[0].max2(&p[1]).unwrap());
    fd_case("min2", &[(3, 4), (3, 4)], |_, p| p[0].min2(&p[1]).unwrap());
    fd_case("reduce_min0", &[(5, 3)], |_, p| p[0].reduce_min0().unwrap());
    fd_case("reduce_max0", &[(5, 3)], |_, p| p[0].reduce_max0().unwrap());
    fd_case("mean_all", &[(4, 4)], |_, p| p[0].mean_all().unwrap());
    fd_case("repeat_rows_each", &[(3, 4)], |_, p| {
        p[0].repeat_rows_each(3).unwrap()
    });
    fd_case("sum_group_rows", &[(6, 4)], |_, p| {
        p[0].sum_group_rows(2).unwrap()
    });
    fd_case("scale_rows", &[(4, 3), (4, 1)], |_, p| {
        p[0].scale_rows(&p[1]).unwrap()
    });
    fd_case("embed", &[(6, 4)], |_, p| {
        p[0].embed(&[0, 3, 3, 5, 1]).unwrap()
    });
    fd_case("cross_entropy", &[(4, 6)], |_, p| {
        p[0].cross_entropy(&[2, 0, 5, 1], &[0.25, 0.25, 0.3, 0.2]).unwrap()
    });
    fd_case("smooth_l1", &[(3, 4), (3, 4)], |_, p| {
        p[0].smooth_l1(&p[1], 1.0).unwrap()
    });
    fd_case("grid_sample", &[(12, 5), (6, 2)], |g, p| {
        // squash coordinates into the interior so clamping stays inactive
        let coords = p[1].sigmoid().unwrap().scale(0.9).unwrap().add_scalar(0.05).unwrap();
        let _ = g;
        p[0].grid_sample(&coords, 4, 3).unwrap()
    });
}

#[test]
fn finite_diff_on_small_mlp_with_cross_entropy() {
    let g = Graph::new(0);
    g.set_eval(true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut registry = ParamRegistry::new();
    let w1 = registry.register("w1", g.param(6, 8, rand_vec(&mut rng, 48)));
    let b1 = registry.register("b1", g.param(1, 8, rand_vec(&mut rng, 8)));
    let w2 = registry.register("w2", g.param(8, 4, rand_vec(&mut rng, 32)));
    let b2 = registry.register("b2", g.param(1, 4, rand_vec(&mut rng, 4)));
    let x_data = rand_vec(&mut rng, 5 * 6);

    let max_rel = finite_diff_check(
        &g,
        &registry,
        || {
            let x = g.constant(5, 6, x_data.clone());
            let h = x.matmul(&w1)?.add_row(&b1)?.gelu()?;
            let logits = h.matmul(&w2)?.add_row(&b2)?;
            logits.cross_entropy(&[0, 1, 2, 3, 0], &[0.2; 5])
        },
        1e-5,
        64,
        11,
    )
    .unwrap();
    assert!(max_rel < 1e-7, "max relative error {max_rel}");
}

#[test]
fn lr_schedule_endpoints() {
    let sched = LrSchedule {
        base: 0.3,
        warmup_steps: 100,
        decay_step: 900,
        decay_factor: 0.1,
    };
    assert_eq!(lr_at(0, &sched), 0.0);
    assert_eq!(lr_at(100, &sched), 0.3);
    assert_eq!(lr_at(500, &sched), 0.3);
    assert!((lr_at(900, &sched) - 0.03).abs() < 1e-15);
}

#[test]
fn zero_gradients_leave_only_weight_decay() {
    let g = Graph::new(0);
    let mut registry = ParamRegistry::new();
    let p = registry.register("p", g.param(1, 2, vec![2.0, -4.0]));
    let mut state = OptimState::new(
        &registry,
        AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        },
    );
    adamw_step(&registry, &mut state, 0.1).unwrap();
    let v = p.value();
    assert!((v[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    assert!((v[1] - (-4.0 - 0.1 * 0.01 * -4.0)).abs() < 1e-15);
}

#[test]
fn gradient_clipping_rescales_before_moments() {
    let g = Graph::new(0);
    let mut registry = ParamRegistry::new();
    // gradient of sum is ones; scale by 50 via a fixed factor
    let p = registry.register("p", g.param(1, 1, vec![0.0]));
    let mark = g.mark();
    let loss = p.scale(50.0).unwrap().sum_all().unwrap();
    g.backward(&loss).unwrap();
    assert_eq!(p.grad().unwrap(), vec![50.0]);
    let mut state = OptimState::new(
        &registry,
        AdamWConfig {
            weight_decay: 0.0,
            clip_norm: 5.0,
            ..Default::default()
        },
    );
    adamw_step(&registry, &mut state, 1.0).unwrap();
    // clipped gradient is 5.0: first moments m=0.5, v=0.025; the update
    // is m_hat / (sqrt(v_hat) + eps) = 5/(5+eps) in the first step
    let expect = -(0.5 / 0.1) / ((0.025f64 / 0.001).sqrt() + 1e-8);
    assert!((p.value()[0] - expect).abs() < 1e-12, "{}", p.value()[0]);
    g.rewind(mark);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let g = Graph::new(0);
    let mut registry = ParamRegistry::new();
    let x = registry.register("unlucky", g.param(1, 1, vec![0.0]));
    let zero = g.constant(1, 1, vec![0.0]);
    let loss = x.div(&zero).unwrap().sum_all().unwrap();
    g.backward(&loss).unwrap();
    let mut state = OptimState::new(&registry, AdamWConfig::default());
    match adamw_step(&registry, &mut state, 0.1) {
        Err(NumericsError::NonFiniteGrad(name)) => assert_eq!(name, "unlucky"),
        other => panic!("expected non-finite gradient error, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trips_params_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let g = Graph::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut registry = ParamRegistry::new();
    registry.register("a", g.param(2, 3, rand_vec(&mut rng, 6)));
    registry.register("b", g.param(1, 4, rand_vec(&mut rng, 4)));
    let config = serde_json::json!({"hidden": 64, "preset": "desk"});
    save_checkpoint(&path, &config, &registry).unwrap();

    let data = load_checkpoint(&path).unwrap();
    assert_eq!(data.model_config, config);
    assert_eq!(data.params.len(), 2);
    assert_eq!(data.get("a").unwrap().3, registry.get("a").unwrap().value());

    // restoring into fresh tensors reproduces the values
    let g2 = Graph::new(1);
    let mut reg2 = ParamRegistry::new();
    reg2.register("a", g2.param(2, 3, vec![0.0; 6]));
    reg2.register("b", g2.param(1, 4, vec![0.0; 4]));
    restore_registry(&data, &reg2).unwrap();
    assert_eq!(
        reg2.get("a").unwrap().value(),
        registry.get("a").unwrap().value()
    );

    // identical contents produce identical bytes (no timestamps)
    let path2 = dir.path().join("model2.ckpt");
    save_checkpoint(&path2, &config, &registry).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_rejects_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(NumericsError::CheckpointCorrupt(_))
    ));
}

#[test]
fn rewind_drops_intermediate_nodes() {
    let g = Graph::new(0);
    let x = g.param(1, 2, vec![1.0, 2.0]);
    let mark = g.mark();
    let _ = x.scale(2.0).unwrap();
    assert_eq!(g.mark(), mark + 1);
    g.rewind(mark);
    assert_eq!(g.mark(), mark);
    // parameters survive
    assert_eq!(x.value(), vec![1.0, 2.0]);
}

#[test]
fn identical_seeds_give_identical_dropout_masks() {
    let run = |seed: u64| {
        let g = Graph::new(seed);
        let x = g.constant(1, 64, vec![1.0; 64]);
        x.dropout(0.3).unwrap().value()
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}
