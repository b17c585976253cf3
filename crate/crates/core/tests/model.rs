use casa_core::gradcheck::{model_gradcheck, DEFAULT_EPS};
use casa_core::model::{
    project, prop2_time_independence_check, rows_independent, score_map, Attention, ScoreAttention,
    ScoreNetwork, SelfAttention,
};
use casa_core::nn::{LinearParams, ParamSet};
use casa_core::tape::Tape;
use casa_core::tensor::{gelu_scalar, Tensor};
use casa_core::{AttentionKind, CasaModel, Error, ModelConfig, SoftmaxAxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn tiny() -> ModelConfig {
    let mut cfg = ModelConfig::new(3, 8, 4).with_d_model(8);
    cfg.n_blocks = 1;
    cfg.kernel_size = 3;
    cfg
}

fn score_attention(cfg: &ModelConfig, seed: u64) -> (ParamSet, ScoreAttention) {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn = ScoreAttention::new(&mut params, "attn", cfg, &mut rng).unwrap();
    (params, attn)
}

/// Attention output and gate for a constant `z`.
fn attend(params: &ParamSet, attn: &ScoreAttention, z: &Tensor) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let (out, gate) = attn.forward(&mut tape, &p, zv, None).unwrap();
    (tape.value(out).clone(), tape.value(gate).clone())
}

#[test]
fn affine_queries_and_keys_are_variate_independent_but_scores_are_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut score_changed = 0;
    for trial in 0..100 {
        let n = rng.random_range(2..=16);
        let d = rng.random_range(2..=12);
        let cfg = ModelConfig::new(n, 8, 8).with_d_model(d);
        let mut params = ParamSet::new();
        let dot = SelfAttention::new(&mut params, "dot", d, &mut rng);
        let score = ScoreNetwork::new(&mut params, "score", &cfg, &mut rng).unwrap();
        let z = random(&[n, d], &mut rng);
        let r = rng.random_range(0..n);
        let s = (r + rng.random_range(1..n)) % n;
        let mut zp = z.clone();
        for v in zp.row_mut(s) {
            *v += rng.random_range(-1.0..1.0);
        }
        for proj in [&dot.query, &dot.key] {
            let a = project(&params, proj, &z).unwrap();
            let b = project(&params, proj, &zp).unwrap();
            assert_eq!(
                a.row(r),
                b.row(r),
                "trial {trial}: affine row {r} moved when row {s} changed"
            );
        }
        let a = score_map(&params, &score, &z).unwrap();
        let b = score_map(&params, &score, &zp).unwrap();
        let diff = a
            .row(r)
            .iter()
            .zip(b.row(r))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if diff > 1e-8 {
            score_changed += 1;
        }
    }
    assert!(
        score_changed >= 99,
        "score row changed in {score_changed}/100 trials"
    );
}

#[test]
fn transposed_layout_affine_is_time_independent_score_is_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..100 {
        let steps = rng.random_range(2..=12);
        let d = rng.random_range(2..=10);
        let z = random(&[steps, d], &mut rng);
        let mut params = ParamSet::new();
        let proj = LinearParams::new(&mut params, "proj", d, d, &mut rng);
        assert!(prop2_time_independence_check(&params, &proj, &z, &mut rng).unwrap());

        let cfg = ModelConfig::new(steps, 8, 8).with_d_model(d);
        let score = ScoreNetwork::new(&mut params, "score", &cfg, &mut rng).unwrap();
        let independent =
            rows_independent(|zz| score_map(&params, &score, zz), &z, 1, &mut rng).unwrap();
        assert!(!independent);
    }
}

#[test]
fn identity_projection_is_time_independent() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let proj = LinearParams::new(&mut params, "proj", 4, 4, &mut rng);
    *params.get_mut(proj.weight) = Tensor::identity(4);
    let z = random(&[6, 4], &mut rng);
    assert_eq!(project(&params, &proj, &z).unwrap(), z);
    assert!(prop2_time_independence_check(&params, &proj, &z, &mut rng).unwrap());
}

#[test]
fn gate_is_a_distribution_per_variate() {
    let cfg = ModelConfig::new(5, 8, 8).with_d_model(12);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for seed in 0..20 {
        let (params, attn) = score_attention(&cfg, seed);
        let z = random(&[5, 12], &mut rng).map(|v| v * 4.0);
        let (out, gate) = attend(&params, &attn, &z);
        assert_eq!(gate.shape(), &[5, 12]);
        assert_eq!(out.shape(), &[5, 12]);
        for r in 0..5 {
            assert!((gate.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(gate.row(r).iter().all(|&g| g > 0.0 && g < 1.0));
        }
        let v = project(&params, &attn.value, &z).unwrap();
        for (o, vv) in out.data().iter().zip(v.data()) {
            assert!(o.abs() <= vv.abs());
        }
    }
}

#[test]
fn zero_score_weights_give_uniform_gate() {
    let cfg = ModelConfig::new(4, 8, 8).with_d_model(8);
    let (mut params, attn) = score_attention(&cfg, 1);
    for (enc, dec) in &attn.score.stages {
        for conv in [enc, dec] {
            params.get_mut(conv.weight).data_mut().fill(0.0);
            if let Some(b) = conv.bias {
                params.get_mut(b).data_mut().fill(0.0);
            }
        }
    }
    let z = random(&[4, 8], &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(
        score_map(&params, &attn.score, &z).unwrap(),
        Tensor::zeros([4, 8])
    );
    let (out, gate) = attend(&params, &attn, &z);
    assert!(gate.data().iter().all(|&g| (g - 0.125).abs() < 1e-15));
    let v = project(&params, &attn.value, &z).unwrap();
    assert!(out.max_abs_diff(&v.map(|x| x / 8.0)) < 1e-15);
}

#[test]
fn pointwise_unit_autoencoder_sums_columns() {
    let mut cfg = ModelConfig::new(3, 8, 8).with_d_model(5);
    cfg.kernel_size = 1;
    cfg.score_hidden = 1;
    let mut params = ParamSet::new();
    let net = ScoreNetwork::new(
        &mut params,
        "score",
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    let (enc, dec) = &net.stages[0];
    params.get_mut(enc.weight).data_mut().fill(1.0);
    params.get_mut(dec.weight).data_mut().fill(1.0);
    assert!(params
        .get(enc.bias.unwrap())
        .data()
        .iter()
        .all(|&b| b == 0.0));
    assert!(dec.bias.is_none());
    let z = random(&[3, 5], &mut ChaCha8Rng::seed_from_u64(4));
    let s = score_map(&params, &net, &z).unwrap();
    for d in 0..5 {
        let col: f64 = (0..3).map(|c| z.at(c, d)).sum();
        for r in 0..3 {
            assert!((s.at(r, d) - gelu_scalar(col)).abs() < 1e-15);
        }
    }
}

#[test]
fn single_token_dot_attention_returns_value() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let attn = SelfAttention::new(&mut params, "dot", 6, &mut rng);
    let z = random(&[1, 6], &mut rng);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let (out, map) = attn.forward(&mut tape, &p, zv).unwrap();
    assert_eq!(tape.value(map).data(), &[1.0]);
    let v = project(&params, &attn.value, &z).unwrap();
    assert!(tape.value(out).max_abs_diff(&v) < 1e-15);

    let z = random(&[7, 6], &mut rng);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let zv = tape.constant(z);
    let (_, map) = attn.forward(&mut tape, &p, zv).unwrap();
    for r in 0..7 {
        assert!((tape.value(map).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn embedding_is_row_independent() {
    let cfg = ModelConfig::new(4, 10, 6).with_d_model(8);
    let model = CasaModel::new(cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[4, 10], &mut rng);
    assert!(rows_independent(
        |xx| project(model.params(), model.embed(), xx),
        &x,
        3,
        &mut rng
    )
    .unwrap());
    let single = CasaModel::new(ModelConfig::new(1, 10, 6).with_d_model(8), 6).unwrap();
    let x1 = random(&[1, 10], &mut rng);
    let z = project(single.params(), single.embed(), &x1).unwrap();
    assert_eq!(z.shape(), &[1, 8]);
}

#[test]
fn blocks_preserve_shape() {
    for n in [1, 7, 21] {
        for d in [8, 64] {
            let mut cfg = ModelConfig::new(n, 16, 8).with_d_model(d);
            cfg.n_blocks = 3;
            let model = CasaModel::new(cfg, 7).unwrap();
            let z = random(&[n, d], &mut ChaCha8Rng::seed_from_u64(7));
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape);
            let mut v = tape.constant(z);
            for block in model.blocks() {
                v = block.forward(&mut tape, &p, v, None).unwrap();
                assert_eq!(tape.shape(v), &[n, d]);
            }
        }
    }
}

#[test]
fn ett_shape_contract_and_determinism() {
    let model = CasaModel::new(ModelConfig::new(7, 96, 96), 8).unwrap();
    let x = random(&[7, 96], &mut ChaCha8Rng::seed_from_u64(8));
    let a = model.predict(&x).unwrap();
    assert_eq!(a.shape(), &[7, 96]);
    assert_eq!(model.predict(&x).unwrap(), a);
    assert_eq!(
        model.predict(&Tensor::zeros([7, 95])),
        Err(Error::ConfigMismatch {
            expected: vec![7, 96],
            got: vec![7, 95]
        })
    );
}

#[test]
fn zero_predictor_forecasts_the_input_mean() {
    let mut model = CasaModel::new(ModelConfig::new(3, 12, 5).with_d_model(8), 9).unwrap();
    let pred = model.predictor().clone();
    model.params_mut().get_mut(pred.weight).data_mut().fill(0.0);
    model.params_mut().get_mut(pred.bias).data_mut().fill(0.0);
    let x = random(&[3, 12], &mut ChaCha8Rng::seed_from_u64(9)).map(|v| 3.0 * v + 2.0);
    let y = model.predict(&x).unwrap();
    for r in 0..3 {
        let mean = x.row(r).iter().sum::<f64>() / 12.0;
        assert!(y.row(r).iter().all(|&v| (v - mean).abs() < 1e-12));
    }
}

fn block_scalars(model: &CasaModel) -> usize {
    model
        .params()
        .iter()
        .filter(|(name, _)| name.starts_with("blocks."))
        .map(|(_, t)| t.numel())
        .sum()
}

#[test]
fn parameter_counts_follow_config() {
    let (n, d, k, m) = (5, 16, 3, 2);
    let f = 2 * d;
    let casa_block =
        (n * d * k + d) + (d * n * k) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
    let dot_block = 3 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
    for (l, h) in [(16, 8), (96, 96), (48, 720)] {
        let mut cfg = ModelConfig::new(n, l, h).with_d_model(d);
        cfg.n_blocks = m;
        cfg.kernel_size = k;
        let model = CasaModel::new(cfg.clone(), 0).unwrap();
        assert_eq!(block_scalars(&model), m * casa_block);
        assert_eq!(model.embed().num_scalars(), l * d + d);
        assert_eq!(model.predictor().num_scalars(), d * h + h);
        assert_eq!(
            model.num_params(),
            2 * n + l * d + d + m * casa_block + d * h + h
        );

        cfg.attention = AttentionKind::Baseline;
        let model = CasaModel::new(cfg, 0).unwrap();
        assert_eq!(block_scalars(&model), m * dot_block);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let variants = [
        (AttentionKind::Casa, SoftmaxAxis::Hidden),
        (AttentionKind::Casa, SoftmaxAxis::Variate),
        (AttentionKind::Baseline, SoftmaxAxis::Hidden),
    ];
    for (kind, axis) in variants {
        let mut cfg = tiny();
        cfg.attention = kind;
        cfg.softmax_axis = axis;
        let model = CasaModel::new(cfg, 12).unwrap();
        let x = random(&[3, 8], &mut rng);
        let y = random(&[3, 4], &mut rng);
        let report = model_gradcheck(&model, &x, &y, DEFAULT_EPS, |_, _| {}).unwrap();
        let worst = report.worst().unwrap();
        assert!(
            report.max_rel_err() < 1e-4,
            "{kind:?}/{axis:?}: {} at {}",
            worst.max_rel_err,
            worst.name
        );
    }
}

#[test]
fn gradcheck_catches_a_corrupted_gradient() {
    let model = CasaModel::new(tiny(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&[3, 8], &mut rng);
    let y = random(&[3, 4], &mut rng);
    let report = model_gradcheck(&model, &x, &y, DEFAULT_EPS, |name, g| {
        if name == "blocks.0.attn.score.0.enc.weight" {
            g.data_mut()[0] *= 1.5;
        }
    })
    .unwrap();
    assert!(report.max_rel_err() > 1e-2);
    assert_eq!(
        report.worst().unwrap().name,
        "blocks.0.attn.score.0.enc.weight"
    );
}

#[test]
fn every_parameter_receives_gradient() {
    let mut cfg = ModelConfig::new(4, 16, 8).with_d_model(16);
    cfg.n_blocks = 2;
    for kind in [AttentionKind::Casa, AttentionKind::Baseline] {
        cfg.attention = kind;
        let model = CasaModel::new(cfg.clone(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&[4, 16], &mut rng);
        let y = random(&[4, 8], &mut rng);
        let grads = model.loss_gradients(&x, &y).unwrap();
        for (idx, g) in grads.iter().enumerate() {
            let name = model.params().name_at(idx);
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "{kind:?}: zero gradient for {name}"
            );
        }
    }
}

#[test]
fn model_structure_matches_kind() {
    let model = CasaModel::new(tiny(), 0).unwrap();
    assert!(matches!(model.blocks()[0].attention, Attention::Score(_)));
    let mut cfg = tiny();
    cfg.attention = AttentionKind::Baseline;
    let model = CasaModel::new(cfg, 0).unwrap();
    assert!(matches!(model.blocks()[0].attention, Attention::Dot(_)));
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = tiny();
    cfg.kernel_size = 4;
    assert_eq!(CasaModel::new(cfg, 0).unwrap_err(), Error::InvalidKernel(4));
    let mut cfg = tiny();
    cfg.n_vars = 0;
    assert!(matches!(
        CasaModel::new(cfg, 0),
        Err(Error::InvalidConfig(_))
    ));
}
