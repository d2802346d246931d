use dfp::arith::OverflowPolicy;
use dfp::harness::DatasetHandle;
use dfp::tensor::{quantize_with_id, FloatTensor, QuantConfig};
use dfp::train::layers::{BatchNorm, Conv, Linear};
use dfp::train::{
    evaluate, load_checkpoint, save_checkpoint, train_loop, Activation, Layer, LayerPrecision, Model, PassContext,
    RunOptions, RunPrecision, Sequential, Targets, TrainConfig,
};
use dfp::DfpError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f32]) -> FloatTensor {
    FloatTensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn ctx() -> PassContext {
    PassContext::new(true, 0, OverflowPolicy::empirical(200).unwrap().with_shadow_check(true))
}

fn dfp16() -> LayerPrecision {
    LayerPrecision::Dfp(QuantConfig::dfp16())
}

fn float(a: Activation) -> FloatTensor {
    a.into_float().unwrap()
}

#[test]
fn scalar_linear_gradients_in_both_precisions() {
    for p in [LayerPrecision::Fp32, dfp16()] {
        let lin = Linear::from_weights("fc".into(), t(&[1, 1], &[2.0]), t(&[1], &[0.0]), p, 1).unwrap();
        let mut net = Sequential::new(vec![Layer::Linear(lin)]);
        let mut c = ctx();
        let y = float(net.forward(Activation::Float(t(&[1, 1], &[3.0])), &mut c).unwrap());
        assert_eq!(y.data(), &[6.0]);
        let dx = net.backward(t(&[1, 1], &[1.0]), true, &mut c).unwrap().unwrap();
        assert_eq!(dx.data(), &[2.0]);
        let w = &net.params()[0];
        assert_eq!(w.grad.data(), &[3.0]);
        assert_eq!(net.params()[1].grad.data(), &[1.0]);
    }
}

#[test]
fn zero_upstream_error_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = Conv::new("c".into(), 3, 4, 3, 1, 1, dfp16(), 1, &mut rng).unwrap();
    let mut net = Sequential::new(vec![Layer::Conv(conv)]);
    let mut c = ctx();
    let x: Vec<f32> = (0..2 * 3 * 5 * 5).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
    net.forward(Activation::Float(t(&[2, 3, 5, 5], &x)), &mut c).unwrap();
    let dx = net.backward(FloatTensor::zeros(vec![2, 4, 5, 5]), true, &mut c).unwrap().unwrap();
    assert!(dx.data().iter().all(|&v| v == 0.0));
    for p in net.params() {
        assert!(p.grad.data().iter().all(|&v| v == 0.0), "{}", p.name);
    }
}

#[test]
fn impulse_conv_reproduces_the_stencil() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut conv = Conv::new("c".into(), 1, 1, 3, 1, 1, dfp16(), 1, &mut rng).unwrap();
    let stencil = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    conv.weight.value = t(&[1, 1, 3, 3], &stencil);
    conv.weight.requantize().unwrap();
    let mut net = Sequential::new(vec![Layer::Conv(conv)]);
    let mut x = vec![0.0; 25];
    x[12] = 1.0;
    let y = float(net.forward(Activation::Float(t(&[1, 1, 5, 5], &x)), &mut ctx()).unwrap());
    let mut expected = vec![0.0; 25];
    for r in 0..3 {
        for s in 0..3 {
            expected[(3 - r) * 5 + (3 - s)] = stencil[r * 3 + s];
        }
    }
    assert_eq!(y.data(), &expected[..]);
}

fn naive_conv(x: &FloatTensor, w: &FloatTensor, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (k, kk) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (h + 2 * pad - kk + 1, wd + 2 * pad - kk + 1);
    let mut out = vec![0f64; n * k * oh * ow];
    for b in 0..n {
        for ko in 0..k {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut s = 0f64;
                    for ci in 0..c {
                        for r in 0..kk {
                            for q in 0..kk {
                                let (iy, ix) = ((y + r) as isize - pad as isize, (xo + q) as isize - pad as isize);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize] as f64
                                        * w.data()[((ko * c + ci) * kk + r) * kk + q] as f64;
                                }
                            }
                        }
                    }
                    out[((b * k + ko) * oh + y) * ow + xo] = s;
                }
            }
        }
    }
    out
}

#[test]
fn fp32_conv_is_plain_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let conv = Conv::new("c".into(), 3, 5, 3, 1, 1, LayerPrecision::Fp32, 1, &mut rng).unwrap();
    let w = conv.weight.value.clone();
    assert!(conv.weight.quantized().is_none());
    let mut net = Sequential::new(vec![Layer::Conv(conv)]);
    assert!(net.activation_quantizers().is_empty());
    // 1/3 multiples are not on any DFP grid, so a quantizer would show.
    let x: Vec<f32> = (0..2 * 3 * 6 * 6).map(|i| (i % 7) as f32 / 3.0 - 1.0).collect();
    let x = t(&[2, 3, 6, 6], &x);
    let y = float(net.forward(Activation::Float(x.clone()), &mut ctx()).unwrap());
    for (a, b) in y.data().iter().zip(naive_conv(&x, &w, 1)) {
        assert!((*a as f64 - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn relu_zeros_negative_preactivations_before_next_quantizer() {
    let w1 = t(&[2, 1], &[1.0, -1.0]);
    let l1 = Linear::from_weights("a".into(), w1, t(&[2], &[0.0, 0.0]), dfp16(), 1).unwrap();
    let l2 = Linear::from_weights("b".into(), t(&[1, 2], &[1.0, 1.0]), t(&[1], &[0.0]), dfp16(), 2).unwrap();
    let mut net = Sequential::new(vec![
        Layer::Linear(l1),
        Layer::Relu {
            name: "r".into(),
            mask: None,
        },
        Layer::Linear(l2),
    ]);
    assert_eq!(net.activation_quantizers(), vec![0, 2]);
    // Row 0: pre-activations (0.75, -0.75) -> (0.75, 0) -> 0.75.
    let y = float(net.forward(Activation::Float(t(&[2, 1], &[0.75, -0.5])), &mut ctx()).unwrap());
    assert_eq!(y.data(), &[0.75, 0.5]);
}

#[test]
fn precision_mismatch_and_missing_cache_are_errors() {
    let mut lin = Linear::from_weights("fc".into(), t(&[1, 1], &[2.0]), t(&[1], &[0.0]), dfp16(), 1).unwrap();
    let err = lin.forward(Activation::Float(t(&[1, 1], &[3.0])), &mut ctx()).unwrap_err();
    assert!(matches!(err, DfpError::PrecisionMismatch { .. }), "{err}");
    let mut narrow = Linear::from_weights("fc".into(), t(&[1, 1], &[2.0]), t(&[1], &[0.0]), LayerPrecision::Dfp(QuantConfig::dfp15()), 1).unwrap();
    let q = quantize_with_id(&t(&[1, 1], &[3.0]), &QuantConfig::dfp16(), 0).unwrap();
    assert!(matches!(narrow.forward(Activation::Dfp(q), &mut ctx()), Err(DfpError::PrecisionMismatch { .. })));
    let err = lin.backward(t(&[1, 1], &[1.0]), true, &mut ctx()).unwrap_err();
    assert!(matches!(err, DfpError::MissingCache(ref n) if n == "fc"), "{err}");
}

#[test]
fn sgd_examples() {
    let mk = |w: f32| {
        Linear::from_weights("fc".into(), t(&[1, 1], &[w]), t(&[1], &[0.0]), dfp16(), 1)
            .unwrap()
            .weight
    };
    let mut p = mk(1.0);
    p.grad = t(&[1, 1], &[0.5]);
    p.sgd_step(0.1, 0.0, 0.0).unwrap();
    assert_eq!(p.value.data(), &[0.95]);
    let expect = quantize_with_id(&p.value, &QuantConfig::dfp16(), 0).unwrap();
    assert_eq!(p.quantized().unwrap().data(), expect.data());
    assert_eq!(p.quantized().unwrap().exponent(), expect.exponent());

    let mut p = mk(1.0);
    for v in [0.25f32, 0.475] {
        p.grad = t(&[1, 1], &[0.25]);
        p.sgd_step(0.1, 0.9, 0.0).unwrap();
        assert!((p.velocity.data()[0] - v).abs() < 1e-7, "{:?}", p.velocity.data());
    }

    let mut p = mk(0.3);
    let (w0, q0) = (p.value.clone(), p.quantized().unwrap().clone());
    p.grad = FloatTensor::zeros(vec![1, 1]);
    p.sgd_step(0.1, 0.9, 0.0).unwrap();
    assert_eq!(p.value, w0);
    assert_eq!(p.quantized().unwrap(), &q0);

    p.grad = t(&[1, 1], &[0.0]);
    p.grad.data_mut()[0] = f32::NAN;
    let err = p.sgd_step(0.1, 0.0, 0.0).unwrap_err();
    assert!(err.to_string().contains("fc.weight"), "{err}");
}

#[test]
fn batchnorm_examples() {
    let mut bn = BatchNorm::new("bn".into(), 1, 1e-5, 0.1, 1).unwrap();
    bn.beta.value = t(&[1], &[0.25]);
    let y = float(bn.forward(Activation::Float(t(&[4, 1], &[3.0; 4])), &mut ctx()).unwrap());
    assert_eq!(y.data(), &[0.25; 4]);

    let mut bn = BatchNorm::new("bn".into(), 1, 1e-5, 0.1, 1).unwrap();
    let y = float(bn.forward(Activation::Float(t(&[2, 1], &[-1.0, 1.0])), &mut ctx()).unwrap());
    let e = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] as f64 + e).abs() < 1e-6 && (y.data()[1] as f64 - e).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f32> = (0..8 * 3 * 4 * 4)
        .map(|i| rand::Rng::random_range(&mut rng, -2.0f32..5.0) * (1 + i % 3) as f32)
        .collect();
    let mut bn = BatchNorm::new("bn".into(), 3, 1e-5, 0.1, 1).unwrap();
    let y = float(bn.forward(Activation::Float(t(&[8, 3, 4, 4], &x)), &mut ctx()).unwrap());
    for ch in 0..3 {
        let v: Vec<f64> = (0..8).flat_map(|b| (0..16).map(move |i| (b * 3 + ch) * 16 + i)).map(|j| y.data()[j] as f64).collect();
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mu.abs() < 1e-5 && (var - 1.0).abs() < 1e-3, "channel {ch}: {mu} {var}");
    }

    let mut bn = BatchNorm::new("bn".into(), 1, 1e-5, 0.1, 1).unwrap();
    assert!(bn.forward(Activation::Float(t(&[1, 1], &[1.0])), &mut ctx()).is_err());
}

fn mlp(precision: &str, extra: &str) -> TrainConfig {
    TrainConfig::from_json(&format!(
        r#"{{
            "input": [2],
            "layers": [
                {{"type": "linear", "out_features": 16, "precision": "{precision}"}},
                {{"type": "relu"}},
                {{"type": "linear", "out_features": 2, "precision": "{precision}"}}
            ],
            "lr": {{"base_lr": 0.05}},
            "momentum": 0.9,
            "batch_size": 16,
            {extra}
            "seed": 42
        }}"#
    ))
    .unwrap()
}

#[test]
fn gauss2_mlp_reaches_99_percent_in_both_modes() {
    let data = DatasetHandle::open("gauss2:n=1000", 42).unwrap().data;
    let cfg = mlp("dfp", r#""epochs": 10, "max_iterations": 500,"#);
    for p in [RunPrecision::Fp32, RunPrecision::Dfp16] {
        let opts = RunOptions {
            eval_train: true,
            ..Default::default()
        };
        let out = train_loop(&cfg, &data, p, &opts).unwrap();
        assert_eq!(out.metrics.len(), 500);
        let acc = out.final_train.unwrap().accuracy.unwrap();
        assert!(acc >= 0.99, "{p}: train accuracy {acc}");
        assert_eq!(out.metrics.last().unwrap().overflow_count, 0);
    }
}

#[test]
fn linreg_dfp_matches_fp32_parameters() {
    let data = DatasetHandle::open("linreg:n=256,val=0.25", 1).unwrap().data;
    let cfg = TrainConfig::from_json(
        r#"{
            "input": [1],
            "layers": [{"type": "linear", "out_features": 1, "precision": "dfp"}],
            "loss": "mse",
            "lr": {"base_lr": 0.1},
            "momentum": 0.5,
            "batch_size": 8,
            "epochs": 30,
            "seed": 7
        }"#,
    )
    .unwrap();
    let run = |p| {
        let out = train_loop(&cfg, &data, p, &RunOptions::default()).unwrap();
        let w = out.model.param("linear1.weight").unwrap().value.data()[0];
        let b = out.model.param("linear1.bias").unwrap().value.data()[0];
        (w, b)
    };
    let (wf, bf) = run(RunPrecision::Fp32);
    let (wd, bd) = run(RunPrecision::Dfp16);
    assert!((wf - 3.0).abs() < 1e-3 && (bf - 1.0).abs() < 1e-3, "fp32 learned {wf} {bf}");
    assert!((wd - wf).abs() < 1e-2 && (bd - bf).abs() < 1e-2, "dfp16 {wd} {bd} vs fp32 {wf} {bf}");
}

fn small_cnn(extra: &str) -> TrainConfig {
    TrainConfig::from_json(&format!(
        r#"{{
            "input": [1, 8, 8],
            "layers": [
                {{"type": "conv", "out_channels": 4, "kernel": 3, "padding": 1, "precision": "fp32"}},
                {{"type": "batch_norm"}},
                {{"type": "relu"}},
                {{"type": "conv", "out_channels": 8, "kernel": 3, "stride": 2, "padding": 1}},
                {{"type": "relu"}},
                {{"type": "residual", "body": [
                    {{"type": "conv", "out_channels": 8, "kernel": 3, "padding": 1}},
                    {{"type": "relu"}}
                ]}},
                {{"type": "max_pool", "size": 2}},
                {{"type": "flatten"}},
                {{"type": "linear", "out_features": 2}}
            ],
            "lr": {{"base_lr": 0.05}},
            "momentum": 0.9,
            "batch_size": 8,
            {extra}
            "seed": 3
        }}"#
    ))
    .unwrap()
}

fn image_data(n: usize) -> dfp::train::Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 2;
        for r in 0..8 {
            for s in 0..8 {
                let bar = if c == 0 { r == 3 } else { s == 3 };
                x.push(bar as u8 as f32 + rand::Rng::random_range(&mut rng, -0.3f32..0.3));
            }
        }
        y.push(c);
    }
    let x = FloatTensor::new(vec![n, 1, 8, 8], x).unwrap();
    let train: Vec<usize> = (0..n * 3 / 4).collect();
    let val: Vec<usize> = (n * 3 / 4..n).collect();
    let y = Targets::Classes(y);
    dfp::train::Dataset {
        train_x: dfp::train::gather_rows(&x, &train),
        train_y: y.gather(&train),
        val_x: dfp::train::gather_rows(&x, &val),
        val_y: y.gather(&val),
    }
}

#[test]
fn zero_learning_rate_keeps_weights_bit_identical() {
    let data = image_data(64);
    let mut cfg = small_cnn(r#""epochs": 2,"#);
    cfg.lr.base_lr = 0.0;
    for p in [RunPrecision::Fp32, RunPrecision::Dfp16] {
        let init = Model::build(&cfg, p).unwrap();
        let out = train_loop(&cfg, &data, p, &RunOptions::default()).unwrap();
        assert_eq!(out.metrics.len(), 12);
        for (a, b) in init.params().iter().zip(out.model.params()) {
            assert_eq!(a.value, b.value, "{}", a.name);
            assert_eq!(a.quantized(), b.quantized(), "{}", a.name);
        }
    }
}

#[test]
fn cnn_learns_bars_in_dfp16() {
    let data = image_data(128);
    let cfg = small_cnn(r#""epochs": 4,"#);
    let out = train_loop(&cfg, &data, RunPrecision::Dfp16, &RunOptions::default()).unwrap();
    assert!(out.final_val.unwrap().accuracy.unwrap() >= 0.95);
    let first = out.metrics[0].train_loss;
    let last = out.metrics.last().unwrap().train_loss;
    assert!(last < first / 2.0, "{first} -> {last}");
}

#[test]
fn quantizers_sit_before_dfp_compute_layers() {
    let m = Model::build(&small_cnn(r#""epochs": 1,"#), RunPrecision::Dfp16).unwrap();
    // bn and the first conv are FP32; conv4 is DFP.
    assert_eq!(m.net.activation_quantizers(), vec![3]);
    let Layer::Residual { body, .. } = &m.net.layers()[5] else { panic!() };
    assert_eq!(body.activation_quantizers(), vec![0]);
    assert!(m.param("conv1.weight").unwrap().quantized().is_none());
    assert!(m.param("conv4.weight").unwrap().quantized().is_some());
    assert!(m.param("res6.conv1.weight").unwrap().quantized().is_some());
    assert!(m.param("linear9.weight").unwrap().quantized().is_none());
    for p in m.params() {
        assert!(p.name.ends_with("weight") || p.quantized().is_none(), "{}", p.name);
    }
    let fp = Model::build(&small_cnn(r#""epochs": 1,"#), RunPrecision::Fp32).unwrap();
    assert!(fp.net.activation_quantizers().is_empty());
    assert!(fp.params().iter().all(|p| p.quantized().is_none()));
}

#[test]
fn all_fp32_layers_reproduce_the_fp32_trainer() {
    let data = image_data(64);
    let mut cfg = small_cnn(r#""epochs": 2,"#);
    for l in &mut cfg.layers {
        if let dfp::train::LayerConfig::Conv { precision, .. } = l {
            *precision = Some(dfp::train::PrecisionChoice::Fp32);
        }
        if let dfp::train::LayerConfig::Residual { body } = l {
            for b in body {
                if let dfp::train::LayerConfig::Conv { precision, .. } = b {
                    *precision = Some(dfp::train::PrecisionChoice::Fp32);
                }
            }
        }
    }
    let a = train_loop(&cfg, &data, RunPrecision::Dfp16, &RunOptions::default()).unwrap();
    let b = train_loop(&cfg, &data, RunPrecision::Fp32, &RunOptions::default()).unwrap();
    let strip = |m: &[dfp::train::MetricRow]| m.iter().map(|r| (r.iteration, r.train_loss.to_bits(), r.val_loss.map(f64::to_bits))).collect::<Vec<_>>();
    assert_eq!(strip(&a.metrics), strip(&b.metrics));
    assert_eq!(a.model.state(), b.model.state());
}

#[test]
fn checkpoint_round_trip_and_zero_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let data = image_data(32);
    let cfg = small_cnn(r#""epochs": 0,"#);
    let out = train_loop(&cfg, &data, RunPrecision::Dfp16, &RunOptions::default()).unwrap();
    assert!(out.metrics.is_empty());
    let init = Model::build(&cfg, RunPrecision::Dfp16).unwrap();
    assert_eq!(out.model.state(), init.state());
    save_checkpoint(&out.model, 0, dir.path()).unwrap();
    let mut loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.state(), init.state());

    let cfg = small_cnn(r#""epochs": 1,"#);
    let mut trained = train_loop(&cfg, &data, RunPrecision::Dfp16, &RunOptions::default()).unwrap().model;
    save_checkpoint(&trained, 3, dir.path().join("t")).unwrap();
    loaded = load_checkpoint(dir.path().join("t")).unwrap();
    assert_eq!(loaded.state(), trained.state());
    let a = evaluate(&mut loaded, &data.val_x, &data.val_y, 8).unwrap();
    let b = evaluate(&mut trained, &data.val_x, &data.val_y, 8).unwrap();
    assert_eq!(a, b);
}

#[test]
fn divergence_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = DatasetHandle::open("linreg:n=64,a=1000,b=0", 0).unwrap().data;
    let cfg = TrainConfig::from_json(
        r#"{
            "input": [1],
            "layers": [
                {"type": "linear", "out_features": 4, "precision": "dfp"},
                {"type": "linear", "out_features": 1}
            ],
            "loss": "mse",
            "lr": {"base_lr": 1e6},
            "batch_size": 8,
            "epochs": 50
        }"#,
    )
    .unwrap();
    let opts = RunOptions {
        dump_dir: Some(dir.path().to_path_buf()),
        eval_train: false,
    };
    let err = train_loop(&cfg, &data, RunPrecision::Dfp16, &opts).unwrap_err();
    let DfpError::Divergence { report, .. } = &err else {
        panic!("expected divergence, got {err}");
    };
    assert!(report.contains("dumped"), "{report}");
    assert!(dir.path().join("input.dft").exists());
}

#[test]
fn config_json_round_trips() {
    let cfg = small_cnn(r#""epochs": 3, "max_iterations": 10,"#);
    assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert!(TrainConfig::from_json(r#"{"input": [1], "layers": [], "lr": {"base_lr": 1}, "batch_size": 1, "epochs": 1}"#).is_err());
    assert!(TrainConfig::from_json(r#"{"input": [1], "layers": [{"type": "relu", "x": 1}], "lr": {"base_lr": 1}, "batch_size": 1, "epochs": 1}"#).is_err());
}
