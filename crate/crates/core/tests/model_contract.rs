use cpnet::model::{summation_block, CpnetModel, ModelConfig, Shortcut};
use cpnet::nn::{BatchNorm2d, Conv2d, ForwardCtx, Mode, Module};
use cpnet::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn identity_bn(channels: usize) -> BatchNorm2d<f64> {
    let mut bn = BatchNorm2d::new("bn", channels);
    bn.eps = 0.0;
    bn
}

#[test]
fn output_shapes_and_range() {
    for width in [2, 8] {
        let model = CpnetModel::<f32>::build(&ModelConfig::with_base_width(width)).unwrap();
        for size in [32, 64, 192] {
            let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
            let x = Tensor::from_fn(vec![1, 3, size, size], |_| rng.random::<f32>());
            let y = model.predict(&x).unwrap();
            assert_eq!(y.shape(), &[1, 1, size, size]);
            assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0), "width {width} size {size}");
        }
    }
}

#[test]
fn non_square_and_batched() {
    let model = CpnetModel::<f32>::build(&ModelConfig::with_base_width(2)).unwrap();
    let y = model.predict(&Tensor::full(vec![2, 3, 32, 96], 0.5)).unwrap();
    assert_eq!(y.shape(), &[2, 1, 32, 96]);
}

#[test]
fn indivisible_input_rejected() {
    let model = CpnetModel::<f32>::build(&ModelConfig::with_base_width(2)).unwrap();
    let err = model.predict(&Tensor::zeros(vec![1, 3, 100, 64])).unwrap_err();
    assert!(err.to_string().contains("spatial dims must be divisible by 32"), "{err}");
    assert!(matches!(model.predict(&Tensor::zeros(vec![1, 4, 32, 32])), Err(Error::Shape(_))));
    assert!(CpnetModel::<f32>::build(&ModelConfig::with_base_width(0)).is_err());
}

#[test]
fn eval_is_deterministic_and_finite() {
    let model = CpnetModel::<f32>::build(&ModelConfig::with_base_width(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(vec![2, 3, 64, 64], |_| rng.random::<f32>() * 10.0 - 5.0);
    let a = model.predict(&x).unwrap();
    assert!(a.all_finite());
    let b = model.predict(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn train_mode_is_reproducible() {
    let run = || {
        let mut model = CpnetModel::<f32>::build(&ModelConfig {
            seed: 9,
            ..ModelConfig::with_base_width(2)
        })
        .unwrap();
        model.set_mode(Mode::Train);
        let x = Tensor::from_fn(vec![2, 3, 32, 32], |i| (i % 13) as f32 / 13.0);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = model.run(&mut tape, xv).unwrap();
            outs.push(tape.value(y).unwrap().clone());
        }
        outs
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    // dropout masks advance with the step counter
    assert_ne!(a[0], a[1]);
}

#[test]
fn summation_block_examples() {
    let mut tape = Tape::<f64>::new();
    let mut ctx = ForwardCtx::new(Mode::Eval, 0);
    let x = tape.constant(Tensor::ones(vec![1, 2, 2, 2]));
    let h = tape.constant(Tensor::zeros(vec![1, 4, 2, 2]));
    let y = summation_block(&mut tape, x, h, Shortcut::Duplicate, &identity_bn(4), &mut ctx).unwrap();
    assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 1.0));

    // parameters are registered by name, so each width gets its own tape
    let mut tape = Tape::<f64>::new();
    let xr = random(&[1, 3, 2, 2], 1);
    let neg: Vec<f64> = xr.data().iter().chain(xr.data()).map(|v| -v).collect();
    let x = tape.constant(xr);
    let h = tape.constant(Tensor::new(vec![1, 6, 2, 2], neg).unwrap());
    let y = summation_block(&mut tape, x, h, Shortcut::Duplicate, &identity_bn(6), &mut ctx).unwrap();
    assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.0));

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![1, 3, 2, 2]));
    let h = tape.constant(Tensor::zeros(vec![1, 4, 2, 2]));
    let err = summation_block(&mut tape, x, h, Shortcut::Duplicate, &identity_bn(4), &mut ctx).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn shortcut_carries_gradient_with_zero_convs() {
    let mut model = CpnetModel::<f64>::build(&ModelConfig::with_base_width(2)).unwrap();
    let block = &mut model.contract[1];
    for conv in [&mut block.unit1.conv, &mut block.unit2.conv] {
        conv.weight.value = Tensor::zeros(conv.weight.value.shape().to_vec());
    }
    let block = &model.contract[1];
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[1, 2, 8, 8], 3), true);
    let mut ctx = ForwardCtx::new(Mode::Eval, 0);
    let (out, _) = block.forward(&mut tape, x, &mut ctx).unwrap();
    let w = tape.constant(random(&[1, 4, 8, 8], 4));
    let weighted = tape.mul(out, w).unwrap();
    let loss = tape.sum(weighted).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    assert!(g.data().iter().any(|&v| v != 0.0));

    // the same block without its summation shortcut passes no gradient
    let mut baseline = CpnetModel::<f64>::build(&ModelConfig::with_base_width(2).baseline()).unwrap();
    let block = &mut baseline.contract[1];
    for conv in [&mut block.unit1.conv, &mut block.unit2.conv] {
        conv.weight.value = Tensor::zeros(conv.weight.value.shape().to_vec());
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[1, 2, 8, 8], 3), true);
    let (out, _) = baseline.contract[1].forward(&mut tape, x, &mut ctx).unwrap();
    let w = tape.constant(random(&[1, 4, 8, 8], 4));
    let weighted = tape.mul(out, w).unwrap();
    let loss = tape.sum(weighted).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn parameter_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = Conv2d::<f32>::new("c", 3, 64, 3, 1, 1, &mut rng);
    let n: usize = conv.parameters().iter().map(|(_, p)| p.value.numel()).sum();
    assert_eq!(n, 1792);

    let count = |w| CpnetModel::<f32>::build(&ModelConfig::with_base_width(w)).unwrap().count_parameters();
    let ratio = count(16) as f64 / count(8) as f64;
    assert!((3.8..4.1).contains(&ratio), "ratio {ratio}");

    for w in [8, 32] {
        let cfg = ModelConfig::with_base_width(w);
        let full = count(w) as f64;
        let base = CpnetModel::<f32>::build(&cfg.baseline()).unwrap().count_parameters() as f64;
        assert!(full > base && full / base - 1.0 <= 0.10);
    }
}

#[test]
fn unique_hierarchical_names() {
    let model = CpnetModel::<f32>::build(&ModelConfig::with_base_width(2)).unwrap();
    let mut names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    names.extend(model.buffers().into_iter().map(|(n, _)| n));
    let total = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), total);
    for expected in [
        "contr_B1.unit1.conv.weight",
        "contr_B1.proj.weight",
        "contr_B3.sum_bn.gamma",
        "contr_B6.unit2.bn.running_var",
        "bridge.conv.weight",
        "exp_B5.up.weight",
        "head.conv.bias",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
}

#[test]
fn spatial_halving_and_width_doubling() {
    let model = CpnetModel::<f32>::build(&ModelConfig::with_base_width(8)).unwrap();
    let mut tape = Tape::<f32>::inference();
    let mut ctx = ForwardCtx::eval();
    let mut cur = tape.constant(Tensor::full(vec![1, 3, 192, 192], 0.5));
    let mut sizes = Vec::new();
    for block in &model.contract {
        let (skip, next) = block.forward(&mut tape, cur, &mut ctx).unwrap();
        let s = tape.value(skip).unwrap().shape().to_vec();
        sizes.push((s[1], s[2]));
        cur = next;
    }
    assert_eq!(sizes, vec![(8, 192), (16, 96), (32, 48), (64, 24), (128, 12), (256, 6)]);
}
