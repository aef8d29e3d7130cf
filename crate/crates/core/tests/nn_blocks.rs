use msda_core::filters::Direction;
use msda_core::nn::{build_network, network_forward, Ablation, Act, Forward, NetConfig, ParamBuilder};
use msda_core::ops::ConvOptions;
use msda_core::params::ParamStore;
use msda_core::tape::{Tape, Var};
use msda_core::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: impl Into<Shape>, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.into(), |_, _, _, _| rng.random_range(-1.0..=1.0))
}

fn declared(cfg: &NetConfig, declare: impl FnOnce(&mut ParamBuilder<'_>)) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    declare(&mut ParamBuilder {
        store: &mut store,
        rng: &mut rng,
        cfg,
    });
    store
}

fn zero_conv(store: &mut ParamStore<f32>, path: &str) {
    for suffix in ["weight", "bias"] {
        let p = store.get_mut(&format!("{path}.{suffix}")).expect("conv path");
        p.value.data_mut().fill(0.0);
    }
}

/// Runs `f` on a fresh tape with `store` bound as constants.
fn run(
    cfg: &NetConfig,
    store: &ParamStore<f32>,
    inputs: &[Tensor<f32>],
    f: impl FnOnce(&mut Forward<'_, f32>, &[Var]) -> Var,
) -> Tensor<f32> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let mut fwd = Forward {
        tape: &mut tape,
        params: &bound,
        cfg,
    };
    let out = f(&mut fwd, &vars);
    tape.value(out).clone()
}

#[test]
fn mlrl_shape_and_concat_width() {
    let cfg = NetConfig::default();
    let store = declared(&cfg, |b| b.mlrl("m", 64, 64).unwrap());
    assert_eq!(store.get("m.fuse.weight").unwrap().value.shape(), Shape::new(64, 4 * 64, 1, 1));
    let y = run(&cfg, &store, &[random([1, 64, 32, 32], 1)], |f, v| f.mlrl("m", v[0]).unwrap());
    assert_eq!(y.shape(), Shape::new(1, 64, 32, 32));
}

#[test]
fn mlrl_zero_fusion_gives_zero() {
    let cfg = NetConfig::tiny();
    let mut store = declared(&cfg, |b| b.mlrl("m", 4, 4).unwrap());
    zero_conv(&mut store, "m.fuse");
    let y = run(&cfg, &store, &[random([2, 4, 16, 16], 2)], |f, v| f.mlrl("m", v[0]).unwrap());
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn mdfa_zero_input_and_shape() {
    let cfg = NetConfig::tiny();
    let store = declared(&cfg, |b| b.mdfa("a").unwrap());
    let y = run(&cfg, &store, &[Tensor::zeros([1, 4, 16, 16])], |f, v| f.mdfa("a", v[0]).unwrap());
    assert_eq!(y.shape(), Shape::new(1, 4, 16, 16));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn mdfa_is_sum_of_branches() {
    let cfg = NetConfig::tiny();
    let store = declared(&cfg, |b| b.mdfa("a").unwrap());
    let x = random([2, 4, 16, 16], 3);
    let whole = run(&cfg, &store, std::slice::from_ref(&x), |f, v| f.mdfa("a", v[0]).unwrap());
    let mut sum = Tensor::zeros(x.shape());
    for d in Direction::ALL {
        let b = run(&cfg, &store, std::slice::from_ref(&x), |f, v| f.mdfa_branch("a", v[0], d).unwrap());
        for (s, v) in sum.data_mut().iter_mut().zip(b.data()) {
            *s += v;
        }
    }
    assert!(whole.max_abs_diff(&sum).unwrap() <= 1e-5);
}

#[test]
fn mdfa_attention_in_unit_interval() {
    // With x = 1 everywhere each branch returns its attention map.
    let cfg = NetConfig::tiny();
    let store = declared(&cfg, |b| b.mdfa("a").unwrap());
    let x = Tensor::full([1, 4, 8, 8], 1.0);
    for d in Direction::ALL {
        let att = run(&cfg, &store, std::slice::from_ref(&x), |f, v| f.mdfa_branch("a", v[0], d).unwrap());
        assert!(att.data().iter().all(|&v| v > 0.0 && v < 1.0), "{d}");
    }
}

#[test]
fn mdfa_with_no_branches_is_identity() {
    let mut cfg = NetConfig::tiny();
    for d in ["mdfa.low", "mdfa.horizontal", "mdfa.vertical", "mdfa.diagonal"] {
        cfg.ablation.set(d, false).unwrap();
    }
    let store = declared(&cfg, |b| b.mdfa("a").unwrap());
    assert!(store.is_empty());
    let x = random([1, 4, 8, 8], 4);
    assert_eq!(run(&cfg, &store, std::slice::from_ref(&x), |f, v| f.mdfa("a", v[0]).unwrap()), x);
}

#[test]
fn se_hidden_width_and_half_scale() {
    let cfg = NetConfig::default();
    let mut store = declared(&cfg, |b| b.se("s", 64).unwrap());
    assert_eq!(store.get("s.fc1.weight").unwrap().value.shape(), Shape::new(4, 64, 1, 1));
    zero_conv(&mut store, "s.fc1");
    zero_conv(&mut store, "s.fc2");
    let x = random([2, 64, 4, 4], 5);
    let y = run(&cfg, &store, std::slice::from_ref(&x), |f, v| f.se("s", v[0]).unwrap());
    assert_eq!(y, x.map(|v| v * 0.5));
}

#[test]
fn msda_zero_fusion_is_identity() {
    let cfg = NetConfig::tiny();
    let mut store = declared(&cfg, |b| b.msda("b", 4).unwrap());
    zero_conv(&mut store, "b.mlrl.fuse");
    let x = random([2, 4, 16, 16], 6);
    assert_eq!(run(&cfg, &store, std::slice::from_ref(&x), |f, v| f.msda("b", v[0]).unwrap()), x);
}

#[test]
fn msda_count_is_sum_of_parts() {
    let cfg = NetConfig::tiny();
    let whole = declared(&cfg, |b| b.msda("b", 8).unwrap()).num_elements();
    let parts = declared(&cfg, |b| b.mlrl("m", 8, 8).unwrap()).num_elements()
        + declared(&cfg, |b| b.mdfa("a").unwrap()).num_elements()
        + declared(&cfg, |b| b.se("s", 8).unwrap()).num_elements();
    assert_eq!(whole, parts);
}

#[test]
fn downsample_shapes_and_purity() {
    let cfg = NetConfig::default();
    let store = declared(&cfg, |b| b.downsample("d", 16, 32).unwrap());
    let x = random([1, 16, 64, 64], 7);
    let a = run(&cfg, &store, std::slice::from_ref(&x), |f, v| f.downsample("d", v[0]).unwrap());
    let b = run(&cfg, &store, &[x], |f, v| f.downsample("d", v[0]).unwrap());
    assert_eq!(a.shape(), Shape::new(1, 32, 32, 32));
    assert_eq!(a, b);

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let odd = tape.constant(Tensor::zeros([1, 16, 63, 64]));
    let mut f = Forward {
        tape: &mut tape,
        params: &bound,
        cfg: &cfg,
    };
    assert!(f.downsample("d", odd).is_err());
}

#[test]
fn faf_shapes() {
    let cfg = NetConfig::default();
    let store = declared(&cfg, |b| b.faf("f", 32, 64).unwrap());
    let y = run(&cfg, &store, &[random([1, 32, 64, 64], 8), random([1, 64, 32, 32], 9)], |f, v| {
        f.faf("f", v[0], v[1]).unwrap()
    });
    assert_eq!(y.shape(), Shape::new(1, 32, 64, 64));
}

#[test]
fn faf_zero_offset_is_align_of_upsample() {
    let cfg = NetConfig::tiny();
    let mut store = declared(&cfg, |b| b.faf("f", 4, 8).unwrap());
    zero_conv(&mut store, "f.offset");
    let (low, high) = (random([1, 4, 16, 16], 10), random([1, 8, 8, 8], 11));
    let got = run(&cfg, &store, &[low.clone(), high.clone()], |f, v| f.faf("f", v[0], v[1]).unwrap());
    let want = run(&cfg, &store, &[low, high], |f, v| {
        let up = f.tape.upsample_bilinear2x(v[1]).unwrap();
        let aligned = f.conv("f.align", up, ConvOptions::valid(), Act::Linear).unwrap();
        f.tape.add(aligned, v[0]).unwrap()
    });
    assert_eq!(got, want);
}

#[test]
fn faf_zero_high_and_prefuse_passes_low_through() {
    // The pre-fusion also sees `f_low`, so `f_high = 0` alone is not enough.
    let cfg = NetConfig::tiny();
    let mut store = declared(&cfg, |b| b.faf("f", 4, 8).unwrap());
    for conv in ["f.prefuse", "f.offset", "f.align"] {
        let b = store.get_mut(&format!("{conv}.bias")).unwrap();
        b.value.data_mut().fill(0.0);
    }
    zero_conv(&mut store, "f.prefuse");
    let low = random([1, 4, 16, 16], 12);
    let got = run(&cfg, &store, &[low.clone(), Tensor::zeros([1, 8, 8, 8])], |f, v| {
        f.faf("f", v[0], v[1]).unwrap()
    });
    assert_eq!(got, low);
}

#[test]
fn faf_rejects_bad_ratio() {
    let cfg = NetConfig::tiny();
    let store = declared(&cfg, |b| b.faf("f", 4, 8).unwrap());
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let low = tape.constant(Tensor::zeros([1, 4, 16, 16]));
    let high = tape.constant(Tensor::zeros([1, 8, 4, 4]));
    let mut f = Forward {
        tape: &mut tape,
        params: &bound,
        cfg: &cfg,
    };
    assert!(f.faf("f", low, high).is_err());
}

#[test]
fn fa_zero_inputs_give_relu_of_beta() {
    let cfg = NetConfig::tiny();
    let mut store = declared(&cfg, |b| b.fa("fa", &cfg.stage_channels).unwrap());
    let beta = store.get_mut("fa.norm.beta").unwrap();
    beta.value = Tensor::new([1, 8, 1, 1], vec![0.5, -0.5, 1.0, 0.0, 2.0, -1.0, 0.25, 3.0]).unwrap();
    let inputs: Vec<Tensor<f32>> = [(4, 32), (4, 16), (8, 8), (8, 4), (8, 2)]
        .iter()
        .map(|&(c, s)| Tensor::zeros([1, c, s, s]))
        .collect();
    let y = run(&cfg, &store, &inputs, |f, v| f.fa("fa", &[v[0], v[1], v[2], v[3], v[4]]).unwrap());
    assert_eq!(y.shape(), Shape::new(1, 8, 2, 2));
    let betas = store.get("fa.norm.beta").unwrap().value.data().to_vec();
    for (c, beta) in betas.iter().enumerate() {
        assert!(y.plane(0, c).iter().all(|&v| v == beta.max(0.0)), "channel {c}");
    }
}

#[test]
fn fa_without_norm_is_linear_in_one_input() {
    let cfg = NetConfig {
        norm: false,
        ..NetConfig::tiny()
    };
    let store = declared(&cfg, |b| b.fa("fa", &cfg.stage_channels).unwrap());
    let eval = |x: &Tensor<f32>| {
        let mut inputs: Vec<Tensor<f32>> = [(4, 32), (4, 16), (8, 8), (8, 4), (8, 2)]
            .iter()
            .map(|&(c, s)| Tensor::zeros([1, c, s, s]))
            .collect();
        inputs[0] = x.clone();
        run(&cfg, &store, &inputs, |f, v| f.fa("fa", &[v[0], v[1], v[2], v[3], v[4]]).unwrap())
    };
    let (a, b) = (random([1, 4, 32, 32], 13), random([1, 4, 32, 32], 14));
    let combo = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * x - 3.0 * y).collect()).unwrap();
    let (fa, fb, fc) = (eval(&a), eval(&b), eval(&combo));
    let zero = eval(&Tensor::zeros(a.shape()));
    for i in 0..fc.numel() {
        let lin = 2.0 * (fa.data()[i] - zero.data()[i]) - 3.0 * (fb.data()[i] - zero.data()[i]) + zero.data()[i];
        assert!((fc.data()[i] - lin).abs() <= 1e-5);
    }
}

#[test]
fn network_shapes_and_purity() {
    let params = build_network(&NetConfig::tiny(), 0).unwrap();
    let x = random([1, 1, 256, 256], 15).map(|v| 0.5 + 0.5 * v);
    let mut tape = Tape::new();
    let bound = params.store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = network_forward(&mut tape, &bound, &params.config, xv).unwrap();
    let probs = tape.value(out.probs);
    assert_eq!(probs.shape(), Shape::new(1, 1, 256, 256));
    assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(tape.shape(out.encoder[4]), Shape::new(1, 8, 16, 16));
    assert_eq!(params.predict(&x).unwrap(), *probs);
}

#[test]
fn network_rejects_bad_sizes() {
    let params = build_network(&NetConfig::tiny(), 0).unwrap();
    for s in [[1, 1, 40, 32], [1, 1, 16, 16], [1, 2, 32, 32]] {
        assert!(params.predict(&Tensor::zeros(s)).is_err(), "{s:?}");
    }
}

#[test]
fn counts_are_seed_independent_and_hfdi_free() {
    let a = build_network(&NetConfig::default(), 1).unwrap();
    let b = build_network(&NetConfig::default(), 2).unwrap();
    assert_eq!(a.num_parameters(), b.num_parameters());
    assert_ne!(a.store, b.store);
    assert!(a.store.paths().all(|p| !p.contains("hfdi")));
}

#[test]
fn switching_off_never_adds_parameters() {
    let full = build_network(&NetConfig::tiny(), 0).unwrap().num_parameters();
    for name in Ablation::SWITCHES {
        let mut cfg = NetConfig::tiny();
        cfg.ablation.set(name, false).unwrap();
        assert!(build_network(&cfg, 0).unwrap().num_parameters() <= full, "{name}");
    }
}
