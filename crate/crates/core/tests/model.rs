use ddcl::augmentation::Image;
use ddcl::losses::{simsiam_loss_grad, BranchPair};
use ddcl::model::layers::{Parameterized, TensorKind};
use ddcl::model::*;
use ddcl::representation::Part;
use ddcl::Error;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
            Image::new(size, size, 3, data).unwrap()
        })
        .collect()
}

fn refs(v: &[Image]) -> Vec<&Image> {
    v.iter().collect()
}

fn small_config(mode: Mode, arch: EncoderArch) -> ModelConfig {
    let mut cfg = ModelConfig::new(mode);
    cfg.encoder.arch = arch;
    cfg.encoder.input_size = 8;
    cfg.encoder.base_width = 2;
    cfg.encoder.output_dim = 10;
    cfg.heads.projector_hidden = 6;
    cfg.heads.output_dim = 4;
    cfg.heads.predictor_hidden = 3;
    cfg
}

fn f64s(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(|v| v as f64)
}

#[test]
fn default_shapes() {
    let cfg = ModelConfig::new(Mode::Asymmetric);
    let net = Network::new(&cfg, 0).unwrap();
    let v = images(4, 32, 1);
    let out = net.forward_pair(&refs(&v), &refs(&v)).unwrap();
    for b in [&out.first, &out.second] {
        assert_eq!(b.y_i().dim(), (4, 51));
        assert_eq!(b.y_v().dim(), (4, 13));
        for z in [&b.z_i, &b.z_v, b.p_i.as_ref().unwrap(), b.p_v.as_ref().unwrap()] {
            assert_eq!(z.dim(), (4, 32));
        }
    }
    let sym = Network::new(&ModelConfig::new(Mode::Symmetric), 0).unwrap();
    let out = sym.forward_pair(&refs(&v), &refs(&v)).unwrap();
    assert!(out.first.p_i.is_none() && out.first.p_v.is_none());
}

#[test]
fn shared_parameters_and_swap_symmetry() {
    let net = Network::new(&ModelConfig::new(Mode::Asymmetric), 3).unwrap();
    let a = images(3, 32, 10);
    let b = images(3, 32, 11);
    let same = net.forward_pair(&refs(&a), &refs(&a)).unwrap();
    assert_eq!(same.first, same.second);
    let ab = net.forward_pair(&refs(&a), &refs(&b)).unwrap();
    let ba = net.forward_pair(&refs(&b), &refs(&a)).unwrap();
    assert_eq!(ab.first, ba.second);
    assert_eq!(ab.second, ba.first);
    assert_ne!(ab.first.y, ab.second.y);
}

#[test]
fn rejects_wrong_input_size() {
    let net = Network::new(&ModelConfig::new(Mode::Symmetric), 0).unwrap();
    let v = images(2, 16, 0);
    assert!(matches!(net.encode(&refs(&v)), Err(Error::InvalidInput(_))));
    let w = images(3, 32, 0);
    assert!(net.forward_pair(&refs(&w[..2]), &refs(&w)).is_err());
}

#[test]
fn zeroing_dvr_leaves_dir_projection_unchanged() {
    let mut net = Network::new(&ModelConfig::new(Mode::Asymmetric), 5).unwrap();
    let v = images(4, 32, 2);
    let before = net.forward_pair(&refs(&v), &refs(&v)).unwrap().first;
    let d_i = net.dir_dim();
    let cols = net.encoder.last.weight.shape[1];
    for r in d_i..net.dim() {
        for c in 0..cols {
            net.encoder.last.weight.value[r * cols + c] = 0.0;
        }
        net.encoder.last.bias.as_mut().unwrap().value[r] = 0.0;
    }
    let after = net.forward_pair(&refs(&v), &refs(&v)).unwrap().first;
    assert!(after.y_v().iter().all(|&x| x == 0.0));
    assert_eq!(before.y_i(), after.y_i());
    assert_eq!(before.z_i, after.z_i);
    assert_eq!(before.p_i, after.p_i);
    assert_ne!(before.z_v, after.z_v);
}

#[test]
fn stop_gradient_forward_and_backward() {
    let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.37 - 1.0);
    let d = stop_gradient(x.view());
    assert_eq!(d.value(), x.view());
    let g = d.backward(&Array2::from_elem((3, 4), 5.0));
    assert!(g.iter().all(|&v| v == 0.0));
}

fn all_grads(net: &mut Network) -> Vec<(String, Vec<f32>)> {
    net.named_tensors()
        .into_iter()
        .filter(|t| t.kind == TensorKind::Param)
        .map(|t| (t.name, t.tensor.grad.clone()))
        .collect()
}

#[test]
fn loss_on_detached_terms_gives_zero_parameter_gradient() {
    let mut net = Network::new(&small_config(Mode::Asymmetric, EncoderArch::TinyCNN), 9).unwrap();
    let v = images(4, 8, 3);
    let w = images(4, 8, 4);
    let (out, caches) = net.forward_pair_train(&refs(&v), &refs(&w)).unwrap();
    // Negative cosine between detached copies of every output.
    let z1 = stop_gradient(f64s(&out.first.z_i).view());
    let z2 = stop_gradient(f64s(&out.second.z_i).view());
    let p1 = stop_gradient(f64s(out.first.p_i.as_ref().unwrap()).view());
    let p2 = stop_gradient(f64s(out.second.p_i.as_ref().unwrap()).view());
    let (loss, g) = simsiam_loss_grad(BranchPair::new(p1.value(), p2.value()), BranchPair::new(z1.value(), z2.value())).unwrap();
    assert!(loss.is_finite());
    let branch = |gp: &Array2<f64>, gz: &Array2<f64>, p: &Detached<Array2<f64>>, z: &Detached<Array2<f64>>| BranchGrads {
        z_i: z.backward(gz),
        z_v: Array2::zeros(out.first.z_v.dim()),
        p_i: Some(p.backward(gp)),
        p_v: Some(Array2::zeros(out.first.z_v.dim())),
    };
    let g1 = branch(&g.prediction.first, &g.target.first, &p1, &z1);
    let g2 = branch(&g.prediction.second, &g.target.second, &p2, &z2);
    let [c1, c2] = caches;
    net.backward_branch(c1, &g1);
    net.backward_branch(c2, &g2);
    for (name, grad) in all_grads(&mut net) {
        assert!(grad.iter().all(|&x| x == 0.0), "{name} received gradient");
    }
}

#[test]
fn asymmetric_gradient_flows_only_through_prediction_path() {
    let mut net = Network::new(&small_config(Mode::Asymmetric, EncoderArch::TinyCNN), 9).unwrap();
    let v = images(4, 8, 3);
    let w = images(4, 8, 4);
    let (out, [c1, c2]) = net.forward_pair_train(&refs(&v), &refs(&w)).unwrap();
    let p = (f64s(out.first.p_i.as_ref().unwrap()), f64s(out.second.p_i.as_ref().unwrap()));
    let z = (f64s(&out.first.z_i), f64s(&out.second.z_i));
    let (_, g) = simsiam_loss_grad(BranchPair::new(p.0.view(), p.1.view()), BranchPair::new(z.0.view(), z.1.view())).unwrap();
    assert!(g.target.first.iter().chain(g.target.second.iter()).all(|&x| x == 0.0));
    let zeros = Array2::zeros(out.first.z_v.dim());
    for (c, gp, gz) in [(c1, &g.prediction.first, &g.target.first), (c2, &g.prediction.second, &g.target.second)] {
        net.backward_branch(
            c,
            &BranchGrads {
                z_i: gz.clone(),
                z_v: zeros.clone(),
                p_i: Some(gp.clone()),
                p_v: Some(zeros.clone()),
            },
        );
    }
    let grads = all_grads(&mut net);
    let norm = |prefix: &str| -> f64 {
        grads
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, g)| g.iter())
            .map(|&x| (x as f64).powi(2))
            .sum()
    };
    assert!(norm("q_i") > 0.0);
    assert!(norm("g_i") > 0.0);
    assert!(norm("encoder") > 0.0);
    assert_eq!(norm("g_v"), 0.0);
    assert_eq!(norm("q_v"), 0.0);
}

/// Scalar probe objective `Σ w ⊙ outputs` in training mode, evaluated on
/// a clone so running statistics of `net` stay untouched.
fn probe_objective(net: &Network, v: &[&Image], w: &[&Image], probes: &[Array2<f64>; 4]) -> f64 {
    let mut n = net.clone();
    let (out, _) = n.forward_pair_train(v, w).unwrap();
    let dot = |a: &Array2<f32>, b: &Array2<f64>| a.iter().zip(b).map(|(&x, &y)| x as f64 * y).sum::<f64>();
    dot(out.first.p_i.as_ref().unwrap(), &probes[0])
        + dot(&out.second.z_i, &probes[1])
        + dot(out.first.p_v.as_ref().unwrap(), &probes[2])
        + dot(&out.second.z_v, &probes[3])
}

fn check_network_gradients(arch: EncoderArch, size: usize, width: usize, batch: usize) {
    let mut cfg = small_config(Mode::Asymmetric, arch);
    cfg.encoder.input_size = size;
    cfg.encoder.base_width = width;
    let mut net = Network::new(&cfg, 21).unwrap();
    let v = images(batch, size, 7);
    let w = images(batch, size, 8);
    let (v, w) = (refs(&v), refs(&w));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probes: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::from_shape_fn((batch, 4), |_| rng.random_range(-1.0..1.0)));

    // Nonzero normalization shifts keep activations off the ReLU kinks,
    // where one-sided and central differences legitimately disagree.
    for t in net.named_tensors() {
        if t.name.ends_with("bn.bias") {
            t.tensor.value.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let reference = net.clone();
    let (_, [c1, c2]) = net.forward_pair_train(&v, &w).unwrap();
    let zeros = Array2::zeros((batch, 4));
    net.backward_branch(
        c1,
        &BranchGrads {
            z_i: zeros.clone(),
            z_v: zeros.clone(),
            p_i: Some(probes[0].clone()),
            p_v: Some(probes[2].clone()),
        },
    );
    net.backward_branch(
        c2,
        &BranchGrads {
            z_i: probes[1].clone(),
            z_v: probes[3].clone(),
            p_i: Some(zeros.clone()),
            p_v: Some(zeros),
        },
    );
    let analytic = all_grads(&mut net);

    // A deep ReLU network has kinks at every scale; an entry counts only
    // when two adjacent step sizes agree, i.e. the stencil saw a smooth
    // function.  A solid fraction of the sampled entries must qualify.
    let (mut sampled, mut checked) = (0, 0);
    let mut pick = ChaCha8Rng::seed_from_u64(2);
    for (name, grad) in &analytic {
        for _ in 0..3 {
            let k = pick.random_range(0..grad.len());
            sampled += 1;
            let eval = |delta: f32| {
                let mut n = reference.clone();
                for t in n.named_tensors() {
                    if &t.name == name {
                        t.tensor.value[k] += delta;
                    }
                }
                probe_objective(&n, &v, &w, &probes)
            };
            let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + a.abs().max(b.abs()));
            let centre = eval(0.0);
            let nums: Vec<f64> = [1e-3f32, 3e-4, 1e-4]
                .iter()
                .map(|&h| (eval(h) - eval(-h)) / (2.0 * h as f64))
                .collect();
            // A kink very close to the current point passes the first test
            // with the mean of both slopes; one-sided differences expose it.
            let h = 3e-4f32;
            let forward = (eval(h) - centre) / h as f64;
            let backward = (centre - eval(-h)) / h as f64;
            let Some(num) = nums.windows(2).find(|p| rel(p[0], p[1]) < 2e-3).map(|p| p[1]) else {
                continue;
            };
            if rel(forward, backward) > 5e-3 {
                continue;
            }
            let ana = grad[k] as f64;
            assert!(rel(num, ana) < 1e-2, "{arch:?} {name}[{k}]: numeric {num} analytic {ana} ({nums:?}, one-sided {forward} {backward})");
            checked += 1;
        }
    }
    assert!(checked * 3 >= sampled && checked >= 20, "{arch:?}: only {checked} of {sampled} entries had a smooth stencil");
}

#[test]
fn tiny_cnn_gradients_match_finite_differences() {
    check_network_gradients(EncoderArch::TinyCNN, 8, 2, 5);
}

#[test]
fn resnet18_gradients_match_finite_differences() {
    check_network_gradients(EncoderArch::ResNet18Lightly, 16, 4, 8);
}

#[test]
fn mlp_encoder_gradients_match_finite_differences() {
    check_network_gradients(EncoderArch::Mlp, 8, 2, 5);
}

#[test]
fn resnet50_forward_shapes() {
    let cfg = small_config(Mode::Symmetric, EncoderArch::ResNet50);
    let mut net = Network::new(&cfg, 1).unwrap();
    let v = images(3, 8, 1);
    let (out, _) = net.forward_pair_train(&refs(&v), &refs(&v)).unwrap();
    assert_eq!(out.first.y.dim(), (3, 10));
    assert_eq!(net.encoder.last.weight.shape, vec![10, 2 * 8 * 4]);
}

#[test]
fn training_forward_updates_running_statistics_only() {
    let cfg = small_config(Mode::Asymmetric, EncoderArch::TinyCNN);
    let mut net = Network::new(&cfg, 4).unwrap();
    let before = net.state();
    let v = images(4, 8, 1);
    net.forward_pair_train(&refs(&v), &refs(&v)).unwrap();
    for (a, b) in before.iter().zip(net.state()) {
        match a.kind {
            TensorKind::Param => assert_eq!(a.value, b.value, "{}", a.name),
            TensorKind::Buffer if a.name.ends_with("running_mean") => assert_ne!(a.value, b.value, "{}", a.name),
            TensorKind::Buffer => {}
        }
    }
}

#[test]
fn checkpoint_round_trip_and_integrity() {
    let cfg = ModelConfig::new(Mode::Asymmetric);
    let net = Network::new(&cfg, 17).unwrap();
    let ckpt = Checkpoint::from_network(&net, serde_json::json!({"epochs": 3}), 42, 17);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.meta.step, 42);
    assert_eq!(file_hash(&path).unwrap(), ckpt.hash().unwrap());
    let restored = loaded.network().unwrap();
    let v = images(2, 32, 0);
    assert_eq!(net.encode(&refs(&v)).unwrap(), restored.encode(&refs(&v)).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bytes, &path), Err(Error::Malformed { .. })));
    let bytes = std::fs::read(&path).unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10], &path).is_err());
    assert!(Checkpoint::from_bytes(b"garbage", &path).is_err());

    let other = Network::new(&ModelConfig::new(Mode::Symmetric), 0).unwrap();
    let mut state = other.state();
    assert!(net.clone().load_state(&state).is_err());
    state.truncate(3);
    assert!(net.clone().load_state(&state).is_err());
}

#[test]
fn attention_maps_partition_energy_and_normalize() {
    let net = Network::new(&ModelConfig::new(Mode::Asymmetric), 6).unwrap();
    let x = &images(1, 32, 5)[0];
    let full = attention_energy(&net, x, Part::Full).unwrap();
    let dir = attention_energy(&net, x, Part::Dir).unwrap();
    let dvr = attention_energy(&net, x, Part::Dvr).unwrap();
    for ((f, a), b) in full.iter().zip(&dir).zip(&dvr) {
        assert!((a + b - f).abs() <= 1e-12 * f.abs().max(1e-300), "{a} + {b} != {f}");
    }
    for part in Part::ALL {
        let h = attention_map(&net, x, part).unwrap();
        assert_eq!((h.height, h.width), (32, 32));
        assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(h.values.iter().any(|&v| v > 0.5));
    }
}

#[test]
fn attention_map_of_zero_features_is_zero() {
    let mut net = Network::new(&ModelConfig::new(Mode::Symmetric), 6).unwrap();
    // Last conv block: BN with zero scale and shift feeds zeros through ReLU.
    let names: Vec<String> = net.state().into_iter().map(|t| t.name).filter(|n| n.starts_with("encoder.body.3.bn.")).collect();
    assert!(!names.is_empty());
    for t in net.named_tensors() {
        if t.name == "encoder.body.3.bn.weight" || t.name == "encoder.body.3.bn.bias" {
            t.tensor.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x = &images(1, 32, 5)[0];
    let h = attention_map(&net, x, Part::Full).unwrap();
    assert!(h.values.iter().all(|&v| v == 0.0));
}

#[test]
fn attention_map_requires_convolutional_encoder() {
    let mut cfg = ModelConfig::new(Mode::Symmetric);
    cfg.encoder.arch = EncoderArch::Mlp;
    let net = Network::new(&cfg, 0).unwrap();
    let x = &images(1, 32, 5)[0];
    assert!(matches!(attention_map(&net, x, Part::Dir), Err(Error::Unsupported(_))));
}

#[test]
fn invalid_configs_are_rejected_with_every_problem() {
    let mut cfg = ModelConfig::new(Mode::Symmetric);
    cfg.encoder.dr = 1.0;
    cfg.encoder.in_channels = 2;
    cfg.heads.output_dim = 0;
    match Network::new(&cfg, 0) {
        Err(Error::Config(errs)) => assert_eq!(errs.len(), 3, "{errs:?}"),
        other => panic!("expected config error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn initialization_is_seeded() {
    let cfg = ModelConfig::new(Mode::Asymmetric);
    let a = Network::new(&cfg, 1).unwrap().state();
    let b = Network::new(&cfg, 1).unwrap().state();
    let c = Network::new(&cfg, 2).unwrap().state();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let view: ArrayView2<f32> = ArrayView2::from_shape((1, a[0].value.len()), &a[0].value).unwrap();
    assert!(view.iter().all(|v| v.is_finite()));
}


