use fasunet_core::fusion::SegMask;
use fasunet_core::net::gradcheck::rel_error;
use fasunet_core::net::train::{batch_tensors, loss_and_grad};
use fasunet_core::net::{
    fcb, fdb, forward, gradient_check, infer, predict, smoothing_block, train, GradCheckConfig, InitMode, Mode,
    NetConfig, ParamKind, ParamStore, Pass, Phase, Sample, TrainConfig, Var,
};
use fasunet_core::Tensor;

fn toy(levels: usize, p: usize) -> NetConfig {
    NetConfig {
        levels,
        channels: p,
        pre_smooth: 1,
        coarse_smooth: 2,
        post_smooth: 1,
        classes: 3,
        in_channels: 1,
        ..NetConfig::default()
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::random_normal(shape, seed, 1.0).unwrap()
}

/// Randomizes batch-norm affine and running statistics so that gradient
/// checks exercise every term.
fn perturb_bn(store: &mut ParamStore, seed: u64) {
    let mut s = seed;
    for (_, p) in store.iter_mut() {
        s += 1;
        let noise = Tensor::random_normal(p.value.shape(), s, 0.2).unwrap();
        match p.kind {
            ParamKind::BnScale | ParamKind::BnMean | ParamKind::BnShift => p.value.axpy(1.0, &noise).unwrap(),
            ParamKind::BnVar => p.value = p.value.add(&noise.map(f64::abs)).unwrap(),
            _ => {}
        }
    }
}

fn labels(h: usize, w: usize, classes: usize, seed: u64) -> SegMask {
    let noise = rand(&[h * w], seed);
    let l = noise.data().iter().map(|v| ((v.abs() * 7.0) as u32) % classes as u32).collect();
    SegMask::new(h, w, classes, l).unwrap()
}

/// Checks `d <out, probe> / d theta` for every parameter a block touches.
fn check_block(
    store: &ParamStore,
    cfg: &NetConfig,
    mode: Mode,
    inputs: &[Tensor],
    block: impl Fn(&mut Pass, &[Var]) -> Var,
    per_param: usize,
) -> f64 {
    fn run<'a>(
        st: &'a ParamStore,
        cfg: &'a NetConfig,
        mode: Mode,
        inputs: &[Tensor],
        block: &dyn Fn(&mut Pass, &[Var]) -> Var,
    ) -> (Pass<'a>, Var) {
        let mut pass = Pass::new(st, cfg, mode);
        let vars: Vec<Var> = inputs.iter().map(|t| pass.input(t.clone())).collect();
        let out = block(&mut pass, &vars);
        let probe = Tensor::random_normal(pass.value(out).shape(), 77, 1.0).unwrap();
        let root = pass.tape_mut().dot_const(out, &probe).unwrap();
        (pass, root)
    }
    let (pass, root) = run(store, cfg, mode, inputs, &block);
    let sig = pass.tape().relu_signature();
    let mut grads = pass.tape().backward(root).unwrap();
    let params: Vec<(String, Var)> = pass.param_vars().map(|(n, v)| (n.to_string(), v)).collect();
    assert!(!params.is_empty());
    let mut worst: f64 = 0.0;
    let step = 1e-6;
    for (name, var) in params {
        let g = grads.take(var).unwrap();
        for k in (0..g.len()).step_by((g.len() / per_param).max(1)).take(per_param) {
            let eval = |d: f64| {
                let mut st = store.clone();
                st.get_mut(&name).unwrap().value.data_mut()[k] += d;
                let (p, r) = run(&st, cfg, mode, inputs, &block);
                (p.value(r).data()[0], p.tape().relu_signature())
            };
            let ((up, su), (dn, sd)) = (eval(step), eval(-step));
            if su != sig || sd != sig {
                continue;
            }
            worst = worst.max(rel_error(g.data()[k], (up - dn) / (2.0 * step)));
        }
    }
    worst
}

#[test]
fn smoothing_block_shapes_and_identities() {
    let cfg = toy(3, 3);
    let store = ParamStore::init(&cfg, 1).unwrap();
    for (level, phase, h) in [(1, Phase::Pre, 8), (2, Phase::Post, 4), (3, Phase::Coarse, 2)] {
        let mut pass = Pass::new(&store, &cfg, Mode::Train);
        let u = pass.input(rand(&[2, 3, h, h], 1));
        let b = pass.input(rand(&[2, 3, h, h], 2));
        let out = smoothing_block(&mut pass, u, b, level, phase).unwrap();
        assert_eq!(pass.value(out).shape(), &[2, 3, h, h]);
    }

    // zero smoothing steps leave u untouched
    let cfg0 = NetConfig { pre_smooth: 0, ..cfg.clone() };
    let store0 = ParamStore::init(&cfg0, 1).unwrap();
    let mut pass = Pass::new(&store0, &cfg0, Mode::Train);
    let u0 = rand(&[1, 3, 8, 8], 3);
    let u = pass.input(u0.clone());
    let b = pass.input(rand(&[1, 3, 8, 8], 4));
    let out = smoothing_block(&mut pass, u, b, 1, Phase::Pre).unwrap();
    assert_eq!(pass.value(out), &u0);

    // all-zero correction kernels give the identity
    let mut zeroed = store.clone();
    for (name, p) in zeroed.iter_mut() {
        if name.starts_with("L1.pre.Kc") {
            p.value.data_mut().fill(0.0);
        }
    }
    for mode in [Mode::Train, Mode::Eval] {
        let mut pass = Pass::new(&zeroed, &cfg, mode);
        let u = pass.input(u0.clone());
        let b = pass.input(rand(&[1, 3, 8, 8], 4));
        let out = smoothing_block(&mut pass, u, b, 1, Phase::Pre).unwrap();
        assert_eq!(pass.value(out), &u0);
    }

    let mut pass = Pass::new(&store, &cfg, Mode::Train);
    let u = pass.input(rand(&[1, 3, 8, 8], 1));
    let b = pass.input(rand(&[1, 3, 4, 8], 2));
    assert!(smoothing_block(&mut pass, u, b, 1, Phase::Pre).is_err());
    let b = pass.input(rand(&[1, 3, 8, 8], 2));
    assert!(smoothing_block(&mut pass, u, b, 1, Phase::Coarse).is_err());
}

#[test]
fn transfer_blocks() {
    let cfg = toy(3, 3);
    let store = ParamStore::init(&cfg, 2).unwrap();
    let mut pass = Pass::new(&store, &cfg, Mode::Train);
    let b = pass.input(rand(&[2, 3, 8, 6], 1));
    let u = pass.input(rand(&[2, 3, 8, 6], 2));
    let (bc, uc) = fdb(&mut pass, b, u, 1).unwrap();
    assert_eq!(pass.value(bc).shape(), &[2, 3, 4, 3]);
    assert_eq!(pass.value(uc).shape(), &[2, 3, 4, 3]);
    assert!(fdb(&mut pass, b, u, 3).is_err());

    let z = pass.input(Tensor::zeros(&[2, 3, 8, 6]).unwrap());
    let (bz, uz) = fdb(&mut pass, z, z, 1).unwrap();
    assert_eq!(pass.value(bz).max_abs(), 0.0);
    assert_eq!(pass.value(uz).max_abs(), 0.0);

    // matching coarse iterate and initial value: no correction at all
    let ubar = rand(&[2, 3, 8, 6], 3);
    let ub = pass.input(ubar.clone());
    let out = fcb(&mut pass, ub, uc, uc, 1).unwrap();
    assert_eq!(pass.value(out), &ubar);
    let other = pass.input(rand(&[2, 3, 4, 3], 4));
    let out = fcb(&mut pass, ub, other, uc, 1).unwrap();
    assert_eq!(pass.value(out).shape(), &[2, 3, 8, 6]);
    assert_ne!(pass.value(out), &ubar);
}

#[test]
fn block_gradients_match_finite_differences() {
    let cfg = toy(3, 2);
    let mut store = ParamStore::init(&cfg, 3).unwrap();
    perturb_bn(&mut store, 100);
    for mode in [Mode::Eval, Mode::Train] {
        let e = check_block(
            &store,
            &cfg,
            mode,
            &[rand(&[2, 2, 8, 8], 1), rand(&[2, 2, 8, 8], 2)],
            |p, v| smoothing_block(p, v[0], v[1], 1, Phase::Pre).unwrap(),
            4,
        );
        assert!(e <= 1e-4, "smoothing {mode:?}: {e}");
        let e = check_block(
            &store,
            &cfg,
            mode,
            &[rand(&[2, 2, 8, 8], 3), rand(&[2, 2, 8, 8], 4)],
            |p, v| {
                let (bc, uc) = fdb(p, v[0], v[1], 2 - 1).unwrap();
                // both outputs enter the probed scalar
                p.tape_mut().add(bc, uc).unwrap()
            },
            4,
        );
        assert!(e <= 1e-4, "fdb {mode:?}: {e}");
        let e = check_block(
            &store,
            &cfg,
            mode,
            &[rand(&[2, 2, 8, 8], 5), rand(&[2, 2, 4, 4], 6), rand(&[2, 2, 4, 4], 7)],
            |p, v| fcb(p, v[0], v[1], v[2], 1).unwrap(),
            6,
        );
        assert!(e <= 1e-4, "fcb {mode:?}: {e}");
    }
}

#[test]
fn forward_contract() {
    let cfg = toy(3, 3);
    let store = ParamStore::init(&cfg, 4).unwrap();
    let x = rand(&[2, 1, 8, 12], 5);
    for mode in [Mode::Train, Mode::Eval] {
        let s = infer(&store, &cfg, &x, mode).unwrap();
        assert_eq!(s.shape(), &[2, 3, 8, 12]);
        for b in 0..2 {
            for px in 0..96 {
                let sum: f64 = (0..3).map(|c| s.data()[(b * 3 + c) * 96 + px]).sum();
                assert!((sum - 1.0).abs() <= 1e-10);
            }
        }
    }
    assert_eq!(infer(&store, &cfg, &x, Mode::Eval).unwrap(), infer(&store, &cfg, &x, Mode::Eval).unwrap());
    assert!(infer(&store, &cfg, &rand(&[1, 1, 6, 8], 1), Mode::Eval).is_err());
    assert!(infer(&store, &cfg, &rand(&[1, 2, 8, 8], 1), Mode::Eval).is_err());

    // eval mode treats samples independently
    let a = rand(&[1, 1, 8, 8], 6);
    let b = rand(&[1, 1, 8, 8], 7);
    let ab = Tensor::from_vec(&[2, 1, 8, 8], [a.data(), b.data()].concat()).unwrap();
    let ba = Tensor::from_vec(&[2, 1, 8, 8], [b.data(), a.data()].concat()).unwrap();
    let sab = infer(&store, &cfg, &ab, Mode::Eval).unwrap();
    let sba = infer(&store, &cfg, &ba, Mode::Eval).unwrap();
    assert_eq!(&sab.data()[..192], &sba.data()[192..]);
    assert_eq!(&sab.data()[192..], &sba.data()[..192]);
}

#[test]
fn init_modes() {
    for mode in [InitMode::Zero, InitMode::Random, InitMode::LearnedConv] {
        let cfg = NetConfig { init_mode: mode, ..toy(2, 2) };
        let store = ParamStore::init(&cfg, 1).unwrap();
        let x = rand(&[1, 1, 8, 8], 2);
        let s1 = infer(&store, &cfg, &x, Mode::Eval).unwrap();
        let s2 = infer(&store, &cfg, &x, Mode::Eval).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.is_finite());
    }
}

#[test]
fn predict_rules() {
    let one_hot = Tensor::from_vec(&[1, 2, 1, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(predict(&one_hot).unwrap()[0].labels(), &[0, 1, 0]);
    let uniform = Tensor::full(&[1, 3, 2, 2], 1.0 / 3.0).unwrap();
    assert_eq!(predict(&uniform).unwrap()[0].labels(), &[0, 0, 0, 0]);

    let z = rand(&[1, 4, 3, 3], 9);
    let mut shifted = z.clone();
    for px in 0..9 {
        let c = (px as f64) * 3.7 - 10.0;
        for ch in 0..4 {
            shifted.data_mut()[ch * 9 + px] += c;
        }
    }
    let mut tape = fasunet_core::net::Tape::new();
    let zv = tape.leaf(z.clone());
    let s = tape.softmax_channels(zv).unwrap();
    assert_eq!(predict(tape.value(s)).unwrap(), predict(&shifted).unwrap());
}

#[test]
fn end_to_end_gradient() {
    let cfg = NetConfig { levels: 2, channels: 2, pre_smooth: 1, coarse_smooth: 1, post_smooth: 1, classes: 2, ..NetConfig::default() };
    let mut store = ParamStore::init(&cfg, 5).unwrap();
    perturb_bn(&mut store, 200);
    let x = rand(&[1, 1, 8, 8], 3);
    let (_, target) =
        batch_tensors(&[&Sample { image: x.reshape(&[1, 8, 8]).unwrap(), labels: labels(8, 8, 2, 4) }], 2).unwrap();
    for mode in [Mode::Eval, Mode::Train] {
        let r = gradient_check(&store, &cfg, &x, &target, mode, &GradCheckConfig { probes: 5, seed: 11, ..Default::default() })
            .unwrap();
        assert_eq!(r.probes.len(), 5);
        assert!(r.max_rel_error <= 1e-4, "{mode:?}: {r:?}");
    }
}

#[test]
fn gradient_check_leaves_store_untouched() {
    let cfg = toy(2, 2);
    let store = ParamStore::init(&cfg, 6).unwrap();
    let before = store.clone();
    let x = rand(&[1, 1, 4, 4], 1);
    let (_, t) = batch_tensors(&[&Sample { image: x.reshape(&[1, 4, 4]).unwrap(), labels: labels(4, 4, 3, 2) }], 3)
        .unwrap();
    gradient_check(&store, &cfg, &x, &t, Mode::Train, &GradCheckConfig { probes: 3, ..Default::default() }).unwrap();
    assert_eq!(store, before);
}

fn toy_data(n: usize, size: usize, classes: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let gt = {
                let mut l = vec![0u32; size * size];
                for r in 0..size {
                    for c in 0..size {
                        if r >= size / 4 + i % 2 && r < 3 * size / 4 && c >= size / 4 && c < 3 * size / 4 {
                            l[r * size + c] = 1 + ((c >= size / 2) as u32) % (classes as u32 - 1);
                        }
                    }
                }
                SegMask::new(size, size, classes, l).unwrap()
            };
            let img = gt.labels().iter().map(|&l| l as f64 / classes as f64).collect();
            Sample { image: Tensor::from_vec(&[1, size, size], img).unwrap(), labels: gt }
        })
        .collect()
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let cfg = toy(2, 2);
    let data = toy_data(2, 8, 3);
    let t = TrainConfig { lr0: 0.0, max_epochs: 3, batch_size: 2, ..TrainConfig::default() };
    let (trained, trace) = train(&data, &cfg, &t).unwrap();
    let fresh = ParamStore::init(&cfg, t.seed).unwrap();
    for ((n, a), (_, b)) in trained.iter().zip(fresh.iter()) {
        if a.kind.trainable() {
            assert_eq!(a.value, b.value, "{n}");
        }
    }
    assert_eq!(trace.epochs.len(), 3);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let cfg = toy(2, 4);
    let data = toy_data(1, 8, 3);
    let t = TrainConfig { max_epochs: 200, batch_size: 1, seed: 3, ..TrainConfig::default() };
    let (_, a) = train(&data, &cfg, &t).unwrap();
    let (_, b) = train(&data, &cfg, &t).unwrap();
    assert_eq!(a, b);
    let first = a.epochs.first().unwrap().loss;
    let last = a.epochs.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn early_stop_on_targets() {
    let cfg = toy(2, 4);
    let data = toy_data(2, 8, 3);
    let t = TrainConfig { max_epochs: 300, batch_size: 2, target_loss: Some(10.0), ..TrainConfig::default() };
    let (_, trace) = train(&data, &cfg, &t).unwrap();
    assert!(trace.reached_targets);
    assert_eq!(trace.epochs.len(), 1);
}

#[test]
fn running_statistics_follow_train_batches() {
    let cfg = toy(2, 2);
    let mut store = ParamStore::init(&cfg, 1).unwrap();
    let data = toy_data(2, 8, 3);
    let (x, t) = batch_tensors(&[&data[0], &data[1]], 3).unwrap();
    let before = store.get("init.bn.mean").unwrap().value.clone();
    loss_and_grad(&mut store, &cfg, &x, &t, Mode::Eval).unwrap();
    assert_eq!(store.get("init.bn.mean").unwrap().value, before);
    loss_and_grad(&mut store, &cfg, &x, &t, Mode::Train).unwrap();
    assert_ne!(store.get("init.bn.mean").unwrap().value, before);
    // gradients exist for the fusion head
    assert!(store.get("head.Kp").unwrap().grad.max_abs() > 0.0);
    let mut pass = Pass::new(&store, &cfg, Mode::Eval);
    let xv = pass.input(x);
    assert!(forward(&mut pass, xv).is_ok());
}
