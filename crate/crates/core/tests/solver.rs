use fasunet_core::fas::{fas_vcycle, smooth, solve, FasConfig, GridHierarchy, StepSize};
use fasunet_core::io::phantom::{make_phantom, PhantomSpec, Shape};
use fasunet_core::model::{apply_a, residual, BlurSpec, ModelParams};
use fasunet_core::{Error, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::random_normal(shape, seed, 1.0).unwrap()
}

/// Random field smoothed by a Gaussian, as a `1 x H x W` right-hand side.
fn smooth_rhs(n: usize, seed: u64) -> Tensor {
    let p = ModelParams { blur: BlurSpec::gaussian(1, 2.0, 4), ..ModelParams::default() };
    apply_a(&rand(&[1, n, n], seed), &p).unwrap().reshape(&[1, n, n]).unwrap()
}

#[test]
fn linear_vcycles_contract_on_a_four_level_hierarchy() {
    let p = ModelParams::linear(1.0, 1.0).unwrap();
    let cfg = FasConfig { levels: 4, ..FasConfig::default() };
    let hierarchy = GridHierarchy::build(33, 33, &p, &cfg).unwrap();
    assert_eq!(hierarchy.extents, vec![(33, 33), (17, 17), (9, 9), (5, 5)]);
    let mut medians = Vec::new();
    for trial in 0..10 {
        let b = smooth_rhs(33, trial);
        let mut u = Tensor::zeros(&[1, 33, 33]).unwrap();
        let mut prev = residual(&u, &b, &p).unwrap().norm2();
        let mut ratios = Vec::new();
        for _ in 0..5 {
            u = fas_vcycle(&u, &b, 1, &hierarchy, &cfg).unwrap();
            let r = residual(&u, &b, &p).unwrap().norm2();
            ratios.push(r / prev);
            prev = r;
        }
        assert!(ratios.iter().all(|&q| q < 1.0), "{ratios:?}");
        ratios.sort_by(f64::total_cmp);
        medians.push(ratios[2]);
    }
    medians.sort_by(f64::total_cmp);
    assert!(medians[5] <= 0.5, "{medians:?}");
}

#[test]
fn single_level_is_plain_smoothing() {
    let p = ModelParams::new(0.5, 0.1, 0.2).unwrap();
    let cfg = FasConfig { levels: 1, coarse_smooth: 5, tau: StepSize::Fixed(0.05), ..FasConfig::default() };
    let h = GridHierarchy::build(9, 7, &p, &cfg).unwrap();
    let (u, b) = (rand(&[1, 9, 7], 1), rand(&[1, 9, 7], 2));
    assert_eq!(fas_vcycle(&u, &b, 1, &h, &cfg).unwrap(), smooth(&u, &b, &p, 5, 0.05).unwrap());
}

#[test]
fn trivial_systems() {
    let cfg = FasConfig { levels: 2, cycles: 1, ..FasConfig::default() };
    let f = rand(&[12, 12], 3);
    // mu = 0 with identity A reduces to u = f, which is the initial guess
    let out = solve(&f, &ModelParams::new(0.0, 0.0, 0.1).unwrap(), &cfg).unwrap();
    assert_eq!(out.u.reshape(&[12, 12]).unwrap(), f);

    let zero = Tensor::zeros(&[12, 12]).unwrap();
    let out = solve(&zero, &ModelParams::new(1.0, 0.5, 0.1).unwrap(), &cfg).unwrap();
    assert_eq!(out.u.max_abs(), 0.0);
}

#[test]
fn linear_smoothing_reduces_the_residual_every_step() {
    let p = ModelParams::linear(0.7, 0.4).unwrap();
    let tau = p.auto_step(14, 14).unwrap();
    let b = rand(&[1, 14, 14], 4);
    let mut u = Tensor::zeros(&[1, 14, 14]).unwrap();
    let mut prev = residual(&u, &b, &p).unwrap().norm2();
    for _ in 0..10 {
        u = smooth(&u, &b, &p, 1, tau).unwrap();
        let r = residual(&u, &b, &p).unwrap().norm2();
        assert!(r < prev);
        prev = r;
    }
}

#[test]
fn nonlinear_energy_trace_is_monotone() {
    let spec = PhantomSpec {
        height: 48,
        width: 48,
        intensities: vec![0.2, 0.8],
        shapes: vec![Shape::Disk { cy: 24.0, cx: 24.0, r: 12.0, phase: 1 }],
        noise_std: 0.15,
        blur_sigma: 0.0,
        seed: 5,
    };
    let (img, _) = make_phantom(&spec).unwrap();
    let p = ModelParams::new(0.2, 0.1, 0.05).unwrap();
    let out = solve(&img, &p, &FasConfig { levels: 3, cycles: 8, ..FasConfig::default() }).unwrap();
    for w in out.trace.system_energies.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{:?}", out.trace.system_energies);
    }
    let r = &out.trace.residual_norms;
    assert!(r.last().unwrap() < &(0.05 * r[0]), "{r:?}");
}

#[test]
fn blurred_model_is_deblurred() {
    let spec = PhantomSpec {
        height: 32,
        width: 32,
        intensities: vec![0.0, 1.0],
        shapes: vec![Shape::Rect { top: 8, left: 8, height: 16, width: 16, phase: 1 }],
        noise_std: 0.0,
        blur_sigma: 1.0,
        seed: 0,
    };
    let (img, gt) = make_phantom(&spec).unwrap();
    let mut p = ModelParams::new(1e-3, 0.0, 0.05).unwrap();
    p.blur = BlurSpec::gaussian(1, 1.0, 3);
    let out = solve(&img, &p, &FasConfig { levels: 3, cycles: 30, ..FasConfig::default() }).unwrap();
    let truth: Vec<f64> = gt.labels().iter().map(|&l| l as f64).collect();
    let err_solved: f64 = out.u.data().iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum();
    let err_blurred: f64 = img.data().iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum();
    assert!(err_solved < 0.5 * err_blurred, "{err_solved} vs {err_blurred}");
}

#[test]
fn oversized_step_reports_divergence() {
    let p = ModelParams::linear(1.0, 1.0).unwrap();
    let cfg = FasConfig { levels: 2, cycles: 50, tau: StepSize::Fixed(50.0), ..FasConfig::default() };
    match solve(&rand(&[16, 16], 6), &p, &cfg) {
        Err(Error::Divergence { what, .. }) => assert!(what.contains("cycle"), "{what}"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn hierarchy_rejects_tiny_coarse_grids() {
    let p = ModelParams::default();
    let cfg = FasConfig { levels: 4, ..FasConfig::default() };
    assert!(matches!(GridHierarchy::build(16, 16, &p, &cfg), Err(Error::Size(_))));
    assert!(GridHierarchy::build(25, 25, &p, &cfg).is_ok());
}
