//! Python bindings. Images travel as nested lists of rows, masks as nested
//! lists of integer labels, feature fields as lists of images.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fasunet_core::fas::{FasConfig, StepSize};
use fasunet_core::fusion::{kmeans_segment, postprocess as post, threshold_segment, PostOrder};
use fasunet_core::io::padding::{crop_mask, pad, Padding};
use fasunet_core::io::{load_checkpoint, make_phantom, save_checkpoint, PhantomSpec, Shape};
use fasunet_core::metrics::evaluate as evaluate_masks;
use fasunet_core::model::ModelParams;
use fasunet_core::net::train::{batch_tensors, loss_and_grad};
use fasunet_core::net::{
    gradient_check, infer, param_count as count, predict as argmax, train_store, GradCheckConfig, Mode, NetConfig,
    ParamStore, Sample, TrainConfig,
};
use fasunet_core::{Error, Tensor};

pub mod convert;

use convert::{grid_to_tensor, mask_from_rows, mask_to_rows, planes_to_tensor, tensor_to_planes, tensor_to_rows};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for fasunet_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Closed-form and instantiated parameter counts of a network shape.
#[pyfunction]
#[pyo3(signature = (levels, channels, kl, km, kr, kernel=3, dims=2, ratio=1, in_channels=1, classes=2))]
#[allow(clippy::too_many_arguments)]
fn param_count<'py>(
    py: Python<'py>,
    levels: usize,
    channels: usize,
    kl: usize,
    km: usize,
    kr: usize,
    kernel: usize,
    dims: usize,
    ratio: usize,
    in_channels: usize,
    classes: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = NetConfig {
        levels,
        channels,
        pre_smooth: kl,
        coarse_smooth: km,
        post_smooth: kr,
        kernel,
        spatial_dims: dims,
        ratio,
        in_channels,
        classes,
        ..NetConfig::default()
    };
    let c = count(&cfg).py()?;
    let d = PyDict::new(py);
    d.set_item("kernel_params", c.kernel_params)?;
    d.set_item("multiplier", c.multiplier)?;
    d.set_item("multiplier_term", c.multiplier_term)?;
    d.set_item("formula_count", c.formula_count)?;
    d.set_item("instantiated_count", c.instantiated_count)?;
    Ok(d)
}

/// Synthetic image and labels. `disks` holds `(cy, cx, r, phase)` and `rects`
/// holds `(top, left, height, width, phase)`.
#[pyfunction]
#[pyo3(signature = (height, width, intensities, disks=Vec::new(), rects=Vec::new(), noise=0.0, blur=0.0, seed=0))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn phantom(
    height: usize,
    width: usize,
    intensities: Vec<f64>,
    disks: Vec<(f64, f64, f64, u32)>,
    rects: Vec<(usize, usize, usize, usize, u32)>,
    noise: f64,
    blur: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<u32>>)> {
    let mut shapes: Vec<Shape> = rects
        .into_iter()
        .map(|(top, left, height, width, phase)| Shape::Rect { top, left, height, width, phase })
        .collect();
    shapes.extend(disks.into_iter().map(|(cy, cx, r, phase)| Shape::Disk { cy, cx, r, phase }));
    let spec = PhantomSpec { height, width, intensities, shapes, noise_std: noise, blur_sigma: blur, seed };
    let (img, gt) = make_phantom(&spec).py()?;
    Ok((tensor_to_rows(&img), mask_to_rows(&gt)))
}

/// Classical FAS solve; returns the feature field and the residual norm
/// before the first and after every cycle.
#[pyfunction]
#[pyo3(signature = (image, mu=0.2, nu=0.1, eps=0.05, linear=false, levels=3, kl=3, km=7, kr=4, cycles=10, tau=None))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn solve(
    image: Vec<Vec<f64>>,
    mu: f64,
    nu: f64,
    eps: f64,
    linear: bool,
    levels: usize,
    kl: usize,
    km: usize,
    kr: usize,
    cycles: usize,
    tau: Option<f64>,
) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<f64>)> {
    let f = grid_to_tensor(image).py()?;
    let p = if linear { ModelParams::linear(mu, nu) } else { ModelParams::new(mu, nu, eps) }.py()?;
    let cfg = FasConfig {
        levels,
        pre_smooth: kl,
        coarse_smooth: km,
        post_smooth: kr,
        cycles,
        tau: tau.map_or(StepSize::Auto, StepSize::Fixed),
        ..FasConfig::default()
    };
    let out = fasunet_core::fas::solve(&f, &p, &cfg).py()?;
    Ok((tensor_to_planes(&out.u), out.trace.residual_norms))
}

/// Thresholds a single-channel field at ascending levels.
#[pyfunction]
fn threshold(field: Vec<Vec<f64>>, thresholds: Vec<f64>) -> PyResult<Vec<Vec<u32>>> {
    let u = grid_to_tensor(field).py()?;
    let (h, w) = u.hw();
    let mask = threshold_segment(&u.reshape(&[1, h, w]).py()?, &thresholds).py()?;
    Ok(mask_to_rows(&mask))
}

/// k-means over the per-pixel feature vectors of a `d x H x W` field.
#[pyfunction]
#[pyo3(signature = (features, k, seed=0, max_iter=100))]
fn kmeans(features: Vec<Vec<Vec<f64>>>, k: usize, seed: u64, max_iter: usize) -> PyResult<Vec<Vec<u32>>> {
    let u = planes_to_tensor(features).py()?;
    Ok(mask_to_rows(&kmeans_segment(&u, k, seed, max_iter).py()?))
}

/// Largest component plus hole filling for one class; `order` is `"ch"` or `"hc"`.
#[pyfunction]
#[pyo3(signature = (mask, class_id, order="ch"))]
fn postprocess(mask: Vec<Vec<u32>>, class_id: u32, order: &str) -> PyResult<Vec<Vec<u32>>> {
    let order = match order {
        "ch" => PostOrder::ComponentsThenHoles,
        "hc" => PostOrder::HolesThenComponents,
        other => return Err(PyValueError::new_err(format!("order must be ch or hc, got {other}"))),
    };
    let classes = mask.iter().flatten().copied().max().unwrap_or(0).max(class_id) as usize + 1;
    let m = mask_from_rows(mask, classes).py()?;
    Ok(mask_to_rows(&post(&m, class_id, order).0))
}

/// Per-class DSC, precision and SSD with their means over classes `1..classes`.
#[pyfunction]
#[pyo3(signature = (pred, gt, classes, spacing=1.0))]
fn evaluate<'py>(
    py: Python<'py>,
    pred: Vec<Vec<u32>>,
    gt: Vec<Vec<u32>>,
    classes: usize,
    spacing: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let r = evaluate_masks(&mask_from_rows(pred, classes).py()?, &mask_from_rows(gt, classes).py()?, classes, spacing)
        .py()?;
    let d = PyDict::new(py);
    d.set_item("a_dsc", r.a_dsc)?;
    d.set_item("a_preci", r.a_preci)?;
    d.set_item("a_ssd", r.a_ssd)?;
    let per: Vec<(u32, f64, f64, Option<f64>)> =
        r.per_class.iter().map(|c| (c.class_id, c.dsc, c.precision, c.ssd)).collect();
    d.set_item("per_class", per)?;
    Ok(d)
}

/// A single-channel FAS-Unet with its parameters.
#[pyclass]
struct Network {
    cfg: NetConfig,
    store: ParamStore,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (levels=3, channels=8, kl=2, km=3, kr=2, classes=2, seed=0))]
    fn new(levels: usize, channels: usize, kl: usize, km: usize, kr: usize, classes: usize, seed: u64) -> PyResult<Self> {
        let cfg = NetConfig {
            levels,
            channels,
            pre_smooth: kl,
            coarse_smooth: km,
            post_smooth: kr,
            classes,
            in_channels: 1,
            ..NetConfig::default()
        };
        cfg.validate().py()?;
        let store = ParamStore::init(&cfg, seed).py()?;
        Ok(Self { cfg, store })
    }

    #[getter]
    fn classes(&self) -> usize {
        self.cfg.classes
    }

    /// Trainable scalars of the instantiated network.
    #[getter]
    fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Trains in place; returns `(loss, a_dsc)` per epoch. Extents must be
    /// multiples of `2^(levels-1)`.
    #[pyo3(signature = (images, masks, epochs=100, lr=0.01, momentum=0.99, weight_decay=1e-4, batch_size=1, seed=0, target_loss=None, target_dsc=None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        images: Vec<Vec<Vec<f64>>>,
        masks: Vec<Vec<Vec<u32>>>,
        epochs: usize,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        batch_size: usize,
        seed: u64,
        target_loss: Option<f64>,
        target_dsc: Option<f64>,
    ) -> PyResult<Vec<(f64, f64)>> {
        if images.len() != masks.len() {
            return Err(PyValueError::new_err("images and masks differ in length"));
        }
        let data = images
            .into_iter()
            .zip(masks)
            .map(|(img, m)| {
                let t = grid_to_tensor(img)?;
                let (h, w) = t.hw();
                Ok(Sample { image: t.reshape(&[1, h, w])?, labels: mask_from_rows(m, self.cfg.classes)? })
            })
            .collect::<fasunet_core::Result<Vec<_>>>()
            .py()?;
        let tcfg = TrainConfig {
            lr0: lr,
            momentum,
            weight_decay,
            batch_size,
            max_epochs: epochs,
            seed,
            target_loss,
            target_dsc,
            ..TrainConfig::default()
        };
        let trace = train_store(&mut self.store, &data, &self.cfg, &tcfg).py()?;
        Ok(trace.epochs.iter().map(|e| (e.loss, e.a_dsc)).collect())
    }

    /// Eval-mode label mask; inputs of any extent are zero-padded and the
    /// result cropped back.
    fn predict(&self, image: Vec<Vec<f64>>) -> PyResult<Vec<Vec<u32>>> {
        let t = grid_to_tensor(image).py()?;
        let (h, w) = t.hw();
        let p = Padding::to_multiple(h, w, self.cfg.extent_multiple());
        let x = pad(&t, p).py()?;
        let (ph, pw) = x.hw();
        let probs = infer(&self.store, &self.cfg, &x.reshape(&[1, 1, ph, pw]).py()?, Mode::Eval).py()?;
        let mask = argmax(&probs).py()?.remove(0);
        Ok(mask_to_rows(&crop_mask(&mask, p).py()?))
    }

    /// Maximum relative error of eval-mode gradients against central
    /// differences on a random batch.
    #[pyo3(signature = (size=None, probes=50, seed=0))]
    fn gradient_check(&self, size: Option<usize>, probes: usize, seed: u64) -> PyResult<f64> {
        let n = size.unwrap_or(2 * self.cfg.extent_multiple());
        let x = Tensor::random_normal(&[1, n, n], seed, 1.0).py()?;
        let labels: Vec<Vec<u32>> =
            (0..n).map(|i| (0..n).map(|j| ((i * 7 + j * 3) % self.cfg.classes) as u32).collect()).collect();
        let sample = Sample { image: x, labels: mask_from_rows(labels, self.cfg.classes).py()? };
        let (x, target) = batch_tensors(&[&sample], self.cfg.classes).py()?;
        let mut store = self.store.clone();
        loss_and_grad(&mut store, &self.cfg, &x, &target, Mode::Train).py()?;
        let gc = GradCheckConfig { probes, seed, ..GradCheckConfig::default() };
        Ok(gradient_check(&store, &self.cfg, &x, &target, Mode::Eval, &gc).py()?.max_rel_error)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &self.store, &self.cfg).py()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (cfg, store) = load_checkpoint(path).py()?;
        Ok(Self { cfg, store })
    }
}

#[pymodule]
fn fasunet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(threshold, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Network>()?;
    Ok(())
}
