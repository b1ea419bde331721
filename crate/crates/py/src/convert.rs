//! Nested-list conversions between Python values and core types.

use fasunet_core::fusion::SegMask;
use fasunet_core::{Error, Result, Tensor};

fn rectangular<T>(rows: &[Vec<T>]) -> Result<(usize, usize)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::InvalidArgument("expected a non-empty rectangular list of rows".into()));
    }
    Ok((h, w))
}

/// `H x W` tensor from rows.
pub fn grid_to_tensor(rows: Vec<Vec<f64>>) -> Result<Tensor> {
    let (h, w) = rectangular(&rows)?;
    Tensor::from_vec(&[h, w], rows.into_iter().flatten().collect())
}

/// `d x H x W` tensor from a list of images.
pub fn planes_to_tensor(planes: Vec<Vec<Vec<f64>>>) -> Result<Tensor> {
    let planes = planes.into_iter().map(grid_to_tensor).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&planes)
}

/// Rows of the last two axes, planes concatenated.
pub fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (_, w) = t.hw();
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

pub fn tensor_to_planes(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    (0..t.planes()).map(|c| tensor_to_rows(&t.plane_tensor(c))).collect()
}

pub fn mask_from_rows(rows: Vec<Vec<u32>>, classes: usize) -> Result<SegMask> {
    let (h, w) = rectangular(&rows)?;
    SegMask::new(h, w, classes, rows.into_iter().flatten().collect())
}

pub fn mask_to_rows(m: &SegMask) -> Vec<Vec<u32>> {
    m.labels().chunks(m.width()).map(<[u32]>::to_vec).collect()
}
