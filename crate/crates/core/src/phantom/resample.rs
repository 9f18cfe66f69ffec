use ndarray::{Array2, ArrayView2};

use super::check_spacing;
use crate::error::{Error, Result};

/// Bilinear resampling of a slice onto a new pixel grid.
///
/// Both grids share their physical centre. Samples falling outside the
/// input take the nearest edge value.
pub fn resample_slice(
    slice: ArrayView2<f32>,
    in_spacing: [f64; 2],
    out_size: [usize; 2],
    out_spacing: [f64; 2],
) -> Result<Array2<f32>> {
    check_spacing(&in_spacing)?;
    check_spacing(&out_spacing)?;
    let (h, w) = slice.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("cannot resample an empty slice".into()));
    }
    if out_size[0] == 0 || out_size[1] == 0 {
        return Err(Error::Shape(format!("output size {out_size:?} must be positive")));
    }
    let map = |i: usize, n_out: usize, n_in: usize, ratio: f64| {
        let c = (i as f64 + 0.5 - n_out as f64 / 2.0) * ratio + n_in as f64 / 2.0 - 0.5;
        let c = c.clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    let ry = out_spacing[0] / in_spacing[0];
    let rx = out_spacing[1] / in_spacing[1];
    let cols: Vec<_> = (0..out_size[1]).map(|j| map(j, out_size[1], w, rx)).collect();
    let mut out = Array2::<f32>::zeros((out_size[0], out_size[1]));
    for i in 0..out_size[0] {
        let (y0, y1, fy) = map(i, out_size[0], h, ry);
        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = slice[[y0, x0]] as f64 * (1.0 - fx) + slice[[y0, x1]] as f64 * fx;
            let bot = slice[[y1, x0]] as f64 * (1.0 - fx) + slice[[y1, x1]] as f64 * fx;
            out[[i, j]] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}
