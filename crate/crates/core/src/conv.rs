//! 2-D correlation kernels over unbatched `[C, H, W]` maps.
//!
//! Weights use the `[C_out, C_in, kh, kw]` layout. A transposed convolution
//! reuses the same layout read as `[C_in_t, C_out_t, kh, kw]` and is the exact
//! adjoint of the forward correlation with identical geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn pointwise() -> Self {
        Self {
            kernel: (1, 1),
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        }
    }

    /// Stride-1 geometry whose output keeps the input size.
    pub fn same(kernel: (usize, usize), dilation: (usize, usize)) -> Self {
        Self {
            kernel,
            stride: (1, 1),
            dilation,
            padding: (
                dilation.0 * (kernel.0 - 1) / 2,
                dilation.1 * (kernel.1 - 1) / 2,
            ),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let one = |n: usize, k: usize, s: usize, d: usize, p: usize| -> Result<usize> {
            let span = d * (k - 1) + 1;
            if n + 2 * p < span || s == 0 {
                return Err(Error::Invalid(format!(
                    "convolution yields a non-positive size: input {n}, kernel span {span}, padding {p}"
                )));
            }
            Ok((n + 2 * p - span) / s + 1)
        };
        Ok((
            one(h, self.kernel.0, self.stride.0, self.dilation.0, self.padding.0)?,
            one(w, self.kernel.1, self.stride.1, self.dilation.1, self.padding.1)?,
        ))
    }

    /// Output size of the transposed convolution.
    pub fn transposed_output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let one = |n: usize, k: usize, s: usize, d: usize, p: usize| -> Result<usize> {
            let full = (n - 1) * s + d * (k - 1) + 1;
            if n == 0 || full <= 2 * p {
                return Err(Error::Invalid(format!(
                    "transposed convolution yields a non-positive size from input {n}"
                )));
            }
            Ok(full - 2 * p)
        };
        Ok((
            one(h, self.kernel.0, self.stride.0, self.dilation.0, self.padding.0)?,
            one(w, self.kernel.1, self.stride.1, self.dilation.1, self.padding.1)?,
        ))
    }
}

/// Range of output positions `o` with `0 <= o*s + off < n`.
fn valid_range(n_out: usize, n_in: usize, s: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(s)
    };
    let last = n_in as isize - 1 - off;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / s + 1).min(n_out)
    };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy)]
struct Dims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

/// Visits every (weight, input, output) triple once.
#[inline]
fn for_each_tap(d: Dims, g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (kh, kw) = g.kernel;
    for co in 0..d.cout {
        for ci in 0..d.cin {
            for ki in 0..kh {
                let off_h = (ki * g.dilation.0) as isize - g.padding.0 as isize;
                let (oh_lo, oh_hi) = valid_range(d.oh, d.h, g.stride.0, off_h);
                for kj in 0..kw {
                    let off_w = (kj * g.dilation.1) as isize - g.padding.1 as isize;
                    let (ow_lo, ow_hi) = valid_range(d.ow, d.w, g.stride.1, off_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let widx = ((co * d.cin + ci) * kh + ki) * kw + kj;
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * g.stride.0) as isize + off_h;
                        let in_row = (ci * d.h + ih as usize) * d.w;
                        let out_row = (co * d.oh + oh) * d.ow;
                        let iw0 = (ow_lo * g.stride.1) as isize + off_w;
                        f(widx, in_row + iw0 as usize, out_row + ow_lo, ow_hi - ow_lo);
                    }
                }
            }
        }
    }
}

fn dims(x_shape: &[usize], w_shape: &[usize], g: &ConvGeom) -> Result<Dims> {
    if x_shape.len() != 3 || w_shape.len() != 4 || x_shape[0] != w_shape[1] {
        return Err(crate::error::shape_err("conv2d", x_shape, w_shape));
    }
    if (w_shape[2], w_shape[3]) != g.kernel {
        return Err(crate::error::shape_err(
            "conv2d kernel",
            &w_shape[2..],
            &[g.kernel.0, g.kernel.1],
        ));
    }
    let (oh, ow) = g.output_size(x_shape[1], x_shape[2])?;
    Ok(Dims {
        cin: x_shape[0],
        h: x_shape[1],
        w: x_shape[2],
        cout: w_shape[0],
        oh,
        ow,
    })
}

/// Forward correlation. Returns the output and its shape.
pub fn conv2d(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    g: &ConvGeom,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let d = dims(x_shape, w_shape, g)?;
    let mut out = vec![0.0; d.cout * d.oh * d.ow];
    let sw = g.stride.1;
    for_each_tap(d, g, |widx, i0, o0, n| {
        let wv = w[widx];
        if wv == 0.0 {
            return;
        }
        let dst = &mut out[o0..o0 + n];
        if sw == 1 {
            for (o, xv) in dst.iter_mut().zip(&x[i0..i0 + n]) {
                *o += wv * xv;
            }
        } else {
            for (k, o) in dst.iter_mut().enumerate() {
                *o += wv * x[i0 + k * sw];
            }
        }
    });
    Ok((out, vec![d.cout, d.oh, d.ow]))
}

/// Gradient of the correlation with respect to its input.
pub fn conv2d_input_grad(
    gy: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    g: &ConvGeom,
) -> Result<Vec<f64>> {
    let d = dims(x_shape, w_shape, g)?;
    if gy.len() != d.cout * d.oh * d.ow {
        return Err(crate::error::shape_err(
            "conv2d grad",
            &[gy.len()],
            &[d.cout, d.oh, d.ow],
        ));
    }
    let mut gx = vec![0.0; d.cin * d.h * d.w];
    let sw = g.stride.1;
    for_each_tap(d, g, |widx, i0, o0, n| {
        let wv = w[widx];
        if wv == 0.0 {
            return;
        }
        let src = &gy[o0..o0 + n];
        if sw == 1 {
            for (gxv, gv) in gx[i0..i0 + n].iter_mut().zip(src) {
                *gxv += wv * gv;
            }
        } else {
            for (k, gv) in src.iter().enumerate() {
                gx[i0 + k * sw] += wv * gv;
            }
        }
    });
    Ok(gx)
}

/// Gradient of the correlation with respect to its weights.
pub fn conv2d_weight_grad(
    gy: &[f64],
    x: &[f64],
    x_shape: &[usize],
    w_shape: &[usize],
    g: &ConvGeom,
) -> Result<Vec<f64>> {
    let d = dims(x_shape, w_shape, g)?;
    let mut gw = vec![0.0; w_shape.iter().product()];
    let sw = g.stride.1;
    for_each_tap(d, g, |widx, i0, o0, n| {
        let src = &gy[o0..o0 + n];
        let acc: f64 = if sw == 1 {
            src.iter().zip(&x[i0..i0 + n]).map(|(a, b)| a * b).sum()
        } else {
            src.iter()
                .enumerate()
                .map(|(k, a)| a * x[i0 + k * sw])
                .sum()
        };
        gw[widx] += acc;
    });
    Ok(gw)
}

/// Transposed convolution: `x: [C_in_t, H, W]`, `w: [C_in_t, C_out_t, kh, kw]`.
pub fn conv_transpose2d(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    g: &ConvGeom,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let (oh, ow) = transposed_shape(x_shape, w_shape, g)?;
    let out_shape = vec![w_shape[1], oh, ow];
    let out = conv2d_input_grad(x, &out_shape, w, w_shape, g)?;
    Ok((out, out_shape))
}

pub(crate) fn transposed_shape(
    x_shape: &[usize],
    w_shape: &[usize],
    g: &ConvGeom,
) -> Result<(usize, usize)> {
    if x_shape.len() != 3 || w_shape.len() != 4 || x_shape[0] != w_shape[0] {
        return Err(crate::error::shape_err("conv_transpose2d", x_shape, w_shape));
    }
    let (oh, ow) = g.transposed_output_size(x_shape[1], x_shape[2])?;
    // The forward correlation of the output size must land back on the input size.
    let back = g.output_size(oh, ow)?;
    if back != (x_shape[1], x_shape[2]) {
        return Err(Error::Invalid(format!(
            "transposed geometry is not invertible for input {:?}",
            &x_shape[1..]
        )));
    }
    Ok((oh, ow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct sliding-window definition.
    fn naive(x: &[f64], xs: [usize; 3], w: &[f64], ws: [usize; 4], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = g.output_size(xs[1], xs[2]).unwrap();
        let mut out = vec![0.0; ws[0] * oh * ow];
        for co in 0..ws[0] {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..ws[1] {
                        for ki in 0..ws[2] {
                            for kj in 0..ws[3] {
                                let ih = (i * g.stride.0 + ki * g.dilation.0) as isize - g.padding.0 as isize;
                                let iw = (j * g.stride.1 + kj * g.dilation.1) as isize - g.padding.1 as isize;
                                if ih < 0 || iw < 0 || ih >= xs[1] as isize || iw >= xs[2] as isize {
                                    continue;
                                }
                                s += x[(ci * xs[1] + ih as usize) * xs[2] + iw as usize]
                                    * w[((co * ws[1] + ci) * ws[2] + ki) * ws[3] + kj];
                            }
                        }
                    }
                    out[(co * oh + i) * ow + j] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_over_geometries() {
        let geoms = [
            ConvGeom::same((3, 3), (1, 1)),
            ConvGeom::same((3, 3), (4, 1)),
            ConvGeom {
                kernel: (1, 3),
                stride: (1, 2),
                dilation: (1, 1),
                padding: (0, 0),
            },
            ConvGeom {
                kernel: (2, 3),
                stride: (2, 3),
                dilation: (1, 2),
                padding: (1, 2),
            },
        ];
        for (n, g) in geoms.iter().enumerate() {
            let xs = [2, 7, 11];
            let ws = [3, 2, g.kernel.0, g.kernel.1];
            let x = rand_vec(xs.iter().product(), n as u64);
            let w = rand_vec(ws.iter().product(), 100 + n as u64);
            let (got, _) = conv2d(&x, &xs, &w, &ws, g).unwrap();
            let want = naive(&x, xs, &w, ws, g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identities_hold() {
        // <conv(x), y> == <x, conv^T(y)> and the weight gradient is the bilinear dual.
        let g = ConvGeom {
            kernel: (1, 3),
            stride: (1, 2),
            dilation: (1, 1),
            padding: (0, 0),
        };
        let xs = [3, 4, 201];
        let ws = [2, 3, 1, 3];
        let x = rand_vec(xs.iter().product(), 1);
        let w = rand_vec(ws.iter().product(), 2);
        let (y, ys) = conv2d(&x, &xs, &w, &ws, &g).unwrap();
        assert_eq!(ys, vec![2, 4, 100]);
        let r = rand_vec(y.len(), 3);
        let lhs: f64 = y.iter().zip(&r).map(|(a, b)| a * b).sum();
        let gx = conv2d_input_grad(&r, &xs, &w, &ws, &g).unwrap();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let gw = conv2d_weight_grad(&r, &x, &xs, &ws, &g).unwrap();
        let rhs_w: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn downsample_and_upsample_sizes() {
        let g = ConvGeom {
            kernel: (1, 3),
            stride: (1, 2),
            dilation: (1, 1),
            padding: (0, 0),
        };
        assert_eq!(g.output_size(5, 201).unwrap(), (5, 100));
        assert_eq!(g.transposed_output_size(5, 100).unwrap(), (5, 201));
    }

    #[test]
    fn negative_output_size_is_an_error() {
        let g = ConvGeom {
            kernel: (3, 3),
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        };
        assert!(g.output_size(2, 5).is_err());
    }
}
