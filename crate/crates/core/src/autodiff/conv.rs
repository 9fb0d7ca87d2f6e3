//! Zero-padded cross-correlation over 2D or 3D channel-first tensors.
//!
//! 2D inputs are treated as 3D volumes of depth one with a depth-one kernel,
//! so a single loop nest serves both cases.

use crate::error::{Error, Result};

/// Resolved geometry of one convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    pub stride: usize,
}

impl ConvGeom {
    /// `input_shape` is `[cin, spatial...]`, `weight_shape` is
    /// `[cout, cin, k...]` with one odd `k` per spatial axis.
    pub fn new(input_shape: &[usize], weight_shape: &[usize], stride: usize) -> Result<Self> {
        let nd = input_shape.len().saturating_sub(1);
        if !(2..=3).contains(&nd) {
            return Err(Error::ShapeMismatch(format!(
                "conv input must be [C, 2 or 3 spatial], got {input_shape:?}"
            )));
        }
        if weight_shape.len() != nd + 2 {
            return Err(Error::ShapeMismatch(format!(
                "conv weight {weight_shape:?} does not match {nd}D input"
            )));
        }
        if weight_shape[1] != input_shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "conv weight expects {} input channels, input has {}",
                weight_shape[1], input_shape[0]
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!(
                "conv stride must be 1 or 2, got {stride}"
            )));
        }
        let mut in_dims = [1; 3];
        let mut kernel = [1; 3];
        in_dims[3 - nd..].copy_from_slice(&input_shape[1..]);
        kernel[3 - nd..].copy_from_slice(&weight_shape[2..]);
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "conv kernel must be odd-sized, got {:?}",
                &weight_shape[2..]
            )));
        }
        let pad = kernel.map(|k| k / 2);
        let mut out_dims = [1; 3];
        for a in 0..3 {
            let s = if in_dims[a] == 1 && kernel[a] == 1 {
                1
            } else {
                stride
            };
            out_dims[a] = (in_dims[a] + 2 * pad[a] - kernel[a]) / s + 1;
        }
        Ok(Self {
            cin: input_shape[0],
            cout: weight_shape[0],
            in_dims,
            out_dims,
            kernel,
            pad,
            stride,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    fn axis_stride(&self, a: usize) -> usize {
        if self.in_dims[a] == 1 && self.kernel[a] == 1 {
            1
        } else {
            self.stride
        }
    }

    /// Output index range `[lo, hi)` along axis `a` for kernel offset `k` such
    /// that the input index `o * s + k - pad` stays inside the input.
    fn valid_range(&self, a: usize, k: usize) -> (usize, usize) {
        let s = self.axis_stride(a) as isize;
        let shift = k as isize - self.pad[a] as isize;
        let lo = if shift < 0 { (-shift + s - 1) / s } else { 0 };
        let hi = ((self.in_dims[a] as isize - 1 - shift).div_euclid(s) + 1)
            .min(self.out_dims[a] as isize);
        (lo.max(0) as usize, hi.max(0) as usize)
    }

    /// Calls `f(out_row_offset, in_row_offset, x_lo, x_hi, x_shift)` for every
    /// valid output row at kernel offset `(kz, ky, kx)`.
    fn for_rows(
        &self,
        kz: usize,
        ky: usize,
        kx: usize,
        mut f: impl FnMut(usize, usize, usize, usize, isize),
    ) {
        let (zlo, zhi) = self.valid_range(0, kz);
        let (ylo, yhi) = self.valid_range(1, ky);
        let (xlo, xhi) = self.valid_range(2, kx);
        if xlo >= xhi {
            return;
        }
        let sz = self.axis_stride(0);
        let sy = self.axis_stride(1);
        let shift_x = kx as isize - self.pad[2] as isize;
        for oz in zlo..zhi {
            let iz = (oz * sz + kz) - self.pad[0];
            for oy in ylo..yhi {
                let iy = (oy * sy + ky) - self.pad[1];
                let orow = (oz * self.out_dims[1] + oy) * self.out_dims[2];
                let irow = (iz * self.in_dims[1] + iy) * self.in_dims[2];
                f(orow, irow, xlo, xhi, shift_x);
            }
        }
    }
}

pub fn conv_forward(input: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (isz, osz, ksz) = (g.in_len(), g.out_len(), g.kernel_len());
    let sx = g.axis_stride(2);
    let mut out = vec![0.0; g.cout * osz];
    for oc in 0..g.cout {
        let out_c = &mut out[oc * osz..(oc + 1) * osz];
        out_c.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..g.cin {
            let in_c = &input[ic * isz..(ic + 1) * isz];
            let w_base = (oc * g.cin + ic) * ksz;
            for kz in 0..g.kernel[0] {
                for ky in 0..g.kernel[1] {
                    for kx in 0..g.kernel[2] {
                        let w = weight[w_base + (kz * g.kernel[1] + ky) * g.kernel[2] + kx];
                        g.for_rows(kz, ky, kx, |orow, irow, lo, hi, shift| {
                            let o = &mut out_c[orow + lo..orow + hi];
                            if sx == 1 {
                                let start = (irow as isize + lo as isize + shift) as usize;
                                let i = &in_c[start..start + (hi - lo)];
                                o.iter_mut().zip(i).for_each(|(ov, iv)| *ov += w * iv);
                            } else {
                                for (j, ov) in o.iter_mut().enumerate() {
                                    let ix = ((lo + j) * sx) as isize + shift;
                                    *ov += w * in_c[irow + ix as usize];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

pub fn conv_backward(
    input: &[f64],
    weight: &[f64],
    g_out: &[f64],
    g: &ConvGeom,
    mut g_in: Option<&mut [f64]>,
    mut g_w: Option<&mut [f64]>,
    g_b: Option<&mut [f64]>,
) {
    let (isz, osz, ksz) = (g.in_len(), g.out_len(), g.kernel_len());
    let sx = g.axis_stride(2);
    if let Some(gb) = g_b {
        for oc in 0..g.cout {
            gb[oc] += g_out[oc * osz..(oc + 1) * osz].iter().sum::<f64>();
        }
    }
    for oc in 0..g.cout {
        let go_c = &g_out[oc * osz..(oc + 1) * osz];
        for ic in 0..g.cin {
            let in_c = &input[ic * isz..(ic + 1) * isz];
            let w_base = (oc * g.cin + ic) * ksz;
            for kz in 0..g.kernel[0] {
                for ky in 0..g.kernel[1] {
                    for kx in 0..g.kernel[2] {
                        let wi = w_base + (kz * g.kernel[1] + ky) * g.kernel[2] + kx;
                        let w = weight[wi];
                        let mut acc_w = 0.0;
                        let mut gi = g_in
                            .as_deref_mut()
                            .map(|s| &mut s[ic * isz..(ic + 1) * isz]);
                        g.for_rows(kz, ky, kx, |orow, irow, lo, hi, shift| {
                            let go = &go_c[orow + lo..orow + hi];
                            if sx == 1 {
                                let start = (irow as isize + lo as isize + shift) as usize;
                                let i = &in_c[start..start + (hi - lo)];
                                acc_w += go.iter().zip(i).map(|(a, b)| a * b).sum::<f64>();
                                if let Some(gi) = gi.as_deref_mut() {
                                    gi[start..start + (hi - lo)]
                                        .iter_mut()
                                        .zip(go)
                                        .for_each(|(d, o)| *d += w * o);
                                }
                            } else {
                                for (j, o) in go.iter().enumerate() {
                                    let ix =
                                        (irow as isize + ((lo + j) * sx) as isize + shift) as usize;
                                    acc_w += o * in_c[ix];
                                    if let Some(gi) = gi.as_deref_mut() {
                                        gi[ix] += w * o;
                                    }
                                }
                            }
                        });
                        if let Some(gw) = g_w.as_deref_mut() {
                            gw[wi] += acc_w;
                        }
                    }
                }
            }
        }
    }
}
