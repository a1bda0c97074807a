//! Per-utterance compute kernels shared by the training graph and the streaming runtime.
//!
//! Every output element accumulates its terms in a fixed order (bias, then kernel tap,
//! then input channel), independent of how many frames are processed per call. Offline
//! and streaming execution therefore produce bit-identical results.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Shape of a causal 1-D convolution. Weights are laid out `[kernel][in_channels / groups][out_channels]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, in_channels: usize, out_channels: usize, dilation: usize, groups: usize) -> Result<Self> {
        let g = Self {
            kernel,
            in_channels,
            out_channels,
            dilation,
            groups,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn depthwise(kernel: usize, channels: usize, dilation: usize) -> Result<Self> {
        Self::new(kernel, channels, channels, dilation, channels)
    }

    pub fn pointwise(in_channels: usize, out_channels: usize, groups: usize) -> Result<Self> {
        Self::new(1, in_channels, out_channels, 1, groups)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.dilation == 0 || self.groups == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig(format!("conv extents must be >= 1: {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::InvalidConfig(format!(
                "groups {} must divide channels {} -> {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Past frames this layer needs besides the current one.
    pub fn context(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.kernel, self.in_per_group(), self.out_channels]
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.in_channels == self.out_channels
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yo, &xv) in y.iter_mut().zip(x) {
        *yo += a * xv;
    }
}

fn init_row<T: Real>(row: &mut [T], bias: Option<&[T]>) {
    match bias {
        Some(b) => row.copy_from_slice(b),
        None => row.fill(T::zero()),
    }
}

/// `y[r] = bias + x[r] W` for every row; `w` is `[din x dout]`.
pub fn linear_rows<T: Real>(x: &[T], din: usize, w: &[T], dout: usize, bias: Option<&[T]>, y: &mut [T]) {
    for (xr, yr) in x.chunks_exact(din).zip(y.chunks_exact_mut(dout)) {
        init_row(yr, bias);
        for (k, &xv) in xr.iter().enumerate() {
            if xv != T::zero() {
                axpy(yr, xv, &w[k * dout..(k + 1) * dout]);
            }
        }
    }
}

/// Transposes a `[rows x cols]` matrix.
pub fn transpose<T: Real>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// Accumulates linear-layer gradients for a block of rows. `wt` is `w` transposed (`[dout x din]`).
#[allow(clippy::too_many_arguments)]
pub fn linear_rows_backward<T: Real>(
    x: &[T],
    dy: &[T],
    din: usize,
    wt: &[T],
    dout: usize,
    mut dx: Option<&mut [T]>,
    dw: &mut [T],
    mut db: Option<&mut [T]>,
) {
    for (r, (xr, dyr)) in x.chunks_exact(din).zip(dy.chunks_exact(dout)).enumerate() {
        if dyr.iter().all(|&v| v == T::zero()) {
            continue;
        }
        if let Some(db) = db.as_deref_mut() {
            axpy(db, T::one(), dyr);
        }
        for (k, &xv) in xr.iter().enumerate() {
            if xv != T::zero() {
                axpy(&mut dw[k * dout..(k + 1) * dout], xv, dyr);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxr = &mut dx[r * din..(r + 1) * din];
            for (j, &g) in dyr.iter().enumerate() {
                if g != T::zero() {
                    axpy(dxr, g, &wt[j * din..(j + 1) * din]);
                }
            }
        }
    }
}

/// Causal convolution over `frames` input rows (`x` is `[frames x in_channels]`), writing
/// output rows `first..frames` into `y`. Input frames before row 0 count as zero.
pub fn conv_rows<T: Real>(g: &ConvGeometry, x: &[T], frames: usize, w: &[T], bias: Option<&[T]>, first: usize, y: &mut [T]) {
    let (cin, cout) = (g.in_channels, g.out_channels);
    let (cpi, cpo) = (g.in_per_group(), g.out_per_group());
    for t in first..frames {
        let yr = &mut y[(t - first) * cout..(t - first + 1) * cout];
        init_row(yr, bias);
        for k in 0..g.kernel {
            let back = (g.kernel - 1 - k) * g.dilation;
            if back > t {
                continue;
            }
            let xr = &x[(t - back) * cin..(t - back + 1) * cin];
            if g.is_depthwise() {
                for ((yo, &xv), &wv) in yr.iter_mut().zip(xr).zip(&w[k * cout..(k + 1) * cout]) {
                    *yo += xv * wv;
                }
                continue;
            }
            for grp in 0..g.groups {
                let ys = &mut yr[grp * cpo..(grp + 1) * cpo];
                for cl in 0..cpi {
                    let xv = xr[grp * cpi + cl];
                    if xv != T::zero() {
                        let at = (k * cpi + cl) * cout + grp * cpo;
                        axpy(ys, xv, &w[at..at + cpo]);
                    }
                }
            }
        }
    }
}

/// Weight re-laid out as `[kernel][out_channels][in_per_group]` for the input-gradient pass.
pub fn conv_weight_transposed<T: Real>(g: &ConvGeometry, w: &[T]) -> Vec<T> {
    let (cpi, cout) = (g.in_per_group(), g.out_channels);
    let mut out = vec![T::zero(); w.len()];
    for k in 0..g.kernel {
        for cl in 0..cpi {
            for o in 0..cout {
                out[(k * cout + o) * cpi + cl] = w[(k * cpi + cl) * cout + o];
            }
        }
    }
    out
}

/// Accumulates convolution gradients for one utterance of `frames` rows.
#[allow(clippy::too_many_arguments)]
pub fn conv_rows_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    dy: &[T],
    frames: usize,
    w: &[T],
    wt: &[T],
    mut dx: Option<&mut [T]>,
    dw: &mut [T],
    mut db: Option<&mut [T]>,
) {
    let (cin, cout) = (g.in_channels, g.out_channels);
    let (cpi, cpo) = (g.in_per_group(), g.out_per_group());
    for t in 0..frames {
        let dyr = &dy[t * cout..(t + 1) * cout];
        if dyr.iter().all(|&v| v == T::zero()) {
            continue;
        }
        if let Some(db) = db.as_deref_mut() {
            axpy(db, T::one(), dyr);
        }
        for k in 0..g.kernel {
            let back = (g.kernel - 1 - k) * g.dilation;
            if back > t {
                continue;
            }
            let tau = t - back;
            let xr = &x[tau * cin..(tau + 1) * cin];
            if g.is_depthwise() {
                let wk = &w[k * cout..(k + 1) * cout];
                let dwk = &mut dw[k * cout..(k + 1) * cout];
                for ((d, &xv), &gv) in dwk.iter_mut().zip(xr).zip(dyr) {
                    *d += xv * gv;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let dxr = &mut dx[tau * cin..(tau + 1) * cin];
                    for ((d, &wv), &gv) in dxr.iter_mut().zip(wk).zip(dyr) {
                        *d += gv * wv;
                    }
                }
                continue;
            }
            for grp in 0..g.groups {
                let dys = &dyr[grp * cpo..(grp + 1) * cpo];
                for cl in 0..cpi {
                    let xv = xr[grp * cpi + cl];
                    if xv != T::zero() {
                        let at = (k * cpi + cl) * cout + grp * cpo;
                        axpy(&mut dw[at..at + cpo], xv, dys);
                    }
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let dxs = &mut dx[tau * cin + grp * cpi..tau * cin + (grp + 1) * cpi];
                    for (ol, &gv) in dys.iter().enumerate() {
                        if gv != T::zero() {
                            let o = grp * cpo + ol;
                            let at = (k * cout + o) * cpi;
                            axpy(dxs, gv, &wt[at..at + cpi]);
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
