//! Raw numeric kernels shared by the differentiable graph and the explicit
//! runtime layers. All tensors are NCHW row-major.

/// Geometry of a 2-D convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Rows of the column matrix: `C * k * k`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: `B * Ho * Wo`.
    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds `x` into a `[C*k*k, B*Ho*Wo]` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    let k = g.kernel;
    for c in 0..g.channels {
        for m in 0..k {
            for n in 0..k {
                let row = (c * k + m) * k + n;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for i in 0..ho {
                        let yi = (i * g.stride + m) as isize - g.padding as isize;
                        if yi < 0 || yi >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[yi as usize * g.width..][..g.width];
                        let base = b * ho * wo + i * wo;
                        for j in 0..wo {
                            let xj = (j * g.stride + n) as isize - g.padding as isize;
                            if xj >= 0 && xj < g.width as isize {
                                dst[base + j] = src_row[xj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: folds a column matrix back, summing overlaps.
pub fn col2im(cols_data: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = g.col_cols();
    let mut out = vec![0.0; g.input_len()];
    let k = g.kernel;
    for c in 0..g.channels {
        for m in 0..k {
            for n in 0..k {
                let row = (c * k + m) * k + n;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let off = (b * g.channels + c) * g.height * g.width;
                    for i in 0..ho {
                        let yi = (i * g.stride + m) as isize - g.padding as isize;
                        if yi < 0 || yi >= g.height as isize {
                            continue;
                        }
                        let base = b * ho * wo + i * wo;
                        for j in 0..wo {
                            let xj = (j * g.stride + n) as isize - g.padding as isize;
                            if xj >= 0 && xj < g.width as isize {
                                out[off + yi as usize * g.width + xj as usize] += src[base + j];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Geometry of a max-pool over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.height - self.window) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.window) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.channels * self.out_h() * self.out_w()
    }
}

/// Max-pool returning outputs and the flat input index of each maximum.
/// Ties resolve to the smallest flat index.
pub fn max_pool(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.output_len());
    let mut idx = Vec::with_capacity(g.output_len());
    for plane in 0..g.batch * g.channels {
        let off = plane * g.height * g.width;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for m in 0..g.window {
                    for n in 0..g.window {
                        let p = off + (i * g.stride + m) * g.width + j * g.stride + n;
                        if best_i == usize::MAX || x[p] > best {
                            best = x[p];
                            best_i = p;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    (out, idx)
}

/// Routes output-shaped values to their argmax positions in an input-shaped buffer.
pub fn pool_scatter(gy: &[f64], idx: &[usize], input_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; input_len];
    for (&v, &p) in gy.iter().zip(idx) {
        out[p] += v;
    }
    out
}

/// Reads input-shaped values at the argmax positions.
pub fn pool_gather(g: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&p| g[p]).collect()
}
