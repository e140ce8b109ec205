//! Raw slice kernels behind [`super::Tensor`] and the gradient tape.
//!
//! Every output element of [`gemm`] is accumulated from `+0.0` over the inner
//! index in ascending order, so results are bitwise identical to a naive
//! triple loop regardless of blocking.

/// Rows per register tile.
const MR: usize = 4;
/// Columns per register tile.
const NR: usize = 16;

/// `c[m×n] = a[m×k] · b[k×n]`, all row-major. `c` is overwritten.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }

    let n_main = n - n % NR;
    let panels = pack_panels(k, n, n_main, b);

    let m_main = m - m % MR;
    for i in (0..m_main).step_by(MR) {
        tile_rows::<MR>(i, k, n, n_main, a, b, &panels, c);
    }
    for i in m_main..m {
        tile_rows::<1>(i, k, n, n_main, a, b, &panels, c);
    }
}

/// Repacks the first `n_main` columns of `b` into contiguous `k × NR` panels.
fn pack_panels(k: usize, n: usize, n_main: usize, b: &[f64]) -> Vec<f64> {
    let mut packed = vec![0.0; k * n_main];
    for (panel, out) in packed.chunks_exact_mut(k * NR).enumerate() {
        let j = panel * NR;
        for p in 0..k {
            out[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j..p * n + j + NR]);
        }
    }
    packed
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile_rows<const R: usize>(
    i: usize,
    k: usize,
    n: usize,
    n_main: usize,
    a: &[f64],
    b: &[f64],
    panels: &[f64],
    c: &mut [f64],
) {
    let rows: [&[f64]; R] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    for (panel_idx, panel) in panels.chunks_exact(k * NR).enumerate() {
        let j = panel_idx * NR;
        let mut acc = [[0.0f64; NR]; R];
        for (p, brow) in panel.chunks_exact(NR).enumerate() {
            let brow: &[f64; NR] = brow.try_into().expect("panel row width");
            for r in 0..R {
                let av = rows[r][p];
                for q in 0..NR {
                    acc[r][q] += av * brow[q];
                }
            }
        }
        for r in 0..R {
            c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(&acc[r]);
        }
    }
    for j in n_main..n {
        for r in 0..R {
            let mut s = 0.0;
            for p in 0..k {
                s += rows[r][p] * b[p * n + j];
            }
            c[(i + r) * n + j] = s;
        }
    }
}

/// Transposes a row-major `rows × cols` matrix.
pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; a.len()];
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    out
}

/// Geometry of one 2-D convolution, batch included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Length of one unrolled receptive field (`C·kh·kw`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Number of output positions across the batch (`N·H'·W'`).
    pub fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unrolls receptive fields into a `positions × patch_len` matrix. Columns
/// run over (channel, kernel row, kernel column); padded taps are zero.
pub fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let mut out = vec![0.0; g.positions() * plen];
    let pad = g.padding as isize;
    let mut row = 0;
    for n in 0..g.batch {
        let xn = &x[n * g.in_channels * g.in_h * g.in_w..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut out[row * plen..(row + 1) * plen];
                let mut col = 0;
                for c in 0..g.in_channels {
                    let xc = &xn[c * g.in_h * g.in_w..];
                    for ky in 0..g.kernel_h {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        for kx in 0..g.kernel_w {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                dst[col] = xc[iy as usize * g.in_w + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(g: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let mut out = vec![0.0; g.batch * g.in_channels * g.in_h * g.in_w];
    let pad = g.padding as isize;
    let mut row = 0;
    for n in 0..g.batch {
        let base = n * g.in_channels * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * plen..(row + 1) * plen];
                let mut col = 0;
                for c in 0..g.in_channels {
                    let cbase = base + c * g.in_h * g.in_w;
                    for ky in 0..g.kernel_h {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        for kx in 0..g.kernel_w {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                out[cbase + iy as usize * g.in_w + ix as usize] += src[col];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// Reorders a `positions × K` matrix (N·H'·W' rows) into N×K×H'×W' layout.
pub fn positions_to_nchw(g: &ConvGeometry, pk: &[f64]) -> Vec<f64> {
    let hw = g.out_h * g.out_w;
    let k = g.out_channels;
    let mut out = vec![0.0; pk.len()];
    for n in 0..g.batch {
        for p in 0..hw {
            let src = &pk[(n * hw + p) * k..(n * hw + p + 1) * k];
            for (ch, v) in src.iter().enumerate() {
                out[(n * k + ch) * hw + p] = *v;
            }
        }
    }
    out
}

/// Inverse of [`positions_to_nchw`].
pub fn nchw_to_positions(g: &ConvGeometry, nchw: &[f64]) -> Vec<f64> {
    let hw = g.out_h * g.out_w;
    let k = g.out_channels;
    let mut out = vec![0.0; nchw.len()];
    for n in 0..g.batch {
        for ch in 0..k {
            let src = &nchw[(n * k + ch) * hw..(n * k + ch + 1) * hw];
            for (p, v) in src.iter().enumerate() {
                out[(n * hw + p) * k + ch] = *v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_across_tile_edges() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 17), (9, 33, 40), (4, 16, 16), (3, 0, 2), (13, 5, 31)] {
            let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
            let mut c = vec![f64::NAN; m * n];
            gemm(m, k, n, &a, &b, &mut c);
            assert_eq!(c, naive(m, k, n, &a, &b), "m={m} k={k} n={n}");
        }
    }

    #[test]
    fn transpose_round_trip() {
        let a: Vec<f64> = (0..35).map(f64::from).collect();
        let t = transpose(5, 7, &a);
        assert_eq!(t[1], 7.0);
        assert_eq!(transpose(7, 5, &t), a);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 2,
            in_h: 5,
            in_w: 4,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 2,
            stride: 2,
            padding: 1,
            out_h: 3,
            out_w: 3,
        };
        let x: Vec<f64> = (0..80).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.positions() * g.patch_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&g, &x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&g, &y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
