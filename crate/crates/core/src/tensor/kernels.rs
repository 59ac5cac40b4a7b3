// GEMM kernels. Every output element is reduced in a fixed order, so results
// do not depend on how callers batch rows.

const LANES: usize = 8;

/// Dot product with eight independent accumulators, folded in a fixed order.
#[inline]
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f32; LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = 0.0f32;
    for (a, b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

// Register-blocked tile sizes for `gemm_nn`.
const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Each output element starts from its current value and accumulates
/// `a[i,p]·b[p,j]` for `p = 0..k` in order.
pub fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + MR <= m {
        rows::<MR>(a, b, c, i, k, n);
        i += MR;
    }
    while i < m {
        rows::<1>(a, b, c, i, k, n);
        i += 1;
    }
}

#[inline(always)]
fn rows<const R: usize>(a: &[f32], b: &[f32], c: &mut [f32], i: usize, k: usize, n: usize) {
    let a_rows: [&[f32]; R] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    let mut j = 0;
    while j + NR <= n {
        let mut acc = [[0.0f32; NR]; R];
        for r in 0..R {
            acc[r].copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
        }
        for p in 0..k {
            let b_row: &[f32; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
            for r in 0..R {
                let av = a_rows[r][p];
                for l in 0..NR {
                    acc[r][l] += av * b_row[l];
                }
            }
        }
        for r in 0..R {
            c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(&acc[r]);
        }
        j += NR;
    }
    if j < n {
        let w = n - j;
        for r in 0..R {
            let mut acc = [0.0f32; NR];
            acc[..w].copy_from_slice(&c[(i + r) * n + j..(i + r + 1) * n]);
            for p in 0..k {
                let av = a_rows[r][p];
                let b_row = &b[p * n + j..(p + 1) * n];
                for l in 0..w {
                    acc[l] += av * b_row[l];
                }
            }
            c[(i + r) * n + j..(i + r + 1) * n].copy_from_slice(&acc[..w]);
        }
    }
}

fn transposed(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for (cidx, &v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            out[cidx * rows + r] = v;
        }
    }
    out
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    gemm_nn(a, &transposed(b, n, k), c, m, k, n);
}

/// `c[m×n] += a[r×m]ᵀ · b[r×n]`, reducing over the shared row index `r`.
pub fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], r: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), r * m);
    gemm_nn(&transposed(a, r, m), b, c, m, r, n);
}
