//! Inner loops for the dense ops. Written so the compiler can vectorize the
//! innermost axis; all loops visit elements in a fixed order so results are
//! bit-reproducible.

const MR: usize = 4;
const NR: usize = 8;

/// `out += a · b` with `a: m×k`, `b: k×n`, `out: m×n`.
///
/// Register-blocked over 4×8 output tiles; every output element still
/// accumulates its `k` products in index order.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let m_full = m - m % MR;
    let n_full = n - n % NR;
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for r in 0..MR {
                acc[r].copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..k {
                let bv: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                for r in 0..MR {
                    let av = a[(i0 + r) * k + p];
                    for c in 0..NR {
                        acc[r][c] += av * bv[c];
                    }
                }
            }
            for r in 0..MR {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(&acc[r]);
            }
        }
        for r in i0..i0 + MR {
            row_tail(a, b, out, r, k, n, n_full);
        }
    }
    for i in m_full..m {
        row_tail(a, b, out, i, k, n, 0);
    }
}

/// Columns `from..n` of output row `i` of [`matmul_acc`].
fn row_tail(a: &[f64], b: &[f64], out: &mut [f64], i: usize, k: usize, n: usize, from: usize) {
    if from == n {
        return;
    }
    let out_row = &mut out[i * n + from..(i + 1) * n];
    for p in 0..k {
        let aip = a[i * k + p];
        let b_row = &b[p * n + from..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += aip * bv;
        }
    }
}

/// `out += g · bᵀ` with `g: m×n`, `b: k×n`, `out: m×k`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    let k_full = k - k % 4;
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in (0..k_full).step_by(4) {
            let d = dot4(g_row, [
                &b[p * n..(p + 1) * n],
                &b[(p + 1) * n..(p + 2) * n],
                &b[(p + 2) * n..(p + 3) * n],
                &b[(p + 3) * n..(p + 4) * n],
            ]);
            for (q, v) in d.into_iter().enumerate() {
                out[i * k + p + q] += v;
            }
        }
        for p in k_full..k {
            out[i * k + p] += dot(g_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out += aᵀ · g` with `a: m×k`, `g: m×n`, `out: k×n`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let k_full = k - k % MR;
    let n_full = n - n % NR;
    for p0 in (0..k_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for r in 0..MR {
                acc[r].copy_from_slice(&out[(p0 + r) * n + j0..(p0 + r) * n + j0 + NR]);
            }
            for i in 0..m {
                let gv: &[f64; NR] = g[i * n + j0..i * n + j0 + NR].try_into().unwrap();
                for r in 0..MR {
                    let av = a[i * k + p0 + r];
                    for c in 0..NR {
                        acc[r][c] += av * gv[c];
                    }
                }
            }
            for r in 0..MR {
                out[(p0 + r) * n + j0..(p0 + r) * n + j0 + NR].copy_from_slice(&acc[r]);
            }
        }
    }
    // Remaining rows of `out` and the ragged column strip.
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let from = if p < k_full { n_full } else { 0 };
            if from == n {
                continue;
            }
            let aip = a[i * k + p];
            let out_row = &mut out[p * n + from..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(&g_row[from..]) {
                *o += aip * gv;
            }
        }
    }
}

/// Four dot products sharing the left operand; each matches [`dot`]
/// bit for bit.
fn dot4(a: &[f64], bs: [&[f64]; 4]) -> [f64; 4] {
    let mut acc = [[0.0f64; 4]; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        for (q, b) in bs.iter().enumerate() {
            acc[q][0] += a[i] * b[i];
            acc[q][1] += a[i + 1] * b[i + 1];
            acc[q][2] += a[i + 2] * b[i + 2];
            acc[q][3] += a[i + 3] * b[i + 3];
        }
    }
    let mut out = [0.0; 4];
    for (q, b) in bs.iter().enumerate() {
        let mut tail = 0.0;
        for i in chunks * 4..a.len() {
            tail += a[i] * b[i];
        }
        out[q] = (acc[q][0] + acc[q][1]) + (acc[q][2] + acc[q][3]) + tail;
    }
    out
}

/// Dot product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
