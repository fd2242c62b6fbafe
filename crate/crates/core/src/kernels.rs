//! Shared numeric primitives.
//!
//! Every forward path in the crate, taped or plain, goes through these
//! functions. That is a correctness invariant, not a convenience: message
//! generation replays the listening model outside the tape, and its scores
//! must match the taped training forward bit for bit. Keeping a single
//! kernel per operation (with a fixed accumulation order) is what makes
//! that equality hold.
//!
//! Conventions: forward kernels overwrite their output slice; backward
//! kernels accumulate (`+=`) into gradient slices. Matrix data is row-major.

/// out = a @ b, a: [m,k], b: [k,n]. Accumulates along k in ascending order
/// for every output element, so a single row computed alone is bit-identical
/// to the same row inside a larger batch.
pub fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
}

/// out = x @ w + bias (bias broadcast over rows), x: [m,k], w: [k,n].
pub fn affine(x: &[f32], w: &[f32], bias: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    matmul(x, w, out, m, k, n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (o, &b) in orow.iter_mut().zip(bias.iter()) {
            *o += b;
        }
    }
}

/// out += a @ b^T, a: [m,k], b: [n,k]. Used for d_x = d_out @ w^T.
pub fn matmul_nt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            orow[j] += acc;
        }
    }
}

/// out += a^T @ b, a: [m,k], b: [m,n], out: [k,n]. Used for d_w = x^T @ d_out.
pub fn matmul_tn_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
}

/// Column sums of g: [m,n] accumulated into out: [n]. Used for bias grads.
pub fn colsum_acc(g: &[f32], out: &mut [f32], m: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (o, &gv) in out.iter_mut().zip(grow.iter()) {
            *o += gv;
        }
    }
}

/// Output spatial extent of a valid convolution: floor((extent - 3) / stride) + 1.
pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent - 3) / stride + 1
}

/// Valid 3x3 convolution over one image. input: [h,w,c] row-major,
/// kernels: [kf,3,3,c], out: [oh,ow,kf]. No bias.
pub fn conv2d_valid_single(
    input: &[f32],
    kernels: &[f32],
    out: &mut [f32],
    h: usize,
    w: usize,
    c: usize,
    kf: usize,
    stride: usize,
) {
    let oh = conv_out_extent(h, stride);
    let ow = conv_out_extent(w, stride);
    debug_assert_eq!(input.len(), h * w * c);
    debug_assert_eq!(kernels.len(), kf * 9 * c);
    debug_assert_eq!(out.len(), oh * ow * kf);
    for oy in 0..oh {
        let iy = oy * stride;
        for ox in 0..ow {
            let ix = ox * stride;
            let orow = &mut out[(oy * ow + ox) * kf..(oy * ow + ox + 1) * kf];
            for (f, o) in orow.iter_mut().enumerate() {
                let ker = &kernels[f * 9 * c..(f + 1) * 9 * c];
                let mut acc = 0.0f32;
                for ky in 0..3 {
                    let irow = &input[((iy + ky) * w + ix) * c..((iy + ky) * w + ix + 3) * c];
                    let krow = &ker[ky * 3 * c..(ky + 1) * 3 * c];
                    for (&iv, &kv) in irow.iter().zip(krow.iter()) {
                        acc += iv * kv;
                    }
                }
                *o = acc;
            }
        }
    }
}

/// Backward of [`conv2d_valid_single`]: accumulates into d_input and d_kernels.
pub fn conv2d_valid_single_backward(
    input: &[f32],
    kernels: &[f32],
    d_out: &[f32],
    d_input: &mut [f32],
    d_kernels: &mut [f32],
    h: usize,
    w: usize,
    c: usize,
    kf: usize,
    stride: usize,
) {
    let oh = conv_out_extent(h, stride);
    let ow = conv_out_extent(w, stride);
    for oy in 0..oh {
        let iy = oy * stride;
        for ox in 0..ow {
            let ix = ox * stride;
            let grow = &d_out[(oy * ow + ox) * kf..(oy * ow + ox + 1) * kf];
            for (f, &g) in grow.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let ker = &kernels[f * 9 * c..(f + 1) * 9 * c];
                let dker = &mut d_kernels[f * 9 * c..(f + 1) * 9 * c];
                for ky in 0..3 {
                    let ibase = ((iy + ky) * w + ix) * c;
                    let kbase = ky * 3 * c;
                    let irow = &input[ibase..ibase + 3 * c];
                    for t in 0..3 * c {
                        dker[kbase + t] += g * irow[t];
                    }
                    let dirow = &mut d_input[ibase..ibase + 3 * c];
                    let krow = &ker[kbase..kbase + 3 * c];
                    for (di, &kv) in dirow.iter_mut().zip(krow.iter()) {
                        *di += g * kv;
                    }
                }
            }
        }
    }
}

/// Per-feature mean and biased variance over rows. x: [rows, feat].
/// Accumulates in f64 so large row counts keep ~1e-7 relative accuracy.
pub fn feature_stats(x: &[f32], rows: usize, feat: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0.0f64; feat];
    let mut sumsq = vec![0.0f64; feat];
    for r in 0..rows {
        let row = &x[r * feat..(r + 1) * feat];
        for f in 0..feat {
            let v = row[f] as f64;
            sum[f] += v;
            sumsq[f] += v * v;
        }
    }
    let n = rows as f64;
    let mean: Vec<f32> = sum.iter().map(|&s| (s / n) as f32).collect();
    let var: Vec<f32> = sumsq
        .iter()
        .zip(sum.iter())
        .map(|(&sq, &s)| {
            let m = s / n;
            ((sq / n - m * m).max(0.0)) as f32
        })
        .collect();
    (mean, var)
}

/// out = (x - mean) * invstd * gamma + beta, feature-wise over rows.
pub fn bn_apply(
    x: &[f32],
    mean: &[f32],
    invstd: &[f32],
    gamma: &[f32],
    beta: &[f32],
    out: &mut [f32],
    rows: usize,
    feat: usize,
) {
    for r in 0..rows {
        let xrow = &x[r * feat..(r + 1) * feat];
        let orow = &mut out[r * feat..(r + 1) * feat];
        for f in 0..feat {
            orow[f] = (xrow[f] - mean[f]) * invstd[f] * gamma[f] + beta[f];
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Derivative factor s*(1-s) with s clamped away from the exact endpoints.
/// At f32 saturation sigmoid rounds to 0.0 or 1.0 exactly; the clamp keeps a
/// vanishing but nonzero slope so a following clamped-log loss telescopes to
/// the numerically stable (p - y) form instead of 0 * inf.
pub fn sigmoid_slope(s: f32) -> f32 {
    let sc = s.clamp(1e-7, 1.0 - 1e-7);
    sc * (1.0 - sc)
}

pub fn map_sigmoid(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = sigmoid(v);
    }
}

pub fn map_tanh(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = v.tanh();
    }
}

pub fn map_relu(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = if v > 0.0 { v } else { 0.0 };
    }
}

pub fn mul(a: &[f32], b: &[f32], out: &mut [f32]) {
    for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
        *o = x * y;
    }
}

pub fn add(a: &[f32], b: &[f32], out: &mut [f32]) {
    for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
        *o = x + y;
    }
}

pub fn one_minus(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = 1.0 - v;
    }
}

pub const SCORE_EPS: f32 = 1e-7;

pub fn clamp_score(p: f32) -> f32 {
    p.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        // x @ I = x for a 2x2 identity.
        let x = [1.0, 2.0, 3.0, 4.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        let mut out = [0.0f32; 4];
        matmul(&x, &eye, &mut out, 2, 2, 2);
        assert_eq!(out, x);
    }

    #[test]
    fn matmul_rows_match_single_row() {
        // Row r of a batched product is bit-identical to multiplying that row alone.
        let a: Vec<f32> = (0..12).map(|i| (i as f32) * 0.37 - 1.0).collect();
        let b: Vec<f32> = (0..20).map(|i| (i as f32) * 0.11 - 0.9).collect();
        let mut full = vec![0.0f32; 3 * 5];
        matmul(&a, &b, &mut full, 3, 4, 5);
        for r in 0..3 {
            let mut row = vec![0.0f32; 5];
            matmul(&a[r * 4..(r + 1) * 4], &b, &mut row, 1, 4, 5);
            assert_eq!(&full[r * 5..(r + 1) * 5], &row[..]);
        }
    }

    #[test]
    fn conv_all_ones_sums_window() {
        // 3x3 input of ones, one all-ones 3x3 kernel, stride 1: output is 9.
        let input = vec![1.0f32; 9];
        let kernels = vec![1.0f32; 9];
        let mut out = vec![0.0f32; 1];
        conv2d_valid_single(&input, &kernels, &mut out, 3, 3, 1, 1, 1);
        assert_eq!(out[0], 9.0);
    }

    #[test]
    fn conv_extent_formula() {
        assert_eq!(conv_out_extent(128, 2), 63);
        assert_eq!(conv_out_extent(63, 1), 61);
        assert_eq!(conv_out_extent(11, 2), 5);
        assert_eq!(conv_out_extent(3, 1), 1);
        assert_eq!(conv_out_extent(3, 7), 1);
    }

    #[test]
    fn feature_stats_centered() {
        let x = [1.0, 10.0, 3.0, 20.0]; // rows (1,10),(3,20)
        let (mean, var) = feature_stats(&x, 2, 2);
        assert_eq!(mean, vec![2.0, 15.0]);
        assert_eq!(var, vec![1.0, 25.0]);
    }

    #[test]
    fn sigmoid_midpoint() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(30.0) > 0.999_999);
        assert!(sigmoid(-30.0) < 1e-6);
    }
}
