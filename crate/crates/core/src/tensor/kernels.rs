// Inner loops shared by the graph ops.
//
// Every dot product uses one canonical reduction: a single accumulator of
// four lanes (f64) or eight lanes (f32) over full blocks, a sequential tail,
// then a fixed pairwise combine of the lanes plus the tail. The blocked
// kernels keep that structure for every (row, column) pair, so a value never
// depends on which other rows were computed alongside it. On x86_64 with
// AVX2+FMA the accumulation is fused; the portable path keeps the same layout
// with separate multiply and add.

use super::Real;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    T::dot(a, b)
}

/// `y[r, o] = dot(x[r, ..], w[o, ..])` for `x` of shape `[m, k]` and `w` of
/// shape `[n, k]`; `y` is overwritten.
#[inline]
pub(crate) fn gemm_nt<T: Real>(x: &[T], w: &[T], m: usize, n: usize, k: usize, y: &mut [T]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(y.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    T::gemm_nt(x, w, m, n, k, y)
}

/// y += alpha * x
#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    T::axpy(alpha, x, y)
}

#[inline]
pub(crate) fn add_assign<T: Real>(y: &mut [T], x: &[T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + xi;
    }
}

pub(crate) fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// c[m×n] = a[m×k] · b[k×n]
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, k, n);
    let mut c = vec![T::zero(); m * n];
    gemm_nt(a, &bt, m, n, k, &mut c);
    c
}

/// y[rows×out] = x[rows×inp] · wᵀ (+ bias) where w is [out×inp].
pub(crate) fn linear_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    rows: usize,
    inp: usize,
    out: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out];
    gemm_nt(x, w, rows, out, inp, &mut y);
    if let Some(b) = bias {
        for yr in y.chunks_exact_mut(out) {
            add_assign(yr, b);
        }
    }
    y
}

/// dw[o, ..] += Σ_r coeff[r, o] · x[r, ..] for `coeff` of shape [rows×out]
/// and `x` of shape [rows×inp], i.e. `dw += coeffᵀ · x`. The sum over rows
/// is formed with the canonical dot, then added to `dw`.
pub(crate) fn outer_accumulate<T: Real>(
    coeff: &[T],
    x: &[T],
    dw: &mut [T],
    rows: usize,
    inp: usize,
    out: usize,
) {
    debug_assert_eq!(coeff.len(), rows * out);
    debug_assert_eq!(x.len(), rows * inp);
    debug_assert_eq!(dw.len(), out * inp);
    if rows == 0 {
        return;
    }
    let ct = transpose(coeff, rows, out);
    let xt = transpose(x, rows, inp);
    let mut sum = vec![T::zero(); out * inp];
    gemm_nt(&ct, &xt, out, inp, rows, &mut sum);
    add_assign(dw, &sum);
}

/// Pointwise activations over slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

#[inline]
pub(crate) fn activate<T: Real>(act: Activation, x: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    T::activate(act, x, out)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::lit(act::sigmoid(x.as_f64()))
}

// exp, sigmoid and tanh built only from IEEE add/mul/div and bit operations,
// so the vectorized loops reproduce the scalar results bit for bit. Relative
// error against libm is a few ulp.
pub(crate) mod act {
    use super::Activation;

    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    // round-to-nearest shifter; the low mantissa bits of x + SHIFT hold x
    const SHIFT: f64 = 6_755_399_441_055_744.0;

    const INV_FACT: [f64; 20] = {
        let mut c = [1.0f64; 20];
        let mut n = 1;
        while n < 20 {
            c[n] = c[n - 1] / n as f64;
            n += 1;
        }
        c
    };

    #[inline(always)]
    pub(crate) fn exp(x: f64) -> f64 {
        let xc = x.clamp(-708.0, 709.0);
        let t = xc * LOG2E + SHIFT;
        let n = t - SHIFT;
        let r = (xc - n * LN2_HI) - n * LN2_LO;
        let mut p = INV_FACT[13];
        for k in (0..13).rev() {
            p = p * r + INV_FACT[k];
        }
        let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
        if x.is_nan() {
            x
        } else {
            p * scale
        }
    }

    #[inline(always)]
    pub(crate) fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + exp(-x))
    }

    #[inline(always)]
    pub(crate) fn tanh(x: f64) -> f64 {
        let a = x.abs();
        let y = 2.0 * a;
        // small |x|: expm1(y) from its series, no cancellation
        let mut q = INV_FACT[19];
        for k in (0..18).rev() {
            q = q * y + INV_FACT[k + 1];
        }
        let em = y * q;
        let small = em / (em + 2.0);
        let e = exp(-y);
        let big = (1.0 - e) / (1.0 + e);
        let t = if a < 0.55 { small } else { big };
        t.copysign(x)
    }

    #[inline(always)]
    fn apply(act: Activation, x: &[f64], out: &mut [f64]) {
        match act {
            Activation::Sigmoid => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = sigmoid(v);
                }
            }
            Activation::Tanh => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = tanh(v);
                }
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn apply_avx(act: Activation, x: &[f64], out: &mut [f64]) {
        apply(act, x, out)
    }

    pub(crate) fn apply_f64(act: Activation, x: &[f64], out: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if super::has_fma() {
            // SAFETY: avx2 and fma were detected at runtime.
            return unsafe { apply_avx(act, x, out) };
        }
        apply(act, x, out)
    }

    pub(crate) fn apply_f32(act: Activation, x: &[f32], out: &mut [f32]) {
        let f = match act {
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => tanh,
        };
        for (o, &v) in out.iter_mut().zip(x) {
            *o = f(v as f64) as f32;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[inline]
fn has_fma() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

macro_rules! portable_kernels {
    ($t:ty, $w:expr) => {
        const W: usize = $w;

        #[inline(always)]
        fn combine(acc: [$t; W], tail: $t) -> $t {
            let mut lanes = acc;
            let mut width = W;
            while width > 1 {
                width /= 2;
                for l in 0..width {
                    lanes[l] = lanes[l] + lanes[l + width];
                }
            }
            lanes[0] + tail
        }

        pub(super) fn dot(a: &[$t], b: &[$t]) -> $t {
            let mut acc = [0.0 as $t; W];
            let blocks = a.len() / W;
            for blk in 0..blocks {
                let o = blk * W;
                for l in 0..W {
                    acc[l] += a[o + l] * b[o + l];
                }
            }
            let mut tail = 0.0 as $t;
            for i in blocks * W..a.len() {
                tail += a[i] * b[i];
            }
            combine(acc, tail)
        }

        pub(super) fn gemm_nt(x: &[$t], w: &[$t], m: usize, n: usize, k: usize, y: &mut [$t]) {
            for r in 0..m {
                for o in 0..n {
                    y[r * n + o] = dot(&x[r * k..(r + 1) * k], &w[o * k..(o + 1) * k]);
                }
            }
        }

        pub(super) fn axpy(alpha: $t, x: &[$t], y: &mut [$t]) {
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi += alpha * xi;
            }
        }
    };
}

macro_rules! dispatch {
    ($name:ident ( $($arg:ident : $ty:ty),* ) $(-> $ret:ty)?) => {
        #[inline]
        pub(crate) fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            if super::has_fma() {
                // SAFETY: avx2 and fma were detected at runtime.
                return unsafe { avx::$name($($arg),*) };
            }
            portable::$name($($arg),*)
        }
    };
}

pub(crate) mod f64k {
    mod portable {
        portable_kernels!(f64, 4);
    }

    #[cfg(target_arch = "x86_64")]
    mod avx {
        use std::arch::x86_64::*;

        #[inline]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn combine(acc: __m256d, tail: f64) -> f64 {
            let mut l = [0.0f64; 4];
            _mm256_storeu_pd(l.as_mut_ptr(), acc);
            ((l[0] + l[2]) + (l[1] + l[3])) + tail
        }

        #[target_feature(enable = "avx2,fma")]
        pub(super) unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
            let n = a.len();
            let blocks = n / 4;
            let (pa, pb) = (a.as_ptr(), b.as_ptr());
            let mut acc = _mm256_setzero_pd();
            for blk in 0..blocks {
                let o = blk * 4;
                acc = _mm256_fmadd_pd(_mm256_loadu_pd(pa.add(o)), _mm256_loadu_pd(pb.add(o)), acc);
            }
            let mut tail = 0.0f64;
            for i in blocks * 4..n {
                tail = a[i].mul_add(b[i], tail);
            }
            combine(acc, tail)
        }

        // MR rows of x against NR rows of w, one accumulator per pair.
        #[inline]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn micro<const MR: usize, const NR: usize>(
            x: *const f64,
            w: *const f64,
            k: usize,
            y: *mut f64,
            ldy: usize,
        ) {
            let mut acc = [[_mm256_setzero_pd(); NR]; MR];
            let blocks = k / 4;
            for blk in 0..blocks {
                let off = blk * 4;
                let mut xv = [_mm256_setzero_pd(); MR];
                for (r, v) in xv.iter_mut().enumerate() {
                    *v = _mm256_loadu_pd(x.add(r * k + off));
                }
                for o in 0..NR {
                    let wv = _mm256_loadu_pd(w.add(o * k + off));
                    for r in 0..MR {
                        acc[r][o] = _mm256_fmadd_pd(xv[r], wv, acc[r][o]);
                    }
                }
            }
            for r in 0..MR {
                for o in 0..NR {
                    let mut tail = 0.0f64;
                    for i in blocks * 4..k {
                        tail = (*x.add(r * k + i)).mul_add(*w.add(o * k + i), tail);
                    }
                    *y.add(r * ldy + o) = combine(acc[r][o], tail);
                }
            }
        }

        #[target_feature(enable = "avx2,fma")]
        pub(super) unsafe fn gemm_nt(
            x: &[f64],
            w: &[f64],
            m: usize,
            n: usize,
            k: usize,
            y: &mut [f64],
        ) {
            let (px, pw, py) = (x.as_ptr(), w.as_ptr(), y.as_mut_ptr());
            let mut r = 0;
            while r < m {
                let mr = (m - r).min(3);
                let mut o = 0;
                while o < n {
                    let nr = (n - o).min(4);
                    let (xs, ws, ys) = (px.add(r * k), pw.add(o * k), py.add(r * n + o));
                    match (mr, nr) {
                        (3, 4) => micro::<3, 4>(xs, ws, k, ys, n),
                        (3, 3) => micro::<3, 3>(xs, ws, k, ys, n),
                        (3, 2) => micro::<3, 2>(xs, ws, k, ys, n),
                        (3, 1) => micro::<3, 1>(xs, ws, k, ys, n),
                        (2, 4) => micro::<2, 4>(xs, ws, k, ys, n),
                        (2, 3) => micro::<2, 3>(xs, ws, k, ys, n),
                        (2, 2) => micro::<2, 2>(xs, ws, k, ys, n),
                        (2, 1) => micro::<2, 1>(xs, ws, k, ys, n),
                        (1, 4) => micro::<1, 4>(xs, ws, k, ys, n),
                        (1, 3) => micro::<1, 3>(xs, ws, k, ys, n),
                        (1, 2) => micro::<1, 2>(xs, ws, k, ys, n),
                        _ => micro::<1, 1>(xs, ws, k, ys, n),
                    }
                    o += nr;
                }
                r += mr;
            }
        }

        #[target_feature(enable = "avx2,fma")]
        pub(super) unsafe fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
            let n = x.len();
            let blocks = n / 4;
            let va = _mm256_set1_pd(alpha);
            let (px, py) = (x.as_ptr(), y.as_mut_ptr());
            for blk in 0..blocks {
                let o = blk * 4;
                let v = _mm256_fmadd_pd(va, _mm256_loadu_pd(px.add(o)), _mm256_loadu_pd(py.add(o)));
                _mm256_storeu_pd(py.add(o), v);
            }
            for i in blocks * 4..n {
                y[i] = alpha.mul_add(x[i], y[i]);
            }
        }
    }

    dispatch!(dot(a: &[f64], b: &[f64]) -> f64);
    dispatch!(gemm_nt(x: &[f64], w: &[f64], m: usize, n: usize, k: usize, y: &mut [f64]));
    dispatch!(axpy(alpha: f64, x: &[f64], y: &mut [f64]));
}

pub(crate) mod f32k {
    mod portable {
        portable_kernels!(f32, 8);
    }

    // Single precision is the secondary mode: only the dot product and axpy
    // are vectorized explicitly.
    #[cfg(target_arch = "x86_64")]
    mod avx {
        use std::arch::x86_64::*;

        #[target_feature(enable = "avx2,fma")]
        pub(super) unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
            let n = a.len();
            let blocks = n / 8;
            let (pa, pb) = (a.as_ptr(), b.as_ptr());
            let mut acc = _mm256_setzero_ps();
            for blk in 0..blocks {
                let o = blk * 8;
                acc = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(o)), _mm256_loadu_ps(pb.add(o)), acc);
            }
            let mut tail = 0.0f32;
            for i in blocks * 8..n {
                tail = a[i].mul_add(b[i], tail);
            }
            let mut l = [0.0f32; 8];
            _mm256_storeu_ps(l.as_mut_ptr(), acc);
            let q = [l[0] + l[4], l[1] + l[5], l[2] + l[6], l[3] + l[7]];
            ((q[0] + q[2]) + (q[1] + q[3])) + tail
        }

        #[target_feature(enable = "avx2,fma")]
        pub(super) unsafe fn gemm_nt(
            x: &[f32],
            w: &[f32],
            m: usize,
            n: usize,
            k: usize,
            y: &mut [f32],
        ) {
            for r in 0..m {
                for o in 0..n {
                    y[r * n + o] = dot(&x[r * k..(r + 1) * k], &w[o * k..(o + 1) * k]);
                }
            }
        }

        #[target_feature(enable = "avx2,fma")]
        pub(super) unsafe fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
            let n = x.len();
            let blocks = n / 8;
            let va = _mm256_set1_ps(alpha);
            let (px, py) = (x.as_ptr(), y.as_mut_ptr());
            for blk in 0..blocks {
                let o = blk * 8;
                let v = _mm256_fmadd_ps(va, _mm256_loadu_ps(px.add(o)), _mm256_loadu_ps(py.add(o)));
                _mm256_storeu_ps(py.add(o), v);
            }
            for i in blocks * 8..n {
                y[i] = alpha.mul_add(x[i], y[i]);
            }
        }
    }

    dispatch!(dot(a: &[f32], b: &[f32]) -> f32);
    dispatch!(gemm_nt(x: &[f32], w: &[f32], m: usize, n: usize, k: usize, y: &mut [f32]));
    dispatch!(axpy(alpha: f32, x: &[f32], y: &mut [f32]));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize, mul: usize, add: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|i| ((i * mul + add) % 11) as f64 * scale - 2.0)
            .collect()
    }

    fn wavy(n: usize, freq: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * freq).sin()).collect()
    }

    #[test]
    fn dot_is_exact_on_small_integers() {
        for n in [0usize, 1, 7, 8, 16, 17, 100, 333] {
            let a = fixture(n, 7, 3, 1.0);
            let b = fixture(n, 5, 1, 0.5);
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            // small integers and halves: every partial sum is exact
            assert_eq!(dot(&a, &b), naive, "n = {n}");
            let af: Vec<f32> = a.iter().map(|&v| v as f32).collect();
            let bf: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            assert_eq!(dot(&af, &bf) as f64, naive, "n = {n}");
        }
    }

    #[test]
    fn blocked_products_match_single_dots_bitwise() {
        for (m, n, k) in [
            (1, 1, 1),
            (1, 5, 3),
            (4, 7, 9),
            (7, 11, 37),
            (3, 4, 100),
            (10, 400, 50),
        ] {
            let x = wavy(m * k, 0.37);
            let w = wavy(n * k, 1.13);
            let mut y = vec![0.0; m * n];
            gemm_nt(&x, &w, m, n, k, &mut y);
            for r in 0..m {
                for o in 0..n {
                    let d = dot(&x[r * k..(r + 1) * k], &w[o * k..(o + 1) * k]);
                    assert_eq!(
                        y[r * n + o].to_bits(),
                        d.to_bits(),
                        "({m},{n},{k}) at ({r},{o})"
                    );
                }
            }
            let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
            let mut yf = vec![0.0f32; m * n];
            gemm_nt(&xf, &wf, m, n, k, &mut yf);
            assert_eq!(yf[0].to_bits(), dot(&xf[..k], &wf[..k]).to_bits());
        }
    }

    #[test]
    fn outer_product_is_transposed_gemm() {
        for (rows, inp, out) in [(7, 21, 10), (1, 8, 4), (12, 100, 400)] {
            let c = wavy(rows * out, 0.91);
            let x = wavy(rows * inp, 0.37);
            let init = wavy(out * inp, 0.13);
            let mut fast = init.clone();
            outer_accumulate(&c, &x, &mut fast, rows, inp, out);
            for o in 0..out {
                for j in 0..inp {
                    let col_c: Vec<f64> = (0..rows).map(|r| c[r * out + o]).collect();
                    let col_x: Vec<f64> = (0..rows).map(|r| x[r * inp + j]).collect();
                    let want = init[o * inp + j] + dot(&col_c, &col_x);
                    assert_eq!(fast[o * inp + j].to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn activations_track_libm() {
        let mut worst = [0.0f64; 3];
        for i in 0..200_000 {
            let x = (i as f64 - 100_000.0) * 3e-4 * (1.0 + (i % 7) as f64);
            let rel = |a: f64, b: f64| {
                if b == 0.0 {
                    a.abs()
                } else {
                    ((a - b) / b).abs()
                }
            };
            worst[0] = worst[0].max(rel(act::exp(x), x.exp()));
            worst[1] = worst[1].max(rel(act::sigmoid(x), 1.0 / (1.0 + (-x).exp())));
            worst[2] = worst[2].max(rel(act::tanh(x), x.tanh()));
        }
        assert!(worst.iter().all(|&w| w < 4e-15), "{worst:?}");
        assert_eq!(act::exp(0.0), 1.0);
        assert_eq!(act::tanh(0.0), 0.0);
        assert_eq!(act::sigmoid(0.0), 0.5);
        assert_eq!(act::tanh(1e6), 1.0);
        assert_eq!(act::tanh(-1e6), -1.0);
        assert!(act::sigmoid(-1e6) > 0.0 && act::sigmoid(-1e6) < 1e-300);
        assert!(act::exp(f64::NAN).is_nan());
        assert!(act::tanh(f64::NAN).is_nan());
    }

    #[test]
    fn slice_activations_match_scalar_bitwise() {
        let x: Vec<f64> = (0..1001).map(|i| (i as f64 * 0.731).sin() * 9.0).collect();
        for a in [Activation::Sigmoid, Activation::Tanh] {
            let mut out = vec![0.0; x.len()];
            activate(a, &x, &mut out);
            for (&o, &v) in out.iter().zip(&x) {
                let s = if a == Activation::Sigmoid {
                    act::sigmoid(v)
                } else {
                    act::tanh(v)
                };
                assert_eq!(o.to_bits(), s.to_bits());
            }
        }
    }

    #[test]
    fn axpy_matmul_linear_transpose() {
        let mut y = vec![1.0, 1.0, 1.0];
        axpy(2.0, &[1.0, 2.0, 3.0], &mut y);
        assert_eq!(y, vec![3.0, 5.0, 7.0]);
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
        let y = linear_forward(
            &[1.0, 2.0],
            &[1.0, 1.0, 0.0, 1.0],
            Some(&[1.0, 0.0]),
            1,
            2,
            2,
        );
        assert_eq!(y, vec![4.0, 2.0]);
        let mut dw = vec![0.0; 4];
        outer_accumulate(&[1.0, 2.0], &[3.0, 4.0], &mut dw, 1, 2, 2);
        assert_eq!(dw, vec![3.0, 4.0, 6.0, 8.0]);
        assert_eq!(
            transpose(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3),
            vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
    }
}
