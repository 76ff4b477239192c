//! `out[x] += sum_j taps[j] * row[x + j]`, the inner loop of every
//! correlation in the baseline.

#[cfg(target_arch = "x86_64")]
use std::arch::x86_64::*;

/// Accumulates the correlation of `row` with `taps` into `out`.
///
/// Panics unless `row.len() >= out.len() + taps.len() - 1`.
pub fn row_corr(out: &mut [f32], row: &[f32], taps: &[f32]) {
    if taps.is_empty() || out.is_empty() {
        return;
    }
    assert!(row.len() + 1 >= out.len() + taps.len(), "row too short for correlation");
    #[cfg(target_arch = "x86_64")]
    {
        if has_avx512() {
            // SAFETY: features checked at runtime; bounds asserted above.
            unsafe { row_corr_avx512(out, row, taps) };
            return;
        }
        if has_avx2_fma() {
            // SAFETY: features checked at runtime; bounds asserted above.
            unsafe { row_corr_avx2(out, row, taps) };
            return;
        }
    }
    row_corr_scalar(out, row, taps);
}

#[cfg(target_arch = "x86_64")]
fn has_avx512() -> bool {
    use std::sync::OnceLock;
    static HAS: OnceLock<bool> = OnceLock::new();
    *HAS.get_or_init(|| is_x86_feature_detected!("avx512f"))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn row_corr_avx512(out: &mut [f32], row: &[f32], taps: &[f32]) {
    let n = out.len();
    let o = out.as_mut_ptr();
    let r = row.as_ptr();
    let mut x = 0;
    while x + 64 <= n {
        let mut a0 = _mm512_loadu_ps(o.add(x));
        let mut a1 = _mm512_loadu_ps(o.add(x + 16));
        let mut a2 = _mm512_loadu_ps(o.add(x + 32));
        let mut a3 = _mm512_loadu_ps(o.add(x + 48));
        for (j, &t) in taps.iter().enumerate() {
            let tv = _mm512_set1_ps(t);
            let p = r.add(x + j);
            a0 = _mm512_fmadd_ps(tv, _mm512_loadu_ps(p), a0);
            a1 = _mm512_fmadd_ps(tv, _mm512_loadu_ps(p.add(16)), a1);
            a2 = _mm512_fmadd_ps(tv, _mm512_loadu_ps(p.add(32)), a2);
            a3 = _mm512_fmadd_ps(tv, _mm512_loadu_ps(p.add(48)), a3);
        }
        _mm512_storeu_ps(o.add(x), a0);
        _mm512_storeu_ps(o.add(x + 16), a1);
        _mm512_storeu_ps(o.add(x + 32), a2);
        _mm512_storeu_ps(o.add(x + 48), a3);
        x += 64;
    }
    while x < n {
        let rem = (n - x).min(16);
        let m: __mmask16 = if rem == 16 { 0xFFFF } else { (1u16 << rem) - 1 };
        let mut a0 = _mm512_maskz_loadu_ps(m, o.add(x));
        for (j, &t) in taps.iter().enumerate() {
            a0 = _mm512_fmadd_ps(_mm512_set1_ps(t), _mm512_maskz_loadu_ps(m, r.add(x + j)), a0);
        }
        _mm512_mask_storeu_ps(o.add(x), m, a0);
        x += rem;
    }
}

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    use std::sync::OnceLock;
    static HAS: OnceLock<bool> = OnceLock::new();
    *HAS.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

pub(crate) fn row_corr_scalar(out: &mut [f32], row: &[f32], taps: &[f32]) {
    const B: usize = 8;
    let n = out.len();
    let mut x = 0;
    while x + B <= n {
        let mut acc = [0.0f32; B];
        acc.copy_from_slice(&out[x..x + B]);
        for (j, &t) in taps.iter().enumerate() {
            let src = &row[x + j..x + j + B];
            for k in 0..B {
                acc[k] += t * src[k];
            }
        }
        out[x..x + B].copy_from_slice(&acc);
        x += B;
    }
    for (xx, o) in out.iter_mut().enumerate().skip(x) {
        *o += taps.iter().zip(&row[xx..]).map(|(t, r)| t * r).sum::<f32>();
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn row_corr_avx2(out: &mut [f32], row: &[f32], taps: &[f32]) {
    let n = out.len();
    let o = out.as_mut_ptr();
    let r = row.as_ptr();
    let mut x = 0;
    while x + 32 <= n {
        let mut a0 = _mm256_loadu_ps(o.add(x));
        let mut a1 = _mm256_loadu_ps(o.add(x + 8));
        let mut a2 = _mm256_loadu_ps(o.add(x + 16));
        let mut a3 = _mm256_loadu_ps(o.add(x + 24));
        for (j, &t) in taps.iter().enumerate() {
            let tv = _mm256_set1_ps(t);
            let p = r.add(x + j);
            a0 = _mm256_fmadd_ps(tv, _mm256_loadu_ps(p), a0);
            a1 = _mm256_fmadd_ps(tv, _mm256_loadu_ps(p.add(8)), a1);
            a2 = _mm256_fmadd_ps(tv, _mm256_loadu_ps(p.add(16)), a2);
            a3 = _mm256_fmadd_ps(tv, _mm256_loadu_ps(p.add(24)), a3);
        }
        _mm256_storeu_ps(o.add(x), a0);
        _mm256_storeu_ps(o.add(x + 8), a1);
        _mm256_storeu_ps(o.add(x + 16), a2);
        _mm256_storeu_ps(o.add(x + 24), a3);
        x += 32;
    }
    while x + 8 <= n {
        let mut a0 = _mm256_loadu_ps(o.add(x));
        for (j, &t) in taps.iter().enumerate() {
            a0 = _mm256_fmadd_ps(_mm256_set1_ps(t), _mm256_loadu_ps(r.add(x + j)), a0);
        }
        _mm256_storeu_ps(o.add(x), a0);
        x += 8;
    }
    while x < n {
        let mut s = *o.add(x);
        for (j, &t) in taps.iter().enumerate() {
            s = t.mul_add(*r.add(x + j), s);
        }
        *o.add(x) = s;
        x += 1;
    }
}

/// `acc[i] += hi[i] - lo[i]`.
pub fn add_diff(acc: &mut [f64], hi: &[f64], lo: &[f64]) {
    assert!(hi.len() >= acc.len() && lo.len() >= acc.len());
    #[cfg(target_arch = "x86_64")]
    {
        if has_avx512() {
            // SAFETY: feature checked at runtime.
            unsafe { add_diff_avx512(acc, hi, lo) };
            return;
        }
    }
    add_diff_plain(acc, hi, lo);
}

#[inline(always)]
fn add_diff_plain(acc: &mut [f64], hi: &[f64], lo: &[f64]) {
    for ((a, h), l) in acc.iter_mut().zip(hi).zip(lo) {
        *a += h - l;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn add_diff_avx512(acc: &mut [f64], hi: &[f64], lo: &[f64]) {
    add_diff_plain(acc, hi, lo);
}

/// f64 variant of [`row_corr`].
pub fn row_corr_f64(out: &mut [f64], row: &[f64], taps: &[f64]) {
    if taps.is_empty() || out.is_empty() {
        return;
    }
    assert!(row.len() + 1 >= out.len() + taps.len(), "row too short for correlation");
    #[cfg(target_arch = "x86_64")]
    {
        if has_avx2_fma() {
            // SAFETY: as in `row_corr`.
            unsafe { row_corr_f64_avx2(out, row, taps) };
            return;
        }
    }
    for (x, o) in out.iter_mut().enumerate() {
        *o += taps.iter().zip(&row[x..]).map(|(t, r)| t * r).sum::<f64>();
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn row_corr_f64_avx2(out: &mut [f64], row: &[f64], taps: &[f64]) {
    let n = out.len();
    let o = out.as_mut_ptr();
    let r = row.as_ptr();
    let mut x = 0;
    while x + 16 <= n {
        let mut a0 = _mm256_loadu_pd(o.add(x));
        let mut a1 = _mm256_loadu_pd(o.add(x + 4));
        let mut a2 = _mm256_loadu_pd(o.add(x + 8));
        let mut a3 = _mm256_loadu_pd(o.add(x + 12));
        for (j, &t) in taps.iter().enumerate() {
            let tv = _mm256_set1_pd(t);
            let p = r.add(x + j);
            a0 = _mm256_fmadd_pd(tv, _mm256_loadu_pd(p), a0);
            a1 = _mm256_fmadd_pd(tv, _mm256_loadu_pd(p.add(4)), a1);
            a2 = _mm256_fmadd_pd(tv, _mm256_loadu_pd(p.add(8)), a2);
            a3 = _mm256_fmadd_pd(tv, _mm256_loadu_pd(p.add(12)), a3);
        }
        _mm256_storeu_pd(o.add(x), a0);
        _mm256_storeu_pd(o.add(x + 4), a1);
        _mm256_storeu_pd(o.add(x + 8), a2);
        _mm256_storeu_pd(o.add(x + 12), a3);
        x += 16;
    }
    while x < n {
        let mut s = *o.add(x);
        for (j, &t) in taps.iter().enumerate() {
            s = t.mul_add(*r.add(x + j), s);
        }
        *o.add(x) = s;
        x += 1;
    }
}
