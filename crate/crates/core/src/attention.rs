//! Fused multi-head attention kernel over independent row blocks.
//!
//! Heads are repacked into contiguous, transposed per-block buffers so the inner
//! loops run over keys and vectorise.

use ndarray::{Array2, ArrayView2};

/// `exp(x)` for `x <= 0`, branch-free so it vectorises. Relative error ~1e-16.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    const MAGIC: f64 = 6755399441055744.0; // 1.5 * 2^52
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-708.0);
    let t = x * LOG2E + MAGIC;
    let kf = t - MAGIC;
    let r = kf * -LN2_LO + (kf * -LN2_HI + x);
    let mut p = 1.0 / 479001600.0;
    p = p * r + 1.0 / 39916800.0;
    p = p * r + 1.0 / 3628800.0;
    p = p * r + 1.0 / 362880.0;
    p = p * r + 1.0 / 40320.0;
    p = p * r + 1.0 / 5040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k = t.to_bits().wrapping_sub(MAGIC.to_bits()) as i64;
    p * f64::from_bits(((k + 1023) as u64) << 52)
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for (x, y) in ra.iter().zip(rb) {
        s += x * *y;
    }
    s
}

#[inline(always)]
fn max_of(a: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; 8];
    let c = a.chunks_exact(8);
    let rest = c.remainder();
    for x in c {
        for l in 0..8 {
            acc[l] = if x[l] > acc[l] { x[l] } else { acc[l] };
        }
    }
    acc.iter().chain(rest).copied().fold(f64::NEG_INFINITY, f64::max)
}

#[inline(always)]
fn sum_of(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let c = a.chunks_exact(8);
    let rest = c.remainder();
    for x in c {
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    acc.iter().sum::<f64>() + rest.iter().sum::<f64>()
}

#[inline(always)]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * *xv;
    }
}

/// Per-block scratch: `qh`/`vh` are `[head][row][c]`, `kt`/`vt` are `[head][c][key]`.
struct Packed {
    n: usize,
    dh: usize,
    qh: Vec<f64>,
    kt: Vec<f64>,
    vt: Vec<f64>,
}

impl Packed {
    #[inline(always)]
    fn new(n: usize, dim: usize) -> Self {
        Packed {
            n,
            dh: 0,
            qh: vec![0.0; n * dim],
            kt: vec![0.0; n * dim],
            vt: vec![0.0; n * dim],
        }
    }

    #[inline(always)]
    fn load(&mut self, q: &ArrayView2<f64>, k: &ArrayView2<f64>, v: &ArrayView2<f64>, r0: usize, heads: usize) {
        let n = self.n;
        let dim = q.ncols();
        let dh = dim / heads;
        self.dh = dh;
        for i in 0..n {
            let (qr, kr, vr) = (q.row(r0 + i), k.row(r0 + i), v.row(r0 + i));
            for h in 0..heads {
                for c in 0..dh {
                    let col = h * dh + c;
                    self.qh[(h * n + i) * dh + c] = qr[col];
                    self.kt[(h * dh + c) * n + i] = kr[col];
                    self.vt[(h * dh + c) * n + i] = vr[col];
                }
            }
        }
    }

    #[inline(always)]
    fn q(&self, h: usize, i: usize) -> &[f64] {
        let o = (h * self.n + i) * self.dh;
        &self.qh[o..o + self.dh]
    }

    #[inline(always)]
    fn kt(&self, h: usize, c: usize) -> &[f64] {
        let o = (h * self.dh + c) * self.n;
        &self.kt[o..o + self.n]
    }

    #[inline(always)]
    fn vt(&self, h: usize, c: usize) -> &[f64] {
        let o = (h * self.dh + c) * self.n;
        &self.vt[o..o + self.n]
    }

    /// Softmax row `i` of head `h` into `p`; masked keys get exactly zero.
    #[inline(always)]
    fn probs(&self, h: usize, i: usize, scale: f64, mask: Option<&[bool]>, p: &mut [f64]) {
        p.fill(0.0);
        let q = self.q(h, i);
        for (c, &qc) in q.iter().enumerate() {
            axpy(qc * scale, self.kt(h, c), p);
        }
        if let Some(m) = mask {
            for (pv, &keep) in p.iter_mut().zip(m) {
                if !keep {
                    *pv = f64::NEG_INFINITY;
                }
            }
        }
        let max = max_of(p);
        if max == f64::NEG_INFINITY {
            p.fill(0.0);
            return;
        }
        for pv in p.iter_mut() {
            *pv = exp_nonpos(*pv - max);
        }
        let mut sum = sum_of(p);
        if let Some(m) = mask {
            for (pv, &keep) in p.iter_mut().zip(m) {
                if !keep {
                    sum -= *pv;
                    *pv = 0.0;
                }
            }
        }
        let inv = 1.0 / sum;
        for pv in p.iter_mut() {
            *pv *= inv;
        }
    }
}

/// Softmax attention applied independently to each block of `block` consecutive rows.
pub(crate) fn forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    block: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Array2<f64> {
    #[cfg(target_arch = "x86_64")]
    if wide() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { forward_avx2(q, k, v, block, heads, key_mask) };
    }
    forward_impl(q, k, v, block, heads, key_mask)
}

#[cfg(target_arch = "x86_64")]
fn wide() -> bool {
    is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
}

// Same arithmetic in the same order as the portable path, only wider vectors,
// so results are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn forward_avx2(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    block: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Array2<f64> {
    forward_impl(q, k, v, block, heads, key_mask)
}

#[inline(always)]
fn forward_impl(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    block: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Array2<f64> {
    let (rows, dim) = q.dim();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((rows, dim));
    let mut pk = Packed::new(block, dim);
    let mut p = vec![0.0; block];
    for b in 0..rows / block {
        let r0 = b * block;
        pk.load(&q, &k, &v, r0, heads);
        let mask = key_mask.map(|m| &m[r0..r0 + block]);
        for h in 0..heads {
            for i in 0..block {
                pk.probs(h, i, scale, mask, &mut p);
                let mut orow = out.row_mut(r0 + i);
                for c in 0..dh {
                    orow[h * dh + c] = dot(&p, pk.vt(h, c));
                }
            }
        }
    }
    out
}

/// Gradients w.r.t. `q`, `k`, `v` given the forward output `out` and upstream `g`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    out: ArrayView2<f64>,
    g: ArrayView2<f64>,
    block: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    #[cfg(target_arch = "x86_64")]
    if wide() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { backward_avx2(q, k, v, out, g, block, heads, key_mask) };
    }
    backward_impl(q, k, v, out, g, block, heads, key_mask)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn backward_avx2(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    out: ArrayView2<f64>,
    g: ArrayView2<f64>,
    block: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    backward_impl(q, k, v, out, g, block, heads, key_mask)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn backward_impl(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    out: ArrayView2<f64>,
    g: ArrayView2<f64>,
    block: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (rows, dim) = q.dim();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((rows, dim));
    let mut dk = Array2::zeros((rows, dim));
    let mut dv = Array2::zeros((rows, dim));
    let mut pk = Packed::new(block, dim);
    let mut p = vec![0.0; block];
    let mut ds = vec![0.0; block];
    let mut dkt = vec![0.0; block * dim];
    let mut dvt = vec![0.0; block * dim];
    for b in 0..rows / block {
        let r0 = b * block;
        pk.load(&q, &k, &v, r0, heads);
        let mask = key_mask.map(|m| &m[r0..r0 + block]);
        dkt.fill(0.0);
        dvt.fill(0.0);
        for h in 0..heads {
            for i in 0..block {
                pk.probs(h, i, scale, mask, &mut p);
                let gi = g.row(r0 + i);
                let oi = out.row(r0 + i);
                let mut go = 0.0;
                ds.fill(0.0);
                for c in 0..dh {
                    let gc = gi[h * dh + c];
                    go += gc * oi[h * dh + c];
                    axpy(gc, pk.vt(h, c), &mut ds);
                    let o = (h * dh + c) * block;
                    axpy(gc, &p, &mut dvt[o..o + block]);
                }
                for (d, &pv) in ds.iter_mut().zip(&p) {
                    *d = pv * (*d - go) * scale;
                }
                let qi = pk.q(h, i);
                let mut dqrow = dq.row_mut(r0 + i);
                for c in 0..dh {
                    dqrow[h * dh + c] = dot(&ds, pk.kt(h, c));
                    let o = (h * dh + c) * block;
                    axpy(qi[c], &ds, &mut dkt[o..o + block]);
                }
            }
        }
        for j in 0..block {
            let mut dkr = dk.row_mut(r0 + j);
            for col in 0..dim {
                dkr[col] = dkt[col * block + j];
            }
            let mut dvr = dv.row_mut(r0 + j);
            for col in 0..dim {
                dvr[col] = dvt[col * block + j];
            }
        }
    }
    (dq, dk, dv)
}
