//! Per-sample layer kernels on flat `channels x height x width` buffers.
//!
//! Convolutions are stride 1 with zero padding `k / 2`, so spatial size is
//! preserved. Backward kernels accumulate into their gradient buffers.

use super::Real;

/// Geometry of a `channels x height x width` activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// `acc[x] += sum_j taps[j] * s[x + j - k/2]`, treating `s` outside its
/// bounds as zero. `acc` and `s` have the same length.
#[inline]
fn row_correlate<F: Real>(acc: &mut [F], s: &[F], taps: &[F]) {
    let w = acc.len();
    let k = taps.len();
    if k == 3 && w >= 3 {
        let (t0, t1, t2) = (taps[0], taps[1], taps[2]);
        acc[0] += t1 * s[0] + t2 * s[1];
        for (((a, &l), &m), &r) in acc[1..w - 1]
            .iter_mut()
            .zip(&s[..w - 2])
            .zip(&s[1..w - 1])
            .zip(&s[2..])
        {
            *a += t0 * l + t1 * m + t2 * r;
        }
        acc[w - 1] += t0 * s[w - 2] + t1 * s[w - 1];
        return;
    }
    let pad = (k / 2) as isize;
    for (j, &t) in taps.iter().enumerate() {
        let dx = j as isize - pad;
        let x0 = (-dx).max(0) as usize;
        let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
        if x1 <= x0 {
            continue;
        }
        let sx0 = (x0 as isize + dx) as usize;
        for (a, &v) in acc[x0..x1].iter_mut().zip(&s[sx0..sx0 + (x1 - x0)]) {
            *a += t * v;
        }
    }
}

/// `out` (`out_ch x h x w`) = conv(`input`) + bias.
pub fn conv2d_forward<F: Real>(
    input: &[F],
    dims: Dims,
    weights: &[F],
    bias: &[F],
    out_ch: usize,
    k: usize,
    out: &mut [F],
) {
    let (h, w, plane) = (dims.h, dims.w, dims.plane());
    let pad = (k / 2) as isize;
    debug_assert_eq!(input.len(), dims.len());
    debug_assert_eq!(out.len(), out_ch * plane);
    debug_assert_eq!(weights.len(), out_ch * dims.c * k * k);
    for o in 0..out_ch {
        for y in 0..h {
            let acc = &mut out[o * plane + y * w..o * plane + (y + 1) * w];
            acc.fill(bias[o]);
            for c in 0..dims.c {
                let wbase = (o * dims.c + c) * k * k;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let s = &input[c * plane + sy * w..c * plane + (sy + 1) * w];
                    row_correlate(acc, s, &weights[wbase + ky * k..wbase + (ky + 1) * k]);
                }
            }
        }
    }
}

/// Accumulate weight and bias gradients, and the input gradient when
/// `grad_in` is given.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Real>(
    input: &[F],
    dims: Dims,
    weights: &[F],
    out_ch: usize,
    k: usize,
    grad_out: &[F],
    grad_w: &mut [F],
    grad_b: &mut [F],
    grad_in: Option<&mut [F]>,
) {
    let (h, w, plane) = (dims.h, dims.w, dims.plane());
    let pad = (k / 2) as isize;
    // Per-tap elementwise partial products, summed once per kernel row.
    let mut scratch = vec![F::zero(); k * w];
    for o in 0..out_ch {
        let g = &grad_out[o * plane..(o + 1) * plane];
        grad_b[o] += g.iter().copied().sum::<F>();
        for c in 0..dims.c {
            let src = &input[c * plane..(c + 1) * plane];
            let wbase = (o * dims.c + c) * k * k;
            for ky in 0..k {
                scratch.fill(F::zero());
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let grow = &g[y * w..(y + 1) * w];
                    let srow = &src[sy * w..(sy + 1) * w];
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                        if x1 <= x0 {
                            continue;
                        }
                        let sx0 = (x0 as isize + dx) as usize;
                        let acc = &mut scratch[kx * w + x0..kx * w + x1];
                        for ((a, &gv), &sv) in acc.iter_mut().zip(&grow[x0..x1]).zip(&srow[sx0..]) {
                            *a += gv * sv;
                        }
                    }
                }
                for kx in 0..k {
                    grad_w[wbase + ky * k + kx] += scratch[kx * w..(kx + 1) * w].iter().copied().sum::<F>();
                }
            }
        }
    }
    let Some(gin) = grad_in else { return };
    let mut taps = vec![F::zero(); k];
    for c in 0..dims.c {
        for sy in 0..h {
            let acc = &mut gin[c * plane + sy * w..c * plane + (sy + 1) * w];
            for o in 0..out_ch {
                let wbase = (o * dims.c + c) * k * k;
                for ky in 0..k {
                    let y = sy as isize - ky as isize + pad;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let y = y as usize;
                    for (j, t) in taps.iter_mut().enumerate() {
                        *t = weights[wbase + ky * k + (k - 1 - j)];
                    }
                    let grow = &grad_out[o * plane + y * w..o * plane + (y + 1) * w];
                    row_correlate(acc, grow, &taps);
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so it vectorizes.
#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = F::zero();
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn relu_forward<F: Real>(x: &mut [F]) {
    for v in x {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Zero the gradient wherever the ReLU output was not positive.
pub fn relu_backward<F: Real>(output: &[F], grad: &mut [F]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Output geometry of a `p x p` max pool with floor semantics.
pub fn pool_dims(dims: Dims, p: usize) -> Dims {
    Dims::new(dims.c, dims.h / p, dims.w / p)
}

/// Max pool with window and stride `p`. `argmax` receives the flat input
/// index of each winner; the first maximum in row-major window order wins.
pub fn maxpool_forward<F: Real>(
    input: &[F],
    dims: Dims,
    p: usize,
    out: &mut [F],
    argmax: &mut [u32],
) {
    let od = pool_dims(dims, p);
    let plane = dims.plane();
    for c in 0..dims.c {
        for oy in 0..od.h {
            for ox in 0..od.w {
                let mut best_idx = c * plane + oy * p * dims.w + ox * p;
                let mut best = input[best_idx];
                for wy in 0..p {
                    let row = c * plane + (oy * p + wy) * dims.w + ox * p;
                    for wx in 0..p {
                        let v = input[row + wx];
                        if v > best {
                            best = v;
                            best_idx = row + wx;
                        }
                    }
                }
                let o = c * od.plane() + oy * od.w + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
}

/// Route each output gradient to its recorded argmax.
pub fn maxpool_backward<F: Real>(grad_out: &[F], argmax: &[u32], grad_in: &mut [F]) {
    for (g, &i) in grad_out.iter().zip(argmax) {
        grad_in[i as usize] += *g;
    }
}

/// `out = W x + b` with `W` stored `[n_out][n_in]`.
pub fn dense_forward<F: Real>(x: &[F], weights: &[F], bias: &[F], out: &mut [F]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        *y = bias[o] + dot(&weights[o * n_in..(o + 1) * n_in], x);
    }
}

pub fn dense_backward<F: Real>(
    x: &[F],
    weights: &[F],
    grad_out: &[F],
    grad_w: &mut [F],
    grad_b: &mut [F],
    grad_in: Option<&mut [F]>,
) {
    let n_in = x.len();
    for (o, &g) in grad_out.iter().enumerate() {
        grad_b[o] += g;
        if g == F::zero() {
            continue;
        }
        for (gw, &xv) in grad_w[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *gw += g * xv;
        }
    }
    if let Some(gi) = grad_in {
        for (o, &g) in grad_out.iter().enumerate() {
            if g == F::zero() {
                continue;
            }
            for (d, &w) in gi.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                *d += g * w;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct definition of same-padded cross-correlation.
    fn conv_naive(input: &[f64], d: Dims, w: &[f64], b: &[f64], oc: usize, k: usize) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; oc * d.plane()];
        for o in 0..oc {
            for y in 0..d.h {
                for x in 0..d.w {
                    let mut s = b[o];
                    for c in 0..d.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                    continue;
                                }
                                s += w[((o * d.c + c) * k + ky) * k + kx]
                                    * input[c * d.plane() + sy as usize * d.w + sx as usize];
                            }
                        }
                    }
                    out[o * d.plane() + y * d.w + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (d, oc, k) in [
            (Dims::new(2, 5, 7), 3, 3),
            (Dims::new(1, 4, 4), 2, 5),
            (Dims::new(3, 1, 6), 1, 3),
        ] {
            let x = random(d.len(), &mut rng);
            let w = random(oc * d.c * k * k, &mut rng);
            let b = random(oc, &mut rng);
            let mut out = vec![0.0; oc * d.plane()];
            conv2d_forward(&x, d, &w, &b, oc, k, &mut out);
            let want = conv_naive(&x, d, &w, &b, oc, k);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn scalar_loss(out: &[f64], probe: &[f64]) -> f64 {
        out.iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, oc, k) = (Dims::new(2, 5, 6), 3, 3);
        let x = random(d.len(), &mut rng);
        let w = random(oc * d.c * k * k, &mut rng);
        let b = random(oc, &mut rng);
        let probe = random(oc * d.plane(), &mut rng);
        let f = |x: &[f64], w: &[f64], b: &[f64]| {
            let mut out = vec![0.0; oc * d.plane()];
            conv2d_forward(x, d, w, b, oc, k, &mut out);
            scalar_loss(&out, &probe)
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        let mut gx = vec![0.0; x.len()];
        conv2d_backward(&x, d, &w, oc, k, &probe, &mut gw, &mut gb, Some(&mut gx));
        let h = 1e-3;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-6, "{analytic} vs {numeric}");
        };
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            check(gw[i], f(&x, &wp, &b), f(&x, &wm, &b));
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            check(gb[i], f(&x, &w, &bp), f(&x, &w, &bm));
        }
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            check(gx[i], f(&xp, &w, &b), f(&xm, &w, &b));
        }
    }

    #[test]
    fn maxpool_matches_window_max_and_floors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Dims::new(3, 9, 7);
        let x = random(d.len(), &mut rng);
        let od = pool_dims(d, 2);
        assert_eq!((od.h, od.w), (4, 3));
        let mut out = vec![0.0; od.len()];
        let mut idx = vec![0u32; od.len()];
        maxpool_forward(&x, d, 2, &mut out, &mut idx);
        for c in 0..d.c {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut m = f64::NEG_INFINITY;
                    for wy in 0..2 {
                        for wx in 0..2 {
                            m = m.max(x[c * d.plane() + (2 * oy + wy) * d.w + 2 * ox + wx]);
                        }
                    }
                    let o = c * od.plane() + oy * od.w + ox;
                    assert_eq!(out[o], m);
                    assert_eq!(x[idx[o] as usize], m);
                }
            }
        }
    }

    #[test]
    fn maxpool_ties_route_to_first_maximum() {
        let d = Dims::new(1, 2, 2);
        let x = [1.0f64, 3.0, 3.0, 3.0];
        let mut out = [0.0];
        let mut idx = [0u32];
        maxpool_forward(&x, d, 2, &mut out, &mut idx);
        assert_eq!(idx[0], 1);
        let mut gi = [0.0; 4];
        maxpool_backward(&[2.5], &idx, &mut gi);
        assert_eq!(gi, [0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn relu_clamps_and_masks() {
        let mut x = vec![-1.0f64, 0.0, 2.0];
        relu_forward(&mut x);
        assert_eq!(x, vec![0.0, 0.0, 2.0]);
        let mut g = vec![1.0, 1.0, 1.0];
        relu_backward(&x, &mut g);
        assert_eq!(g, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n_in, n_out) = (7, 3);
        let x = random(n_in, &mut rng);
        let w = random(n_in * n_out, &mut rng);
        let b = random(n_out, &mut rng);
        let probe = random(n_out, &mut rng);
        let f = |x: &[f64], w: &[f64]| {
            let mut out = vec![0.0; n_out];
            dense_forward(x, w, &b, &mut out);
            scalar_loss(&out, &probe)
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; n_out];
        let mut gx = vec![0.0; n_in];
        dense_backward(&x, &w, &probe, &mut gw, &mut gb, Some(&mut gx));
        assert_eq!(gb, probe);
        let h = 1e-3;
        for i in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[i] += h;
            m[i] -= h;
            assert!((gw[i] - (f(&x, &p) - f(&x, &m)) / (2.0 * h)).abs() < 1e-9);
        }
        for i in 0..n_in {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            assert!((gx[i] - (f(&p, &w) - f(&m, &w)) / (2.0 * h)).abs() < 1e-9);
        }
    }
}
