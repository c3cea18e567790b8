//! Windowed structural similarity with an adjoint for the second argument.

/// Reflect-pads an index into `0..n` without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// SSIM parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 3,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
        }
    }
}

/// Window statistics for one channel at one pixel.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    ma: f64,
    mb: f64,
    maa: f64,
    mbb: f64,
    mab: f64,
}

/// Reflected source index of every window tap, `taps[x * window + k]`.
fn tap_table(n: usize, window: usize) -> Vec<usize> {
    let r = (window / 2) as isize;
    (0..n)
        .flat_map(|x| (-r..=r).map(move |d| reflect(x as isize + d, n)))
        .collect()
}

/// Window means of several fields, computed as separable box sums.
fn box_means<const K: usize>(fields: [&[f64]; K], w: usize, h: usize, window: usize) -> Vec<[f64; K]> {
    let (tx, ty) = (tap_table(w, window), tap_table(h, window));
    let n = (window * window) as f64;
    let mut rows = vec![[0.0; K]; w * h];
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            let mut acc = [0.0; K];
            for &xx in &tx[x * window..(x + 1) * window] {
                for (a, f) in acc.iter_mut().zip(&fields) {
                    *a += f[row + xx];
                }
            }
            rows[row + x] = acc;
        }
    }
    let mut out = vec![[0.0; K]; w * h];
    for y in 0..h {
        for &yy in &ty[y * window..(y + 1) * window] {
            for x in 0..w {
                let (o, r) = (&mut out[y * w + x], &rows[yy * w + x]);
                for k in 0..K {
                    o[k] += r[k];
                }
            }
        }
    }
    for o in &mut out {
        for v in o.iter_mut() {
            *v /= n;
        }
    }
    out
}

/// Transpose of the window sum in [`box_means`] (without the division).
fn box_scatter<const K: usize>(fields: &[[f64; K]], w: usize, h: usize, window: usize) -> Vec<[f64; K]> {
    let (tx, ty) = (tap_table(w, window), tap_table(h, window));
    let mut rows = vec![[0.0; K]; w * h];
    for y in 0..h {
        for &yy in &ty[y * window..(y + 1) * window] {
            for x in 0..w {
                let (o, f) = (&mut rows[yy * w + x], &fields[y * w + x]);
                for k in 0..K {
                    o[k] += f[k];
                }
            }
        }
    }
    let mut out = vec![[0.0; K]; w * h];
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            let f = rows[row + x];
            for &xx in &tx[x * window..(x + 1) * window] {
                let o = &mut out[row + xx];
                for k in 0..K {
                    o[k] += f[k];
                }
            }
        }
    }
    out
}

fn window_moments(a: &[f64], b: &[f64], w: usize, h: usize, p: &SsimParams) -> Vec<Moments> {
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    box_means([a, b, &aa, &bb, &ab], w, h, p.window)
        .into_iter()
        .map(|[ma, mb, maa, mbb, mab]| Moments { ma, mb, maa, mbb, mab })
        .collect()
}

struct Terms {
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
}

fn terms(m: &Moments, p: &SsimParams) -> Terms {
    let va = m.maa - m.ma * m.ma;
    let vb = m.mbb - m.mb * m.mb;
    let cov = m.mab - m.ma * m.mb;
    Terms {
        a1: 2.0 * m.ma * m.mb + p.c1,
        a2: 2.0 * cov + p.c2,
        b1: m.ma * m.ma + m.mb * m.mb + p.c1,
        b2: va + vb + p.c2,
    }
}

/// Per-pixel SSIM of one channel stored as flat `w * h` slices.
pub(crate) fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, p: &SsimParams) -> Vec<f64> {
    window_moments(a, b, w, h, p)
        .iter()
        .map(|m| {
            let t = terms(m, p);
            (t.a1 * t.a2) / (t.b1 * t.b2)
        })
        .collect()
}

/// Adjoint of [`ssim_channel`] with respect to `b`: given `g = dL/dS` per
/// pixel, returns `dL/db` per pixel.
pub(crate) fn ssim_channel_grad_b(a: &[f64], b: &[f64], w: usize, h: usize, p: &SsimParams, g: &[f64]) -> Vec<f64> {
    let moments = window_moments(a, b, w, h, p);
    let n = (p.window * p.window) as f64;
    // dL/db_j = sum over windows i containing j of
    // g_i (dS/dmb + 2 b_j dS/dmbb + a_j dS/dmab) / n.
    let coeffs: Vec<[f64; 3]> = moments
        .iter()
        .zip(g)
        .map(|(m, &gi)| {
            if gi == 0.0 {
                return [0.0; 3];
            }
            let t = terms(m, p);
            let den = t.b1 * t.b2;
            let s = t.a1 * t.a2 / den;
            let d_mb = (2.0 * m.ma * t.a2 - 2.0 * m.ma * t.a1) / den - s * (2.0 * m.mb / t.b1 - 2.0 * m.mb / t.b2);
            let d_mbb = -s / t.b2;
            let d_mab = 2.0 * t.a1 / den;
            let c = gi / n;
            [c * d_mb, c * d_mbb, c * d_mab]
        })
        .collect();
    box_scatter(&coeffs, w, h, p.window)
        .iter()
        .enumerate()
        .map(|(j, c)| c[0] + 2.0 * b[j] * c[1] + a[j] * c[2])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(2, 2), 0);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let (w, h) = (5, 4);
        let a: Vec<f64> = (0..w * h).map(|i| ((i * 37 % 11) as f64) / 10.0).collect();
        let b: Vec<f64> = (0..w * h).map(|i| ((i * 17 % 7) as f64) / 7.0).collect();
        let g: Vec<f64> = (0..w * h).map(|i| 1.0 + (i % 3) as f64).collect();
        let p = SsimParams::default();
        let loss = |bb: &[f64]| -> f64 { ssim_channel(&a, bb, w, h, &p).iter().zip(&g).map(|(s, g)| s * g).sum() };
        let grad = ssim_channel_grad_b(&a, &b, w, h, &p, &g);
        let eps = 1e-6;
        for j in 0..w * h {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[j] += eps;
            bm[j] -= eps;
            let fd = (loss(&bp) - loss(&bm)) / (2.0 * eps);
            assert!(
                (fd - grad[j]).abs() < 1e-5 * (1.0 + fd.abs()),
                "pixel {j}: {fd} vs {}",
                grad[j]
            );
        }
    }
}
