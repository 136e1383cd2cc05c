//! Bilinear resampling with half-pixel centres (align-corners = false).

use super::Scalar;

struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_taps(in_len: usize, out_len: usize) -> AxisTaps {
    let scale = in_len as f64 / out_len as f64;
    let mut taps = AxisTaps { lo: Vec::with_capacity(out_len), hi: Vec::with_capacity(out_len), frac: Vec::with_capacity(out_len) };
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let frac = if hi == lo { 0.0 } else { src - lo as f64 };
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(frac);
    }
    taps
}

#[inline]
fn lerp<F: Scalar>(a: F, b: F, w: F) -> F {
    a + w * (b - a)
}

/// Resamples `planes` stacked `in_h x in_w` maps to `out_h x out_w`.
pub fn bilinear<F: Scalar>(input: &[F], planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<F> {
    let ty = axis_taps(in_h, out_h);
    let tx = axis_taps(in_w, out_w);
    let wx: Vec<F> = tx.frac.iter().map(|&f| F::lit(f)).collect();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &input[p * in_h * in_w..(p + 1) * in_h * in_w];
        for oy in 0..out_h {
            let top = &plane[ty.lo[oy] * in_w..(ty.lo[oy] + 1) * in_w];
            let bot = &plane[ty.hi[oy] * in_w..(ty.hi[oy] + 1) * in_w];
            let wy = F::lit(ty.frac[oy]);
            for ox in 0..out_w {
                let (l, h) = (tx.lo[ox], tx.hi[ox]);
                let upper = lerp(top[l], top[h], wx[ox]);
                let lower = lerp(bot[l], bot[h], wx[ox]);
                out.push(lerp(upper, lower, wy));
            }
        }
    }
    out
}

/// Adjoint of [`bilinear`].
pub fn bilinear_backward<F: Scalar>(grad_out: &[F], planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<F> {
    let ty = axis_taps(in_h, out_h);
    let tx = axis_taps(in_w, out_w);
    let mut grad = vec![F::zero(); planes * in_h * in_w];
    for p in 0..planes {
        let plane = &mut grad[p * in_h * in_w..(p + 1) * in_h * in_w];
        for oy in 0..out_h {
            let wy = F::lit(ty.frac[oy]);
            let (ry0, ry1) = (ty.lo[oy] * in_w, ty.hi[oy] * in_w);
            for ox in 0..out_w {
                let g = grad_out[(p * out_h + oy) * out_w + ox];
                let wx = F::lit(tx.frac[ox]);
                let (l, h) = (tx.lo[ox], tx.hi[ox]);
                let g_upper = g * (F::one() - wy);
                let g_lower = g * wy;
                plane[ry0 + l] += g_upper * (F::one() - wx);
                plane[ry0 + h] += g_upper * wx;
                plane[ry1 + l] += g_lower * (F::one() - wx);
                plane[ry1 + h] += g_lower * wx;
            }
        }
    }
    grad
}
