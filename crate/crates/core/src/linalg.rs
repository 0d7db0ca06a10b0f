//! Small dense kernels over row-major `f64` slices.

pub const LEAKY_SLOPE: f64 = 0.2;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `out = W x` for a `rows x cols` matrix.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += W^T g`
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(g.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for (r, &gr) in g.iter().enumerate() {
        if gr != 0.0 {
            axpy(gr, &w[r * cols..(r + 1) * cols], out);
        }
    }
}

/// `gw += g x^T`
pub fn outer_acc(gw: &mut [f64], rows: usize, cols: usize, g: &[f64], x: &[f64]) {
    debug_assert_eq!(gw.len(), rows * cols);
    for (r, &gr) in g.iter().enumerate() {
        if gr != 0.0 {
            axpy(gr, x, &mut gw[r * cols..(r + 1) * cols]);
        }
    }
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, stable for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// In-place max-shifted softmax. Empty input is left empty.
pub fn softmax_in_place(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Backward pass of softmax: returns dL/dlogits given probabilities and dL/dprobs.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], out: &mut [f64]) {
    let weighted: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    for ((o, p), g) in out.iter_mut().zip(probs).zip(grad_probs) {
        *o = p * (g - weighted);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_known_values() {
        let mut v = [1.0, -1.0];
        softmax_in_place(&mut v);
        assert!((v[0] - 0.880797).abs() < 1e-6);
        assert!((v[1] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn softplus_matches_definition() {
        for x in [-30.0, -2.0, 0.0, 0.5, 3.0, 40.0] {
            let direct = (1.0f64 + f64::exp(x)).ln();
            assert!((softplus(x) - direct).abs() < 1e-12, "{x}");
        }
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn matvec_transpose_agree() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 2];
        matvec(&w, 2, 3, &[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        let mut back = [0.0; 3];
        matvec_t_acc(&w, 2, 3, &[1.0, 1.0], &mut back);
        assert_eq!(back, [5.0, 7.0, 9.0]);
    }
}
