//! Forward and adjoint kernels for the dense layers used by the latent
//! transformer. Activations are `rows × features` matrices; biases and
//! layer-norm affine parameters are `1 × features`.

use ndarray::{s, Array2, ArrayView2, Axis};

pub fn row_sum(x: &Array2<f64>) -> Array2<f64> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// `y = x W + b`
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    (dy.dot(&w.t()), x.t().dot(dy), row_sum(dy))
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization to zero mean and unit (population) variance, then `γ·x̂ + β`.
pub fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array2<f64>,
    beta: &Array2<f64>,
    eps: f64,
) -> (Array2<f64>, LayerNormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.outer_iter_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv_std.push(is);
    }
    let y = &xhat * gamma + beta;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dγ, dβ)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dgamma = row_sum(&(dy * &cache.xhat));
    let dbeta = row_sum(dy);
    let dxhat = dy * gamma;
    let dx = normalize_backward(&cache.xhat, &cache.inv_std, &dxhat);
    (dx, dgamma, dbeta)
}

/// Adjoint of per-row standardization given the standardized rows.
pub fn normalize_backward(xhat: &Array2<f64>, inv_std: &[f64], dxhat: &Array2<f64>) -> Array2<f64> {
    let n = xhat.ncols() as f64;
    let mut dx = Array2::zeros(xhat.dim());
    for (i, ((mut out, xh), g)) in dx
        .outer_iter_mut()
        .zip(xhat.outer_iter())
        .zip(dxhat.outer_iter())
        .enumerate()
    {
        let mean_g = g.sum() / n;
        let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, &gv), &xv) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = inv_std[i] * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

/// Numerically stable row softmax.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

pub fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut dz = p * dp;
    for (mut row, prow) in dz.outer_iter_mut().zip(p.outer_iter()) {
        let s = row.sum();
        for (d, &pv) in row.iter_mut().zip(prow.iter()) {
            *d -= pv * s;
        }
    }
    dz
}

/// Row-wise log-sum-exp.
pub fn log_sum_exp(z: ArrayView2<'_, f64>) -> Vec<f64> {
    z.outer_iter()
        .map(|row| {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Shannon entropy (nats) of each row's softmax, `lse(z) − Σ p z`.
pub fn entropy_from_logits(z: &Array2<f64>) -> Vec<f64> {
    let p = softmax_rows(z);
    let lse = log_sum_exp(z.view());
    p.outer_iter()
        .zip(z.outer_iter())
        .zip(lse)
        .map(|((pr, zr), l)| (l - pr.iter().zip(zr.iter()).map(|(a, b)| a * b).sum::<f64>()).max(0.0))
        .collect()
}

/// Gradient of `Σ_rows H(softmax(z_row))`: `∂H/∂z_j = −p_j (z_j − Σ_k p_k z_k)`.
pub fn entropy_backward(z: &Array2<f64>, scale: f64) -> Array2<f64> {
    let p = softmax_rows(z);
    let mut dz = Array2::zeros(z.dim());
    for ((mut d, pr), zr) in dz.outer_iter_mut().zip(p.outer_iter()).zip(z.outer_iter()) {
        let zbar: f64 = pr.iter().zip(zr.iter()).map(|(a, b)| a * b).sum();
        for ((dv, &pv), &zv) in d.iter_mut().zip(pr.iter()).zip(zr.iter()) {
            *dv = -scale * pv * (zv - zbar);
        }
    }
    dz
}

/// Mean over rows of `−log softmax(z)[target]`.
pub fn cross_entropy_from_logits(z: &Array2<f64>, targets: &[usize]) -> f64 {
    let lse = log_sum_exp(z.view());
    let n = targets.len() as f64;
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| lse[i] - z[[i, t]])
        .sum::<f64>()
        / n
}

pub fn cross_entropy_backward(z: &Array2<f64>, targets: &[usize], scale: f64) -> Array2<f64> {
    let n = targets.len() as f64;
    let mut dz = softmax_rows(z);
    for (i, &t) in targets.iter().enumerate() {
        dz[[i, t]] -= 1.0;
    }
    dz * (scale / n)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Multi-head self-attention weights, all `E × E` with `1 × E` biases.
pub struct AttentionWeights<'a> {
    pub wq: &'a Array2<f64>,
    pub bq: &'a Array2<f64>,
    pub wk: &'a Array2<f64>,
    pub bk: &'a Array2<f64>,
    pub wv: &'a Array2<f64>,
    pub bv: &'a Array2<f64>,
    pub wo: &'a Array2<f64>,
    pub bo: &'a Array2<f64>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub x: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// One `L × L` probability matrix per head.
    pub probs: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
}

/// Bidirectional (unmasked) multi-head self-attention.
pub fn attention(x: &Array2<f64>, w: &AttentionWeights<'_>) -> (Array2<f64>, AttentionCache) {
    let (l, e) = x.dim();
    let dh = e / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(x, w.wq, w.bq);
    let k = linear(x, w.wk, w.bk);
    let v = linear(x, w.wv, w.bv);
    let mut concat = Array2::zeros((l, e));
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let p = softmax_rows(&scores);
        concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let out = linear(&concat, w.wo, w.bo);
    (
        out,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

pub fn attention_backward(
    w: &AttentionWeights<'_>,
    cache: &AttentionCache,
    dy: &Array2<f64>,
) -> (Array2<f64>, AttentionGrads) {
    let (l, e) = cache.x.dim();
    let dh = e / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (dconcat, dwo, dbo) = linear_backward(&cache.concat, w.wo, dy);
    let mut dq = Array2::zeros((l, e));
    let mut dk = Array2::zeros((l, e));
    let mut dv = Array2::zeros((l, e));
    for h in 0..w.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let dout = dconcat.slice(cols);
        let dp = dout.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dout));
        let ds = softmax_backward(p, &dp) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let (dxq, dwq, dbq) = linear_backward(&cache.x, w.wq, &dq);
    let (dxk, dwk, dbk) = linear_backward(&cache.x, w.wk, &dk);
    let (dxv, dwv, dbv) = linear_backward(&cache.x, w.wv, &dv);
    (
        dxq + dxk + dxv,
        AttentionGrads {
            wq: dwq,
            bq: dbq,
            wk: dwk,
            bk: dbk,
            wv: dwv,
            bv: dbv,
            wo: dwo,
            bo: dbo,
        },
    )
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache {
    pub x: Array2<f64>,
    pub pre: Array2<f64>,
    pub act: Array2<f64>,
}

/// `GELU(x W1 + b1) W2 + b2`
pub fn feed_forward(
    x: &Array2<f64>,
    w1: &Array2<f64>,
    b1: &Array2<f64>,
    w2: &Array2<f64>,
    b2: &Array2<f64>,
) -> (Array2<f64>, FeedForwardCache) {
    let pre = linear(x, w1, b1);
    let act = pre.mapv(gelu);
    let out = linear(&act, w2, b2);
    (
        out,
        FeedForwardCache {
            x: x.clone(),
            pre,
            act,
        },
    )
}

/// Returns `(dx, [dW1, db1, dW2, db2])`.
pub fn feed_forward_backward(
    cache: &FeedForwardCache,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, [Array2<f64>; 4]) {
    let (dact, dw2, db2) = linear_backward(&cache.act, w2, dy);
    let dpre = dact * cache.pre.mapv(gelu_grad);
    let (dx, dw1, db1) = linear_backward(&cache.x, w1, &dpre);
    (dx, [dw1, db1, dw2, db2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `<dy, f(x)>` against an analytic `dx`.
    fn check_grad(
        x: &Array2<f64>,
        f: impl Fn(&Array2<f64>) -> Array2<f64>,
        dy: &Array2<f64>,
        dx: &Array2<f64>,
        tol: f64,
    ) {
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = ((&f(&xp) * dy).sum() - (&f(&xm) * dy).sum()) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < tol, "relative error {worst}");
    }

    #[test]
    fn linear_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, w, b, dy) = (
            rand_mat(5, 4, &mut rng),
            rand_mat(4, 3, &mut rng),
            rand_mat(1, 3, &mut rng),
            rand_mat(5, 3, &mut rng),
        );
        let (dx, dw, db) = linear_backward(&x, &w, &dy);
        check_grad(&x, |x| linear(x, &w, &b), &dy, &dx, 1e-6);
        check_grad(&w, |w| linear(&x, w, &b), &dy, &dw, 1e-6);
        check_grad(&b, |b| linear(&x, &w, b), &dy, &db, 1e-6);
    }

    #[test]
    fn layer_norm_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, g, b, dy) = (
            rand_mat(4, 6, &mut rng),
            rand_mat(1, 6, &mut rng),
            rand_mat(1, 6, &mut rng),
            rand_mat(4, 6, &mut rng),
        );
        let (_, cache) = layer_norm(&x, &g, &b, 1e-5);
        let (dx, dg, db) = layer_norm_backward(&cache, &g, &dy);
        check_grad(&x, |x| layer_norm(x, &g, &b, 1e-5).0, &dy, &dx, 1e-6);
        check_grad(&g, |g| layer_norm(&x, g, &b, 1e-5).0, &dy, &dg, 1e-6);
        check_grad(&b, |b| layer_norm(&x, &g, b, 1e-5).0, &dy, &db, 1e-6);
    }

    #[test]
    fn layer_norm_by_hand() {
        let ones = Array2::ones((1, 4));
        let zeros = Array2::zeros((1, 4));
        let (y, _) = layer_norm(&array![[1.0, 2.0, 3.0, 4.0]], &ones, &zeros, 1e-5);
        let mean = y.sum() / 4.0;
        let var = y.mapv(|v| (v - mean) * (v - mean)).sum() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
        // (1 - 2.5) / sqrt(1.25 + 1e-5)
        assert!((y[[0, 0]] + 1.5 / (1.25f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn softmax_adjoint_and_stability() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (z, dy) = (rand_mat(3, 5, &mut rng), rand_mat(3, 5, &mut rng));
        let p = softmax_rows(&z);
        check_grad(&z, softmax_rows, &dy, &softmax_backward(&p, &dy), 1e-6);
        let big = array![[1000.0, -1000.0, 999.0], [-1e3, -1e3, -1e3]];
        for row in softmax_rows(&big).outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let shifted = &z + 123.25;
        for (a, b) in softmax_rows(&shifted).iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_mat(3, 6, &mut rng) * 3.0;
        let dz = entropy_backward(&z, 1.0);
        let one = Array2::from_elem((1, 1), 1.0);
        let f = |z: &Array2<f64>| Array2::from_elem((1, 1), entropy_from_logits(z).iter().sum::<f64>());
        check_grad(&z, f, &one, &dz, 1e-6);
    }

    #[test]
    fn entropy_values() {
        let uniform = Array2::zeros((2, 4));
        for h in entropy_from_logits(&uniform) {
            assert!((h - 4f64.ln()).abs() < 1e-12);
        }
        let peaked = array![[0.0, 800.0, 0.0]];
        assert_eq!(entropy_from_logits(&peaked)[0], 0.0);
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        assert!((cross_entropy_from_logits(&Array2::zeros((3, 256)), &[0, 5, 255]) - 256f64.ln()).abs() < 1e-12);
        let mut sat = Array2::zeros((2, 4));
        sat[[0, 1]] = 30.0;
        sat[[1, 3]] = 30.0;
        assert!(cross_entropy_from_logits(&sat, &[1, 3]) < 1e-9);
        // p(target) = 0.5 and 0.25
        let z = array![[0.0, 0.0], [0.0, 3f64.ln()]];
        let ce = cross_entropy_from_logits(&z, &[0, 0]);
        assert!((ce - 1.5 * 2f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rand_mat(2, 4, &mut rng);
        let t = [3, 1];
        let one = Array2::from_elem((1, 1), 1.0);
        let f = |z: &Array2<f64>| Array2::from_elem((1, 1), cross_entropy_from_logits(z, &t));
        check_grad(&z, f, &one, &cross_entropy_backward(&z, &t, 1.0), 1e-6);
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = 6;
        let ws: Vec<Array2<f64>> = (0..4).map(|_| rand_mat(e, e, &mut rng)).collect();
        let bs: Vec<Array2<f64>> = (0..4).map(|_| rand_mat(1, e, &mut rng)).collect();
        let x = rand_mat(5, e, &mut rng);
        let dy = rand_mat(5, e, &mut rng);
        let mk = |ws: &[Array2<f64>], x: &Array2<f64>| {
            let w = AttentionWeights {
                wq: &ws[0],
                bq: &bs[0],
                wk: &ws[1],
                bk: &bs[1],
                wv: &ws[2],
                bv: &bs[2],
                wo: &ws[3],
                bo: &bs[3],
                heads: 2,
            };
            attention(x, &w).0
        };
        let w = AttentionWeights {
            wq: &ws[0],
            bq: &bs[0],
            wk: &ws[1],
            bk: &bs[1],
            wv: &ws[2],
            bv: &bs[2],
            wo: &ws[3],
            bo: &bs[3],
            heads: 2,
        };
        let (_, cache) = attention(&x, &w);
        let (dx, g) = attention_backward(&w, &cache, &dy);
        check_grad(&x, |x| mk(&ws, x), &dy, &dx, 1e-6);
        for (i, dw) in [&g.wq, &g.wk, &g.wv, &g.wo].into_iter().enumerate() {
            check_grad(
                &ws[i],
                |wi| {
                    let mut v = ws.clone();
                    v[i] = wi.clone();
                    mk(&v, &x)
                },
                &dy,
                dw,
                1e-6,
            );
        }
    }

    #[test]
    fn feed_forward_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (w1, b1, w2, b2) = (
            rand_mat(4, 7, &mut rng),
            rand_mat(1, 7, &mut rng),
            rand_mat(7, 4, &mut rng),
            rand_mat(1, 4, &mut rng),
        );
        let x = rand_mat(3, 4, &mut rng);
        let dy = rand_mat(3, 4, &mut rng);
        let (_, cache) = feed_forward(&x, &w1, &b1, &w2, &b2);
        let (dx, [dw1, db1, dw2, db2]) = feed_forward_backward(&cache, &w1, &w2, &dy);
        check_grad(&x, |x| feed_forward(x, &w1, &b1, &w2, &b2).0, &dy, &dx, 1e-6);
        check_grad(&w1, |w| feed_forward(&x, w, &b1, &w2, &b2).0, &dy, &dw1, 1e-6);
        check_grad(&b1, |b| feed_forward(&x, &w1, b, &w2, &b2).0, &dy, &db1, 1e-6);
        check_grad(&w2, |w| feed_forward(&x, &w1, &b1, w, &b2).0, &dy, &dw2, 1e-6);
        check_grad(&b2, |b| feed_forward(&x, &w1, &b1, &w2, b).0, &dy, &db2, 1e-6);
    }
}
