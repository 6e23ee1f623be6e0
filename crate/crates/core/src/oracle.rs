//! Slow, literal reference implementations for tests.
//!
//! Nothing here touches the tape or shares kernels with the production
//! paths; everything is nested loops over plain indices. Sizes are guarded
//! so a test cannot accidentally call these on realistic inputs.

use crate::attention::AttentionParams;
use crate::tensor::{Result, Tensor, TensorError};

pub const MAX_T: usize = 4;
pub const MAX_M: usize = 9;
pub const MAX_C: usize = 8;
pub const MAX_LOVASZ_PIXELS: usize = 8;

fn guard(what: &'static str, ok: bool, msg: String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(TensorError::Invalid { op: what, msg })
    }
}

fn attention_guard(t: usize, m: usize, c: usize) -> Result<()> {
    guard(
        "oracle",
        (1..=MAX_T).contains(&t) && (1..=MAX_M).contains(&m) && (1..=MAX_C).contains(&c),
        format!("size guard: t={t} m={m} c={c} exceeds t<={MAX_T} m<={MAX_M} c<={MAX_C}"),
    )
}

type Mat = Vec<Vec<f64>>;

fn rows(x: &Tensor) -> Mat {
    let [r, c] = x.shape()[..] else {
        panic!("expected a matrix, got {:?}", x.shape())
    };
    (0..r)
        .map(|i| (0..c).map(|j| x.data()[i * c + j]).collect())
        .collect()
}

fn from_rows(m: &Mat) -> Tensor {
    let r = m.len();
    let c = m[0].len();
    Tensor::new([r, c], m.iter().flatten().copied().collect()).unwrap()
}

/// `a [i,k] x b [k,j]` by the triple loop.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (a, b) = (rows(a), rows(b));
    let (ni, nk, nj) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), nk);
    let mut out = vec![vec![0.0; nj]; ni];
    for i in 0..ni {
        for j in 0..nj {
            for k in 0..nk {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    from_rows(&out)
}

fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w[0].len())
        .map(|j| (0..x.len()).map(|i| x[i] * w[i][j]).sum())
        .collect()
}

/// `exp(x_i) / sum_j exp(x_j)`, no shift.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn softmax_stable(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = xs.iter().map(|x| x - mx).collect();
    softmax(&shifted)
}

pub fn layer_norm_rows(x: &Tensor, eps: f64) -> Tensor {
    let out: Mat = rows(x)
        .into_iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
        })
        .collect();
    from_rows(&out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Qkv {
    q: Mat,
    k: Mat,
    v: Mat,
}

fn head_range(h: usize, c: usize, heads: usize) -> std::ops::Range<usize> {
    let dh = c / heads;
    h * dh..(h + 1) * dh
}

/// `sum_w p_w x_w` restricted to the channels in `r`, written into `out[r]`.
fn mix_into(out: &mut [f64], weights: &[f64], values: &[&Vec<f64>], r: std::ops::Range<usize>) {
    for d in r {
        out[d] = weights.iter().zip(values).map(|(w, v)| w * v[d]).sum();
    }
}

/// Two-stage SODA core on already-projected `q, k, v` (`[t*m, c]` each).
/// Returns the attention output before `w_out`.
pub fn soda_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    t: usize,
    m: usize,
    p: &AttentionParams,
    scale: f64,
) -> Result<Tensor> {
    let c = q.shape()[1];
    attention_guard(t, m, c)?;
    let Qkv { q, k, v } = Qkv {
        q: rows(q),
        k: rows(k),
        v: rows(v),
    };
    let (wq, wk, wv) = (rows(&p.hat_q), rows(&p.hat_k), rows(&p.hat_v));
    let n = t * m;
    let heads = p.heads;
    // y[st][s'] : time-attended value at location s'
    let mut y = vec![vec![vec![0.0; c]; m]; n];
    for h in 0..heads {
        let r = head_range(h, c, heads);
        for st in 0..n {
            for s2 in 0..m {
                let logits: Vec<f64> = (0..t)
                    .map(|t2| scale * dot(&q[st][r.clone()], &k[t2 * m + s2][r.clone()]))
                    .collect();
                let w = softmax_stable(&logits);
                let vals: Vec<&Vec<f64>> = (0..t).map(|t2| &v[t2 * m + s2]).collect();
                mix_into(&mut y[st][s2], &w, &vals, r.clone());
            }
        }
    }
    let mut out = vec![vec![0.0; c]; n];
    for st in 0..n {
        let s = st % m;
        let qh = vec_mat(&y[st][s], &wq);
        let kh: Mat = (0..m).map(|s2| vec_mat(&y[st][s2], &wk)).collect();
        let vh: Mat = (0..m).map(|s2| vec_mat(&y[st][s2], &wv)).collect();
        for h in 0..heads {
            let r = head_range(h, c, heads);
            let logits: Vec<f64> = (0..m)
                .map(|s2| scale * dot(&qh[r.clone()], &kh[s2][r.clone()]))
                .collect();
            let w = softmax_stable(&logits);
            let vals: Vec<&Vec<f64>> = vh.iter().collect();
            mix_into(&mut out[st], &w, &vals, r);
        }
    }
    Ok(from_rows(&out))
}

/// Trajectory core: per-frame spatial softmax, then a temporal softmax over
/// re-projected per-frame summaries (query from the token's own frame).
pub fn trajectory_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    t: usize,
    m: usize,
    p: &AttentionParams,
    scale: f64,
) -> Result<Tensor> {
    let c = q.shape()[1];
    attention_guard(t, m, c)?;
    let (q, k, v) = (rows(q), rows(k), rows(v));
    let (wq, wk, wv) = (rows(&p.hat_q), rows(&p.hat_k), rows(&p.hat_v));
    let n = t * m;
    let heads = p.heads;
    let mut y = vec![vec![vec![0.0; c]; t]; n];
    for h in 0..heads {
        let r = head_range(h, c, heads);
        for st in 0..n {
            for t2 in 0..t {
                let logits: Vec<f64> = (0..m)
                    .map(|s2| scale * dot(&q[st][r.clone()], &k[t2 * m + s2][r.clone()]))
                    .collect();
                let w = softmax_stable(&logits);
                let vals: Vec<&Vec<f64>> = (0..m).map(|s2| &v[t2 * m + s2]).collect();
                mix_into(&mut y[st][t2], &w, &vals, r.clone());
            }
        }
    }
    let mut out = vec![vec![0.0; c]; n];
    for st in 0..n {
        let own = st / m;
        let qh = vec_mat(&y[st][own], &wq);
        let kh: Mat = (0..t).map(|t2| vec_mat(&y[st][t2], &wk)).collect();
        let vh: Mat = (0..t).map(|t2| vec_mat(&y[st][t2], &wv)).collect();
        for h in 0..heads {
            let r = head_range(h, c, heads);
            let logits: Vec<f64> = (0..t)
                .map(|t2| scale * dot(&qh[r.clone()], &kh[t2][r.clone()]))
                .collect();
            let w = softmax_stable(&logits);
            let vals: Vec<&Vec<f64>> = vh.iter().collect();
            mix_into(&mut out[st], &w, &vals, r);
        }
    }
    Ok(from_rows(&out))
}

/// One softmax over all `n` tokens per query.
pub fn joint_core(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, scale: f64) -> Result<Tensor> {
    let (n, c) = (q.shape()[0], q.shape()[1]);
    guard(
        "oracle",
        n <= MAX_T * MAX_M && c <= MAX_C,
        format!("size guard: n={n} c={c}"),
    )?;
    let (q, k, v) = (rows(q), rows(k), rows(v));
    let mut out = vec![vec![0.0; c]; n];
    for h in 0..heads {
        let r = head_range(h, c, heads);
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| scale * dot(&q[i][r.clone()], &k[j][r.clone()]))
                .collect();
            let w = softmax_stable(&logits);
            let vals: Vec<&Vec<f64>> = v.iter().collect();
            mix_into(&mut out[i], &w, &vals, r.clone());
        }
    }
    Ok(from_rows(&out))
}

/// Which core a block oracle wraps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Core {
    Soda,
    Trajectory,
    Joint,
}

/// `x + core(LN(x) W_q, LN(x) W_k, LN(x) W_v) W_out`.
pub fn block(
    core: Core,
    x: &Tensor,
    t: usize,
    m: usize,
    p: &AttentionParams,
    scale: f64,
    eps: f64,
) -> Result<Tensor> {
    let z = layer_norm_rows(x, eps);
    let (q, k, v) = (matmul(&z, &p.w_q), matmul(&z, &p.w_k), matmul(&z, &p.w_v));
    let a = match core {
        Core::Soda => soda_core(&q, &k, &v, t, m, p, scale)?,
        Core::Trajectory => trajectory_core(&q, &k, &v, t, m, p, scale)?,
        Core::Joint => joint_core(&q, &k, &v, p.heads, scale)?,
    };
    let branch = matmul(&a, &p.w_out);
    let data = x
        .data()
        .iter()
        .zip(branch.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Single-axis attention where queries, keys and values are the rows of `v`
/// re-projected through `hat_*`. This is what both two-stage cores collapse
/// to when their first stage has one element per group: SODA at `t = 1`
/// (spatial) and trajectory at `m = 1` (temporal).
pub fn reprojected_self_attention(v: &Tensor, p: &AttentionParams, scale: f64) -> Result<Tensor> {
    let (n, c) = (v.shape()[0], v.shape()[1]);
    guard(
        "oracle",
        n <= MAX_T * MAX_M && c <= MAX_C,
        format!("size guard: n={n} c={c}"),
    )?;
    let qh = matmul(v, &p.hat_q);
    let kh = matmul(v, &p.hat_k);
    let vh = matmul(v, &p.hat_v);
    joint_core(&qh, &kh, &vh, p.heads, scale)
}

/// SODA with a single frame: the temporal softmax is over one element, so
/// the deformation field is just `v`, and the block reduces to spatial
/// attention over re-projected values.
pub fn soda_single_frame(x: &Tensor, p: &AttentionParams, scale: f64, eps: f64) -> Result<Tensor> {
    let z = layer_norm_rows(x, eps);
    let v = matmul(&z, &p.w_v);
    let a = reprojected_self_attention(&v, p, scale)?;
    let branch = matmul(&a, &p.w_out);
    let data = x
        .data()
        .iter()
        .zip(branch.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Trajectory core with one location per frame: pure temporal attention
/// over re-projected values.
pub fn trajectory_single_location(v: &Tensor, p: &AttentionParams, scale: f64) -> Result<Tensor> {
    reprojected_self_attention(v, p, scale)
}

/// SODA core with one location per frame: temporal attention, then the
/// single-element spatial softmax passes `y W^_v` straight through.
pub fn soda_single_location(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
    scale: f64,
) -> Result<Tensor> {
    let y = joint_core(q, k, v, p.heads, scale)?;
    Ok(matmul(&y, &p.hat_v))
}

/// Jaccard loss of the set of mispredicted pixels `set` given the foreground
/// `gt`: `|M| / |Gt u M|`, zero on an empty union.
fn jaccard_set_loss(set: &[usize], gt: &[bool]) -> f64 {
    let mut union: Vec<usize> = (0..gt.len()).filter(|&i| gt[i]).collect();
    for &i in set {
        if !union.contains(&i) {
            union.push(i);
        }
    }
    if union.is_empty() {
        0.0
    } else {
        set.len() as f64 / union.len() as f64
    }
}

/// Lovász extension of the Jaccard loss at the hinge errors of one frame,
/// by explicit enumeration of the sorted prefixes.
pub fn lovasz_hinge_frame(logits: &[f64], targets: &[f64]) -> Result<f64> {
    guard(
        "oracle_lovasz",
        logits.len() <= MAX_LOVASZ_PIXELS && logits.len() == targets.len(),
        format!("size guard: {} pixels", logits.len()),
    )?;
    let gt: Vec<bool> = targets.iter().map(|&y| y == 1.0).collect();
    let errors: Vec<f64> = logits
        .iter()
        .zip(&gt)
        .map(|(&x, &g)| (1.0 - if g { x } else { -x }).max(0.0))
        .collect();
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap());
    let mut total = 0.0;
    for i in 0..order.len() {
        let with = jaccard_set_loss(&order[..=i], &gt);
        let without = jaccard_set_loss(&order[..i], &gt);
        total += errors[order[i]] * (with - without);
    }
    Ok(total)
}

/// Per-frame Lovász hinge averaged over frames of `[t, h, w]` inputs.
pub fn lovasz_hinge(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    let t = logits.shape()[0];
    let per = logits.numel() / t;
    let mut sum = 0.0;
    for f in 0..t {
        let r = f * per..(f + 1) * per;
        sum += lovasz_hinge_frame(&logits.data()[r.clone()], &targets.data()[r])?;
    }
    Ok(sum / t as f64)
}

/// `-mean[y log s(x) + (1-y) log(1 - s(x))]`, written literally.
pub fn bce(logits: &Tensor, targets: &Tensor) -> f64 {
    let n = logits.numel() as f64;
    logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &y)| {
            let s = 1.0 / (1.0 + (-x).exp());
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / n
}

/// `-log(P / (P + N))` with `P = sum exp(pos/tau)`, `N = sum exp(neg/tau)`.
pub fn scotch_term(pos: &[f64], neg: &[f64], tau: f64) -> f64 {
    let p: f64 = pos.iter().map(|s| (s / tau).exp()).sum();
    let n: f64 = neg.iter().map(|s| (s / tau).exp()).sum();
    -(p / (p + n)).ln()
}

/// Every shadow feature is a query once; its positives are the other shadow
/// features, its negatives all non-shadow features. Mean over queries; zero
/// with fewer than two shadow features or no non-shadow feature.
pub fn scotch(shadow: &[Vec<f64>], non_shadow: &[Vec<f64>], tau: f64) -> f64 {
    if shadow.len() < 2 || non_shadow.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for (i, q) in shadow.iter().enumerate() {
        let pos: Vec<f64> = shadow
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| dot(q, p))
            .collect();
        let neg: Vec<f64> = non_shadow.iter().map(|n| dot(q, n)).collect();
        sum += scotch_term(&pos, &neg, tau);
    }
    sum / shadow.len() as f64
}

/// Coarse cell is shadow iff at least half of its `d x d` pixels are.
/// `mask` is `[h, w]` row-major.
pub fn downsample_mask(mask: &[f64], h: usize, w: usize, d: usize) -> Vec<f64> {
    let (hc, wc) = (h / d, w / d);
    let mut out = vec![0.0; hc * wc];
    for i in 0..hc {
        for j in 0..wc {
            let mut count = 0;
            for a in 0..d {
                for b in 0..d {
                    if mask[(i * d + a) * w + j * d + b] == 1.0 {
                        count += 1;
                    }
                }
            }
            out[i * wc + j] = if 2 * count >= d * d { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Masked mean per frame and class of `[t*m, c]` tokens under `[t*m]`
/// binary masks. Returns `(frame, is_shadow, vector)`, shadow first within
/// a frame; empty regions are skipped.
pub fn pool_regions(
    tokens: &Tensor,
    masks: &[f64],
    t: usize,
    normalize: bool,
) -> Vec<(usize, bool, Vec<f64>)> {
    let x = rows(tokens);
    let m = x.len() / t;
    let c = x[0].len();
    let mut out = Vec::new();
    for f in 0..t {
        for class in [true, false] {
            let mut acc = vec![0.0; c];
            let mut count = 0usize;
            for s in 0..m {
                if (masks[f * m + s] == 1.0) == class {
                    count += 1;
                    for d in 0..c {
                        acc[d] += x[f * m + s][d];
                    }
                }
            }
            if count == 0 {
                continue;
            }
            let mut v: Vec<f64> = acc.iter().map(|a| a / count as f64).collect();
            if normalize {
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.iter_mut().for_each(|a| *a /= norm);
            }
            out.push((f, class, v));
        }
    }
    out
}

/// `(tp, fp, tn, fn)` pixel by pixel.
pub fn confusion(pred: &[f64], gt: &[f64], threshold: f64) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= threshold, g == 1.0) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    c
}

/// `(mae, f_beta, iou, ber, s_ber, n_ber)` with the 0/0 conventions
/// (error rates 0, precision and recall 1).
pub fn report(pred: &[f64], gt: &[f64], threshold: f64, beta2: f64) -> [f64; 6] {
    let mae = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64;
    let (tp, fp, tn, fn_) = confusion(pred, gt, threshold);
    let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let ratio = |a: f64, b: f64, empty: f64| if b == 0.0 { empty } else { a / b };
    let p = ratio(tp, tp + fp, 1.0);
    let r = ratio(tp, tp + fn_, 1.0);
    let f = ratio((1.0 + beta2) * p * r, beta2 * p + r, 0.0);
    let iou = ratio(tp, tp + fp + fn_, 1.0);
    let s = 100.0 * ratio(fn_, tp + fn_, 0.0);
    let n = 100.0 * ratio(fp, tn + fp, 0.0);
    [mae, f, iou, (s + n) / 2.0, s, n]
}

/// Bilinear resize of one `[h, w]` map with half-pixel centers and edge
/// clamping, evaluated pixel by pixel.
pub fn bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sample = |o: usize, n_out: usize, n_in: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (x.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        let (y0, y1, fy) = sample(i, oh, h);
        for j in 0..ow {
            let (x0, x1, fx) = sample(j, ow, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[i * ow + j] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let mut g = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(TensorError::Invalid {
                op: "finite_difference_grad",
                msg: format!("non-finite value at coordinate {i}: f(+)={hi} f(-)={lo}"),
            });
        }
        g.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(g)
}

/// Central difference of `f` along direction `dir`.
pub fn directional_derivative(
    mut f: impl FnMut(&[Tensor]) -> f64,
    x: &[Tensor],
    dir: &[Tensor],
    eps: f64,
) -> Result<f64> {
    let shift = |s: f64| -> Vec<Tensor> {
        x.iter()
            .zip(dir)
            .map(|(a, d)| {
                let data = a
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(a, d)| a + s * d)
                    .collect();
                Tensor::new(a.shape().to_vec(), data).unwrap()
            })
            .collect()
    };
    let hi = f(&shift(eps));
    let lo = f(&shift(-eps));
    if !hi.is_finite() || !lo.is_finite() {
        return Err(TensorError::Invalid {
            op: "directional_derivative",
            msg: format!("non-finite value: f(+)={hi} f(-)={lo}"),
        });
    }
    Ok((hi - lo) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::new([3], vec![0.3, -1.0, 2.0]).unwrap();
        let g = finite_difference_grad(|x| x.data().iter().sum(), &x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&Tensor::ones([3])) < 1e-9);
    }

    #[test]
    fn fd_of_half_norm_is_identity() {
        let x = Tensor::new([3], vec![0.3, -1.0, 2.0]).unwrap();
        let g = finite_difference_grad(
            |x| 0.5 * x.data().iter().map(|v| v * v).sum::<f64>(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(g.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn fd_rejects_non_finite() {
        let x = Tensor::new([1], vec![0.0]).unwrap();
        assert!(finite_difference_grad(|x| x.data()[0].ln(), &x, 1e-5).is_err());
    }

    #[test]
    fn lovasz_single_pixel() {
        assert_eq!(lovasz_hinge_frame(&[0.0], &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn lovasz_guard() {
        assert!(lovasz_hinge_frame(&[0.0; 9], &[1.0; 9]).is_err());
    }

    #[test]
    fn attention_guard_rejects_large() {
        let p = AttentionParams::identity(2);
        let x = Tensor::zeros([50, 2]);
        assert!(soda_core(&x, &x, &x, 5, 10, &p, 1.0).is_err());
    }

    #[test]
    fn report_hand_counts() {
        // tp=6 fp=2 tn=10 fn=2
        let mut pred = vec![1.0; 8];
        pred.extend(vec![0.0; 12]);
        let mut gt = vec![1.0; 6];
        gt.extend([0.0, 0.0]);
        gt.extend(vec![0.0; 10]);
        gt.extend([1.0, 1.0]);
        let r = report(&pred, &gt, 0.5, 0.3);
        assert!((r[1] - 0.75).abs() < 1e-15);
        assert!((r[2] - 0.6).abs() < 1e-15);
        assert!((r[3] - 125.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_identity_size() {
        let src: Vec<f64> = (0..6).map(|i| i as f64).collect();
        assert_eq!(bilinear(&src, 2, 3, 2, 3), src);
    }
}
