//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use asia_core::autodiff::Mat;
use asia_core::fusion::PartialAtlas;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random `[R, hw]` cross-attention (columns are distributions over parts)
/// and `[hw, hw]` row-stochastic self-attention.
pub fn random_stack(rng: &mut ChaCha8Rng, parts: usize, hw: usize) -> (Mat, Mat) {
    let mut ca = Array2::from_shape_fn((parts, hw), |_| rng.gen_range(0.01..1.0));
    for mut col in ca.columns_mut() {
        let s = col.sum();
        col /= s;
    }
    let mut sa = Array2::from_shape_fn((hw, hw), |_| rng.gen_range(0.0..1.0f64).powi(3));
    for mut row in sa.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    (ca, sa)
}

/// Corner-aligned bilinear sample positions along one axis.
fn axis_pos(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_out == 1 || n_in == 1 {
        return (0, 0, 0.0);
    }
    let s = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, s - lo as f64)
}

/// WAS by explicit loops: contract over keys, bilinearly resize, softmax.
/// Returns `[R, H, W]`.
pub fn was_oracle(ca: &Mat, sa: &Mat, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let parts = ca.nrows();
    let hw = h * w;
    let mut raw = vec![vec![0.0; hw]; parts];
    for r in 0..parts {
        for i in 0..hw {
            let mut s = 0.0;
            for j in 0..hw {
                s += ca[[r, j]] * sa[[i, j]];
            }
            raw[r][i] = s;
        }
    }
    let mut out = vec![0.0; parts * oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = axis_pos(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = axis_pos(x, w, ow);
            let vals: Vec<f64> = (0..parts)
                .map(|r| {
                    let g = |yy: usize, xx: usize| raw[r][yy * w + xx];
                    (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1))
                })
                .collect();
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = vals.iter().map(|v| (v - m).exp()).sum();
            for r in 0..parts {
                out[r * oh * ow + y * ow + x] = (vals[r] - m).exp() / z;
            }
        }
    }
    out
}

/// Mode with ties to the lowest label, from scratch.
pub fn mode_lowest(labels: &[u16], parts: usize) -> Option<u16> {
    let mut counts = vec![0usize; parts];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let max = *counts.iter().max()?;
    if max == 0 {
        return None;
    }
    counts.iter().position(|&c| c == max).map(|p| p as u16)
}

/// Expands every texel's splat counts into a label list, recomputes each
/// view's local mode and votes one label per covering view.
pub fn vote_oracle(partials: &[PartialAtlas]) -> (Vec<Option<u16>>, Vec<u32>) {
    let (n, parts) = (partials[0].width * partials[0].height, partials[0].parts);
    let mut labels = Vec::with_capacity(n);
    let mut votes = vec![0u32; n * parts];
    for t in 0..n {
        let mut ballots = Vec::new();
        for p in partials {
            let mut splats = Vec::new();
            for r in 0..parts {
                for _ in 0..p.label_counts[t * parts + r] {
                    splats.push(r as u16);
                }
            }
            if let Some(m) = mode_lowest(&splats, parts) {
                ballots.push(m);
                votes[t * parts + m as usize] += 1;
            }
        }
        labels.push(mode_lowest(&ballots, parts));
    }
    (labels, votes)
}

/// Per-part IoU by building the two index sets and counting.
pub fn iou_oracle(pred: &[u16], gt: &[u16], valid: &[bool], parts: usize) -> Vec<Option<f64>> {
    use std::collections::BTreeSet;
    (0..parts as u16)
        .map(|r| {
            let a: BTreeSet<usize> = (0..pred.len()).filter(|&i| valid[i] && pred[i] == r).collect();
            let b: BTreeSet<usize> = (0..gt.len()).filter(|&i| valid[i] && gt[i] == r).collect();
            let union = a.union(&b).count();
            (union > 0).then(|| a.intersection(&b).count() as f64 / union as f64)
        })
        .collect()
}

/// Worst-match correspondence by double loop over all pixels of each part.
pub fn corr_oracle(fi: &Mat, fj: &Mat, li: &[u16], lj: &[u16], parts: usize) -> f64 {
    let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            a.dot(&b) / (na * nb)
        }
    };
    let mut means = Vec::new();
    for r in 0..parts as u16 {
        let pi: Vec<usize> = (0..li.len()).filter(|&k| li[k] == r).collect();
        let pj: Vec<usize> = (0..lj.len()).filter(|&k| lj[k] == r).collect();
        if pi.is_empty() || pj.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for &a in &pi {
            let worst = pj.iter().map(|&b| cos(fi.row(a), fj.row(b))).fold(f64::INFINITY, f64::min);
            s += worst;
        }
        means.push(s / pi.len() as f64);
    }
    if means.is_empty() {
        0.0
    } else {
        1.0 - means.iter().sum::<f64>() / means.len() as f64
    }
}

/// Central-difference check of `grad` at randomly drawn coordinates of `x`.
/// Returns the largest relative error `|a - n| / max(|a|, |n|, floor * max(1, |f(x)|))`.
pub fn fd_max_rel_err(
    x: &Mat,
    grad: &Mat,
    coords: usize,
    step: f64,
    floor: f64,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&Mat) -> f64,
) -> f64 {
    let floor = floor * f(x).abs().max(1.0);
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let (r, c) = (rng.gen_range(0..x.nrows()), rng.gen_range(0..x.ncols()));
        let mut plus = x.clone();
        plus[[r, c]] += step;
        let mut minus = x.clone();
        minus[[r, c]] -= step;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * step);
        let analytic = grad[[r, c]];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// `P(X <= k)` for `X ~ Binomial(n, p)`.
pub fn binom_cdf(k: usize, n: usize, p: f64) -> f64 {
    let mut total = 0.0;
    let mut coeff = 1.0;
    for i in 0..=k.min(n) {
        if i > 0 {
            coeff *= (n - i + 1) as f64 / i as f64;
        }
        total += coeff * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32);
    }
    total
}

/// Probability that a view's local mode over `n` splats could be wrong:
/// the correct label fails to hold a strict majority.
pub fn local_mode_error(n: usize, keep: f64) -> f64 {
    binom_cdf(n / 2, n, keep)
}

/// Probability that at most half of independent views with per-view error
/// rates `q` report the correct label (Poisson-binomial tail).
pub fn majority_error(q: &[f64]) -> f64 {
    let mut dist = vec![1.0];
    for &qi in q {
        let mut next = vec![0.0; dist.len() + 1];
        for (c, &p) in dist.iter().enumerate() {
            next[c] += p * qi;
            next[c + 1] += p * (1.0 - qi);
        }
        dist = next;
    }
    let k = q.len();
    dist.iter().take(k / 2 + 1).sum()
}
