//! Attention maps and the weighted accumulated self-attention (WAS)
//! segmentation map.
//!
//! Every operation is built on an [`autodiff::Graph`](crate::autodiff::Graph)
//! so the same code path serves plain evaluation and gradient computation.
//! The `*_graph` functions record onto a caller's graph; the plain functions
//! wrap them in a throwaway graph.

use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::{Graph, Mat, SparseLinear, Var};
use crate::error::{Error, Result};

/// Which index of the self-attention matrix the WAS contraction sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WasContraction {
    /// `W[r, i] = Σ_j F_ca[r, j] · F_sa[i, j]`: location `i` gathers the part
    /// evidence of the locations it attends to.
    KeyIndex,
    /// `W[r, i] = Σ_j F_ca[r, j] · F_sa[j, i]`.
    QueryIndex,
}

pub const WAS_CONTRACTION: WasContraction = WasContraction::KeyIndex;

/// Per-pixel part probabilities, stored channel-outermost `[R, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub parts: usize,
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
}

impl LabelMap {
    pub fn new(parts: usize, width: usize, height: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != parts * width * height {
            return Err(Error::contract("label map buffer has the wrong length"));
        }
        let map = Self {
            parts,
            width,
            height,
            probs,
        };
        let n = width * height;
        for i in 0..n {
            let s: f64 = (0..parts).map(|r| map.probs[r * n + i]).sum();
            if (s - 1.0).abs() > 1e-6 || (0..parts).any(|r| !(map.probs[r * n + i] >= 0.0)) {
                return Err(Error::contract(format!("pixel {i} is not a probability vector")));
            }
        }
        Ok(map)
    }

    pub fn one_hot(parts: usize, width: usize, height: usize, labels: &[u16]) -> Result<Self> {
        let n = width * height;
        if labels.len() != n {
            return Err(Error::contract("label list does not match resolution"));
        }
        let mut probs = vec![0.0; parts * n];
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= parts {
                return Err(Error::contract(format!("label {l} >= part count {parts}")));
            }
            probs[l as usize * n + i] = 1.0;
        }
        Ok(Self {
            parts,
            width,
            height,
            probs,
        })
    }

    /// Builds from a `[H·W, R]` matrix (one row per pixel).
    pub fn from_pixel_rows(rows: &Mat, width: usize, height: usize) -> Result<Self> {
        let n = width * height;
        if rows.nrows() != n {
            return Err(Error::contract("pixel-row matrix does not match resolution"));
        }
        let parts = rows.ncols();
        let mut probs = vec![0.0; parts * n];
        for ((i, r), v) in rows.indexed_iter() {
            probs[r * n + i] = *v;
        }
        Ok(Self {
            parts,
            width,
            height,
            probs,
        })
    }

    pub fn to_pixel_rows(&self) -> Mat {
        let n = self.width * self.height;
        Array2::from_shape_fn((n, self.parts), |(i, r)| self.probs[r * n + i])
    }

    pub fn prob(&self, part: usize, pixel: usize) -> f64 {
        self.probs[part * self.width * self.height + pixel]
    }

    /// Hard label per pixel; ties go to the lowest part index.
    pub fn argmax(&self) -> Vec<u16> {
        let n = self.width * self.height;
        (0..n)
            .map(|i| {
                let mut best = 0;
                for r in 1..self.parts {
                    if self.probs[r * n + i] > self.probs[best * n + i] {
                        best = r;
                    }
                }
                best as u16
            })
            .collect()
    }
}

/// Cross- and self-attention recorded from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub parts: usize,
    pub h: usize,
    pub w: usize,
    /// `[R, h·w]`.
    pub f_ca: Mat,
    /// `[h·w, h·w]`, each row a distribution over keys.
    pub f_sa: Mat,
}

impl AttentionStack {
    pub fn new(f_ca: Mat, f_sa: Mat, h: usize, w: usize) -> Result<Self> {
        let hw = h * w;
        let parts = f_ca.nrows();
        if parts < 2 {
            return Err(Error::contract("attention stack needs at least 2 parts"));
        }
        if f_ca.ncols() != hw || f_sa.dim() != (hw, hw) {
            return Err(Error::contract(format!(
                "attention shapes {:?}/{:?} do not match latent {h}x{w}",
                f_ca.dim(),
                f_sa.dim()
            )));
        }
        if f_ca.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::contract("cross-attention must be finite and non-negative"));
        }
        for row in f_sa.rows() {
            if row.iter().any(|&v| !(v >= 0.0)) || (row.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::contract("self-attention rows must be distributions"));
            }
        }
        Ok(Self {
            parts,
            h,
            w,
            f_ca,
            f_sa,
        })
    }
}

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::contract(format!("{what} has non-finite entries")))
    }
}

/// `softmax(q kᵀ / √d)` recorded on `g`.
pub fn attention_map_graph(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let d = g.value(q).ncols();
    if d == 0 || g.value(k).ncols() != d {
        return Err(Error::contract("query/key feature dims must match and be >= 1"));
    }
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt)?;
    let scaled = g.scale(logits, 1.0 / (d as f64).sqrt());
    Ok(g.softmax_rows(scaled))
}

/// Row-normalized attention of `n` queries over `p` keys.
pub fn attention_map(q: &Mat, k: &Mat) -> Result<Mat> {
    check_finite(q, "query")?;
    check_finite(k, "key")?;
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let out = attention_map_graph(&mut g, qv, kv)?;
    Ok(g.value(out).clone())
}

/// Corner-aligned bilinear resampling from `src` to `dst` (both `(h, w)`),
/// as a linear map on row-major flattened images.
pub fn bilinear_resampler(src: (usize, usize), dst: (usize, usize)) -> SparseLinear {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = if n_out > 1 && n_in > 1 {
                    (o * (n_in - 1)) as f64 / (n_out - 1) as f64
                } else {
                    0.0
                };
                let i0 = (s.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(src.0, dst.0), axis(src.1, dst.1));
    let mut taps = Vec::with_capacity(dst.0 * dst.1);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let mut t = Vec::with_capacity(4);
            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let w = wy * wx;
                    if w != 0.0 {
                        t.push((yy * src.1 + xx, w));
                    }
                }
            }
            taps.push(t);
        }
    }
    SparseLinear {
        src_len: src.0 * src.1,
        dst_len: dst.0 * dst.1,
        taps,
    }
}

fn square_side(len: usize) -> Option<usize> {
    let s = (len as f64).sqrt().round() as usize;
    (s * s == len).then_some(s)
}

/// Resizes each `[C, s²]` layer to `target` and averages them.
pub fn average_attention_graph(g: &mut Graph, layers: &[Var], target: (usize, usize)) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::contract("average_attention: empty layer list"));
    }
    let mut resized = Vec::with_capacity(layers.len());
    for &layer in layers {
        let cols = g.value(layer).ncols();
        let side = square_side(cols)
            .ok_or_else(|| Error::contract(format!("layer with {cols} locations is not square")))?;
        if (side, side) == target {
            resized.push(layer);
        } else {
            let map = Arc::new(bilinear_resampler((side, side), target));
            resized.push(g.linear_rows(layer, map)?);
        }
    }
    if resized.len() == 1 {
        return Ok(resized[0]);
    }
    let total = g.add_all(&resized)?;
    Ok(g.scale(total, 1.0 / resized.len() as f64))
}

pub fn average_attention(layers: &[Mat], target: (usize, usize)) -> Result<Mat> {
    let mut g = Graph::new();
    let vars: Vec<Var> = layers.iter().map(|l| g.constant(l.clone())).collect();
    let out = average_attention_graph(&mut g, &vars, target)?;
    Ok(g.value(out).clone())
}

/// Unnormalized WAS map `[R, h·w]`.
pub fn was_raw_graph(g: &mut Graph, f_ca: Var, f_sa: Var) -> Result<Var> {
    match WAS_CONTRACTION {
        WasContraction::KeyIndex => {
            let sa_t = g.transpose(f_sa);
            g.matmul(f_ca, sa_t)
        }
        WasContraction::QueryIndex => g.matmul(f_ca, f_sa),
    }
}

/// WAS segmentation as `[H·W, R]` pixel rows: contract, resize each part
/// channel from `latent` to `out`, softmax over parts.
pub fn was_map_graph(
    g: &mut Graph,
    f_ca: Var,
    f_sa: Var,
    latent: (usize, usize),
    out: (usize, usize),
) -> Result<Var> {
    let raw = was_raw_graph(g, f_ca, f_sa)?;
    let resized = if latent == out {
        raw
    } else {
        g.linear_rows(raw, Arc::new(bilinear_resampler(latent, out)))?
    };
    let pixels = g.transpose(resized);
    Ok(g.softmax_rows(pixels))
}

pub fn was_raw(stack: &AttentionStack) -> Mat {
    let mut g = Graph::new();
    let (ca, sa) = (g.constant(stack.f_ca.clone()), g.constant(stack.f_sa.clone()));
    let raw = was_raw_graph(&mut g, ca, sa).expect("stack shapes validated");
    g.value(raw).clone()
}

/// Segmentation map at resolution `out = (H, W)`.
pub fn was_map(stack: &AttentionStack, out: (usize, usize)) -> Result<LabelMap> {
    let mut g = Graph::new();
    let (ca, sa) = (g.constant(stack.f_ca.clone()), g.constant(stack.f_sa.clone()));
    let rows = was_map_graph(&mut g, ca, sa, (stack.h, stack.w), out)?;
    LabelMap::from_pixel_rows(g.value(rows), out.1, out.0)
}
