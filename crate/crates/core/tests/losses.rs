mod common;

use asia_core::attention::LabelMap;
use asia_core::autodiff::{Graph, Mat, Var};
use asia_core::losses::{
    ce_graph, corr_graph, ldm_graph, loss_ce, loss_corr, loss_ldm, loss_mse, mse_graph, CorrSampling, GtMasks,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_gt(rng: &mut ChaCha8Rng, parts: usize, w: usize, h: usize) -> GtMasks {
    GtMasks::new(parts, w, h, (0..w * h).map(|_| rng.gen_range(0..parts) as u16).collect()).unwrap()
}

/// Column-stochastic `[R, n]`.
fn random_probs(rng: &mut ChaCha8Rng, parts: usize, n: usize) -> Mat {
    let mut m = Array2::from_shape_fn((parts, n), |_| rng.gen_range(0.05..1.0));
    for mut c in m.columns_mut() {
        let s = c.sum();
        c /= s;
    }
    m
}

#[test]
fn ldm_matches_direct_summation() {
    let mut r = rng(1);
    let a = Array2::from_shape_fn((5, 7), |_| r.gen_range(-3.0..3.0));
    let b = Array2::from_shape_fn((5, 7), |_| r.gen_range(-3.0..3.0));
    let want: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 35.0;
    assert!((loss_ldm(&a, &b).unwrap() - want).abs() < 1e-7);
    assert_eq!(loss_ldm(&a, &a).unwrap(), 0.0);
    assert!((loss_ldm(&(&a + 1.0), &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ce_matches_per_pixel_negative_log() {
    let mut r = rng(2);
    let f: Mat = Array2::from_shape_fn((3, 9), |_| r.gen_range(0.01..2.0));
    let gt = random_gt(&mut r, 3, 3, 3);
    let want: f64 = (0..9)
        .map(|i| {
            let col = f.column(i);
            -(col[gt.labels[i] as usize] / col.sum()).ln()
        })
        .sum::<f64>()
        / 9.0;
    assert!((loss_ce(&f, (3, 3), &gt).unwrap().0 - want).abs() < 1e-7);
}

#[test]
fn mse_matches_direct_summation() {
    let mut r = rng(3);
    let p = random_probs(&mut r, 4, 30);
    let gt = random_gt(&mut r, 4, 6, 5);
    let map = LabelMap::new(4, 6, 5, p.iter().copied().collect()).unwrap();
    let mut want = 0.0;
    for k in 0..4 {
        for i in 0..30 {
            let t = (gt.labels[i] as usize == k) as u8 as f64;
            want += (p[[k, i]] - t).powi(2);
        }
    }
    want /= 120.0;
    assert!((loss_mse(&map, &gt).unwrap() - want).abs() < 1e-7);
}

fn unit_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
    let mut m: Mat = Array2::from_shape_fn((n, d), |_| r.gen_range(-1.0..1.0));
    for mut row in m.rows_mut() {
        let s = row.dot(&row).sqrt();
        row /= s;
    }
    m
}

#[test]
fn corr_matches_double_loop() {
    let mut r = rng(4);
    for _ in 0..50 {
        let li: Vec<u16> = vec![0, 1, 0, 1, 1, 0];
        let lj: Vec<u16> = vec![1, 1, 0, 0, 1, 0];
        let (fi, fj) = (unit_rows(&mut r, 6, 4), unit_rows(&mut r, 6, 4));
        let gi = GtMasks::new(2, 6, 1, li.clone()).unwrap();
        let gj = GtMasks::new(2, 6, 1, lj.clone()).unwrap();
        let got = loss_corr(&fi.t().to_owned(), &fj.t().to_owned(), &gi, &gj, CorrSampling::default()).unwrap().0;
        assert!((got - common::corr_oracle(&fi, &fj, &li, &lj, 2)).abs() < 1e-7);
    }
}

#[test]
fn corr_is_symmetric_under_relabeling_and_scale_free() {
    let mut r = rng(5);
    let gi = random_gt(&mut r, 3, 5, 4);
    let gj = random_gt(&mut r, 3, 5, 4);
    let fi = Array2::from_shape_fn((3, 20), |_| r.gen_range(-1.0..1.0));
    let fj = Array2::from_shape_fn((3, 20), |_| r.gen_range(-1.0..1.0));
    let base = loss_corr(&fi, &fj, &gi, &gj, CorrSampling::default()).unwrap().0;

    let perm = [2u16, 0, 1];
    let relabel = |g: &GtMasks| GtMasks::new(3, 5, 4, g.labels.iter().map(|&l| perm[l as usize]).collect()).unwrap();
    let swapped = loss_corr(&fi, &fj, &relabel(&gi), &relabel(&gj), CorrSampling::default()).unwrap().0;
    assert!((base - swapped).abs() < 1e-12);

    let mut scaled = fi.clone();
    scaled.column_mut(7).mapv_inplace(|v| v * 7.3);
    let rescaled = loss_corr(&scaled, &fj, &gi, &gj, CorrSampling::default()).unwrap().0;
    assert!((base - rescaled).abs() < 1e-12);
}

#[test]
fn losses_are_nonnegative_and_vanish_at_perfect_inputs() {
    let mut r = rng(6);
    for _ in 0..20 {
        let gt = random_gt(&mut r, 3, 4, 4);
        let p = random_probs(&mut r, 3, 16);
        assert!(loss_ce(&p, (4, 4), &gt).unwrap().0 >= 0.0);
        let map = LabelMap::new(3, 4, 4, p.iter().copied().collect()).unwrap();
        assert!(loss_mse(&map, &gt).unwrap() >= 0.0);
        let f = Array2::from_shape_fn((3, 16), |_| r.gen_range(-1.0..1.0));
        let c = loss_corr(&f, &f.mapv(|v| -v), &gt, &gt, CorrSampling::default()).unwrap().0;
        assert!(c >= 0.0 && c <= 2.0);

        let onehot = Array2::from_shape_fn((3, 16), |(k, i)| (gt.labels[i] as usize == k) as u8 as f64);
        assert!(loss_ce(&onehot, (4, 4), &gt).unwrap().0 < 1e-9);
        let exact = LabelMap::new(3, 4, 4, onehot.iter().copied().collect()).unwrap();
        assert_eq!(loss_mse(&exact, &gt).unwrap(), 0.0);
        let same = Array2::from_elem((3, 16), 0.4);
        assert!(loss_corr(&same, &same, &gt, &gt, CorrSampling::default()).unwrap().0.abs() < 1e-12);
    }
}

#[derive(Clone, Copy, Debug)]
enum Which {
    Ce,
    Mse,
    Ldm,
    Corr,
}

fn loss_of(which: Which, x: &Mat, other: &Mat, gi: &GtMasks, gj: &GtMasks) -> (Graph, Var, Var) {
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let o = g.constant(other.clone());
    let l = match which {
        Which::Ce => ce_graph(&mut g, v, gi).unwrap().0,
        Which::Mse => {
            let p = g.softmax_rows(v);
            mse_graph(&mut g, p, gi).unwrap()
        }
        Which::Ldm => ldm_graph(&mut g, v, o).unwrap(),
        Which::Corr => corr_graph(&mut g, v, o, gi, gj, CorrSampling { cap: 16, seed: 1 }).unwrap().0,
    };
    (g, l, v)
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = rng(7);
    for which in [Which::Ce, Which::Mse, Which::Ldm, Which::Corr] {
        let gi = random_gt(&mut r, 3, 8, 8);
        let gj = random_gt(&mut r, 3, 8, 8);
        let x = match which {
            Which::Ce => Array2::from_shape_fn((64, 3), |_| r.gen_range(0.1..1.0)),
            _ => Array2::from_shape_fn((64, 3), |_| r.gen_range(-1.0..1.0)),
        };
        let other = Array2::from_shape_fn((64, 3), |_| r.gen_range(-1.0..1.0));
        let (mut g, l, v) = loss_of(which, &x, &other, &gi, &gj);
        g.backward(l).unwrap();
        let grad = g.grad(v).unwrap();
        let err = common::fd_max_rel_err(&x, &grad, 40, 1e-4, 1e-7, &mut r, |y| {
            let (g, l, _) = loss_of(which, y, &other, &gi, &gj);
            g.scalar(l)
        });
        assert!(err < 1e-4, "{which:?}: {err:e}");
    }
}
