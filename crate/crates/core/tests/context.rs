#[macro_use]
mod common;

use common::{perturb_params, rng, uniform};
use lic_autodiff::{Graph, Tensor};
use lic_core::config::CodecConfig;
use lic_core::context::{
    apply_rope2d, channel_attention, grid_positions, linear_attention, mean_attention_weights, rope_init, window_attention,
    CheckerboardGlobal, ContextReweight,
};
use lic_core::latent::CheckerboardMask;
use lic_core::params::{Bound, ParamStore};
use proptest::prelude::*;
use rand::Rng;

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn lin_attn(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let g = Graph::inference();
    let o = linear_attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), mask).unwrap();
    (*o.value()).clone()
}

/// Single-batch `[L, c]` oracle computed as `(sQ sK^T) V`, the quadratic order.
fn lin_attn_quadratic(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&[bool]>) -> Vec<f64> {
    let (l, c, cv) = (q.dim(1), q.dim(2), v.dim(2));
    let sq: Vec<Vec<f64>> = (0..l).map(|i| softmax(&q.data()[i * c..(i + 1) * c])).collect();
    let keep: Vec<usize> = (0..l).filter(|&j| mask.is_none_or(|m| m[j])).collect();
    let mut sk = vec![vec![0.0; c]; l];
    for ch in 0..c {
        let col: Vec<f64> = keep.iter().map(|&j| k.data()[j * c + ch]).collect();
        for (&j, s) in keep.iter().zip(softmax(&col)) {
            sk[j][ch] = s;
        }
    }
    let mut out = vec![0.0; l * cv];
    for i in 0..l {
        for j in 0..l {
            let a: f64 = (0..c).map(|ch| sq[i][ch] * sk[j][ch]).sum();
            for d in 0..cv {
                out[i * cv + d] += a * v.data()[j * cv + d];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Outputs are convex combinations of the value rows.
    #[test]
    fn linear_attention_is_bounded_by_values(seed in 0u64..10_000, l in 1usize..12, c in 1usize..6) {
        let mut r = rng(seed);
        let q = uniform(&mut r, &[1, l, c], -5.0, 5.0);
        let k = uniform(&mut r, &[1, l, c], -5.0, 5.0);
        let v = uniform(&mut r, &[1, l, 2], -3.0, 3.0);
        let o = lin_attn(&q, &k, &v, None);
        for d in 0..2 {
            let col: Vec<f64> = (0..l).map(|j| v.data()[j * 2 + d]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..l {
                let x = o.data()[i * 2 + d];
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn rope_relative_property_prop(seed in 0u64..100_000) {
        let err = rope_relative_error(seed, 4);
        prop_assert!(err < 1e-5, "{err}");
    }
}

fn rope(x: &Tensor, pos: &[(f64, f64)], tx: &[f64], ty: &[f64]) -> Tensor {
    let g = Graph::inference();
    let n = tx.len();
    let out = apply_rope2d(
        g.constant(x.clone()),
        pos,
        g.constant(Tensor::from_vec(&[n], tx.to_vec())),
        g.constant(Tensor::from_vec(&[n], ty.to_vec())),
    )
    .unwrap();
    (*out.value()).clone()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// `<R(m) q, R(n) k> - <q, R(n - m) k>` for random vectors, positions and
/// angles.
fn rope_relative_error(seed: u64, pairs: usize) -> f64 {
    let mut r = rng(seed);
    let c = 2 * r.random_range(1..9);
    let tx: Vec<f64> = (0..c / 2).map(|_| r.random_range(-3.0..3.0)).collect();
    let ty: Vec<f64> = (0..c / 2).map(|_| r.random_range(-3.0..3.0)).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let q = uniform(&mut r, &[1, 1, c], -1.0, 1.0);
        let k = uniform(&mut r, &[1, 1, c], -1.0, 1.0);
        let m = (r.random_range(0..64) as f64, r.random_range(0..64) as f64);
        let n = (r.random_range(0..64) as f64, r.random_range(0..64) as f64);
        let lhs = dot(&rope(&q, &[m], &tx, &ty), &rope(&k, &[n], &tx, &ty));
        let rhs = dot(&q, &rope(&k, &[(n.0 - m.0, n.1 - m.1)], &tx, &ty));
        worst = worst.max((lhs - rhs).abs());
    }
    worst
}

fn chan_attn(q: &Tensor, k: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
    let g = Graph::inference();
    let (o, m) = channel_attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())).unwrap();
    ((*o.value()).clone(), (*m.value()).clone())
}

fn starts(n: usize, win: usize, overlap: usize) -> Vec<usize> {
    if n <= win {
        return vec![0];
    }
    let mut v = Vec::new();
    let mut s = 0;
    while s + win < n {
        v.push(s);
        s += win - overlap;
    }
    v.push(n - win);
    v.dedup();
    v
}

/// Direct softmax attention per window, averaged over the windows covering a
/// query.
fn window_oracle(q: &Tensor, k: &Tensor, v: &Tensor, h: usize, w: usize, win: usize, ov: usize, mask: &CheckerboardMask) -> Vec<f64> {
    let (c, cv) = (q.dim(2), v.dim(2));
    let na = mask.non_anchor();
    let mut out = vec![0.0; h * w * cv];
    let mut count = vec![0usize; h * w];
    let mut acc = vec![vec![0.0; cv]; h * w];
    for &y0 in &starts(h, win, ov) {
        for &x0 in &starts(w, win, ov) {
            let cells: Vec<usize> = (y0..(y0 + win).min(h)).flat_map(|y| (x0..(x0 + win).min(w)).map(move |x| y * w + x)).collect();
            let keys: Vec<usize> = cells.iter().copied().filter(|&t| mask.anchor[t]).collect();
            if keys.is_empty() {
                continue;
            }
            for &t in cells.iter().filter(|&&t| na[t]) {
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| (0..c).map(|d| q.data()[t * c + d] * k.data()[j * c + d]).sum::<f64>() / (c as f64).sqrt())
                    .collect();
                for (&j, a) in keys.iter().zip(softmax(&scores)) {
                    for d in 0..cv {
                        acc[t][d] += a * v.data()[j * cv + d];
                    }
                }
                count[t] += 1;
            }
        }
    }
    for t in 0..h * w {
        for d in 0..cv {
            if count[t] > 0 {
                out[t * cv + d] = acc[t][d] / count[t] as f64;
            }
        }
    }
    out
}

fn win_attn(q: &Tensor, k: &Tensor, v: &Tensor, h: usize, w: usize, win: usize, ov: usize) -> Tensor {
    let g = Graph::inference();
    let mask = CheckerboardMask::new(h, w);
    let o = window_attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), h, w, win, ov, &mask.non_anchor(), &mask.anchor)
        .unwrap();
    (*o.value()).clone()
}

suite! {
    fn linear_attention_matches_quadratic_order() {
        let mut r = rng(1);
        let q = uniform(&mut r, &[1, 9, 4], -2.0, 2.0);
        let k = uniform(&mut r, &[1, 9, 4], -2.0, 2.0);
        let v = uniform(&mut r, &[1, 9, 3], -2.0, 2.0);
        let mask: Vec<bool> = (0..9).map(|i| i % 3 != 1).collect();
        for m in [None, Some(mask.as_slice())] {
            let fast = lin_attn(&q, &k, &v, m);
            let slow = lin_attn_quadratic(&q, &k, &v, m);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn linear_attention_special_inputs() {
        let mut r = rng(2);
        let q = uniform(&mut r, &[2, 6, 3], -1.0, 1.0);
        let v = uniform(&mut r, &[2, 6, 2], -1.0, 1.0);
        // identical keys: every query returns the mean value
        let k = Tensor::from_fn(&[2, 6, 3], |i| (i % 3) as f64);
        let o = lin_attn(&q, &k, &v, None);
        for b in 0..2 {
            for d in 0..2 {
                let mean = (0..6).map(|j| v.data()[b * 12 + j * 2 + d]).sum::<f64>() / 6.0;
                for i in 0..6 {
                    assert!((o.data()[b * 12 + i * 2 + d] - mean).abs() < 1e-12);
                }
            }
        }
        let k = uniform(&mut r, &[2, 6, 3], -1.0, 1.0);
        let zero = Tensor::zeros(&[2, 6, 2]);
        assert_eq!(lin_attn(&q, &k, &zero, None), zero);
        // masked-out keys have no influence
        let mask = [true, false, true, false, true, true];
        let mut v2 = v.clone();
        for b in 0..2 {
            for j in [1, 3] {
                v2.data_mut()[b * 12 + j * 2] += 10.0;
            }
        }
        assert_eq!(lin_attn(&q, &k, &v, Some(&mask)), lin_attn(&q, &k, &v2, Some(&mask)));
    }

    fn rope_relative_identity_over_1000_pairs() {
        let err = rope_relative_error(2024, 1000);
        assert!(err < 1e-5, "max deviation {err}");
    }

    fn rope_identity_at_origin_and_norm_preservation() {
        let mut r = rng(5);
        let x = uniform(&mut r, &[2, 12, 8], -1.0, 1.0);
        let init = rope_init(8);
        assert_eq!(init[0], 1.0);
        assert!((init[3] - 10000f64.powf(-6.0 / 8.0)).abs() < 1e-15);
        assert_eq!(rope(&x, &[(0.0, 0.0); 12], &init, &init), x);
        let pos = grid_positions(3, 4);
        assert_eq!(pos[5], (1.0, 1.0));
        let y = rope(&x, &pos, &init, &init);
        for t in 0..24 {
            let n0: f64 = x.data()[t * 8..(t + 1) * 8].iter().map(|v| v * v).sum();
            let n1: f64 = y.data()[t * 8..(t + 1) * 8].iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    fn channel_attention_rows_and_mean_weights_sum_to_one() {
        let mut r = rng(6);
        for c in [2, 5, 16] {
            let q = uniform(&mut r, &[3, 10, c], -4.0, 4.0);
            let k = uniform(&mut r, &[3, 10, c], -4.0, 4.0);
            let (o, m) = chan_attn(&q, &k, &q);
            assert_eq!(o.shape(), &[3, c, 10]);
            for b in 0..3 {
                for i in 0..c {
                    let s: f64 = m.data()[b * c * c + i * c..b * c * c + (i + 1) * c].iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
                let mb = m.narrow(0, b, 1).unwrap().reshape(&[c, c]).unwrap();
                let maw = mean_attention_weights(&mb).unwrap();
                assert!((maw.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    fn channel_attention_single_channel_is_exact() {
        let mut r = rng(7);
        let q = uniform(&mut r, &[2, 9, 1], -3.0, 3.0);
        let k = uniform(&mut r, &[2, 9, 1], -3.0, 3.0);
        let v = uniform(&mut r, &[2, 9, 1], -3.0, 3.0);
        let (o, m) = chan_attn(&q, &k, &v);
        assert!(m.data().iter().all(|&x| x == 1.0));
        assert_eq!(o.data(), v.data());
    }

    fn mean_attention_weights_known_maps() {
        let uniform_map = Tensor::full(&[4, 4], 0.25);
        assert_eq!(mean_attention_weights(&uniform_map).unwrap(), vec![0.25; 4]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        for w in mean_attention_weights(&eye).unwrap() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        let collapsed = Tensor::from_fn(&[3, 3], |i| if i % 3 == 2 { 1.0 } else { 0.0 });
        assert_eq!(mean_attention_weights(&collapsed).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(mean_attention_weights(&Tensor::full(&[2, 2], 0.7)).is_err());
    }

    fn context_reweight_logs_row_stochastic_maps() {
        let mut store = ParamStore::new(8);
        let cr = ContextReweight::new(&mut store.scope(""), "cr", 6, true);
        perturb_params(&mut store, &mut rng(9), 0.5);
        let g = Graph::inference();
        let p = Bound::new(&g, &store);
        p.enable_attention_log();
        let x = g.constant(uniform(&mut rng(10), &[1, 6, 5, 5], -1.0, 1.0));
        let (_, m) = cr.forward_with_map(&p, x).unwrap();
        let log = p.take_attention_log();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].1, *m.value());
        let maw = mean_attention_weights(&m.value().reshape(&[6, 6]).unwrap()).unwrap();
        assert!((maw.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    fn window_attention_matches_direct_oracle() {
        let mut r = rng(11);
        for (h, w, win, ov) in [(4, 5, 8, 4), (9, 7, 4, 2), (12, 12, 4, 0)] {
            let q = uniform(&mut r, &[1, h * w, 3], -2.0, 2.0);
            let k = uniform(&mut r, &[1, h * w, 3], -2.0, 2.0);
            let v = uniform(&mut r, &[1, h * w, 2], -2.0, 2.0);
            let got = win_attn(&q, &k, &v, h, w, win, ov);
            let want = window_oracle(&q, &k, &v, h, w, win, ov, &CheckerboardMask::new(h, w));
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{h}x{w} window {win}/{ov}");
            }
            let mask = CheckerboardMask::new(h, w);
            for t in (0..h * w).filter(|&t| mask.anchor[t]) {
                assert!(got.data()[t * 2..t * 2 + 2].iter().all(|&x| x == 0.0));
            }
        }
    }

    fn window_attention_receptive_field() {
        let (h, w, win) = (12, 12, 4);
        let mut r = rng(12);
        let q = uniform(&mut r, &[1, h * w, 3], -2.0, 2.0);
        let k = uniform(&mut r, &[1, h * w, 3], -2.0, 2.0);
        let v = uniform(&mut r, &[1, h * w, 2], -2.0, 2.0);
        let base = win_attn(&q, &k, &v, h, w, win, 2);
        // (0, 0) is an anchor; change its value
        let mut v2 = v.clone();
        v2.data_mut()[0] += 5.0;
        let moved = win_attn(&q, &k, &v2, h, w, win, 2);
        for t in 0..h * w {
            let (y, x) = (t / w, t % w);
            let changed = base.data()[t * 2] != moved.data()[t * 2];
            if y >= win || x >= win {
                assert!(!changed, "({y}, {x}) sees a key outside its windows");
            }
        }
        assert!(base.data()[2] != moved.data()[2], "(0, 1) shares a window with (0, 0)");
    }

    fn checkerboard_global_is_zero_on_anchors() {
        let cfg = CodecConfig::tiny();
        let mut store = ParamStore::new(13);
        let m = CheckerboardGlobal::new(&mut store.scope(""), &cfg, 1);
        perturb_params(&mut store, &mut rng(14), 0.3);
        let g = Graph::inference();
        let p = Bound::new(&g, &store);
        let cs = cfg.slice_ch();
        let guide = g.constant(uniform(&mut rng(15), &[1, cs, 6, 6], -1.0, 1.0));
        let anchor = g.constant(uniform(&mut rng(16), &[1, cs, 6, 6], -1.0, 1.0));
        let o = m.attend(&p, guide, anchor).unwrap().value();
        let mask = CheckerboardMask::new(6, 6);
        for ch in 0..cfg.ctx_ch {
            for t in 0..36 {
                if mask.anchor[t] {
                    assert_eq!(o.data()[ch * 36 + t], 0.0);
                }
            }
        }
        assert!(o.data().iter().any(|&v| v != 0.0));
    }
}
