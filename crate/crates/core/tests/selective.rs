mod common;

use common::{perturb_params, rng, uniform, zero_params};
use lic_autodiff::{Graph, Tensor};
use lic_core::coding::codec::{decode_bytes, encode_image, EncodeOptions};
use lic_core::config::{CodecConfig, SIGMA_MIN};
use lic_core::latent::Phase;
use lic_core::model::Model;
use lic_core::params::{Bound, ParamStore};
use lic_core::selective::{binarize, binarize_ste, scale_threshold_init, skip_loss, SkipInputs, SkipLossReport, SkipPredictor, DEFAULT_XI};

#[test]
fn zero_weights_code_everything() {
    let cfg = CodecConfig::tiny();
    let mut store = ParamStore::new(1);
    let sp = SkipPredictor::new(&mut store.scope(""), &cfg, 2, Phase::NonAnchor);
    perturb_params(&mut store, &mut rng(2), 0.5);
    zero_params(&mut store, |_| true);
    let g = Graph::inference();
    let p = Bound::new(&g, &store);
    let cs = cfg.slice_ch();
    let c = |seed, ch| g.constant(uniform(&mut rng(seed), &[1, ch, 4, 4], -3.0, 3.0));
    let init = g.constant(scale_threshold_init(&uniform(&mut rng(3), &[1, cs, 4, 4], 0.0, 1.0), DEFAULT_XI));
    let eps = sp.forward(&p, &SkipInputs { init, hyper: c(4, 2 * cfg.m), prev: Some(c(5, 2 * cs)), anchor: Some(c(6, cs)) }).unwrap();
    assert!(eps.value().data().iter().all(|&e| e == 0.5));
    assert!(binarize(&eps.value()).data().iter().all(|&s| s == 1.0));
}

#[test]
fn scale_threshold_examples() {
    let sigma = Tensor::full(&[1, 2, 3, 3], SIGMA_MIN);
    assert!(scale_threshold_init(&sigma, DEFAULT_XI).data().iter().all(|&s| s == 0.0));
    let s = scale_threshold_init(&Tensor::from_vec(&[4], vec![0.29, 0.3, 0.31, 5.0]), 0.3);
    assert_eq!(s.data(), &[0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn ste_binarisation_passes_gradients() {
    let g = Graph::new();
    let e = g.leaf(Tensor::from_vec(&[4], vec![0.1, 0.5, 0.49, 0.9]));
    let s = binarize_ste(e);
    assert_eq!(s.value().data(), &[0.0, 1.0, 0.0, 1.0]);
    let w = g.constant(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]));
    let grads = g.backward((s * w).sum());
    assert_eq!(grads.get(e).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn skip_loss_matches_elementwise_sum_and_report() {
    let mut r = rng(7);
    let eps = uniform(&mut r, &[1, 2, 3, 3], 0.01, 0.99);
    let q = Tensor::from_fn(&[1, 2, 3, 3], |i| [0.0, 1.0, -3.0, 0.0, 2.0][i % 5]);
    let mask = Tensor::ones(&[1, 1, 3, 3]);
    let g = Graph::inference();
    let l = skip_loss(g.constant(eps.clone()), &q, &mask, 18.0).unwrap().value().item();
    let want: f64 = eps
        .data()
        .iter()
        .zip(q.data())
        .map(|(&e, &q)| {
            let ce = if q != 0.0 { -e.ln() } else { -(1.0 - e).ln() };
            0.5 * (q.abs() + 1.0) * ce
        })
        .sum::<f64>()
        / 18.0;
    assert!((l - want).abs() < 1e-12);
    let s = binarize(&eps);
    let rep = SkipLossReport::compute(&[eps.clone()], &[q.clone()], &[s.clone()]).unwrap();
    assert!((rep.loss - want).abs() < 1e-12);
    let skipped = s.data().iter().filter(|&&v| v == 0.0).count();
    assert_eq!(rep.skip_ratio, vec![skipped as f64 / 18.0]);
    let false_skips = s.data().iter().zip(q.data()).filter(|(&s, &q)| s == 0.0 && q != 0.0).count();
    assert_eq!(rep.false_skips, false_skips);
    assert!(SkipLossReport::compute(&[eps], &[q], &[]).is_err());
}

/// Encoder and decoder derive identical skip maps from their own state.
#[test]
fn encoder_and_decoder_skip_maps_agree_on_100_inputs() {
    let mut model = Model::new(CodecConfig::tiny()).unwrap();
    perturb_params(&mut model.store, &mut rng(8), 0.05);
    // make f_s outputs input-dependent
    let mut r = rng(9);
    for i in 0..model.store.len() {
        let name = model.store.name(i).to_string();
        if name.starts_with("skip.") {
            for v in model.store.value_mut(i).data_mut() {
                *v = if name.ends_with(".alpha") { 0.2 } else { *v + rand::Rng::random_range(&mut r, -0.5..0.5) };
            }
        }
    }
    let mut skipped = 0usize;
    let mut total = 0usize;
    for k in 0..100 {
        let (h, w) = (32 + (k * 7) % 40, 32 + (k * 13) % 40);
        let x = uniform(&mut rng(100 + k as u64), &[1, 3, h, w], 0.0, 1.0);
        let enc = encode_image(&model, &x, EncodeOptions::default()).unwrap();
        let dec = decode_bytes(&model, &enc.bytes).unwrap();
        assert_eq!(dec.skip, enc.skip, "input {k}");
        assert_eq!(dec.yhat, enc.yhat, "input {k}");
        for s in &enc.skip {
            skipped += s.data().iter().filter(|&&v| v == 0.0).count();
            total += s.numel();
        }
    }
    assert!(skipped > 0 && skipped < total, "maps are trivially {skipped}/{total}");
}
