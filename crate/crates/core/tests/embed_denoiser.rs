mod common;

use cdst_core::colorlab::{build_palette, extract_histogram, greyscale, recolor_preserving_luma, ColorHistogram, ImageBuffer, DEFAULT_PALETTE};
use cdst_core::denoiser::*;
use cdst_core::embed::*;
use cdst_core::params::{Binder, ParamStore};
use cdst_core::training::{gen_synthetic, palette_colors, random_texture, SynthSpec, TextureFamily};
use cdst_tensor::{Tape, Tensor};
use common::{random_image, rng};

fn texture(seed: u64) -> ImageBuffer {
    let spec = SynthSpec {
        texture: random_texture(TextureFamily::Waves, &mut rng(seed)),
        palette: palette_colors(&[7, 52, 118]).unwrap(),
        size: 64,
    };
    gen_synthetic(&spec).unwrap()
}

fn hist(img: &ImageBuffer) -> ColorHistogram {
    extract_histogram(img, &build_palette(DEFAULT_PALETTE).unwrap()).unwrap()
}

/// Model whose zero-initialized maps are randomized so every path carries signal.
fn lively_model(seed: u64) -> Model {
    let mut m = Model::init(ModelConfig::default(), seed).unwrap();
    let mut r = rng(seed + 100);
    for name in m.params.select(|n| n.starts_with("cond.out")) {
        let shape = m.params.get(&name).unwrap().shape().to_vec();
        *m.params.get_mut(&name).unwrap() = Tensor::randn(&shape, 0.3, &mut r);
    }
    m
}

fn small_latent(seed: u64) -> Tensor {
    Tensor::randn(&[8, 8, 4], 1.0, &mut rng(seed))
}

#[test]
fn features_and_tokens_are_deterministic() {
    let img = texture(1);
    let m = Model::init(ModelConfig::default(), 3).unwrap();
    let a = image_features(&img).unwrap();
    let b = image_features(&img).unwrap();
    assert_eq!(a, b);
    assert_eq!(m.style_tokens(&a).unwrap(), m.style_tokens(&b).unwrap());
    assert_eq!(a.grids.iter().map(|(i, g)| (*i, g.shape()[0])).collect::<Vec<_>>(), [(1, 1024), (3, 256), (5, 64), (7, 64)]);
}

#[test]
fn luma_preserving_recolor_gives_identical_style_tokens() {
    let m = Model::init(ModelConfig::default(), 3).unwrap();
    for seed in 0..4 {
        let img = random_image(32, 32, seed);
        let other = recolor_preserving_luma(&img, 60.0 + 40.0 * seed as f64).unwrap();
        assert_ne!(img, other);
        let (fa, fb) = (image_features(&img).unwrap(), image_features(&other).unwrap());
        assert_eq!(fa, fb);
        assert_eq!(m.style_tokens(&fa).unwrap(), m.style_tokens(&fb).unwrap());
    }
}

#[test]
fn features_reject_color_input() {
    assert!(toy_features(&random_image(16, 16, 0), &ExtractorSpec::toy(), 0).is_err());
    let grey = greyscale(&random_image(16, 16, 0)).unwrap();
    assert!(toy_features(&grey, &ExtractorSpec::toy(), 0).is_ok());
}

#[test]
fn shallow_tokens_ignore_spatial_order() {
    let m = Model::init(ModelConfig::default(), 5).unwrap();
    let stack = image_features(&texture(2)).unwrap();
    let mut shuffled = stack.clone();
    let last = shuffled.grids.len() - 1;
    for (_, g) in shuffled.grids[..last].iter_mut() {
        let (n, c) = (g.shape()[0], g.shape()[1]);
        let rows: Vec<f64> = (0..n).rev().flat_map(|r| g.data()[r * c..(r + 1) * c].to_vec()).collect();
        *g = Tensor::new(&[n, c], rows).unwrap();
    }
    let a = m.style_tokens(&stack).unwrap();
    let b = m.style_tokens(&shuffled).unwrap();
    let d_e = a.width();
    for (x, y) in a.tokens().data().iter().zip(b.tokens().data()).take(STYLE_TOKENS * d_e) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn color_tokens_depend_only_on_the_histogram() {
    let m = Model::init(ModelConfig::default(), 5).unwrap();
    let img = texture(3);
    let mut px: Vec<[f64; 3]> = img.pixels().map(|p| [p[0], p[1], p[2]]).collect();
    px.reverse();
    let flipped = ImageBuffer::new(64, 64, img.space(), px.into_iter().flatten().collect()).unwrap();
    assert_ne!(flipped, img);
    let (a, b) = (m.color_tokens(&hist(&img)).unwrap(), m.color_tokens(&hist(&flipped)).unwrap());
    assert_eq!(a, b);
    assert_eq!((a.len(), a.kind()), (COLOR_TOKENS, TokenKind::Color));
}

#[test]
fn every_embedder_weight_receives_gradient() {
    let m = Model::init(ModelConfig::default(), 9).unwrap();
    let stack = image_features(&texture(4)).unwrap();
    let h = hist(&texture(4));
    let pred = |n: &str| n.starts_with("embed.");
    let mut tape = Tape::new();
    let mut p = Binder::new(&m.params, &pred);
    let s = style_tokens_on(&mut tape, &mut p, &stack, &m.config.embed).unwrap();
    let c = color_tokens_on(&mut tape, &mut p, &h, &m.config.embed).unwrap();
    let mut r = rng(1);
    let ws = tape.constant(Tensor::randn(tape.shape(s), 1.0, &mut r));
    let wc = tape.constant(Tensor::randn(tape.shape(c), 1.0, &mut r));
    let ls = tape.mul(s, ws).unwrap();
    let lc = tape.mul(c, wc).unwrap();
    let (ls, lc) = (tape.sum(ls), tape.sum(lc));
    let loss = tape.add(ls, lc).unwrap();
    let grads = tape.backward(loss).unwrap();
    let got = p.gradients(&grads);
    let expected = m.params.select(pred);
    assert_eq!(got.len(), expected.len());
    for (name, g) in got {
        let norm: f64 = g.iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn feature_stack_round_trips_through_checkpoint() {
    let stack = image_features(&texture(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.ckpt");
    stack.to_store().save(&path).unwrap();
    let back = FeatureStack::from_store(&ParamStore::load(&path).unwrap()).unwrap();
    assert_eq!(back, stack);
}

#[test]
fn token_sets_enforce_counts() {
    assert!(TokenSet::new(Tensor::zeros(&[6, 64]), TokenKind::Style).is_err());
    assert!(TokenSet::new(Tensor::zeros(&[7, 64]), TokenKind::Style).is_ok());
    assert!(TokenSet::new(Tensor::zeros(&[3, 64]), TokenKind::Color).is_err());
}

#[test]
fn sdxl_layout_and_policies() {
    let r = build_sdxl_layout();
    assert_eq!((r.total, r.encoder.len(), r.middle.len(), r.decoder.len()), (70, 24, 10, 36));
    let p = cdst_inference_policy(&r).unwrap();
    for i in 0..70 {
        let active = i < 14 || (44..70).contains(&i);
        assert_eq!(p.style_active[i], active, "block {i}");
        let want = if i < 14 {
            0.2
        } else if i >= 44 {
            0.9
        } else {
            0.0
        };
        assert_eq!(p.lambda_s[i], want);
        assert_eq!(p.lambda_c[i], 1.0);
    }
    let t = training_policy(&r);
    assert!(t.lambda_s.iter().chain(&t.lambda_c).all(|&v| v == 1.0) && t.style_active.iter().all(|&a| a));
    assert_eq!(InjectionPolicy::from_json(&p.to_json().unwrap()).unwrap(), p);
}

fn tokens(m: &Model, seed: u64) -> (TokenSet, TokenSet, TokenSet) {
    let img = texture(seed);
    (
        m.caption(1).unwrap(),
        m.style_tokens(&image_features(&img).unwrap()).unwrap(),
        m.color_tokens(&hist(&img)).unwrap(),
    )
}

#[test]
fn zero_weights_reduce_to_text_only() {
    let m = Model::init(ModelConfig::default(), 11).unwrap();
    let (e_t, e_s, e_c) = tokens(&m, 6);
    let x = small_latent(1);
    let zero = InjectionPolicy::new(vec![0.0; 70], vec![0.0; 70], vec![false; 70]).unwrap();
    let with = m.predict(&x, 500, &e_t, Some(&e_s), Some(&e_c), &zero, None).unwrap();
    let without = m.predict(&x, 500, &e_t, None, None, &zero, None).unwrap();
    assert_eq!(with, without);
    assert_eq!(with.shape(), x.shape());
    let full = training_policy(&m.registry);
    assert_ne!(m.predict(&x, 500, &e_t, Some(&e_s), Some(&e_c), &full, None).unwrap(), without);
}

#[test]
fn zeroed_stream_projections_contribute_nothing() {
    let mut m = Model::init(ModelConfig::default(), 12).unwrap();
    let (e_t, e_s, e_c) = tokens(&m, 7);
    for name in m.params.select(|n| n.starts_with("stream.")) {
        let t = m.params.get_mut(&name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let x = small_latent(2);
    let p = training_policy(&m.registry);
    let a = m.predict(&x, 300, &e_t, Some(&e_s), Some(&e_c), &p, None).unwrap();
    let b = m.predict(&x, 300, &e_t, None, None, &p, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn block_output_is_linear_in_style_weight() {
    let m = Model::init(ModelConfig::default(), 13).unwrap();
    let (e_t, e_s, _) = tokens(&m, 8);
    let x = Tensor::randn(&[4, 4, 64], 1.0, &mut rng(3));
    let run = |lam: f64| {
        let mut ls = vec![0.0; 70];
        ls[44] = lam;
        let policy = InjectionPolicy {
            lambda_s: ls,
            lambda_c: vec![0.0; 70],
            style_active: vec![true; 70],
        };
        let mut tape = Tape::new();
        let mut p = Binder::frozen(&m.params);
        let xv = tape.leaf(&x, false);
        let streams = StreamVars {
            text: tape.leaf(e_t.tokens(), false),
            style: Some(tape.leaf(e_s.tokens(), false)),
            color: None,
        };
        let o = cross_attention_block(&mut tape, &mut p, xv, streams, &policy, 44).unwrap();
        tape.to_tensor(o)
    };
    let (o0, o5, o1) = (run(0.0), run(0.5), run(1.0));
    for ((a, b), c) in o0.data().iter().zip(o5.data()).zip(o1.data()) {
        assert!(((c - a) - 2.0 * (b - a)).abs() < 1e-12);
    }
    assert!(o0.max_abs_diff(&o1) > 1e-3);
}

#[test]
fn style_key_gradient_matches_finite_difference() {
    let m = lively_model(14);
    let (e_t, e_s, e_c) = tokens(&m, 9);
    let x = small_latent(4);
    let target = small_latent(5);
    let policy = training_policy(&m.registry);
    let name = "stream.50.ks";
    let loss_of = |params: &ParamStore| {
        let mut tape = Tape::new();
        let mut p = Binder::new(params, &is_stream_trainable);
        let xv = tape.leaf(&x, false);
        let streams = StreamVars {
            text: tape.leaf(e_t.tokens(), false),
            style: Some(tape.leaf(e_s.tokens(), false)),
            color: Some(tape.leaf(e_c.tokens(), false)),
        };
        let out = unet_forward_on(&mut tape, &mut p, &m.config, xv, 640, streams, &policy, None).unwrap();
        let tv = tape.constant(target.clone());
        let l = tape.mse(out, tv).unwrap();
        let v = tape.value(l)[0];
        let g = tape.backward(l).unwrap();
        let grad = p.gradients(&g).into_iter().find(|(n, _)| *n == name).map(|(_, g)| g.to_vec());
        (v, grad.unwrap())
    };
    let (_, grad) = loss_of(&m.params);
    let h = 1e-5;
    for idx in [0, 77, 1000, 4095] {
        let mut plus = m.params.clone();
        plus.get_mut(name).unwrap().data_mut()[idx] += h;
        let mut minus = m.params.clone();
        minus.get_mut(name).unwrap().data_mut()[idx] -= h;
        let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
        let rel = (grad[idx] - numeric).abs() / numeric.abs().max(grad[idx].abs()).max(1e-8);
        assert!(rel < 1e-4, "entry {idx}: analytic {} numeric {numeric}", grad[idx]);
    }
}

#[test]
fn condition_residuals_scale_with_weight() {
    let m = lively_model(15);
    let edges = cdst_core::edges::canny(&random_image(64, 64, 10), 0.1, 0.2, 1.0).unwrap();
    assert!(edges.count() > 0);
    let full = m.condition_residuals(&edges, 1.0).unwrap();
    assert_eq!(full.iter().map(|r| r.shape().to_vec()).collect::<Vec<_>>(), [vec![32, 32, 32], vec![16, 16, 64], vec![8, 8, 64]]);
    assert!(full.iter().any(|r| r.data().iter().any(|&v| v != 0.0)));
    for r in m.condition_residuals(&edges, 0.0).unwrap() {
        assert!(r.data().iter().all(|&v| v == 0.0));
    }
    let x = Tensor::randn(&[32, 32, 4], 1.0, &mut rng(6));
    let (e_t, _, _) = tokens(&m, 10);
    let p = training_policy(&m.registry);
    let zero = m.condition_residuals(&edges, 0.0).unwrap();
    assert_eq!(
        m.predict(&x, 100, &e_t, None, None, &p, Some(&zero)).unwrap(),
        m.predict(&x, 100, &e_t, None, None, &p, None).unwrap()
    );
    assert!(m.condition_residuals(&cdst_core::edges::EdgeMap::new(12, 12, vec![0; 144]).unwrap(), 1.0).is_err());
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let m = lively_model(16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.params.save(&path).unwrap();
    let back = Model::from_params(ModelConfig::default(), ParamStore::load(&path).unwrap()).unwrap();
    let (e_t, e_s, e_c) = tokens(&m, 11);
    let x = small_latent(7);
    let p = cdst_inference_policy(&m.registry).unwrap();
    assert_eq!(
        back.predict(&x, 250, &e_t, Some(&e_s), Some(&e_c), &p, None).unwrap(),
        m.predict(&x, 250, &e_t, Some(&e_s), Some(&e_c), &p, None).unwrap()
    );
    let mut broken = m.params.clone();
    broken.insert("unet.conv_out.b", Tensor::zeros(&[5]));
    assert!(Model::from_params(ModelConfig::default(), broken).is_err());
}

#[test]
fn predict_checks_token_kinds() {
    let m = Model::init(ModelConfig::default(), 17).unwrap();
    let (e_t, e_s, _) = tokens(&m, 12);
    let p = training_policy(&m.registry);
    assert!(m.predict(&small_latent(8), 10, &e_t, None, Some(&e_s), &p, None).is_err());
    assert!(m.predict(&Tensor::zeros(&[6, 8, 4]), 10, &e_t, None, None, &p, None).is_err());
}
