use super::*;
use crate::nn::ops::{flip_horizontal, map_to_rows};
use crate::nn::TensorKind;
use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        encoder: EncoderConfig {
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            ..EncoderConfig::default()
        },
        adapter: AdapterConfig {
            enabled: true,
            prior_channels: vec![4, 6, 6, 8],
        },
        decoder: DecoderConfig {
            channel_schedule: vec![16, 12, 8, 4],
        },
        projector: ProjectorConfig {
            teacher_dim: 12,
            layers: 1,
        },
    }
}

fn random<S: Real>(shape: (usize, usize, usize, usize), seed: u64) -> Array4<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || S::lit(rng.random_range(-1.0..1.0)))
}

fn images<S: Real>(n: usize, h: usize, w: usize, seed: u64) -> Array4<S> {
    random::<S>((n, 3, h, w), seed).mapv(|v| (v + S::one()) * S::lit(0.5))
}

#[test]
fn encoder_token_grid_shapes() {
    let m = ModelBundle::<f32>::new(&ModelConfig::default(), 0).unwrap();
    assert_eq!(m.encode(images(1, 64, 64, 1).view()).unwrap().dim(), (1, 96, 4, 4));
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 192,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    let m = ModelBundle::<f32>::new(&cfg, 0).unwrap();
    let out = m.infer(images(1, 96, 96, 2).view()).unwrap();
    assert_eq!(out.tokens.dim(), (1, 192, 6, 6));
    assert_eq!(out.logits.dim(), (1, 6, 96, 96));
    let f = m.features(images(1, 96, 96, 2).view()).unwrap();
    let sizes: Vec<_> = f.levels.iter().map(|l| (l.dim().2, l.dim().3)).collect();
    assert_eq!(sizes, vec![(24, 24), (12, 12), (6, 6), (3, 3)]);
}

#[test]
fn eval_forward_is_deterministic() {
    let m = ModelBundle::<f32>::new(&tiny(), 3).unwrap();
    let x = images(2, 32, 32, 4);
    let a = m.infer(x.view()).unwrap();
    let b = m.infer(x.view()).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.tokens, b.tokens);
}

#[test]
fn padding_policy() {
    let mut cfg = tiny();
    let m = ModelBundle::<f32>::new(&cfg, 0).unwrap();
    let out = m.infer(images(1, 37, 50, 5).view()).unwrap();
    assert_eq!(out.logits.dim(), (1, 3, 37, 50));
    assert_eq!(out.tokens.dim(), (1, 16, 5, 7));
    cfg.encoder.pad_input = false;
    let m = ModelBundle::<f32>::new(&cfg, 0).unwrap();
    assert!(matches!(m.infer(images(1, 37, 48, 5).view()), Err(Error::Shape(_))));
    assert!(m.infer(images(1, 40, 48, 5).view()).is_ok());
}

#[test]
fn mismatched_tokens_are_rejected_by_adapter() {
    let m = ModelBundle::<f32>::new(&tiny(), 0).unwrap();
    let tokens = random::<f32>((1, 16, 3, 3), 1);
    let err = m
        .adapter
        .as_ref()
        .unwrap()
        .infer(tokens.view(), images(1, 32, 32, 2).view());
    assert!(matches!(err, Err(Error::Shape(_))));
}

#[test]
fn zeroed_fusion_leaves_resampled_tokens() {
    let mut m = ModelBundle::<f64>::new(&tiny(), 1).unwrap();
    m.adapter.as_mut().unwrap().zero_fusion();
    let x = images(2, 32, 48, 6);
    let tokens = m.encode(x.view()).unwrap();
    let f = m.features(x.view()).unwrap();
    for l in &f.levels {
        let (_, _, h, w) = l.dim();
        assert_eq!(l, &resize_bilinear(tokens.view(), h, w));
    }
}

#[test]
fn decoder_schedule_is_validated() {
    for bad in [
        vec![64, 32, 16],
        vec![64, 64, 32, 16],
        vec![16, 32, 64, 128],
        vec![8, 4, 2, 0],
    ] {
        let cfg = DecoderConfig { channel_schedule: bad };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
    let m = ModelBundle::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let widths = m.decoder.widths();
    assert_eq!(widths, vec![256, 128, 64, 32]);
    assert!(widths.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn zero_features_give_constant_interior_logits() {
    let m = ModelBundle::<f64>::new(&tiny(), 2).unwrap();
    let levels = Adapter::<f64>::level_sizes(128, 128)
        .iter()
        .map(|&(h, w)| Array4::zeros((1, 16, h, w)))
        .collect();
    let f = MultiScaleFeatures::new(levels).unwrap();
    let logits = m.decoder.infer(&f, 128, 128);
    // Away from zero-padded borders of the 3x3 stages (three stages, each
    // reaching one more coarse pixel) every pixel sees the same input.
    let reference = logits.slice(ndarray::s![0, .., 64, 64]).to_owned();
    for y in 40..88 {
        for x in 40..88 {
            let px = logits.slice(ndarray::s![0, .., y, x]);
            for (a, b) in px.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn identity_projector_passes_tokens_through() {
    let cfg = ProjectorConfig {
        teacher_dim: 16,
        layers: 1,
    };
    let mut p = Projector::<f64>::new(&cfg, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    p.layers[0].weight.value = ndarray::Array2::eye(16);
    p.layers[0].bias.value.fill(0.0);
    let x = random::<f64>((2, 16, 3, 4), 9);
    assert_eq!(p.infer(x.view()).unwrap(), x);
    let m = ModelBundle::<f32>::new(&tiny(), 0).unwrap();
    let t = m.encode(images(1, 32, 32, 1).view()).unwrap();
    assert_eq!(m.projector.infer(t.view()).unwrap().dim(), (1, 12, 4, 4));
}

#[test]
fn train_and_eval_modes_differ() {
    let mut m = ModelBundle::<f32>::new(&tiny(), 0).unwrap();
    let x = images(2, 32, 32, 1);
    let eval = m.infer(x.view()).unwrap().logits;
    let train = m.forward(x.view()).unwrap().logits;
    assert!(eval.iter().zip(&train).any(|(a, b)| (a - b).abs() > 1e-4));
}

#[test]
fn flipping_the_input_does_not_flip_the_logits() {
    let m = ModelBundle::<f32>::new(&tiny(), 0).unwrap();
    let x = images(1, 32, 32, 8);
    let a = flip_horizontal(m.infer(x.view()).unwrap().logits.view());
    let b = m.infer(flip_horizontal(x.view()).view()).unwrap().logits;
    assert!(a.iter().zip(&b).any(|(a, b)| (a - b).abs() > 1e-4));
}

/// Parameter count computed from the config alone.
fn shape_walk_count(c: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let lin = |i: usize, o: usize| i * o + o;
    let e = &c.encoder;
    let d = e.embed_dim;
    let block = 2 * (2 * d) + lin(d, 3 * d) + lin(d, d) + lin(d, d * e.mlp_ratio) + lin(d * e.mlp_ratio, d);
    let mut n = conv(3, d, e.patch_size) + e.depth * block + 2 * d;
    if c.adapter.enabled {
        let p = &c.adapter.prior_channels;
        let widths = [p[0], p[0], p[1], p[2], p[3]];
        let mut cin = 3;
        for &w in &widths {
            n += conv(cin, w, 3) + 2 * w;
            cin = w;
        }
        n += widths[1..].iter().map(|&w| conv(w, d, 1)).sum::<usize>();
    }
    let s = &c.decoder.channel_schedule;
    n += conv(d, s[0], 1) + 2 * s[0];
    for i in 0..3 {
        n += conv(s[i], s[i + 1], 3) + 2 * s[i + 1] + conv(d, s[i + 1], 1);
    }
    n += conv(s[3], c.num_classes, 1);
    n += lin(d, c.projector.teacher_dim);
    if c.projector.layers == 2 {
        n += lin(c.projector.teacher_dim, c.projector.teacher_dim);
    }
    n
}

#[test]
fn parameter_counts_match_shape_walk() {
    for cfg in [tiny(), ModelConfig::default()] {
        let with = ModelBundle::<f32>::new(&cfg, 0).unwrap();
        let mut no_adapter = cfg.clone();
        no_adapter.adapter.enabled = false;
        let without = ModelBundle::<f32>::new(&no_adapter, 0).unwrap();
        assert_eq!(with.num_params(), shape_walk_count(&cfg));
        assert_eq!(without.num_params(), shape_walk_count(&no_adapter));
        assert!(with.num_params() > without.num_params());
    }
    let mut two = tiny();
    two.projector.layers = 2;
    assert_eq!(
        ModelBundle::<f32>::new(&two, 0).unwrap().num_params(),
        shape_walk_count(&two)
    );
}

#[test]
fn names_follow_module_block_index_role() {
    let m = ModelBundle::<f32>::new(&tiny(), 0).unwrap();
    let names = m.names();
    assert!(names.contains(&"encoder.patch_embed.0.proj.weight".to_string()));
    assert!(names.contains(&"encoder.block.1.ln1.gamma".to_string()));
    assert!(names.contains(&"adapter.fuse.3.bias".to_string()));
    assert!(names.contains(&"decoder.stage.2.bn.running_var".to_string()));
    assert!(names.contains(&"projector.layer.0.weight".to_string()));
    let unique: std::collections::HashSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
    for n in &names {
        let parts: Vec<_> = n.split('.').collect();
        assert!(parts.len() >= 4, "{n}");
        assert!(parts[2].parse::<usize>().is_ok(), "{n}");
        ParamGroup::of(n).unwrap();
    }
    assert_eq!(
        ParamGroup::of("encoder.block.3.attn_qkv.weight").unwrap(),
        ParamGroup::EncoderBlock(3)
    );
    assert!(ParamGroup::of("head.0.x").is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = ModelBundle::<f32>::new(&tiny(), 11).unwrap();
    // move running statistics away from their initial values
    m.forward(images(2, 32, 32, 3).view()).unwrap();
    let path = dir.path().join("model.safetensors");
    m.save(&path).unwrap();
    let back = ModelBundle::<f32>::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    let x = images(2, 40, 24, 4);
    let (a, b) = (m.infer(x.view()).unwrap(), back.infer(x.view()).unwrap());
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.tokens, b.tokens);

    let mut other = tiny();
    other.decoder.channel_schedule = vec![20, 12, 8, 4];
    let mut wrong = ModelBundle::<f32>::new(&other, 0).unwrap();
    let archive = TensorArchive::load(&path).unwrap();
    assert!(matches!(archive.load_module("", &mut wrong), Err(Error::Checkpoint(_))));
    let mut f64_model = ModelBundle::<f64>::new(&tiny(), 0).unwrap();
    assert!(archive.load_module("", &mut f64_model).is_err());
}

#[test]
fn external_encoder_weights_are_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let donor = ModelBundle::<f32>::new(&tiny(), 5).unwrap();
    let mut archive = TensorArchive::new();
    archive.insert_module("", &donor.encoder);
    let path = dir.path().join("encoder.safetensors");
    archive.save(&path).unwrap();
    let mut cfg = tiny();
    cfg.encoder.kind = EncoderKind::ExternalPretrained;
    assert!(ModelBundle::<f32>::new(&cfg, 0).is_err());
    cfg.encoder.weights = Some(path);
    let m = ModelBundle::<f32>::new(&cfg, 0).unwrap();
    let x = images(1, 32, 32, 2);
    assert_eq!(m.encode(x.view()).unwrap(), donor.encode(x.view()).unwrap());
}

#[test]
fn copy_from_matches_structure() {
    let a = ModelBundle::<f32>::new(&tiny(), 1).unwrap();
    let mut b = ModelBundle::<f32>::new(&tiny(), 2).unwrap();
    b.copy_from(&a).unwrap();
    let x = images(1, 32, 32, 2);
    assert_eq!(a.infer(x.view()).unwrap().logits, b.infer(x.view()).unwrap().logits);
    let mut cfg = tiny();
    cfg.adapter.enabled = false;
    let mut c = ModelBundle::<f32>::new(&cfg, 0).unwrap();
    assert!(matches!(c.copy_from(&a), Err(Error::Structure(_))));
}

// ---- finite-difference gradient checks (64-bit) ----

fn nudge(model: &mut dyn Parameters<f64>, tensor: usize, coord: usize, delta: f64) {
    let mut i = 0;
    model.visit_mut(&mut |t| {
        if i == tensor {
            t.value[coord] += delta;
        }
        i += 1;
    });
}

/// (tensor index, name, length, analytic gradient) for every parameter.
fn grads(model: &dyn Parameters<f64>) -> Vec<(usize, String, Vec<f64>)> {
    let mut out = Vec::new();
    let mut i = 0;
    model.visit(&mut |t| {
        if t.kind == TensorKind::Param {
            out.push((i, t.name.to_string(), t.grad.unwrap().to_vec()));
        }
        i += 1;
    });
    out
}

fn assert_close(name: &str, analytic: f64, numeric: f64) {
    assert_close_with_floor(name, analytic, numeric, 1e-9);
}

/// Relative error below 1e-3, or absolute error below `floor` (the roundoff
/// of a central difference, for gradients that are structurally zero).
fn assert_close_with_floor(name: &str, analytic: f64, numeric: f64, floor: f64) {
    let err = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    assert!(
        err <= 1e-3 * scale || err < floor,
        "{name}: analytic {analytic} vs numeric {numeric}"
    );
}

/// Checks a few sampled coordinates of every parameter tensor whose name
/// starts with one of `prefixes`.
fn check_params<M: Parameters<f64>>(
    model: &mut M,
    prefixes: &[&str],
    per_tensor: usize,
    loss: &mut dyn FnMut(&mut M) -> f64,
) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-6;
    let mut checked = 0;
    for (idx, name, g) in grads(model) {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        for _ in 0..per_tensor.min(g.len()) {
            let c = rng.random_range(0..g.len());
            nudge(model, idx, c, h);
            let up = loss(model);
            nudge(model, idx, c, -2.0 * h);
            let down = loss(model);
            nudge(model, idx, c, h);
            let floor = 100.0 * up.abs().max(1.0) * f64::EPSILON / h;
            assert_close_with_floor(&format!("{name}[{c}]"), g[c], (up - down) / (2.0 * h), floor);
            checked += 1;
        }
    }
    checked
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut m = ModelBundle::<f64>::new(&tiny(), 4).unwrap();
    let x = images::<f64>(2, 32, 32, 7);
    let r_logits = random::<f64>((2, 3, 32, 32), 8);
    let r_tokens = random::<f64>((2, 16, 4, 4), 9);
    let mut loss = |m: &mut ModelBundle<f64>| {
        let out = m.forward(x.view()).unwrap();
        (&out.logits * &r_logits).sum() + (&out.tokens * &r_tokens).sum()
    };
    m.zero_grad();
    m.forward(x.view()).unwrap();
    m.backward(r_logits.view(), Some(r_tokens.view()));
    let n = check_params(&mut m, &["encoder", "adapter", "decoder"], 3, &mut loss);
    assert!(n > 100);
}

#[test]
fn padded_model_gradients_match_finite_differences() {
    let mut cfg = tiny();
    cfg.adapter.enabled = false;
    let mut m = ModelBundle::<f64>::new(&cfg, 4).unwrap();
    let x = images::<f64>(2, 27, 30, 7);
    let r = random::<f64>((2, 3, 27, 30), 8);
    let mut loss = |m: &mut ModelBundle<f64>| (&m.forward(x.view()).unwrap().logits * &r).sum();
    m.zero_grad();
    m.forward(x.view()).unwrap();
    m.backward(r.view(), None);
    check_params(
        &mut m,
        &["encoder.block.1", "encoder.patch_embed", "decoder"],
        3,
        &mut loss,
    );
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = tiny();
    let mut a = Adapter::<f64>::new(&cfg.adapter, 16, 8, &mut rng).unwrap();
    let img = images::<f64>(2, 40, 32, 1);
    let mut tokens = random::<f64>((2, 16, 5, 4), 2);
    let rs: Vec<_> = Adapter::<f64>::level_sizes(40, 32)
        .iter()
        .enumerate()
        .map(|(i, &(h, w))| random::<f64>((2, 16, h, w), 10 + i as u64))
        .collect();
    let objective = |f: &MultiScaleFeatures<f64>| f.levels.iter().zip(&rs).map(|(l, r)| (l * r).sum()).sum::<f64>();
    a.zero_grad();
    a.forward(tokens.view(), img.view()).unwrap();
    let dlevels: [Array4<f64>; 4] = rs.clone().try_into().unwrap();
    let dtokens = a.backward(&dlevels);
    let mut loss = |a: &mut Adapter<f64>| objective(&a.forward(tokens.view(), img.view()).unwrap());
    assert!(check_params(&mut a, &["adapter"], 4, &mut loss) >= 4 * 18);
    // input gradient
    let h = 1e-6;
    for &idx in &[[0, 0, 0, 0], [1, 7, 4, 3], [0, 15, 2, 1]] {
        tokens[idx] += h;
        let up = objective(&a.forward(tokens.view(), img.view()).unwrap());
        tokens[idx] -= 2.0 * h;
        let down = objective(&a.forward(tokens.view(), img.view()).unwrap());
        tokens[idx] += h;
        assert_close("dtokens", dtokens[idx], (up - down) / (2.0 * h));
    }
}

#[test]
fn projector_gradients_match_finite_differences() {
    for layers in [1, 2] {
        let cfg = ProjectorConfig {
            teacher_dim: 10,
            layers,
        };
        let mut p = Projector::<f64>::new(&cfg, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut x = random::<f64>((2, 6, 3, 3), 4);
        let r = random::<f64>((2, 10, 3, 3), 5);
        p.zero_grad();
        p.forward(x.view()).unwrap();
        let dx = p.backward(r.view());
        let mut loss = |p: &mut Projector<f64>| (&p.forward(x.view()).unwrap() * &r).sum();
        check_params(&mut p, &["projector"], 6, &mut loss);
        let h = 1e-6;
        for &idx in &[[0, 0, 0, 0], [1, 5, 2, 1]] {
            x[idx] += h;
            let up = (&p.infer(x.view()).unwrap() * &r).sum();
            x[idx] -= 2.0 * h;
            let down = (&p.infer(x.view()).unwrap() * &r).sum();
            x[idx] += h;
            assert_close("dx", dx[idx], (up - down) / (2.0 * h));
        }
    }
}

#[test]
fn encoder_only_pass_matches_full_token_path() {
    let mut m = ModelBundle::<f64>::new(&tiny(), 6).unwrap();
    let x = images::<f64>(2, 32, 32, 1);
    let r = random::<f64>((2, 16, 4, 4), 3);
    m.zero_grad();
    let t = m.encode_forward(x.view()).unwrap();
    m.encode_backward(r.view());
    let mut loss = |m: &mut ModelBundle<f64>| (&m.encode_forward(x.view()).unwrap() * &r).sum();
    check_params(&mut m, &["encoder"], 2, &mut loss);
    assert_eq!(map_to_rows(t.view()).len_of(Axis(0)), 32);
}
