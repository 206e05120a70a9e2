//! Acceptance checks. Built without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line, even when all of them pass.
//!
//! Criteria 4 and 5 train on the full toy benchmark and take tens of minutes
//! on one CPU core.

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uda_forge::datamodel::{
    build_rare_class_index, compute_class_frequencies, sample_source, ClassSpace, DatasetManifest, Domain,
    SegmentationSample,
};
use uda_forge::eval::{compute_iou, predict_probs, sliding_window_infer, tiles, ConfusionMatrix, InferConfig};
use uda_forge::harness::{
    checkpoint_path, resolve_config, run_ablation_suite, run_stability, run_training, ResolvedConfig, METRICS_FILE,
};
use uda_forge::model::{
    AdapterConfig, DecoderConfig, EncoderConfig, ModelBundle, ModelConfig, ParamGroup, ProjectorConfig,
};
use uda_forge::nn::loss::weighted_cross_entropy;
use uda_forge::nn::ops::flip_horizontal;
use uda_forge::nn::{Parameters, Real, TensorKind};
use uda_forge::uda::{
    dacs_mix, ema_update, feature_distance_loss, generate_pseudo_labels, lr_at, mask_image, ScheduleConfig,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs() < limit_secs, || {
        format!("{what} took {:.0} s, limit {limit_secs} s", elapsed.as_secs_f64())
    })
}

fn tiny_model(classes: usize) -> ModelConfig {
    ModelConfig {
        num_classes: classes,
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

fn params(model: &dyn Parameters<f64>) -> Vec<(String, TensorKind, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit(&mut |t| out.push((t.name.to_string(), t.kind, t.value.to_vec())));
    out
}

// ---------------------------------------------------------------- criterion 1

fn ema_closed_form() -> Result<(), String> {
    let cfg = tiny_model(3);
    let mut teacher = ModelBundle::<f64>::new(&cfg, 1).map_err(|e| e.to_string())?;
    let student = ModelBundle::<f64>::new(&cfg, 2).map_err(|e| e.to_string())?;
    let start = params(&teacher);
    let (alpha, k) = (0.9f64, 25);
    for _ in 0..k {
        ema_update(&mut teacher, &student, alpha).map_err(|e| e.to_string())?;
    }
    let ak = alpha.powi(k);
    for ((name, kind, got), ((_, _, t0), (_, _, s))) in
        params(&teacher).into_iter().zip(start.iter().zip(params(&student)))
    {
        for (i, &g) in got.iter().enumerate() {
            let want = match kind {
                TensorKind::Param => ak * t0[i] + (1.0 - ak) * s[i],
                TensorKind::Buffer => s[i],
            };
            ensure((g - want).abs() <= 1e-6, || {
                format!("EMA {name}[{i}]: {g} vs closed form {want}")
            })?;
        }
    }
    Ok(())
}

fn dacs_provenance() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ignore = 255u8;
    for trial in 0..1000 {
        let (h, w) = (rng.random_range(4..20), rng.random_range(4..20));
        let classes = rng.random_range(1..7u8);
        let src_label = Array2::from_shape_simple_fn((h, w), || {
            if rng.random_bool(0.1) {
                ignore
            } else {
                rng.random_range(0..classes)
            }
        });
        if src_label.iter().all(|&l| l == ignore) {
            continue;
        }
        let src = Array3::from_shape_simple_fn((3, h, w), || rng.random::<f64>());
        let tgt = Array3::from_shape_simple_fn((3, h, w), || rng.random::<f64>() + 2.0);
        let pseudo = Array2::from_shape_simple_fn((h, w), || rng.random_range(0..6u8));
        let q = rng.random::<f64>();
        let mix = dacs_mix(
            src.view(),
            src_label.view(),
            tgt.view(),
            pseudo.view(),
            q,
            ignore,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let present: HashSet<u8> = src_label.iter().copied().filter(|&l| l != ignore).collect();
        ensure(mix.classes.len() == present.len().div_ceil(2), || {
            format!("mix {trial}: pasted class count")
        })?;
        ensure(mix.classes.iter().all(|c| present.contains(c)), || {
            format!("mix {trial}: foreign class")
        })?;
        let chosen: HashSet<u8> = mix.classes.iter().copied().collect();
        for ((y, x), &from_source) in mix.mask.indexed_iter() {
            ensure(from_source == chosen.contains(&src_label[[y, x]]), || {
                format!("mix {trial}: mask at ({y},{x})")
            })?;
            let (img, lbl, wt) = if from_source {
                (src.slice(s![.., y, x]), src_label[[y, x]], 1.0)
            } else {
                (tgt.slice(s![.., y, x]), pseudo[[y, x]], q)
            };
            ensure(mix.image.slice(s![.., y, x]) == img, || {
                format!("mix {trial}: pixel ({y},{x})")
            })?;
            ensure(mix.label[[y, x]] == lbl && mix.weight[[y, x]] == wt, || {
                format!("mix {trial}: label or weight at ({y},{x})")
            })?;
        }
    }
    Ok(())
}

fn mask_rate() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let image = Array3::<f32>::ones((1, 32, 32));
    let (mut dropped, mut cells) = (0usize, 0usize);
    for _ in 0..10_000 {
        let (masked, grid) = mask_image(image.view(), 8, 0.7, &mut rng).map_err(|e| e.to_string())?;
        for ((y, x), &v) in masked.index_axis(Axis(0), 0).indexed_iter() {
            ensure((v == 0.0) == grid[[y / 8, x / 8]], || {
                "masked pixels disagree with the drop grid".into()
            })?;
        }
        dropped += grid.iter().filter(|&&d| d).count();
        cells += grid.len();
    }
    let rate = dropped as f64 / cells as f64;
    ensure((rate - 0.7).abs() <= 0.02, || format!("drop rate {rate:.4}"))?;
    Ok(rate)
}

fn fd_extremes_and_brute_force() -> Result<(), String> {
    let a = random::<f64>((2, 5, 3, 4), 13).mapv(|v| v + 1.5);
    let loss = |x: &Array4<f64>, y: &Array4<f64>| feature_distance_loss(x.view(), y.view(), 0.0).map(|r| r.0);
    let same = loss(&a, &a).map_err(|e| e.to_string())?;
    let opposite = loss(&a, &(-&a)).map_err(|e| e.to_string())?;
    ensure(same == 0.0 && opposite == 2.0, || {
        format!("extremes {same} and {opposite}")
    })?;
    let b = random::<f64>((2, 5, 3, 4), 14);
    let (n, d, h, w) = a.dim();
    let mut brute = 0.0;
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let u: Vec<f64> = (0..d).map(|k| a[[i, k, y, x]]).collect();
                let v: Vec<f64> = (0..d).map(|k| b[[i, k, y, x]]).collect();
                let dot: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
                let nu = u.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nv = v.iter().map(|p| p * p).sum::<f64>().sqrt();
                brute += 1.0 - dot / (nu * nv);
            }
        }
    }
    brute /= (n * h * w) as f64;
    let got = loss(&a, &b).map_err(|e| e.to_string())?;
    ensure((got - brute).abs() < 1e-6, || {
        format!("cosine distance {got} vs brute force {brute}")
    })
}

fn miou_against_sets() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ignore = 255u8;
    for trial in 0..100 {
        let c = rng.random_range(2..7usize);
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let gt = Array2::from_shape_simple_fn((h, w), || {
            if rng.random_bool(0.1) {
                ignore
            } else {
                rng.random_range(0..c as u8)
            }
        });
        let pred = Array2::from_shape_simple_fn((h, w), || rng.random_range(0..c as u8));
        let mut cm = ConfusionMatrix::new(c, ignore);
        cm.update(pred.view(), gt.view()).map_err(|e| e.to_string())?;
        let names: Vec<String> = (0..c).map(|k| format!("c{k}")).collect();
        let report = match compute_iou(&cm, &names, "random") {
            Ok(r) => r,
            Err(_) if gt.iter().all(|&g| g == ignore) => continue,
            Err(e) => return Err(e.to_string()),
        };
        let mut defined = Vec::new();
        for k in 0..c as u8 {
            let mut p = HashSet::new();
            let mut g = HashSet::new();
            for (idx, (&pv, &gv)) in pred.iter().zip(gt.iter()).enumerate() {
                if gv == ignore {
                    continue;
                }
                if pv == k {
                    p.insert(idx);
                }
                if gv == k {
                    g.insert(idx);
                }
            }
            let union = p.union(&g).count();
            let iou = (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64);
            ensure(report.per_class[k as usize].iou == iou, || {
                format!("instance {trial}, class {k}")
            })?;
            defined.extend(iou);
        }
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        ensure(report.miou == miou, || {
            format!("instance {trial}: mIoU {} vs {miou}", report.miou)
        })?;
    }
    Ok(())
}

fn lr_spot_values() -> Result<(), String> {
    let full = ScheduleConfig::default();
    let dec = lr_at(&full, 750, ParamGroup::Decoder, 4).map_err(|e| e.to_string())?;
    let end = lr_at(&full, 40_000, ParamGroup::Decoder, 4).map_err(|e| e.to_string())?;
    let enc_end = lr_at(&full, 40_000, ParamGroup::EncoderBlock(3), 4).map_err(|e| e.to_string())?;
    ensure((dec - 7e-5).abs() <= 1e-12 && end == 0.0 && enc_end == 0.0, || {
        format!("lr at 750 = {dec}, at 40000 = {end} / {enc_end}")
    })
}

fn rcs_distribution() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let space = ClassSpace::from_names(["a", "b", "c", "d", "e"]).map_err(|e| e.to_string())?;
    let samples: Vec<SegmentationSample> = (0..12)
        .map(|i| {
            // class 4 is rare: it shows up in two small patches only
            let label = Array2::from_shape_fn((8, 8), |(y, x)| match i {
                3 | 7 if y < 2 && x < 2 => 4,
                _ => ((x / 4 + y / 4 + i) % 4) as u8,
            });
            SegmentationSample::new(format!("s{i}"), Array3::zeros((3, 8, 8)), Some(label), Domain::Source)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let manifest = DatasetManifest::from_samples(Domain::Source, space, samples).map_err(|e| e.to_string())?;
    let freqs = compute_class_frequencies(&manifest).map_err(|e| e.to_string())?;
    let index = build_rare_class_index(&freqs, &manifest, 0.1).map_err(|e| e.to_string())?;
    let mut analytic = vec![0.0; manifest.len()];
    for (pool, &p) in index.pools.iter().zip(&index.probabilities) {
        for &i in pool {
            analytic[i] += p / pool.len() as f64;
        }
    }
    let draws = 100_000;
    let mut counts = vec![0usize; manifest.len()];
    for _ in 0..draws {
        counts[sample_source(&index, &mut rng)] += 1;
    }
    let tv = 0.5
        * counts
            .iter()
            .zip(&analytic)
            .map(|(&c, &p)| (c as f64 / draws as f64 - p).abs())
            .sum::<f64>();
    ensure(tv <= 0.02, || format!("total variation {tv:.4}"))?;
    Ok(tv)
}

fn criterion_1() -> Check {
    let t = Instant::now();
    ema_closed_form()?;
    dacs_provenance()?;
    let rate = mask_rate()?;
    fd_extremes_and_brute_force()?;
    miou_against_sets()?;
    lr_spot_values()?;
    let tv = rcs_distribution()?;
    within(t.elapsed(), 120, "unit suite")?;
    Ok(format!(
        "unit invariants hold (mask rate {rate:.4}, RCS TV {tv:.4}, {:.1} s)",
        t.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- criterion 2

/// Relative error below 1e-3, or an absolute error under the roundoff floor
/// of a central difference (for gradients that are structurally zero).
fn close(analytic: f64, numeric: f64, floor: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= 1e-3 * analytic.abs().max(numeric.abs()) || err < floor
}

const H: f64 = 1e-6;

fn roundoff_floor(loss: f64) -> f64 {
    100.0 * loss.abs().max(1.0) * f64::EPSILON / H
}

struct GradProblem {
    x: Array4<f64>,
    labels: Array3<u8>,
    weights: Array3<f64>,
    reference: Array4<f64>,
}

impl GradProblem {
    fn loss(&self, m: &mut ModelBundle<f64>) -> f64 {
        let out = m.forward(self.x.view()).unwrap();
        let (ce, _) = weighted_cross_entropy(out.logits.view(), self.labels.view(), self.weights.view(), 255);
        let proj = m.projector.forward(out.tokens.view()).unwrap();
        let (fd, _) = feature_distance_loss(proj.view(), self.reference.view(), 0.0).unwrap();
        ce + fd
    }

    fn backward(&self, m: &mut ModelBundle<f64>) {
        m.zero_grad();
        let out = m.forward(self.x.view()).unwrap();
        let (_, dlogits) = weighted_cross_entropy(out.logits.view(), self.labels.view(), self.weights.view(), 255);
        let proj = m.projector.forward(out.tokens.view()).unwrap();
        let (_, dproj) = feature_distance_loss(proj.view(), self.reference.view(), 0.0).unwrap();
        let dtokens = m.projector.backward(dproj.view());
        m.backward(dlogits.view(), Some(dtokens.view()));
    }
}

fn nudge(model: &mut dyn Parameters<f64>, tensor: usize, coord: usize, delta: f64) {
    let mut i = 0;
    model.visit_mut(&mut |t| {
        if i == tensor {
            t.value[coord] += delta;
        }
        i += 1;
    });
}

fn model_gradients() -> Result<usize, String> {
    let cfg = tiny_model(4);
    let mut m = ModelBundle::<f64>::new(&cfg, 21).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (n, hh, ww) = (2, 32, 32);
    let problem = GradProblem {
        x: random::<f64>((n, 3, hh, ww), 23),
        labels: Array3::from_shape_simple_fn((n, hh, ww), || {
            if rng.random_bool(0.1) {
                255
            } else {
                rng.random_range(0..4)
            }
        }),
        weights: Array3::from_shape_simple_fn((n, hh, ww), || rng.random_range(0.2..1.0)),
        reference: random::<f64>((n, 12, hh / 8, ww / 8), 24),
    };
    problem.backward(&mut m);
    let mut tensors = Vec::new();
    let mut i = 0;
    m.visit(&mut |t| {
        if t.kind == TensorKind::Param {
            tensors.push((i, t.name.to_string(), t.grad.unwrap().to_vec()));
        }
        i += 1;
    });
    let mut checked = 0;
    let mut seen = HashSet::new();
    for (idx, name, grad) in tensors {
        let group = name.split('.').next().unwrap_or_default().to_string();
        if !["adapter", "decoder", "projector"].contains(&group.as_str()) {
            continue;
        }
        seen.insert(group);
        for _ in 0..3.min(grad.len()) {
            let c = rng.random_range(0..grad.len());
            nudge(&mut m, idx, c, H);
            let up = problem.loss(&mut m);
            nudge(&mut m, idx, c, -2.0 * H);
            let down = problem.loss(&mut m);
            nudge(&mut m, idx, c, H);
            let numeric = (up - down) / (2.0 * H);
            ensure(close(grad[c], numeric, roundoff_floor(up)), || {
                format!("{name}[{c}]: analytic {} vs numeric {numeric}", grad[c])
            })?;
            checked += 1;
        }
    }
    ensure(seen.len() == 3, || format!("only saw parameter groups {seen:?}"))?;
    Ok(checked)
}

fn loss_gradients() -> Result<usize, String> {
    let mut checked = 0;
    let a = random::<f64>((2, 6, 3, 3), 31);
    let b = random::<f64>((2, 6, 3, 3), 32);
    for smooth_l1 in [0.0, 0.5] {
        let f = |x: &Array4<f64>| feature_distance_loss(x.view(), b.view(), smooth_l1).unwrap();
        let (_, grad) = f(&a);
        for idx in [[0, 0, 0, 0], [1, 5, 2, 2], [0, 3, 1, 2], [1, 2, 0, 1]] {
            let (mut p, mut m) = (a.clone(), a.clone());
            p[idx] += H;
            m[idx] -= H;
            let numeric = (f(&p).0 - f(&m).0) / (2.0 * H);
            ensure(close(grad[idx], numeric, 1e-9), || {
                format!("FD loss {idx:?}: {} vs {numeric}", grad[idx])
            })?;
            checked += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let logits = random::<f64>((2, 5, 4, 3), 34).mapv(|v| 3.0 * v);
    let labels = Array3::from_shape_simple_fn((2, 4, 3), || {
        if rng.random_bool(0.2) {
            255
        } else {
            rng.random_range(0..5)
        }
    });
    let weights = Array3::from_shape_simple_fn((2, 4, 3), || rng.random_range(0.0..1.0));
    let f = |x: &Array4<f64>| weighted_cross_entropy(x.view(), labels.view(), weights.view(), 255);
    let (_, grad) = f(&logits);
    for idx in [[0, 0, 0, 0], [1, 4, 3, 2], [0, 2, 1, 1], [1, 1, 2, 0], [0, 3, 3, 2]] {
        let (mut p, mut m) = (logits.clone(), logits.clone());
        p[idx] += H;
        m[idx] -= H;
        let numeric = (f(&p).0 - f(&m).0) / (2.0 * H);
        ensure(close(grad[idx], numeric, 1e-9), || {
            format!("weighted CE {idx:?}: {} vs {numeric}", grad[idx])
        })?;
        checked += 1;
    }
    Ok(checked)
}

fn criterion_2() -> Check {
    let t = Instant::now();
    let coords = model_gradients()? + loss_gradients()?;
    within(t.elapsed(), 300, "gradient suite")?;
    Ok(format!(
        "{coords} sampled gradient coordinates match central differences ({:.1} s)",
        t.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- criterion 3

fn sequential_window_oracle(model: &ModelBundle<f32>, image: &Array3<f32>, cfg: &InferConfig) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let c = model.num_classes();
    let mut sum = Array3::<f32>::zeros((c, h, w));
    let mut count = Array2::<f32>::zeros((h, w));
    for t in tiles(h, w, cfg.window, cfg.stride) {
        let crop = image.slice(s![.., t.y..t.y + t.h, t.x..t.x + t.w]).insert_axis(Axis(0));
        let p = predict_probs(model, crop).unwrap();
        let mut dst = sum.slice_mut(s![.., t.y..t.y + t.h, t.x..t.x + t.w]);
        dst += &p.index_axis(Axis(0), 0);
        count
            .slice_mut(s![t.y..t.y + t.h, t.x..t.x + t.w])
            .mapv_inplace(|v| v + 1.0);
    }
    for mut plane in sum.outer_iter_mut() {
        plane /= &count;
    }
    sum
}

fn criterion_3() -> Check {
    let model = ModelBundle::<f32>::new(&tiny_model(5), 41).map_err(|e| e.to_string())?;
    let x = random::<f32>((3, 3, 32, 48), 42);
    let xf = flip_horizontal(x.view());
    let pl = generate_pseudo_labels(&model, x.view(), 0.5, true).map_err(|e| e.to_string())?;
    let plf = generate_pseudo_labels(&model, xf.view(), 0.5, true).map_err(|e| e.to_string())?;
    ensure(plf.labels == pl.labels.slice(s![.., .., ..;-1]), || {
        "pseudo-labels are not flip-equivariant".into()
    })?;
    ensure(
        plf.confidence == pl.confidence.slice(s![.., .., ..;-1]) && plf.q == pl.q,
        || "pseudo-label confidences are not flip-equivariant".into(),
    )?;

    let mut worst = 0.0f32;
    for (seed, (h, w)) in [(43, (56, 72)), (44, (40, 88)), (45, (32, 32))] {
        let image = random::<f32>((1, 3, h, w), seed).index_axis_move(Axis(0), 0);
        let mirrored = image.slice(s![.., .., ..;-1]).to_owned();
        let cfg = InferConfig {
            window: 32,
            stride: 24,
            flip: true,
            batch: 4,
        };
        let direct = sliding_window_infer(&model, image.view(), &cfg).map_err(|e| e.to_string())?;
        let of_mirror = sliding_window_infer(&model, mirrored.view(), &cfg).map_err(|e| e.to_string())?;
        ensure(of_mirror == direct.slice(s![.., .., ..;-1]), || {
            format!("flip-aggregated inference is not flip-equivariant on {h}x{w}")
        })?;
        let plain = InferConfig { flip: false, ..cfg };
        let batched = sliding_window_infer(&model, image.view(), &plain).map_err(|e| e.to_string())?;
        let oracle = sequential_window_oracle(&model, &image, &plain);
        let diff = (&batched - &oracle).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        worst = worst.max(diff);
        ensure(diff <= 1e-5, || {
            format!("batched vs sequential differ by {diff:e} on {h}x{w}")
        })?;
    }
    Ok(format!(
        "flip equivariance exact; batched windows within {worst:.1e} of the sequential loop"
    ))
}

// ------------------------------------------------------------ criteria 4 and 5

/// Iterations of every full-benchmark acceptance run.
const TOY_ITERS: usize = 1000;

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temporary directory"))
        .path()
}

fn toy_run(mode: &str, out: PathBuf) -> Result<ResolvedConfig, String> {
    resolve_config(
        None,
        &[
            format!("mode={mode}"),
            "seed=0".into(),
            format!("schedule.total_iters={TOY_ITERS}"),
            "run.log_every=0".into(),
            "run.reuse_completed=true".into(),
            format!("output_dir={}", out.display()),
        ],
    )
    .map_err(|e| e.to_string())
}

fn uda_base() -> Result<ResolvedConfig, String> {
    toy_run("uda", scratch().join("ablation"))
}

fn train_miou(r: &ResolvedConfig) -> Result<f64, String> {
    run_training(r, None)
        .map(|o| 100.0 * o.summary.miou)
        .map_err(|e| e.to_string())
}

fn criterion_4() -> Check {
    let t = Instant::now();
    let source_only = train_miou(&toy_run("source_only", scratch().join("source_only"))?)?;
    // the same directory the ablation suite uses for its base row, so that
    // criterion 5 reuses this run
    let mut uda = uda_base()?;
    uda.config.output_dir = uda.config.output_dir.join("base");
    let uda = train_miou(&uda)?;
    let oracle = train_miou(&toy_run("oracle", scratch().join("oracle"))?)?;
    let line = format!(
        "source_only {source_only:.1} < uda {uda:.1} < oracle {oracle:.1}, gain {:.1}",
        uda - source_only
    );
    ensure(source_only < uda && uda < oracle && uda - source_only >= 5.0, || {
        line.clone()
    })?;
    within(t.elapsed(), 3600, "ordering runs")?;
    Ok(format!("{line} ({:.0} s)", t.elapsed().as_secs_f64()))
}

fn criterion_5() -> Check {
    let t = Instant::now();
    let toggles = ["lr_multiplier".to_string(), "pseudo_weight".to_string()];
    let table = run_ablation_suite(&uda_base()?, &toggles).map_err(|e| e.to_string())?;
    let d_lr = 100.0 * table.delta_of("lr_multiplier").ok_or("missing lr_multiplier row")?;
    let d_pw = 100.0 * table.delta_of("pseudo_weight").ok_or("missing pseudo_weight row")?;
    let line = format!("delta without lr_multiplier {d_lr:+.1} <= without pseudo_weight {d_pw:+.1}");
    ensure(d_lr <= d_pw, || line.clone())?;
    Ok(format!("{line} ({:.0} s)", t.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 6

fn small_run(out: &Path, iters: usize) -> Result<ResolvedConfig, String> {
    let mut o: Vec<String> = [
        "data.toy.height=40",
        "data.toy.width=40",
        "data.toy.source_count=8",
        "data.toy.target_train_count=8",
        "data.toy.target_val_count=4",
        "model.encoder.patch_size=8",
        "model.encoder.embed_dim=16",
        "model.encoder.depth=2",
        "model.encoder.num_heads=2",
        "model.adapter.prior_channels=[4, 6, 6, 8]",
        "model.decoder.channel_schedule=[16, 12, 8, 4]",
        "model.projector.teacher_dim=12",
        "fd.reference.patch_size=8",
        "fd.reference.embed_dim=12",
        "fd.reference.depth=1",
        "fd.reference.num_heads=2",
        "schedule.warmup_iters=10",
        "schedule.batch_size=2",
        "augment.crop_size=32",
        "eval.window=32",
        "eval.stride=24",
        "run.log_every=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.push(format!("schedule.total_iters={iters}"));
    o.push(format!("run.checkpoint_every={}", iters / 2));
    o.push(format!("output_dir={}", out.display()));
    resolve_config(None, &o).map_err(|e| e.to_string())
}

fn criterion_6() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let iters = 120;
    let a = run_training(&small_run(&root.path().join("a"), iters)?, None).map_err(|e| e.to_string())?;
    let b = run_training(&small_run(&root.path().join("b"), iters)?, None).map_err(|e| e.to_string())?;
    let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let stream = read(a.run_dir.join(METRICS_FILE))?;
    let lines = stream.iter().filter(|&&c| c == b'\n').count();
    ensure(lines >= 100 && stream == read(b.run_dir.join(METRICS_FILE))?, || {
        format!("metrics streams differ or are short ({lines} lines)")
    })?;

    let c = small_run(&root.path().join("c"), iters)?;
    let resumed = run_training(&c, Some(&checkpoint_path(&a.run_dir, iters / 2))).map_err(|e| e.to_string())?;
    ensure(resumed.report == a.report, || {
        "resumed run ends with a different report".into()
    })?;
    ensure(
        read(resumed.run_dir.join("report_target_val.json"))? == read(a.run_dir.join("report_target_val.json"))?,
        || "resumed report file differs".into(),
    )?;

    let stab = run_stability(&small_run(&root.path().join("stability"), 20)?, &[3, 3]).map_err(|e| e.to_string())?;
    ensure(stab.std_dev == Some(0.0), || {
        format!("stability std dev {:?}", stab.std_dev)
    })?;
    Ok(format!(
        "{lines}-step metrics streams bit-identical; resume reproduces the report; seeds [3,3] std dev 0"
    ))
}

fn main() {
    let criteria: [Criterion; 6] = [
        ("unit invariants", criterion_1),
        ("gradients", criterion_2),
        ("symmetry", criterion_3),
        ("end-to-end ordering", criterion_4),
        ("ablation ordering", criterion_5),
        ("reproducibility", criterion_6),
    ];
    // UDA_FORGE_CRITERIA=1,2,3 runs a subset; the rest are reported as skipped
    let selected: Option<Vec<usize>> = std::env::var("UDA_FORGE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if selected.as_ref().is_some_and(|s| !s.contains(&(i + 1))) {
            println!("criterion {} SKIP [{name}]", i + 1);
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {} PASS [{name}] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL [{name}] {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
