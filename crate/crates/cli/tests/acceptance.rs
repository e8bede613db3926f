//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails. Optional arguments select criteria by
//! substring, e.g. `cargo test --test acceptance -- metrics`.
//!
//! The dataset smoke run needs `CTXSEG_SMOKE_DATA` pointing at a tile
//! dataset directory (one holding `manifest.tsv`); it is skipped otherwise.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use ctxseg::dataset::TileDataset;
use ctxseg::gradcheck::{check_gradients, GradCheckConfig};
use ctxseg::inference::{sliding_predict, SlidingConfig, WindowPredictor};
use ctxseg::metrics::{compute_metrics, ConfusionMatrix};
use ctxseg::model::{ModelConfig, SegmentationModel, Variant};
use ctxseg::nn::{Mode, ParamStore};
use ctxseg::schedule::{alpha_schedule, lr_schedule};
use ctxseg::split::Role;
use ctxseg::synth::{synth_dataset, SynthConfig};
use ctxseg::train::{dual_loss, evaluate, train, Samples, TrainConfig, TrainOutput};
use ctxseg::transformer::{attention_row_sums, cross_attention, msa, Attention, ContextBlock, TransformerConfig};
use ctxseg::windowing::{reflect_pad, Margins, WindowGeometry, WindowPair};
use ctxseg::RasterTile;
use ctxseg_cli::commands::{cmd_eval, cmd_train};
use ctxseg_cli::ExperimentConfig;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Outcome = Result<Verdict, Box<dyn std::error::Error>>;

fn verdict(ok: bool, detail: String) -> Outcome {
    Ok(if ok { Verdict::Pass(detail) } else { Verdict::Fail(detail) })
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("context_dependency", context_dependency),
        ("attention_correctness", attention_correctness),
        ("gradient_suite", gradient_suite),
        ("schedule_exactness", schedule_exactness),
        ("geometry", geometry),
        ("metrics_oracle", metrics_oracle),
        ("parameter_count", parameter_count),
        ("reflection_and_stitching", reflection_and_stitching),
        ("dataset_smoke", dataset_smoke),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (tag, detail) = match run() {
            Ok(Verdict::Pass(d)) => ("PASS", d),
            Ok(Verdict::Fail(d)) => ("FAIL", d),
            Ok(Verdict::Skip(d)) => ("SKIP", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} {name}: {detail} ({:.1}s)", t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn max_abs(t: &Tensor) -> f64 {
    t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

// ---------------------------------------------------------------------------
// Context dependency on the synthetic task.

const CTX_TRAIN: usize = 600;
const CTX_VAL: usize = 400;
const CTX_EPOCHS: usize = 8;
const CTX_LR: f64 = 0.01;
const CTX_BATCH: usize = 16;
const CTX_DIVISOR: usize = 4;
// The local window carries no class signal here, so its encoder stays narrow.
const CTX_LOCAL_DIVISOR: usize = 16;

/// Four classes, 64 px local windows, context three times wider. The class
/// prior is skewed so that a model blind to the context has a unique best
/// answer (the majority class) instead of a four-way tie.
fn context_dependency() -> Outcome {
    let geom = WindowGeometry::square(64, 3, 4);
    let data = |n, seed| -> ctxseg::Result<Samples> {
        let mut c = SynthConfig::new(n, 4, geom, seed);
        c.class_weights = Some(vec![0.4, 0.2, 0.2, 0.2]);
        Ok(Samples::Pairs(synth_dataset(&c)?))
    };
    let (train_set, val) = (data(CTX_TRAIN, 1)?, data(CTX_VAL, 2)?);
    let mut oa = Vec::new();
    let mut notes = Vec::new();
    for variant in Variant::ALL {
        let t = Instant::now();
        let mut cfg = ModelConfig::toy(variant, 4, 3, geom, CTX_DIVISOR).with_local_divisor(CTX_LOCAL_DIVISOR);
        cfg.transformer.depth = 2;
        let model = SegmentationModel::new(&cfg, DType::F32, 0)?;
        let tc = TrainConfig {
            epochs: CTX_EPOCHS,
            batch_size: CTX_BATCH,
            base_lr: CTX_LR,
            seed: 0,
            eval_batch_size: 50,
            ..Default::default()
        };
        train(&model, &train_set, &val, &tc, &TrainOutput::default())?;
        let acc = compute_metrics(&evaluate(&model, &val, None, 50)?)?.oa;
        notes.push(format!("{} {acc:.3} in {:.0}s", variant.as_str(), t.elapsed().as_secs_f64()));
        oa.push(acc);
    }
    // Variant::ALL runs local_only, local_self_attn, wide_context.
    let (local, self_attn, wide) = (oa[0], oa[1], oa[2]);
    let ok = wide >= 0.90 && local <= 0.55 && wide > self_attn && self_attn >= local;
    verdict(ok, format!("validation OA: {}", notes.join(", ")))
}

// ---------------------------------------------------------------------------
// Attention.

fn attention_correctness() -> Outcome {
    let mut worst_rows = 0.0f64;
    let mut worst_cross = 0.0f64;
    for seed in 0..100u64 {
        let store = ParamStore::new(DType::F64, seed);
        let attn = Attention::new(&store.root(), 8, 2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_l = uniform(&mut rng, &[2, 5, 8], 3.0);
        let t_c = uniform(&mut rng, &[2, 7, 8], 3.0);
        let (_, a) = msa(&t_l, &attn)?;
        let (_, a_c) = cross_attention(&t_l, &t_c, &attn)?;
        assert_eq!(a_c.dims(), &[2, 2, 5, 7]);
        for m in [&a, &a_c] {
            worst_rows = worst_rows.max(max_abs(&(attention_row_sums(m)? - 1.0)?));
        }
        let (self_out, self_a) = msa(&t_l, &attn)?;
        let (same_out, same_a) = cross_attention(&t_l, &t_l, &attn)?;
        worst_cross = worst_cross.max(max_abs(&(self_out - same_out)?)).max(max_abs(&(self_a - same_a)?));
    }
    let oracle = small_case_oracle()?;
    let ok = worst_rows <= 1e-6 && worst_cross <= 1e-6 && oracle <= 1e-8;
    verdict(
        ok,
        format!("row-sum error {worst_rows:.1e}, cross vs self {worst_cross:.1e}, small-case oracle {oracle:.1e}"),
    )
}

fn matvec(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter().zip(b).map(|(row, bi)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bi).collect()
}

fn params(lin: &ctxseg::nn::Linear) -> (Vec<Vec<f64>>, Vec<f64>) {
    (lin.weight.as_tensor().to_vec2::<f64>().unwrap(), lin.bias.as_tensor().to_vec1::<f64>().unwrap())
}

/// Every (N, M) with N <= 2, M <= 3, two heads, against nested loops.
fn small_case_oracle() -> Result<f64, Box<dyn std::error::Error>> {
    let (d, heads) = (4usize, 2usize);
    let dh = d / heads;
    let mut worst = 0.0f64;
    for n in 1..=2 {
        for m in 1..=3 {
            let store = ParamStore::new(DType::F64, (10 * n + m) as u64);
            let attn = Attention::new(&store.root(), d, heads)?;
            let mut rng = ChaCha8Rng::seed_from_u64((n * 7 + m) as u64);
            let q_in = uniform(&mut rng, &[1, n, d], 2.0);
            let k_in = uniform(&mut rng, &[1, m, d], 2.0);
            let (out, a) = cross_attention(&q_in, &k_in, &attn)?;
            let qs = q_in.squeeze(0)?.to_vec2::<f64>()?;
            let ks = k_in.squeeze(0)?.to_vec2::<f64>()?;
            let ((wq, bq), (wk, bk), (wv, bv), (wo, bo)) =
                (params(&attn.q), params(&attn.k), params(&attn.v), params(&attn.out));
            let q: Vec<_> = qs.iter().map(|x| matvec(&wq, &bq, x)).collect();
            let k: Vec<_> = ks.iter().map(|x| matvec(&wk, &bk, x)).collect();
            let v: Vec<_> = ks.iter().map(|x| matvec(&wv, &bv, x)).collect();
            let a = a.squeeze(0)?.to_vec3::<f64>()?;
            let out = out.squeeze(0)?.to_vec2::<f64>()?;
            for i in 0..n {
                let mut mixed = vec![0.0; d];
                for h in 0..heads {
                    let r = h * dh..(h + 1) * dh;
                    let logits: Vec<f64> = (0..m)
                        .map(|j| {
                            q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(x, y)| x * y).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let z: f64 = logits.iter().map(|l| l.exp()).sum();
                    for j in 0..m {
                        let p = logits[j].exp() / z;
                        worst = worst.max((p - a[h][i][j]).abs());
                        for c in r.clone() {
                            mixed[c] += p * v[j][c];
                        }
                    }
                }
                let expect = matvec(&wo, &bo, &mixed);
                for c in 0..d {
                    worst = worst.max((expect[c] - out[i][c]).abs());
                }
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Gradients.

fn labels(rng: &mut ChaCha8Rng, shape: (usize, usize, usize), u: u32) -> Tensor {
    let v: Vec<u32> = (0..shape.0 * shape.1 * shape.2).map(|_| rng.random_range(0..u)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn gradient_suite() -> Outcome {
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let pl = Var::from_tensor(&uniform(&mut rng, &[2, 3, 4, 4], 2.0))?;
    let pc = Var::from_tensor(&uniform(&mut rng, &[2, 3, 2, 2], 2.0))?;
    let (ll, lc) = (labels(&mut rng, (2, 4, 4), 3), labels(&mut rng, (2, 2, 2), 3));
    let vars = vec![("P_l".to_string(), pl.clone()), ("P_c".to_string(), pc.clone())];
    let f = || Ok(dual_loss((pl.as_tensor(), &ll), Some((pc.as_tensor(), &lc)), 0.7, None)?.total);
    let loss = check_gradients(f, &vars, GradCheckConfig::default())?;

    let cfg = TransformerConfig { depth: 1, heads: 2, dim: 4, ..Default::default() };
    let store = ParamStore::new(DType::F64, 3);
    let block = ContextBlock::new(&store.root(), &cfg, true, 0)?;
    let tl = Var::from_tensor(&uniform(&mut rng, &[1, 4, 4], 1.0))?;
    let tc = Var::from_tensor(&uniform(&mut rng, &[1, 6, 4], 1.0))?;
    let readout = uniform(&mut rng, &[1, 4, 4], 1.0);
    let mut vars: Vec<(String, Var)> = store.trainable().into_iter().map(|e| (e.name, e.var)).collect();
    vars.push(("t_l".into(), tl.clone()));
    vars.push(("t_c".into(), tc.clone()));
    let f = || Ok((block.forward(tl.as_tensor(), tc.as_tensor(), Mode::Train)? * &readout)?.sum_all()?);
    let blk = check_gradients(f, &vars, GradCheckConfig { eps: 1e-3, floor: 1e-3 })?;

    let mut mcfg = ModelConfig::toy(Variant::WideContext, 3, 2, WindowGeometry::square(16, 3, 2), 128);
    mcfg.transformer.heads = 2;
    mcfg.transformer.depth = 2;
    let model = SegmentationModel::new(&mcfg, DType::F64, 7)?;
    let n = model.num_parameters();
    let local = uniform(&mut rng, &[2, 2, 16, 16], 1.0);
    let context = uniform(&mut rng, &[2, 2, 24, 24], 1.0);
    let (ll, lc) = (labels(&mut rng, (2, 16, 16), 3), labels(&mut rng, (2, 24, 24), 3));
    let vars: Vec<(String, Var)> = model.store().trainable().into_iter().map(|e| (e.name, e.var)).collect();
    let f = || {
        let out = model.forward(&local, Some(&context), Mode::Train)?;
        Ok(dual_loss((&out.local, &ll), Some((out.context.as_ref().unwrap(), &lc)), 0.5, None)?.total)
    };
    let full = check_gradients(f, &vars, GradCheckConfig { eps: 1e-6, floor: 1e-3 })?;

    let ok = n <= 5000
        && full.checked == n
        && [&loss, &blk, &full].iter().all(|r| r.max_rel_error <= TOL);
    verdict(
        ok,
        format!(
            "max relative error: dual_loss {:.1e}, context_block {:.1e}, full model ({n} params) {:.1e}",
            loss.max_rel_error, blk.max_rel_error, full.max_rel_error
        ),
    )
}

// ---------------------------------------------------------------------------
// Schedules.

fn schedule_exactness() -> Outcome {
    let (total, base, power) = (1000u64, 0.1, 1.5);
    let mut worst = 0.0f64;
    for it in 0..total {
        let x = it as f64 / total as f64;
        worst = worst.max((alpha_schedule(it, total)? - (1.0 - x) * (1.0 - x)).abs());
        worst = worst.max((lr_schedule(it, total, base, power)? - base * (1.0 - x).powf(power)).abs());
    }
    let a0 = alpha_schedule(0, total)?;
    let lr0 = lr_schedule(0, total, ExperimentConfig::default().train.base_lr, power)?;
    verdict(worst <= 1e-12 && a0 == 1.0 && lr0 == 0.1, format!("max error {worst:.1e}, alpha(0) = {a0}, lr(0) = {lr0}"))
}

// ---------------------------------------------------------------------------
// Geometry of the default configuration.

fn geometry() -> Outcome {
    let cfg = ExperimentConfig::default().model.model_config()?;
    let g = cfg.geometry;
    let model = SegmentationModel::new(&cfg, DType::F32, 0)?;
    let local = Tensor::zeros((1, cfg.bands(), g.local_h, g.local_w), DType::F32, &Device::Cpu)?;
    let (ch, cw) = g.context_input_size();
    let context = Tensor::zeros((1, cfg.bands(), ch, cw), DType::F32, &Device::Cpu)?;
    let f_l = model.local_encoder.forward(&local, Mode::Eval)?.values;
    let f_c = model.context_encoder.as_ref().unwrap().forward(&context, Mode::Eval)?.values;
    let reduced = model.reduce.forward(&f_l)?;
    let (t_l, t_c) = model.transformer.as_ref().unwrap().embed(&reduced, &f_c)?;
    let (n, m) = (t_l.count(), t_c.count());
    let ok = g.local_h == 256 && g.context_size() == (768, 768) && (ch, cw) == (192, 192) && n == 1024 && m == 576;
    verdict(
        ok,
        format!(
            "local {} -> {:?} (N = {n}); context {} -> {ch} -> {:?} (M = {m})",
            g.local_h,
            &f_l.dims()[2..],
            g.context_size().0,
            &f_c.dims()[2..]
        ),
    )
}

// ---------------------------------------------------------------------------
// Metrics.

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let u = rng.random_range(2..=8usize);
        let counts: Vec<u64> =
            (0..u * u).map(|_| if rng.random_bool(0.2) { 0 } else { rng.random_range(0..1000) }).collect();
        if counts.iter().sum::<u64>() == 0 {
            continue;
        }
        let cm = ConfusionMatrix::from_counts(u, counts.clone())?;
        let r = compute_metrics(&cm)?;
        let at = |g: usize, p: usize| counts[g * u + p] as f64;
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let oa = (0..u).map(|k| at(k, k)).sum::<f64>() / total;
        worst = worst.max((oa - r.oa).abs());
        let (mut f1s, mut ious) = (Vec::new(), Vec::new());
        for k in 0..u {
            let tp = at(k, k);
            let fp = (0..u).filter(|&g| g != k).map(|g| at(g, k)).sum::<f64>();
            let fneg = (0..u).filter(|&p| p != k).map(|p| at(k, p)).sum::<f64>();
            if tp + fp + fneg == 0.0 {
                continue;
            }
            let (f1, iou) = (2.0 * tp / (2.0 * tp + fp + fneg), tp / (tp + fp + fneg));
            worst = worst.max((f1 - r.per_class[k].f1).abs()).max((iou - r.per_class[k].iou).abs());
            f1s.push(f1);
            ious.push(iou);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        worst = worst.max((mean(&f1s) - r.mean_f1).abs()).max((mean(&ious) - r.miou).abs());
    }
    let mut identity = 0.0f64;
    for _ in 0..1000 {
        let counts: Vec<u64> = (0..4).map(|_| rng.random_range(1..500)).collect();
        let r = compute_metrics(&ConfusionMatrix::from_counts(2, counts)?)?;
        for c in &r.per_class {
            identity = identity.max((c.f1 - 2.0 * c.iou / (1.0 + c.iou)).abs());
        }
    }
    verdict(worst <= 1e-12 && identity <= 1e-12, format!("max deviation {worst:.1e}, binary identity {identity:.1e}"))
}

// ---------------------------------------------------------------------------
// Model size.

fn parameter_count() -> Outcome {
    let cfg = ExperimentConfig::default().model.model_config()?;
    let n = SegmentationModel::new(&cfg, DType::F32, 0)?.num_parameters();
    let reference = 38.24e6;
    let rel = n as f64 / reference - 1.0;
    verdict(rel.abs() <= 0.20, format!("{n} parameters ({:.2} M, {:+.1}% from 38.24 M)", n as f64 / 1e6, rel * 100.0))
}

// ---------------------------------------------------------------------------
// Reflection padding and sliding-window stitching.

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1);
    let r = i.rem_euclid(period);
    (if r < n { r } else { period - r }) as usize
}

fn reflection_and_stitching() -> Outcome {
    let mut checked = 0usize;
    let mut bad = 0usize;
    for h in 2..=7 {
        for w in 2..=7 {
            let img = Array3::from_shape_fn((1, h, w), |(_, i, j)| (i * 10 + j) as i32);
            for top in 0..h {
                for left in 0..w {
                    let (bottom, right) = ((top + 1) % h, (left + 2) % w);
                    let m = Margins { top, bottom, left, right };
                    let out = reflect_pad(img.view(), m)?;
                    for ((_, i, j), &v) in out.indexed_iter() {
                        let r = mirror(i as isize - top as isize, h);
                        let c = mirror(j as isize - left as isize, w);
                        checked += 1;
                        if v != img[[0, r, c]] {
                            bad += 1;
                        }
                    }
                }
            }
        }
    }
    let mut stitch = 0.0f64;
    for (h, w, local, stride) in [(96, 112, 32, 16), (130, 200, 64, 48), (256, 384, 128, 128), (40, 40, 16, 8)] {
        stitch = stitch.max(stitching_error(h, w, local, stride)?);
    }
    verdict(
        bad == 0 && stitch <= 1e-6,
        format!("{checked} padded pixels, {bad} mismatches; stitching max logit error {stitch:.1e}"),
    )
}

/// Logits that depend on both the tile position (carried by the pixel value)
/// and the in-window position, so overlapping windows disagree.
struct Probe {
    geom: WindowGeometry,
}

fn probe_logit(g: f64, k: usize, i: usize, j: usize) -> f32 {
    ((0.37 * (k + 1) as f64 * g).sin() + (0.011 * (i + 2 * j) as f64 * (k + 1) as f64).cos()) as f32
}

impl WindowPredictor for Probe {
    fn num_classes(&self) -> usize {
        3
    }
    fn geometry(&self) -> WindowGeometry {
        self.geom
    }
    fn predict_windows(&self, pairs: &[WindowPair]) -> ctxseg::Result<Vec<Array3<f32>>> {
        Ok(pairs
            .iter()
            .map(|p| {
                Array3::from_shape_fn((3, self.geom.local_h, self.geom.local_w), |(k, i, j)| {
                    probe_logit(p.local_image[[0, i, j]] as f64, k, i, j)
                })
            })
            .collect())
    }
}

fn stitching_error(h: usize, w: usize, local: usize, stride: usize) -> Result<f64, Box<dyn std::error::Error>> {
    let geom = WindowGeometry::square(local, 3, 4);
    let tile = RasterTile::new("t", Array3::from_shape_fn((1, h, w), |(_, i, j)| (i * w + j) as f32), Array2::zeros((h, w)))?;
    let cfg = SlidingConfig { stride: Some((stride, stride)), batch_size: 4, keep_logits: true };
    let pred = sliding_predict(&Probe { geom }, &tile, &cfg)?;
    let logits = pred.logits.unwrap();
    let starts = |len: usize| {
        let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + local <= len).collect();
        if *v.last().unwrap() != len - local {
            v.push(len - local);
        }
        v
    };
    let mut sum = Array3::<f64>::zeros((3, h, w));
    let mut count = Array2::<f64>::zeros((h, w));
    for &oy in &starts(h) {
        for &ox in &starts(w) {
            for i in 0..local {
                for j in 0..local {
                    let g = ((oy + i) * w + ox + j) as f64;
                    for k in 0..3 {
                        sum[[k, oy + i, ox + j]] += probe_logit(g, k, i, j) as f64;
                    }
                    count[[oy + i, ox + j]] += 1.0;
                }
            }
        }
    }
    let mut worst = 0.0f64;
    for ((k, i, j), &s) in sum.indexed_iter() {
        let expect = s / count[[i, j]];
        worst = worst.max((expect - logits[[k, i, j]] as f64).abs());
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Optional real-dataset smoke run.

pub const SMOKE_ENV: &str = "CTXSEG_SMOKE_DATA";

fn dataset_smoke() -> Outcome {
    let Some(dir) = std::env::var_os(SMOKE_ENV).map(PathBuf::from) else {
        return Ok(Verdict::Skip(format!("set {SMOKE_ENV} to a tile dataset directory to run")));
    };
    let train_tiles = TileDataset::open(&dir)?.load_role(Role::Train)?;
    let bands = train_tiles.first().ok_or("dataset has no training tiles")?.bands();
    let labels = train_tiles.iter().flat_map(|t| t.labels.iter().copied());
    let (mut max_label, mut has_ignore) = (0u32, false);
    for l in labels {
        if l == 255 {
            has_ignore = true;
        } else {
            max_label = max_label.max(l);
        }
    }
    let root = tempfile::tempdir()?;
    let overrides: Vec<String> = vec![
        "name=smoke".into(),
        format!("data.dir={:?}", dir.display().to_string()),
        "data.validation=\"windows\"".into(),
        "data.sampling={kind=\"random\", per_tile=4}".into(),
        format!("model.bands={bands}"),
        format!("model.num_classes={}", max_label + 1),
        "model.local_size=64".into(),
        "model.ctx_downsample=4".into(),
        "model.width_divisor=16".into(),
        "model.depth=2".into(),
        "train.epochs=5".into(),
        "train.batch_size=8".into(),
        "train.base_lr=0.01".into(),
    ]
    .into_iter()
    .chain(has_ignore.then(|| "train.ignore_index=255".to_string()))
    .collect();
    let cfg = ExperimentConfig::from_toml_str("", &overrides)?;
    let (run, train_report) = cmd_train(&cfg, root.path(), false, None)?;
    let split = if TileDataset::open(&dir)?.load_role(Role::Test)?.is_empty() { "val" } else { "test" };
    let report = cmd_eval(&cfg, root.path(), &run.join(ctxseg::train::BEST_CHECKPOINT), split)?;
    let json: serde_json::Value = serde_json::to_value(&report)?;
    let well_formed = (0.0..=1.0).contains(&report.oa)
        && report.per_class.len() == cfg.model.num_classes
        && json.get("OA").is_some()
        && report.per_class.iter().all(|c| c.f1.is_finite() && c.iou.is_finite())
        && train_report.history.len() == 5;
    verdict(
        well_formed,
        format!("{split} OA {:.3}, mean F1 {:.3}, mIoU {:.3}", report.oa, report.mean_f1, report.miou),
    )
}
