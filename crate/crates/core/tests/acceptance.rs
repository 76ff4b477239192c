//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 3 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use posematch::baseline::{correlation_map, ncc_match, GridSpec, NccMode, Precision};
use posematch::decode::MatchResult;
use posematch::evalkit::{
    evaluate, loc_err, make_benchmark, markdown_table, perturbation_trials, refine_prediction, rot_err, run_method,
    summary_csv, write_jsonl, BenchMode, BenchSample, BenchmarkSpec, EvalRecord, Level, Method, PerturbMode,
    RefineMode, SummaryRow,
};
use posematch::geometry::{rotated_iou, Pose};
use posematch::imaging::{render_footprint, Image};
use posematch::loss::{center_loss, geom_loss, total_loss};
use posematch::model::{Model, ModelConfig};
use posematch::refine::{refine_angle, RefineConfig};
use posematch::synth::dataset::{write_dataset, ImageCorpus};
use posematch::synth::scene::{generate_scene, write_corpus};
use posematch::synth::{elliptical_heatmap, heatmap_value, make_labels, read_manifest, PairConfig, SourceRecord};
use posematch::tensornet::gradcheck::{check_op, check_scalar, check_unary};
use posematch::tensornet::*;
use posematch::trainer::{overfit_check, train, PairSource, TrainConfig, TrainOutputs};

struct Ctx {
    _dir: tempfile::TempDir,
    root: PathBuf,
    records: Vec<SourceRecord>,
    paste: Vec<BenchSample>,
}

impl Ctx {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let manifest = write_corpus(&root.join("corpus"), 20, 320, 2024).unwrap();
        let records = read_manifest(&manifest).unwrap();
        let spec = BenchmarkSpec::new(Level::S1, (36, 36), 200, 17, BenchMode::Paste);
        let paste = make_benchmark(&spec, &records).unwrap();
        Ctx {
            _dir: dir,
            root,
            records,
            paste,
        }
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

// Magnitudes in [0.05, 2) with random sign: never near the relu kink.
fn off_kink(shape: [usize; 4], r: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| {
        let v: f64 = r.gen_range(0.05..2.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn naive_corr(s: &Tensor4<f64>, t: &Tensor4<f64>) -> Vec<f64> {
    let [_, c, hs, ws] = s.shape();
    let [_, _, ht, wt] = t.shape();
    let (ph, pw) = (ht as i64 / 2, wt as i64 / 2);
    let mut out = vec![0.0; hs * ws];
    for y in 0..hs as i64 {
        for x in 0..ws as i64 {
            let mut acc = 0.0;
            for ch in 0..c {
                for i in 0..ht as i64 {
                    for j in 0..wt as i64 {
                        let (sy, sx) = (y + i - ph, x + j - pw);
                        if sy >= 0 && sx >= 0 && sy < hs as i64 && sx < ws as i64 {
                            acc += s.at(0, ch, sy as usize, sx as usize) * t.at(0, ch, i as usize, j as usize);
                        }
                    }
                }
            }
            out[(y * ws as i64 + x) as usize] = acc;
        }
    }
    out
}

fn c1_correlation(_: &Ctx) -> Verdict {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let c = r.gen_range(1..=4);
        let (hs, ws) = (r.gen_range(3..=12), r.gen_range(3..=12));
        let ht = 2 * r.gen_range(0..=(hs - 1) / 2) + 1;
        let wt = 2 * r.gen_range(0..=(ws - 1) / 2) + 1;
        let s = rand_tensor([1, c, hs, ws], &mut r);
        let t = rand_tensor([1, c, ht, wt], &mut r);
        let y = depthwise_corr(&s, &t).unwrap();
        let summed: Vec<f64> = (0..hs * ws).map(|p| (0..c).map(|ch| y.plane(0, ch)[p]).sum()).collect();
        for (a, b) in summed.iter().zip(naive_corr(&s, &t)) {
            worst = worst.max((a - b).abs());
        }
    }
    // Single channel: the valid-window NCC numerator sum T(x', y') I(x + x', y + y').
    let mut worst_num: f64 = 0.0;
    for k in 0..20u64 {
        let img = generate_scene(12, 12, 3, k);
        let tw = 2 * r.gen_range(1..=3) + 1;
        let th = 2 * r.gen_range(1..=3) + 1;
        let tpl = generate_scene(tw, th, 4, k).to_gray();
        let g = img.to_gray();
        let st = Tensor4::from_vec([1, 1, 12, 12], g.data().iter().map(|&v| v as f64).collect()).unwrap();
        let tt = Tensor4::from_vec([1, 1, th, tw], tpl.data().iter().map(|&v| v as f64).collect()).unwrap();
        let y = depthwise_corr(&st, &tt).unwrap();
        let base = correlation_map(&g, &tpl).unwrap();
        for v in 0..=12 - th {
            for u in 0..=12 - tw {
                let mut num = 0.0f64;
                for j in 0..th {
                    for i in 0..tw {
                        num += tpl.get(i, j, 0) as f64 * g.get(u + i, v + j, 0) as f64;
                    }
                }
                let d = y.at(0, 0, v + th / 2, u + tw / 2);
                worst_num = worst_num.max((d - num).abs()).max((base.at(u, v) as f64 - num).abs());
            }
        }
    }
    verdict(
        worst < 1e-5 && worst_num < 1e-5,
        format!("max |corr - naive| {worst:.1e}; max |corr - NCC numerator| {worst_num:.1e}"),
    )
}

fn c2_gradients(_: &Ctx) -> Verdict {
    let mut r = rng(2);
    let mut results: Vec<(&str, f64)> = Vec::new();
    let x = off_kink([1, 2, 6, 6], &mut r);
    let w = rand_tensor([3, 2, 3, 3], &mut r);
    for (name, stride) in [("conv2d s1", 1), ("conv2d s2", 2)] {
        let e = check_op(
            &x,
            &w,
            |x, w| conv2d(x, w, &[0.1, -0.2, 0.3], stride, 1).unwrap(),
            |x, w, dy| {
                let g = conv2d_backward(x, w, stride, 1, dy).unwrap();
                (g.dx, g.dw)
            },
            100,
            3,
        );
        results.push((name, e));
    }
    let s = rand_tensor([1, 3, 8, 7], &mut r);
    let t = rand_tensor([1, 3, 3, 5], &mut r);
    let e = check_op(
        &s,
        &t,
        |s, t| depthwise_corr(s, t).unwrap(),
        |s, t, dy| depthwise_corr_backward(s, t, dy).unwrap(),
        100,
        4,
    );
    results.push(("depthwise_corr", e));
    let pw = rand_tensor([5, 3, 1, 1], &mut r);
    let e = check_op(
        &s,
        &pw,
        |x, w| pointwise_conv(x, w, &[0.0; 5]).unwrap(),
        |x, w, dy| {
            let g = pointwise_conv_backward(x, w, dy).unwrap();
            (g.dx, g.dw)
        },
        100,
        5,
    );
    results.push(("pointwise", e));
    let z = rand_tensor([1, 16, 3, 2], &mut r);
    results.push((
        "pixel_shuffle",
        check_unary(&z, |x| pixel_shuffle(x, 4).unwrap(), |_, g| pixel_unshuffle(g, 4).unwrap(), 100, 6),
    ));
    let a = off_kink([1, 2, 6, 6], &mut r);
    results.push(("relu", check_unary(&a, relu, |x, g| relu_backward(x, g).unwrap(), 100, 7)));
    results.push((
        "sigmoid",
        check_unary(&a, sigmoid, |x, g| sigmoid_backward(&sigmoid(x), g).unwrap(), 100, 8),
    ));
    results.push(("tanh", check_unary(&a, tanh, |x, g| tanh_backward(&tanh(x), g).unwrap(), 100, 9)));

    // Losses on random maps against real labels.
    let gt = Pose::new(9.0, 7.0, 35.0, 1.2, 0.8).unwrap();
    let labels = make_labels(&[gt], (12, 12), (20, 16), 3.0, 2.5).unwrap();
    let n = 20 * 16;
    let maps = posematch::model::OutputMaps::<f64> {
        width: 20,
        height: 16,
        score: (0..n).map(|_| r.gen_range(0.02..0.98)).collect(),
        cos: (0..n).map(|_| r.gen_range(-0.95..0.95)).collect(),
        sign: (0..n).map(|_| r.gen_range(0.02..0.98)).collect(),
        sx: (0..n).map(|_| r.gen_range(0.02..0.98)).collect(),
        sy: (0..n).map(|_| r.gen_range(0.02..0.98)).collect(),
    };
    let (_, dscore, _) = center_loss(&maps.score, &labels.heatmap).unwrap();
    let e = check_scalar(|v| center_loss(v, &labels.heatmap).unwrap().0, &maps.score.clone(), &dscore, 100, 10);
    results.push(("center loss", e));
    let (_, g) = geom_loss(&maps, &labels).unwrap();
    let mut geom_worst: f64 = 0.0;
    for m in 1..5 {
        let x0 = maps.maps()[m].clone();
        let grad = [&g.score, &g.cos, &g.sign, &g.sx, &g.sy][m].clone();
        let f = |v: &[f64]| {
            let mut mm = maps.clone();
            [&mut mm.score, &mut mm.cos, &mut mm.sign, &mut mm.sx, &mut mm.sy][m].copy_from_slice(v);
            let (t, _) = geom_loss(&mm, &labels).unwrap();
            t.cos_l1 + t.sign_ce + t.sx_l1 + t.sy_l1
        };
        // Probe only supervised pixels: elsewhere both sides are zero.
        let valid: Vec<usize> = (0..n).filter(|&i| labels.valid[i]).collect();
        let sub_x: Vec<f64> = valid.iter().map(|&i| x0[i]).collect();
        let sub_g: Vec<f64> = valid.iter().map(|&i| grad[i]).collect();
        let fs = |v: &[f64]| {
            let mut full = x0.clone();
            for (k, &i) in valid.iter().enumerate() {
                full[i] = v[k];
            }
            f(&full)
        };
        geom_worst = geom_worst.max(check_scalar(fs, &sub_x, &sub_g, 100, 11 + m as u64));
    }
    results.push(("geometric losses", geom_worst));

    // Composed model, every parameter tensor.
    let model: Model<f64> = Model::new(ModelConfig { channels: 4, hidden: 3, ..Default::default() }, 9).unwrap();
    let t = generate_scene(12, 12, 4, 0);
    let srch = generate_scene(24, 20, 4, 1);
    let gt = Pose::new(11.0, 9.0, -50.0, 1.1, 0.9).unwrap();
    let labels = make_labels(&[gt], (12, 12), (24, 20), 2.0, 2.5).unwrap();
    let mut m = model.clone();
    let cache = m.forward_train(&t, &srch).unwrap();
    let (_, grads) = total_loss(cache.outputs(), &labels).unwrap();
    m.backward(&cache, &grads).unwrap();
    let mut model_worst: f64 = 0.0;
    for p in m.params().params() {
        let name = p.name.clone();
        let f = |v: &[f64]| {
            let mut mm = model.clone();
            mm.params_mut().get_mut(&name).unwrap().data_mut().copy_from_slice(v);
            total_loss(&mm.forward(&t, &srch).unwrap(), &labels).unwrap().0.total
        };
        model_worst = model_worst.max(check_scalar(f, p.value.data(), p.value.grad().unwrap(), 100, 77));
    }
    results.push(("composed model", model_worst));

    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(worst < 1e-3, format!("worst rel err {worst:.1e} ({detail})"))
}

/// Covariance form: `exp(-d^T S^-1 d / 2)` with `S = sigma^2 A A^T`.
fn oracle_heat(p: &Pose, sigma0: f64, x: f64, y: f64) -> f64 {
    let (s, c) = p.theta.to_radians().sin_cos();
    let a = [[c * p.sx, -s * p.sy], [s * p.sx, c * p.sy]];
    let cov = [
        [a[0][0] * a[0][0] + a[0][1] * a[0][1], a[0][0] * a[1][0] + a[0][1] * a[1][1]],
        [a[1][0] * a[0][0] + a[1][1] * a[0][1], a[1][0] * a[1][0] + a[1][1] * a[1][1]],
    ];
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
    let (dx, dy) = (x - p.xc, y - p.yc);
    let q = dx * (inv[0][0] * dx + inv[0][1] * dy) + dy * (inv[1][0] * dx + inv[1][1] * dy);
    (-q / (2.0 * sigma0 * sigma0)).exp()
}

fn random_pose(r: &mut ChaCha8Rng, w: f64, h: f64) -> Pose {
    Pose::new(
        r.gen_range(0.0..w - 1.0),
        r.gen_range(0.0..h - 1.0),
        r.gen_range(-180.0..180.0),
        r.gen_range(0.4..2.5),
        r.gen_range(0.4..2.5),
    )
    .unwrap()
}

fn c3_labels(_: &Ctx) -> Verdict {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = random_pose(&mut r, 64.0, 48.0);
        let sigma0 = r.gen_range(2.0..8.0);
        let map = elliptical_heatmap(&p, (36, 36), (64, 48), sigma0).unwrap();
        for _ in 0..5 {
            let (x, y) = (r.gen_range(0..64), r.gen_range(0..48));
            let v = map[y * 64 + x] as f64;
            worst = worst.max((v - oracle_heat(&p, sigma0, x as f64, y as f64)).abs() - 0.5 * f32::EPSILON as f64);
            let (fx, fy) = (r.gen_range(-5.0..70.0), r.gen_range(-5.0..55.0));
            worst = worst.max((heatmap_value(&p, sigma0, fx, fy).unwrap() - oracle_heat(&p, sigma0, fx, fy)).abs());
        }
    }
    let mut iso: f64 = 0.0;
    for _ in 0..1000 {
        let p = Pose::new(r.gen_range(0.0..60.0), r.gen_range(0.0..40.0), 0.0, 1.0, 1.0).unwrap();
        let sigma0 = r.gen_range(1.0..10.0);
        let (x, y) = (r.gen_range(-10.0..70.0), r.gen_range(-10.0..50.0));
        let expect = (-((x - p.xc).powi(2) + (y - p.yc).powi(2)) / (2.0 * sigma0 * sigma0)).exp();
        iso = iso.max((heatmap_value(&p, sigma0, x, y).unwrap() - expect).abs());
    }
    let mut mismatched = 0usize;
    for _ in 0..100 {
        let p = random_pose(&mut r, 96.0, 80.0);
        let l = make_labels(&[p], (36, 36), (96, 80), 6.0, 2.5).unwrap();
        mismatched += l.heatmap.iter().zip(&l.valid).filter(|(&y, &v)| (y >= 0.5) != v).count();
    }
    verdict(
        worst < 1e-6 && iso <= 1e-7 && mismatched == 0,
        format!("closed form max err {worst:.1e}; identity-A err {iso:.1e}; mask mismatches {mismatched}"),
    )
}

fn c4_iou(_: &Ctx) -> Verdict {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = Pose::new(0.0, 0.0, r.gen_range(-180.0..180.0), r.gen_range(0.5..2.0), r.gen_range(0.5..2.0)).unwrap();
        let b = Pose::new(
            r.gen_range(-15.0..15.0),
            r.gen_range(-15.0..15.0),
            r.gen_range(-180.0..180.0),
            r.gen_range(0.5..2.0),
            r.gen_range(0.5..2.0),
        )
        .unwrap();
        let (ba, bb) = (a.footprint(20, 20), b.footprint(16, 24));
        let exact = rotated_iou(&ba, &bb);
        let (a0, a1, a2, a3) = ba.bounds();
        let (b0, b1, b2, b3) = bb.bounds();
        let (x0, y0, x1, y1) = (a0.min(b0), a1.min(b1), a2.max(b2), a3.max(b3));
        let (mut ia, mut ib, mut both) = (0u64, 0u64, 0u64);
        for _ in 0..1_000_000 {
            let (x, y) = (r.gen_range(x0..x1), r.gen_range(y0..y1));
            let (p, q) = (ba.contains(x, y), bb.contains(x, y));
            ia += p as u64;
            ib += q as u64;
            both += (p && q) as u64;
        }
        let mc = both as f64 / (ia + ib - both) as f64;
        worst = worst.max((exact - mc).abs());
    }
    let sq = Pose::new(0.0, 0.0, 0.0, 1.0, 1.0).unwrap().footprint(10, 10);
    let rot = Pose::new(0.0, 0.0, 45.0, 1.0, 1.0).unwrap().footprint(10, 10);
    let diamond = rotated_iou(&sq, &rot);
    verdict(
        worst < 0.005 && (diamond - std::f64::consts::FRAC_1_SQRT_2).abs() <= 0.002,
        format!("max |exact - Monte Carlo| {worst:.4}; 45-degree square IoU {diamond:.4}"),
    )
}

fn masked_zncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    ab / (aa * bb).sqrt().max(1e-12)
}

fn c5_round_trip(ctx: &Ctx) -> Verdict {
    let corpus = ImageCorpus::load(&ctx.records).unwrap();
    let cfg = PairConfig {
        template_size: Some((36, 36)),
        search_size: (128, 128),
        scale_range: Some(Level::S1_5.scale_range()),
        ..Default::default()
    };
    let (mut good, mut centers_ok) = (0usize, 0usize);
    let mut worst_center: f64 = 0.0;
    let mut lowest: f64 = 1.0;
    for i in 0..200u64 {
        let pair = corpus.pair(5, i, &cfg).unwrap();
        let fp = render_footprint(&pair.template, &pair.gt, 128, 128).unwrap().unwrap();
        let (tg, sg) = (fp.values.to_gray(), pair.search.to_gray());
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for v in 0..fp.height() {
            for u in 0..fp.width() {
                if fp.mask[v * fp.width() + u] {
                    a.push(tg.get(u, v, 0) as f64);
                    b.push(sg.get(fp.x0 + u, fp.y0 + v, 0) as f64);
                }
            }
        }
        let z = masked_zncc(&a, &b);
        lowest = lowest.min(z);
        good += (z >= 0.9) as usize;
        let (cx, cy) = pair.provenance.bbox.center();
        let (rx, ry) = pair.provenance.source_to_search(cx, cy);
        let d = (rx - pair.gt.xc).hypot(ry - pair.gt.yc);
        worst_center = worst_center.max(d);
        centers_ok += (d <= 0.5) as usize;
    }
    verdict(
        good as f64 >= 0.98 * 200.0 && centers_ok == 200,
        format!("NCC >= 0.9 in {good}/200 (lowest {lowest:.3}); centers within 0.5 px {centers_ok}/200 (max {worst_center:.2e})"),
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn c6_refinement(ctx: &Ctx) -> Verdict {
    let cfg = RefineConfig::default();
    let trials = perturbation_trials(&ctx.paste, PerturbMode::AngleUniform(15.0), 61);
    let (mut post, mut not_worse) = (Vec::new(), 0usize);
    let start = Instant::now();
    for t in &trials {
        let s = &ctx.paste[t.sample];
        let r = refine_angle(&s.search, &s.template, &t.init, &cfg).unwrap();
        let after = rot_err(&t.gt, &t.init.with_theta(r.theta));
        not_worse += (after <= rot_err(&t.gt, &t.init) + 1e-9) as usize;
        post.push(after);
    }
    let per_sample_ms = start.elapsed().as_secs_f64() * 1e3 / trials.len() as f64;
    let med = median(&mut post);

    let mut r = rng(6);
    let mut kept = 0usize;
    for s in ctx.paste.iter().take(50) {
        let blank = Image::new(320, 320, 3);
        let init = Pose::new(r.gen_range(40.0..280.0), r.gen_range(40.0..280.0), r.gen_range(-180.0..180.0), 1.0, 1.0).unwrap();
        let out = refine_angle(&blank, &s.template, &init, &cfg).unwrap();
        kept += (out.fallback && out.theta == init.theta) as usize;
    }
    let n = trials.len();
    verdict(
        med <= 1.0 && not_worse as f64 >= 0.95 * n as f64 && kept == 50 && per_sample_ms < 50.0,
        format!(
            "median post rot_err {med:.3} deg; not worse {not_worse}/{n}; blank fallbacks {kept}/50; {per_sample_ms:.1} ms/sample"
        ),
    )
}

fn c7_external(ctx: &Ctx) -> Verdict {
    let cfg = RefineConfig::default();
    let run = |mode: PerturbMode, refine: RefineMode, err: fn(&Pose, &Pose) -> f64| {
        let trials = perturbation_trials(&ctx.paste, mode, 71);
        let (mut before, mut after) = (0.0, 0.0);
        for t in &trials {
            let s = &ctx.paste[t.sample];
            let m = MatchResult {
                pose: t.init,
                score: 1.0,
                refined: false,
            };
            let out = refine_prediction(&s.search, &s.template, &m, refine, &cfg, 3).unwrap();
            before += err(&t.gt, &t.init);
            after += err(&t.gt, &out.pose);
        }
        let n = trials.len() as f64;
        (before / n, after / n)
    };
    let (rb, ra) = run(PerturbMode::AngleFixed(5.0), RefineMode::Angle, rot_err);
    let (lb, la) = run(PerturbMode::Position(2.0), RefineMode::Position, loc_err);
    let (dr, dl) = (1.0 - ra / rb, 1.0 - la / lb);
    verdict(
        dr >= 0.4 && dl >= 0.4,
        format!(
            "angle: rot_err {rb:.2} -> {ra:.2} deg ({:.0}% lower); position: loc_err {lb:.2} -> {la:.2} px ({:.0}% lower)",
            dr * 100.0,
            dl * 100.0
        ),
    )
}

fn c8_ncc(ctx: &Ctx) -> Verdict {
    let spec = BenchmarkSpec::new(Level::S1, (36, 36), 100, 8, BenchMode::Paste);
    let samples = make_benchmark(&spec, &ctx.records).unwrap();
    let method = Method::Ncc {
        grid: GridSpec::over(2.0, (1.0, 1.0), 0.1),
        mode: NccMode::ZeroMean,
        precision: Precision::Single,
    };
    let records: Vec<EvalRecord> = samples
        .iter()
        .map(|s| {
            let out = run_method(&method, s, 1).unwrap();
            EvalRecord::new(s.gts[0], out.pred.pose, (36, 36), out.timings)
        })
        .collect();
    let sum = evaluate(&records, false).unwrap();

    // Per-cell cost over 45, 90 and 180 angles on one sample.
    let s = &samples[0];
    let mut per_cell = Vec::new();
    for step in [8.0, 4.0, 2.0] {
        let grid = GridSpec::over(step, (1.0, 1.0), 0.1);
        let best = (0..3)
            .map(|_| {
                let t = Instant::now();
                ncc_match(&s.search, &s.template, &grid, NccMode::ZeroMean, Precision::Single).unwrap();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min);
        per_cell.push((grid.len(), best / grid.len() as f64));
    }
    let mean = per_cell.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let linear = per_cell.iter().all(|p| (p.1 / mean - 1.0).abs() <= 0.2);
    let cells = per_cell
        .iter()
        .map(|(n, t)| format!("{n} cells {:.1} ms/cell", t * 1e3))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        sum.loc_err.median <= 2.5 && sum.rot_err.mean <= 5.0 && linear,
        format!(
            "median loc_err {:.2} px, mean rot_err {:.2} deg, mIoU {:.3}, succ {:.0}%; {cells}",
            sum.loc_err.median,
            sum.rot_err.mean,
            sum.miou,
            sum.success_rate * 100.0
        ),
    )
}

fn c9_training(ctx: &Ctx) -> Verdict {
    let start = Instant::now();
    let corpus = ImageCorpus::load(&ctx.records).unwrap();
    let ocfg = TrainConfig {
        seed: 1,
        steps: 1500,
        batch: 1,
        ..Default::default()
    };
    let pair = corpus.pair(1, 0, &ocfg.pair_config()).unwrap();
    let over = overfit_check(ocfg, &pair, Some(&ctx.root.join("overfit_maps")));
    let cfg = TrainConfig {
        seed: 1,
        steps: 500,
        ..Default::default()
    };
    let src = PairSource::Corpus {
        corpus,
        pair: cfg.pair_config(),
    };
    let (_, logs) = train(cfg, &src, &TrainOutputs::default()).unwrap();
    let (e25, e500) = (logs[24].ema_total, logs[499].ema_total);
    let secs = start.elapsed().as_secs_f64();
    let over_detail = match &over {
        Ok(r) => format!(
            "overfit center err {:.2} px, rot_err {:.2} deg, EMA {:.3} -> {:.3}",
            r.center_err, r.rot_err, r.ema_at_10, r.ema_final
        ),
        Err(e) => format!("overfit failed: {e}"),
    };
    verdict(
        over.is_ok() && e500 <= 0.5 * e25 && secs < 600.0,
        format!("{over_detail}; S1 EMA {e25:.3} -> {e500:.3} (x{:.2}); {secs:.0} s", e500 / e25),
    )
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c10_determinism(ctx: &Ctx) -> Verdict {
    let corpus = ImageCorpus::load(&ctx.records).unwrap();
    let tcfg = TrainConfig {
        seed: 3,
        steps: 10,
        batch: 2,
        ..Default::default()
    };
    let pcfg = tcfg.pair_config();
    let src = PairSource::Corpus {
        corpus: corpus.clone(),
        pair: pcfg.clone(),
    };
    let mut runs = Vec::new();
    for k in 0..2 {
        let dir = ctx.root.join(format!("det{k}"));
        write_dataset(&dir.join("data"), (0..6).map(|i| corpus.pair(3, i, &pcfg)), 1.0 / 6.0, 2.5).unwrap();
        let out = TrainOutputs {
            weights: Some(dir.join("train/w.bin")),
            log: Some(dir.join("train/log.jsonl")),
            ..Default::default()
        };
        train(tcfg.clone(), &src, &out).unwrap();

        let spec = BenchmarkSpec::new(Level::S1_5, (36, 36), 4, 3, BenchMode::Paste);
        let samples = make_benchmark(&spec, &ctx.records).unwrap();
        let model = Model::load_weights(&dir.join("train/w.bin")).unwrap();
        let methods = [
            Method::Ncc {
                grid: GridSpec::over(30.0, (0.8, 1.5), 0.35),
                mode: NccMode::ZeroMean,
                precision: Precision::Single,
            },
            Method::Model {
                model: &model,
                refine: Some(RefineConfig::default()),
            },
        ];
        let mut rows = Vec::new();
        let mut recs = Vec::new();
        for m in &methods {
            let r: Vec<EvalRecord> = samples
                .iter()
                .map(|s| {
                    let o = run_method(m, s, 1).unwrap();
                    EvalRecord::new(s.gts[0], o.pred.pose, (36, 36), o.timings)
                })
                .collect();
            rows.push(SummaryRow {
                method: m.name().into(),
                level: "S1.5".into(),
                summary: evaluate(&r, true).unwrap(),
            });
            recs.extend(r);
        }
        std::fs::create_dir_all(dir.join("bench")).unwrap();
        std::fs::write(dir.join("bench/report.csv"), summary_csv(&rows)).unwrap();
        write_jsonl(&dir.join("bench/records.jsonl"), &recs).unwrap();
        let _ = markdown_table(&rows);
        runs.push([tree(&dir.join("data")), tree(&dir.join("train")), tree(&dir.join("bench"))]);
    }
    let names = ["synth-data", "train", "bench"];
    let same: Vec<bool> = (0..3).map(|i| runs[0][i] == runs[1][i] && !runs[0][i].is_empty()).collect();
    let detail = names
        .iter()
        .zip(&same)
        .map(|(n, s)| format!("{n} {}", if *s { "identical" } else { "DIFFERENT" }))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(same.iter().all(|&s| s), detail)
}

fn c11_sensitivity(ctx: &Ctx) -> Verdict {
    let trials = perturbation_trials(&ctx.paste[..100], PerturbMode::AngleUniform(15.0), 111);
    let pre: f64 = trials.iter().map(|t| rot_err(&t.gt, &t.init)).sum::<f64>() / trials.len() as f64;
    let mut rows = Vec::new();
    for step in [0.5, 1.0, 2.0, 4.0] {
        let cfg = RefineConfig {
            step,
            radius: 20.0,
            ..Default::default()
        };
        let start = Instant::now();
        let mut post = 0.0;
        for t in &trials {
            let s = &ctx.paste[t.sample];
            let r = refine_angle(&s.search, &s.template, &t.init, &cfg).unwrap();
            post += rot_err(&t.gt, &t.init.with_theta(r.theta));
        }
        let ms = start.elapsed().as_secs_f64() * 1e3;
        rows.push((step, pre - post / trials.len() as f64, ms));
    }
    let improvement_ok = rows.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-9);
    let time_ok = rows.windows(2).all(|w| w[1].2 <= w[0].2);
    let detail = rows
        .iter()
        .map(|(s, i, t)| format!("step {s}: -{i:.2} deg in {t:.0} ms"))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(improvement_ok && time_ok, format!("pre {pre:.2} deg; {detail}"))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn(&Ctx) -> Verdict); 11] = [
        ("correlation oracle", c1_correlation),
        ("gradient suite", c2_gradients),
        ("label correctness", c3_labels),
        ("rotated IoU", c4_iou),
        ("synthesis round trip", c5_round_trip),
        ("refinement recovery", c6_refinement),
        ("external refinement", c7_external),
        ("NCC baseline", c8_ncc),
        ("smoke training", c9_training),
        ("determinism", c10_determinism),
        ("refinement step sensitivity", c11_sensitivity),
    ];
    let ctx = Ctx::new();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let k = i + 1;
        if !only.is_empty() && !only.contains(&k) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(|| f(&ctx))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        println!(
            "{} {k:>2}. {name}: {} [{secs:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += (!v.pass) as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
