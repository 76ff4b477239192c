use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use serde::Serialize;

use posematch::baseline::{GridSpec, NccMode, Precision};
use posematch::decode::{decode_multi, decode_single, MultiConfig};
use posematch::evalkit::{
    draw_overlay, evaluate, make_benchmark, markdown_table, read_jsonl, refine_prediction, run_method,
    summary_csv, write_jsonl, write_text, BenchmarkSpec, EvalRecord, ExternalPrediction, Method, SummaryRow,
};
use posematch::imaging::{load_image, resize_bilinear, save_image, Image};
use posematch::model::Model;
use posematch::refine::refine_match;
use posematch::synth::dataset::{read_dataset, write_dataset, ImageCorpus};
use posematch::synth::scene::write_corpus;
use posematch::synth::{is_valid_size, nearest_valid_size, read_manifest, DEFAULT_S_MAX, DEFAULT_SIGMA_RATIO};
use posematch::trainer::{train, PairSource, TrainConfig, TrainOutputs};

use crate::{BenchArgs, BenchMethod, Cli, Command, MakeCorpusArgs, MatchArgs, RefineExternalArgs, SynthDataArgs, TrainArgs, UsageError};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeCorpus(a) => make_corpus(a, cli.seed),
        Command::SynthData(a) => synth_data(a, cli.seed),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Match(a) => match_cmd(a),
        Command::Bench(a) => bench(a, cli.seed),
        Command::RefineExternal(a) => refine_external(a),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn make_corpus(a: &MakeCorpusArgs, seed: u64) -> Result<()> {
    let manifest = write_corpus(&a.out, a.count, a.size, seed)?;
    eprintln!("wrote {} images; manifest {}", a.count, manifest.display());
    Ok(())
}

fn synth_data(a: &SynthDataArgs, seed: u64) -> Result<()> {
    let records = read_manifest(&a.manifest).with_context(|| format!("manifest {}", a.manifest.display()))?;
    let cfg = posematch::synth::PairConfig {
        template_size: Some(a.template_size),
        search_size: a.search_size,
        scale_range: Some(a.level.scale_range()),
        angle_range: (-a.max_angle, a.max_angle),
        ..Default::default()
    };
    let s_max = DEFAULT_S_MAX.max(a.level.scale_range().1);
    let n = if a.count == 0 {
        write_dataset(&a.out, std::iter::empty(), DEFAULT_SIGMA_RATIO, s_max)?
    } else {
        let corpus = ImageCorpus::load(&records)?;
        write_dataset(
            &a.out,
            (0..a.count as u64).map(|i| corpus.pair(seed, i, &cfg)),
            DEFAULT_SIGMA_RATIO,
            s_max,
        )?
    };
    eprintln!("wrote {n} pairs (level {}, template {}x{}) to {}", a.level, a.template_size.0, a.template_size.1, a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, seed: u64) -> Result<()> {
    let cfg = TrainConfig {
        seed,
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        level: a.level,
        template_size: a.template_size,
        search_size: a.search_size,
        angle_range: (-a.max_angle, a.max_angle),
        checkpoint_every: a.checkpoint_every,
        ..Default::default()
    };
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let source = match (&a.data, &a.manifest) {
        (Some(dir), _) => PairSource::Pairs(read_dataset(dir).with_context(|| format!("dataset {}", dir.display()))?),
        (None, Some(m)) => {
            let records = read_manifest(m).with_context(|| format!("manifest {}", m.display()))?;
            PairSource::Corpus {
                corpus: ImageCorpus::load(&records)?,
                pair: cfg.pair_config(),
            }
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let out = TrainOutputs {
        weights: Some(a.out.clone()),
        log: Some(a.log.clone().unwrap_or_else(|| sibling(&a.out, ".log.jsonl"))),
        checkpoint_dir: (a.checkpoint_every > 0)
            .then(|| a.checkpoint_dir.clone().unwrap_or_else(|| sibling(&a.out, ".ckpt"))),
        resume: a.resume.clone(),
    };
    let (_, logs) = train(cfg, &source, &out)?;
    if let Some(last) = logs.last() {
        eprintln!(
            "trained to step {}: loss {:.4}, ema {:.4}; weights {}",
            last.step,
            last.loss.total,
            last.ema_total,
            a.out.display()
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Model::load_weights(path).with_context(|| format!("loading weights {}", path.display()))
}

/// Resizes to the nearest valid template size; returns the per-axis factor
/// (new / old) used to express scales relative to the original.
fn conform_template(t: Image) -> Result<(Image, (f64, f64))> {
    let (w, h) = (t.width(), t.height());
    if is_valid_size(w) && is_valid_size(h) {
        return Ok((t, (1.0, 1.0)));
    }
    let (nw, nh) = (nearest_valid_size(w)?, nearest_valid_size(h)?);
    warn!("template is {w}x{h}; resizing to {nw}x{nh} (sides must be 8n+4)");
    let r = resize_bilinear(&t, nw, nh)?;
    Ok((r, (nw as f64 / w as f64, nh as f64 / h as f64)))
}

fn match_cmd(a: &MatchArgs) -> Result<()> {
    let model = load_model(&a.weights)?;
    let template = load_image(&a.template).with_context(|| format!("template {}", a.template.display()))?;
    let search = load_image(&a.search).with_context(|| format!("search {}", a.search.display()))?;
    let (template, (fx, fy)) = conform_template(template)?;
    let rcfg = a.refine_args.config();
    if a.refine {
        rcfg.validate().map_err(|e| UsageError(e.to_string()))?;
    }
    let maps = model.forward(&template, &search)?;
    let s_max = model.config().s_max;
    let tsize = (template.width(), template.height());
    let mut found = if a.multi {
        let cfg = MultiConfig {
            score_thresh: a.score_thresh,
            iou_thresh: a.nms_iou,
            max_det: a.max_det,
        };
        decode_multi(&maps, s_max, tsize, &cfg).map_err(|e| UsageError(e.to_string()))?
    } else {
        vec![decode_single(&maps, s_max)?]
    };
    if a.refine {
        for m in &mut found {
            *m = refine_match(&search, &template, m, &rcfg)?.0;
        }
    }
    if let Some(p) = &a.overlay {
        let poses: Vec<_> = found.iter().map(|m| m.pose).collect();
        save_image(&draw_overlay(&search, &[], &poses, tsize), p)?;
    }
    for m in &mut found {
        m.pose.sx *= fx;
        m.pose.sy *= fy;
    }
    let json = if a.multi {
        serde_json::to_string(&found)?
    } else {
        serde_json::to_string(&found[0])?
    };
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct SampleTiming {
    index: usize,
    forward_ms: f64,
    refine_ms: f64,
    total_ms: f64,
}

fn bench(a: &BenchArgs, seed: u64) -> Result<()> {
    let model = match (a.method, &a.weights) {
        (BenchMethod::Ncc, _) => None,
        (_, None) => return Err(UsageError("--weights is required for the model methods".into()).into()),
        (_, Some(w)) => Some(load_model(w)?),
    };
    let range = if a.level.scale_active() { a.level.scale_range() } else { (1.0, 1.0) };
    let method = match (&model, a.method) {
        (_, BenchMethod::Ncc) => Method::Ncc {
            grid: GridSpec::over(a.angle_step, range, a.scale_step),
            mode: NccMode::ZeroMean,
            precision: Precision::Single,
        },
        (Some(m), BenchMethod::Model) => Method::Model { model: m, refine: None },
        (Some(m), BenchMethod::ModelRefine) => Method::Model {
            model: m,
            refine: Some(a.refine_args.config()),
        },
        (None, _) => unreachable!("model loaded above"),
    };
    if let Method::Ncc { grid, .. } = &method {
        grid.validate().map_err(|e| UsageError(e.to_string()))?;
    }
    let records = read_manifest(&a.manifest).with_context(|| format!("manifest {}", a.manifest.display()))?;
    let mut spec = BenchmarkSpec::new(a.level, a.template_size, a.count, seed, a.mode);
    spec.search_size = a.search_size;
    let samples = make_benchmark(&spec, &records)?;
    info!("{} samples at {} ({})", samples.len(), a.level, method.name());

    let mut evals = Vec::with_capacity(samples.len());
    let mut timings = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let out = run_method(&method, s, a.repeats)?;
        let rec = EvalRecord::new(s.gts[0], out.pred.pose, a.template_size, out.timings);
        if k < a.overlays {
            let p = sibling(&a.out, &format!(".overlay_{k:03}.png"));
            save_image(&draw_overlay(&s.search, &s.gts, &[out.pred.pose], a.template_size), p)?;
        }
        timings.push(SampleTiming {
            index: s.index,
            forward_ms: out.timings.forward_ms,
            refine_ms: out.timings.refine_ms,
            total_ms: out.timings.total_ms,
        });
        evals.push(rec);
        if (k + 1) % 10 == 0 {
            info!("{}/{} samples", k + 1, samples.len());
        }
    }
    let summary = evaluate(&evals, a.level.scale_active())?;
    let rows = [SummaryRow {
        method: method.name().to_string(),
        level: a.level.to_string(),
        summary,
    }];
    write_text(&a.out, &summary_csv(&rows))?;
    write_text(&sibling(&a.out, ".md"), &markdown_table(&rows))?;
    write_jsonl(&sibling(&a.out, ".jsonl"), &evals)?;
    write_jsonl(&sibling(&a.out, ".timings.jsonl"), &timings)?;
    eprint!("{}", markdown_table(&rows));
    Ok(())
}

fn refine_external(a: &RefineExternalArgs) -> Result<()> {
    let cfg = a.refine_args.config();
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let (preds, bad) = read_jsonl::<ExternalPrediction>(&a.pred).with_context(|| format!("predictions {}", a.pred.display()))?;
    for (line, msg) in &bad {
        warn!("skipping malformed line {line}: {msg}");
    }
    let default_template = match &a.template {
        Some(p) => Some(load_image(p).with_context(|| format!("template {}", p.display()))?),
        None => None,
    };
    let mut images: HashMap<String, Image> = HashMap::new();
    let mut load = |name: &str| -> Result<Image> {
        if !images.contains_key(name) {
            let p = a.search_dir.join(name);
            let img = load_image(&p).with_context(|| format!("image {}", p.display()))?;
            images.insert(name.to_string(), img);
        }
        Ok(images[name].clone())
    };
    let mut out = Vec::with_capacity(preds.len());
    let mut skipped = bad.len();
    for p in preds {
        let template = match (&p.template, &default_template) {
            (Some(t), _) => load(t)?,
            (None, Some(t)) => t.clone(),
            (None, None) => {
                warn!("skipping {}: no template given", p.image);
                skipped += 1;
                continue;
            }
        };
        let search = load(&p.image)?;
        let result = refine_prediction(&search, &template, &p.result, a.mode, &cfg, a.radius_px)?;
        out.push(ExternalPrediction { result, ..p });
    }
    match &a.out {
        Some(path) => write_jsonl(path, &out)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            for p in &out {
                writeln!(stdout, "{}", serde_json::to_string(p)?)?;
            }
        }
    }
    eprintln!("refined {} predictions; skipped {skipped}", out.len());
    Ok(())
}
