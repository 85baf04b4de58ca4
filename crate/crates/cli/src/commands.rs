use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use distillmatch::evaluate::{evaluate_threads, EvalPair, Metric};
use distillmatch::formats::{cumulative_error_svg, loss_curve_svg, matches_from_text, matches_to_text, read_matches, write_matches};
use distillmatch::geometry::{apply_h, corner_error, ransac_homography, sample_homography, HomographyRanges, Point, RansacConfig};
use distillmatch::matcher::{cell_center, mutual_argmax, Grid, Match};
use distillmatch::model::DistillMatch;
use distillmatch::synthdata::{make_batch, read_dataset, read_pair, write_dataset, GtMode, StoredPair, SynthConfig, TextureKind};
use distillmatch::trainer::{distill_report, train, write_run, TrainConfig};
use distillmatch::ModelConfig;
use distillmatch_tensor::{finite_diff_check, Conv2dOptions, Tensor};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::settings::{parse_list, Dims, Settings};
use crate::{Cli, Command, DistillCheckArgs, EvalArgs, GenDataArgs, InputError, MatchArgs, SelftestArgs, TrainArgs};

const COARSE_STRIDE: usize = 8;

/// Runs one command and returns what goes to stdout.
pub fn run(cli: &Cli, s: &Settings) -> Result<String> {
    let threads = s.pick(cli.threads, "threads", 1)?.max(1);
    let (text, doc) = match &cli.command {
        Command::GenData(a) => gen_data(a, s)?,
        Command::Train(a) => train_cmd(a, s)?,
        Command::Match(a) => match_cmd(a, s, threads)?,
        Command::Eval(a) => eval_cmd(a, s, threads)?,
        Command::DistillCheck(a) => distill_check(a, s)?,
        Command::Selftest(a) => selftest(a, s)?,
    };
    Ok(if cli.json { serde_json::to_string_pretty(&doc)? } else { text })
}

type Output = (String, Value);

fn dims(flag: &Option<String>, s: &Settings) -> Result<Dims> {
    let raw = s.pick(flag.clone(), "dims", "64".to_string())?;
    Ok(raw.parse::<Dims>().map_err(InputError)?)
}

fn gen_data(a: &GenDataArgs, s: &Settings) -> Result<Output> {
    let out: PathBuf = s.require(a.out.clone(), "out")?;
    let n = s.pick(a.n, "n", 8)?;
    let seed = s.pick(a.seed, "seed", 0)?;
    let d = dims(&a.dims, s)?;
    let mut cfg = SynthConfig::new(d.height, d.width);
    if let Some(t) = s.maybe(a.texture.clone(), "texture")? {
        cfg.textures = parse_list::<TextureKind>(&t)?;
    }
    cfg.mode = match s.pick(a.mode.clone(), "mode", "homography".into())?.as_str() {
        "homography" => GtMode::Homography,
        "pose" => GtMode::Pose,
        other => return Err(InputError(format!("unknown mode {other:?} (homography or pose)")).into()),
    };
    let pairs = make_batch(n, &cfg, seed)?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let manifest = write_dataset(&out, &pairs, &cfg, seed)?;
    let text = format!("wrote {} pairs to {} (config {})", manifest.pairs.len(), out.display(), manifest.config_hash);
    Ok((text, json!({ "out": out, "pairs": manifest.pairs, "config_hash": manifest.config_hash, "seed": seed })))
}

fn train_cmd(a: &TrainArgs, s: &Settings) -> Result<Output> {
    let out: PathBuf = s.require(a.out.clone(), "out")?;
    let mut cfg = TrainConfig::desk(s.pick(a.steps, "steps", 300)?, s.pick(a.seed, "seed", 7)?);
    if let Some(lr) = s.maybe(a.lr, "lr")? {
        cfg.optimizer.lr = lr;
    }
    if let Some(wf) = s.maybe(a.width_factor, "width_factor")? {
        cfg.model = ModelConfig::desk(wf);
    }
    let d = dims(&a.dims, s)?;
    cfg.data.height = d.height;
    cfg.data.width = d.width;
    cfg.validate()?;
    let start = Instant::now();
    let (model, logs) = train(&cfg, |l| {
        if l.step % 25 == 0 {
            info!("step {} total {:.4}", l.step, l.total);
        }
    })?;
    let secs = start.elapsed().as_secs_f64();
    write_run(&out, &cfg, &model, &logs)?;
    let totals: Vec<f64> = logs.iter().map(|l| l.total).collect();
    fs::write(out.join("loss.svg"), loss_curve_svg(&totals, "training loss"))?;
    let (first, last) = (totals.first().copied(), totals.last().copied());
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let text = format!(
        "trained {} steps in {secs:.1}s, loss {} -> {}; run written to {}",
        logs.len(),
        fmt(first),
        fmt(last),
        out.display()
    );
    Ok((text, json!({ "out": out, "steps": logs.len(), "seconds": secs, "first_loss": first, "last_loss": last })))
}

#[derive(Serialize)]
struct PairSummary {
    pair: String,
    coarse: usize,
    fine: usize,
    matches: usize,
    seconds: f64,
}

fn image_hw(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

fn match_pair(model: &DistillMatch, p: &StoredPair, identity: bool, out: &Path, ext: &str) -> Result<PairSummary> {
    let (h, w) = image_hw(&p.vis);
    model.cfg.check_image(h, w).with_context(|| format!("pair {}", p.name))?;
    if image_hw(&p.pir) != (h, w) {
        return Err(InputError(format!("pair {}: visible and infrared sizes differ", p.name)).into());
    }
    let start = Instant::now();
    let other = if identity { &p.vis } else { &p.pir };
    let o = model.match_images(&p.vis, other).with_context(|| format!("pair {}", p.name))?;
    let seconds = start.elapsed().as_secs_f64();
    let grid = Grid::new(h / COARSE_STRIDE, w / COARSE_STRIDE);
    let centre = |i: usize| {
        let (x, y) = grid.xy(i);
        cell_center(x, y, COARSE_STRIDE)
    };
    let coarse: Vec<Match> = o
        .coarse
        .iter()
        .map(|m| Match {
            a: centre(m.a),
            b: centre(m.b),
            conf: m.conf,
        })
        .collect();
    let fine: Vec<Match> = o.fine.iter().map(|m| Match { a: m.pa, b: m.pb, conf: m.p }).collect();
    write_matches(&out.join(format!("{}.coarse.{ext}", p.name)), &coarse)?;
    write_matches(&out.join(format!("{}.fine.{ext}", p.name)), &fine)?;
    write_matches(&out.join(format!("{}.{ext}", p.name)), &o.matches)?;
    Ok(PairSummary {
        pair: p.name.clone(),
        coarse: coarse.len(),
        fine: fine.len(),
        matches: o.matches.len(),
        seconds,
    })
}

/// Runs `f` over `items` on `threads` workers, keeping input order.
fn parallel<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|sc| {
        for (inp, out) in items.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            let f = &f;
            sc.spawn(move || {
                for (x, slot) in inp.iter().zip(out.iter_mut()) {
                    *slot = Some(f(x));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

fn match_cmd(a: &MatchArgs, s: &Settings, threads: usize) -> Result<Output> {
    let ckpt: PathBuf = s.require(a.ckpt.clone(), "ckpt")?;
    let out: PathBuf = s.require(a.out.clone(), "out")?;
    let model = DistillMatch::load(&ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    let pairs = match (&a.pair, s.maybe(a.dataset.clone(), "dataset")?) {
        (Some(p), _) => {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "pair".into());
            let parent = p.parent().unwrap_or(Path::new("."));
            vec![read_pair(parent, &name).with_context(|| format!("cannot read pair {}", p.display()))?]
        }
        (None, Some(d)) => read_dataset(&d).with_context(|| format!("cannot read dataset {}", d.display()))?.1,
        (None, None) => bail!(InputError("one of --pair or --dataset is required".into())),
    };
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let ext = if a.binary || s.get::<bool>("binary")?.unwrap_or(false) { "dmm" } else { "txt" };
    let mut summary = parallel(&pairs, threads, |p| match_pair(&model, p, a.identity, &out, ext))?;
    summary.sort_by(|x, y| x.pair.cmp(&y.pair));
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let text = summary
        .iter()
        .map(|p| format!("{}: {} coarse, {} fine, {} matches ({:.2}s)", p.pair, p.coarse, p.fine, p.matches, p.seconds))
        .collect::<Vec<_>>()
        .join("\n");
    Ok((text, json!({ "out": out, "pairs": summary })))
}

fn find_matches(dir: &Path, name: &str) -> Option<PathBuf> {
    ["txt", "dmm"].iter().map(|e| dir.join(format!("{name}.{e}"))).find(|p| p.is_file())
}

fn eval_cmd(a: &EvalArgs, s: &Settings, threads: usize) -> Result<Output> {
    let dataset: PathBuf = s.require(a.dataset.clone(), "dataset")?;
    let metric: Metric = s.pick(a.metric.clone(), "metric", "homography".into())?.parse()?;
    let thresholds = match s.maybe(a.thresholds.clone(), "thresholds")? {
        Some(t) => parse_list::<f64>(&t)?,
        None => metric.default_thresholds(),
    };
    let (_, pairs) = read_dataset(&dataset).with_context(|| format!("cannot read dataset {}", dataset.display()))?;
    let missing: Vec<&str> = pairs
        .iter()
        .filter(|p| find_matches(&a.matches, &p.name).is_none())
        .map(|p| p.name.as_str())
        .collect();
    if !missing.is_empty() {
        bail!(InputError(format!("no match file for pairs: {}", missing.join(", "))));
    }
    let loaded = pairs
        .iter()
        .map(|p| read_matches(&find_matches(&a.matches, &p.name).expect("checked")))
        .collect::<distillmatch::Result<Vec<_>>>()?;
    let eval: Vec<EvalPair> = pairs
        .iter()
        .zip(&loaded)
        .map(|(p, m)| {
            let (height, width) = image_hw(&p.vis);
            EvalPair {
                name: &p.name,
                matches: m,
                gt: &p.gt,
                width,
                height,
            }
        })
        .collect();
    let report = evaluate_threads(metric, &eval, &thresholds, &RansacConfig::default(), threads)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.json"), report.to_json()?)?;
        let unit = if metric == Metric::Pose { "deg" } else { "px" };
        let x_max = thresholds.iter().cloned().fold(0.0, f64::max);
        fs::write(out.join("errors.svg"), cumulative_error_svg(&report.errors(), x_max, metric.name(), unit))?;
    }
    Ok((report.table().trim_end().to_string(), serde_json::to_value(&report)?))
}

fn distill_check(a: &DistillCheckArgs, s: &Settings) -> Result<Output> {
    let ckpt: PathBuf = s.require(a.ckpt.clone(), "ckpt")?;
    let model = DistillMatch::load(&ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
    let seed = s.pick(a.seed, "seed", 0)?;
    let d = dims(&a.dims, s)?;
    let r = distill_report(&model, seed, d.height, d.width, a.teacher_only)?;
    let text = format!("L_MSE {:.6e}\nL_Gram {:.6e}\nL_KL {:.6e}", r.mse, r.gram, r.kl);
    Ok((text, serde_json::to_value(r)?))
}

fn check_gradients() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
    let r = finite_diff_check(
        |g, v| {
            let wv = g.constant(w.clone());
            let y = g.conv2d(v, wv, None, Conv2dOptions::same(3))?;
            let y = g.reshape(y, &[3, 36])?;
            let p = g.softmax(y, 1)?;
            let q = g.square(p)?;
            g.sum(q)
        },
        &x,
        1e-4,
        1e-4,
    )?;
    Ok(r.passed)
}

fn check_ransac(seed: u64) -> Result<bool> {
    let (h, _) = sample_homography(64, 64, seed, &HomographyRanges::default())?;
    let a: Vec<Point> = (0..40).map(|i| [(i * 7 % 61) as f64, (i * 13 % 59) as f64]).collect();
    let b: Vec<Point> = a.iter().map(|&p| apply_h(&h, p)).collect();
    let (est, _) = ransac_homography(&a, &b, &RansacConfig::default())?;
    Ok(corner_error(&est, &h, 64, 64) < 1e-3)
}

fn check_formats() -> Result<bool> {
    let m = vec![Match {
        a: [0.1, 2.5],
        b: [3.0, 1e-7],
        conf: 0.9,
    }];
    Ok(matches_from_text(&matches_to_text(&m))? == m)
}

fn check_data(seed: u64) -> Result<bool> {
    let cfg = SynthConfig::new(32, 32);
    Ok(make_batch(3, &cfg, seed)? == make_batch(3, &cfg, seed)?)
}

fn check_mutual() -> Result<bool> {
    let eye = Tensor::from_fn(&[5, 5], |i| if i % 6 == 0 { 1.0 } else { 0.0 });
    Ok(mutual_argmax(&eye)? == (0..5).map(|i| (i, i)).collect::<Vec<_>>())
}

fn check_model(seed: u64) -> Result<bool> {
    let model = DistillMatch::new(ModelConfig::desk(0.25), seed)?;
    let p = &make_batch(1, &SynthConfig::new(32, 32), seed)?[0];
    let o = model.match_images(&p.vis, &p.pir)?;
    let teacher = distill_report(&model, seed, 32, 32, true)?;
    Ok(o.matches.iter().all(|m| m.a.iter().chain(&m.b).all(|v| v.is_finite())) && teacher.mse.abs() < 1e-10)
}

fn selftest(a: &SelftestArgs, s: &Settings) -> Result<Output> {
    let seed = s.pick(a.seed, "seed", 0)?;
    let checks: Vec<(&str, Result<bool>)> = vec![
        ("gradients", check_gradients()),
        ("ransac", check_ransac(seed)),
        ("match format", check_formats()),
        ("data determinism", check_data(seed)),
        ("mutual argmax", check_mutual()),
        ("model forward", check_model(seed)),
    ];
    let mut failed = Vec::new();
    let mut lines = Vec::new();
    let mut doc = serde_json::Map::new();
    for (name, r) in checks {
        let ok = matches!(r, Ok(true));
        if let Err(e) = &r {
            log::error!("{name}: {e:#}");
        }
        if !ok {
            failed.push(name);
        }
        lines.push(format!("{name}: {}", if ok { "ok" } else { "FAILED" }));
        doc.insert(name.to_string(), Value::Bool(ok));
    }
    if !failed.is_empty() {
        bail!("selftest failed: {}", failed.join(", "));
    }
    Ok((lines.join("\n"), Value::Object(doc)))
}
