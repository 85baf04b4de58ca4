//! AdamW, the training loop, checkpoints and the metrics log.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::thread;

use distillmatch_tensor::{Graph, ParamId, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::distill::{loss_gram, loss_kd, loss_kl, loss_mse, DistillWeights};
use crate::error::{Error, Result};
use crate::feature_nets::TEACHER_PREFIX;
use crate::model::{stack_pair, DistillMatch};
use crate::supervision::{CoarseLossWeights, LossWeights};
use crate::synthdata::{gen_texture, make_pair, pair_seed, SynthConfig, SynthPair, TextureKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 6e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers keyed by parameter index.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub t: u64,
    m: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, t: 0, m: Vec::new() }
    }

    /// One decoupled-decay update of every parameter in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, grad) in grads {
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(*id))));
            }
            let i = id.index();
            if self.m.len() <= i {
                self.m.resize(i + 1, None);
            }
            let (m, v) = self.m[i].get_or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let mut p = store.value(*id).clone();
            let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), grad.data());
            for k in 0..gd.len() {
                md[k] = c.beta1 * md[k] + (1.0 - c.beta1) * gd[k];
                vd[k] = c.beta2 * vd[k] + (1.0 - c.beta2) * gd[k] * gd[k];
                pd[k] *= 1.0 - c.lr * c.weight_decay;
                pd[k] -= c.lr * (md[k] / bc1) / ((vd[k] / bc2).sqrt() + c.eps);
            }
            store.set(*id, p)?;
        }
        Ok(())
    }
}

/// Scales gradients in place so that their global L2 norm is at most `max`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max && norm > 0.0 {
        let s = max / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Learning rate of the desk-scale preset.
pub const DESK_LR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub optimizer: AdamWConfig,
    pub clip: f64,
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub loss: LossWeights,
    pub coarse: CoarseLossWeights,
    pub distill: DistillWeights,
    /// Rejects non-finite values and checks the teacher stays frozen each step.
    pub checked: bool,
}

impl TrainConfig {
    pub fn desk(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            seed,
            data_seed: seed ^ 0xDA7A,
            optimizer: AdamWConfig {
                lr: DESK_LR,
                ..AdamWConfig::default()
            },
            clip: 1.0,
            model: ModelConfig::desk(0.25),
            data: SynthConfig::new(64, 64),
            loss: LossWeights::default(),
            coarse: CoarseLossWeights::default(),
            distill: DistillWeights::default(),
            checked: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.check_image(self.data.height, self.data.width)?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && self.clip > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if self.data.textures.is_empty() {
            return Err(Error::Config("no texture kinds configured".into()));
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub kd: f64,
    pub ce: f64,
    pub coarse: f64,
    pub fine: f64,
    pub sub: f64,
    pub modality_correct: bool,
    pub gt_coarse: usize,
    pub grad_norm: f64,
    pub pair_seed: u64,
}

/// Training pair `i` of a run.
pub fn training_pair(cfg: &TrainConfig, i: usize) -> Result<SynthPair> {
    let kind = cfg.data.textures[i % cfg.data.textures.len()];
    make_pair(&cfg.data, pair_seed(cfg.data_seed, i), kind)
}

/// Whether both streams are classified into their own modality.
pub fn modality_correct(logits: &Tensor) -> bool {
    let d = logits.data();
    let vis = usize::from(d[1] > d[0]);
    let ir = usize::from(d[3] > d[2]);
    [vis, ir] == crate::cefg::pair_targets()
}

/// Forward, backward and update on one pair.
pub fn train_step(model: &mut DistillMatch, opt: &mut AdamW, cfg: &TrainConfig, step: usize, pair: &SynthPair) -> Result<StepLog> {
    let mut g = if cfg.checked { Graph::new() } else { Graph::unchecked() };
    let l = model.losses(&mut g, &pair.vis, &pair.pir, &pair.gt, &cfg.loss, &cfg.coarse, &cfg.distill)?;
    let val = |v| g.value(v).item();
    let total = val(l.total);
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step} (pair seed {})", pair.gt.seed)));
    }
    let log = StepLog {
        step,
        total,
        kd: val(l.terms.kd),
        ce: val(l.terms.ce),
        coarse: val(l.terms.coarse),
        fine: val(l.terms.fine),
        sub: val(l.terms.sub),
        modality_correct: modality_correct(g.value(l.logits)),
        gt_coarse: l.gt_coarse,
        grad_norm: 0.0,
        pair_seed: pair.gt.seed,
    };
    g.backward(l.total)?;
    if cfg.checked {
        for (id, _) in g.param_grads() {
            if model.store.name(id).starts_with(TEACHER_PREFIX) {
                return Err(Error::Config(format!("gradient reached frozen {}", model.store.name(id))));
            }
        }
    }
    let mut grads: Vec<(ParamId, Tensor)> = g
        .param_grads()
        .into_iter()
        .filter(|(id, _)| model.store.entry(*id).trainable)
        .map(|(id, t)| (id, t.clone()))
        .collect();
    let norm = clip_grad_norm(&mut grads, cfg.clip);
    opt.step(&mut model.store, &grads)?;
    Ok(StepLog { grad_norm: norm, ..log })
}

/// Runs `cfg.steps` updates with pairs generated on a producer thread.
pub fn train(cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<(DistillMatch, Vec<StepLog>)> {
    cfg.validate()?;
    let mut model = DistillMatch::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut logs = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok((model, logs));
    }
    let (tx, rx) = sync_channel::<Result<SynthPair>>(4);
    let producer_cfg = cfg.clone();
    let producer = thread::spawn(move || {
        for i in 0..producer_cfg.steps {
            if tx.send(training_pair(&producer_cfg, i)).is_err() {
                break;
            }
        }
    });
    let mut outcome = Ok(());
    for step in 0..cfg.steps {
        let pair = match rx.recv() {
            Ok(Ok(p)) => p,
            Ok(Err(e)) => {
                outcome = Err(e);
                break;
            }
            Err(_) => {
                outcome = Err(Error::Config("data producer stopped early".into()));
                break;
            }
        };
        match train_step(&mut model, &mut opt, cfg, step, &pair) {
            Ok(log) => {
                on_step(&log);
                logs.push(log);
            }
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    drop(rx);
    producer.join().map_err(|_| Error::Config("data producer panicked".into()))?;
    outcome.map(|_| (model, logs))
}

/// Writes `config.json`, `metrics.jsonl` and `checkpoint/`.
pub fn write_run(dir: &Path, cfg: &TrainConfig, model: &DistillMatch, logs: &[StepLog]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut f = fs::File::create(dir.join("metrics.jsonl"))?;
    for l in logs {
        writeln!(f, "{}", serde_json::to_string(l)?)?;
    }
    model.save(&dir.join("checkpoint"))
}

/// Fraction of pairs whose two streams are both classified correctly.
pub fn modality_accuracy(model: &DistillMatch, pairs: &[SynthPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("no pairs to classify".into()));
    }
    let mut ok = 0;
    for p in pairs {
        if modality_correct(&model.modality_logits(&p.vis, &p.pir)?) {
            ok += 1;
        }
    }
    Ok(ok as f64 / pairs.len() as f64)
}

/// Trains only the student against the frozen teacher on one stacked image
/// batch; returns the distillation loss before each step.
pub fn train_distillation(model: &mut DistillMatch, opt: &mut AdamW, img: &Tensor, steps: usize, w: &DistillWeights, clip: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let tea = model.teacher_features(&mut g, x)?;
        let stu = model.student.forward(&mut g, &model.store, x)?;
        let kd = loss_kd(&mut g, tea, stu, w)?.total;
        out.push(g.value(kd).item());
        g.backward(kd)?;
        let mut grads: Vec<(ParamId, Tensor)> = g
            .param_grads()
            .into_iter()
            .filter(|(id, _)| model.store.entry(*id).trainable)
            .map(|(id, t)| (id, t.clone()))
            .collect();
        clip_grad_norm(&mut grads, clip);
        opt.step(&mut model.store, &grads)?;
    }
    Ok(out)
}

/// The three distillation terms between teacher and student.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub mse: f64,
    pub gram: f64,
    pub kl: f64,
}

/// Images of the seeded probe batch used by [`distill_report`].
pub fn probe_images(seed: u64, h: usize, w: usize) -> Result<Tensor> {
    let a = gen_texture(TextureKind::ValueNoise, h, w, seed)?;
    let b = gen_texture(TextureKind::Blobs, h, w, seed.wrapping_add(1))?;
    stack_pair(&a, &b)
}

/// Distillation losses of the student against the teacher on a probe batch;
/// with `teacher_only` the teacher is compared with itself.
pub fn distill_report(model: &DistillMatch, seed: u64, h: usize, w: usize, teacher_only: bool) -> Result<DistillReport> {
    let mut g = Graph::new();
    let img = g.constant(probe_images(seed, h, w)?);
    let tea = model.teacher_features(&mut g, img)?;
    let other = if teacher_only {
        model.teacher_features(&mut g, img)?
    } else {
        model.student.forward(&mut g, &model.store, img)?
    };
    let mse = loss_mse(&mut g, tea, other)?;
    let gram = loss_gram(&mut g, tea, other)?;
    let kl = loss_kl(&mut g, tea, other)?;
    Ok(DistillReport {
        mse: g.value(mse).item(),
        gram: g.value(gram).item(),
        kl: g.value(kl).item(),
    })
}
