//! Stage orchestration: feature-approximation training, recognizer-driven
//! fine-tuning, teacher-student distillation and recognizer pre-training.

pub mod data;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use data::{Dataset, Example, Sampler};
pub use optim::{accumulate_and_step, lr_at, AdamW, Init, MicroResult, Stage, StepOutcome, TrainPlan};

use crate::asr::{asr_features, asr_features_tensor, unigram_from, Asr, AsrConfig};
use crate::dsp::{feature_transform_tensor, Mat, MelTransform, MVN_EPS};
use crate::error::{cfg_err, Error, Result};
use crate::losses::{
    fix_permutation, lts_loss, masked_magnitudes, os_loss, os_weight, pit_loss, ts_loss, OsSchedule, TsWeights,
};
use crate::separator::{self, ConformerConfig, Frontend, Separator};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Bound, ParamStore, Tensor};

/// Feature space of the approximation losses.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    /// Compare mel projections (`true`) or raw magnitudes.
    pub mel: bool,
    /// Take `log(max(x, eps))` of the projected features before the
    /// distance. Off by default: the transform is linear.
    pub log_features: bool,
    pub os: Option<OsSchedule>,
    pub ts: Option<TsWeights>,
    /// Overrides the recognizer's CTC weight when set.
    pub lambda: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { mel: true, log_features: false, os: None, ts: None, lambda: None }
    }
}

/// One metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
}

/// Loop settings shared by every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopOptions {
    pub seed: u64,
    pub batch_size: usize,
    pub log_every: u64,
}

impl Default for LoopOptions {
    fn default() -> Self {
        Self { seed: 0, batch_size: 1, log_every: 10 }
    }
}

/// Feature map of the approximation losses, kept in one place so training
/// and evaluation agree.
pub struct FeatureSpace {
    mel: Option<MelTransform>,
    log: bool,
}

impl FeatureSpace {
    pub fn new(cfg: &LossConfig) -> Self {
        Self { mel: cfg.mel.then(MelTransform::standard), log: cfg.log_features }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let y = match &self.mel {
            Some(m) => feature_transform_tensor(x, m)?,
            None => x.clone(),
        };
        Ok(if self.log { y.log_clamped(MVN_EPS) } else { y })
    }

    /// PIT loss in this space.
    pub fn pit(&self, masked: &[Tensor], refs: &[Tensor]) -> Result<Tensor> {
        if self.log {
            let est: Vec<Tensor> = masked.iter().map(|m| self.apply(m)).collect::<Result<_>>()?;
            let tgt: Vec<Tensor> = refs.iter().map(|r| self.apply(r)).collect::<Result<_>>()?;
            Ok(pit_loss(&est, &tgt, None)?.0)
        } else {
            Ok(pit_loss(masked, refs, self.mel.as_ref())?.0)
        }
    }

    pub fn ts(&self, student: &[Tensor], teacher: &[Tensor], mag: &Tensor) -> Result<Tensor> {
        if self.log {
            let mut total = Tensor::scalar(0.0);
            for (s, t) in student.iter().zip(teacher) {
                let d = self.apply(&s.mul(mag)?)?.sub(&self.apply(&t.detach().mul(mag)?)?)?.frobenius();
                total = total.add(&d)?;
            }
            Ok(total)
        } else {
            ts_loss(student, teacher, mag, self.mel.as_ref())
        }
    }
}

fn sum_all(parts: Vec<Tensor>) -> Result<Tensor> {
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or_else(|| cfg_err!("nothing to sum"))?;
    for p in it {
        acc = acc.add(&p)?;
    }
    Ok(acc)
}

/// Generic optimization loop: `loss_fn` returns the loss of one example and
/// its named parts.
#[allow(clippy::too_many_arguments)]
fn run_loop<F>(
    plan: &TrainPlan,
    store: &mut ParamStore,
    opt: &mut AdamW,
    data: &Dataset,
    opts: &LoopOptions,
    start_step: u64,
    mut loss_fn: F,
    hook: &mut dyn FnMut(u64, &ParamStore, &AdamW) -> Result<()>,
) -> Result<Vec<MetricRecord>>
where
    F: FnMut(&Bound, &Example, u64) -> Result<(Tensor, BTreeMap<String, f64>)>,
{
    plan.validate()?;
    if data.is_empty() {
        return Err(cfg_err!("training data is empty"));
    }
    let batch = opts.batch_size.max(1);
    let mut sampler = Sampler::new(opts.seed, data.len());
    let frontend = Frontend::new();
    let mut log = Vec::new();
    for step in start_step..plan.total_steps {
        let lr = lr_at(plan, step + 1)?;
        let mut cursor = step * (plan.accum * batch) as u64;
        let micro: Vec<Result<MicroResult>> = (0..plan.accum)
            .map(|_| {
                let bound = store.bind(true);
                let mut losses = Vec::with_capacity(batch);
                let mut comps: BTreeMap<String, f64> = BTreeMap::new();
                for _ in 0..batch {
                    let ex = data.get(sampler.at(cursor), &frontend)?;
                    cursor += 1;
                    let (l, c) = loss_fn(&bound, &ex, step)?;
                    for (k, v) in c {
                        *comps.entry(k).or_insert(0.0) += v / batch as f64;
                    }
                    losses.push(l);
                }
                let loss = sum_all(losses)?.scale(1.0 / batch as f64);
                loss.backward()?;
                Ok(MicroResult { loss: loss.item(), grads: bound.grads(), components: comps })
            })
            .collect();
        let out = accumulate_and_step(micro, plan.accum, store, opt, lr)?;
        let done = step + 1;
        if done % opts.log_every.max(1) == 0 || done == plan.total_steps {
            log.push(MetricRecord { step: done, lr, loss: out.loss, components: out.components });
        }
        hook(done, store, opt)?;
    }
    Ok(log)
}

/// Models a separator stage may need besides the one being trained.
#[derive(Default, Clone, Copy)]
pub struct Aux<'a> {
    pub teacher: Option<&'a Separator>,
    pub asr: Option<&'a Asr>,
}

/// Feature-approximation loss of one example under PIT.
pub fn fa_loss(cfg: &ConformerConfig, p: &Bound, ex: &Example, space: &FeatureSpace) -> Result<Tensor> {
    let (masks, _) = separator::forward(cfg, p, &ex.feature_tensor())?;
    let masked = masked_magnitudes(&masks, &ex.magnitude_tensor())?;
    space.pit(&masked, &ex.ref_tensors())
}

/// Recognizer loss of one example with transcripts aligned by spectrum
/// distance; outputs matched to absent speakers are not scored.
pub fn asr_ft_loss(cfg: &ConformerConfig, p: &Bound, asr: &Asr, asr_p: &Bound, ex: &Example, mel: &MelTransform) -> Result<(Tensor, f64, f64)> {
    let (masks, _) = separator::forward(cfg, p, &ex.feature_tensor())?;
    let masked = masked_magnitudes(&masks, &ex.magnitude_tensor())?;
    let mats: Vec<Mat> = masked.iter().map(|m| ex.mat(m.data())).collect();
    let perm = fix_permutation(&mats, &ex.ref_mats())?;
    let (mut parts, mut ctc, mut ce) = (Vec::new(), 0.0, 0.0);
    for (i, &j) in perm.0.iter().enumerate() {
        if j < ex.speakers() {
            let feats = asr_features_tensor(&masked[i], mel)?;
            let (l, c, e) = asr.speaker_loss(asr_p, &feats, &ex.transcripts[j])?;
            ctc += c.item();
            ce += e.item();
            parts.push(l);
        }
    }
    Ok((sum_all(parts)?, ctc, ce))
}

fn distill_parts(
    cfg: &ConformerConfig,
    p: &Bound,
    teacher: &Separator,
    tp: &Bound,
    ex: &Example,
    space: &FeatureSpace,
    w: &TsWeights,
) -> Result<(Tensor, Tensor, Tensor)> {
    let feats = ex.feature_tensor();
    let mag = ex.magnitude_tensor();
    let (t_masks, t_trace) = separator::forward(&teacher.cfg, tp, &feats)?;
    let (masks, trace) = separator::forward(cfg, p, &feats)?;
    let fa = space.pit(&masked_magnitudes(&masks, &mag)?, &ex.ref_tensors())?;
    let ts = space.ts(&masks, &t_masks, &mag)?;
    let lts = lts_loss(&trace, &t_trace, w, &ts)?;
    Ok((fa, ts, lts))
}

/// Trains `sep` for one separator stage, starting after `start_step`
/// completed updates. `hook` sees the parameters after every update.
#[allow(clippy::too_many_arguments)]
pub fn train_separator(
    plan: &TrainPlan,
    losses: &LossConfig,
    sep: &mut Separator,
    opt: &mut AdamW,
    data: &Dataset,
    aux: Aux<'_>,
    opts: &LoopOptions,
    start_step: u64,
    hook: &mut dyn FnMut(u64, &ParamStore, &AdamW) -> Result<()>,
) -> Result<Vec<MetricRecord>> {
    let cfg = sep.cfg.clone();
    let space = FeatureSpace::new(losses);
    match plan.stage {
        Stage::Fa => run_loop(plan, &mut sep.params, opt, data, opts, start_step, |p, ex, _| {
            let l = fa_loss(&cfg, p, ex, &space)?;
            let v = l.item();
            Ok((l, BTreeMap::from([("fa".to_string(), v)])))
        }, hook),
        Stage::AsrFt => {
            let asr = aux.asr.ok_or_else(|| cfg_err!("ASR_FT needs a trained recognizer"))?;
            let mut asr = asr.clone();
            if let Some(l) = losses.lambda {
                asr.cfg.lambda = l;
            }
            let asr_p = asr.params.bind(false);
            let mel = MelTransform::standard();
            run_loop(plan, &mut sep.params, opt, data, opts, start_step, |p, ex, _| {
                let (l, ctc, ce) = asr_ft_loss(&cfg, p, &asr, &asr_p, ex, &mel)?;
                Ok((l, BTreeMap::from([("ctc".to_string(), ctc), ("ce".to_string(), ce)])))
            }, hook)
        }
        Stage::Distill => {
            let teacher = aux.teacher.ok_or_else(|| cfg_err!("DISTILL needs a teacher"))?;
            if teacher.cfg.attn_dim != cfg.attn_dim || teacher.cfg.speakers != cfg.speakers {
                return Err(cfg_err!("teacher and student must share width and output count"));
            }
            let w = losses.ts.clone().unwrap_or_else(|| TsWeights::uniform(cfg.layers, teacher.cfg.layers));
            w.validate(cfg.layers, teacher.cfg.layers)?;
            let sched = losses.os.unwrap_or_else(|| OsSchedule::scaled(plan.total_steps as f64 / 260_000.0));
            let tp = teacher.params.bind(false);
            run_loop(plan, &mut sep.params, opt, data, opts, start_step, |p, ex, step| {
                let (fa, ts, lts) = distill_parts(&cfg, p, teacher, &tp, ex, &space, &w)?;
                let omega = os_weight(&sched, step as f64);
                let comps = BTreeMap::from([
                    ("fa".to_string(), fa.item()),
                    ("ts".to_string(), ts.item()),
                    ("lts".to_string(), lts.item()),
                    ("omega".to_string(), omega),
                ]);
                Ok((os_loss(&fa, &lts, &sched, step as f64)?, comps))
            }, hook)
        }
        Stage::AsrPretrain => Err(cfg_err!("ASR_PRETRAIN trains the recognizer, not a separator")),
    }
}

/// Recognizer inputs of one example: the clean image of every speaker.
pub fn asr_pairs(ex: &Example, mel: &MelTransform) -> Result<Vec<(Mat, Vec<usize>)>> {
    (0..ex.speakers())
        .map(|j| Ok((asr_features(&ex.mat(&ex.refs[j]), mel)?, ex.transcripts[j].clone())))
        .collect()
}

/// Trains the recognizer on clean per-speaker images.
pub fn train_asr(
    plan: &TrainPlan,
    asr: &mut Asr,
    opt: &mut AdamW,
    data: &Dataset,
    opts: &LoopOptions,
    start_step: u64,
    hook: &mut dyn FnMut(u64, &ParamStore, &AdamW) -> Result<()>,
) -> Result<Vec<MetricRecord>> {
    if data.synthetic.is_some() {
        return Err(cfg_err!("recognizer training needs a precomputed data set"));
    }
    let mel = MelTransform::standard();
    let pairs: Vec<Vec<(Tensor, Vec<usize>)>> = data
        .examples
        .iter()
        .map(|ex| Ok(asr_pairs(ex, &mel)?.into_iter().map(|(m, t)| (m.to_tensor(), t)).collect()))
        .collect::<Result<_>>()?;
    let index: std::collections::HashMap<&str, usize> =
        data.examples.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let model = asr.clone();
    run_loop(plan, &mut asr.params, opt, data, opts, start_step, |p, ex, _| {
        let mut parts = Vec::new();
        let (mut ctc, mut ce) = (0.0, 0.0);
        for (f, t) in &pairs[index[ex.id.as_str()]] {
            let (l, c, e) = model.speaker_loss(p, f, t)?;
            ctc += c.item();
            ce += e.item();
            parts.push(l);
        }
        Ok((sum_all(parts)?, BTreeMap::from([("ctc".to_string(), ctc), ("ce".to_string(), ce)])))
    }, hook)
}

/// Mean feature-approximation loss over a data set.
pub fn mean_fa_loss(sep: &Separator, data: &Dataset, losses: &LossConfig) -> Result<f64> {
    let space = FeatureSpace::new(losses);
    let p = sep.params.bind(false);
    let fe = Frontend::new();
    let mut total = 0.0;
    for i in 0..data.len() {
        let ex = &*data.get(i, &fe)?;
        total += fa_loss(&sep.cfg, &p, ex, &space)?.item();
    }
    Ok(total / data.len() as f64)
}

/// Mean recognizer loss of separated outputs over a data set.
pub fn mean_asr_loss(sep: &Separator, asr: &Asr, data: &Dataset) -> Result<f64> {
    let p = sep.params.bind(false);
    let ap = asr.params.bind(false);
    let mel = MelTransform::standard();
    let fe = Frontend::new();
    let mut total = 0.0;
    for i in 0..data.len() {
        let ex = &*data.get(i, &fe)?;
        total += asr_ft_loss(&sep.cfg, &p, asr, &ap, ex, &mel)?.0.item();
    }
    Ok(total / data.len() as f64)
}

/// Mean absolute difference between student and teacher masks.
pub fn mask_deviation(student: &Separator, teacher: &Separator, data: &Dataset) -> Result<f64> {
    let (sp, tp) = (student.params.bind(false), teacher.params.bind(false));
    let fe = Frontend::new();
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..data.len() {
        let ex = &*data.get(i, &fe)?;
        let f = ex.feature_tensor();
        let (a, _) = separator::forward(&student.cfg, &sp, &f)?;
        let (b, _) = separator::forward(&teacher.cfg, &tp, &f)?;
        for (x, y) in a.iter().zip(&b) {
            total += x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()).sum::<f64>();
            count += x.numel();
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// file-driven stages

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: PathBuf,
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_wd() -> f64 {
    0.01
}
fn default_one() -> usize {
    1
}
fn default_log() -> u64 {
    10
}
fn default_out() -> PathBuf {
    PathBuf::from("run")
}

/// Training configuration file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub warmup: u64,
    pub peak_lr: f64,
    #[serde(default = "default_one")]
    pub accum: usize,
    pub seed: u64,
    /// Separator config, a preset name (`base`, `small`, `toyN`), or a
    /// recognizer config for `ASR_PRETRAIN`. Ignored when initializing from
    /// a checkpoint.
    #[serde(default)]
    pub model: serde_json::Value,
    #[serde(default)]
    pub losses: LossConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    #[serde(default)]
    pub asr: Option<PathBuf>,
    /// Model checkpoint to continue from; its optimizer state sits next to
    /// it with the extension `opt`.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_one")]
    pub batch_size: usize,
    #[serde(default = "default_log")]
    pub log_every: u64,
    /// Save every this many steps; 0 saves only the final state.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("training config: {e}")))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.data.manifest);
        fix(&mut cfg.out_dir);
        for p in [&mut cfg.init, &mut cfg.teacher, &mut cfg.asr, &mut cfg.resume].into_iter().flatten() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            stage: self.stage,
            total_steps: self.steps,
            warmup_or_hold: self.warmup,
            peak_lr: self.peak_lr,
            accum: self.accum,
            weight_decay: self.weight_decay,
            init: self.init.clone().map_or(Init::Random, Init::Checkpoint),
            teacher: self.teacher.clone(),
        }
    }

    /// Rejects unsatisfiable stages before any work is done.
    pub fn validate(&self) -> Result<()> {
        self.plan().validate()?;
        let need = |p: &Option<PathBuf>, what: &str| -> Result<()> {
            match p {
                None => Err(cfg_err!("{} needs {what}", self.stage.name())),
                Some(p) if !p.is_file() => Err(cfg_err!("{what} `{}` does not exist", p.display())),
                Some(_) => Ok(()),
            }
        };
        match self.stage {
            Stage::AsrFt => {
                if self.init.is_none() && self.resume.is_none() {
                    return Err(cfg_err!(
                        "ASR_FT must start from a feature-approximation checkpoint (`init`); \
                         training on the recognizer loss from random initialization is not offered"
                    ));
                }
                need(&self.asr, "a trained recognizer checkpoint (`asr`)")?;
            }
            Stage::Distill => need(&self.teacher, "a teacher checkpoint (`teacher`)")?,
            Stage::Fa | Stage::AsrPretrain => {}
        }
        if self.init.is_some() {
            need(&self.init, "an initialization checkpoint")?;
        }
        if self.resume.is_some() {
            need(&self.resume, "a resume checkpoint")?;
        }
        if !self.data.manifest.is_file() {
            return Err(cfg_err!("manifest `{}` does not exist", self.data.manifest.display()));
        }
        Ok(())
    }

    pub fn separator_config(&self) -> Result<ConformerConfig> {
        parse_model(&self.model)
    }
}

/// Separator config from an object or a preset name.
pub fn parse_model(v: &serde_json::Value) -> Result<ConformerConfig> {
    match v {
        serde_json::Value::String(s) => match s.as_str() {
            "base" => Ok(ConformerConfig::base()),
            "small" => Ok(ConformerConfig::small()),
            s if s.starts_with("toy") => s[3..]
                .parse()
                .map(ConformerConfig::toy)
                .map_err(|_| cfg_err!("unknown model preset `{s}`")),
            s => Err(cfg_err!("unknown model preset `{s}`")),
        },
        serde_json::Value::Null => Ok(ConformerConfig::toy(2)),
        other => serde_json::from_value(other.clone()).map_err(|e| cfg_err!("model config: {e}")),
    }
}

/// Files written by a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub records: Vec<MetricRecord>,
    pub skipped_steps: u64,
}

fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn opt_path(model: &Path) -> PathBuf {
    model.with_extension("opt")
}

fn step_of(ckpt: &Checkpoint) -> u64 {
    serde_json::from_str::<serde_json::Value>(&ckpt.header)
        .ok()
        .and_then(|h| h["meta"]["step"].as_u64())
        .unwrap_or(0)
}

/// Runs one stage as described by a configuration file and writes
/// `metrics.jsonl`, `final.ckpt` (plus `final.opt`) and any periodic
/// checkpoints into `out_dir`.
pub fn run_stage(cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let frontend = Frontend::new();
    let plan = cfg.plan();
    let opts = LoopOptions { seed: cfg.seed, batch_size: cfg.batch_size, log_every: cfg.log_every };
    let final_path = cfg.out_dir.join("final.ckpt");
    let metrics = cfg.out_dir.join("metrics.jsonl");
    let every = cfg.checkpoint_every;
    let out_dir = cfg.out_dir.clone();
    let stage = cfg.stage.name();

    if cfg.stage == Stage::AsrPretrain {
        let data = Dataset::load(&cfg.data.manifest, &frontend, 2, cfg.data.limit)?;
        let (mut asr, start) = match cfg.resume.as_ref().or(cfg.init.as_ref()) {
            Some(p) => (Asr::load(p)?, cfg.resume.as_ref().map_or(Ok(0), |_| asr_step(p))?),
            None => {
                let acfg: AsrConfig = match &cfg.model {
                    serde_json::Value::Null => AsrConfig::default(),
                    v => serde_json::from_value(v.clone()).map_err(|e| cfg_err!("recognizer config: {e}"))?,
                };
                let vocab = crate::asr::Vocab::synthetic();
                let ids: Vec<Vec<usize>> =
                    data.examples.iter().flat_map(|e| e.transcripts.iter().map(|t| vocab.encode(t))).collect();
                let uni = unigram_from(&ids, acfg.vocab_size);
                (Asr::new(acfg, uni, cfg.seed)?, 0)
            }
        };
        let mut opt = match &cfg.resume {
            Some(p) => AdamW::from_checkpoint(&Checkpoint::load(&opt_path(p))?, &asr.params)?,
            None => AdamW::new(&asr.params, cfg.weight_decay),
        };
        let template = asr.clone();
        let records = train_asr(&plan, &mut asr, &mut opt, &data, &opts, start, &mut |step, store, o| {
            if every > 0 && step % every == 0 {
                let mut m = template.clone();
                m.params = store.clone();
                let path = out_dir.join(format!("step{step:07}.ckpt"));
                save_asr(&m, &path, step)?;
                o.to_checkpoint(store).save(&opt_path(&path))?;
            }
            Ok(())
        })?;
        save_asr(&asr, &final_path, plan.total_steps)?;
        opt.to_checkpoint(&asr.params).save(&opt_path(&final_path))?;
        write_metrics(&metrics, &records)?;
        return Ok(StageReport { checkpoint: final_path, metrics, records, skipped_steps: opt.skipped });
    }

    
    let (mut sep, start) = match (&cfg.resume, &cfg.init) {
        (Some(p), _) => {
            let ck = Checkpoint::load(p)?;
            (Separator::from_checkpoint(&ck)?, step_of(&ck))
        }
        (None, Some(p)) => (Separator::load(p)?, 0),
        (None, None) => (Separator::new(cfg.separator_config()?, cfg.seed)?, 0),
    };
    let speakers = sep.cfg.speakers;
    let data = Dataset::load(&cfg.data.manifest, &frontend, speakers, cfg.data.limit)?;
    let mut opt = match &cfg.resume {
        Some(p) => AdamW::from_checkpoint(&Checkpoint::load(&opt_path(p))?, &sep.params)?,
        None => AdamW::new(&sep.params, cfg.weight_decay),
    };
    let teacher = cfg.teacher.as_ref().map(|p| Separator::load(p)).transpose()?;
    let asr = cfg.asr.as_ref().map(|p| Asr::load(p)).transpose()?;
    let aux = Aux { teacher: teacher.as_ref(), asr: asr.as_ref() };
    let sep_cfg = sep.cfg.clone();
    let records = train_separator(&plan, &cfg.losses, &mut sep, &mut opt, &data, aux, &opts, start, &mut |step, store, o| {
        if every > 0 && step % every == 0 {
            let s = Separator { cfg: sep_cfg.clone(), params: store.clone() };
            let path = out_dir.join(format!("step{step:07}.ckpt"));
            s.save(&path, serde_json::json!({"stage": stage, "step": step}))?;
            o.to_checkpoint(store).save(&opt_path(&path))?;
        }
        Ok(())
    })?;
    sep.save(&final_path, serde_json::json!({"stage": stage, "step": plan.total_steps}))?;
    opt.to_checkpoint(&sep.params).save(&opt_path(&final_path))?;
    write_metrics(&metrics, &records)?;
    Ok(StageReport { checkpoint: final_path, metrics, records, skipped_steps: opt.skipped })
}

fn save_asr(asr: &Asr, path: &Path, step: u64) -> Result<()> {
    asr.save(path)?;
    std::fs::write(path.with_extension("step"), step.to_string()).map_err(|e| Error::io(path, e))
}

fn asr_step(path: &Path) -> Result<u64> {
    let p = path.with_extension("step");
    let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    s.trim().parse().map_err(|_| cfg_err!("bad step file {}", p.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{generate_sample, MixtureType, SimConfig};

    fn tiny_data(n: u64, outputs: usize) -> Dataset {
        let cfg = SimConfig { types: vec![MixtureType::FullOverlap], tokens_per_utterance: (2, 2), ..SimConfig::default() };
        let samples: Vec<_> = (0..n).map(|i| generate_sample(&cfg, 3, i).unwrap()).collect();
        Dataset::from_samples(&samples, &Frontend::new(), outputs).unwrap()
    }

    fn fa_plan(steps: u64) -> TrainPlan {
        TrainPlan { total_steps: steps, warmup_or_hold: 2, peak_lr: 3e-3, ..TrainPlan::reference(Stage::Fa) }
    }

    #[test]
    fn fa_training_lowers_the_loss() {
        let data = tiny_data(2, 2);
        let mut sep = Separator::new(ConformerConfig::toy(1), 1).unwrap();
        let losses = LossConfig::default();
        let before = mean_fa_loss(&sep, &data, &losses).unwrap();
        let plan = fa_plan(12);
        let mut opt = AdamW::new(&sep.params, plan.weight_decay);
        let log = train_separator(&plan, &losses, &mut sep, &mut opt, &data, Aux::default(), &LoopOptions::default(), 0, &mut |_, _, _| Ok(())).unwrap();
        let after = mean_fa_loss(&sep, &data, &losses).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(log.last().unwrap().step, 12);
        assert!(log.iter().all(|r| r.components.contains_key("fa")));
    }

    #[test]
    fn split_run_matches_single_run() {
        let data = tiny_data(3, 2);
        let plan = fa_plan(4);
        let opts = LoopOptions { seed: 9, ..LoopOptions::default() };
        let losses = LossConfig::default();
        let mut a = Separator::new(ConformerConfig::toy(1), 2).unwrap();
        let mut oa = AdamW::new(&a.params, plan.weight_decay);
        let mut mid = None;
        train_separator(&plan, &losses, &mut a, &mut oa, &data, Aux::default(), &opts, 0, &mut |s, st, o| {
            if s == 2 {
                mid = Some((st.clone(), o.to_checkpoint(st)));
            }
            Ok(())
        })
        .unwrap();
        let (params, state) = mid.unwrap();
        let mut b = Separator { cfg: a.cfg.clone(), params };
        let mut ob = AdamW::from_checkpoint(&state, &b.params).unwrap();
        train_separator(&plan, &losses, &mut b, &mut ob, &data, Aux::default(), &opts, 2, &mut |_, _, _| Ok(())).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn stages_without_prerequisites_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.jsonl");
        std::fs::write(&manifest, "").unwrap();
        let text = |stage: &str| format!(
            r#"{{"stage":"{stage}","steps":2,"warmup":1,"peak_lr":1e-3,"accum":1,"seed":0,"model":"toy1","data":{{"manifest":"m.jsonl"}}}}"#
        );
        for stage in ["ASR_FT", "DISTILL"] {
            let cfg = TrainConfig::from_json(&text(stage), dir.path()).unwrap();
            match run_stage(&cfg) {
                Err(Error::Config(_)) => {}
                other => panic!("{stage}: {other:?}"),
            }
            assert!(!dir.path().join("run").exists());
        }
        assert!(TrainConfig::from_json(r#"{"stage":"FA"}"#, dir.path()).is_err());
        assert!(parse_model(&serde_json::json!("huge")).is_err());
        assert_eq!(parse_model(&serde_json::json!("toy3")).unwrap().layers, 3);
    }
}
