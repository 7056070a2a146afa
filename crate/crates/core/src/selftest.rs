//! Built-in oracle suites: brute-force references for the permutation and
//! CTC losses, finite-difference gradient audits, configuration fidelity of
//! the full-size recipes, STFT reconstruction, a handful of properties and
//! a short seeded training trace.
//!
//! Every check is seeded and reports only deterministic numbers, so two runs
//! produce byte-identical logs.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::asr::{ce_from_logits, ctc_nll, ctc_loss, Asr, AsrConfig, Vocab, BLANK};
use crate::css::ramp;
use crate::dsp::{feature_transform_tensor, log_mvn_tensor, AudioBuffer, Mat, MelTransform, StftConfig, StftProcessor};
use crate::error::{Error, Result};
use crate::eval::{si_sdr_slices, wer};
use crate::losses::{
    fix_permutation, lts_loss, masked_magnitudes, os_loss, os_weight, pit_loss, ts_loss, uniform_layer_map,
    OsSchedule, TsWeights,
};
use crate::separator::{self, ConformerConfig, Frontend};
use crate::simulate::{generate_sample, MixtureType, SimConfig};
use crate::tensor::gradcheck::{GradCheck, GradReport};
use crate::tensor::{self, depthwise_conv1d, layer_norm, matmul, rel_gather, rel_scatter, Bound, ParamStore, Tensor};
use crate::trainer::{
    asr_ft_loss, train_separator, AdamW, Aux, Dataset, Example, LossConfig, LoopOptions, MetricRecord, Stage,
    TrainPlan,
};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(check: &str, passed: bool, detail: String) -> Self {
        Self { check: check.to_string(), passed, detail }
    }
}

/// Sizes of the suites; [`SelftestOptions::default`] runs in seconds.
#[derive(Debug, Clone, Copy)]
pub struct SelftestOptions {
    pub seed: u64,
    pub pit_instances: usize,
    pub train_steps: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self { seed: 0, pit_instances: 200, train_steps: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
    pub metrics: Vec<MetricRecord>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One JSON object per check, then the training trace.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&serde_json::to_string(c).expect("check serializes"));
            out.push('\n');
        }
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{} {:<18} {}", if c.passed { "PASS" } else { "FAIL" }, c.check, c.detail);
        }
        if let Some(m) = self.metrics.last() {
            let _ = writeln!(out, "trace {} steps, final loss {:.6}", m.step, m.loss);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Runs every suite.
pub fn run(opts: &SelftestOptions) -> Result<SelftestReport> {
    let checks = vec![
        config_fidelity(),
        stft_fidelity(opts.seed)?,
        pit_oracle(opts.pit_instances, opts.seed)?,
        ctc_oracle(opts.seed)?,
        op_gradients(opts.seed)?,
        loss_gradients(opts.seed)?,
        properties(opts.seed)?,
    ];
    let metrics = training_trace(opts.train_steps, opts.seed)?;
    Ok(SelftestReport { checks, metrics })
}

/// Sizes and schedules of the full-scale recipes.
pub fn config_fidelity() -> CheckResult {
    let mut bad = Vec::new();
    let within = |n: usize, target: f64| ((n as f64 - target) / target).abs() <= 0.05;
    let (base, small) = (ConformerConfig::base().param_count(), ConformerConfig::small().param_count());
    if !within(base, 26.03e6) {
        bad.push(format!("base has {base} parameters"));
    }
    if !within(small, 9.97e6) {
        bad.push(format!("small has {small} parameters"));
    }
    let map = uniform_layer_map(6, 16);
    if map != [2, 5, 8, 11, 14, 15] {
        bad.push(format!("layer map {map:?}"));
    }
    let lambda = AsrConfig::default().lambda;
    if lambda != 0.2 {
        bad.push(format!("lambda {lambda}"));
    }
    let fa = TrainPlan::reference(Stage::Fa);
    let ft = TrainPlan::reference(Stage::AsrFt);
    for (plan, want) in [(&fa, (260_000, 10_000, 1e-4)), (&ft, (100_000, 25_000, 4e-5))] {
        if (plan.total_steps, plan.warmup_or_hold, plan.peak_lr) != want {
            bad.push(format!("{} schedule {}/{}/{}", plan.stage.name(), plan.total_steps, plan.warmup_or_hold, plan.peak_lr));
        }
        if plan.weight_decay != 0.01 {
            bad.push(format!("{} weight decay {}", plan.stage.name(), plan.weight_decay));
        }
    }
    // the fine-tune schedule holds the peak, then decays to zero
    let ft_shape = ft.lr_at(1).ok() == Some(4e-5)
        && ft.lr_at(25_000).ok() == Some(4e-5)
        && ft.lr_at(100_000).ok() == Some(0.0)
        && fa.lr_at(5_000).ok() == Some(5e-5);
    if !ft_shape {
        bad.push("schedule shapes".into());
    }
    let omega = os_weight(&OsSchedule::reference(), 1.5e5);
    if omega != 0.5 {
        bad.push(format!("omega(1.5e5) = {omega}"));
    }
    let detail = if bad.is_empty() {
        format!("base {base}, small {small}, map {map:?}, lambda {lambda}, omega(1.5e5) {omega}")
    } else {
        bad.join("; ")
    };
    CheckResult::new("config", bad.is_empty(), detail)
}

/// Framing constants and `istft(stft(x))` away from the edges.
pub fn stft_fidelity(seed: u64) -> Result<CheckResult> {
    let cfg = StftConfig::default();
    let proc = StftProcessor::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.span(100);
    let x = AudioBuffer::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let spec = proc.stft(&x)?;
    let y = proc.istft(&spec, len)?;
    let err = (cfg.frame_length..len - cfg.frame_length)
        .map(|i| (x.samples()[i] - y.samples()[i]).abs())
        .fold(0.0, f64::max);
    let framing = cfg.frame_length == 400 && cfg.hop == 160 && cfg.fft_size == 512;
    let bins = spec.magnitude().cols;
    let frames = spec.magnitude().rows;
    let passed = err < 1e-6 && bins == 257 && framing && frames == 100;
    Ok(CheckResult::new("stft", passed, format!("{bins} bins, {frames} frames over {len} samples, interior error {err:.2e}")))
}

fn perms(c: usize) -> Vec<Vec<usize>> {
    // every map 0..c -> 0..c in lexicographic order, bijections only
    (0..c.pow(c as u32))
        .map(|mut code| {
            let mut p = vec![0; c];
            for slot in p.iter_mut().rev() {
                *slot = code % c;
                code /= c;
            }
            p
        })
        .filter(|p| (0..c).all(|j| p.contains(&j)))
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn project_rows(x: &[f64], frames: usize, bins: usize, w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; frames * w.rows];
    for t in 0..frames {
        for b in 0..w.rows {
            out[t * w.rows + b] = (0..bins).map(|f| w.data[b * bins + f] * x[t * bins + f]).sum();
        }
    }
    out
}

/// Brute-force reference for the PIT loss and the permutation fixer.
pub fn pit_oracle(instances: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x917);
    let (mut worst, mut value_fail, mut perm_fail, mut fix_fail) = (0.0f64, 0, 0, 0);
    for k in 0..instances {
        let c = 2 + k % 2;
        let (frames, bins) = (rng.gen_range(1..6), rng.gen_range(2..7));
        let n = frames * bins;
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
        let mag = draw(0.0, 2.0);
        let masks: Vec<Vec<f64>> = (0..c).map(|_| draw(0.0, 1.0)).collect();
        let refs: Vec<Vec<f64>> = (0..c).map(|_| draw(0.0, 2.0)).collect();
        let bands = 1 + k % 3;
        let weights = Mat::new(bands, bins, (0..bands * bins).map(|_| rng.gen_range(0.0..1.0)).collect())?;
        let use_mel = k % 4 >= 2;

        let est: Vec<Vec<f64>> = masks.iter().map(|m| m.iter().zip(&mag).map(|(a, b)| a * b).collect()).collect();
        let view = |x: &Vec<f64>| if use_mel { project_rows(x, frames, bins, &weights) } else { x.clone() };
        let argmin = |e: &[Vec<f64>], r: &[Vec<f64>]| {
            let mut best = (f64::INFINITY, Vec::new());
            for p in perms(c) {
                let total: f64 = p.iter().enumerate().map(|(i, &j)| dist(&e[i], &r[j])).sum();
                if total < best.0 {
                    best = (total, p);
                }
            }
            best
        };
        let (e_view, r_view): (Vec<_>, Vec<_>) = (est.iter().map(view).collect(), refs.iter().map(view).collect());
        let (oracle, oracle_perm) = argmin(&e_view, &r_view);

        let mel = MelTransform::from_matrix(weights)?;
        let mask_t: Vec<Tensor> = masks.iter().map(|m| Tensor::new(m.clone(), &[frames, bins])).collect();
        let ref_t: Vec<Tensor> = refs.iter().map(|r| Tensor::new(r.clone(), &[frames, bins])).collect();
        let masked = masked_magnitudes(&mask_t, &Tensor::new(mag.clone(), &[frames, bins]))?;
        let (loss, perm) = pit_loss(&masked, &ref_t, use_mel.then_some(&mel))?;
        let gap = (loss.item() - oracle).abs();
        worst = worst.max(gap);
        value_fail += usize::from(gap > 1e-9);
        perm_fail += usize::from(perm.0 != oracle_perm);

        let mats = |v: &[Vec<f64>]| -> Result<Vec<Mat>> { v.iter().map(|x| Mat::new(frames, bins, x.clone())).collect() };
        let fixed = fix_permutation(&mats(&est)?, &mats(&refs)?)?;
        fix_fail += usize::from(fixed.0 != argmin(&est, &refs).1);
    }
    let passed = value_fail + perm_fail + fix_fail == 0;
    Ok(CheckResult::new(
        "pit-oracle",
        passed,
        format!("{instances} instances, max gap {worst:.2e}, mismatches value/perm/fix {value_fail}/{perm_fail}/{fix_fail}"),
    ))
}

fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Sums path probabilities over every alignment for all small problems.
pub fn ctc_oracle(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc7c);
    let (mut cases, mut worst, mut fails) = (0, 0.0f64, 0);
    for v in 1..=3usize {
        let mut targets: Vec<Vec<usize>> = vec![vec![]];
        for a in 1..v {
            targets.push(vec![a]);
            for b in 1..v {
                targets.push(vec![a, b]);
            }
        }
        for t_len in 1..=4usize {
            let logits = Tensor::new((0..t_len * v).map(|_| rng.gen_range(-2.0..2.0)).collect(), &[t_len, v]);
            let lp = logits.log_softmax();
            for target in &targets {
                cases += 1;
                let mut total = 0.0;
                for code in 0..v.pow(t_len as u32) {
                    let mut path = vec![0; t_len];
                    let mut rest = code;
                    for s in path.iter_mut() {
                        *s = rest % v;
                        rest /= v;
                    }
                    if collapse_path(&path) == *target {
                        total += path.iter().enumerate().map(|(t, &s)| lp.data()[t * v + s]).sum::<f64>().exp();
                    }
                }
                let oracle = -total.ln();
                let got = ctc_nll(lp.data(), t_len, v, target, BLANK);
                let via_tensor = ctc_loss(&lp, target, BLANK)?.item();
                let ok = if oracle.is_infinite() {
                    got.is_infinite() && via_tensor.is_infinite()
                } else {
                    let gap = (got - oracle).abs().max((via_tensor - oracle).abs());
                    worst = worst.max(gap);
                    gap <= 1e-9
                };
                fails += usize::from(!ok);
            }
        }
    }
    Ok(CheckResult::new("ctc-oracle", fails == 0, format!("{cases} cases, max gap {worst:.2e}, {fails} mismatches")))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> (Vec<f64>, Vec<usize>) {
    let n = shape.iter().product();
    ((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape.to_vec())
}

/// Contracts `y` with fixed weights so every entry reaches the scalar.
fn project(y: &Tensor) -> Result<Tensor> {
    let w: Vec<f64> = (0..y.numel()).map(|i| (0.7 * i as f64 + 0.3).sin()).collect();
    Ok(y.mul(&Tensor::new(w, y.shape()))?.sum_all())
}

type Probe<'a> = Box<dyn Fn(&[Tensor]) -> Result<Tensor> + 'a>;

struct Tally {
    checked: usize,
    failed: Vec<String>,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Self { checked: 0, failed: Vec::new(), worst: 0.0 }
    }

    fn add(&mut self, name: &str, rep: GradReport) {
        self.checked += rep.checked;
        self.worst = self.worst.max(rep.max_rel_err.min(rep.max_abs_err / 1e-7));
        if !rep.passed() {
            self.failed.push(name.to_string());
        }
    }

    fn finish(self, check: &str, items: usize) -> CheckResult {
        let detail = if self.failed.is_empty() {
            format!("{items} functions, {} coordinates", self.checked)
        } else {
            format!("failing: {}", self.failed.join(", "))
        };
        CheckResult::new(check, self.failed.is_empty(), detail)
    }
}

/// Central differences against the backward rule of every tensor operation.
pub fn op_gradients(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6ad);
    let r = &mut rng;
    let x34 = uniform(r, &[3, 4], -1.5, 1.5);
    let y34 = uniform(r, &[3, 4], -1.5, 1.5);
    let pos34 = uniform(r, &[3, 4], 0.2, 2.0);
    let x234 = uniform(r, &[2, 3, 4], -1.5, 1.5);
    let b4 = uniform(r, &[4], 0.2, 2.0);
    let mel = MelTransform::from_matrix(Mat::new(3, 4, (0..12).map(|i| ((i * 7) % 5) as f64 / 4.0).collect())?)?;
    let ce_vocab = 6;
    let unigram = vec![1.0 / ce_vocab as f64; ce_vocab];

    let mut cases: Vec<(&str, Vec<(Vec<f64>, Vec<usize>)>, Probe)> = vec![
        ("add", vec![x234.clone(), b4.clone()], Box::new(|t| project(&t[0].add(&t[1])?))),
        ("sub", vec![x34.clone(), y34.clone()], Box::new(|t| project(&t[0].sub(&t[1])?))),
        ("mul", vec![x234.clone(), b4.clone()], Box::new(|t| project(&t[0].mul(&t[1])?))),
        ("div", vec![x34.clone(), pos34.clone()], Box::new(|t| project(&t[0].div(&t[1])?))),
        ("scale", vec![x34.clone()], Box::new(|t| project(&t[0].scale(-2.5).add_scalar(1.0).neg()))),
        ("sigmoid", vec![x34.clone()], Box::new(|t| project(&t[0].sigmoid()))),
        ("swish", vec![x34.clone()], Box::new(|t| project(&t[0].swish()))),
        ("relu", vec![x34.clone()], Box::new(|t| project(&t[0].relu()))),
        ("exp", vec![x34.clone()], Box::new(|t| project(&t[0].exp()))),
        ("square", vec![x34.clone()], Box::new(|t| project(&t[0].square()))),
        ("sqrt", vec![pos34.clone()], Box::new(|t| project(&t[0].sqrt()))),
        ("log", vec![pos34.clone()], Box::new(|t| project(&t[0].log()?))),
        ("log_clamped", vec![pos34.clone()], Box::new(|t| project(&t[0].log_clamped(1e-8)))),
        ("clamp_min", vec![x34.clone()], Box::new(|t| project(&t[0].clamp_min(0.05)))),
        ("frobenius", vec![x34.clone()], Box::new(|t| Ok(t[0].frobenius()))),
        ("sum_axis", vec![x234.clone()], Box::new(|t| project(&t[0].sum_axis(1)?))),
        ("mean_axis", vec![x234.clone()], Box::new(|t| project(&t[0].mean_axis(2)?))),
        ("mean_all", vec![x234.clone()], Box::new(|t| Ok(t[0].mean_all().square()))),
        ("permute", vec![x234.clone()], Box::new(|t| project(&t[0].permute(&[2, 0, 1])?.square()))),
        ("reshape", vec![x234.clone()], Box::new(|t| project(&t[0].reshape(&[6, 4])?.square()))),
        ("narrow", vec![x234.clone()], Box::new(|t| project(&t[0].narrow(2, 1, 2)?))),
        ("transpose", vec![x34.clone()], Box::new(|t| project(&t[0].transpose_last()?.sigmoid()))),
        ("concat", vec![x34.clone(), y34.clone()], Box::new(|t| project(&Tensor::concat(&[t[0].clone(), t[1].clone()], 0)?.square()))),
        ("index_select", vec![x34.clone()], Box::new(|t| project(&t[0].index_select(&[2, 0, 2])?.square()))),
        ("matmul", vec![x234.clone(), uniform(r, &[4, 2], -1.0, 1.0)], Box::new(|t| project(&matmul(&t[0], &t[1])?))),
        ("matmul_batched", vec![x234.clone(), uniform(r, &[2, 4, 3], -1.0, 1.0)], Box::new(|t| project(&matmul(&t[0], &t[1])?))),
        ("softmax", vec![x34.clone()], Box::new(|t| project(&tensor::softmax_lastaxis(&t[0])))),
        ("log_softmax", vec![x34.clone()], Box::new(|t| project(&t[0].log_softmax()))),
        ("glu", vec![x34.clone()], Box::new(|t| project(&t[0].glu()?))),
        (
            "layer_norm",
            vec![x34.clone(), uniform(r, &[4], 0.5, 1.5), uniform(r, &[4], -0.5, 0.5)],
            Box::new(|t| project(&layer_norm(&t[0], &t[1], &t[2], 1e-5)?)),
        ),
        (
            "depthwise_conv",
            vec![uniform(r, &[5, 3], -1.0, 1.0), uniform(r, &[3, 3], -1.0, 1.0)],
            Box::new(|t| project(&depthwise_conv1d(&t[0], &t[1], 3)?)),
        ),
        ("rel_gather", vec![uniform(r, &[2, 5, 5], -1.0, 1.0)], Box::new(|t| project(&rel_gather(&t[0], 2)?))),
        ("rel_scatter", vec![uniform(r, &[2, 5, 5], -1.0, 1.0)], Box::new(|t| project(&rel_scatter(&t[0], 2)?))),
        ("mel", vec![pos34.clone()], Box::new(move |t| project(&feature_transform_tensor(&t[0], &mel)?.square()))),
        ("log_mvn", vec![pos34.clone()], Box::new(|t| project(&log_mvn_tensor(&t[0])?))),
        ("ctc", vec![uniform(r, &[5, 4], -2.0, 2.0)], Box::new(|t| ctc_loss(&t[0].log_softmax(), &[2, 2, 3], BLANK))),
        (
            "cross_entropy",
            vec![uniform(r, &[3, ce_vocab], -2.0, 2.0)],
            Box::new(move |t| ce_from_logits(&t[0], &[4, 5], 0.1, &unigram)),
        ),
    ];
    let check = GradCheck::default();
    let mut tally = Tally::new();
    let items = cases.len();
    for (name, inputs, f) in cases.drain(..) {
        tally.add(name, check.run(&inputs, None, f)?);
    }
    Ok(tally.finish("op-gradients", items))
}

fn tiny_separator(layers: usize) -> ConformerConfig {
    ConformerConfig {
        layers,
        attn_dim: 4,
        heads: 2,
        ffn_dim: 6,
        conv_kernel: 3,
        conv_channels: 3,
        speakers: 2,
        fft_bins: 5,
        rel_pos_window: 2,
        se_reduction: 2,
    }
}

fn randomized(cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut store = separator::init_params(cfg, rng.gen())?;
    for a in store.arrays_mut() {
        a.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    Ok(store)
}

fn flatten(store: &ParamStore) -> (Vec<String>, Vec<(Vec<f64>, Vec<usize>)>) {
    store.iter().map(|(n, a)| (n.to_string(), (a.data.clone(), a.shape.clone()))).unzip()
}

/// Every separation objective differentiated through complete model stacks.
pub fn loss_gradients(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let (frames, bins) = (4, 5);
    let student = tiny_separator(2);
    let teacher_cfg = tiny_separator(4);
    let (names, inputs) = flatten(&randomized(&student, &mut rng)?);
    let teacher = randomized(&teacher_cfg, &mut rng)?;
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..frames * bins).map(|_| rng.gen_range(lo..hi)).collect() };
    let ex = Example {
        id: "probe".into(),
        kind: MixtureType::FullOverlap,
        frames,
        bins,
        magnitude: draw(0.2, 2.0),
        features: draw(-1.5, 1.5),
        refs: vec![draw(0.1, 1.5), draw(0.1, 1.5)],
        transcripts: vec![vec![0, 3], vec![5]],
    };
    let mel = MelTransform::from_matrix(Mat::new(3, bins, draw(0.0, 1.0)[..3 * bins].to_vec())?)?;
    let asr_cfg = AsrConfig {
        enc_layers: 1,
        dec_layers: 1,
        dim: 4,
        heads: 2,
        ffn_dim: 6,
        conv_kernel: 3,
        rel_pos_window: 2,
        input_dim: 3,
        ..AsrConfig::default()
    };
    let v = Vocab::synthetic().size();
    let asr = Asr::new(asr_cfg, vec![1.0 / v as f64; v], rng.gen())?;
    let asr_p = asr.params.bind(false);
    let tp = teacher.bind(false);
    let w = TsWeights::uniform(student.layers, teacher_cfg.layers);
    let sched = OsSchedule { k: 0.4, t0: 3.0 };

    let bind = |ts: &[Tensor]| Bound::from_tensors(names.iter().cloned().zip(ts.iter().cloned()));
    let masked_of = |p: &Bound| -> Result<(Vec<Tensor>, Vec<Tensor>, separator::LayerTrace)> {
        let (masks, trace) = separator::forward(&student, p, &ex.feature_tensor())?;
        Ok((masked_magnitudes(&masks, &ex.magnitude_tensor())?, masks, trace))
    };
    let distill = |p: &Bound| -> Result<(Tensor, Tensor, Tensor)> {
        let (masked, masks, trace) = masked_of(p)?;
        let (t_masks, t_trace) = separator::forward(&teacher_cfg, &tp, &ex.feature_tensor())?;
        let fa = pit_loss(&masked, &ex.ref_tensors(), Some(&mel))?.0;
        let ts = ts_loss(&masks, &t_masks, &ex.magnitude_tensor(), Some(&mel))?;
        let lts = lts_loss(&trace, &t_trace, &w, &ts)?;
        Ok((fa, ts, lts))
    };
    let probes: Vec<(&str, Probe)> = vec![
        ("L_SA", Box::new(|ts| Ok(pit_loss(&masked_of(&bind(ts))?.0, &ex.ref_tensors(), None)?.0))),
        ("L_FA", Box::new(|ts| Ok(pit_loss(&masked_of(&bind(ts))?.0, &ex.ref_tensors(), Some(&mel))?.0))),
        ("L_ASR", Box::new(|ts| Ok(asr_ft_loss(&student, &bind(ts), &asr, &asr_p, &ex, &mel)?.0))),
        ("L_TS", Box::new(|ts| Ok(distill(&bind(ts))?.1))),
        ("L_LTS", Box::new(|ts| Ok(distill(&bind(ts))?.2))),
        ("L_OS", Box::new(|ts| {
            let (fa, _, lts) = distill(&bind(ts))?;
            os_loss(&fa, &lts, &sched, 2.0)
        })),
    ];
    let check = GradCheck { rtol: 1e-3, ..Default::default() };
    let mut tally = Tally::new();
    let items = probes.len();
    for (name, f) in probes {
        tally.add(name, check.run(&inputs, Some(4), f)?);
    }
    Ok(tally.finish("loss-gradients", items))
}

/// Seeded spot checks of algebraic invariants.
pub fn properties(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e0);
    let mut bad = Vec::new();
    for _ in 0..100 {
        let a: Vec<u8> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..4)).collect();
        let b: Vec<u8> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..4)).collect();
        let lhs = wer(&a, &b)? * b.len() as f64;
        let rhs = wer(&b, &a)? * a.len() as f64;
        if (lhs - rhs).abs() > 1e-9 || (wer(&a, &a)? != 0.0) {
            bad.push("wer symmetry");
            break;
        }
    }
    for _ in 0..20 {
        let r: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = r.iter().map(|x| x + rng.gen_range(-0.5..0.5)).collect();
        let c = rng.gen_range(0.1..10.0);
        let scaled: Vec<f64> = e.iter().map(|x| c * x).collect();
        if (si_sdr_slices(&e, &r)? - si_sdr_slices(&scaled, &r)?).abs() > 1e-9 {
            bad.push("si-sdr scale invariance");
            break;
        }
    }
    for n in 1..50 {
        if (0..n).any(|i| (ramp(i, n) + ramp(n - 1 - i, n) - 1.0).abs() > 1e-12) {
            bad.push("cross-fade partition");
            break;
        }
    }
    let passed = bad.is_empty();
    let detail = if passed { "wer symmetry, si-sdr scale invariance, cross-fade partition".into() } else { bad.join(", ") };
    Ok(CheckResult::new("properties", passed, detail))
}

/// A few seeded feature-approximation updates on two short mixtures.
pub fn training_trace(steps: u64, seed: u64) -> Result<Vec<MetricRecord>> {
    let sim = SimConfig { types: vec![MixtureType::FullOverlap], tokens_per_utterance: (2, 2), ..SimConfig::default() };
    let samples = (0..2).map(|i| generate_sample(&sim, seed, i)).collect::<Result<Vec<_>>>()?;
    let data = Dataset::from_samples(&samples, &Frontend::new(), 2)?;
    let mut sep = separator::Separator::new(ConformerConfig::toy(1), seed)?;
    let plan = TrainPlan { total_steps: steps.max(2), warmup_or_hold: 1, peak_lr: 2e-3, ..TrainPlan::reference(Stage::Fa) };
    let mut opt = AdamW::new(&sep.params, plan.weight_decay);
    let opts = LoopOptions { seed, batch_size: 1, log_every: 1 };
    train_separator(&plan, &LossConfig::default(), &mut sep, &mut opt, &data, Aux::default(), &opts, 0, &mut |_, _, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_pass_on_small_suites() {
        assert!(config_fidelity().passed);
        for c in [pit_oracle(40, 1).unwrap(), ctc_oracle(1).unwrap(), properties(1).unwrap(), stft_fidelity(1).unwrap()] {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn permutation_listing() {
        assert_eq!(perms(2), vec![vec![0, 1], vec![1, 0]]);
        assert_eq!(perms(3).len(), 6);
        assert_eq!(perms(3)[0], vec![0, 1, 2]);
    }

    #[test]
    fn collapse_drops_repeats_then_blanks() {
        assert_eq!(collapse_path(&[1, 1, 0, 1, 2, 2]), vec![1, 1, 2]);
        assert!(collapse_path(&[0, 0]).is_empty());
    }

    #[test]
    fn frozen_ctc_value() {
        // uniform posteriors over 3 symbols, 3 frames, target [1]: the paths
        // 1--, -1-, --1, 11-, -11, 111 are the 6 of 27 that collapse to it
        let lp = vec![(1.0f64 / 3.0).ln(); 9];
        assert!((ctc_nll(&lp, 3, 3, &[1], BLANK) - (27.0f64 / 6.0).ln()).abs() < 1e-12);
    }
}
