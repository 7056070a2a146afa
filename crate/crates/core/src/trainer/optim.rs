//! AdamW, learning-rate schedules and gradient accumulation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, input_err, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::params::Array;
use crate::tensor::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Feature-approximation training of the separator.
    #[serde(rename = "FA")]
    Fa,
    /// Separator fine-tuning through the frozen recognizer.
    #[serde(rename = "ASR_FT")]
    AsrFt,
    /// Teacher-student compression with objective shifting.
    #[serde(rename = "DISTILL")]
    Distill,
    /// Training the toy recognizer itself on clean images.
    #[serde(rename = "ASR_PRETRAIN")]
    AsrPretrain,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Fa => "FA",
            Stage::AsrFt => "ASR_FT",
            Stage::Distill => "DISTILL",
            Stage::AsrPretrain => "ASR_PRETRAIN",
        }
    }

    /// Whether the first schedule phase holds the peak rate instead of
    /// ramping up to it.
    pub fn holds(self) -> bool {
        self == Stage::AsrFt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Random,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub total_steps: u64,
    /// Warmup length, or hold length for fine-tuning.
    pub warmup_or_hold: u64,
    pub peak_lr: f64,
    pub accum: usize,
    pub weight_decay: f64,
    pub init: Init,
    pub teacher: Option<PathBuf>,
}

impl TrainPlan {
    /// Full-scale recipe for a stage.
    pub fn reference(stage: Stage) -> Self {
        let (total, warm, lr, accum) = match stage {
            Stage::AsrFt => (100_000, 25_000, 4e-5, 4),
            _ => (260_000, 10_000, 1e-4, 1),
        };
        Self {
            stage,
            total_steps: total,
            warmup_or_hold: warm,
            peak_lr: lr,
            accum,
            weight_decay: 0.01,
            init: Init::Random,
            teacher: None,
        }
    }

    /// Shrinks both step counts by the same factor.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            total_steps: ((self.total_steps as f64 * factor).round() as u64).max(1),
            warmup_or_hold: (self.warmup_or_hold as f64 * factor).round() as u64,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_or_hold >= self.total_steps {
            return Err(cfg_err!(
                "need 0 <= warmup ({}) < steps ({})",
                self.warmup_or_hold,
                self.total_steps
            ));
        }
        if !(self.peak_lr > 0.0) || self.accum == 0 || self.weight_decay < 0.0 {
            return Err(cfg_err!("peak_lr must be positive, accum >= 1, weight decay >= 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        lr_at(self, step)
    }
}

/// Warmup-then-linear-decay, or hold-then-linear-decay for fine-tuning.
/// Both reach zero at `total_steps`.
pub fn lr_at(plan: &TrainPlan, step: u64) -> Result<f64> {
    if step > plan.total_steps {
        return Err(input_err!("step {step} beyond the {} step budget", plan.total_steps));
    }
    let (w, n, peak) = (plan.warmup_or_hold as f64, plan.total_steps as f64, plan.peak_lr);
    let s = step as f64;
    Ok(if s <= w {
        if plan.stage.holds() || w == 0.0 {
            peak
        } else {
            peak * s / w
        }
    } else {
        peak * (n - s) / (n - w)
    })
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// Updates refused because of non-finite gradients or loss.
    pub skipped: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, a)| vec![0.0; a.data.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, skipped: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update; returns `false` (and counts a skip) when the
    /// gradient holds a non-finite value.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<bool> {
        if grads.0.len() != self.m.len() || grads.0.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(crate::error::dim_err!("gradient layout does not match optimizer state"));
        }
        if !grads.is_finite() {
            log::warn!("non-finite gradient at step {}; update skipped", self.step + 1);
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in store.arrays_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
        Ok(true)
    }

    pub fn to_checkpoint(&self, store: &ParamStore) -> Checkpoint {
        let mut s = ParamStore::new();
        for (((name, a), m), v) in store.iter().zip(&self.m).zip(&self.v) {
            s.insert(format!("m.{name}"), Array { shape: a.shape.clone(), data: m.clone() });
            s.insert(format!("v.{name}"), Array { shape: a.shape.clone(), data: v.clone() });
        }
        let header = serde_json::json!({
            "kind": "adamw",
            "step": self.step,
            "skipped": self.skipped,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        });
        Checkpoint::new(header.to_string(), s)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, store: &ParamStore) -> Result<Self> {
        let h: serde_json::Value =
            serde_json::from_str(&ckpt.header).map_err(|e| cfg_err!("optimizer header: {e}"))?;
        if h["kind"] != "adamw" {
            return Err(cfg_err!("checkpoint does not hold optimizer state"));
        }
        let num = |k: &str| h[k].as_f64().ok_or_else(|| cfg_err!("optimizer header lacks `{k}`"));
        let mut opt = Self::new(store, num("weight_decay")?);
        opt.beta1 = num("beta1")?;
        opt.beta2 = num("beta2")?;
        opt.eps = num("eps")?;
        opt.step = num("step")? as u64;
        opt.skipped = num("skipped")? as u64;
        for (i, (name, a)) in store.iter().enumerate() {
            for (slot, key) in [(&mut opt.m[i], format!("m.{name}")), (&mut opt.v[i], format!("v.{name}"))] {
                let src = ckpt.params.get(&key).ok_or_else(|| cfg_err!("optimizer state lacks `{key}`"))?;
                if src.shape != a.shape {
                    return Err(cfg_err!("optimizer state `{key}` has shape {:?}", src.shape));
                }
                slot.clone_from(&src.data);
            }
        }
        Ok(opt)
    }
}

/// Loss, gradients and named loss parts of one micro-batch.
#[derive(Debug, Clone)]
pub struct MicroResult {
    pub loss: f64,
    pub grads: Grads,
    pub components: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub applied: bool,
    pub micro_batches: usize,
}

/// Averages up to `accum` micro-batches and applies one update. A
/// non-finite loss or gradient skips the update.
pub fn accumulate_and_step<I>(batches: I, accum: usize, store: &mut ParamStore, opt: &mut AdamW, lr: f64) -> Result<StepOutcome>
where
    I: IntoIterator<Item = Result<MicroResult>>,
{
    if accum == 0 {
        return Err(cfg_err!("accumulation count must be at least 1"));
    }
    let mut total = Grads::zeros_like(store);
    let mut loss = 0.0;
    let mut components: BTreeMap<String, f64> = BTreeMap::new();
    let mut n = 0;
    for micro in batches.into_iter().take(accum) {
        let micro = micro?;
        total.add_assign(&micro.grads)?;
        loss += micro.loss;
        for (k, v) in micro.components {
            *components.entry(k).or_insert(0.0) += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(input_err!("no micro-batches to accumulate"));
    }
    let inv = 1.0 / n as f64;
    total.scale(inv);
    loss *= inv;
    components.values_mut().for_each(|v| *v *= inv);
    let applied = if loss.is_finite() {
        opt.step(store, &total, lr)?
    } else {
        log::warn!("non-finite loss {loss}; update skipped");
        opt.skipped += 1;
        false
    };
    Ok(StepOutcome { loss, components, applied, micro_batches: n })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Array { shape: vec![1], data: vec![v] });
        s
    }

    #[test]
    fn adamw_closed_forms() {
        let mut s = scalar_store(0.0);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, &Grads(vec![vec![1.0]]), 0.1).unwrap();
        assert!((s.get("w").unwrap().data[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);

        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(&s, 0.01);
        opt.step(&mut s, &Grads(vec![vec![0.0]]), 0.1).unwrap();
        assert!((s.get("w").unwrap().data[0] - 0.999).abs() < 1e-15);

        let mut s = scalar_store(0.3);
        let mut opt = AdamW::new(&s, 0.0);
        opt.step(&mut s, &Grads(vec![vec![0.0]]), 0.1).unwrap();
        assert_eq!(s.get("w").unwrap().data[0], 0.3);

        assert!(!opt.step(&mut s, &Grads(vec![vec![f64::NAN]]), 0.1).unwrap());
        assert_eq!((opt.skipped, opt.step), (1, 1));
    }

    #[test]
    fn schedules() {
        let fa = TrainPlan::reference(Stage::Fa);
        assert_eq!(lr_at(&fa, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&fa, 10_000).unwrap(), 1e-4);
        assert_eq!(lr_at(&fa, 260_000).unwrap(), 0.0);
        assert!(lr_at(&fa, 260_001).is_err());
        let ft = TrainPlan::reference(Stage::AsrFt);
        assert_eq!((ft.accum, lr_at(&ft, 0).unwrap(), lr_at(&ft, 25_000).unwrap()), (4, 4e-5, 4e-5));
        assert!((lr_at(&ft, 62_500).unwrap() - 2e-5).abs() < 1e-18);
        let desk = fa.scaled(0.01);
        assert_eq!((desk.total_steps, desk.warmup_or_hold), (2600, 100));
        let eps = 1e-9;
        for plan in [fa, ft] {
            let w = plan.warmup_or_hold;
            let a = lr_at(&plan, w).unwrap();
            let b = lr_at(&plan, w + 1).unwrap();
            assert!((a - b).abs() < plan.peak_lr * 1e-3 + eps);
        }
    }

    #[test]
    fn optimizer_state_round_trip() {
        let mut s = scalar_store(0.5);
        let mut opt = AdamW::new(&s, 0.01);
        opt.step(&mut s, &Grads(vec![vec![0.3]]), 0.1).unwrap();
        let ck = Checkpoint::decode(&opt.to_checkpoint(&s).encode()).unwrap();
        assert_eq!(AdamW::from_checkpoint(&ck, &s).unwrap(), opt);
    }

    #[test]
    fn accumulation_averages() {
        let micro = |g: f64, l: f64| Ok(MicroResult { loss: l, grads: Grads(vec![vec![g]]), components: BTreeMap::new() });
        let run = |gs: Vec<(f64, f64)>, accum| {
            let mut s = scalar_store(1.0);
            let mut opt = AdamW::new(&s, 0.01);
            let out = accumulate_and_step(gs.into_iter().map(|(g, l)| micro(g, l)), accum, &mut s, &mut opt, 0.1).unwrap();
            (s.get("w").unwrap().data[0], out)
        };
        let (single, _) = run(vec![(0.4, 1.0)], 1);
        let (four, out) = run(vec![(0.4, 1.0); 4], 4);
        assert!((single - four).abs() < 1e-15);
        assert_eq!(out.micro_batches, 4);
        let (pair, out) = run(vec![(0.2, 1.0), (0.6, 3.0)], 2);
        assert!((pair - single).abs() < 1e-15 && out.loss == 2.0);
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(&s, 0.0);
        assert!(accumulate_and_step(Vec::<Result<MicroResult>>::new(), 2, &mut s, &mut opt, 0.1).is_err());
        let skipped = accumulate_and_step(vec![micro(0.1, f64::INFINITY)], 1, &mut s, &mut opt, 0.1).unwrap();
        assert!(!skipped.applied && opt.skipped == 1);
    }
}
