//! Separation objectives: permutation-invariant spectrum and feature
//! approximation, permutation fixing for the recognizer loss, mask-level and
//! layer-wise teacher-student losses, and the objective-shifting blend.
//!
//! All distances are unsquared Frobenius norms.

use serde::{Deserialize, Serialize};

use crate::dsp::{feature_transform, feature_transform_tensor, Mat, MelTransform};
use crate::error::{cfg_err, dim_err, input_err, Result};
use crate::separator::LayerTrace;
use crate::tensor::Tensor;

/// Assignment of output `i` to reference `map[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation(pub Vec<usize>);

impl Permutation {
    pub fn identity(c: usize) -> Self {
        Self((0..c).collect())
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.0.len()];
        self.0.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `out[i] = items[map[i]]`: references reordered to line up with outputs.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.0.iter().map(|&j| items[j].clone()).collect()
    }

    /// Every permutation of `0..c` in lexicographic order, identity first.
    pub fn all(c: usize) -> Vec<Permutation> {
        fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Permutation>) {
            if prefix.len() == used.len() {
                out.push(Permutation(prefix.clone()));
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    prefix.push(j);
                    rec(prefix, used, out);
                    prefix.pop();
                    used[j] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(&mut Vec::new(), &mut vec![false; c], &mut out);
        out
    }
}

/// Cheapest permutation for a pairwise cost table `cost[i][j]`; the first
/// minimum in lexicographic order wins, so ties go to the identity.
pub fn best_permutation(cost: &[Vec<f64>]) -> (f64, Permutation) {
    let mut best = (f64::INFINITY, Permutation::identity(cost.len()));
    for p in Permutation::all(cost.len()) {
        let total: f64 = p.0.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if total < best.0 {
            best = (total, p);
        }
    }
    best
}

fn check_lists<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(input_err!("{} estimates against {} references", a.len(), b.len()));
    }
    Ok(())
}

/// `M_c * |Y|` for every mask.
pub fn masked_magnitudes(masks: &[Tensor], magnitude: &Tensor) -> Result<Vec<Tensor>> {
    masks.iter().map(|m| m.mul(magnitude)).collect()
}

fn transformed(x: &Tensor, transform: Option<&MelTransform>) -> Result<Tensor> {
    match transform {
        Some(mel) => feature_transform_tensor(x, mel),
        None => Ok(x.clone()),
    }
}

/// Permutation-invariant loss: spectrum approximation without a transform,
/// feature approximation with one. References are treated as constants.
pub fn pit_loss(masked: &[Tensor], refs: &[Tensor], transform: Option<&MelTransform>) -> Result<(Tensor, Permutation)> {
    check_lists(masked, refs)?;
    let est: Vec<Tensor> = masked.iter().map(|m| transformed(m, transform)).collect::<Result<_>>()?;
    let tgt: Vec<Tensor> = refs.iter().map(|r| transformed(&r.detach(), transform)).collect::<Result<_>>()?;
    let mut pairs: Vec<Vec<Tensor>> = Vec::with_capacity(est.len());
    for e in &est {
        pairs.push(tgt.iter().map(|t| Ok(e.sub(t)?.frobenius())).collect::<Result<_>>()?);
    }
    let cost: Vec<Vec<f64>> = pairs.iter().map(|row| row.iter().map(Tensor::item).collect()).collect();
    let (_, perm) = best_permutation(&cost);
    let mut total = pairs[0][perm.0[0]].clone();
    for (i, &j) in perm.0.iter().enumerate().skip(1) {
        total = total.add(&pairs[i][j])?;
    }
    Ok((total, perm))
}

/// Pairwise distance table on plain matrices.
pub fn cost_table(masked: &[Mat], refs: &[Mat], transform: Option<&MelTransform>) -> Result<Vec<Vec<f64>>> {
    check_lists(masked, refs)?;
    let map = |m: &Mat| -> Result<Mat> {
        match transform {
            Some(mel) => feature_transform(m, mel),
            None => Ok(m.clone()),
        }
    };
    let est: Vec<Mat> = masked.iter().map(map).collect::<Result<_>>()?;
    let tgt: Vec<Mat> = refs.iter().map(map).collect::<Result<_>>()?;
    for (e, t) in est.iter().zip(&tgt) {
        if e.shape() != t.shape() {
            return Err(dim_err!("estimate {:?} vs reference {:?}", e.shape(), t.shape()));
        }
    }
    Ok(est.iter().map(|e| tgt.iter().map(|t| e.frobenius_dist(t)).collect()).collect())
}

/// Value-only [`pit_loss`] on plain matrices.
pub fn pit_loss_value(masked: &[Mat], refs: &[Mat], transform: Option<&MelTransform>) -> Result<(f64, Permutation)> {
    Ok(best_permutation(&cost_table(masked, refs, transform)?))
}

/// Label permutation from spectrum distance alone, used to line transcripts
/// up with outputs before the recognizer loss is evaluated once.
pub fn fix_permutation(masked: &[Mat], ref_mags: &[Mat]) -> Result<Permutation> {
    Ok(pit_loss_value(masked, ref_mags, None)?.1)
}

/// Mask-level teacher-student loss in the teacher's channel order; the
/// teacher side carries no gradient.
pub fn ts_loss(student: &[Tensor], teacher: &[Tensor], magnitude: &Tensor, transform: Option<&MelTransform>) -> Result<Tensor> {
    check_lists(student, teacher)?;
    let mag = magnitude.detach();
    let mut total: Option<Tensor> = None;
    for (s, t) in student.iter().zip(teacher) {
        if s.shape() != t.shape() {
            return Err(dim_err!("student mask {:?} vs teacher mask {:?}", s.shape(), t.shape()));
        }
        let a = transformed(&s.mul(&mag)?, transform)?;
        let b = transformed(&t.detach().mul(&mag)?, transform)?;
        let d = a.sub(&b)?.frobenius();
        total = Some(match total {
            None => d,
            Some(acc) => acc.add(&d)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Weights and layer map of the layer-wise loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsWeights {
    /// Weight of the mask-level term.
    pub gamma_out: f64,
    /// Per-student-layer weights.
    pub gamma: Vec<f64>,
    /// Student layer `s` is matched to teacher layer `layer_map[s]`.
    pub layer_map: Vec<usize>,
}

/// `g(s) = min((s + 1) * ceil(Lt / Ls) - 1, Lt - 1)`.
pub fn uniform_layer_map(student_layers: usize, teacher_layers: usize) -> Vec<usize> {
    let stride = teacher_layers.div_ceil(student_layers.max(1));
    (0..student_layers).map(|s| ((s + 1) * stride - 1).min(teacher_layers - 1)).collect()
}

impl TsWeights {
    /// Unit weights with the uniform map.
    pub fn uniform(student_layers: usize, teacher_layers: usize) -> Self {
        Self {
            gamma_out: 1.0,
            gamma: vec![1.0; student_layers],
            layer_map: uniform_layer_map(student_layers, teacher_layers),
        }
    }

    pub fn validate(&self, student_layers: usize, teacher_layers: usize) -> Result<()> {
        if self.gamma.len() != student_layers || self.layer_map.len() != student_layers {
            return Err(cfg_err!("expected {student_layers} layer weights and map entries"));
        }
        if self.gamma_out < 0.0 || self.gamma.iter().any(|g| !(*g >= 0.0)) {
            return Err(cfg_err!("teacher-student weights must be non-negative"));
        }
        if self.layer_map.windows(2).any(|w| w[0] >= w[1]) {
            return Err(cfg_err!("layer map {:?} is not strictly increasing", self.layer_map));
        }
        if self.layer_map.last().is_some_and(|&g| g >= teacher_layers) {
            return Err(cfg_err!("layer map {:?} exceeds {teacher_layers} teacher layers", self.layer_map));
        }
        Ok(())
    }
}

/// `gamma_out * ts + sum_s gamma_s ||H_s - H_g(s)||` with constant teacher
/// states.
pub fn lts_loss(student: &LayerTrace, teacher: &LayerTrace, w: &TsWeights, ts: &Tensor) -> Result<Tensor> {
    w.validate(student.len(), teacher.len())?;
    let mut total = ts.scale(w.gamma_out);
    for (s, (&g, &gamma)) in w.layer_map.iter().zip(&w.gamma).enumerate() {
        if gamma == 0.0 {
            continue;
        }
        let h = &student.hidden[s];
        let t = teacher.hidden[g].detach();
        if h.shape() != t.shape() {
            return Err(dim_err!("student layer {s} {:?} vs teacher layer {g} {:?}", h.shape(), t.shape()));
        }
        total = total.add(&h.sub(&t)?.frobenius().scale(gamma))?;
    }
    Ok(total)
}

/// `omega_t = sigmoid(-k (t - t0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsSchedule {
    pub k: f64,
    pub t0: f64,
}

impl OsSchedule {
    pub fn reference() -> Self {
        Self { k: 5e-4, t0: 1.5e5 }
    }

    /// Same curve shape over a budget shortened by `factor`.
    pub fn scaled(factor: f64) -> Self {
        let p = Self::reference();
        Self { k: p.k / factor, t0: p.t0 * factor }
    }
}

pub fn os_weight(sched: &OsSchedule, t: f64) -> f64 {
    let x = -sched.k * (t - sched.t0);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `omega_t * fa + (1 - omega_t) * lts`.
pub fn os_loss(fa: &Tensor, lts: &Tensor, sched: &OsSchedule, t: f64) -> Result<Tensor> {
    let w = os_weight(sched, t);
    fa.scale(w).add(&lts.scale(1.0 - w))
}
