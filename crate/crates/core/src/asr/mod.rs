//! Toy recognizer: conformer encoder with a CTC head and a causal
//! transformer decoder trained with label-smoothed cross-entropy. It stays
//! frozen while it scores separated speech.

pub mod ctc;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ctc::{ctc_loss, ctc_nll, min_frames};

use crate::dsp::{feature_transform, log_mvn, log_mvn_tensor, Mat, MelTransform};
use crate::dsp::feature_transform_tensor;
use crate::error::{cfg_err, input_err, Error, Result};
use crate::separator::block::{self, linear, merge_heads, norm, split_heads, BlockDims};
use crate::separator::fingerprint;
use crate::simulate::speech;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{matmul, Bound, ParamStore, Tensor};

pub const BLANK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: usize = 3;

/// Output symbols: blank, bos, eos, then the synthetic token inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
}

impl Vocab {
    pub fn synthetic() -> Self {
        let mut tokens = vec!["<blank>".to_string(), "<bos>".into(), "<eos>".into()];
        tokens.extend(speech::token_names().into_iter().map(String::from));
        Self { tokens }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Inventory indices to vocabulary ids.
    pub fn encode(&self, inventory: &[usize]) -> Vec<usize> {
        inventory.iter().map(|t| t + SPECIALS).collect()
    }

    /// Vocabulary ids to inventory indices; special symbols are dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().filter(|&&i| i >= SPECIALS).map(|i| i - SPECIALS).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(text).map_err(|e| Error::Format(format!("vocab: {e}")))?;
        if tokens.len() <= SPECIALS || tokens[BLANK] != "<blank>" || tokens[BOS] != "<bos>" || tokens[EOS] != "<eos>" {
            return Err(Error::Format("vocab must start with <blank>, <bos>, <eos> and list real tokens".into()));
        }
        Ok(Self { tokens })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("vocab serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsrConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub rel_pos_window: usize,
    pub input_dim: usize,
    pub vocab_size: usize,
    /// Weight of the CTC term.
    pub lambda: f64,
    pub smoothing_mass: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            conv_kernel: 7,
            rel_pos_window: 16,
            input_dim: 80,
            vocab_size: Vocab::synthetic().size(),
            lambda: 0.2,
            smoothing_mass: 0.1,
        }
    }
}

impl AsrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(cfg_err!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.smoothing_mass) {
            return Err(cfg_err!("smoothing mass {} outside [0, 1]", self.smoothing_mass));
        }
        if self.vocab_size <= SPECIALS || self.input_dim == 0 {
            return Err(cfg_err!("vocabulary and input widths must be positive"));
        }
        self.block_dims().validate()
    }

    fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            conv_channels: self.dim,
            conv_kernel: self.conv_kernel,
            rel_window: self.rel_pos_window,
            se_reduction: 8,
        }
    }
}

/// Recognizer with its configuration, vocabulary and smoothing prior.
#[derive(Debug, Clone, PartialEq)]
pub struct Asr {
    pub cfg: AsrConfig,
    pub vocab: Vocab,
    /// Unigram distribution over the vocabulary used for label smoothing.
    pub unigram: Vec<f64>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    fingerprint: String,
    config: AsrConfig,
    vocab: Vocab,
    unigram: Vec<f64>,
}

/// Unigram over decoder targets (tokens plus eos) in `transcripts`, as
/// vocabulary ids.
pub fn unigram_from(transcripts: &[Vec<usize>], vocab_size: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab_size];
    for t in transcripts {
        for &id in t {
            counts[id] += 1.0;
        }
        counts[EOS] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        counts[EOS] = 1.0;
        return counts;
    }
    counts.iter().map(|c| c / total).collect()
}

fn sinusoid(len: usize, dim: usize) -> Tensor {
    let mut d = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let rate = (10000f64).powf(-2.0 * i as f64 / dim as f64);
            d[p * dim + 2 * i] = (p as f64 * rate).sin();
            d[p * dim + 2 * i + 1] = (p as f64 * rate).cos();
        }
    }
    Tensor::new(d, &[len, dim])
}

/// Multi-head scaled dot-product attention with an optional additive
/// `[Tq, Tk]` mask. Inputs are already projected `[T, H*dk]` matrices.
fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&Tensor>) -> Result<Tensor> {
    let dk = q.shape()[1] / heads;
    let (q, k, v) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let mut scores = matmul(&q, &k.transpose_last()?)?.scale(1.0 / (dk as f64).sqrt());
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    merge_heads(&matmul(&scores.softmax(), &v)?)
}

fn causal_mask(len: usize) -> Tensor {
    let mut d = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            d[i * len + j] = -1e30;
        }
    }
    Tensor::new(d, &[len, len])
}

/// Log-MVN of the linear mel features of a magnitude spectrogram; the input
/// representation of the recognizer.
pub fn asr_features(magnitude: &Mat, mel: &MelTransform) -> Result<Mat> {
    Ok(log_mvn(&feature_transform(magnitude, mel)?))
}

/// Differentiable [`asr_features`].
pub fn asr_features_tensor(magnitude: &Tensor, mel: &MelTransform) -> Result<Tensor> {
    log_mvn_tensor(&feature_transform_tensor(magnitude, mel)?)
}

/// Label-smoothed teacher-forced cross-entropy, one term per output
/// position. `logits` is `[L+1, V]` for targets `ids + [eos]`.
pub fn ce_terms(logits: &Tensor, ids: &[usize], smoothing: f64, unigram: &[f64]) -> Result<Tensor> {
    let v = unigram.len();
    let rows = ids.len() + 1;
    if logits.shape() != [rows, v] {
        return Err(input_err!("logits {:?} do not match {rows} targets over {v} symbols", logits.shape()));
    }
    let mut q = vec![0.0; rows * v];
    for (r, &tgt) in ids.iter().chain(std::iter::once(&EOS)).enumerate() {
        for k in 0..v {
            q[r * v + k] = smoothing * unigram[k];
        }
        q[r * v + tgt] += 1.0 - smoothing;
    }
    let q = Tensor::new(q, &[rows, v]);
    logits.log_softmax().mul(&q)?.sum_axis(1).map(|t| t.neg())
}

/// Mean of [`ce_terms`].
pub fn ce_from_logits(logits: &Tensor, ids: &[usize], smoothing: f64, unigram: &[f64]) -> Result<Tensor> {
    Ok(ce_terms(logits, ids, smoothing, unigram)?.mean_all())
}

/// `lambda * ctc + (1 - lambda) * ce`.
pub fn combine(ctc: &Tensor, ce: &Tensor, lambda: f64) -> Result<Tensor> {
    ctc.scale(lambda).add(&ce.scale(1.0 - lambda))
}

impl Asr {
    pub fn new(cfg: AsrConfig, unigram: Vec<f64>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::synthetic();
        if vocab.size() != cfg.vocab_size || unigram.len() != cfg.vocab_size {
            return Err(cfg_err!("vocabulary size mismatch"));
        }
        let params = Self::init(&cfg, seed);
        Ok(Self { cfg, vocab, unigram, params })
    }

    fn init(cfg: &AsrConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.dim;
        let dims = cfg.block_dims();
        block::init_linear(&mut s, "enc.in", cfg.input_dim, d, &mut rng);
        for i in 0..cfg.enc_layers {
            block::init_block(&mut s, &format!("e{i}"), &dims, &mut rng);
        }
        block::init_linear(&mut s, "ctc", d, cfg.vocab_size, &mut rng);
        s.init_uniform("emb", &[cfg.vocab_size, d], d, &mut rng);
        for i in 0..cfg.dec_layers {
            let p = format!("d{i}");
            for part in ["sa", "ca"] {
                block::init_norm(&mut s, &format!("{p}.{part}.ln"), d);
                for w in ["q", "k", "v", "o"] {
                    block::init_linear(&mut s, &format!("{p}.{part}.{w}"), d, d, &mut rng);
                }
            }
            block::init_norm(&mut s, &format!("{p}.ffn.ln"), d);
            block::init_linear(&mut s, &format!("{p}.ffn.w1"), d, cfg.ffn_dim, &mut rng);
            block::init_linear(&mut s, &format!("{p}.ffn.w2"), cfg.ffn_dim, d, &mut rng);
        }
        block::init_norm(&mut s, "dec.ln", d);
        block::init_linear(&mut s, "dec.out", d, cfg.vocab_size, &mut rng);
        s
    }

    /// Encoder states `[T, dim]` for `[T, input_dim]` features.
    pub fn encode(&self, p: &Bound, features: &Tensor) -> Result<Tensor> {
        match features.shape() {
            [_, w] if *w == self.cfg.input_dim => {}
            s => return Err(cfg_err!("recognizer expects [T, {}] features, got {s:?}", self.cfg.input_dim)),
        }
        let dims = self.cfg.block_dims();
        let mut z = linear(features, p, "enc.in")?;
        for i in 0..self.cfg.enc_layers {
            z = block::conformer_block(&z, p, &format!("e{i}"), &dims)?;
        }
        Ok(z)
    }

    pub fn ctc_log_probs(&self, p: &Bound, enc: &Tensor) -> Result<Tensor> {
        Ok(linear(enc, p, "ctc")?.log_softmax())
    }

    /// Teacher-forced decoder logits `[L+1, V]` for inputs `[bos] + ids`.
    pub fn decoder_logits(&self, p: &Bound, enc: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(ids);
        let len = inputs.len();
        let d = self.cfg.dim;
        let h = self.cfg.heads;
        let mask = causal_mask(len);
        let mut x = p.get("emb")?.index_select(&inputs)?.scale((d as f64).sqrt()).add(&sinusoid(len, d))?;
        for i in 0..self.cfg.dec_layers {
            let n = |s: &str| format!("d{i}.{s}");
            let y = norm(&x, p, &n("sa.ln"))?;
            let sa = attend(&linear(&y, p, &n("sa.q"))?, &linear(&y, p, &n("sa.k"))?, &linear(&y, p, &n("sa.v"))?, h, Some(&mask))?;
            x = x.add(&linear(&sa, p, &n("sa.o"))?)?;
            let y = norm(&x, p, &n("ca.ln"))?;
            let ca = attend(&linear(&y, p, &n("ca.q"))?, &linear(enc, p, &n("ca.k"))?, &linear(enc, p, &n("ca.v"))?, h, None)?;
            x = x.add(&linear(&ca, p, &n("ca.o"))?)?;
            x = x.add(&block::feed_forward(&norm(&x, p, &n("ffn.ln"))?, p, &n("ffn"))?)?;
        }
        linear(&norm(&x, p, "dec.ln")?, p, "dec.out")
    }

    /// Teacher-forced mean cross-entropy against `ids + [eos]`.
    pub fn decoder_ce_loss(&self, p: &Bound, enc: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(input_err!("decoder target is empty"));
        }
        let logits = self.decoder_logits(p, enc, ids)?;
        ce_from_logits(&logits, ids, self.cfg.smoothing_mass, &self.unigram)
    }

    /// Hybrid loss of one speaker: returns `(total, ctc, ce)`.
    pub fn speaker_loss(&self, p: &Bound, features: &Tensor, inventory: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let ids = self.vocab.encode(inventory);
        let enc = self.encode(p, features)?;
        let ctc = ctc_loss(&self.ctc_log_probs(p, &enc)?, &ids, BLANK)?;
        let ce = self.decoder_ce_loss(p, &enc, &ids)?;
        Ok((combine(&ctc, &ce, self.cfg.lambda)?, ctc, ce))
    }

    /// Sum over speakers of `lambda * CTC + (1 - lambda) * CE`, the
    /// minimized negative of the hybrid log-likelihood. `transcripts` hold
    /// inventory indices aligned with `features`.
    pub fn asr_objective(&self, p: &Bound, features: &[Tensor], transcripts: &[Vec<usize>]) -> Result<Tensor> {
        if features.len() != transcripts.len() || features.is_empty() {
            return Err(input_err!("{} feature streams for {} transcripts", features.len(), transcripts.len()));
        }
        let mut total: Option<Tensor> = None;
        for (f, t) in features.iter().zip(transcripts) {
            let (l, _, _) = self.speaker_loss(p, f, t)?;
            total = Some(match total {
                None => l,
                Some(acc) => acc.add(&l)?,
            });
        }
        Ok(total.expect("non-empty"))
    }

    /// CTC best path as inventory indices.
    pub fn greedy_decode(&self, features: &Mat) -> Result<Vec<usize>> {
        let p = self.params.bind(false);
        let enc = self.encode(&p, &features.to_tensor())?;
        let lp = self.ctc_log_probs(&p, &enc)?;
        let v = self.cfg.vocab_size;
        let argmax: Vec<usize> = lp
            .data()
            .chunks(v)
            .map(|row| {
                row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
            })
            .collect();
        Ok(self.vocab.decode(&collapse(&argmax, BLANK)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = Header {
            kind: "asr".into(),
            fingerprint: fingerprint(&serde_json::to_string(&self.cfg).expect("config serializes")),
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            unigram: self.unigram.clone(),
        };
        Checkpoint::new(serde_json::to_string(&header).expect("header serializes"), self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h: Header = serde_json::from_str(&ckpt.header)
            .map_err(|e| Error::Config(format!("checkpoint header is not a recognizer header: {e}")))?;
        if h.kind != "asr" {
            return Err(cfg_err!("checkpoint holds a `{}`, not a recognizer", h.kind));
        }
        let mut asr = Self::new(h.config, h.unigram, 0)?;
        if !asr.params.same_layout(&ckpt.params) {
            return Err(cfg_err!("recognizer parameters do not match its configuration"));
        }
        asr.vocab = h.vocab;
        asr.params = ckpt.params.clone();
        Ok(asr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Collapses repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> AsrConfig {
        AsrConfig { dim: 8, heads: 2, ffn_dim: 12, conv_kernel: 3, rel_pos_window: 3, input_dim: 6, ..Default::default() }
    }

    fn feats(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new((0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[t, d])
    }

    fn model() -> Asr {
        let v = Vocab::synthetic().size();
        Asr::new(small(), unigram_from(&[vec![3, 4, 5]], v), 1).unwrap()
    }

    #[test]
    fn collapse_rule() {
        assert_eq!(collapse(&[3, 3, 0, 4], 0), vec![3, 4]);
        assert_eq!(collapse(&[0, 0, 0], 0), Vec::<usize>::new());
        assert_eq!(collapse(&[3, 0, 3], 0), vec![3, 3]);
    }

    #[test]
    fn encoder_shapes_and_errors() {
        let m = model();
        let p = m.params.bind(false);
        for t in [1, 5] {
            assert_eq!(m.encode(&p, &feats(t, 6, 1)).unwrap().shape(), [t, 8]);
        }
        assert!(matches!(m.encode(&p, &feats(3, 5, 1)), Err(Error::Config(_))));
        assert!(matches!(m.decoder_ce_loss(&p, &feats(3, 8, 1), &[]), Err(Error::Input(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 11;
        let uni = unigram_from(&[vec![3, 5], vec![4]], v);
        assert!((uni.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ids = [3, 5];
        let uniform = Tensor::zeros(&[3, v]);
        for m in [0.0, 0.1, 0.7] {
            assert!((ce_from_logits(&uniform, &ids, m, &uni).unwrap().item() - (v as f64).ln()).abs() < 1e-12);
        }
        let mut sharp = vec![0.0; 3 * v];
        for (r, t) in [3, 5, EOS].iter().enumerate() {
            sharp[r * v + t] = 800.0;
        }
        assert!(ce_from_logits(&Tensor::new(sharp, &[3, v]), &ids, 0.0, &uni).unwrap().item().abs() < 1e-300);
        let combined = combine(&Tensor::scalar(2.0), &Tensor::scalar(3.0), 0.2).unwrap();
        assert!((combined.item() - 2.8).abs() < 1e-12);
    }

    #[test]
    fn decoder_is_causal() {
        let m = model();
        let p = m.params.bind(false);
        let enc = feats(4, 8, 3);
        let la = m.decoder_logits(&p, &enc, &[3, 4, 5]).unwrap();
        let lb = m.decoder_logits(&p, &enc, &[3, 4, 9]).unwrap();
        // output rows 0..=2 see only [bos, 3, 4]
        assert_eq!(la.data()[..3 * 11], lb.data()[..3 * 11]);
        let a = ce_terms(&la, &[3, 4, 5], 0.1, &m.unigram).unwrap();
        let b = ce_terms(&lb, &[3, 4, 9], 0.1, &m.unigram).unwrap();
        assert_eq!(a.data()[..2], b.data()[..2]);
        assert_ne!(a.data()[3], b.data()[3]);
    }

    #[test]
    fn objective_boundaries() {
        let mut m = model();
        let p = m.params.bind(false);
        let f = [feats(6, 6, 4), feats(5, 6, 5)];
        let t = [vec![0, 2], vec![5]];
        let parts: Vec<(f64, f64)> = f
            .iter()
            .zip(&t)
            .map(|(f, t)| {
                let (_, c, e) = m.speaker_loss(&p, f, t).unwrap();
                (c.item(), e.item())
            })
            .collect();
        let want = |l: f64| parts.iter().map(|(c, e)| l * c + (1.0 - l) * e).sum::<f64>();
        assert!((m.asr_objective(&p, &f, &t).unwrap().item() - want(0.2)).abs() < 1e-12);
        m.cfg.lambda = 1.0;
        assert!((m.asr_objective(&p, &f, &t).unwrap().item() - want(1.0)).abs() < 1e-12);
        m.cfg.lambda = 0.0;
        assert!((m.asr_objective(&p, &f, &t).unwrap().item() - want(0.0)).abs() < 1e-12);
        assert!(matches!(m.asr_objective(&p, &f[..1], &t), Err(Error::Input(_))));
    }

    #[test]
    fn checkpoint_and_vocab_round_trip() {
        let m = model();
        let back = Asr::from_checkpoint(&Checkpoint::decode(&m.to_checkpoint().encode()).unwrap()).unwrap();
        assert_eq!(back, m);
        let v = Vocab::synthetic();
        assert_eq!(Vocab::from_json(&v.to_json()).unwrap(), v);
        assert_eq!(v.decode(&v.encode(&[0, 7, 3])), vec![0, 7, 3]);
    }
}
