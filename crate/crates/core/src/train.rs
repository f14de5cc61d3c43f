//! Spectrogram losses, the coarse-loss weight schedule, Adam, the training
//! loop, and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::dsp::{self, FeatureConfig};
use crate::model::{self, ModelConfig, ModelParams, StyleSource};
use crate::nn::{spec_elem, Graph, ParamStore, Tensor};
use crate::rate::{self, RateStats, SpeakingRate};
use crate::text::{PhonemeSequence, Vocabulary};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha_hold_steps: u64,
    pub alpha_zero_step: u64,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Multiplier applied to both schedule milestones.
    pub scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_hold_steps: 50_000,
            alpha_zero_step: 200_000,
            learning_rate: 0.001,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 16,
            max_steps: 200_000,
            seed: 0,
            checkpoint_every: 10_000,
            scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.alpha_hold_steps < self.alpha_zero_step && self.alpha_hold_steps > 0) {
            return bad("require 0 < alpha_hold_steps < alpha_zero_step");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.scale > 0.0) {
            return bad("scale must be positive");
        }
        Ok(())
    }

    /// Milestones after scaling: `(hold, zero)`.
    pub fn milestones(&self) -> (f64, f64) {
        (
            self.alpha_hold_steps as f64 * self.scale,
            self.alpha_zero_step as f64 * self.scale,
        )
    }
}

/// Weight of the coarse loss: 1 up to the hold step, then linear down to 0
/// at the zero step.
pub fn alpha_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let (hold, zero) = cfg.milestones();
    let s = step as f64;
    if s <= hold {
        1.0
    } else if s >= zero {
        0.0
    } else {
        (zero - s) / (zero - hold)
    }
}

fn check_shapes(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean absolute error plus mean binary KL divergence.
pub fn spectrogram_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    spectrogram_loss_masked(pred, target, &vec![true; pred.rows()])
}

/// [`spectrogram_loss`] restricted to rows whose mask entry is true.
pub fn spectrogram_loss_masked(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f64> {
    check_shapes(pred, target)?;
    if mask.len() != pred.rows() {
        return Err(Error::ShapeMismatch(format!(
            "mask length {} vs {} rows",
            mask.len(),
            pred.rows()
        )));
    }
    let cols = pred.cols();
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for (&p, &y) in pred.row(r).iter().zip(target.row(r)) {
            total += spec_elem(p, y);
        }
        count += cols;
    }
    if count == 0 {
        return Err(Error::EmptyInput("loss mask selects no rows"));
    }
    Ok(total / count as f64)
}

/// `alpha * L(c_hat, c) + L(m_hat, m)`.
pub fn total_loss(
    c_hat: &Tensor,
    c: &Tensor,
    m_hat: &Tensor,
    m: &Tensor,
    alpha: f64,
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be non-negative, got {alpha}"
        )));
    }
    Ok(alpha * spectrogram_loss(c_hat, c)? + spectrogram_loss(m_hat, m)?)
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update. Parameters without a gradient still decay
    /// their moments.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = cfg.adam_betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = cfg.learning_rate;
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            match &grads[i] {
                Some(g) => {
                    for (((pj, mj), vj), &gj) in p
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(g.data())
                    {
                        *mj = b1 * *mj + (1.0 - b1) * gj;
                        *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                        *pj -= lr * (*mj / c1) / ((*vj / c2).sqrt() + cfg.adam_eps);
                    }
                }
                None => {
                    for ((pj, mj), vj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mj *= b1;
                        *vj *= b2;
                        *pj -= lr * (*mj / c1) / ((*vj / c2).sqrt() + cfg.adam_eps);
                    }
                }
            }
        }
    }
}

/// Precomputed training features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFeatures {
    pub id: String,
    pub phonemes: PhonemeSequence,
    /// Normalized mel, `T x bins`.
    pub mel: Tensor,
    /// Decimated mel, `ceil(T / factor) x bins`.
    pub coarse: Tensor,
    /// Voiced span of the mel, the style reference during training.
    pub reference: Tensor,
    pub rate: SpeakingRate,
}

/// Mel, coarse mel and speaking rate (over voiced frames) of a waveform.
pub fn features_from_wave(
    id: &str,
    wave: &[f64],
    phonemes: PhonemeSequence,
    cfg: &FeatureConfig,
    lambda: f64,
) -> Result<UtteranceFeatures> {
    let mel = dsp::mel_spectrogram(wave, cfg)?;
    let voiced = dsp::trim_silence(&mel, cfg.silence_threshold)?
        .into_iter()
        .filter(|&v| v)
        .count();
    let rate = rate::compute_sr(phonemes.phoneme_count, voiced, lambda)?;
    let coarse = dsp::coarsen(&mel).values;
    let reference = dsp::voiced_span(mel.values(), cfg.silence_threshold)?;
    Ok(UtteranceFeatures {
        id: id.to_string(),
        phonemes,
        mel: mel.into_values(),
        coarse,
        reference,
        rate,
    })
}

pub fn compute_features(
    dataset: &Dataset,
    vocab: &Vocabulary,
    cfg: &FeatureConfig,
    lambda: f64,
) -> Result<Vec<UtteranceFeatures>> {
    dataset
        .utterances
        .iter()
        .map(|u| {
            let wave = dataset.load_wave(u)?;
            features_from_wave(&u.id, &wave, vocab.encode(&u.text)?, cfg, lambda)
        })
        .collect()
}

pub fn rate_stats(features: &[UtteranceFeatures]) -> Result<RateStats> {
    let rates: Vec<SpeakingRate> = features.iter().map(|f| f.rate).collect();
    rate::average_sr(&rates)
}

/// Loss components of one step, each a masked mean over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLoss {
    pub step: u64,
    pub alpha: f64,
    pub coarse: f64,
    pub mel: f64,
    pub total: f64,
}

/// One Adam step on `alpha * L_coarse + L_mel` over `batch`. Each utterance
/// runs through its own graph at its true length; normalizing the summed
/// element losses by the total frame count of the batch gives exactly the
/// masked mean over a zero-padded batch.
pub fn train_step(
    batch: &[&UtteranceFeatures],
    params: &mut ModelParams,
    optimizer: &mut Adam,
    step: u64,
    cfg: &TrainConfig,
    stats: &RateStats,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let mcfg = params.config.clone();
    let alpha = alpha_schedule(step, cfg);
    let bins = mcfg.mel_bins as f64;
    let coarse_norm = bins * batch.iter().map(|u| u.coarse.rows()).sum::<usize>() as f64;
    let mel_norm = bins * batch.iter().map(|u| u.mel.rows()).sum::<usize>() as f64;

    let mut grads: Vec<Option<Tensor>> = vec![None; params.store.len()];
    let (mut coarse_loss, mut mel_loss) = (0.0, 0.0);
    for u in batch {
        let z = stats.standardize(u.rate.r)?;
        let mut g = Graph::training(
            &params.store,
            mcfg.dropout,
            ChaCha8Rng::seed_from_u64(rng.gen()),
        );
        let style = if mcfg.use_gst {
            StyleSource::Reference(&u.reference)
        } else {
            StyleSource::None
        };
        let teacher = model::teacher_input(&u.coarse);
        let out = model::forward_graph(&mut g, &mcfg, &u.phonemes, z, &teacher, style)?;
        let lc = g.spec_loss(out.coarse, u.coarse.clone(), None, coarse_norm);
        let mel_pred = g.slice_rows(out.mel, 0, u.mel.rows());
        let lm = g.spec_loss(mel_pred, u.mel.clone(), None, mel_norm);
        let weighted = g.scale(lc, alpha);
        let loss = g.add(weighted, lm);
        coarse_loss += g.value(lc).data()[0];
        mel_loss += g.value(lm).data()[0];
        let ug = g.backward(loss).into_params();
        for (acc, gi) in grads.iter_mut().zip(ug) {
            match (acc.as_mut(), gi) {
                (Some(a), Some(gi)) => a.add_assign(&gi),
                (None, Some(gi)) => *acc = Some(gi),
                _ => {}
            }
        }
    }
    let total = alpha * coarse_loss + mel_loss;
    let grads_finite = grads.iter().flatten().all(Tensor::is_finite);
    if !total.is_finite() || !grads_finite {
        return Err(Error::NonFiniteLoss {
            step: step as usize,
            batch_ids: batch.iter().map(|u| u.id.clone()).collect(),
        });
    }
    optimizer.update(&mut params.store, &grads, cfg);
    Ok(StepLoss {
        step,
        alpha,
        coarse: coarse_loss,
        mel: mel_loss,
        total,
    })
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub rate_stats: RateStats,
    pub lambda: f64,
    pub step: u64,
    pub optimizer: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelConfig,
    features: FeatureConfig,
    train: TrainConfig,
    vocab: Vocabulary,
    rate_stats: RateStats,
    lambda: f64,
    step: u64,
    adam_t: Option<u64>,
}

const META_FILE: &str = "meta.json";
const PARAMS_FILE: &str = "params.bin";
const OPTIM_FILE: &str = "optimizer.bin";
const TENSOR_MAGIC: &[u8; 4] = b"TNS0";

/// Writes named tensors: magic, `u32` count, then per entry a `u32` name
/// length, UTF-8 name, `u32` rank, `u32` dims and `f32` data, all
/// little-endian.
pub fn write_tensors<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let bad = || Error::Format {
        path: path.to_path_buf(),
        message: "truncated or malformed tensor container".into(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
        pos += n;
        Ok(s)
    };
    if take(4)? != TENSOR_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "missing TNS0 header".into(),
        });
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad())?;
        let rank = u32_at(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(4)?));
        }
        let n: usize = shape.iter().product();
        let data = take(4 * n)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        out.push((name, Tensor::new(&shape, data)));
    }
    if pos != bytes.len() {
        return Err(bad());
    }
    Ok(out)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CheckpointMeta {
            model: self.params.config.clone(),
            features: self.features,
            train: self.train.clone(),
            vocab: self.vocab.clone(),
            rate_stats: self.rate_stats,
            lambda: self.lambda,
            step: self.step,
            adam_t: self.optimizer.as_ref().map(|a| a.t),
        };
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        write_tensors(&dir.join(PARAMS_FILE), self.params.store.iter())?;
        if let Some(adam) = &self.optimizer {
            let names: Vec<(String, &Tensor)> = self
                .params
                .store
                .iter()
                .zip(adam.m.iter().zip(&adam.v))
                .flat_map(|((name, _), (m, v))| {
                    [(format!("m/{name}"), m), (format!("v/{name}"), v)]
                })
                .collect();
            write_tensors(
                &dir.join(OPTIM_FILE),
                names.iter().map(|(n, t)| (n.as_str(), *t)),
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read(&meta_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(meta_path.clone()),
            _ => Error::io(&meta_path, e),
        })?;
        let meta: CheckpointMeta = serde_json::from_slice(&text)?;
        let mut params = ModelParams::init(meta.model, 0)?;
        let params_path = dir.join(PARAMS_FILE);
        let tensors = read_tensors(&params_path)?;
        if tensors.len() != params.store.len() {
            return Err(Error::Format {
                path: params_path,
                message: format!(
                    "expected {} tensors, found {}",
                    params.store.len(),
                    tensors.len()
                ),
            });
        }
        for (name, t) in tensors {
            let id = params.store.id(&name).ok_or_else(|| Error::Format {
                path: params_path.clone(),
                message: format!("unexpected tensor {name}"),
            })?;
            if params.store.get(id).shape() != t.shape() {
                return Err(Error::Format {
                    path: params_path.clone(),
                    message: format!("tensor {name} has shape {:?}", t.shape()),
                });
            }
            *params.store.get_mut(id) = t;
        }
        let optimizer = match meta.adam_t {
            None => None,
            Some(t) => {
                let mut adam = Adam::new(&params.store);
                adam.t = t;
                for (name, tensor) in read_tensors(&dir.join(OPTIM_FILE))? {
                    let (kind, pname) = name.split_once('/').unwrap_or(("", ""));
                    let Some(id) = params.store.id(pname) else {
                        continue;
                    };
                    match kind {
                        "m" => adam.m[id.index()] = tensor,
                        "v" => adam.v[id.index()] = tensor,
                        _ => {}
                    }
                }
                Some(adam)
            }
        };
        Ok(Self {
            params,
            features: meta.features,
            train: meta.train,
            vocab: meta.vocab,
            rate_stats: meta.rate_stats,
            lambda: meta.lambda,
            step: meta.step,
            optimizer,
        })
    }
}

/// Where [`fit`] writes checkpoints and its CSV log.
#[derive(Clone, Debug, Default)]
pub struct FitOutput {
    pub work_dir: Option<PathBuf>,
}

/// Loss history and final checkpoint of a run.
pub struct FitResult {
    pub checkpoint: Checkpoint,
    pub losses: Vec<StepLoss>,
}

/// Trains from precomputed features. Batches are drawn from a seeded
/// permutation reshuffled every epoch.
pub fn fit_features(
    features: &[UtteranceFeatures],
    vocab: Vocabulary,
    feature_cfg: &FeatureConfig,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    lambda: f64,
    out: &FitOutput,
) -> Result<FitResult> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let stats = rate_stats(features)?;
    if !(stats.std_r > 0.0) {
        return Err(Error::DatasetTooSmall(
            "speaking rates of the training set have zero spread".into(),
        ));
    }
    let model_cfg = ModelConfig {
        key_position_rate: model_cfg.key_position_rate.or(Some(
            lambda / (stats.mean_r * model_cfg.coarse_factor as f64),
        )),
        key_rate_spread: model_cfg
            .key_rate_spread
            .or(Some(stats.std_r / stats.mean_r)),
        ..model_cfg
    };
    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(&params.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11);
    let mut log = match &out.work_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "step,alpha,loss_coarse,loss_mel,total")
                .map_err(|e| Error::io(&path, e))?;
            Some((path, f))
        }
        None => None,
    };
    let snapshot = |params: &ModelParams, adam: &Adam, step: u64| Checkpoint {
        params: params.clone(),
        features: *feature_cfg,
        train: cfg.clone(),
        vocab: vocab.clone(),
        rate_stats: stats,
        lambda,
        step,
        optimizer: Some(adam.clone()),
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.max_steps as usize);
    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(features.len()) {
            if cursor == order.len() {
                order = (0..features.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&features[order[cursor]]);
            cursor += 1;
        }
        let loss = train_step(&batch, &mut params, &mut adam, step, cfg, &stats, &mut rng)?;
        if let Some((path, f)) = log.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{}",
                loss.step, loss.alpha, loss.coarse, loss.mel, loss.total
            )
            .map_err(|e| Error::io(&*path, e))?;
        }
        if step % 100 == 0 {
            log::info!(
                "step {step} alpha {:.3} coarse {:.4} mel {:.4} total {:.4}",
                loss.alpha,
                loss.coarse,
                loss.mel,
                loss.total
            );
        }
        losses.push(loss);
        let done = step + 1;
        if let Some(dir) = &out.work_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.max_steps
            {
                snapshot(&params, &adam, done).save(&dir.join(format!("ckpt_{done:07}")))?;
            }
        }
    }
    let checkpoint = snapshot(&params, &adam, cfg.max_steps);
    if let Some(dir) = &out.work_dir {
        checkpoint.save(&dir.join("ckpt_final"))?;
    }
    Ok(FitResult { checkpoint, losses })
}

/// Builds the vocabulary, extracts features and trains.
pub fn fit(
    train_set: &Dataset,
    feature_cfg: &FeatureConfig,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    lambda: f64,
    out: &FitOutput,
) -> Result<FitResult> {
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let vocab = Vocabulary::from_texts(train_set.utterances.iter().map(|u| u.text.as_str()));
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..model_cfg
    };
    let features = compute_features(train_set, &vocab, feature_cfg, lambda)?;
    fit_features(&features, vocab, feature_cfg, model_cfg, cfg, lambda, out)
}
