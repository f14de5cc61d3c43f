//! The text-to-mel network: phoneme embedding with speaking-rate
//! conditioning, non-causal text encoder, causal audio encoder, dot-product
//! attention, causal decoder, upsampling post-network, and the optional
//! global-style-token branch (reference encoder, token attention, fusion).
//!
//! Every layer is written against a [`Graph`], so the same code serves
//! training (with gradients and dropout) and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::rate::RateStats;
use crate::text::PhonemeSequence;
use crate::{Error, Result};

/// Kernel width and dilation of one highway-convolution block.
pub type ConvSpec = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mel_bins: usize,
    pub coarse_factor: usize,
    pub vocab_size: usize,
    pub use_gst: bool,
    pub num_tokens: usize,
    pub num_heads: usize,
    pub style_dim: usize,
    pub ref_encoder_channels: Vec<usize>,
    /// Width of the recurrent summarizer in the reference encoder.
    pub ref_rnn_dim: usize,
    pub dropout: f64,
    pub text_highway: Vec<ConvSpec>,
    pub audio_highway: Vec<ConvSpec>,
    pub decoder_highway: Vec<ConvSpec>,
    /// Number of `1x1` ReLU layers between the decoder highway stack and the
    /// output projection.
    pub decoder_relu_layers: usize,
    pub postnet_channels: usize,
    /// Highway blocks after the input projection and after each upsampling
    /// stage of the post-network.
    pub postnet_highway: Vec<ConvSpec>,
    /// Add sinusoidal position codes with learned gains to keys and queries.
    pub positional_encoding: bool,
    /// Coarse frames per phoneme used to stretch key positions; filled from
    /// the training set's mean rate when absent.
    pub key_position_rate: Option<f64>,
    /// Standard deviation over mean of the training rates. When set, the key
    /// position rate follows the conditioning rate, `base / (1 + z * spread)`.
    pub key_rate_spread: Option<f64>,
}

fn repeat_dilations(kernel: usize, dilations: &[usize], times: usize) -> Vec<ConvSpec> {
    (0..times)
        .flat_map(|_| dilations.iter().map(move |&d| (kernel, d)))
        .collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mut text = repeat_dilations(3, &[1, 3, 9, 27], 2);
        text.extend([(3, 1), (3, 1), (1, 1), (1, 1)]);
        let mut audio = repeat_dilations(3, &[1, 3, 9, 27], 2);
        audio.extend([(3, 3), (3, 3)]);
        let mut decoder = repeat_dilations(3, &[1, 3, 9, 27], 1);
        decoder.extend([(3, 1), (3, 1)]);
        Self {
            embed_dim: 128,
            hidden_dim: 256,
            mel_bins: 80,
            coarse_factor: 4,
            vocab_size: 2,
            use_gst: false,
            num_tokens: 10,
            num_heads: 4,
            style_dim: 128,
            ref_encoder_channels: vec![32, 32, 64, 64, 128, 128],
            ref_rnn_dim: 128,
            dropout: 0.05,
            text_highway: text,
            audio_highway: audio,
            decoder_highway: decoder,
            decoder_relu_layers: 3,
            postnet_channels: 256,
            postnet_highway: vec![(3, 1), (3, 3)],
            positional_encoding: true,
            key_position_rate: None,
            key_rate_spread: None,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU-scale experiments (`e = 32`, `d = 64`).
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            vocab_size,
            style_dim: 32,
            ref_encoder_channels: vec![16, 32, 32],
            ref_rnn_dim: 32,
            text_highway: vec![(3, 1), (3, 3), (3, 1), (1, 1)],
            audio_highway: vec![(3, 1), (3, 3), (3, 9), (3, 1)],
            decoder_highway: vec![(3, 1), (3, 3), (3, 1)],
            decoder_relu_layers: 1,
            postnet_channels: 48,
            postnet_highway: vec![(3, 1)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size < 2 {
            return bad(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            ));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.mel_bins == 0 {
            return bad("embed_dim, hidden_dim and mel_bins must be positive".into());
        }
        if self.coarse_factor != 4 {
            return bad(format!(
                "the post-network upsamples by exactly 4; coarse_factor {} is unsupported",
                self.coarse_factor
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let specs = self
            .text_highway
            .iter()
            .chain(&self.audio_highway)
            .chain(&self.decoder_highway)
            .chain(&self.postnet_highway);
        for &(k, d) in specs {
            if k == 0 || d == 0 {
                return bad("highway kernel and dilation must be positive".into());
            }
        }
        if let Some(rate) = self.key_position_rate {
            if !(rate > 0.0 && rate.is_finite()) {
                return bad(format!("key_position_rate must be positive, got {rate}"));
            }
        }
        if let Some(spread) = self.key_rate_spread {
            if !(spread >= 0.0 && spread.is_finite()) {
                return bad(format!(
                    "key_rate_spread must be non-negative, got {spread}"
                ));
            }
        }
        if self.postnet_channels == 0 {
            return bad("postnet_channels must be positive".into());
        }
        if self.use_gst {
            if self.num_heads == 0 || !self.style_dim.is_multiple_of(self.num_heads) {
                return bad(format!(
                    "style_dim {} must be divisible by num_heads {}",
                    self.style_dim, self.num_heads
                ));
            }
            if self.num_tokens == 0 || self.ref_rnn_dim == 0 || self.ref_encoder_channels.is_empty()
            {
                return bad(
                    "style tokens, reference channels and rnn width must be non-empty".into(),
                );
            }
        }
        Ok(())
    }

    /// Frequency width left after the reference encoder's stride-2 stack.
    fn ref_freq_out(&self) -> usize {
        self.ref_encoder_channels
            .iter()
            .fold(self.mel_bins, |f, _| crate::nn::conv_out_len(f, 3, 2, 1))
    }
}

/// Row-stochastic alignment between decoder steps and input phonemes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    values: Tensor,
}

impl AttentionMatrix {
    pub fn new(values: Tensor) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn steps(&self) -> usize {
        self.values.rows()
    }

    /// Most attended phoneme per decoder step.
    pub fn positions(&self) -> Vec<usize> {
        (0..self.values.rows())
            .map(|t| argmax(self.values.row(t)))
            .collect()
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Weighted sum of style tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding(pub Vec<f64>);

/// Trainable tensors plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::new(shape, data));
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.store.add(name, Tensor::zeros(shape));
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.normal(
            format!("{prefix}.w"),
            &[fan_in, fan_out],
            (1.0 / fan_in as f64).sqrt(),
        );
        self.zeros(format!("{prefix}.b"), &[fan_out]);
    }

    fn conv(&mut self, prefix: &str, kernel: usize, c_in: usize, c_out: usize) {
        self.dense(prefix, kernel * c_in, c_out);
    }

    fn highways(&mut self, prefix: &str, specs: &[ConvSpec], channels: usize) {
        for (i, &(k, _)) in specs.iter().enumerate() {
            self.conv(&format!("{prefix}.hw{i}"), k, channels, 2 * channels);
        }
    }
}

impl ModelParams {
    /// Randomly initialized parameters, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (e, d, f) = (c.embed_dim, c.hidden_dim, c.mel_bins);
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        init.normal("embed".into(), &[c.vocab_size, e], 0.3);
        init.conv("text.in0", 1, e + 1, 2 * d);
        init.conv("text.in1", 1, 2 * d, 2 * d);
        init.highways("text", &c.text_highway, 2 * d);

        init.conv("audio.in0", 1, f, d);
        init.conv("audio.in1", 1, d, d);
        init.conv("audio.in2", 1, d, d);
        init.highways("audio", &c.audio_highway, d);
        if c.positional_encoding {
            init.store.add("pos.key_gain", Tensor::full(&[1, d], 1.0));
            init.store.add("pos.query_gain", Tensor::full(&[1, d], 1.0));
        }

        init.conv("dec.in", 1, 2 * d, d);
        init.highways("dec", &c.decoder_highway, d);
        for i in 0..c.decoder_relu_layers {
            init.conv(&format!("dec.relu{i}"), 1, d, d);
        }
        init.conv("dec.out", 1, d, f);

        let pc = c.postnet_channels;
        init.conv("post.in", 1, f, pc);
        init.highways("post.stage0", &c.postnet_highway, pc);
        for s in 0..2 {
            init.dense(&format!("post.up{s}"), pc, 2 * pc);
            init.highways(&format!("post.stage{}", s + 1), &c.postnet_highway, pc);
        }
        init.conv("post.out", 1, pc, f);

        if c.use_gst {
            let mut c_in = 1;
            for (i, &ch) in c.ref_encoder_channels.iter().enumerate() {
                init.conv(&format!("ref.conv{i}"), 9, c_in, ch);
                c_in = ch;
            }
            let h = c.ref_rnn_dim;
            let x_in = c.ref_freq_out() * c_in;
            init.dense("ref.gru.x", x_in, 3 * h);
            init.normal("ref.gru.h.w".into(), &[h, 3 * h], (1.0 / h as f64).sqrt());
            init.zeros("ref.gru.h.b".into(), &[3 * h]);
            init.dense("ref.proj", h, c.style_dim);
            let s = c.style_dim;
            init.normal("gst.tokens".into(), &[c.num_tokens, s], 0.5);
            init.normal("gst.wq".into(), &[s, s], (1.0 / s as f64).sqrt());
            init.normal("gst.wk".into(), &[s, s], (1.0 / s as f64).sqrt());
            init.normal("gst.wv".into(), &[s, s], (1.0 / s as f64).sqrt());
            // identity on the [K; V] block, fan-in scaled random weights for the style
            let mut w = Tensor::zeros(&[2 * d + s, 2 * d]);
            for i in 0..2 * d {
                w.set(i, i, 1.0);
            }
            let dist = Normal::new(0.0, 1.0 / (s as f64).sqrt()).expect("finite std");
            for r in 2 * d..2 * d + s {
                for col in 0..2 * d {
                    w.set(r, col, dist.sample(&mut init.rng));
                }
            }
            init.store.add("fuse.w", w);
            init.zeros("fuse.b".into(), &[2 * d]);
        }
        Ok(Self { config, store })
    }

    /// Sets every parameter to zero.
    pub fn zeroed(mut self) -> Self {
        self.store.fill(0.0);
        self
    }
}

fn param(g: &mut Graph, name: &str) -> Var {
    let id = g
        .params()
        .id(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"));
    g.param(id)
}

/// `x W + b` with `W` and `b` stored under `prefix`.
fn dense(g: &mut Graph, prefix: &str, x: Var) -> Var {
    let w = param(g, &format!("{prefix}.w"));
    let b = param(g, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_bias(y, b)
}

/// 1-D convolution over a `T x C` sequence. Causal convolutions pad only on
/// the left; non-causal ones pad symmetrically.
fn conv(g: &mut Graph, prefix: &str, x: Var, kernel: usize, dilation: usize, causal: bool) -> Var {
    if kernel == 1 {
        return dense(g, prefix, x);
    }
    let span = (kernel - 1) * dilation;
    let pad = if causal { span } else { span / 2 };
    let cols = g.im2col_1d(x, kernel, dilation, pad);
    dense(g, prefix, cols)
}

/// Gated residual convolution: `sigmoid(H1) * H2 + (1 - sigmoid(H1)) * x`.
fn highway(g: &mut Graph, prefix: &str, x: Var, (k, dil): ConvSpec, causal: bool) -> Var {
    let c = g.shape(x)[1];
    let xd = g.dropout(x);
    let h = conv(g, prefix, xd, k, dil, causal);
    let h1 = g.slice_cols(h, 0, c);
    let h2 = g.slice_cols(h, c, 2 * c);
    let gate = g.sigmoid(h1);
    g.lerp(gate, h2, x)
}

fn highway_stack(g: &mut Graph, prefix: &str, mut x: Var, specs: &[ConvSpec], causal: bool) -> Var {
    for (i, &spec) in specs.iter().enumerate() {
        x = highway(g, &format!("{prefix}.hw{i}"), x, spec, causal);
    }
    x
}

/// Fallback key position rate when neither the config nor data supply one.
pub const DEFAULT_KEY_POSITION_RATE: f64 = 3.0;

/// Sinusoidal codes for positions `0, rate, 2 rate, ...`, `n x d`: even
/// columns hold sines and odd columns cosines over geometric timescales.
pub fn positional_table(n: usize, d: usize, rate: f64) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let x = i as f64 * rate;
        for c in 0..d {
            let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
            data.push(if c % 2 == 0 {
                (x * freq).sin()
            } else {
                (x * freq).cos()
            });
        }
    }
    Tensor::new(&[n, d], data)
}

fn add_positions(g: &mut Graph, x: Var, gain: &str, rate: f64) -> Var {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let gain = param(g, gain);
    let gain = g.broadcast_rows(gain, n);
    let table = g.constant(positional_table(n, d, rate));
    let codes = g.mul(gain, table);
    g.add(x, codes)
}

/// Appends the standardized rate `(r - mean) / std` as a constant column.
pub fn condition_on_sr(embeddings: &Tensor, r: f64, stats: &RateStats) -> Result<Tensor> {
    let z = stats.standardize(r)?;
    let (p, e) = (embeddings.rows(), embeddings.cols());
    let mut out = Vec::with_capacity(p * (e + 1));
    for row in 0..p {
        out.extend_from_slice(embeddings.row(row));
        out.push(z);
    }
    Ok(Tensor::new(&[p, e + 1], out))
}

/// Embedding lookup followed by the rate column, on the graph.
pub fn embed_conditioned(
    g: &mut Graph,
    cfg: &ModelConfig,
    phonemes: &PhonemeSequence,
    z: f64,
) -> Result<Var> {
    if phonemes.is_empty() {
        return Err(Error::EmptyInput("phoneme sequence"));
    }
    if let Some(&id) = phonemes.ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::VocabOutOfRange {
            id,
            size: cfg.vocab_size,
        });
    }
    let table = param(g, "embed");
    let emb = g.gather(table, &phonemes.ids);
    let col = g.constant(Tensor::full(&[phonemes.len(), 1], z));
    Ok(g.concat_cols(&[emb, col]))
}

/// Coarse frames per phoneme for key positions at standardized rate `z`.
pub fn key_rate(cfg: &ModelConfig, z: f64) -> f64 {
    let base = cfg.key_position_rate.unwrap_or(DEFAULT_KEY_POSITION_RATE);
    match cfg.key_rate_spread {
        Some(spread) => base / (1.0 + z * spread).max(MIN_RELATIVE_RATE),
        None => base,
    }
}

/// Floor on `r / mean_r` when stretching key positions.
const MIN_RELATIVE_RATE: f64 = 0.05;

/// Non-causal text encoder: `P x (e+1)` to keys and values, each `P x d`.
/// `z` is the standardized rate already held in the last input column.
pub fn text_encode(g: &mut Graph, cfg: &ModelConfig, conditioned: Var, z: f64) -> (Var, Var) {
    let d = cfg.hidden_dim;
    let x = dense(g, "text.in0", conditioned);
    let x = g.relu(x);
    let x = g.dropout(x);
    let x = dense(g, "text.in1", x);
    let x = highway_stack(g, "text", x, &cfg.text_highway, false);
    let k = g.slice_cols(x, 0, d);
    let v = g.slice_cols(x, d, 2 * d);
    if !cfg.positional_encoding {
        return (k, v);
    }
    (add_positions(g, k, "pos.key_gain", key_rate(cfg, z)), v)
}

/// Causal audio encoder: `T_c x mel_bins` to queries `T_c x d`.
pub fn audio_encode(g: &mut Graph, cfg: &ModelConfig, coarse: Var) -> Var {
    let mut x = coarse;
    for i in 0..3 {
        x = dense(g, &format!("audio.in{i}"), x);
        if i < 2 {
            x = g.relu(x);
            x = g.dropout(x);
        }
    }
    let q = highway_stack(g, "audio", x, &cfg.audio_highway, true);
    if !cfg.positional_encoding {
        return q;
    }
    add_positions(g, q, "pos.query_gain", 1.0)
}

/// Scaled dot-product attention; returns the context and the alignment.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> (Var, Var) {
    let d = g.shape(k)[1] as f64;
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let a = g.softmax_rows(scores);
    (g.matmul(a, v), a)
}

/// Causal decoder from `[context, Q]` (`T_c x 2d`) to coarse mel in (0, 1).
pub fn decode(g: &mut Graph, cfg: &ModelConfig, context_plus_q: Var) -> Var {
    let x = dense(g, "dec.in", context_plus_q);
    let mut x = highway_stack(g, "dec", x, &cfg.decoder_highway, true);
    for i in 0..cfg.decoder_relu_layers {
        x = g.dropout(x);
        x = dense(g, &format!("dec.relu{i}"), x);
        x = g.relu(x);
    }
    let x = dense(g, "dec.out", x);
    g.sigmoid(x)
}

/// Upsamples coarse mel by four in time: two stride-2 transposed
/// convolutions (kernel 2) with highway blocks in between.
pub fn postnet(g: &mut Graph, cfg: &ModelConfig, coarse: Var) -> Var {
    let pc = cfg.postnet_channels;
    let x = dense(g, "post.in", coarse);
    let mut x = highway_stack(g, "post.stage0", x, &cfg.postnet_highway, false);
    for s in 0..2 {
        let t = g.shape(x)[0];
        let y = dense(g, &format!("post.up{s}"), x);
        // row t of the T x 2C product holds output frames 2t and 2t+1
        let y = g.reshape(y, &[2 * t, pc]);
        x = highway_stack(
            g,
            &format!("post.stage{}", s + 1),
            y,
            &cfg.postnet_highway,
            false,
        );
    }
    let x = g.dropout(x);
    let x = dense(g, "post.out", x);
    g.sigmoid(x)
}

/// Reference encoder: stride-2 2-D convolutions over time x frequency, a
/// GRU over the remaining time axis, and a projection of its final state.
/// Returns a `1 x style_dim` row.
pub fn gst_reference_encode(g: &mut Graph, cfg: &ModelConfig, reference: Var) -> Var {
    let (t, f) = (g.shape(reference)[0], g.shape(reference)[1]);
    let mut x = g.reshape(reference, &[t, f, 1]);
    let (mut h, mut w) = (t, f);
    for (i, &ch) in cfg.ref_encoder_channels.iter().enumerate() {
        let cols = g.im2col_2d(x, 3, 2, 1);
        h = crate::nn::conv_out_len(h, 3, 2, 1);
        w = crate::nn::conv_out_len(w, 3, 2, 1);
        let y = dense(g, &format!("ref.conv{i}"), cols);
        let y = g.relu(y);
        x = g.reshape(y, &[h, w, ch]);
    }
    let c = *cfg
        .ref_encoder_channels
        .last()
        .expect("validated non-empty");
    let seq = g.reshape(x, &[h, w * c]);
    let hd = cfg.ref_rnn_dim;
    let xs = dense(g, "ref.gru.x", seq);
    let mut state = g.constant(Tensor::zeros(&[1, hd]));
    for step in 0..h {
        let xt = g.slice_rows(xs, step, step + 1);
        let hu = dense(g, "ref.gru.h", state);
        let xrz = g.slice_cols(xt, 0, 2 * hd);
        let hrz = g.slice_cols(hu, 0, 2 * hd);
        let rz = g.add(xrz, hrz);
        let rz = g.sigmoid(rz);
        let reset = g.slice_cols(rz, 0, hd);
        let update = g.slice_cols(rz, hd, 2 * hd);
        let xn = g.slice_cols(xt, 2 * hd, 3 * hd);
        let hn = g.slice_cols(hu, 2 * hd, 3 * hd);
        let hn = g.mul(reset, hn);
        let n = g.add(xn, hn);
        let n = g.tanh(n);
        state = g.lerp(update, state, n);
    }
    dense(g, "ref.proj", state)
}

/// Token keys and values from the tanh-squashed bank, each `N x style_dim`.
fn gst_keys_values(g: &mut Graph) -> (Var, Var) {
    let bank = param(g, "gst.tokens");
    let bank = g.tanh(bank);
    let wk = param(g, "gst.wk");
    let wv = param(g, "gst.wv");
    (g.matmul(bank, wk), g.matmul(bank, wv))
}

fn gst_combine(g: &mut Graph, cfg: &ModelConfig, weights: &[Var], values: Var) -> Var {
    let hd = cfg.style_dim / cfg.num_heads;
    let heads: Vec<Var> = weights
        .iter()
        .enumerate()
        .map(|(h, &w)| {
            let vh = g.slice_cols(values, h * hd, (h + 1) * hd);
            g.matmul(w, vh)
        })
        .collect();
    g.concat_cols(&heads)
}

/// Multi-head attention of the reference embedding over the token bank.
/// Returns the `1 x style_dim` style and the `num_heads x num_tokens` weights.
pub fn gst_style_embedding(
    g: &mut Graph,
    cfg: &ModelConfig,
    reference_embedding: Var,
) -> (Var, Var) {
    let hd = cfg.style_dim / cfg.num_heads;
    let wq = param(g, "gst.wq");
    let q = g.matmul(reference_embedding, wq);
    let (keys, values) = gst_keys_values(g);
    let mut weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = g.slice_cols(q, h * hd, (h + 1) * hd);
        let kh = g.slice_cols(keys, h * hd, (h + 1) * hd);
        let s = g.matmul_t(qh, kh);
        let s = g.scale(s, 1.0 / (hd as f64).sqrt());
        weights.push(g.softmax_rows(s));
    }
    let style = gst_combine(g, cfg, &weights, values);
    let all = g.concat_rows(&weights);
    (style, all)
}

/// Style from directly supplied `num_heads x num_tokens` token weights.
pub fn gst_style_from_weights(g: &mut Graph, cfg: &ModelConfig, weights: &Tensor) -> Result<Var> {
    if weights.shape() != [cfg.num_heads, cfg.num_tokens] {
        return Err(Error::ShapeMismatch(format!(
            "token weights must be {}x{}, got {:?}",
            cfg.num_heads,
            cfg.num_tokens,
            weights.shape()
        )));
    }
    for h in 0..cfg.num_heads {
        let row = weights.row(h);
        if row.iter().any(|&w| !(w >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "token weight row {h} is not on the simplex"
            )));
        }
    }
    let (_, values) = gst_keys_values(g);
    let rows: Vec<Var> = (0..cfg.num_heads)
        .map(|h| g.constant(Tensor::new(&[1, cfg.num_tokens], weights.row(h).to_vec())))
        .collect();
    Ok(gst_combine(g, cfg, &rows, values))
}

/// Linear projection of `[K, V, style]` back to `K'` and `V'`.
pub fn fuse_style(g: &mut Graph, cfg: &ModelConfig, k: Var, v: Var, style: Var) -> (Var, Var) {
    let d = cfg.hidden_dim;
    let p = g.shape(k)[0];
    let s = g.broadcast_rows(style, p);
    let x = g.concat_cols(&[k, v, s]);
    let y = dense(g, "fuse", x);
    (g.slice_cols(y, 0, d), g.slice_cols(y, d, 2 * d))
}

/// Where the style embedding comes from.
#[derive(Clone, Copy, Debug)]
pub enum StyleSource<'a> {
    None,
    Reference(&'a Tensor),
    TokenWeights(&'a Tensor),
}

/// Keys and values after optional style fusion, plus the token weights when a
/// reference was encoded.
pub struct TextMemory {
    pub keys: Var,
    pub values: Var,
    pub token_weights: Option<Var>,
}

pub fn encode_text(
    g: &mut Graph,
    cfg: &ModelConfig,
    phonemes: &PhonemeSequence,
    z: f64,
    style: StyleSource,
) -> Result<TextMemory> {
    let x = embed_conditioned(g, cfg, phonemes, z)?;
    let (k, v) = text_encode(g, cfg, x, z);
    if !cfg.use_gst {
        return Ok(TextMemory {
            keys: k,
            values: v,
            token_weights: None,
        });
    }
    let (style, weights) = match style {
        StyleSource::None => return Err(Error::MissingReference),
        StyleSource::Reference(mel) => {
            if mel.rows() == 0 || mel.cols() != cfg.mel_bins {
                return Err(Error::ShapeMismatch(format!(
                    "reference mel must be T x {}, got {:?}",
                    cfg.mel_bins,
                    mel.shape()
                )));
            }
            let r = g.constant(mel.clone());
            let emb = gst_reference_encode(g, cfg, r);
            let (s, w) = gst_style_embedding(g, cfg, emb);
            (s, Some(w))
        }
        StyleSource::TokenWeights(w) => (gst_style_from_weights(g, cfg, w)?, None),
    };
    let (k, v) = fuse_style(g, cfg, k, v, style);
    Ok(TextMemory {
        keys: k,
        values: v,
        token_weights: weights,
    })
}

/// Graph handles of a teacher-forced forward pass.
pub struct T2mVars {
    pub coarse: Var,
    pub mel: Var,
    pub attention: Var,
}

/// Teacher-forced forward pass on an existing graph. `teacher` is the
/// ground-truth coarse mel shifted right by one frame.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    phonemes: &PhonemeSequence,
    z: f64,
    teacher: &Tensor,
    style: StyleSource,
) -> Result<T2mVars> {
    if teacher.rows() == 0 || teacher.cols() != cfg.mel_bins {
        return Err(Error::ShapeMismatch(format!(
            "teacher must be T_c x {}, got {:?}",
            cfg.mel_bins,
            teacher.shape()
        )));
    }
    let mem = encode_text(g, cfg, phonemes, z, style)?;
    let x = g.constant(teacher.clone());
    let q = audio_encode(g, cfg, x);
    let (ctx, a) = attend(g, q, mem.keys, mem.values);
    let r = g.concat_cols(&[ctx, q]);
    let coarse = decode(g, cfg, r);
    let mel = postnet(g, cfg, coarse);
    Ok(T2mVars {
        coarse,
        mel,
        attention: a,
    })
}

/// Outputs of [`forward_t2m`].
#[derive(Clone, Debug, PartialEq)]
pub struct T2mOutput {
    pub coarse: Tensor,
    pub mel: Tensor,
    pub attention: AttentionMatrix,
}

/// Evaluation-mode teacher-forced forward pass. The reference is ignored
/// unless the model uses style tokens.
pub fn forward_t2m(
    phonemes: &PhonemeSequence,
    r: f64,
    stats: &RateStats,
    teacher: &Tensor,
    reference: Option<&Tensor>,
    params: &ModelParams,
) -> Result<T2mOutput> {
    let z = stats.standardize(r)?;
    let mut g = Graph::new(&params.store);
    let style = match reference {
        Some(m) if params.config.use_gst => StyleSource::Reference(m),
        _ => StyleSource::None,
    };
    let v = forward_graph(&mut g, &params.config, phonemes, z, teacher, style)?;
    Ok(T2mOutput {
        coarse: g.value(v.coarse).clone(),
        mel: g.value(v.mel).clone(),
        attention: AttentionMatrix::new(g.value(v.attention).clone()),
    })
}

/// Right-shifts a coarse mel by one frame, inserting a zero first frame.
pub fn teacher_input(coarse: &Tensor) -> Tensor {
    let (t, f) = (coarse.rows(), coarse.cols());
    let mut data = vec![0.0; t * f];
    if t > 1 {
        data[f..].copy_from_slice(&coarse.data()[..(t - 1) * f]);
    }
    Tensor::new(&[t, f], data)
}
