//! Micro causal language model.
//!
//! A small pre-norm transformer with learned positional embeddings. The
//! trainable policy and the frozen reference are both [`ModelParams`]; the
//! reference is a deep copy of the policy taken before the first update.
//!
//! The state at response step `t` is the prompt followed by the first `t`
//! response tokens; the action is the next token. All per-step quantities
//! (log-probabilities, log-ratios, sampling) are expressed in those terms.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{log_softmax_rows, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::sequence::{TokenId, TokenSequence, EOS, RESERVED};

const INIT_STD: f64 = 0.02;
const MASK_VALUE: f64 = -1e9;
const CHECKPOINT_FORMAT: &str = "tidpo-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 64,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < RESERVED {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must be at least {RESERVED}"
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Per-layer weights, generic over storage so the same layout can hold
/// tensors, tape handles or gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_query: T,
    pub b_query: T,
    pub w_key: T,
    pub b_key: T,
    pub w_value: T,
    pub b_value: T,
    pub w_attn_out: T,
    pub b_attn_out: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_mlp_in: T,
    pub b_mlp_in: T,
    pub w_mlp_out: T,
    pub b_mlp_out: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_gain",
    "ln1_bias",
    "w_query",
    "b_query",
    "w_key",
    "b_key",
    "w_value",
    "b_value",
    "w_attn_out",
    "b_attn_out",
    "ln2_gain",
    "ln2_bias",
    "w_mlp_in",
    "b_mlp_in",
    "w_mlp_out",
    "b_mlp_out",
];

impl<T> LayerWeights<T> {
    fn fields(&self) -> [&T; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_query,
            &self.b_query,
            &self.w_key,
            &self.b_key,
            &self.w_value,
            &self.b_value,
            &self.w_attn_out,
            &self.b_attn_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_mlp_in,
            &self.b_mlp_in,
            &self.w_mlp_out,
            &self.b_mlp_out,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_query,
            &mut self.b_query,
            &mut self.w_key,
            &mut self.b_key,
            &mut self.w_value,
            &mut self.b_value,
            &mut self.w_attn_out,
            &mut self.b_attn_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_mlp_in,
            &mut self.b_mlp_in,
            &mut self.w_mlp_out,
            &mut self.b_mlp_out,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            w_query: it.next()?,
            b_query: it.next()?,
            w_key: it.next()?,
            b_key: it.next()?,
            w_value: it.next()?,
            b_value: it.next()?,
            w_attn_out: it.next()?,
            b_attn_out: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w_mlp_in: it.next()?,
            b_mlp_in: it.next()?,
            w_mlp_out: it.next()?,
            b_mlp_out: it.next()?,
        })
    }
}

/// Full model layout in canonical order: token embedding, positional
/// embedding, layers, final norm, output projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    pub w_out: T,
}

impl<T> Weights<T> {
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let mut v: Vec<&T> = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            v.extend(l.fields());
        }
        v.extend([&self.lnf_gain, &self.lnf_bias, &self.w_out]);
        v.into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let mut v: Vec<&mut T> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            v.extend(l.fields_mut());
        }
        v.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.w_out]);
        v.into_iter()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        Weights::from_flat(self.iter().map(&mut f), self.layers.len())
            .expect("layout preserved by map")
    }

    /// Rebuilds a layout from items in canonical order.
    pub fn from_flat(items: impl IntoIterator<Item = T>, n_layers: usize) -> Option<Self> {
        let mut it = items.into_iter();
        let tok_emb = it.next()?;
        let pos_emb = it.next()?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(LayerWeights::from_fields(it.by_ref().take(16))?);
        }
        let w = Weights {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: it.next()?,
            lnf_bias: it.next()?,
            w_out: it.next()?,
        };
        it.next().is_none().then_some(w)
    }

    pub fn names(n_layers: usize) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for l in 0..n_layers {
            names.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{l}.{f}")));
        }
        names.extend(["lnf_gain", "lnf_bias", "w_out"].map(String::from));
        names
    }
}

fn shapes(cfg: &ModelConfig) -> Weights<[usize; 2]> {
    let (d, v, m) = (cfg.d_model, cfg.vocab_size, cfg.mlp_dim());
    let layer = LayerWeights {
        ln1_gain: [1, d],
        ln1_bias: [1, d],
        w_query: [d, d],
        b_query: [1, d],
        w_key: [d, d],
        b_key: [1, d],
        w_value: [d, d],
        b_value: [1, d],
        w_attn_out: [d, d],
        b_attn_out: [1, d],
        ln2_gain: [1, d],
        ln2_bias: [1, d],
        w_mlp_in: [d, m],
        b_mlp_in: [1, m],
        w_mlp_out: [m, d],
        b_mlp_out: [1, d],
    };
    Weights {
        tok_emb: [v, d],
        pos_emb: [cfg.max_seq_len, d],
        layers: vec![layer; cfg.n_layers],
        lnf_gain: [1, d],
        lnf_bias: [1, d],
        w_out: [d, v],
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Gaussian,
    Zero,
    One,
}

fn init_kinds(n_layers: usize) -> Vec<InitKind> {
    Weights::<()>::names(n_layers)
        .iter()
        .map(|n| {
            let field = n.rsplit('.').next().unwrap_or(n);
            if field.ends_with("gain") {
                InitKind::One
            } else if field.starts_with("b_") || field.ends_with("bias") {
                InitKind::Zero
            } else {
                InitKind::Gaussian
            }
        })
        .collect()
}

/// Which tape role model weights take in a recorded forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Yes,
    No,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

impl ModelParams {
    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit norm
    /// gains, all drawn from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        Self::init_with_std(config, INIT_STD)
    }

    pub fn init_with_std(config: ModelConfig, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidConfig(format!("init std {std}: {e}")))?;
        let kinds = init_kinds(config.n_layers);
        let layout = shapes(&config);
        let tensors = layout.iter().zip(kinds).map(|(&[r, c], kind)| {
            let data = match kind {
                InitKind::Gaussian => (0..r * c).map(|_| normal.sample(&mut rng)).collect(),
                InitKind::Zero => vec![0.0; r * c],
                InitKind::One => vec![1.0; r * c],
            };
            Tensor::new(r, c, data).expect("shape from layout")
        });
        let weights = Weights::from_flat(tensors.collect::<Vec<_>>(), config.n_layers)
            .expect("layout from shapes");
        Ok(Self { config, weights })
    }

    /// All-zero parameters, including norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            weights: shapes(&config).map(|&[r, c]| Tensor::zeros(r, c)),
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.weights.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut offset = 0;
        for t in self.weights.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// SHA-256 over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.weights.iter() {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Policy and reference must share an architecture; the init seed may differ.
    pub fn ensure_same_config(&self, other: &ModelParams) -> Result<()> {
        let (a, b) = (&self.config, &other.config);
        let same = ModelConfig { seed: 0, ..*a } == ModelConfig { seed: 0, ..*b };
        if same {
            Ok(())
        } else {
            Err(Error::ConfigMismatch)
        }
    }

    /// Puts every weight on `tape`, as leaves when trainable.
    pub fn record(&self, tape: &mut Tape, trainable: Trainable) -> Weights<Var> {
        self.weights.map(|t| match trainable {
            Trainable::Yes => tape.leaf(t.clone()),
            Trainable::No => tape.constant(t.clone()),
        })
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            })
        } else {
            Ok(())
        }
    }

    fn token_indices(&self, tokens: &[TokenId]) -> Result<Vec<usize>> {
        TokenSequence::new(tokens.to_vec()).check_vocab(self.config.vocab_size)?;
        self.check_len(tokens.len())?;
        Ok(tokens.iter().map(|&t| t as usize).collect())
    }

    /// Records the forward pass over `tokens`, returning `n x vocab` logits.
    pub fn record_logits(&self, tape: &mut Tape, w: &Weights<Var>, tokens: &[TokenId]) -> Result<Var> {
        let idx = self.token_indices(tokens)?;
        let emb = tape.gather_rows(w.tok_emb, &idx)?;
        self.record_from_embeddings(tape, w, emb)
    }

    /// Forward pass starting from an `n x d_model` matrix of token embeddings.
    pub fn record_from_embeddings(&self, tape: &mut Tape, w: &Weights<Var>, emb: Var) -> Result<Var> {
        let cfg = &self.config;
        let n = tape.value(emb).rows();
        self.check_len(n)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(w.pos_emb, &positions)?;
        let mut h = tape.add(emb, pos)?;
        let mask = tape.constant(causal_mask(n));
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        for layer in &w.layers {
            let a = affine_norm(tape, h, layer.ln1_gain, layer.ln1_bias)?;
            let q = linear(tape, a, layer.w_query, layer.b_query)?;
            let k = linear(tape, a, layer.w_key, layer.b_key)?;
            let v = linear(tape, a, layer.w_value, layer.b_value)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let (s, e) = (head * dh, (head + 1) * dh);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt)?;
                let scores = tape.add(scores, mask)?;
                let attn = tape.softmax_rows(scores)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let o = linear(tape, cat, layer.w_attn_out, layer.b_attn_out)?;
            h = tape.add(h, o)?;

            let m = affine_norm(tape, h, layer.ln2_gain, layer.ln2_bias)?;
            let m = linear(tape, m, layer.w_mlp_in, layer.b_mlp_in)?;
            let m = tape.relu(m)?;
            let m = linear(tape, m, layer.w_mlp_out, layer.b_mlp_out)?;
            h = tape.add(h, m)?;
        }
        let f = affine_norm(tape, h, w.lnf_gain, w.lnf_bias)?;
        Ok(tape.matmul(f, w.w_out)?)
    }

    /// Logits for every position of `prompt ⊕ prefix`.
    ///
    /// With a tape the pass is recorded with the token embeddings as a leaf
    /// (weights as constants) and the embedding handle is returned alongside.
    pub fn logits(&self, state: &SequenceState, tape: Option<&mut Tape>) -> Result<(Tensor, Option<Var>)> {
        let tokens = state.tokens();
        match tape {
            None => Ok((self.logits_of(&tokens)?, None)),
            Some(tape) => {
                let (logits, emb) = self.record_with_embedding_leaf(tape, &tokens)?;
                Ok((tape.value(logits).clone(), Some(emb)))
            }
        }
    }

    /// Records a forward pass whose only leaf is the `n x d_model` matrix of
    /// looked-up token embeddings. Returns `(logits, embeddings)`.
    pub fn record_with_embedding_leaf(&self, tape: &mut Tape, tokens: &[TokenId]) -> Result<(Var, Var)> {
        let idx = self.token_indices(tokens)?;
        let table = &self.weights.tok_emb;
        let rows: Vec<f64> = idx.iter().flat_map(|&i| table.row_slice(i).to_vec()).collect();
        let emb = tape.leaf(Tensor::new(idx.len(), self.config.d_model, rows)?);
        let w = self.record(tape, Trainable::No);
        let logits = self.record_from_embeddings(tape, &w, emb)?;
        Ok((logits, emb))
    }

    /// Logits over `tokens` without keeping a tape around.
    pub fn logits_of(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let w = self.record(&mut tape, Trainable::No);
        let out = self.record_logits(&mut tape, &w, tokens)?;
        Ok(tape.value(out).clone())
    }

    /// `log π(token | state)`.
    pub fn token_logprob(&self, state: &SequenceState, token: TokenId) -> Result<f64> {
        let dist = self.next_token_logprobs(state)?;
        dist.get(token as usize).copied().ok_or(Error::TokenOutOfRange {
            token,
            position: state.len(),
            vocab: self.config.vocab_size,
        })
    }

    /// Log-probabilities of every vocabulary entry as the next token.
    pub fn next_token_logprobs(&self, state: &SequenceState) -> Result<Vec<f64>> {
        let tokens = state.tokens();
        if tokens.is_empty() {
            return Err(Error::SequenceTooShort { len: 0, min: 1 });
        }
        let logits = self.logits_of(&tokens)?;
        let last = Tensor::row(logits.row_slice(logits.rows() - 1).to_vec());
        Ok(log_softmax_rows(&last).into_data())
    }

    /// `log π(y_t | x, y_<t)` for every response position, from one forward
    /// pass over `prompt ⊕ response`.
    pub fn response_logprobs(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        check_prompt(prompt)?;
        let tokens = concat(prompt, response);
        let logits = self.logits_of(&tokens)?;
        let lp = log_softmax_rows(&logits);
        let p = prompt.len();
        Ok(response
            .iter()
            .enumerate()
            .map(|(t, &tok)| lp.get(p + t - 1, tok as usize))
            .collect())
    }

    /// Records per-token response log-probabilities as a `1 x T` vector.
    pub fn record_response_logprobs(
        &self,
        tape: &mut Tape,
        w: &Weights<Var>,
        prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<Var> {
        check_prompt(prompt)?;
        let tokens = concat(prompt, response);
        let logits = self.record_logits(tape, w, &tokens)?;
        let lp = tape.log_softmax_rows(logits)?;
        let p = prompt.len();
        let idx: Vec<(usize, usize)> = response
            .iter()
            .enumerate()
            .map(|(t, &tok)| (p + t - 1, tok as usize))
            .collect();
        Ok(tape.pick(lp, &idx)?)
    }

    /// `log π_θ(token | state) − log π_ref(token | state)`.
    pub fn log_ratio(&self, reference: &ModelParams, state: &SequenceState, token: TokenId) -> Result<f64> {
        self.ensure_same_config(reference)?;
        Ok(self.token_logprob(state, token)? - reference.token_logprob(state, token)?)
    }

    /// Per-position log-ratios of `response` against `reference`.
    pub fn response_log_ratios(
        &self,
        reference: &ModelParams,
        prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<Vec<f64>> {
        self.ensure_same_config(reference)?;
        let a = self.response_logprobs(prompt, response)?;
        let b = reference.response_logprobs(prompt, response)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
    }

    /// Autoregressive sampling from `state`, stopping after `EOS` (which is
    /// kept) or `max_new` tokens. `temperature == 0` selects greedy decoding.
    pub fn sample(
        &self,
        state: &SequenceState,
        max_new: usize,
        temperature: f64,
        rng_seed: u64,
    ) -> Result<TokenSequence> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be finite and non-negative, got {temperature}"
            )));
        }
        if max_new == 0 {
            return Err(Error::InvalidArgument("max_new must be at least 1".into()));
        }
        self.check_len(state.len() + max_new)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut ctx = state.tokens();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let logits = self.logits_of(&ctx)?;
            let last = logits.row_slice(logits.rows() - 1);
            let idx = if temperature == 0.0 {
                argmax(last)
            } else {
                let scaled: Vec<f64> = last.iter().map(|v| v / temperature).collect();
                let logprobs = log_softmax_rows(&Tensor::row(scaled)).into_data();
                draw(&logprobs, rng.random::<f64>())
            };
            let tok = idx as TokenId;
            out.push(tok);
            ctx.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok(TokenSequence::new(out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            tensors: Weights::<()>::names(self.config.n_layers)
                .into_iter()
                .zip(self.weights.iter())
                .map(|(name, t)| NamedTensor {
                    name,
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&file).map_err(|e| Error::CheckpointIo(e.to_string()))?;
        write_atomic(path, &json).map_err(|e| Error::CheckpointIo(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::CheckpointIo(format!("{}: {e}", path.display())))?;
        let file: CheckpointFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::CheckpointIo(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointIo(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let expected = shapes(&file.config);
        let names = Weights::<()>::names(file.config.n_layers);
        if file.tensors.len() != names.len() {
            return Err(Error::CheckpointIo(format!(
                "expected {} tensors, found {}",
                names.len(),
                file.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for ((nt, name), &[r, c]) in file.tensors.into_iter().zip(&names).zip(expected.iter()) {
            if &nt.name != name || nt.rows != r || nt.cols != c {
                return Err(Error::CheckpointIo(format!(
                    "tensor {} ({}x{}) does not match expected {} ({}x{})",
                    nt.name, nt.rows, nt.cols, name, r, c
                )));
            }
            tensors.push(Tensor::new(r, c, nt.data)?);
        }
        Ok(Self {
            config: file.config,
            weights: Weights::from_flat(tensors, file.config.n_layers).expect("validated layout"),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// `s_t = [x, y_<t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceState {
    pub prompt: TokenSequence,
    pub prefix: TokenSequence,
}

impl SequenceState {
    pub fn new(prompt: impl Into<TokenSequence>, prefix: impl Into<TokenSequence>) -> Self {
        Self {
            prompt: prompt.into(),
            prefix: prefix.into(),
        }
    }

    pub fn prompt_only(prompt: impl Into<TokenSequence>) -> Self {
        Self::new(prompt, TokenSequence::default())
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.prefix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        concat(&self.prompt, &self.prefix)
    }
}

/// Anything that yields next-token distributions along a response.
pub trait NextTokenModel {
    /// Log-probability vectors for each response step `t`, conditioned on
    /// `prompt ⊕ response[..t]`.
    fn step_logprobs(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<Vec<f64>>>;
}

impl NextTokenModel for ModelParams {
    fn step_logprobs(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        check_prompt(prompt)?;
        let tokens = concat(prompt, response);
        let lp = log_softmax_rows(&self.logits_of(&tokens)?);
        let p = prompt.len();
        Ok((0..response.len()).map(|t| lp.row_slice(p + t - 1).to_vec()).collect())
    }
}

fn check_prompt(prompt: &[TokenId]) -> Result<()> {
    if prompt.is_empty() {
        Err(Error::SequenceTooShort { len: 0, min: 1 })
    } else {
        Ok(())
    }
}

fn concat(a: &[TokenId], b: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = MASK_VALUE;
        }
    }
    m
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = tape.layernorm_rows(x)?;
    let s = tape.mul(n, gain)?;
    Ok(tape.add(s, bias)?)
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from log-probabilities.
fn draw(logprobs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logprobs.len() - 1
}
