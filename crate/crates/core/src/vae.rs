//! Recurrent sequence VAE over task token sequences.
//!
//! Encoder: embedding → two highway stages → bidirectional recurrent layer →
//! linear heads for the posterior mean (squashed to `±mean_scale`) and
//! log-variance. Decoder: the latent sets the initial hidden state and is
//! fed at every step of a recurrent layer whose outputs are projected to
//! per-position token logits. The decoder is the map from latent vectors to
//! tasks used by the latent teacher.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::{
    adam_next, argmax, checkpoint, clip_global_norm, AdamConfig, CellKind, CellState, Dense, Embedding, Graph, Highway,
    ParamTree, Params, Recurrent, RecurrentCell, Var,
};
use crate::task::{canonicalize, detokenize, tokenize, TaskSpaceConfig, TaskSpec, PAD};

pub const ENCODER_PREFIX: &str = "enc/";
pub const DECODER_PREFIX: &str = "dec/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub recon_weight: f64,
    pub mean_scale: f64,
    pub dropout: f64,
    pub lr: f64,
    /// Anneal the learning rate to zero along a half cosine over `steps`.
    pub cosine_decay: bool,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub cell: CellKind,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VaeConfig {
    /// Laptop-scale defaults.
    pub fn desk() -> Self {
        Self {
            latent_dim: 8,
            embedding_dim: 32,
            encoder_hidden: 64,
            decoder_hidden: 64,
            recon_weight: 79.0,
            mean_scale: 4.0,
            dropout: 0.1,
            lr: 1e-2,
            cosine_decay: true,
            max_grad_norm: 1000.0,
            adam_eps: 1e-8,
            batch: 32,
            steps: 20_000,
            eval_every: 1_000,
            cell: CellKind::Lstm,
        }
    }

    /// Full-size settings.
    pub fn full() -> Self {
        Self {
            latent_dim: 64,
            embedding_dim: 300,
            encoder_hidden: 600,
            decoder_hidden: 800,
            recon_weight: 79.0,
            mean_scale: 4.0,
            dropout: 0.3,
            lr: 5e-5,
            cosine_decay: false,
            max_grad_norm: 0.0,
            adam_eps: 1e-8,
            batch: 32,
            steps: 1_000_000,
            eval_every: 10_000,
            cell: CellKind::Lstm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_dim,
            self.embedding_dim,
            self.encoder_hidden,
            self.decoder_hidden,
            self.batch,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("VAE dimensions and batch must be positive".into()));
        }
        if self.recon_weight <= 0.0 || self.mean_scale <= 0.0 {
            return Err(Error::Config("recon_weight and mean_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return Err(Error::Config("max_grad_norm must be finite and non-negative".into()));
        }
        if self.lr <= 0.0 || self.eval_every == 0 {
            return Err(Error::Config("lr and eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Reconstruction and KL terms of the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// Masked cross-entropy, nats per counted token.
    pub recon_ce: f64,
    /// KL to the standard normal prior, nats per sequence.
    pub kl: f64,
    /// `recon_weight · recon_ce + kl`.
    pub total: f64,
}

/// Layers of the decoder half; binds to either the full VAE tree or a
/// decoder-only subtree.
#[derive(Clone, Debug)]
pub struct DecoderLayers {
    init: Dense,
    cell: RecurrentCell,
    out: Dense,
    pub latent_dim: usize,
    pub vocab: usize,
}

impl DecoderLayers {
    pub fn bind(tree: &ParamTree) -> Result<Self> {
        let init = Dense::bind(tree, "dec/init")?;
        let cell = RecurrentCell::bind(tree, "dec/rnn")?;
        let out = Dense::bind(tree, "dec/out")?;
        Ok(Self {
            latent_dim: init.fan_in,
            vocab: out.fan_out,
            init,
            cell,
            out,
        })
    }

    /// Stacked logits for all positions: row `t · batch + b` holds position
    /// `t` of sample `b`.
    pub fn logits(&self, g: &mut Graph, p: Params<'_>, z: Var, max_len: usize) -> Result<Var> {
        if g.cols(z) != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent has {} columns, decoder expects {}",
                g.cols(z),
                self.latent_dim
            )));
        }
        let h0 = self.init.forward(g, p, z)?;
        let h0 = g.tanh(h0);
        let c0 = match self.cell.kind {
            CellKind::Lstm => Some(g.zeros(g.rows(z), self.cell.hidden)),
            CellKind::Gru => None,
        };
        let mut state = CellState { h: h0, c: c0 };
        let mut hs = Vec::with_capacity(max_len);
        for _ in 0..max_len {
            state = self.cell.step(g, p, z, state)?;
            hs.push(state.h);
        }
        let stacked = g.concat_rows(&hs);
        self.out.forward(g, p, stacked)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayers {
    embed: Embedding,
    highway: [Highway; 2],
    rnn: Recurrent,
    mu: Dense,
    logvar: Dense,
}

impl EncoderLayers {
    fn bind(tree: &ParamTree) -> Result<Self> {
        Ok(Self {
            embed: Embedding::bind(tree, "enc/embed")?,
            highway: [Highway::bind(tree, "enc/hw0")?, Highway::bind(tree, "enc/hw1")?],
            rnn: Recurrent::bind(tree, "enc/rnn")?,
            mu: Dense::bind(tree, "enc/mu")?,
            logvar: Dense::bind(tree, "enc/logvar")?,
        })
    }
}

/// The full VAE: configuration, parameters and bound layers.
#[derive(Clone, Debug)]
pub struct TaskVae {
    pub cfg: VaeConfig,
    pub space: TaskSpaceConfig,
    pub params: ParamTree,
    enc: EncoderLayers,
    dec: DecoderLayers,
}

/// Posterior parameters for a batch, row-major `batch × latent_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub dim: usize,
}

impl TaskVae {
    pub fn new<R: Rng + ?Sized>(cfg: VaeConfig, space: TaskSpaceConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        space.validate()?;
        let v = space.vocab();
        let e = cfg.embedding_dim;
        let mut t = ParamTree::new();
        Embedding::new(&mut t, "enc/embed", v, e, rng)?;
        Highway::new(&mut t, "enc/hw0", e, rng)?;
        Highway::new(&mut t, "enc/hw1", e, rng)?;
        let rnn = Recurrent::new(&mut t, "enc/rnn", cfg.cell, e, cfg.encoder_hidden, true, rng)?;
        Dense::new(&mut t, "enc/mu", rnn.output_dim(), cfg.latent_dim, rng)?;
        Dense::new(&mut t, "enc/logvar", rnn.output_dim(), cfg.latent_dim, rng)?;
        Dense::new(&mut t, "dec/init", cfg.latent_dim, cfg.decoder_hidden, rng)?;
        RecurrentCell::new(&mut t, "dec/rnn", cfg.cell, cfg.latent_dim, cfg.decoder_hidden, rng)?;
        Dense::new(&mut t, "dec/out", cfg.decoder_hidden, v, rng)?;
        Self::from_params(cfg, space, t)
    }

    pub fn from_params(cfg: VaeConfig, space: TaskSpaceConfig, params: ParamTree) -> Result<Self> {
        let enc = EncoderLayers::bind(&params)?;
        let dec = DecoderLayers::bind(&params)?;
        if enc.embed.vocab != space.vocab() || dec.vocab != space.vocab() {
            return Err(Error::Config(format!(
                "VAE vocabulary {} does not match task space vocabulary {}",
                dec.vocab,
                space.vocab()
            )));
        }
        if dec.latent_dim != cfg.latent_dim {
            return Err(Error::Config("VAE latent size does not match its config".into()));
        }
        Ok(Self {
            cfg,
            space,
            params,
            enc,
            dec,
        })
    }

    pub fn max_len(&self) -> usize {
        self.space.max_len()
    }

    pub fn decoder_layers(&self) -> &DecoderLayers {
        &self.dec
    }

    /// Decoder parameters as a standalone tree.
    pub fn decoder_params(&self) -> ParamTree {
        self.params.subtree(DECODER_PREFIX)
    }

    pub fn tokenize_batch(&self, tasks: &[TaskSpec]) -> Result<Vec<Vec<usize>>> {
        tasks.iter().map(|t| tokenize(t, self.max_len())).collect()
    }

    /// Records the encoder on `g`; returns `(mu, logvar)` nodes.
    ///
    /// `dropout_mask`, when given, multiplies the highway output and must
    /// hold `max_len · batch · embedding_dim` entries.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        p: Params<'_>,
        tokens: &[Vec<usize>],
        dropout_mask: Option<&[f64]>,
    ) -> Result<(Var, Var)> {
        let batch = tokens.len();
        let len = self.max_len();
        if batch == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if let Some(bad) = tokens.iter().find(|t| t.len() != len) {
            return Err(Error::Input(format!(
                "token sequence of length {}, expected {len}",
                bad.len()
            )));
        }
        // time-major rows: position t of sample b at row t·batch + b
        let ids: Vec<usize> = (0..len).flat_map(|t| tokens.iter().map(move |s| s[t])).collect();
        let mut x = self.enc.embed.forward(g, p, &ids)?;
        for hw in &self.enc.highway {
            x = hw.forward(g, p, x)?;
        }
        if let Some(mask) = dropout_mask {
            let m = g.constant(len * batch, self.cfg.embedding_dim, mask.to_vec());
            x = g.mul(x, m);
        }
        let steps: Vec<Var> = (0..len).map(|t| g.slice_rows(x, t * batch, batch)).collect();
        let out = self.enc.rnn.forward(g, p, &steps)?;
        let raw_mu = self.enc.mu.forward(g, p, out.last)?;
        let squashed = g.tanh(raw_mu);
        let mu = g.scale(squashed, self.cfg.mean_scale);
        let logvar = self.enc.logvar.forward(g, p, out.last)?;
        Ok((mu, logvar))
    }

    /// Posterior mean and log-variance (evaluation mode, no dropout).
    pub fn encode(&self, tokens: &[Vec<usize>]) -> Result<Posterior> {
        let mut g = Graph::new();
        let (mu, logvar) = self.encode_graph(&mut g, Params::new(&self.params), tokens, None)?;
        g.check_finite()?;
        Ok(Posterior {
            mu: g.value(mu).to_vec(),
            logvar: g.value(logvar).to_vec(),
            dim: self.cfg.latent_dim,
        })
    }

    /// Per-position logits for a batch of latents (`batch × latent_dim`,
    /// row-major). Returned time-major: `max_len` blocks of `batch × vocab`.
    pub fn decode_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        decode_logits_with(&self.dec, &self.params, z, self.max_len())
    }

    pub fn greedy_decode(&self, z: &[f64]) -> Result<TaskSpec> {
        greedy_decode_with(&self.dec, &self.params, z, self.max_len())
    }

    /// Loss on an explicit batch, with optional dropout and reparameterized
    /// sampling. Records everything on `g` and returns the total-loss node.
    pub fn elbo_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: Params<'_>,
        tokens: &[Vec<usize>],
        rng: Option<&mut R>,
        train: bool,
    ) -> Result<(Var, Var, Var)> {
        let batch = tokens.len();
        let mut rng = rng;
        let mask = match (&mut rng, train && self.cfg.dropout > 0.0) {
            (Some(r), true) => {
                let keep = 1.0 - self.cfg.dropout;
                let n = self.max_len() * batch * self.cfg.embedding_dim;
                Some(
                    (0..n)
                        .map(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect::<Vec<_>>(),
                )
            }
            _ => None,
        };
        let (mu, logvar) = self.encode_graph(g, p, tokens, mask.as_deref())?;
        let z = match rng {
            Some(r) => {
                let eps: Vec<f64> = (0..batch * self.cfg.latent_dim)
                    .map(|_| r.sample(StandardNormal))
                    .collect();
                let eps = g.constant(batch, self.cfg.latent_dim, eps);
                let half = g.scale(logvar, 0.5);
                let std = g.exp(half);
                let noise = g.mul(std, eps);
                g.add(mu, noise)
            }
            None => mu,
        };
        let logits = self.dec.logits(g, p, z, self.max_len())?;
        elbo_from_logits(g, logits, tokens, mu, logvar, self.cfg.recon_weight)
    }

    /// Batch ELBO breakdown with sampled latents (training-mode dropout off).
    pub fn elbo_loss<R: Rng + ?Sized>(&self, tasks: &[TaskSpec], rng: &mut R) -> Result<ElboBreakdown> {
        let tokens = self.tokenize_batch(tasks)?;
        let mut g = Graph::new();
        let (total, recon, kl) = self.elbo_graph(&mut g, Params::new(&self.params), &tokens, Some(rng), false)?;
        g.check_finite()?;
        Ok(ElboBreakdown {
            recon_ce: g.scalar(recon),
            kl: g.scalar(kl),
            total: g.scalar(total),
        })
    }

    pub fn header(&self) -> serde_json::Value {
        json!({"kind": "task-vae", "vae": self.cfg, "taskspace": self.space})
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, &self.header())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, header) = checkpoint::load(path)?;
        if header["kind"] != "task-vae" {
            return Err(Error::Load(format!("{} is not a VAE checkpoint", path.display())));
        }
        let cfg: VaeConfig =
            serde_json::from_value(header["vae"].clone()).map_err(|e| Error::Load(format!("VAE header: {e}")))?;
        let space: TaskSpaceConfig =
            serde_json::from_value(header["taskspace"].clone()).map_err(|e| Error::Load(format!("VAE header: {e}")))?;
        Self::from_params(cfg, space, params)
    }
}

/// Counted positions of a padded target: all non-PAD tokens plus the first
/// PAD, which marks the end of the sequence. Later PAD positions are ignored.
pub fn loss_mask(tokens: &[usize]) -> Vec<bool> {
    let len = tokens.iter().position(|&t| t == PAD).unwrap_or(tokens.len());
    (0..tokens.len()).map(|t| t <= len).collect()
}

/// Loss terms from time-major stacked logits (`max_len · batch × vocab`).
/// Returns `(total, recon_ce, kl)` nodes.
pub fn elbo_from_logits(
    g: &mut Graph,
    logits: Var,
    tokens: &[Vec<usize>],
    mu: Var,
    logvar: Var,
    recon_weight: f64,
) -> Result<(Var, Var, Var)> {
    let batch = tokens.len();
    let len = tokens.first().map_or(0, |t| t.len());
    if g.rows(logits) != batch * len {
        return Err(Error::Shape(format!(
            "logits have {} rows, expected {}",
            g.rows(logits),
            batch * len
        )));
    }
    let masks: Vec<Vec<bool>> = tokens.iter().map(|t| loss_mask(t)).collect();
    let mut targets = Vec::with_capacity(batch * len);
    let mut weights = Vec::with_capacity(batch * len);
    for t in 0..len {
        for b in 0..batch {
            targets.push(tokens[b][t]);
            weights.push(if masks[b][t] { 1.0 } else { 0.0 });
        }
    }
    let counted: f64 = weights.iter().sum();
    let lsm = g.log_softmax(logits);
    let picked = g.pick(lsm, &targets);
    let w = g.constant(batch * len, 1, weights);
    let masked = g.mul(picked, w);
    let total_ll = g.sum(masked);
    let recon = g.scale(total_ll, -1.0 / counted);

    let kl_rows = kl_graph(g, mu, logvar);
    let kl_sum = g.sum(kl_rows);
    let kl = g.scale(kl_sum, 1.0 / batch as f64);
    let weighted = g.scale(recon, recon_weight);
    let total = g.add(weighted, kl);
    Ok((total, recon, kl))
}

/// Per-row KL divergence `−½ Σ (1 + lv − μ² − e^lv)` as a `batch × 1` node.
pub fn kl_graph(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    let mu2 = g.square(mu);
    let ev = g.exp(logvar);
    let a = g.sub(logvar, mu2);
    let b = g.sub(a, ev);
    let c = g.shift(b, 1.0);
    let s = g.row_sum(c);
    g.scale(s, -0.5)
}

/// Closed-form KL of `N(mu, exp(logvar))` to the standard normal.
pub fn kl_to_prior(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape("mu and logvar lengths differ".into()));
    }
    Ok(-0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
            .sum::<f64>())
}

/// `z = mu + exp(logvar / 2) ⊙ ε` with `ε ~ N(0, I)`.
pub fn reparameterize<R: Rng + ?Sized>(mu: &[f64], logvar: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape("mu and logvar lengths differ".into()));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| {
            let e: f64 = rng.sample(StandardNormal);
            m + (0.5 * lv).exp() * e
        })
        .collect())
}

pub fn decode_logits_with(dec: &DecoderLayers, params: &ParamTree, z: &[f64], max_len: usize) -> Result<Vec<f64>> {
    if z.is_empty() || !z.len().is_multiple_of(dec.latent_dim) {
        return Err(Error::Shape(format!(
            "latent buffer of {} values for dimension {}",
            z.len(),
            dec.latent_dim
        )));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.len() / dec.latent_dim, dec.latent_dim, z.to_vec());
    let logits = dec.logits(&mut g, Params::new(params), zv, max_len)?;
    g.check_finite()?;
    Ok(g.value(logits).to_vec())
}

/// Turns decoded tokens into a task: cut at the first PAD; fewer than two
/// remaining tokens fall back to goal 1, agent 2.
pub fn repair_tokens(tokens: &[usize]) -> TaskSpec {
    detokenize(tokens).unwrap_or_else(|_| TaskSpec::new(vec![], 1, 2))
}

pub fn greedy_decode_with(dec: &DecoderLayers, params: &ParamTree, z: &[f64], max_len: usize) -> Result<TaskSpec> {
    if z.len() != dec.latent_dim {
        return Err(Error::Shape(format!(
            "latent of length {}, expected {}",
            z.len(),
            dec.latent_dim
        )));
    }
    let logits = decode_logits_with(dec, params, z, max_len)?;
    let toks: Vec<usize> = logits.chunks(dec.vocab).map(argmax).collect();
    Ok(repair_tokens(&toks))
}

/// Greedy decode for many latents at once; one decoded task per row.
pub fn greedy_decode_batch(
    dec: &DecoderLayers,
    params: &ParamTree,
    z: &[f64],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let batch = z.len() / dec.latent_dim;
    let logits = decode_logits_with(dec, params, z, max_len)?;
    let mut out = vec![Vec::with_capacity(max_len); batch];
    for (row, chunk) in logits.chunks(dec.vocab).enumerate() {
        out[row % batch].push(argmax(chunk));
    }
    Ok(out)
}

/// Samples every position independently from the decoder's softmax.
/// Returns the tokens and the log-probability of the counted positions
/// (through the first PAD).
pub fn sample_decode<R: Rng + ?Sized>(
    dec: &DecoderLayers,
    params: &ParamTree,
    z: &[f64],
    max_len: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, f64)> {
    let logits = decode_logits_with(dec, params, z, max_len)?;
    let probs = crate::nn::softmax_rows(&logits, dec.vocab);
    let mut tokens = Vec::with_capacity(max_len);
    for row in probs.chunks(dec.vocab) {
        tokens.push(crate::ppo::sample_categorical(row, rng));
    }
    let mask = loss_mask(&tokens);
    let logp = probs
        .chunks(dec.vocab)
        .zip(&tokens)
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|((row, &t), _)| row[t].ln())
        .sum();
    Ok((tokens, logp))
}

/// Log-probability (`batch × 1`) of fixed token sequences under the
/// decoder at latents `z`, counted through the first PAD.
pub fn decoder_log_prob(
    dec: &DecoderLayers,
    g: &mut Graph,
    p: Params<'_>,
    z: Var,
    tokens: &[Vec<usize>],
    max_len: usize,
) -> Result<Var> {
    let batch = tokens.len();
    let logits = dec.logits(g, p, z, max_len)?;
    let lsm = g.log_softmax(logits);
    let mut targets = Vec::with_capacity(batch * max_len);
    let mut weights = Vec::with_capacity(batch * max_len);
    let masks: Vec<Vec<bool>> = tokens.iter().map(|t| loss_mask(t)).collect();
    for t in 0..max_len {
        for b in 0..batch {
            targets.push(tokens[b][t]);
            weights.push(if masks[b][t] { 1.0 } else { 0.0 });
        }
    }
    let picked = g.pick(lsm, &targets);
    let w = g.constant(batch * max_len, 1, weights);
    let masked = g.mul(picked, w);
    // time-major column → batch × max_len with one row per position, then sum
    let by_pos = g.reshape(masked, max_len, batch);
    let ones = g.constant(1, max_len, vec![1.0; max_len]);
    let summed = g.matmul(ones, by_pos);
    Ok(g.reshape(summed, batch, 1))
}

/// One row of the VAE training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeMetrics {
    pub step: usize,
    pub train_total: f64,
    pub train_recon_ce: f64,
    pub train_kl: f64,
    pub heldout_recon_ce: f64,
    pub heldout_kl: f64,
    pub heldout_token_acc: f64,
    pub heldout_exact: f64,
}

impl VaeMetrics {
    pub const CSV_HEADER: &'static str =
        "step,train_total,train_recon_ce,train_kl,heldout_recon_ce,heldout_kl,heldout_token_acc,heldout_exact";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step,
            self.train_total,
            self.train_recon_ce,
            self.train_kl,
            self.heldout_recon_ce,
            self.heldout_kl,
            self.heldout_token_acc,
            self.heldout_exact
        )
    }
}

/// Reconstruction quality of a set of tasks through the posterior mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconStats {
    pub token_acc: f64,
    pub exact: f64,
    pub recon_ce: f64,
    pub kl: f64,
    pub valid: f64,
}

/// Encodes each task (canonicalized), decodes the posterior mean greedily
/// and compares on the counted positions.
pub fn reconstruction_stats(vae: &TaskVae, tasks: &[TaskSpec]) -> Result<ReconStats> {
    if tasks.is_empty() {
        return Err(Error::Input("no tasks to evaluate".into()));
    }
    let mut hits = 0usize;
    let mut counted = 0usize;
    let mut exact = 0usize;
    let mut valid = 0usize;
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;
    let len = vae.max_len();
    for chunk in tasks.chunks(256) {
        let canon: Vec<TaskSpec> = chunk.iter().map(canonicalize).collect();
        let tokens = vae.tokenize_batch(&canon)?;
        let mut g = Graph::new();
        let p = Params::new(&vae.params);
        let (mu, logvar) = vae.encode_graph(&mut g, p, &tokens, None)?;
        let logits = vae.dec.logits(&mut g, p, mu, len)?;
        let (_, recon, _) = elbo_from_logits(&mut g, logits, &tokens, mu, logvar, vae.cfg.recon_weight)?;
        let kl_rows = kl_graph(&mut g, mu, logvar);
        g.check_finite()?;
        let batch = tokens.len();
        let n_counted: usize = tokens.iter().map(|t| loss_mask(t).iter().filter(|&&m| m).count()).sum();
        ce_sum += g.scalar(recon) * n_counted as f64;
        kl_sum += g.value(kl_rows).iter().sum::<f64>();
        let lv = g.value(logits);
        let vocab = vae.dec.vocab;
        for (b, target) in tokens.iter().enumerate() {
            let pred: Vec<usize> = (0..len)
                .map(|t| argmax(&lv[(t * batch + b) * vocab..(t * batch + b + 1) * vocab]))
                .collect();
            let mask = loss_mask(target);
            let mut all = true;
            for t in 0..len {
                if mask[t] {
                    counted += 1;
                    if pred[t] == target[t] {
                        hits += 1;
                    } else {
                        all = false;
                    }
                }
            }
            if all {
                exact += 1;
            }
            let task = repair_tokens(&pred);
            if task.validate(&vae.space).is_ok() {
                valid += 1;
            }
        }
    }
    let n = tasks.len() as f64;
    Ok(ReconStats {
        token_acc: hits as f64 / counted as f64,
        exact: exact as f64 / n,
        recon_ce: ce_sum / counted as f64,
        kl: kl_sum / n,
        valid: valid as f64 / n,
    })
}

/// Splits a corpus into training lines and the held-out tail (last 2%,
/// at least one line).
pub fn split_heldout(tasks: &[TaskSpec]) -> (&[TaskSpec], &[TaskSpec]) {
    let held = (tasks.len() / 50).max(1).min(tasks.len().saturating_sub(1));
    tasks.split_at(tasks.len() - held)
}

/// Trains a fresh VAE on `train`; evaluates on `heldout` every
/// `cfg.eval_every` steps and once at the end.
pub fn train_vae<R: Rng + ?Sized>(
    train: &[TaskSpec],
    heldout: &[TaskSpec],
    cfg: &VaeConfig,
    space: &TaskSpaceConfig,
    rng: &mut R,
) -> Result<(TaskVae, Vec<VaeMetrics>)> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::Input("training and held-out sets must be nonempty".into()));
    }
    for t in train.iter().chain(heldout) {
        t.validate(space)
            .map_err(|e| Error::Config(format!("corpus does not fit the task space: {e}")))?;
    }
    let mut vae = TaskVae::new(cfg.clone(), *space, rng)?;
    let mut adam = AdamConfig::new(cfg.lr, cfg.adam_eps);
    let tokens = vae.tokenize_batch(train)?;
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut metrics = Vec::new();
    let mut acc = (0.0, 0.0, 0.0, 0usize);

    let mut log = |vae: &TaskVae, step: usize, acc: &mut (f64, f64, f64, usize)| -> Result<()> {
        let stats = reconstruction_stats(vae, heldout)?;
        let n = acc.3.max(1) as f64;
        metrics.push(VaeMetrics {
            step,
            train_total: acc.0 / n,
            train_recon_ce: acc.1 / n,
            train_kl: acc.2 / n,
            heldout_recon_ce: stats.recon_ce,
            heldout_kl: stats.kl,
            heldout_token_acc: stats.token_acc,
            heldout_exact: stats.exact,
        });
        *acc = (0.0, 0.0, 0.0, 0);
        Ok(())
    };

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(tokens[order[cursor]].clone());
            cursor += 1;
        }
        let mut g = Graph::new();
        let (total, recon, kl) = vae.elbo_graph(&mut g, Params::new(&vae.params), &batch, Some(&mut *rng), true)?;
        g.backward(total)?;
        g.accumulate(0, &mut vae.params);
        if cfg.max_grad_norm > 0.0 {
            clip_global_norm(&mut vae.params, cfg.max_grad_norm)?;
        }
        if cfg.cosine_decay {
            let progress = step as f64 / cfg.steps as f64;
            adam.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        adam_next(&mut vae.params, &adam)?;
        acc.0 += g.scalar(total);
        acc.1 += g.scalar(recon);
        acc.2 += g.scalar(kl);
        acc.3 += 1;
        if step == 0 || (step + 1) % cfg.eval_every == 0 {
            log(&vae, step + 1, &mut acc)?;
        }
    }
    if cfg.steps == 0 || !cfg.steps.is_multiple_of(cfg.eval_every) {
        log(&vae, cfg.steps, &mut acc)?;
    }
    Ok((vae, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (VaeConfig, TaskSpaceConfig) {
        let cfg = VaeConfig {
            latent_dim: 3,
            embedding_dim: 5,
            encoder_hidden: 4,
            decoder_hidden: 4,
            ..VaeConfig::desk()
        };
        (
            cfg,
            TaskSpaceConfig {
                interior_size: 3,
                max_obstacles: 2,
            },
        )
    }

    #[test]
    fn grad_clip_must_be_finite_and_non_negative() {
        for bad in [-1.0, f64::NAN, f64::INFINITY] {
            let cfg = VaeConfig {
                max_grad_norm: bad,
                ..VaeConfig::desk()
            };
            assert!(cfg.validate().is_err(), "{bad}");
        }
        let off = VaeConfig {
            max_grad_norm: 0.0,
            ..VaeConfig::desk()
        };
        assert!(off.validate().is_ok());
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_to_prior(&[0.0], &[0.0]).unwrap(), 0.0);
        assert!((kl_to_prior(&[1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = reparameterize(&[0.3, -1.0], &[-40.0, -40.0], &mut rng).unwrap();
        assert!((z[0] - 0.3).abs() < 1e-8 && (z[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn mask_counts_first_pad_only() {
        assert_eq!(loss_mask(&[3, 4, 0, 0]), vec![true, true, true, false]);
        assert_eq!(loss_mask(&[3, 4, 5, 6]), vec![true; 4]);
    }

    #[test]
    fn perfect_logits_give_zero_loss() {
        let tokens = vec![vec![3, 4, 0, 0], vec![1, 2, 5, 0]];
        let vocab = 6;
        let mut logits = vec![0.0; 8 * vocab];
        for t in 0..4 {
            for (b, s) in tokens.iter().enumerate() {
                logits[(t * 2 + b) * vocab + s[t]] = 1e6;
            }
        }
        let mut g = Graph::new();
        let l = g.constant(8, vocab, logits);
        let mu = g.zeros(2, 3);
        let lv = g.zeros(2, 3);
        let (total, recon, kl) = elbo_from_logits(&mut g, l, &tokens, mu, lv, 79.0).unwrap();
        assert!(g.scalar(total).abs() < 1e-9);
        assert!(g.scalar(recon).abs() < 1e-9);
        assert_eq!(g.scalar(kl), 0.0);
    }

    #[test]
    fn uniform_logits_cost_log_vocab() {
        let tokens = vec![vec![7, 9, 0, 0, 0]];
        let mut g = Graph::new();
        let l = g.zeros(5, 50);
        let mu = g.constant(1, 2, vec![0.5, -0.2]);
        let lv = g.constant(1, 2, vec![0.1, 0.3]);
        let (total, recon, kl) = elbo_from_logits(&mut g, l, &tokens, mu, lv, 79.0).unwrap();
        assert!((g.scalar(recon) - 50f64.ln()).abs() < 1e-12);
        assert!((g.scalar(total) - (79.0 * g.scalar(recon) + g.scalar(kl))).abs() < 1e-12);
        let expected_kl = kl_to_prior(&[0.5, -0.2], &[0.1, 0.3]).unwrap();
        assert!((g.scalar(kl) - expected_kl).abs() < 1e-12);
    }

    #[test]
    fn ghost_positions_do_not_contribute() {
        // changing logits at positions after the first PAD leaves the loss fixed
        let tokens = vec![vec![2, 3, 0, 0]];
        let eval = |ghost: f64| {
            let mut g = Graph::new();
            let mut v = vec![0.0; 4 * 10];
            v[3 * 10 + 4] = ghost;
            let l = g.constant(4, 10, v);
            let mu = g.zeros(1, 1);
            let lv = g.zeros(1, 1);
            let (_, recon, _) = elbo_from_logits(&mut g, l, &tokens, mu, lv, 1.0).unwrap();
            g.scalar(recon)
        };
        assert_eq!(eval(0.0), eval(25.0));
    }

    #[test]
    fn mean_is_bounded_and_encoder_deterministic() {
        let (cfg, space) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut vae = TaskVae::new(cfg, space, &mut rng).unwrap();
        // blow up the head so tanh saturates
        let id = vae.params.id("enc/mu/w").unwrap();
        vae.params
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|x| *x *= 1e3);
        let toks = vec![vec![1, 2, 3, 0], vec![9, 9, 9, 9]];
        let a = vae.encode(&toks).unwrap();
        assert!(a.mu.iter().all(|m| m.abs() <= 4.0));
        assert_eq!(a, vae.encode(&toks).unwrap());
        assert!(vae.encode(&[vec![1, 2, 10, 0]]).is_err());
    }

    #[test]
    fn decode_is_deterministic_and_valid() {
        let (cfg, space) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vae = TaskVae::new(cfg, space, &mut rng).unwrap();
        for k in 0..50 {
            let z: Vec<f64> = (0..3).map(|d| ((k * 7 + d) as f64).sin() * 4.0).collect();
            let t = vae.greedy_decode(&z).unwrap();
            assert_eq!(t, vae.greedy_decode(&z).unwrap());
            assert!(t.validate(&space).is_ok());
            assert_eq!(vae.decode_logits(&z).unwrap().len(), space.max_len() * space.vocab());
        }
    }

    #[test]
    fn degenerate_decode_is_repaired() {
        assert_eq!(repair_tokens(&[0, 0, 0]), TaskSpec::new(vec![], 1, 2));
        assert_eq!(repair_tokens(&[5, 0, 3]), TaskSpec::new(vec![], 1, 2));
        assert_eq!(repair_tokens(&[5, 6, 7, 0]), TaskSpec::new(vec![5], 6, 7));
    }

    #[test]
    fn corpus_config_mismatch_is_config_error() {
        let (cfg, space) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bad = vec![TaskSpec::new(vec![], 30, 2)];
        let err = train_vae(&bad, &bad, &cfg, &space, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
