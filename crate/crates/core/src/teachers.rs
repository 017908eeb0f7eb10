//! Task-proposing teachers and the regret signals that train them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, CellKind, CellState, Dense, Embedding, Graph, ParamTree, Params, RecurrentCell, Var};
use crate::ppo::{
    compute_gae, entropy_rows, normalize_advantages, ppo_update, sample_categorical, Learner, PolicyEval, PpoBatch,
    PpoConfig, PpoStats,
};
use crate::task::{detokenize, random_task, TaskSpaceConfig, TaskSpec, PAD};
use crate::vae::{decoder_log_prob, greedy_decode_with, repair_tokens, sample_decode, DecoderLayers};

/// `U_A − U_P`.
pub fn standard_regret(agent_return: f64, antagonist_return: f64) -> f64 {
    antagonist_return - agent_return
}

/// `max(m_P, m_A) − (m_P + m_A) / 2` over per-policy mean returns.
pub fn flexible_regret(agent_returns: &[f64], antagonist_returns: &[f64]) -> Result<f64> {
    if agent_returns.is_empty() || antagonist_returns.is_empty() {
        return Err(Error::Input(
            "flexible regret needs at least one episode per policy".into(),
        ));
    }
    let m_p = mean(agent_returns);
    let m_a = mean(antagonist_returns);
    Ok(m_p.max(m_a) - (m_p + m_a) / 2.0)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegretFlavor {
    #[default]
    Standard,
    Flexible,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretEstimate {
    pub agent_return: f64,
    pub antagonist_return: f64,
    pub value: f64,
    pub flavor: RegretFlavor,
}

/// Regret of one task from the episode returns each student collected on it.
pub fn estimate_regret(
    flavor: RegretFlavor,
    agent_returns: &[f64],
    antagonist_returns: &[f64],
) -> Result<RegretEstimate> {
    if agent_returns.is_empty() || antagonist_returns.is_empty() {
        return Err(Error::Input("regret needs at least one episode per policy".into()));
    }
    let u_p = mean(agent_returns);
    let u_a = mean(antagonist_returns);
    let value = match flavor {
        RegretFlavor::Standard => standard_regret(u_p, u_a),
        RegretFlavor::Flexible => flexible_regret(agent_returns, antagonist_returns)?,
    };
    Ok(RegretEstimate {
        agent_return: u_p,
        antagonist_return: u_a,
        value,
        flavor,
    })
}

/// `bins` evenly spaced centers on `[−scale, scale]`; a single bin sits at 0.
pub fn bin_centers(bins: usize, scale: f64) -> Vec<f64> {
    if bins == 1 {
        return vec![0.0];
    }
    (0..bins)
        .map(|b| -scale + 2.0 * scale * b as f64 / (bins - 1) as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClutrTeacherConfig {
    pub noise_dim: usize,
    pub hidden: usize,
    pub bins: usize,
}

impl Default for ClutrTeacherConfig {
    fn default() -> Self {
        Self {
            noise_dim: 50,
            hidden: 32,
            bins: 9,
        }
    }
}

/// Noise-conditioned latent designer: one forward pass yields `D`
/// independent categoricals over latent bins.
#[derive(Clone, Debug)]
pub struct ClutrTeacherPolicy {
    trunk: Dense,
    pi: Dense,
    v: Dense,
    pub noise_dim: usize,
    pub latent_dim: usize,
    pub bins: usize,
    pub centers: Vec<f64>,
}

/// One latent decision.
#[derive(Clone, Debug, PartialEq)]
pub struct ClutrDecision {
    pub noise: Vec<f64>,
    pub bins: Vec<usize>,
    pub z: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

impl ClutrTeacherPolicy {
    pub fn new<R: Rng + ?Sized>(
        tree: &mut ParamTree,
        cfg: &ClutrTeacherConfig,
        latent_dim: usize,
        mean_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.bins == 0 || cfg.noise_dim == 0 || cfg.hidden == 0 || latent_dim == 0 {
            return Err(Error::Config("teacher sizes must be positive".into()));
        }
        let trunk = Dense::new(tree, "trunk", cfg.noise_dim, cfg.hidden, rng)?;
        let pi = Dense::new(tree, "pi", cfg.hidden, latent_dim * cfg.bins, rng)?;
        let v = Dense::new(tree, "v", cfg.hidden, 1, rng)?;
        Ok(Self {
            trunk,
            pi,
            v,
            noise_dim: cfg.noise_dim,
            latent_dim,
            bins: cfg.bins,
            centers: bin_centers(cfg.bins, mean_scale),
        })
    }

    pub fn bind(tree: &ParamTree, latent_dim: usize, mean_scale: f64) -> Result<Self> {
        let trunk = Dense::bind(tree, "trunk")?;
        let pi = Dense::bind(tree, "pi")?;
        let v = Dense::bind(tree, "v")?;
        if pi.fan_out % latent_dim != 0 {
            return Err(Error::Config("teacher head does not match the latent size".into()));
        }
        let bins = pi.fan_out / latent_dim;
        Ok(Self {
            noise_dim: trunk.fan_in,
            latent_dim,
            bins,
            centers: bin_centers(bins, mean_scale),
            trunk,
            pi,
            v,
        })
    }

    /// `(n·D × B log-probabilities, n × 1 values)` for a batch of noise rows.
    fn forward(&self, g: &mut Graph, p: Params<'_>, noise: &[f64]) -> Result<(Var, Var)> {
        let n = noise.len() / self.noise_dim;
        let x = g.constant(n, self.noise_dim, noise.to_vec());
        let h = self.trunk.forward(g, p, x)?;
        let h = g.relu(h);
        let logits = self.pi.forward(g, p, h)?;
        let per_dim = g.reshape(logits, n * self.latent_dim, self.bins);
        let lsm = g.log_softmax(per_dim);
        let value = self.v.forward(g, p, h)?;
        Ok((lsm, value))
    }

    /// Draws `n` decisions: all noise first, then bins row by row.
    pub fn propose<R: Rng + ?Sized>(&self, params: &ParamTree, n: usize, rng: &mut R) -> Result<Vec<ClutrDecision>> {
        let noise: Vec<f64> = (0..n * self.noise_dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut g = Graph::new();
        let (lsm, value) = self.forward(&mut g, Params::new(params), &noise)?;
        g.check_finite()?;
        let lsm = g.value(lsm).to_vec();
        let values = g.value(value).to_vec();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut bins = Vec::with_capacity(self.latent_dim);
            let mut log_prob = 0.0;
            for d in 0..self.latent_dim {
                let row = &lsm[(i * self.latent_dim + d) * self.bins..(i * self.latent_dim + d + 1) * self.bins];
                let probs: Vec<f64> = row.iter().map(|l| l.exp()).collect();
                let b = sample_categorical(&probs, rng);
                log_prob += row[b];
                bins.push(b);
            }
            out.push(ClutrDecision {
                noise: noise[i * self.noise_dim..(i + 1) * self.noise_dim].to_vec(),
                z: bins.iter().map(|&b| self.centers[b]).collect(),
                bins,
                log_prob,
                value: values[i],
            });
        }
        Ok(out)
    }

    /// Log-probabilities, entropies (summed over dimensions) and values of
    /// stored decisions.
    pub fn evaluate(&self, g: &mut Graph, p: Params<'_>, decisions: &[&ClutrDecision]) -> Result<(Var, Var, Var)> {
        let n = decisions.len();
        let noise: Vec<f64> = decisions.iter().flat_map(|d| d.noise.iter().copied()).collect();
        let bins: Vec<usize> = decisions.iter().flat_map(|d| d.bins.iter().copied()).collect();
        let (lsm, value) = self.forward(g, p, &noise)?;
        let picked = g.pick(lsm, &bins);
        let per_row = g.reshape(picked, n, self.latent_dim);
        let logp = g.row_sum(per_row);
        let ent = entropy_rows(g, lsm);
        let ent = g.reshape(ent, n, self.latent_dim);
        let entropy = g.row_sum(ent);
        Ok((logp, entropy, value))
    }
}

/// The pretrained decoder as used by the latent teacher. Frozen unless
/// `finetune` carries an optimizer.
#[derive(Clone, Debug)]
pub struct LatentDecoder {
    pub layers: DecoderLayers,
    pub params: ParamTree,
    pub max_len: usize,
    pub finetune: Option<AdamConfig>,
}

impl LatentDecoder {
    pub fn new(params: ParamTree, max_len: usize, finetune: Option<AdamConfig>) -> Result<Self> {
        Ok(Self {
            layers: DecoderLayers::bind(&params)?,
            params,
            max_len,
            finetune,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairedTeacherConfig {
    pub embedding_dim: usize,
    pub hidden: usize,
}

impl Default for PairedTeacherConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            hidden: 32,
        }
    }
}

/// Autoregressive token-by-token designer conditioned on the partial task.
#[derive(Clone, Debug)]
pub struct PairedTeacherPolicy {
    embed: Embedding,
    core: RecurrentCell,
    pi: Dense,
    v: Dense,
    pub vocab: usize,
    pub max_len: usize,
}

/// One sequential decision episode.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDecision {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
}

const MASKED: f64 = -1e9;

/// Additive logit mask for position `t` given the previous token: PAD is
/// barred from the first two positions and forced after a PAD.
fn token_mask(vocab: usize, t: usize, prev: Option<usize>) -> Vec<f64> {
    let mut m = vec![0.0; vocab];
    if prev == Some(PAD) {
        m.iter_mut().skip(1).for_each(|x| *x = MASKED);
    } else if t < 2 {
        m[PAD] = MASKED;
    }
    m
}

impl PairedTeacherPolicy {
    pub fn new<R: Rng + ?Sized>(
        tree: &mut ParamTree,
        cfg: &PairedTeacherConfig,
        space: &TaskSpaceConfig,
        cell: CellKind,
        rng: &mut R,
    ) -> Result<Self> {
        let vocab = space.vocab();
        // one extra row for the start symbol
        let embed = Embedding::new(tree, "embed", vocab + 1, cfg.embedding_dim, rng)?;
        let core = RecurrentCell::new(tree, "core", cell, cfg.embedding_dim, cfg.hidden, rng)?;
        let pi = Dense::new(tree, "pi", cfg.hidden, vocab, rng)?;
        let v = Dense::new(tree, "v", cfg.hidden, 1, rng)?;
        Ok(Self {
            embed,
            core,
            pi,
            v,
            vocab,
            max_len: space.max_len(),
        })
    }

    pub fn bind(tree: &ParamTree, space: &TaskSpaceConfig) -> Result<Self> {
        let pi = Dense::bind(tree, "pi")?;
        if pi.fan_out != space.vocab() {
            return Err(Error::Config(
                "PAIRED teacher vocabulary does not match the task space".into(),
            ));
        }
        Ok(Self {
            embed: Embedding::bind(tree, "embed")?,
            core: RecurrentCell::bind(tree, "core")?,
            v: Dense::bind(tree, "v")?,
            pi,
            vocab: space.vocab(),
            max_len: space.max_len(),
        })
    }

    /// Position `t` for a batch: masked log-probabilities and values.
    fn step(
        &self,
        g: &mut Graph,
        p: Params<'_>,
        prev: &[Option<usize>],
        t: usize,
        state: CellState,
    ) -> Result<(Var, Var, CellState)> {
        let ids: Vec<usize> = prev.iter().map(|x| x.unwrap_or(self.vocab)).collect();
        let x = self.embed.forward(g, p, &ids)?;
        let state = self.core.step(g, p, x, state)?;
        let logits = self.pi.forward(g, p, state.h)?;
        let mask: Vec<f64> = prev.iter().flat_map(|&pr| token_mask(self.vocab, t, pr)).collect();
        let mask = g.constant(prev.len(), self.vocab, mask);
        let masked = g.add(logits, mask);
        let lsm = g.log_softmax(masked);
        let value = self.v.forward(g, p, state.h)?;
        Ok((lsm, value, state))
    }

    pub fn propose<R: Rng + ?Sized>(&self, params: &ParamTree, n: usize, rng: &mut R) -> Result<Vec<PairedDecision>> {
        let mut g = Graph::new();
        let p = Params::new(params);
        let mut state = self.core.zero_state(&mut g, n);
        let mut prev = vec![None; n];
        let mut out = vec![
            PairedDecision {
                tokens: Vec::with_capacity(self.max_len),
                log_probs: Vec::with_capacity(self.max_len),
                values: Vec::with_capacity(self.max_len),
            };
            n
        ];
        for t in 0..self.max_len {
            let (lsm, value, s) = self.step(&mut g, p, &prev, t, state)?;
            state = s;
            g.check_finite()?;
            let lv = g.value(lsm).to_vec();
            let vv = g.value(value).to_vec();
            for (i, d) in out.iter_mut().enumerate() {
                let row = &lv[i * self.vocab..(i + 1) * self.vocab];
                let probs: Vec<f64> = row.iter().map(|l| l.exp()).collect();
                let tok = sample_categorical(&probs, rng);
                d.tokens.push(tok);
                d.log_probs.push(row[tok]);
                d.values.push(vv[i]);
                prev[i] = Some(tok);
            }
        }
        Ok(out)
    }

    /// Re-scores stored episodes; batch rows are `episode · max_len + t`.
    pub fn evaluate(
        &self,
        g: &mut Graph,
        p: Params<'_>,
        decisions: &[PairedDecision],
        units: &[usize],
    ) -> Result<PolicyEval> {
        let n = units.len();
        let mut state = self.core.zero_state(g, n);
        let mut prev = vec![None; n];
        let mut lsms = Vec::with_capacity(self.max_len);
        let mut values = Vec::with_capacity(self.max_len);
        let mut taken = Vec::with_capacity(n * self.max_len);
        let mut rows = Vec::with_capacity(n * self.max_len);
        for t in 0..self.max_len {
            let (lsm, value, s) = self.step(g, p, &prev, t, state)?;
            state = s;
            lsms.push(lsm);
            values.push(value);
            for (k, &u) in units.iter().enumerate() {
                let tok = decisions[u].tokens[t];
                taken.push(tok);
                rows.push(u * self.max_len + t);
                prev[k] = Some(tok);
            }
        }
        let lsm = g.concat_rows(&lsms);
        let value = g.concat_rows(&values);
        let logp = g.pick(lsm, &taken);
        let entropy = entropy_rows(g, lsm);
        Ok(PolicyEval {
            logp,
            entropy,
            value,
            rows,
        })
    }
}

/// The task list a PAIRED episode encodes.
pub fn paired_task(decision: &PairedDecision) -> TaskSpec {
    detokenize(&decision.tokens).unwrap_or_else(|_| repair_tokens(&decision.tokens))
}

/// Uniform domain randomization.
pub fn dr_propose<R: Rng + ?Sized>(rng: &mut R, space: &TaskSpaceConfig) -> TaskSpec {
    random_task(rng, space)
}

/// What a teacher decided for one task.
#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Clutr {
        latent: ClutrDecision,
        /// Sampled decoder tokens and their log-probability (finetune only).
        sampled: Option<(Vec<usize>, f64)>,
    },
    Paired(PairedDecision),
    Dr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub task: TaskSpec,
    pub decision: Decision,
}

/// A teacher with everything it needs to propose and learn.
#[derive(Clone, Debug)]
pub enum Teacher {
    Clutr {
        policy: ClutrTeacherPolicy,
        params: ParamTree,
        decoder: LatentDecoder,
    },
    Paired {
        policy: PairedTeacherPolicy,
        params: ParamTree,
    },
    Dr {
        space: TaskSpaceConfig,
    },
}

impl Teacher {
    pub fn name(&self) -> &'static str {
        match self {
            Teacher::Clutr { .. } => "clutr",
            Teacher::Paired { .. } => "paired",
            Teacher::Dr { .. } => "dr",
        }
    }

    pub fn propose<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Proposal>> {
        match self {
            Teacher::Clutr {
                policy,
                params,
                decoder,
            } => {
                let latents = policy.propose(params, n, rng)?;
                latents
                    .into_iter()
                    .map(|latent| {
                        if decoder.finetune.is_some() {
                            let (tokens, lp) =
                                sample_decode(&decoder.layers, &decoder.params, &latent.z, decoder.max_len, rng)?;
                            Ok(Proposal {
                                task: repair_tokens(&tokens),
                                decision: Decision::Clutr {
                                    latent,
                                    sampled: Some((tokens, lp)),
                                },
                            })
                        } else {
                            let task =
                                greedy_decode_with(&decoder.layers, &decoder.params, &latent.z, decoder.max_len)?;
                            Ok(Proposal {
                                task,
                                decision: Decision::Clutr { latent, sampled: None },
                            })
                        }
                    })
                    .collect()
            }
            Teacher::Paired { policy, params } => Ok(policy
                .propose(params, n, rng)?
                .into_iter()
                .map(|d| Proposal {
                    task: paired_task(&d),
                    decision: Decision::Paired(d),
                })
                .collect()),
            Teacher::Dr { space } => Ok((0..n)
                .map(|_| Proposal {
                    task: dr_propose(rng, space),
                    decision: Decision::Dr,
                })
                .collect()),
        }
    }
}

/// PPO update of the teacher with reward = regret. Latent decisions are
/// one-step episodes, PAIRED decisions `max_len`-step episodes with a
/// terminal reward. Domain randomization has nothing to learn and
/// returns `None`.
pub fn teacher_update<R: Rng + ?Sized>(
    teacher: &mut Teacher,
    proposals: &[Proposal],
    regrets: &[f64],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<Option<PpoStats>> {
    if proposals.is_empty() || proposals.len() != regrets.len() {
        return Err(Error::Input(format!(
            "{} proposals with {} regrets",
            proposals.len(),
            regrets.len()
        )));
    }
    match teacher {
        Teacher::Dr { .. } => Ok(None),
        Teacher::Clutr {
            policy,
            params,
            decoder,
        } => {
            let latents: Vec<&ClutrDecision> = proposals
                .iter()
                .map(|p| match &p.decision {
                    Decision::Clutr { latent, .. } => Ok(latent),
                    _ => Err(Error::Input("latent teacher given a foreign decision".into())),
                })
                .collect::<Result<_>>()?;
            let sampled: Option<Vec<(Vec<usize>, f64)>> = match decoder.finetune {
                None => None,
                Some(_) => Some(
                    proposals
                        .iter()
                        .map(|p| match &p.decision {
                            Decision::Clutr { sampled: Some(s), .. } => Ok(s.clone()),
                            _ => Err(Error::Input("finetune update needs sampled decoder tokens".into())),
                        })
                        .collect::<Result<_>>()?,
                ),
            };
            Ok(Some(clutr_update(
                policy,
                params,
                &latents,
                sampled.as_deref(),
                decoder,
                regrets,
                cfg,
                rng,
            )?))
        }
        Teacher::Paired { policy, params } => {
            let decisions: Vec<PairedDecision> = proposals
                .iter()
                .map(|p| match &p.decision {
                    Decision::Paired(d) => Ok(d.clone()),
                    _ => Err(Error::Input("PAIRED teacher given a foreign decision".into())),
                })
                .collect::<Result<_>>()?;
            Ok(Some(paired_update(policy, params, &decisions, regrets, cfg, rng)?))
        }
    }
}

/// Single-step PPO for the latent teacher. With `sampled`, the decoder's
/// token log-probabilities join the action log-probability and the decoder
/// is updated with its own optimizer.
#[allow(clippy::too_many_arguments)]
pub fn clutr_update<R: Rng + ?Sized>(
    policy: &ClutrTeacherPolicy,
    params: &mut ParamTree,
    latents: &[&ClutrDecision],
    sampled: Option<&[(Vec<usize>, f64)]>,
    decoder: &mut LatentDecoder,
    regrets: &[f64],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    let n = latents.len();
    let mut batch = PpoBatch {
        units: n,
        ..Default::default()
    };
    for (i, d) in latents.iter().enumerate() {
        let (adv, ret) = compute_gae(&[regrets[i]], &[d.value], &[true], 0.0, cfg.gamma, cfg.gae_lambda)?;
        let dec_lp = sampled.map_or(0.0, |s| s[i].1);
        batch.old_logp.push(d.log_prob + dec_lp);
        batch.old_value.push(d.value);
        batch.advantages.push(adv[0]);
        batch.returns.push(ret[0]);
    }
    normalize_advantages(&mut batch.advantages);
    let eval = |g: &mut Graph, trees: &[&ParamTree], units: &[usize]| -> Result<PolicyEval> {
        let chosen: Vec<&ClutrDecision> = units.iter().map(|&u| latents[u]).collect();
        let (mut logp, entropy, value) = policy.evaluate(g, Params::new(trees[0]), &chosen)?;
        if let Some(s) = sampled {
            let z: Vec<f64> = chosen.iter().flat_map(|d| d.z.iter().copied()).collect();
            let zv = g.constant(units.len(), policy.latent_dim, z);
            let toks: Vec<Vec<usize>> = units.iter().map(|&u| s[u].0.clone()).collect();
            let dec_lp = decoder_log_prob(
                &decoder.layers,
                g,
                Params::tagged(trees[1], 1),
                zv,
                &toks,
                decoder.max_len,
            )?;
            logp = g.add(logp, dec_lp);
        }
        Ok(PolicyEval {
            logp,
            entropy,
            value,
            rows: units.to_vec(),
        })
    };
    match (sampled, decoder.finetune) {
        (Some(_), Some(adam)) => {
            let mut learners = [
                Learner {
                    tree: params,
                    adam: cfg.adam(),
                },
                Learner {
                    tree: &mut decoder.params,
                    adam,
                },
            ];
            ppo_update(&mut learners, cfg, &batch, rng, |g, t, u| eval(g, t, u))
        }
        _ => {
            let mut learners = [Learner {
                tree: params,
                adam: cfg.adam(),
            }];
            ppo_update(&mut learners, cfg, &batch, rng, |g, t, u| eval(g, t, u))
        }
    }
}

/// Sequential PPO for the PAIRED teacher with terminal regret reward.
pub fn paired_update<R: Rng + ?Sized>(
    policy: &PairedTeacherPolicy,
    params: &mut ParamTree,
    decisions: &[PairedDecision],
    regrets: &[f64],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    let len = policy.max_len;
    let mut batch = PpoBatch {
        units: decisions.len(),
        ..Default::default()
    };
    for (d, &r) in decisions.iter().zip(regrets) {
        let mut rewards = vec![0.0; len];
        rewards[len - 1] = r;
        let mut dones = vec![false; len];
        dones[len - 1] = true;
        let (adv, ret) = compute_gae(&rewards, &d.values, &dones, 0.0, cfg.gamma, cfg.gae_lambda)?;
        batch.old_logp.extend(&d.log_probs);
        batch.old_value.extend(&d.values);
        batch.advantages.extend(adv);
        batch.returns.extend(ret);
    }
    normalize_advantages(&mut batch.advantages);
    let mut learners = [Learner {
        tree: params,
        adam: cfg.adam(),
    }];
    ppo_update(&mut learners, cfg, &batch, rng, |g, trees, units| {
        policy.evaluate(g, Params::new(trees[0]), decisions, units)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn regret_hand_values() {
        assert!((standard_regret(0.5, 0.8) - 0.3).abs() < 1e-15);
        assert_eq!(standard_regret(0.4, 0.4), 0.0);
        assert!((flexible_regret(&[0.4], &[0.6]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(flexible_regret(&[0.2, 0.6], &[0.4]).unwrap(), 0.0);
        assert!(matches!(flexible_regret(&[], &[0.1]), Err(Error::Input(_))));
    }

    #[test]
    fn bin_layout() {
        assert_eq!(bin_centers(1, 4.0), vec![0.0]);
        assert_eq!(
            bin_centers(9, 4.0),
            vec![-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn single_bin_teacher_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tree = ParamTree::new();
        let cfg = ClutrTeacherConfig {
            bins: 1,
            ..Default::default()
        };
        let t = ClutrTeacherPolicy::new(&mut tree, &cfg, 4, 4.0, &mut rng).unwrap();
        for d in t.propose(&tree, 5, &mut rng).unwrap() {
            assert_eq!(d.z, vec![0.0; 4]);
            assert_eq!(d.log_prob, 0.0);
        }
    }

    #[test]
    fn latent_log_prob_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tree = ParamTree::new();
        let t = ClutrTeacherPolicy::new(&mut tree, &ClutrTeacherConfig::default(), 8, 4.0, &mut rng).unwrap();
        let ds = t.propose(&tree, 6, &mut rng).unwrap();
        let refs: Vec<&ClutrDecision> = ds.iter().collect();
        let mut g = Graph::new();
        let (lp, _, v) = t.evaluate(&mut g, Params::new(&tree), &refs).unwrap();
        for (i, d) in ds.iter().enumerate() {
            assert!((g.value(lp)[i] - d.log_prob).abs() < 1e-12);
            assert!((g.value(v)[i] - d.value).abs() < 1e-12);
            assert!(d.z.iter().all(|z| z.abs() <= 4.0));
        }
    }

    #[test]
    fn paired_masks_keep_sequences_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let space = TaskSpaceConfig::desk();
        let mut tree = ParamTree::new();
        let t = PairedTeacherPolicy::new(&mut tree, &Default::default(), &space, CellKind::Lstm, &mut rng).unwrap();
        for d in t.propose(&tree, 200, &mut rng).unwrap() {
            assert_eq!(d.tokens.len(), space.max_len());
            assert!(d.tokens[0] != PAD && d.tokens[1] != PAD);
            if let Some(k) = d.tokens.iter().position(|&x| x == PAD) {
                assert!(d.tokens[k..].iter().all(|&x| x == PAD));
            }
            assert!(paired_task(&d).validate(&space).is_ok());
        }
    }

    #[test]
    fn dr_has_no_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let space = TaskSpaceConfig::desk();
        let mut teacher = Teacher::Dr { space };
        let props = teacher.propose(3, &mut rng).unwrap();
        let out = teacher_update(&mut teacher, &props, &[0.1, 0.2, 0.3], &PpoConfig::desk(), &mut rng).unwrap();
        assert!(out.is_none());
    }
}
