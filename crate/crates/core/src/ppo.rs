//! PPO: rollout collection for the recurrent student, GAE, and a clipped
//! surrogate update shared by students and teachers.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, GridPOMDP, Observation, NUM_ACTIONS, OBS_LEN};
use crate::error::{Error, Result};
use crate::nn::{
    adam_next, clip_global_norm, softmax_rows, AdamConfig, CellKind, CellState, Dense, Graph, ParamTree, Params,
    RecurrentCell, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub clip: f64,
    pub workers: usize,
    pub lr: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub value_clip: bool,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PpoConfig {
    pub fn desk() -> Self {
        Self {
            gamma: 0.995,
            gae_lambda: 0.95,
            rollout_len: 256,
            epochs: 5,
            minibatches: 1,
            clip: 0.2,
            workers: 4,
            lr: 1e-4,
            adam_eps: 1e-5,
            max_grad_norm: 0.5,
            value_clip: true,
            value_coef: 0.5,
            entropy_coef: 0.0,
        }
    }

    pub fn full() -> Self {
        Self {
            workers: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip <= 0.0 {
            return Err(Error::Config("clip must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must lie in [0, 1]".into()));
        }
        if self.rollout_len == 0 || self.epochs == 0 || self.minibatches == 0 || self.workers == 0 {
            return Err(Error::Config(
                "rollout_len, epochs, minibatches and workers must be positive".into(),
            ));
        }
        if self.lr <= 0.0 || self.adam_eps <= 0.0 || self.max_grad_norm <= 0.0 {
            return Err(Error::Config("lr, adam_eps and max_grad_norm must be positive".into()));
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return Err(Error::Config("loss coefficients must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.adam_eps)
    }
}

/// `(advantages, value targets)` by generalized advantage estimation.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Shape(format!(
            "gae inputs of lengths {n}, {}, {}",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Mean 0, standard deviation 1 (population), with `1e-8` in the divisor.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// Draws an index from a probability vector with one uniform variate.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Policy outputs for a set of batch rows, recorded on a graph.
pub struct PolicyEval {
    /// `n × 1` log-probabilities of the taken actions.
    pub logp: Var,
    /// `n × 1` per-row policy entropy.
    pub entropy: Var,
    /// `n × 1` value estimates.
    pub value: Var,
    /// Batch row index of each output row.
    pub rows: Vec<usize>,
}

/// Frozen per-row data for one PPO update. Rows are grouped in units (an
/// environment slot, a teacher episode) that minibatches never split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoBatch {
    pub old_logp: Vec<f64>,
    pub old_value: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub units: usize,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.old_logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_logp.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 || self.units == 0 {
            return Err(Error::Input("empty PPO batch".into()));
        }
        if self.old_value.len() != n || self.advantages.len() != n || self.returns.len() != n {
            return Err(Error::Shape("PPO batch columns differ in length".into()));
        }
        if self.old_logp.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training("non-finite old log-probability in batch".into()));
        }
        Ok(())
    }
}

/// Averages over the gradient steps of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub grad_scale: f64,
}

/// A parameter tree with its optimizer settings.
pub struct Learner<'a> {
    pub tree: &'a mut ParamTree,
    pub adam: AdamConfig,
}

/// Loss on rows described by `ev`; returns `(total, policy, value, entropy)`.
pub fn ppo_loss(g: &mut Graph, ev: &PolicyEval, batch: &PpoBatch, cfg: &PpoConfig) -> Result<(Var, Var, Var, Var)> {
    let n = ev.rows.len();
    if g.rows(ev.logp) != n || g.rows(ev.value) != n || g.rows(ev.entropy) != n {
        return Err(Error::Shape("policy evaluation rows disagree".into()));
    }
    let pick = |col: &[f64]| ev.rows.iter().map(|&r| col[r]).collect::<Vec<f64>>();
    let old_logp = g.constant(n, 1, pick(&batch.old_logp));
    let adv = g.constant(n, 1, pick(&batch.advantages));
    let old_value = g.constant(n, 1, pick(&batch.old_value));
    let ret = g.constant(n, 1, pick(&batch.returns));

    let diff = g.sub(ev.logp, old_logp);
    let ratio = g.exp(diff);
    let surr1 = g.mul(ratio, adv);
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let surr2 = g.mul(clipped, adv);
    let surr = g.minimum(surr1, surr2);
    let surr_mean = g.mean(surr);
    let policy = g.scale(surr_mean, -1.0);

    let err = g.sub(ev.value, ret);
    let sq = g.square(err);
    let value_sq = if cfg.value_clip {
        let dv = g.sub(ev.value, old_value);
        let dv = g.clamp(dv, -cfg.clip, cfg.clip);
        let v_clipped = g.add(old_value, dv);
        let err2 = g.sub(v_clipped, ret);
        let sq2 = g.square(err2);
        g.maximum(sq, sq2)
    } else {
        sq
    };
    let vmean = g.mean(value_sq);
    let value = g.scale(vmean, 0.5);
    let entropy = g.mean(ev.entropy);

    let weighted_v = g.scale(value, cfg.value_coef);
    let weighted_e = g.scale(entropy, -cfg.entropy_coef);
    let pv = g.add(policy, weighted_v);
    let total = g.add(pv, weighted_e);
    Ok((total, policy, value, entropy))
}

/// Runs `cfg.epochs` passes of `cfg.minibatches` clipped-surrogate steps.
///
/// `eval` records the policy on a graph for the listed units; parameter
/// tree `i` must be placed on the tape with tag `i`.
pub fn ppo_update<R, F>(
    learners: &mut [Learner<'_>],
    cfg: &PpoConfig,
    batch: &PpoBatch,
    rng: &mut R,
    mut eval: F,
) -> Result<PpoStats>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Graph, &[&ParamTree], &[usize]) -> Result<PolicyEval>,
{
    batch.validate()?;
    let mb = cfg.minibatches.min(batch.units);
    let mut units: Vec<usize> = (0..batch.units).collect();
    let mut stats = PpoStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        if mb > 1 {
            units.shuffle(rng);
        }
        for k in 0..mb {
            let chunk: Vec<usize> = units
                .iter()
                .enumerate()
                .filter(|(i, _)| i % mb == k)
                .map(|(_, &u)| u)
                .collect();
            let mut g = Graph::new();
            let ev = {
                let trees: Vec<&ParamTree> = learners.iter().map(|l| &*l.tree).collect();
                eval(&mut g, &trees, &chunk)?
            };
            let (total, policy, value, entropy) = ppo_loss(&mut g, &ev, batch, cfg)?;
            if !g.scalar(total).is_finite() {
                return Err(Error::Training(format!(
                    "non-finite PPO loss (policy {}, value {}, entropy {})",
                    g.scalar(policy),
                    g.scalar(value),
                    g.scalar(entropy)
                )));
            }
            g.backward(total)?;
            let logp = g.value(ev.logp);
            let clipped = ev
                .rows
                .iter()
                .zip(logp)
                .filter(|(&r, &lp)| ((lp - batch.old_logp[r]).exp() - 1.0).abs() > cfg.clip)
                .count();
            let mut scale = 0.0;
            for (i, l) in learners.iter_mut().enumerate() {
                g.accumulate(i as u8, l.tree);
                scale += clip_global_norm(l.tree, cfg.max_grad_norm)?;
                adam_next(l.tree, &l.adam)?;
            }
            stats.policy_loss += g.scalar(policy);
            stats.value_loss += g.scalar(value);
            stats.entropy += g.scalar(entropy);
            stats.total += g.scalar(total);
            stats.clip_fraction += clipped as f64 / ev.rows.len() as f64;
            stats.grad_scale += scale / learners.len().max(1) as f64;
            count += 1.0;
        }
    }
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.entropy /= count;
    stats.total /= count;
    stats.clip_fraction /= count;
    stats.grad_scale /= count;
    Ok(stats)
}

/// Per-row entropy `−Σ p log p` from a log-softmax node.
pub fn entropy_rows(g: &mut Graph, log_probs: Var) -> Var {
    let p = g.exp(log_probs);
    let plogp = g.mul(p, log_probs);
    let s = g.row_sum(plogp);
    g.scale(s, -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub view_units: usize,
    pub direction_units: usize,
    pub hidden: usize,
    pub head_units: usize,
    pub cell: CellKind,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl StudentConfig {
    pub fn desk() -> Self {
        Self {
            view_units: 16,
            direction_units: 5,
            hidden: 32,
            head_units: 32,
            cell: CellKind::Lstm,
        }
    }

    pub fn full() -> Self {
        Self {
            hidden: 256,
            ..Self::desk()
        }
    }
}

/// Recurrent actor-critic over egocentric views.
///
/// view (75) → dense relu; direction one-hot (4) → dense; concat →
/// recurrent core; separate tanh hidden layers for policy and value.
#[derive(Clone, Debug)]
pub struct StudentPolicy {
    view: Dense,
    dir: Dense,
    core: RecurrentCell,
    pi_hidden: Dense,
    pi_out: Dense,
    v_hidden: Dense,
    v_out: Dense,
}

impl StudentPolicy {
    pub fn new<R: Rng + ?Sized>(tree: &mut ParamTree, cfg: &StudentConfig, rng: &mut R) -> Result<Self> {
        let view = Dense::new(tree, "view", OBS_LEN, cfg.view_units, rng)?;
        let dir = Dense::new(tree, "dir", 4, cfg.direction_units, rng)?;
        let core = RecurrentCell::new(
            tree,
            "core",
            cfg.cell,
            cfg.view_units + cfg.direction_units,
            cfg.hidden,
            rng,
        )?;
        let pi_hidden = Dense::new(tree, "pi/hidden", cfg.hidden, cfg.head_units, rng)?;
        let pi_out = Dense::new(tree, "pi/out", cfg.head_units, NUM_ACTIONS, rng)?;
        let v_hidden = Dense::new(tree, "v/hidden", cfg.hidden, cfg.head_units, rng)?;
        let v_out = Dense::new(tree, "v/out", cfg.head_units, 1, rng)?;
        Ok(Self {
            view,
            dir,
            core,
            pi_hidden,
            pi_out,
            v_hidden,
            v_out,
        })
    }

    pub fn bind(tree: &ParamTree) -> Result<Self> {
        Ok(Self {
            view: Dense::bind(tree, "view")?,
            dir: Dense::bind(tree, "dir")?,
            core: RecurrentCell::bind(tree, "core")?,
            pi_hidden: Dense::bind(tree, "pi/hidden")?,
            pi_out: Dense::bind(tree, "pi/out")?,
            v_hidden: Dense::bind(tree, "v/hidden")?,
            v_out: Dense::bind(tree, "v/out")?,
        })
    }

    /// Fresh parameters and the bound policy.
    pub fn init<R: Rng + ?Sized>(cfg: &StudentConfig, rng: &mut R) -> Result<(Self, ParamTree)> {
        let mut tree = ParamTree::new();
        let policy = Self::new(&mut tree, cfg, rng)?;
        Ok((policy, tree))
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> CellState {
        self.core.zero_state(g, batch)
    }

    /// One step for a batch of observations. Returns `(logits, value, state)`.
    pub fn step(
        &self,
        g: &mut Graph,
        p: Params<'_>,
        obs: &[Observation],
        state: CellState,
    ) -> Result<(Var, Var, CellState)> {
        let n = obs.len();
        let mut view = Vec::with_capacity(n * OBS_LEN);
        let mut dir = vec![0.0; n * 4];
        for (i, o) in obs.iter().enumerate() {
            view.extend(o.view.iter().map(|&x| x as f64));
            dir[i * 4 + o.direction as usize] = 1.0;
        }
        let view = g.constant(n, OBS_LEN, view);
        let dir = g.constant(n, 4, dir);
        let hv = self.view.forward(g, p, view)?;
        let hv = g.relu(hv);
        let hd = self.dir.forward(g, p, dir)?;
        let x = g.concat(&[hv, hd]);
        let state = self.core.step(g, p, x, state)?;
        let ph = self.pi_hidden.forward(g, p, state.h)?;
        let ph = g.tanh(ph);
        let logits = self.pi_out.forward(g, p, ph)?;
        let vh = self.v_hidden.forward(g, p, state.h)?;
        let vh = g.tanh(vh);
        let value = self.v_out.forward(g, p, vh)?;
        Ok((logits, value, state))
    }

    /// Zeroes the recurrent state of rows whose episode just ended.
    pub fn reset_rows(&self, g: &mut Graph, state: CellState, done: &[bool]) -> CellState {
        if !done.iter().any(|&d| d) {
            return state;
        }
        let h = self.core.hidden;
        let mask: Vec<f64> = done
            .iter()
            .flat_map(|&d| std::iter::repeat_n(if d { 0.0 } else { 1.0 }, h))
            .collect();
        let m = g.constant(done.len(), h, mask);
        CellState {
            h: g.mul(state.h, m),
            c: state.c.map(|c| g.mul(c, m)),
        }
    }

    /// Re-runs the policy over stored rollouts of the listed slots (BPTT
    /// within the rollout). Batch rows are `slot · len + t`.
    pub fn evaluate(&self, g: &mut Graph, p: Params<'_>, trajs: &[Trajectory], slots: &[usize]) -> Result<PolicyEval> {
        let len = trajs[slots[0]].len();
        let n = slots.len();
        let mut state = self.zero_state(g, n);
        let mut logits = Vec::with_capacity(len);
        let mut values = Vec::with_capacity(len);
        let mut actions = Vec::with_capacity(len * n);
        let mut rows = Vec::with_capacity(len * n);
        for t in 0..len {
            let obs: Vec<Observation> = slots.iter().map(|&s| trajs[s].obs[t]).collect();
            let (l, v, s) = self.step(g, p, &obs, state)?;
            logits.push(l);
            values.push(v);
            for &s in slots {
                actions.push(trajs[s].actions[t]);
                rows.push(s * len + t);
            }
            let dones: Vec<bool> = slots.iter().map(|&s| trajs[s].dones[t]).collect();
            state = self.reset_rows(g, s, &dones);
        }
        let logits = g.concat_rows(&logits);
        let value = g.concat_rows(&values);
        let lsm = g.log_softmax(logits);
        let logp = g.pick(lsm, &actions);
        let entropy = entropy_rows(g, lsm);
        Ok(PolicyEval {
            logp,
            entropy,
            value,
            rows,
        })
    }

    /// Action probabilities and values for one batch step, without keeping
    /// a graph around; `state` is carried as raw values.
    pub fn act(&self, params: &ParamTree, obs: &[Observation], state: &mut RawState) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let p = Params::new(params);
        let n = obs.len();
        let h = g.constant(n, self.core.hidden, state.h.clone());
        let c = state.c.as_ref().map(|c| g.constant(n, self.core.hidden, c.clone()));
        let (logits, value, s) = self.step(&mut g, p, obs, CellState { h, c })?;
        g.check_finite()?;
        state.h = g.value(s.h).to_vec();
        state.c = s.c.map(|c| g.value(c).to_vec());
        Ok((softmax_rows(g.value(logits), NUM_ACTIONS), g.value(value).to_vec()))
    }

    pub fn initial_state(&self, batch: usize) -> RawState {
        let z = vec![0.0; batch * self.core.hidden];
        RawState {
            c: match self.core.kind {
                CellKind::Lstm => Some(z.clone()),
                CellKind::Gru => None,
            },
            h: z,
            hidden: self.core.hidden,
        }
    }
}

/// Recurrent state outside a graph, `batch × hidden` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawState {
    pub h: Vec<f64>,
    pub c: Option<Vec<f64>>,
    hidden: usize,
}

impl RawState {
    pub fn reset_row(&mut self, row: usize) {
        let r = row * self.hidden..(row + 1) * self.hidden;
        self.h[r.clone()].iter_mut().for_each(|x| *x = 0.0);
        if let Some(c) = &mut self.c {
            c[r].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// One environment slot's rollout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub obs: Vec<Observation>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub bootstrap: f64,
    /// Discounted return of every episode finished in this rollout.
    pub episode_returns: Vec<f64>,
    /// Whether each finished episode reached the goal.
    pub episode_solved: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Mean episode return; a rollout with no finished episode counts as a
    /// single episode with return 0.
    pub fn mean_return(&self) -> f64 {
        if self.episode_returns.is_empty() {
            0.0
        } else {
            self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64
        }
    }

    /// Returns used for regret: finished episodes, or `[0]` if none.
    pub fn returns_or_zero(&self) -> Vec<f64> {
        if self.episode_returns.is_empty() {
            vec![0.0]
        } else {
            self.episode_returns.clone()
        }
    }
}

/// Runs `steps` actions in each environment, sampling from the policy.
/// Episodes restart on the same environment when they end; the recurrent
/// state is reset with them.
pub fn collect_rollout<R: Rng + ?Sized>(
    policy: &StudentPolicy,
    params: &ParamTree,
    envs: &[GridPOMDP],
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if envs.is_empty() {
        return Err(Error::Input("empty environment pool".into()));
    }
    let n = envs.len();
    let mut states = Vec::with_capacity(n);
    let mut obs = Vec::with_capacity(n);
    for env in envs {
        let (s, o) = env.reset();
        states.push(s);
        obs.push(o);
    }
    let mut trajs = vec![Trajectory::default(); n];
    let mut ep_rewards: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut rnn = policy.initial_state(n);
    for _ in 0..steps {
        let (probs, values) = policy.act(params, &obs, &mut rnn)?;
        for i in 0..n {
            let pr = &probs[i * NUM_ACTIONS..(i + 1) * NUM_ACTIONS];
            let a = sample_categorical(pr, rng);
            let (next, r, done) = envs[i].step(&mut states[i], Action::from_index(a))?;
            let tr = &mut trajs[i];
            tr.obs.push(obs[i]);
            tr.actions.push(a);
            tr.log_probs.push(pr[a].ln());
            tr.rewards.push(r);
            tr.values.push(values[i]);
            tr.dones.push(done);
            ep_rewards[i].push(r);
            if done {
                let rewards = std::mem::take(&mut ep_rewards[i]);
                tr.episode_returns
                    .push(crate::env::discounted_return(&rewards, envs[i].discount()));
                tr.episode_solved.push(r > 0.0);
                let (s, o) = envs[i].reset();
                states[i] = s;
                obs[i] = o;
                rnn.reset_row(i);
            } else {
                obs[i] = next;
            }
        }
    }
    let (_, boot) = policy.act(params, &obs, &mut rnn.clone())?;
    for (i, tr) in trajs.iter_mut().enumerate() {
        tr.bootstrap = boot[i];
        if tr.log_probs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training("sampled an action with zero probability".into()));
        }
    }
    Ok(trajs)
}

/// Builds the PPO batch for a set of student rollouts (rows `slot · len + t`).
pub fn student_batch(trajs: &[Trajectory], cfg: &PpoConfig) -> Result<PpoBatch> {
    let mut batch = PpoBatch {
        units: trajs.len(),
        ..Default::default()
    };
    let len = trajs.first().map_or(0, |t| t.len());
    for tr in trajs {
        if tr.len() != len {
            return Err(Error::Shape("rollouts of unequal length".into()));
        }
        let (adv, ret) = compute_gae(
            &tr.rewards,
            &tr.values,
            &tr.dones,
            tr.bootstrap,
            cfg.gamma,
            cfg.gae_lambda,
        )?;
        batch.old_logp.extend(&tr.log_probs);
        batch.old_value.extend(&tr.values);
        batch.advantages.extend(adv);
        batch.returns.extend(ret);
    }
    normalize_advantages(&mut batch.advantages);
    Ok(batch)
}

/// One PPO update of a student on its own rollouts (reward = own return).
pub fn update_student<R: Rng + ?Sized>(
    policy: &StudentPolicy,
    tree: &mut ParamTree,
    trajs: &[Trajectory],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    let batch = student_batch(trajs, cfg)?;
    let mut learners = [Learner { tree, adam: cfg.adam() }];
    ppo_update(&mut learners, cfg, &batch, rng, |g, trees, slots| {
        policy.evaluate(g, Params::new(trees[0]), trajs, slots)
    })
}
