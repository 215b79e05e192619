use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{ReplayBuffer, Transition};
use crate::error::{Error, Result};
use crate::nn::{sigmoid_scalar, softplus_scalar, Activation, AdamState, Graph, Mlp, ParamVector, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub alpha_ent: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub buffer_capacity: usize,
    /// Two value / target-value networks with `min_j ψ̄_j(s′)` in the Q target.
    pub twin_value_targets: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            alpha_ent: 0.2,
            gamma: 0.99,
            tau: 0.1,
            batch_size: 64,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            buffer_capacity: 100_000,
            twin_value_targets: false,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("gamma and tau must lie in [0,1]".into()));
        }
        if !(self.alpha_ent >= 0.0) {
            return Err(Error::Config("alpha_ent must be >= 0".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("batch_size and buffer_capacity must be positive".into()));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    /// `a_i = 1` iff `p_i > 0.5`.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    Policy,
    Value(usize),
    TargetValue(usize),
    Q1,
    Q2,
}

/// A loss together with the network it trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SacLoss {
    Value,
    Q1,
    Q2,
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub value_loss: f64,
    pub q_loss: f64,
    pub policy_loss: f64,
}

/// `a_i = 1` iff `logit_i > 0`, i.e. `σ(logit_i) > 0.5`.
pub fn greedy_from_logits<T: Scalar>(logits: &[T]) -> Vec<bool> {
    logits.iter().map(|&l| l > T::zero()).collect()
}

/// `ψ̄ ← τψ + (1−τ)ψ̄`.
pub fn soft_update<T: Scalar>(target: &mut ParamVector<T>, online: &ParamVector<T>, tau: T) -> Result<()> {
    target.check_layout(online)?;
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(Error::invalid(format!("tau {tau} outside [0,1]")));
    }
    for (t, &o) in target.values_mut().iter_mut().zip(online.values()) {
        *t = tau * o + (T::one() - tau) * *t;
    }
    Ok(())
}

/// Soft actor-critic agent for one cache node.
#[derive(Debug, Clone)]
pub struct SacAgent<T: Scalar> {
    cfg: SacConfig,
    state_dim: usize,
    action_dim: usize,
    policy_net: Mlp,
    value_net: Mlp,
    q_net: Mlp,
    policy: ParamVector<T>,
    values: Vec<ParamVector<T>>,
    targets: Vec<ParamVector<T>>,
    q: [ParamVector<T>; 2],
    adam_policy: AdamState<T>,
    adam_values: Vec<AdamState<T>>,
    adam_q: [AdamState<T>; 2],
    updates: u64,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl<T: Scalar> SacAgent<T> {
    pub fn new(cfg: SacConfig, state_dim: usize, action_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if state_dim == 0 || action_dim == 0 {
            return Err(Error::Config("state and action dims must be positive".into()));
        }
        let policy_net = Mlp::new("pi", &sizes(state_dim, &cfg.hidden, action_dim));
        let value_net = Mlp::new("v", &sizes(state_dim, &cfg.hidden, 1));
        let q_net = Mlp::new("q", &sizes(state_dim + action_dim, &cfg.hidden, 1));
        let build = |m: &Mlp| m.declare(crate::nn::SegmentLayout::builder()).build();
        let (pl, vl, ql) = (build(&policy_net)?, build(&value_net)?, build(&q_net)?);
        let policy = ParamVector::glorot(pl, rng);
        let n_values = if cfg.twin_value_targets { 2 } else { 1 };
        let values: Vec<ParamVector<T>> = (0..n_values).map(|_| ParamVector::glorot(vl.clone(), rng)).collect();
        let targets = values.clone();
        let q = [ParamVector::glorot(ql.clone(), rng), ParamVector::glorot(ql, rng)];
        Ok(Self {
            adam_policy: AdamState::for_params(&policy),
            adam_values: values.iter().map(AdamState::for_params).collect(),
            adam_q: [AdamState::for_params(&q[0]), AdamState::for_params(&q[1])],
            cfg,
            state_dim,
            action_dim,
            policy_net,
            value_net,
            q_net,
            policy,
            values,
            targets,
            q,
            updates: 0,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn value_nets(&self) -> usize {
        self.values.len()
    }

    pub fn net(&self, n: Net) -> &ParamVector<T> {
        match n {
            Net::Policy => &self.policy,
            Net::Value(j) => &self.values[j],
            Net::TargetValue(j) => &self.targets[j],
            Net::Q1 => &self.q[0],
            Net::Q2 => &self.q[1],
        }
    }

    pub fn net_mut(&mut self, n: Net) -> &mut ParamVector<T> {
        match n {
            Net::Policy => &mut self.policy,
            Net::Value(j) => &mut self.values[j],
            Net::TargetValue(j) => &mut self.targets[j],
            Net::Q1 => &mut self.q[0],
            Net::Q2 => &mut self.q[1],
        }
    }

    fn rows(&self, rows: &[&[f64]], width: usize, op: &'static str) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::shape(op, format!("row width {} != {}", r.len(), width)));
            }
            data.extend(r.iter().map(|&v| T::lit(v)));
        }
        Tensor::new(vec![rows.len(), width], data)
    }

    fn run(&self, g: &mut Graph<T>, mlp: &Mlp, p: &ParamVector<T>, x: Var) -> Result<Var> {
        let b = g.bind(p);
        mlp.forward(g, b, x, Activation::Tanh, Activation::Identity)
    }

    pub fn logits(&self, state: &[f64]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let s = g.input(self.rows(&[state], self.state_dim, "policy")?)?;
        let l = self.run(&mut g, &self.policy_net, &self.policy, s)?;
        Ok(g.value(l).data().to_vec())
    }

    pub fn probs(&self, state: &[f64]) -> Result<Vec<T>> {
        Ok(self.logits(state)?.into_iter().map(sigmoid_scalar).collect())
    }

    pub fn sample_action(&self, state: &[f64], mode: ActionMode, rng: &mut impl Rng) -> Result<Vec<bool>> {
        let logits = self.logits(state)?;
        Ok(match mode {
            ActionMode::Greedy => greedy_from_logits(&logits),
            ActionMode::Stochastic => logits
                .into_iter()
                .map(|l| {
                    let u: f64 = rng.random();
                    u < sigmoid_scalar(l).to_f64_lossy()
                })
                .collect(),
        })
    }

    /// `log π(a|s) = −Σ [a·softplus(−l) + (1−a)·softplus(l)]`.
    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<T> {
        let logits = self.logits(state)?;
        if action.len() != logits.len() {
            return Err(Error::shape("log_prob", "action width"));
        }
        Ok(-logits
            .iter()
            .zip(action)
            .map(|(&l, &a)| {
                let a = T::lit(a);
                a * softplus_scalar(-l) + (T::one() - a) * softplus_scalar(l)
            })
            .sum::<T>())
    }

    pub fn q_values(&self, state: &[f64], action: &[f64]) -> Result<(T, T)> {
        let mut g = Graph::new();
        let s = g.input(self.rows(&[state], self.state_dim, "q")?)?;
        let a = g.input(self.rows(&[action], self.action_dim, "q")?)?;
        let sa = g.concat(&[s, a])?;
        let q1 = self.run(&mut g, &self.q_net, &self.q[0], sa)?;
        let q2 = self.run(&mut g, &self.q_net, &self.q[1], sa)?;
        Ok((g.value(q1).item()?, g.value(q2).item()?))
    }

    pub fn value(&self, state: &[f64], net: Net) -> Result<T> {
        let p = match net {
            Net::Value(_) | Net::TargetValue(_) => self.net(net),
            _ => return Err(Error::invalid("value() needs a value network")),
        };
        let mut g = Graph::new();
        let s = g.input(self.rows(&[state], self.state_dim, "value")?)?;
        let v = self.run(&mut g, &self.value_net, p, s)?;
        g.value(v).item()
    }

    /// `min_i Q_i(s, ã) − α·log π(ã|s)` for a given fresh action `ã`.
    pub fn value_target(&self, state: &[f64], fresh: &[f64]) -> Result<T> {
        Ok(self.value_targets(&[state], &[fresh])?[0])
    }

    /// `R + γ·min_j ψ̄_j(s′)`.
    pub fn q_target(&self, reward: f64, next_state: &[f64]) -> Result<T> {
        Ok(self.q_targets(&[reward], &[next_state])?[0])
    }

    /// Row-wise [`Self::value_target`] evaluated as one batch.
    fn value_targets(&self, states: &[&[f64]], fresh: &[&[f64]]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let s = g.input(self.rows(states, self.state_dim, "value target")?)?;
        let a = g.input(self.rows(fresh, self.action_dim, "value target")?)?;
        let l = self.run(&mut g, &self.policy_net, &self.policy, s)?;
        let sa = g.concat(&[s, a])?;
        let q1 = self.run(&mut g, &self.q_net, &self.q[0], sa)?;
        let q2 = self.run(&mut g, &self.q_net, &self.q[1], sa)?;
        let (l, q1, q2) = (g.value(l).data(), g.value(q1).data(), g.value(q2).data());
        let alpha = T::lit(self.cfg.alpha_ent);
        let k = self.action_dim;
        Ok(fresh
            .iter()
            .enumerate()
            .map(|(r, act)| {
                let neg_logp: T = l[r * k..(r + 1) * k]
                    .iter()
                    .zip(act.iter())
                    .map(|(&l, &a)| {
                        let a = T::lit(a);
                        a * softplus_scalar(-l) + (T::one() - a) * softplus_scalar(l)
                    })
                    .sum();
                q1[r].min(q2[r]) + alpha * neg_logp
            })
            .collect())
    }

    fn q_targets(&self, rewards: &[f64], next: &[&[f64]]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let s = g.input(self.rows(next, self.state_dim, "q target")?)?;
        let mut m = vec![T::infinity(); next.len()];
        for t in &self.targets {
            let v = self.run(&mut g, &self.value_net, t, s)?;
            for (m, &v) in m.iter_mut().zip(g.value(v).data()) {
                *m = m.min(v);
            }
        }
        let gamma = T::lit(self.cfg.gamma);
        Ok(rewards.iter().zip(m).map(|(&r, m)| T::lit(r) + gamma * m).collect())
    }

    fn column(&self, vals: Vec<T>) -> Result<Tensor<T>> {
        let n = vals.len();
        Tensor::new(vec![n, 1], vals)
    }

    /// Builds one loss on a fresh graph; returns its value and, if asked,
    /// the gradient with respect to the trained network.
    fn loss(&self, which: SacLoss, value_idx: usize, batch: &[&Transition], fresh: &[Vec<f64>], grad: bool) -> Result<(T, Option<Vec<T>>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
        let mut g = Graph::new();
        let s = g.input(self.rows(&states, self.state_dim, "sac loss")?)?;
        let (loss, trained) = match which {
            SacLoss::Value => {
                if fresh.len() != batch.len() {
                    return Err(Error::shape("value_loss", "one fresh action per transition required"));
                }
                let fresh: Vec<&[f64]> = fresh.iter().map(|a| a.as_slice()).collect();
                let y = self.value_targets(&states, &fresh)?;
                let y = g.input(self.column(y)?)?;
                let p = &self.values[value_idx];
                let b = g.bind(p);
                let v = self.value_net.forward(&mut g, b, s, Activation::Tanh, Activation::Identity)?;
                let m = g.mse(v, y)?;
                (g.scale(m, T::half())?, b)
            }
            SacLoss::Q1 | SacLoss::Q2 => {
                let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
                let next: Vec<&[f64]> = batch.iter().map(|t| t.next_state.as_slice()).collect();
                let y = self.q_targets(&rewards, &next)?;
                let y = g.input(self.column(y)?)?;
                let actions: Vec<&[f64]> = batch.iter().map(|t| t.action.as_slice()).collect();
                let a = g.input(self.rows(&actions, self.action_dim, "q_loss")?)?;
                let sa = g.concat(&[s, a])?;
                let p = &self.q[if which == SacLoss::Q1 { 0 } else { 1 }];
                let b = g.bind(p);
                let q = self.q_net.forward(&mut g, b, sa, Activation::Tanh, Activation::Identity)?;
                (g.mse(q, y)?, b)
            }
            SacLoss::Policy => {
                let b = g.bind(&self.policy);
                let l = self.policy_net.forward(&mut g, b, s, Activation::Tanh, Activation::Identity)?;
                let p = g.sigmoid(l)?;
                let neg_l = g.scale(l, -T::one())?;
                let sp_neg = g.softplus(neg_l)?;
                let sp = g.softplus(l)?;
                // Σ p ln p + (1−p) ln(1−p) = −Σ [p·softplus(−l) + (1−p)·softplus(l)]
                let t1 = g.mul(p, sp_neg)?;
                let q_ = g.one_minus(p)?;
                let t2 = g.mul(q_, sp)?;
                let both = g.add(t1, t2)?;
                let neg_h = g.sum_last(both)?;
                let ent = g.scale(neg_h, -T::lit(self.cfg.alpha_ent))?;
                let sa = g.concat(&[s, p])?;
                let q1 = self.run(&mut g, &self.q_net, &self.q[0], sa)?;
                let q2 = self.run(&mut g, &self.q_net, &self.q[1], sa)?;
                let qmin = g.minimum(q1, q2)?;
                let qmin = g.sum_last(qmin)?;
                let d = g.sub(ent, qmin)?;
                (g.mean(d)?, b)
            }
        };
        let value = g.value(loss).item()?;
        if !grad {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        Ok((value, Some(grads.get(trained).to_vec())))
    }

    /// `½·mean(V_ψ(s) − [min_i Q_i(s, ã) − α·log π(ã|s)])²`, averaged over value nets.
    pub fn value_loss(&self, batch: &[&Transition], fresh: &[Vec<f64>]) -> Result<T> {
        let mut total = T::zero();
        for j in 0..self.values.len() {
            total += self.loss(SacLoss::Value, j, batch, fresh, false)?.0;
        }
        Ok(total / T::lit(self.values.len() as f64))
    }

    /// Sum over both critics of `mean(Q_i(s,a) − Q_target)²`.
    pub fn q_loss(&self, batch: &[&Transition]) -> Result<T> {
        Ok(self.loss(SacLoss::Q1, 0, batch, &[], false)?.0 + self.loss(SacLoss::Q2, 0, batch, &[], false)?.0)
    }

    /// `mean[α·Σ(p ln p + (1−p) ln(1−p)) − min_i Q_i(s, p)]` with `p = σ(logits)`.
    pub fn policy_loss(&self, batch: &[&Transition]) -> Result<T> {
        Ok(self.loss(SacLoss::Policy, 0, batch, &[], false)?.0)
    }

    /// Loss value and its gradient with respect to the network it trains
    /// (value net 0 for [`SacLoss::Value`]).
    pub fn loss_gradient(&self, which: SacLoss, batch: &[&Transition], fresh: &[Vec<f64>]) -> Result<(T, Vec<T>)> {
        let (v, g) = self.loss(which, 0, batch, fresh, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn sample_fresh(&self, batch: &[&Transition], rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
        let mut g = Graph::new();
        let s = g.input(self.rows(&states, self.state_dim, "policy")?)?;
        let l = self.run(&mut g, &self.policy_net, &self.policy, s)?;
        Ok(g.value(l)
            .data()
            .chunks(self.action_dim)
            .map(|row| {
                row.iter()
                    .map(|&l| {
                        let u: f64 = rng.random();
                        if u < sigmoid_scalar(l).to_f64_lossy() { 1.0 } else { 0.0 }
                    })
                    .collect()
            })
            .collect())
    }

    /// One update of ψ, θ1/θ2, φ and ψ̄ on a sampled batch. No-op unless the
    /// buffer holds more than `batch_size` transitions.
    pub fn train_step(&mut self, buffer: &ReplayBuffer, rng: &mut impl Rng) -> Result<Option<LossReport>> {
        if buffer.len() <= self.cfg.batch_size {
            return Ok(None);
        }
        let batch = buffer.sample(self.cfg.batch_size, rng)?;
        let fresh = self.sample_fresh(&batch, rng)?;
        let critic_lr = T::lit(self.cfg.critic_lr);
        let mut report = LossReport::default();

        for j in 0..self.values.len() {
            let (v, g) = self.loss(SacLoss::Value, j, &batch, &fresh, true)?;
            let p = &mut self.values[j];
            p.grads_mut().copy_from_slice(&g.expect("gradient requested"));
            self.adam_values[j].update(p, critic_lr)?;
            report.value_loss += v.to_f64_lossy() / self.values.len() as f64;
        }
        for (i, which) in [SacLoss::Q1, SacLoss::Q2].into_iter().enumerate() {
            let (v, g) = self.loss(which, 0, &batch, &[], true)?;
            let p = &mut self.q[i];
            p.grads_mut().copy_from_slice(&g.expect("gradient requested"));
            self.adam_q[i].update(p, critic_lr)?;
            report.q_loss += v.to_f64_lossy();
        }
        let (v, g) = self.loss(SacLoss::Policy, 0, &batch, &[], true)?;
        self.policy.grads_mut().copy_from_slice(&g.expect("gradient requested"));
        self.adam_policy.update(&mut self.policy, T::lit(self.cfg.actor_lr))?;
        report.policy_loss = v.to_f64_lossy();

        let tau = T::lit(self.cfg.tau);
        for (t, v) in self.targets.iter_mut().zip(&self.values) {
            soft_update(t, v, tau)?;
        }
        self.updates += 1;
        Ok(Some(report))
    }
}
