//! Actor-critic trained inside imagination: λ-return targets, two-hot
//! critic regression, and an entropy-regularized actor updated purely by
//! backpropagating value through the world model rollout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{
    symlog, twohot_encode, AdamHyper, DiffError, Graph, Mlp, ParamStore, Tensor, ValueBins, Var,
};
use crate::rng::substream;
use crate::worldmodel::WorldModel;

/// Whether the actor conditions on the full model state or the stochastic
/// part only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActorInput {
    HZ,
    Z,
}

impl ActorInput {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hz" => Some(ActorInput::HZ),
            "z" => Some(ActorInput::Z),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActorInput::HZ => "hz",
            ActorInput::Z => "z",
        }
    }
}

/// Return-estimation and optimization constants.
#[derive(Clone, Debug)]
pub struct PolicyConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Imagination horizon.
    pub horizon: usize,
    pub entropy_scale: f64,
    pub lr: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// EMA decay of the target critic used inside the λ-return bootstrap.
    pub ema_decay: f64,
    pub actor_input: ActorInput,
    pub hidden: usize,
    pub actor_min_std: f64,
    pub bins: usize,
    pub bin_low: f64,
    pub bin_high: f64,
    /// EMA decay of the 5th..95th percentile return range used to normalize
    /// actor returns.
    pub norm_decay: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            gamma: 0.997,
            lambda: 0.95,
            horizon: 15,
            entropy_scale: 3e-4,
            lr: 3e-5,
            adam_eps: 1e-5,
            grad_clip: 100.0,
            ema_decay: 0.98,
            actor_input: ActorInput::HZ,
            hidden: 256,
            actor_min_std: 0.1,
            bins: 255,
            bin_low: -20.0,
            bin_high: 20.0,
            norm_decay: 0.99,
        }
    }
}

/// Per-update policy metrics.
#[derive(Clone, Copy, Debug, Default)]
pub struct PolicyReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub mean_return: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

/// Generalized λ-returns, computed backward:
/// R_t = r_t + γ·c_t·((1−λ)·v_{t+1} + λ·R_{t+1}), with R_last = v_last.
pub fn lambda_returns(
    rewards: &[f64],
    values: &[f64],
    continues: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>, DiffError> {
    let n = rewards.len();
    if values.len() != n || continues.len() != n {
        return Err(DiffError::DimMismatch {
            what: "lambda_returns arrays must share one length",
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut targets = vec![0.0; n];
    targets[n - 1] = values[n - 1];
    for t in (0..n - 1).rev() {
        targets[t] =
            rewards[t] + gamma * continues[t] * ((1.0 - lambda) * values[t + 1] + lambda * targets[t + 1]);
    }
    Ok(targets)
}

/// Tanh-squashed Gaussian actor and two-hot critic with an EMA target
/// critic, each under its own Adam optimizer.
pub struct ActorCritic {
    pub cfg: PolicyConfig,
    pub actor_store: ParamStore,
    pub critic_store: ParamStore,
    ema_store: ParamStore,
    actor: Mlp,
    critic: Mlp,
    ema_critic: Mlp,
    bins: ValueBins,
    action_scale: Vec<f64>,
    deter: usize,
    stoch: usize,
    /// Running percentile range of λ-returns.
    norm_lo: f64,
    norm_hi: f64,
    norm_init: bool,
    updates: u64,
}

impl ActorCritic {
    pub fn new(
        cfg: PolicyConfig,
        deter: usize,
        stoch: usize,
        action_scale: Vec<f64>,
        seed: u64,
    ) -> Self {
        let mut rng = substream(seed, "policy-init");
        let in_dim = match cfg.actor_input {
            ActorInput::HZ => deter + stoch,
            ActorInput::Z => stoch,
        };
        let m = action_scale.len();
        let mut actor_store = ParamStore::new();
        let actor = Mlp::new(
            &mut actor_store,
            "actor",
            in_dim,
            cfg.hidden,
            2 * m,
            1,
            true,
            &mut rng,
        );
        let mut critic_store = ParamStore::new();
        let critic = Mlp::new(
            &mut critic_store,
            "critic",
            deter + stoch,
            cfg.hidden,
            cfg.bins,
            1,
            true,
            &mut rng,
        );
        // EMA mirror: same construction order gives identical keys; values
        // start as a copy of the critic
        let mut ema_rng = substream(seed, "policy-init-ema");
        let mut ema_store = ParamStore::new();
        let ema_critic = Mlp::new(
            &mut ema_store,
            "critic",
            deter + stoch,
            cfg.hidden,
            cfg.bins,
            1,
            true,
            &mut ema_rng,
        );
        for key in critic_store.keys().collect::<Vec<_>>() {
            let v = critic_store.tensor(key).clone();
            ema_store.set_value(key, v);
        }
        let bins = ValueBins::symlog_spaced(cfg.bins, cfg.bin_low, cfg.bin_high);
        ActorCritic {
            cfg,
            actor_store,
            critic_store,
            ema_store,
            actor,
            critic,
            ema_critic,
            bins,
            action_scale,
            deter,
            stoch,
            norm_lo: 0.0,
            norm_hi: 0.0,
            norm_init: false,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn set_updates(&mut self, n: u64) {
        self.updates = n;
    }

    pub fn action_dim(&self) -> usize {
        self.action_scale.len()
    }

    pub fn norm_state(&self) -> (f64, f64, bool) {
        (self.norm_lo, self.norm_hi, self.norm_init)
    }

    pub fn set_norm_state(&mut self, lo: f64, hi: f64, init: bool) {
        self.norm_lo = lo;
        self.norm_hi = hi;
        self.norm_init = init;
    }

    /// EMA store handle (for checkpointing).
    pub fn ema_store(&self) -> &ParamStore {
        &self.ema_store
    }

    pub fn ema_store_mut(&mut self) -> &mut ParamStore {
        &mut self.ema_store
    }

    fn actor_view(&self, g: &mut Graph, states: Var) -> Var {
        match self.cfg.actor_input {
            ActorInput::HZ => states,
            ActorInput::Z => g.slice_cols(states, self.deter, self.deter + self.stoch),
        }
    }

    /// Actor distribution parameters at `states`: (mean, std), each [S, m].
    fn actor_dist(&self, g: &mut Graph, states: Var, frozen: bool) -> (Var, Var) {
        let x = self.actor_view(g, states);
        let out = if frozen {
            self.actor.forward_frozen(g, &self.actor_store, x)
        } else {
            self.actor.forward(g, &self.actor_store, x)
        };
        let m = self.action_dim();
        let mean = g.slice_cols(out, 0, m);
        let raw = g.slice_cols(out, m, 2 * m);
        let sp = g.softplus(raw);
        let std = g.add_const(sp, self.cfg.actor_min_std);
        (mean, std)
    }

    fn scale_const(&self, g: &mut Graph, rows: usize) -> Var {
        let m = self.action_dim();
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(&self.action_scale);
        }
        g.constant(Tensor::from_rows(rows, m, data))
    }

    /// Sample squashed actions with reparameterized noise. Returns
    /// (actions, u, noise values, std); gradients flow into the actor.
    fn sample_actions(
        &self,
        g: &mut Graph,
        states: Var,
        rng: &mut ChaCha8Rng,
        frozen: bool,
    ) -> (Var, Var, Vec<f64>, Var) {
        let (mean, std) = self.actor_dist(g, states, frozen);
        let (rows, m) = g.value(mean).dims2();
        let eps: Vec<f64> = (0..rows * m).map(|_| rng.sample(StandardNormal)).collect();
        let e = g.constant(Tensor::from_rows(rows, m, eps.clone()));
        let noise = g.mul(std, e);
        let u = g.add(mean, noise);
        let t = g.tanh(u);
        let sc = self.scale_const(g, rows);
        let a = g.mul(t, sc);
        (a, u, eps, std)
    }

    /// Negative log-density of the squashed sample, per row [S], with the
    /// tanh change-of-variables correction. With u = mean + std*eps the
    /// Gaussian quadratic term reduces to the constant -eps^2/2.
    fn neg_log_prob(&self, g: &mut Graph, u: Var, std: Var, eps: &[f64]) -> Var {
        let (rows, m) = g.value(u).dims2();
        let ln_std = g.ln(std);
        let ln_std_sum = g.sum_cols(ln_std);
        let mut const_part = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = -0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
            for c in 0..m {
                let e = eps[r * m + c];
                acc -= 0.5 * e * e;
            }
            const_part[r] = acc;
        }
        let base = g.constant(Tensor::from_vec(const_part));
        let log_n = g.sub(base, ln_std_sum);
        // tanh correction: sum_d log(1 - tanh^2(u_d)) = sum 2(ln2 - u - softplus(-2u))
        let neg2u = g.scale(u, -2.0);
        let sp = g.softplus(neg2u);
        let ln2 = std::f64::consts::LN_2;
        let t1 = g.add_const(u, -ln2); // u - ln2
        let t2 = g.add(t1, sp); // u - ln2 + softplus(-2u)
        let corr_terms = g.scale(t2, -2.0); // 2(ln2 - u - softplus(-2u))
        let corr = g.sum_cols(corr_terms);
        let scale_ln: f64 = self.action_scale.iter().map(|s| s.ln()).sum();
        let log_pi_unshifted = g.add(log_n, corr);
        let log_pi = g.add_const(log_pi_unshifted, -scale_ln);
        g.neg(log_pi)
    }

    /// Critic logits at `states`.
    fn critic_logits(&self, g: &mut Graph, states: Var, frozen: bool) -> Var {
        if frozen {
            self.critic.forward_frozen(g, &self.critic_store, states)
        } else {
            self.critic.forward(g, &self.critic_store, states)
        }
    }

    /// Decoded value of the EMA target critic, per row [S].
    fn ema_value(&self, g: &mut Graph, states: Var) -> Var {
        let logits = self.ema_critic.forward_frozen(g, &self.ema_store, states);
        self.decode_value(g, logits)
    }

    /// Decoded value of the trained critic at a concrete state.
    pub fn critic_value(&self, state: &[f64]) -> f64 {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(1, state.len(), state.to_vec()));
        let logits = self.critic_logits(&mut g, s, true);
        let v = self.decode_value(&mut g, logits);
        g.value(v).item()
    }

    fn decode_value(&self, g: &mut Graph, logits: Var) -> Var {
        let lsm = g.log_softmax_rows(logits);
        let probs = g.exp(lsm);
        let col = g.constant(Tensor::from_rows(
            self.bins.count(),
            1,
            self.bins.positions().to_vec(),
        ));
        let sym = g.matmul(probs, col);
        let v = g.symexp(sym);
        let (rows, _) = g.value(v).dims2();
        g.reshape(v, vec![rows])
    }

    /// Action at a concrete state feature; `mean_mode` uses the squashed
    /// mean (evaluation), otherwise samples (exploration).
    pub fn act(&self, state: &[f64], mean_mode: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(1, state.len(), state.to_vec()));
        let (mean, std) = self.actor_dist(&mut g, s, true);
        let u: Vec<f64> = if mean_mode {
            g.value(mean).data().to_vec()
        } else {
            g.value(mean)
                .data()
                .iter()
                .zip(g.value(std).data())
                .map(|(&m, &s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        u.iter()
            .zip(&self.action_scale)
            .map(|(&ui, &sc)| ui.tanh() * sc)
            .collect()
    }

    /// One imagination-phase update of actor and critic from the given
    /// start states. World-model parameters are frozen throughout.
    pub fn train(
        &mut self,
        world: &WorldModel,
        start_states: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<PolicyReport, DiffError> {
        let horizon = self.cfg.horizon;
        let s_count = start_states.dims2().0;
        let mut g = Graph::new();
        let start = g.constant(start_states.clone());

        // rollout with actor-driven actions; aux carries (u, eps, std)
        let mut aux: Vec<(Var, Vec<f64>, Var)> = Vec::with_capacity(horizon);
        let traj = {
            let this = &*self;
            let aux_ref = &mut aux;
            world.imagine(&mut g, start, horizon, true, rng, |g, s| {
                let (a, u, eps, std) = this.sample_actions(g, s, rng, false);
                aux_ref.push((u, eps, std));
                a
            })
        };

        // values from the EMA critic at states 1..=H
        let values: Vec<Var> = (1..=horizon)
            .map(|i| self.ema_value(&mut g, traj.states[i]))
            .collect();
        let rewards: Vec<Var> = traj
            .rewards
            .iter()
            .map(|&r| {
                let (rows, _) = g.value(r).dims2();
                g.reshape(r, vec![rows])
            })
            .collect();
        let conts: Vec<Var> = traj
            .continues
            .iter()
            .map(|&c| {
                let (rows, _) = g.value(c).dims2();
                g.reshape(c, vec![rows])
            })
            .collect();

        // lambda returns, backward over the horizon (graph-side)
        let mut targets: Vec<Option<Var>> = vec![None; horizon];
        targets[horizon - 1] = Some(values[horizon - 1]);
        for t in (0..horizon - 1).rev() {
            let v_next = g.scale(values[t + 1], 1.0 - self.cfg.lambda);
            let r_next = g.scale(targets[t + 1].unwrap(), self.cfg.lambda);
            let mix = g.add(v_next, r_next);
            let disc = g.scale(conts[t], self.cfg.gamma);
            let boot = g.mul(disc, mix);
            targets[t] = Some(g.add(rewards[t], boot));
        }
        let targets: Vec<Var> = targets.into_iter().map(Option::unwrap).collect();

        // discount weights w_1 = 1, w_{t+1} = w_t * gamma * c_t (values)
        let mut weights: Vec<Vec<f64>> = Vec::with_capacity(horizon);
        weights.push(vec![1.0; s_count]);
        for t in 1..horizon {
            let c_prev = g.value(conts[t - 1]).data();
            let prev = &weights[t - 1];
            weights.push(
                prev.iter()
                    .zip(c_prev)
                    .map(|(&w, &c)| w * self.cfg.gamma * c)
                    .collect(),
            );
        }

        // return normalization from this batch's target values
        let mut flat: Vec<f64> = Vec::with_capacity(horizon * s_count);
        for &t in &targets {
            flat.extend_from_slice(g.value(t).data());
        }
        let mean_return = flat.iter().sum::<f64>() / flat.len() as f64;
        let (p5, p95) = percentiles(&mut flat);
        if self.norm_init {
            let d = self.cfg.norm_decay;
            self.norm_lo = d * self.norm_lo + (1.0 - d) * p5;
            self.norm_hi = d * self.norm_hi + (1.0 - d) * p95;
        } else {
            self.norm_lo = p5;
            self.norm_hi = p95;
            self.norm_init = true;
        }
        let scale = (self.norm_hi - self.norm_lo).max(1.0);

        // actor loss: -(weighted normalized returns) - eta * entropy
        let mut ret_acc: Option<Var> = None;
        let mut ent_acc: Option<Var> = None;
        for t in 0..horizon {
            let w = g.constant(Tensor::from_vec(weights[t].clone()));
            let wr = g.mul(w, targets[t]);
            ret_acc = Some(match ret_acc {
                None => wr,
                Some(acc) => g.add(acc, wr),
            });
            let (u, std) = aux[t];
            let nlp = self.neg_log_prob(&mut g, u, std);
            ent_acc = Some(match ent_acc {
                None => nlp,
                Some(acc) => g.add(acc, nlp),
            });
        }
        let ret_sum = ret_acc.unwrap();
        let ret_mean = g.mean_all(ret_sum);
        let ret_term = g.scale(ret_mean, -1.0 / (horizon as f64 * scale));
        let ent_sum = ent_acc.unwrap();
        let entropy_est = g.mean_all(ent_sum);
        let entropy_est = g.scale(entropy_est, 1.0 / horizon as f64);
        let ent_term = g.scale(entropy_est, -self.cfg.entropy_scale);
        let actor_loss = g.add(ret_term, ent_term);

        // critic loss: two-hot regression onto stop-gradient targets at
        // detached states
        let mut critic_acc: Option<Var> = None;
        for t in 0..horizon {
            let state_sg = g.stop_grad(traj.states[t + 1]);
            let logits = self.critic_logits(&mut g, state_sg, false);
            let lsm = g.log_softmax_rows(logits);
            let tvals = g.value(targets[t]).data().to_vec();
            let mut rows = Vec::with_capacity(s_count * self.bins.count());
            for &v in &tvals {
                rows.extend(
                    twohot_encode(symlog(v), self.bins.positions()).expect("valid bins"),
                );
            }
            let target = g.constant(Tensor::from_rows(s_count, self.bins.count(), rows));
            let prod = g.mul(target, lsm);
            let rowsum = g.sum_cols(prod);
            let w = g.constant(Tensor::from_vec(weights[t].clone()));
            let weighted = g.mul(w, rowsum);
            let ce = g.mean_all(weighted);
            let ce = g.neg(ce);
            critic_acc = Some(match critic_acc {
                None => ce,
                Some(acc) => g.add(acc, ce),
            });
        }
        let critic_sum = critic_acc.unwrap();
        let critic_loss = g.scale(critic_sum, 1.0 / horizon as f64);

        let total = g.add(actor_loss, critic_loss);
        g.backward(total)?;

        let report = PolicyReport {
            actor_loss: g.value(actor_loss).item(),
            critic_loss: g.value(critic_loss).item(),
            entropy: g.value(entropy_est).item(),
            mean_return,
            actor_grad_norm: 0.0,
            critic_grad_norm: 0.0,
        };

        let hyper = AdamHyper::new(self.cfg.lr, self.cfg.adam_eps);
        let mut a_grads = g.store_grads(&self.actor_store);
        let a_norm = self
            .actor_store
            .adam_update(&mut a_grads, &hyper, self.cfg.grad_clip);
        let mut c_grads = g.store_grads(&self.critic_store);
        let c_norm = self
            .critic_store
            .adam_update(&mut c_grads, &hyper, self.cfg.grad_clip);

        // EMA target critic update
        let d = self.cfg.ema_decay;
        for key in self.critic_store.keys().collect::<Vec<_>>() {
            let cur = self.critic_store.tensor(key).data().to_vec();
            let ema = self.ema_store.tensor_mut(key);
            for (e, c) in ema.data_mut().iter_mut().zip(cur) {
                *e = d * *e + (1.0 - d) * c;
            }
        }
        self.updates += 1;
        Ok(PolicyReport {
            actor_grad_norm: a_norm,
            critic_grad_norm: c_norm,
            ..report
        })
    }
}

fn percentiles(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let at = |q: f64| values[(q * (n - 1) as f64).round() as usize];
    (at(0.05), at(0.95))
}
