//! Reconstruction-free recurrent state-space world model.
//!
//! State splits into a deterministic recurrent vector h and a stochastic
//! Gaussian sample z. The posterior sees the encoded observation, the prior
//! sees h only, and supervision comes from current-step reward/continuation
//! prediction, multi-step reward prediction along prior rollouts, and the
//! posterior/prior KL. The RGB-D baseline adds image reconstruction on top.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{
    symlog, twohot_encode, AdamHyper, DiagonalGaussian, DiffError, Graph, GruCell,
    Mlp, ParamStore, Tensor, ValueBins, Var, STD_FLOOR,
};
use crate::encoders::{
    CnnConfig, CnnDecoder, CnnEncoder, ObsEncoder, ObsInput, PointConvConfig, PointConvEncoder,
    PointNetConfig, PointNetEncoder,
};
use crate::rng::substream;
use crate::scenesim::RgbdImage;

use super::buffer::{ReplayBuffer, Segment};

/// Whether the model is the reconstruction-free point-cloud variant or the
/// RGB-D baseline with depth reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Pcwm,
    RgbdWm,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pcwm" => Some(ModelKind::Pcwm),
            "rgbd-wm" => Some(ModelKind::RgbdWm),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Pcwm => "pcwm",
            ModelKind::RgbdWm => "rgbd-wm",
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorldModelConfig {
    pub model_kind: ModelKind,
    /// Deterministic state width h.
    pub deter: usize,
    /// Stochastic state width z.
    pub stoch: usize,
    /// Encoder embedding width d.
    pub embed: usize,
    /// Hidden width of the posterior/prior/reward/continuation MLPs.
    pub hidden: usize,
    pub action_dim: usize,
    pub batch: usize,
    pub seq_len: usize,
    /// Multi-step reward rollout length H.
    pub multistep: usize,
    pub lr: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub kl_alpha: f64,
    pub free_bits: f64,
    pub w_current: f64,
    pub w_multi: f64,
    pub w_kl: f64,
    pub w_recon: f64,
    pub bins: usize,
    /// Two-hot grid bounds in symlog space.
    pub bin_low: f64,
    pub bin_high: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        WorldModelConfig {
            model_kind: ModelKind::Pcwm,
            deter: 256,
            stoch: 32,
            embed: 256,
            hidden: 256,
            action_dim: 4,
            batch: 8,
            seq_len: 64,
            multistep: 5,
            lr: 1e-4,
            adam_eps: 1e-8,
            grad_clip: 1000.0,
            kl_alpha: 0.8,
            free_bits: 1.0,
            w_current: 1.0,
            w_multi: 1.0,
            w_kl: 1.0,
            w_recon: 1.0,
            bins: 255,
            bin_low: -20.0,
            bin_high: 20.0,
        }
    }
}

/// Loss components of one world-model update.
#[derive(Clone, Copy, Debug, Default)]
pub struct WMLossReport {
    pub reward_nll: f64,
    pub continuation_bce: f64,
    pub multistep_nll: f64,
    pub kl_value: f64,
    pub recon_nll: f64,
    pub total: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
}

/// Acting-time latent state.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
}

impl LatentState {
    pub fn feature(&self) -> Vec<f64> {
        let mut f = self.h.clone();
        f.extend_from_slice(&self.z);
        f
    }
}

/// Encoder selection and sizing.
pub enum EncoderSpec {
    PointConv(PointConvConfig),
    PointNet(PointNetConfig),
    Cnn(CnnConfig),
}

/// Latent trajectory produced by closed-loop imagination. `states[0]` is the
/// start state; `rewards[i]`/`continues[i]` belong to `states[i+1]`.
pub struct Imagined {
    pub states: Vec<Var>,
    pub actions: Vec<Var>,
    pub rewards: Vec<Var>,
    pub continues: Vec<Var>,
}

/// Per-sequence reward diagnostics used by the overfit checks.
pub struct RewardPredictions {
    /// Decoded current-step predictions, index t.
    pub current: Vec<f64>,
    /// (t, i, decoded prediction) for prior rollouts of depth i from t.
    pub multistep: Vec<(usize, usize, f64)>,
    /// Clipped KL loss value per step.
    pub kl: Vec<f64>,
}

pub struct WorldModel {
    pub cfg: WorldModelConfig,
    pub store: ParamStore,
    pub encoder: ObsEncoder,
    gru: GruCell,
    posterior_mlp: Mlp,
    prior_mlp: Mlp,
    reward_head: Mlp,
    cont_head: Mlp,
    decoder: Option<CnnDecoder>,
    bins: ValueBins,
    updates: u64,
}

struct DistVars {
    mean: Var,
    std: Var,
}

impl WorldModel {
    pub fn new(cfg: WorldModelConfig, enc: EncoderSpec, seed: u64) -> Result<Self, DiffError> {
        let mut rng = substream(seed, "model-init");
        let mut store = ParamStore::new();
        let encoder = match (&cfg.model_kind, enc) {
            (ModelKind::Pcwm, EncoderSpec::PointConv(c)) => {
                ObsEncoder::PointConv(PointConvEncoder::new(&mut store, "enc", c, &mut rng)?)
            }
            (ModelKind::Pcwm, EncoderSpec::PointNet(c)) => {
                ObsEncoder::PointNet(PointNetEncoder::new(&mut store, "enc", c, &mut rng))
            }
            (ModelKind::RgbdWm, EncoderSpec::Cnn(c)) => {
                ObsEncoder::Cnn(CnnEncoder::new(&mut store, "enc", c, &mut rng)?)
            }
            _ => {
                return Err(DiffError::InvalidArg {
                    what: "encoder kind does not match model kind (pcwm wants a point encoder, rgbd-wm wants cnn-rgbd)",
                })
            }
        };
        if encoder.embed_dim() != cfg.embed {
            return Err(DiffError::InvalidArg {
                what: "encoder embedding width must equal the configured embed dim",
            });
        }
        let gru = GruCell::new(
            &mut store,
            "rssm.gru",
            cfg.stoch + cfg.action_dim,
            cfg.deter,
            &mut rng,
        );
        let posterior_mlp = Mlp::new(
            &mut store,
            "rssm.posterior",
            cfg.deter + cfg.embed,
            cfg.hidden,
            2 * cfg.stoch,
            1,
            false,
            &mut rng,
        );
        let prior_mlp = Mlp::new(
            &mut store,
            "rssm.prior",
            cfg.deter,
            cfg.hidden,
            2 * cfg.stoch,
            1,
            false,
            &mut rng,
        );
        let reward_head = Mlp::new(
            &mut store,
            "head.reward",
            cfg.deter + cfg.stoch,
            cfg.hidden,
            cfg.bins,
            1,
            true,
            &mut rng,
        );
        let cont_head = Mlp::new(
            &mut store,
            "head.cont",
            cfg.deter + cfg.stoch,
            cfg.hidden,
            1,
            1,
            true,
            &mut rng,
        );
        let decoder = match cfg.model_kind {
            ModelKind::RgbdWm => {
                let ObsEncoder::Cnn(enc) = &encoder else {
                    unreachable!()
                };
                Some(CnnDecoder::new(
                    &mut store,
                    "dec",
                    enc.cfg.clone(),
                    cfg.deter + cfg.stoch,
                    &mut rng,
                )?)
            }
            ModelKind::Pcwm => None,
        };
        let bins = ValueBins::symlog_spaced(cfg.bins, cfg.bin_low, cfg.bin_high);
        Ok(WorldModel {
            cfg,
            store,
            encoder,
            gru,
            posterior_mlp,
            prior_mlp,
            reward_head,
            cont_head,
            decoder,
            bins,
            updates: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn set_updates(&mut self, n: u64) {
        self.updates = n;
    }

    pub fn bins(&self) -> &ValueBins {
        &self.bins
    }

    pub fn initial_state(&self) -> LatentState {
        LatentState {
            h: vec![0.0; self.cfg.deter],
            z: vec![0.0; self.cfg.stoch],
        }
    }

    // ---- graph building blocks ----

    fn dist_from(&self, g: &mut Graph, raw: Var) -> DistVars {
        let z = self.cfg.stoch;
        let mean = g.slice_cols(raw, 0, z);
        let rawstd = g.slice_cols(raw, z, 2 * z);
        let sp = g.softplus(rawstd);
        let std = g.add_const(sp, STD_FLOOR);
        DistVars { mean, std }
    }

    fn sample(&self, g: &mut Graph, dist: &DistVars, rng: &mut ChaCha8Rng) -> Var {
        let (r, c) = g.value(dist.mean).dims2();
        let eps: Vec<f64> = (0..r * c).map(|_| rng.sample(StandardNormal)).collect();
        let e = g.constant(Tensor::from_rows(r, c, eps));
        let noise = g.mul(dist.std, e);
        g.add(dist.mean, noise)
    }

    fn posterior_graph(
        &self,
        g: &mut Graph,
        h: Var,
        embed: Var,
        frozen: bool,
    ) -> DistVars {
        let x = g.concat_cols(h, embed);
        let raw = if frozen {
            self.posterior_mlp.forward_frozen(g, &self.store, x)
        } else {
            self.posterior_mlp.forward(g, &self.store, x)
        };
        self.dist_from(g, raw)
    }

    fn prior_graph(&self, g: &mut Graph, h: Var, frozen: bool) -> DistVars {
        let raw = if frozen {
            self.prior_mlp.forward_frozen(g, &self.store, h)
        } else {
            self.prior_mlp.forward(g, &self.store, h)
        };
        self.dist_from(g, raw)
    }

    fn recurrent_graph(&self, g: &mut Graph, z: Var, action: Var, h: Var, frozen: bool) -> Var {
        let x = g.concat_cols(z, action);
        if frozen {
            self.gru.forward_frozen(g, &self.store, x, h)
        } else {
            self.gru.forward(g, &self.store, x, h)
        }
    }

    fn state_var(&self, g: &mut Graph, h: Var, z: Var) -> Var {
        g.concat_cols(h, z)
    }

    fn reward_logits(&self, g: &mut Graph, state: Var, frozen: bool) -> Var {
        if frozen {
            self.reward_head.forward_frozen(g, &self.store, state)
        } else {
            self.reward_head.forward(g, &self.store, state)
        }
    }

    fn cont_logit(&self, g: &mut Graph, state: Var, frozen: bool) -> Var {
        if frozen {
            self.cont_head.forward_frozen(g, &self.store, state)
        } else {
            self.cont_head.forward(g, &self.store, state)
        }
    }

    /// Decoded scalar reward from two-hot logits: symexp(E[bin positions]).
    pub fn decode_reward(&self, g: &mut Graph, logits: Var) -> Var {
        let lsm = g.log_softmax_rows(logits);
        let probs = g.exp(lsm);
        let col = g.constant(Tensor::from_rows(
            self.bins.count(),
            1,
            self.bins.positions().to_vec(),
        ));
        let sym = g.matmul(probs, col);
        g.symexp(sym)
    }

    /// KL(q ‖ p) per row, summed over dimensions: [B].
    fn kl_rows(&self, g: &mut Graph, q: (Var, Var), p: (Var, Var)) -> Var {
        let (mq, sq) = q;
        let (mp, sp) = p;
        let ln_sp = g.ln(sp);
        let ln_sq = g.ln(sq);
        let logs = g.sub(ln_sp, ln_sq);
        let var_q = g.square(sq);
        let dmean = g.sub(mq, mp);
        let dmean2 = g.square(dmean);
        let num = g.add(var_q, dmean2);
        let var_p2 = g.square(sp);
        let den = g.scale(var_p2, 2.0);
        let frac = g.div(num, den);
        let s = g.add(logs, frac);
        let s = g.add_const(s, -0.5);
        g.sum_cols(s)
    }

    /// Balanced, free-bits-clipped KL loss plus its (plain) numeric value.
    fn kl_loss(&self, g: &mut Graph, post: &DistVars, prior: &DistVars) -> (Var, f64) {
        let fb = self.cfg.free_bits;
        let a = self.cfg.kl_alpha;
        let sg = |g: &mut Graph, v: Var| g.stop_grad(v);
        let qm_s = sg(g, post.mean);
        let qs_s = sg(g, post.std);
        let pm_s = sg(g, prior.mean);
        let ps_s = sg(g, prior.std);
        // posterior stopped: trains the prior toward the posterior
        let kl_dyn = self.kl_rows(g, (qm_s, qs_s), (prior.mean, prior.std));
        // prior stopped: regularizes the posterior toward the prior
        let kl_rep = self.kl_rows(g, (post.mean, post.std), (pm_s, ps_s));
        let kl_dyn_c = g.max_const(kl_dyn, fb);
        let kl_rep_c = g.max_const(kl_rep, fb);
        let dyn_mean = g.mean_all(kl_dyn_c);
        let rep_mean = g.mean_all(kl_rep_c);
        let dyn_term = g.scale(dyn_mean, a);
        let rep_term = g.scale(rep_mean, 1.0 - a);
        let loss = g.add(dyn_term, rep_term);
        let value = g.value(loss).item();
        (loss, value)
    }

    fn twohot_targets(&self, rewards: &[f64]) -> Tensor {
        let mut rows = Vec::with_capacity(rewards.len() * self.bins.count());
        for &r in rewards {
            rows.extend(
                twohot_encode(symlog(r), self.bins.positions()).expect("bin grid is valid"),
            );
        }
        Tensor::from_rows(rewards.len(), self.bins.count(), rows)
    }

    /// Cross-entropy of two-hot targets against logits, averaged over rows.
    fn twohot_ce(&self, g: &mut Graph, logits: Var, targets: Tensor) -> Var {
        let t = g.constant(targets);
        let lsm = g.log_softmax_rows(logits);
        let prod = g.mul(t, lsm);
        let rowsum = g.sum_cols(prod);
        let m = g.mean_all(rowsum);
        g.neg(m)
    }

    fn bce_logits(&self, g: &mut Graph, logit: Var, labels: Tensor) -> Var {
        let y = g.constant(labels);
        let sp = g.softplus(logit);
        let xy = g.mul(logit, y);
        let d = g.sub(sp, xy);
        g.mean_all(d)
    }

    // ---- acting ----

    /// One acting step: advance the recurrent state with the previous action
    /// and fold in the new observation through the posterior.
    pub fn observe_step(
        &self,
        prev: &LatentState,
        action: &[f64],
        obs: ObsInput,
        rng: &mut ChaCha8Rng,
    ) -> Result<LatentState, DiffError> {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(1, self.cfg.stoch, prev.z.clone()));
        let h = g.constant(Tensor::from_rows(1, self.cfg.deter, prev.h.clone()));
        let a = g.constant(Tensor::from_rows(1, self.cfg.action_dim, action.to_vec()));
        let h_next = self.recurrent_graph(&mut g, z, a, h, true);
        let e = self.encoder.encode_batch(&mut g, &self.store, &[obs], true)?;
        let post = self.posterior_graph(&mut g, h_next, e, true);
        let z_next = self.sample(&mut g, &post, rng);
        Ok(LatentState {
            h: g.value(h_next).data().to_vec(),
            z: g.value(z_next).data().to_vec(),
        })
    }

    /// Posterior distribution and reparameterized sample for concrete
    /// inputs.
    pub fn posterior_eval(
        &self,
        h: &[f64],
        obs: ObsInput,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DiagonalGaussian, Vec<f64>), DiffError> {
        let mut g = Graph::new();
        let hv = g.constant(Tensor::from_rows(1, self.cfg.deter, h.to_vec()));
        let e = self.encoder.encode_batch(&mut g, &self.store, &[obs], true)?;
        let post = self.posterior_graph(&mut g, hv, e, true);
        let dist = DiagonalGaussian::new(
            g.value(post.mean).data().to_vec(),
            g.value(post.std).data().to_vec(),
        );
        let z = dist.sample(rng);
        Ok((dist, z))
    }

    /// Prior distribution and sample conditioned on h only.
    pub fn prior_eval(
        &self,
        h: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<(DiagonalGaussian, Vec<f64>), DiffError> {
        let mut g = Graph::new();
        let hv = g.constant(Tensor::from_rows(1, self.cfg.deter, h.to_vec()));
        let prior = self.prior_graph(&mut g, hv, true);
        let dist = DiagonalGaussian::new(
            g.value(prior.mean).data().to_vec(),
            g.value(prior.std).data().to_vec(),
        );
        let z = dist.sample(rng);
        Ok((dist, z))
    }

    /// Reward bin probabilities, decoded reward, and continuation
    /// probability at a concrete state.
    pub fn heads_eval(&self, h: &[f64], z: &[f64]) -> (Vec<f64>, f64, f64) {
        let mut g = Graph::new();
        let hv = g.constant(Tensor::from_rows(1, self.cfg.deter, h.to_vec()));
        let zv = g.constant(Tensor::from_rows(1, self.cfg.stoch, z.to_vec()));
        let state = self.state_var(&mut g, hv, zv);
        let logits = self.reward_logits(&mut g, state, true);
        let lsm = g.log_softmax_rows(logits);
        let probs = g.exp(lsm);
        let reward = self.decode_reward(&mut g, logits);
        let cont = self.cont_logit(&mut g, state, true);
        let cont = g.sigmoid(cont);
        (
            g.value(probs).data().to_vec(),
            g.value(reward).item(),
            g.value(cont).item(),
        )
    }

    // ---- training ----

    /// Unroll the model over a batch of segments and assemble the training
    /// loss. Returns (stacked posterior states [T·B, h+z], loss var,
    /// report).
    pub fn observe_sequence(
        &self,
        g: &mut Graph,
        batch: &[Segment],
        rng: &mut ChaCha8Rng,
        frozen: bool,
    ) -> Result<(Var, Var, WMLossReport), DiffError> {
        let b = batch.len();
        let t_len = batch[0].obs.len();
        for seg in batch {
            if seg.obs.len() != t_len
                || seg.actions.len() != t_len
                || seg.rewards.len() != t_len
                || seg.continuations.len() != t_len
            {
                return Err(DiffError::DimMismatch {
                    what: "segment arrays must share one length",
                });
            }
        }

        // encode all observations in one stacked batch, t-major
        let inputs: Vec<ObsInput> = (0..t_len)
            .flat_map(|t| batch.iter().map(move |seg| seg.obs[t].as_input()))
            .collect();
        let e_all = self.encoder.encode_batch(g, &self.store, &inputs, frozen)?;

        let m = self.cfg.action_dim;
        let mut h = g.constant(Tensor::zeros(&[b, self.cfg.deter]));
        let mut states = Vec::with_capacity(t_len);
        let mut z_samples = Vec::with_capacity(t_len);
        let mut h_list = Vec::with_capacity(t_len);

        let mut reward_nll_acc: Option<Var> = None;
        let mut cont_bce_acc: Option<Var> = None;
        let mut kl_acc: Option<Var> = None;
        let mut kl_value_sum = 0.0;

        for t in 0..t_len {
            if t > 0 {
                let a_prev: Vec<f64> = batch
                    .iter()
                    .flat_map(|seg| seg.actions[t - 1].iter().copied())
                    .collect();
                let a = g.constant(Tensor::from_rows(b, m, a_prev));
                h = self.recurrent_graph(g, z_samples[t - 1], a, h, frozen);
            }
            let idx: Vec<u32> = (0..b).map(|i| (t * b + i) as u32).collect();
            let e_t = g.gather_rows(e_all, idx);
            let post = self.posterior_graph(g, h, e_t, frozen);
            let prior = self.prior_graph(g, h, frozen);
            let z = self.sample(g, &post, rng);

            let (kl_t, kl_v) = self.kl_loss(g, &post, &prior);
            kl_value_sum += kl_v;
            kl_acc = Some(match kl_acc {
                None => kl_t,
                Some(acc) => g.add(acc, kl_t),
            });

            let state = self.state_var(g, h, z);
            let rewards_t: Vec<f64> = batch.iter().map(|seg| seg.rewards[t]).collect();
            let logits = self.reward_logits(g, state, frozen);
            let ce = self.twohot_ce(g, logits, self.twohot_targets(&rewards_t));
            reward_nll_acc = Some(match reward_nll_acc {
                None => ce,
                Some(acc) => g.add(acc, ce),
            });

            let conts_t: Vec<f64> = batch.iter().map(|seg| seg.continuations[t]).collect();
            let clogit = self.cont_logit(g, state, frozen);
            let bce = self.bce_logits(g, clogit, Tensor::from_rows(b, 1, conts_t));
            cont_bce_acc = Some(match cont_bce_acc {
                None => bce,
                Some(acc) => g.add(acc, bce),
            });

            h_list.push(h);
            z_samples.push(z);
            states.push(state);
        }

        // multi-step reward supervision: prior rollouts with recorded
        // actions from every start step
        let hmax = self.cfg.multistep;
        let mut multi_acc: Option<Var> = None;
        let mut pairs = 0usize;
        for t0 in 0..t_len {
            let mut hm = h_list[t0];
            let mut zm = z_samples[t0];
            for i in 1..=hmax {
                let t = t0 + i;
                if t >= t_len {
                    break;
                }
                let a_prev: Vec<f64> = batch
                    .iter()
                    .flat_map(|seg| seg.actions[t - 1].iter().copied())
                    .collect();
                let a = g.constant(Tensor::from_rows(b, m, a_prev));
                hm = self.recurrent_graph(g, zm, a, hm, frozen);
                let prior = self.prior_graph(g, hm, frozen);
                zm = self.sample(g, &prior, rng);
                let state = self.state_var(g, hm, zm);
                let rewards_t: Vec<f64> = batch.iter().map(|seg| seg.rewards[t]).collect();
                let logits = self.reward_logits(g, state, frozen);
                let ce = self.twohot_ce(g, logits, self.twohot_targets(&rewards_t));
                multi_acc = Some(match multi_acc {
                    None => ce,
                    Some(acc) => g.add(acc, ce),
                });
                pairs += 1;
            }
        }

        // reconstruction term for the RGB-D baseline
        let recon = match (&self.decoder, self.cfg.model_kind) {
            (Some(dec), ModelKind::RgbdWm) => {
                let mut acc: Option<Var> = None;
                for (t, state) in states.iter().enumerate() {
                    for (bi, seg) in batch.iter().enumerate() {
                        let row = g.gather_rows(*state, vec![bi as u32]);
                        let out = dec.decode(g, &self.store, row);
                        let super::buffer::OwnedObs::Image(img) = &seg.obs[t] else {
                            return Err(DiffError::InvalidArg {
                                what: "rgbd-wm requires image observations",
                            });
                        };
                        let l = dec.reconstruction_loss(g, out, img);
                        acc = Some(match acc {
                            None => l,
                            Some(a) => g.add(a, l),
                        });
                    }
                }
                let total = acc.expect("at least one state");
                Some(g.scale(total, 1.0 / (b * t_len) as f64))
            }
            _ => None,
        };

        let t_inv = 1.0 / t_len as f64;
        let reward_nll = g.scale(reward_nll_acc.unwrap(), t_inv);
        let cont_bce = g.scale(cont_bce_acc.unwrap(), t_inv);
        let kl = g.scale(kl_acc.unwrap(), t_inv);
        let multi = match multi_acc {
            Some(acc) => g.scale(acc, 1.0 / pairs.max(1) as f64),
            None => g.scalar(0.0),
        };

        let current = g.add(reward_nll, cont_bce);
        let current_w = g.scale(current, self.cfg.w_current);
        let multi_w = g.scale(multi, self.cfg.w_multi);
        let kl_w = g.scale(kl, self.cfg.w_kl);
        let mut total = g.add(current_w, multi_w);
        total = g.add(total, kl_w);
        let mut recon_value = 0.0;
        if let Some(r) = recon {
            recon_value = g.value(r).item();
            let rw = g.scale(r, self.cfg.w_recon);
            total = g.add(total, rw);
        }

        let report = WMLossReport {
            reward_nll: g.value(reward_nll).item(),
            continuation_bce: g.value(cont_bce).item(),
            multistep_nll: g.value(multi).item(),
            kl_value: kl_value_sum * t_inv,
            recon_nll: recon_value,
            total: g.value(total).item(),
            grad_norm: 0.0,
        };

        let stacked = g.concat_rows(&states);
        Ok((stacked, total, report))
    }

    /// Sample a batch, run the sequence loss, backpropagate, clip, and apply
    /// one Adam update. Returns the report and the posterior states of the
    /// batch (start states for imagination).
    pub fn train_step(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut ChaCha8Rng,
    ) -> Result<(WMLossReport, Tensor), DiffError> {
        if buffer.is_empty() {
            return Err(DiffError::InvalidArg {
                what: "train_step requires a non-empty replay buffer",
            });
        }
        let batch: Vec<Segment> = (0..self.cfg.batch)
            .map(|_| buffer.sample_segment(rng, self.cfg.seq_len))
            .collect::<Result<_, _>>()?;
        let mut g = Graph::new();
        let (states, total, mut report) = self.observe_sequence(&mut g, &batch, rng, false)?;
        g.backward(total)?;
        let mut grads = g.store_grads(&self.store);
        let hyper = AdamHyper::new(self.cfg.lr, self.cfg.adam_eps);
        report.grad_norm = self.store.adam_update(&mut grads, &hyper, self.cfg.grad_clip);
        self.updates += 1;
        let start_states = g.value(states).clone();
        Ok((report, start_states))
    }

    /// World-model pretraining: `steps` gradient updates on the buffered
    /// random trajectories before any policy training.
    pub fn pretrain(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut ChaCha8Rng,
        steps: usize,
    ) -> Result<WMLossReport, DiffError> {
        let mut last = WMLossReport::default();
        for _ in 0..steps {
            last = self.train_step(buffer, rng)?.0;
        }
        Ok(last)
    }

    /// Closed-loop latent rollout under a caller-supplied actor. World-model
    /// parameters are bound frozen; gradients flow through the rollout into
    /// whatever the actor callback binds.
    pub fn imagine(
        &self,
        g: &mut Graph,
        start: Var,
        horizon: usize,
        stochastic: bool,
        rng: &mut ChaCha8Rng,
        mut act: impl FnMut(&mut Graph, Var) -> Var,
    ) -> Imagined {
        assert!(horizon >= 1, "imagination horizon must be at least 1");
        let d = self.cfg.deter;
        let z_dim = self.cfg.stoch;
        let mut states = vec![start];
        let mut actions = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut continues = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let s = *states.last().unwrap();
            let a = act(g, s);
            let h = g.slice_cols(s, 0, d);
            let z = g.slice_cols(s, d, d + z_dim);
            let h_next = self.recurrent_graph(g, z, a, h, true);
            let prior = self.prior_graph(g, h_next, true);
            let z_next = if stochastic {
                self.sample(g, &prior, rng)
            } else {
                prior.mean
            };
            let state = self.state_var(g, h_next, z_next);
            let logits = self.reward_logits(g, state, true);
            let r = self.decode_reward(g, logits);
            let clogit = self.cont_logit(g, state, true);
            let c = g.sigmoid(clogit);
            states.push(state);
            actions.push(a);
            rewards.push(r);
            continues.push(c);
        }
        Imagined {
            states,
            actions,
            rewards,
            continues,
        }
    }

    /// Reconstruction loss of stored states against images; only valid for
    /// the RGB-D baseline.
    pub fn rgbd_reconstruction_loss(
        &self,
        g: &mut Graph,
        states: &[Vec<f64>],
        images: &[&RgbdImage],
    ) -> Result<Var, DiffError> {
        let Some(dec) = &self.decoder else {
            return Err(DiffError::InvalidArg {
                what: "reconstruction loss is not part of the pcwm configuration",
            });
        };
        let mut acc: Option<Var> = None;
        for (s, img) in states.iter().zip(images) {
            let row = g.constant(Tensor::from_rows(1, s.len(), s.clone()));
            let out = dec.decode(g, &self.store, row);
            let l = dec.reconstruction_loss(g, out, img);
            acc = Some(match acc {
                None => l,
                Some(a) => g.add(a, l),
            });
        }
        let total = acc.ok_or(DiffError::InvalidArg {
            what: "reconstruction loss needs at least one state",
        })?;
        Ok(g.scale(total, 1.0 / states.len() as f64))
    }

    /// Reward diagnostics over one sequence: decoded current-step and
    /// multi-step predictions plus per-step KL values. Evaluation only.
    pub fn predict_rewards(
        &self,
        segment: &Segment,
        rng: &mut ChaCha8Rng,
    ) -> Result<RewardPredictions, DiffError> {
        let t_len = segment.obs.len();
        let mut g = Graph::new();
        let inputs: Vec<ObsInput> = segment.obs.iter().map(|o| o.as_input()).collect();
        let e_all = self.encoder.encode_batch(&mut g, &self.store, &inputs, true)?;
        let m = self.cfg.action_dim;
        let mut h = g.constant(Tensor::zeros(&[1, self.cfg.deter]));
        let mut h_list = Vec::new();
        let mut z_list = Vec::new();
        let mut current = Vec::new();
        let mut kl = Vec::new();
        for t in 0..t_len {
            if t > 0 {
                let a = g.constant(Tensor::from_rows(1, m, segment.actions[t - 1].clone()));
                h = self.recurrent_graph(&mut g, z_list[t - 1], a, h, true);
            }
            let e_t = g.gather_rows(e_all, vec![t as u32]);
            let post = self.posterior_graph(&mut g, h, e_t, true);
            let prior = self.prior_graph(&mut g, h, true);
            let z = self.sample(&mut g, &post, rng);
            let (_, kl_v) = self.kl_loss(&mut g, &post, &prior);
            kl.push(kl_v);
            let state = self.state_var(&mut g, h, z);
            let logits = self.reward_logits(&mut g, state, true);
            let r = self.decode_reward(&mut g, logits);
            current.push(g.value(r).item());
            h_list.push(h);
            z_list.push(z);
        }
        let mut multistep = Vec::new();
        for t0 in 0..t_len {
            let mut hm = h_list[t0];
            let mut zm = z_list[t0];
            for i in 1..=self.cfg.multistep {
                let t = t0 + i;
                if t >= t_len {
                    break;
                }
                let a = g.constant(Tensor::from_rows(1, m, segment.actions[t - 1].clone()));
                hm = self.recurrent_graph(&mut g, zm, a, hm, true);
                let prior = self.prior_graph(&mut g, hm, true);
                zm = self.sample(&mut g, &prior, rng);
                let state = self.state_var(&mut g, hm, zm);
                let logits = self.reward_logits(&mut g, state, true);
                let r = self.decode_reward(&mut g, logits);
                multistep.push((t0, i, g.value(r).item()));
            }
        }
        Ok(RewardPredictions {
            current,
            multistep,
            kl,
        })
    }
}
