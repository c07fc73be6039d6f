//! Recurrent policy over the genome decision sequence, trained with
//! REINFORCE on PSNR rewards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dip::{fit, select_t_star, FitConfig, FitResult, TaskSpec};
use crate::error::{Error, Result};
use crate::genome::{slot_schedule, ArchGenome, Slot};
use crate::tensor::{Adam, AdamConfig, ConvSpec, ParamId, ParamStore, Shape, Tape, Tensor, Var};

pub const HIDDEN: usize = 64;
pub const EMBED: usize = 64;
/// Half-width of the uniform weight initialization.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerPolicy {
    pub params: ParamStore,
    pub optimizer: Adam,
    pub depth: usize,
    pub width: usize,
    pub z_channels: usize,
    w_ih: ParamId,
    w_hh: ParamId,
    b_lstm: ParamId,
    /// `embeddings[i]` embeds the choice made at slot `i` as input to slot `i + 1`.
    embeddings: Vec<ParamId>,
    heads: Vec<(ParamId, ParamId)>,
}

/// One sampled architecture with its sampling statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub genome: ArchGenome,
    pub decisions: Vec<usize>,
    pub log_prob: f64,
    pub entropy: f64,
    /// Logits each slot was sampled from.
    pub logits: Vec<Vec<f64>>,
}

/// Per-slot tape variables from one unrolled pass.
struct Unrolled {
    log_probs: Vec<Var>,
    logits: Vec<Var>,
    decisions: Vec<usize>,
}

impl ControllerPolicy {
    pub fn new(depth: usize, width: usize, z_channels: usize, policy_lr: f64, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let u = |p: &mut ParamStore, name: &str, shape| p.add_uniform(seed, name, shape, INIT_RANGE);
        let w_ih = u(&mut params, "lstm.w_ih", Shape::new(4 * HIDDEN, EMBED, 1, 1));
        let w_hh = u(&mut params, "lstm.w_hh", Shape::new(4 * HIDDEN, HIDDEN, 1, 1));
        let b_lstm = params.add_full("lstm.b", Shape::vector(4 * HIDDEN), 0.0);
        let schedule = slot_schedule(depth);
        let embeddings = schedule[..schedule.len() - 1]
            .iter()
            .enumerate()
            .map(|(i, s)| u(&mut params, &format!("embed{i}"), Shape::new(EMBED, s.cardinality(), 1, 1)))
            .collect();
        let heads = schedule
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let w = u(&mut params, &format!("head{i}.w"), Shape::new(s.cardinality(), HIDDEN, 1, 1));
                let b = params.add_full(&format!("head{i}.b"), Shape::vector(s.cardinality()), 0.0);
                (w, b)
            })
            .collect();
        ControllerPolicy {
            params,
            optimizer: Adam::new(AdamConfig::with_lr(policy_lr)),
            depth,
            width,
            z_channels,
            w_ih,
            w_hh,
            b_lstm,
            embeddings,
            heads,
        }
    }

    pub fn schedule(&self) -> Vec<Slot> {
        slot_schedule(self.depth)
    }

    /// Sets every output head to zero so all slots sample uniformly.
    pub fn zero_heads(&mut self) {
        for &(w, b) in &self.heads {
            self.params.get_mut(w).value = Tensor::zeros(self.params.value(w).shape());
            self.params.get_mut(b).value = Tensor::zeros(self.params.value(b).shape());
        }
    }

    /// Runs the recurrence, drawing each choice from `choose(slot, log_probs)`.
    fn unroll(&self, tape: &mut Tape, mut choose: impl FnMut(usize, &Tensor) -> Result<usize>) -> Result<Unrolled> {
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);
        let (w_ih, w_hh, b) = (p(tape, self.w_ih)?, p(tape, self.w_hh)?, p(tape, self.b_lstm)?);
        let one = ConvSpec::new(1, 1, 0);
        let mut h = tape.constant(Tensor::zeros(Shape::vector(HIDDEN)))?;
        let mut c = h;
        let mut input = tape.constant(Tensor::zeros(Shape::vector(EMBED)))?;
        let mut out = Unrolled {
            log_probs: vec![],
            logits: vec![],
            decisions: vec![],
        };
        for (i, slot) in self.schedule().into_iter().enumerate() {
            let from_input = tape.conv2d(input, w_ih, Some(b), one)?;
            let from_hidden = tape.conv2d(h, w_hh, None, one)?;
            let gates = tape.add(from_input, from_hidden)?;
            let gate = |tape: &mut Tape, k: usize| tape.slice_channels(gates, k * HIDDEN, HIDDEN);
            let (gi, gf, gg, go) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
            let (gi, gf, go) = (tape.sigmoid(gi)?, tape.sigmoid(gf)?, tape.sigmoid(go)?);
            let gg = tape.tanh(gg)?;
            let keep = tape.mul(gf, c)?;
            let write = tape.mul(gi, gg)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c)?;
            h = tape.mul(go, squashed)?;

            let (hw, hb) = self.heads[i];
            let (hw, hb) = (p(tape, hw)?, p(tape, hb)?);
            let logits = tape.conv2d(h, hw, Some(hb), one)?;
            let log_probs = tape.log_softmax(logits)?;
            let choice = choose(i, tape.value(log_probs))?;
            if choice >= slot.cardinality() {
                return Err(Error::SlotIndex {
                    slot: slot.to_string(),
                    index: choice,
                    cardinality: slot.cardinality(),
                });
            }
            out.logits.push(logits);
            out.log_probs.push(log_probs);
            out.decisions.push(choice);

            if let Some(&emb) = self.embeddings.get(i) {
                let mut onehot = Tensor::zeros(Shape::vector(slot.cardinality()));
                onehot.data_mut()[choice] = 1.0;
                let onehot = tape.constant(onehot)?;
                let emb = p(tape, emb)?;
                input = tape.conv2d(onehot, emb, None, one)?;
            }
        }
        Ok(out)
    }

    /// Draws one architecture, one categorical choice per slot.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Sample> {
        let mut tape = Tape::new();
        let un = self.unroll(&mut tape, |_, lp| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, l) in lp.data().iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    return Ok(k);
                }
            }
            Ok(lp.len() - 1)
        })?;
        let mut log_prob = 0.0;
        let mut entropy = 0.0;
        for (lp, &d) in un.log_probs.iter().zip(&un.decisions) {
            let lp = tape.value(*lp).data();
            log_prob += lp[d];
            entropy -= lp.iter().map(|l| l.exp() * l).sum::<f64>();
        }
        Ok(Sample {
            genome: ArchGenome::from_decision_sequence(&un.decisions, self.depth, self.width, self.z_channels)?,
            log_prob,
            entropy,
            logits: un.logits.iter().map(|v| tape.value(*v).data().to_vec()).collect(),
            decisions: un.decisions,
        })
    }

    /// Replays `decisions` and records `(log_prob, entropy)` of that path on `tape`.
    fn replay(&self, tape: &mut Tape, decisions: &[usize]) -> Result<(Var, Var)> {
        if decisions.len() != self.schedule().len() {
            return Err(Error::Genome(format!(
                "decision sequence has {} entries, expected {}",
                decisions.len(),
                self.schedule().len()
            )));
        }
        let un = self.unroll(tape, |i, _| Ok(decisions[i]))?;
        let mut log_prob: Option<Var> = None;
        let mut neg_entropy: Option<Var> = None;
        for (lp, &d) in un.log_probs.iter().zip(&un.decisions) {
            let n = tape.shape(*lp).c;
            let mut pick = Tensor::zeros(Shape::vector(n));
            pick.data_mut()[d] = 1.0;
            let pick = tape.constant(pick)?;
            let chosen = tape.mul(*lp, pick)?;
            let chosen = tape.sum(chosen)?;
            let probs = tape.exp(*lp)?;
            let plogp = tape.mul(probs, *lp)?;
            let plogp = tape.sum(plogp)?;
            log_prob = Some(match log_prob {
                None => chosen,
                Some(acc) => tape.add(acc, chosen)?,
            });
            neg_entropy = Some(match neg_entropy {
                None => plogp,
                Some(acc) => tape.add(acc, plogp)?,
            });
        }
        let entropy = tape.scale(neg_entropy.expect("non-empty schedule"), -1.0)?;
        Ok((log_prob.expect("non-empty schedule"), entropy))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub candidates_per_update: usize,
    pub updates: usize,
    pub baseline_beta: f64,
    pub entropy_coef: f64,
    pub policy_lr: f64,
    pub fit_cfg: FitConfig,
    pub seed: u64,
    pub depth: usize,
    pub width: usize,
    pub z_channels: usize,
}

impl SearchConfig {
    pub fn new(fit_cfg: FitConfig, updates: usize) -> Self {
        SearchConfig {
            candidates_per_update: 8,
            updates,
            baseline_beta: 0.9,
            entropy_coef: 1e-4,
            policy_lr: 5e-3,
            fit_cfg,
            seed: 0,
            depth: 4,
            width: 32,
            z_channels: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "search_config", msg });
        if self.candidates_per_update == 0 {
            return bad("candidates_per_update must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.baseline_beta) {
            return bad(format!("baseline_beta {} outside [0, 1)", self.baseline_beta));
        }
        if !(self.policy_lr > 0.0) {
            return bad(format!("policy_lr {} must be positive", self.policy_lr));
        }
        self.fit_cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub update: usize,
    pub mean_reward: f64,
    pub best_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub genome: ArchGenome,
    pub reward: f64,
    /// Optimal stopping iteration over this genome's per-image fits.
    pub t_star: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchState {
    /// Moving average of batch-mean rewards.
    pub baseline: f64,
    pub best: Option<Best>,
    pub history: Vec<HistoryRow>,
    /// Lowest reward observed so far; stands in for diverged candidates.
    pub min_reward: Option<f64>,
    /// Batches evaluated so far, including a policy-free one when `updates = 0`.
    pub batches: usize,
}

impl SearchState {
    pub fn best_reward(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.reward)
    }
}

/// One policy-gradient step on `batch = [(sample, reward)]`.
pub fn reinforce_update(policy: &mut ControllerPolicy, batch: &[(Sample, f64)], state: &mut SearchState, cfg: &SearchConfig) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("reinforce batch"));
    }
    let mut tape = Tape::new();
    let mut loss: Option<Var> = None;
    for (sample, reward) in batch {
        let (log_prob, entropy) = policy.replay(&mut tape, &sample.decisions)?;
        let advantage = reward - state.baseline;
        let a = tape.scale(log_prob, -advantage)?;
        let e = tape.scale(entropy, -cfg.entropy_coef)?;
        let term = tape.add(a, e)?;
        loss = Some(match loss {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    policy.params.zero_grads();
    tape.backward(loss.expect("non-empty batch"), &mut policy.params)?;
    policy.optimizer.step(&mut policy.params);
    let mean = batch.iter().map(|(_, r)| r).sum::<f64>() / batch.len() as f64;
    state.baseline = cfg.baseline_beta * state.baseline + (1.0 - cfg.baseline_beta) * mean;
    Ok(())
}

/// A clean training image with its fixed degraded observation.
#[derive(Debug, Clone)]
pub struct TrainImage {
    pub gt: Tensor,
    pub x0: Tensor,
    pub mask: Option<Tensor>,
}

impl TrainImage {
    /// Degrades every image once, image `i` with seed `seed + i`.
    pub fn prepare(images: &[Tensor], task: &TaskSpec, seed: u64) -> Result<Vec<TrainImage>> {
        images
            .iter()
            .enumerate()
            .map(|(i, gt)| {
                let (x0, mask) = crate::dip::degrade(gt, task, seed.wrapping_add(i as u64))?;
                Ok(TrainImage { gt: gt.clone(), x0, mask })
            })
            .collect()
    }
}

/// Mean best PSNR over the images plus the individual fits. Image `i` is
/// fitted with seed `fit_cfg.seed + i`; a diverged fit scores `fallback`
/// and yields no fit result.
pub fn reward(
    genome: &ArchGenome,
    images: &[TrainImage],
    task: &TaskSpec,
    fit_cfg: &FitConfig,
    fallback: f64,
) -> Result<(f64, Vec<FitResult>)> {
    if images.is_empty() {
        return Err(Error::Empty("training images"));
    }
    let mut total = 0.0;
    let mut fits = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let cfg = fit_cfg.with_seed(fit_cfg.seed.wrapping_add(i as u64));
        match fit(genome, &img.x0, img.mask.as_ref(), task, &cfg, Some(&img.gt)) {
            Ok(r) => {
                total += r.best_psnr.expect("fit with ground truth");
                fits.push(r);
            }
            Err(Error::Divergence { .. }) => total += fallback,
            Err(e) => return Err(e),
        }
    }
    Ok((total / images.len() as f64, fits))
}

/// RNG for the candidates of update `index`, so a resumed search draws the
/// same candidates as an uninterrupted one.
pub fn update_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Resumable search loop. Each [`Search::step`] evaluates one batch of
/// candidates and, while `updates` remain, applies one REINFORCE update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Search {
    pub cfg: SearchConfig,
    pub policy: ControllerPolicy,
    pub state: SearchState,
}

impl Search {
    pub fn new(cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        ArchGenome::baseline(cfg.depth, cfg.width, cfg.z_channels)?;
        Ok(Search {
            policy: ControllerPolicy::new(cfg.depth, cfg.width, cfg.z_channels, cfg.policy_lr, cfg.seed),
            state: SearchState::default(),
            cfg,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.batches >= self.cfg.updates.max(1)
    }

    /// Evaluates one batch with `evaluate(genome, fallback) -> (reward, fits)`
    /// run in parallel across candidates.
    pub fn step_with<F>(&mut self, evaluate: F) -> Result<()>
    where
        F: Fn(&ArchGenome, f64) -> Result<(f64, Vec<FitResult>)> + Sync,
    {
        let index = self.state.batches;
        let mut rng = update_rng(self.cfg.seed, index);
        let samples = (0..self.cfg.candidates_per_update)
            .map(|_| self.policy.sample(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fallback = self.state.min_reward.unwrap_or(0.0);
        let scored = samples
            .par_iter()
            .map(|s| evaluate(&s.genome, fallback))
            .collect::<Result<Vec<_>>>()?;

        let mut batch = Vec::with_capacity(samples.len());
        for (sample, (r, fits)) in samples.into_iter().zip(scored) {
            let r = if r.is_finite() { r } else { fallback };
            self.state.min_reward = Some(self.state.min_reward.map_or(r, |m| m.min(r)));
            if self.state.best_reward().is_none_or(|b| r > b) {
                let t_star = if fits.is_empty() { self.cfg.fit_cfg.iters } else { select_t_star(&fits)? };
                self.state.best = Some(Best {
                    genome: sample.genome.clone(),
                    reward: r,
                    t_star,
                });
            }
            batch.push((sample, r));
        }
        if index < self.cfg.updates {
            reinforce_update(&mut self.policy, &batch, &mut self.state, &self.cfg)?;
            let mean = batch.iter().map(|(_, r)| r).sum::<f64>() / batch.len() as f64;
            self.state.history.push(HistoryRow {
                update: index,
                mean_reward: mean,
                best_reward: self.state.best_reward().expect("batch evaluated"),
            });
        }
        self.state.batches += 1;
        Ok(())
    }

    pub fn step(&mut self, images: &[TrainImage], task: &TaskSpec) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Empty("training images"));
        }
        let fit_cfg = self.cfg.fit_cfg;
        self.step_with(|g, fallback| reward(g, images, task, &fit_cfg, fallback))
    }

    pub fn outcome(&self) -> Result<(ArchGenome, usize)> {
        let best = self.state.best.as_ref().ok_or(Error::Empty("search history"))?;
        Ok((best.genome.clone(), best.t_star))
    }
}

/// Runs a full search: returns the best genome, its stopping iteration and
/// the final state.
pub fn search(images: &[TrainImage], task: &TaskSpec, cfg: SearchConfig) -> Result<(ArchGenome, usize, SearchState)> {
    if images.is_empty() {
        return Err(Error::Empty("training images"));
    }
    let mut run = Search::new(cfg)?;
    while !run.finished() {
        run.step(images, task)?;
    }
    let (genome, t_star) = run.outcome()?;
    Ok((genome, t_star, run.state))
}
