//! Multi-step preference optimisation of the denoiser against a frozen
//! reference policy.
//!
//! Each ancestral step is a Gaussian policy `pi(a | s) = N(a; mu(s), sigma_t^2 I)`.
//! For a (winner, loser) pair the per-step log-ratios `log pi_theta - log pi_ref`
//! are averaged over each trajectory's steps and the loss is
//! `-log sigmoid(beta * (ratio_winner - ratio_loser))`.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DenoiserCache, NoisePredictor, ParamGroup, Step, Trajectory};
use crate::error::{Error, Result};
use crate::explicit::PromptRep;
use crate::generator::Generator;
use crate::implicit::count;
use crate::nn::{self, Adam, AdamConfig};
use crate::scene::Image;

/// Rows per denoiser batch when evaluating trajectory steps.
const STEP_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub winner: Trajectory,
    pub loser: Trajectory,
    pub session: String,
    pub round: usize,
    /// The judge scored both candidates equally; the lower seed won by rule.
    pub tied: bool,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.winner.timesteps != self.loser.timesteps {
            return Err(Error::InvalidArgument("pair trajectories differ in length".into()));
        }
        for traj in [&self.winner, &self.loser] {
            if let Some(k) = traj.sigmas.iter().position(|s| !(*s > 0.0)) {
                return Err(Error::ZeroSigma(traj.timesteps - k));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct D3poConfig {
    pub beta: f64,
    pub lr: f64,
    pub update_steps: usize,
    /// Pairs per gradient step.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Parameters the update may change; the rest stay at their input values.
    pub trainable: ParamGroup,
}

impl Default for D3poConfig {
    fn default() -> Self {
        D3poConfig { beta: 0.1, lr: 2e-3, update_steps: 4, batch_size: 16, clip_norm: 1.0, seed: 0, trainable: ParamGroup::Conditioning }
    }
}

/// Diagonal-Gaussian log-density of `action` under `N(mean, sigma^2 I)`.
pub fn gaussian_logpdf(action: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("deterministic step has no density".into()));
    }
    let d = action.len() as f64;
    let sq: f64 = action.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma))
}

/// Posterior mean `mu_theta(z_t, t, c)` of any noise predictor.
pub fn posterior_mean<P: NoisePredictor + ?Sized>(model: &P, state: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
    let s = model.schedule();
    let eps = model.predict(state, t, cond);
    let ra = s.alpha(t).sqrt();
    let c = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    state.iter().zip(&eps).map(|(z, e)| (z - c * e) / ra).collect()
}

/// `log pi_theta(action | state)` for one recorded step.
pub fn step_logprob<P: NoisePredictor + ?Sized>(model: &P, step: &Step<'_>, cond: &[f64]) -> Result<f64> {
    if !(step.sigma > 0.0) {
        return Err(Error::ZeroSigma(step.t));
    }
    let mu = posterior_mean(model, step.state, step.t, cond);
    gaussian_logpdf(step.action, &mu, step.sigma)
}

/// Mean over steps of `log pi_theta - log pi_ref`.
pub fn trajectory_log_ratio<P: NoisePredictor + ?Sized, R: NoisePredictor + ?Sized>(
    model: &P,
    reference: &R,
    traj: &Trajectory,
) -> Result<f64> {
    let cond = &traj.conditioning.vector;
    let mut total = 0.0;
    for step in traj.steps() {
        total += step_logprob(model, &step, cond)? - step_logprob(reference, &step, cond)?;
    }
    Ok(total / traj.timesteps as f64)
}

/// `beta * (ratio_winner - ratio_loser)`.
pub fn d3po_margin<P: NoisePredictor + ?Sized, R: NoisePredictor + ?Sized>(
    model: &P,
    reference: &R,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    pair.validate()?;
    Ok(beta * (trajectory_log_ratio(model, reference, &pair.winner)? - trajectory_log_ratio(model, reference, &pair.loser)?))
}

pub fn d3po_loss<P: NoisePredictor + ?Sized, R: NoisePredictor + ?Sized>(
    model: &P,
    reference: &R,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    count(|c| c.d3po += 1);
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument("beta must be positive".into()));
    }
    Ok(-nn::log_sigmoid(d3po_margin(model, reference, pair, beta)?))
}

/// Per-step squared residuals `||a - mu||^2` of the reference policy, which
/// stay fixed for the whole optimisation run.
fn reference_residuals(reference: &Denoiser, traj: &Trajectory) -> Result<Vec<f64>> {
    let (means, _) = batched_means(reference, traj, false)?;
    Ok(traj
        .steps()
        .zip(&means)
        .map(|(s, m)| s.action.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

/// Posterior means of every step of `traj`, chunked; optionally with caches.
fn batched_means(
    model: &Denoiser,
    traj: &Trajectory,
    keep_cache: bool,
) -> Result<(Vec<Vec<f64>>, Vec<(std::ops::Range<usize>, crate::diffusion::DenoiserCache)>)> {
    let steps: Vec<Step<'_>> = traj.steps().collect();
    let d = steps[0].state.len();
    let cond = &traj.conditioning.vector;
    let mut means = Vec::with_capacity(steps.len());
    let mut caches = Vec::new();
    for start in (0..steps.len()).step_by(STEP_CHUNK) {
        let end = (start + STEP_CHUNK).min(steps.len());
        let n = end - start;
        let mut zs = Array2::zeros((n, d));
        let mut cs = Array2::zeros((n, cond.len()));
        for (i, s) in steps[start..end].iter().enumerate() {
            zs.row_mut(i).assign(&ndarray::ArrayView1::from(s.state));
            cs.row_mut(i).assign(&ndarray::ArrayView1::from(&cond[..]));
        }
        let ts: Vec<usize> = steps[start..end].iter().map(|s| s.t).collect();
        let (mu, cache) = model.posterior_means(&zs, &ts, &cs)?;
        means.extend(mu.outer_iter().map(|r| r.to_vec()));
        if keep_cache {
            caches.push((start..end, cache));
        }
    }
    Ok((means, caches))
}

/// Mean log-ratio of a trajectory given precomputed reference residuals.
fn ratio_with_residuals(traj: &Trajectory, means: &[Vec<f64>], ref_res: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((step, mu), r) in traj.steps().zip(means).zip(ref_res) {
        let own: f64 = step.action.iter().zip(mu).map(|(a, m)| (a - m) * (a - m)).sum();
        total += (r - own) / (2.0 * step.sigma * step.sigma);
    }
    total / traj.timesteps as f64
}

/// Accumulates `scale * d(ratio)/d(theta)` into `grad`.
fn accumulate_ratio_grad(
    model: &Denoiser,
    traj: &Trajectory,
    means: &[Vec<f64>],
    caches: Vec<(std::ops::Range<usize>, DenoiserCache)>,
    scale: f64,
    grad: &mut [f64],
) -> Result<()> {
    let steps: Vec<Step<'_>> = traj.steps().collect();
    let t_len = traj.timesteps as f64;
    for (range, cache) in caches {
        let d = steps[0].state.len();
        let mut g_mu = Array2::zeros((range.len(), d));
        for (row, k) in range.clone().enumerate() {
            let s = &steps[k];
            // d/dmu of -(||a - mu||^2) / (2 sigma^2 T) = (a - mu) / (sigma^2 T)
            let f = scale / (s.sigma * s.sigma * t_len);
            for (j, (a, m)) in s.action.iter().zip(&means[k]).enumerate() {
                g_mu[[row, j]] = f * (a - m);
            }
        }
        model.posterior_means_backward(&cache, &g_mu, grad);
    }
    Ok(())
}

/// Loss and parameter gradient for one pair.
pub fn d3po_loss_grad(model: &Denoiser, reference: &Denoiser, pair: &PreferencePair, beta: f64) -> Result<(f64, Vec<f64>)> {
    let refs = PairReference::new(reference, pair)?;
    let mut grad = vec![0.0; model.param_count()];
    let loss = pair_loss_grad(model, pair, &refs, beta, &mut grad)?;
    Ok((loss, grad))
}

struct PairReference {
    winner: Vec<f64>,
    loser: Vec<f64>,
}

impl PairReference {
    fn new(reference: &Denoiser, pair: &PreferencePair) -> Result<Self> {
        pair.validate()?;
        Ok(PairReference {
            winner: reference_residuals(reference, &pair.winner)?,
            loser: reference_residuals(reference, &pair.loser)?,
        })
    }
}

fn pair_loss_grad(model: &Denoiser, pair: &PreferencePair, refs: &PairReference, beta: f64, grad: &mut [f64]) -> Result<f64> {
    count(|c| c.d3po += 1);
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument("beta must be positive".into()));
    }
    let (mw, cw) = batched_means(model, &pair.winner, true)?;
    let (ml, cl) = batched_means(model, &pair.loser, true)?;
    let margin = beta * (ratio_with_residuals(&pair.winner, &mw, &refs.winner) - ratio_with_residuals(&pair.loser, &ml, &refs.loser));
    let loss = -nn::log_sigmoid(margin);
    // dloss/dmargin = -sigmoid(-margin)
    let g = -nn::sigmoid(-margin) * beta;
    accumulate_ratio_grad(model, &pair.winner, &mw, cw, g, grad)?;
    accumulate_ratio_grad(model, &pair.loser, &ml, cl, -g, grad)?;
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct D3poRun {
    pub model: Denoiser,
    /// Mean pair loss of each gradient step.
    pub step_losses: Vec<f64>,
}

/// Stateful optimiser for online use: every [`D3poTrainer::step`] takes one
/// Adam step on the mean loss of the given pairs against the frozen reference.
pub struct D3poTrainer<'r> {
    model: Denoiser,
    reference: &'r Denoiser,
    opt: Adam,
    frozen: Vec<bool>,
    beta: f64,
    step_losses: Vec<f64>,
}

impl<'r> D3poTrainer<'r> {
    pub fn new(model: &Denoiser, reference: &'r Denoiser, cfg: &D3poConfig) -> Result<Self> {
        if !(cfg.beta > 0.0) {
            return Err(Error::InvalidArgument("beta must be positive".into()));
        }
        if model.param_count() != reference.param_count() {
            return Err(Error::InvalidArgument("model and reference differ in shape".into()));
        }
        let mut frozen = vec![true; model.param_count()];
        for r in model.param_ranges(cfg.trainable) {
            frozen[r].iter_mut().for_each(|f| *f = false);
        }
        Ok(D3poTrainer {
            model: model.clone(),
            reference,
            opt: Adam::new(AdamConfig { clip_norm: cfg.clip_norm, ..AdamConfig::with_lr(cfg.lr) }, model.param_count()),
            frozen,
            beta: cfg.beta,
            step_losses: Vec::new(),
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn step_losses(&self) -> &[f64] {
        &self.step_losses
    }

    /// Returns the mean loss before the update.
    pub fn step(&mut self, pairs: &[PreferencePair]) -> Result<f64> {
        count(|c| c.d3po += 1);
        if pairs.is_empty() {
            return Err(Error::EmptyPairs);
        }
        let mut grad = vec![0.0; self.model.param_count()];
        let mut loss = 0.0;
        for pair in pairs {
            let refs = PairReference::new(self.reference, pair)?;
            loss += pair_loss_grad(&self.model, pair, &refs, self.beta, &mut grad)?;
        }
        let n = pairs.len() as f64;
        for (g, &f) in grad.iter_mut().zip(&self.frozen) {
            *g = if f { 0.0 } else { *g / n };
        }
        self.opt.step(self.model.params_mut(), &grad);
        self.step_losses.push(loss / n);
        Ok(loss / n)
    }

    pub fn finish(self) -> D3poRun {
        D3poRun { model: self.model, step_losses: self.step_losses }
    }
}

/// Adam steps on the mean loss over shuffled mini-batches of `pairs`.
/// The reference is only read.
pub fn d3po_update(model: &Denoiser, reference: &Denoiser, pairs: &[PreferencePair], cfg: &D3poConfig) -> Result<D3poRun> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut trainer = D3poTrainer::new(model, reference, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let n = cfg.batch_size.min(pairs.len());
    for _ in 0..cfg.update_steps {
        let mut batch = Vec::with_capacity(n);
        for _ in 0..n {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(pairs[order[cursor]].clone());
            cursor += 1;
        }
        trainer.step(&batch)?;
    }
    Ok(trainer.finish())
}

/// Scores a candidate image; higher is preferred.
pub trait Judge {
    fn score(&self, img: &Image) -> f64;
}

impl<F: Fn(&Image) -> f64> Judge for F {
    fn score(&self, img: &Image) -> f64 {
        self(img)
    }
}

/// Two ancestral samples with distinct seeds, judged; ties go to the lower seed.
pub fn collect_pair(
    generator: &Generator,
    prompt: &PromptRep,
    weights: Option<&[f64]>,
    judge: &dyn Judge,
    seeds: (u64, u64),
    session: &str,
    round: usize,
) -> Result<(PreferencePair, [Image; 2])> {
    count(|c| c.d3po += 1);
    if seeds.0 == seeds.1 {
        return Err(Error::InvalidArgument("pair seeds must differ".into()));
    }
    let (img_a, ta) = generator.sample_ancestral(prompt, weights, seeds.0)?;
    let (img_b, tb) = generator.sample_ancestral(prompt, weights, seeds.1)?;
    let (sa, sb) = (judge.score(&img_a), judge.score(&img_b));
    let tied = sa == sb;
    let a_wins = if tied { seeds.0 < seeds.1 } else { sa > sb };
    let (winner, loser, images) = if a_wins { (ta, tb, [img_a, img_b]) } else { (tb, ta, [img_b, img_a]) };
    Ok((PreferencePair { winner, loser, session: session.to_string(), round, tied }, images))
}

/// Line-delimited JSON form of a pair. Trajectories are referenced by the
/// checkpoint that sampled them plus their seeds and are replayed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub session: String,
    pub round: usize,
    pub winner_seed: u64,
    pub loser_seed: u64,
    pub prompt: PromptRep,
    pub weights: Option<Vec<f64>>,
    pub tied: bool,
    pub checkpoint: String,
}

impl PairRecord {
    pub fn new(pair: &PreferencePair, prompt: &PromptRep, checkpoint: impl Into<String>) -> Self {
        PairRecord {
            session: pair.session.clone(),
            round: pair.round,
            winner_seed: pair.winner.seed,
            loser_seed: pair.loser.seed,
            prompt: prompt.clone(),
            weights: pair.winner.conditioning.weights.clone(),
            tied: pair.tied,
            checkpoint: checkpoint.into(),
        }
    }

    /// Regenerates both trajectories with `generator`, which must hold the
    /// referenced checkpoint.
    pub fn replay(&self, generator: &Generator) -> Result<PreferencePair> {
        let w = self.weights.as_deref();
        let (_, winner) = generator.sample_ancestral(&self.prompt, w, self.winner_seed)?;
        let (_, loser) = generator.sample_ancestral(&self.prompt, w, self.loser_seed)?;
        Ok(PreferencePair { winner, loser, session: self.session.clone(), round: self.round, tied: self.tied })
    }
}

pub fn write_pairs<W: Write>(records: &[PairRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(input: R) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_ancestral, Conditioning, DenoiserConfig, NoiseSchedule};

    fn micro(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            height: 2,
            width: 2,
            channels: 1,
            pool: 1,
            hidden: 2,
            cond_dim: 2,
            local_channels: 1,
            kernel: 3,
            sigma_data: 0.5,
        };
        Denoiser::new(cfg, NoiseSchedule::linear(4, 0.05, 0.3).unwrap(), seed).unwrap()
    }

    fn pair_from(model: &Denoiser, seeds: (u64, u64), cond: [f64; 2]) -> PreferencePair {
        let c = Conditioning { tokens: vec!["red".into()], weights: None, vector: cond.to_vec() };
        let (_, w) = sample_ancestral(model, c.clone(), seeds.0).unwrap();
        let (_, l) = sample_ancestral(model, c, seeds.1).unwrap();
        PreferencePair { winner: w, loser: l, session: "s".into(), round: 1, tied: false }
    }

    #[test]
    fn logprob_at_mean_is_normaliser() {
        let mu = vec![0.1, -0.2, 0.3];
        let sigma: f64 = 0.4;
        let lp = gaussian_logpdf(&mu, &mu, sigma).unwrap();
        assert!((lp + 1.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln()).abs() < 1e-12);
        assert!(gaussian_logpdf(&mu, &mu, 0.0).is_err());
    }

    #[test]
    fn logprob_is_quadratic_in_offset() {
        let mu = vec![0.0; 4];
        let at = |r: f64| gaussian_logpdf(&[r, 0.0, 0.0, 0.0], &mu, 0.5).unwrap();
        let (a0, a1, a2) = (at(0.0), at(1.0), at(2.0));
        assert!(a1 < a0 && a2 < a1);
        assert!(((a0 - a2) - 4.0 * (a0 - a1)).abs() < 1e-12);
    }

    #[test]
    fn logprob_matches_product_of_densities() {
        // product of 1-D normal densities, then log
        let a = [0.3, -0.1, 0.8];
        let m = [0.1, 0.2, 0.5];
        let s: f64 = 0.7;
        let prod: f64 = a
            .iter()
            .zip(&m)
            .map(|(x, mu)| (-(x - mu) * (x - mu) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()))
            .product();
        assert!((gaussian_logpdf(&a, &m, s).unwrap() - prod.ln()).abs() < 1e-10);
    }

    #[test]
    fn step_logprob_uses_model_mean() {
        let m = micro(1);
        let pair = pair_from(&m, (1, 2), [0.3, -0.4]);
        for step in pair.winner.steps() {
            let lp = step_logprob(&m, &step, &[0.3, -0.4]).unwrap();
            let direct = gaussian_logpdf(step.action, step.mean, step.sigma).unwrap();
            assert!((lp - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn reference_identity_is_ln2() {
        let m = micro(2);
        for s in 0..5 {
            let pair = pair_from(&m, (s, s + 100), [0.5, 0.5]);
            for beta in [0.01, 0.1, 1.0] {
                let loss = d3po_loss(&m, &m, &pair, beta).unwrap();
                assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn small_beta_tends_to_ln2() {
        let m = micro(3);
        let other = micro(4);
        let pair = pair_from(&m, (5, 6), [1.0, 0.0]);
        let loss = d3po_loss(&other, &m, &pair, 1e-9).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let reference = micro(5);
        let mut model = micro(6);
        assert!(model.param_count() <= 100);
        let pair = pair_from(&reference, (7, 8), [0.2, -0.9]);
        let beta = 0.5;
        let (loss, analytic) = d3po_loss_grad(&model, &reference, &pair, beta).unwrap();
        assert!((loss - d3po_loss(&model, &reference, &pair, beta).unwrap()).abs() < 1e-12);
        let start = model.params().to_vec();
        let numeric = nn::central_difference(&start, 1e-6, |p| {
            model.params_mut().copy_from_slice(p);
            d3po_loss(&model, &reference, &pair, beta).unwrap()
        });
        let err = nn::relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn update_grows_margin_and_leaves_reference() {
        let reference = micro(9);
        let before = reference.to_checkpoint().unwrap();
        let pair = pair_from(&reference, (10, 11), [0.4, 0.4]);
        let cfg = D3poConfig { lr: 1e-2, update_steps: 3, batch_size: 1, ..Default::default() };
        let m0 = d3po_margin(&reference, &reference, &pair, cfg.beta).unwrap();
        let run = d3po_update(&reference, &reference, std::slice::from_ref(&pair), &cfg).unwrap();
        let m1 = d3po_margin(&run.model, &reference, &pair, cfg.beta).unwrap();
        assert!(m1 > m0, "{m0} -> {m1}");
        assert_eq!(reference.to_checkpoint().unwrap(), before);
        let again = d3po_update(&reference, &reference, std::slice::from_ref(&pair), &cfg).unwrap();
        assert_eq!(again.model.params(), run.model.params());
    }

    #[test]
    fn trainable_group_limits_the_update() {
        let reference = micro(13);
        let pair = pair_from(&reference, (20, 21), [0.4, -0.2]);
        let cfg = D3poConfig { lr: 1e-2, update_steps: 2, batch_size: 1, trainable: ParamGroup::Head, ..Default::default() };
        let run = d3po_update(&reference, &reference, std::slice::from_ref(&pair), &cfg).unwrap();
        let head = reference.param_ranges(ParamGroup::Head);
        for (i, (a, b)) in reference.params().iter().zip(run.model.params()).enumerate() {
            if !head.iter().any(|r| r.contains(&i)) {
                assert_eq!(a, b, "param {i} moved");
            }
        }
        assert_ne!(reference.params(), run.model.params());
    }

    #[test]
    fn empty_pairs_and_zero_sigma_are_errors() {
        let m = micro(12);
        assert!(matches!(d3po_update(&m, &m, &[], &D3poConfig::default()), Err(Error::EmptyPairs)));
        let mut pair = pair_from(&m, (1, 2), [0.0, 0.0]);
        pair.loser.sigmas[1] = 0.0;
        assert!(matches!(d3po_loss(&m, &m, &pair, 0.1), Err(Error::ZeroSigma(_))));
        let step = pair.loser.steps().nth(1).unwrap();
        assert!(matches!(step_logprob(&m, &step, &[0.0, 0.0]), Err(Error::ZeroSigma(_))));
    }
}
