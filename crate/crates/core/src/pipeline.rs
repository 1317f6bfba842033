//! Batch pipelines: embedder and SFT training, twin-pathway training over
//! dialogue traces, and the evaluation harnesses.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::d3po::{collect_pair, D3poTrainer, PreferencePair};
use crate::diffusion::{Denoiser, NoisePredictor, TrainingItem};
use crate::embedder::{default_vocab, similarity, train_contrastive, ContrastivePair, EmbeddingModel};
use crate::error::{Error, Result};
use crate::explicit::{template_response, DialogueHistory, GrammarSummarizer, PromptRep, Summarizer};
use crate::generator::Generator;
use crate::implicit::{assess, attend_excite, ActivationState, AeConfig, AmbiguityReport};
use crate::nn::{mix_seed, Adam, AdamConfig};
use crate::scene::{self, match_score, oracle_caption, render, Color, Image, PartialSceneSpec, SceneSpec, Slot};
use crate::session::{RoundRecord, SessionMode, SessionRecord, SessionStatus, SessionStore};
use crate::user::{SyntheticUser, Trace};

/// File names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn embedder(&self) -> PathBuf {
        self.root.join("embedder.json")
    }

    pub fn sft(&self) -> PathBuf {
        self.root.join("sft.json")
    }

    pub fn sft_loss(&self) -> PathBuf {
        self.root.join("sft_loss.csv")
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces.jsonl")
    }

    pub fn twin(&self) -> PathBuf {
        self.root.join("twin.json")
    }

    pub fn twin_log(&self) -> PathBuf {
        self.root.join("twin_log.jsonl")
    }

    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs.jsonl")
    }
}

pub fn load_embedder(path: &Path) -> Result<EmbeddingModel> {
    EmbeddingModel::from_checkpoint(&fs::read_to_string(path)?)
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    Denoiser::from_checkpoint(&fs::read_to_string(path)?)
}

pub fn generator_for(cfg: &RunConfig, embedder: Arc<EmbeddingModel>, denoiser: Arc<Denoiser>) -> Generator {
    let mut g = Generator::new(embedder, denoiser, cfg.schedule.ddim_steps);
    g.clip_denoised = cfg.schedule.clip_denoised;
    g
}

fn drop_slots(spec: SceneSpec, p: f64, rng: &mut impl Rng) -> PartialSceneSpec {
    let mut out: PartialSceneSpec = spec.into();
    for s in Slot::ALL {
        if rng.gen::<f64>() < p {
            out.clear(s);
        }
    }
    out
}

/// Contrastive training on captions with random slot dropout.
pub fn train_embedder(cfg: &RunConfig, data: &[scene::DatasetRecord]) -> Result<(EmbeddingModel, Vec<f64>)> {
    let tc = &cfg.embedder_training;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::EmbedderData));
    let pairs: Vec<ContrastivePair> = data
        .iter()
        .take(tc.pairs)
        .map(|r| {
            let mut p = drop_slots(r.spec, tc.slot_dropout, &mut rng);
            if p.is_empty() {
                p = r.spec.into();
            }
            Ok(ContrastivePair { text: scene::phrase(&p, scene::PhraseStyle::Verbose)?, image: r.image.clone(), scene: Some(r.spec) })
        })
        .collect::<Result<_>>()?;
    let model = EmbeddingModel::new(cfg.embedder, default_vocab(), cfg.stage_seed(Stage::EmbedderInit))?;
    let run = train_contrastive(model, &pairs, &tc.contrastive, cfg.stage_seed(Stage::EmbedderTraining))?;
    Ok((run.model, run.epoch_losses))
}

/// Text-to-image top-1 accuracy: each of `sets` candidate sets holds one fresh
/// render of every full scene; every scene's full prompt must pick its own.
pub fn retrieval_top1(model: &EmbeddingModel, sets: usize, seed: u64) -> Result<f64> {
    let specs = SceneSpec::all();
    let texts = specs
        .iter()
        .map(|s| model.embed_text(&PromptRep::new((*s).into(), 1).tokens, None))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0;
    for set in 0..sets {
        let images: Vec<Vec<f64>> = specs
            .iter()
            .enumerate()
            .map(|(i, s)| model.embed_image(&render(s, mix_seed(seed, &[set as u64, i as u64]))))
            .collect();
        for (i, t) in texts.iter().enumerate() {
            let best = images
                .iter()
                .enumerate()
                .max_by(|a, b| similarity(t, a.1).total_cmp(&similarity(t, b.1)))
                .map(|(j, _)| j);
            if best == Some(i) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (sets * specs.len()) as f64)
}

#[derive(Debug, Clone)]
pub struct SftOutput {
    pub embedder: EmbeddingModel,
    pub embedder_losses: Vec<f64>,
    pub untrained: Denoiser,
    pub denoiser: Denoiser,
    /// `(step, mean loss per pixel)` over each logging window.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Trains the embedder, then the denoiser on the diffusion loss over
/// `sample_dataset(dataset_size)` with slot-dropped conditioning prompts.
pub fn train_sft(cfg: &RunConfig, mut progress: impl FnMut(usize, f64)) -> Result<SftOutput> {
    let sc = &cfg.sft;
    if sc.batch_size == 0 || sc.log_every == 0 {
        return Err(Error::InvalidArgument("batch_size and log_every must be positive".into()));
    }
    let data = scene::sample_dataset(sc.dataset_size, cfg.stage_seed(Stage::Dataset));
    let (embedder, embedder_losses) = train_embedder(cfg, &data)?;
    let mut denoiser = Denoiser::new(cfg.denoiser, cfg.schedule.build()?, cfg.stage_seed(Stage::DenoiserInit))?;
    let untrained = denoiser.clone();
    let mut cache: HashMap<PartialSceneSpec, Vec<f64>> = HashMap::new();
    let mut opt = Adam::new(AdamConfig::with_lr(sc.lr), denoiser.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::SftBatches));
    let per_pixel = denoiser.sample_dim() as f64;
    let mut loss_curve = Vec::new();
    let mut window = 0.0;
    for step in 0..sc.steps {
        let mut batch = Vec::with_capacity(sc.batch_size);
        for _ in 0..sc.batch_size {
            let r = &data[rng.gen_range(0..data.len())];
            let p = drop_slots(r.spec, sc.slot_dropout, &mut rng);
            let cond = match cache.get(&p) {
                Some(c) => c.clone(),
                None => {
                    let c = embedder.embed_text(&PromptRep::new(p, 1).tokens, None)?;
                    cache.insert(p, c.clone());
                    c
                }
            };
            batch.push(TrainingItem { z0: r.image.as_slice().to_vec(), cond });
        }
        let (loss, grad) = denoiser.loss_and_grad(&batch, rng.gen())?;
        opt.step(denoiser.params_mut(), &grad);
        window += loss / per_pixel;
        if (step + 1) % sc.log_every == 0 || step + 1 == sc.steps {
            let n = (step % sc.log_every + 1) as f64;
            loss_curve.push((step + 1, window / n));
            progress(step + 1, window / n);
            window = 0.0;
        }
    }
    Ok(SftOutput { embedder, embedder_losses, untrained, denoiser, loss_curve })
}

impl SftOutput {
    pub fn save(&self, paths: &RunPaths) -> Result<()> {
        fs::create_dir_all(&paths.root)?;
        fs::write(paths.embedder(), self.embedder.to_checkpoint()?)?;
        fs::write(paths.sft(), self.denoiser.to_checkpoint()?)?;
        let mut out = BufWriter::new(fs::File::create(paths.sft_loss())?);
        writeln!(out, "step,loss_per_pixel")?;
        for (s, l) in &self.loss_curve {
            writeln!(out, "{s},{l}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Mean oracle match of DDIM samples for full prompts cycling through all
/// scenes; `n` samples with seeds derived from `seed`.
pub fn mean_match_score(generator: &Generator, n: usize, seed: u64) -> Result<f64> {
    let specs = SceneSpec::all();
    let mut total = 0.0;
    for i in 0..n {
        let target = specs[i % specs.len()];
        let img = generator.generate(&PromptRep::new(target.into(), 1), mix_seed(seed, &[i as u64]))?;
        total += match_score(&target, &img);
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSummary {
    pub activation_list: Vec<usize>,
    pub sims: Vec<f64>,
    pub best_index: usize,
    pub best_sim: f64,
    pub iterations_used: usize,
    pub exhausted: bool,
    pub reached_threshold: bool,
}

impl From<&ActivationState> for ActivationSummary {
    fn from(s: &ActivationState) -> Self {
        ActivationSummary {
            activation_list: s.activation_list.clone(),
            sims: s.sims.clone(),
            best_index: s.best_index,
            best_sim: s.best_sim,
            iterations_used: s.iterations_used,
            exhausted: s.exhausted,
            reached_threshold: s.reached_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinRoundLog {
    pub trace: usize,
    pub round: usize,
    pub utterance: String,
    pub prompt: PromptRep,
    pub winner_seed: u64,
    pub loser_seed: u64,
    pub winner_score: f64,
    pub loser_score: f64,
    pub tied: bool,
    /// Mean D3PO loss of this round's updates, if any ran.
    pub d3po_loss: Option<f64>,
    pub ambiguity: AmbiguityReport,
    pub activation: ActivationSummary,
}

#[derive(Debug, Clone)]
pub struct TwinOutput {
    pub denoiser: Denoiser,
    pub log: Vec<TwinRoundLog>,
}

impl TwinOutput {
    pub fn save(&self, paths: &RunPaths) -> Result<()> {
        fs::create_dir_all(&paths.root)?;
        fs::write(paths.twin(), self.denoiser.to_checkpoint()?)?;
        let mut out = BufWriter::new(fs::File::create(paths.twin_log())?);
        for r in &self.log {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Full reflective training. Per round: summarize, collect a judged pair and
/// update against the frozen SFT reference, caption the winner, score
/// ambiguity, and refine the winner with attend-and-excite. A triggered
/// clarification is answered truthfully and becomes the next utterance.
pub fn twin_train(
    cfg: &RunConfig,
    embedder: Arc<EmbeddingModel>,
    reference: &Denoiser,
    traces: &[Trace],
    mut progress: impl FnMut(&TwinRoundLog),
) -> Result<TwinOutput> {
    let tc = &cfg.twin;
    let summarizer = GrammarSummarizer;
    let mut trainer = D3poTrainer::new(reference, reference, &cfg.d3po)?;
    let seed = cfg.stage_seed(Stage::Twin);
    let mut log = Vec::new();
    for trace in traces {
        let mut user = trace.user(cfg.eval.satisfaction, mix_seed(seed, &[trace.id as u64]));
        user.disclosed.push(trace.order[0]);
        let mut history = DialogueHistory::new();
        let mut w = trace.utterances[0].clone();
        let mut trace_pairs: Vec<PreferencePair> = Vec::new();
        for round in 1..=tc.rounds_per_trace {
            let prompt = summarizer.summarize(&history, &w);
            let generator = generator_for(cfg, embedder.clone(), Arc::new(trainer.model().clone()));
            let seeds = (mix_seed(seed, &[trace.id as u64, round as u64, 0]), mix_seed(seed, &[trace.id as u64, round as u64, 1]));
            let target = trace.target;
            let judge = move |img: &Image| match_score(&target, img);
            let (pair, images) = collect_pair(&generator, &prompt, None, &judge, seeds, &format!("trace-{}", trace.id), round)?;
            let (winner_score, loser_score) = (match_score(&target, &images[0]), match_score(&target, &images[1]));
            let mut d3po_loss = None;
            if !pair.tied || tc.use_tied_pairs {
                if tc.updates_per_round > 0 {
                    let mut total = 0.0;
                    for _ in 0..tc.updates_per_round {
                        total += trainer.step(std::slice::from_ref(&pair))?;
                    }
                    d3po_loss = Some(total / tc.updates_per_round as f64);
                }
                trace_pairs.push(pair.clone());
            }
            let report = assess(&prompt, &oracle_caption(&images[0]), &embedder, cfg.tau)?;
            let activation = attend_excite(&prompt, &images[0], &cfg.attend_excite, &generator, pair.winner.seed)?;
            let entry = TwinRoundLog {
                trace: trace.id,
                round,
                utterance: w.clone(),
                prompt: prompt.clone(),
                winner_seed: pair.winner.seed,
                loser_seed: pair.loser.seed,
                winner_score,
                loser_score,
                tied: pair.tied,
                d3po_loss,
                ambiguity: report.clone(),
                activation: ActivationSummary::from(&activation),
            };
            progress(&entry);
            log.push(entry);
            history.push(w.clone(), template_response(&prompt));
            w = if report.triggered {
                user.respond(report.target_slot)
            } else if user.next_undisclosed().is_some() {
                user.respond(None)
            } else {
                trace.utterances.get(round).cloned().unwrap_or_else(|| user.respond(None))
            };
        }
        if !trace_pairs.is_empty() {
            for _ in 0..tc.updates_per_trace {
                trainer.step(&trace_pairs)?;
            }
        }
    }
    Ok(TwinOutput { denoiser: trainer.finish().model, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    /// Fraction of cases whose first similarity is below `k`.
    pub frequency: f64,
    /// Mean of `best_sim - Sim_1` over all cases.
    pub improvement: f64,
    pub mean_iterations: f64,
}

/// Cases are prompts with random slot dropout and fixed DDIM seeds; the same
/// cases are reused for every threshold.
pub fn sweep_cases(n: usize, seed: u64) -> Vec<(PromptRep, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let spec = SceneSpec::random(&mut rng);
            let mut p = drop_slots(spec, 0.25, &mut rng);
            if p.is_empty() {
                p = spec.into();
            }
            (PromptRep::new(p, 1), rng.gen())
        })
        .collect()
}

pub fn sweep_ae_threshold(cfg: &RunConfig, generator: &Generator, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    let cases = sweep_cases(cfg.sweep.cases, cfg.stage_seed(Stage::Sweep));
    let firsts = cases.iter().map(|(p, s)| generator.generate(p, *s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(thresholds.len());
    for &k in thresholds {
        let ae = AeConfig { k, ..cfg.attend_excite };
        let mut triggered = 0;
        let mut improvement = 0.0;
        let mut iterations = 0;
        for ((p, s), first) in cases.iter().zip(&firsts) {
            let st = attend_excite(p, first, &ae, generator, *s)?;
            if st.initial_sim() < k {
                triggered += 1;
            }
            improvement += st.best_sim - st.initial_sim();
            iterations += st.iterations_used;
        }
        let n = cases.len().max(1) as f64;
        rows.push(SweepRow { k, frequency: triggered as f64 / n, improvement: improvement / n, mean_iterations: iterations as f64 / n });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub with_implicit: bool,
    /// Round of satisfaction per session; `None` if the cap was hit.
    pub rounds: Vec<Option<usize>>,
    /// Median with unsatisfied sessions counted as `round_cap + 1`.
    pub median: f64,
    /// Mean over satisfied sessions.
    pub mean_satisfied: f64,
    pub satisfied: usize,
    /// `histogram[r - 1]` sessions satisfied at round `r`.
    pub histogram: Vec<usize>,
    pub within_early: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs one synthetic-user session. Without clarification each round is a
/// plain inference round; with it the round's image is captioned, scored for
/// ambiguity, and a triggered question is put to the user.
pub fn run_synthetic_session(
    cfg: &RunConfig,
    generator: &Generator,
    user: &mut SyntheticUser,
    id: &str,
    seed: u64,
    with_implicit: bool,
    store: Option<&SessionStore>,
) -> Result<(SessionRecord, Option<usize>)> {
    let mode = if with_implicit { SessionMode::Training } else { SessionMode::Inference };
    let mut session = SessionRecord::new(id, mode, seed);
    let summarizer = GrammarSummarizer;
    let mut w = user.opening();
    let mut satisfied_at = None;
    for round in 1..=cfg.eval.round_cap {
        let history = session.history();
        let prompt = summarizer.summarize(&history, &w);
        let image_seed = mix_seed(seed, &[round as u64, 0]);
        let image = generator.generate(&prompt, image_seed)?;
        let response = template_response(&prompt);
        let ambiguity = if with_implicit {
            Some(assess(&prompt, &oracle_caption(&image), &generator.embedder, cfg.tau)?)
        } else {
            None
        };
        let images = match store {
            Some(s) => vec![s.save_image(id, round, 0, &image)?],
            None => vec![format!("{id}/{round}_0.png")],
        };
        let question = ambiguity.as_ref().and_then(|a| a.target_slot);
        session.push_round(RoundRecord { round, user_input: w.clone(), response, prompt, images, seeds: vec![image_seed], ambiguity, preference: None })?;
        if user.is_satisfied(&image) {
            satisfied_at = Some(round);
            session.status = SessionStatus::Satisfied;
            break;
        }
        w = user.respond(question);
    }
    if satisfied_at.is_none() {
        session.status = SessionStatus::Abandoned;
    }
    if let Some(s) = store {
        s.persist(&session)?;
    }
    Ok((session, satisfied_at))
}

/// Sessions share targets, disclosure orders and seeds across both settings.
pub fn eval_rounds_to_satisfaction(
    cfg: &RunConfig,
    generator: &Generator,
    n_sessions: usize,
    with_implicit: bool,
    store: Option<&SessionStore>,
) -> Result<EvalSummary> {
    let ec = &cfg.eval;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::Eval));
    let mut rounds = Vec::with_capacity(n_sessions);
    for i in 0..n_sessions {
        let mut user = SyntheticUser::sample(&mut rng, ec.satisfaction, ec.vague_probability);
        let seed = rng.gen();
        let id = format!("eval-{}-{i:03}", if with_implicit { "on" } else { "off" });
        let (_, r) = run_synthetic_session(cfg, generator, &mut user, &id, seed, with_implicit, store)?;
        rounds.push(r);
    }
    let mut histogram = vec![0; ec.round_cap];
    for r in rounds.iter().flatten() {
        histogram[r - 1] += 1;
    }
    let satisfied: Vec<f64> = rounds.iter().flatten().map(|&r| r as f64).collect();
    let n = n_sessions.max(1) as f64;
    Ok(EvalSummary {
        with_implicit,
        median: median(rounds.iter().map(|r| r.unwrap_or(ec.round_cap + 1) as f64).collect()),
        mean_satisfied: if satisfied.is_empty() { f64::NAN } else { satisfied.iter().sum::<f64>() / satisfied.len() as f64 },
        satisfied: satisfied.len(),
        within_early: rounds.iter().filter(|r| matches!(r, Some(x) if *x <= ec.early_rounds)).count() as f64 / n,
        histogram,
        rounds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceShiftReport {
    pub before: f64,
    pub after: f64,
    pub steps: usize,
    pub pairs_used: usize,
    pub pairs_drawn: usize,
    pub step_losses: Vec<f64>,
    pub reference_unchanged: bool,
}

/// Prompts with the color left open; position and background dropped at random.
pub fn color_free_prompts(n: usize, dropout: f64, seed: u64) -> Vec<(PromptRep, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut p: PartialSceneSpec = SceneSpec::random(&mut rng).into();
            p.color = None;
            for s in [Slot::Position, Slot::Background] {
                if rng.gen::<f64>() < dropout {
                    p.clear(s);
                }
            }
            (PromptRep::new(p, 1), rng.gen())
        })
        .collect()
}

pub fn red_fraction(generator: &Generator, prompts: &[(PromptRep, u64)]) -> Result<f64> {
    let mut red = 0;
    for (p, s) in prompts {
        if oracle_caption(&generator.generate(p, *s)?).decode().color == Some(Color::Red) {
            red += 1;
        }
    }
    Ok(red as f64 / prompts.len().max(1) as f64)
}

/// Online D3PO with a judge that prefers red: each step draws fresh
/// non-tied pairs from the current policy for color-free prompts.
pub fn preference_shift(
    cfg: &RunConfig,
    embedder: Arc<EmbeddingModel>,
    reference: &Denoiser,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Denoiser, PreferenceShiftReport)> {
    let pc = &cfg.preference_shift;
    let seed = cfg.stage_seed(Stage::PreferenceShift);
    let before_bytes = reference.to_checkpoint()?;
    let eval = color_free_prompts(pc.eval_prompts, pc.slot_dropout, mix_seed(seed, &[0]));
    let before = red_fraction(&generator_for(cfg, embedder.clone(), Arc::new(reference.clone())), &eval)?;
    let judge = |img: &Image| if oracle_caption(img).decode().color == Some(Color::Red) { 1.0 } else { 0.0 };
    let mut trainer = D3poTrainer::new(reference, reference, &pc.d3po)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[1]));
    let mut drawn = 0;
    let mut used = 0;
    for step in 0..pc.steps {
        let generator = generator_for(cfg, embedder.clone(), Arc::new(trainer.model().clone()));
        let mut pairs = Vec::with_capacity(pc.d3po.batch_size);
        while pairs.len() < pc.d3po.batch_size {
            let (prompt, s) = color_free_prompts(1, pc.slot_dropout, rng.gen()).remove(0);
            let (pair, _) = collect_pair(&generator, &prompt, None, &judge, (s, s ^ 1), "preference-shift", step + 1)?;
            drawn += 1;
            if !pair.tied {
                pairs.push(pair);
            }
        }
        used += pairs.len();
        let loss = trainer.step(&pairs)?;
        progress(step + 1, loss);
    }
    let run = trainer.finish();
    let after = red_fraction(&generator_for(cfg, embedder, Arc::new(run.model.clone())), &eval)?;
    let report = PreferenceShiftReport {
        before,
        after,
        steps: pc.steps,
        pairs_used: used,
        pairs_drawn: drawn,
        step_losses: run.step_losses,
        reference_unchanged: reference.to_checkpoint()? == before_bytes,
    };
    Ok((run.model, report))
}

pub fn read_traces_file(path: &Path) -> Result<Vec<Trace>> {
    crate::user::read_traces(BufReader::new(fs::File::open(path)?))
}

pub fn write_traces_file(path: &Path, traces: &[Trace]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    crate::user::write_traces(traces, &mut out)?;
    out.flush()?;
    Ok(())
}
