//! The adversarial training loop: generator MLE pretraining, discriminator
//! pretraining against a frozen generator, policy-gradient generator updates
//! rewarded by Monte-Carlo rollouts, alternating inner loops, and metric
//! history.
//!
//! The central trick: rewards are computed on sampled integer sequences, but
//! gradients come from re-running the generator under the tape with the
//! chosen tokens teacher-forced. Nothing ever differentiates through the
//! discrete sampling step, so generator gradients cannot silently vanish.

use crate::codec::{
    batchify, build_vocab, decode, encode, realism_features, RealismReport, SequenceBatch,
    VocabError, Vocabulary,
};
use crate::config::{ConfigError, KvConfig};
use crate::models::{
    sample_next, sample_with_prob, DiscriminatorConfig, DiscriminatorParams, GenerationOutput,
    GeneratorConfig, GeneratorParams, LstmState, ModelError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corpus too small: need at least {needed} tokens, got {got}")]
    CorpusTooSmall { needed: usize, got: usize },
    #[error("bad training setup: {0}")]
    BadConfig(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

// Independent random streams, all derived from the one user seed. The tags
// keep sampling, dropout, data shuffling, rollouts, and evaluation from ever
// sharing a stream, so e.g. running extra rollouts cannot shift the data
// order.
const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_SAMPLE: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_ROLLOUT: u64 = 5;
const STREAM_EVAL: u64 = 6;

const PHASE_MLE: u64 = 10;
const PHASE_DISC: u64 = 11;
const PHASE_ADV: u64 = 12;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible RNG for one (seed, purpose) combination; `tags` name the
/// stream and any epoch/step indices that individualize it.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &tag in tags {
        state = splitmix64(state ^ tag);
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Exponential moving average of sequence rewards, the variance-reduction
/// baseline subtracted from every reward before the policy-gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    value: f64,
    decay: f64,
}

impl Baseline {
    /// Starts at the neutral reward 0.5 (an undecided discriminator).
    pub fn new(decay: f64) -> Result<Self, TrainError> {
        Self::with_initial(decay, 0.5)
    }

    pub fn with_initial(decay: f64, value: f64) -> Result<Self, TrainError> {
        if !(0.0..1.0).contains(&decay) {
            return Err(TrainError::BadConfig(format!(
                "baseline decay {decay} is outside [0, 1)"
            )));
        }
        if !value.is_finite() {
            return Err(TrainError::BadConfig("baseline must be finite".into()));
        }
        Ok(Baseline { value, decay })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn update(&mut self, mean_reward: f64) {
        debug_assert!(mean_reward.is_finite());
        self.value = self.decay * self.value + (1.0 - self.decay) * mean_reward;
    }
}

/// One history row; cells a phase does not measure stay empty in the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: String,
    pub g_loss: Option<f64>,
    pub mean_reward: Option<f64>,
    pub d_loss: Option<f64>,
    pub d_acc: Option<f64>,
    pub parse_rate: Option<f64>,
    pub monotonic_frac: Option<f64>,
    pub lifecycle_rate: Option<f64>,
}

impl HistoryRow {
    fn empty(epoch: String) -> Self {
        HistoryRow {
            epoch,
            g_loss: None,
            mean_reward: None,
            d_loss: None,
            d_acc: None,
            parse_rate: None,
            monotonic_frac: None,
            lifecycle_rate: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str =
        "epoch,g_loss,mean_reward,d_loss,d_acc,parse_rate,monotonic_frac,lifecycle_rate";

    pub fn rows(&self) -> &[HistoryRow] {
        &self.rows
    }

    pub fn push(&mut self, row: HistoryRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: TrainHistory) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.epoch,
                cell(row.g_loss),
                cell(row.mean_reward),
                cell(row.d_loss),
                cell(row.d_acc),
                cell(row.parse_rate),
                cell(row.monotonic_frac),
                cell(row.lifecycle_rate),
            ));
        }
        out
    }
}

/// Everything one training run needs, with defaults sized for a single CPU
/// core at a vocabulary of a few dozen symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Adversarial epochs after both pretraining phases.
    pub epochs: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    /// Sequences generated (and reward-annotated) per generator step.
    pub g_batch: usize,
    pub batch_size: usize,
    /// Window length for training data and the rollout horizon.
    pub seq_length: usize,
    pub n_rollouts: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub baseline_decay: f64,
    pub mle_epochs: usize,
    pub disc_epochs: usize,
    /// Sample size for the per-epoch realism report; 0 disables it.
    pub eval_chars: usize,
    pub seed: u64,
    pub fold_case: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            corpus: PathBuf::from("sim.log"),
            out_dir: PathBuf::from("train_out"),
            epochs: 10,
            g_steps: 1,
            d_steps: 2,
            g_batch: 8,
            batch_size: 64,
            seq_length: 100,
            n_rollouts: 8,
            gen_lr: 1e-3,
            disc_lr: 1e-3,
            baseline_decay: 0.9,
            mle_epochs: 10,
            disc_epochs: 3,
            eval_chars: 2000,
            seed: 1234,
            fold_case: false,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "corpus",
        "out_dir",
        "epochs",
        "g_steps",
        "d_steps",
        "g_batch",
        "batch_size",
        "seq_length",
        "n_rollouts",
        "gen_lr",
        "disc_lr",
        "baseline_decay",
        "mle_epochs",
        "disc_epochs",
        "eval_chars",
        "seed",
        "fold_case",
        "emb_dim",
        "hidden_dim",
        "temperature",
        "filters",
        "kernel_width",
        "dense_dim",
        "dropout",
    ];

    /// Reads a config from `key=value` text, starting from the defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, TrainError> {
        kv.reject_unknown_keys(Self::KEYS)?;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            corpus: PathBuf::from(kv.string("corpus", &d.corpus.display().to_string())),
            out_dir: PathBuf::from(kv.string("out_dir", &d.out_dir.display().to_string())),
            epochs: kv.parsed("epochs", d.epochs)?,
            g_steps: kv.parsed("g_steps", d.g_steps)?,
            d_steps: kv.parsed("d_steps", d.d_steps)?,
            g_batch: kv.parsed("g_batch", d.g_batch)?,
            batch_size: kv.parsed("batch_size", d.batch_size)?,
            seq_length: kv.parsed("seq_length", d.seq_length)?,
            n_rollouts: kv.parsed("n_rollouts", d.n_rollouts)?,
            gen_lr: kv.parsed("gen_lr", d.gen_lr)?,
            disc_lr: kv.parsed("disc_lr", d.disc_lr)?,
            baseline_decay: kv.parsed("baseline_decay", d.baseline_decay)?,
            mle_epochs: kv.parsed("mle_epochs", d.mle_epochs)?,
            disc_epochs: kv.parsed("disc_epochs", d.disc_epochs)?,
            eval_chars: kv.parsed("eval_chars", d.eval_chars)?,
            seed: kv.parsed("seed", d.seed)?,
            fold_case: kv.parsed("fold_case", d.fold_case)?,
            generator: GeneratorConfig {
                emb_dim: kv.parsed("emb_dim", d.generator.emb_dim)?,
                hidden_dim: kv.parsed("hidden_dim", d.generator.hidden_dim)?,
                temperature: kv.parsed("temperature", d.generator.temperature)?,
            },
            discriminator: DiscriminatorConfig {
                emb_dim: kv.parsed("emb_dim", d.discriminator.emb_dim)?,
                filters: kv.parsed("filters", d.discriminator.filters)?,
                kernel_width: kv.parsed("kernel_width", d.discriminator.kernel_width)?,
                dense_dim: kv.parsed("dense_dim", d.discriminator.dense_dim)?,
                dropout: kv.parsed("dropout", d.discriminator.dropout)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::BadConfig(msg));
        if self.n_rollouts == 0 {
            return fail("n_rollouts must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return fail(format!(
                "baseline_decay {} is outside [0, 1)",
                self.baseline_decay
            ));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 (half real, half fake)".into());
        }
        if self.g_batch == 0 {
            return fail("g_batch must be at least 1".into());
        }
        if self.seq_length < self.discriminator.kernel_width {
            return fail(format!(
                "seq_length {} is shorter than the discriminator kernel width {}",
                self.seq_length, self.discriminator.kernel_width
            ));
        }
        for (name, lr) in [("gen_lr", self.gen_lr), ("disc_lr", self.disc_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return fail(format!("{name} {lr} must be a non-negative number"));
            }
        }
        if self.eval_chars != 0 && self.eval_chars < 1000 {
            return fail("eval_chars must be 0 (disabled) or at least 1000".into());
        }
        Ok(())
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Non-overlapping windows of `seq_length` consecutive tokens.
fn real_windows(tokens: &[u32], seq_length: usize) -> Vec<&[u32]> {
    tokens.chunks_exact(seq_length).collect()
}

fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// The generation start symbol: every sampled sequence is conditioned on the
/// vocabulary's first character, which exists for any non-empty vocabulary.
fn start_token() -> u32 {
    0
}

/// Samples `length` tokens from the generator, conditioned on the start
/// symbol, without recording probabilities.
fn sample_tokens<R: Rng>(
    gen: &GeneratorParams,
    length: usize,
    rng: &mut R,
) -> Result<Vec<u32>, TrainError> {
    let temperature = gen.config().temperature;
    let mut state = LstmState::zeros(gen.config().hidden_dim);
    let mut dist = gen.step(start_token(), &mut state)?;
    let mut out = Vec::with_capacity(length);
    for i in 0..length {
        let token = sample_next(&dist, rng, temperature)?;
        out.push(token);
        if i + 1 < length {
            dist = gen.step(token, &mut state)?;
        }
    }
    Ok(out)
}

/// Teacher-forced maximum-likelihood pretraining of the generator. Batches
/// are visited in a freshly shuffled order each epoch; one `mle_N` history
/// row per epoch records the mean cross-entropy.
pub fn pretrain_generator(
    gen: &mut GeneratorParams,
    tokens: &[u32],
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let mut history = TrainHistory::default();
    if cfg.mle_epochs == 0 {
        return Ok(history);
    }
    let batches = batchify(tokens, cfg.seq_length, cfg.batch_size).map_err(|_| {
        TrainError::CorpusTooSmall {
            needed: cfg.batch_size * (cfg.seq_length + 1),
            got: tokens.len(),
        }
    })?;
    if batches.is_empty() {
        return Err(TrainError::CorpusTooSmall {
            needed: cfg.batch_size * (cfg.seq_length + 1),
            got: tokens.len(),
        });
    }
    for epoch in 1..=cfg.mle_epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        let mut data_rng = derive_rng(cfg.seed, &[STREAM_DATA, PHASE_MLE, epoch as u64]);
        shuffle(&mut order, &mut data_rng);
        let mut losses = Vec::with_capacity(order.len());
        for index in order {
            let (inputs, targets) = &batches[index];
            losses.push(gen.mle_pretrain_step(inputs, targets, cfg.gen_lr)?);
        }
        let mut row = HistoryRow::empty(format!("mle_{epoch}"));
        row.g_loss = mean(&losses);
        history.push(row);
    }
    Ok(history)
}

/// Supervised discriminator pretraining: balanced batches of real corpus
/// windows against sequences sampled fresh from the frozen generator. Ten
/// percent of the real windows are held out; each `disc_N` row reports the
/// epoch's mean training loss and the held-out accuracy against a fresh
/// held-out-sized batch of fakes.
pub fn pretrain_discriminator(
    gen: &GeneratorParams,
    disc: &mut DiscriminatorParams,
    tokens: &[u32],
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    let mut history = TrainHistory::default();
    if cfg.disc_epochs == 0 {
        return Ok(history);
    }
    let half = cfg.batch_size / 2;
    let mut windows = real_windows(tokens, cfg.seq_length);
    let mut split_rng = derive_rng(cfg.seed, &[STREAM_DATA, PHASE_DISC, 0]);
    shuffle(&mut windows, &mut split_rng);
    let held = (windows.len() / 10).max(1);
    if windows.len() < held + half {
        return Err(TrainError::CorpusTooSmall {
            needed: (held + half) * cfg.seq_length,
            got: tokens.len(),
        });
    }
    let (held_out, training) = windows.split_at(held);

    for epoch in 1..=cfg.disc_epochs {
        let mut order: Vec<&[u32]> = training.to_vec();
        let mut data_rng = derive_rng(cfg.seed, &[STREAM_DATA, PHASE_DISC, epoch as u64]);
        shuffle(&mut order, &mut data_rng);
        let mut sample_rng = derive_rng(cfg.seed, &[STREAM_SAMPLE, PHASE_DISC, epoch as u64]);
        let mut dropout_rng = derive_rng(cfg.seed, &[STREAM_DROPOUT, PHASE_DISC, epoch as u64]);

        let mut losses = Vec::new();
        for real in order.chunks_exact(half) {
            let fakes: Vec<Vec<u32>> = (0..half)
                .map(|_| sample_tokens(gen, cfg.seq_length, &mut sample_rng))
                .collect::<Result<_, _>>()?;
            let fake_refs: Vec<&[u32]> = fakes.iter().map(Vec::as_slice).collect();
            let stats = disc.train_step(real, &fake_refs, cfg.disc_lr, &mut dropout_rng)?;
            losses.push(stats.loss);
        }

        // Held-out accuracy at threshold 0.5, dropout off.
        let held_fakes: Vec<Vec<u32>> = (0..held_out.len())
            .map(|_| sample_tokens(gen, cfg.seq_length, &mut sample_rng))
            .collect::<Result<_, _>>()?;
        let mut correct = 0usize;
        for window in held_out {
            if disc.score(window)? > 0.5 {
                correct += 1;
            }
        }
        for fake in &held_fakes {
            if disc.score(fake)? <= 0.5 {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / (held_out.len() + held_fakes.len()) as f64;

        let mut row = HistoryRow::empty(format!("disc_{epoch}"));
        row.d_loss = mean(&losses);
        row.d_acc = Some(accuracy);
        history.push(row);
    }
    Ok(history)
}

/// Monte-Carlo estimate of how real a partial sequence will look once
/// finished: a sequence already at the horizon is scored directly, anything
/// shorter is completed `n_rollouts` times by the frozen generator and the
/// mean discriminator score of the completions is returned.
pub fn rollout_reward(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    partial: &[u32],
    horizon: usize,
    n_rollouts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    if partial.is_empty() || partial.len() > horizon {
        return Err(TrainError::BadConfig(format!(
            "partial sequence of {} tokens must be within the horizon {horizon} and non-empty",
            partial.len()
        )));
    }
    if n_rollouts == 0 {
        return Err(TrainError::BadConfig(
            "n_rollouts must be at least 1".into(),
        ));
    }
    if partial.len() == horizon {
        return Ok(disc.score(partial)?);
    }
    let mut state = LstmState::zeros(gen.config().hidden_dim);
    let mut dist = Vec::new();
    for &token in partial {
        dist = gen.step(token, &mut state)?;
    }
    rollout_from_state(gen, disc, partial, &state, &dist, horizon, n_rollouts, rng)
}

/// Rollout completion when the prefix state is already known (the hot path:
/// the adversarial loop extends one sequence token by token and carries the
/// state along instead of re-feeding the prefix).
#[allow(clippy::too_many_arguments)]
fn rollout_from_state(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    prefix: &[u32],
    state: &LstmState,
    next_dist: &[f64],
    horizon: usize,
    n_rollouts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let need = horizon - prefix.len();
    let temperature = gen.config().temperature;
    let mut total = 0.0;
    let mut full = Vec::with_capacity(horizon);
    for _ in 0..n_rollouts {
        full.clear();
        full.extend_from_slice(prefix);
        let mut st = state.clone();
        let mut dist = next_dist.to_vec();
        for step in 0..need {
            let token = sample_next(&dist, rng, temperature)?;
            full.push(token);
            if step + 1 < need {
                dist = gen.step(token, &mut st)?;
            }
        }
        total += disc.score(&full)?;
    }
    Ok(total / n_rollouts as f64)
}

/// One REINFORCE update. Each sampled sequence is replayed teacher-forced
/// (prefixed by the seed tokens it was conditioned on), and every position's
/// log-probability is weighted by its centered reward `reward − baseline`,
/// scaled by 1/(batch·length). Returns the surrogate loss before the update
/// and then folds the batch's mean reward into the baseline.
pub fn policy_gradient_step(
    gen: &mut GeneratorParams,
    seed_tokens: &[u32],
    outputs: &[GenerationOutput],
    rewards: &[Vec<f64>],
    baseline: &mut Baseline,
    lr: f64,
) -> Result<f64, TrainError> {
    if seed_tokens.is_empty() {
        return Err(TrainError::BadConfig(
            "policy step needs the seed tokens the sequences were conditioned on".into(),
        ));
    }
    if outputs.is_empty() || outputs.len() != rewards.len() {
        return Err(TrainError::BadConfig(format!(
            "got {} sequences but {} reward rows",
            outputs.len(),
            rewards.len()
        )));
    }
    let steps = outputs[0].tokens.len();
    if steps == 0 {
        return Err(TrainError::BadConfig("sequences must be non-empty".into()));
    }
    for (out, reward_row) in outputs.iter().zip(rewards) {
        if out.tokens.len() != steps || reward_row.len() != steps {
            return Err(TrainError::BadConfig(format!(
                "sequence/reward lengths disagree: {} tokens vs {} rewards (expected {steps})",
                out.tokens.len(),
                reward_row.len()
            )));
        }
    }

    let bsz = outputs.len();
    let lead = seed_tokens.len() - 1;
    let width = lead + steps;
    let scale = 1.0 / (bsz * steps) as f64;
    let mut inputs = Vec::with_capacity(bsz * width);
    let mut targets = Vec::with_capacity(bsz * width);
    let mut weights = Vec::with_capacity(bsz * width);
    for (out, reward_row) in outputs.iter().zip(rewards) {
        // Input row: [seed…, a_1..a_{T−1}]; target row: [seed_2.., a_1..a_T].
        inputs.extend_from_slice(seed_tokens);
        inputs.extend_from_slice(&out.tokens[..steps - 1]);
        targets.extend_from_slice(&seed_tokens[1..]);
        targets.extend_from_slice(&out.tokens);
        weights.extend(std::iter::repeat(0.0).take(lead));
        weights.extend(reward_row.iter().map(|&r| (r - baseline.value()) * scale));
    }
    let inputs = SequenceBatch::new(bsz, width, inputs).map_err(ModelError::from)?;
    let targets = SequenceBatch::new(bsz, width, targets).map_err(ModelError::from)?;
    let loss = gen.weighted_step(&inputs, &targets, &weights, lr)?;

    let total: f64 = rewards.iter().flatten().sum();
    baseline.update(total / (bsz * steps) as f64);
    Ok(loss)
}

/// One adversarial epoch: `g_steps` policy-gradient updates on freshly
/// sampled sequences with per-prefix rollout rewards, then `d_steps`
/// discriminator updates on fresh real/fake batches, then an optional
/// realism snapshot of a generated sample.
pub fn adversarial_epoch(
    gen: &mut GeneratorParams,
    disc: &mut DiscriminatorParams,
    tokens: &[u32],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    baseline: &mut Baseline,
    epoch: usize,
) -> Result<HistoryRow, TrainError> {
    let horizon = cfg.seq_length;
    let e = epoch as u64;
    let mut sample_rng = derive_rng(cfg.seed, &[STREAM_SAMPLE, PHASE_ADV, e]);
    let mut rollout_rng = derive_rng(cfg.seed, &[STREAM_ROLLOUT, PHASE_ADV, e]);
    let mut dropout_rng = derive_rng(cfg.seed, &[STREAM_DROPOUT, PHASE_ADV, e]);
    let mut data_rng = derive_rng(cfg.seed, &[STREAM_DATA, PHASE_ADV, e]);

    let temperature = gen.config().temperature;
    let seed_tokens = [start_token()];
    let mut g_losses = Vec::with_capacity(cfg.g_steps);
    let mut reward_means = Vec::with_capacity(cfg.g_steps);
    for _ in 0..cfg.g_steps {
        let mut outputs = Vec::with_capacity(cfg.g_batch);
        let mut all_rewards = Vec::with_capacity(cfg.g_batch);
        for _ in 0..cfg.g_batch {
            let mut state = LstmState::zeros(gen.config().hidden_dim);
            let mut dist = gen.step(seed_tokens[0], &mut state)?;
            let mut toks = Vec::with_capacity(horizon);
            let mut probs = Vec::with_capacity(horizon);
            let mut rewards = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let (token, prob) = sample_with_prob(&dist, &mut sample_rng, temperature)?;
                toks.push(token);
                probs.push(prob);
                dist = gen.step(token, &mut state)?;
                let reward = if t + 1 == horizon {
                    disc.score(&toks)?
                } else {
                    rollout_from_state(
                        gen,
                        disc,
                        &toks,
                        &state,
                        &dist,
                        horizon,
                        cfg.n_rollouts,
                        &mut rollout_rng,
                    )?
                };
                rewards.push(reward);
            }
            outputs.push(GenerationOutput {
                tokens: toks,
                chosen_probs: probs,
            });
            all_rewards.push(rewards);
        }
        let batch_mean = all_rewards.iter().flatten().sum::<f64>() / (cfg.g_batch * horizon) as f64;
        let loss = policy_gradient_step(
            gen,
            &seed_tokens,
            &outputs,
            &all_rewards,
            baseline,
            cfg.gen_lr,
        )?;
        g_losses.push(loss);
        reward_means.push(batch_mean);
    }

    let mut d_losses = Vec::with_capacity(cfg.d_steps);
    let mut d_accs = Vec::with_capacity(cfg.d_steps);
    if cfg.d_steps > 0 {
        let windows = real_windows(tokens, cfg.seq_length);
        let half = cfg.batch_size / 2;
        if windows.len() < half {
            return Err(TrainError::CorpusTooSmall {
                needed: half * cfg.seq_length,
                got: tokens.len(),
            });
        }
        for _ in 0..cfg.d_steps {
            let real: Vec<&[u32]> = (0..half)
                .map(|_| windows[data_rng.random_range(0..windows.len())])
                .collect();
            let fakes: Vec<Vec<u32>> = (0..half)
                .map(|_| sample_tokens(gen, cfg.seq_length, &mut sample_rng))
                .collect::<Result<_, _>>()?;
            let fake_refs: Vec<&[u32]> = fakes.iter().map(Vec::as_slice).collect();
            let stats = disc.train_step(&real, &fake_refs, cfg.disc_lr, &mut dropout_rng)?;
            d_losses.push(stats.loss);
            d_accs.push(stats.accuracy);
        }
    }

    let mut row = HistoryRow::empty(format!("adv_{epoch}"));
    row.g_loss = mean(&g_losses);
    row.mean_reward = mean(&reward_means);
    row.d_loss = mean(&d_losses);
    row.d_acc = mean(&d_accs);
    if cfg.eval_chars >= 1000 {
        let mut eval_rng = derive_rng(cfg.seed, &[STREAM_EVAL, PHASE_ADV, e]);
        let (report, _) = evaluate_generator(gen, vocab, cfg.eval_chars, &mut eval_rng)?;
        row.parse_rate = Some(report.line_parse_rate);
        row.monotonic_frac = Some(report.timestamp_monotonic_fraction);
        row.lifecycle_rate = Some(report.lifecycle_complete_rate);
    }
    Ok(row)
}

/// Samples a long excerpt from the generator and scores it with the log
/// realism metrics. The sample is seeded with the log prefix `"1 - New
/// Call:"` when the vocabulary can spell it, the as-logged capitalization
/// `"1 - New call:"` otherwise, and the vocabulary's first character as a
/// last resort. Returns the report together with the sampled text.
pub fn evaluate_generator(
    gen: &GeneratorParams,
    vocab: &Vocabulary,
    sample_chars: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(RealismReport, String), TrainError> {
    if sample_chars < 1000 {
        return Err(TrainError::BadConfig(
            "evaluation samples shorter than 1000 characters are too noisy".into(),
        ));
    }
    let first = vocab.char_at(0).map_err(ModelError::from)?.to_string();
    let seed = ["1 - New Call:", "1 - New call:"]
        .into_iter()
        .find(|s| encode(s, vocab).is_ok())
        .unwrap_or(&first);
    let output = gen.generate_sequence(seed, sample_chars, vocab, rng)?;
    let continuation = decode(&output.tokens, vocab)?;
    let text = format!("{seed}{continuation}");
    Ok((realism_features(&text), text))
}

/// The trained networks, their vocabulary, and the full metric history.
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub vocab: Vocabulary,
}

/// Freshly initialized generator and discriminator for one training run.
/// Both networks draw from a single seed-derived stream (generator first),
/// so a standalone pretraining command and the full pipeline start from the
/// same weights.
pub fn init_models(
    cfg: &TrainConfig,
    vocab_size: usize,
) -> Result<(GeneratorParams, DiscriminatorParams), TrainError> {
    let mut init_rng = derive_rng(cfg.seed, &[STREAM_INIT]);
    let gen = GeneratorParams::new(vocab_size, cfg.generator.clone(), &mut init_rng)?;
    let disc = DiscriminatorParams::new(vocab_size, cfg.discriminator.clone(), &mut init_rng)?;
    Ok((gen, disc))
}

/// Full pipeline on an in-memory corpus: build the vocabulary, MLE-pretrain
/// the generator, pretrain the discriminator, run the adversarial epochs
/// (checkpointing both networks into `out_dir` after each), and write the
/// history CSV.
pub fn train_with_corpus(cfg: &TrainConfig, corpus: &str) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let vocab = build_vocab(corpus, cfg.fold_case)?;
    let tokens = encode(corpus, &vocab)?;
    let (mut gen, mut disc) = init_models(cfg, vocab.size())?;

    let mut history = TrainHistory::default();
    history.extend(pretrain_generator(&mut gen, &tokens, cfg)?);
    history.extend(pretrain_discriminator(&gen, &mut disc, &tokens, cfg)?);

    std::fs::create_dir_all(&cfg.out_dir)?;
    let gen_path = cfg.out_dir.join("generator.ckpt");
    let disc_path = cfg.out_dir.join("discriminator.ckpt");
    let mut baseline = Baseline::new(cfg.baseline_decay)?;
    for epoch in 1..=cfg.epochs {
        let row = adversarial_epoch(
            &mut gen,
            &mut disc,
            &tokens,
            &vocab,
            cfg,
            &mut baseline,
            epoch,
        )?;
        history.push(row);
        gen.save(&gen_path, &vocab)?;
        disc.save(&disc_path, &vocab)?;
    }
    if cfg.epochs == 0 {
        gen.save(&gen_path, &vocab)?;
        disc.save(&disc_path, &vocab)?;
    }
    std::fs::write(cfg.out_dir.join("history.csv"), history.to_csv())?;

    Ok(TrainOutcome {
        history,
        generator: gen,
        discriminator: disc,
        vocab,
    })
}

/// [`train_with_corpus`] on a corpus file named by the config.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let corpus = std::fs::read_to_string(&cfg.corpus)?;
    if corpus.is_empty() {
        return Err(TrainError::CorpusTooSmall { needed: 1, got: 0 });
    }
    train_with_corpus(cfg, &corpus)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig, TrainError> {
    Ok(TrainConfig::from_kv(&KvConfig::load(path)?)?)
}
