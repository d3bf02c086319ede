//! Generation loops and the accepted-length experiment harness.
//!
//! Both loops share one convention: the KV cache holds every verified token
//! except the most recent one, which is fed with the next forward. For the
//! speculative loop that token is the root of the draft tree and goes first
//! in the verification pass.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::drafting::{build_draft_tree_profiled, DraftParams};
use crate::error::{invalid, Result};
use crate::kernels::{argmax, softmax};
use crate::model::{DraftModel, Head, KvCache, LogitRows, TargetModel, TokenSequence};
use crate::profiler::{Component, Profiler};
use crate::verification::{
    build_tree_mask, sample_index, verify_greedy_rows, verify_stochastic_rows, AcceptanceStats,
    Proposal,
};
use crate::vocab::{restrict_lm_head, FrequencyTable, RankedSubset, RestrictedHead};

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    /// 0 means greedy decoding.
    pub temperature: f32,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub eos_token: Option<u32>,
    pub draft_params: DraftParams,
    /// Restricts drafting to this subset when present.
    pub fr_subset: Option<Arc<RankedSubset>>,
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens,
            seed: 0,
            eos_token: None,
            draft_params: DraftParams::default(),
            fr_subset: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens < 1 {
            return Err(invalid("max_new_tokens must be at least 1"));
        }
        self.draft_params.validate()
    }
}

fn check_prompt(prompt: &TokenSequence, vocab_size: usize) -> Result<(u32, &[u32])> {
    if let Some(&t) = prompt.ids().iter().find(|&&t| t as usize >= vocab_size) {
        return Err(invalid(format!("prompt token {t} outside vocabulary")));
    }
    prompt
        .ids()
        .split_last()
        .map(|(&last, rest)| (last, rest))
        .ok_or_else(|| invalid("prompt must contain at least one token"))
}

fn pick_token(logits: &[f32], temperature: f32, rng: &mut ChaCha8Rng) -> Result<u32> {
    if temperature == 0.0 {
        return Ok(argmax(logits) as u32);
    }
    let probs = softmax(logits, temperature)?;
    let p: Vec<f64> = probs.probs().iter().map(|&x| f64::from(x)).collect();
    Ok(sample_index(&p, rng) as u32)
}

/// One token per target forward.
pub fn generate_vanilla(
    target: &TargetModel,
    prompt: &TokenSequence,
    cfg: &GenerationConfig,
) -> Result<TokenSequence> {
    cfg.validate()?;
    let (mut last, prefix) = check_prompt(prompt, target.config().vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = target.new_cache();
    target.prefill(prefix, &mut cache)?;
    let mut out = Vec::with_capacity(cfg.max_new_tokens);
    while out.len() < cfg.max_new_tokens {
        let fwd = target.forward_rows(&[last], &mut cache, None, LogitRows::Last)?;
        let token = pick_token(fwd.logits.row(0), cfg.temperature, &mut rng)?;
        out.push(token);
        if Some(token) == cfg.eos_token {
            break;
        }
        last = token;
    }
    TokenSequence::new(out, target.config().vocab_size)
}

/// Incremental speculative generation. Sessions own their caches and rng,
/// so several can be stepped in any interleaving against shared models.
pub struct SpeculativeSession<'m> {
    target: &'m TargetModel,
    draft: &'m DraftModel,
    cfg: GenerationConfig,
    head: Option<RestrictedHead>,
    target_cache: KvCache,
    draft_cache: KvCache,
    root: u32,
    draft_pending: Vec<u32>,
    output: Vec<u32>,
    stats: AcceptanceStats,
    rng: ChaCha8Rng,
    finished: bool,
    profiler: Profiler,
    verify_time: Duration,
}

impl<'m> SpeculativeSession<'m> {
    pub fn new(
        target: &'m TargetModel,
        draft: &'m DraftModel,
        prompt: &TokenSequence,
        cfg: &GenerationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if draft.config().vocab_size != target.config().vocab_size
            || draft.config().hidden_dim != target.config().hidden_dim
        {
            return Err(invalid("draft and target models have different shapes"));
        }
        let (root, prefix) = check_prompt(prompt, target.config().vocab_size)?;
        let head = match &cfg.fr_subset {
            Some(subset) if subset.len() < subset.vocab_size() => {
                Some(restrict_lm_head(draft.lm_head(), Arc::clone(subset))?)
            }
            Some(subset) if subset.vocab_size() != target.config().vocab_size => {
                return Err(invalid("subset vocabulary does not match the model"))
            }
            _ => None,
        };
        let mut target_cache = target.new_cache();
        target.prefill(prefix, &mut target_cache)?;
        let mut draft_cache = draft.new_cache();
        draft.prefill(prefix, &mut draft_cache)?;
        Ok(Self {
            target,
            draft,
            cfg: cfg.clone(),
            head,
            target_cache,
            draft_cache,
            root,
            draft_pending: vec![root],
            output: Vec::with_capacity(cfg.max_new_tokens),
            stats: AcceptanceStats::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            finished: false,
            profiler: Profiler::disabled(),
            verify_time: Duration::ZERO,
        })
    }

    /// Records drafting component times (and verification wall time) from now on.
    pub fn enable_profiling(&mut self) {
        self.profiler = Profiler::enabled();
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn output(&self) -> &[u32] {
        &self.output
    }

    pub fn stats(&self) -> &AcceptanceStats {
        &self.stats
    }

    pub fn profiler(&self) -> &Profiler {
        &self.profiler
    }

    pub fn verify_time(&self) -> Duration {
        self.verify_time
    }

    /// One draft/verify iteration. Returns the tokens emitted by it, or
    /// `None` once generation has finished.
    pub fn step(&mut self) -> Result<Option<Vec<u32>>> {
        if self.finished {
            return Ok(None);
        }
        let head = match &self.head {
            Some(h) => Head::Restricted(h),
            None => Head::Full,
        };
        let tree = build_draft_tree_profiled(
            self.draft,
            &mut self.draft_cache,
            &self.draft_pending,
            &self.cfg.draft_params,
            head,
            &mut self.profiler,
        )?;
        self.draft_pending.clear();

        let verify_start = self.profiler.is_enabled().then(Instant::now);
        let mask = build_tree_mask(&tree)?;
        let mut tokens = Vec::with_capacity(tree.len() + 1);
        tokens.push(self.root);
        tokens.extend(tree.nodes().iter().map(|n| n.token));
        let root_index = self.target_cache.len();
        let fwd = self.target.forward_rows(
            &tokens,
            &mut self.target_cache,
            Some(&mask),
            LogitRows::Deferred,
        )?;
        let target = self.target;
        let hidden = &fwd.hidden;
        let outcome = if self.cfg.temperature == 0.0 {
            verify_greedy_rows(&tree, &mut |r| target.logits_for(hidden, r))?
        } else {
            let temperature = self.cfg.temperature;
            verify_stochastic_rows(&tree, Proposal::Deterministic, &mut self.rng, &mut |r| {
                softmax(&target.logits_for(hidden, r)?, temperature).map(|p| p.into_vec())
            })?
        };
        let moved: Vec<usize> = outcome
            .accepted_path
            .iter()
            .map(|&n| root_index + 1 + n)
            .collect();
        self.target_cache.compact(root_index + 1, &moved)?;
        if let Some(start) = verify_start {
            self.verify_time += start.elapsed();
        }

        let mut emitted = outcome.emitted_tokens;
        if let Some(eos) = self.cfg.eos_token {
            if let Some(pos) = emitted.iter().position(|&t| t == eos) {
                emitted.truncate(pos + 1);
                self.finished = true;
            }
        }
        let room = self.cfg.max_new_tokens - self.output.len();
        if emitted.len() >= room {
            emitted.truncate(room);
            self.finished = true;
        }
        self.stats.record(emitted.len());
        self.output.extend_from_slice(&emitted);
        self.root = *emitted.last().expect("every iteration emits a token");
        self.draft_pending.extend_from_slice(&emitted);
        Ok(Some(emitted))
    }

    pub fn run(mut self) -> Result<(TokenSequence, AcceptanceStats)> {
        while self.step()?.is_some() {}
        let vocab = self.target.config().vocab_size;
        Ok((TokenSequence::new(self.output, vocab)?, self.stats))
    }
}

/// Draft-then-verify generation; the output obeys the target's distribution
/// (identical tokens under greedy decoding).
pub fn generate_speculative(
    target: &TargetModel,
    draft: &DraftModel,
    prompt: &TokenSequence,
    cfg: &GenerationConfig,
) -> Result<(TokenSequence, AcceptanceStats)> {
    SpeculativeSession::new(target, draft, prompt, cfg)?.run()
}

// ---------------------------------------------------------------------------
// Experiment harness
// ---------------------------------------------------------------------------

/// Seeded random-walk prompts sampled from the target at temperature 1,
/// each starting from a uniformly random token.
pub fn synthetic_prompts(
    target: &TargetModel,
    count: usize,
    len: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    use rand::Rng;
    if len < 1 {
        return Err(invalid("prompt length must be at least 1"));
    }
    let vocab = target.config().vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let first = rng.random_range(0..vocab as u32);
            let mut ids = vec![first];
            if len > 1 {
                let cfg = GenerationConfig {
                    temperature: 1.0,
                    seed: rng.random(),
                    ..GenerationConfig::greedy(len - 1)
                };
                let start = TokenSequence::new(vec![first], vocab)?;
                ids.extend(generate_vanilla(target, &start, &cfg)?.into_ids());
            }
            TokenSequence::new(ids, vocab)
        })
        .collect()
}

/// Token statistics of the target's own greedy continuations of `prompts`.
pub fn self_corpus_frequencies(
    target: &TargetModel,
    prompts: &[TokenSequence],
    new_tokens: usize,
) -> Result<FrequencyTable> {
    let mut table = FrequencyTable::new(target.config().vocab_size);
    let cfg = GenerationConfig::greedy(new_tokens);
    for p in prompts {
        table.extend(generate_vanilla(target, p, &cfg)?.into_ids())?;
    }
    Ok(table)
}

/// Worker cap for the harness from `FRSPEC_THREADS` (default 1).
pub fn harness_threads() -> usize {
    std::env::var("FRSPEC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// One `fr_size` cell of an accepted-length suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteRow {
    pub fr_size: usize,
    pub stats: AcceptanceStats,
    /// Mean accepted length relative to full-vocabulary drafting.
    pub ratio_to_full_vocab: f64,
    /// Emitted tokens over summed session wall time.
    pub tokens_per_second: f64,
    pub wall_seconds: f64,
    /// Seconds summed over sessions: the drafting components, `verification`,
    /// and `other` for whatever wall time neither covers.
    pub per_component_times: BTreeMap<String, f64>,
    /// Outputs, one per prompt, for equivalence checks.
    #[serde(skip)]
    pub outputs: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub vocab_size: usize,
    pub prompts: usize,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn row(&self, fr_size: usize) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.fr_size == fr_size)
    }
}

struct SessionResult {
    output: Vec<u32>,
    stats: AcceptanceStats,
    wall: Duration,
    profiler: Profiler,
    verify: Duration,
}

fn run_session(
    target: &TargetModel,
    draft: &DraftModel,
    prompt: &TokenSequence,
    cfg: &GenerationConfig,
) -> Result<SessionResult> {
    let start = Instant::now();
    let mut session = SpeculativeSession::new(target, draft, prompt, cfg)?;
    session.enable_profiling();
    while session.step()?.is_some() {}
    let wall = start.elapsed();
    Ok(SessionResult {
        output: session.output.clone(),
        stats: session.stats.clone(),
        wall,
        profiler: session.profiler.clone(),
        verify: session.verify_time,
    })
}

fn run_cell(
    target: &TargetModel,
    draft: &DraftModel,
    prompts: &[TokenSequence],
    cfg: &GenerationConfig,
    threads: usize,
) -> Result<Vec<SessionResult>> {
    let threads = threads.clamp(1, prompts.len().max(1));
    if threads == 1 {
        return prompts.iter().map(|p| run_session(target, draft, p, cfg)).collect();
    }
    let chunk = prompts.len().div_ceil(threads);
    let parts: Vec<Result<Vec<SessionResult>>> = thread::scope(|s| {
        let handles: Vec<_> = prompts
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || part.iter().map(|p| run_session(target, draft, p, cfg)).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("harness worker panicked"))
            .collect()
    });
    // chunks are contiguous, so concatenation restores prompt order
    let mut out = Vec::with_capacity(prompts.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Mean accepted length for each subset size in `fr_sizes`, drafting with
/// the leading ids of `ranked` (plus the EOS token when configured). A
/// full-vocabulary row is always included and is the ratio baseline; a
/// size equal to the vocabulary means unrestricted drafting.
pub fn run_accept_length_suite(
    target: &TargetModel,
    draft: &DraftModel,
    prompts: &[TokenSequence],
    base: &GenerationConfig,
    ranked: &[u32],
    fr_sizes: &[usize],
    threads: usize,
) -> Result<SuiteReport> {
    if prompts.is_empty() {
        return Err(invalid("the suite needs at least one prompt"));
    }
    let vocab = target.config().vocab_size;
    let mut sizes = vec![vocab];
    for &s in fr_sizes {
        if s == 0 || s > vocab {
            return Err(invalid(format!("fr size {s} outside 1..={vocab}")));
        }
        if !sizes.contains(&s) {
            sizes.push(s);
        }
    }
    let forced: Vec<u32> = base.eos_token.into_iter().collect();

    // warm-up so the first cell's timing is not penalized
    run_session(target, draft, &prompts[0], base)?;

    let mut rows = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let mut cfg = base.clone();
        cfg.fr_subset = if size == vocab {
            None
        } else {
            Some(Arc::new(RankedSubset::from_order(ranked, vocab, size, &forced)?))
        };
        let results = run_cell(target, draft, prompts, &cfg, threads)?;
        let mut stats = AcceptanceStats::default();
        let mut prof = Profiler::enabled();
        let mut wall = Duration::ZERO;
        let mut verify = Duration::ZERO;
        let mut outputs = Vec::with_capacity(results.len());
        for r in results {
            stats.merge(&r.stats);
            prof.merge(&r.profiler);
            wall += r.wall;
            verify += r.verify;
            outputs.push(r.output);
        }
        let other = wall.saturating_sub(prof.instrumented() + verify);
        prof.add(Component::Other, other);
        let mut per_component_times: BTreeMap<String, f64> = prof
            .seconds()
            .into_iter()
            .map(|(c, s)| (c.name().to_string(), s))
            .collect();
        per_component_times.insert("verification".to_string(), verify.as_secs_f64());
        let wall_seconds = wall.as_secs_f64();
        rows.push(SuiteRow {
            fr_size: size,
            tokens_per_second: if wall_seconds > 0.0 {
                stats.emitted as f64 / wall_seconds
            } else {
                0.0
            },
            stats,
            ratio_to_full_vocab: 0.0,
            wall_seconds,
            per_component_times,
            outputs,
        });
    }
    let full = rows[0].stats.mean_accepted_length;
    for r in &mut rows {
        r.ratio_to_full_vocab = if full > 0.0 {
            r.stats.mean_accepted_length / full
        } else {
            0.0
        };
    }
    Ok(SuiteReport {
        vocab_size: vocab,
        prompts: prompts.len(),
        rows,
    })
}
