//! `frspec`: token statistics, generation, benchmarks and drafting profiles.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or format error.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use frspec_core::drafting::DraftParams;
use frspec_core::engine::{
    generate_speculative, generate_vanilla, harness_threads, run_accept_length_suite,
    self_corpus_frequencies, synthetic_prompts, GenerationConfig,
};
use frspec_core::model::{
    load_checkpoint, save_checkpoint, DraftMode, DraftModel, Head, ModelConfig, TargetModel,
    TokenSequence,
};
use frspec_core::profiler::{profile_drafting, TimingBreakdown};
use frspec_core::verification::AcceptanceStats;
use frspec_core::vocab::{
    count_frequencies, coverage, parse_ids, read_ranked_file, read_token_stream,
    write_ranked_file, write_token_stream, zipf_stream, RankedSubset,
};
use frspec_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "frspec", version, about = "Speculative decoding with frequency-ranked draft vocabularies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count token frequencies and write the ranked id file
    Freq(FreqArgs),
    /// Generate from a prompt
    Gen(GenArgs),
    /// Accepted length and throughput over a grid of subset sizes
    Bench(BenchArgs),
    /// Drafting time breakdown per vocabulary size
    Profile(ProfileArgs),
    /// Write a synthetic target as a checkpoint
    Init(InitArgs),
    /// Write a synthetic Zipf token stream
    Zipf(ZipfArgs),
}

#[derive(Args)]
struct FreqArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Input is whitespace-separated decimal ids
    #[arg(long)]
    text: bool,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelArgs {
    /// FRSM checkpoint
    #[arg(long)]
    model: Option<PathBuf>,
    /// Synthetic target, e.g. `vocab=1024,d=64,layers=2,heads=4,max-seq=1024,seed=0`
    #[arg(long)]
    synth: Option<String>,
}

#[derive(Args)]
struct DraftArgs {
    /// Draft weight noise, in units of the init std
    #[arg(long, default_value_t = 0.05)]
    draft_noise: f32,
    #[arg(long, default_value_t = 0)]
    draft_seed: u64,
    #[arg(long, default_value_t = 10)]
    beam_width: usize,
    #[arg(long, default_value_t = 6)]
    depth: usize,
    /// Draft tokens kept per tree
    #[arg(long, default_value_t = 60)]
    draft_tokens: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Vanilla,
    Spec,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Prompt token ids, comma or space separated
    #[arg(long)]
    prompt_ids: String,
    #[arg(long, value_enum, default_value_t = Mode::Spec)]
    mode: Mode,
    /// Ranked id file for drafting
    #[arg(long)]
    fr_vocab: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    fr_size: Option<u64>,
    #[arg(long, default_value_t = 0.0)]
    temperature: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long)]
    eos: Option<u32>,
    #[command(flatten)]
    draft: DraftArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `fr-sizes=<n>,<n>,...`; `full` means the whole vocabulary
    #[arg(long, default_value = "fr-sizes=full")]
    grid: String,
    /// One prompt per line; synthetic prompts are used when absent
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 80)]
    num_prompts: usize,
    #[arg(long, default_value_t = 16)]
    prompt_len: usize,
    #[arg(long, default_value_t = 1)]
    prompt_seed: u64,
    /// Ranked id file; without it the ranking comes from the target's own
    /// greedy continuations of separately seeded prompts
    #[arg(long)]
    fr_vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    corpus_prompts: usize,
    #[arg(long, default_value_t = 128)]
    corpus_tokens: usize,
    #[arg(long, default_value_t = 1000)]
    corpus_seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    repeat: u64,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    eos: Option<u32>,
    #[command(flatten)]
    draft: DraftArgs,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [8192usize, 32768, 131072])]
    vocab_sizes: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 10)]
    repeat: usize,
    #[arg(long, default_value_t = 32)]
    context_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    beam_width: usize,
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long, default_value_t = 60)]
    draft_tokens: usize,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    synth: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ZipfArgs {
    #[arg(long)]
    vocab_size: usize,
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 1.0)]
    exponent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    text: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

trait Context<T> {
    fn ctx(self, what: impl Display) -> CliResult<T>;
}

impl<T> Context<T> for frspec_core::Result<T> {
    fn ctx(self, what: impl Display) -> CliResult<T> {
        self.map_err(|e| Failure {
            code: match e {
                Error::InvalidInput(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            },
            message: format!("{what}: {e}"),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Freq(a) => freq(a),
        Command::Gen(a) => gen(a),
        Command::Bench(a) => bench(a),
        Command::Profile(a) => profile(a),
        Command::Init(a) => init(a),
        Command::Zipf(a) => zipf(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("frspec: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_synth(spec: &str) -> CliResult<ModelConfig> {
    let mut cfg = ModelConfig {
        vocab_size: 1024,
        hidden_dim: 64,
        num_layers: 2,
        num_heads: 4,
        max_seq_len: 1024,
        seed: 0,
    };
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--synth: expected key=value, got {item:?}")))?;
        let bad = || Failure::usage(format!("--synth: bad value for {key}: {value:?}"));
        let n = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "vocab" => cfg.vocab_size = n()?,
            "d" => cfg.hidden_dim = n()?,
            "layers" => cfg.num_layers = n()?,
            "heads" => cfg.num_heads = n()?,
            "max-seq" => cfg.max_seq_len = n()?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Failure::usage(format!("--synth: unknown key {key:?}"))),
        }
    }
    cfg.validate().ctx("--synth")?;
    Ok(cfg)
}

fn load_target(args: &ModelArgs) -> CliResult<TargetModel> {
    match (&args.model, &args.synth) {
        (Some(path), _) => load_checkpoint(path).ctx(format!("--model {}", path.display())),
        (None, Some(spec)) => TargetModel::build(parse_synth(spec)?).ctx("--synth"),
        (None, None) => Err(Failure::usage("one of --model or --synth is required")),
    }
}

fn build_draft(target: &TargetModel, args: &DraftArgs) -> CliResult<(DraftModel, DraftParams)> {
    let draft = DraftModel::build(target, DraftMode::Perturbed, args.draft_noise, args.draft_seed)
        .ctx("--draft-noise")?;
    let params = DraftParams::new(args.beam_width, args.depth, args.draft_tokens)
        .ctx("--beam-width/--depth/--draft-tokens")?;
    Ok((draft, params))
}

fn read_ranking(path: &Path, vocab: usize) -> CliResult<Vec<u32>> {
    let ids = read_ranked_file(path).ctx(format!("--fr-vocab {}", path.display()))?;
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!(
                "--fr-vocab {}: token {bad} outside vocabulary of size {vocab}",
                path.display()
            ),
        });
    }
    Ok(ids)
}

fn stats_json(stats: &AcceptanceStats) -> Value {
    json!({
        "iterations": stats.iterations,
        "emitted": stats.emitted,
        "mean_accepted_length": stats.mean_accepted_length,
        "histogram": stats.histogram,
    })
}

fn config_json(c: &ModelConfig) -> Value {
    json!({
        "vocab_size": c.vocab_size,
        "hidden_dim": c.hidden_dim,
        "num_layers": c.num_layers,
        "num_heads": c.num_heads,
        "max_seq_len": c.max_seq_len,
        "seed": c.seed,
    })
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string(v).expect("json values serialize"));
}

fn freq(a: FreqArgs) -> CliResult<()> {
    let input = format!("--input {}", a.input.display());
    let stream = read_token_stream(&a.input, a.text).ctx(&input)?;
    if let Some(v) = stream.vocab_size {
        if v != a.vocab_size {
            return Err(Failure {
                code: EXIT_DATA,
                message: format!("{input}: header vocab size {v} differs from --vocab-size {}", a.vocab_size),
            });
        }
    }
    let table = count_frequencies(stream.ids.iter().copied(), a.vocab_size).ctx(&input)?;
    let order = table.rank_order();
    write_ranked_file(&a.out, &order).ctx(format!("--out {}", a.out.display()))?;
    let distinct = table.counts().iter().filter(|&&c| c > 0).count();
    println!("tokens {}", table.total());
    println!("distinct {distinct}");
    for pct in [25usize, 50, 75] {
        let size = (a.vocab_size * pct).div_ceil(100).max(1);
        let subset = RankedSubset::from_order(&order, a.vocab_size, size, &[]).ctx("--vocab-size")?;
        match coverage(&table, &subset) {
            Ok(c) => println!("coverage {pct}% {size} {c:.6}"),
            Err(Error::UndefinedCoverage) => println!("coverage {pct}% {size} undefined"),
            Err(e) => return Err(e).ctx(&input),
        }
    }
    Ok(())
}

fn gen(a: GenArgs) -> CliResult<()> {
    let target = load_target(&a.model)?;
    let vocab = target.config().vocab_size;
    let ids = parse_ids(&a.prompt_ids).map_err(|e| Failure::usage(format!("--prompt-ids: {e}")))?;
    let prompt = TokenSequence::new(ids, vocab).ctx("--prompt-ids")?;
    if a.mode == Mode::Vanilla && (a.fr_vocab.is_some() || a.fr_size.is_some()) {
        return Err(Failure::usage("--fr-vocab and --fr-size only apply to --mode spec"));
    }
    let fr_subset = match (&a.fr_vocab, a.fr_size) {
        (None, None) => None,
        (None, Some(_)) => return Err(Failure::usage("--fr-size needs --fr-vocab")),
        (Some(path), size) => {
            let ranked = read_ranking(path, vocab)?;
            let size = size.map_or(ranked.len(), |s| s as usize);
            let forced: Vec<u32> = a.eos.into_iter().collect();
            Some(Arc::new(
                RankedSubset::from_order(&ranked, vocab, size, &forced).ctx("--fr-size")?,
            ))
        }
    };
    let (draft, params) = build_draft(&target, &a.draft)?;
    let cfg = GenerationConfig {
        temperature: a.temperature,
        max_new_tokens: a.max_new,
        seed: a.seed,
        eos_token: a.eos,
        draft_params: params,
        fr_subset,
    };
    let start = Instant::now();
    let (tokens, stats) = match a.mode {
        Mode::Vanilla => {
            let out = generate_vanilla(&target, &prompt, &cfg).ctx("gen")?;
            let mut stats = AcceptanceStats::default();
            for _ in 0..out.len() {
                stats.record(1);
            }
            (out, stats)
        }
        Mode::Spec => generate_speculative(&target, &draft, &prompt, &cfg).ctx("gen")?,
    };
    let wall = start.elapsed().as_secs_f64();
    print_json(&json!({
        "mode": match a.mode { Mode::Vanilla => "vanilla", Mode::Spec => "spec" },
        "tokens": tokens.ids(),
        "stats": stats_json(&stats),
        "wall_seconds": wall,
        "tokens_per_second": if wall > 0.0 { tokens.len() as f64 / wall } else { 0.0 },
    }));
    Ok(())
}

fn parse_grid(grid: &str, vocab: usize) -> CliResult<Vec<usize>> {
    let list = grid
        .strip_prefix("fr-sizes=")
        .ok_or_else(|| Failure::usage(format!("--grid: expected fr-sizes=..., got {grid:?}")))?;
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "full" => Ok(vocab),
            _ => match s.parse::<usize>() {
                Ok(n) if (1..=vocab).contains(&n) => Ok(n),
                _ => Err(Failure::usage(format!(
                    "--grid: fr size {s:?} is not an integer in 1..={vocab}"
                ))),
            },
        })
        .collect()
}

fn read_prompts(path: &Path, vocab: usize) -> CliResult<Vec<TokenSequence>> {
    let name = format!("--prompts {}", path.display());
    let text = std::fs::read_to_string(path).map_err(Error::from).ctx(&name)?;
    let mut prompts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let data = |m: String| Failure {
            code: EXIT_DATA,
            message: format!("{name}: line {}: {m}", n + 1),
        };
        let ids = parse_ids(line).map_err(data)?;
        prompts.push(TokenSequence::new(ids, vocab).map_err(|e| data(e.to_string()))?);
    }
    if prompts.is_empty() {
        return Err(Failure {
            code: EXIT_DATA,
            message: format!("{name}: no prompts"),
        });
    }
    Ok(prompts)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench(a: BenchArgs) -> CliResult<()> {
    let target = load_target(&a.model)?;
    let vocab = target.config().vocab_size;
    let sizes = parse_grid(&a.grid, vocab)?;
    let prompts = match &a.prompts {
        Some(path) => read_prompts(path, vocab)?,
        None => synthetic_prompts(&target, a.num_prompts, a.prompt_len, a.prompt_seed)
            .ctx("--num-prompts/--prompt-len")?,
    };
    let (ranked, ranking_source) = match &a.fr_vocab {
        Some(path) => (read_ranking(path, vocab)?, path.display().to_string()),
        None => {
            let corpus = synthetic_prompts(&target, a.corpus_prompts, a.prompt_len, a.corpus_seed)
                .ctx("--corpus-prompts")?;
            let table = self_corpus_frequencies(&target, &corpus, a.corpus_tokens)
                .ctx("--corpus-tokens")?;
            (table.rank_order(), "self-corpus".to_string())
        }
    };
    let (draft, params) = build_draft(&target, &a.draft)?;
    let cfg = GenerationConfig {
        temperature: a.temperature,
        max_new_tokens: a.max_new,
        seed: a.seed,
        eos_token: a.eos,
        draft_params: params,
        fr_subset: None,
    };
    cfg.validate().ctx("bench")?;
    let threads = harness_threads();

    let mut vanilla_outputs = Vec::with_capacity(prompts.len());
    let start = Instant::now();
    for (i, p) in prompts.iter().enumerate() {
        let cfg = GenerationConfig {
            seed: a.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        vanilla_outputs.push(generate_vanilla(&target, p, &cfg).ctx("vanilla baseline")?.into_ids());
    }
    let vanilla_wall = start.elapsed().as_secs_f64();
    let vanilla_emitted: usize = vanilla_outputs.iter().map(Vec::len).sum();

    let mut reports = Vec::new();
    for _ in 0..a.repeat {
        reports.push(
            run_accept_length_suite(&target, &draft, &prompts, &cfg, &ranked, &sizes, threads)
                .ctx("bench")?,
        );
    }
    let first = &reports[0];
    let mut rows = Vec::new();
    for (i, row) in first.rows.iter().enumerate() {
        let tps: Vec<f64> = reports.iter().map(|r| r.rows[i].tokens_per_second).collect();
        let mid = median(&tps);
        let timed = reports
            .iter()
            .map(|r| &r.rows[i])
            .min_by(|x, y| (x.tokens_per_second - mid).abs().total_cmp(&(y.tokens_per_second - mid).abs()))
            .expect("at least one repetition");
        let mut entry = Map::new();
        entry.insert("fr_size".into(), json!(row.fr_size));
        entry.insert("mean_accepted_length".into(), json!(row.stats.mean_accepted_length));
        entry.insert("ratio_to_full_vocab".into(), json!(row.ratio_to_full_vocab));
        entry.insert("iterations".into(), json!(row.stats.iterations));
        entry.insert("emitted".into(), json!(row.stats.emitted));
        entry.insert("histogram".into(), json!(row.stats.histogram));
        if a.temperature == 0.0 {
            entry.insert("matches_vanilla".into(), json!(row.outputs == vanilla_outputs));
        }
        entry.insert("tokens_per_second".into(), json!(mid));
        entry.insert("tokens_per_second_runs".into(), json!(tps));
        entry.insert("wall_seconds".into(), json!(timed.wall_seconds));
        entry.insert("per_component_times".into(), json!(timed.per_component_times));
        rows.push(Value::Object(entry));
    }
    print_json(&json!({
        "config": {
            "model": config_json(target.config()),
            "draft": {
                "noise_scale": a.draft.draft_noise,
                "seed": a.draft.draft_seed,
                "beam_width": params.beam_width,
                "search_depth": params.search_depth,
                "total_tokens": params.total_tokens,
            },
            "temperature": a.temperature,
            "max_new_tokens": a.max_new,
            "seed": a.seed,
            "eos_token": a.eos,
            "prompts": prompts.len(),
            "repeat": a.repeat,
            "fr_ranking": ranking_source,
        },
        "vanilla": {
            "emitted": vanilla_emitted,
            "tokens_per_second": if vanilla_wall > 0.0 { vanilla_emitted as f64 / vanilla_wall } else { 0.0 },
            "wall_seconds": vanilla_wall,
        },
        "rows": rows,
    }));
    Ok(())
}

fn breakdown_json(b: &TimingBreakdown) -> (Value, Value) {
    let obj = |xs: &[(frspec_core::profiler::Component, f64)]| {
        Value::Object(xs.iter().map(|(c, s)| (c.name().to_string(), json!(s))).collect())
    };
    (obj(&b.median_seconds), obj(&b.shares))
}

fn profile(a: ProfileArgs) -> CliResult<()> {
    let params = DraftParams::new(a.beam_width, a.depth, a.draft_tokens)
        .ctx("--beam-width/--depth/--draft-tokens")?;
    for &vocab in &a.vocab_sizes {
        let config = ModelConfig {
            vocab_size: vocab,
            hidden_dim: a.d,
            num_layers: 1,
            num_heads: a.heads,
            max_seq_len: a.context_len + a.beam_width * a.depth + 1,
            seed: a.seed,
        };
        config.validate().ctx("--vocab-sizes/--d/--heads")?;
        let target = TargetModel::build(config).ctx("profile")?;
        let draft = DraftModel::build(&target, DraftMode::Truncated, 0.0, 0).ctx("profile")?;
        let context: Vec<u32> = (0..a.context_len.max(1))
            .map(|i| ((i as u64 * 2_654_435_761 + a.seed) % vocab as u64) as u32)
            .collect();
        let b = profile_drafting(&draft, &context, &params, Head::Full, a.repeat).ctx("--repeat")?;
        if b.other_warning() {
            eprintln!(
                "frspec: warning: unattributed time is {:.1}% of drafting at vocab {vocab}",
                100.0 * b.share(frspec_core::profiler::Component::Other)
            );
        }
        let (median_seconds, shares) = breakdown_json(&b);
        print_json(&json!({
            "vocab_size": vocab,
            "hidden_dim": a.d,
            "repetitions": b.repetitions,
            "median_seconds": median_seconds,
            "total_seconds": b.total_seconds,
            "shares": shares,
            "lm_head_softmax_share": b.vocab_share(),
            "other_warning": b.other_warning(),
        }));
    }
    Ok(())
}

fn init(a: InitArgs) -> CliResult<()> {
    let target = TargetModel::build(parse_synth(&a.synth)?).ctx("--synth")?;
    save_checkpoint(&target, &a.out).ctx(format!("--out {}", a.out.display()))?;
    println!("checksum {:016x}", target.checksum());
    Ok(())
}

fn zipf(a: ZipfArgs) -> CliResult<()> {
    let ids = zipf_stream(a.vocab_size, a.exponent, a.len, a.seed).ctx("--vocab-size/--exponent")?;
    let out = format!("--out {}", a.out.display());
    if a.text {
        let text: Vec<String> = ids.iter().map(u32::to_string).collect();
        std::fs::write(&a.out, text.join(" ") + "\n").map_err(Error::from).ctx(&out)?;
    } else {
        let vocab = u32::try_from(a.vocab_size).map_err(|_| Failure::usage("--vocab-size too large"))?;
        write_token_stream(&a.out, vocab, &ids).ctx(&out)?;
    }
    Ok(())
}
