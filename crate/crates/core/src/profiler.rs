//! Kernel-granularity wall-clock attribution for the drafting loop.
//!
//! Each instrumented call site wraps exactly one kernel invocation in
//! [`Profiler::time`]; whatever the repetition spends outside those spans is
//! booked as [`Component::Other`].

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::drafting::{build_draft_tree_profiled, DraftParams};
use crate::error::{invalid, Result};
use crate::model::{DraftModel, Head, KvCache};

/// Drafting cost categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embedding,
    TransformerLayer,
    LmHead,
    Softmax,
    TreeOps,
    Other,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Embedding,
        Component::TransformerLayer,
        Component::LmHead,
        Component::Softmax,
        Component::TreeOps,
        Component::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Embedding => "embedding",
            Component::TransformerLayer => "transformer_layer",
            Component::LmHead => "lm_head",
            Component::Softmax => "softmax",
            Component::TreeOps => "tree_ops",
            Component::Other => "other",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Accumulates time per [`Component`]. A disabled profiler never reads the
/// clock, so passing one through the hot path costs a branch.
#[derive(Debug, Clone, Default)]
pub struct Profiler {
    enabled: bool,
    spent: [Duration; 6],
}

impl Profiler {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn enabled() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    #[inline]
    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    #[inline]
    pub fn time<T>(&mut self, component: Component, f: impl FnOnce() -> T) -> T {
        if !self.enabled {
            return f();
        }
        let start = Instant::now();
        let out = f();
        self.spent[component.index()] += start.elapsed();
        out
    }

    pub fn add(&mut self, component: Component, d: Duration) {
        if self.enabled {
            self.spent[component.index()] += d;
        }
    }

    pub fn spent(&self, component: Component) -> Duration {
        self.spent[component.index()]
    }

    /// Sum over the instrumented components (everything but `Other`).
    pub fn instrumented(&self) -> Duration {
        Component::ALL[..5].iter().map(|&c| self.spent(c)).sum()
    }

    pub fn merge(&mut self, other: &Profiler) {
        for c in Component::ALL {
            self.spent[c.index()] += other.spent(c);
        }
    }

    pub fn reset(&mut self) {
        self.spent = Default::default();
    }

    /// Per-component seconds, in [`Component::ALL`] order.
    pub fn seconds(&self) -> Vec<(Component, f64)> {
        Component::ALL
            .iter()
            .map(|&c| (c, self.spent(c).as_secs_f64()))
            .collect()
    }
}

/// Median per-component drafting time and the resulting shares.
#[derive(Debug, Clone, Serialize)]
pub struct TimingBreakdown {
    pub repetitions: usize,
    /// Median seconds per component, in [`Component::ALL`] order.
    pub median_seconds: Vec<(Component, f64)>,
    /// Sum of the component medians.
    pub total_seconds: f64,
    pub shares: Vec<(Component, f64)>,
}

impl TimingBreakdown {
    /// Builds a breakdown from one profiler per repetition, each of which
    /// must already have `Other` filled in.
    pub fn from_repetitions(runs: &[Profiler]) -> Result<Self> {
        if runs.is_empty() {
            return Err(invalid("no repetitions to summarize"));
        }
        let median_seconds: Vec<(Component, f64)> = Component::ALL
            .iter()
            .map(|&c| {
                let mut xs: Vec<f64> = runs.iter().map(|p| p.spent(c).as_secs_f64()).collect();
                (c, median(&mut xs))
            })
            .collect();
        let total_seconds: f64 = median_seconds.iter().map(|e| e.1).sum();
        if total_seconds <= 0.0 {
            return Err(invalid("profiled total time is zero"));
        }
        let shares = median_seconds
            .iter()
            .map(|&(c, s)| (c, s / total_seconds))
            .collect();
        Ok(Self {
            repetitions: runs.len(),
            median_seconds,
            total_seconds,
            shares,
        })
    }

    pub fn share(&self, component: Component) -> f64 {
        self.shares
            .iter()
            .find(|e| e.0 == component)
            .map_or(0.0, |e| e.1)
    }

    /// LM-head projection plus the vocabulary-wide softmax.
    pub fn vocab_share(&self) -> f64 {
        self.share(Component::LmHead) + self.share(Component::Softmax)
    }

    /// True when unattributed time exceeds 20% of the total.
    pub fn other_warning(&self) -> bool {
        self.share(Component::Other) > 0.20
    }
}

pub(crate) fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub const MIN_REPETITIONS: usize = 10;
pub const WARMUP_ITERATIONS: usize = 3;

/// Times `repetitions` full draft-tree constructions from the same context.
///
/// `context` is the verified sequence; all but its last token are prefilled
/// once into a shared cache, and each repetition drafts from a copy of it.
pub fn profile_drafting(
    draft: &DraftModel,
    context: &[u32],
    params: &DraftParams,
    head: Head<'_>,
    repetitions: usize,
) -> Result<TimingBreakdown> {
    if repetitions < MIN_REPETITIONS {
        return Err(invalid(format!(
            "profiling needs at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    let (&root, prefix) = context
        .split_last()
        .ok_or_else(|| invalid("profiling needs a nonempty context"))?;
    let mut base = draft.new_cache();
    if !prefix.is_empty() {
        draft.prefill(prefix, &mut base)?;
    }

    let mut runs = Vec::with_capacity(repetitions);
    for rep in 0..WARMUP_ITERATIONS + repetitions {
        let mut cache: KvCache = base.clone();
        let mut prof = Profiler::enabled();
        let start = Instant::now();
        build_draft_tree_profiled(draft, &mut cache, &[root], params, head, &mut prof)?;
        let total = start.elapsed();
        let other = total.saturating_sub(prof.instrumented());
        prof.add(Component::Other, other);
        if rep >= WARMUP_ITERATIONS {
            runs.push(prof);
        }
    }
    TimingBreakdown::from_repetitions(&runs)
}
