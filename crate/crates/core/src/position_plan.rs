//! Position-index and content layouts for a single training example.
//!
//! A [`PositionPlan`] pairs every token slot of the training window with a
//! position index (what RoPE sees) and a source-token index (which token of the
//! document fills the slot). Skip-wise plans split the window into chunks,
//! keep indices continuous inside each chunk and push later chunks forward by
//! a sampled skipping bias so a short window exercises long relative distances.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the source text offsets (content biases) of each chunk are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ContentStrategy {
    /// `v_i` drawn uniformly from `{v_{i-1}, .., L_x - L_c}`.
    #[default]
    UniformBias,
    /// All `v_i = 0`: the chunks hold one continuous span of text.
    ZeroBias,
    /// `v_i = u_i`: content offsets track the manipulated positions.
    EqualToSkipBias,
}

impl std::str::FromStr for ContentStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-bias" => Ok(Self::UniformBias),
            "zero-bias" => Ok(Self::ZeroBias),
            "equal-to-skip-bias" => Ok(Self::EqualToSkipBias),
            other => Err(Error::config(format!("unknown content strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanKind {
    Pose,
    Randpos,
    Full,
}

impl std::str::FromStr for PlanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pose" => Ok(Self::Pose),
            "randpos" => Ok(Self::Randpos),
            "full" => Ok(Self::Full),
            other => Err(Error::config(format!("unknown plan kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for PlanKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanKind::Pose => "pose",
            PlanKind::Randpos => "randpos",
            PlanKind::Full => "full",
        })
    }
}

/// Original window, target window and chunking for one extension experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionConfig {
    pub original_len: usize,
    pub target_len: usize,
    pub chunk_count: usize,
    #[serde(default)]
    pub content_strategy: ContentStrategy,
}

impl ExtensionConfig {
    pub fn new(original_len: usize, target_len: usize, chunk_count: usize) -> Result<Self> {
        let cfg = Self {
            original_len,
            target_len,
            chunk_count,
            content_strategy: ContentStrategy::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_content_strategy(mut self, strategy: ContentStrategy) -> Self {
        self.content_strategy = strategy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.original_len < 1 {
            return Err(Error::config("original_len must be at least 1"));
        }
        if self.target_len < self.original_len {
            return Err(Error::config(format!(
                "target_len ({}) must be >= original_len ({})",
                self.target_len, self.original_len
            )));
        }
        check_chunk_count(self.chunk_count, self.original_len)
    }

    /// `L_t / L_c` as the exact integer ratio `(L_t, L_c)`.
    pub fn scaling_ratio(&self) -> (usize, usize) {
        (self.target_len, self.original_len)
    }

    /// `L_t / L_c` as a float; the correctly rounded quotient of the two lengths.
    pub fn scaling_factor(&self) -> f64 {
        self.target_len as f64 / self.original_len as f64
    }
}

fn check_chunk_count(chunk_count: usize, original_len: usize) -> Result<()> {
    if chunk_count < 1 || chunk_count > original_len {
        return Err(Error::config(format!(
            "chunk count {chunk_count} outside 1..={original_len}"
        )));
    }
    Ok(())
}

/// Chunk lengths, starts and the two bias sequences of one sampled example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkLayout {
    pub lengths: Vec<usize>,
    pub starts: Vec<usize>,
    pub skip_biases: Vec<usize>,
    pub content_biases: Vec<usize>,
}

impl ChunkLayout {
    /// Builds a layout from lengths and biases, deriving the chunk starts.
    pub fn new(lengths: Vec<usize>, skip_biases: Vec<usize>, content_biases: Vec<usize>) -> Result<Self> {
        let n = lengths.len();
        if skip_biases.len() != n || content_biases.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} skip and content biases"),
                got: format!("{} / {}", skip_biases.len(), content_biases.len()),
            });
        }
        let starts = lengths
            .iter()
            .scan(0usize, |acc, &l| {
                let s = *acc;
                *acc += l;
                Some(s)
            })
            .collect();
        Ok(Self {
            lengths,
            starts,
            skip_biases,
            content_biases,
        })
    }

    pub fn chunk_count(&self) -> usize {
        self.lengths.len()
    }

    pub fn validate(&self, original_len: usize, target_len: usize, text_len: usize) -> Result<()> {
        let n = self.lengths.len();
        if n == 0 {
            return Err(Error::config("layout has no chunks"));
        }
        if self.lengths.contains(&0) {
            return Err(Error::config("zero-length chunk"));
        }
        if self.lengths.iter().sum::<usize>() != original_len {
            return Err(Error::config("chunk lengths do not sum to original_len"));
        }
        let mut acc = 0;
        for (i, (&s, &l)) in self.starts.iter().zip(&self.lengths).enumerate() {
            if s != acc {
                return Err(Error::config(format!("chunk {i} start {s} != {acc}")));
            }
            acc += l;
        }
        check_biases("skip", &self.skip_biases, target_len - original_len)?;
        check_biases(
            "content",
            &self.content_biases,
            text_len.saturating_sub(original_len),
        )?;
        if text_len < original_len {
            return Err(Error::TextTooShort {
                needed: original_len,
                available: text_len,
            });
        }
        Ok(())
    }
}

fn check_biases(name: &str, biases: &[usize], max: usize) -> Result<()> {
    if biases.first() != Some(&0) {
        return Err(Error::config(format!("first {name} bias must be 0")));
    }
    if biases.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::config(format!("{name} biases must be non-decreasing")));
    }
    if biases.iter().any(|&b| b > max) {
        return Err(Error::config(format!("{name} bias exceeds {max}")));
    }
    Ok(())
}

/// Per-slot position indices and source-token indices for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionPlan {
    pub kind: PlanKind,
    pub position_index: Vec<usize>,
    pub content_index: Vec<usize>,
    pub layout: Option<ChunkLayout>,
}

impl PositionPlan {
    /// Expands a chunk layout into per-slot indices.
    pub fn from_layout(layout: ChunkLayout) -> Self {
        let total: usize = layout.lengths.iter().sum();
        let mut position_index = Vec::with_capacity(total);
        let mut content_index = Vec::with_capacity(total);
        for i in 0..layout.chunk_count() {
            let (st, len) = (layout.starts[i], layout.lengths[i]);
            let (u, v) = (layout.skip_biases[i], layout.content_biases[i]);
            position_index.extend(u + st..u + st + len);
            content_index.extend(v + st..v + st + len);
        }
        Self {
            kind: PlanKind::Pose,
            position_index,
            content_index,
            layout: Some(layout),
        }
    }

    pub fn len(&self) -> usize {
        self.position_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_index.is_empty()
    }

    /// Checks the plan against a target window and source text length.
    pub fn validate(&self, target_len: usize, text_len: usize) -> Result<()> {
        if self.content_index.len() != self.position_index.len() {
            return Err(Error::Shape {
                expected: format!("{} content indices", self.position_index.len()),
                got: self.content_index.len().to_string(),
            });
        }
        if !strictly_increasing(&self.position_index) {
            return Err(Error::config("position_index not strictly increasing"));
        }
        if !strictly_increasing(&self.content_index) {
            return Err(Error::config("content_index not strictly increasing"));
        }
        if let Some(&max) = self.position_index.last() {
            if max >= target_len {
                return Err(Error::config(format!(
                    "position index {max} outside target window {target_len}"
                )));
            }
        }
        if let Some(&max) = self.content_index.last() {
            if max >= text_len {
                return Err(Error::TextTooShort {
                    needed: max + 1,
                    available: text_len,
                });
            }
        }
        if let Some(layout) = &self.layout {
            layout.validate(self.len(), target_len, text_len)?;
        }
        Ok(())
    }

    /// The same plan with every position index shifted by `offset`.
    pub fn shifted(&self, offset: usize) -> Self {
        let mut out = self.clone();
        out.position_index.iter_mut().for_each(|p| *p += offset);
        out
    }
}

fn strictly_increasing(xs: &[usize]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

/// Splits `original_len` into `chunk_count` positive parts, uniformly over all
/// compositions: `N - 1` distinct cut points from `1..L_c`, sorted.
pub fn sample_chunk_lengths<R: Rng + ?Sized>(
    original_len: usize,
    chunk_count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_chunk_count(chunk_count, original_len)?;
    if chunk_count == 1 {
        return Ok(vec![original_len]);
    }
    let mut cuts: Vec<usize> = if chunk_count == original_len {
        (1..original_len).collect()
    } else {
        index::sample(rng, original_len - 1, chunk_count - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect()
    };
    cuts.sort_unstable();
    cuts.push(original_len);
    let mut prev = 0;
    Ok(cuts
        .into_iter()
        .map(|c| {
            let l = c - prev;
            prev = c;
            l
        })
        .collect())
}

/// Draws `v` uniformly from `lo..=hi`; a single-value range consumes no randomness.
fn uniform_from<R: Rng + ?Sized>(lo: usize, hi: usize, rng: &mut R) -> usize {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Sequential monotone biases: `b_0 = 0`, `b_i ~ U{b_{i-1}, .., max}`.
fn sequential_biases<R: Rng + ?Sized>(count: usize, max: usize, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut prev = 0;
    out.push(0);
    for _ in 1..count {
        prev = uniform_from(prev, max, rng);
        out.push(prev);
    }
    out
}

pub fn sample_skip_biases<R: Rng + ?Sized>(
    chunk_count: usize,
    original_len: usize,
    target_len: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if target_len < original_len {
        return Err(Error::config(format!(
            "target_len ({target_len}) < original_len ({original_len})"
        )));
    }
    if chunk_count < 1 {
        return Err(Error::config("chunk count must be at least 1"));
    }
    Ok(sequential_biases(chunk_count, target_len - original_len, rng))
}

pub fn sample_content_biases<R: Rng + ?Sized>(
    strategy: ContentStrategy,
    chunk_count: usize,
    original_len: usize,
    text_len: usize,
    skip_biases: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    if text_len < original_len {
        return Err(Error::TextTooShort {
            needed: original_len,
            available: text_len,
        });
    }
    let slack = text_len - original_len;
    match strategy {
        ContentStrategy::UniformBias => Ok(sequential_biases(chunk_count, slack, rng)),
        ContentStrategy::ZeroBias => Ok(vec![0; chunk_count]),
        ContentStrategy::EqualToSkipBias => {
            if skip_biases.len() != chunk_count {
                return Err(Error::Shape {
                    expected: format!("{chunk_count} skip biases"),
                    got: skip_biases.len().to_string(),
                });
            }
            let last = skip_biases.last().copied().unwrap_or(0);
            if last > slack {
                return Err(Error::TextTooShort {
                    needed: original_len + last,
                    available: text_len,
                });
            }
            Ok(skip_biases.to_vec())
        }
    }
}

/// Samples a fresh skip-wise layout and expands it into a plan.
pub fn build_pose_plan<R: Rng + ?Sized>(
    config: &ExtensionConfig,
    text_len: usize,
    rng: &mut R,
) -> Result<PositionPlan> {
    config.validate()?;
    let lengths = sample_chunk_lengths(config.original_len, config.chunk_count, rng)?;
    let skip = sample_skip_biases(config.chunk_count, config.original_len, config.target_len, rng)?;
    let content = sample_content_biases(
        config.content_strategy,
        config.chunk_count,
        config.original_len,
        text_len,
        &skip,
        rng,
    )?;
    Ok(PositionPlan::from_layout(ChunkLayout::new(lengths, skip, content)?))
}

/// A sorted random subset of `{0..L_t-1}` as positions over one contiguous
/// span of text at a uniform offset.
pub fn build_randpos_plan<R: Rng + ?Sized>(
    config: &ExtensionConfig,
    text_len: usize,
    rng: &mut R,
) -> Result<PositionPlan> {
    config.validate()?;
    let (lc, lt) = (config.original_len, config.target_len);
    if text_len < lc {
        return Err(Error::TextTooShort {
            needed: lc,
            available: text_len,
        });
    }
    let position_index = if lc == lt {
        (0..lc).collect()
    } else {
        let mut p = index::sample(rng, lt, lc).into_vec();
        p.sort_unstable();
        p
    };
    let offset = uniform_from(0, text_len - lc, rng);
    Ok(PositionPlan {
        kind: PlanKind::Randpos,
        position_index,
        content_index: (offset..offset + lc).collect(),
        layout: None,
    })
}

/// Identity layout of length `len`.
pub fn build_full_plan(len: usize) -> Result<PositionPlan> {
    if len < 1 {
        return Err(Error::config("full plan length must be at least 1"));
    }
    Ok(PositionPlan {
        kind: PlanKind::Full,
        position_index: (0..len).collect(),
        content_index: (0..len).collect(),
        layout: None,
    })
}

/// Set of non-negative relative distances, stored as sorted disjoint
/// inclusive ranges.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DistanceSet {
    ranges: Vec<(usize, usize)>,
}

impl DistanceSet {
    /// Normalises arbitrary inclusive ranges into a sorted, merged set.
    pub fn from_ranges(mut ranges: Vec<(usize, usize)>) -> Self {
        ranges.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(ranges.len());
        for (lo, hi) in ranges {
            match merged.last_mut() {
                Some(last) if lo <= last.1 + 1 => last.1 = last.1.max(hi),
                _ => merged.push((lo, hi)),
            }
        }
        Self { ranges: merged }
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn contains(&self, d: usize) -> bool {
        let i = self.ranges.partition_point(|&(_, hi)| hi < d);
        self.ranges.get(i).is_some_and(|&(lo, _)| lo <= d)
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|(lo, hi)| hi - lo + 1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|&(lo, hi)| lo..=hi)
    }
}

/// Maximal runs of consecutive values in a strictly increasing slice.
fn runs(positions: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &p in positions {
        match out.last_mut() {
            Some(last) if p == last.1 + 1 => last.1 = p,
            _ => out.push((p, p)),
        }
    }
    out
}

/// All `p - q` with `p >= q` over the plan's position indices.
///
/// Positions are grouped into continuous runs; two runs `[a0, a1] < [b0, b1]`
/// contribute exactly the distances `b0 - a1 ..= b1 - a0`.
pub fn covered_distances(plan: &PositionPlan) -> DistanceSet {
    let runs = runs(&plan.position_index);
    let mut ranges = Vec::with_capacity(runs.len() * (runs.len() + 1) / 2);
    for (i, &(a0, a1)) in runs.iter().enumerate() {
        ranges.push((0, a1 - a0));
        for &(b0, b1) in &runs[i + 1..] {
            ranges.push((b0 - a1, b1 - a0));
        }
    }
    DistanceSet::from_ranges(ranges)
}

/// One plan serialised for the `plan` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PlanRecord {
    pub kind: PlanKind,
    pub lengths: Option<Vec<usize>>,
    pub skip_biases: Option<Vec<usize>>,
    pub content_biases: Option<Vec<usize>>,
    pub position_index: Vec<usize>,
    pub content_index: Vec<usize>,
}

impl From<&PositionPlan> for PlanRecord {
    fn from(plan: &PositionPlan) -> Self {
        let layout = plan.layout.as_ref();
        Self {
            kind: plan.kind,
            lengths: layout.map(|l| l.lengths.clone()),
            skip_biases: layout.map(|l| l.skip_biases.clone()),
            content_biases: layout.map(|l| l.content_biases.clone()),
            position_index: plan.position_index.clone(),
            content_index: plan.content_index.clone(),
        }
    }
}

/// Dispatches on plan kind. `Full` uses the target length as window.
pub fn build_plan<R: Rng + ?Sized>(
    kind: PlanKind,
    config: &ExtensionConfig,
    text_len: usize,
    rng: &mut R,
) -> Result<PositionPlan> {
    match kind {
        PlanKind::Pose => build_pose_plan(config, text_len, rng),
        PlanKind::Randpos => build_randpos_plan(config, text_len, rng),
        PlanKind::Full => {
            config.validate()?;
            if text_len < config.target_len {
                return Err(Error::TextTooShort {
                    needed: config.target_len,
                    available: text_len,
                });
            }
            build_full_plan(config.target_len)
        }
    }
}
