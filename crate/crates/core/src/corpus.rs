//! Synthetic string-transformation tasks used as stand-ins for real datasets.
//!
//! Every task kind has a fixed prompt template (`"<verb>: <payload>"`), an
//! exact solver, and a separate rule checker so generated answers can be
//! audited independently of the code that produced them.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ConditionEncoder;
use crate::error::{config_err, domain, Error, Result};
use crate::seed;

/// Longest prompt any task may emit.
pub const MAX_PROMPT_CHARS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reverse,
    Copy,
    SortDigits,
    Parity,
    ModAdd,
    Uppercase,
    VowelCount,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::Reverse,
        TaskKind::Copy,
        TaskKind::SortDigits,
        TaskKind::Parity,
        TaskKind::ModAdd,
        TaskKind::Uppercase,
        TaskKind::VowelCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reverse => "reverse",
            TaskKind::Copy => "copy",
            TaskKind::SortDigits => "sort_digits",
            TaskKind::Parity => "parity",
            TaskKind::ModAdd => "mod_add",
            TaskKind::Uppercase => "uppercase",
            TaskKind::VowelCount => "vowel_count",
        }
    }

    /// Prompt prefix, including the trailing `": "`.
    pub fn verb(self) -> &'static str {
        match self {
            TaskKind::Reverse => "reverse: ",
            TaskKind::Copy => "copy: ",
            TaskKind::SortDigits => "sort: ",
            TaskKind::Parity => "parity: ",
            TaskKind::ModAdd => "add: ",
            TaskKind::Uppercase => "upper: ",
            TaskKind::VowelCount => "vowels: ",
        }
    }

    /// Whether the task belongs to the arithmetic family (as opposed to string
    /// manipulation). Used for cross-domain splits.
    pub fn is_arithmetic(self) -> bool {
        matches!(
            self,
            TaskKind::Parity | TaskKind::ModAdd | TaskKind::VowelCount
        )
    }

    fn random_prompt<R: Rng>(self, rng: &mut R) -> String {
        let letters = |rng: &mut R, lo: usize, hi: usize| -> String {
            let n = rng.random_range(lo..=hi);
            (0..n)
                .map(|_| (b'a' + rng.random_range(0..26u8)) as char)
                .collect()
        };
        let payload = match self {
            TaskKind::Reverse | TaskKind::Copy | TaskKind::Uppercase => letters(rng, 3, 6),
            TaskKind::VowelCount => letters(rng, 3, 8),
            TaskKind::SortDigits => {
                let n = rng.random_range(3..=6);
                (0..n)
                    .map(|_| (b'0' + rng.random_range(0..10u8)) as char)
                    .collect()
            }
            TaskKind::Parity => {
                let n = rng.random_range(3..=10);
                (0..n)
                    .map(|_| if rng.random_bool(0.5) { '1' } else { '0' })
                    .collect()
            }
            TaskKind::ModAdd => {
                let a = rng.random_range(0..100u32);
                let b = rng.random_range(0..100u32);
                let m = rng.random_range(2..10u32);
                format!("{a}+{b} mod {m}")
            }
        };
        format!("{}{}", self.verb(), payload)
    }

    /// Computes the ground-truth answer. `None` when the prompt does not
    /// follow this kind's template.
    pub fn solve(self, prompt: &str) -> Option<String> {
        if !self.validate(prompt) {
            return None;
        }
        let payload = &prompt[self.verb().len()..];
        Some(match self {
            TaskKind::Reverse => payload.chars().rev().collect(),
            TaskKind::Copy => payload.to_string(),
            TaskKind::Uppercase => payload.to_ascii_uppercase(),
            TaskKind::SortDigits => {
                let mut d: Vec<char> = payload.chars().collect();
                d.sort_unstable();
                d.into_iter().collect()
            }
            TaskKind::Parity => {
                let ones = payload.bytes().filter(|&b| b == b'1').count();
                if ones % 2 == 1 { "odd" } else { "even" }.to_string()
            }
            TaskKind::ModAdd => {
                let (a, b, m) = parse_mod_add(payload)?;
                ((a + b) % m).to_string()
            }
            TaskKind::VowelCount => payload
                .chars()
                .filter(|c| "aeiou".contains(*c))
                .count()
                .to_string(),
        })
    }

    /// Template grammar check for a prompt of this kind.
    pub fn validate(self, prompt: &str) -> bool {
        if prompt.len() > MAX_PROMPT_CHARS {
            return false;
        }
        let Some(payload) = prompt.strip_prefix(self.verb()) else {
            return false;
        };
        let n = payload.len();
        let all = |f: fn(u8) -> bool| payload.bytes().all(f);
        match self {
            TaskKind::Reverse | TaskKind::Copy | TaskKind::Uppercase => {
                (3..=6).contains(&n) && all(|b| b.is_ascii_lowercase())
            }
            TaskKind::VowelCount => (3..=8).contains(&n) && all(|b| b.is_ascii_lowercase()),
            TaskKind::SortDigits => (3..=6).contains(&n) && all(|b| b.is_ascii_digit()),
            TaskKind::Parity => (3..=10).contains(&n) && all(|b| b == b'0' || b == b'1'),
            TaskKind::ModAdd => parse_mod_add(payload).is_some(),
        }
    }
}

fn parse_mod_add(payload: &str) -> Option<(u32, u32, u32)> {
    let (sum, m) = payload.split_once(" mod ")?;
    let (a, b) = sum.split_once('+')?;
    let num = |s: &str, max_len: usize| -> Option<u32> {
        if s.is_empty() || s.len() > max_len || !s.bytes().all(|c| c.is_ascii_digit()) {
            return None;
        }
        s.parse().ok()
    };
    let (a, b, m) = (num(a, 2)?, num(b, 2)?, num(m, 1)?);
    (m >= 2).then_some((a, b, m))
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| config_err!("unknown task kind '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: String,
    pub answer: String,
    pub split: Split,
}

/// A named toy task: aligned prompt/answer samples with a train/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub task_id: String,
    pub kind: TaskKind,
    pub samples: Vec<Sample>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn prompts(&self, split: Split) -> Vec<&str> {
        self.split(split).map(|s| s.prompt.as_str()).collect()
    }

    pub fn len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Same samples under a different id.
    pub fn renamed(&self, task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            ..self.clone()
        }
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            task_id: &'a str,
            prompt: &'a str,
            answer: &'a str,
            split: Split,
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for s in &self.samples {
            let rec = Record {
                task_id: &self.task_id,
                prompt: &s.prompt,
                answer: &s.answer,
                split: s.split,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a dataset written by [`TaskDataset::save_jsonl`]. The task kind is
    /// recovered from the prompt template.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Record {
            task_id: String,
            prompt: String,
            answer: String,
            split: Split,
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut task_id = None;
        let mut samples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.into(),
                detail: format!("line {}: {e}", i + 1),
            })?;
            match &task_id {
                None => task_id = Some(rec.task_id),
                Some(id) if *id != rec.task_id => {
                    return Err(Error::Format {
                        path: path.into(),
                        detail: format!("mixed task ids '{id}' and '{}'", rec.task_id),
                    })
                }
                _ => {}
            }
            samples.push(Sample {
                prompt: rec.prompt,
                answer: rec.answer,
                split: rec.split,
            });
        }
        let fmt_err = |detail: &str| Error::Format {
            path: path.into(),
            detail: detail.into(),
        };
        let first = samples.first().ok_or_else(|| fmt_err("no records"))?;
        let kind = TaskKind::ALL
            .into_iter()
            .find(|k| k.validate(&first.prompt))
            .ok_or_else(|| fmt_err("prompt matches no task template"))?;
        Ok(Self {
            task_id: task_id.expect("set with first record"),
            kind,
            samples,
        })
    }
}

/// Independent rule checker: accepts `(prompt, answer)` iff the answer is the
/// correct output for the prompt. Written without reference to
/// [`TaskKind::solve`].
pub fn check_answer(kind: TaskKind, prompt: &str, answer: &str) -> bool {
    if !kind.validate(prompt) {
        return false;
    }
    let payload = &prompt[kind.verb().len()..];
    let p: Vec<u8> = payload.bytes().collect();
    let a: Vec<u8> = answer.bytes().collect();
    match kind {
        TaskKind::Reverse => p.len() == a.len() && (0..p.len()).all(|i| p[i] == a[a.len() - 1 - i]),
        TaskKind::Copy => p == a,
        TaskKind::Uppercase => {
            p.len() == a.len() && p.iter().zip(&a).all(|(x, y)| *y == x - 32)
        }
        TaskKind::SortDigits => {
            let mut counts = [0i32; 10];
            for &c in &p {
                counts[(c - b'0') as usize] += 1;
            }
            for &c in &a {
                if !c.is_ascii_digit() {
                    return false;
                }
                counts[(c - b'0') as usize] -= 1;
            }
            counts.iter().all(|&c| c == 0) && a.windows(2).all(|w| w[0] <= w[1])
        }
        TaskKind::Parity => {
            let odd = p.iter().fold(false, |acc, &c| acc ^ (c == b'1'));
            answer == if odd { "odd" } else { "even" }
        }
        TaskKind::ModAdd => {
            let Some((a_, b_, m)) = parse_mod_add(payload) else {
                return false;
            };
            match answer.parse::<u32>() {
                Ok(r) => r < m && (a_ + b_ + m - r) % m == 0 && answer == r.to_string(),
                Err(_) => false,
            }
        }
        TaskKind::VowelCount => {
            let n = p.iter().filter(|c| matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')).count();
            answer == n.to_string()
        }
    }
}

/// Builds a deterministic dataset of `n_samples` distinct prompts; the first
/// 90% (rounded down, at least one) are train, the rest test.
pub fn make_task(kind: TaskKind, n_samples: usize, seed: u64) -> Result<TaskDataset> {
    if n_samples < 2 {
        return Err(domain!("make_task needs n_samples >= 2, got {n_samples}"));
    }
    let mut rng = seed::rng(seed::derive(seed, kind.name()));
    let mut seen = HashSet::with_capacity(n_samples);
    let mut prompts = Vec::with_capacity(n_samples);
    let max_attempts = n_samples * 50 + 1000;
    let mut attempts = 0;
    while prompts.len() < n_samples {
        attempts += 1;
        if attempts > max_attempts {
            return Err(domain!(
                "task '{kind}' cannot produce {n_samples} distinct prompts"
            ));
        }
        let p = kind.random_prompt(&mut rng);
        if seen.insert(p.clone()) {
            prompts.push(p);
        }
    }
    let n_train = ((n_samples * 9) / 10).clamp(1, n_samples - 1);
    let samples = prompts
        .into_iter()
        .enumerate()
        .map(|(i, prompt)| Sample {
            answer: kind.solve(&prompt).expect("generated prompts follow the template"),
            prompt,
            split: if i < n_train { Split::Train } else { Split::Test },
        })
        .collect();
    Ok(TaskDataset {
        task_id: kind.name().to_string(),
        kind,
        samples,
    })
}

/// What each item of a prompt batch carries into the condition encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    #[default]
    PromptOnly,
    PromptPlusAnswer,
    /// Prompts and bare answers at 4:1, rounding toward prompts.
    Mixed,
}

impl ConditionSource {
    pub fn uses_answers(self) -> bool {
        !matches!(self, ConditionSource::PromptOnly)
    }
}

/// A batch of unlabeled items drawn from one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBatch {
    pub task_id: String,
    pub items: Vec<String>,
    /// Train-split indices the items were drawn from.
    pub indices: Vec<usize>,
    pub condition_source: ConditionSource,
}

impl PromptBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Number of prompt items in a mixed batch of length `batch_len`.
pub fn mixed_prompt_count(batch_len: usize) -> usize {
    (batch_len * 4).div_ceil(5)
}

fn build_items(
    train: &[&Sample],
    indices: &[usize],
    condition_source: ConditionSource,
) -> Vec<String> {
    let n_prompts = mixed_prompt_count(indices.len());
    indices
        .iter()
        .enumerate()
        .map(|(pos, &i)| {
            let s = train[i];
            match condition_source {
                ConditionSource::PromptOnly => s.prompt.clone(),
                ConditionSource::PromptPlusAnswer => format!("{} {}", s.prompt, s.answer),
                ConditionSource::Mixed if pos < n_prompts => s.prompt.clone(),
                ConditionSource::Mixed => s.answer.clone(),
            }
        })
        .collect()
}

/// Draws a uniformly random `batch_len`-subset of the first `pool_size` train
/// prompts. `batch_len == pool_size` gives the fixed-pool pairing; a smaller
/// batch resampled from a larger pool gives the random-selection pairing.
pub fn sample_prompt_batch(
    dataset: &TaskDataset,
    batch_len: usize,
    pool_size: usize,
    seed: u64,
    condition_source: ConditionSource,
) -> Result<PromptBatch> {
    let train: Vec<&Sample> = dataset.split(Split::Train).collect();
    if batch_len == 0 {
        return Err(domain!("batch_len must be >= 1"));
    }
    if batch_len > pool_size {
        return Err(domain!("batch_len {batch_len} exceeds pool_size {pool_size}"));
    }
    if pool_size > train.len() {
        return Err(domain!(
            "pool_size {pool_size} exceeds the {} train prompts of '{}'",
            train.len(),
            dataset.task_id
        ));
    }
    let mut rng = seed::rng(seed);
    let indices = index::sample(&mut rng, pool_size, batch_len).into_vec();
    Ok(PromptBatch {
        task_id: dataset.task_id.clone(),
        items: build_items(&train, &indices, condition_source),
        indices,
        condition_source,
    })
}

/// One epoch of fixed-pool batching: the shuffled pool split into
/// `pool_size / batch_len` disjoint batches (a trailing remainder is dropped).
pub fn epoch_batches(
    dataset: &TaskDataset,
    batch_len: usize,
    pool_size: usize,
    seed: u64,
    condition_source: ConditionSource,
) -> Result<Vec<PromptBatch>> {
    let train: Vec<&Sample> = dataset.split(Split::Train).collect();
    if batch_len == 0 || batch_len > pool_size || pool_size > train.len() {
        return Err(domain!(
            "invalid batching: batch_len {batch_len}, pool_size {pool_size}, {} train prompts",
            train.len()
        ));
    }
    let mut rng = seed::rng(seed);
    let order = index::sample(&mut rng, pool_size, pool_size).into_vec();
    Ok(order
        .chunks_exact(batch_len)
        .map(|idx| PromptBatch {
            task_id: dataset.task_id.clone(),
            items: build_items(&train, idx, condition_source),
            indices: idx.to_vec(),
            condition_source,
        })
        .collect())
}

/// Held-out task-identification accuracy of a nearest-centroid classifier on
/// mean-pooled prompt embeddings. Centroids come from train prompts, accuracy
/// from test prompts. Ties go to the earlier task.
pub fn fingerprint_separability(
    tasks: &[TaskDataset],
    encoder: &dyn ConditionEncoder,
) -> Result<f64> {
    if tasks.len() < 2 {
        return Err(domain!(
            "fingerprint_separability needs >= 2 tasks, got {}",
            tasks.len()
        ));
    }
    let pooled = |prompt: &str| -> Result<Vec<f64>> {
        let emb = encoder.encode_item(prompt)?;
        let rows = emb.nrows() as f64;
        Ok(emb.sum_axis(ndarray::Axis(0)).iter().map(|v| v / rows).collect())
    };
    let mut centroids = Vec::with_capacity(tasks.len());
    for t in tasks {
        let mut acc = vec![0.0; encoder.dim()];
        let train = t.prompts(Split::Train);
        for p in &train {
            for (a, v) in acc.iter_mut().zip(pooled(p)?) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= train.len() as f64);
        centroids.push(acc);
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for (ti, t) in tasks.iter().enumerate() {
        for p in t.prompts(Split::Test) {
            let v = pooled(p)?;
            let mut best = (f64::INFINITY, 0);
            for (ci, c) in centroids.iter().enumerate() {
                let d: f64 = c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, ci);
                }
            }
            correct += usize::from(best.1 == ti);
            total += 1;
        }
    }
    if total == 0 {
        return Err(domain!("no test prompts to classify"));
    }
    Ok(correct as f64 / total as f64)
}
