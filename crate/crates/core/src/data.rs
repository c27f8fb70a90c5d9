//! Synthetic token datasets, client partitioning and mini-batch sampling.
//!
//! Token id 0 is the padding token; generated inputs use ids `1..vocab`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, TokenGrid};
use crate::numerics::SeededRng;

pub const PAD: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
    /// Class used for label-skew partitioning: the topic for
    /// `copy_next_token`, the target class for `pattern_classify`.
    #[serde(default)]
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    vocab: usize,
    seq_len: usize,
    num_labels: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, vocab: usize, seq_len: usize, num_labels: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != seq_len || s.y.len() != seq_len {
                return Err(Error::Data(format!("sample {i} has length {}/{}, expected {seq_len}", s.x.len(), s.y.len())));
            }
            if s.x.iter().chain(&s.y).any(|&t| t as usize >= vocab) {
                return Err(Error::Data(format!("sample {i} has a token outside vocab {vocab}")));
            }
            if s.label as usize >= num_labels.max(1) {
                return Err(Error::Data(format!("sample {i} has label {} but only {num_labels} labels", s.label)));
            }
        }
        Ok(Self { samples, vocab, seq_len, num_labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            vocab: self.vocab,
            seq_len: self.seq_len,
            num_labels: self.num_labels,
        }
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..self.len()).collect();
        (self.subset(&idx[..n]), self.subset(&idx[n..]))
    }

    /// All samples as one batch, in order.
    pub fn as_batch(&self) -> Result<Batch> {
        self.batch_of(&(0..self.len()).collect::<Vec<_>>())
    }

    fn batch_of(&self, indices: &[usize]) -> Result<Batch> {
        let x = indices.iter().flat_map(|&i| self.samples[i].x.iter().copied()).collect();
        let y = indices.iter().flat_map(|&i| self.samples[i].y.iter().copied()).collect();
        Batch::new(TokenGrid::new(indices.len(), self.seq_len, x)?, TokenGrid::new(indices.len(), self.seq_len, y)?)
    }

    /// One JSON object per line: `{"x": [...], "y": [...], "label": k}`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, vocab: usize, seq_len: usize, num_labels: usize) -> Result<Dataset> {
        let mut samples = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
            samples.push(s);
        }
        Dataset::new(samples, vocab, seq_len, num_labels)
    }
}

/// Generators for the toy tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticTask {
    /// Next-token prediction on sequences drawn from one of `topics` random
    /// successor tables: each next token follows the topic's table with
    /// probability `stickiness` and is uniform otherwise. Labels are the
    /// inputs shifted left by one, padded with [`PAD`].
    CopyNextToken {
        #[serde(default = "default_topics")]
        topics: usize,
        #[serde(default = "default_stickiness")]
        stickiness: f64,
    },
    /// Each token comes from the band of a hidden class with probability
    /// `1 − noise` (band of token `t` is `(t − 1) mod classes`), uniform
    /// otherwise. The label, repeated at every position, is the band holding
    /// the most tokens (lowest on ties).
    PatternClassify {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
}

fn default_topics() -> usize {
    4
}
fn default_stickiness() -> f64 {
    0.9
}
fn default_classes() -> usize {
    4
}
fn default_noise() -> f64 {
    0.3
}

impl SyntheticTask {
    pub fn num_labels(&self) -> usize {
        match *self {
            SyntheticTask::CopyNextToken { topics, .. } => topics,
            SyntheticTask::PatternClassify { classes, .. } => classes,
        }
    }
}

/// `x` shifted left by one position, last position [`PAD`].
pub fn shift_labels(x: &[u32]) -> Vec<u32> {
    x.iter().skip(1).copied().chain(std::iter::once(PAD)).take(x.len()).collect()
}

pub fn gen_synthetic(task: &SyntheticTask, vocab: usize, seq_len: usize, n: usize, rng: &mut SeededRng) -> Result<Dataset> {
    if n == 0 || seq_len == 0 {
        return Err(Error::Parameter(format!("need n >= 1 and seq_len >= 1, got n={n}, seq_len={seq_len}")));
    }
    if vocab < 3 {
        return Err(Error::Parameter(format!("vocab must be >= 3, got {vocab}")));
    }
    let real = (vocab - 1) as u64;
    let draw = |rng: &mut SeededRng| 1 + rng.below(real) as u32;
    let samples = match *task {
        SyntheticTask::CopyNextToken { topics, stickiness } => {
            if topics == 0 || !(0.0..=1.0).contains(&stickiness) {
                return Err(Error::Parameter(format!("topics {topics} must be >= 1 and stickiness {stickiness} in [0, 1]")));
            }
            let tables: Vec<Vec<u32>> = (0..topics)
                .map(|_| {
                    let mut succ: Vec<u32> = (1..vocab as u32).collect();
                    rng.shuffle(&mut succ);
                    succ
                })
                .collect();
            (0..n)
                .map(|_| {
                    let topic = rng.below(topics as u64) as usize;
                    let mut x = Vec::with_capacity(seq_len);
                    x.push(draw(rng));
                    while x.len() < seq_len {
                        let prev = *x.last().unwrap();
                        let next = if rng.next_f64() < stickiness { tables[topic][prev as usize - 1] } else { draw(rng) };
                        x.push(next);
                    }
                    Sample { y: shift_labels(&x), x, label: topic as u32 }
                })
                .collect()
        }
        SyntheticTask::PatternClassify { classes, noise } => {
            if classes == 0 || classes > vocab - 1 || !(0.0..=1.0).contains(&noise) {
                return Err(Error::Parameter(format!("classes {classes} must be in [1, vocab-1] and noise {noise} in [0, 1]")));
            }
            let band_size = (vocab - 1 - 1) / classes + 1;
            (0..n)
                .map(|_| {
                    let class = rng.below(classes as u64) as u32;
                    let x: Vec<u32> = (0..seq_len)
                        .map(|_| {
                            if rng.next_f64() < noise {
                                return draw(rng);
                            }
                            loop {
                                let t = 1 + class + classes as u32 * rng.below(band_size as u64) as u32;
                                if (t as usize) < vocab {
                                    return t;
                                }
                            }
                        })
                        .collect();
                    let mut counts = vec![0usize; classes];
                    for &t in &x {
                        counts[(t as usize - 1) % classes] += 1;
                    }
                    let label = counts.iter().enumerate().fold(0, |b, (i, c)| if *c > counts[b] { i } else { b }) as u32;
                    Sample { x, y: vec![label; seq_len], label }
                })
                .collect()
        }
    };
    Dataset::new(samples, vocab, seq_len, task.num_labels())
}

/// How samples are spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    /// Shuffled, sizes differ by at most one.
    Iid,
    /// Every class is spread over the clients by a symmetric
    /// Dirichlet(`concentration`) draw.
    LabelSkew { concentration: f64 },
    /// Every client receives a full copy of the dataset.
    Replicate,
}

/// Splits `dataset` over `n` clients with every client nonempty.
pub fn partition(dataset: &Dataset, n: usize, spec: &PartitionSpec, rng: &mut SeededRng) -> Result<Vec<Dataset>> {
    partition_with_min(dataset, n, spec, 1, rng)
}

const LABEL_SKEW_ATTEMPTS: usize = 1000;

/// Like [`partition`], requiring at least `min_size` samples per client.
///
/// Label skew: for every class in ascending order, the class's samples are
/// shuffled, a proportion vector `p ~ Dirichlet(concentration·1_n)` is drawn,
/// and client `j` receives the slice between `round(n_k·Σ_{i<j} p_i)` and
/// `round(n_k·Σ_{i≤j} p_i)`. The whole draw is repeated until every client
/// holds `min_size` samples.
pub fn partition_with_min(dataset: &Dataset, n: usize, spec: &PartitionSpec, min_size: usize, rng: &mut SeededRng) -> Result<Vec<Dataset>> {
    if n == 0 {
        return Err(Error::Parameter("need at least one client".into()));
    }
    let min_size = min_size.max(1);
    if let PartitionSpec::Replicate = spec {
        if dataset.len() < min_size {
            return Err(Error::Parameter(format!("{} samples but {min_size} required per client", dataset.len())));
        }
        return Ok(vec![dataset.clone(); n]);
    }
    if dataset.len() < n * min_size {
        return Err(Error::Parameter(format!("{} samples cannot give {n} clients {min_size} samples each", dataset.len())));
    }
    let mut parts: Vec<Vec<usize>> = match *spec {
        PartitionSpec::Iid => {
            let mut idx: Vec<usize> = (0..dataset.len()).collect();
            rng.shuffle(&mut idx);
            let (base, extra) = (dataset.len() / n, dataset.len() % n);
            let mut start = 0;
            (0..n)
                .map(|i| {
                    let size = base + usize::from(i < extra);
                    let chunk = idx[start..start + size].to_vec();
                    start += size;
                    chunk
                })
                .collect()
        }
        PartitionSpec::LabelSkew { concentration } => {
            if !(concentration > 0.0) || !concentration.is_finite() {
                return Err(Error::Parameter(format!("concentration must be positive, got {concentration}")));
            }
            let labels = dataset.num_labels.max(1);
            let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); labels];
            for (i, s) in dataset.samples.iter().enumerate() {
                by_label[s.label as usize].push(i);
            }
            let mut found = None;
            for _ in 0..LABEL_SKEW_ATTEMPTS {
                let mut parts = vec![Vec::new(); n];
                for class in &by_label {
                    let mut members = class.clone();
                    rng.shuffle(&mut members);
                    let p = rng.dirichlet(concentration, n);
                    let mut cum = 0.0;
                    let mut start = 0;
                    for (j, pj) in p.iter().enumerate() {
                        cum += pj;
                        let end =
                            if j + 1 == n { members.len() } else { ((cum * members.len() as f64).round() as usize).min(members.len()) };
                        parts[j].extend_from_slice(&members[start..end.max(start)]);
                        start = end.max(start);
                    }
                }
                if parts.iter().all(|p| p.len() >= min_size) {
                    found = Some(parts);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::Parameter(format!(
                    "label-skew partition left a client below {min_size} samples after {LABEL_SKEW_ATTEMPTS} attempts"
                ))
            })?
        }
        PartitionSpec::Replicate => unreachable!(),
    };
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts.iter().map(|p| dataset.subset(p)).collect())
}

/// `|D_i| / |D|` for each client.
pub fn aggregation_weights(parts: &[Dataset]) -> Vec<f64> {
    let total: usize = parts.iter().map(Dataset::len).sum();
    parts.iter().map(|p| p.len() as f64 / total as f64).collect()
}

/// `b` distinct samples, chosen by a partial Fisher–Yates shuffle.
pub fn sample_minibatch(dataset: &Dataset, b: usize, rng: &mut SeededRng) -> Result<Batch> {
    if b == 0 || b > dataset.len() {
        return Err(Error::Parameter(format!("batch size {b} must lie in [1, {}]", dataset.len())));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    for i in 0..b {
        let j = i + rng.below((idx.len() - i) as u64) as usize;
        idx.swap(i, j);
    }
    dataset.batch_of(&idx[..b])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn copy_task() -> SyntheticTask {
        SyntheticTask::CopyNextToken { topics: 3, stickiness: 0.9 }
    }

    #[test]
    fn shift_rule() {
        assert_eq!(shift_labels(&[5, 7, 9]), vec![7, 9, PAD]);
    }

    #[test]
    fn copy_task_shape_and_determinism() {
        let a = gen_synthetic(&copy_task(), 64, 8, 1000, &mut SeededRng::new(1)).unwrap();
        let b = gen_synthetic(&copy_task(), 64, 8, 1000, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        for s in a.samples() {
            assert!(s.x.iter().chain(&s.y).all(|&t| t < 64));
            assert!(s.x.iter().all(|&t| t != PAD));
            assert_eq!(s.y, shift_labels(&s.x));
        }
    }

    #[test]
    fn classify_label_is_function_of_x() {
        let task = SyntheticTask::PatternClassify { classes: 4, noise: 0.3 };
        let d = gen_synthetic(&task, 32, 10, 200, &mut SeededRng::new(2)).unwrap();
        for s in d.samples() {
            let mut counts = [0; 4];
            for &t in &s.x {
                counts[(t as usize - 1) % 4] += 1;
            }
            let max = *counts.iter().max().unwrap();
            assert_eq!(counts.iter().position(|c| *c == max).unwrap() as u32, s.label);
            assert!(s.y.iter().all(|&y| y == s.label));
        }
    }

    #[test]
    fn gen_rejects_bad_params() {
        assert!(gen_synthetic(&copy_task(), 64, 8, 0, &mut SeededRng::new(1)).is_err());
        assert!(gen_synthetic(&copy_task(), 2, 8, 5, &mut SeededRng::new(1)).is_err());
    }

    fn multiset(parts: &[Dataset]) -> Vec<Sample> {
        let mut all: Vec<Sample> = parts.iter().flat_map(|p| p.samples().to_vec()).collect();
        all.sort_by(|a, b| (&a.x, &a.y, a.label).cmp(&(&b.x, &b.y, b.label)));
        all
    }

    #[test]
    fn iid_partition() {
        let d = gen_synthetic(&copy_task(), 16, 4, 12, &mut SeededRng::new(3)).unwrap();
        let parts = partition(&d, 3, &PartitionSpec::Iid, &mut SeededRng::new(4)).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).collect::<Vec<_>>(), vec![4, 4, 4]);
        assert_eq!(multiset(&parts), multiset(&[d.clone()]));
        let one = partition(&d, 1, &PartitionSpec::Iid, &mut SeededRng::new(4)).unwrap();
        assert_eq!(one, vec![d.clone()]);
        assert!(partition(&d, 13, &PartitionSpec::Iid, &mut SeededRng::new(4)).is_err());
    }

    #[test]
    fn strong_label_skew_concentrates_labels() {
        let d = gen_synthetic(&copy_task(), 16, 4, 300, &mut SeededRng::new(5)).unwrap();
        let parts = partition(&d, 3, &PartitionSpec::LabelSkew { concentration: 0.01 }, &mut SeededRng::new(6)).unwrap();
        assert_eq!(multiset(&parts), multiset(&[d.clone()]));
        for p in &parts {
            let mut counts = [0usize; 3];
            for s in p.samples() {
                counts[s.label as usize] += 1;
            }
            let share = *counts.iter().max().unwrap() as f64 / p.len() as f64;
            assert!(share >= 0.9, "majority share {share} with counts {counts:?}");
        }
        let w: f64 = aggregation_weights(&parts).iter().sum();
        assert!((w - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn minibatch_contract() {
        let d = gen_synthetic(&copy_task(), 16, 4, 10, &mut SeededRng::new(7)).unwrap();
        let full = sample_minibatch(&d, 10, &mut SeededRng::new(8)).unwrap();
        let mut rows: Vec<Vec<u32>> = full.x.tokens().chunks(4).map(<[u32]>::to_vec).collect();
        rows.sort();
        let mut orig: Vec<Vec<u32>> = d.samples().iter().map(|s| s.x.clone()).collect();
        orig.sort();
        assert_eq!(rows, orig);
        assert_eq!(sample_minibatch(&d, 3, &mut SeededRng::new(9)).unwrap(), sample_minibatch(&d, 3, &mut SeededRng::new(9)).unwrap());
        assert!(sample_minibatch(&d, 11, &mut SeededRng::new(9)).is_err());
        assert!(sample_minibatch(&d, 0, &mut SeededRng::new(9)).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let d = gen_synthetic(&copy_task(), 16, 4, 5, &mut SeededRng::new(10)).unwrap();
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        let back = Dataset::read_jsonl(buf.as_slice(), 16, 4, 3).unwrap();
        assert_eq!(back, d);
        assert!(Dataset::read_jsonl(&b"{bad\n"[..], 16, 4, 3).is_err());
    }
}
