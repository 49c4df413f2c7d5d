//! Seeded synthetic tasks with a known solution.
//!
//! Each example hides one key token `k` (drawn from the key alphabet
//! `0..key_token_count`) in a filler context; every option row appends a
//! segment containing one answer token. The correct/plausible answer
//! encodes `g(k)` under a seeded bijection `g` of the key alphabet;
//! distractors encode `g(k')` for other keys. Answer tokens occupy their
//! own id range `key_token_count..2*key_token_count` (the token for
//! `g(k)` is `key_token_count + g(k)`) and fillers the rest of the
//! vocabulary. Keeping the three alphabets disjoint matters: the encoder
//! pools a row into an unordered bag, and were answers spelled with key
//! tokens, the bag `{k, g(k')}` would collide with the valid bag
//! `{g(k'), g(g(k'))}` whenever `g(g(k')) = k`, putting a ceiling on every
//! pooled model's accuracy. With disjoint alphabets the task is exactly
//! solvable by learning `g`.
//!
//! Three independent seeded streams drive generation: the bijection, the
//! example bodies, and the label noise. Changing the noise rate therefore
//! never changes the tokens, only which labels get flipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::fnv1a;
use crate::error::{Error, Result};
use crate::model::{TaskKind, TokenBatch};

pub const DATASET_FORMAT: &str = "advtrain-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Everything needed to regenerate a dataset exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub task_kind: TaskKind,
    pub num_examples: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Options per question (ranking) or candidates per question
    /// (pairwise).
    pub options: usize,
    /// Size of the key alphabet; keys are token ids `0..key_token_count`
    /// and answer tokens `key_token_count..2*key_token_count`.
    pub key_token_count: usize,
    /// Probability that an example's label is flipped to a wrong value.
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            task_kind: TaskKind::RelevanceRanking,
            num_examples: 3000,
            vocab_size: 64,
            seq_len: 12,
            options: 4,
            key_token_count: 16,
            label_noise_rate: 0.05,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_examples == 0 {
            return Err(Error::Config("num_examples must be positive".into()));
        }
        if self.seq_len < 4 {
            return Err(Error::Config(format!(
                "seq_len must be at least 4 (context plus answer segment), got {}",
                self.seq_len
            )));
        }
        if self.options < 2 {
            return Err(Error::Config(format!(
                "options must be at least 2, got {}",
                self.options
            )));
        }
        if self.key_token_count < 2 {
            return Err(Error::Config(format!(
                "key_token_count must be at least 2, got {}",
                self.key_token_count
            )));
        }
        if self.task_kind == TaskKind::RelevanceRanking && self.key_token_count < self.options {
            return Err(Error::Config(format!(
                "ranking needs key_token_count >= options for distinct distractors, got {} < {}",
                self.key_token_count, self.options
            )));
        }
        if 2 * self.key_token_count >= self.vocab_size {
            return Err(Error::Config(format!(
                "vocab_size ({}) must exceed 2 * key_token_count ({}) to fit \
                 key, answer, and filler alphabets",
                self.vocab_size, self.key_token_count
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::Config(format!(
                "label_noise_rate must be in [0, 1), got {}",
                self.label_noise_rate
            )));
        }
        Ok(())
    }

    /// Positions of the per-option answer segment at the end of each row.
    pub fn option_segment_len(&self) -> usize {
        (self.seq_len / 4).max(2)
    }

    pub fn context_len(&self) -> usize {
        self.seq_len - self.option_segment_len()
    }
}

/// One question: one token row per option/candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleGroup {
    pub group_id: usize,
    /// `options` rows of `seq_len` token ids each.
    pub rows: Vec<Vec<usize>>,
    /// Ranking: a single element, the correct option index. Pairwise: one
    /// 0/1 plausibility flag per row.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub groups: Vec<ExampleGroup>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// A key other than `k`, distributed uniformly over the remaining keys.
fn other_key(rng: &mut ChaCha8Rng, k: usize, key_count: usize) -> usize {
    let idx = rng.gen_range(0..key_count - 1);
    if idx >= k {
        idx + 1
    } else {
        idx
    }
}

/// Deterministic dataset generation; see the module docs for the layout.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut g_rng = stream(spec.seed, "bijection");
    let mut body = stream(spec.seed, "body");
    let mut noise = stream(spec.seed, "noise");

    let mut mapped: Vec<usize> = (0..spec.key_token_count).collect();
    mapped.shuffle(&mut g_rng);

    let context_len = spec.context_len();
    let segment_len = spec.option_segment_len();
    let answer_base = spec.key_token_count;
    let filler = |rng: &mut ChaCha8Rng| rng.gen_range(2 * spec.key_token_count..spec.vocab_size);

    let mut groups = Vec::with_capacity(spec.num_examples);
    for group_id in 0..spec.num_examples {
        let k = body.gen_range(0..spec.key_token_count);
        let mut context: Vec<usize> = (0..context_len).map(|_| filler(&mut body)).collect();
        let key_pos = body.gen_range(0..context_len);
        context[key_pos] = k;

        let mut rows = Vec::with_capacity(spec.options);
        let mut labels;
        match spec.task_kind {
            TaskKind::RelevanceRanking => {
                let correct = body.gen_range(0..spec.options);
                let mut others: Vec<usize> =
                    (0..spec.key_token_count).filter(|&x| x != k).collect();
                let (distractors, _) = others.partial_shuffle(&mut body, spec.options - 1);
                let mut next_distractor = 0;
                for j in 0..spec.options {
                    let answer = answer_base
                        + if j == correct {
                            mapped[k]
                        } else {
                            let d = distractors[next_distractor];
                            next_distractor += 1;
                            mapped[d]
                        };
                    let mut segment: Vec<usize> =
                        (0..segment_len).map(|_| filler(&mut body)).collect();
                    let answer_pos = body.gen_range(0..segment_len);
                    segment[answer_pos] = answer;
                    let mut row = context.clone();
                    row.extend_from_slice(&segment);
                    rows.push(row);
                }
                let mut label = correct;
                if noise.gen::<f64>() < spec.label_noise_rate {
                    label = (correct + 1 + noise.gen_range(0..spec.options - 1)) % spec.options;
                }
                labels = vec![label];
            }
            TaskKind::PairwiseClassification => {
                labels = Vec::with_capacity(spec.options);
                for _ in 0..spec.options {
                    let plausible = body.gen_bool(0.5);
                    let answer = answer_base
                        + if plausible {
                            mapped[k]
                        } else {
                            mapped[other_key(&mut body, k, spec.key_token_count)]
                        };
                    let mut segment: Vec<usize> =
                        (0..segment_len).map(|_| filler(&mut body)).collect();
                    let answer_pos = body.gen_range(0..segment_len);
                    segment[answer_pos] = answer;
                    let mut row = context.clone();
                    row.extend_from_slice(&segment);
                    rows.push(row);
                    let mut label = plausible as usize;
                    if noise.gen::<f64>() < spec.label_noise_rate {
                        label ^= 1;
                    }
                    labels.push(label);
                }
            }
        }
        groups.push(ExampleGroup {
            group_id,
            rows,
            labels,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        groups,
    })
}

fn validate_group(spec: &DatasetSpec, group: &ExampleGroup) -> std::result::Result<(), String> {
    if group.rows.len() != spec.options {
        return Err(format!(
            "expected {} rows, got {}",
            spec.options,
            group.rows.len()
        ));
    }
    for row in &group.rows {
        if row.len() != spec.seq_len {
            return Err(format!(
                "expected row length {}, got {}",
                spec.seq_len,
                row.len()
            ));
        }
        if let Some(&bad) = row.iter().find(|&&t| t >= spec.vocab_size) {
            return Err(format!(
                "token id {bad} outside vocab of {}",
                spec.vocab_size
            ));
        }
    }
    match spec.task_kind {
        TaskKind::RelevanceRanking => {
            if group.labels.len() != 1 {
                return Err(format!(
                    "ranking group needs 1 label, got {}",
                    group.labels.len()
                ));
            }
            if group.labels[0] >= spec.options {
                return Err(format!(
                    "label {} outside the {} options",
                    group.labels[0], spec.options
                ));
            }
        }
        TaskKind::PairwiseClassification => {
            if group.labels.len() != group.rows.len() {
                return Err(format!(
                    "pairwise group needs one label per row, got {} for {} rows",
                    group.labels.len(),
                    group.rows.len()
                ));
            }
            if let Some(&bad) = group.labels.iter().find(|&&l| l > 1) {
                return Err(format!("pairwise label {bad} not in {{0, 1}}"));
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    spec: DatasetSpec,
}

/// One JSON record per line: a header carrying the [`DatasetSpec`], then one
/// record per example group.
pub fn save(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        spec: dataset.spec.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for group in &dataset.groups {
        serde_json::to_writer(&mut out, group)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Data {
        line: 1,
        message: "empty file, expected a header record".into(),
    })?;
    let header: DatasetHeader = serde_json::from_str(&first?).map_err(|e| Error::Data {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Data {
            line: 1,
            message: format!("unrecognized format {:?}", header.format),
        });
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Data {
            line: 1,
            message: format!(
                "unsupported version {} (supported: {DATASET_VERSION})",
                header.version
            ),
        });
    }
    header.spec.validate()?;
    let mut groups = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let text = line?;
        let group: ExampleGroup = serde_json::from_str(&text).map_err(|e| Error::Data {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_group(&header.spec, &group).map_err(|message| Error::Data {
            line: line_no,
            message,
        })?;
        groups.push(group);
    }
    if groups.is_empty() {
        return Err(Error::Data {
            line: 1,
            message: "dataset has a header but no example groups".into(),
        });
    }
    Ok(Dataset {
        spec: header.spec,
        groups,
    })
}

/// Seeded shuffle split into train/dev/test. Fractions must be
/// non-negative and sum to 1; the first two set sizes round down and the
/// test split takes the remainder.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
) -> Result<(Vec<ExampleGroup>, Vec<ExampleGroup>, Vec<ExampleGroup>)> {
    let (f_train, f_dev, f_test) = fractions;
    for f in [f_train, f_dev, f_test] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidValue {
                what: "split fraction",
                value: f,
            });
        }
    }
    if (f_train + f_dev + f_test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidValue {
            what: "split fractions sum",
            value: f_train + f_dev + f_test,
        });
    }
    let n = dataset.groups.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(dataset.spec.seed, "split"));
    // The nudge absorbs representation error in fractions like 2/3 whose
    // product with n is a mathematical integer but floors one short in
    // floating point; it is far too small to move a genuine non-integer.
    let count = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let n_train = count(f_train);
    let n_dev = count(f_dev);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.groups[i].clone()).collect();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    ))
}

/// Seeded shuffle partition into `k` folds with sizes differing by at most
/// one.
pub fn kfold(dataset: &Dataset, k: usize) -> Result<Vec<Vec<ExampleGroup>>> {
    let n = dataset.groups.len();
    if k < 2 || k > n {
        return Err(Error::Config(format!("k must be in [2, {n}], got {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(dataset.spec.seed, "kfold"));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(
            order[start..start + size]
                .iter()
                .map(|&i| dataset.groups[i].clone())
                .collect(),
        );
        start += size;
    }
    Ok(folds)
}

/// Assembles a model batch from example groups. All groups must agree on
/// row count and length; for ranking, the rows of a group become its
/// options, and for pairwise every row becomes an independent candidate
/// carrying its group id.
pub fn batch_groups<'a>(
    task_kind: TaskKind,
    groups: impl IntoIterator<Item = &'a ExampleGroup>,
) -> Result<TokenBatch> {
    let groups: Vec<&ExampleGroup> = groups.into_iter().collect();
    if groups.is_empty() {
        return Err(Error::Config("cannot batch zero groups".into()));
    }
    let options = groups[0].rows.len();
    let seq_len = groups[0].rows.first().map(|r| r.len()).unwrap_or(0);
    let mut tokens = Vec::with_capacity(groups.len() * options * seq_len);
    let mut labels = Vec::new();
    let mut group_ids = Vec::new();
    for g in &groups {
        if g.rows.len() != options || g.rows.iter().any(|r| r.len() != seq_len) {
            return Err(Error::Config(format!(
                "group {} disagrees with batch dimensions {options}x{seq_len}",
                g.group_id
            )));
        }
        for row in &g.rows {
            tokens.extend_from_slice(row);
        }
        match task_kind {
            TaskKind::RelevanceRanking => {
                if g.labels.len() != 1 {
                    return Err(Error::Config(format!(
                        "ranking group {} needs exactly one label",
                        g.group_id
                    )));
                }
                labels.push(g.labels[0]);
            }
            TaskKind::PairwiseClassification => {
                if g.labels.len() != g.rows.len() {
                    return Err(Error::Config(format!(
                        "pairwise group {} needs one label per row",
                        g.group_id
                    )));
                }
                labels.extend_from_slice(&g.labels);
                group_ids.extend(std::iter::repeat_n(g.group_id, g.rows.len()));
            }
        }
    }
    match task_kind {
        TaskKind::RelevanceRanking => {
            TokenBatch::ranking(groups.len(), options, seq_len, tokens, labels, None)
        }
        TaskKind::PairwiseClassification => {
            TokenBatch::pairwise(seq_len, tokens, labels, group_ids, None)
        }
    }
}
