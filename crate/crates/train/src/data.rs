//! Datasets: a seeded synthetic sequence-classification generator and a
//! whitespace-tokenized TSV loader.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::PathBuf;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// First id available to content tokens.
pub const FIRST_TOKEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// Unpadded token ids, `1 <= len <= seq_len`.
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Label 1 iff one of the keyword tokens occurs.
    Keyword,
    /// Label 1 iff the count of "odd-class" tokens is odd.
    Parity,
    /// Label 1 iff "A" tokens outnumber "B" tokens; the rest is neutral filler.
    Majority,
    /// Every token id carries a fixed weight; label 1 iff the weights of the
    /// sequence sum to a positive value. A quarter of the ids are heavy
    /// (weight +-1), the rest light (uniform in `[-0.1, 0.1]`), so deciding
    /// near-balanced sequences needs fine resolution.
    WeightedSum,
    /// Token id `t` carries the value `(t - 2) % 10`; label 1 iff the mean
    /// value exceeds 4.5. Exact ties are never generated.
    MeanThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        seed: u64,
        size: usize,
        vocab: usize,
        seq_len: usize,
        task: SyntheticTask,
        /// Zipf exponent of the token distribution; 0 samples uniformly.
        #[serde(default)]
        zipf: f64,
    },
    Tsv {
        path: PathBuf,
        text_column: String,
        label_column: String,
        vocab: usize,
        seq_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub train_fraction: f64,
    pub eval_fraction: f64,
    /// Seeds the train/eval split.
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSummary {
    pub vocab: usize,
    pub distinct_tokens: usize,
    pub unk_count: usize,
    pub label_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub summary: VocabSummary,
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    let sum = spec.train_fraction + spec.eval_fraction;
    if (sum - 1.0).abs() > 1e-9 || spec.train_fraction <= 0.0 || spec.eval_fraction < 0.0 {
        return Err(DataError::Spec(format!(
            "split fractions must be positive and sum to 1, got {} + {}",
            spec.train_fraction, spec.eval_fraction
        )));
    }
    let (examples, vocab, seq_len, label_names) = match &spec.source {
        DatasetSource::Synthetic {
            seed,
            size,
            vocab,
            seq_len,
            task,
            zipf,
        } => {
            let ex = synthetic(*seed, *size, *vocab, *seq_len, *task, *zipf)?;
            (ex, *vocab, *seq_len, vec!["0".to_string(), "1".to_string()])
        }
        DatasetSource::Tsv {
            path,
            text_column,
            label_column,
            vocab,
            seq_len,
        } => {
            if !path.exists() {
                return Err(DataError::Spec(format!("{} does not exist", path.display())));
            }
            let file = std::io::BufReader::new(std::fs::File::open(path)?);
            let (ex, names) = read_tsv(file, text_column, label_column, *vocab, *seq_len)?;
            (ex, *vocab, *seq_len, names)
        }
    };
    if examples.is_empty() {
        return Err(DataError::Empty);
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.split_seed));
    let n_train = ((examples.len() as f64 * spec.train_fraction).round() as usize).clamp(1, examples.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    let train = pick(&order[..n_train]);
    let eval = pick(&order[n_train..]);

    let mut seen = std::collections::BTreeSet::new();
    let mut unk_count = 0;
    for e in &examples {
        for &t in &e.tokens {
            seen.insert(t);
            unk_count += usize::from(t == UNK);
        }
    }
    let classes = label_names.len().max(2);
    Ok(Dataset {
        train,
        eval,
        vocab,
        seq_len,
        classes,
        summary: VocabSummary {
            vocab,
            distinct_tokens: seen.len(),
            unk_count,
            label_names,
        },
    })
}

/// Seeded synthetic sequences of length `seq_len / 2 ..= seq_len`.
pub fn synthetic(
    seed: u64,
    size: usize,
    vocab: usize,
    seq_len: usize,
    task: SyntheticTask,
    zipf: f64,
) -> Result<Vec<Example>, DataError> {
    if vocab < FIRST_TOKEN + 4 {
        return Err(DataError::Spec(format!("vocab {vocab} too small for the synthetic task")));
    }
    if seq_len < 2 {
        return Err(DataError::Spec("seq_len must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = vocab - FIRST_TOKEN;
    let weights: Vec<f64> = (0..content)
        .map(|i| {
            if i < content / 4 {
                if i % 2 == 0 { 1.0 } else { -1.0 }
            } else {
                rng.gen_range(-0.01..=0.01)
            }
        })
        .collect();
    if !(zipf >= 0.0 && zipf.is_finite()) {
        return Err(DataError::Spec(format!("zipf exponent {zipf} must be finite and >= 0")));
    }
    // frequency ranks are a seeded permutation so rarity is unrelated to the label rule
    let mut rank: Vec<usize> = (0..content).collect();
    rank.shuffle(&mut rng);
    let sampler = WeightedIndex::new(rank.iter().map(|&r| 1.0 / ((r + 1) as f64).powf(zipf)))
        .expect("positive weights");
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let len = rng.gen_range(seq_len.div_ceil(2)..=seq_len);
        let tokens: Vec<usize> = (0..len).map(|_| FIRST_TOKEN + sampler.sample(&mut rng)).collect();
        let label = match task {
            SyntheticTask::Keyword => {
                // the first two content tokens are keywords
                usize::from(tokens.iter().any(|&t| t < FIRST_TOKEN + 2))
            }
            SyntheticTask::Parity => {
                let odd = tokens.iter().filter(|&&t| (t - FIRST_TOKEN) % 2 == 1).count();
                odd % 2
            }
            SyntheticTask::Majority => {
                // first quarter of the content ids are "A", second quarter "B"
                let quarter = content / 4;
                let a = tokens.iter().filter(|&&t| t - FIRST_TOKEN < quarter).count();
                let b = tokens
                    .iter()
                    .filter(|&&t| (quarter..2 * quarter).contains(&(t - FIRST_TOKEN)))
                    .count();
                if a == b {
                    continue;
                }
                usize::from(a > b)
            }
            SyntheticTask::MeanThreshold => {
                let sum: usize = tokens.iter().map(|&t| (t - FIRST_TOKEN) % 10).sum();
                // mean > 4.5  <=>  2 * sum > 9 * len
                match (2 * sum).cmp(&(9 * tokens.len())) {
                    std::cmp::Ordering::Equal => continue,
                    o => usize::from(o == std::cmp::Ordering::Greater),
                }
            }
            SyntheticTask::WeightedSum => {
                let sum: f64 = tokens.iter().map(|&t| weights[t - FIRST_TOKEN]).sum();
                if sum == 0.0 {
                    continue;
                }
                usize::from(sum > 0.0)
            }
        };
        out.push(Example { tokens, label });
    }
    Ok(out)
}

/// Stable 64-bit FNV-1a.
fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Whitespace token to id in `[FIRST_TOKEN, vocab)`.
pub fn token_id(word: &str, vocab: usize) -> usize {
    FIRST_TOKEN + (fnv1a(word) % (vocab - FIRST_TOKEN) as u64) as usize
}

/// Reads a tab-delimited file with a header row. Integer labels are used as
/// class ids directly; otherwise distinct label strings are numbered in
/// sorted order.
pub fn read_tsv(
    reader: impl BufRead,
    text_column: &str,
    label_column: &str,
    vocab: usize,
    seq_len: usize,
) -> Result<(Vec<Example>, Vec<String>), DataError> {
    if vocab <= FIRST_TOKEN || seq_len == 0 {
        return Err(DataError::Spec("vocab and seq_len too small".into()));
    }
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => return Err(DataError::Empty),
    };
    let columns: Vec<&str> = header.split('\t').collect();
    let find = |name: &str| {
        columns.iter().position(|c| c.trim() == name).ok_or(DataError::Malformed {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let (text_idx, label_idx) = (find(text_column)?, find(label_column)?);

    let mut rows = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns.len() {
            return Err(DataError::Malformed {
                line: i + 1,
                message: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        let mut tokens: Vec<usize> = fields[text_idx]
            .split_whitespace()
            .map(|w| token_id(w, vocab))
            .take(seq_len)
            .collect();
        if tokens.is_empty() {
            tokens.push(UNK);
        }
        rows.push((tokens, fields[label_idx].trim().to_string(), i + 1));
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }

    let numeric: Option<Vec<usize>> = rows.iter().map(|(_, l, _)| l.parse::<usize>().ok()).collect();
    let (labels, names) = match numeric {
        Some(ids) => {
            let classes = ids.iter().max().copied().unwrap_or(0) + 1;
            (ids, (0..classes).map(|c| c.to_string()).collect())
        }
        None => {
            let names: BTreeMap<&str, usize> = rows
                .iter()
                .map(|(_, l, _)| l.as_str())
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, n)| (n, i))
                .collect();
            let ids = rows.iter().map(|(_, l, _)| names[l.as_str()]).collect();
            let mut ordered: Vec<(&str, usize)> = names.into_iter().collect();
            ordered.sort_by_key(|(_, i)| *i);
            (ids, ordered.into_iter().map(|(n, _)| n.to_string()).collect())
        }
    };
    let examples = rows
        .into_iter()
        .zip(labels)
        .map(|((tokens, _, _), label)| Example { tokens, label })
        .collect();
    Ok((examples, names))
}

/// A padded mini-batch: `tokens` is `[batch x seq_len]` with [`PAD`] filler.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(examples: &[&Example], seq_len: usize) -> Self {
        let mut tokens = vec![PAD; examples.len() * seq_len];
        let mut lengths = Vec::with_capacity(examples.len());
        for (b, e) in examples.iter().enumerate() {
            let n = e.tokens.len().min(seq_len);
            tokens[b * seq_len..b * seq_len + n].copy_from_slice(&e.tokens[..n]);
            lengths.push(n);
        }
        Self {
            tokens,
            lengths,
            labels: examples.iter().map(|e| e.label).collect(),
            seq_len,
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            source: DatasetSource::Synthetic {
                seed,
                size: 200,
                vocab: 20,
                seq_len: 8,
                task: SyntheticTask::Majority,
                zipf: 0.0,
            },
            train_fraction: 0.8,
            eval_fraction: 0.2,
            split_seed: seed,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(load_dataset(&spec(7)).unwrap(), load_dataset(&spec(7)).unwrap());
        assert_ne!(load_dataset(&spec(7)).unwrap().train, load_dataset(&spec(8)).unwrap().train);
        let d = load_dataset(&spec(7)).unwrap();
        assert_eq!((d.train.len(), d.eval.len()), (160, 40));
    }

    #[test]
    fn synthetic_labels_follow_the_rule() {
        let ex = synthetic(1, 300, 22, 9, SyntheticTask::Majority, 0.0).unwrap();
        for e in &ex {
            let a = e.tokens.iter().filter(|&&t| t - FIRST_TOKEN < 5).count();
            let b = e.tokens.iter().filter(|&&t| (5..10).contains(&(t - FIRST_TOKEN))).count();
            assert_ne!(a, b);
            assert_eq!(e.label, usize::from(a > b));
            assert!(e.tokens.iter().all(|&t| (FIRST_TOKEN..22).contains(&t)));
        }
        let ex = synthetic(1, 300, 22, 9, SyntheticTask::Keyword, 0.0).unwrap();
        assert!(ex.iter().any(|e| e.label == 0) && ex.iter().any(|e| e.label == 1));
    }

    #[test]
    fn split_fractions_validated() {
        let mut s = spec(1);
        s.train_fraction = 0.5;
        assert!(matches!(load_dataset(&s), Err(DataError::Spec(_))));
    }

    #[test]
    fn tsv_fixture_tokenizes() {
        let data = "id\ttext\tlabel\n1\tthe cat sat\tpos\n2\ta dog\tneg\n3\tthe dog the cat\tpos\n";
        let (ex, names) = read_tsv(data.as_bytes(), "text", "label", 50, 3).unwrap();
        assert_eq!(names, vec!["neg", "pos"]);
        assert_eq!(ex.len(), 3);
        let id = |w| token_id(w, 50);
        assert_eq!(ex[0].tokens, vec![id("the"), id("cat"), id("sat")]);
        assert_eq!(ex[1].tokens, vec![id("a"), id("dog")]);
        // truncated to seq_len
        assert_eq!(ex[2].tokens, vec![id("the"), id("dog"), id("the")]);
        assert_eq!(ex.iter().map(|e| e.label).collect::<Vec<_>>(), vec![1, 0, 1]);
        // FNV-1a is stable across runs and platforms
        assert_eq!(fnv1a("a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn tsv_errors() {
        assert!(matches!(read_tsv("".as_bytes(), "t", "l", 10, 4), Err(DataError::Empty)));
        assert!(matches!(read_tsv("t\tl\n".as_bytes(), "t", "l", 10, 4), Err(DataError::Empty)));
        let bad = "t\tl\nhello\t1\nbroken row\n";
        match read_tsv(bad.as_bytes(), "t", "l", 10, 4) {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_tsv("a\tb\nx\ty\n".as_bytes(), "t", "b", 10, 4),
            Err(DataError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn batch_pads() {
        let a = Example { tokens: vec![5, 6], label: 1 };
        let b = Example { tokens: vec![7, 8, 9], label: 0 };
        let batch = Batch::new(&[&a, &b], 4);
        assert_eq!(batch.tokens, vec![5, 6, PAD, PAD, 7, 8, 9, PAD]);
        assert_eq!(batch.lengths, vec![2, 3]);
        assert_eq!(batch.labels, vec![1, 0]);
    }
}
