//! Synthetic non-IID classification task.
//!
//! Three heterogeneity axes are reproduced structurally:
//!
//! - dialect: each client draws most tokens from its own window of the
//!   vocabulary (`dialect_shift` is the probability a token comes from that
//!   window rather than the whole vocabulary);
//! - label skew: target classes mix a uniform draw with a client-specific
//!   dominant class (`label_skew` is the mixing weight);
//! - size imbalance: `client_sizes` sets each client's training count.
//!
//! Every token `v` votes for class `v mod classes`. A sample's label is the
//! class with the most votes (ties to the lowest class), then flipped to a
//! random other class with probability `label_noise`. Generation plants a few
//! tokens voting for the sampled target class so the label prior follows the
//! client's skew.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed_path;
use crate::error::{FedError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab: usize,
    pub classes: usize,
    pub seq_len: usize,
    pub client_sizes: Vec<usize>,
    pub dialect_shift: f64,
    pub label_skew: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab: 64,
            classes: 8,
            seq_len: 12,
            client_sizes: vec![274, 102, 335],
            dialect_shift: 0.8,
            label_skew: 0.7,
            label_noise: 0.05,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn clients(&self) -> usize {
        self.client_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.client_sizes.is_empty() {
            return Err(FedError::Config("task needs at least one client".into()));
        }
        if self.client_sizes.contains(&0) {
            return Err(FedError::Config("every client needs at least one sample".into()));
        }
        for (name, v) in [
            ("dialect_shift", self.dialect_shift),
            ("label_skew", self.label_skew),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FedError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.classes < 2 || self.seq_len == 0 || self.vocab < self.classes {
            return Err(FedError::Config(format!(
                "need classes >= 2, seq_len >= 1, vocab >= classes (got {}, {}, {})",
                self.classes, self.seq_len, self.vocab
            )));
        }
        if self.label_skew == 1.0 && self.classes < self.clients() {
            return Err(FedError::Config(format!(
                "{} classes cannot give {} clients distinct dominant classes",
                self.classes,
                self.clients()
            )));
        }
        Ok(())
    }

    /// Width of each client's dialect window.
    fn window(&self) -> usize {
        (self.vocab / 2).max(1)
    }

    /// Start of client `k`'s dialect window; windows are spread evenly so the
    /// first and last client are disjoint.
    pub fn window_start(&self, k: usize) -> usize {
        let k_total = self.clients();
        if k_total <= 1 {
            return 0;
        }
        let span = self.vocab - self.window();
        ((k * span) as f64 / (k_total - 1) as f64).round() as usize
    }

    pub fn dominant_class(&self, k: usize) -> usize {
        (k * self.classes) / self.clients()
    }

    /// Test examples generated for a client with `n_k` training examples.
    pub fn test_size(n_k: usize) -> usize {
        n_k.div_ceil(8).max(8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: u32,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub n_k: usize,
}

struct ClientSampler<'a> {
    task: &'a TaskSpec,
    k: usize,
}

impl ClientSampler<'_> {
    fn token(&self, rng: &mut ChaCha8Rng) -> usize {
        let t = self.task;
        if rng.random::<f64>() < t.dialect_shift {
            t.window_start(self.k) + rng.random_range(0..t.window())
        } else {
            rng.random_range(0..t.vocab)
        }
    }

    /// A client-distributed token re-targeted to vote for `class`, staying in
    /// the same aligned block of the vocabulary when possible.
    fn token_for_class(&self, class: usize, rng: &mut ChaCha8Rng) -> usize {
        let c = self.task.classes;
        let v = self.token(rng);
        let moved = v - v % c + class;
        if moved < self.task.vocab {
            moved
        } else {
            class
        }
    }

    fn example(&self, rng: &mut ChaCha8Rng) -> Example {
        let t = self.task;
        let target = if rng.random::<f64>() < t.label_skew {
            t.dominant_class(self.k)
        } else {
            rng.random_range(0..t.classes)
        };
        let signal = (t.seq_len / 4).max(1);
        let mut tokens: Vec<usize> = (0..t.seq_len)
            .map(|i| {
                if i < signal {
                    self.token_for_class(target, rng)
                } else {
                    self.token(rng)
                }
            })
            .collect();
        tokens.shuffle(rng);
        let mut label = vote(&tokens, t.classes);
        if rng.random::<f64>() < t.label_noise {
            label = (label + rng.random_range(1..t.classes)) % t.classes;
        }
        Example { tokens, label }
    }
}

/// Class with the most token votes; ties go to the lowest class.
pub fn vote(tokens: &[usize], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for &t in tokens {
        counts[t % classes] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Generates one shard per client. Identical specs give identical shards.
pub fn generate(task: &TaskSpec) -> Result<Vec<ClientShard>> {
    task.validate()?;
    let shards = task
        .client_sizes
        .iter()
        .enumerate()
        .map(|(k, &n_k)| {
            let sampler = ClientSampler { task, k };
            let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed_path(task.seed, &[k as u64, 0]));
            let mut test_rng = ChaCha8Rng::seed_from_u64(derive_seed_path(task.seed, &[k as u64, 1]));
            let train = (0..n_k).map(|_| sampler.example(&mut train_rng)).collect();
            let test = (0..TaskSpec::test_size(n_k))
                .map(|_| sampler.example(&mut test_rng))
                .collect();
            ClientShard {
                client_id: k as u32,
                train,
                test,
                n_k,
            }
        })
        .collect();
    Ok(shards)
}

/// All training splits concatenated and shuffled by `seed`.
pub fn pooled(shards: &[ClientShard], seed: u64) -> Result<Vec<Example>> {
    if shards.is_empty() {
        return Err(FedError::Input("cannot pool zero shards".into()));
    }
    let mut pool: Vec<Example> = shards.iter().flat_map(|s| s.train.iter().cloned()).collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(pool)
}

/// All test splits concatenated in client order.
pub fn pooled_test(shards: &[ClientShard]) -> Vec<Example> {
    shards.iter().flat_map(|s| s.test.iter().cloned()).collect()
}

/// Splits `pool` into consecutive chunks of the given sizes.
pub fn repartition(pool: &[Example], sizes: &[usize]) -> Result<Vec<Vec<Example>>> {
    if sizes.iter().sum::<usize>() > pool.len() {
        return Err(FedError::Input("repartition sizes exceed pool".into()));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &n in sizes {
        out.push(pool[start..start + n].to_vec());
        start += n;
    }
    Ok(out)
}

pub fn token_histogram(examples: &[Example], vocab: usize) -> Vec<f64> {
    let mut h = vec![0.0; vocab];
    let mut total = 0.0;
    for e in examples {
        for &t in &e.tokens {
            h[t] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
    h
}

pub fn label_histogram(examples: &[Example], classes: usize) -> Vec<f64> {
    let mut h = vec![0.0; classes];
    for e in examples {
        h[e.label] += 1.0;
    }
    let n = examples.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean pairwise total-variation distance between client token distributions.
pub fn inter_client_token_tv(shards: &[ClientShard], vocab: usize) -> f64 {
    let hists: Vec<Vec<f64>> = shards.iter().map(|s| token_histogram(&s.train, vocab)).collect();
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..hists.len() {
        for j in (i + 1)..hists.len() {
            sum += total_variation(&hists[i], &hists[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// One example per line: space-separated token ids, a tab, the label.
pub fn write_examples<W: Write>(examples: &[Example], mut out: W) -> Result<()> {
    for e in examples {
        let toks: Vec<String> = e.tokens.iter().map(ToString::to_string).collect();
        writeln!(out, "{}\t{}", toks.join(" "), e.label)?;
    }
    Ok(())
}

pub fn read_examples(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || FedError::Input(format!("line {}: malformed example {line:?}", i + 1));
            let (toks, label) = line.split_once('\t').ok_or_else(bad)?;
            let tokens = toks
                .split(' ')
                .map(|t| t.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let label = label.parse().map_err(|_| bad())?;
            Ok(Example { tokens, label })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn spec(dialect: f64, skew: f64) -> TaskSpec {
        TaskSpec {
            dialect_shift: dialect,
            label_skew: skew,
            seed: 11,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn shapes_and_ranges() {
        let task = spec(0.8, 0.7);
        let shards = generate(&task).unwrap();
        assert_eq!(shards.len(), 3);
        for (s, &n) in shards.iter().zip(&task.client_sizes) {
            assert_eq!(s.n_k, n);
            assert_eq!(s.train.len(), n);
            assert_eq!(s.test.len(), TaskSpec::test_size(n));
            for e in s.train.iter().chain(&s.test) {
                assert!(e.label < task.classes);
                assert_eq!(e.tokens.len(), task.seq_len);
                assert!(e.tokens.iter().all(|&t| t < task.vocab));
            }
        }
        assert_eq!(TaskSpec::test_size(10), 8);
        assert_eq!(TaskSpec::test_size(335), 42);
    }

    #[test]
    fn deterministic() {
        let task = spec(0.8, 0.7);
        assert_eq!(generate(&task).unwrap(), generate(&task).unwrap());
    }

    #[test]
    fn size_ratio() {
        let task = spec(0.8, 0.7);
        let shards = generate(&task).unwrap();
        let sizes: Vec<usize> = shards.iter().map(|s| s.n_k).collect();
        let ratio = *sizes.iter().max().unwrap() as f64 / *sizes.iter().min().unwrap() as f64;
        assert!((ratio - 335.0 / 102.0).abs() < 1e-12);
        assert!((ratio - 3.28).abs() < 0.005);
    }

    #[test]
    fn iid_case_passes_chi_square() {
        let task = spec(0.0, 0.0);
        let shards = generate(&task).unwrap();
        let counts = |s: &ClientShard| {
            let mut c = vec![0.0; task.vocab];
            for e in &s.train {
                for &t in &e.tokens {
                    c[t] += 1.0;
                }
            }
            c
        };
        let (a, b) = (counts(&shards[0]), counts(&shards[2]));
        let (na, nb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let mut stat = 0.0;
        let mut dof = 0.0;
        for (x, y) in a.iter().zip(&b) {
            let col = x + y;
            if col == 0.0 {
                continue;
            }
            dof += 1.0;
            let ea = col * na / (na + nb);
            let eb = col * nb / (na + nb);
            stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
        }
        let p = 1.0 - ChiSquared::new(dof - 1.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}");
    }

    #[test]
    fn full_dialect_shift_separates_supports() {
        let task = spec(1.0, 0.7);
        let shards = generate(&task).unwrap();
        let support = |s: &ClientShard| {
            let mut set = std::collections::BTreeSet::new();
            for e in &s.train {
                set.extend(e.tokens.iter().copied());
            }
            set
        };
        let (s0, s2) = (support(&shards[0]), support(&shards[2]));
        let overlap = s0.intersection(&s2).count() as f64 / s0.union(&s2).count() as f64;
        assert!(overlap < 0.10, "overlap {overlap}");
    }

    #[test]
    fn tv_monotone_in_dialect_shift() {
        let tvs: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&s| inter_client_token_tv(&generate(&spec(s, 0.7)).unwrap(), 64))
            .collect();
        assert!(tvs.windows(2).all(|w| w[1] >= w[0]), "{tvs:?}");
    }

    #[test]
    fn config_errors() {
        let mut t = spec(0.5, 1.0);
        t.classes = 2;
        assert!(matches!(generate(&t), Err(FedError::Config(_))));
        let mut t = spec(0.5, 0.5);
        t.client_sizes = vec![];
        assert!(generate(&t).is_err());
        let mut t = spec(0.5, 0.5);
        t.client_sizes = vec![3, 0];
        assert!(generate(&t).is_err());
        assert!(generate(&spec(1.5, 0.5)).is_err());
    }

    #[test]
    fn pooled_sizes_and_single_shard() {
        let task = spec(0.8, 0.7);
        let shards = generate(&task).unwrap();
        assert_eq!(pooled(&shards, 1).unwrap().len(), 711);
        let one = pooled(&shards[1..2], 3).unwrap();
        let mut a = one.clone();
        let mut b = shards[1].train.clone();
        a.sort_by(|x, y| (&x.tokens, x.label).cmp(&(&y.tokens, y.label)));
        b.sort_by(|x, y| (&x.tokens, x.label).cmp(&(&y.tokens, y.label)));
        assert_eq!(a, b);
        assert!(pooled(&[], 0).is_err());
    }

    #[test]
    fn repartitioned_pool_is_closer_to_uniform() {
        let task = spec(0.8, 0.7);
        let shards = generate(&task).unwrap();
        let uniform = vec![1.0 / task.classes as f64; task.classes];
        let tv_of = |sets: Vec<&[Example]>| {
            sets.iter()
                .map(|s| total_variation(&label_histogram(s, task.classes), &uniform))
                .sum::<f64>()
                / sets.len() as f64
        };
        let original = tv_of(shards.iter().map(|s| s.train.as_slice()).collect());
        let pool = pooled(&shards, 5).unwrap();
        let parts = repartition(&pool, &[237, 237, 237]).unwrap();
        let mixed = tv_of(parts.iter().map(Vec::as_slice).collect());
        assert!(mixed < original, "{mixed} vs {original}");
    }

    #[test]
    fn labels_mostly_follow_vote() {
        let task = spec(0.8, 0.7);
        let shards = generate(&task).unwrap();
        let all: Vec<&Example> = shards.iter().flat_map(|s| &s.train).collect();
        let agree = all.iter().filter(|e| vote(&e.tokens, task.classes) == e.label).count();
        let rate = agree as f64 / all.len() as f64;
        assert!((rate - 0.95).abs() < 0.03, "agreement {rate}");
    }

    #[test]
    fn text_export_roundtrip() {
        let task = spec(0.3, 0.3);
        let shards = generate(&task).unwrap();
        let mut buf = Vec::new();
        write_examples(&shards[0].test, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(read_examples(&text).unwrap(), shards[0].test);
        assert!(read_examples("1 2 x\t3\n").is_err());
    }
}
