//! Synthetic instruction tasks small enough to train on a laptop CPU.
//!
//! `TemplateRecovery` pairs one of four fixed eight-word preambles with a
//! five-digit query; the response maps each digit in place (copy it, spell
//! it as a word, map it to a letter `a..j`, or mark it `even`/`odd`),
//! followed by EOS tokens up to a fixed width. Each task writes
//! its answer in its own alphabet, so the preamble can be recovered from a
//! query and its response.
//!
//! `Arithmetic` prompts read `I P: a op b =` with a fixed instruction `I`,
//! operands `0..=99` spelled digit by digit, and `op` in `{+, -}`.
//!
//! Held-out splits are chosen by a fixed hash of the query (or operand
//! triple), so train and held-out inputs never overlap.

use std::collections::{BTreeSet, HashSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, derived_rng, Rng};
use crate::vocab::{Vocabulary, EOS_SYMBOL};

/// Task name and preamble for each recovery task.
pub const RECOVERY_TASKS: [(&str, [&str; 8]); 4] = [
    ("copy", ["please", "copy", "the", "following", "digit", "string", "exactly", ":"]),
    ("spell", ["please", "spell", "out", "each", "digit", "as", "words", ":"]),
    ("letters", ["please", "map", "each", "digit", "to", "a", "letter", ":"]),
    ("parity", ["please", "mark", "each", "digit", "even", "or", "odd", ":"]),
];
const DIGIT_WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
const DIGIT_LETTERS: [&str; 10] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
pub const PREAMBLE_LEN: usize = 8;
pub const QUERY_LEN: usize = 5;
/// responses are padded with EOS to this many tokens
pub const RESPONSE_WIDTH: usize = 10;

const ARITH_INSTRUCTION: [&str; 4] = ["compute", "the", "value", "of"];
const ARITH_MAX_OPERAND: u32 = 99;
const HELDOUT_BUCKETS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthTask {
    Arithmetic,
    TemplateRecovery,
}

impl std::str::FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "arithmetic" => Ok(Self::Arithmetic),
            "template-recovery" | "templaterecovery" | "recovery" => Ok(Self::TemplateRecovery),
            _ => Err(Error::Config(format!("unknown synthetic task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub task: SynthTask,
    pub size: usize,
    pub heldout_size: usize,
    pub seed: u64,
}

/// One generated pair with its task index and the slot value (the query for
/// recovery tasks, `a op b` for arithmetic).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthExample {
    pub task: usize,
    pub input: String,
    pub pair: Pair,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub vocab: Vocabulary,
    pub train: Vec<SynthExample>,
    pub heldout: Vec<SynthExample>,
    /// length of the instruction part of every prompt
    pub instruction_len: usize,
}

impl SynthDataset {
    pub fn train_pairs(&self) -> Vec<Pair> {
        self.train.iter().map(|e| e.pair.clone()).collect()
    }

    pub fn heldout_pairs(&self) -> Vec<Pair> {
        self.heldout.iter().map(|e| e.pair.clone()).collect()
    }

    /// Longest tokenized pair.
    pub fn max_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.heldout)
            .map(|e| e.pair.prompt.split_whitespace().count() + e.pair.response.split_whitespace().count())
            .max()
            .unwrap_or(0)
    }
}

/// Shared vocabulary of both synthetic tasks.
pub fn synth_vocabulary() -> Vocabulary {
    let mut words: BTreeSet<String> = (0..10).map(|d| d.to_string()).collect();
    for w in ["=", "+", "-", "P:", "even", "odd"].into_iter().chain(ARITH_INSTRUCTION) {
        words.insert(w.to_string());
    }
    words.extend(DIGIT_WORDS.iter().chain(&DIGIT_LETTERS).map(|w| w.to_string()));
    for (_, preamble) in RECOVERY_TASKS {
        words.extend(preamble.iter().map(|w| w.to_string()));
    }
    Vocabulary::with_reserved(words).expect("synthetic symbols are valid")
}

fn spell(digits: &[u8]) -> String {
    digits.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
}

/// The recovery response for `task` applied to `query`, EOS padded.
pub fn recovery_response(task: usize, query: &[u8]) -> String {
    let mut words: Vec<String> = match task {
        0 => query.iter().map(|d| d.to_string()).collect(),
        1 => query.iter().map(|&d| DIGIT_WORDS[usize::from(d)].to_string()).collect(),
        2 => query.iter().map(|&d| DIGIT_LETTERS[usize::from(d)].to_string()).collect(),
        3 => query.iter().map(|d| if d % 2 == 0 { "even" } else { "odd" }.to_string()).collect(),
        _ => panic!("recovery task index {task} out of range"),
    };
    words.resize(RESPONSE_WIDTH, EOS_SYMBOL.to_string());
    words.join(" ")
}

pub fn recovery_prompt(task: usize, query: &str) -> String {
    format!("{} {query} =", RECOVERY_TASKS[task].1.join(" "))
}

fn split_bucket(key: &str) -> bool {
    // fixed, seed-independent partition
    let h = key
        .bytes()
        .fold(0u64, |acc, b| derive_seed(acc, "split", u64::from(b)));
    h % HELDOUT_BUCKETS == 0
}

fn arithmetic_example(a: u32, op: char, b: u32) -> SynthExample {
    let digits = |n: u32| spell(&n.to_string().bytes().map(|c| c - b'0').collect::<Vec<_>>());
    let input = format!("{} {op} {}", digits(a), digits(b));
    let result = if op == '+' { a as i64 + b as i64 } else { a as i64 - b as i64 };
    let mut response = String::new();
    if result < 0 {
        response.push_str("- ");
    }
    response.push_str(&digits(result.unsigned_abs() as u32));
    response.push(' ');
    response.push_str(EOS_SYMBOL);
    SynthExample {
        task: usize::from(op == '-'),
        pair: Pair::new(format!("{} P: {input} =", ARITH_INSTRUCTION.join(" ")), response),
        input,
    }
}

fn generate_arithmetic(spec: &SynthTaskSpec) -> Result<(Vec<SynthExample>, Vec<SynthExample>)> {
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for a in 0..=ARITH_MAX_OPERAND {
        for b in 0..=ARITH_MAX_OPERAND {
            for op in ['+', '-'] {
                let ex = arithmetic_example(a, op, b);
                if split_bucket(&ex.input) {
                    heldout.push(ex);
                } else {
                    train.push(ex);
                }
            }
        }
    }
    check_space(spec, train.len(), heldout.len())?;
    let mut rng = derived_rng(spec.seed, "synth", 0);
    shuffle_prefix(&mut train, spec.size, &mut rng);
    shuffle_prefix(&mut heldout, spec.heldout_size, &mut rng);
    train.truncate(spec.size);
    heldout.truncate(spec.heldout_size);
    Ok((train, heldout))
}

/// Partial Fisher-Yates: the first `k` elements become a uniform sample.
fn shuffle_prefix<T>(items: &mut [T], k: usize, rng: &mut Rng) {
    for i in 0..k.min(items.len()) {
        let j = rng.gen_range(i..items.len());
        items.swap(i, j);
    }
}

fn check_space(spec: &SynthTaskSpec, train_space: usize, heldout_space: usize) -> Result<()> {
    if spec.size > train_space || spec.heldout_size > heldout_space {
        return Err(Error::Config(format!(
            "requested {}/{} pairs but only {train_space}/{heldout_space} exist",
            spec.size, spec.heldout_size
        )));
    }
    Ok(())
}

fn recovery_space() -> (usize, usize) {
    let (mut train, mut heldout) = (0, 0);
    for n in 0..10usize.pow(QUERY_LEN as u32) {
        let q: Vec<u8> = format!("{n:0QUERY_LEN$}").bytes().map(|c| c - b'0').collect();
        if split_bucket(&spell(&q)) {
            heldout += 1;
        } else {
            train += 1;
        }
    }
    (train * RECOVERY_TASKS.len(), heldout * RECOVERY_TASKS.len())
}

fn sample_recovery(n: usize, heldout: bool, rng: &mut Rng) -> Vec<SynthExample> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let task = rng.gen_range(0..RECOVERY_TASKS.len());
        let q: Vec<u8> = (0..QUERY_LEN).map(|_| rng.gen_range(0..10u8)).collect();
        let input = spell(&q);
        if split_bucket(&input) != heldout || !seen.insert((task, input.clone())) {
            continue;
        }
        out.push(SynthExample {
            task,
            pair: Pair::new(recovery_prompt(task, &input), recovery_response(task, &q)),
            input,
        });
    }
    out
}

pub fn synth_task_generate(spec: &SynthTaskSpec) -> Result<SynthDataset> {
    if spec.size == 0 {
        return Err(Error::Config("size must be positive".into()));
    }
    let (train, heldout, instruction_len) = match spec.task {
        SynthTask::Arithmetic => {
            let (tr, ho) = generate_arithmetic(spec)?;
            (tr, ho, ARITH_INSTRUCTION.len())
        }
        SynthTask::TemplateRecovery => {
            let (tr_space, ho_space) = recovery_space();
            check_space(spec, tr_space, ho_space)?;
            let tr = sample_recovery(spec.size, false, &mut derived_rng(spec.seed, "synth", 0));
            let ho = sample_recovery(spec.heldout_size, true, &mut derived_rng(spec.seed, "synth", 1));
            (tr, ho, PREAMBLE_LEN)
        }
    };
    Ok(SynthDataset {
        vocab: synth_vocabulary(),
        train,
        heldout,
        instruction_len,
    })
}
