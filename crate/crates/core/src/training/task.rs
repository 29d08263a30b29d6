//! Synthetic key-value lookup task.
//!
//! Each fact binds a key pair `(a, b)` to two value words and is written as a
//! passage `the a of b is x y`. A query `what is the a of b` comes with the
//! fact's passage plus distractor passages from the same split; the answer is
//! `x y`. Splits are disjoint by key pair and training examples redraw the
//! values, so dev accuracy measures reading, not memorization.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reader::Example;
use crate::tokenizer::{Vocab, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub seed: u64,
    pub facts: usize,
    pub first_keys: usize,
    pub second_keys: usize,
    pub values: usize,
    /// Passages per example besides the answering one.
    pub distractors: usize,
    pub dev_examples: usize,
    pub test_examples: usize,
    /// Share of facts held out for dev and for test (each).
    pub holdout_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            facts: 200,
            first_keys: 15,
            second_keys: 15,
            values: 20,
            distractors: 4,
            dev_examples: 200,
            test_examples: 200,
            holdout_fraction: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fact {
    pub first: usize,
    pub second: usize,
    pub values: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub vocab: Vocab,
    pub train: Vec<Fact>,
    pub dev: Vec<Fact>,
    pub test: Vec<Fact>,
    pub dev_examples: Vec<Example>,
    pub test_examples: Vec<Example>,
}

/// Function words used by the templates.
pub const TEMPLATE_WORDS: [&str; 4] = ["the", "of", "is", "what"];

fn first_key(i: usize) -> String {
    format!("ka{i}")
}

fn second_key(i: usize) -> String {
    format!("kb{i}")
}

fn value(i: usize) -> String {
    format!("v{i}")
}

fn draw_values(n: usize, rng: &mut impl Rng) -> [usize; 2] {
    let x = rng.gen_range(0..n);
    let mut y = rng.gen_range(0..n - 1);
    if y >= x {
        y += 1;
    }
    [x, y]
}

impl SyntheticTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        let pairs = config.first_keys * config.second_keys;
        if config.facts == 0 || config.facts > pairs {
            return Err(Error::invalid(format!(
                "{} facts need that many distinct key pairs, have {pairs}",
                config.facts
            )));
        }
        if config.values < 2 {
            return Err(Error::invalid("need at least two value words"));
        }
        if !(0.0..0.5).contains(&config.holdout_fraction) {
            return Err(Error::invalid("holdout_fraction must be in [0, 0.5)"));
        }
        let held = (config.facts as f64 * config.holdout_fraction).round() as usize;
        let train_n = config.facts - 2 * held;
        for (name, n) in [("train", train_n), ("dev", held), ("test", held)] {
            if n <= config.distractors {
                return Err(Error::invalid(format!(
                    "{name} split has {n} facts, too few for {} distractors",
                    config.distractors
                )));
            }
        }

        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend((0..config.first_keys).map(first_key));
        words.extend((0..config.second_keys).map(second_key));
        words.extend((0..config.values).map(value));
        let vocab = Vocab::new(words);

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut keys: Vec<(usize, usize)> = (0..config.first_keys)
            .flat_map(|a| (0..config.second_keys).map(move |b| (a, b)))
            .collect();
        keys.shuffle(&mut rng);
        let facts: Vec<Fact> = keys[..config.facts]
            .iter()
            .map(|&(first, second)| {
                Fact { first, second, values: draw_values(config.values, &mut rng) }
            })
            .collect();
        let dev = facts[train_n..train_n + held].to_vec();
        let test = facts[train_n + held..].to_vec();
        let train = facts[..train_n].to_vec();

        let mut task = Self {
            config,
            vocab,
            train,
            dev,
            test,
            dev_examples: Vec::new(),
            test_examples: Vec::new(),
        };
        let mut eval_rng = ChaCha8Rng::seed_from_u64(task.config.seed ^ 0x5eed_0de7);
        task.dev_examples = task.fixed_examples(&task.dev, task.config.dev_examples, &mut eval_rng);
        task.test_examples = task.fixed_examples(&task.test, task.config.test_examples, &mut eval_rng);
        Ok(task)
    }

    fn fixed_examples(&self, facts: &[Fact], count: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
        (0..count)
            .map(|i| self.example_for(facts, i % facts.len(), rng))
            .collect()
    }

    pub fn passage_text(&self, f: &Fact) -> String {
        format!(
            "the {} of {} is {} {}",
            first_key(f.first),
            second_key(f.second),
            value(f.values[0]),
            value(f.values[1])
        )
    }

    pub fn query_text(&self, f: &Fact) -> String {
        format!("what is the {} of {}", first_key(f.first), second_key(f.second))
    }

    pub fn answer_text(&self, f: &Fact) -> String {
        format!("{} {}", value(f.values[0]), value(f.values[1]))
    }

    /// Example asking about `facts[gold]` with distractors from the same slice.
    pub fn example_for(&self, facts: &[Fact], gold: usize, rng: &mut impl Rng) -> Example {
        let mut others: Vec<usize> = (0..facts.len()).filter(|&i| i != gold).collect();
        others.shuffle(rng);
        let mut chosen: Vec<usize> = others[..self.config.distractors].to_vec();
        chosen.push(gold);
        chosen.shuffle(rng);
        let f = &facts[gold];
        let mut answer = self.vocab.encode(&self.answer_text(f));
        answer.push(EOS);
        Example {
            query: self.vocab.encode(&self.query_text(f)),
            passages: chosen
                .iter()
                .map(|&i| self.vocab.encode(&self.passage_text(&facts[i])))
                .collect(),
            answer,
        }
    }

    /// A random training example. Values are redrawn for every passage, so
    /// the answer can only come from reading the passage.
    pub fn sample_train(&self, rng: &mut impl Rng) -> Example {
        let facts: Vec<Fact> = self
            .train
            .iter()
            .map(|f| Fact { values: draw_values(self.config.values, rng), ..*f })
            .collect();
        let gold = rng.gen_range(0..facts.len());
        self.example_for(&facts, gold, rng)
    }

    /// Every fact of every split as `(id, passage text)`; ids are positions in
    /// train, dev, test order.
    pub fn corpus(&self) -> Vec<(u64, String)> {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .enumerate()
            .map(|(i, f)| (i as u64, self.passage_text(f)))
            .collect()
    }

    pub fn max_query_len(&self) -> usize {
        6
    }

    pub fn max_passage_len(&self) -> usize {
        7
    }

    /// Answer length including the end token.
    pub fn max_answer_len(&self) -> usize {
        3
    }
}
