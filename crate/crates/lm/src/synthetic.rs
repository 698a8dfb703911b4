//! Deterministic toy corpus of `name=value;` facts.
//!
//! Every split draws lines from one fixed fact table, so held-out perplexity
//! rewards a model for storing the table. Name characters are uniformly
//! random and set an irreducible floor; value characters are predictable
//! only from memory.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactCorpusSpec {
    pub facts: usize,
    pub name_len: usize,
    pub value_len: usize,
    pub alphabet: usize,
    pub train_lines: usize,
    pub valid_lines: usize,
    pub test_lines: usize,
    pub seed: u64,
}

impl Default for FactCorpusSpec {
    fn default() -> Self {
        FactCorpusSpec {
            facts: 512,
            name_len: 3,
            value_len: 3,
            alphabet: 16,
            train_lines: 60_000,
            valid_lines: 3_000,
            test_lines: 3_000,
            seed: 0,
        }
    }
}

fn word(rng: &mut ChaCha8Rng, len: usize, alphabet: usize) -> String {
    (0..len).map(|_| (b'a' + rng.gen_range(0..alphabet) as u8) as char).collect()
}

/// Returns the corpus text and its split offsets `[train_end, valid_end, end]`.
pub fn fact_corpus(spec: &FactCorpusSpec) -> (String, [usize; 3]) {
    assert!((1..=26).contains(&spec.alphabet), "alphabet must use 1..=26 letters");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let capacity = spec.alphabet.pow(spec.name_len as u32);
    assert!(spec.facts <= capacity, "not enough distinct names");
    let mut names = std::collections::BTreeSet::new();
    let mut table = Vec::with_capacity(spec.facts);
    while table.len() < spec.facts {
        let name = word(&mut rng, spec.name_len, spec.alphabet);
        if names.insert(name.clone()) {
            table.push(format!("{name}={};\n", word(&mut rng, spec.value_len, spec.alphabet)));
        }
    }
    let mut text = String::new();
    let mut offsets = [0; 3];
    for (slot, lines) in [spec.train_lines, spec.valid_lines, spec.test_lines].into_iter().enumerate() {
        // every fact appears before any repeats within a pass
        let mut order: Vec<usize> = Vec::with_capacity(lines);
        while order.len() < lines {
            let mut pass: Vec<usize> = (0..spec.facts).collect();
            pass.shuffle(&mut rng);
            order.extend(pass);
        }
        order.truncate(lines);
        for i in order {
            text.push_str(&table[i]);
        }
        offsets[slot] = text.len();
    }
    (text, offsets)
}
