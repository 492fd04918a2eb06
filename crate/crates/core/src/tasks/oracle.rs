//! Independent checkers for generated examples.

use std::collections::HashMap;

use super::{Alphabet, Example, MadConfig, MadTask};

/// Layout rule an example must satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grammar {
    /// Key tuples of `key_width` tokens bound to the value that follows;
    /// every scored position ends a previously bound key tuple.
    Recall { key_width: usize },
    /// Scored span reproduces the non-noise tokens before the delimiter.
    Copy,
}

impl Grammar {
    pub fn mqar() -> Self {
        Grammar::Recall { key_width: 1 }
    }

    pub fn of(cfg: &MadConfig) -> Self {
        match cfg.task {
            MadTask::SelectiveCopy => Grammar::Copy,
            MadTask::FuzzyIcr => Grammar::Recall { key_width: cfg.fuzzy_width },
            _ => Grammar::Recall { key_width: 1 },
        }
    }
}

/// Replays the example left to right and checks every scored target.
pub fn check_example(ex: &Example, a: &Alphabet, grammar: Grammar) -> Result<(), String> {
    let n = ex.tokens.len();
    if ex.targets.len() != n || ex.loss_mask.len() != n {
        return Err("field lengths differ".into());
    }
    if !ex.loss_mask.contains(&1) {
        return Err("no scored position".into());
    }
    match grammar {
        Grammar::Recall { key_width: w } => {
            let mut bound: HashMap<&[usize], usize> = HashMap::new();
            for j in 0..n {
                if ex.loss_mask[j] == 1 {
                    if j + 1 < w {
                        return Err(format!("scored position {j} cannot end a key"));
                    }
                    let key = &ex.tokens[j + 1 - w..=j];
                    match bound.get(key) {
                        Some(v) if *v == ex.targets[j] => {}
                        Some(v) => return Err(format!("position {j}: target {} but bound value {v}", ex.targets[j])),
                        None => return Err(format!("position {j}: key {key:?} was never bound")),
                    }
                }
                if j >= w && a.values.contains(&ex.tokens[j]) {
                    let key = &ex.tokens[j - w..j];
                    if key.iter().all(|t| a.keys.contains(t)) {
                        bound.entry(key).or_insert(ex.tokens[j]);
                    }
                }
            }
            Ok(())
        }
        Grammar::Copy => {
            let delim = ex
                .tokens
                .iter()
                .position(|t| *t == a.delimiter)
                .ok_or_else(|| "no delimiter".to_string())?;
            let content: Vec<usize> = ex.tokens[..delim].iter().copied().filter(|t| !a.noise.contains(t)).collect();
            let scored: Vec<usize> = ex.scored().map(|j| ex.targets[j]).collect();
            if scored != content {
                return Err(format!("reproduced {scored:?}, content was {content:?}"));
            }
            if ex.scored().next() != Some(delim) {
                return Err("reproduction does not start at the delimiter".into());
            }
            Ok(())
        }
    }
}

/// Every token falls in exactly one alphabet and no scored target is a
/// noise or reserved token.
pub fn check_alphabets(ex: &Example, a: &Alphabet) -> Result<(), String> {
    let classes = |t: usize| {
        [t == a.pad, t == a.placeholder, t == a.delimiter, a.noise.contains(&t), a.keys.contains(&t), a.values.contains(&t)]
            .iter()
            .filter(|b| **b)
            .count()
    };
    for (j, &t) in ex.tokens.iter().enumerate() {
        if classes(t) != 1 {
            return Err(format!("token {t} at {j} is in {} alphabets", classes(t)));
        }
    }
    for j in ex.scored() {
        let t = ex.targets[j];
        if !(a.keys.contains(&t) || a.values.contains(&t)) {
            return Err(format!("scored target {t} at {j} is not a key or value"));
        }
    }
    Ok(())
}
