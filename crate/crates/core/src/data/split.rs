use crate::error::{Error, Result};
use crate::graph::{Interaction, InteractionLog, ItemId, UserId};

use super::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Last item per user for test, second-to-last for validation.
    LeaveOneOut,
    /// Two global cut points: training before `valid_from`, validation
    /// targets in `[valid_from, test_from)`, test targets from `test_from`.
    Timestamp { valid_from: i64, test_from: i64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: InteractionLog,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

fn items(seq: &[Interaction]) -> Vec<ItemId> {
    seq.iter().map(|x| x.item).collect()
}

pub fn split(log: &InteractionLog, mode: SplitMode) -> Result<Split> {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    match mode {
        SplitMode::LeaveOneOut => {
            for (user, seq) in log.users() {
                let n = seq.len();
                let ids = items(seq);
                match n {
                    0 => {}
                    1 => train.push((user, seq.to_vec())),
                    2 => {
                        train.push((user, seq[..1].to_vec()));
                        test.push(Example { user, history: ids[..1].to_vec(), target: ids[1] });
                    }
                    _ => {
                        train.push((user, seq[..n - 2].to_vec()));
                        valid.push(Example { user, history: ids[..n - 2].to_vec(), target: ids[n - 2] });
                        test.push(Example { user, history: ids[..n - 1].to_vec(), target: ids[n - 1] });
                    }
                }
            }
        }
        SplitMode::Timestamp { valid_from, test_from } => {
            if valid_from > test_from {
                return Err(Error::InvalidParameter(format!(
                    "validation cut {valid_from} is after test cut {test_from}"
                )));
            }
            for (user, seq) in log.users() {
                let ids = items(seq);
                let before_valid = seq.iter().take_while(|x| x.timestamp < valid_from).count();
                if before_valid > 0 {
                    train.push((user, seq[..before_valid].to_vec()));
                }
                let first_valid = seq.iter().position(|x| x.timestamp >= valid_from && x.timestamp < test_from);
                if let Some(k) = first_valid.filter(|&k| k > 0) {
                    valid.push(Example { user, history: ids[..k].to_vec(), target: ids[k] });
                }
                let first_test = seq.iter().position(|x| x.timestamp >= test_from);
                if let Some(k) = first_test.filter(|&k| k > 0) {
                    test.push(Example { user, history: ids[..k].to_vec(), target: ids[k] });
                }
            }
        }
    }
    let train = InteractionLog::from_users(train);
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    Ok(Split { train, valid, test })
}

/// Next-item instances from training sequences: the last `prefixes` positions
/// of each user (0 means every position). Users are visited in id order.
pub fn training_examples(train: &InteractionLog, prefixes: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for (user, seq) in train.users() {
        let ids = items(seq);
        let first = if prefixes == 0 { 1 } else { ids.len().saturating_sub(prefixes).max(1) };
        for j in first..ids.len() {
            out.push(Example { user: UserId(user.0), history: ids[..j].to_vec(), target: ids[j] });
        }
    }
    out
}
