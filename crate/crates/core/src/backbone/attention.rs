use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use super::{Mode, Model};
use crate::error::Result;
use crate::graph::ItemId;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    Context,
    History,
    Reasoning,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Context => "context",
            Region::History => "history",
            Region::Reasoning => "reasoning",
        })
    }
}

/// Attention averaged over a batch in slot coordinates: context slots by
/// candidate rank, history slots right-aligned, reasoning slots by step.
/// A cell averages over the samples that contain both its query and key slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub labels: Vec<(Region, usize)>,
    /// `[layer][head][query][key]`
    pub scores: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionMaps {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "layer,head,query_index,key_index,query_region,key_region,score")?;
        for (l, heads) in self.scores.iter().enumerate() {
            for (h, m) in heads.iter().enumerate() {
                for (qi, row) in m.iter().enumerate() {
                    for (ki, score) in row.iter().enumerate() {
                        let (qr, kr) = (self.labels[qi].0, self.labels[ki].0);
                        writeln!(w, "{l},{h},{qi},{ki},{qr},{kr},{score}")?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// One sample: context items, history, and the number of reasoning tokens to append.
pub type AttentionSample = (Vec<ItemId>, Vec<ItemId>, usize);

pub fn export_attention<S: Scalar>(model: &Model<S>, batch: &[AttentionSample]) -> Result<AttentionMaps> {
    let cfg = model.config();
    let mut per_sample = Vec::with_capacity(batch.len());
    for (context, history, steps) in batch {
        let mut fwd = model.forward(Mode::Inspect);
        let hidden = fwd.encode_prefix(context, history)?;
        let mut r = fwd.initial_state(hidden)?;
        for _ in 0..*steps {
            let scaled = fwd.rescale(r)?;
            r = fwd.append_state(scaled)?;
        }
        let mut labels = Vec::new();
        labels.extend((0..context.len()).map(|s| (Region::Context, s)));
        let offset = cfg.max_history - history.len();
        labels.extend((0..history.len()).map(|s| (Region::History, offset + s)));
        labels.extend((0..*steps).map(|s| (Region::Reasoning, s)));
        let rows = fwd.take_attention().unwrap_or_default();
        per_sample.push((labels, rows));
    }

    let all: BTreeSet<(Region, usize)> = per_sample.iter().flat_map(|(l, _)| l.iter().copied()).collect();
    let labels: Vec<(Region, usize)> = all.into_iter().collect();
    let pos = |lab: &(Region, usize)| labels.binary_search(lab).expect("label collected above");
    let n = labels.len();
    let mut sums = vec![vec![vec![vec![0.0; n]; n]; cfg.heads]; cfg.layers];
    let mut counts = vec![vec![0usize; n]; n];
    for (sample_labels, rows) in &per_sample {
        let idx: Vec<usize> = sample_labels.iter().map(pos).collect();
        for &qi in &idx {
            for &ki in &idx {
                counts[qi][ki] += 1;
            }
        }
        for (l, heads) in rows.iter().enumerate() {
            for (h, head_rows) in heads.iter().enumerate() {
                for (query, weights) in head_rows {
                    for (key, w) in weights.iter().enumerate() {
                        sums[l][h][idx[*query]][idx[key]] += w.as_f64();
                    }
                }
            }
        }
    }
    for heads in sums.iter_mut() {
        for m in heads.iter_mut() {
            for (qi, row) in m.iter_mut().enumerate() {
                for (ki, v) in row.iter_mut().enumerate() {
                    if counts[qi][ki] > 0 {
                        *v /= counts[qi][ki] as f64;
                    }
                }
            }
        }
    }
    Ok(AttentionMaps { labels, scores: sums })
}
