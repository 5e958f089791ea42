use super::kernels::{log_sum_exp, softmax_in_place};
use super::LogitsGrid;
use crate::error::{Error, Result};

/// Loss value, per-example losses, and `∂loss/∂logits`.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    pub per_example: Vec<Option<f64>>,
    pub dlogits: LogitsGrid,
}

/// Mean negative log-likelihood of the clean token over each sequence's
/// mask set, normalized by that set's size, then averaged over the
/// sequences whose mask set is non-empty.
pub fn masked_cross_entropy(grid: &LogitsGrid, targets: &[&[u32]], masks: &[&[usize]]) -> Result<CrossEntropy> {
    let batch = grid.batch_size();
    if targets.len() != batch || masks.len() != batch {
        return Err(Error::Precondition(format!(
            "batch of {batch} logits with {} targets and {} mask sets",
            targets.len(),
            masks.len()
        )));
    }
    let active = masks.iter().filter(|m| !m.is_empty()).count();
    if active == 0 {
        return Err(Error::UndefinedLoss);
    }
    let v = grid.vocab_size();
    let mut dlogits = LogitsGrid::new(v, (0..batch).map(|b| vec![0.0; grid.seq(b).len()]).collect())?;
    let mut per_example = Vec::with_capacity(batch);
    let mut total = 0.0;
    for b in 0..batch {
        let mask = masks[b];
        if mask.is_empty() {
            per_example.push(None);
            continue;
        }
        let len = grid.seq_len(b);
        if targets[b].len() != len {
            return Err(Error::Precondition(format!(
                "target length {} differs from logits length {len}",
                targets[b].len()
            )));
        }
        let scale = 1.0 / (mask.len() as f64 * active as f64);
        let mut sum = 0.0;
        let d = dlogits.seq_mut(b);
        for &pos in mask {
            if pos >= len {
                return Err(Error::Precondition(format!("mask position {pos} outside length {len}")));
            }
            let y = targets[b][pos] as usize;
            if y >= v {
                return Err(Error::Precondition(format!("target id {y} out of vocab")));
            }
            let row = grid.row(b, pos);
            sum += log_sum_exp(row) - row[y];
            let drow = &mut d[pos * v..(pos + 1) * v];
            drow.copy_from_slice(row);
            softmax_in_place(drow);
            drow[y] -= 1.0;
            drow.iter_mut().for_each(|g| *g *= scale);
        }
        let example = sum / mask.len() as f64;
        per_example.push(Some(example));
        total += example;
    }
    Ok(CrossEntropy {
        loss: total / active as f64,
        per_example,
        dlogits,
    })
}
