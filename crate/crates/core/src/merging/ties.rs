//! Trim, elect sign, disjoint mean.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{add_to_pre, check_taus, TaskVector};

/// Whether the top-`k` magnitude cut is taken over the whole task vector or
/// separately inside each tensor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiesTrim {
    #[default]
    Global,
    PerTensor,
}

/// Keep the `round(k·n)` largest-magnitude entries, earlier index first on ties.
fn keep_mask<T: Scalar>(values: &[T], k: f64) -> Vec<bool> {
    let keep = (k * values.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .expect("finite")
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; values.len()];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    mask
}

fn trim<T: Scalar>(tau: &TaskVector<T>, k: f64, mode: TiesTrim) -> Result<TaskVector<T>> {
    match mode {
        TiesTrim::PerTensor => tau.map_values(|_, v| {
            let m = keep_mask(v, k);
            v.iter().zip(m).map(|(&x, keep)| if keep { x } else { T::zero() }).collect()
        }),
        TiesTrim::Global => {
            let flat: Vec<T> = tau.deltas.values().flat_map(|t| t.data().iter().copied()).collect();
            let mask = keep_mask(&flat, k);
            let mut off = 0;
            tau.map_values(|_, v| {
                let out = v
                    .iter()
                    .zip(&mask[off..off + v.len()])
                    .map(|(&x, &keep)| if keep { x } else { T::zero() })
                    .collect();
                off += v.len();
                out
            })
        }
    }
}

pub fn merge_ties<T: Scalar>(
    pre: &Checkpoint<T>,
    taus: &[TaskVector<T>],
    k: f64,
    lambda: f64,
) -> Result<Checkpoint<T>> {
    merge_ties_with(pre, taus, k, lambda, TiesTrim::Global)
}

/// Per coordinate: the elected sign is the sign of the summed trimmed values
/// (zero counts as positive); the merged value is the mean of the trimmed
/// values carrying that sign, or zero if none do.
pub fn merge_ties_with<T: Scalar>(
    pre: &Checkpoint<T>,
    taus: &[TaskVector<T>],
    k: f64,
    lambda: f64,
    mode: TiesTrim,
) -> Result<Checkpoint<T>> {
    check_taus(pre, taus)?;
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::InvalidArgument(format!("TIES k must lie in (0, 1], got {k}")));
    }
    let trimmed = taus.iter().map(|t| trim(t, k, mode)).collect::<Result<Vec<_>>>()?;
    let l = T::lit(lambda);
    add_to_pre(pre, format!("merge ties n={} k={k} lambda={lambda}", taus.len()), |name, i| {
        let vals = trimmed.iter().map(|t| t.deltas[name].data()[i]);
        let positive = vals.clone().fold(T::zero(), |a, v| a + v) >= T::zero();
        let (sum, count) = vals
            .filter(|&v| if positive { v > T::zero() } else { v < T::zero() })
            .fold((T::zero(), 0usize), |(s, c), v| (s + v, c + 1));
        if count == 0 {
            T::zero()
        } else {
            sum / T::of_usize(count) * l
        }
    })
}
