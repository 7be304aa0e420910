//! Key/value blending with condition tokens.
//!
//! A condition token's key/value column at position `p` is what the model
//! produces when that token alone is fed at position `p`. Every cached
//! column is blended with the condition columns for its own position:
//!
//! ```text
//! kv'_p = (kv_p + Σ w_i(s) · kv_{c_i, p}) / (1 + Σ w_i(s)),   w_i(s) = w_i / (1 + s)
//! ```
//!
//! where `s` is the number of tokens generated so far.

use crate::conditioning::{check_weight, WeightedToken};
use crate::error::{Error, Result};
use crate::model::{KVCache, KvColumn, TokenId, Transformer};

/// Single-token forward pass on an empty cache at `position`.
pub fn condition_kv(model: &Transformer<'_>, token: TokenId, position: usize) -> Result<KvColumn> {
    let mut cache = KVCache::new(model.config());
    model.forward_step_kv(&mut cache, token, position)?;
    Ok(cache.column(0))
}

/// Condition columns memoized by position; each depends only on the model,
/// the token and the position.
#[derive(Debug, Clone)]
pub struct ConditionKvTable {
    conditions: Vec<WeightedToken>,
    columns: Vec<Vec<Option<KvColumn>>>,
}

impl ConditionKvTable {
    pub fn new(conditions: &[WeightedToken]) -> Result<Self> {
        for c in conditions {
            check_weight(c.weight)?;
        }
        Ok(Self {
            conditions: conditions.to_vec(),
            columns: vec![Vec::new(); conditions.len()],
        })
    }

    pub fn conditions(&self) -> &[WeightedToken] {
        &self.conditions
    }

    /// Computes any missing columns for the given positions.
    pub fn prepare(&mut self, model: &Transformer<'_>, positions: &[usize]) -> Result<()> {
        for (cond, cols) in self.conditions.iter().zip(self.columns.iter_mut()) {
            if cond.weight == 0.0 {
                continue;
            }
            for &p in positions {
                if cols.len() <= p {
                    cols.resize(p + 1, None);
                }
                if cols[p].is_none() {
                    cols[p] = Some(condition_kv(model, cond.token_id, p)?);
                }
            }
        }
        Ok(())
    }

    pub fn column(&self, condition: usize, position: usize) -> Option<&KvColumn> {
        self.columns[condition]
            .get(position)
            .and_then(Option::as_ref)
    }
}

/// Blends every cached column with the prepared condition columns, using
/// weights decayed for generation step `step`.
pub fn blend_kv(cache: &KVCache, table: &ConditionKvTable, step: usize) -> Result<KVCache> {
    let decay = 1.0 / (1.0 + step as f64);
    let active: Vec<(usize, f64)> = table
        .conditions
        .iter()
        .enumerate()
        .filter(|(_, c)| c.weight > 0.0)
        .map(|(i, c)| (i, c.weight * decay))
        .collect();
    let mut out = cache.clone();
    if active.is_empty() || cache.is_empty() {
        return Ok(out);
    }
    let norm = 1.0 + active.iter().map(|(_, w)| w).sum::<f64>();

    let columns: Vec<Vec<(&KvColumn, f64)>> = cache
        .positions()
        .iter()
        .map(|&p| {
            active
                .iter()
                .map(|&(i, w)| {
                    table.column(i, p).map(|col| (col, w)).ok_or_else(|| {
                        Error::usage(format!("condition column for position {p} not prepared"))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    for layer in 0..cache.n_layers() {
        blend_rows(out.layer_keys_mut(layer), &columns, norm, |c| {
            &c.keys[layer]
        });
        blend_rows(out.layer_values_mut(layer), &columns, norm, |c| {
            &c.values[layer]
        });
    }
    Ok(out)
}

fn blend_rows<'a>(
    rows: &mut [f32],
    columns: &[Vec<(&'a KvColumn, f64)>],
    norm: f64,
    pick: impl Fn(&'a KvColumn) -> &'a [f32],
) {
    let d = rows.len() / columns.len();
    for (row, conds) in rows.chunks_exact_mut(d).zip(columns) {
        for (j, x) in row.iter_mut().enumerate() {
            let mut acc = *x as f64;
            for &(col, w) in conds {
                acc += w * pick(col)[j] as f64;
            }
            *x = (acc / norm) as f32;
        }
    }
}
