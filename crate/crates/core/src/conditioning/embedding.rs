use crate::conditioning::{check_weight, total_weight, WeightedToken};
use crate::error::{Error, Result};

/// Returns a copy of the `[V × d]` input table where every row becomes
/// `(e_v + Σ w_i · e_{t_i}) / (1 + Σ w_i)`.
pub fn blend_input_embeddings(
    table: &[f32],
    embed_dim: usize,
    conditions: &[WeightedToken],
) -> Result<Vec<f32>> {
    let vocab = table.len() / embed_dim;
    for c in conditions {
        check_weight(c.weight)?;
        if c.token_id as usize >= vocab {
            return Err(Error::Vocabulary {
                id: c.token_id,
                vocab_size: vocab,
            });
        }
    }
    let total = total_weight(conditions);
    if total == 0.0 {
        return Ok(table.to_vec());
    }

    let mut shift = vec![0.0f64; embed_dim];
    for c in conditions {
        let row = &table[c.token_id as usize * embed_dim..(c.token_id as usize + 1) * embed_dim];
        for (s, &e) in shift.iter_mut().zip(row) {
            *s += c.weight * e as f64;
        }
    }
    let norm = 1.0 + total;
    Ok(table
        .chunks_exact(embed_dim)
        .flat_map(|row| {
            row.iter()
                .zip(&shift)
                .map(|(&e, &s)| ((e as f64 + s) / norm) as f32)
        })
        .collect())
}
