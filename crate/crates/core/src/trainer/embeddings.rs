//! Plain-text pretrained vectors, one `token v1 ... vd` line each.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::{io_error, Result, TrainError};
use crate::autodiff::{ParamId, ParamStore};
use crate::corpus::Vocab;

/// Copies vectors of tokens known to `vocab` into rows of the embedding
/// `table`. Returns how many rows were set.
pub fn load_embeddings(path: &Path, vocab: &Vocab, store: &mut ParamStore, table: ParamId) -> Result<usize> {
    let file = File::open(path).map_err(io_error(path))?;
    let dim = store.value(table).shape()[1];
    let mut loaded = 0;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| TrainError::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", n + 1),
            })?;
        if values.len() != dim {
            return Err(TrainError::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {} values for {dim}-dimensional embeddings", n + 1, values.len()),
            });
        }
        if let Some(id) = vocab.get(token) {
            let t = store.value_mut(table);
            t.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
            loaded += 1;
        }
    }
    Ok(loaded)
}
