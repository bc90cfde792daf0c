use std::path::Path;

use crate::model::{checkpoint, ParameterStore};
use crate::{Error, Result};

/// Elementwise mean of stores with identical configs.
pub fn average_stores(stores: &[ParameterStore]) -> Result<ParameterStore> {
    let first = stores.first().ok_or_else(|| Error::invalid("no checkpoints to average"))?;
    if let Some(i) = stores.iter().position(|s| s.config() != first.config()) {
        return Err(Error::Config(format!("checkpoint {i} has a different model config")));
    }
    let n = stores.len() as f64;
    let mut out = first.clone();
    for key in 0..out.params().len() {
        let dst = out.get_mut(key).data_mut();
        for s in &stores[1..] {
            for (d, v) in dst.iter_mut().zip(s.get(key).data()) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d /= n;
        }
    }
    Ok(out)
}

/// Loads and averages checkpoint files.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<ParameterStore> {
    let stores = paths.iter().map(checkpoint::load).collect::<Result<Vec<_>>>()?;
    average_stores(&stores)
}
