use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Persistent per-stream key/value cache, one region per layer.
///
/// Keys are stored after rotary encoding. The region only grows by appending
/// frozen-route rows at the end of a forward and shrinks by truncation; mask
/// rows never land here.
#[derive(Debug, Clone, PartialEq)]
pub struct KvStore<S> {
    d_model: usize,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

impl<S: Scalar> KvStore<S> {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        Self { d_model, keys: vec![Vec::new(); n_layers], values: vec![Vec::new(); n_layers], len: 0 }
    }

    /// Committed positions held in every layer.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn key(&self, layer: usize, pos: usize) -> &[S] {
        &self.keys[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }

    pub fn value(&self, layer: usize, pos: usize) -> &[S] {
        &self.values[layer][pos * self.d_model..(pos + 1) * self.d_model]
    }

    /// Appends `rows` positions to every layer at once.
    pub(crate) fn append(&mut self, keys: Vec<Vec<S>>, values: Vec<Vec<S>>, rows: usize) {
        debug_assert_eq!(keys.len(), self.n_layers());
        for (l, (k, v)) in keys.into_iter().zip(values).enumerate() {
            debug_assert_eq!(k.len(), rows * self.d_model);
            self.keys[l].extend(k);
            self.values[l].extend(v);
        }
        self.len += rows;
    }

    /// Drops every position at or beyond `new_len` in all layers.
    pub fn truncate(&mut self, new_len: usize) -> Result<()> {
        if new_len > self.len {
            return Err(Error::Kv(format!("cannot truncate length {} to {new_len}", self.len)));
        }
        let keep = new_len * self.d_model;
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(keep);
            v.truncate(keep);
        }
        self.len = new_len;
        Ok(())
    }
}
