use crate::error::{Error, Result};
use crate::tensor::kernels::HeadLayout;
use crate::tensor::{Scalar, Tensor};

/// Per-layer key/value store shared by the backbone and the consolidator.
///
/// Keys are stored after rotary rotation, row-major `[len, n_heads * d_head]`
/// per layer.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    layout: HeadLayout,
    capacity: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    is_latent: Vec<bool>,
    position_ids: Vec<usize>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize, layout: HeadLayout, capacity: usize) -> Self {
        KvCache {
            layout,
            capacity,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            is_latent: Vec::new(),
            position_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `n_layers · len · n_heads · d_head · 2 · sizeof(dtype)`.
    pub fn byte_count(&self) -> usize {
        Self::bytes_for(self.n_layers(), self.len(), self.layout)
    }

    /// Closed-form footprint of a cache with `len` positions.
    pub fn bytes_for(n_layers: usize, len: usize, layout: HeadLayout) -> usize {
        n_layers * len * layout.d_model() * 2 * T::DTYPE.size_of()
    }

    pub fn keys(&self, layer: usize) -> &[T] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.values[layer]
    }

    /// Copy of a layer's keys as `[len, n_heads, d_head]`.
    pub fn keys_tensor(&self, layer: usize) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.len(), self.layout.n_heads, self.layout.d_head],
            self.keys[layer].clone(),
        )
    }

    pub fn values_tensor(&self, layer: usize) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.len(), self.layout.n_heads, self.layout.d_head],
            self.values[layer].clone(),
        )
    }

    pub fn is_latent(&self) -> &[bool] {
        &self.is_latent
    }

    pub fn position_ids(&self) -> &[usize] {
        &self.position_ids
    }

    pub fn next_position(&self) -> usize {
        self.position_ids.last().map_or(0, |p| p + 1)
    }

    /// Fails if `extra` more positions would exceed capacity.
    pub fn ensure_room(&self, extra: usize) -> Result<()> {
        let requested = self.len() + extra;
        if requested > self.capacity {
            return Err(Error::Capacity {
                requested,
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    pub(crate) fn push_layer(&mut self, layer: usize, keys: &[T], values: &[T]) {
        self.keys[layer].extend_from_slice(keys);
        self.values[layer].extend_from_slice(values);
    }

    /// Commits position bookkeeping after every layer has been extended.
    pub(crate) fn commit_positions(&mut self, latent_flags: &[bool]) {
        for &flag in latent_flags {
            let pos = self.next_position();
            self.position_ids.push(pos);
            self.is_latent.push(flag);
        }
        debug_assert!(self
            .keys
            .iter()
            .all(|k| k.len() == self.len() * self.layout.d_model()));
    }
}
