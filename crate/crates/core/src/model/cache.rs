use crate::error::{Error, Result};
use crate::masking::{EntryMeta, SegmentTag};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
struct LayerKv<S> {
    keys: Vec<S>,
    values: Vec<S>,
}

/// Per-layer key/value store. Entry metadata (tag, baked position, origin
/// frame) is shared by all layers, so every layer always holds the same
/// entries in the same order, sorted by position.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<S> {
    dim: usize,
    meta: Vec<EntryMeta>,
    layers: Vec<LayerKv<S>>,
}

/// An entry taken out of the cache, with its per-layer `(key, value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemovedEntry<S> {
    pub meta: EntryMeta,
    pub kv: Vec<(Vec<S>, Vec<S>)>,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(layers: usize, dim: usize) -> Self {
        Self {
            dim,
            meta: Vec::new(),
            layers: (0..layers)
                .map(|_| LayerKv { keys: Vec::new(), values: Vec::new() })
                .collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entries per layer.
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[EntryMeta] {
        &self.meta
    }

    pub fn last_position(&self) -> Option<usize> {
        self.meta.last().map(|m| m.position)
    }

    pub fn count_tag(&self, tag: SegmentTag) -> usize {
        self.meta.iter().filter(|m| m.tag == tag).count()
    }

    #[inline]
    pub fn key(&self, layer: usize, i: usize) -> &[S] {
        &self.layers[layer].keys[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn value(&self, layer: usize, i: usize) -> &[S] {
        &self.layers[layer].values[i * self.dim..(i + 1) * self.dim]
    }

    /// All keys of one layer as an `entries × dim` matrix.
    pub fn layer_keys(&self, layer: usize) -> Matrix<S> {
        Matrix::from_vec(self.meta.len(), self.dim, self.layers[layer].keys.clone()).expect("consistent cache")
    }

    pub fn layer_values(&self, layer: usize) -> Matrix<S> {
        Matrix::from_vec(self.meta.len(), self.dim, self.layers[layer].values.clone()).expect("consistent cache")
    }

    /// Index of the entry with baked position `position`.
    pub fn find_position(&self, position: usize) -> Option<usize> {
        self.meta.binary_search_by_key(&position, |m| m.position).ok()
    }

    /// Appends one entry; `kv` holds one `(key, value)` pair per layer.
    pub fn push(&mut self, meta: EntryMeta, kv: &[(&[S], &[S])]) -> Result<()> {
        if kv.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} layer pairs for a {}-layer cache",
                kv.len(),
                self.layers.len()
            )));
        }
        if let Some(last) = self.last_position() {
            if meta.position <= last {
                return Err(Error::Layout(format!(
                    "entry at position {} does not follow {last}",
                    meta.position
                )));
            }
        }
        for (layer, (k, v)) in self.layers.iter_mut().zip(kv) {
            if k.len() != self.dim || v.len() != self.dim {
                return Err(Error::Shape(format!("kv width {} / {} vs {}", k.len(), v.len(), self.dim)));
            }
            layer.keys.extend_from_slice(k);
            layer.values.extend_from_slice(v);
        }
        self.meta.push(meta);
        Ok(())
    }

    pub fn remove(&mut self, index: usize) -> RemovedEntry<S> {
        let d = self.dim;
        let kv = self
            .layers
            .iter_mut()
            .map(|l| {
                let k = l.keys.drain(index * d..(index + 1) * d).collect();
                let v = l.values.drain(index * d..(index + 1) * d).collect();
                (k, v)
            })
            .collect();
        RemovedEntry { meta: self.meta.remove(index), kv }
    }

    /// Drops every entry whose tag matches.
    pub fn remove_tag(&mut self, tag: SegmentTag) -> usize {
        let mut removed = 0;
        let mut i = 0;
        while i < self.meta.len() {
            if self.meta[i].tag == tag {
                self.remove(i);
                removed += 1;
            } else {
                i += 1;
            }
        }
        removed
    }

    /// Bytes held by keys and values across all layers.
    pub fn bytes(&self) -> usize {
        self.layers.len() * self.meta.len() * 2 * self.dim * std::mem::size_of::<S>()
    }

    /// Bytes held by entries of the given tags only.
    pub fn bytes_where(&self, keep: impl Fn(SegmentTag) -> bool) -> usize {
        let n = self.meta.iter().filter(|m| keep(m.tag)).count();
        self.layers.len() * n * 2 * self.dim * std::mem::size_of::<S>()
    }

    /// Positions strictly increasing and every layer sized consistently.
    pub fn check_invariants(&self) -> Result<()> {
        if self.meta.windows(2).any(|w| w[0].position >= w[1].position) {
            return Err(Error::Layout("cache positions not strictly increasing".into()));
        }
        let n = self.meta.len() * self.dim;
        if self.layers.iter().any(|l| l.keys.len() != n || l.values.len() != n) {
            return Err(Error::Layout("cache layers disagree on entry count".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(tag: SegmentTag, position: usize) -> EntryMeta {
        EntryMeta { tag, position, frame: None }
    }

    #[test]
    fn push_remove_and_accounting() {
        let mut c = KvCache::<f32>::new(2, 2);
        let k = [1.0, 2.0];
        let v = [3.0, 4.0];
        c.push(meta(SegmentTag::System, 0), &[(&k, &v), (&v, &k)]).unwrap();
        c.push(meta(SegmentTag::Carrier, 4), &[(&v, &v), (&k, &k)]).unwrap();
        c.push(meta(SegmentTag::Text, 5), &[(&k, &k), (&k, &k)]).unwrap();
        assert_eq!(c.bytes(), 2 * 3 * 2 * 2 * 4);
        assert_eq!(c.bytes_where(|t| t != SegmentTag::Text), 2 * 2 * 2 * 2 * 4);
        assert_eq!(c.key(1, 1), &k);
        assert_eq!(c.find_position(4), Some(1));

        let removed = c.remove(1);
        assert_eq!(removed.meta.position, 4);
        assert_eq!(removed.kv[0], (v.to_vec(), v.to_vec()));
        assert_eq!(c.len(), 2);
        assert_eq!(c.key(0, 1), &k);
        c.check_invariants().unwrap();

        assert_eq!(c.remove_tag(SegmentTag::Text), 1);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn positions_must_increase() {
        let mut c = KvCache::<f32>::new(1, 1);
        c.push(meta(SegmentTag::System, 3), &[(&[0.0], &[0.0])]).unwrap();
        assert!(c.push(meta(SegmentTag::Text, 3), &[(&[0.0], &[0.0])]).is_err());
    }
}
