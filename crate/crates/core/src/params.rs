//! Named parameter buffers.
//!
//! Networks build their weights into a [`ParamSet`] in a deterministic
//! order; optimizers address parameters by position, and each optimization
//! step registers every buffer as a tape leaf in the same order.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamBuf<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<F> {
    bufs: Vec<ParamBuf<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { bufs: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = ParamId(self.bufs.len());
        self.bufs.push(ParamBuf { name: name.into(), shape, data });
        id
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamBuf<F> {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamBuf<F> {
        &mut self.bufs[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamBuf<F>> {
        self.bufs.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamBuf<F>> {
        self.bufs.iter_mut()
    }

    pub fn total_values(&self) -> usize {
        self.bufs.iter().map(|b| b.data.len()).sum()
    }

    /// Registers every buffer as a gradient-requiring tape leaf, in id order.
    pub fn register(&self, tape: &mut Tape<F>) -> Result<Vec<Tensor<F>>> {
        self.bufs
            .iter()
            .map(|b| tape.leaf(b.shape.clone(), b.data.clone()))
            .collect()
    }

    /// FNV-1a over the exact bit patterns of every value; used to assert
    /// that an update step did (or did not) touch this set.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut bytes = Vec::new();
        for b in &self.bufs {
            bytes.clear();
            for v in &b.data {
                v.write_le(&mut bytes);
            }
            for &byte in &bytes {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_changes_with_any_value() {
        let mut p = ParamSet::<f32>::new();
        let id = p.add("w", vec![2], vec![1.0, 2.0]);
        let before = p.checksum();
        p.get_mut(id).data[1] = 2.0000002;
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn register_preserves_order_and_values() {
        let mut p = ParamSet::<f32>::new();
        p.add("a", vec![1], vec![3.0]);
        p.add("b", vec![2], vec![4.0, 5.0]);
        let mut tape = Tape::new();
        let leaves = p.register(&mut tape).unwrap();
        assert_eq!(leaves.len(), 2);
        assert_eq!(leaves[0].data(), &[3.0]);
        assert_eq!(leaves[1].data(), &[4.0, 5.0]);
    }
}
